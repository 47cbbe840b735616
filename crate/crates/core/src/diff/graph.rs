use std::sync::Arc;

use super::optim::{ParamId, ParameterStore};
use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    MaskedFill { a: Var, mask: Arc<Vec<bool>> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherLogProb { logits: Var, targets: Vec<usize>, softmax: Vec<f64> },
    WeightedLogProb { logits: Var, weights: Arc<Tensor>, softmax: Vec<f64> },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, summed when a parameter was used more than once.
    pub fn parameters(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, n)| self.by_node[n].as_ref().map(|g| (id, g)))
    }
}

fn shape_err(msg: impl Into<String>) -> DiffError {
    DiffError::ShapeMismatch(msg.into())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let o = i + n - shape.len();
        if shape[i] != 1 {
            strides[o] = s;
        }
        s *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Same,
    /// the smaller operand repeats over the larger one
    RepeatA,
    RepeatB,
    General,
}

fn layout(a: &[usize], b: &[usize]) -> Layout {
    if a == b {
        Layout::Same
    } else if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Layout::RepeatB
    } else if a.len() <= b.len() && b[b.len() - a.len()..] == *a {
        Layout::RepeatA
    } else {
        Layout::General
    }
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c[m,n] (+)= a[m,k] b[k,n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the callers pass slices that cover every strided access of an
    // m x k, k x n and m x n (row-major, contiguous) operand respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| shape_err(format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = match layout(ta.shape(), tb.shape()) {
            Layout::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Layout::RepeatB => {
                let nb = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect()
            }
            Layout::RepeatA => {
                let na = da.len();
                db.iter().enumerate().map(|(i, &y)| f(da[i % na], y)).collect()
            }
            Layout::General => {
                let total = out_shape.iter().product();
                let mut out = vec![0.0; total];
                let sa = broadcast_strides(ta.shape(), &out_shape);
                let sb = broadcast_strides(tb.shape(), &out_shape);
                for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
                out
            }
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), ng))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| x + c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Gelu => gelu,
            Unary::Relu => |x| x.max(0.0),
        };
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Unary(kind, a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either a shared `[k, n]` matrix or has the
    /// same leading axes as `a`. With `trans_b` the last two axes of `b` are
    /// read transposed (`[.., n, k]`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(format!("matmul needs matrices, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared = sb.len() == 2;
        if kb != k || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        if shared {
            gemm(batch * m, k, n, ta.data(), k as isize, 1, tb.data(), rsb, csb, &mut out, false);
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[bi * m * k..],
                    k as isize,
                    1,
                    &tb.data()[bi * k * n..],
                    rsb,
                    csb,
                    &mut out[bi * m * n..],
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, trans_b }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let w = *t.shape().last().unwrap_or(&1);
        let out = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), w)).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let w = *t.shape().last().unwrap_or(&1);
        let out = Tensor::new(t.shape().to_vec(), log_softmax_rows(t.data(), w)).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Rows of `table` (`[vocab, d]`) selected by `indices`, giving `[len, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 {
            return Err(shape_err("embedding table must be 2-d"));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(shape_err(format!("embedding index {i} out of range {vocab}")));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err(format!("slice {start}..{end} of axis {axis} in {shape:?}")));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { a, axis, start }, ng))
    }

    /// Sets entries where `mask` (laid over the last two axes) is true to `value`.
    pub fn masked_fill(&mut self, a: Var, mask: Arc<Vec<bool>>, value: f64) -> Result<Var, DiffError> {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        if shape.len() < 2 || mask.len() != shape[shape.len() - 1] * shape[shape.len() - 2] {
            return Err(shape_err(format!("mask of {} entries for {shape:?}", mask.len())));
        }
        let ml = mask.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % ml] { value } else { x })
            .collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MaskedFill { a, mask }, ng))
    }

    /// Normalizes the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, DiffError> {
        let t = &self.nodes[x.0].value;
        let d = *t.shape().last().unwrap_or(&0);
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(shape_err(format!("layer norm over {d} with gamma {:?}", g.shape())));
        }
        let rows = t.len() / d.max(1);
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g.data()[i] + b.data()[i];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// `log softmax(logits)[.., target]` for one target per row of the last axis.
    pub fn gather_log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let t = &self.nodes[logits.0].value;
        let v = *t.shape().last().unwrap_or(&0);
        let rows = t.len() / v.max(1);
        if targets.len() != rows || targets.iter().any(|&c| c >= v) {
            return Err(shape_err(format!("{} targets for {rows} rows of width {v}", targets.len())));
        }
        let lsm = log_softmax_rows(t.data(), v);
        let out: Vec<f64> = targets.iter().enumerate().map(|(r, &c)| lsm[r * v + c]).collect();
        let softmax = lsm.iter().map(|l| l.exp()).collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GatherLogProb {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
            ng,
        ))
    }

    /// Scalar `sum(weights * log_softmax(logits))`; `weights` has the shape of `logits`.
    pub fn weighted_log_prob(&mut self, logits: Var, weights: Tensor) -> Result<Var, DiffError> {
        let t = &self.nodes[logits.0].value;
        if weights.shape() != t.shape() {
            return Err(shape_err(format!("weights {:?} for logits {:?}", weights.shape(), t.shape())));
        }
        let v = *t.shape().last().unwrap_or(&0);
        let lsm = log_softmax_rows(t.data(), v);
        let total: f64 = lsm
            .iter()
            .zip(weights.data())
            .map(|(l, w)| if *w == 0.0 { 0.0 } else { l * w })
            .sum();
        let softmax = lsm.iter().map(|l| l.exp()).collect();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedLogProb {
                logits,
                weights: Arc::new(weights),
                softmax,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, DiffError> {
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(t.data(), shape, perm);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, DiffError> {
        let nodes = self.nodes;
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", nodes[loss.0].value.shape())));
        }
        if !nodes[loss.0].needs_grad {
            return Err(DiffError::DisconnectedGraph);
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params: Vec<(ParamId, usize)> = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { by_node: grads, params })
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let zero = vec![0usize; nd];
    for_each_broadcast(&out_shape, &strides, &zero, |o, ia, _| out[o] = data[ia]);
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back to `shape`.
fn reduce_to(g: &Tensor, out_shape: &[usize], shape: &[usize], scale_by: Option<(&[f64], &[usize])>) -> Tensor {
    let mut acc = vec![0.0; shape.iter().product()];
    let s_own = broadcast_strides(shape, out_shape);
    match scale_by {
        None => {
            let zero = vec![0usize; out_shape.len()];
            for_each_broadcast(out_shape, &s_own, &zero, |o, i, _| acc[i] += g.data()[o]);
        }
        Some((other, other_shape)) => {
            let s_other = broadcast_strides(other_shape, out_shape);
            for_each_broadcast(out_shape, &s_own, &s_other, |o, i, j| acc[i] += g.data()[o] * other[j]);
        }
    }
    Tensor::new(shape.to_vec(), acc).expect("reduced shape")
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    let like = |v: Var, data: Vec<f64>| Tensor::new(nodes[v.0].value.shape().to_vec(), data).expect("grad shape");
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (a, b) = (*a, *b);
            let out_shape = node.value.shape();
            let (sa, sb) = (val(a).shape().to_vec(), val(b).shape().to_vec());
            match kind {
                Binary::Add | Binary::Sub => {
                    if nodes[a.0].needs_grad {
                        let ga = if sa == out_shape { g.clone() } else { reduce_to(g, out_shape, &sa, None) };
                        accumulate(grads, nodes, a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = if sb == out_shape { g.clone() } else { reduce_to(g, out_shape, &sb, None) };
                        if matches!(kind, Binary::Sub) {
                            gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(grads, nodes, b, gb);
                    }
                }
                Binary::Mul => {
                    if nodes[a.0].needs_grad {
                        let ga = if sa == out_shape && sb == out_shape {
                            like(a, g.data().iter().zip(val(b).data()).map(|(x, y)| x * y).collect())
                        } else {
                            reduce_to(g, out_shape, &sa, Some((val(b).data(), &sb)))
                        };
                        accumulate(grads, nodes, a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        let gb = if sa == out_shape && sb == out_shape {
                            like(b, g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).collect())
                        } else {
                            reduce_to(g, out_shape, &sb, Some((val(a).data(), &sa)))
                        };
                        accumulate(grads, nodes, b, gb);
                    }
                }
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, like(*a, g.data().iter().map(|x| x * c).collect())),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Unary(kind, a) => {
            let x = val(*a).data();
            let y = node.value.data();
            let d: Vec<f64> = match kind {
                Unary::Tanh => g.data().iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                Unary::Sigmoid => g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                Unary::Exp => g.data().iter().zip(y).map(|(g, y)| g * y).collect(),
                Unary::Log => g.data().iter().zip(x).map(|(g, x)| g / x).collect(),
                Unary::Gelu => g.data().iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect(),
                Unary::Relu => g.data().iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            };
            accumulate(grads, nodes, *a, like(*a, d));
        }
        Op::MatMul { a, b, trans_b } => {
            let (a, b, trans_b) = (*a, *b, *trans_b);
            let (ta, tb) = (val(a), val(b));
            let sa = ta.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = *node.value.shape().last().unwrap();
            let shared = tb.shape().len() == 2;
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let gd = g.data();
            if nodes[a.0].needs_grad {
                // dA = dC B^T  (or dC B when b is read transposed)
                let mut da = vec![0.0; ta.len()];
                let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                if shared {
                    gemm(batch * m, n, k, gd, n as isize, 1, tb.data(), rsb, csb, &mut da, false);
                } else {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..],
                            n as isize,
                            1,
                            &tb.data()[bi * k * n..],
                            rsb,
                            csb,
                            &mut da[bi * m * k..],
                            false,
                        );
                    }
                }
                accumulate(grads, nodes, a, like(a, da));
            }
            if nodes[b.0].needs_grad {
                let mut db = vec![0.0; tb.len()];
                if shared {
                    let rows = batch * m;
                    if trans_b {
                        // dB[n,k] = dC^T A
                        gemm(n, rows, k, gd, 1, n as isize, ta.data(), k as isize, 1, &mut db, false);
                    } else {
                        // dB[k,n] = A^T dC
                        gemm(k, rows, n, ta.data(), 1, k as isize, gd, n as isize, 1, &mut db, false);
                    }
                } else {
                    for bi in 0..batch {
                        let ad = &ta.data()[bi * m * k..];
                        let gdb = &gd[bi * m * n..];
                        let out = &mut db[bi * k * n..];
                        if trans_b {
                            gemm(n, m, k, gdb, 1, n as isize, ad, k as isize, 1, out, false);
                        } else {
                            gemm(k, m, n, ad, 1, k as isize, gdb, n as isize, 1, out, false);
                        }
                    }
                }
                accumulate(grads, nodes, b, like(b, db));
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let w = *node.value.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(w).zip(g.data().chunks(w)).zip(d.chunks_mut(w)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for i in 0..w {
                    dr[i] = yr[i] * (gr[i] - dot);
                }
            }
            accumulate(grads, nodes, *a, like(*a, d));
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let w = *node.value.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(w).zip(g.data().chunks(w)).zip(d.chunks_mut(w)) {
                let gs: f64 = gr.iter().sum();
                for i in 0..w {
                    dr[i] = gr[i] - yr[i].exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, like(*a, d));
        }
        Op::Embedding { table, indices } => {
            let d = val(*table).shape()[1];
            let mut dt = vec![0.0; val(*table).len()];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..d {
                    dt[i * d + c] += g.data()[r * d + c];
                }
            }
            accumulate(grads, nodes, *table, like(*table, dt));
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if nodes[p.0].needs_grad {
                    let mut dp = Vec::with_capacity(val(p).len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    accumulate(grads, nodes, p, like(p, dp));
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let width = node.value.shape()[*axis];
            let mut da = vec![0.0; val(*a).len()];
            for o in 0..outer {
                let src = &g.data()[o * width * inner..(o + 1) * width * inner];
                let base = o * len * inner + start * inner;
                da[base..base + width * inner].copy_from_slice(src);
            }
            accumulate(grads, nodes, *a, like(*a, da));
        }
        Op::MaskedFill { a, mask } => {
            let ml = mask.len();
            let d = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if mask[i % ml] { 0.0 } else { v })
                .collect();
            accumulate(grads, nodes, *a, like(*a, d));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = val(*gamma).len();
            let gam = val(*gamma).data();
            let rows = xhat.len() / d.max(1);
            let gd = g.data();
            if nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad {
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    for i in 0..d {
                        dg[i] += gd[r * d + i] * xhat[r * d + i];
                        dbeta[i] += gd[r * d + i];
                    }
                }
                accumulate(grads, nodes, *gamma, like(*gamma, dg));
                accumulate(grads, nodes, *beta, like(*beta, dbeta));
            }
            if nodes[x.0].needs_grad {
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let h = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<f64> = (0..d).map(|i| gd[r * d + i] * gam[i]).collect();
                    let m1 = dh.iter().sum::<f64>() / d as f64;
                    let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dx[r * d + i] = inv_std[r] * (dh[i] - m1 - h[i] * m2);
                    }
                }
                accumulate(grads, nodes, *x, like(*x, dx));
            }
        }
        Op::GatherLogProb {
            logits,
            targets,
            softmax,
        } => {
            let v = *val(*logits).shape().last().unwrap();
            let mut d = vec![0.0; softmax.len()];
            for (r, &c) in targets.iter().enumerate() {
                let gr = g.data()[r];
                for i in 0..v {
                    d[r * v + i] = -gr * softmax[r * v + i];
                }
                d[r * v + c] += gr;
            }
            accumulate(grads, nodes, *logits, like(*logits, d));
        }
        Op::WeightedLogProb {
            logits,
            weights,
            softmax,
        } => {
            let v = *val(*logits).shape().last().unwrap();
            let gs = g.item();
            let w = weights.data();
            let mut d = vec![0.0; softmax.len()];
            for r in 0..softmax.len() / v.max(1) {
                let wsum: f64 = w[r * v..(r + 1) * v].iter().sum();
                for i in 0..v {
                    d[r * v + i] = gs * (w[r * v + i] - softmax[r * v + i] * wsum);
                }
            }
            accumulate(grads, nodes, *logits, like(*logits, d));
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, like(*a, g.data().to_vec())),
        Op::Permute { a, perm } => {
            let inv = inverse_perm(perm);
            let d = permute_data(g.data(), node.value.shape(), &inv);
            accumulate(grads, nodes, *a, like(*a, d));
        }
        Op::Sum(a) => {
            let gs = g.item();
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), gs));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn every_op_passes_gradcheck() {
        for (name, err) in crate::diff::gradcheck::op_suite().unwrap() {
            assert!(err < 1e-5, "{name}: relative gradient error {err}");
        }
    }

    #[test]
    fn softmax_symmetric_input_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 4], 3.2));
        let s = g.softmax(a);
        assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn masked_entries_have_zero_softmax_mass() {
        let mut g = Graph::new();
        let a = g.input(rand_tensor(&[2, 2], 16));
        let m = g.masked_fill(a, Arc::new(vec![false, true, false, false]), f64::NEG_INFINITY).unwrap();
        let s = g.softmax(m);
        assert_eq!(g.value(s).data()[1], 0.0);
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let x = rand_tensor(&[3, 3], 17);
        let a = g.constant(x.clone());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let i = g.constant(eye);
        let y = g.matmul(a, i, false).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = rand_tensor(&[7], 18);
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        for (gi, xi) in grads.wrt(v).unwrap().data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_gradient_rows_sum_to_zero() {
        // d/dz of sum_i c_i * logsoftmax(z)_i with c summing to one is c - softmax, which sums to zero
        let mut g = Graph::new();
        let z = g.input(rand_tensor(&[4, 5], 19));
        let w = Tensor::full(&[4, 5], 0.2);
        let l = g.weighted_log_prob(z, w).unwrap();
        let grads = g.backward(l).unwrap();
        for row in grads.wrt(z).unwrap().data().chunks(5) {
            assert!(row.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn disconnected_loss_is_an_error() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(DiffError::DisconnectedGraph)));
    }
}
