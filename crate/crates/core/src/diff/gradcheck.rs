//! Central finite-difference checks of reverse-mode gradients.

use super::{DiffError, Graph, Tensor, Var};

/// Largest relative disagreement between the tape gradient and central
/// differences of a scalar function of `inputs`.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn check<F>(inputs: &[Tensor], eps: f64, floor: f64, f: F) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let x0 = t.data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Same check for a function of a [`super::ParameterStore`], restricted to
/// the flat coordinates in `indices`. `analytic` is the flat gradient in
/// store order.
pub fn check_parameters<F>(
    store: &super::ParameterStore,
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
    floor: f64,
    f: F,
) -> f64
where
    F: Fn(&super::ParameterStore) -> f64,
{
    let base = store.flat_values();
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        work.set_flat_values(&v);
        let up = f(&work);
        v[i] = base[i] - eps;
        work.set_flat_values(&v);
        let down = f(&work);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
    }
    worst
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>>;

/// Every differentiable graph operation applied to random inputs, each
/// contracted with a fixed random tensor. Returns `(name, worst relative error)`.
pub fn op_suite() -> Result<Vec<(&'static str, f64)>, DiffError> {
    use std::sync::Arc;
    let a = rand_tensor(&[2, 3, 4], 1);
    let b = rand_tensor(&[3, 1], 2);
    let m = rand_tensor(&[3, 5], 3);
    let pos = Tensor::new(m.shape().to_vec(), m.data().iter().map(|x| x.abs() + 0.5).collect())?;
    let s = rand_tensor(&[3, 6], 9);
    let w = rand_tensor(&[3, 6], 10);
    let mask = Arc::new(vec![false, true, false, true, true, false, false, false, false, true, false, false]);
    let cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_scalar", vec![a.clone()], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("tanh", vec![m.clone()], Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("sigmoid", vec![m.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("exp", vec![m.clone()], Box::new(|g, v| Ok(g.exp(v[0])))),
        ("gelu", vec![m.clone()], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("relu", vec![m], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("log", vec![pos], Box::new(|g, v| Ok(g.log(v[0])))),
        ("matmul", vec![a.clone(), rand_tensor(&[4, 5], 5)], Box::new(|g, v| g.matmul(v[0], v[1], false))),
        ("matmul_trans_b", vec![a.clone(), rand_tensor(&[5, 4], 6)], Box::new(|g, v| g.matmul(v[0], v[1], true))),
        ("matmul_batched", vec![a.clone(), rand_tensor(&[2, 4, 3], 7)], Box::new(|g, v| g.matmul(v[0], v[1], false))),
        (
            "matmul_batched_trans_b",
            vec![a.clone(), rand_tensor(&[2, 6, 4], 8)],
            Box::new(|g, v| g.matmul(v[0], v[1], true)),
        ),
        ("softmax", vec![s.clone()], Box::new(|g, v| Ok(g.softmax(v[0])))),
        ("log_softmax", vec![s.clone()], Box::new(|g, v| Ok(g.log_softmax(v[0])))),
        ("gather_log_prob", vec![s.clone()], Box::new(|g, v| g.gather_log_prob(v[0], &[0, 5, 2]))),
        ("embedding", vec![rand_tensor(&[5, 3], 13)], Box::new(|g, v| g.embedding(v[0], &[4, 0, 4, 2]))),
        ("concat", vec![a.clone(), rand_tensor(&[2, 2, 4], 12)], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", vec![a.clone()], Box::new(|g, v| g.slice(v[0], 2, 1, 3))),
        ("reshape", vec![a.clone()], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("permute", vec![a.clone()], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("masked_fill", vec![a.clone()], Box::new(move |g, v| g.masked_fill(v[0], mask.clone(), -3.0))),
        ("mean", vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0])))),
        (
            "layer_norm",
            vec![a, rand_tensor(&[4], 14), rand_tensor(&[4], 15)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, inputs, f) in cases {
        let err = check(&inputs, 1e-5, 1e-6, |g, v| {
            let y = f(g, v)?;
            let c = g.constant(rand_tensor(g.shape(y), 99));
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        })?;
        out.push((name, err));
    }
    // already a scalar loss
    let err = check(&[s], 1e-5, 1e-6, |g, v| g.weighted_log_prob(v[0], w.clone()))?;
    out.push(("weighted_log_prob", err));
    Ok(out)
}
