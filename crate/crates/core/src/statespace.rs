//! Truncated state spaces, the sparse CME generator and exact propagation.
//!
//! States outside the box `[0, U_i]` are unreachable: jumps that would leave
//! it are disabled, so every column of the generator sums to zero and total
//! probability is conserved.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::model::{Kinetics, ModelError, RateMap, ReactionNetwork};

/// Default cap on the number of enumerated states.
pub const DEFAULT_STATE_CAP: usize = 1 << 24;

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum StateSpaceError {
    #[error("state space has {size} states, above the cap of {cap}")]
    SpaceTooLarge { size: u128, cap: usize },
    #[error("time step {dt} is unstable: exit rate {rate} at state {state:?} gives dt*rate >= 1")]
    UnstableStep { dt: f64, rate: f64, state: Vec<u32> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("state {0:?} is outside the truncation box")]
    OutOfBounds(Vec<u32>),
    #[error("probability csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mixed-radix enumeration of the box, species 0 varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedStateSpace {
    bounds: Vec<u32>,
    strides: Vec<usize>,
    size: usize,
}

impl TruncatedStateSpace {
    pub fn new(bounds: &[u32], cap: usize) -> Result<Self, StateSpaceError> {
        let mut size: u128 = 1;
        for &b in bounds {
            size *= u128::from(b) + 1;
            if size > cap as u128 {
                let full = bounds.iter().map(|&b| u128::from(b) + 1).product();
                return Err(StateSpaceError::SpaceTooLarge { size: full, cap });
            }
        }
        let mut strides = Vec::with_capacity(bounds.len());
        let mut s = 1usize;
        for &b in bounds {
            strides.push(s);
            s *= b as usize + 1;
        }
        Ok(Self {
            bounds: bounds.to_vec(),
            strides,
            size: size as usize,
        })
    }

    pub fn for_network(net: &ReactionNetwork, cap: usize) -> Result<Self, StateSpaceError> {
        Self::new(&net.bounds, cap)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bounds(&self) -> &[u32] {
        &self.bounds
    }

    pub fn contains(&self, x: &[u32]) -> bool {
        x.len() == self.bounds.len() && x.iter().zip(&self.bounds).all(|(v, b)| v <= b)
    }

    pub fn encode(&self, x: &[u32]) -> usize {
        x.iter().zip(&self.strides).map(|(&v, &s)| v as usize * s).sum()
    }

    pub fn decode(&self, mut index: usize) -> Vec<u32> {
        self.bounds
            .iter()
            .map(|&b| {
                let radix = b as usize + 1;
                let v = index % radix;
                index /= radix;
                v as u32
            })
            .collect()
    }

    pub fn states(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        (0..self.size).map(|i| self.decode(i))
    }
}

/// Sparse generator `T` with `T[xi, mu]` the rate of flow from `mu` to `xi`.
/// Off-diagonal entries are stored row-wise.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    space: TruncatedStateSpace,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn space(&self) -> &TruncatedStateSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn nnz(&self) -> usize {
        self.vals.len() + self.diag.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        if row == col {
            return self.diag[row];
        }
        (self.row_ptr[row]..self.row_ptr[row + 1])
            .find(|&k| self.cols[k] as usize == col)
            .map_or(0.0, |k| self.vals[k])
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut m = vec![vec![0.0; n]; n];
        for (r, row) in m.iter_mut().enumerate() {
            row[r] = self.diag[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row[self.cols[k] as usize] += self.vals[k];
            }
        }
        m
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = self.diag.clone();
        for r in 0..self.dim() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                sums[self.cols[k] as usize] += self.vals[k];
            }
        }
        sums
    }

    /// `out = T * p`.
    pub fn matvec(&self, p: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = self.diag[r] * p[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * p[self.cols[k] as usize];
            }
            *o = acc;
        }
    }

    /// Largest exit rate; the uniformization constant.
    pub fn max_exit_rate(&self) -> f64 {
        self.diag.iter().fold(0.0f64, |m, d| m.max(-d))
    }
}

pub fn build_generator(
    net: &ReactionNetwork,
    rates: &RateMap,
    cap: usize,
) -> Result<GeneratorMatrix, StateSpaceError> {
    let space = TruncatedStateSpace::for_network(net, cap)?;
    let kin = net.kinetics(rates)?;
    let n = space.size();
    let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(n * net.n_reactions());
    let mut diag = vec![0.0; n];
    let mut x = vec![0u32; net.n_species()];
    for mu in 0..n {
        decode_into(&space, mu, &mut x);
        for j in 0..net.n_reactions() {
            let w = kin.propensity(&x, j);
            if w == 0.0 {
                continue;
            }
            if let Some(y) = kin.successor(&x, j) {
                let xi = space.encode(&y);
                triplets.push((xi as u32, mu as u32, w));
                diag[mu] -= w;
            }
        }
    }
    triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
    let mut row_ptr = vec![0usize; n + 1];
    let mut cols = Vec::with_capacity(triplets.len());
    let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(u32, u32)> = None;
    for (r, c, w) in triplets {
        if last == Some((r, c)) {
            *vals.last_mut().unwrap() += w;
        } else {
            cols.push(c);
            vals.push(w);
            row_ptr[r as usize + 1] += 1;
            last = Some((r, c));
        }
    }
    for r in 0..n {
        row_ptr[r + 1] += row_ptr[r];
    }
    Ok(GeneratorMatrix {
        space,
        row_ptr,
        cols,
        vals,
        diag,
    })
}

fn decode_into(space: &TruncatedStateSpace, mut index: usize, out: &mut [u32]) {
    for (o, &b) in out.iter_mut().zip(space.bounds()) {
        let radix = b as usize + 1;
        *o = (index % radix) as u32;
        index /= radix;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    pub probs: Vec<f64>,
    pub time: f64,
}

impl ProbabilityVector {
    pub fn delta(space: &TruncatedStateSpace, x: &[u32], time: f64) -> Result<Self, StateSpaceError> {
        if !space.contains(x) {
            return Err(StateSpaceError::OutOfBounds(x.to_vec()));
        }
        let mut probs = vec![0.0; space.size()];
        probs[space.encode(x)] = 1.0;
        Ok(Self { probs, time })
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Marginal over `0..=U_s` of species `s`.
    pub fn marginal(&self, space: &TruncatedStateSpace, s: usize) -> Vec<f64> {
        let mut m = vec![0.0; space.bounds()[s] as usize + 1];
        let mut x = vec![0u32; space.bounds().len()];
        for (i, &p) in self.probs.iter().enumerate() {
            decode_into(space, i, &mut x);
            m[x[s] as usize] += p;
        }
        m
    }

    /// Joint over species `(a, b)`, row-major with `a` as the row.
    pub fn joint(&self, space: &TruncatedStateSpace, a: usize, b: usize) -> Vec<Vec<f64>> {
        let (ra, rb) = (space.bounds()[a] as usize + 1, space.bounds()[b] as usize + 1);
        let mut m = vec![vec![0.0; rb]; ra];
        let mut x = vec![0u32; space.bounds().len()];
        for (i, &p) in self.probs.iter().enumerate() {
            decode_into(space, i, &mut x);
            m[x[a] as usize][x[b] as usize] += p;
        }
        m
    }

    pub fn mean(&self, space: &TruncatedStateSpace, s: usize) -> f64 {
        self.marginal(space, s)
            .iter()
            .enumerate()
            .map(|(v, p)| v as f64 * p)
            .sum()
    }
}

/// `exp(t T) p0` by uniformization.
pub fn evolve_exact(gen: &GeneratorMatrix, p0: &ProbabilityVector, t: f64) -> ProbabilityVector {
    assert!(t >= 0.0, "negative propagation time {t}");
    let lambda = gen.max_exit_rate();
    if t == 0.0 || lambda == 0.0 {
        return ProbabilityVector {
            probs: p0.probs.clone(),
            time: p0.time + t,
        };
    }
    // keep lambda * tau moderate so exp(-lambda * tau) does not underflow
    const MAX_MEAN: f64 = 30.0;
    let chunks = (lambda * t / MAX_MEAN).ceil().max(1.0) as usize;
    let tau = t / chunks as f64;
    let mut v = p0.probs.clone();
    let mut scratch = vec![0.0; v.len()];
    for _ in 0..chunks {
        v = uniformized_step(gen, &v, lambda, tau, &mut scratch);
    }
    ProbabilityVector {
        probs: v,
        time: p0.time + t,
    }
}

fn uniformized_step(
    gen: &GeneratorMatrix,
    v: &[f64],
    lambda: f64,
    tau: f64,
    scratch: &mut [f64],
) -> Vec<f64> {
    let mean = lambda * tau;
    let mut weight = (-mean).exp();
    let mut term = v.to_vec();
    let mut acc: Vec<f64> = term.iter().map(|x| weight * x).collect();
    let mut k = 0usize;
    loop {
        k += 1;
        // term <- (I + T / lambda) term
        gen.matvec(&term, scratch);
        for (t, s) in term.iter_mut().zip(scratch.iter()) {
            *t += *s / lambda;
        }
        weight *= mean / k as f64;
        for (a, t) in acc.iter_mut().zip(&term) {
            *a += weight * t;
        }
        let ratio = mean / (k + 1) as f64;
        if ratio < 1.0 && weight * ratio / (1.0 - ratio) < 1e-18 {
            break;
        }
    }
    acc
}

/// Which one-step propagator turns a reward distribution into a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum KernelKind {
    /// `I + dt T`.
    #[default]
    FirstOrder,
    /// `exp(dt T)` on the full enumeration.
    Exact,
}

/// Linear combination of probabilities `p(y)` that yields `(I + dt T) p` at a
/// set of target states.
#[derive(Debug, Clone)]
pub struct KernelPlan {
    states: Vec<Vec<u32>>,
    terms: Vec<Vec<(usize, f64)>>,
}

impl KernelPlan {
    pub fn new(kin: &Kinetics<'_>, dt: f64, targets: &[Vec<u32>]) -> Result<Self, StateSpaceError> {
        let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut states: Vec<Vec<u32>> = Vec::new();
        let mut intern = |y: Vec<u32>, states: &mut Vec<Vec<u32>>| -> usize {
            *index.entry(y.clone()).or_insert_with(|| {
                states.push(y);
                states.len() - 1
            })
        };
        let mut terms = Vec::with_capacity(targets.len());
        for x in targets {
            if !kin.net.in_bounds(x) {
                return Err(StateSpaceError::OutOfBounds(x.clone()));
            }
            let exit = kin.exit_rate(x);
            check_stable(dt, exit, x)?;
            let mut row = Vec::with_capacity(kin.k.len() + 1);
            if dt == 0.0 {
                row.push((intern(x.clone(), &mut states), 1.0));
                terms.push(row);
                continue;
            }
            row.push((intern(x.clone(), &mut states), 1.0 - dt * exit));
            for j in 0..kin.k.len() {
                if let Some(y) = kin.predecessor(x, j) {
                    let w = kin.propensity(&y, j);
                    if w == 0.0 {
                        continue;
                    }
                    check_stable(dt, kin.exit_rate(&y), &y)?;
                    row.push((intern(y, &mut states), dt * w));
                }
            }
            terms.push(row);
        }
        Ok(Self { states, terms })
    }

    /// Distinct states whose probabilities the plan needs.
    pub fn states(&self) -> &[Vec<u32>] {
        &self.states
    }

    /// Kernel values at every target given `log p` for each of [`Self::states`].
    pub fn combine(&self, logp: &[f64]) -> Vec<f64> {
        debug_assert_eq!(logp.len(), self.states.len());
        self.terms
            .iter()
            .map(|row| row.iter().map(|&(i, c)| c * logp[i].exp()).sum::<f64>())
            .collect()
    }
}

fn check_stable(dt: f64, rate: f64, x: &[u32]) -> Result<(), StateSpaceError> {
    if dt * rate >= 1.0 {
        return Err(StateSpaceError::UnstableStep {
            dt,
            rate,
            state: x.to_vec(),
        });
    }
    Ok(())
}

/// `[(I + dt T) p](x)` where `p` is given through its log-probability.
///
/// Predecessors outside the box contribute nothing. The raw (non-negative)
/// value is returned; callers floor at [`PROB_FLOOR`] before taking logs.
pub fn apply_kernel_at_state(
    net: &ReactionNetwork,
    rates: &RateMap,
    dt: f64,
    logp: impl Fn(&[u32]) -> f64,
    x: &[u32],
) -> Result<f64, StateSpaceError> {
    let kin = net.kinetics(rates)?;
    let plan = KernelPlan::new(&kin, dt, std::slice::from_ref(&x.to_vec()))?;
    let lp: Vec<f64> = plan.states().iter().map(|y| logp(y)).collect();
    Ok(plan.combine(&lp)[0])
}

/// `ln max(v, PROB_FLOOR)`.
pub fn floored_ln(v: f64) -> f64 {
    v.max(PROB_FLOOR).ln()
}

/// Exact one-step propagation `exp(dt T) p` evaluated at `targets`, where
/// `p` is supplied as log-probabilities over the whole enumeration.
pub fn exact_kernel_at_states(
    gen: &GeneratorMatrix,
    dt: f64,
    logp_all: &[f64],
    targets: &[Vec<u32>],
) -> Vec<f64> {
    let p = ProbabilityVector {
        probs: logp_all.iter().map(|l| l.exp()).collect(),
        time: 0.0,
    };
    let q = evolve_exact(gen, &p, dt);
    targets
        .iter()
        .map(|x| q.probs[gen.space().encode(x)])
        .collect()
}

/// Writes `index,<species...>,probability` rows.
pub fn write_probability_csv(
    mut w: impl Write,
    net: &ReactionNetwork,
    space: &TruncatedStateSpace,
    p: &ProbabilityVector,
) -> Result<(), StateSpaceError> {
    let names: Vec<&str> = net.species.iter().map(|s| s.name.as_str()).collect();
    writeln!(w, "index,{},probability", names.join(","))?;
    for (i, &prob) in p.probs.iter().enumerate() {
        let x = space.decode(i);
        let xs: Vec<String> = x.iter().map(u32::to_string).collect();
        writeln!(w, "{i},{},{prob:e}", xs.join(","))?;
    }
    Ok(())
}

pub fn read_probability_csv(
    r: impl BufRead,
    space: &TruncatedStateSpace,
    time: f64,
) -> Result<ProbabilityVector, StateSpaceError> {
    let mut probs = vec![0.0; space.size()];
    let mut seen = vec![false; space.size()];
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != space.bounds().len() + 2 {
            return Err(StateSpaceError::Csv(format!("line {}: wrong field count", n + 1)));
        }
        let bad = |_| StateSpaceError::Csv(format!("line {}: bad number", n + 1));
        let idx: usize = fields[0].parse().map_err(|_| bad(()))?;
        let x: Vec<u32> = fields[1..fields.len() - 1]
            .iter()
            .map(|f| f.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(()))?;
        let p: f64 = fields[fields.len() - 1].parse().map_err(|_| bad(()))?;
        if idx >= space.size() || space.encode(&x) != idx || !space.contains(&x) {
            return Err(StateSpaceError::Csv(format!("line {}: index/state mismatch", n + 1)));
        }
        probs[idx] = p;
        seen[idx] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(StateSpaceError::Csv("missing states".into()));
    }
    Ok(ProbabilityVector { probs, time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    fn birth_death(bound: u32) -> ReactionNetwork {
        parse_model(&format!(
            "species X\nbound {bound}\nreaction kb : 0 -> X\nreaction kd : X -> 0\n\
             rate kb 1.0\nrate kd 0.1\ninit X 0\ntime 0 100"
        ))
        .unwrap()
    }

    #[test]
    fn enumeration_roundtrip() {
        let s = TruncatedStateSpace::new(&[2, 0, 3], 1000).unwrap();
        assert_eq!(s.size(), 12);
        for i in 0..s.size() {
            assert_eq!(s.encode(&s.decode(i)), i);
        }
        assert_eq!(s.decode(1), vec![1, 0, 0]);
        assert_eq!(s.decode(3), vec![0, 0, 1]);
    }

    #[test]
    fn space_cap() {
        assert!(matches!(
            TruncatedStateSpace::new(&[99, 99, 99, 99], 1 << 24),
            Err(StateSpaceError::SpaceTooLarge { size: 100_000_000, .. })
        ));
    }

    #[test]
    fn three_state_generator_matches_hand_enumeration() {
        let net = birth_death(2);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        // columns: leave 0 by birth (1); leave 1 by birth (1) or death (0.1);
        // leave 2 by death (0.2), birth disabled at the bound
        let expected = [
            [-1.0, 0.1, 0.0],
            [1.0, -1.1, 0.2],
            [0.0, 1.0, -0.2],
        ];
        let dense = gen.to_dense();
        for r in 0..3 {
            for c in 0..3 {
                assert!((dense[r][c] - expected[r][c]).abs() < 1e-15, "T[{r},{c}]");
            }
        }
        for s in gen.column_sums() {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rates_give_zero_matrix() {
        let net = birth_death(5);
        let gen = build_generator(&net, &net.default_rates.zeroed(), DEFAULT_STATE_CAP).unwrap();
        assert!(gen.to_dense().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn evolve_zero_time_is_identity() {
        let net = birth_death(10);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let p0 = ProbabilityVector::delta(gen.space(), &[3], 0.0).unwrap();
        assert_eq!(evolve_exact(&gen, &p0, 0.0).probs, p0.probs);
    }

    fn poisson(lambda: f64, n: usize) -> Vec<f64> {
        let mut out = vec![(-lambda).exp()];
        for k in 1..n {
            let prev = out[k - 1];
            out.push(prev * lambda / k as f64);
        }
        out
    }

    #[test]
    fn birth_death_matches_poisson() {
        let net = birth_death(64);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let p0 = ProbabilityVector::delta(gen.space(), &[0], 0.0).unwrap();
        let p = evolve_exact(&gen, &p0, 10.0);
        let lambda = 10.0 * (1.0 - (-1.0f64).exp());
        let q = poisson(lambda, 65);
        let err = p.probs.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "max error {err}");
        assert!((p.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stationary_distribution_is_fixed() {
        // truncated Poisson(10) is stationary for reflecting birth-death
        let net = birth_death(30);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let mut q = poisson(10.0, 31);
        let z: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= z);
        let p = ProbabilityVector { probs: q.clone(), time: 0.0 };
        let out = evolve_exact(&gen, &p, 7.0);
        for (a, b) in out.probs.iter().zip(&q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn semigroup_property() {
        let net = parse_model(
            "species A B\nbound 6\nreaction k1 : 0 -> A\nreaction k2 : A -> B\nreaction k3 : B -> 0\n\
             reaction k4 : 2 A -> B\nrate k1 2\nrate k2 0.7\nrate k3 0.4\nrate k4 0.05\ntime 0 1",
        )
        .unwrap();
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let p0 = ProbabilityVector::delta(gen.space(), &[1, 2], 0.0).unwrap();
        let direct = evolve_exact(&gen, &p0, 2.3);
        let split = evolve_exact(&gen, &evolve_exact(&gen, &p0, 0.8), 1.5);
        for (a, b) in direct.probs.iter().zip(&split.probs) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((direct.total() - 1.0).abs() < 1e-9);
        for s in gen.column_sums() {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_identity_at_zero_step() {
        let net = birth_death(10);
        let lp = |x: &[u32]| -((x[0] + 1) as f64);
        let v = apply_kernel_at_state(&net, &net.default_rates, 0.0, lp, &[4]).unwrap();
        assert_eq!(v, (-5.0f64).exp());
    }

    #[test]
    fn kernel_matches_dense_product() {
        let net = birth_death(10);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let dt = 0.05;
        let n = gen.dim();
        let p = vec![1.0 / n as f64; n];
        let dense = gen.to_dense();
        for x in 0..n {
            let expected: f64 = p[x] + dt * (0..n).map(|m| dense[x][m] * p[m]).sum::<f64>();
            let got = apply_kernel_at_state(
                &net,
                &net.default_rates,
                dt,
                |_| (1.0 / n as f64).ln(),
                &[x as u32],
            )
            .unwrap();
            assert!((got - expected).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn kernel_preserves_stationary_distribution() {
        let net = birth_death(10);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        // stationary distribution of the truncated chain, found with the exact oracle
        let p0 = ProbabilityVector::delta(gen.space(), &[0], 0.0).unwrap();
        let stat = evolve_exact(&gen, &p0, 400.0);
        let lp = |x: &[u32]| stat.probs[x[0] as usize].ln();
        for x in 0..=10u32 {
            let v = apply_kernel_at_state(&net, &net.default_rates, 1e-2, lp, &[x]).unwrap();
            assert!((v - stat.probs[x as usize]).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_preserves_normalization() {
        let net = parse_model(
            "species A B\nbound 4\nreaction k1 : 0 -> A\nreaction k2 : A -> B\nreaction k3 : 2 B -> 0\n\
             rate k1 2\nrate k2 0.7\nrate k3 0.4\ntime 0 1",
        )
        .unwrap();
        let space = TruncatedStateSpace::for_network(&net, DEFAULT_STATE_CAP).unwrap();
        let weights: Vec<f64> = (0..space.size()).map(|i| 1.0 + (i % 7) as f64).collect();
        let z: f64 = weights.iter().sum();
        let lp = |x: &[u32]| (weights[space.encode(x)] / z).ln();
        let total: f64 = space
            .states()
            .map(|x| apply_kernel_at_state(&net, &net.default_rates, 0.02, lp, &x).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kernel_rejects_large_steps() {
        let net = birth_death(10);
        let err = apply_kernel_at_state(&net, &net.default_rates, 1.0, |_| 0.0, &[5]);
        assert!(matches!(err, Err(StateSpaceError::UnstableStep { .. })));
    }

    #[test]
    fn csv_roundtrip() {
        let net = birth_death(6);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let p0 = ProbabilityVector::delta(gen.space(), &[2], 0.0).unwrap();
        let p = evolve_exact(&gen, &p0, 1.5);
        let mut buf = Vec::new();
        write_probability_csv(&mut buf, &net, gen.space(), &p).unwrap();
        let back = read_probability_csv(&buf[..], gen.space(), 1.5).unwrap();
        for (a, b) in back.probs.iter().zip(&p.probs) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-300));
        }
    }
}
