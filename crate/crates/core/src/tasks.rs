//! Workflows built on a trained transformer: bimodality sweeps over a rate
//! grid, rate inference by a log-space random walk, and trajectory ensembles
//! generated by feeding sampled states back as initial states.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{bimodality_coefficient, AnalysisError};
use crate::met::{build_prompt, MetError, MetModel, Prompt};
use crate::model::{ModelError, RateMap, ReactionNetwork};
use crate::rng;
use crate::ssa::{Method, SsaError, TrajectoryEnsemble};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Met(#[from] MetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ssa(#[from] SsaError),
    #[error("invalid task configuration: {0}")]
    Config(String),
}

/// One grid point of a two-rate sweep. `value` is `None` when the sampled
/// counts have no spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub a: f64,
    pub b: f64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec<'a> {
    pub axis_a: (&'a str, &'a [f64]),
    pub axis_b: (&'a str, &'a [f64]),
    pub x0: &'a [u32],
    pub t: f64,
    pub n_samples: usize,
    /// Species whose counts enter the coefficient.
    pub species: usize,
    pub seed: u64,
}

/// Bimodality coefficient of sampled counts at every `(a, b)` grid point,
/// other rates fixed at `base`. Every cell uses the same random stream, so
/// equal rates give equal coefficients.
pub fn sweep_bimodality(
    model: &MetModel,
    net: &ReactionNetwork,
    base: &RateMap,
    spec: &SweepSpec<'_>,
) -> Result<Vec<SweepCell>, TaskError> {
    if spec.species >= net.n_species() {
        return Err(TaskError::Config(format!("species index {} out of range", spec.species)));
    }
    let mut points = Vec::new();
    for &a in spec.axis_a.1 {
        for &b in spec.axis_b.1 {
            let rates = base.with(spec.axis_a.0, a)?.with(spec.axis_b.0, b)?;
            points.push((a, b, build_prompt(net, &rates, spec.x0, spec.t)?));
        }
    }
    points
        .par_iter()
        .map(|(a, b, prompt)| {
            let ws = model
                .sample_groups(std::slice::from_ref(prompt), &[spec.n_samples], &mut rng::stream(spec.seed, 0))
                .pop()
                .expect("one group");
            let counts: Vec<f64> = ws.expand().iter().map(|x| f64::from(x[spec.species])).collect();
            let value = match bimodality_coefficient(&counts) {
                Ok(v) => Some(v),
                Err(AnalysisError::DegenerateVariance | AnalysisError::TooFewSamples(_)) => None,
                Err(e) => return Err(TaskError::Config(e.to_string())),
            };
            Ok(SweepCell { a: *a, b: *b, value })
        })
        .collect()
}

pub fn write_sweep_csv(mut w: impl Write, names: (&str, &str), cells: &[SweepCell]) -> std::io::Result<()> {
    writeln!(w, "{},{},bimodality", names.0, names.1)?;
    for c in cells {
        match c.value {
            Some(v) => writeln!(w, "{},{},{}", c.a, c.b, v)?,
            None => writeln!(w, "{},{},", c.a, c.b)?,
        }
    }
    Ok(())
}

/// How a proposal is compared with the current point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acceptance {
    /// Move only if the mean probability of the batch increases.
    #[default]
    MeanProbability,
    /// Move only if the mean log-probability increases.
    MeanLogProbability,
    /// Metropolis rule on the summed log-probability (flat prior in log-rates).
    Metropolis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferHyper {
    pub free: Vec<String>,
    pub steps: usize,
    /// Proposal standard deviation per free log-rate.
    pub std: f64,
    pub batch: usize,
    pub acceptance: Acceptance,
    pub seed: u64,
}

impl Default for InferHyper {
    fn default() -> Self {
        Self {
            free: Vec::new(),
            steps: 1000,
            std: 0.05,
            batch: 1000,
            acceptance: Acceptance::MeanProbability,
            seed: 0,
        }
    }
}

/// Visited values of the free rates; `visited[0]` is the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceChain {
    pub symbols: Vec<String>,
    pub visited: Vec<Vec<f64>>,
    pub accepted: Vec<bool>,
    pub scores: Vec<f64>,
    pub std: Vec<f64>,
    pub seed: u64,
}

impl InferenceChain {
    pub fn acceptance_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    /// Per-rate median over the second half of the chain.
    pub fn estimate(&self) -> Vec<f64> {
        let tail = &self.visited[self.visited.len() / 2..];
        (0..self.symbols.len())
            .map(|k| {
                let mut v: Vec<f64> = tail.iter().map(|p| p[k]).collect();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            })
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,{},accepted,score", self.symbols.join(","))?;
        for (k, p) in self.visited.iter().enumerate() {
            let vals: Vec<String> = p.iter().map(f64::to_string).collect();
            let acc = if k == 0 { String::new() } else { u8::from(self.accepted[k - 1]).to_string() };
            writeln!(w, "{k},{},{acc},{}", vals.join(","), self.scores[k])?;
        }
        Ok(())
    }
}

/// Greedy (or Metropolis) random walk over the free rates. Each step draws
/// `batch` observed `(time, state)` pairs; prompts use the trajectory's first
/// state and the elapsed time, and both parameter points are scored on the
/// same pairs.
pub fn infer_rates(
    model: &MetModel,
    net: &ReactionNetwork,
    data: &TrajectoryEnsemble,
    start: &RateMap,
    hyper: &InferHyper,
) -> Result<InferenceChain, TaskError> {
    if hyper.free.is_empty() || hyper.batch == 0 || !(hyper.std >= 0.0) {
        return Err(TaskError::Config("need free rates, a positive batch and a non-negative std".into()));
    }
    if data.n_times() < 2 || data.n_traj() == 0 || data.bounds != net.bounds {
        return Err(TaskError::Config("data must match the network and have at least two time points".into()));
    }
    for s in &hyper.free {
        if start.get(s).is_none() {
            return Err(ModelError::MissingRate(s.clone()).into());
        }
    }
    let with_free = |logs: &[f64]| -> Result<RateMap, TaskError> {
        let mut r = start.clone();
        for (s, l) in hyper.free.iter().zip(logs) {
            r = r.with(s, l.exp())?;
        }
        Ok(r)
    };
    let score = |rates: &RateMap, pairs: &[(usize, usize)]| -> Result<(f64, f64, f64), TaskError> {
        let prompts: Vec<Prompt> = pairs
            .iter()
            .map(|&(j, k)| build_prompt(net, rates, data.state(j, 0), data.grid[k] - data.grid[0]))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Prompt> = prompts.iter().collect();
        let xs: Vec<Vec<u32>> = pairs.iter().map(|&(j, k)| data.state(j, k).to_vec()).collect();
        let lp = model.log_probs(&refs, &xs);
        let n = lp.len() as f64;
        let sum: f64 = lp.iter().sum();
        Ok((lp.iter().map(|l| l.exp()).sum::<f64>() / n, sum / n, sum))
    };
    let pick = |s: (f64, f64, f64)| match hyper.acceptance {
        Acceptance::MeanProbability => s.0,
        Acceptance::MeanLogProbability | Acceptance::Metropolis => s.1,
    };

    let mut current: Vec<f64> = hyper.free.iter().map(|s| start.get(s).expect("checked").ln()).collect();
    let mut chain = InferenceChain {
        symbols: hyper.free.clone(),
        visited: vec![current.iter().map(|l| l.exp()).collect()],
        accepted: Vec::with_capacity(hyper.steps),
        scores: Vec::with_capacity(hyper.steps + 1),
        std: vec![hyper.std; hyper.free.len()],
        seed: hyper.seed,
    };
    let draw_pairs = |r: &mut rng::StreamRng| -> Vec<(usize, usize)> {
        (0..hyper.batch)
            .map(|_| (r.random_range(0..data.n_traj()), r.random_range(1..data.n_times())))
            .collect()
    };
    let first = draw_pairs(&mut rng::stream(hyper.seed, u64::MAX));
    chain.scores.push(pick(score(&with_free(&current)?, &first)?));
    for step in 0..hyper.steps {
        let mut r = rng::stream(hyper.seed, step as u64);
        let proposal: Vec<f64> = current
            .iter()
            .map(|l| {
                let z: f64 = StandardNormal.sample(&mut r);
                l + hyper.std * z
            })
            .collect();
        let pairs = draw_pairs(&mut r);
        let u: f64 = r.random();
        let old = score(&with_free(&current)?, &pairs)?;
        let new = score(&with_free(&proposal)?, &pairs)?;
        let accept = proposal != current
            && match hyper.acceptance {
                Acceptance::Metropolis => u.ln() < new.2 - old.2,
                _ => pick(new) > pick(old),
            };
        if accept {
            current = proposal;
        }
        chain.accepted.push(accept);
        chain.scores.push(pick(if accept { new } else { old }));
        chain.visited.push(current.iter().map(|l| l.exp()).collect());
    }
    Ok(chain)
}

/// Trajectories on the grid `0, dt, .., n_steps dt`: at every step the
/// current states become the initial states of prompts at time `dt`, and all
/// trajectories sharing a state are sampled in one batched pass.
pub fn sample_trajectories_iterative(
    model: &MetModel,
    net: &ReactionNetwork,
    rates: &RateMap,
    x0: &[u32],
    dt: f64,
    n_steps: usize,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble, TaskError> {
    if !net.in_bounds(x0) || x0.len() != net.n_species() {
        return Err(SsaError::OutOfBounds(x0.to_vec()).into());
    }
    if !(dt > 0.0) || n_traj == 0 {
        return Err(TaskError::Config("dt and n_traj must be positive".into()));
    }
    let n = net.n_species();
    let mut current: Vec<Vec<u32>> = vec![x0.to_vec(); n_traj];
    let mut history: Vec<Vec<Vec<u32>>> = vec![current.clone()];
    for step in 0..n_steps {
        let mut groups: BTreeMap<&[u32], Vec<usize>> = BTreeMap::new();
        for (j, x) in current.iter().enumerate() {
            groups.entry(x.as_slice()).or_default().push(j);
        }
        let prompts: Vec<Prompt> = groups
            .keys()
            .map(|x| build_prompt(net, rates, x, dt))
            .collect::<Result<_, _>>()?;
        let counts: Vec<usize> = groups.values().map(Vec::len).collect();
        let mut r = rng::stream(seed, step as u64);
        let samples = model.sample_groups(&prompts, &counts, &mut r);
        let mut next = vec![Vec::new(); n_traj];
        for (members, ws) in groups.values().zip(samples) {
            let mut drawn = ws.expand();
            drawn.shuffle(&mut r);
            for (&j, x) in members.iter().zip(drawn) {
                next[j] = x;
            }
        }
        current = next;
        history.push(current.clone());
    }
    let grid: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
    let mut flat = Vec::with_capacity(n_traj * (n_steps + 1) * n);
    for j in 0..n_traj {
        for h in &history {
            flat.extend_from_slice(&h[j]);
        }
    }
    Ok(TrajectoryEnsemble::from_parts(net, grid, seed, Method::Met, n_traj, flat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::met::MetConfig;
    use crate::model::parse_model;
    use crate::ssa::simulate;

    fn birth_death() -> ReactionNetwork {
        parse_model("species X\nbound 8\nreaction kb : 0 -> X\nreaction kd : X -> 0\nrate kb 1.0\nrate kd 0.1\ninit X 0\ntime 0 5\n").unwrap()
    }

    fn model(net: &ReactionNetwork) -> MetModel {
        let cfg = MetConfig {
            d_emb: 8,
            d_ff: 16,
            d_l: 1,
            h: 2,
            d_p: 2,
        };
        MetModel::new(&cfg, net, &mut rng::stream(0, 0)).unwrap()
    }

    #[test]
    fn duplicated_sweep_points_agree() {
        let net = birth_death();
        let m = model(&net);
        let spec = SweepSpec {
            axis_a: ("kb", &[1.5, 1.5]),
            axis_b: ("kd", &[0.2]),
            x0: &[0],
            t: 1.0,
            n_samples: 200,
            species: 0,
            seed: 3,
        };
        let cells = sweep_bimodality(&m, &net, &net.default_rates, &spec).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0], cells[1]);
        assert!(cells[0].value.is_some());
    }

    #[test]
    fn zero_std_never_moves() {
        let net = birth_death();
        let m = model(&net);
        let data = simulate(&net, &net.default_rates, &[0], &[0.0, 1.0, 2.0], 50, 1).unwrap();
        for acceptance in [Acceptance::MeanProbability, Acceptance::Metropolis] {
            let hyper = InferHyper {
                free: vec!["kd".into()],
                steps: 20,
                std: 0.0,
                batch: 30,
                acceptance,
                seed: 4,
            };
            let chain = infer_rates(&m, &net, &data, &net.default_rates, &hyper).unwrap();
            assert_eq!(chain.visited.len(), 21);
            assert_eq!(chain.acceptance_count(), 0);
            assert!(chain.visited.iter().all(|v| v == &chain.visited[0]));
        }
    }

    #[test]
    fn chain_is_reproducible() {
        let net = birth_death();
        let m = model(&net);
        let data = simulate(&net, &net.default_rates, &[0], &[0.0, 1.0, 2.0], 50, 1).unwrap();
        let hyper = InferHyper {
            free: vec!["kd".into(), "kb".into()],
            steps: 30,
            std: 0.3,
            batch: 20,
            acceptance: Acceptance::MeanProbability,
            seed: 5,
        };
        let a = infer_rates(&m, &net, &data, &net.default_rates, &hyper).unwrap();
        let b = infer_rates(&m, &net, &data, &net.default_rates, &hyper).unwrap();
        assert_eq!(a, b);
        assert!(a.visited.iter().flatten().all(|v| *v > 0.0));
    }

    #[test]
    fn iterative_ensembles_are_deterministic() {
        let net = birth_death();
        let m = model(&net);
        let a = sample_trajectories_iterative(&m, &net, &net.default_rates, &[2], 1.0, 6, 40, 9).unwrap();
        let b = sample_trajectories_iterative(&m, &net, &net.default_rates, &[2], 1.0, 6, 40, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.len(), 7);
        assert!((0..40).all(|j| a.state(j, 0) == [2]));
    }
}
