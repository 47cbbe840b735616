//! Recurrent reward models that follow the master equation in time.
//!
//! A reward model is a one-layer GRU over the species in declaration order,
//! with one softmax head per species, so `p(x) = prod_i p(x_i | x_<i)` is
//! normalized by construction. Training starts from a point mass at the
//! initial state and advances in steps of `dt`: each step minimizes
//! `KL(p_{t+dt} || K p_t)` by score-function gradients, where `K` is the
//! one-step kernel applied to the frozen model from the previous step.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autoreg::{tree_sample, WeightedSamples};
use crate::diff::{
    adamw_step, normal_tensor, read_checkpoint, write_checkpoint, AdamW, DiffError, Graph, ParamId, ParameterStore, Schedule, Tensor,
    Var,
};
use crate::model::{ModelError, RateMap, ReactionNetwork};
use crate::rng;
use crate::statespace::{
    build_generator, evolve_exact, floored_ln, KernelKind, KernelPlan, ProbabilityVector, StateSpaceError,
    TruncatedStateSpace, DEFAULT_STATE_CAP,
};

pub const SET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error("KL estimate {kl} stayed above {limit} for {epochs} consecutive epochs at t = {t}")]
    DivergedLoss { t: f64, kl: f64, limit: f64, epochs: usize },
    #[error("pretraining stalled at cross-entropy {0}")]
    PretrainStalled(f64),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("reward set {path}: {message}")]
    Set { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone)]
struct GruIds {
    emb: Vec<ParamId>,
    w: ParamId,
    u: ParamId,
    bw: ParamId,
    bu: ParamId,
    head_w: Vec<ParamId>,
    head_b: Vec<ParamId>,
}

/// One-hidden-layer GRU over species positions.
#[derive(Debug, Clone)]
pub struct RewardModel {
    bounds: Vec<u32>,
    width: usize,
    store: ParameterStore,
    ids: GruIds,
}

impl RewardModel {
    pub fn new(bounds: &[u32], width: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParameterStore::new();
        let d = width;
        let s = 1.0 / (d as f64).sqrt();
        let mut emb = Vec::new();
        for i in 0..bounds.len() {
            let rows = if i == 0 { 1 } else { bounds[i - 1] as usize + 1 };
            emb.push(store.add(&format!("emb.{i}"), normal_tensor(&[rows, d], 1.0, rng)).expect("unique"));
        }
        let w = store.add("gru.w", normal_tensor(&[d, 3 * d], s, rng)).expect("unique");
        let u = store.add("gru.u", normal_tensor(&[d, 3 * d], s, rng)).expect("unique");
        let bw = store.add_no_decay("gru.bw", Tensor::zeros(&[3 * d])).expect("unique");
        let bu = store.add_no_decay("gru.bu", Tensor::zeros(&[3 * d])).expect("unique");
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for (i, &b) in bounds.iter().enumerate() {
            let v = b as usize + 1;
            head_w.push(store.add(&format!("head.{i}.w"), normal_tensor(&[d, v], s, rng)).expect("unique"));
            head_b.push(store.add_no_decay(&format!("head.{i}.b"), Tensor::zeros(&[v])).expect("unique"));
        }
        Self {
            bounds: bounds.to_vec(),
            width,
            store,
            ids: GruIds {
                emb,
                w,
                u,
                bw,
                bu,
                head_w,
                head_b,
            },
        }
    }

    pub fn bounds(&self) -> &[u32] {
        &self.bounds
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Per-position logits `[batch, bound_i + 1]`.
    fn logits(&self, g: &mut Graph, xs: &[Vec<u32>]) -> Result<Vec<Var>, DiffError> {
        let d = self.width;
        let b = xs.len();
        let ids = &self.ids;
        let w = g.param(&self.store, ids.w);
        let u = g.param(&self.store, ids.u);
        let bw = g.param(&self.store, ids.bw);
        let bu = g.param(&self.store, ids.bu);
        let mut h = g.constant(Tensor::zeros(&[b, d]));
        let mut out = Vec::with_capacity(self.bounds.len());
        for i in 0..self.bounds.len() {
            let table = g.param(&self.store, ids.emb[i]);
            let idx: Vec<usize> = if i == 0 { vec![0; b] } else { xs.iter().map(|x| x[i - 1] as usize).collect() };
            let e = g.embedding(table, &idx)?;
            let gx = g.matmul(e, w, false)?;
            let gx = g.add(gx, bw)?;
            let gh = g.matmul(h, u, false)?;
            let gh = g.add(gh, bu)?;
            let (xz, xr, xn) = (g.slice(gx, 1, 0, d)?, g.slice(gx, 1, d, 2 * d)?, g.slice(gx, 1, 2 * d, 3 * d)?);
            let (hz, hr, hn) = (g.slice(gh, 1, 0, d)?, g.slice(gh, 1, d, 2 * d)?, g.slice(gh, 1, 2 * d, 3 * d)?);
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let rn = g.mul(r, hn)?;
            let n = g.add(xn, rn)?;
            let n = g.tanh(n);
            let hmn = g.sub(h, n)?;
            let zh = g.mul(z, hmn)?;
            h = g.add(n, zh)?;
            let hw = g.param(&self.store, ids.head_w[i]);
            let hb = g.param(&self.store, ids.head_b[i]);
            let l = g.matmul(h, hw, false)?;
            out.push(g.add(l, hb)?);
        }
        Ok(out)
    }

    /// `out[b][i]` is the distribution of `x_i` given `xs[b][..i]`.
    pub fn conditionals(&self, xs: &[Vec<u32>]) -> Vec<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, xs).expect("consistent shapes");
        let mut out = vec![Vec::with_capacity(self.bounds.len()); xs.len()];
        for (i, &l) in logits.iter().enumerate() {
            let v = self.bounds[i] as usize + 1;
            for (b, row) in g.value(l).data().chunks(v).enumerate() {
                out[b].push(log_softmax_row(row).into_iter().map(f64::exp).collect());
            }
        }
        out
    }

    pub fn log_probs(&self, xs: &[Vec<u32>]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let logits = self.logits(&mut g, xs).expect("consistent shapes");
        let mut lp = vec![0.0; xs.len()];
        for (i, &l) in logits.iter().enumerate() {
            let v = self.bounds[i] as usize + 1;
            for (b, row) in g.value(l).data().chunks(v).enumerate() {
                lp[b] += log_softmax_row(row)[xs[b][i] as usize];
            }
        }
        lp
    }

    /// `n` ancestral draws, deduplicated.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> WeightedSamples {
        tree_sample(&self.bounds, &[n], rng, |rows, i| {
            let xs: Vec<Vec<u32>> = rows.iter().map(|r| r.1.clone()).collect();
            self.conditionals(&xs).into_iter().map(|mut c| c.swap_remove(i)).collect()
        })
        .pop()
        .expect("one group")
    }

    /// Graph of the score-function surrogate whose gradient is
    /// `sum_b coef_b * grad log p(x_b)`.
    fn surrogate(&self, xs: &[Vec<u32>], coef: &[f64]) -> Result<(Graph, Var), DiffError> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, xs)?;
        let mut total: Option<Var> = None;
        for (i, &l) in logits.iter().enumerate() {
            let v = self.bounds[i] as usize + 1;
            let mut w = Tensor::zeros(&[xs.len(), v]);
            for (b, x) in xs.iter().enumerate() {
                w.data_mut()[b * v + x[i] as usize] = coef[b];
            }
            let term = g.weighted_log_prob(l, w)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        Ok((g, total.expect("at least one species")))
    }

    fn apply(&mut self, g: Graph, loss: Var, schedule: &Schedule, step: u64, opt: &AdamW) -> Result<(), DiffError> {
        let grads = g.backward(loss)?;
        self.store.zero_grad();
        self.store.accumulate(&grads, 1.0);
        adamw_step(&mut self.store, schedule, step, opt);
        Ok(())
    }

    /// Fits a point mass at `x0` by cross-entropy, stopping once it drops below `tol`.
    pub fn pretrain_delta(&mut self, x0: &[u32], lr: f64, tol: f64, max_iters: usize) -> Result<f64, RewardError> {
        let schedule = Schedule::constant(lr);
        let opt = AdamW::default();
        let xs = [x0.to_vec()];
        let mut ce = -self.log_probs(&xs)[0];
        let mut it = 0;
        while ce >= tol {
            if it == max_iters {
                return Err(RewardError::PretrainStalled(ce));
            }
            let (g, lp) = self.surrogate(&xs, &[-1.0])?;
            self.apply(g, lp, &schedule, it as u64, &opt)?;
            ce = -self.log_probs(&xs)[0];
            it += 1;
        }
        self.store.reset_moments();
        Ok(ce)
    }

    /// One score-function update toward `log_target`; returns the KL estimate.
    fn kl_epoch(
        &mut self,
        batch: usize,
        rng: &mut impl Rng,
        log_target: &dyn Fn(&[Vec<u32>]) -> Result<Vec<f64>, RewardError>,
        schedule: &Schedule,
        step: u64,
        opt: &AdamW,
    ) -> Result<f64, RewardError> {
        let ws = self.sample(batch, rng);
        let lt = log_target(&ws.states)?;
        let lp = self.log_probs(&ws.states);
        let s = batch as f64;
        let r: Vec<f64> = lp.iter().zip(&lt).map(|(a, b)| a - b).collect();
        let kl: f64 = r.iter().zip(&ws.counts).map(|(r, &c)| r * c as f64).sum::<f64>() / s;
        let coef: Vec<f64> = r.iter().zip(&ws.counts).map(|(r, &c)| c as f64 * (r - kl) / s).collect();
        if coef.iter().any(|c| *c != 0.0) {
            let (g, loss) = self.surrogate(&ws.states, &coef)?;
            self.apply(g, loss, schedule, step, opt)?;
        }
        Ok(kl)
    }
}

pub fn rm_logprob(model: &RewardModel, x: &[u32]) -> f64 {
    model.log_probs(&[x.to_vec()])[0]
}

/// `n` i.i.d. ancestral samples (returned in sorted order).
pub fn rm_sample(model: &RewardModel, n: usize, seed: u64) -> Vec<Vec<u32>> {
    model.sample(n, &mut rng::stream(seed, 0)).expand()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHyper {
    pub dt: f64,
    pub t_final: f64,
    /// Times (multiples of `dt`, within `[0, t_final]`) at which models are kept.
    pub save_times: Vec<f64>,
    pub width: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub kernel: KernelKind,
    pub seed: u64,
    /// KL estimates above `max_kl` for `patience` consecutive epochs abort training.
    pub max_kl: f64,
    pub patience: usize,
    pub pretrain_lr: f64,
    pub pretrain_tol: f64,
    pub pretrain_max_iters: usize,
}

impl Default for RewardHyper {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_final: 10.0,
            save_times: vec![1.0, 5.0, 10.0],
            width: 32,
            batch: 1000,
            epochs: 100,
            lr: 1e-3,
            kernel: KernelKind::FirstOrder,
            seed: 0,
            max_kl: 10.0,
            patience: 50,
            pretrain_lr: 1e-2,
            pretrain_tol: 1e-4,
            pretrain_max_iters: 20_000,
        }
    }
}

impl RewardHyper {
    /// Step indices at which each save time falls.
    fn save_steps(&self) -> Result<Vec<usize>, RewardError> {
        let bad = |m: String| Err(RewardError::Config(m));
        if !(self.dt > 0.0) || !(self.t_final >= 0.0) {
            return bad(format!("dt = {} and t_final = {} must be positive", self.dt, self.t_final));
        }
        if self.batch < 2 || self.width == 0 {
            return bad("batch must be at least 2 and width positive".into());
        }
        let mut steps = Vec::with_capacity(self.save_times.len());
        for &t in &self.save_times {
            let k = (t / self.dt).round();
            if !(t >= 0.0 && t <= self.t_final + 1e-12) || (t / self.dt - k).abs() > 1e-6 {
                return bad(format!("save time {t} is not a multiple of dt in [0, t_final]"));
            }
            steps.push(k as usize);
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return bad("save times must be strictly increasing".into());
        }
        Ok(steps)
    }
}

/// One trained chain element.
#[derive(Debug, Clone)]
pub struct SetEntry {
    pub rates: RateMap,
    pub init: Vec<u32>,
    pub t: f64,
    pub model: RewardModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub chain: usize,
    pub t: f64,
    pub kl: f64,
}

/// Trains one chain from a point mass at `x0` and returns the saved models
/// and the mean KL estimate of each step.
pub fn train_reward_chain(
    net: &ReactionNetwork,
    rates: &RateMap,
    x0: &[u32],
    hyper: &RewardHyper,
    stream: u64,
) -> Result<(Vec<SetEntry>, Vec<f64>), RewardError> {
    if x0.len() != net.n_species() || !net.in_bounds(x0) {
        return Err(StateSpaceError::OutOfBounds(x0.to_vec()).into());
    }
    let save_steps = hyper.save_steps()?;
    let kin = net.kinetics(rates)?;
    let mut rng = rng::stream(hyper.seed, stream);
    let mut model = RewardModel::new(&net.bounds, hyper.width, &mut rng);
    model.pretrain_delta(x0, hyper.pretrain_lr, hyper.pretrain_tol, hyper.pretrain_max_iters)?;

    let exact = match hyper.kernel {
        KernelKind::Exact => {
            let gen = build_generator(net, rates, DEFAULT_STATE_CAP)?;
            Some(gen)
        }
        KernelKind::FirstOrder => None,
    };
    let space = TruncatedStateSpace::for_network(net, DEFAULT_STATE_CAP);

    let schedule = Schedule::constant(hyper.lr);
    let opt = AdamW::default();
    let n_steps = (hyper.t_final / hyper.dt).round() as usize;
    let mut entries = Vec::new();
    let mut trace = Vec::with_capacity(n_steps);
    let mut save = save_steps.iter().peekable();
    let mut global = 0u64;
    for k in 0..=n_steps {
        if save.peek() == Some(&&k) {
            save.next();
            entries.push(SetEntry {
                rates: rates.clone(),
                init: x0.to_vec(),
                t: k as f64 * hyper.dt,
                model: model.clone(),
            });
        }
        if k == n_steps || save.peek().is_none() {
            break;
        }
        let prev = model.clone();
        let target: Box<dyn Fn(&[Vec<u32>]) -> Result<Vec<f64>, RewardError>> = match &exact {
            None => Box::new(|xs: &[Vec<u32>]| {
                let plan = KernelPlan::new(&kin, hyper.dt, xs)?;
                let lp = prev.log_probs(plan.states());
                Ok(plan.combine(&lp).into_iter().map(floored_ln).collect())
            }),
            Some(gen) => {
                let space = space.as_ref().map_err(|e| RewardError::Config(e.to_string()))?;
                let all: Vec<Vec<u32>> = space.states().collect();
                let p = ProbabilityVector {
                    probs: prev.log_probs(&all).into_iter().map(f64::exp).collect(),
                    time: 0.0,
                };
                let q = evolve_exact(gen, &p, hyper.dt).probs;
                Box::new(move |xs: &[Vec<u32>]| Ok(xs.iter().map(|x| floored_ln(q[space.encode(x)])).collect()))
            }
        };
        let t = (k + 1) as f64 * hyper.dt;
        let mut above = 0;
        let mut kl_sum = 0.0;
        for _ in 0..hyper.epochs {
            let kl = model.kl_epoch(hyper.batch, &mut rng, target.as_ref(), &schedule, global, &opt)?;
            global += 1;
            kl_sum += kl;
            above = if kl > hyper.max_kl { above + 1 } else { 0 };
            if above >= hyper.patience {
                return Err(RewardError::DivergedLoss {
                    t,
                    kl,
                    limit: hyper.max_kl,
                    epochs: above,
                });
            }
        }
        trace.push(kl_sum / hyper.epochs.max(1) as f64);
    }
    Ok((entries, trace))
}

/// Key of a rate vector: natural logs in network symbol order at 1e-9 resolution.
pub fn rates_key(net: &ReactionNetwork, rates: &RateMap) -> String {
    net.rate_symbols()
        .iter()
        .map(|s| format!("{:.9}", rates.get(s).unwrap_or(0.0).ln()))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMeta {
    pub version: u32,
    pub species: Vec<String>,
    pub bounds: Vec<u32>,
    pub rate_symbols: Vec<String>,
    pub hyper: RewardHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub rates: BTreeMap<String, f64>,
    pub rates_key: String,
    pub init: Vec<u32>,
    pub t: f64,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    width: usize,
    bounds: Vec<u32>,
    t: f64,
    rates_key: String,
    init: Vec<u32>,
    seed: u64,
}

/// Reward models keyed by `(rates, initial state, time)`.
#[derive(Debug, Clone)]
pub struct RewardModelSet {
    pub meta: SetMeta,
    pub entries: Vec<SetEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RewardModelSet {
    pub fn get(&self, net: &ReactionNetwork, rates: &RateMap, init: &[u32], t: f64) -> Option<&SetEntry> {
        let key = rates_key(net, rates);
        self.entries
            .iter()
            .find(|e| e.init == init && (e.t - t).abs() < 1e-9 && rates_key(net, &e.rates) == key)
    }

    /// Writes `set.json`, `manifest.jsonl` and one checkpoint (plus metadata
    /// sidecar) per entry under `dir`.
    pub fn save(&self, dir: &Path, net: &ReactionNetwork) -> Result<(), RewardError> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("set.json"), serde_json::to_vec_pretty(&self.meta)?)?;
        let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
        for (i, e) in self.entries.iter().enumerate() {
            let rel = format!("checkpoints/rm_{i:05}.ckpt");
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, e.model.store())?;
            fs::write(dir.join(&rel), &bytes)?;
            let key = rates_key(net, &e.rates);
            let meta = CheckpointMeta {
                kind: "gru".into(),
                width: e.model.width(),
                bounds: e.model.bounds().to_vec(),
                t: e.t,
                rates_key: key.clone(),
                init: e.init.clone(),
                seed: self.meta.hyper.seed,
            };
            fs::write(dir.join(format!("checkpoints/rm_{i:05}.json")), serde_json::to_vec_pretty(&meta)?)?;
            let rec = ManifestRecord {
                rates: e.rates.iter().map(|(k, v)| (k.to_string(), v)).collect(),
                rates_key: key,
                init: e.init.clone(),
                t: e.t,
                path: rel,
                sha256: sha256_hex(&bytes),
            };
            writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RewardError> {
        let set_err = |path: &Path, message: String| RewardError::Set {
            path: path.to_path_buf(),
            message,
        };
        let set_path = dir.join("set.json");
        let meta_bytes = fs::read(&set_path).map_err(|e| set_err(&set_path, e.to_string()))?;
        let meta: SetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| set_err(&set_path, e.to_string()))?;
        if meta.version != SET_VERSION {
            return Err(set_err(&set_path, format!("unsupported version {}", meta.version)));
        }
        let man_path = dir.join("manifest.jsonl");
        let file = fs::File::open(&man_path).map_err(|e| set_err(&man_path, e.to_string()))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| set_err(&man_path, e.to_string()))?;
            let ckpt = dir.join(&rec.path);
            let bytes = fs::read(&ckpt).map_err(|e| set_err(&ckpt, e.to_string()))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(set_err(&ckpt, "checksum mismatch".into()));
            }
            let (manifest, tensors) = read_checkpoint(&bytes[..])?;
            let mut model = RewardModel::new(&meta.bounds, meta.hyper.width, &mut rng::stream(0, 0));
            model.store_mut().load_values(&manifest, &tensors)?;
            entries.push(SetEntry {
                rates: RateMap::new(rec.rates.iter().map(|(k, v)| (k.as_str(), *v)))?,
                init: rec.init,
                t: rec.t,
                model,
            });
        }
        let mut keyed: BTreeMap<(String, Vec<u32>), Vec<f64>> = BTreeMap::new();
        for e in &entries {
            let k = e.rates.iter().map(|(s, v)| format!("{s}={v:e}")).collect::<Vec<_>>().join(",");
            keyed.entry((k, e.init.clone())).or_default().push(e.t);
        }
        if keyed.values().any(|ts| ts.windows(2).any(|w| w[1] <= w[0])) {
            return Err(set_err(&man_path, "time points must be strictly increasing per chain".into()));
        }
        Ok(Self { meta, entries })
    }
}

/// Trains one chain per `(rates, x0)` combination in parallel. Chain `i`
/// uses random stream `i` of `hyper.seed`.
pub fn train_reward_set(
    net: &ReactionNetwork,
    combos: &[(RateMap, Vec<u32>)],
    hyper: &RewardHyper,
) -> Result<(RewardModelSet, Vec<TraceRow>), RewardError> {
    hyper.save_steps()?;
    let results: Vec<Result<(Vec<SetEntry>, Vec<f64>), RewardError>> = combos
        .par_iter()
        .enumerate()
        .map(|(i, (rates, x0))| train_reward_chain(net, rates, x0, hyper, i as u64))
        .collect();
    let mut entries = Vec::new();
    let mut trace = Vec::new();
    for (chain, r) in results.into_iter().enumerate() {
        let (e, kl) = r?;
        entries.extend(e);
        trace.extend(kl.into_iter().enumerate().map(|(k, kl)| TraceRow {
            chain,
            t: (k + 1) as f64 * hyper.dt,
            kl,
        }));
    }
    let meta = SetMeta {
        version: SET_VERSION,
        species: net.species.iter().map(|s| s.name.clone()).collect(),
        bounds: net.bounds.clone(),
        rate_symbols: net.rate_symbols().iter().map(|s| s.to_string()).collect(),
        hyper: hyper.clone(),
    };
    Ok((RewardModelSet { meta, entries }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::hellinger;
    use crate::model::parse_model;
    use crate::statespace::apply_kernel_at_state;

    fn birth_death(bound: u32) -> ReactionNetwork {
        parse_model(&format!(
            "species X\nbound {bound}\nreaction kb : 0 -> X\nreaction kd : X -> 0\nrate kb 1.0\nrate kd 0.1\ninit X 0\ntime 0 100\n"
        ))
        .unwrap()
    }

    fn two_species() -> ReactionNetwork {
        parse_model(
            "species A B\nbound 3\nreaction k1 : 0 -> A\nreaction k2 : A -> B\nreaction k3 : B -> 0\nrate k1 1\nrate k2 0.5\nrate k3 0.2\ninit A 0\ninit B 0\ntime 0 1\n",
        )
        .unwrap()
    }

    fn enumerate(bounds: &[u32]) -> Vec<Vec<u32>> {
        TruncatedStateSpace::new(bounds, 1 << 20).unwrap().states().collect()
    }

    #[test]
    fn normalized_over_enumeration() {
        let m = RewardModel::new(&[10], 8, &mut rng::stream(1, 0));
        let total: f64 = m.log_probs(&enumerate(&[10])).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let m = RewardModel::new(&[2, 3, 1], 8, &mut rng::stream(2, 0));
        let total: f64 = m.log_probs(&enumerate(&[2, 3, 1])).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for c in m.conditionals(&enumerate(&[2, 3, 1])).iter().flatten() {
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn later_species_do_not_affect_earlier_conditionals() {
        let m = RewardModel::new(&[3, 3, 3], 6, &mut rng::stream(3, 0));
        let base = m.conditionals(&[vec![1, 2, 0]]);
        for v in 0..=3 {
            let other = m.conditionals(&[vec![1, 2, v]]);
            assert_eq!(base[0], other[0]);
        }
        let changed = m.conditionals(&[vec![1, 0, 0]]);
        assert_eq!(base[0][..2], changed[0][..2]);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let m = RewardModel::new(&[2, 3], 4, &mut rng::stream(4, 0));
        let xs = vec![vec![1, 3], vec![0, 2], vec![2, 0]];
        let (g, loss) = m.surrogate(&xs, &[0.3, -0.7, 1.1]).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<(ParamId, Tensor)> = grads.parameters().map(|(id, t)| (id, t.clone())).collect();
        let eval = |store: &ParameterStore| {
            let mut mm = m.clone();
            mm.store_mut().copy_values_from(store);
            let lp = mm.log_probs(&xs);
            0.3 * lp[0] - 0.7 * lp[1] + 1.1 * lp[2]
        };
        let mut worst = 0.0f64;
        for (id, a) in analytic {
            for j in 0..a.len() {
                let mut up = m.store().clone();
                up.value_mut(id).data_mut()[j] += 1e-5;
                let mut down = m.store().clone();
                down.value_mut(id).data_mut()[j] -= 1e-5;
                let num = (eval(&up) - eval(&down)) / 2e-5;
                let rel = (a.data()[j] - num).abs() / a.data()[j].abs().max(num.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn pretraining_reaches_delta() {
        let net = two_species();
        let mut m = RewardModel::new(&net.bounds, 16, &mut rng::stream(5, 0));
        m.pretrain_delta(&[2, 1], 1e-2, 1e-4, 20_000).unwrap();
        assert!(rm_logprob(&m, &[2, 1]) > 0.99f64.ln());
        let s = rm_sample(&m, 1000, 9);
        assert!(s.iter().filter(|x| **x == vec![2, 1]).count() >= 990);
    }

    #[test]
    fn sampling_matches_model_masses() {
        let m = RewardModel::new(&[4], 8, &mut rng::stream(6, 0));
        let n = 100_000;
        let a = rm_sample(&m, n, 17);
        assert_eq!(a, rm_sample(&m, n, 17));
        let lp = m.log_probs(&enumerate(&[4]));
        for (v, l) in lp.iter().enumerate() {
            let freq = a.iter().filter(|x| x[0] == v as u32).count() as f64 / n as f64;
            assert!((freq - l.exp()).abs() < 0.01);
        }
    }

    #[test]
    fn kernel_of_model_is_normalized() {
        let net = two_species();
        let m = RewardModel::new(&net.bounds, 8, &mut rng::stream(7, 0));
        let total: f64 = enumerate(&net.bounds)
            .iter()
            .map(|x| apply_kernel_at_state(&net, &net.default_rates, 0.05, |y| rm_logprob(&m, y), x).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_rates_keep_delta() {
        let net = birth_death(10);
        let hyper = RewardHyper {
            t_final: 0.5,
            save_times: vec![0.0, 0.5],
            epochs: 5,
            batch: 200,
            ..RewardHyper::default()
        };
        let (entries, _) = train_reward_chain(&net, &net.default_rates.zeroed(), &[4], &hyper, 0).unwrap();
        assert_eq!(entries.len(), 2);
        for e in &entries {
            assert!(rm_logprob(&e.model, &[4]) > 0.99f64.ln());
        }
    }

    #[test]
    fn short_birth_death_chain_tracks_exact() {
        let net = birth_death(10);
        let hyper = RewardHyper {
            t_final: 1.0,
            save_times: vec![1.0],
            ..RewardHyper::default()
        };
        let (entries, trace) = train_reward_chain(&net, &net.default_rates, &[0], &hyper, 0).unwrap();
        assert_eq!(trace.len(), 100);
        let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP).unwrap();
        let p0 = ProbabilityVector::delta(gen.space(), &[0], 0.0).unwrap();
        let exact = evolve_exact(&gen, &p0, 1.0);
        let model: Vec<f64> = entries[0].model.log_probs(&enumerate(&[10])).iter().map(|l| l.exp()).collect();
        let h = hellinger(&model, &exact.probs).unwrap();
        assert!(h < 0.05, "hellinger {h}");
    }

    #[test]
    fn set_roundtrip_and_missing_manifest() {
        let net = birth_death(6);
        let hyper = RewardHyper {
            t_final: 0.02,
            save_times: vec![0.0, 0.02],
            epochs: 2,
            batch: 50,
            width: 4,
            ..RewardHyper::default()
        };
        let combos = vec![(net.default_rates.clone(), vec![0]), (net.default_rates.clone(), vec![3])];
        let (set, _) = train_reward_set(&net, &combos, &hyper).unwrap();
        assert_eq!(set.entries.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path(), &net).unwrap();
        let back = RewardModelSet::load(dir.path()).unwrap();
        assert_eq!(back.meta, set.meta);
        for (a, b) in back.entries.iter().zip(&set.entries) {
            assert_eq!(a.model.store().flat_values(), b.model.store().flat_values());
            assert_eq!(a.init, b.init);
        }
        assert!(back.get(&net, &net.default_rates, &[3], 0.02).is_some());
        let missing = RewardModelSet::load(&dir.path().join("nope"));
        match missing {
            Err(RewardError::Set { path, .. }) => assert!(path.ends_with("set.json")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
