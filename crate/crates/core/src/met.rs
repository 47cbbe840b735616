//! The master equation transformer.
//!
//! A decoder-only transformer maps a prompt `[ln k_1 .. ln k_M, x0_1 .. x0_N, t]`
//! to the joint distribution `p_t(x | rates, x0)` factored over species.
//! The prompt passes through a one-layer perceptron to `d_p` values, each
//! lifted to an embedding by its own affine map; the resulting block is
//! followed by the embeddings of `x_1 .. x_{N-1}`. Output `i` is read at
//! position `d_p - 1 + i` under a causal mask, so it depends on the prompt
//! and `x_<i` only.
//!
//! Training follows the reward models: for an element `(rates, x0, t)` of a
//! [`RewardModelSet`], samples from the prompt at `t + dt` are scored against
//! the kernel-propagated reward model at `t`, and the KL divergence is
//! reduced by score-function gradients with a batch-mean baseline.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoreg::{tree_sample, WeightedSamples};
use crate::diff::{
    adamw_step, normal_tensor, read_checkpoint, write_checkpoint, AdamW, DiffError, Gradients, Graph, ParamId,
    ParameterStore, Schedule, Tensor, Var,
};
use crate::model::{ModelError, RateMap, ReactionNetwork};
use crate::reward::{log_softmax_row, rates_key, RewardError, RewardModelSet};
use crate::rng;
use crate::statespace::{floored_ln, KernelPlan, StateSpaceError};

/// Rows per forward pass when evaluating large batches.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum MetError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error("KL estimate {kl} stayed above {limit} for {updates} consecutive updates (step {step})")]
    DivergedLoss { step: u64, kl: f64, limit: f64, updates: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Raw prompt `[ln k_j for each reaction, x0, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt(pub Vec<f64>);

pub fn build_prompt(net: &ReactionNetwork, rates: &RateMap, x0: &[u32], t: f64) -> Result<Prompt, MetError> {
    let mut v = Vec::with_capacity(net.n_reactions() + net.n_species() + 1);
    for (r, k) in net.reactions.iter().zip(net.reaction_rates(rates)?) {
        if !(k > 0.0) || !k.is_finite() {
            return Err(ModelError::NonPositiveRate {
                symbol: r.rate_symbol.clone(),
                value: k,
            }
            .into());
        }
        v.push(k.ln());
    }
    if x0.len() != net.n_species() {
        return Err(MetError::Config(format!("initial state has {} entries, expected {}", x0.len(), net.n_species())));
    }
    v.extend(x0.iter().map(|&x| f64::from(x)));
    if !(t >= 0.0) || !t.is_finite() {
        return Err(MetError::Config(format!("prompt time {t} must be finite and non-negative")));
    }
    v.push(t);
    Ok(Prompt(v))
}

/// Per-component affine standardization of prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl PromptNorm {
    pub fn identity(len: usize) -> Self {
        Self {
            shift: vec![0.0; len],
            scale: vec![1.0; len],
        }
    }

    /// Mean and standard deviation of each component; constant components keep unit scale.
    pub fn fit(prompts: &[Prompt]) -> Self {
        let len = prompts.first().map_or(0, |p| p.0.len());
        let n = prompts.len().max(1) as f64;
        let mut norm = Self::identity(len);
        for c in 0..len {
            let mean = prompts.iter().map(|p| p.0[c]).sum::<f64>() / n;
            let var = prompts.iter().map(|p| (p.0[c] - mean).powi(2)).sum::<f64>() / n;
            norm.shift[c] = mean;
            norm.scale[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        norm
    }

    pub fn apply(&self, p: &Prompt) -> Vec<f64> {
        p.0.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| (v - s) / c)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetConfig {
    pub d_emb: usize,
    /// Nominal feed-forward size; the hidden layer has `d_ff / 4` units.
    pub d_ff: usize,
    pub d_l: usize,
    pub h: usize,
    pub d_p: usize,
}

impl MetConfig {
    /// The reference configuration (`d_emb = 64, d_ff = 1024, d_l = 8, h = 8`).
    pub fn reference() -> Self {
        Self {
            d_emb: 64,
            d_ff: 1024,
            d_l: 8,
            h: 8,
            d_p: 16,
        }
    }

    pub fn ff_width(&self) -> usize {
        (self.d_ff / 4).max(1)
    }

    pub fn d_k(&self) -> usize {
        self.d_emb / self.h
    }

    pub fn validate(&self) -> Result<(), MetError> {
        if self.d_emb == 0 || self.h == 0 || self.d_emb % self.h != 0 {
            return Err(MetError::Config(format!("d_emb = {} must be a positive multiple of h = {}", self.d_emb, self.h)));
        }
        if self.d_p == 0 || self.d_l == 0 || self.d_ff == 0 {
            return Err(MetError::Config("d_p, d_l and d_ff must be positive".into()));
        }
        Ok(())
    }
}

/// Closed-form number of trainable scalars.
///
/// With `L = M + N + 1`, `V = U + 1`, `d = d_emb`, `w = d_ff / 4`:
/// `L d_p + d_p` (prompt perceptron) `+ 2 d_p d` (per-slot lift) `+ V d`
/// (state embedding) `+ d_l (4 d^2 + 4 d + 2 d w + w + d + 4 d)` (attention,
/// feed-forward, two layer norms) `+ 2 d` (final norm) `+ d V + V` (head).
pub fn parameter_count(cfg: &MetConfig, net: &ReactionNetwork) -> usize {
    let l = net.n_reactions() + net.n_species() + 1;
    let v = net.max_bound() as usize + 1;
    let (d, w, p) = (cfg.d_emb, cfg.ff_width(), cfg.d_p);
    let per_layer = 4 * d * d + 4 * d + 2 * d * w + w + d + 4 * d;
    l * p + p + 2 * p * d + v * d + cfg.d_l * per_layer + 2 * d + d * v + v
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct MetIds {
    prompt_w: ParamId,
    prompt_b: ParamId,
    lift_w: ParamId,
    lift_b: ParamId,
    tok: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            t.data_mut()[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetMeta {
    kind: String,
    config: MetConfig,
    species: Vec<String>,
    bounds: Vec<u32>,
    n_reactions: usize,
    norm: PromptNorm,
    step: u64,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct MetModel {
    cfg: MetConfig,
    bounds: Vec<u32>,
    n_reactions: usize,
    pub norm: PromptNorm,
    store: ParameterStore,
    ids: MetIds,
    pe: Tensor,
    causal: Arc<Vec<bool>>,
    vocab_mask: Option<Arc<Vec<bool>>>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl MetModel {
    pub fn new(cfg: &MetConfig, net: &ReactionNetwork, rng: &mut impl Rng) -> Result<Self, MetError> {
        cfg.validate()?;
        let n = net.n_species();
        let m = net.n_reactions();
        let v = net.max_bound() as usize + 1;
        let (d, w, p) = (cfg.d_emb, cfg.ff_width(), cfg.d_p);
        let lp = m + n + 1;
        let mut s = ParameterStore::new();
        let std = 0.02;
        let ids = MetIds {
            prompt_w: s.add("prompt.w", normal_tensor(&[lp, p], 1.0 / (lp as f64).sqrt(), rng))?,
            prompt_b: s.add_no_decay("prompt.b", Tensor::zeros(&[p]))?,
            lift_w: s.add("prompt.lift.w", normal_tensor(&[p, d], 1.0, rng))?,
            lift_b: s.add_no_decay("prompt.lift.b", normal_tensor(&[p, d], std, rng))?,
            tok: s.add("tok.emb", normal_tensor(&[v, d], 1.0, rng))?,
            layers: (0..cfg.d_l)
                .map(|l| -> Result<LayerIds, DiffError> {
                    Ok(LayerIds {
                        ln1_g: s.add_no_decay(&format!("layer{l}.ln1.g"), Tensor::full(&[d], 1.0))?,
                        ln1_b: s.add_no_decay(&format!("layer{l}.ln1.b"), Tensor::zeros(&[d]))?,
                        wqkv: s.add(&format!("layer{l}.attn.wqkv"), normal_tensor(&[d, 3 * d], std, rng))?,
                        bqkv: s.add_no_decay(&format!("layer{l}.attn.bqkv"), Tensor::zeros(&[3 * d]))?,
                        wo: s.add(&format!("layer{l}.attn.wo"), normal_tensor(&[d, d], std, rng))?,
                        bo: s.add_no_decay(&format!("layer{l}.attn.bo"), Tensor::zeros(&[d]))?,
                        ln2_g: s.add_no_decay(&format!("layer{l}.ln2.g"), Tensor::full(&[d], 1.0))?,
                        ln2_b: s.add_no_decay(&format!("layer{l}.ln2.b"), Tensor::zeros(&[d]))?,
                        w1: s.add(&format!("layer{l}.ff.w1"), normal_tensor(&[d, w], std, rng))?,
                        b1: s.add_no_decay(&format!("layer{l}.ff.b1"), Tensor::zeros(&[w]))?,
                        w2: s.add(&format!("layer{l}.ff.w2"), normal_tensor(&[w, d], std, rng))?,
                        b2: s.add_no_decay(&format!("layer{l}.ff.b2"), Tensor::zeros(&[d]))?,
                    })
                })
                .collect::<Result<_, _>>()?,
            lnf_g: s.add_no_decay("final.ln.g", Tensor::full(&[d], 1.0))?,
            lnf_b: s.add_no_decay("final.ln.b", Tensor::zeros(&[d]))?,
            head_w: s.add("head.w", normal_tensor(&[d, v], std, rng))?,
            head_b: s.add_no_decay("head.b", Tensor::zeros(&[v]))?,
        };
        let len = p + n - 1;
        let causal = (0..len * len).map(|k| k % len > k / len).collect();
        let vocab_mask: Vec<bool> = net
            .bounds
            .iter()
            .flat_map(|&b| (0..v).map(move |c| c > b as usize))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            bounds: net.bounds.clone(),
            n_reactions: m,
            norm: PromptNorm::identity(lp),
            store: s,
            ids,
            pe: sinusoidal(len, d),
            causal: Arc::new(causal),
            vocab_mask: vocab_mask.iter().any(|&b| b).then(|| Arc::new(vocab_mask)),
            step: 0,
        })
    }

    pub fn config(&self) -> &MetConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> &[u32] {
        &self.bounds
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    fn vocab(&self) -> usize {
        self.store.value(self.ids.head_b).len()
    }

    pub fn prompt_len(&self) -> usize {
        self.n_reactions + self.bounds.len() + 1
    }

    /// Masked logits `[rows, N, V]`; row `b` uses `prompts[b]` and `xs[b]`.
    fn logits(&self, g: &mut Graph, prompts: &[&Prompt], xs: &[Vec<u32>]) -> Result<Var, DiffError> {
        let (b, n, v) = (xs.len(), self.bounds.len(), self.vocab());
        let (d, p, h, dk) = (self.cfg.d_emb, self.cfg.d_p, self.cfg.h, self.cfg.d_k());
        let len = p + n - 1;
        let ids = &self.ids;
        let raw: Vec<f64> = prompts.iter().flat_map(|q| self.norm.apply(q)).collect();
        let raw = g.constant(Tensor::new(vec![b, self.prompt_len()], raw)?);
        let pw = g.param(&self.store, ids.prompt_w);
        let pb = g.param(&self.store, ids.prompt_b);
        let proj = g.matmul(raw, pw, false)?;
        let proj = g.add(proj, pb)?;
        let proj = g.tanh(proj);
        let proj = g.reshape(proj, &[b, p, 1])?;
        let lw = g.param(&self.store, ids.lift_w);
        let lb = g.param(&self.store, ids.lift_b);
        let block = g.mul(proj, lw)?;
        let mut x = g.add(block, lb)?;
        if n > 1 {
            let tok = g.param(&self.store, ids.tok);
            let idx: Vec<usize> = xs.iter().flat_map(|s| s[..n - 1].iter().map(|&c| c as usize)).collect();
            let e = g.embedding(tok, &idx)?;
            let e = g.reshape(e, &[b, n - 1, d])?;
            x = g.concat(&[x, e], 1)?;
        }
        let pe = g.constant(self.pe.clone());
        x = g.add(x, pe)?;
        let scale = 1.0 / (dk as f64).sqrt();
        for l in &ids.layers {
            let (g1, b1) = (g.param(&self.store, l.ln1_g), g.param(&self.store, l.ln1_b));
            let a = g.layer_norm(x, g1, b1, 1e-5)?;
            let wqkv = g.param(&self.store, l.wqkv);
            let bqkv = g.param(&self.store, l.bqkv);
            let qkv = g.matmul(a, wqkv, false)?;
            let qkv = g.add(qkv, bqkv)?;
            let mut heads = [qkv; 3];
            for (k, hd) in heads.iter_mut().enumerate() {
                let s = g.slice(qkv, 2, k * d, (k + 1) * d)?;
                let s = g.reshape(s, &[b, len, h, dk])?;
                *hd = g.permute(s, &[0, 2, 1, 3])?;
            }
            let scores = g.matmul(heads[0], heads[1], true)?;
            let scores = g.scale(scores, scale);
            let scores = g.masked_fill(scores, self.causal.clone(), f64::NEG_INFINITY)?;
            let att = g.softmax(scores);
            let o = g.matmul(att, heads[2], false)?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[b, len, d])?;
            let (wo, bo) = (g.param(&self.store, l.wo), g.param(&self.store, l.bo));
            let o = g.matmul(o, wo, false)?;
            let o = g.add(o, bo)?;
            x = g.add(x, o)?;
            let (g2, b2) = (g.param(&self.store, l.ln2_g), g.param(&self.store, l.ln2_b));
            let a = g.layer_norm(x, g2, b2, 1e-5)?;
            let (w1, bb1) = (g.param(&self.store, l.w1), g.param(&self.store, l.b1));
            let f = g.matmul(a, w1, false)?;
            let f = g.add(f, bb1)?;
            let f = g.gelu(f);
            let (w2, bb2) = (g.param(&self.store, l.w2), g.param(&self.store, l.b2));
            let f = g.matmul(f, w2, false)?;
            let f = g.add(f, bb2)?;
            x = g.add(x, f)?;
        }
        let (gf, bf) = (g.param(&self.store, ids.lnf_g), g.param(&self.store, ids.lnf_b));
        let x = g.layer_norm(x, gf, bf, 1e-5)?;
        let x = g.slice(x, 1, p - 1, p - 1 + n)?;
        let (hw, hb) = (g.param(&self.store, ids.head_w), g.param(&self.store, ids.head_b));
        let logits = g.matmul(x, hw, false)?;
        let logits = g.add(logits, hb)?;
        debug_assert_eq!(g.shape(logits), [b, n, v]);
        match &self.vocab_mask {
            Some(mask) => g.masked_fill(logits, mask.clone(), f64::NEG_INFINITY),
            None => Ok(logits),
        }
    }

    /// Log-softmax rows `[rows][N][V]` for unique `(prompt, x_<N)` rows.
    fn eval_log_softmax(&self, prompts: &[&Prompt], xs: &[Vec<u32>]) -> Vec<Vec<Vec<f64>>> {
        let v = self.vocab();
        let chunks: Vec<(usize, usize)> = (0..xs.len()).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(xs.len()))).collect();
        let parts: Vec<Vec<Vec<Vec<f64>>>> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let mut g = Graph::new();
                let l = self.logits(&mut g, &prompts[s..e], &xs[s..e]).expect("consistent shapes");
                g.value(l)
                    .data()
                    .chunks(v * self.bounds.len())
                    .map(|row| row.chunks(v).map(log_softmax_row).collect())
                    .collect()
            })
            .collect();
        parts.concat()
    }

    /// Groups rows by `(prompt, x_<N)`, the only inputs the outputs depend on.
    fn dedupe<'a>(&self, prompts: &[&'a Prompt], xs: &[Vec<u32>]) -> (Vec<&'a Prompt>, Vec<Vec<u32>>, Vec<usize>) {
        let n = self.bounds.len();
        let mut index: HashMap<(Vec<u64>, Vec<u32>), usize> = HashMap::new();
        let (mut up, mut ux, mut map) = (Vec::new(), Vec::new(), Vec::with_capacity(xs.len()));
        for (p, x) in prompts.iter().zip(xs) {
            let mut prefix = x.clone();
            prefix[n - 1] = 0;
            let key = (p.0.iter().map(|v| v.to_bits()).collect(), prefix.clone());
            let k = *index.entry(key).or_insert_with(|| {
                up.push(*p);
                ux.push(prefix);
                ux.len() - 1
            });
            map.push(k);
        }
        (up, ux, map)
    }

    /// `ln p(x | prompt)` for each row.
    pub fn log_probs(&self, prompts: &[&Prompt], xs: &[Vec<u32>]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let (up, ux, map) = self.dedupe(prompts, xs);
        let ls = self.eval_log_softmax(&up, &ux);
        xs.iter()
            .zip(map)
            .map(|(x, k)| x.iter().enumerate().map(|(i, &c)| ls[k][i][c as usize]).sum())
            .collect()
    }

    /// `out[b][i]` is the distribution of `x_i` given the prompt and `xs[b][..i]`.
    pub fn conditionals(&self, prompt: &Prompt, xs: &[Vec<u32>]) -> Vec<Vec<Vec<f64>>> {
        let prompts = vec![prompt; xs.len()];
        self.eval_log_softmax(&prompts, xs)
            .into_iter()
            .map(|rows| rows.into_iter().map(|r| r.into_iter().map(f64::exp).collect()).collect())
            .collect()
    }

    /// Ancestral sampling of `counts[g]` states for each prompt `g`.
    pub fn sample_groups(&self, prompts: &[Prompt], counts: &[usize], rng: &mut impl Rng) -> Vec<WeightedSamples> {
        tree_sample(&self.bounds, counts, rng, |rows, i| {
            let ps: Vec<&Prompt> = rows.iter().map(|r| &prompts[r.0]).collect();
            let xs: Vec<Vec<u32>> = rows.iter().map(|r| r.1.clone()).collect();
            self.eval_log_softmax(&ps, &xs)
                .into_iter()
                .map(|rows| rows[i].iter().map(|l| l.exp()).collect())
                .collect()
        })
    }

    /// Gradient of `sum_b coef_b ln p(x_b | prompt_b)` plus the per-row log-probabilities.
    fn surrogate_grad(&self, prompts: &[&Prompt], xs: &[Vec<u32>], coef: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(Gradients, Vec<f64>), DiffError> {
        let (up, ux, map) = self.dedupe(prompts, xs);
        let (n, v) = (self.bounds.len(), self.vocab());
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &up, &ux)?;
        let ls: Vec<Vec<f64>> = g.value(logits).data().chunks(v).map(log_softmax_row).collect();
        let lp: Vec<f64> = xs
            .iter()
            .zip(&map)
            .map(|(x, &k)| x.iter().enumerate().map(|(i, &c)| ls[k * n + i][c as usize]).sum())
            .collect();
        let c = coef(&lp);
        let mut w = Tensor::zeros(&[ux.len(), n, v]);
        for ((x, &k), ck) in xs.iter().zip(&map).zip(&c) {
            for (i, &s) in x.iter().enumerate() {
                w.data_mut()[(k * n + i) * v + s as usize] += ck;
            }
        }
        let loss = g.weighted_log_prob(logits, w)?;
        Ok((g.backward(loss)?, lp))
    }

    pub fn save(&self, path: &Path, net: &ReactionNetwork, seed: u64) -> Result<(), MetError> {
        let mut f = fs::File::create(path)?;
        write_checkpoint(&mut f, &self.store)?;
        f.flush()?;
        let meta = MetMeta {
            kind: "met".into(),
            config: self.cfg.clone(),
            species: net.species.iter().map(|s| s.name.clone()).collect(),
            bounds: self.bounds.clone(),
            n_reactions: self.n_reactions,
            norm: self.norm.clone(),
            step: self.step,
            seed,
        };
        fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path, net: &ReactionNetwork) -> Result<Self, MetError> {
        let meta: MetMeta = serde_json::from_slice(&fs::read(sidecar(path))?)?;
        if meta.kind != "met" || meta.bounds != net.bounds || meta.n_reactions != net.n_reactions() {
            return Err(MetError::Checkpoint(format!("{} does not match the model network", path.display())));
        }
        let mut model = Self::new(&meta.config, net, &mut rng::stream(0, 0))?;
        let (entries, tensors) = read_checkpoint(fs::File::open(path)?)?;
        model.store.load_values(&entries, &tensors)?;
        model.norm = meta.norm;
        model.step = meta.step;
        Ok(model)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn met_conditionals(model: &MetModel, prompt: &Prompt, x: &[u32]) -> Vec<Vec<f64>> {
    model.conditionals(prompt, &[x.to_vec()]).pop().expect("one row")
}

pub fn met_logprob(model: &MetModel, prompt: &Prompt, x: &[u32]) -> f64 {
    model.log_probs(&[prompt], &[x.to_vec()])[0]
}

/// `n` ancestral samples in sorted order.
pub fn met_sample(model: &MetModel, prompt: &Prompt, n: usize, seed: u64) -> Vec<Vec<u32>> {
    model
        .sample_groups(std::slice::from_ref(prompt), &[n], &mut rng::stream(seed, 0))
        .pop()
        .expect("one group")
        .expand()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub s_batch: usize,
    pub m_acc: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    /// Clipped-ratio updates (`epsilon`, inner updates per batch); off by default.
    pub ppo: Option<(f64, usize)>,
    pub max_kl: f64,
    pub patience: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            s_batch: 1000,
            m_acc: 100,
            epochs: 100,
            schedule: Schedule::warmup_inv_sqrt(1e-3, 100),
            weight_decay: 0.0,
            seed: 0,
            ppo: None,
            max_kl: 50.0,
            patience: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub element: String,
    pub kl: f64,
    pub lr: f64,
}

pub fn write_loss_trace(mut w: impl Write, rows: &[LossRow]) -> std::io::Result<()> {
    writeln!(w, "step,element,kl,lr")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.element, r.kl, r.lr)?;
    }
    Ok(())
}

/// One training element: reward model at `t`, prompt at `t + dt`.
struct Element<'a> {
    key: String,
    prompt: Prompt,
    rates: &'a RateMap,
    reward: &'a crate::reward::RewardModel,
}

/// Prompts at `t + dt` for every element of a reward set.
pub fn element_prompts(set: &RewardModelSet, net: &ReactionNetwork) -> Result<Vec<Prompt>, MetError> {
    let dt = set.meta.hyper.dt;
    set.entries
        .iter()
        .map(|e| build_prompt(net, &e.rates, &e.init, e.t + dt))
        .collect()
}

/// Samples and scores for one element; returns `(states, counts, log targets)`.
fn draw_element(
    model: &MetModel,
    net: &ReactionNetwork,
    el: &Element<'_>,
    dt: f64,
    s_batch: usize,
    rng: &mut impl Rng,
) -> Result<(WeightedSamples, Vec<f64>), MetError> {
    let ws = model
        .sample_groups(std::slice::from_ref(&el.prompt), &[s_batch], rng)
        .pop()
        .expect("one group");
    let kin = net.kinetics(el.rates)?;
    let plan = KernelPlan::new(&kin, dt, &ws.states)?;
    let lp = el.reward.log_probs(plan.states());
    let lt = plan.combine(&lp).into_iter().map(floored_ln).collect();
    Ok((ws, lt))
}

/// Gradient of the KL objective for one element and its KL estimate.
/// `coef` maps the per-row score weights; `lp_old` enables ratio clipping.
fn element_grad(
    model: &MetModel,
    el: &Element<'_>,
    ws: &WeightedSamples,
    lt: &[f64],
    lp_old: Option<&[f64]>,
    ppo_eps: f64,
    scale: f64,
) -> Result<(Gradients, Vec<f64>, f64), MetError> {
    let s = ws.total() as f64;
    let prompts = vec![&el.prompt; ws.states.len()];
    let kl = std::cell::Cell::new(0.0);
    let (grads, lp) = model.surrogate_grad(&prompts, &ws.states, &|lp: &[f64]| {
        let base = lp_old.unwrap_or(lp);
        let r: Vec<f64> = base.iter().zip(lt).map(|(a, b)| a - b).collect();
        let mean = r.iter().zip(&ws.counts).map(|(r, &c)| r * c as f64).sum::<f64>() / s;
        kl.set(mean);
        r.iter()
            .zip(&ws.counts)
            .zip(lp)
            .zip(base)
            .map(|(((r, &c), new), old)| {
                let a = r - mean;
                let ratio = (new - old).exp();
                let active = lp_old.is_none() || !((a > 0.0 && ratio < 1.0 - ppo_eps) || (a < 0.0 && ratio > 1.0 + ppo_eps));
                if active {
                    scale * c as f64 * a * ratio / s
                } else {
                    0.0
                }
            })
            .collect()
    })?;
    Ok((grads, lp, kl.get()))
}

/// RLMF training against a reward set. Returns one loss row per element and update.
pub fn train_met(
    model: &mut MetModel,
    set: &RewardModelSet,
    net: &ReactionNetwork,
    hyper: &TrainHyper,
) -> Result<Vec<LossRow>, MetError> {
    if hyper.s_batch < 2 || hyper.m_acc == 0 {
        return Err(MetError::Config("s_batch must be at least 2 and m_acc positive".into()));
    }
    if set.entries.is_empty() {
        return Err(MetError::Config("reward set is empty".into()));
    }
    let dt = set.meta.hyper.dt;
    let prompts = element_prompts(set, net)?;
    let elements: Vec<Element<'_>> = set
        .entries
        .iter()
        .zip(prompts)
        .map(|(e, prompt)| Element {
            key: format!("{}|{:?}|{}", rates_key(net, &e.rates), e.init, e.t),
            prompt,
            rates: &e.rates,
            reward: &e.model,
        })
        .collect();
    let opt = AdamW {
        weight_decay: hyper.weight_decay,
        ..AdamW::default()
    };
    let mut trace = Vec::new();
    let mut above = 0;
    let mut order: Vec<usize> = (0..elements.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng::stream(rng::derive_seed(hyper.seed, 1), epoch as u64));
        for chunk in order.chunks(hyper.m_acc) {
            let step = model.step;
            let step_seed = rng::derive_seed(hyper.seed, 2 + step);
            let scale = 1.0 / chunk.len() as f64;
            let drawn: Vec<Result<(WeightedSamples, Vec<f64>), MetError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &e)| {
                    let mut r = rng::stream(step_seed, j as u64);
                    draw_element(model, net, &elements[e], dt, hyper.s_batch, &mut r)
                })
                .collect();
            let drawn: Vec<(WeightedSamples, Vec<f64>)> = drawn.into_iter().collect::<Result<_, _>>()?;
            let inner = hyper.ppo.map_or(1, |(_, k)| k.max(1));
            let eps = hyper.ppo.map_or(0.0, |(e, _)| e);
            let mut lp_old: Vec<Option<Vec<f64>>> = vec![None; chunk.len()];
            for it in 0..inner {
                let results: Vec<Result<(Gradients, Vec<f64>, f64), MetError>> = chunk
                    .par_iter()
                    .zip(&drawn)
                    .zip(&lp_old)
                    .map(|((&e, (ws, lt)), old)| element_grad(model, &elements[e], ws, lt, old.as_deref(), eps, scale))
                    .collect();
                model.store.zero_grad();
                let mut kl_sum = 0.0;
                for (k, r) in results.into_iter().enumerate() {
                    let (grads, lp, kl) = r?;
                    model.store.accumulate(&grads, 1.0);
                    if hyper.ppo.is_some() && it == 0 {
                        lp_old[k] = Some(lp);
                    }
                    if it == 0 {
                        kl_sum += kl;
                        trace.push(LossRow {
                            step: model.step,
                            element: elements[chunk[k]].key.clone(),
                            kl,
                            lr: hyper.schedule.lr(model.step),
                        });
                    }
                }
                adamw_step(&mut model.store, &hyper.schedule, model.step, &opt);
                model.step += 1;
                if it == 0 {
                    let kl = kl_sum * scale;
                    above = if kl > hyper.max_kl { above + 1 } else { 0 };
                    if above >= hyper.patience {
                        return Err(MetError::DivergedLoss {
                            step: model.step,
                            kl,
                            limit: hyper.max_kl,
                            updates: above,
                        });
                    }
                }
            }
        }
    }
    Ok(trace)
}

/// The estimator's gradient for one prompt when the expectation is taken
/// exactly over the full enumeration, `sum_x p(x) (ln p(x) - ln q(x) - b) grad ln p(x)`.
pub fn enumerated_score_gradient(
    model: &MetModel,
    prompt: &Prompt,
    states: &[Vec<u32>],
    log_target: &[f64],
    baseline: bool,
) -> Result<Vec<f64>, MetError> {
    let prompts = vec![prompt; states.len()];
    let (grads, _) = model.surrogate_grad(&prompts, states, &|lp: &[f64]| {
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let r: Vec<f64> = lp.iter().zip(log_target).map(|(a, b)| a - b).collect();
        let b = if baseline { p.iter().zip(&r).map(|(p, r)| p * r).sum() } else { 0.0 };
        p.iter().zip(&r).map(|(p, r)| p * (r - b)).collect()
    })?;
    let mut store = model.store.clone();
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    Ok(store.flat_grad())
}

/// Flat gradient of the estimator from `s_batch` samples of one prompt.
pub fn sampled_score_gradient(
    model: &MetModel,
    prompt: &Prompt,
    log_target: &dyn Fn(&[u32]) -> f64,
    s_batch: usize,
    baseline: bool,
    seed: u64,
) -> Result<Vec<f64>, MetError> {
    let ws = model
        .sample_groups(std::slice::from_ref(prompt), &[s_batch], &mut rng::stream(seed, 0))
        .pop()
        .expect("one group");
    let lt: Vec<f64> = ws.states.iter().map(|x| log_target(x)).collect();
    let s = s_batch as f64;
    let prompts = vec![prompt; ws.states.len()];
    let (grads, _) = model.surrogate_grad(&prompts, &ws.states, &|lp: &[f64]| {
        let r: Vec<f64> = lp.iter().zip(&lt).map(|(a, b)| a - b).collect();
        let b = if baseline {
            r.iter().zip(&ws.counts).map(|(r, &c)| r * c as f64).sum::<f64>() / s
        } else {
            0.0
        };
        r.iter().zip(&ws.counts).map(|(r, &c)| c as f64 * (r - b) / s).collect()
    })?;
    let mut store = model.store.clone();
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    Ok(store.flat_grad())
}

/// Flat gradient of the exact `KL(p || q) = sum_x p(x) (ln p(x) - ln q(x))`
/// obtained by differentiating the enumerated loss directly.
pub fn exact_kl_gradient(model: &MetModel, prompt: &Prompt, states: &[Vec<u32>], log_target: &[f64]) -> Result<Vec<f64>, MetError> {
    let (n, v) = (model.bounds.len(), model.vocab());
    let prompts = vec![prompt; states.len()];
    let mut g = Graph::new();
    let logits = model.logits(&mut g, &prompts, states)?;
    let targets: Vec<usize> = states.iter().flat_map(|x| x.iter().map(|&c| c as usize)).collect();
    let lp = g.gather_log_prob(logits, &targets)?;
    let ones = g.constant(Tensor::full(&[n, 1], 1.0));
    let lp = g.matmul(lp, ones, false)?;
    let lp = g.reshape(lp, &[states.len()])?;
    let p = g.exp(lp);
    let q = g.constant(Tensor::vector(log_target.to_vec()));
    let diff = g.sub(lp, q)?;
    let kl = g.mul(p, diff)?;
    let kl = g.sum(kl);
    let _ = v;
    let grads = g.backward(kl)?;
    let mut store = model.store.clone();
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    Ok(store.flat_grad())
}

/// Sum of `ln p(x | prompt)` over rows as a differentiable graph, for gradient checks.
pub fn logprob_gradient(model: &MetModel, prompts: &[&Prompt], xs: &[Vec<u32>]) -> Result<(f64, Vec<f64>), MetError> {
    let mut g = Graph::new();
    let logits = model.logits(&mut g, prompts, xs)?;
    let targets: Vec<usize> = xs.iter().flat_map(|x| x.iter().map(|&c| c as usize)).collect();
    let lp = g.gather_log_prob(logits, &targets)?;
    let total = g.sum(lp);
    let value = g.value(total).item();
    let grads = g.backward(total)?;
    let mut store = model.store.clone();
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    Ok((value, store.flat_grad()))
}

/// Worst relative finite-difference error of the summed log-probability of
/// a few random `(prompt, state)` rows, over every parameter of a freshly
/// initialized model with a non-trivial prompt normalization.
pub fn logprob_gradcheck(net: &ReactionNetwork, cfg: &MetConfig, seed: u64) -> Result<f64, MetError> {
    let mut r = rng::stream(seed, 0);
    let mut model = MetModel::new(cfg, net, &mut r)?;
    let len = model.prompt_len();
    model.norm = PromptNorm {
        shift: (0..len).map(|_| r.random_range(-0.5..0.5)).collect(),
        scale: (0..len).map(|_| r.random_range(0.5..2.0)).collect(),
    };
    let mut prompts = Vec::new();
    let mut xs = Vec::new();
    for _ in 0..3 {
        let x0: Vec<u32> = net.bounds.iter().map(|&b| r.random_range(0..=b)).collect();
        let mut rates = net.default_rates.clone();
        for s in net.rate_symbols() {
            rates = rates.with(s, r.random_range(0.1..3.0))?;
        }
        prompts.push(build_prompt(net, &rates, &x0, r.random_range(0.0..5.0))?);
        xs.push(net.bounds.iter().map(|&b| r.random_range(0..=b)).collect::<Vec<u32>>());
    }
    let refs: Vec<&Prompt> = prompts.iter().collect();
    let (_, grad) = logprob_gradient(&model, &refs, &xs)?;
    let all: Vec<usize> = (0..grad.len()).collect();
    Ok(crate::diff::gradcheck::check_parameters(model.store(), &grad, &all, 1e-5, 1e-3, |s| {
        let mut m = model.clone();
        m.store_mut().copy_values_from(s);
        m.log_probs(&refs, &xs).iter().sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use crate::statespace::TruncatedStateSpace;

    fn birth_death(bound: u32) -> ReactionNetwork {
        parse_model(&format!(
            "species X\nbound {bound}\nreaction kb : 0 -> X\nreaction kd : X -> 0\nrate kb 1.0\nrate kd 0.1\ninit X 0\ntime 0 100\n"
        ))
        .unwrap()
    }

    fn small_cfg() -> MetConfig {
        MetConfig {
            d_emb: 8,
            d_ff: 16,
            d_l: 2,
            h: 2,
            d_p: 3,
        }
    }

    fn three_species(bound: u32) -> ReactionNetwork {
        parse_model(&format!(
            "species A B C\nbound {bound}\nbound C 2\nreaction k1 : 0 -> A\nreaction k2 : A -> B\nreaction k3 : B -> C\nrate k1 1\nrate k2 0.5\nrate k3 0.2\ninit A 0\ninit B 0\ninit C 0\ntime 0 1\n"
        ))
        .unwrap()
    }

    #[test]
    fn prompt_examples() {
        let net = birth_death(10);
        let p = build_prompt(&net, &net.default_rates, &[0], 2.0).unwrap();
        assert_eq!(p.0, vec![0.0, 0.1f64.ln(), 0.0, 2.0]);
        let e = net.default_rates.with("kb", std::f64::consts::E).unwrap();
        assert_eq!(build_prompt(&net, &e, &[0], 0.0).unwrap().0[0], 1.0);
        let zero = net.default_rates.with("kd", 0.0).unwrap();
        assert!(matches!(
            build_prompt(&net, &zero, &[0], 1.0),
            Err(MetError::Model(ModelError::NonPositiveRate { .. }))
        ));
    }

    #[test]
    fn reference_parameter_count() {
        let net = birth_death(10);
        let cfg = MetConfig::reference();
        let n = parameter_count(&cfg, &net);
        assert!((300_000..=500_000).contains(&n), "{n}");
        let deeper = MetConfig { d_l: 16, ..cfg.clone() };
        let per_layer = 4 * 64 * 64 + 4 * 64 + 2 * 64 * 256 + 256 + 64 + 4 * 64;
        assert_eq!(parameter_count(&deeper, &net) - n, 8 * per_layer);
        let model = MetModel::new(&cfg, &net, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(model.store().num_elements(), n);
    }

    #[test]
    fn normalized_and_causal() {
        let net = birth_death(10);
        let m = MetModel::new(&small_cfg(), &net, &mut rng::stream(1, 0)).unwrap();
        let p = build_prompt(&net, &net.default_rates, &[3], 1.5).unwrap();
        let all: Vec<Vec<u32>> = (0..=10).map(|v| vec![v]).collect();
        let total: f64 = m.log_probs(&vec![&p; 11], &all).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);

        let net = three_species(3);
        let m = MetModel::new(&small_cfg(), &net, &mut rng::stream(2, 0)).unwrap();
        let p = build_prompt(&net, &net.default_rates, &[1, 0, 2], 0.5).unwrap();
        let states: Vec<Vec<u32>> = TruncatedStateSpace::new(&net.bounds, 1 << 20).unwrap().states().collect();
        let total: f64 = m.log_probs(&vec![&p; states.len()], &states).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let cond = m.conditionals(&p, &states);
        for (x, c) in states.iter().zip(&cond) {
            assert_eq!(c[2][3], 0.0, "species C is bounded by 2");
            for (y, d) in states.iter().zip(&cond) {
                for i in 0..3 {
                    if x[..i] == y[..i] {
                        for (a, b) in c[i].iter().zip(&d[i]) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    }
                }
            }
            assert!(c.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn prompt_changes_every_conditional() {
        let net = three_species(3);
        let m = MetModel::new(&small_cfg(), &net, &mut rng::stream(3, 0)).unwrap();
        let p = build_prompt(&net, &net.default_rates, &[1, 0, 2], 0.5).unwrap();
        let q = build_prompt(&net, &net.default_rates, &[1, 0, 2], 0.9).unwrap();
        let a = met_conditionals(&m, &p, &[1, 1, 1]);
        let b = met_conditionals(&m, &q, &[1, 1, 1]);
        for i in 0..3 {
            assert_ne!(a[i], b[i]);
        }
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let err = logprob_gradcheck(&three_species(2), &small_cfg(), 4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let net = birth_death(10);
        let m = MetModel::new(&small_cfg(), &net, &mut rng::stream(5, 0)).unwrap();
        let p = build_prompt(&net, &net.default_rates, &[2], 1.0).unwrap();
        assert_eq!(met_sample(&m, &p, 500, 9), met_sample(&m, &p, 500, 9));
        assert_eq!(met_sample(&m, &p, 500, 9).len(), 500);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = three_species(2);
        let mut m = MetModel::new(&small_cfg(), &net, &mut rng::stream(6, 0)).unwrap();
        m.norm = PromptNorm::fit(&[
            build_prompt(&net, &net.default_rates, &[0, 0, 0], 0.5).unwrap(),
            build_prompt(&net, &net.default_rates, &[1, 2, 0], 2.5).unwrap(),
        ]);
        m.step = 17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("met.ckpt");
        m.save(&path, &net, 3).unwrap();
        let back = MetModel::load(&path, &net).unwrap();
        assert_eq!(back.store().flat_values(), m.store().flat_values());
        assert_eq!(back.norm, m.norm);
        assert_eq!(back.step, 17);
        let (entries, _) = read_checkpoint(fs::File::open(&path).unwrap()).unwrap();
        let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        assert_eq!(total, parameter_count(m.config(), &net));
    }

    #[test]
    fn baseline_keeps_expectation() {
        let net = birth_death(4);
        let m = MetModel::new(&small_cfg(), &net, &mut rng::stream(7, 0)).unwrap();
        let p = build_prompt(&net, &net.default_rates, &[0], 1.0).unwrap();
        let states: Vec<Vec<u32>> = (0..=4).map(|v| vec![v]).collect();
        let lt: Vec<f64> = [0.1f64, 0.2, 0.4, 0.2, 0.1].iter().map(|q| q.ln()).collect();
        let a = enumerated_score_gradient(&m, &p, &states, &lt, true).unwrap();
        let b = enumerated_score_gradient(&m, &p, &states, &lt, false).unwrap();
        let exact = exact_kl_gradient(&m, &p, &states, &lt).unwrap();
        let norm: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        for ((x, y), z) in a.iter().zip(&b).zip(&exact) {
            assert!((x - y).abs() < 1e-9 * norm.max(1.0));
            assert!((x - z).abs() < 1e-9 * norm.max(1.0));
        }
    }

    #[test]
    fn reproduces_a_point_mass() {
        // rates this small leave the point mass unchanged over one step
        let net = birth_death(6);
        let frozen = net.default_rates.with("kb", 1e-9).unwrap().with("kd", 1e-9).unwrap();
        let rh = crate::reward::RewardHyper {
            t_final: 0.0,
            save_times: vec![0.0],
            width: 8,
            ..crate::reward::RewardHyper::default()
        };
        let (set, _) = crate::reward::train_reward_set(&net, &[(frozen.clone(), vec![4])], &rh).unwrap();
        let mut m = MetModel::new(&small_cfg(), &net, &mut rng::stream(8, 0)).unwrap();
        let hyper = TrainHyper {
            s_batch: 64,
            m_acc: 1,
            epochs: 150,
            schedule: Schedule::constant(1e-2),
            ..TrainHyper::default()
        };
        let trace = train_met(&mut m, &set, &net, &hyper).unwrap();
        assert_eq!(trace.len(), 150);
        let p = build_prompt(&net, &frozen, &[4], rh.dt).unwrap();
        assert!(met_logprob(&m, &p, &[4]).exp() > 0.99);
    }
}
