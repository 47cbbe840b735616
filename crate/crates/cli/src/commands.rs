use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use met_core::analysis::{bimodality_coefficient, hellinger, mode_count, write_metrics, Histogram2D, MetricRow};
use met_core::diff::{gradcheck, Schedule};
use met_core::met::{
    build_prompt, element_prompts, logprob_gradcheck, train_met, write_loss_trace, MetConfig, MetModel, PromptNorm,
    TrainHyper,
};
use met_core::model::{RateMap, ReactionNetwork};
use met_core::reward::{train_reward_set, RewardHyper, RewardModelSet};
use met_core::rng;
use met_core::ssa::{simulate, TrajectoryEnsemble};
use met_core::statespace::{build_generator, evolve_exact, write_probability_csv, KernelKind, ProbabilityVector, DEFAULT_STATE_CAP};
use met_core::tasks::{
    infer_rates, sample_trajectories_iterative, sweep_bimodality, write_sweep_csv, Acceptance, InferHyper, SweepSpec,
};
use met_core::Error;

use crate::config::{parse_axis, parse_list, Resolved};

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn species_index(net: &ReactionNetwork, name: &str) -> Result<usize, Error> {
    net.species_index(name)
        .ok_or_else(|| Error::Config(format!("model has no species `{name}`")))
}

fn write_summary(path: &Path, ens: &TrajectoryEnsemble) -> Result<(), Error> {
    let mut w = create(path)?;
    writeln!(w, "time,species,mean,std")?;
    for (k, t) in ens.grid.iter().enumerate() {
        for (s, (m, sd)) in ens.mean_std(k)?.into_iter().enumerate() {
            writeln!(w, "{t},{},{m},{sd}", ens.species[s])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_ensemble(out: &Path, ens: &TrajectoryEnsemble, csv: bool) -> Result<(), Error> {
    let mut w = create(&out.join("ensemble.bin"))?;
    ens.write_binary(&mut w)?;
    w.flush()?;
    if csv {
        let mut w = create(&out.join("ensemble.csv"))?;
        ens.write_csv(&mut w)?;
        w.flush()?;
    }
    write_summary(&out.join("summary.csv"), ens)
}

fn read_ensemble(path: &Path) -> Result<TrajectoryEnsemble, Error> {
    Ok(TrajectoryEnsemble::read_binary(std::io::BufReader::new(File::open(path)?))?)
}

fn load_met(cfg: &mut Resolved, flag: Option<PathBuf>, net: &ReactionNetwork) -> Result<MetModel, Error> {
    let path = cfg.existing_path("checkpoint", flag)?;
    Ok(MetModel::load(&path, net)?)
}

#[derive(Debug, Args)]
pub struct SolveExact {
    /// Comma-separated output times (default: the model's final time)
    #[arg(long)]
    t: Option<String>,
    #[arg(long)]
    state_cap: Option<usize>,
}

impl SolveExact {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let times: Vec<f64> = match cfg.param_opt::<String>("t", self.t.clone())? {
            Some(s) => parse_list(&s)?,
            None => vec![net.t_final],
        };
        let cap = cfg.param("state_cap", self.state_cap, DEFAULT_STATE_CAP)?;
        let gen = build_generator(&net, &net.default_rates, cap)?;
        let space = gen.space();
        let p0 = ProbabilityVector::delta(space, &net.default_init, 0.0)?;
        let mut marg = create(&out.join("marginals.csv"))?;
        writeln!(marg, "time,species,count,probability")?;
        for &t in &times {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("time {t} must be non-negative")));
            }
            let p = evolve_exact(&gen, &p0, t);
            let mut w = create(&out.join(format!("probabilities_t{t}.csv")))?;
            write_probability_csv(&mut w, &net, space, &p)?;
            w.flush()?;
            for s in 0..net.n_species() {
                for (v, q) in p.marginal(space, s).iter().enumerate() {
                    writeln!(marg, "{t},{},{v},{q:e}", net.species[s].name)?;
                }
            }
        }
        marg.flush()?;
        Ok(())
    }
}

fn grid_from(cfg: &mut Resolved, net: &ReactionNetwork, times: Option<String>, points: Option<usize>) -> Result<Vec<f64>, Error> {
    match cfg.param_opt::<String>("times", times)? {
        Some(s) => parse_list(&s),
        None => {
            let n = cfg.param("points", points, 11)?.max(2);
            Ok((0..n).map(|k| net.t_final * k as f64 / (n - 1) as f64).collect())
        }
    }
}

#[derive(Debug, Args)]
pub struct Simulate {
    /// Number of trajectories
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated recording times (default: evenly spaced over the model's time span)
    #[arg(long)]
    times: Option<String>,
    #[arg(long)]
    points: Option<usize>,
    /// Also export the ensemble as CSV
    #[arg(long)]
    csv: bool,
}

impl Simulate {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let seed = cfg.seed()?;
        let n = cfg.param("n", self.n, 1000)?;
        let grid = grid_from(cfg, &net, self.times.clone(), self.points)?;
        let csv = cfg.param("csv", self.csv.then_some(true), false)?;
        let ens = simulate(&net, &net.default_rates, &net.default_init, &grid, n, seed)?;
        write_ensemble(out, &ens, csv)
    }
}

/// Rate grid × initial states.
fn combos(net: &ReactionNetwork, axes: &[String], inits: Option<&str>) -> Result<Vec<(RateMap, Vec<u32>)>, Error> {
    let mut rate_sets = vec![net.default_rates.clone()];
    for a in axes {
        let (sym, vals) = parse_axis(a)?;
        if !net.rate_symbols().contains(&sym.as_str()) {
            return Err(Error::Config(format!("model has no rate symbol `{sym}`")));
        }
        let mut next = Vec::new();
        for r in &rate_sets {
            for &v in &vals {
                next.push(r.with(&sym, v)?);
            }
        }
        rate_sets = next;
    }
    let states: Vec<Vec<u32>> = match inits {
        Some(s) => s
            .split(';')
            .filter(|t| !t.trim().is_empty())
            .map(parse_list::<u32>)
            .collect::<Result<_, _>>()?,
        None => vec![net.default_init.clone()],
    };
    for x in &states {
        if x.len() != net.n_species() || !net.in_bounds(x) {
            return Err(Error::Config(format!("initial state {x:?} does not fit the model")));
        }
    }
    Ok(rate_sets
        .iter()
        .flat_map(|r| states.iter().map(move |x| (r.clone(), x.clone())))
        .collect())
}

#[derive(Debug, Args)]
pub struct TrainReward {
    /// Rate axis `sym=v1,v2,..`, repeatable; chains are trained over the product grid
    #[arg(long = "rate-grid")]
    rate_grid: Vec<String>,
    /// Initial states separated by `;`, species counts by `,` (default: the model's)
    #[arg(long)]
    init_states: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    /// Comma-separated times at which models are kept
    #[arg(long)]
    save_times: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `first-order` or `exact`
    #[arg(long)]
    kernel: Option<String>,
}

impl TrainReward {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let d = RewardHyper::default();
        let axes: Vec<String> = cfg.param("rate_grid", (!self.rate_grid.is_empty()).then(|| self.rate_grid.clone()), Vec::new())?;
        let inits: Option<String> = cfg.param_opt("init_states", self.init_states.clone())?;
        let t_final = cfg.param("t_final", self.t_final, net.t_final)?;
        let save_times = match cfg.param_opt::<String>("save_times", self.save_times.clone())? {
            Some(s) => parse_list(&s)?,
            None => vec![t_final],
        };
        let kernel = match cfg.param("kernel", self.kernel.clone(), "first-order".to_string())?.as_str() {
            "first-order" => KernelKind::FirstOrder,
            "exact" => KernelKind::Exact,
            k => return Err(Error::Config(format!("unknown kernel `{k}` (first-order or exact)"))),
        };
        let hyper = RewardHyper {
            dt: cfg.param("dt", self.dt, d.dt)?,
            t_final,
            save_times,
            width: cfg.param("width", self.width, d.width)?,
            batch: cfg.param("batch", self.batch, d.batch)?,
            epochs: cfg.param("epochs", self.epochs, d.epochs)?,
            lr: cfg.param("lr", self.lr, d.lr)?,
            kernel,
            seed: cfg.seed()?,
            ..d
        };
        let combos = combos(&net, &axes, inits.as_deref())?;
        let (set, trace) = train_reward_set(&net, &combos, &hyper)?;
        set.save(out, &net)?;
        let mut w = create(&out.join("reward_trace.csv"))?;
        writeln!(w, "chain,t,kl")?;
        for r in &trace {
            writeln!(w, "{},{},{}", r.chain, r.t, r.kl)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainMet {
    /// Directory written by `train-reward`
    #[arg(long)]
    reward_set: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    d_l: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_p: Option<usize>,
    #[arg(long)]
    s_batch: Option<usize>,
    #[arg(long)]
    m_acc: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Enables clipped-ratio updates with this epsilon
    #[arg(long)]
    ppo_clip: Option<f64>,
    #[arg(long)]
    ppo_updates: Option<usize>,
    #[arg(long)]
    max_kl: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainMet {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let seed = cfg.seed()?;
        let dir = cfg.existing_path("reward_set", self.reward_set.clone())?;
        let set = RewardModelSet::load(&dir)?;
        if set.meta.bounds != net.bounds {
            return Err(Error::Artifact(format!("reward set {} was trained on other bounds", dir.display())));
        }
        let r = MetConfig::reference();
        let mc = MetConfig {
            d_emb: cfg.param("d_emb", self.d_emb, r.d_emb)?,
            d_ff: cfg.param("d_ff", self.d_ff, r.d_ff)?,
            d_l: cfg.param("d_l", self.d_l, r.d_l)?,
            h: cfg.param("heads", self.heads, r.h)?,
            d_p: cfg.param("d_p", self.d_p, r.d_p)?,
        };
        let d = TrainHyper::default();
        let ppo = match cfg.param_opt("ppo_clip", self.ppo_clip)? {
            Some(eps) => Some((eps, cfg.param("ppo_updates", self.ppo_updates, 4)?)),
            None => None,
        };
        let hyper = TrainHyper {
            s_batch: cfg.param("s_batch", self.s_batch, d.s_batch)?,
            m_acc: cfg.param("m_acc", self.m_acc, d.m_acc)?,
            epochs: cfg.param("epochs", self.epochs, d.epochs)?,
            schedule: Schedule::warmup_inv_sqrt(cfg.param("lr", self.lr, 1e-3)?, cfg.param("warmup", self.warmup, 100)?),
            weight_decay: cfg.param("weight_decay", self.weight_decay, d.weight_decay)?,
            seed,
            ppo,
            max_kl: cfg.param("max_kl", self.max_kl, d.max_kl)?,
            patience: cfg.param("patience", self.patience, d.patience)?,
        };
        let mut model = match cfg.param_opt::<PathBuf>("resume", self.resume.clone())? {
            Some(p) => MetModel::load(&p, &net)?,
            None => {
                let mut m = MetModel::new(&mc, &net, &mut rng::stream(seed, u64::MAX))?;
                m.norm = PromptNorm::fit(&element_prompts(&set, &net)?);
                m
            }
        };
        let trace = train_met(&mut model, &set, &net, &hyper)?;
        model.save(&out.join("met.ckpt"), &net, seed)?;
        let mut w = create(&out.join("loss_trace.csv"))?;
        write_loss_trace(&mut w, &trace)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Sample {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prompt time
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
}

impl Sample {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let seed = cfg.seed()?;
        let model = load_met(cfg, self.checkpoint.clone(), &net)?;
        let t = cfg.require("t", self.t)?;
        let n = cfg.param("n", self.n, 1000)?;
        let prompt = build_prompt(&net, &net.default_rates, &net.default_init, t)?;
        let ws = model
            .sample_groups(std::slice::from_ref(&prompt), &[n], &mut rng::stream(seed, 0))
            .pop()
            .expect("one group");
        let names: Vec<&str> = net.species.iter().map(|s| s.name.as_str()).collect();
        let mut w = create(&out.join("samples.csv"))?;
        writeln!(w, "{},count", names.join(","))?;
        for (x, c) in ws.states.iter().zip(&ws.counts) {
            let xs: Vec<String> = x.iter().map(u32::to_string).collect();
            writeln!(w, "{},{c}", xs.join(","))?;
        }
        w.flush()?;
        let mut w = create(&out.join("marginals.csv"))?;
        writeln!(w, "species,count,probability")?;
        for (s, name) in names.iter().enumerate() {
            let mut m = vec![0.0; net.bounds[s] as usize + 1];
            for (x, &c) in ws.states.iter().zip(&ws.counts) {
                m[x[s] as usize] += c as f64 / n as f64;
            }
            for (v, p) in m.iter().enumerate() {
                writeln!(w, "{name},{v},{p}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Trajectories {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prompt time of every step
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    csv: bool,
}

impl Trajectories {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let seed = cfg.seed()?;
        let model = load_met(cfg, self.checkpoint.clone(), &net)?;
        let dt = cfg.require("dt", self.dt)?;
        let steps = cfg.require("steps", self.steps)?;
        let n = cfg.param("n", self.n, 1000)?;
        let csv = cfg.param("csv", self.csv.then_some(true), false)?;
        let ens = sample_trajectories_iterative(&model, &net, &net.default_rates, &net.default_init, dt, steps, n, seed)?;
        write_ensemble(out, &ens, csv)
    }
}

#[derive(Debug, Args)]
pub struct Analyze {
    /// Ensemble file (`ensemble.bin`)
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Reference ensemble compared by per-species Hellinger distance
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Compare against the exact solution of `--model` instead
    #[arg(long)]
    exact: bool,
    /// Species pair `A,B` whose joint histogram is searched for modes
    #[arg(long)]
    pair: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    floor: Option<f64>,
}

impl Analyze {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let path = cfg.existing_path("ensemble", self.ensemble.clone())?;
        let ens = read_ensemble(&path)?;
        let mut rows = Vec::new();
        for (k, t) in ens.grid.iter().enumerate() {
            let ctx = |s: usize| format!("t={t};{}", ens.species[s]);
            for (s, (m, sd)) in ens.mean_std(k)?.into_iter().enumerate() {
                rows.push(MetricRow::new("mean", ctx(s), m));
                rows.push(MetricRow::new("std", ctx(s), sd));
                let xs: Vec<f64> = ens.states_at(k)?.iter().map(|x| f64::from(x[s])).collect();
                if let Ok(b) = bimodality_coefficient(&xs) {
                    rows.push(MetricRow::new("bimodality", ctx(s), b));
                }
            }
        }
        if let Some(r) = cfg.param_opt::<PathBuf>("reference", self.reference.clone())? {
            let reference = read_ensemble(&r)?;
            if reference.grid != ens.grid || reference.bounds != ens.bounds {
                return Err(Error::Artifact("reference ensemble has a different grid or bounds".into()));
            }
            for k in 0..ens.n_times() {
                for s in 0..ens.n_species() {
                    let h = hellinger(&ens.marginal(k, s)?, &reference.marginal(k, s)?)?;
                    rows.push(MetricRow::new("hellinger_reference", format!("t={};{}", ens.grid[k], ens.species[s]), h));
                }
            }
        }
        if cfg.param("exact", self.exact.then_some(true), false)? {
            let net = cfg.network()?;
            if net.bounds != ens.bounds {
                return Err(Error::Artifact("model bounds differ from the ensemble's".into()));
            }
            let x0 = ens.state(0, 0).to_vec();
            if (0..ens.n_traj()).any(|j| ens.state(j, 0) != x0.as_slice()) {
                return Err(Error::Artifact("exact comparison needs a common initial state".into()));
            }
            let gen = build_generator(&net, &net.default_rates, DEFAULT_STATE_CAP)?;
            let p0 = ProbabilityVector::delta(gen.space(), &x0, 0.0)?;
            for (k, &t) in ens.grid.iter().enumerate() {
                let p = evolve_exact(&gen, &p0, t - ens.grid[0]);
                for s in 0..ens.n_species() {
                    let h = hellinger(&ens.marginal(k, s)?, &p.marginal(gen.space(), s))?;
                    rows.push(MetricRow::new("hellinger_exact", format!("t={t};{}", ens.species[s]), h));
                }
            }
        }
        if let Some(pair) = cfg.param_opt::<String>("pair", self.pair.clone())? {
            let (a, b) = pair
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("pair must be `A,B`, got `{pair}`")))?;
            let find = |n: &str| {
                ens.species
                    .iter()
                    .position(|s| s == n.trim())
                    .ok_or_else(|| Error::Config(format!("ensemble has no species `{n}`")))
            };
            let (a, b) = (find(a)?, find(b)?);
            let window = cfg.param("window", self.window, 3)?;
            let floor = cfg.param("floor", self.floor, 0.01)?;
            for (k, t) in ens.grid.iter().enumerate() {
                let h = Histogram2D::new((a, b), ens.joint(k, a, b)?)?;
                rows.push(MetricRow::new("modes", format!("t={t};{},{}", ens.species[a], ens.species[b]), mode_count(&h, window, floor) as f64));
            }
        }
        let mut w = create(&out.join("metrics.csv"))?;
        write_metrics(&mut w, &rows)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// First axis `sym=v1,v2,..`
    #[arg(long)]
    axis_a: Option<String>,
    /// Second axis `sym=v1,v2,..`
    #[arg(long)]
    axis_b: Option<String>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    /// Species whose counts enter the coefficient
    #[arg(long)]
    species: Option<String>,
}

impl Sweep {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let seed = cfg.seed()?;
        let model = load_met(cfg, self.checkpoint.clone(), &net)?;
        let (sa, va) = parse_axis(&cfg.require::<String>("axis_a", self.axis_a.clone())?)?;
        let (sb, vb) = parse_axis(&cfg.require::<String>("axis_b", self.axis_b.clone())?)?;
        let last = net.species.last().map(|s| s.name.clone()).unwrap_or_default();
        let species = species_index(&net, &cfg.param("species", self.species.clone(), last)?)?;
        let spec = SweepSpec {
            axis_a: (&sa, &va),
            axis_b: (&sb, &vb),
            x0: &net.default_init,
            t: cfg.require("t", self.t)?,
            n_samples: cfg.param("n", self.n, 1000)?,
            species,
            seed,
        };
        let cells = sweep_bimodality(&model, &net, &net.default_rates, &spec)?;
        let mut w = create(&out.join("sweep.csv"))?;
        write_sweep_csv(&mut w, (&sa, &sb), &cells)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Infer {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Observed ensemble (`ensemble.bin`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rate symbol to infer, repeatable; the others stay at their model values
    #[arg(long)]
    free: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Proposal standard deviation per log-rate
    #[arg(long)]
    std: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// `mean-probability`, `mean-log-probability` or `metropolis`
    #[arg(long)]
    acceptance: Option<String>,
}

impl Infer {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let net = cfg.network()?;
        let seed = cfg.seed()?;
        let model = load_met(cfg, self.checkpoint.clone(), &net)?;
        let data = read_ensemble(&cfg.existing_path("data", self.data.clone())?)?;
        let d = InferHyper::default();
        let acceptance: Acceptance = serde_json::from_value(serde_json::Value::String(cfg.param(
            "acceptance",
            self.acceptance.clone(),
            "mean-probability".to_string(),
        )?))
        .map_err(|_| Error::Config("acceptance must be mean-probability, mean-log-probability or metropolis".into()))?;
        let hyper = InferHyper {
            free: cfg.require("free", (!self.free.is_empty()).then(|| self.free.clone()))?,
            steps: cfg.param("steps", self.steps, d.steps)?,
            std: cfg.param("std", self.std, d.std)?,
            batch: cfg.param("batch", self.batch, d.batch)?,
            acceptance,
            seed,
        };
        let chain = infer_rates(&model, &net, &data, &net.default_rates, &hyper)?;
        let mut w = create(&out.join("chain.csv"))?;
        chain.write_csv(&mut w)?;
        w.flush()?;
        let estimate: serde_json::Map<String, serde_json::Value> = chain
            .symbols
            .iter()
            .zip(chain.estimate())
            .map(|(s, v)| (s.clone(), serde_json::json!(v)))
            .collect();
        let summary = serde_json::json!({
            "estimate": estimate,
            "accepted": chain.acceptance_count(),
            "steps": chain.accepted.len(),
        });
        fs::write(out.join("estimate.json"), serde_json::to_vec_pretty(&summary)?)?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    /// Tolerance on the worst relative error
    #[arg(long)]
    tol: Option<f64>,
}

impl Gradcheck {
    pub fn run(&self, cfg: &mut Resolved, out: &Path) -> Result<(), Error> {
        let tol = cfg.param("tol", self.tol, 1e-4)?;
        let mut results: Vec<(String, f64)> = gradcheck::op_suite()?
            .into_iter()
            .map(|(n, e)| (n.to_string(), e))
            .collect();
        if cfg.file.model.is_some() {
            let net = cfg.network()?;
            let small = MetConfig {
                d_emb: 8,
                d_ff: 16,
                d_l: 2,
                h: 2,
                d_p: 3,
            };
            let seed = cfg.file.seed.unwrap_or(0);
            results.push(("met_logprob".into(), logprob_gradcheck(&net, &small, seed)?));
        }
        let mut w = create(&out.join("gradcheck.csv"))?;
        writeln!(w, "check,max_relative_error,pass")?;
        for (n, e) in &results {
            writeln!(w, "{n},{e:e},{}", *e < tol)?;
        }
        w.flush()?;
        let failed: Vec<&str> = results.iter().filter(|(_, e)| !(*e < tol)).map(|(n, _)| n.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("gradient checks above {tol}: {}", failed.join(", "))))
        }
    }
}
