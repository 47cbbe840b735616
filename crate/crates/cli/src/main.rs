use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use met_core::Error;
use serde_json::json;

mod commands;
mod config;

use config::{sha256_hex, Common, Resolved};

#[derive(Parser)]
#[command(name = "met", version, about = "Solve chemical master equations exactly, by simulation, or with trained transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact distribution on the truncated state space
    SolveExact(commands::SolveExact),
    /// Gillespie trajectory ensemble
    Simulate(commands::Simulate),
    /// Train a set of recurrent reward models
    TrainReward(commands::TrainReward),
    /// Train a transformer against a reward-model set
    TrainMet(commands::TrainMet),
    /// Draw states from a trained transformer
    Sample(commands::Sample),
    /// Trajectory ensemble from a trained transformer with iterated prompts
    Trajectories(commands::Trajectories),
    /// Summary metrics of an ensemble, optionally against a reference
    Analyze(commands::Analyze),
    /// Bimodality coefficient over a two-rate grid
    Sweep(commands::Sweep),
    /// Rate inference from trajectory data
    Infer(commands::Infer),
    /// Finite-difference checks of the differentiation engine
    Gradcheck(commands::Gradcheck),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SolveExact(_) => "solve-exact",
            Command::Simulate(_) => "simulate",
            Command::TrainReward(_) => "train-reward",
            Command::TrainMet(_) => "train-met",
            Command::Sample(_) => "sample",
            Command::Trajectories(_) => "trajectories",
            Command::Analyze(_) => "analyze",
            Command::Sweep(_) => "sweep",
            Command::Infer(_) => "infer",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

/// Exclusive ownership of an output directory for the lifetime of the value.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is in use (remove {} if no other run owns it)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("MET_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("MET_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn output_hashes(dir: &Path) -> Result<serde_json::Map<String, serde_json::Value>, Error> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut out = serde_json::Map::new();
    for p in files {
        let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
        if rel == "manifest.json" || rel == ".lock" {
            continue;
        }
        out.insert(rel, json!(sha256_hex(&fs::read(&p)?)));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let started = Instant::now();
    let mut cfg = Resolved::new(&cli.common)?;
    let out = cfg.out()?;
    let _lock = DirLock::acquire(&out)?;
    match &cli.command {
        Command::SolveExact(c) => c.run(&mut cfg, &out)?,
        Command::Simulate(c) => c.run(&mut cfg, &out)?,
        Command::TrainReward(c) => c.run(&mut cfg, &out)?,
        Command::TrainMet(c) => c.run(&mut cfg, &out)?,
        Command::Sample(c) => c.run(&mut cfg, &out)?,
        Command::Trajectories(c) => c.run(&mut cfg, &out)?,
        Command::Analyze(c) => c.run(&mut cfg, &out)?,
        Command::Sweep(c) => c.run(&mut cfg, &out)?,
        Command::Infer(c) => c.run(&mut cfg, &out)?,
        Command::Gradcheck(c) => c.run(&mut cfg, &out)?,
    }
    let effective = serde_json::to_vec_pretty(&cfg.effective())?;
    fs::write(out.join("config.json"), &effective)?;
    let manifest = json!({
        "command": cli.command.name(),
        "argv": std::env::args().collect::<Vec<_>>(),
        "config_sha256": sha256_hex(&effective),
        "build": env!("MET_GIT_DESCRIBE"),
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "outputs": output_hashes(&out)?,
    });
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
