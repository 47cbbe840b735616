//! Gillespie direct-method simulation and trajectory ensembles.
//!
//! Jumps that would leave the bounding box are disabled, so simulated paths
//! follow the same truncated process as the exact generator.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, RateMap, ReactionNetwork};
use crate::rng;

pub const ENSEMBLE_MAGIC: &[u8; 8] = b"METENS01";

#[derive(Debug, Error)]
pub enum SsaError {
    #[error("initial state {0:?} is outside the bounds")]
    OutOfBounds(Vec<u32>),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("time index {index} out of range for a grid of {len} points")]
    TimeIndexOutOfRange { index: usize, len: usize },
    #[error("species index {0} out of range")]
    SpeciesOutOfRange(usize),
    #[error("at least one trajectory is required")]
    NoTrajectories,
    #[error("ensemble file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Ssa,
    Met,
    Rnn,
}

impl Method {
    fn tag(self) -> u8 {
        match self {
            Method::Ssa => 0,
            Method::Met => 1,
            Method::Rnn => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Method::Ssa),
            1 => Some(Method::Met),
            2 => Some(Method::Rnn),
            _ => None,
        }
    }
}

/// States of many trajectories recorded on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub species: Vec<String>,
    pub bounds: Vec<u32>,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub method: Method,
    n_traj: usize,
    /// `[trajectory][time][species]`, flattened.
    states: Vec<u32>,
}

pub fn validate_grid(grid: &[f64]) -> Result<(), SsaError> {
    if grid.is_empty() {
        return Err(SsaError::InvalidGrid("empty".into()));
    }
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(SsaError::InvalidGrid("times must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SsaError::InvalidGrid("times must be strictly increasing".into()));
    }
    Ok(())
}

impl TrajectoryEnsemble {
    pub fn from_parts(
        net: &ReactionNetwork,
        grid: Vec<f64>,
        seed: u64,
        method: Method,
        n_traj: usize,
        states: Vec<u32>,
    ) -> Result<Self, SsaError> {
        validate_grid(&grid)?;
        let n = net.n_species();
        if states.len() != n_traj * grid.len() * n {
            return Err(SsaError::Format(format!(
                "{} state entries for {n_traj} trajectories x {} times x {n} species",
                states.len(),
                grid.len()
            )));
        }
        if let Some(x) = states.chunks(n.max(1)).find(|x| !net.in_bounds(x)) {
            return Err(SsaError::OutOfBounds(x.to_vec()));
        }
        Ok(Self {
            species: net.species.iter().map(|s| s.name.clone()).collect(),
            bounds: net.bounds.clone(),
            grid,
            seed,
            method,
            n_traj,
            states,
        })
    }

    pub fn n_traj(&self) -> usize {
        self.n_traj
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    pub fn state(&self, traj: usize, time_index: usize) -> &[u32] {
        let n = self.n_species();
        let off = (traj * self.grid.len() + time_index) * n;
        &self.states[off..off + n]
    }

    /// Every trajectory's state at one grid time.
    pub fn states_at(&self, time_index: usize) -> Result<Vec<&[u32]>, SsaError> {
        self.check_time(time_index)?;
        Ok((0..self.n_traj).map(|i| self.state(i, time_index)).collect())
    }

    fn check_time(&self, index: usize) -> Result<(), SsaError> {
        if index >= self.grid.len() {
            return Err(SsaError::TimeIndexOutOfRange {
                index,
                len: self.grid.len(),
            });
        }
        Ok(())
    }

    /// Empirical distribution of one species over `0..=bound`.
    pub fn marginal(&self, time_index: usize, species: usize) -> Result<Vec<f64>, SsaError> {
        self.check_time(time_index)?;
        if species >= self.n_species() {
            return Err(SsaError::SpeciesOutOfRange(species));
        }
        let mut counts = vec![0.0; self.bounds[species] as usize + 1];
        for i in 0..self.n_traj {
            counts[self.state(i, time_index)[species] as usize] += 1.0;
        }
        let n = self.n_traj as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        Ok(counts)
    }

    /// Empirical joint distribution of two species, row-major in `a`.
    pub fn joint(&self, time_index: usize, a: usize, b: usize) -> Result<Vec<Vec<f64>>, SsaError> {
        self.check_time(time_index)?;
        for s in [a, b] {
            if s >= self.n_species() {
                return Err(SsaError::SpeciesOutOfRange(s));
            }
        }
        let mut h = vec![vec![0.0; self.bounds[b] as usize + 1]; self.bounds[a] as usize + 1];
        let w = 1.0 / self.n_traj as f64;
        for i in 0..self.n_traj {
            let x = self.state(i, time_index);
            h[x[a] as usize][x[b] as usize] += w;
        }
        Ok(h)
    }

    /// Per-species `(mean, std)` at one grid time; std uses the `n - 1` divisor.
    pub fn mean_std(&self, time_index: usize) -> Result<Vec<(f64, f64)>, SsaError> {
        self.check_time(time_index)?;
        let n = self.n_traj as f64;
        Ok((0..self.n_species())
            .map(|s| {
                let vals = (0..self.n_traj).map(|i| f64::from(self.state(i, time_index)[s]));
                let mean = vals.clone().sum::<f64>() / n;
                let var = if self.n_traj > 1 {
                    vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (mean, var.sqrt())
            })
            .collect())
    }

    /// Binary table: magic, version, header, then one run of states per trajectory.
    pub fn write_binary(&self, mut w: impl Write) -> Result<(), SsaError> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[self.method.tag()])?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.n_species() as u32).to_le_bytes())?;
        for (name, b) in self.species.iter().zip(&self.bounds) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&b.to_le_bytes())?;
        }
        w.write_all(&(self.grid.len() as u32).to_le_bytes())?;
        for t in &self.grid {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&(self.n_traj as u64).to_le_bytes())?;
        for v in &self.states {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self, SsaError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(SsaError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(SsaError::Format(format!("unsupported version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let method = Method::from_tag(tag[0]).ok_or_else(|| SsaError::Format("unknown method tag".into()))?;
        let seed = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let mut species = Vec::with_capacity(n);
        let mut bounds = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            if len > 4096 {
                return Err(SsaError::Format("species name too long".into()));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            species.push(String::from_utf8(buf).map_err(|_| SsaError::Format("species name is not utf-8".into()))?);
            bounds.push(read_u32(&mut r)?);
        }
        let nt = read_u32(&mut r)? as usize;
        let grid = (0..nt)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()?;
        validate_grid(&grid)?;
        let n_traj = read_u64(&mut r)? as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n_traj * nt * n * 4 {
            return Err(SsaError::Format("state table has the wrong length".into()));
        }
        let states: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if states.chunks(n.max(1)).any(|x| x.iter().zip(&bounds).any(|(v, b)| v > b)) {
            return Err(SsaError::Format("state outside recorded bounds".into()));
        }
        Ok(Self {
            species,
            bounds,
            grid,
            seed,
            method,
            n_traj,
            states,
        })
    }

    /// CSV with columns `trajectory,time,<species...>`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), SsaError> {
        write!(w, "trajectory,time")?;
        for s in &self.species {
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
        for i in 0..self.n_traj {
            for (k, t) in self.grid.iter().enumerate() {
                write!(w, "{i},{t}")?;
                for v in self.state(i, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// One direct-method path from time 0, recorded at each grid time.
fn simulate_one(
    kin: &crate::model::Kinetics<'_>,
    x0: &[u32],
    grid: &[f64],
    rng: &mut impl Rng,
    out: &mut Vec<u32>,
) {
    let m = kin.k.len();
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut a = vec![0.0; m];
    let mut next = 0;
    loop {
        for (j, aj) in a.iter_mut().enumerate() {
            *aj = kin.masked_propensity(&x, j);
        }
        let a0: f64 = a.iter().sum();
        let t_next = if a0 > 0.0 {
            // 1 - u lies in (0, 1], so the log is finite
            let u: f64 = rng.random();
            t - (1.0 - u).ln() / a0
        } else {
            f64::INFINITY
        };
        while next < grid.len() && grid[next] < t_next {
            out.extend_from_slice(&x);
            next += 1;
        }
        if next == grid.len() {
            return;
        }
        let target = rng.random::<f64>() * a0;
        let mut acc = 0.0;
        let mut chosen = None;
        for (j, &aj) in a.iter().enumerate() {
            if aj > 0.0 {
                acc += aj;
                chosen = Some(j);
                if target < acc {
                    break;
                }
            }
        }
        let j = chosen.expect("positive total propensity");
        x = kin.successor(&x, j).expect("masked jumps stay in bounds");
        t = t_next;
    }
}

/// Simulates `n_traj` independent paths from `x0` at time 0.
///
/// Trajectory `i` draws from stream `i` of `seed`, so the ensemble does not
/// depend on how the work is scheduled across threads.
pub fn simulate(
    net: &ReactionNetwork,
    rates: &RateMap,
    x0: &[u32],
    grid: &[f64],
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble, SsaError> {
    if x0.len() != net.n_species() || !net.in_bounds(x0) {
        return Err(SsaError::OutOfBounds(x0.to_vec()));
    }
    if n_traj == 0 {
        return Err(SsaError::NoTrajectories);
    }
    validate_grid(grid)?;
    let kin = net.kinetics(rates)?;
    let runs: Vec<Vec<u32>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mut out = Vec::with_capacity(grid.len() * x0.len());
            simulate_one(&kin, x0, grid, &mut rng, &mut out);
            out
        })
        .collect();
    TrajectoryEnsemble::from_parts(net, grid.to_vec(), seed, Method::Ssa, n_traj, runs.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    fn death() -> ReactionNetwork {
        parse_model("species X\nreaction k : X -> 0\nrate k 0.1\nbound 30\ninit X 20\ntime 0 10\n").unwrap()
    }

    fn birth_death() -> ReactionNetwork {
        parse_model("species X\nreaction kb : 0 -> X\nreaction kd : X -> 0\nrate kb 1.0\nrate kd 0.1\nbound 30\ninit X 0\ntime 0 10\n")
            .unwrap()
    }

    #[test]
    fn zero_rates_hold_initial_state() {
        let net = birth_death();
        let ens = simulate(&net, &net.default_rates.zeroed(), &[7], &[0.0, 1.0, 5.0], 20, 3).unwrap();
        for i in 0..20 {
            for k in 0..3 {
                assert_eq!(ens.state(i, k), &[7]);
            }
        }
    }

    #[test]
    fn pure_death_mean() {
        let net = death();
        let n = 10_000;
        let ens = simulate(&net, &net.default_rates, &[20], &[10.0], n, 11).unwrap();
        let (mean, std) = ens.mean_std(0).unwrap()[0];
        let expect = 20.0 * (-1.0f64).exp();
        let se = std / (n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} vs {expect} (se {se})");
    }

    #[test]
    fn marginal_matches_independent_recount() {
        let net = birth_death();
        let ens = simulate(&net, &net.default_rates, &[0], &[1.0, 4.0], 500, 5).unwrap();
        let m = ens.marginal(1, 0).unwrap();
        let mut tally = std::collections::HashMap::new();
        for i in 0..500 {
            *tally.entry(ens.state(i, 1)[0]).or_insert(0usize) += 1;
        }
        for (v, p) in m.iter().enumerate() {
            let c = tally.get(&(v as u32)).copied().unwrap_or(0);
            assert!((p - c as f64 / 500.0).abs() < 1e-15);
        }
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean: f64 = m.iter().enumerate().map(|(v, p)| v as f64 * p).sum();
        assert!((mean - ens.mean_std(1).unwrap()[0].0).abs() < 1e-12);
    }

    #[test]
    fn single_trajectory_gives_indicator() {
        let net = birth_death();
        let ens = simulate(&net, &net.default_rates, &[3], &[2.0], 1, 9).unwrap();
        let m = ens.marginal(0, 0).unwrap();
        assert_eq!(m.iter().filter(|&&p| p == 1.0).count(), 1);
        assert_eq!(m.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn independent_of_thread_count() {
        let net = birth_death();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&net, &net.default_rates, &[0], &[1.0, 2.0, 3.0], 300, 42).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn binary_and_csv_roundtrip() {
        let net = birth_death();
        let ens = simulate(&net, &net.default_rates, &[0], &[0.5, 1.5], 4, 1).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        assert_eq!(TrajectoryEnsemble::read_binary(&buf[..]).unwrap(), ens);
        let mut csv = Vec::new();
        ens.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some("trajectory,time,X"));
        assert_eq!(text.lines().count(), 1 + 4 * 2);
    }

    #[test]
    fn errors() {
        let net = birth_death();
        assert!(matches!(
            simulate(&net, &net.default_rates, &[31], &[1.0], 1, 0),
            Err(SsaError::OutOfBounds(_))
        ));
        assert!(matches!(
            simulate(&net, &net.default_rates, &[0], &[2.0, 1.0], 1, 0),
            Err(SsaError::InvalidGrid(_))
        ));
        let ens = simulate(&net, &net.default_rates, &[0], &[1.0], 2, 0).unwrap();
        assert!(matches!(ens.marginal(1, 0), Err(SsaError::TimeIndexOutOfRange { .. })));
    }
}
