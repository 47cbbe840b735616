//! Run configuration: a versioned JSON file merged with command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use met_core::model::{parse_model, RateMap, ReactionNetwork};
use met_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// Contents of a `--config` file. Every field may also be given as a flag;
/// flags win. `params` holds the per-command hyperparameters under their
/// flag names with `-` replaced by `_`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub rates: BTreeMap<String, f64>,
    #[serde(default)]
    pub init: BTreeMap<String, u32>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model file (.cme)
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Rate override `symbol=value`, repeatable
    #[arg(long = "rate", value_name = "SYM=VALUE", global = true)]
    pub rates: Vec<String>,
    /// Initial count override `species=count`, repeatable
    #[arg(long = "init", value_name = "SPECIES=COUNT", global = true)]
    pub init: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn config_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

fn split_kv(s: &str) -> Result<(&str, &str), Error> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| config_err(format!("expected `name=value`, got `{s}`")))
}

/// The merged configuration of one invocation. Every value read through it
/// is recorded, so the effective configuration can be written out and hashed.
pub struct Resolved {
    pub file: RunConfig,
    pub params: Map<String, Value>,
}

impl Resolved {
    pub fn new(common: &Common) -> Result<Self, Error> {
        let mut file = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| config_err(format!("config {}: {e}", path.display())))?;
                if cfg.version != CONFIG_VERSION {
                    return Err(config_err(format!(
                        "config {} has version {}, expected {CONFIG_VERSION}",
                        path.display(),
                        cfg.version
                    )));
                }
                cfg
            }
            None => RunConfig::default(),
        };
        file.version = CONFIG_VERSION;
        if common.model.is_some() {
            file.model.clone_from(&common.model);
        }
        if common.seed.is_some() {
            file.seed = common.seed;
        }
        if common.out.is_some() {
            file.out.clone_from(&common.out);
        }
        for r in &common.rates {
            let (k, v) = split_kv(r)?;
            let v: f64 = v.parse().map_err(|_| config_err(format!("bad rate value in `{r}`")))?;
            file.rates.insert(k.to_string(), v);
        }
        for r in &common.init {
            let (k, v) = split_kv(r)?;
            let v: u32 = v.parse().map_err(|_| config_err(format!("bad initial count in `{r}`")))?;
            file.init.insert(k.to_string(), v);
        }
        Ok(Self {
            file,
            params: Map::new(),
        })
    }

    /// A per-command value: the flag if given, else the config entry, else `default`.
    pub fn param<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Error>
    where
        T: Serialize + DeserializeOwned,
    {
        let v = self.param_opt(key, flag)?.unwrap_or(default);
        self.params.insert(key.to_string(), serde_json::to_value(&v)?);
        Ok(v)
    }

    pub fn param_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Error>
    where
        T: Serialize + DeserializeOwned,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.params.get(key) {
                Some(raw) => Some(
                    serde_json::from_value(raw.clone()).map_err(|e| config_err(format!("config parameter `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.params.insert(key.to_string(), serde_json::to_value(v)?);
        }
        Ok(v)
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, Error>
    where
        T: Serialize + DeserializeOwned,
    {
        self.param_opt(key, flag)?
            .ok_or_else(|| config_err(format!("missing required parameter `--{}`", key.replace('_', "-"))))
    }

    /// An input path that must exist.
    pub fn existing_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, Error> {
        let p: PathBuf = self.require(key, flag)?;
        if !p.exists() {
            return Err(config_err(format!("{} does not exist: {}", key.replace('_', " "), p.display())));
        }
        Ok(p)
    }

    pub fn seed(&self) -> Result<u64, Error> {
        self.file
            .seed
            .ok_or_else(|| config_err("a seed is required (`--seed` or `seed` in the config)"))
    }

    pub fn out(&self) -> Result<PathBuf, Error> {
        self.file
            .out
            .clone()
            .ok_or_else(|| config_err("an output directory is required (`--out`)"))
    }

    /// The model with rate and initial-count overrides applied.
    pub fn network(&self) -> Result<ReactionNetwork, Error> {
        let path = self
            .file
            .model
            .as_ref()
            .ok_or_else(|| config_err("a model file is required (`--model`)"))?;
        load_network(path, &self.file.rates, &self.file.init)
    }

    /// Effective configuration as written next to the results.
    pub fn effective(&self) -> RunConfig {
        RunConfig {
            params: self.params.clone(),
            ..self.file.clone()
        }
    }
}

pub fn load_network(path: &Path, rates: &BTreeMap<String, f64>, init: &BTreeMap<String, u32>) -> Result<ReactionNetwork, Error> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read model {}: {e}", path.display())))?;
    let mut net = parse_model(&text)?;
    let symbols: Vec<String> = net.rate_symbols().iter().map(|s| s.to_string()).collect();
    let mut map: RateMap = net.default_rates.clone();
    for (k, &v) in rates {
        if !symbols.contains(k) {
            return Err(config_err(format!("model has no rate symbol `{k}`")));
        }
        map = map.with(k, v)?;
    }
    net.default_rates = map;
    for (k, &v) in init {
        let i = net
            .species_index(k)
            .ok_or_else(|| config_err(format!("model has no species `{k}`")))?;
        if v > net.bounds[i] {
            return Err(config_err(format!("initial count {v} of `{k}` exceeds its bound {}", net.bounds[i])));
        }
        net.default_init[i] = v;
    }
    Ok(net)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses `a,b,c` into numbers.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|_| config_err(format!("bad list entry `{t}` in `{s}`"))))
        .collect()
}

/// Parses `sym=v1,v2,..`.
pub fn parse_axis(s: &str) -> Result<(String, Vec<f64>), Error> {
    let (k, v) = split_kv(s)?;
    let vals = parse_list(v)?;
    if vals.is_empty() {
        return Err(config_err(format!("axis `{s}` has no values")));
    }
    Ok((k.to_string(), vals))
}
