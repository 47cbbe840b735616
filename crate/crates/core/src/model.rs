//! Reaction networks, the `.cme` model language and stochastic mass-action
//! kinetics.
//!
//! A model file is line oriented. `#` starts a comment and tokens are
//! separated by whitespace:
//!
//! ```text
//! species X
//! bound 10
//! reaction kb : 0 -> X
//! reaction kd : X -> 0
//! rate kb 1.0
//! rate kd 0.1
//! init X 0
//! time 0 100
//! ```
//!
//! `bound <int>` sets the truncation bound for every species and
//! `bound <name> <int>` overrides it for one species. A reaction side is
//! either `0` or a `+`-separated list of terms `[coefficient] name`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("line {line}: unknown species `{name}`")]
    UnknownSpecies { line: usize, name: String },
    #[error("line {line}: species `{name}` declared twice")]
    DuplicateSpecies { line: usize, name: String },
    #[error("no rate given for rate symbol `{0}`")]
    MissingRate(String),
    #[error("rate `{symbol}` must be positive and finite, got {value}")]
    NonPositiveRate { symbol: String, value: f64 },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("model declares no {0}")]
    MissingDeclaration(&'static str),
    #[error("initial count {value} of `{name}` exceeds its bound {bound}")]
    InitOutOfBounds { name: String, value: u32, bound: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Species {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reaction {
    pub rate_symbol: String,
    /// `(species index, count)` pairs sorted by species index.
    pub reactants: Vec<(usize, u32)>,
    pub products: Vec<(usize, u32)>,
    /// Net state change `products - reactants`, one entry per species.
    pub jump: Vec<i64>,
}

impl Reaction {
    pub fn new(
        rate_symbol: impl Into<String>,
        reactants: Vec<(usize, u32)>,
        products: Vec<(usize, u32)>,
        n_species: usize,
    ) -> Self {
        let reactants = normalize_side(reactants);
        let products = normalize_side(products);
        let mut jump = vec![0i64; n_species];
        for &(s, c) in &reactants {
            jump[s] -= i64::from(c);
        }
        for &(s, c) in &products {
            jump[s] += i64::from(c);
        }
        Self {
            rate_symbol: rate_symbol.into(),
            reactants,
            products,
            jump,
        }
    }
}

fn normalize_side(side: Vec<(usize, u32)>) -> Vec<(usize, u32)> {
    let mut merged: BTreeMap<usize, u32> = BTreeMap::new();
    for (s, c) in side {
        if c > 0 {
            *merged.entry(s).or_default() += c;
        }
    }
    merged.into_iter().collect()
}

/// Rate constants keyed by rate symbol.
///
/// Values are finite and non-negative. Zero is allowed so that frozen
/// dynamics can be expressed programmatically; model files and prompts
/// require strictly positive rates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RateMap {
    values: BTreeMap<String, f64>,
}

impl RateMap {
    pub fn new<I, S>(entries: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut values = BTreeMap::new();
        for (symbol, value) in entries {
            let symbol = symbol.into();
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::NonPositiveRate { symbol, value });
            }
            values.insert(symbol, value);
        }
        Ok(Self { values })
    }

    pub fn get(&self, symbol: &str) -> Option<f64> {
        self.values.get(symbol).copied()
    }

    /// Returns a copy with `symbol` set to `value`.
    pub fn with(&self, symbol: &str, value: f64) -> Result<Self, ModelError> {
        if !value.is_finite() || value < 0.0 {
            return Err(ModelError::NonPositiveRate {
                symbol: symbol.to_string(),
                value,
            });
        }
        let mut out = self.clone();
        out.values.insert(symbol.to_string(), value);
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.values.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Every value scaled to zero; used for frozen-dynamics checks.
    pub fn zeroed(&self) -> Self {
        Self {
            values: self.values.keys().map(|k| (k.clone(), 0.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionNetwork {
    pub species: Vec<Species>,
    pub reactions: Vec<Reaction>,
    /// Inclusive upper bound per species.
    pub bounds: Vec<u32>,
    pub default_rates: RateMap,
    pub default_init: Vec<u32>,
    pub t_start: f64,
    pub t_final: f64,
}

impl ReactionNetwork {
    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_reactions(&self) -> usize {
        self.reactions.len()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn max_bound(&self) -> u32 {
        self.bounds.iter().copied().max().unwrap_or(0)
    }

    /// Same network with a single bound applied to every species.
    pub fn with_uniform_bound(&self, bound: u32) -> Self {
        let mut net = self.clone();
        net.bounds = vec![bound; net.n_species()];
        net
    }

    pub fn in_bounds(&self, x: &[u32]) -> bool {
        x.len() == self.bounds.len() && x.iter().zip(&self.bounds).all(|(v, b)| v <= b)
    }

    /// Per-reaction rate constants in reaction order.
    pub fn reaction_rates(&self, rates: &RateMap) -> Result<Vec<f64>, ModelError> {
        self.reactions
            .iter()
            .map(|r| {
                rates
                    .get(&r.rate_symbol)
                    .ok_or_else(|| ModelError::MissingRate(r.rate_symbol.clone()))
            })
            .collect()
    }

    /// Distinct rate symbols in order of first use by a reaction.
    pub fn rate_symbols(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.reactions {
            if !out.contains(&r.rate_symbol.as_str()) {
                out.push(&r.rate_symbol);
            }
        }
        out
    }

    pub fn kinetics(&self, rates: &RateMap) -> Result<Kinetics<'_>, ModelError> {
        Ok(Kinetics {
            net: self,
            k: self.reaction_rates(rates)?,
        })
    }
}

/// Mass-action propensity of reaction `j` at state `x`:
/// `k_j * prod_i x_i (x_i - 1) ... (x_i - r_ij + 1)`.
pub fn propensity(net: &ReactionNetwork, rates: &RateMap, x: &[u32], j: usize) -> f64 {
    let r = &net.reactions[j];
    let k = rates.get(&r.rate_symbol).unwrap_or(0.0);
    mass_action(k, r, x)
}

#[inline]
fn mass_action(k: f64, r: &Reaction, x: &[u32]) -> f64 {
    let mut a = k;
    for &(s, c) in &r.reactants {
        let n = x[s];
        if n < c {
            return 0.0;
        }
        for m in 0..c {
            a *= f64::from(n - m);
        }
    }
    a
}

/// `x + jump_j` if every component stays within `[0, bound]`.
pub fn apply_jump(net: &ReactionNetwork, x: &[u32], j: usize) -> Option<Vec<u32>> {
    shift(x, &net.reactions[j].jump, &net.bounds, 1)
}

#[inline]
fn shift(x: &[u32], jump: &[i64], bounds: &[u32], sign: i64) -> Option<Vec<u32>> {
    let mut out = Vec::with_capacity(x.len());
    for ((&v, &d), &b) in x.iter().zip(jump).zip(bounds) {
        let y = i64::from(v) + sign * d;
        if y < 0 || y > i64::from(b) {
            return None;
        }
        out.push(y as u32);
    }
    Some(out)
}

/// A network bound to concrete per-reaction rate constants.
#[derive(Debug, Clone)]
pub struct Kinetics<'a> {
    pub net: &'a ReactionNetwork,
    pub k: Vec<f64>,
}

impl Kinetics<'_> {
    pub fn propensity(&self, x: &[u32], j: usize) -> f64 {
        mass_action(self.k[j], &self.net.reactions[j], x)
    }

    pub fn successor(&self, x: &[u32], j: usize) -> Option<Vec<u32>> {
        shift(x, &self.net.reactions[j].jump, &self.net.bounds, 1)
    }

    pub fn predecessor(&self, x: &[u32], j: usize) -> Option<Vec<u32>> {
        shift(x, &self.net.reactions[j].jump, &self.net.bounds, -1)
    }

    /// Whether firing `j` at `x` keeps the state inside the box.
    pub fn jump_allowed(&self, x: &[u32], j: usize) -> bool {
        let jump = &self.net.reactions[j].jump;
        x.iter()
            .zip(jump)
            .zip(&self.net.bounds)
            .all(|((&v, &d), &b)| {
                let y = i64::from(v) + d;
                y >= 0 && y <= i64::from(b)
            })
    }

    /// Propensity with out-of-box jumps disabled.
    pub fn masked_propensity(&self, x: &[u32], j: usize) -> f64 {
        if self.jump_allowed(x, j) {
            self.propensity(x, j)
        } else {
            0.0
        }
    }

    /// Total rate of leaving `x` under reflecting truncation.
    pub fn exit_rate(&self, x: &[u32]) -> f64 {
        (0..self.k.len()).map(|j| self.masked_propensity(x, j)).sum()
    }
}

fn malformed(line: usize, message: impl Into<String>) -> ModelError {
    ModelError::MalformedLine {
        line,
        message: message.into(),
    }
}

fn parse_int(line: usize, tok: &str) -> Result<u32, ModelError> {
    tok.parse::<u32>()
        .map_err(|_| malformed(line, format!("expected a non-negative integer, got `{tok}`")))
}

fn parse_float(line: usize, tok: &str) -> Result<f64, ModelError> {
    tok.parse::<f64>()
        .map_err(|_| malformed(line, format!("expected a number, got `{tok}`")))
}

fn is_identifier(tok: &str) -> bool {
    let mut chars = tok.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '\'' || c == '.')
}

fn parse_side(
    line: usize,
    tokens: &[&str],
    species: &[String],
) -> Result<Vec<(usize, u32)>, ModelError> {
    if tokens.is_empty() {
        return Err(malformed(line, "empty reaction side (write `0`)"));
    }
    if tokens == ["0"] {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for term in tokens.split(|t| *t == "+") {
        let (coeff, name) = match term {
            [name] => (1, *name),
            [coeff, name] => (parse_int(line, coeff)?, *name),
            _ => return Err(malformed(line, format!("bad term `{}`", term.join(" ")))),
        };
        let idx = species
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| ModelError::UnknownSpecies {
                line,
                name: name.to_string(),
            })?;
        out.push((idx, coeff));
    }
    Ok(out)
}

/// Parses `.cme` model text.
pub fn parse_model(text: &str) -> Result<ReactionNetwork, ModelError> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, toks)| !toks.is_empty())
        .collect();

    // Species first, so declarations may appear anywhere in the file.
    let mut species: Vec<String> = Vec::new();
    for (line, toks) in &lines {
        if toks[0] == "species" {
            if toks.len() < 2 {
                return Err(malformed(*line, "`species` needs at least one name"));
            }
            for name in &toks[1..] {
                if !is_identifier(name) {
                    return Err(malformed(*line, format!("invalid species name `{name}`")));
                }
                if species.iter().any(|s| s == name) {
                    return Err(ModelError::DuplicateSpecies {
                        line: *line,
                        name: name.to_string(),
                    });
                }
                species.push(name.to_string());
            }
        }
    }
    if species.is_empty() {
        return Err(ModelError::MissingDeclaration("species"));
    }
    let n = species.len();
    let lookup = |line: usize, name: &str| {
        species
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| ModelError::UnknownSpecies {
                line,
                name: name.to_string(),
            })
    };

    let mut default_bound: Option<u32> = None;
    let mut overrides: Vec<Option<u32>> = vec![None; n];
    let mut reactions = Vec::new();
    let mut rates: BTreeMap<String, f64> = BTreeMap::new();
    let mut init = vec![0u32; n];
    let mut time: Option<(f64, f64)> = None;

    for (line, toks) in &lines {
        let line = *line;
        match toks[0] {
            "species" => {}
            "bound" => match toks.as_slice() {
                [_, v] => default_bound = Some(parse_int(line, v)?),
                [_, name, v] => overrides[lookup(line, name)?] = Some(parse_int(line, v)?),
                _ => return Err(malformed(line, "expected `bound <int>` or `bound <species> <int>`")),
            },
            "reaction" => {
                if toks.len() < 5 || toks[2] != ":" {
                    return Err(malformed(line, "expected `reaction <rate> : <side> -> <side>`"));
                }
                let symbol = toks[1];
                if !is_identifier(symbol) {
                    return Err(malformed(line, format!("invalid rate symbol `{symbol}`")));
                }
                let rest = &toks[3..];
                let arrow = rest
                    .iter()
                    .position(|t| *t == "->")
                    .ok_or_else(|| malformed(line, "missing `->`"))?;
                let lhs = parse_side(line, &rest[..arrow], &species)?;
                let rhs = parse_side(line, &rest[arrow + 1..], &species)?;
                if lhs.is_empty() && rhs.is_empty() {
                    return Err(malformed(line, "reaction `0 -> 0` has no effect"));
                }
                reactions.push(Reaction::new(symbol, lhs, rhs, n));
            }
            "rate" => {
                let [_, symbol, value] = toks.as_slice() else {
                    return Err(malformed(line, "expected `rate <symbol> <value>`"));
                };
                let value = parse_float(line, value)?;
                if !(value.is_finite() && value > 0.0) {
                    return Err(ModelError::NonPositiveRate {
                        symbol: symbol.to_string(),
                        value,
                    });
                }
                if rates.insert(symbol.to_string(), value).is_some() {
                    return Err(malformed(line, format!("rate `{symbol}` given twice")));
                }
            }
            "init" => {
                let [_, name, value] = toks.as_slice() else {
                    return Err(malformed(line, "expected `init <species> <count>`"));
                };
                init[lookup(line, name)?] = parse_int(line, value)?;
            }
            "time" => {
                let [_, t0, t1] = toks.as_slice() else {
                    return Err(malformed(line, "expected `time <t0> <tT>`"));
                };
                let (t0, t1) = (parse_float(line, t0)?, parse_float(line, t1)?);
                if !(t0.is_finite() && t1.is_finite() && t0 >= 0.0 && t1 > t0) {
                    return Err(malformed(line, "need 0 <= t0 < tT"));
                }
                time = Some((t0, t1));
            }
            other => return Err(malformed(line, format!("unknown keyword `{other}`"))),
        }
    }

    if reactions.is_empty() {
        return Err(ModelError::MissingDeclaration("reactions"));
    }
    let default_bound = default_bound.or_else(|| {
        // every species individually bounded is fine too
        overrides.iter().all(Option::is_some).then_some(0)
    });
    let Some(default_bound) = default_bound else {
        return Err(ModelError::MissingDeclaration("bound"));
    };
    let bounds: Vec<u32> = overrides.iter().map(|o| o.unwrap_or(default_bound)).collect();
    for r in &reactions {
        if !rates.contains_key(&r.rate_symbol) {
            return Err(ModelError::MissingRate(r.rate_symbol.clone()));
        }
    }
    for (i, (&v, &b)) in init.iter().zip(&bounds).enumerate() {
        if v > b {
            return Err(ModelError::InitOutOfBounds {
                name: species[i].clone(),
                value: v,
                bound: b,
            });
        }
    }
    let (t_start, t_final) = time.ok_or(ModelError::MissingDeclaration("time"))?;

    Ok(ReactionNetwork {
        species: species
            .into_iter()
            .enumerate()
            .map(|(index, name)| Species { name, index })
            .collect(),
        reactions,
        bounds,
        default_rates: RateMap { values: rates },
        default_init: init,
        t_start,
        t_final,
    })
}

/// Writes a network back to model-language text.
pub fn serialize_model(net: &ReactionNetwork) -> String {
    let mut out = String::new();
    let names: Vec<&str> = net.species.iter().map(|s| s.name.as_str()).collect();
    let _ = writeln!(out, "species {}", names.join(" "));

    // most common bound becomes the default
    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    for &b in &net.bounds {
        *freq.entry(b).or_default() += 1;
    }
    let default = freq
        .iter()
        .max_by_key(|(b, c)| (**c, std::cmp::Reverse(**b)))
        .map(|(b, _)| *b)
        .unwrap_or(0);
    let _ = writeln!(out, "bound {default}");
    for (i, &b) in net.bounds.iter().enumerate() {
        if b != default {
            let _ = writeln!(out, "bound {} {b}", names[i]);
        }
    }

    let side = |terms: &[(usize, u32)]| {
        if terms.is_empty() {
            return "0".to_string();
        }
        terms
            .iter()
            .map(|&(s, c)| if c == 1 { names[s].to_string() } else { format!("{c} {}", names[s]) })
            .collect::<Vec<_>>()
            .join(" + ")
    };
    for r in &net.reactions {
        let _ = writeln!(
            out,
            "reaction {} : {} -> {}",
            r.rate_symbol,
            side(&r.reactants),
            side(&r.products)
        );
    }
    for (symbol, value) in net.default_rates.iter() {
        let _ = writeln!(out, "rate {symbol} {value:?}");
    }
    for (name, v) in names.iter().zip(&net.default_init) {
        let _ = writeln!(out, "init {name} {v}");
    }
    let _ = writeln!(out, "time {:?} {:?}", net.t_start, net.t_final);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const BIRTH_DEATH: &str =
        "species X\nbound 10\nreaction kb : 0 -> X\nreaction kd : X -> 0\nrate kb 1.0\nrate kd 0.1\ninit X 0\ntime 0 100";

    fn dimer() -> ReactionNetwork {
        parse_model("species P D\nbound 10\nreaction k : 2 P -> D\nrate k 0.5\ntime 0 1\n").unwrap()
    }

    #[test]
    fn parses_birth_death() {
        let net = parse_model(BIRTH_DEATH).unwrap();
        assert_eq!(net.n_species(), 1);
        assert_eq!(net.n_reactions(), 2);
        assert_eq!(net.reactions[0].jump, vec![1]);
        assert_eq!(net.reactions[1].jump, vec![-1]);
        assert_eq!(net.bounds, vec![10]);
        assert_eq!(net.default_rates.get("kd"), Some(0.1));
        assert_eq!(net.t_final, 100.0);
    }

    #[test]
    fn negative_rate_rejected() {
        let text = BIRTH_DEATH.replace("rate kd 0.1", "rate kd -0.1");
        assert!(matches!(
            parse_model(&text),
            Err(ModelError::NonPositiveRate { ref symbol, .. }) if symbol == "kd"
        ));
    }

    #[test]
    fn stoichiometric_coefficients() {
        let net = dimer();
        let r = &net.reactions[0];
        assert_eq!(r.reactants, vec![(0, 2)]);
        assert_eq!(r.jump, vec![-2, 1]);
    }

    #[test]
    fn parse_errors() {
        let unknown = "species X\nbound 3\nreaction k : Y -> 0\nrate k 1\ntime 0 1";
        assert!(matches!(
            parse_model(unknown),
            Err(ModelError::UnknownSpecies { line: 3, .. })
        ));
        let dup = "species X X\nbound 3\nreaction k : X -> 0\nrate k 1\ntime 0 1";
        assert!(matches!(parse_model(dup), Err(ModelError::DuplicateSpecies { .. })));
        let missing = "species X\nbound 3\nreaction k : X -> 0\ntime 0 1";
        assert_eq!(parse_model(missing), Err(ModelError::MissingRate("k".into())));
        let garbage = "species X\nbound 3\nreaction k X -> 0\nrate k 1\ntime 0 1";
        assert!(matches!(parse_model(garbage), Err(ModelError::MalformedLine { line: 3, .. })));
        let zero = "species X\nbound 3\nreaction k : X -> 0\nrate k 0\ntime 0 1";
        assert!(matches!(parse_model(zero), Err(ModelError::NonPositiveRate { .. })));
    }

    #[test]
    fn bound_override_and_comments() {
        let text = "# toggle fragment\nspecies G P  # gene, protein\nbound 20\nbound G 1\n\
                    reaction s : G -> G + P\nrate s 2\ninit G 1\ntime 0 5\n";
        let net = parse_model(text).unwrap();
        assert_eq!(net.bounds, vec![1, 20]);
        assert_eq!(net.default_init, vec![1, 0]);
        assert_eq!(net.reactions[0].jump, vec![0, 1]);
    }

    #[test]
    fn propensity_examples() {
        let net = parse_model(BIRTH_DEATH).unwrap();
        let rates = net.default_rates.clone();
        assert_eq!(propensity(&net, &rates, &[7], 0), 1.0);
        assert!((propensity(&net, &rates, &[3], 1) - 0.3).abs() < 1e-15);
        let d = dimer();
        assert_eq!(propensity(&d, &d.default_rates, &[4, 0], 0), 6.0);
        assert_eq!(propensity(&d, &d.default_rates, &[1, 0], 0), 0.0);
    }

    #[test]
    fn jump_boundaries() {
        let net = parse_model(BIRTH_DEATH).unwrap();
        assert_eq!(apply_jump(&net, &[0], 1), None);
        assert_eq!(apply_jump(&net, &[9], 0), Some(vec![10]));
        assert_eq!(apply_jump(&net, &[10], 0), None);
    }

    #[test]
    fn serialize_roundtrip_simple() {
        let net = parse_model(BIRTH_DEATH).unwrap();
        assert_eq!(parse_model(&serialize_model(&net)).unwrap(), net);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_network() -> impl Strategy<Value = ReactionNetwork> {
            (1usize..4)
                .prop_flat_map(|n| {
                    let side = proptest::collection::vec((0..n, 1u32..3), 0..3);
                    (
                        Just(n),
                        proptest::collection::vec(1u32..12, n),
                        proptest::collection::vec((side.clone(), side, 1e-3f64..50.0), 1..5),
                        0.0f64..2.0,
                    )
                })
                .prop_filter_map("non-empty reactions", |(n, bounds, rxns, t0)| {
                    let mut reactions = Vec::new();
                    let mut values = Vec::new();
                    for (i, (l, r, k)) in rxns.into_iter().enumerate() {
                        let rx = Reaction::new(format!("k{i}"), l, r, n);
                        if rx.reactants.is_empty() && rx.products.is_empty() {
                            return None;
                        }
                        values.push((format!("k{i}"), k));
                        reactions.push(rx);
                    }
                    let init = bounds.iter().map(|b| b / 2).collect();
                    Some(ReactionNetwork {
                        species: (0..n).map(|i| Species { name: format!("S{i}"), index: i }).collect(),
                        reactions,
                        bounds,
                        default_rates: RateMap::new(values).unwrap(),
                        default_init: init,
                        t_start: t0,
                        t_final: t0 + 1.5,
                    })
                })
        }

        proptest! {
            #[test]
            fn parse_serialize_roundtrip(net in arb_network()) {
                let text = serialize_model(&net);
                prop_assert_eq!(parse_model(&text).unwrap(), net);
            }

            #[test]
            fn jump_then_reverse(net in arb_network(), seed in any::<u64>()) {
                let kin = net.kinetics(&net.default_rates).unwrap();
                let x: Vec<u32> = net.bounds.iter().enumerate()
                    .map(|(i, b)| ((seed >> (8 * i)) as u32) % (b + 1)).collect();
                for j in 0..net.n_reactions() {
                    if let Some(y) = kin.successor(&x, j) {
                        prop_assert_eq!(kin.predecessor(&y, j), Some(x.clone()));
                    }
                }
            }

            #[test]
            fn propensity_monotone(net in arb_network(), seed in any::<u64>()) {
                let x: Vec<u32> = net.bounds.iter().enumerate()
                    .map(|(i, b)| ((seed >> (8 * i)) as u32) % (b + 1)).collect();
                for j in 0..net.n_reactions() {
                    let a = propensity(&net, &net.default_rates, &x, j);
                    for s in 0..net.n_species() {
                        let mut y = x.clone();
                        y[s] += 1;
                        prop_assert!(propensity(&net, &net.default_rates, &y, j) >= a);
                    }
                }
            }
        }
    }
}
