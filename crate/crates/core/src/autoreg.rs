//! Helpers shared by the autoregressive models: batched ancestral sampling
//! that returns deduplicated states with multiplicities.

use rand::Rng;
use rand_distr::{Binomial, Distribution};

/// Distinct sampled states with how often each was drawn.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedSamples {
    pub states: Vec<Vec<u32>>,
    pub counts: Vec<usize>,
}

impl WeightedSamples {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Expands into `total()` states in sorted order.
    pub fn expand(&self) -> Vec<Vec<u32>> {
        self.states
            .iter()
            .zip(&self.counts)
            .flat_map(|(x, &c)| std::iter::repeat_n(x.clone(), c))
            .collect()
    }
}

/// Splits `n` draws over a categorical distribution into per-outcome counts
/// with a chain of conditional binomials.
pub fn multinomial(n: usize, probs: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let mut out = vec![0; probs.len()];
    let mut rest_mass: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    let mut left = n as u64;
    for (v, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        let p = p.max(0.0);
        if v + 1 == probs.len() || p >= rest_mass {
            out[v] = left as usize;
            break;
        }
        let q = if rest_mass > 0.0 { (p / rest_mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = if q == 0.0 {
            0
        } else {
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        out[v] = k as usize;
        left -= k;
        rest_mass -= p;
    }
    out
}

/// Ancestral sampling for several groups at once (one group per prompt).
///
/// `counts[g]` states are drawn for group `g`. At position `i`, `cond` gets
/// the live `(group, prefix)` rows (prefixes are padded with zeros past `i`)
/// and must return the distribution of `x_i` for each row.
pub fn tree_sample<F>(
    bounds: &[u32],
    counts: &[usize],
    rng: &mut impl Rng,
    mut cond: F,
) -> Vec<WeightedSamples>
where
    F: FnMut(&[(usize, Vec<u32>)], usize) -> Vec<Vec<f64>>,
{
    let n = bounds.len();
    let mut rows: Vec<(usize, Vec<u32>)> = Vec::new();
    let mut mult: Vec<usize> = Vec::new();
    for (g, &c) in counts.iter().enumerate() {
        if c > 0 {
            rows.push((g, vec![0; n]));
            mult.push(c);
        }
    }
    for i in 0..n {
        if rows.is_empty() {
            break;
        }
        let dists = cond(&rows, i);
        let mut next_rows = Vec::with_capacity(rows.len());
        let mut next_mult = Vec::with_capacity(rows.len());
        for ((row, &m), dist) in rows.iter().zip(&mult).zip(&dists) {
            let split = multinomial(m, &dist[..bounds[i] as usize + 1], rng);
            for (v, &c) in split.iter().enumerate() {
                if c > 0 {
                    let mut x = row.1.clone();
                    x[i] = v as u32;
                    next_rows.push((row.0, x));
                    next_mult.push(c);
                }
            }
        }
        rows = next_rows;
        mult = next_mult;
    }
    let mut out = vec![WeightedSamples::default(); counts.len()];
    for ((g, x), m) in rows.into_iter().zip(mult) {
        out[g].states.push(x);
        out[g].counts.push(m);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multinomial_preserves_total_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = multinomial(1000, &[0.2, 0.0, 0.5, 0.3], &mut rng);
        assert_eq!(c.iter().sum::<usize>(), 1000);
        assert_eq!(c[1], 0);
    }

    #[test]
    fn tree_sample_matches_product_law() {
        // x0 ~ (0.25, 0.75), x1 | x0 ~ point mass at x0
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = tree_sample(&[1, 1], &[100_000, 7], &mut rng, |rows, i| {
            rows.iter()
                .map(|(_, x)| if i == 0 { vec![0.25, 0.75] } else if x[0] == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
                .collect()
        });
        assert_eq!(out[0].total(), 100_000);
        assert_eq!(out[1].total(), 7);
        assert!(out[0].states.iter().all(|x| x[0] == x[1]));
        let zero = out[0].states.iter().position(|x| x[0] == 0).map_or(0, |k| out[0].counts[k]);
        assert!((zero as f64 / 1e5 - 0.25).abs() < 0.01);
    }
}
