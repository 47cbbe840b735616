//! Distribution metrics: Hellinger distance, bimodality and mode counting.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("distributions have different supports ({0} vs {1} entries)")]
    SupportMismatch(usize, usize),
    #[error("all samples are equal")]
    DegenerateVariance,
    #[error("need at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("histogram has no mass")]
    EmptyHistogram,
}

/// `sqrt(1 - sum_i sqrt(p_i q_i))` for normalized `p` and `q`.
pub fn hellinger(p: &[f64], q: &[f64]) -> Result<f64, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::SupportMismatch(p.len(), q.len()));
    }
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a.max(0.0) * b.max(0.0)).sqrt()).sum();
    Ok((1.0 - bc).clamp(0.0, 1.0).sqrt())
}

/// Hellinger distance between two joint tables of equal shape.
pub fn hellinger_2d(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::SupportMismatch(p.len(), q.len()));
    }
    let flat = |h: &[Vec<f64>]| h.iter().flatten().copied().collect::<Vec<_>>();
    hellinger(&flat(p), &flat(q))
}

/// Sarle's sample bimodality coefficient from bias-adjusted skewness and
/// excess kurtosis. Uniform data tends to 5/9, normal data to 1/3.
pub fn bimodality_coefficient(samples: &[f64]) -> Result<f64, AnalysisError> {
    let n = samples.len();
    if n < 4 {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    // rounding noise of equal samples stays far below this
    if m2 <= 1e-24 * (mean * mean).max(1.0) {
        return Err(AnalysisError::DegenerateVariance);
    }
    let g1 = m3 / m2.powf(1.5);
    let g2 = m4 / (m2 * m2) - 3.0;
    let skew = g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0);
    let kurt = ((nf + 1.0) * g2 + 6.0) * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0));
    Ok((skew * skew + 1.0) / (kurt + 3.0 * (nf - 1.0).powi(2) / ((nf - 2.0) * (nf - 3.0))))
}

/// Normalized joint distribution of a species pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    pub axes: (usize, usize),
    /// `probs[a][b]`.
    pub probs: Vec<Vec<f64>>,
}

impl Histogram2D {
    /// Normalizes non-negative weights (counts or unnormalized mass).
    pub fn new(axes: (usize, usize), weights: Vec<Vec<f64>>) -> Result<Self, AnalysisError> {
        let total: f64 = weights.iter().flatten().sum();
        if !(total > 0.0) || weights.iter().any(|r| r.len() != weights[0].len()) {
            return Err(AnalysisError::EmptyHistogram);
        }
        let probs = weights
            .into_iter()
            .map(|r| r.into_iter().map(|w| w / total).collect())
            .collect();
        Ok(Self { axes, probs })
    }

    pub fn from_samples(axes: (usize, usize), dims: (usize, usize), samples: &[(u32, u32)]) -> Result<Self, AnalysisError> {
        let mut w = vec![vec![0.0; dims.1]; dims.0];
        for &(a, b) in samples {
            w[a as usize][b as usize] += 1.0;
        }
        Self::new(axes, w)
    }

    pub fn rows(&self) -> usize {
        self.probs.len()
    }

    pub fn cols(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }
}

/// Counts strict local maxima (against all 8 neighbours) of the
/// box-averaged grid that exceed `floor` times the smoothed maximum.
/// `window` is the box side length; even values are rounded up.
pub fn mode_count(h: &Histogram2D, window: usize, floor: f64) -> usize {
    let (r, c) = (h.rows(), h.cols());
    if r == 0 || c == 0 {
        return 0;
    }
    let half = (window.max(1) / 2) as isize;
    let mut s = vec![vec![0.0; c]; r];
    for i in 0..r {
        for j in 0..c {
            let (mut acc, mut cnt) = (0.0, 0.0);
            for di in -half..=half {
                for dj in -half..=half {
                    let (a, b) = (i as isize + di, j as isize + dj);
                    if a >= 0 && b >= 0 && (a as usize) < r && (b as usize) < c {
                        acc += h.probs[a as usize][b as usize];
                        cnt += 1.0;
                    }
                }
            }
            s[i][j] = acc / cnt;
        }
    }
    let max = s.iter().flatten().copied().fold(0.0, f64::max);
    let mut modes = 0;
    for i in 0..r {
        for j in 0..c {
            let v = s[i][j];
            if v <= floor * max {
                continue;
            }
            let mut is_max = true;
            'nb: for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (a, b) = (i as isize + di, j as isize + dj);
                    if a >= 0 && b >= 0 && (a as usize) < r && (b as usize) < c && s[a as usize][b as usize] >= v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                modes += 1;
            }
        }
    }
    modes
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub context: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, context: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            context: context.into(),
            value,
        }
    }
}

/// CSV rows `metric,context,value`.
pub fn write_metrics(mut w: impl Write, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "metric,context,value")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.metric, r.context, r.value)?;
    }
    Ok(())
}
