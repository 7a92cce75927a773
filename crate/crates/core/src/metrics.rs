//! Memorization and utility summaries over a batch of final samples.
//!
//! MMD is a quality proxy and condition fidelity an alignment proxy; neither
//! is an image-quality score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainingCorpus;
use crate::error::{invalid, Error, Result};
use crate::similarity::{MetricKind, SimilarityVerdict};
use crate::vecops::dist_sq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFraction {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub kind: MetricKind,
    pub n_samples: usize,
    /// Nearest-rank 95th percentile of the scores.
    pub top5pct: f64,
    pub top1: f64,
    /// Fraction of scores strictly above each threshold, in input order.
    pub pct_over: Vec<ThresholdFraction>,
    /// `|top5pct|` and `|top1|`; distances read as positive numbers for nL2.
    pub top5pct_abs: f64,
    pub top1_abs: f64,
}

impl MemorizationReport {
    pub fn fraction_over(&self, threshold: f64) -> Option<f64> {
        self.pct_over.iter().find(|p| p.threshold == threshold).map(|p| p.fraction)
    }
}

/// Nearest-rank percentile (`0 < p <= 100`) of unsorted values.
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Ok(v[rank.min(v.len()) - 1])
}

pub fn memorization_report(verdicts: &[SimilarityVerdict], thresholds: &[f64]) -> Result<MemorizationReport> {
    let first = verdicts.first().ok_or(Error::Empty("verdicts"))?;
    if verdicts.iter().any(|v| v.kind != first.kind) {
        return Err(Error::MixedMetrics);
    }
    let scores: Vec<f64> = verdicts.iter().map(|v| v.sigma).collect();
    let top5pct = nearest_rank(&scores, 95.0)?;
    let top1 = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = scores.len() as f64;
    let pct_over = thresholds
        .iter()
        .map(|&th| ThresholdFraction {
            threshold: th,
            fraction: scores.iter().filter(|&&s| s > th).count() as f64 / n,
        })
        .collect();
    Ok(MemorizationReport {
        kind: first.kind,
        n_samples: verdicts.len(),
        top5pct,
        top1,
        pct_over,
        top5pct_abs: top5pct.abs(),
        top1_abs: top1.abs(),
    })
}

/// Silverman's rule `0.9 min(sd, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(scores: &[f64]) -> Result<f64> {
    let n = scores.len();
    if n < 2 {
        return Err(invalid("kde.bandwidth", "rule of thumb needs at least two scores"));
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let sd = (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = nearest_rank(scores, 75.0)? - nearest_rank(scores, 25.0)?;
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if !(h > 0.0) {
        return Err(invalid("kde.bandwidth", "scores have no spread"));
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl KdeGrid {
    /// Data range padded by `pad` bandwidths on both sides.
    pub fn around(scores: &[f64], bandwidth: f64, pad: f64, points: usize) -> Self {
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self { min: lo - pad * bandwidth, max: hi + pad * bandwidth, points }
    }

    pub fn xs(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.min + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdePoint {
    pub x: f64,
    pub density: f64,
}

/// Gaussian-kernel density of `scores` on `grid`.
pub fn kde_export(scores: &[f64], bandwidth: f64, grid: &KdeGrid) -> Result<Vec<KdePoint>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(invalid("kde.bandwidth", "must be positive and finite"));
    }
    if grid.points == 0 || !(grid.max >= grid.min) {
        return Err(invalid("kde.grid", "need at least one point and max >= min"));
    }
    let norm = 1.0 / (scores.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .xs()
        .into_iter()
        .map(|x| {
            let density = scores
                .iter()
                .map(|s| {
                    let u = (x - s) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm;
            KdePoint { x, density }
        })
        .collect())
}

pub fn write_kde_csv<W: std::io::Write>(w: W, table: &[KdePoint]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let map = |e: csv::Error| invalid("kde table", e.to_string());
    wr.write_record(["x", "density"]).map_err(map)?;
    for p in table {
        wr.write_record([p.x.to_string(), p.density.to_string()]).map_err(map)?;
    }
    wr.flush().map_err(|e| invalid("kde table", e.to_string()))
}

/// Median of the positive pairwise squared distances over the pooled sample.
pub fn median_heuristic(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d2 = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let v = dist_sq(pooled[i], pooled[j]);
            if v > 0.0 {
                d2.push(v);
            }
        }
    }
    if d2.is_empty() {
        return Err(invalid("mmd.bandwidth", "all points coincide"));
    }
    d2.sort_by(f64::total_cmp);
    let m = d2.len();
    Ok(if m % 2 == 1 { d2[m / 2] } else { 0.5 * (d2[m / 2 - 1] + d2[m / 2]) })
}

/// Biased (V-statistic) squared MMD with kernel `exp(-|a-b|^2 / gamma)`.
pub fn mmd_biased(x: &[Vec<f64>], y: &[Vec<f64>], gamma: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("mmd sample"));
    }
    let k = |a: &[f64], b: &[f64]| (-dist_sq(a, b) / gamma).exp();
    let mean_k = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let s: f64 = p.iter().map(|a| q.iter().map(|b| k(a, b)).sum::<f64>()).sum();
        s / (p.len() * q.len()) as f64
    };
    Ok((mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
    pub quantile95: f64,
}

/// Permutation test of equal distributions on the biased MMD statistic.
pub fn mmd_permutation_test(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, seed: u64) -> Result<PermutationTest> {
    let gamma = median_heuristic(x, y)?;
    let statistic = mmd_biased(x, y, gamma)?;
    let mut pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        pooled.shuffle(&mut rng);
        let (a, b) = pooled.split_at(x.len());
        null.push(mmd_biased(a, b, gamma)?);
    }
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(PermutationTest {
        statistic,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        quantile95: nearest_rank(&null, 95.0)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub mmd: f64,
    /// Kernel scale `gamma` picked by the median heuristic.
    pub mmd_gamma: f64,
    /// Only for conditional samples.
    pub condition_fidelity: Option<f64>,
}

/// Fraction of samples whose nearest corpus point carries the requested token.
pub fn condition_fidelity(samples: &[Vec<f64>], requested: &[u32], corpus: &TrainingCorpus) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if samples.len() != requested.len() {
        return Err(invalid("condition_fidelity", "one requested token per sample"));
    }
    let hits = samples
        .iter()
        .zip(requested)
        .filter(|(s, &tok)| {
            let mut best = (f64::INFINITY, 0);
            for (i, p) in corpus.points().enumerate() {
                let d = dist_sq(s, p);
                if d < best.0 {
                    best = (d, i);
                }
            }
            corpus.token(best.1) == tok
        })
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// MMD to `reference` and, where tokens were requested, condition fidelity.
pub fn utility_report(
    samples: &[Vec<f64>],
    reference: &[Vec<f64>],
    requested: &[Option<u32>],
    corpus: &TrainingCorpus,
) -> Result<UtilityReport> {
    if samples.is_empty() || reference.is_empty() {
        return Err(Error::Empty("utility inputs"));
    }
    let gamma = median_heuristic(samples, reference)?;
    let mmd = mmd_biased(samples, reference, gamma)?;
    let cond: Vec<(Vec<f64>, u32)> = samples
        .iter()
        .zip(requested)
        .filter_map(|(s, r)| r.map(|t| (s.clone(), t)))
        .collect();
    let condition_fidelity = if cond.is_empty() {
        None
    } else {
        let (s, t): (Vec<Vec<f64>>, Vec<u32>) = cond.into_iter().unzip();
        Some(condition_fidelity(&s, &t, corpus)?)
    };
    Ok(UtilityReport { mmd, mmd_gamma: gamma, condition_fidelity })
}
