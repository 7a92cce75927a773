//! Similarity between a predicted `x0_hat` and the corpus: normalized L2
//! (nL2) and embedding dot product, exact and two-stage nearest-neighbor
//! search, and gradients of the score.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainingCorpus;
use crate::denoiser::EmpiricalDenoiser;
use crate::error::{invalid, Error, Result};
use crate::schedule::check_dim;
use crate::vecops::{dist, dot, norm};

/// Relative gap under which two candidate scores count as tied.
pub const TIE_TOL: f64 = 1e-12;
/// Distance under which `x0_hat` is taken to coincide with its neighbor.
pub const CUSP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Nl2,
    Embedding,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::Nl2 => "nl2",
            MetricKind::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Treat `eps_hat` as constant: `d x0_hat / d x_t = I / sqrt(ab)`.
    FrozenEps,
    /// Differentiate through the denoiser's analytic Jacobian.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degeneracy {
    /// `x0_hat` sits on its nearest neighbor; the score has a cusp.
    Cusp,
    /// The nearest neighbor is not unique.
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVerdict {
    pub sigma: f64,
    pub neighbor_id: usize,
    pub kind: MetricKind,
    pub memorized: bool,
    /// Another candidate matched `neighbor_id`'s score; the lowest id won.
    #[serde(default)]
    pub tie: bool,
}

/// Fixed linear embedding `E(x) = P^T (x - center)`, optionally unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpec {
    /// `d x m`
    pub projection: DMatrix<f64>,
    pub center: Vec<f64>,
    pub normalize: bool,
}

impl EmbeddingSpec {
    pub fn new(projection: DMatrix<f64>, center: Vec<f64>, normalize: bool) -> Result<Self> {
        if projection.ncols() > projection.nrows() || projection.ncols() == 0 {
            return Err(invalid("embedding.dim", "need 1 <= m <= d"));
        }
        check_dim(projection.nrows(), center.len())?;
        Ok(Self { projection, center, normalize })
    }

    /// Whiten with the corpus covariance, then project onto `m` random
    /// orthonormal directions.
    pub fn whitened(corpus: &TrainingCorpus, m: usize, seed: u64, normalize: bool) -> Result<Self> {
        let d = corpus.dim();
        if m == 0 || m > d {
            return Err(invalid("embedding.dim", format!("{m} not in 1..={d}")));
        }
        let n = corpus.len() as f64;
        let mut center = vec![0.0; d];
        for p in corpus.points() {
            crate::vecops::axpy(1.0 / n, p, &mut center);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for p in corpus.points() {
            let c = DVector::from_iterator(d, p.iter().zip(&center).map(|(a, b)| a - b));
            cov += &c * c.transpose() / n;
        }
        let eig = cov.symmetric_eigen();
        let floor = 1e-9 * eig.eigenvalues.max().max(1e-300);
        let inv_sqrt = DVector::from_iterator(d, eig.eigenvalues.iter().map(|l| 1.0 / l.max(floor).sqrt()));
        let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = DMatrix::<f64>::from_fn(d, m, |_, _| rng.sample(StandardNormal));
        let q = r.qr().q();
        Self::new(w * q, center, normalize)
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn raw(&self, x: &[f64]) -> Vec<f64> {
        let d = self.projection.nrows();
        (0..self.dim())
            .map(|j| (0..d).map(|i| self.projection[(i, j)] * (x[i] - self.center[i])).sum())
            .collect()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.projection.nrows(), x.len())?;
        let e = self.raw(x);
        if self.normalize {
            let n = norm(&e);
            if n < CUSP_TOL {
                return Ok(vec![0.0; e.len()]);
            }
            Ok(e.into_iter().map(|v| v / n).collect())
        } else {
            Ok(e)
        }
    }

    /// Gradient of `E(x) . target` with respect to `x`; `None` where a
    /// normalized embedding is undefined.
    fn grad_dot(&self, x: &[f64], target: &[f64]) -> Option<Vec<f64>> {
        let e = self.raw(x);
        let g = if self.normalize {
            let n = norm(&e);
            if n < CUSP_TOL {
                return None;
            }
            let u: Vec<f64> = e.iter().map(|v| v / n).collect();
            let ut = dot(&u, target);
            u.iter().zip(target).map(|(ui, ti)| (ti - ut * ui) / n).collect::<Vec<_>>()
        } else {
            target.to_vec()
        };
        let d = self.projection.nrows();
        Some((0..d).map(|i| (0..self.dim()).map(|j| self.projection[(i, j)] * g[j]).sum()).collect())
    }
}

/// Embedding construction as it appears in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseConfig {
    pub embedding: EmbeddingConfig,
    /// Shortlist size.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub kind: MetricKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Whether the nL2 normalizing set contains the nearest neighbor itself.
    #[serde(default = "yes")]
    pub include_nearest: bool,
    /// Memorization threshold; defaults to -1.4 (nL2) or 0.5 (embedding).
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub embedding: Option<EmbeddingConfig>,
    #[serde(default)]
    pub coarse: Option<CoarseConfig>,
}

fn default_k() -> usize {
    50
}
fn default_alpha() -> f64 {
    0.5
}

impl MetricConfig {
    pub fn nl2() -> Self {
        Self {
            kind: MetricKind::Nl2,
            k: default_k(),
            alpha: default_alpha(),
            include_nearest: true,
            threshold: None,
            embedding: None,
            coarse: None,
        }
    }

    pub fn embedding(dim: usize, seed: u64) -> Self {
        Self {
            kind: MetricKind::Embedding,
            embedding: Some(EmbeddingConfig { dim, seed, normalize: true }),
            ..Self::nl2()
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(match self.kind {
            MetricKind::Nl2 => -1.4,
            MetricKind::Embedding => 0.5,
        })
    }

    pub fn build(&self, corpus: &TrainingCorpus) -> Result<SimilarityMetric> {
        let emb = |c: &EmbeddingConfig| EmbeddingSpec::whitened(corpus, c.dim, c.seed, c.normalize);
        let embedding = match (&self.kind, &self.embedding) {
            (MetricKind::Embedding, None) => return Err(Error::MissingEmbedding),
            (_, Some(c)) => Some(emb(c)?),
            (_, None) => None,
        };
        let coarse = match &self.coarse {
            Some(c) => Some((emb(&c.embedding)?, c.k)),
            None => None,
        };
        SimilarityMetric::new(
            self.kind,
            self.k,
            self.alpha,
            self.include_nearest,
            self.threshold(),
            embedding,
            coarse,
            corpus,
        )
    }
}

/// A metric bound to one corpus, with corpus embeddings precomputed.
#[derive(Debug, Clone)]
pub struct SimilarityMetric {
    pub kind: MetricKind,
    pub k: usize,
    pub alpha: f64,
    pub include_nearest: bool,
    pub threshold: f64,
    embedding: Option<(EmbeddingSpec, Vec<Vec<f64>>)>,
    coarse: Option<(EmbeddingSpec, Vec<Vec<f64>>, usize)>,
    restrict: Option<Vec<usize>>,
    n: usize,
}

/// Score, its gradient with respect to `x0_hat`, and any degeneracy.
#[derive(Debug, Clone)]
pub struct ScoredGradient {
    pub verdict: SimilarityVerdict,
    pub grad: Vec<f64>,
    pub degenerate: Option<Degeneracy>,
}

impl SimilarityMetric {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: MetricKind,
        k: usize,
        alpha: f64,
        include_nearest: bool,
        threshold: f64,
        embedding: Option<EmbeddingSpec>,
        coarse: Option<(EmbeddingSpec, usize)>,
        corpus: &TrainingCorpus,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(invalid("metric.alpha", "must be positive"));
        }
        if threshold.is_nan() {
            return Err(invalid("metric.threshold", "NaN"));
        }
        let embed_all = |e: &EmbeddingSpec| -> Result<Vec<Vec<f64>>> {
            check_dim(corpus.dim(), e.projection.nrows())?;
            corpus.points().map(|p| e.embed(p)).collect()
        };
        let embedding = match embedding {
            Some(e) => {
                let table = embed_all(&e)?;
                Some((e, table))
            }
            None if kind == MetricKind::Embedding => return Err(Error::MissingEmbedding),
            None => None,
        };
        let coarse = match coarse {
            Some((e, ck)) => {
                if ck == 0 || ck > corpus.len() {
                    return Err(invalid("metric.coarse.k", format!("{ck} not in 1..={}", corpus.len())));
                }
                let table = embed_all(&e)?;
                Some((e, table, ck))
            }
            None => None,
        };
        let m = Self {
            kind,
            k,
            alpha,
            include_nearest,
            threshold,
            embedding,
            coarse,
            restrict: None,
            n: corpus.len(),
        };
        m.check_size(m.n)?;
        Ok(m)
    }

    fn check_size(&self, n: usize) -> Result<()> {
        if self.kind == MetricKind::Nl2 {
            if self.k < 2 && self.include_nearest {
                return Err(invalid("metric.k", "must be at least 2"));
            }
            let need = if self.include_nearest { self.k } else { self.k + 1 };
            if n < need {
                return Err(Error::CorpusTooSmall { n, k: need });
            }
        }
        Ok(())
    }

    /// Restrict every search to these corpus ids.
    pub fn restricted_to(mut self, ids: &[usize]) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() || ids.iter().any(|&i| i >= self.n) {
            return Err(invalid("watchlist", "ids must be non-empty and in range"));
        }
        self.check_size(ids.len())?;
        self.restrict = Some(ids);
        Ok(self)
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn embedding_spec(&self) -> Option<&EmbeddingSpec> {
        self.embedding.as_ref().map(|e| &e.0)
    }

    fn base_ids(&self) -> Vec<usize> {
        match &self.restrict {
            Some(r) => r.clone(),
            None => (0..self.n).collect(),
        }
    }

    /// Candidate ids after the optional coarse shortlist, ascending.
    fn candidates(&self, x0: &[f64]) -> Result<Vec<usize>> {
        let base = self.base_ids();
        match &self.coarse {
            None => Ok(base),
            Some((e, table, ck)) => {
                let q = e.embed(x0)?;
                let mut scored: Vec<(f64, usize)> = base.iter().map(|&i| (dot(&q, &table[i]), i)).collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut ids: Vec<usize> = scored.into_iter().take(*ck).map(|s| s.1).collect();
                ids.sort_unstable();
                self.check_size(ids.len())?;
                Ok(ids)
            }
        }
    }

    fn verdict(&self, sigma: f64, neighbor_id: usize, tie: bool) -> SimilarityVerdict {
        SimilarityVerdict {
            sigma,
            neighbor_id,
            kind: self.kind,
            memorized: sigma > self.threshold,
            tie,
        }
    }

    pub fn evaluate(&self, x0: &[f64], corpus: &TrainingCorpus) -> Result<SimilarityVerdict> {
        Ok(self.evaluate_with_grad(x0, corpus, false)?.verdict)
    }

    /// Score `x0_hat`; with `want_grad`, also `d sigma / d x0_hat` with the
    /// neighbor sets held fixed. Degenerate points get a zero gradient.
    pub fn evaluate_with_grad(&self, x0: &[f64], corpus: &TrainingCorpus, want_grad: bool) -> Result<ScoredGradient> {
        check_dim(corpus.dim(), x0.len())?;
        if corpus.len() != self.n {
            return Err(invalid("metric", "bound to a different corpus"));
        }
        if !crate::vecops::all_finite(x0) {
            return Err(Error::NonFinite("x0_hat"));
        }
        let ids = self.candidates(x0)?;
        match self.kind {
            MetricKind::Nl2 => self.nl2_on(x0, corpus, &ids, want_grad),
            MetricKind::Embedding => self.emb_on(x0, &ids, want_grad),
        }
    }

    fn nl2_on(&self, x0: &[f64], corpus: &TrainingCorpus, ids: &[usize], want_grad: bool) -> Result<ScoredGradient> {
        let mut ds: Vec<(f64, usize)> = ids.iter().map(|&i| (dist(x0, corpus.point(i)), i)).collect();
        ds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (d0, n0) = ds[0];
        let tie = ds.len() > 1 && ds[1].0 - d0 <= TIE_TOL * (1.0 + d0);
        let set: &[(f64, usize)] = if self.include_nearest { &ds[..self.k] } else { &ds[1..=self.k] };
        let mean = set.iter().map(|s| s.0).sum::<f64>() / self.k as f64;
        let d = x0.len();
        if mean <= 0.0 {
            // Every neighbor coincides with x0_hat.
            return Ok(ScoredGradient {
                verdict: self.verdict(0.0, n0, tie),
                grad: vec![0.0; d],
                degenerate: Some(Degeneracy::Cusp),
            });
        }
        let sigma = -d0 / (self.alpha * mean);
        let verdict = self.verdict(sigma, n0, tie);
        let degenerate = if d0 < CUSP_TOL {
            Some(Degeneracy::Cusp)
        } else if tie {
            Some(Degeneracy::Tie)
        } else {
            None
        };
        if !want_grad || degenerate.is_some() {
            return Ok(ScoredGradient { verdict, grad: vec![0.0; d], degenerate });
        }
        let z0 = corpus.point(n0);
        let mut gm = vec![0.0; d];
        for &(dj, j) in set {
            let zj = corpus.point(j);
            for a in 0..d {
                gm[a] += (x0[a] - zj[a]) / dj / self.k as f64;
            }
        }
        let grad = (0..d)
            .map(|a| -((x0[a] - z0[a]) / d0 / mean - d0 * gm[a] / (mean * mean)) / self.alpha)
            .collect();
        Ok(ScoredGradient { verdict, grad, degenerate: None })
    }

    fn emb_on(&self, x0: &[f64], ids: &[usize], want_grad: bool) -> Result<ScoredGradient> {
        let (spec, table) = self.embedding.as_ref().ok_or(Error::MissingEmbedding)?;
        let q = spec.embed(x0)?;
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        let mut second = f64::NEG_INFINITY;
        for &i in ids {
            let s = dot(&q, &table[i]);
            if s > best.0 {
                second = best.0;
                best = (s, i);
            } else if s > second {
                second = s;
            }
        }
        let (sigma, n0) = best;
        let tie = second.is_finite() && sigma - second <= TIE_TOL * (1.0 + sigma.abs());
        let verdict = self.verdict(sigma, n0, tie);
        let d = x0.len();
        if !want_grad {
            return Ok(ScoredGradient { verdict, grad: vec![0.0; d], degenerate: None });
        }
        if tie {
            return Ok(ScoredGradient { verdict, grad: vec![0.0; d], degenerate: Some(Degeneracy::Tie) });
        }
        match spec.grad_dot(x0, &table[n0]) {
            Some(grad) => Ok(ScoredGradient { verdict, grad, degenerate: None }),
            None => Ok(ScoredGradient { verdict, grad: vec![0.0; d], degenerate: Some(Degeneracy::Cusp) }),
        }
    }
}

/// nL2 score against the whole corpus with `k`, `alpha` and threshold from `cfg`.
pub fn nl2_sigma(x0_hat: &[f64], corpus: &TrainingCorpus, cfg: &MetricConfig) -> Result<SimilarityVerdict> {
    let cfg = MetricConfig { kind: MetricKind::Nl2, coarse: None, ..cfg.clone() };
    cfg.build(corpus)?.evaluate(x0_hat, corpus)
}

/// Embedding dot-product score against the whole corpus.
pub fn embedding_sigma(x0_hat: &[f64], corpus: &TrainingCorpus, cfg: &MetricConfig) -> Result<SimilarityVerdict> {
    let cfg = MetricConfig { kind: MetricKind::Embedding, coarse: None, ..cfg.clone() };
    cfg.build(corpus)?.evaluate(x0_hat, corpus)
}

/// Shortlist `coarse_k` candidates with `coarse`, then score with the fine metric in `cfg`.
pub fn two_stage_nn(
    x0_hat: &[f64],
    corpus: &TrainingCorpus,
    coarse_k: usize,
    coarse: &EmbeddingConfig,
    cfg: &MetricConfig,
) -> Result<SimilarityVerdict> {
    let cfg = MetricConfig {
        coarse: Some(CoarseConfig { embedding: coarse.clone(), k: coarse_k }),
        ..cfg.clone()
    };
    cfg.build(corpus)?.evaluate(x0_hat, corpus)
}

/// Gradient of `sigma` with respect to `x_t`, plus the verdict it came from.
#[derive(Debug, Clone)]
pub struct SigmaGradient {
    pub verdict: SimilarityVerdict,
    pub x0_hat: Vec<f64>,
    pub grad: Vec<f64>,
    pub degenerate: Option<Degeneracy>,
}

/// Pull a gradient with respect to `x0_hat` back to `x_t`.
pub fn pull_back(grad_x0: &[f64], ab: f64, jac: Option<&DMatrix<f64>>, mode: GradientMode) -> Vec<f64> {
    match (mode, jac) {
        (GradientMode::Full, Some(j)) => {
            let d = grad_x0.len();
            (0..d).map(|b| (0..d).map(|a| j[(a, b)] * grad_x0[a]).sum()).collect()
        }
        _ => grad_x0.iter().map(|g| g / ab.sqrt()).collect(),
    }
}

/// `d sigma / d x_t` through `x0_hat = predict_x0(x_t, t, eps_hat)`, where
/// `eps_hat` is the (optionally classifier-free guided) denoiser prediction.
#[allow(clippy::too_many_arguments)]
pub fn sigma_gradient(
    x_t: &[f64],
    t: usize,
    denoiser: &EmpiricalDenoiser,
    condition: Option<u32>,
    s0: f64,
    metric: &SimilarityMetric,
    mode: GradientMode,
) -> Result<SigmaGradient> {
    let pred = crate::guidance::predict(denoiser, x_t, t, condition, s0, mode == GradientMode::Full)?;
    let sg = metric.evaluate_with_grad(&pred.x0_hat, denoiser.corpus, true)?;
    let ab = denoiser.schedule.ab(t)?;
    let grad = pull_back(&sg.grad, ab, pred.jacobian.as_ref(), mode);
    Ok(SigmaGradient {
        verdict: sg.verdict,
        x0_hat: pred.x0_hat,
        grad,
        degenerate: sg.degenerate,
    })
}
