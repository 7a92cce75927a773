//! Closed-form posterior-mean denoiser over a finite corpus.
//!
//! With bandwidth `h = 0` this is the exact minimizer of the denoising loss
//! for the empirical distribution: `x0_hat` is a softmax-weighted mean of
//! corpus points and every trajectory collapses onto a training point. With
//! `h > 0` it is the posterior mean for the smoothed mixture
//! `sum_i m_i N(z_i, h^2 I)`, which generalizes between points while still
//! favouring heavily duplicated ones.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainingCorpus;
use crate::error::{Error, Result};
use crate::schedule::{check_dim, NoiseSchedule};

/// Exponent differences below this are clipped before `exp`.
pub const LOG_WEIGHT_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Vec<f64>,
    pub x0_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    /// Smoothing bandwidth `h`; 0 gives the pure empirical denoiser.
    #[serde(default)]
    pub bandwidth: f64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self { bandwidth: 0.8 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmpiricalDenoiser<'a> {
    pub corpus: &'a TrainingCorpus,
    pub schedule: &'a NoiseSchedule,
    pub bandwidth: f64,
}

/// Posterior weights over the candidate ids.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
}

struct Geometry {
    ab: f64,
    v: f64,
    kappa: f64,
}

impl<'a> EmpiricalDenoiser<'a> {
    pub fn new(corpus: &'a TrainingCorpus, schedule: &'a NoiseSchedule, bandwidth: f64) -> Result<Self> {
        if !(bandwidth >= 0.0) || !bandwidth.is_finite() {
            return Err(crate::error::invalid("denoiser.bandwidth", "must be finite and >= 0"));
        }
        Ok(Self { corpus, schedule, bandwidth })
    }

    fn geometry(&self, t: usize) -> Result<Geometry> {
        let ab = self.schedule.ab(t)?;
        let h2 = self.bandwidth * self.bandwidth;
        let v = ab * h2 + 1.0 - ab;
        Ok(Geometry { ab, v, kappa: ab.sqrt() * h2 / v })
    }

    fn candidates(&self, condition: Option<u32>) -> Result<Vec<usize>> {
        match condition {
            None => Ok((0..self.corpus.len()).collect()),
            Some(tok) => {
                let ids = self.corpus.ids_with_token(tok);
                if ids.is_empty() {
                    Err(Error::EmptyCondition(tok))
                } else {
                    Ok(ids)
                }
            }
        }
    }

    /// `w_i ∝ m_i exp(-|x - sqrt(ab) z_i|^2 / (2 v))`, `v = ab h^2 + 1 - ab`.
    pub fn posterior(&self, x_t: &[f64], t: usize, condition: Option<u32>) -> Result<Posterior> {
        check_dim(self.corpus.dim(), x_t.len())?;
        let g = self.geometry(t)?;
        let ids = self.candidates(condition)?;
        let sa = g.ab.sqrt();
        let logw: Vec<f64> = ids
            .iter()
            .map(|&i| {
                let z = self.corpus.point(i);
                let d2: f64 = x_t.iter().zip(z).map(|(x, z)| (x - sa * z) * (x - sa * z)).sum();
                (self.corpus.multiplicity(i) as f64).ln() - d2 / (2.0 * g.v)
            })
            .collect();
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(Error::NonFinite("posterior log-weights"));
        }
        let mut weights: Vec<f64> = logw.iter().map(|l| (l - mx).max(LOG_WEIGHT_FLOOR).exp()).collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Ok(Posterior { ids, weights })
    }

    fn mean(&self, post: &Posterior) -> Vec<f64> {
        let mut m = vec![0.0; self.corpus.dim()];
        for (&i, &w) in post.ids.iter().zip(&post.weights) {
            crate::vecops::axpy(w, self.corpus.point(i), &mut m);
        }
        m
    }

    fn finish(&self, x_t: &[f64], t: usize, g: &Geometry, m: &[f64]) -> Result<DenoiserOutput> {
        let c = 1.0 - g.kappa * g.ab.sqrt();
        let x0_hat: Vec<f64> = m.iter().zip(x_t).map(|(m, x)| c * m + g.kappa * x).collect();
        let eps_hat = self.schedule.eps_from_x0(x_t, t, &x0_hat)?;
        if !crate::vecops::all_finite(&eps_hat) || !crate::vecops::all_finite(&x0_hat) {
            return Err(Error::NonFinite("denoiser output"));
        }
        Ok(DenoiserOutput { eps_hat, x0_hat })
    }

    pub fn eval(&self, x_t: &[f64], t: usize, condition: Option<u32>) -> Result<DenoiserOutput> {
        let post = self.posterior(x_t, t, condition)?;
        let g = self.geometry(t)?;
        let m = self.mean(&post);
        self.finish(x_t, t, &g, &m)
    }

    /// Output together with `d x0_hat / d x_t`:
    /// `kappa I + sqrt(ab) (1 - kappa sqrt(ab)) / v * Cov_w(z)`.
    pub fn eval_with_jacobian(
        &self,
        x_t: &[f64],
        t: usize,
        condition: Option<u32>,
    ) -> Result<(DenoiserOutput, DMatrix<f64>)> {
        let post = self.posterior(x_t, t, condition)?;
        let g = self.geometry(t)?;
        let m = self.mean(&post);
        let d = self.corpus.dim();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut c = vec![0.0; d];
        for (&i, &w) in post.ids.iter().zip(&post.weights) {
            if w == 0.0 {
                continue;
            }
            for (cj, (zj, mj)) in c.iter_mut().zip(self.corpus.point(i).iter().zip(&m)) {
                *cj = zj - mj;
            }
            for a in 0..d {
                let wa = w * c[a];
                for b in a..d {
                    cov[(a, b)] += wa * c[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        let coef = g.ab.sqrt() * (1.0 - g.kappa * g.ab.sqrt()) / g.v;
        let mut jac = cov * coef;
        for a in 0..d {
            jac[(a, a)] += g.kappa;
        }
        Ok((self.finish(x_t, t, &g, &m)?, jac))
    }
}

/// Pure empirical denoiser (`h = 0`).
pub fn empirical_eps(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    corpus: &TrainingCorpus,
    condition: Option<u32>,
) -> Result<DenoiserOutput> {
    EmpiricalDenoiser::new(corpus, schedule, 0.0)?.eval(x_t, t, condition)
}

/// Jacobian of the pure empirical denoiser's `x0_hat` with respect to `x_t`.
pub fn empirical_eps_gradient(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    corpus: &TrainingCorpus,
    condition: Option<u32>,
) -> Result<DMatrix<f64>> {
    Ok(EmpiricalDenoiser::new(corpus, schedule, 0.0)?
        .eval_with_jacobian(x_t, t, condition)?
        .1)
}
