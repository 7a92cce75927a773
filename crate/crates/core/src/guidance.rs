//! Guidance terms, their clamped scales, the activation threshold, and the
//! combined correction of the noise prediction.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::denoiser::EmpiricalDenoiser;
use crate::error::{invalid, Result};
use crate::similarity::{pull_back, Degeneracy, GradientMode, SimilarityMetric, SimilarityVerdict};
use crate::vecops::{axpy, lin2, norm, scale, sub};

/// `lambda_t = a + (b - a) exp(-c t)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParabolicSchedule {
    /// Limit as `t` grows.
    pub a: f64,
    /// Value at `t = 0`.
    pub b: f64,
    /// Decay rate, positive.
    pub c: f64,
}

impl Default for ParabolicSchedule {
    fn default() -> Self {
        Self { a: -1.95, b: -1.5, c: 0.025 }
    }
}

impl ParabolicSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(invalid("guidance.schedule.c", "decay rate must be positive"));
        }
        if !(self.b > self.a) {
            return Err(invalid("guidance.schedule", "need b > a"));
        }
        Ok(())
    }
}

pub fn lambda_at(t: f64, schedule: &ParabolicSchedule) -> f64 {
    schedule.a + (schedule.b - schedule.a) * (-schedule.c * t).exp()
}

/// When guidance is allowed to act.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ActivationSchedule {
    Parabolic(ParabolicSchedule),
    Constant {
        level: f64,
    },
    /// Threshold at minus infinity: every evaluated step activates.
    Always,
}

impl Default for ActivationSchedule {
    fn default() -> Self {
        ActivationSchedule::Parabolic(ParabolicSchedule::default())
    }
}

impl ActivationSchedule {
    pub fn lambda(&self, t: usize) -> f64 {
        match self {
            ActivationSchedule::Parabolic(params) => lambda_at(t as f64, params),
            ActivationSchedule::Constant { level } => *level,
            ActivationSchedule::Always => f64::NEG_INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActivationSchedule::Parabolic(params) => params.validate(),
            ActivationSchedule::Constant { level } if level.is_nan() => {
                Err(invalid("guidance.schedule.level", "NaN"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    /// Despecification: pull back from the user's condition.
    Spe,
    /// Deduplication: push away from the neighbor's condition.
    Dup,
    /// Dissimilarity: descend the similarity score.
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Master switch; `false` samples without any correction.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_s0")]
    pub s0: f64,
    #[serde(default = "default_c12")]
    pub c1: f64,
    #[serde(default = "default_c12")]
    pub c2: f64,
    #[serde(default)]
    pub c3: f64,
    #[serde(default)]
    pub schedule: ActivationSchedule,
    #[serde(default = "all_terms")]
    pub terms: BTreeSet<Term>,
    #[serde(default = "default_mode")]
    pub gradient: GradientMode,
}

fn yes() -> bool {
    true
}
fn default_s0() -> f64 {
    7.0
}
fn default_c12() -> f64 {
    4.0
}
fn default_mode() -> GradientMode {
    GradientMode::Full
}
fn all_terms() -> BTreeSet<Term> {
    [Term::Spe, Term::Dup, Term::Sim].into_iter().collect()
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            s0: default_s0(),
            c1: default_c12(),
            c2: default_c12(),
            c3: 0.0,
            schedule: ActivationSchedule::default(),
            terms: all_terms(),
            gradient: default_mode(),
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn has(&self, term: Term) -> bool {
        self.enabled && self.terms.contains(&term)
    }

    pub fn validate(&self, conditional: bool) -> Result<()> {
        if conditional && !(self.s0 > 1.0) {
            return Err(invalid("guidance.s0", "must exceed 1 when sampling is conditional"));
        }
        for (name, v) in [("guidance.c1", self.c1), ("guidance.c2", self.c2), ("guidance.c3", self.c3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(name, "must be finite and >= 0"));
            }
        }
        self.schedule.validate()
    }
}

/// `eps_u + s0 (eps_c - eps_u)`
pub fn cfg_eps(eps_uncond: &[f64], eps_cond: &[f64], s0: f64) -> Vec<f64> {
    eps_uncond.iter().zip(eps_cond).map(|(u, c)| u + s0 * (c - u)).collect()
}

/// `max(min(c1 sigma, s0 - 1), 0)`
pub fn scale_s1(sigma: f64, c1: f64, s0: f64) -> f64 {
    (c1 * sigma).min(s0 - 1.0).max(0.0)
}

/// `max(min(c2 sigma, s0 - s1 - 1), 0)`
pub fn scale_s2(sigma: f64, c2: f64, s0: f64, s1: f64) -> f64 {
    (c2 * sigma).min(s0 - s1 - 1.0).max(0.0)
}

/// `-s1 (eps_c - eps_u)`
pub fn g_spe(eps_uncond: &[f64], eps_cond_user: &[f64], s1: f64) -> Vec<f64> {
    eps_cond_user.iter().zip(eps_uncond).map(|(c, u)| -s1 * (c - u)).collect()
}

/// `-s2 (eps_c(neighbor token) - eps_u)`
pub fn g_dup(eps_uncond: &[f64], eps_cond_neighbor: &[f64], s2: f64) -> Vec<f64> {
    g_spe(eps_uncond, eps_cond_neighbor, s2)
}

/// `c3 sqrt(1 - ab) grad_sigma`
pub fn g_sim(grad_sigma: &[f64], alpha_bar_t: f64, c3: f64) -> Vec<f64> {
    scale(grad_sigma, c3 * (1.0 - alpha_bar_t).sqrt())
}

/// Denoiser prediction at one step, after classifier-free guidance.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps_uncond: Vec<f64>,
    pub eps_cond: Option<Vec<f64>>,
    pub eps_hat: Vec<f64>,
    pub x0_hat: Vec<f64>,
    /// `d x0_hat / d x_t`, when requested.
    pub jacobian: Option<DMatrix<f64>>,
}

pub fn predict(
    denoiser: &EmpiricalDenoiser,
    x_t: &[f64],
    t: usize,
    condition: Option<u32>,
    s0: f64,
    with_jacobian: bool,
) -> Result<Prediction> {
    let eval = |c: Option<u32>| -> Result<(crate::denoiser::DenoiserOutput, Option<DMatrix<f64>>)> {
        if with_jacobian {
            let (o, j) = denoiser.eval_with_jacobian(x_t, t, c)?;
            Ok((o, Some(j)))
        } else {
            Ok((denoiser.eval(x_t, t, c)?, None))
        }
    };
    let (u, ju) = eval(None)?;
    match condition {
        None => Ok(Prediction {
            eps_hat: u.eps_hat.clone(),
            x0_hat: u.x0_hat,
            eps_uncond: u.eps_hat,
            eps_cond: None,
            jacobian: ju,
        }),
        Some(tok) => {
            let (c, jc) = eval(Some(tok))?;
            let eps_hat = cfg_eps(&u.eps_hat, &c.eps_hat, s0);
            let x0_hat = lin2(1.0 - s0, &u.x0_hat, s0, &c.x0_hat);
            let jacobian = match (ju, jc) {
                (Some(ju), Some(jc)) => Some(&ju * (1.0 - s0) + jc * s0),
                _ => None,
            };
            Ok(Prediction {
                eps_uncond: u.eps_hat,
                eps_cond: Some(c.eps_hat),
                eps_hat,
                x0_hat,
                jacobian,
            })
        }
    }
}

/// Where the dissimilarity term enters the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimPlacement {
    /// Added to `eps_hat` as `c3 sqrt(1 - ab) grad`.
    Eps,
    /// Returned as a posterior mean shift `c3 grad` for an ancestral step.
    MeanShift,
}

#[derive(Debug, Clone)]
pub struct GuidanceOutcome {
    /// Correction to add to `eps_hat`; zero when not activated.
    pub delta_eps: Vec<f64>,
    /// Posterior mean shift for ancestral steps; zero otherwise.
    pub mean_shift: Vec<f64>,
    pub s1: f64,
    pub s2: f64,
    pub activated: bool,
    pub sigma: SimilarityVerdict,
    pub lambda: f64,
    pub gsim_norm: f64,
    pub degenerate: Option<Degeneracy>,
}

impl GuidanceOutcome {
    /// `eps_hat + delta_eps`, or `eps_hat` untouched when inactive.
    pub fn apply(&self, eps_hat: &[f64]) -> Vec<f64> {
        if self.activated {
            eps_hat.iter().zip(&self.delta_eps).map(|(e, d)| e + d).collect()
        } else {
            eps_hat.to_vec()
        }
    }
}

/// Score the prediction once, and if `sigma > lambda_t` assemble the enabled
/// terms from that single verdict.
#[allow(clippy::too_many_arguments)]
pub fn amg_update(
    pred: &Prediction,
    t: usize,
    x_t: &[f64],
    denoiser: &EmpiricalDenoiser,
    metric: &SimilarityMetric,
    cfg: &GuidanceConfig,
    placement: SimPlacement,
) -> Result<GuidanceOutcome> {
    let d = x_t.len();
    let want_grad = cfg.has(Term::Sim) && cfg.c3 > 0.0;
    let scored = metric.evaluate_with_grad(&pred.x0_hat, denoiser.corpus, want_grad)?;
    let sigma = scored.verdict.sigma;
    let lambda = cfg.schedule.lambda(t);
    let activated = cfg.enabled && !cfg.terms.is_empty() && sigma > lambda;
    let mut out = GuidanceOutcome {
        delta_eps: vec![0.0; d],
        mean_shift: vec![0.0; d],
        s1: 0.0,
        s2: 0.0,
        activated,
        sigma: scored.verdict.clone(),
        lambda,
        gsim_norm: 0.0,
        degenerate: scored.degenerate,
    };
    if !activated {
        return Ok(out);
    }
    if let Some(eps_c) = &pred.eps_cond {
        if cfg.has(Term::Spe) {
            out.s1 = scale_s1(sigma, cfg.c1, cfg.s0);
            if out.s1 > 0.0 {
                axpy(1.0, &g_spe(&pred.eps_uncond, eps_c, out.s1), &mut out.delta_eps);
            }
        }
        if cfg.has(Term::Dup) {
            out.s2 = scale_s2(sigma, cfg.c2, cfg.s0, out.s1);
            if out.s2 > 0.0 {
                let tok = denoiser.corpus.token(scored.verdict.neighbor_id);
                let eps_n = denoiser.eval(x_t, t, Some(tok))?.eps_hat;
                axpy(1.0, &g_dup(&pred.eps_uncond, &eps_n, out.s2), &mut out.delta_eps);
            }
        }
    }
    if want_grad {
        let ab = denoiser.schedule.ab(t)?;
        let grad = pull_back(&scored.grad, ab, pred.jacobian.as_ref(), cfg.gradient);
        match placement {
            SimPlacement::Eps => {
                let g = g_sim(&grad, ab, cfg.c3);
                out.gsim_norm = norm(&g);
                axpy(1.0, &g, &mut out.delta_eps);
            }
            SimPlacement::MeanShift => {
                out.mean_shift = scale(&grad, cfg.c3);
                out.gsim_norm = norm(&out.mean_shift);
            }
        }
    }
    if !crate::vecops::all_finite(&out.delta_eps) || !crate::vecops::all_finite(&out.mean_shift) {
        return Err(crate::error::Error::NonFinite("guidance correction"));
    }
    Ok(out)
}

/// Difference of two conditional predictions, for geometric checks.
pub fn cond_difference(eps_cond: &[f64], eps_uncond: &[f64]) -> Vec<f64> {
    sub(eps_cond, eps_uncond)
}
