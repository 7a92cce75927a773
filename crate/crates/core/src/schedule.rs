//! Noise schedule, forward kernel and reverse-step formulas.
//!
//! Every function here is independent of the denoiser: it only needs the
//! schedule tables and the vectors handed to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::{all_finite, lin2};

/// Lower bound applied to every `alpha_bar` entry.
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

/// Linear-beta schedule parameters as they appear in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// Number of diffusion timesteps `T`.
    #[serde(default = "default_t")]
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_t() -> usize {
    250
}
// 1e-4 .. 0.02 rescaled by 1000/T so that T=250 still ends near pure noise.
fn default_beta_start() -> f64 {
    4e-4
}
fn default_beta_end() -> f64 {
    0.08
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: default_t(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// `beta`, `alpha = 1 - beta` and `alpha_bar = cumprod(alpha)`, indexed by `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(crate::error::invalid("timesteps", "must be positive"));
        }
        let betas = if t == 1 {
            vec![beta_start]
        } else {
            (0..t)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(crate::error::invalid("beta", "empty schedule"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(crate::error::invalid("beta", format!("{b} not in (0,1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc.max(ALPHA_BAR_FLOOR));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            Err(Error::Timestep { t, len: self.len() })
        } else {
            Ok(())
        }
    }

    /// `alpha_bar[t]`, range checked.
    pub fn ab(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t])
    }

    /// Descending grid of `steps` timesteps `round(j (T-1) / (steps-1))`,
    /// from `T-1` down to `0`. A sampler visits each once and the step taken
    /// at the last one lands on clean data.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.len() - 1;
        if steps == 0 || steps > self.len() {
            return Err(crate::error::invalid(
                "steps",
                format!("{steps} not in 1..={}", self.len()),
            ));
        }
        if steps == 1 {
            return Ok(vec![t_max]);
        }
        Ok((0..steps)
            .rev()
            .map(|j| ((j * t_max) as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }

    /// `alpha_bar` of a step target; `None` is clean data (`alpha_bar = 1`).
    pub fn ab_target(&self, t_prev: Option<usize>) -> Result<f64> {
        match t_prev {
            Some(t) => self.ab(t),
            None => Ok(1.0),
        }
    }

    /// `x_t = sqrt(ab) x0 + sqrt(1 - ab) noise`
    pub fn forward_sample(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), noise.len())?;
        let ab = self.ab(t)?;
        Ok(lin2(ab.sqrt(), x0, (1.0 - ab).sqrt(), noise))
    }

    /// `x0_hat = (x_t - sqrt(1 - ab) eps) / sqrt(ab)`
    pub fn predict_x0(&self, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        check_dim(x_t.len(), eps_hat.len())?;
        let ab = self.ab(t)?;
        if ab <= ALPHA_BAR_FLOOR * 0.5 {
            return Err(Error::DegenerateAlphaBar(t));
        }
        let s = ab.sqrt();
        Ok(lin2(1.0 / s, x_t, -(1.0 - ab).sqrt() / s, eps_hat))
    }

    /// `eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab)`, the inverse of [`Self::predict_x0`].
    pub fn eps_from_x0(&self, x_t: &[f64], t: usize, x0: &[f64]) -> Result<Vec<f64>> {
        check_dim(x_t.len(), x0.len())?;
        let ab = self.ab(t)?;
        let r = (1.0 - ab).sqrt();
        Ok(lin2(1.0 / r, x_t, -ab.sqrt() / r, x0))
    }

    /// Deterministic (eta = 0) step from `t` to `t - 1`.
    pub fn ddim_step(&self, x_t: &[f64], t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
        if t == 0 {
            return Err(Error::NoPreviousStep(t));
        }
        self.ddim_step_to(x_t, t, Some(t - 1), eps_hat)
    }

    /// Deterministic step from `t` to an earlier `t_prev` (or to clean data):
    /// `sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps`.
    pub fn ddim_step_to(
        &self,
        x_t: &[f64],
        t: usize,
        t_prev: Option<usize>,
        eps_hat: &[f64],
    ) -> Result<Vec<f64>> {
        check_order(t, t_prev)?;
        let x0 = self.predict_x0(x_t, t, eps_hat)?;
        let abp = self.ab_target(t_prev)?;
        Ok(lin2(abp.sqrt(), &x0, (1.0 - abp).sqrt(), eps_hat))
    }

    /// Posterior `q(x_prev | x_t, x0)` coefficients for the jump `t -> t_prev`:
    /// `(coef_x0, coef_xt, variance)`.
    pub fn posterior(&self, t: usize, t_prev: Option<usize>) -> Result<(f64, f64, f64)> {
        check_order(t, t_prev)?;
        let ab = self.ab(t)?;
        let abp = self.ab_target(t_prev)?;
        let a = ab / abp;
        let b = 1.0 - a;
        let coef_x0 = abp.sqrt() * b / (1.0 - ab);
        let coef_xt = a.sqrt() * (1.0 - abp) / (1.0 - ab);
        let var = (1.0 - abp) / (1.0 - ab) * b;
        Ok((coef_x0, coef_xt, var))
    }

    /// Ancestral step from `t` to `t - 1`; see [`Self::ddpm_step_to`].
    pub fn ddpm_step(
        &self,
        x_t: &[f64],
        t: usize,
        eps_hat: &[f64],
        guidance_mean_shift: &[f64],
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        if t == 0 {
            return Err(Error::NoPreviousStep(t));
        }
        self.ddpm_step_to(x_t, t, Some(t - 1), eps_hat, guidance_mean_shift, noise)
    }

    /// Draw from `N(mu - var * shift, var)`. Landing on timestep 0 or on clean
    /// data adds no noise.
    pub fn ddpm_step_to(
        &self,
        x_t: &[f64],
        t: usize,
        t_prev: Option<usize>,
        eps_hat: &[f64],
        guidance_mean_shift: &[f64],
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        let d = x_t.len();
        check_dim(d, eps_hat.len())?;
        check_dim(d, guidance_mean_shift.len())?;
        check_dim(d, noise.len())?;
        let (cx0, cxt, var) = self.posterior(t, t_prev)?;
        let x0 = self.predict_x0(x_t, t, eps_hat)?;
        let sd = if matches!(t_prev, None | Some(0)) { 0.0 } else { var.sqrt() };
        let out: Vec<f64> = (0..d)
            .map(|i| cx0 * x0[i] + cxt * x_t[i] - var * guidance_mean_shift[i] + sd * noise[i])
            .collect();
        if !all_finite(&out) {
            return Err(Error::NonFinite("ddpm step"));
        }
        Ok(out)
    }

    /// `score = -eps / sqrt(1 - ab)`
    pub fn score_from_eps(&self, eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        let ab = self.ab(t)?;
        let r = (1.0 - ab).sqrt();
        Ok(eps_hat.iter().map(|e| -e / r).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleSpec::default()
            .build()
            .expect("default schedule is valid")
    }
}

fn check_order(t: usize, t_prev: Option<usize>) -> Result<()> {
    match t_prev {
        Some(p) if p >= t => Err(Error::NoPreviousStep(t)),
        _ => Ok(()),
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::Dimension { expected, got })
    } else {
        Ok(())
    }
}
