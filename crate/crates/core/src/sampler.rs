//! Per-trajectory sampling loop and parallel batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::EmpiricalDenoiser;
use crate::error::{invalid, Result};
use crate::guidance::{amg_update, predict, GuidanceConfig, SimPlacement, Term};
use crate::similarity::{Degeneracy, GradientMode, SimilarityMetric, SimilarityVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Deterministic (eta = 0).
    Ddim,
    /// Ancestral posterior sampling.
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Unconditional,
    Token(u32),
    /// Trajectory `i` requests the `i % K`-th distinct corpus token.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_kind")]
    pub kind: SamplerKind,
    /// Number of denoiser evaluations; at most `T`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_condition")]
    pub condition: Condition,
    /// Score the prediction every this many steps; other steps run unguided.
    #[serde(default = "one")]
    pub nn_every: usize,
}

fn default_kind() -> SamplerKind {
    SamplerKind::Ddim
}
fn default_steps() -> usize {
    50
}
fn default_condition() -> Condition {
    Condition::Unconditional
}
fn one() -> usize {
    1
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            steps: default_steps(),
            condition: default_condition(),
            nn_every: 1,
        }
    }
}

/// Everything a trajectory reads; shared immutably across a batch.
#[derive(Clone, Copy)]
pub struct SamplerContext<'a> {
    pub denoiser: EmpiricalDenoiser<'a>,
    pub sampler: &'a SamplerConfig,
    pub guidance: &'a GuidanceConfig,
    pub guidance_metric: &'a SimilarityMetric,
    pub eval_metric: &'a SimilarityMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    /// `None` on steps skipped by the scoring cadence.
    pub sigma: Option<f64>,
    pub lambda: f64,
    pub activated: bool,
    pub s1: f64,
    pub s2: f64,
    pub gsim_norm: f64,
    pub neighbor_id: Option<usize>,
    pub degenerate: Option<Degeneracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TrajectoryStatus {
    Ok,
    Failed { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub index: usize,
    pub seed: u64,
    pub condition: Option<u32>,
    pub records: Vec<StepRecord>,
    pub final_x0: Vec<f64>,
    pub final_verdict: Option<SimilarityVerdict>,
    pub status: TrajectoryStatus,
}

impl SampleTrace {
    pub fn is_ok(&self) -> bool {
        self.status == TrajectoryStatus::Ok
    }

    pub fn activated(&self) -> bool {
        self.records.iter().any(|r| r.activated)
    }

    /// Timestep of the first activated step.
    pub fn first_activation(&self) -> Option<usize> {
        self.records.iter().find(|r| r.activated).map(|r| r.t)
    }

    /// Score starts at or below the threshold, rises above it, and is back
    /// at or below it at some later scored step.
    pub fn crosses_and_recovers(&self) -> bool {
        let scored: Vec<&StepRecord> = self.records.iter().filter(|r| r.sigma.is_some()).collect();
        let above = |r: &StepRecord| r.sigma.unwrap() > r.lambda;
        let Some(first_up) = scored.iter().position(|r| above(r)) else {
            return false;
        };
        first_up > 0 && scored[first_up..].iter().any(|r| !above(r))
    }
}

/// Requested token for trajectory `index`.
pub fn condition_for(cond: Condition, index: usize, tokens: &[u32]) -> Option<u32> {
    match cond {
        Condition::Unconditional => None,
        Condition::Token(t) => Some(t),
        Condition::RoundRobin => Some(tokens[index % tokens.len()]),
    }
}

pub fn validate(ctx: &SamplerContext) -> Result<()> {
    let s = ctx.sampler;
    ctx.denoiser.schedule.timesteps(s.steps)?;
    if s.nn_every == 0 {
        return Err(invalid("sampler.nn_every", "must be at least 1"));
    }
    if let Condition::Token(t) = s.condition {
        if ctx.denoiser.corpus.ids_with_token(t).is_empty() {
            return Err(invalid("sampler.condition", format!("no corpus point carries token {t}")));
        }
    }
    ctx.guidance.validate(s.condition != Condition::Unconditional)
}

pub fn run_trajectory(ctx: &SamplerContext, index: usize, seed: u64, condition: Option<u32>) -> Result<SampleTrace> {
    validate(ctx)?;
    Ok(run_unchecked(ctx, index, seed, condition))
}

fn run_unchecked(ctx: &SamplerContext, index: usize, seed: u64, condition: Option<u32>) -> SampleTrace {
    let den = &ctx.denoiser;
    let sched = den.schedule;
    let g = ctx.guidance;
    let grid = sched.timesteps(ctx.sampler.steps).expect("validated");
    let d = den.corpus.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut records = Vec::with_capacity(ctx.sampler.steps);
    let mut status = TrajectoryStatus::Ok;
    let placement = match ctx.sampler.kind {
        SamplerKind::Ddim => SimPlacement::Eps,
        SamplerKind::Ddpm => SimPlacement::MeanShift,
    };
    let need_jac = g.enabled && g.gradient == GradientMode::Full && g.terms.contains(&Term::Sim) && g.c3 > 0.0;

    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied();
        let scored_step = step % ctx.sampler.nn_every == 0;
        let res = (|| -> Result<(Vec<f64>, StepRecord)> {
            let pred = predict(den, &x, t, condition, g.s0, need_jac && scored_step)?;
            let mut rec = StepRecord {
                step,
                t,
                sigma: None,
                lambda: g.schedule.lambda(t),
                activated: false,
                s1: 0.0,
                s2: 0.0,
                gsim_norm: 0.0,
                neighbor_id: None,
                degenerate: None,
            };
            let mut eps = pred.eps_hat.clone();
            let mut shift = vec![0.0; d];
            if scored_step {
                let out = amg_update(&pred, t, &x, den, ctx.guidance_metric, g, placement)?;
                rec.sigma = Some(out.sigma.sigma);
                rec.activated = out.activated;
                rec.s1 = out.s1;
                rec.s2 = out.s2;
                rec.gsim_norm = out.gsim_norm;
                rec.neighbor_id = Some(out.sigma.neighbor_id);
                rec.degenerate = out.degenerate;
                if out.activated {
                    eps = out.apply(&eps);
                    shift = out.mean_shift;
                }
            }
            if !crate::vecops::all_finite(&eps) {
                return Err(crate::error::Error::NonFinite("eps_hat"));
            }
            let next = match ctx.sampler.kind {
                SamplerKind::Ddim => sched.ddim_step_to(&x, t, t_prev, &eps)?,
                SamplerKind::Ddpm => {
                    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    sched.ddpm_step_to(&x, t, t_prev, &eps, &shift, &z)?
                }
            };
            if !crate::vecops::all_finite(&next) {
                return Err(crate::error::Error::NonFinite("state"));
            }
            Ok((next, rec))
        })();
        match res {
            Ok((next, rec)) => {
                x = next;
                records.push(rec);
            }
            Err(e) => {
                status = TrajectoryStatus::Failed { step, reason: e.to_string() };
                break;
            }
        }
    }

    let final_verdict = if status == TrajectoryStatus::Ok {
        match ctx.eval_metric.evaluate(&x, den.corpus) {
            Ok(v) => Some(v),
            Err(e) => {
                status = TrajectoryStatus::Failed { step: records.len(), reason: e.to_string() };
                None
            }
        }
    } else {
        None
    };
    SampleTrace {
        index,
        seed,
        condition,
        records,
        final_x0: x,
        final_verdict,
        status,
    }
}

/// Trajectories `0..n` with seeds `base_seed + i`. Output order follows the
/// index regardless of scheduling; failed trajectories are kept with their
/// partial traces.
pub fn run_batch(ctx: &SamplerContext, n: usize, base_seed: u64) -> Result<Vec<SampleTrace>> {
    validate(ctx)?;
    let tokens: Vec<u32> = ctx.denoiser.corpus.token_counts().keys().copied().collect();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let cond = condition_for(ctx.sampler.condition, i, &tokens);
            run_unchecked(ctx, i, base_seed.wrapping_add(i as u64), cond)
        })
        .collect())
}
