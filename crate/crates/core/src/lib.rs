//! Anti-memorization guidance for diffusion sampling.
//!
//! A closed-form denoiser over a finite corpus memorizes by construction;
//! guidance terms gated by a similarity threshold steer sampling away from
//! training points. The crate covers the schedule and step formulas
//! ([`schedule`]), corpus and denoiser ([`corpus`], [`denoiser`]), similarity
//! scores ([`similarity`]), guidance terms ([`guidance`]), the sampling loop
//! ([`sampler`]), evaluation ([`metrics`]) and config-driven experiments
//! ([`experiment`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod similarity;
pub mod trace_io;
pub mod vecops;

pub use error::{Error, Result};
