//! Reward-aware consistency trajectory distillation for offline-RL planners.
//!
//! The crate trains an EDM diffusion teacher over action (or state) windows,
//! a decoupled return-to-go reward model, and a one-step consistency
//! trajectory student distilled from the teacher with an added reward
//! objective. Everything runs on a small dense reverse-mode autodiff engine
//! ([`ndgrad`]) in 64-bit floating point.
//!
//! Module map:
//!
//! - [`ndgrad`]: tape autodiff, dense networks, Adam, EMA, checkpoints
//! - [`schedule`]: Karras sigmas, EDM preconditioning, pseudo-Huber distance
//! - [`oracle`]: analytic Gaussian-mixture denoisers and Wasserstein-1
//! - [`teacher`]: EDM teacher training plus Heun, DDPM and DDIM samplers
//! - [`student`]: jump parameterization, CTM/DSM/reward losses, sampling
//! - [`reward`]: return-to-go targets and the frozen reward model
//! - [`dataenv`]: synthetic environments, datasets, windows, reverse dynamics
//! - [`planeval`]: rollouts, histograms, timing benchmark, ablations
//! - [`harness`]: configuration, pipeline stages and the CLI entry point

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataenv;
pub mod error;
pub mod harness;
pub mod ndgrad;
pub mod oracle;
pub mod planeval;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
