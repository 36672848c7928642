//! Gradient surgery for multitask training.
//!
//! The crate provides PCGrad and its weighted variant wPCGrad, which keeps the
//! gradient of one sampled task intact and projects every conflicting gradient
//! onto its normal plane. The task that stays intact is drawn from a
//! [`TaskDistribution`] produced by a [`WeightPolicy`]: uniform, a static
//! per-epoch schedule, or Dynamic Task Prioritization driven by per-task
//! losses.
//!
//! Around the algorithms sits a small framework-free harness: a tensor-level
//! reverse-mode tape, a shared-trunk / multi-head MLP, synthetic multitask
//! problems, a training loop, and a config-driven experiment runner.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod problem;
pub mod rng;
pub mod runner;
pub mod surgery;
pub mod vecmath;
pub mod weighting;

pub use error::{Error, Result};
pub use surgery::{pcgrad, project_out, wpcgrad, GradientSet, SurgeryReport};
pub use vecmath::FlatVector;
pub use weighting::{DtpState, StaticSchedule, TaskDistribution, WeightPolicy};

/// Index of a task within a multitask problem.
pub type TaskId = usize;
