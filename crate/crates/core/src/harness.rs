//! Training loop: weighting policy -> gradient combination -> SGD step.

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::metrics::conflict_stats;
use crate::model::Scope;
use crate::problem::{Learner, Problem};
use crate::rng;
use crate::surgery::{pcgrad_with, wpcgrad_with, GradientSet, DEFAULT_EPS};
use crate::vecmath::FlatVector;
use crate::weighting::{TaskDistribution, WeightPolicy};
use crate::{Error, Result};

/// Any loss above this (or non-finite) aborts the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain sum of task gradients.
    Sum,
    Pcgrad,
    Wpcgrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub scope: Scope,
    pub seed: u64,
    /// When false, `wallclock_seconds` is recorded as 0 so output is reproducible byte for byte.
    pub record_wallclock: bool,
}

impl TrainOptions {
    pub fn new(method: Method, epochs: usize, lr: f64, seed: u64) -> Self {
        Self { method, epochs, lr, momentum: 0.0, scope: Scope::SharedOnly, seed, record_wallclock: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean minibatch loss per task over the epoch.
    pub per_task_mean_loss: Vec<f64>,
    /// Mean over iterations of the fraction of conflicting task pairs,
    /// measured on the gradients before surgery.
    pub conflict_fraction: f64,
    pub mean_pairwise_cosine: f64,
    pub distribution_used: TaskDistribution,
    pub wallclock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub iteration: usize,
    pub task: usize,
    /// Offending loss; `None` when it was not finite.
    pub loss: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Held-out loss per task after the last completed epoch.
    pub final_losses: Vec<f64>,
    pub diverged: Option<Divergence>,
    pub learner: Learner,
}

impl TrainOutcome {
    pub fn distribution_history(&self) -> Vec<TaskDistribution> {
        self.records.iter().map(|r| r.distribution_used.clone()).collect()
    }
}

/// Task gradients split into the part surgery sees and a pass-through part.
struct SplitGradients {
    surgery: Option<GradientSet>,
    /// Summed head gradients (shared-only scope) laid out after the trunk.
    passthrough: Vec<f64>,
}

fn split(grads: Vec<FlatVector>, shared: usize, scope: Scope) -> Result<SplitGradients> {
    let total = grads[0].dim();
    match scope {
        Scope::Full => Ok(SplitGradients { surgery: Some(GradientSet::new(grads)?), passthrough: Vec::new() }),
        Scope::SharedOnly => {
            let mut passthrough = vec![0.0; total - shared];
            let mut trunk = Vec::with_capacity(grads.len());
            for g in &grads {
                for (p, v) in passthrough.iter_mut().zip(&g.as_slice()[shared..]) {
                    *p += v;
                }
                if shared > 0 {
                    trunk.push(FlatVector::new(g.as_slice()[..shared].to_vec())?);
                }
            }
            let surgery = if shared > 0 { Some(GradientSet::new(trunk)?) } else { None };
            Ok(SplitGradients { surgery, passthrough })
        }
    }
}

/// Trains `learner` on `problem`.
///
/// Each epoch queries `policy` for the distribution (DTP stays uniform until
/// its first epoch ends), then for every minibatch computes all task
/// gradients at the same parameters, combines them with `method`, takes one
/// SGD step, and feeds the task losses back to the policy.
///
/// Head gradients bypass surgery in [`Scope::SharedOnly`]; they live on
/// disjoint coordinates and never conflict. A loss above
/// [`DIVERGENCE_THRESHOLD`] stops training and is reported in
/// [`TrainOutcome::diverged`].
pub fn train(
    mut learner: Learner,
    problem: &Problem,
    policy: &mut WeightPolicy,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let k = problem.task_count();
    if policy.task_count() != k {
        return Err(Error::DimensionMismatch { expected: k, got: policy.task_count() });
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("lr must be positive, got {}", opts.lr)));
    }

    let mut rng = rng::seeded(opts.seed);
    let shared = learner.shared_param_count();
    let mut velocity = vec![0.0; learner.param_count()];
    let mut records = Vec::with_capacity(opts.epochs);
    // Only touch the clock when asked to: it is unavailable on wasm32.
    let started = opts.record_wallclock.then(Instant::now);
    let iters = problem.spec().batches_per_epoch;

    for epoch in 0..opts.epochs {
        let dist = policy.distribution(epoch)?;
        let mut loss_sums = vec![0.0; k];
        let mut conflict_sum = 0.0;
        let mut cosine_sum = 0.0;

        for iteration in 0..iters {
            let batch = problem.sample_batch(&mut rng);
            let mut losses = Vec::with_capacity(k);
            let mut grads = Vec::with_capacity(k);
            for task in 0..k {
                let result = learner.loss_and_gradient(&batch, task, opts.scope);
                let diverged = |loss: f64, message: String| Divergence {
                    epoch,
                    iteration,
                    task,
                    loss: Some(loss).filter(|l| l.is_finite()),
                    message,
                };
                match result {
                    Ok((loss, _)) if loss > DIVERGENCE_THRESHOLD => {
                        let d = diverged(loss, format!("loss exceeded {DIVERGENCE_THRESHOLD:e}"));
                        return finish(learner, problem, records, Some(d));
                    }
                    Ok((loss, grad)) => {
                        losses.push(loss);
                        grads.push(grad);
                    }
                    Err(e @ Error::ForwardNaN(_)) => {
                        return finish(learner, problem, records, Some(diverged(f64::NAN, e.to_string())));
                    }
                    Err(e) => return Err(e),
                }
            }

            let parts = split(grads, shared, opts.scope)?;
            let surgery_seed = rng.next_u64();
            let combined = match &parts.surgery {
                None => None,
                Some(set) => {
                    let (fraction, cosine) = conflict_stats(set);
                    conflict_sum += fraction;
                    cosine_sum += cosine;
                    Some(match opts.method {
                        Method::Sum => set.sum(),
                        Method::Pcgrad => pcgrad_with(set, &mut rng::seeded(surgery_seed), DEFAULT_EPS).combined,
                        Method::Wpcgrad => {
                            wpcgrad_with(set, &dist, &mut rng::seeded(surgery_seed), DEFAULT_EPS)?.combined
                        }
                    })
                }
            };

            let mut step: Vec<f64> = combined.map(FlatVector::into_inner).unwrap_or_default();
            step.extend_from_slice(&parts.passthrough);
            if opts.momentum != 0.0 {
                for (v, s) in velocity.iter_mut().zip(step.iter_mut()) {
                    *v = opts.momentum * *v + *s;
                    *s = *v;
                }
            }
            learner.apply_update(&FlatVector::from_raw(step), opts.lr)?;

            for (task, &loss) in losses.iter().enumerate() {
                loss_sums[task] += loss;
                policy.record(task, loss)?;
            }
        }

        policy.end_epoch()?;
        records.push(MetricsRecord {
            epoch,
            per_task_mean_loss: loss_sums.iter().map(|s| s / iters as f64).collect(),
            conflict_fraction: conflict_sum / iters as f64,
            mean_pairwise_cosine: cosine_sum / iters as f64,
            distribution_used: dist,
            wallclock_seconds: started.map_or(0.0, |t| t.elapsed().as_secs_f64()),
        });
    }

    finish(learner, problem, records, None)
}

fn finish(
    learner: Learner,
    problem: &Problem,
    records: Vec<MetricsRecord>,
    diverged: Option<Divergence>,
) -> Result<TrainOutcome> {
    let final_losses = match problem.eval_losses(&learner) {
        Ok(l) => l,
        Err(_) if diverged.is_some() => vec![f64::NAN; problem.task_count()],
        Err(e) => return Err(e),
    };
    Ok(TrainOutcome { records, final_losses, diverged, learner })
}
