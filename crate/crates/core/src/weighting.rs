//! Per-epoch task sampling distributions.
//!
//! A [`TaskDistribution`] decides which task keeps its gradient intact during
//! weighted gradient surgery. Three sources are supported:
//!
//! * uniform sampling,
//! * a hand-written [`StaticSchedule`] of epoch ranges,
//! * Dynamic Task Prioritization ([`DtpState`]), where a task's probability is
//!   proportional to its scaled previous-epoch mean loss raised to `gamma`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TaskId};

/// Tolerance on `sum(probs) == 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default focusing exponent for DTP.
pub const DEFAULT_GAMMA: f64 = 2.0;

/// Default probability mass given to the favored task in a static schedule.
pub const DEFAULT_FAVORED_MASS: f64 = 0.91;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TaskDistribution {
    probs: Vec<f64>,
}

impl TaskDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no tasks".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("probability {p} for task {i}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights. All-zero weights give the uniform distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("no tasks".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!("weight {w} for task {i}")));
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Self::uniform(weights.len());
        }
        Ok(Self { probs: weights.iter().map(|w| w / total).collect() })
    }

    pub fn uniform(task_count: usize) -> Result<Self> {
        if task_count == 0 {
            return Err(Error::InvalidDistribution("task_count must be at least 1".into()));
        }
        Ok(Self { probs: vec![1.0 / task_count as f64; task_count] })
    }

    /// `mass` on `task`, the remainder split evenly over the other tasks.
    pub fn favoring(task_count: usize, task: TaskId, mass: f64) -> Result<Self> {
        if task >= task_count {
            return Err(Error::UnknownTask(task));
        }
        if !(0.0..=1.0).contains(&mass) {
            return Err(Error::InvalidDistribution(format!("favored mass {mass} outside [0, 1]")));
        }
        if task_count == 1 {
            return Self::uniform(1);
        }
        let rest = (1.0 - mass) / (task_count - 1) as f64;
        let probs = (0..task_count).map(|k| if k == task { mass } else { rest }).collect();
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn task_count(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, task: TaskId) -> f64 {
        self.probs[task]
    }
}

impl TryFrom<Vec<f64>> for TaskDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<TaskDistribution> for Vec<f64> {
    fn from(d: TaskDistribution) -> Self {
        d.probs
    }
}

pub fn uniform_dist(task_count: usize) -> Result<TaskDistribution> {
    TaskDistribution::uniform(task_count)
}

/// One contiguous epoch range `[start, end)` with a fixed distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub start: usize,
    pub end: usize,
    pub dist: TaskDistribution,
}

/// Piecewise-constant distribution over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Phase>", into = "Vec<Phase>")]
pub struct StaticSchedule {
    phases: Vec<Phase>,
}

impl StaticSchedule {
    /// Phases must start at epoch 0, be non-empty, contiguous, and agree on
    /// the task count.
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        let first = phases.first().ok_or_else(|| Error::InvalidSchedule("no phases".into()))?;
        if first.start != 0 {
            return Err(Error::InvalidSchedule(format!("first phase starts at {}", first.start)));
        }
        let task_count = first.dist.task_count();
        let mut expected_start = 0;
        for (i, phase) in phases.iter().enumerate() {
            if phase.start != expected_start {
                return Err(Error::InvalidSchedule(format!(
                    "phase {i} starts at {} but the previous phase ends at {expected_start}",
                    phase.start
                )));
            }
            if phase.end <= phase.start {
                return Err(Error::InvalidSchedule(format!("phase {i} is empty")));
            }
            if phase.dist.task_count() != task_count {
                return Err(Error::InvalidSchedule(format!(
                    "phase {i} has {} tasks, expected {task_count}",
                    phase.dist.task_count()
                )));
            }
            expected_start = phase.end;
        }
        Ok(Self { phases })
    }

    /// Favor `first` until `first_end`, sample uniformly for `uniform_len`
    /// epochs, then favor `second` until `total_epochs`.
    ///
    /// `(15, 3, 24)` gives a 24-epoch schedule with a three-epoch uniform
    /// handover. Swapping `first` and `second` reverses the priority.
    pub fn handoff(
        task_count: usize,
        first: TaskId,
        second: TaskId,
        favored_mass: f64,
        first_end: usize,
        uniform_len: usize,
        total_epochs: usize,
    ) -> Result<Self> {
        let uniform_end = first_end + uniform_len;
        if first_end == 0 || uniform_end >= total_epochs {
            return Err(Error::InvalidSchedule(format!(
                "phase boundaries {first_end}, {uniform_end} do not fit in {total_epochs} epochs"
            )));
        }
        let mut phases = vec![Phase {
            start: 0,
            end: first_end,
            dist: TaskDistribution::favoring(task_count, first, favored_mass)?,
        }];
        if uniform_len > 0 {
            phases.push(Phase { start: first_end, end: uniform_end, dist: TaskDistribution::uniform(task_count)? });
        }
        phases.push(Phase {
            start: uniform_end,
            end: total_epochs,
            dist: TaskDistribution::favoring(task_count, second, favored_mass)?,
        });
        Self::new(phases)
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn end_epoch(&self) -> usize {
        self.phases.last().map_or(0, |p| p.end)
    }

    pub fn task_count(&self) -> usize {
        self.phases[0].dist.task_count()
    }

    pub fn dist_at(&self, epoch: usize) -> Result<&TaskDistribution> {
        self.phases
            .iter()
            .find(|p| p.start <= epoch && epoch < p.end)
            .map(|p| &p.dist)
            .ok_or(Error::EpochOutOfRange { epoch, end: self.end_epoch() })
    }
}

impl TryFrom<Vec<Phase>> for StaticSchedule {
    type Error = Error;

    fn try_from(phases: Vec<Phase>) -> Result<Self> {
        Self::new(phases)
    }
}

impl From<StaticSchedule> for Vec<Phase> {
    fn from(s: StaticSchedule) -> Self {
        s.phases
    }
}

pub fn schedule_dist(schedule: &StaticSchedule, epoch: usize) -> Result<TaskDistribution> {
    schedule.dist_at(epoch).cloned()
}

fn check_loss(task: TaskId, value: f64) -> Result<()> {
    if !value.is_finite() || value < 0.0 {
        return Err(Error::InvalidLoss { task, value });
    }
    Ok(())
}

/// Dynamic Task Prioritization state.
///
/// Per-iteration losses are accumulated with [`record`](Self::record); at the
/// end of each epoch [`epoch_end`](Self::epoch_end) turns the per-task means
/// into the next epoch's distribution. Until the first epoch ends the
/// distribution is uniform.
///
/// When no scale factors are given, they are set once at the end of the first
/// epoch to the reciprocal of each task's mean loss and then kept fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct DtpState {
    gamma: f64,
    scale_factors: Option<Vec<f64>>,
    epoch_loss_sums: Vec<f64>,
    epoch_loss_counts: Vec<u64>,
    current_dist: TaskDistribution,
}

impl DtpState {
    /// Scale factors are computed automatically from the first epoch.
    pub fn new(task_count: usize, gamma: f64) -> Result<Self> {
        Self::build(task_count, gamma, None)
    }

    pub fn with_scales(gamma: f64, scale_factors: Vec<f64>) -> Result<Self> {
        if let Some(s) = scale_factors.iter().find(|s| !s.is_finite() || **s <= 0.0) {
            return Err(Error::InvalidDistribution(format!("scale factor {s} must be positive")));
        }
        Self::build(scale_factors.len(), gamma, Some(scale_factors))
    }

    fn build(task_count: usize, gamma: f64, scale_factors: Option<Vec<f64>>) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::InvalidDistribution(format!("gamma {gamma} must be >= 0")));
        }
        Ok(Self {
            gamma,
            scale_factors,
            epoch_loss_sums: vec![0.0; task_count],
            epoch_loss_counts: vec![0; task_count],
            current_dist: TaskDistribution::uniform(task_count)?,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn task_count(&self) -> usize {
        self.epoch_loss_sums.len()
    }

    pub fn scale_factors(&self) -> Option<&[f64]> {
        self.scale_factors.as_deref()
    }

    pub fn current(&self) -> &TaskDistribution {
        &self.current_dist
    }

    pub fn record(&mut self, task: TaskId, loss: f64) -> Result<()> {
        if task >= self.task_count() {
            return Err(Error::UnknownTask(task));
        }
        check_loss(task, loss)?;
        self.epoch_loss_sums[task] += loss;
        self.epoch_loss_counts[task] += 1;
        Ok(())
    }

    /// Mean of the losses recorded so far this epoch, if any.
    pub fn epoch_mean(&self, task: TaskId) -> Option<f64> {
        let count = *self.epoch_loss_counts.get(task)?;
        (count > 0).then(|| self.epoch_loss_sums[task] / count as f64)
    }

    /// Recomputes the distribution from per-task mean losses:
    /// `p_i = (s_i L_i)^gamma / sum_j (s_j L_j)^gamma`.
    pub fn update(&mut self, mean_losses: &[f64]) -> Result<TaskDistribution> {
        if mean_losses.len() != self.task_count() {
            return Err(Error::DimensionMismatch { expected: self.task_count(), got: mean_losses.len() });
        }
        for (task, &loss) in mean_losses.iter().enumerate() {
            check_loss(task, loss)?;
        }
        let scaled: Vec<f64> = match &self.scale_factors {
            Some(scales) => mean_losses.iter().zip(scales).map(|(l, s)| l * s).collect(),
            None => mean_losses.to_vec(),
        };
        self.current_dist = prioritize(&scaled, self.gamma)?;
        Ok(self.current_dist.clone())
    }

    /// Closes the epoch: averages the recorded losses, fixes automatic scale
    /// factors on the first call, updates the distribution, and resets the
    /// accumulators.
    pub fn epoch_end(&mut self) -> Result<TaskDistribution> {
        let means = (0..self.task_count())
            .map(|t| self.epoch_mean(t).ok_or(Error::MissingTaskLoss(t)))
            .collect::<Result<Vec<_>>>()?;
        if self.scale_factors.is_none() {
            self.scale_factors = Some(means.iter().map(|&m| if m > 0.0 { 1.0 / m } else { 1.0 }).collect());
        }
        let dist = self.update(&means)?;
        self.epoch_loss_sums.iter_mut().for_each(|s| *s = 0.0);
        self.epoch_loss_counts.iter_mut().for_each(|c| *c = 0);
        Ok(dist)
    }
}

/// `p_i ∝ x_i^gamma`, computed relative to the largest entry so that large
/// losses and large exponents do not overflow. All-zero input gives uniform.
fn prioritize(values: &[f64], gamma: f64) -> Result<TaskDistribution> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return TaskDistribution::uniform(values.len());
    }
    let powered: Vec<f64> = values.iter().map(|v| (v / max).powf(gamma)).collect();
    TaskDistribution::from_weights(&powered)
}

/// Which distribution the training loop samples from at each epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightPolicy {
    Uniform { task_count: usize },
    Static(StaticSchedule),
    Dtp(DtpState),
}

impl WeightPolicy {
    pub fn task_count(&self) -> usize {
        match self {
            WeightPolicy::Uniform { task_count } => *task_count,
            WeightPolicy::Static(s) => s.task_count(),
            WeightPolicy::Dtp(d) => d.task_count(),
        }
    }

    pub fn distribution(&self, epoch: usize) -> Result<TaskDistribution> {
        match self {
            WeightPolicy::Uniform { task_count } => TaskDistribution::uniform(*task_count),
            WeightPolicy::Static(s) => schedule_dist(s, epoch),
            WeightPolicy::Dtp(d) => Ok(d.current().clone()),
        }
    }

    /// Feeds a per-iteration loss to the policy; only DTP uses it.
    pub fn record(&mut self, task: TaskId, loss: f64) -> Result<()> {
        match self {
            WeightPolicy::Dtp(d) => d.record(task, loss),
            _ => Ok(()),
        }
    }

    pub fn end_epoch(&mut self) -> Result<()> {
        if let WeightPolicy::Dtp(d) = self {
            d.epoch_end()?;
        }
        Ok(())
    }
}
