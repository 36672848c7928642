//! Synthetic multitask problems.
//!
//! Every problem places one direction per task so that the directions are
//! pairwise separated by a requested angle: unit vectors of a regular simplex
//! (pairwise cosine `-1/(K-1)`) tilted toward a shared axis until the pairwise
//! cosine equals `cos(conflict_angle)`. The direction is then used as
//!
//! * the minimum of a quadratic task loss (`conflicting_quadratics`), so that
//!   the task gradients at the origin realize the angle exactly;
//! * the readout of a fixed random tanh teacher (`shared_feature_regression`
//!   and `multilabel_classification`), so that tasks share features but pull
//!   the trunk in conflicting directions early in training.
//!
//! The problem `seed` fixes the instance (teacher, evaluation set). The run
//! seed given to [`Problem::init`] and to the batch sampler controls model
//! initialization and the minibatch stream.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::model::{MultitaskModel, Scope, TaskBatch, TaskKind};
use crate::rng::{self, SeededRng};
use crate::vecmath::FlatVector;
use crate::{Error, Result, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    ConflictingQuadratics,
    SharedFeatureRegression,
    MultilabelClassification,
}

fn default_batch_size() -> usize {
    32
}
fn default_batches_per_epoch() -> usize {
    16
}
fn default_trunk_widths() -> Vec<usize> {
    vec![32]
}
fn default_feature_dim() -> usize {
    8
}
fn default_eval_size() -> usize {
    512
}
fn default_radius() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub task_count: usize,
    pub input_dim: usize,
    /// Pairwise angle between task directions, degrees in (90, 180]. When
    /// absent, halfway between 90 and the largest angle `task_count`
    /// directions can share.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict_angle: Option<f64>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_batches_per_epoch")]
    pub batches_per_epoch: usize,
    /// Hidden widths of the shared trunk (network problems).
    #[serde(default = "default_trunk_widths")]
    pub trunk_widths: Vec<usize>,
    /// Hidden widths inside each head before its output layer.
    #[serde(default)]
    pub head_widths: Vec<usize>,
    /// Width of the teacher's feature layer (network problems).
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Distance of each quadratic minimum from the origin.
    #[serde(default = "default_radius")]
    pub radius: f64,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind, task_count: usize, input_dim: usize) -> Self {
        Self {
            kind,
            task_count,
            input_dim,
            conflict_angle: None,
            noise_std: 0.0,
            seed: 0,
            batch_size: default_batch_size(),
            batches_per_epoch: default_batches_per_epoch(),
            trunk_widths: default_trunk_widths(),
            head_widths: Vec::new(),
            feature_dim: default_feature_dim(),
            eval_size: default_eval_size(),
            radius: default_radius(),
        }
    }

    pub fn with_angle(mut self, degrees: f64) -> Self {
        self.conflict_angle = Some(degrees);
        self
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn effective_angle(&self) -> f64 {
        self.conflict_angle.unwrap_or_else(|| 0.5 * (90.0 + max_pairwise_angle(self.task_count.max(2))))
    }

    /// Every violated constraint, empty when the spec is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.task_count < 2 {
            out.push(format!("problem.task_count must be at least 2, got {}", self.task_count));
        }
        if self.input_dim == 0 {
            out.push("problem.input_dim must be positive".into());
        }
        let angle = self.effective_angle();
        let max = max_pairwise_angle(self.task_count.max(2));
        if !(angle > 90.0 && angle <= 180.0) {
            out.push(format!("problem.conflict_angle must be in (90, 180], got {angle}"));
        } else if angle > max + 1e-9 {
            out.push(format!(
                "problem.conflict_angle {angle} exceeds {max:.4}, the largest pairwise angle {} directions can share",
                self.task_count
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            out.push(format!("problem.noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.batch_size == 0 {
            out.push("problem.batch_size must be positive".into());
        }
        if self.batches_per_epoch == 0 {
            out.push("problem.batches_per_epoch must be positive".into());
        }
        match self.kind {
            ProblemKind::ConflictingQuadratics => {
                if self.input_dim < self.task_count {
                    out.push(format!(
                        "problem.input_dim must be at least task_count ({}) for conflicting_quadratics",
                        self.task_count
                    ));
                }
                if !(self.radius > 0.0 && self.radius.is_finite()) {
                    out.push(format!("problem.radius must be positive, got {}", self.radius));
                }
            }
            _ => {
                if self.feature_dim < self.task_count {
                    out.push(format!("problem.feature_dim must be at least task_count ({})", self.task_count));
                }
                if self.trunk_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
                    out.push("problem layer widths must be positive".into());
                }
                if self.eval_size == 0 {
                    out.push("problem.eval_size must be positive".into());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidProblem(v.join("; ")))
        }
    }
}

/// Largest angle (degrees) that `k` unit vectors can pairwise share.
pub fn max_pairwise_angle(k: usize) -> f64 {
    (-1.0 / (k as f64 - 1.0)).acos().to_degrees()
}

/// `k` unit vectors in `dim >= k` dimensions with pairwise angle `degrees`.
///
/// The first `k - 1` coordinates hold a regular simplex, coordinate `k - 1`
/// the shared tilt.
pub fn task_directions(k: usize, dim: usize, degrees: f64) -> Vec<Vec<f64>> {
    assert!(k >= 2 && dim >= k);
    let simplex_cos = -1.0 / (k as f64 - 1.0);
    let target = degrees.to_radians().cos().max(simplex_cos);
    // cos = (s + h^2) / (1 + h^2) for a unit simplex vertex plus tilt h
    let h = ((target - simplex_cos) / (1.0 - target)).max(0.0).sqrt();
    let norm = (1.0 + h * h).sqrt();

    // Simplex vertices: centered standard basis of R^k, expressed in an
    // orthonormal basis of the (k-1)-dimensional hyperplane sum(x) = 0.
    let basis = hyperplane_basis(k);
    (0..k)
        .map(|t| {
            let mut v = vec![0.0; dim];
            let mut vertex = vec![-1.0 / k as f64; k];
            vertex[t] += 1.0;
            let vn = vertex.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (b, coord) in basis.iter().zip(v.iter_mut()) {
                *coord = b.iter().zip(&vertex).map(|(x, y)| x * y).sum::<f64>() / vn / norm;
            }
            v[k - 1] = h / norm;
            v
        })
        .collect()
}

/// Orthonormal basis (Helmert vectors) of `{x in R^k : sum(x) = 0}`.
fn hyperplane_basis(k: usize) -> Vec<Vec<f64>> {
    (1..k)
        .map(|j| {
            let mut b = vec![0.0; k];
            let scale = ((j * (j + 1)) as f64).sqrt();
            for x in b.iter_mut().take(j) {
                *x = 1.0 / scale;
            }
            b[j] = -(j as f64) / scale;
            b
        })
        .collect()
}

fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
enum Instance {
    Quadratic { centers: Vec<Vec<f64>> },
    Teacher { features: Matrix, readouts: Vec<Vec<f64>>, eval: TaskBatch },
}

/// A problem instance: ground truth plus a minibatch sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    spec: ProblemSpec,
    instance: Instance,
}

/// Parameters being trained.
#[derive(Debug, Clone, PartialEq)]
pub enum Learner {
    /// Quadratic problems train a point in `R^input_dim`, all of it shared.
    Point(Vec<f64>),
    Network(MultitaskModel),
}

/// One minibatch for every task.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// Noisy per-task minima.
    Centers(Vec<Vec<f64>>),
    Tasks(TaskBatch),
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::seeded(spec.seed);
        let k = spec.task_count;
        let angle = spec.effective_angle();
        let instance = match spec.kind {
            ProblemKind::ConflictingQuadratics => {
                let centers = task_directions(k, spec.input_dim, angle)
                    .into_iter()
                    .map(|d| d.into_iter().map(|x| x * spec.radius).collect())
                    .collect();
                Instance::Quadratic { centers }
            }
            ProblemKind::SharedFeatureRegression | ProblemKind::MultilabelClassification => {
                let scale = 1.0 / (spec.input_dim as f64).sqrt();
                let features = Matrix::from_vec(
                    spec.input_dim,
                    spec.feature_dim,
                    (0..spec.input_dim * spec.feature_dim).map(|_| normal(&mut r) * scale).collect(),
                );
                let readouts = task_directions(k, spec.feature_dim, angle);
                let eval = teacher_batch(&spec, &features, &readouts, spec.eval_size, 0.0, &mut r);
                Instance::Teacher { features, readouts, eval }
            }
        };
        Ok(Self { spec, instance })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn task_count(&self) -> usize {
        self.spec.task_count
    }

    /// Quadratic minima, if this is a quadratic problem.
    pub fn centers(&self) -> Option<&[Vec<f64>]> {
        match &self.instance {
            Instance::Quadratic { centers } => Some(centers),
            Instance::Teacher { .. } => None,
        }
    }

    fn task_kind(&self) -> TaskKind {
        match self.spec.kind {
            ProblemKind::MultilabelClassification => TaskKind::Binary,
            _ => TaskKind::Regression,
        }
    }

    /// Fresh parameters: the origin for quadratics, a Glorot-initialized MLP
    /// otherwise.
    pub fn init(&self, run_seed: u64) -> Result<Learner> {
        match &self.instance {
            Instance::Quadratic { .. } => Ok(Learner::Point(vec![0.0; self.spec.input_dim])),
            Instance::Teacher { .. } => {
                let mut r = rng::seeded(run_seed);
                let outputs = vec![(self.task_kind(), 1); self.spec.task_count];
                Ok(Learner::Network(MultitaskModel::random(
                    self.spec.input_dim,
                    &self.spec.trunk_widths,
                    &self.spec.head_widths,
                    &outputs,
                    &mut r,
                )?))
            }
        }
    }

    pub fn sample_batch(&self, rng: &mut SeededRng) -> Batch {
        match &self.instance {
            Instance::Quadratic { centers } => Batch::Centers(
                centers.iter().map(|c| c.iter().map(|x| x + self.spec.noise_std * normal(rng)).collect()).collect(),
            ),
            Instance::Teacher { features, readouts, .. } => Batch::Tasks(teacher_batch(
                &self.spec,
                features,
                readouts,
                self.spec.batch_size,
                self.spec.noise_std,
                rng,
            )),
        }
    }

    /// Noise-free per-task loss: exact for quadratics, on the fixed held-out
    /// set for network problems.
    pub fn eval_losses(&self, learner: &Learner) -> Result<Vec<f64>> {
        match (&self.instance, learner) {
            (Instance::Quadratic { centers }, Learner::Point(theta)) => {
                Ok(centers.iter().map(|c| quadratic_loss(theta, c)).collect())
            }
            (Instance::Teacher { eval, .. }, Learner::Network(model)) => {
                (0..self.task_count()).map(|t| model.forward_loss(eval, t)).collect()
            }
            _ => Err(Error::InvalidProblem("learner does not match problem".into())),
        }
    }
}

fn teacher_batch(
    spec: &ProblemSpec,
    features: &Matrix,
    readouts: &[Vec<f64>],
    n: usize,
    noise: f64,
    rng: &mut SeededRng,
) -> TaskBatch {
    let d = spec.input_dim;
    let inputs = Matrix::from_vec(n, d, (0..n * d).map(|_| normal(rng)).collect());
    let hidden = inputs.matmul(features);
    let targets = readouts
        .iter()
        .map(|v| {
            let values = (0..n)
                .map(|i| {
                    let y: f64 = hidden.row(i).iter().zip(v).map(|(h, w)| h.tanh() * w).sum();
                    let y = y + noise * normal(rng);
                    match spec.kind {
                        ProblemKind::MultilabelClassification => f64::from(u8::from(y > 0.0)),
                        _ => y,
                    }
                })
                .collect();
            Matrix::from_vec(n, 1, values)
        })
        .collect();
    TaskBatch { inputs, targets }
}

fn quadratic_loss(theta: &[f64], center: &[f64]) -> f64 {
    0.5 * theta.iter().zip(center).map(|(t, c)| (t - c) * (t - c)).sum::<f64>()
}

impl Learner {
    pub fn param_count(&self) -> usize {
        match self {
            Learner::Point(theta) => theta.len(),
            Learner::Network(m) => m.param_count(),
        }
    }

    /// Number of leading parameters shared by all tasks.
    pub fn shared_param_count(&self) -> usize {
        match self {
            Learner::Point(theta) => theta.len(),
            Learner::Network(m) => m.shared_param_count(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Learner::Point(theta) => theta.clone(),
            Learner::Network(m) => m.flatten(),
        }
    }

    /// Per-task minibatch loss and gradient over the full parameter layout.
    pub fn loss_and_gradient(&self, batch: &Batch, task: TaskId, scope: Scope) -> Result<(f64, FlatVector)> {
        match (self, batch) {
            (Learner::Point(theta), Batch::Centers(centers)) => {
                let c = centers.get(task).ok_or(Error::UnknownTask(task))?;
                let grad: Vec<f64> = theta.iter().zip(c).map(|(t, c)| t - c).collect();
                let loss = quadratic_loss(theta, c);
                if !loss.is_finite() {
                    return Err(Error::ForwardNaN(format!("task {task} loss")));
                }
                Ok((loss, FlatVector::new(grad).map_err(|_| Error::ForwardNaN(format!("task {task} gradient")))?))
            }
            (Learner::Network(model), Batch::Tasks(b)) => model.loss_and_gradient(b, task, scope),
            _ => Err(Error::InvalidProblem("batch does not match learner".into())),
        }
    }

    /// `theta <- theta - lr * step`.
    pub fn apply_update(&mut self, step: &FlatVector, lr: f64) -> Result<()> {
        match self {
            Learner::Point(theta) => {
                if step.dim() != theta.len() {
                    return Err(Error::DimensionMismatch { expected: theta.len(), got: step.dim() });
                }
                for (t, s) in theta.iter_mut().zip(step.as_slice()) {
                    *t -= lr * s;
                }
                Ok(())
            }
            Learner::Network(m) => m.apply_update(step, lr),
        }
    }
}

/// Builds a problem and its initial parameters for one run.
pub fn make_problem(spec: ProblemSpec, run_seed: u64) -> Result<(Learner, Problem)> {
    let problem = Problem::new(spec)?;
    let learner = problem.init(run_seed)?;
    Ok((learner, problem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::conflict_stats;
    use crate::surgery::GradientSet;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn directions_realize_requested_angle() {
        for (k, angle) in [(2, 180.0), (2, 170.0), (3, 120.0), (3, 100.0), (4, 105.0), (8, 95.0)] {
            let dirs = task_directions(k, k + 2, angle);
            let expected = f64::to_radians(angle).cos();
            for i in 0..k {
                let n: f64 = dirs[i].iter().map(|x| x * x).sum::<f64>();
                assert!((n - 1.0).abs() < 1e-12);
                for j in i + 1..k {
                    assert!((cos(&dirs[i], &dirs[j]) - expected).abs() < 1e-12, "k={k} angle={angle}");
                }
            }
        }
    }

    #[test]
    fn max_angle_values() {
        assert!((max_pairwise_angle(2) - 180.0).abs() < 1e-12);
        assert!((max_pairwise_angle(3) - 120.0).abs() < 1e-12);
        assert!((max_pairwise_angle(4) - 109.471_220_634_490_7).abs() < 1e-9);
    }

    fn initial_stats(spec: ProblemSpec) -> (f64, f64) {
        let (learner, problem) = make_problem(spec, 0).unwrap();
        let Batch::Centers(c) = problem.sample_batch(&mut rng::seeded(0)) else { panic!() };
        let grads = (0..problem.task_count())
            .map(|t| learner.loss_and_gradient(&Batch::Centers(c.clone()), t, Scope::Full).unwrap().1)
            .collect();
        conflict_stats(&GradientSet::new(grads).unwrap())
    }

    #[test]
    fn anti_parallel_quadratics_fully_conflict() {
        let (frac, cosine) =
            initial_stats(ProblemSpec::new(ProblemKind::ConflictingQuadratics, 2, 4).with_angle(180.0));
        assert_eq!(frac, 1.0);
        assert!((cosine + 1.0).abs() < 1e-12);
    }

    #[test]
    fn barely_obtuse_quadratics_conflict() {
        let (frac, cosine) = initial_stats(ProblemSpec::new(ProblemKind::ConflictingQuadratics, 3, 5).with_angle(90.5));
        assert_eq!(frac, 1.0);
        assert!(cosine < 0.0);
    }

    #[test]
    fn same_seed_same_instance() {
        for kind in [
            ProblemKind::ConflictingQuadratics,
            ProblemKind::SharedFeatureRegression,
            ProblemKind::MultilabelClassification,
        ] {
            let spec = ProblemSpec::new(kind, 3, 6).with_noise(0.1);
            let (l1, p1) = make_problem(spec.clone(), 9).unwrap();
            let (l2, p2) = make_problem(spec, 9).unwrap();
            assert_eq!(p1, p2);
            assert_eq!(l1, l2);
            assert_eq!(p1.eval_losses(&l1).unwrap(), p2.eval_losses(&l2).unwrap());
            assert_eq!(p1.sample_batch(&mut rng::seeded(4)), p2.sample_batch(&mut rng::seeded(4)));
        }
    }

    #[test]
    fn classification_targets_are_binary() {
        let p = Problem::new(ProblemSpec::new(ProblemKind::MultilabelClassification, 3, 6)).unwrap();
        let Batch::Tasks(b) = p.sample_batch(&mut rng::seeded(1)) else { panic!() };
        assert!(b.targets.iter().all(|t| t.data().iter().all(|y| *y == 0.0 || *y == 1.0)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = ProblemSpec::new(ProblemKind::ConflictingQuadratics, 4, 8);
        assert!(Problem::new(base.clone().with_angle(90.0)).is_err());
        assert!(Problem::new(base.clone().with_angle(181.0)).is_err());
        // four directions cannot be pairwise 150 degrees apart
        assert!(Problem::new(base.clone().with_angle(150.0)).is_err());
        assert!(Problem::new(base.clone().with_angle(109.0)).is_ok());
        assert!(Problem::new(ProblemSpec { task_count: 1, ..base.clone() }).is_err());
        assert!(Problem::new(ProblemSpec { input_dim: 3, ..base.clone() }).is_err());
        assert!(Problem::new(base.with_noise(-1.0)).is_err());
        let net = ProblemSpec::new(ProblemKind::SharedFeatureRegression, 4, 8);
        assert!(Problem::new(ProblemSpec { feature_dim: 3, ..net.clone() }).is_err());
        assert!(Problem::new(ProblemSpec { trunk_widths: vec![0], ..net }).is_err());
    }

    #[test]
    fn default_angle_sits_between_bounds() {
        let spec = ProblemSpec::new(ProblemKind::ConflictingQuadratics, 3, 4);
        assert!((spec.effective_angle() - 105.0).abs() < 1e-12);
        assert!(spec.violations().is_empty());
    }
}
