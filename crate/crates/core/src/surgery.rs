//! Projection of conflicting task gradients.
//!
//! Two gradients conflict when their dot product is strictly negative.
//! [`pcgrad`] resolves conflicts symmetrically: every task's gradient is
//! projected onto the normal plane of each conflicting original gradient,
//! visiting the other tasks in a random order. [`wpcgrad`] draws a task
//! ordering from a [`TaskDistribution`] instead; the first task drawn keeps
//! its gradient untouched and every gradient that conflicts with the current
//! outer task is projected onto that task's normal plane.

use serde::Serialize;

use crate::rng::{self, SeededRng};
use crate::vecmath::{self, dot_unchecked, FlatVector};
use crate::weighting::TaskDistribution;
use crate::{Error, Result, TaskId};

/// Projectors with squared norm below this are skipped.
pub const DEFAULT_EPS: f64 = 1e-12;

/// Per-task gradients over one shared parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    gradients: Vec<FlatVector>,
}

impl GradientSet {
    pub fn new(gradients: Vec<FlatVector>) -> Result<Self> {
        if gradients.len() < 2 {
            return Err(Error::TooFewTasks(gradients.len()));
        }
        let dim = gradients[0].dim();
        if let Some(g) = gradients.iter().find(|g| g.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: g.dim() });
        }
        Ok(Self { gradients })
    }

    pub fn task_count(&self) -> usize {
        self.gradients.len()
    }

    pub fn dim(&self) -> usize {
        self.gradients[0].dim()
    }

    pub fn gradients(&self) -> &[FlatVector] {
        &self.gradients
    }

    pub fn get(&self, task: TaskId) -> &FlatVector {
        &self.gradients[task]
    }

    /// Plain sequential sum, the update used without surgery.
    pub fn sum(&self) -> FlatVector {
        vecmath::sum(&self.gradients).expect("validated on construction")
    }

    /// Cosine for every unordered pair `i < j` whose norms are both non-degenerate.
    pub fn pair_cosines(&self, eps: f64) -> Vec<(TaskId, TaskId, f64)> {
        let mut out = Vec::new();
        for i in 0..self.task_count() {
            for j in i + 1..self.task_count() {
                if let Ok(Some(c)) = vecmath::cosine(&self.gradients[i], &self.gradients[j], eps) {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    /// Number of unordered pairs with a strictly negative dot product.
    pub fn conflicting_pairs(&self) -> usize {
        let g = &self.gradients;
        let mut n = 0;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                if dot_unchecked(g[i].as_slice(), g[j].as_slice()) < 0.0 {
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurgeryReport {
    /// Sum of the per-task gradients after surgery.
    pub combined: FlatVector,
    /// Per-task gradients after surgery, indexed by task.
    pub task_gradients: Vec<FlatVector>,
    /// Conflicting unordered pairs among the original gradients.
    pub conflicts_found: usize,
    /// Number of projections performed. A pair can be projected more than
    /// once, so this may exceed `conflicts_found`.
    pub projections_applied: usize,
    /// Cosines of the original gradients, `(i, j, cos)` with `i < j`.
    pub pair_cosines: Vec<(TaskId, TaskId, f64)>,
    /// wPCGrad only: the task whose gradient was left unchanged.
    pub unchanged_task: Option<TaskId>,
    /// wPCGrad only: the sampled outer-loop order.
    pub order: Vec<TaskId>,
    /// Largest `|dot(victim', projector)| / (|victim| |projector|)` observed
    /// right after a projection; 0 when nothing was projected.
    pub max_relative_residual: f64,
}

/// Removes from `victim` its component along `projector`.
///
/// Returns `victim` unchanged when `|projector|^2 < eps`.
pub fn project_out(victim: &FlatVector, projector: &FlatVector, eps: f64) -> Result<FlatVector> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if victim.dim() != projector.dim() {
        return Err(Error::DimensionMismatch { expected: victim.dim(), got: projector.dim() });
    }
    Ok(project_raw(victim, projector, eps).unwrap_or_else(|| victim.clone()))
}

/// `None` when the projector is degenerate.
fn project_raw(victim: &FlatVector, projector: &FlatVector, eps: f64) -> Option<FlatVector> {
    let p = projector.as_slice();
    let pp = dot_unchecked(p, p);
    if pp < eps {
        return None;
    }
    let coeff = dot_unchecked(victim.as_slice(), p) / pp;
    let out = victim.as_slice().iter().zip(p).map(|(v, q)| v - coeff * q).collect();
    Some(FlatVector::from_raw(out))
}

struct Tracker {
    projections: usize,
    max_residual: f64,
}

impl Tracker {
    fn new() -> Self {
        Self { projections: 0, max_residual: 0.0 }
    }

    /// Projects `victim` in place and records the post-projection residual.
    fn project(&mut self, victim: &mut FlatVector, projector: &FlatVector, eps: f64) {
        if let Some(projected) = project_raw(victim, projector, eps) {
            let scale = victim.norm() * projector.norm();
            let residual = dot_unchecked(projected.as_slice(), projector.as_slice()).abs();
            if scale > 0.0 {
                self.max_residual = self.max_residual.max(residual / scale);
            }
            *victim = projected;
            self.projections += 1;
        }
    }
}

/// PCGrad with the default degenerate-projector threshold.
pub fn pcgrad(grads: &GradientSet, rng_seed: u64) -> SurgeryReport {
    pcgrad_with(grads, &mut rng::seeded(rng_seed), DEFAULT_EPS)
}

/// PCGrad: for each task `i`, its working gradient is projected onto the
/// normal plane of every original gradient `g_j` it conflicts with, the other
/// tasks being visited in a fresh uniformly random order.
pub fn pcgrad_with(grads: &GradientSet, rng: &mut SeededRng, eps: f64) -> SurgeryReport {
    let k = grads.task_count();
    let originals = grads.gradients();
    let mut tracker = Tracker::new();
    let mut working = Vec::with_capacity(k);

    for (i, g_i) in originals.iter().enumerate() {
        let mut g_pc = g_i.clone();
        let mut others: Vec<TaskId> = (0..k).filter(|&j| j != i).collect();
        rng::shuffle(rng, &mut others);
        for j in others {
            let g_j = &originals[j];
            if dot_unchecked(g_pc.as_slice(), g_j.as_slice()) < 0.0 {
                tracker.project(&mut g_pc, g_j, eps);
            }
        }
        working.push(g_pc);
    }

    finish(grads, working, tracker, None, Vec::new(), eps)
}

/// wPCGrad with the default degenerate-projector threshold.
pub fn wpcgrad(grads: &GradientSet, dist: &TaskDistribution, rng_seed: u64) -> Result<SurgeryReport> {
    wpcgrad_with(grads, dist, &mut rng::seeded(rng_seed), DEFAULT_EPS)
}

/// wPCGrad: draws a full task order from `dist` without replacement. For
/// each outer task `i` in that order, every other working gradient `g_j`
/// (ascending task id) that conflicts with `g_i` is projected onto the normal
/// plane of `g_i`. The first task drawn is never projected, so its gradient
/// reaches the update exactly as computed.
pub fn wpcgrad_with(
    grads: &GradientSet,
    dist: &TaskDistribution,
    rng: &mut SeededRng,
    eps: f64,
) -> Result<SurgeryReport> {
    let k = grads.task_count();
    if dist.task_count() != k {
        return Err(Error::DimensionMismatch { expected: k, got: dist.task_count() });
    }
    let order = rng::weighted_order(dist.probs(), rng);
    let anchor = order[0];
    let mut working = grads.gradients().to_vec();
    let mut tracker = Tracker::new();

    for &i in &order {
        let projector = working[i].clone();
        for (j, g_j) in working.iter_mut().enumerate() {
            if j == i || j == anchor {
                continue;
            }
            if dot_unchecked(projector.as_slice(), g_j.as_slice()) < 0.0 {
                tracker.project(g_j, &projector, eps);
            }
        }
    }

    Ok(finish(grads, working, tracker, Some(anchor), order, eps))
}

fn finish(
    grads: &GradientSet,
    working: Vec<FlatVector>,
    tracker: Tracker,
    unchanged_task: Option<TaskId>,
    order: Vec<TaskId>,
    eps: f64,
) -> SurgeryReport {
    SurgeryReport {
        combined: vecmath::sum(&working).expect("at least two tasks"),
        task_gradients: working,
        conflicts_found: grads.conflicting_pairs(),
        projections_applied: tracker.projections,
        pair_cosines: grads.pair_cosines(eps),
        unchanged_task,
        order,
        max_relative_residual: tracker.max_residual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::{dot, norm_sq};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> FlatVector {
        FlatVector::new(xs.to_vec()).unwrap()
    }

    fn set(gs: &[&[f64]]) -> GradientSet {
        GradientSet::new(gs.iter().map(|g| v(g)).collect()).unwrap()
    }

    /// Literal two-task projection, independent of the implementation.
    fn oracle_project(victim: [f64; 2], onto: [f64; 2]) -> [f64; 2] {
        let d = victim[0] * onto[0] + victim[1] * onto[1];
        let n = onto[0] * onto[0] + onto[1] * onto[1];
        if d >= 0.0 {
            return victim;
        }
        [victim[0] - d / n * onto[0], victim[1] - d / n * onto[1]]
    }

    #[test]
    fn project_out_examples() {
        assert_eq!(project_out(&v(&[-1.0, 1.0]), &v(&[1.0, 0.0]), DEFAULT_EPS).unwrap(), v(&[0.0, 1.0]));
        assert_eq!(project_out(&v(&[0.0, 1.0]), &v(&[1.0, 0.0]), DEFAULT_EPS).unwrap(), v(&[0.0, 1.0]));
        assert_eq!(project_out(&v(&[-2.0, 0.0]), &v(&[1.0, 0.0]), DEFAULT_EPS).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn project_out_skips_degenerate_projector() {
        let victim = v(&[3.0, -4.0]);
        assert_eq!(project_out(&victim, &v(&[0.0, 0.0]), DEFAULT_EPS).unwrap(), victim);
        assert_eq!(project_out(&victim, &v(&[1e-7, 0.0]), DEFAULT_EPS).unwrap(), victim);
    }

    #[test]
    fn project_out_errors() {
        assert!(matches!(project_out(&v(&[1.0]), &v(&[1.0, 0.0]), DEFAULT_EPS), Err(Error::DimensionMismatch { .. })));
        assert!(project_out(&v(&[1.0]), &v(&[1.0]), 0.0).is_err());
        assert!(project_out(&v(&[1.0]), &v(&[1.0]), f64::NAN).is_err());
    }

    #[test]
    fn gradient_set_validation() {
        assert!(matches!(GradientSet::new(vec![v(&[1.0])]), Err(Error::TooFewTasks(1))));
        assert!(matches!(GradientSet::new(vec![v(&[1.0]), v(&[1.0, 2.0])]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pcgrad_orthogonal_passthrough() {
        let r = pcgrad(&set(&[&[1.0, 0.0], &[0.0, 1.0]]), 0);
        assert_eq!(r.combined, v(&[1.0, 1.0]));
        assert_eq!(r.conflicts_found, 0);
        assert_eq!(r.projections_applied, 0);
        assert_eq!(r.unchanged_task, None);
    }

    #[test]
    fn pcgrad_two_task_conflict() {
        let g0 = [1.0, 0.0];
        let g1 = [-1.0, 1.0];
        let e0 = oracle_project(g0, g1);
        let e1 = oracle_project(g1, g0);
        assert_eq!(e0, [0.5, 0.5]);
        assert_eq!(e1, [0.0, 1.0]);

        for seed in 0..8 {
            let r = pcgrad(&set(&[&g0, &g1]), seed);
            assert_eq!(r.task_gradients[0], v(&e0));
            assert_eq!(r.task_gradients[1], v(&e1));
            assert_eq!(r.combined, v(&[0.5, 1.5]));
            assert_eq!(r.conflicts_found, 1);
            assert_eq!(r.projections_applied, 2);
            let (i, j, c) = r.pair_cosines[0];
            assert_eq!((i, j), (0, 1));
            assert!((c + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn pcgrad_anti_parallel_collapses() {
        let r = pcgrad(&set(&[&[2.0, 0.0], &[-1.0, 0.0]]), 3);
        assert_eq!(r.combined, v(&[0.0, 0.0]));
    }

    #[test]
    fn wpcgrad_degenerate_distribution() {
        let dist = TaskDistribution::new(vec![1.0, 0.0]).unwrap();
        let g = set(&[&[1.0, 0.0], &[-1.0, 1.0]]);
        for seed in 0..8 {
            let r = wpcgrad(&g, &dist, seed).unwrap();
            assert_eq!(r.unchanged_task, Some(0));
            assert_eq!(r.order, vec![0, 1]);
            assert_eq!(r.task_gradients[0], v(&[1.0, 0.0]));
            assert_eq!(r.task_gradients[1], v(&oracle_project([-1.0, 1.0], [1.0, 0.0])));
            assert_eq!(r.task_gradients[1], v(&[0.0, 1.0]));
            assert_eq!(r.combined, v(&[1.0, 1.0]));
            assert_eq!(r.projections_applied, 1);
        }
    }

    #[test]
    fn wpcgrad_other_task_first() {
        let dist = TaskDistribution::new(vec![0.0, 1.0]).unwrap();
        let r = wpcgrad(&set(&[&[1.0, 0.0], &[-1.0, 1.0]]), &dist, 0).unwrap();
        assert_eq!(r.unchanged_task, Some(1));
        assert_eq!(r.task_gradients[1], v(&[-1.0, 1.0]));
        assert_eq!(r.task_gradients[0], v(&[0.5, 0.5]));
    }

    #[test]
    fn wpcgrad_rejects_mismatched_distribution() {
        let dist = TaskDistribution::uniform(3).unwrap();
        assert!(wpcgrad(&set(&[&[1.0], &[2.0]]), &dist, 0).is_err());
    }

    #[test]
    fn wpcgrad_keeps_anchor_when_later_projection_flips_a_conflict() {
        // Order is 0, 1, 2. Task 0's pass projects task 1; task 1's pass
        // projects task 2, which then conflicts with task 0. Without anchor
        // protection task 2's pass would move task 0 to about (-0.195, 0.156).
        let dist = TaskDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        let g = set(&[&[0.4, 0.9], &[-0.9, -1.0], &[0.5, -0.5]]);
        let r = wpcgrad(&g, &dist, 0).unwrap();
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(r.task_gradients[0], *g.get(0));
        assert!(r.projections_applied >= 2);
    }

    #[test]
    fn wpcgrad_uniform_first_task_frequency() {
        let g = set(&[&[1.0, 0.0], &[-1.0, 0.5], &[0.0, -1.0], &[0.3, 0.3]]);
        let dist = TaskDistribution::uniform(4).unwrap();
        let n = 20_000;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            counts[wpcgrad(&g, &dist, seed).unwrap().unchanged_task.unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.015, "{counts:?}");
        }
    }

    #[test]
    fn surgery_is_deterministic() {
        let g = set(&[&[1.0, -2.0, 0.5], &[-1.0, 1.0, 0.0], &[0.2, 0.7, -1.0]]);
        let d = TaskDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(pcgrad(&g, 42), pcgrad(&g, 42));
        assert_eq!(wpcgrad(&g, &d, 42).unwrap(), wpcgrad(&g, &d, 42).unwrap());
    }

    fn gradient_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..6, 1usize..12)
            .prop_flat_map(|(k, dim)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), k))
    }

    proptest! {
        #[test]
        fn project_out_is_idempotent(vs in gradient_sets()) {
            let victim = v(&vs[0]);
            let p = v(&vs[1]);
            let once = project_out(&victim, &p, DEFAULT_EPS).unwrap();
            let twice = project_out(&once, &p, DEFAULT_EPS).unwrap();
            let scale = norm_sq(&victim).sqrt().max(1e-300);
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn project_out_is_orthogonal(vs in gradient_sets()) {
            let victim = v(&vs[0]);
            let p = v(&vs[1]);
            if norm_sq(&p) >= DEFAULT_EPS {
                let out = project_out(&victim, &p, DEFAULT_EPS).unwrap();
                let bound = 1e-9 * (norm_sq(&victim) * norm_sq(&p)).sqrt();
                prop_assert!(dot(&out, &p).unwrap().abs() <= bound);
            }
        }

        #[test]
        fn wpcgrad_anchor_is_bit_exact(vs in gradient_sets(), seed in any::<u64>()) {
            let g = GradientSet::new(vs.iter().map(|x| v(x)).collect()).unwrap();
            let d = TaskDistribution::uniform(g.task_count()).unwrap();
            let r = wpcgrad(&g, &d, seed).unwrap();
            let anchor = r.unchanged_task.unwrap();
            prop_assert_eq!(r.order[0], anchor);
            prop_assert_eq!(&r.task_gradients[anchor], g.get(anchor));
            prop_assert!(r.max_relative_residual <= 1e-9);
        }

        #[test]
        fn pcgrad_residuals_are_small(vs in gradient_sets(), seed in any::<u64>()) {
            let g = GradientSet::new(vs.iter().map(|x| v(x)).collect()).unwrap();
            prop_assert!(pcgrad(&g, seed).max_relative_residual <= 1e-9);
        }
    }
}
