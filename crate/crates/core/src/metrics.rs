//! Scoring helpers: the nuScenes detection score and gradient-conflict
//! statistics.

use serde::{Deserialize, Serialize};

use crate::surgery::{GradientSet, DEFAULT_EPS};
use crate::vecmath::{self, dot_unchecked};
use crate::{Error, Result};

/// Detection quality: mAP plus the five true-positive error metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionErrors {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
}

impl DetectionErrors {
    fn true_positive_errors(&self) -> [(&'static str, f64); 5] {
        [("mATE", self.mate), ("mASE", self.mase), ("mAOE", self.maoe), ("mAVE", self.mave), ("mAAE", self.maae)]
    }
}

/// `NDS = (5 mAP + sum over TP errors of (1 - min(1, err))) / 10`.
pub fn nds(err: &DetectionErrors) -> Result<f64> {
    if !(0.0..=1.0).contains(&err.map) {
        return Err(Error::InvalidMetric(format!("mAP {} outside [0, 1]", err.map)));
    }
    let mut tp_sum = 0.0;
    for (name, value) in err.true_positive_errors() {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidMetric(format!("{name} {value} must be finite and >= 0")));
        }
        tp_sum += 1.0 - value.min(1.0);
    }
    Ok((5.0 * err.map + tp_sum) / 10.0)
}

/// Fraction of unordered task pairs whose gradients conflict, and the mean
/// cosine over pairs where both gradients are non-degenerate (0 if none).
pub fn conflict_stats(grads: &GradientSet) -> (f64, f64) {
    let g = grads.gradients();
    let k = g.len();
    let mut conflicts = 0usize;
    let mut pairs = 0usize;
    let mut cos_sum = 0.0;
    let mut cos_count = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            pairs += 1;
            if dot_unchecked(g[i].as_slice(), g[j].as_slice()) < 0.0 {
                conflicts += 1;
            }
            if let Ok(Some(c)) = vecmath::cosine(&g[i], &g[j], DEFAULT_EPS) {
                cos_sum += c;
                cos_count += 1;
            }
        }
    }
    let mean_cos = if cos_count == 0 { 0.0 } else { cos_sum / cos_count as f64 };
    (conflicts as f64 / pairs as f64, mean_cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::FlatVector;
    use proptest::prelude::*;

    fn errs(map: f64, maae: f64, maoe: f64, mase: f64, mate: f64, mave: f64) -> DetectionErrors {
        DetectionErrors { map, mate, mase, maoe, mave, maae }
    }

    #[test]
    fn nds_examples() {
        let small = nds(&errs(0.186, 0.215, 0.704, 0.300, 0.895, 0.648)).unwrap();
        assert!((small - 0.317).abs() <= 1e-3, "{small}");
        let dtp = nds(&errs(0.209, 0.214, 0.635, 0.302, 0.901, 0.559)).unwrap();
        assert!((dtp - 0.344).abs() <= 1e-3, "{dtp}");
        assert_eq!(nds(&errs(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(nds(&errs(0.0, 1.0, 2.0, 5.0, 1.0, 9.0)).unwrap(), 0.0);
    }

    #[test]
    fn nds_errors() {
        assert!(nds(&errs(1.2, 0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
        assert!(nds(&errs(-0.1, 0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
        assert!(nds(&errs(0.5, -0.1, 0.0, 0.0, 0.0, 0.0)).is_err());
        assert!(nds(&errs(0.5, 0.0, f64::NAN, 0.0, 0.0, 0.0)).is_err());
    }

    fn set(gs: &[&[f64]]) -> GradientSet {
        GradientSet::new(gs.iter().map(|g| FlatVector::new(g.to_vec()).unwrap()).collect()).unwrap()
    }

    #[test]
    fn conflict_stats_examples() {
        assert_eq!(conflict_stats(&set(&[&[1.0, 0.0], &[-1.0, 0.0]])), (1.0, -1.0));
        assert_eq!(conflict_stats(&set(&[&[1.0, 0.0], &[0.0, 1.0]])), (0.0, 0.0));

        let third = 2.0 * std::f64::consts::PI / 3.0;
        let unit = |a: f64| [a.cos(), a.sin()];
        let (a, b, c) = (unit(0.0), unit(third), unit(2.0 * third));
        let (frac, cos) = conflict_stats(&set(&[&a, &b, &c]));
        assert_eq!(frac, 1.0);
        assert!((cos + 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pairs_are_left_out_of_the_mean() {
        let (frac, cos) = conflict_stats(&set(&[&[1.0, 0.0], &[0.0, 0.0], &[-1.0, 0.0]]));
        assert!((frac - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cos, -1.0);
    }

    fn metric() -> impl Strategy<Value = f64> {
        0.0f64..2.0
    }

    proptest! {
        #[test]
        fn nds_is_monotone(
            map in 0.0f64..1.0, dm in 0.0f64..0.5,
            e in prop::array::uniform5(metric()), which in 0usize..5, de in 0.0f64..0.5,
        ) {
            let base = errs(map, e[0], e[1], e[2], e[3], e[4]);
            let s = nds(&base).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));

            let better = DetectionErrors { map: (map + dm).min(1.0), ..base };
            prop_assert!(nds(&better).unwrap() >= s);

            let mut worse_e = e;
            worse_e[which] += de;
            let worse = errs(map, worse_e[0], worse_e[1], worse_e[2], worse_e[3], worse_e[4]);
            prop_assert!(nds(&worse).unwrap() <= s);
        }

        #[test]
        fn saturated_errors_contribute_nothing(map in 0.0f64..1.0, e in 1.0f64..100.0) {
            let a = nds(&errs(map, e, e, e, e, e)).unwrap();
            prop_assert!((a - map / 2.0).abs() <= 1e-15);
        }
    }
}
