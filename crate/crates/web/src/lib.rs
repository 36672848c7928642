//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations, each returning JSON:
//! - [`surgery`]: PCGrad and wPCGrad on user-drawn 2-D gradients,
//! - [`dtp`]: the DTP distribution for given losses and gamma,
//! - [`quadratic_curves`]: per-epoch losses on two conflicting quadratics for
//!   sum, PCGrad and prioritized / uniform wPCGrad.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use wpcgrad::harness::{train, Method, TrainOptions};
use wpcgrad::problem::{make_problem, ProblemKind, ProblemSpec};
use wpcgrad::weighting::Phase;
use wpcgrad::{pcgrad, wpcgrad, DtpState, FlatVector, GradientSet, StaticSchedule, TaskDistribution, WeightPolicy};

#[derive(Serialize)]
struct SurgeryView {
    conflicts: usize,
    pcgrad: Vec<Vec<f64>>,
    pcgrad_combined: Vec<f64>,
    wpcgrad: Vec<Vec<f64>>,
    wpcgrad_combined: Vec<f64>,
    order: Vec<usize>,
    sum: Vec<f64>,
}

/// `flat` holds the gradients back to back, `dim` values each.
pub fn surgery(flat: &[f64], dim: usize, probs: &[f64], seed: u64) -> Result<String, String> {
    if dim == 0 || !flat.len().is_multiple_of(dim) {
        return Err(format!("{} values do not split into vectors of length {dim}", flat.len()));
    }
    let grads = flat
        .chunks(dim)
        .map(|c| FlatVector::new(c.to_vec()))
        .collect::<wpcgrad::Result<Vec<_>>>()
        .and_then(GradientSet::new)
        .map_err(|e| e.to_string())?;
    let dist = TaskDistribution::from_weights(probs).map_err(|e| e.to_string())?;
    let pc = pcgrad(&grads, seed);
    let wpc = wpcgrad(&grads, &dist, seed).map_err(|e| e.to_string())?;
    let rows = |v: &[FlatVector]| v.iter().map(|g| g.as_slice().to_vec()).collect();
    let view = SurgeryView {
        conflicts: pc.conflicts_found,
        pcgrad: rows(&pc.task_gradients),
        pcgrad_combined: pc.combined.into_inner(),
        wpcgrad: rows(&wpc.task_gradients),
        wpcgrad_combined: wpc.combined.into_inner(),
        order: wpc.order,
        sum: grads.sum().into_inner(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// DTP probabilities for `losses` under unit scales.
pub fn dtp(losses: &[f64], gamma: f64) -> Result<Vec<f64>, String> {
    let mut state = DtpState::with_scales(gamma, vec![1.0; losses.len()]).map_err(|e| e.to_string())?;
    state.update(losses).map(|d| d.probs().to_vec()).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    label: &'static str,
    /// `[epoch][task]` mean training loss.
    losses: Vec<Vec<f64>>,
    final_losses: Vec<f64>,
}

pub fn quadratic_curves(
    angle: f64,
    favored_mass: f64,
    epochs: usize,
    lr: f64,
    noise: f64,
    seed: u64,
) -> Result<String, String> {
    if epochs == 0 || epochs > 500 {
        return Err("epochs must be in 1..=500".into());
    }
    let spec = ProblemSpec::new(ProblemKind::ConflictingQuadratics, 2, 8).with_angle(angle).with_noise(noise);
    let favored = TaskDistribution::new(vec![favored_mass, 1.0 - favored_mass]).map_err(|e| e.to_string())?;
    let fixed = |dist: TaskDistribution| -> Result<WeightPolicy, String> {
        StaticSchedule::new(vec![Phase { start: 0, end: epochs, dist }])
            .map(WeightPolicy::Static)
            .map_err(|e| e.to_string())
    };
    let setups = [
        ("sum", Method::Sum, WeightPolicy::Uniform { task_count: 2 }),
        ("pcgrad", Method::Pcgrad, WeightPolicy::Uniform { task_count: 2 }),
        ("wpcgrad favoring task 0", Method::Wpcgrad, fixed(favored)?),
        ("wpcgrad uniform", Method::Wpcgrad, WeightPolicy::Uniform { task_count: 2 }),
    ];
    let mut curves = Vec::new();
    for (label, method, mut policy) in setups {
        let (learner, problem) = make_problem(spec.clone(), seed).map_err(|e| e.to_string())?;
        let out = train(learner, &problem, &mut policy, &TrainOptions::new(method, epochs, lr, seed))
            .map_err(|e| e.to_string())?;
        if let Some(d) = out.diverged {
            return Err(format!("{label} diverged at epoch {}: {}", d.epoch, d.message));
        }
        curves.push(Curve {
            label,
            losses: out.records.iter().map(|r| r.per_task_mean_loss.clone()).collect(),
            final_losses: out.final_losses,
        });
    }
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = surgery)]
pub fn surgery_js(flat: Vec<f64>, dim: usize, probs: Vec<f64>, seed: u32) -> Result<String, JsValue> {
    surgery(&flat, dim, &probs, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = dtp)]
pub fn dtp_js(losses: Vec<f64>, gamma: f64) -> Result<Vec<f64>, JsValue> {
    dtp(&losses, gamma).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = quadraticCurves)]
pub fn quadratic_curves_js(
    angle: f64,
    favored_mass: f64,
    epochs: usize,
    lr: f64,
    noise: f64,
    seed: u32,
) -> Result<String, JsValue> {
    quadratic_curves(angle, favored_mass, epochs, lr, noise, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}
