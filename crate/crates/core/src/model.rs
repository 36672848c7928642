//! Shared-trunk multitask MLP.
//!
//! Parameters are flattened in a fixed layout: trunk layers first, then each
//! task's head layers in task order; within a layer the weight matrix
//! (row-major, `fan_in x fan_out`) is followed by the bias. Hidden layers use
//! `tanh`; the last head layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::rng::SeededRng;
use crate::vecmath::FlatVector;
use crate::{Error, Result, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Mean squared error.
    Regression,
    /// Mean logistic loss on a single logit per target column.
    Binary,
}

/// Which parameters a task gradient covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Trunk parameters only; head positions are zero.
    #[default]
    SharedOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weights: Matrix::zeros(fan_in, fan_out), bias: Matrix::zeros(1, fan_out) }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Self { weights: Matrix::from_vec(fan_in, fan_out, data), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.data().len()
    }
}

/// One minibatch: shared inputs and one target matrix per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub inputs: Matrix,
    pub targets: Vec<Matrix>,
}

impl TaskBatch {
    pub fn new(inputs: Matrix, targets: Vec<Matrix>) -> Result<Self> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(t) = targets.iter().find(|t| t.rows() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: t.rows() });
        }
        Ok(Self { inputs, targets })
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskModel {
    trunk: Vec<Dense>,
    heads: Vec<Vec<Dense>>,
    kinds: Vec<TaskKind>,
}

/// Where one layer's parameters live in the flat layout.
#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    weights: usize,
    bias: usize,
}

impl MultitaskModel {
    /// Checks that every head starts at the trunk width and that consecutive
    /// layers agree on their widths.
    pub fn new(trunk: Vec<Dense>, heads: Vec<Vec<Dense>>, kinds: Vec<TaskKind>) -> Result<Self> {
        if heads.is_empty() || heads.len() != kinds.len() {
            return Err(Error::InvalidProblem(format!("{} heads for {} task kinds", heads.len(), kinds.len())));
        }
        check_chain(&trunk, "trunk")?;
        let trunk_out = trunk.last().map(Dense::fan_out);
        for (t, head) in heads.iter().enumerate() {
            if head.is_empty() {
                return Err(Error::InvalidProblem(format!("head {t} has no layers")));
            }
            check_chain(head, &format!("head {t}"))?;
            if let Some(width) = trunk_out {
                if head[0].fan_in() != width {
                    return Err(Error::InvalidProblem(format!(
                        "head {t} expects {} inputs but the trunk produces {width}",
                        head[0].fan_in()
                    )));
                }
            }
        }
        let input = trunk.first().map_or(heads[0][0].fan_in(), Dense::fan_in);
        if trunk.is_empty() && heads.iter().any(|h| h[0].fan_in() != input) {
            return Err(Error::InvalidProblem("heads disagree on input width".into()));
        }
        Ok(Self { trunk, heads, kinds })
    }

    /// Random tanh MLP: `input -> trunk_widths... -> head_widths... -> out` per task.
    pub fn random(
        input_dim: usize,
        trunk_widths: &[usize],
        head_widths: &[usize],
        outputs: &[(TaskKind, usize)],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut trunk = Vec::new();
        let mut width = input_dim;
        for &w in trunk_widths {
            trunk.push(Dense::glorot(width, w, rng));
            width = w;
        }
        let mut heads = Vec::new();
        for &(_, out) in outputs {
            let mut head = Vec::new();
            let mut w_in = width;
            for &w in head_widths.iter().chain(std::iter::once(&out)) {
                head.push(Dense::glorot(w_in, w, rng));
                w_in = w;
            }
            heads.push(head);
        }
        Self::new(trunk, heads, outputs.iter().map(|(k, _)| *k).collect())
    }

    pub fn task_count(&self) -> usize {
        self.heads.len()
    }

    pub fn kind(&self, task: TaskId) -> TaskKind {
        self.kinds[task]
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or(self.heads[0][0].fan_in(), Dense::fan_in)
    }

    pub fn trunk(&self) -> &[Dense] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Vec<Dense>] {
        &self.heads
    }

    pub fn shared_param_count(&self) -> usize {
        self.trunk.iter().map(Dense::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.shared_param_count() + self.heads.iter().flatten().map(Dense::param_count).sum::<usize>()
    }

    /// Flat index range of a task's head parameters.
    pub fn head_range(&self, task: TaskId) -> std::ops::Range<usize> {
        let start =
            self.shared_param_count() + self.heads[..task].iter().flatten().map(Dense::param_count).sum::<usize>();
        let len: usize = self.heads[task].iter().map(Dense::param_count).sum();
        start..start + len
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(self.heads.iter().flatten())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain(self.heads.iter_mut().flatten())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    pub fn unflatten(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), got: params.len() });
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            let w = layer.weights.data().len();
            layer.weights.data_mut().copy_from_slice(&params[offset..offset + w]);
            offset += w;
            let b = layer.bias.data().len();
            layer.bias.data_mut().copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    fn check_task(&self, batch: &TaskBatch, task: TaskId) -> Result<()> {
        if task >= self.task_count() || task >= batch.targets.len() {
            return Err(Error::UnknownTask(task));
        }
        if batch.inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: batch.inputs.cols() });
        }
        let out = self.heads[task].last().expect("non-empty head").fan_out();
        if batch.targets[task].cols() != out {
            return Err(Error::DimensionMismatch { expected: out, got: batch.targets[task].cols() });
        }
        Ok(())
    }

    /// Records the forward pass for one task. Returns the loss node and the
    /// parameter leaves with their layout slots.
    fn record(&self, batch: &TaskBatch, task: TaskId) -> Result<Recorded> {
        self.check_task(batch, task)?;
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut h = tape.leaf(batch.inputs.clone());

        let mut offset = 0;
        let head_start = self.head_range(task).start;
        let head_len = self.heads[task].len();
        let stages = self.trunk.iter().enumerate().map(|(i, l)| (format!("trunk layer {i}"), l, true)).chain(
            self.heads[task].iter().enumerate().map(|(i, l)| (format!("head {task} layer {i}"), l, i + 1 < head_len)),
        );

        for (idx, (name, layer, activate)) in stages.enumerate() {
            if idx == self.trunk.len() {
                offset = head_start;
            }
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(layer.bias.clone());
            let slot = Slot { offset, weights: layer.weights.data().len(), bias: layer.bias.data().len() };
            offset += slot.weights + slot.bias;
            params.push((w, b, slot));

            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = if activate { tape.tanh(z) } else { z };
            if !tape.value(h).is_finite() {
                return Err(Error::ForwardNaN(name));
            }
        }

        let target = &batch.targets[task];
        let loss = match self.kinds[task] {
            TaskKind::Regression => tape.mse(h, target),
            TaskKind::Binary => tape.bce_logits(h, target),
        };
        if !tape.value(loss).is_finite() {
            return Err(Error::ForwardNaN(format!("task {task} loss")));
        }
        Ok((tape, loss, params))
    }

    pub fn forward_loss(&self, batch: &TaskBatch, task: TaskId) -> Result<f64> {
        let (tape, loss, _) = self.record(batch, task)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Loss and its gradient laid out over the full parameter vector.
    pub fn loss_and_gradient(&self, batch: &TaskBatch, task: TaskId, scope: Scope) -> Result<(f64, FlatVector)> {
        let (tape, loss, params) = self.record(batch, task)?;
        let grads = tape.backward(loss);
        let mut flat = vec![0.0; self.param_count()];
        let shared = self.shared_param_count();
        for (w, b, slot) in params {
            if scope == Scope::SharedOnly && slot.offset >= shared {
                continue;
            }
            flat[slot.offset..slot.offset + slot.weights].copy_from_slice(grads.get(w).data());
            let bias_at = slot.offset + slot.weights;
            flat[bias_at..bias_at + slot.bias].copy_from_slice(grads.get(b).data());
        }
        let loss = tape.value(loss).get(0, 0);
        let grad = FlatVector::new(flat).map_err(|_| Error::ForwardNaN(format!("task {task} gradient")))?;
        Ok((loss, grad))
    }

    pub fn task_gradient(&self, batch: &TaskBatch, task: TaskId, scope: Scope) -> Result<FlatVector> {
        Ok(self.loss_and_gradient(batch, task, scope)?.1)
    }

    /// `theta <- theta - lr * update`.
    pub fn apply_update(&mut self, update: &FlatVector, lr: f64) -> Result<()> {
        if update.dim() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), got: update.dim() });
        }
        let mut params = self.flatten();
        for (p, u) in params.iter_mut().zip(update.as_slice()) {
            *p -= lr * u;
        }
        self.unflatten(&params)
    }

    /// Central-difference gradient over every parameter.
    pub fn finite_diff_gradient(&self, batch: &TaskBatch, task: TaskId, step: f64) -> Result<Vec<f64>> {
        if step.is_nan() || step <= 0.0 {
            return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
        }
        let base = self.flatten();
        let mut probe = self.clone();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut params = base.clone();
            params[i] = base[i] + step;
            probe.unflatten(&params)?;
            let plus = probe.forward_loss(batch, task)?;
            params[i] = base[i] - step;
            probe.unflatten(&params)?;
            let minus = probe.forward_loss(batch, task)?;
            out.push((plus - minus) / (2.0 * step));
        }
        Ok(out)
    }
}

/// Tape, loss node, and `(weights, bias, slot)` leaves per layer.
type Recorded = (Tape, Var, Vec<(Var, Var, Slot)>);

fn check_chain(layers: &[Dense], what: &str) -> Result<()> {
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].fan_out() != pair[1].fan_in() {
            return Err(Error::InvalidProblem(format!(
                "{what} layer {} outputs {} but layer {} expects {}",
                i,
                pair[0].fan_out(),
                i + 1,
                pair[1].fan_in()
            )));
        }
    }
    Ok(())
}
