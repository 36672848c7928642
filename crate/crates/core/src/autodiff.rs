//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort; [`Tape::backward`] walks it once in reverse. Only the
//! handful of operations needed by a dense tanh MLP with MSE or logistic
//! losses are provided.

use std::fmt;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (n x m) * other (m x p)`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`.
    fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Adds a `1 x p` row to every row of an `n x p` matrix.
    AddRow(Var, Var),
    Tanh(Var),
    /// Mean of `(pred - target)^2` over all entries.
    Mse(Var, Matrix),
    /// Mean of `softplus(z) - y z` over all entries, labels in `[0, 1]`.
    BceLogits(Var, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> &Matrix {
        &self.grads[var.0]
    }
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z) without overflow.
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "bias must be a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "bias width mismatch");
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Matrix::from_vec(src.rows(), src.cols(), src.data().iter().map(|x| x.tanh()).collect());
        self.push(value, Op::Tanh(a))
    }

    pub fn mse(&mut self, pred: Var, target: &Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!((p.rows(), p.cols()), (target.rows(), target.cols()), "target shape mismatch");
        let n = p.data().len() as f64;
        let loss = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        self.push(Matrix::scalar(loss), Op::Mse(pred, target.clone()))
    }

    pub fn bce_logits(&mut self, logits: Var, labels: &Matrix) -> Var {
        let z = self.value(logits);
        assert_eq!((z.rows(), z.cols()), (labels.rows(), labels.cols()), "label shape mismatch");
        let n = z.data().len() as f64;
        let loss = z.data().iter().zip(labels.data()).map(|(z, y)| softplus(*z) - y * z).sum::<f64>() / n;
        self.push(Matrix::scalar(loss), Op::BceLogits(logits, labels.clone()))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let out = self.value(output);
        assert_eq!((out.rows(), out.cols()), (1, 1), "backward needs a scalar output");

        let mut grads: Vec<Matrix> = self.nodes.iter().map(|n| Matrix::zeros(n.value.rows(), n.value.cols())).collect();
        grads[output.0] = Matrix::scalar(1.0);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let upstream = grads[idx].clone();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = upstream.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&upstream);
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Op::AddRow(a, row) => {
                    grads[a.0].add_assign(&upstream);
                    let cols = upstream.cols();
                    let mut dr = Matrix::zeros(1, cols);
                    for chunk in upstream.data().chunks(cols) {
                        for (d, u) in dr.data_mut().iter_mut().zip(chunk) {
                            *d += u;
                        }
                    }
                    grads[row.0].add_assign(&dr);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = Matrix::from_vec(
                        y.rows(),
                        y.cols(),
                        y.data().iter().zip(upstream.data()).map(|(y, u)| u * (1.0 - y * y)).collect(),
                    );
                    grads[a.0].add_assign(&da);
                }
                Op::Mse(pred, target) => {
                    let p = self.value(*pred);
                    let scale = 2.0 * upstream.get(0, 0) / p.data().len() as f64;
                    let dp = Matrix::from_vec(
                        p.rows(),
                        p.cols(),
                        p.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect(),
                    );
                    grads[pred.0].add_assign(&dp);
                }
                Op::BceLogits(logits, labels) => {
                    let z = self.value(*logits);
                    let scale = upstream.get(0, 0) / z.data().len() as f64;
                    let dz = Matrix::from_vec(
                        z.rows(),
                        z.cols(),
                        z.data().iter().zip(labels.data()).map(|(z, y)| scale * (sigmoid(*z) - y)).collect(),
                    );
                    grads[logits.0].add_assign(&dz);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a:?} vs {b:?}");
        }
    }

    fn graph(x: &Matrix, w: &Matrix, b: &Matrix, t: &Matrix, logistic: bool) -> (Tape, Var, Var, Var, Var) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let z = tape.matmul(xv, wv);
        let z = tape.add_row(z, bv);
        let h = tape.tanh(z);
        let loss = if logistic { tape.bce_logits(h, t) } else { tape.mse(h, t) };
        (tape, xv, wv, bv, loss)
    }

    #[test]
    fn matmul_values() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]);
        assert_eq!(a.matmul(&b).data(), &[17.0, 39.0]);
        assert_eq!(a.t_matmul(&b).data(), &[23.0, 34.0]);
        assert_eq!(a.matmul_t(&a).data(), &[5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn single_unit_mse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(1.0));
        let w = tape.leaf(Matrix::scalar(1.0));
        let y = tape.matmul(x, w);
        let loss = tape.mse(y, &Matrix::scalar(3.0));
        assert_eq!(tape.value(loss).get(0, 0), 4.0);
        assert_eq!(tape.backward(loss).get(w).get(0, 0), -4.0);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let x = Matrix::from_vec(3, 2, vec![0.5, -1.0, 0.3, 0.8, -0.2, 0.1]);
        let w = Matrix::from_vec(2, 2, vec![0.7, -0.4, 0.2, 0.9]);
        let b = Matrix::from_vec(1, 2, vec![0.1, -0.3]);
        for logistic in [false, true] {
            let t = if logistic {
                Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0])
            } else {
                Matrix::from_vec(3, 2, vec![0.2, -0.5, 0.9, 0.0, -0.1, 0.4])
            };
            let (tape, xv, wv, bv, loss) = graph(&x, &w, &b, &t, logistic);
            let g = tape.backward(loss);
            let eval = |x: &Matrix, w: &Matrix, b: &Matrix| {
                let (tape, _, _, _, loss) = graph(x, w, b, &t, logistic);
                tape.value(loss).get(0, 0)
            };
            assert_close(g.get(wv), &numeric_grad(&w, |w| eval(&x, w, &b)), 1e-7);
            assert_close(g.get(bv), &numeric_grad(&b, |b| eval(&x, &w, b)), 1e-7);
            assert_close(g.get(xv), &numeric_grad(&x, |x| eval(x, &w, &b)), 1e-7);
        }
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = mean((x w + x w)^2) with x = 1: d/dw (2w)^2 = 8w
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(1.0));
        let w = tape.leaf(Matrix::scalar(0.5));
        let a = tape.matmul(x, w);
        let s = tape.add_row(a, a);
        let loss = tape.mse(s, &Matrix::scalar(0.0));
        assert_eq!(tape.backward(loss).get(w).get(0, 0), 4.0);
    }

    #[test]
    fn logistic_loss_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Matrix::from_vec(1, 2, vec![800.0, -800.0]));
        let loss = tape.bce_logits(z, &Matrix::from_vec(1, 2, vec![1.0, 0.0]));
        assert!(tape.value(loss).get(0, 0).abs() < 1e-300);
        let g = tape.backward(loss);
        assert!(g.get(z).is_finite());
    }
}
