//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and the backward sweep is a single reverse pass.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax_in_place, ActivationKind, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// Adds a `1×cols` row to every row of `x`.
    AddRow(Var, Var),
    /// Multiplies every row of `x` elementwise by a `1×cols` row.
    MulRow(Var, Var),
    /// `scale * x + shift`
    Affine(Var, T),
    Activation(ActivationKind, Var),
    /// Row `i` of the output is column `ids[i]` of the table.
    GatherColumns(Var, Vec<usize>),
    SoftmaxRows(Var),
    /// Sum over rows of `mask[i] * (logsumexp(x_i) - x_i[target_i])`.
    MaskedNll {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// A single-owner recording of tensor operations.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zero when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.differentiated = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    fn check_row(&self, x: Var, row: Var, op: &'static str) -> Result<()> {
        let (xr, xc) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != xc {
            return Err(Error::dim(op, (xr, xc), (rr, rc)));
        }
        Ok(())
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            for (a, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *a += b;
            }
        }
        Ok(self.push(Op::AddRow(x, row), v))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            for (a, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *a *= b;
            }
        }
        Ok(self.push(Op::MulRow(x, row), v))
    }

    /// `scale * x + shift`, e.g. `1 - x` with `(-1, 1)`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|a| scale * a + shift);
        self.push(Op::Affine(x, scale), v)
    }

    pub fn activation(&mut self, kind: ActivationKind, x: Var) -> Var {
        let v = self.value(x).activate(kind);
        self.push(Op::Activation(kind, x), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(ActivationKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(ActivationKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(ActivationKind::Relu, x)
    }

    /// Selects columns of `table` (one per id) as the rows of the result.
    pub fn gather_columns(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.shape();
        let mut out = Tensor::zeros(ids.len(), rows);
        for (i, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(Error::Data(format!(
                    "token id {id} at batch row {i} out of range for {cols} columns"
                )));
            }
            for r in 0..rows {
                out.set(i, r, t.get(r, id));
            }
        }
        Ok(self.push(Op::GatherColumns(table, ids.to_vec()), out))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).softmax_rows();
        self.push(Op::SoftmaxRows(x), v)
    }

    /// Masked negative log likelihood of `targets` under row-softmax of `logits`.
    pub fn masked_nll(&mut self, logits: Var, targets: &[usize], mask: &[T]) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.rows() || mask.len() != x.rows() {
            return Err(Error::dim("masked_nll", x.shape(), (targets.len(), mask.len())));
        }
        let mut total = T::zero();
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m == T::zero() {
                continue;
            }
            if t >= x.cols() {
                return Err(Error::Data(format!(
                    "target id {t} at batch row {i} out of range for {} classes",
                    x.cols()
                )));
            }
            let row = x.row(i);
            total += m * (log_sum_exp(row) - row[t]);
        }
        let v = Tensor::filled(1, 1, total);
        Ok(self.push(
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            v,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::filled(1, 1, self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    /// Reverse sweep from a scalar node.
    ///
    /// May be called once per recording; call [`Tape::reset`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(Error::State(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim("backward", self.shape(loss), (1, 1)));
        }
        self.differentiated = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(1, 1));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulNt(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(x, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (a, &b) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[x.0], g);
                }
                Op::MulRow(x, row) => {
                    let xv = self.value(*x);
                    let rv = self.value(*row).data();
                    let mut gr = Tensor::zeros(1, g.cols());
                    let mut gx = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gr.data_mut()[j] += g.get(i, j) * xv.get(i, j);
                        }
                        for (a, &b) in gx.row_mut(i).iter_mut().zip(rv) {
                            *a *= b;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Affine(x, scale) => {
                    let s = *scale;
                    accumulate(&mut grads[x.0], g.map(|v| v * s));
                }
                Op::Activation(kind, x) => {
                    let k = *kind;
                    let gx = g.zip_with(&node.value, "activation", |gv, y| {
                        gv * k.derivative_from_output(y)
                    })?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GatherColumns(table, ids) => {
                    let (rows, cols) = self.shape(*table);
                    let mut gt = Tensor::zeros(rows, cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for r in 0..rows {
                            let v = gt.get(r, id) + g.get(i, r);
                            gt.set(r, id, v);
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MaskedNll {
                    logits,
                    targets,
                    mask,
                } => {
                    let upstream = g.data()[0];
                    let mut gx = self.value(*logits).clone();
                    for i in 0..gx.rows() {
                        let m = mask[i];
                        let row = gx.row_mut(i);
                        if m == T::zero() {
                            row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        softmax_in_place(row);
                        row[targets[i]] -= T::one();
                        let s = m * upstream;
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads[logits.0], gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads[x.0], Tensor::filled(r, c, g.data()[0]));
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0, -2.0]));
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_loss_and_unused_leaves_get_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        let c = tape.leaf(Tensor::filled(1, 1, 5.0));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x), Tensor::zeros(1, 2));
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        tape.reset();
        let x = tape.leaf(Tensor::row_vector(vec![1.0]));
        let loss = tape.sum(x);
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn row_broadcast_shape_checked() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(2, 3));
        let r = tape.leaf(Tensor::zeros(1, 2));
        assert!(tape.add_row(x, r).is_err());
        assert!(tape.mul_row(x, r).is_err());
    }

    #[test]
    fn masked_nll_skips_masked_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![9.0, -9.0]]).unwrap());
        let loss = tape.masked_nll(x, &[0, 1], &[1.0, 0.0]).unwrap();
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap().get(x);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert!((g.get(0, 0) + 0.5).abs() < 1e-15);
    }
}
