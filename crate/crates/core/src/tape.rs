//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Forward values are computed with the same kernels as the plain functions
//! in [`crate::numeric`], [`crate::attention`] and [`crate::retention`], so a
//! forward pass on the tape produces the same bits as the straight-line
//! code. Nodes are appended in evaluation order; [`Tape::backward`] walks
//! them in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{self, LayerNormStats, Mask};
use crate::retention::blend_rows;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        stats: LayerNormStats,
        beta: Var,
    },
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    ReplaceRow {
        base: Var,
        row: usize,
        src: Var,
    },
    BlendRows {
        slots: Var,
        weights: Var,
        update: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        scale: f64,
        probs: Matrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shape matches node shape"),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds the `1 x d` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let value = self.value(a).hadamard(&c)?;
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = numeric::relu(self.value(a));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax(&mut self, x: Var, mask: Mask) -> Result<Var> {
        let value = numeric::softmax_masked(self.value(x), &mask)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Layer norm with learnable `1 x d` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, stats) = numeric::layer_norm_with_stats(
            self.value(x),
            self.value(gamma).as_slice(),
            self.value(beta).as_slice(),
            eps,
        )?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, stats, beta }))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = numeric::mean_rows(self.value(a))?;
        Ok(self.push(value, Op::MeanRows(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `ids` of `table`, in order (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(ids)?;
        Ok(self.push(value, Op::Gather(table, ids.to_vec())))
    }

    /// Copy of `base` with row `row` replaced by the `1 x d` matrix `src`.
    pub fn replace_row(&mut self, base: Var, row: usize, src: Var) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        if s.rows() != 1 || s.cols() != b.cols() || row >= b.rows() {
            return Err(Error::Shape {
                op: "replace_row",
                lhs: b.shape(),
                rhs: s.shape(),
            });
        }
        let mut value = b.clone();
        value.row_mut(row).copy_from_slice(s.as_slice());
        Ok(self.push(value, Op::ReplaceRow { base, row, src }))
    }

    /// `slotᵢ ← (1 - wᵢ)·slotᵢ + wᵢ·update` for every row.
    pub fn blend_rows(&mut self, slots: Var, weights: Var, update: Var) -> Result<Var> {
        let value = blend_rows(self.value(slots), self.value(weights), self.value(update))?;
        Ok(self.push(value, Op::BlendRows { slots, weights, update }))
    }

    /// `scale · Σ -log softmax(logits[r])[class]` over `targets = [(r, class)]`,
    /// as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], scale: f64) -> Result<Var> {
        let l = self.value(logits);
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for &(r, class) in targets {
            if r >= l.rows() || class >= l.cols() {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: l.shape(),
                    rhs: (r, class),
                });
            }
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let log_z = max + libm::log(sum);
            total += log_z - row[class];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = libm::exp(v - log_z);
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "cross-entropy loss" });
        }
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
        ))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(x, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *bias, db);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.hadamard(c)?),
                Op::Relu(a) => {
                    let input = self.value(*a);
                    let mut da = g.clone();
                    for (d, &x) in da.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((d, &gy), &yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yy * (gy - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, stats, beta } => {
                    let gam = self.value(*gamma).as_slice();
                    let xhat = &stats.normalized;
                    let d = g.cols();
                    let n = d as f64;
                    let mut dgamma = Matrix::zeros(1, d);
                    let mut dbeta = Matrix::zeros(1, d);
                    let mut dx = Matrix::zeros(g.rows(), d);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for c in 0..d {
                            dgamma.as_mut_slice()[c] += gr[c] * xr[c];
                            dbeta.as_mut_slice()[c] += gr[c];
                        }
                        let dxhat: Vec<f64> = (0..d).map(|c| gr[c] * gam[c]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let inv = stats.inv_std[r];
                        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                            *out = inv / n * (n * dxhat[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).rows();
                    let inv = 1.0 / rows as f64;
                    let mut da = Matrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        for (d, v) in da.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *d = v * inv;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(start, w)?);
                        start += w;
                    }
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut dt = Matrix::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ReplaceRow { base, row, src } => {
                    let dsrc = Matrix::row_vector(g.row(*row));
                    let mut dbase = g;
                    for v in dbase.row_mut(*row) {
                        *v = 0.0;
                    }
                    accumulate(&mut grads, *base, dbase);
                    accumulate(&mut grads, *src, dsrc);
                }
                Op::BlendRows { slots, weights, update } => {
                    let s = self.value(*slots);
                    let w = self.value(*weights).as_slice();
                    let u = self.value(*update).as_slice();
                    let mut ds = Matrix::zeros(s.rows(), s.cols());
                    let mut dw = Matrix::zeros(1, s.rows());
                    let mut du = Matrix::zeros(1, s.cols());
                    for (i, &wi) in w.iter().enumerate() {
                        let gi = g.row(i);
                        let si = s.row(i);
                        let mut acc = 0.0;
                        for (c, (&gc, &sc)) in gi.iter().zip(si).enumerate() {
                            acc += gc * (u[c] - sc);
                            du.as_mut_slice()[c] += wi * gc;
                        }
                        dw.as_mut_slice()[i] = acc;
                        for (d, &gv) in ds.row_mut(i).iter_mut().zip(gi) {
                            *d = (1.0 - wi) * gv;
                        }
                    }
                    accumulate(&mut grads, *slots, ds);
                    accumulate(&mut grads, *weights, dw);
                    accumulate(&mut grads, *update, du);
                }
                Op::CrossEntropy { logits, targets, scale, probs } => {
                    let (rows, cols) = probs.shape();
                    let mut dl = Matrix::zeros(rows, cols);
                    let k = g.get(0, 0) * scale;
                    for &(r, class) in targets {
                        for (d, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d += k * p;
                        }
                        let cur = dl.get(r, class);
                        dl.set(r, class, cur - k);
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }

        // Interior adjoints were consumed during the sweep; only leaves remain.
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}
