//! Multi-head scaled dot-product self-attention and the position-wise FFN.
//!
//! Parameter structs are generic over the tensor type so the same layout
//! holds concrete weights (`Matrix`), tape handles (`Var`) or optimizer
//! moments.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{self, Mask};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Glorot-uniform `fan_in x fan_out` matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
    Matrix::new(fan_in, fan_out, data).expect("length matches")
}

/// Per-head query/key/value projections and the shared output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Matrix> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    /// `(heads * d_k) x d_model`
    pub wo: T,
}

impl AttentionParams<Matrix> {
    pub fn init(d_model: usize, d_k: usize, heads: usize, rng: &mut Rng) -> Self {
        let proj = |rng: &mut Rng| (0..heads).map(|_| xavier_uniform(d_model, d_k, rng)).collect();
        let wq = proj(rng);
        let wk = proj(rng);
        let wv = proj(rng);
        AttentionParams {
            wq,
            wk,
            wv,
            wo: xavier_uniform(heads * d_k, d_model, rng),
        }
    }

    pub fn zeros(d_model: usize, d_k: usize, heads: usize) -> Self {
        let z = || (0..heads).map(|_| Matrix::zeros(d_model, d_k)).collect();
        AttentionParams {
            wq: z(),
            wk: z(),
            wv: z(),
            wo: Matrix::zeros(heads * d_k, d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wo.cols()
    }
}

impl<T> AttentionParams<T> {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: self.wq.iter().map(&mut *f).collect(),
            wk: self.wk.iter().map(&mut *f).collect(),
            wv: self.wv.iter().map(&mut *f).collect(),
            wo: f(&self.wo),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (name, list) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            for (h, t) in list.iter().enumerate() {
                out.push((format!("{prefix}.{name}[{h}]"), t));
            }
        }
        out.push((format!("{prefix}.wo"), &self.wo));
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend(self.wq.iter_mut());
        out.extend(self.wk.iter_mut());
        out.extend(self.wv.iter_mut());
        out.push(&mut self.wo);
    }
}

/// `relu(x·W1 + b1)·W2 + b2`; biases are `1 x width` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl FfnParams<Matrix> {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut Rng) -> Self {
        FfnParams {
            w1: xavier_uniform(d_model, d_ff, rng),
            b1: Matrix::zeros(1, d_ff),
            w2: xavier_uniform(d_ff, d_model, rng),
            b2: Matrix::zeros(1, d_model),
        }
    }

    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        FfnParams {
            w1: Matrix::zeros(d_model, d_ff),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::zeros(d_ff, d_model),
            b2: Matrix::zeros(1, d_model),
        }
    }
}

impl<T> FfnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.w1);
        out.push(&mut self.b1);
        out.push(&mut self.w2);
        out.push(&mut self.b2);
    }
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "scaled_dot_attention(q, k)",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "scaled_dot_attention(k, v)",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    Ok(())
}

/// `softmax(q·kᵀ / √d_k, mask) · v`. An all-false mask yields zeros.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    let mask = match mask {
        Some(m) => Mask::Columns(m.to_vec()),
        None => Mask::None,
    };
    scaled_dot_attention_masked(q, k, v, &mask).map(|(out, _)| out)
}

/// Like [`scaled_dot_attention`], also returning the attention weights.
pub fn scaled_dot_attention_masked(q: &Matrix, k: &Matrix, v: &Matrix, mask: &Mask) -> Result<(Matrix, Matrix)> {
    check_qkv(q, k, v)?;
    let scores = q.matmul(&k.transpose())?.scale(1.0 / libm::sqrt(q.cols() as f64));
    let weights = numeric::softmax_masked(&scores, mask)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

fn check_input(x: &Matrix, params: &AttentionParams) -> Result<()> {
    let d_model = params.wq.first().map_or(0, |w| w.rows());
    if x.cols() != d_model {
        return Err(Error::Shape {
            op: "multi_head_self_attention",
            lhs: x.shape(),
            rhs: (d_model, params.wq.first().map_or(0, |w| w.cols())),
        });
    }
    Ok(())
}

/// Concat-and-project multi-head self-attention. `causal` restricts token
/// `i` to positions `0..=i`.
pub fn multi_head_self_attention(x: &Matrix, params: &AttentionParams, causal: bool) -> Result<Matrix> {
    check_input(x, params)?;
    let mask = if causal { Mask::Causal } else { Mask::None };
    let mut heads = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let q = x.matmul(&params.wq[h])?;
        let k = x.matmul(&params.wk[h])?;
        let v = x.matmul(&params.wv[h])?;
        heads.push(scaled_dot_attention_masked(&q, &k, &v, &mask)?.0);
    }
    let refs: Vec<&Matrix> = heads.iter().collect();
    Matrix::concat_cols(&refs)?.matmul(&params.wo)
}

pub fn ffn(x: &Matrix, params: &FfnParams) -> Result<Matrix> {
    let hidden = numeric::relu(&x.matmul(&params.w1)?.add_row(&params.b1)?);
    hidden.matmul(&params.w2)?.add_row(&params.b2)
}

/// Tape version of [`scaled_dot_attention_masked`]; returns `(out, weights)`.
pub fn tape_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Mask) -> Result<(Var, Var)> {
    check_qkv(tape.value(q), tape.value(k), tape.value(v))?;
    let d_k = tape.value(q).cols();
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(d_k as f64));
    let weights = tape.softmax(scores, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn tape_multi_head(tape: &mut Tape, x: Var, params: &AttentionParams<Var>, causal: bool) -> Result<Var> {
    let mask = if causal { Mask::Causal } else { Mask::None };
    let mut heads = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let q = tape.matmul(x, params.wq[h])?;
        let k = tape.matmul(x, params.wk[h])?;
        let v = tape.matmul(x, params.wv[h])?;
        heads.push(tape_attention(tape, q, k, v, mask.clone())?.0);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, params.wo)
}

pub fn tape_ffn(tape: &mut Tape, x: Var, params: &FfnParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, params.w1)?;
    let h = tape.add_row(h, params.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, params.w2)?;
    tape.add_row(o, params.b2)
}
