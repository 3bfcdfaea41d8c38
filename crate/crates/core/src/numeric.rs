//! Elementwise nonlinearities, row softmax, layer normalization and dropout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Which logits a row softmax may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    None,
    /// Same column mask for every row; `false` columns get exactly zero.
    Columns(Vec<bool>),
    /// Row `i` sees columns `0..=i`.
    Causal,
}

impl Mask {
    #[inline]
    fn allows(&self, row: usize, col: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Columns(m) => m[col],
            Mask::Causal => col <= row,
        }
    }
}

/// Row-wise softmax, optionally restricted to the `true` columns of `mask`.
///
/// A row with no permitted column comes out all zeros.
pub fn softmax_rows(x: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    match mask {
        Some(m) => softmax_masked(x, &Mask::Columns(m.to_vec())),
        None => softmax_masked(x, &Mask::None),
    }
}

pub fn softmax_masked(x: &Matrix, mask: &Mask) -> Result<Matrix> {
    if let Mask::Columns(m) = mask {
        if m.len() != x.cols() {
            return Err(Error::Shape {
                op: "softmax_rows",
                lhs: x.shape(),
                rhs: (1, m.len()),
            });
        }
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if mask.allows(r, c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (c, &v) in row.iter().enumerate() {
            if mask.allows(r, c) {
                let e = libm::exp(v - max);
                out_row[c] = e;
                sum += e;
            }
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Per-row statistics kept for the backward pass of [`layer_norm`].
#[derive(Debug, Clone)]
pub struct LayerNormStats {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per row, population variance.
pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormStats)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape(),
            rhs: (gamma.len(), beta.len()),
        });
    }
    let mut y = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + eps);
        inv_std.push(inv);
        let n_row = normalized.row_mut(r);
        for (n, v) in n_row.iter_mut().zip(row) {
            *n = (v - mean) * inv;
        }
        let y_row = y.row_mut(r);
        for c in 0..d {
            y_row[c] = normalized.get(r, c) * gamma[c] + beta[c];
        }
    }
    Ok((y, LayerNormStats { normalized, inv_std }))
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Column-wise mean over rows, as a `1 x cols` matrix.
pub fn mean_rows(x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput { op: "mean_rows" });
    }
    let mut acc = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (a, v) in acc.iter_mut().zip(x.row(r)) {
            *a += v;
        }
    }
    let n = x.rows() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Matrix::new(1, x.cols(), acc)
}

fn check_drop_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(alloc::format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Inverted-dropout multiplier: each entry is `0` with probability `p`,
/// otherwise `1 / (1 - p)`. Draws one value per entry in row-major order.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Result<Matrix> {
    check_drop_prob(p)?;
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
        .collect();
    Matrix::new(rows, cols, data)
}

/// Inverted dropout. Identity in eval mode or when `p == 0`; those cases
/// draw nothing from `rng`.
pub fn dropout(x: &Matrix, p: f64, rng: &mut Rng, training: bool) -> Result<Matrix> {
    check_drop_prob(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), p, rng)?;
    x.hadamard(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_row() {
        let y = softmax_rows(&Matrix::zeros(1, 3), None).unwrap();
        for &v in y.row(0) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_ln2_gap() {
        for c in [-5.0, 0.0, 3.5, 100.0] {
            let y = softmax_rows(&Matrix::row_vector(&[c, c + core::f64::consts::LN_2]), None).unwrap();
            assert!(close(y.get(0, 0), 1.0 / 3.0, 1e-14));
            assert!(close(y.get(0, 1), 2.0 / 3.0, 1e-14));
        }
    }

    #[test]
    fn softmax_one_two_three() {
        // e^x / sum(e^x) evaluated with mpmath at 30 digits.
        let y = softmax_rows(&Matrix::row_vector(&[1.0, 2.0, 3.0]), None).unwrap();
        let want = [0.090_030_573_170_380_46, 0.24472847105479765, 0.665_240_955_774_821_9];
        for (a, b) in y.row(0).iter().zip(want) {
            assert!(close(*a, b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_mask_zeroes_columns() {
        let x = Matrix::row_vector(&[5.0, 1.0, 1.0]);
        let y = softmax_rows(&x, Some(&[false, true, true])).unwrap();
        assert_eq!(y.get(0, 0), 0.0);
        assert!(close(y.get(0, 1), 0.5, 1e-15));
    }

    #[test]
    fn softmax_all_masked_is_zero_row() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let y = softmax_rows(&x, Some(&[false, false])).unwrap();
        assert_eq!(y, Matrix::zeros(2, 2));
    }

    #[test]
    fn softmax_mask_length_checked() {
        assert!(softmax_rows(&Matrix::zeros(1, 3), Some(&[true])).is_err());
    }

    #[test]
    fn causal_softmax_is_lower_triangular() {
        let y = softmax_masked(&Matrix::zeros(3, 3), &Mask::Causal).unwrap();
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(y.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let y = layer_norm(&Matrix::filled(1, 4, 2.5), &[1.0; 4], &[0.0; 4], LN_EPS).unwrap();
        assert_eq!(y, Matrix::zeros(1, 4));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let y = layer_norm(&Matrix::row_vector(&[-1.0, 1.0]), &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!(close(y.get(0, 0), -1.0, 1e-11));
        assert!(close(y.get(0, 1), 1.0, 1e-11));
    }

    #[test]
    fn layer_norm_one_two_three() {
        // var = 2/3, (x - 2) / sqrt(2/3 + 1e-5)
        let y = layer_norm(&Matrix::row_vector(&[1.0, 2.0, 3.0]), &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        let s = 1.0 / libm::sqrt(2.0 / 3.0 + 1e-5);
        assert!(close(y.get(0, 0), -s, 1e-15));
        assert_eq!(y.get(0, 1), 0.0);
        assert!(close(y.get(0, 2), s, 1e-15));
        assert!(close(s, 1.2247, 1e-4));
    }

    #[test]
    fn layer_norm_gamma_beta() {
        let y = layer_norm(&Matrix::row_vector(&[-1.0, 1.0]), &[2.0, 3.0], &[0.5, -0.5], 0.0).unwrap();
        assert_eq!(y.row(0), &[-1.5, 2.5]);
    }

    #[test]
    fn layer_norm_shape_error() {
        assert!(layer_norm(&Matrix::zeros(1, 3), &[1.0; 2], &[0.0; 3], LN_EPS).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&Matrix::row_vector(&[-1.0, 2.0])).row(0), &[0.0, 2.0]);
        assert_eq!(relu(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2));
        assert_eq!(relu(&Matrix::row_vector(&[-0.5, 0.0, 3.25])).row(0), &[0.0, 0.0, 3.25]);
    }

    #[test]
    fn mean_rows_cases() {
        assert_eq!(mean_rows(&Matrix::row_vector(&[4.0, -2.0])).unwrap().row(0), &[4.0, -2.0]);
        assert_eq!(
            mean_rows(&Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0]])).unwrap().row(0),
            &[1.0, 1.0]
        );
        assert_eq!(
            mean_rows(&Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])).unwrap().row(0),
            &[3.0, 4.0]
        );
        assert_eq!(
            mean_rows(&Matrix::zeros(0, 3)),
            Err(Error::EmptyInput { op: "mean_rows" })
        );
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0, 4.0]]);
        let mut rng = Rng::new(0);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.9, &mut rng, false).unwrap(), x);
        // Neither call consumed randomness.
        assert_eq!(rng, Rng::new(0));
    }

    #[test]
    fn dropout_reproducible_with_seed() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]);
        let a = dropout(&x, 0.5, &mut Rng::new(11), true).unwrap();
        let b = dropout(&x, 0.5, &mut Rng::new(11), true).unwrap();
        assert_eq!(a, b);
        for (o, i) in a.as_slice().iter().zip(x.as_slice()) {
            assert!(*o == 0.0 || *o == 2.0 * i);
        }
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let x = Matrix::zeros(1, 1);
        assert!(dropout(&x, 1.0, &mut Rng::new(0), true).is_err());
        assert!(dropout(&x, -0.1, &mut Rng::new(0), true).is_err());
    }
}
