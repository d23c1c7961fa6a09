//! Small dense `f64` matrix helpers over [`Tensor`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub type Matrix = Tensor<f64>;

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(&[a.rows(), b.cols()]);
    gemm(a.data(), a.rows(), a.cols(), false, b.data(), b.rows(), b.cols(), false, out.data_mut(), false);
    out
}

pub fn transpose(a: &Matrix) -> Matrix {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Matrix::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.at(i, j);
        }
    }
    out
}

pub fn diag(values: &[f64]) -> Matrix {
    let n = values.len();
    let mut out = Matrix::zeros(&[n, n]);
    for (i, &v) in values.iter().enumerate() {
        out.data_mut()[i * n + i] = v;
    }
    out
}

pub fn column(values: &[f64]) -> Matrix {
    Matrix::from_vec(&[values.len(), 1], values.to_vec()).expect("length matches")
}

pub fn scaled(a: &Matrix, c: f64) -> Matrix {
    a.map(|v| c * v)
}

pub fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Matrix::from_vec(a.shape(), data).expect("same shape")
}

pub fn is_diagonal(a: &Matrix) -> bool {
    a.rows() == a.cols() && (0..a.rows()).all(|i| (0..a.cols()).all(|j| i == j || a.at(i, j) == 0.0))
}

pub fn is_symmetric(a: &Matrix, tol: f64) -> bool {
    a.rows() == a.cols() && (0..a.rows()).all(|i| (0..i).all(|j| (a.at(i, j) - a.at(j, i)).abs() <= tol))
}

pub fn max_asymmetry(a: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..i {
            worst = worst.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    worst
}

/// Inverse of a diagonal matrix.
pub fn diag_inverse(a: &Matrix) -> Result<Matrix> {
    if !is_diagonal(a) {
        return Err(Error::InvalidParameter("expected a diagonal matrix".into()));
    }
    let vals: Vec<f64> = (0..a.rows()).map(|i| a.at(i, i)).collect();
    if let Some(i) = vals.iter().position(|&v| v == 0.0) {
        return Err(Error::InvalidParameter(format!("diagonal entry {i} is zero, matrix is singular")));
    }
    Ok(diag(&vals.iter().map(|v| 1.0 / v).collect::<Vec<_>>()))
}

pub fn trace(a: &Matrix) -> f64 {
    (0..a.rows().min(a.cols())).map(|i| a.at(i, i)).sum()
}

/// Largest singular value by power iteration on `AᵀA`, stopped when the
/// relative change of the estimate drops below `tol`.
pub fn spectral_norm(a: &Matrix, tol: f64) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    let at = transpose(a);
    // Uneven start vector so it is not orthogonal to structured top singular vectors.
    let mut v = Matrix::from_vec(&[n, 1], (0..n).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3).collect())
        .expect("length matches");
    let mut estimate = 0.0f64;
    for _ in 0..100_000 {
        let w = matmul(&at, &matmul(a, &v));
        let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let vnorm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let next = norm / vnorm;
        v = scaled(&w, 1.0 / norm);
        if (next - estimate).abs() <= tol * next {
            return next.sqrt();
        }
        estimate = next;
    }
    estimate.sqrt()
}

/// Column vector `x` as a plain vector after `y = A x`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = a.row_slice(i).iter().zip(x).map(|(p, q)| p * q).sum();
    }
    out
}

/// Positive semidefiniteness by a Cholesky attempt on `A + δI`, with `δ` a
/// tiny multiple of the largest diagonal entry.
pub fn is_psd(a: &Matrix) -> bool {
    let n = a.rows();
    if n != a.cols() {
        return false;
    }
    let scale = (0..n).map(|i| a.at(i, i).abs()).fold(0.0, f64::max);
    let delta = 1e-12 * scale.max(1e-300);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a.at(j, j) + delta;
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) {
            return false;
        }
        let dj = libm::sqrt(diag);
        l[j * n + j] = dj;
        for i in j + 1..n {
            let mut v = a.at(i, j);
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / dj;
        }
    }
    true
}
