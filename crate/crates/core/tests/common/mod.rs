//! Shared helpers for the integration tests: finite differences, nalgebra
//! oracles and random instances.

#![allow(dead_code)]

use nalgebra::DMatrix;
use umm_core::coding_rate::Membership;
use umm_core::mlp::{assign_params, flatten_params, Layer};
use umm_core::{Matrix, Rng};

pub const FD_STEP: f64 = 1e-5;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `log det` of a symmetric positive-definite matrix from its eigenvalues.
pub fn eig_logdet(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().map(|v| v.ln()).sum()
}

/// Dense `log |det|` by LU.
pub fn lu_logdet(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().abs().ln()
}

pub fn singular_values(m: &Matrix) -> Vec<f64> {
    to_na(m).svd(false, false).singular_values.iter().copied().collect()
}

/// Entry-wise relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference gradient with respect to the entries of a matrix.
pub fn fd_matrix(mut f: impl FnMut(&Matrix) -> f64, z: &Matrix, h: f64) -> Matrix {
    let (r, c) = z.shape();
    let g = fd_grad(|v| f(&Matrix::from_vec(r, c, v.to_vec()).unwrap()), z.as_slice(), h);
    Matrix::from_vec(r, c, g).unwrap()
}

/// Central-difference gradient with respect to all parameters of a stack.
pub fn fd_params(mut f: impl FnMut(&[Layer]) -> f64, layers: &[Layer], h: f64) -> Vec<f64> {
    let mut work = layers.to_vec();
    fd_grad(
        |v| {
            assign_params(&mut work, v).unwrap();
            f(&work)
        },
        &flatten_params(layers),
        h,
    )
}

/// Directional derivative of `f` along `dir` by central differences.
pub fn fd_directional(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let shift = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * h * d).collect() };
    (f(&shift(1.0)) - f(&shift(-1.0))) / (2.0 * h)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    rng.normal_matrix(rows, cols)
}

pub fn unit_columns(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    rng.normal_matrix(rows, cols).normalize_columns().unwrap().0
}

/// Random membership: per-sample weights drawn uniformly and normalized
/// across `k` classes.
pub fn random_membership(rng: &mut Rng, k: usize, n: usize) -> Membership {
    let mut w = vec![vec![0.0; n]; k];
    for i in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        for j in 0..k {
            w[j][i] = raw[j] / s;
        }
    }
    Membership::new(w).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
