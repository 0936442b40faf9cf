//! Coding rate `R`, membership-conditional coding rate `R_c`, their
//! difference `ΔR = R - R_c`, and the instance-wise membership used for
//! self-supervised batches.
//!
//! For features `Z` (`m x n`, one sample per column) and precision `ε`:
//!
//! ```text
//! R(Z)      = 1/2 logdet(I + m/(n ε²) Z Zᵀ)
//! R_c(Z|Π)  = Σ_j tr(Πʲ)/(2n) logdet(I + m/(tr(Πʲ) ε²) Z Πʲ Zᵀ)
//! ```
//!
//! Trace mode replaces each `1/2 logdet(I + cA)` by its first-order
//! expansion `tr(c A)/2`.

use crate::error::{Error, Result};
use crate::linalg::{cholesky_inverse, cholesky_with_jitter, logdet_from_factor, Matrix};

/// Classes whose total membership falls below this contribute nothing.
pub const MIN_CLASS_TRACE: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-8;
const NORM_TOL: f64 = 1e-9;
const BALANCE_TOL: f64 = 1e-13;
const BALANCE_MAX_ITERS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RateMode {
    #[default]
    Exact,
    Trace,
}

impl std::str::FromStr for RateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RateMode::Exact),
            "trace" => Ok(RateMode::Trace),
            other => Err(Error::ModeUnsupported(format!("rate mode {other:?}"))),
        }
    }
}

/// How raw similarities become anchored membership weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stabilization {
    /// `z_iᵀz_j / Σ_{k≠j} z_kᵀz_j`; fails on negative or vanishing entries.
    Raw,
    /// `exp(z_iᵀz_j) / Σ_{k≠j} exp(z_kᵀz_j)`.
    #[default]
    Softmax,
}

impl std::str::FromStr for Stabilization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Stabilization::Raw),
            "softmax" => Ok(Stabilization::Softmax),
            other => Err(Error::ModeUnsupported(format!("membership {other:?}"))),
        }
    }
}

/// Column-wise sample features `Z` (`m x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    z: Matrix,
    normalized: bool,
}

impl FeatureBatch {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.cols() < 2 {
            return Err(Error::BatchTooSmall(format!("feature batch needs n >= 2, got {}", z.cols())));
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("feature batch".into()));
        }
        Ok(Self { z, normalized: false })
    }

    /// Normalizes every column to unit l2 norm.
    pub fn unit(z: &Matrix) -> Result<Self> {
        let (zn, _) = z.normalize_columns()?;
        let mut fb = Self::new(zn)?;
        fb.normalized = true;
        Ok(fb)
    }

    /// Wraps already-normalized columns, checking the norms.
    pub fn from_normalized(z: Matrix) -> Result<Self> {
        if z.column_norms().iter().any(|n| (n - 1.0).abs() > NORM_TOL) {
            return Err(Error::NotUnitNormalized);
        }
        let mut fb = Self::new(z)?;
        fb.normalized = true;
        Ok(fb)
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn dim(&self) -> usize {
        self.z.rows()
    }

    pub fn len(&self) -> usize {
        self.z.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.cols() == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Soft class membership: `weights[j][i] = Πʲ(i,i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    weights: Vec<Vec<f64>>,
}

impl Membership {
    /// Validates non-negativity and the per-sample simplex constraint.
    pub fn new(weights: Vec<Vec<f64>>) -> Result<Self> {
        let n = weights.first().map_or(0, Vec::len);
        if weights.is_empty() || n == 0 {
            return Err(Error::InvalidMembership("empty membership".into()));
        }
        if let Some(bad) = weights.iter().position(|w| w.len() != n) {
            return Err(Error::InvalidMembership(format!("class {bad} has wrong length")));
        }
        if weights.iter().flatten().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMembership("weights must be finite and >= 0".into()));
        }
        for i in 0..n {
            let total: f64 = weights.iter().map(|w| w[i]).sum();
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidMembership(format!(
                    "sample {i} memberships sum to {total}, not 1"
                )));
            }
        }
        Ok(Self { weights })
    }

    pub fn single_class(n: usize) -> Self {
        Self {
            weights: vec![vec![1.0; n]],
        }
    }

    /// Hard assignment from integer labels in `0..k`.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidMembership(format!("label {bad} >= k={k}")));
        }
        let mut w = vec![vec![0.0; labels.len()]; k];
        for (i, &l) in labels.iter().enumerate() {
            w[l][i] = 1.0;
        }
        Self::new(w)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn n(&self) -> usize {
        self.weights[0].len()
    }

    pub fn class(&self, j: usize) -> &[f64] {
        &self.weights[j]
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn class_trace(&self, j: usize) -> f64 {
        self.weights[j].iter().sum()
    }

    /// For an anchored membership (class `j` is anchored at sample `j`), the
    /// weights of anchor `j` over the other `n - 1` samples.
    pub fn leave_one_out(&self, anchor: usize) -> Vec<f64> {
        self.weights[anchor]
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != anchor)
            .map(|(_, &w)| w)
            .collect()
    }

    /// Reorders samples: new sample `i` is old sample `perm[i]`. Classes keep
    /// their order.
    pub fn permute_samples(&self, perm: &[usize]) -> Membership {
        Membership {
            weights: self
                .weights
                .iter()
                .map(|w| perm.iter().map(|&p| w[p]).collect())
                .collect(),
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidEpsilon(eps));
    }
    Ok(())
}

fn check_membership(zb: &FeatureBatch, pi: &Membership) -> Result<()> {
    if pi.n() != zb.len() {
        return Err(Error::dims("membership", zb.len(), pi.n()));
    }
    Ok(())
}

/// `I + c G`.
fn shifted(g: &Matrix, c: f64) -> Matrix {
    let mut a = g.scale(c);
    for i in 0..a.rows() {
        a[(i, i)] += 1.0;
    }
    a
}

pub fn coding_rate(zb: &FeatureBatch, eps: f64, mode: RateMode) -> Result<f64> {
    check_eps(eps)?;
    let (m, n) = (zb.dim() as f64, zb.len() as f64);
    let c = m / (n * eps * eps);
    match mode {
        RateMode::Exact => {
            let l = cholesky_with_jitter(&shifted(&zb.z.gram_rows(), c))?;
            Ok(0.5 * logdet_from_factor(&l))
        }
        RateMode::Trace => {
            let fro2: f64 = zb.z.as_slice().iter().map(|v| v * v).sum();
            Ok(0.5 * c * fro2)
        }
    }
}

/// Per-class weighted Grams `Z Πʲ Zᵀ`, exactly symmetric. Built from the
/// per-sample outer products so the inner loop runs over contiguous memory.
fn class_grams(z: &Matrix, pi: &Membership) -> Vec<Option<Matrix>> {
    let (m, n) = z.shape();
    let tri = m * (m + 1) / 2;
    let mut outer = vec![0.0; n * tri];
    for i in 0..n {
        let o = &mut outer[i * tri..(i + 1) * tri];
        let mut t = 0;
        for a in 0..m {
            let za = z[(a, i)];
            for b in 0..=a {
                o[t] = za * z[(b, i)];
                t += 1;
            }
        }
    }
    pi.weights
        .iter()
        .map(|w| {
            let tr: f64 = w.iter().sum();
            if tr < MIN_CLASS_TRACE {
                return None;
            }
            let mut acc = vec![0.0; tri];
            for (i, &wi) in w.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                for (a, &o) in acc.iter_mut().zip(&outer[i * tri..(i + 1) * tri]) {
                    *a += wi * o;
                }
            }
            let mut g = Matrix::zeros(m, m);
            let mut t = 0;
            for a in 0..m {
                for b in 0..=a {
                    g[(a, b)] = acc[t];
                    g[(b, a)] = acc[t];
                    t += 1;
                }
            }
            Some(g)
        })
        .collect()
}

pub fn coding_rate_conditional(zb: &FeatureBatch, pi: &Membership, eps: f64, mode: RateMode) -> Result<f64> {
    check_eps(eps)?;
    check_membership(zb, pi)?;
    let (m, n) = (zb.dim() as f64, zb.len() as f64);
    match mode {
        RateMode::Exact => {
            let grams = class_grams(&zb.z, pi);
            let mut total = 0.0;
            for (j, g) in grams.iter().enumerate() {
                let Some(g) = g else { continue };
                let tr = pi.class_trace(j);
                let l = cholesky_with_jitter(&shifted(g, m / (tr * eps * eps)))?;
                total += tr / (2.0 * n) * logdet_from_factor(&l);
            }
            Ok(total)
        }
        RateMode::Trace => {
            let sq: Vec<f64> = zb.z.column_norms().iter().map(|v| v * v).collect();
            let c = m / (2.0 * n * eps * eps);
            let mut total = 0.0;
            for (j, w) in pi.weights.iter().enumerate() {
                if pi.class_trace(j) < MIN_CLASS_TRACE {
                    continue;
                }
                total += c * w.iter().zip(&sq).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok(total)
        }
    }
}

pub fn coding_rate_reduction(zb: &FeatureBatch, pi: &Membership, eps: f64, mode: RateMode) -> Result<f64> {
    Ok(coding_rate(zb, eps, mode)? - coding_rate_conditional(zb, pi, eps, mode)?)
}

/// Instance-wise membership for a self-supervised batch of `n = 2N` unit
/// features: class `j` is anchored at sample `j` (zero self-weight) and
/// weights every other sample by its similarity to the anchor, normalized
/// over the anchor's `n - 1` neighbours. The similarity kernel is then
/// balanced (alternating anchor/sample normalization) so that each sample's
/// weights across anchors also sum to one; each anchor's weights sum to one
/// to rounding.
pub fn build_ssl_membership(zb: &FeatureBatch, stabilization: Stabilization) -> Result<Membership> {
    if !zb.is_normalized() {
        return Err(Error::NotUnitNormalized);
    }
    let n = zb.len();
    let sims = zb.z.matmul_tn(&zb.z)?;
    let mut k = vec![vec![0.0; n]; n];
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            k[j][i] = match stabilization {
                Stabilization::Softmax => sims[(i, j)].exp(),
                Stabilization::Raw => sims[(i, j)],
            };
        }
        if stabilization == Stabilization::Raw {
            let denom: f64 = k[j].iter().sum();
            if !(denom > 0.0) || k[j].iter().any(|&v| v / denom < 0.0) {
                return Err(Error::NegativeWeight { anchor: j });
            }
        }
    }
    normalize_rows(&mut k);
    balance(&mut k)?;
    Ok(Membership { weights: k })
}

fn normalize_rows(k: &mut [Vec<f64>]) {
    for row in k.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Sinkhorn balancing; finishes on a row pass so anchor sums are exact.
fn balance(k: &mut [Vec<f64>]) -> Result<()> {
    let n = k.len();
    let mut col = vec![0.0; n];
    for _ in 0..BALANCE_MAX_ITERS {
        col.iter_mut().for_each(|c| *c = 0.0);
        for row in k.iter() {
            col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
        }
        if col.iter().all(|c| (c - 1.0).abs() < BALANCE_TOL) {
            return Ok(());
        }
        if col.iter().any(|&c| !(c > 0.0)) {
            break;
        }
        for row in k.iter_mut() {
            row.iter_mut().zip(&col).for_each(|(v, c)| *v /= c);
        }
        normalize_rows(k);
    }
    Err(Error::InvalidMembership(
        "similarity kernel cannot be balanced onto the simplex".into(),
    ))
}

/// `∂R/∂Z = c (I + c Z Zᵀ)⁻¹ Z`, `c = m/(n ε²)`.
pub fn grad_coding_rate(zb: &FeatureBatch, eps: f64) -> Result<Matrix> {
    check_eps(eps)?;
    let (m, n) = (zb.dim() as f64, zb.len() as f64);
    let c = m / (n * eps * eps);
    let l = cholesky_with_jitter(&shifted(&zb.z.gram_rows(), c))?;
    let mut g = cholesky_inverse(&l).matmul(&zb.z)?;
    g.scale_in_place(c);
    Ok(g)
}

/// `∂R_c/∂Z`: column `i` is `m/(n ε²) Σ_j Πʲ(i,i) M_j⁻¹ z_i` with
/// `M_j = I + m/(tr(Πʲ) ε²) Z Πʲ Zᵀ`.
pub fn grad_coding_rate_conditional(zb: &FeatureBatch, pi: &Membership, eps: f64) -> Result<Matrix> {
    check_eps(eps)?;
    check_membership(zb, pi)?;
    let (m, n) = zb.z.shape();
    let scale = m as f64 / (n as f64 * eps * eps);
    let grams = class_grams(&zb.z, pi);
    // per-sample mixture of inverses, flattened m*m
    let mut mix = vec![0.0; n * m * m];
    for (j, g) in grams.iter().enumerate() {
        let Some(g) = g else { continue };
        let tr = pi.class_trace(j);
        let l = cholesky_with_jitter(&shifted(g, m as f64 / (tr * eps * eps)))?;
        let inv = cholesky_inverse(&l);
        for (i, &w) in pi.weights[j].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, &b) in mix[i * m * m..(i + 1) * m * m].iter_mut().zip(inv.as_slice()) {
                *a += w * b;
            }
        }
    }
    let mut out = Matrix::zeros(m, n);
    for i in 0..n {
        let a = &mix[i * m * m..(i + 1) * m * m];
        for r in 0..m {
            let mut s = 0.0;
            for c in 0..m {
                s += a[r * m + c] * zb.z[(c, i)];
            }
            out[(r, i)] = scale * s;
        }
    }
    Ok(out)
}

/// `∂ΔR/∂Z` with the membership held fixed. Exact mode.
pub fn grad_coding_rate_reduction(zb: &FeatureBatch, pi: &Membership, eps: f64) -> Result<Matrix> {
    grad_coding_rate(zb, eps)?.sub(&grad_coding_rate_conditional(zb, pi, eps)?)
}
