//! Volume scaling of affine maps, pushforward densities, per-sample batch
//! densities through a network segment, and the batch JS divergence used by
//! the fine-tuner.
//!
//! A network segment is treated as a single affine region around each
//! evaluation point: its local Jacobian `J` stretches volume by
//! `sqrt(det(JᵀJ))`, so a uniform input density `1/(2N)` maps to
//! `(2N)⁻¹ det(JᵀJ)^{-1/2}`.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_inverse, cholesky_solve, logdet_from_factor, Matrix};
use crate::mlp::{input_dim, jacobian, jacobian_pullback_trace, jacobian_trace, Layer, ParamGrad};

/// Diagonal shift applied to `JᵀJ` inside [`sample_densities`].
pub const DENSITY_JITTER: f64 = 1e-9;
/// Minimum Cholesky pivot (`sqrt`) accepted by [`affine_volume_scale`].
pub const MIN_PIVOT: f64 = 1e-12;
/// Largest residual of `z - b` outside `col(A)` accepted by
/// [`pushforward_density`].
pub const MANIFOLD_TOL: f64 = 1e-6;

const NORMALIZED_TOL: f64 = 1e-12;

/// `z = A x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    a: Matrix,
    b: Vec<f64>,
}

impl AffineMap {
    pub fn new(a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() == 0 || a.cols() == 0 {
            return Err(Error::dims("AffineMap", "non-empty A", format!("{:?}", a.shape())));
        }
        if b.len() != a.rows() {
            return Err(Error::dims("AffineMap", a.rows(), b.len()));
        }
        if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine map".into()));
        }
        Ok(Self { a, b })
    }

    pub fn linear(a: Matrix) -> Result<Self> {
        let b = vec![0.0; a.rows()];
        Self::new(a, b)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.a.matvec(x)?;
        z.iter_mut().zip(&self.b).for_each(|(z, b)| *z += b);
        Ok(z)
    }

    /// Cholesky factor of `AᵀA`, rejecting (numerically) rank-deficient maps.
    fn gram_factor(&self) -> Result<Matrix> {
        if self.d_out() < self.d_in() {
            return Err(Error::RankDeficient(format!(
                "d_out {} < d_in {}",
                self.d_out(),
                self.d_in()
            )));
        }
        let l = cholesky(&self.a.matmul_tn(&self.a)?).map_err(|e| match e {
            Error::NonSpd { .. } => Error::RankDeficient("AᵀA is singular".into()),
            other => other,
        })?;
        let min = (0..l.rows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min < MIN_PIVOT {
            return Err(Error::RankDeficient(format!("pivot {min:e} below {MIN_PIVOT:e}")));
        }
        Ok(l)
    }
}

/// `sqrt(det(AᵀA))`, the factor by which `A` scales `d_in`-volumes.
pub fn affine_volume_scale(map: &AffineMap) -> Result<f64> {
    let l = map.gram_factor()?;
    Ok((0.5 * logdet_from_factor(&l)).exp())
}

/// Density at `z` of the pushforward of `p_x` through `map`.
pub fn pushforward_density(p_x: impl Fn(&[f64]) -> f64, map: &AffineMap, z: &[f64]) -> Result<f64> {
    if z.len() != map.d_out() {
        return Err(Error::dims("pushforward_density", map.d_out(), z.len()));
    }
    let l = map.gram_factor()?;
    let shifted: Vec<f64> = z.iter().zip(&map.b).map(|(z, b)| z - b).collect();
    let x = cholesky_solve(&l, &map.a.matvec_t(&shifted)?)?;
    let back = map.a.matvec(&x)?;
    let residual = back
        .iter()
        .zip(&shifted)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt();
    if residual > MANIFOLD_TOL {
        return Err(Error::OffManifold(residual));
    }
    Ok(p_x(&x) / (0.5 * logdet_from_factor(&l)).exp())
}

/// Per-sample densities over a batch, kept in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDensity {
    log_values: Vec<f64>,
    normalized: bool,
}

impl BatchDensity {
    /// Builds from positive density values.
    pub fn from_values(values: &[f64], normalized: bool) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite("density values must be finite and >= 0".into()));
        }
        let d = Self {
            log_values: values.iter().map(|v| v.ln()).collect(),
            normalized,
        };
        if normalized && (values.iter().sum::<f64>() - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::NotNormalized);
        }
        Ok(d)
    }

    pub fn from_log_values(log_values: Vec<f64>) -> Self {
        Self {
            log_values,
            normalized: false,
        }
    }

    /// `1/n` for every sample, already normalized.
    pub fn uniform(n: usize) -> Self {
        Self {
            log_values: vec![-(n as f64).ln(); n],
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.log_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|v| v.exp()).collect()
    }

    /// Categorical distribution over the batch (log-sum-exp normalized).
    pub fn normalize(&self) -> BatchDensity {
        let max = self.log_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.log_values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        BatchDensity {
            log_values: self.log_values.iter().map(|v| v - lse).collect(),
            normalized: true,
        }
    }
}

/// `logdet(JᵀJ + δI)` through the smaller Gram, plus `B = J(JᵀJ + δI)⁻¹`,
/// the half-gradient of the log-determinant with respect to `J`.
fn jacobian_logdet(j: &Matrix, with_grad: bool) -> Result<(f64, Option<Matrix>)> {
    let (m, d) = j.shape();
    if m >= d {
        let mut g = j.matmul_tn(j)?;
        (0..d).for_each(|i| g[(i, i)] += DENSITY_JITTER);
        let l = cholesky(&g)?;
        let b = with_grad.then(|| j.matmul(&cholesky_inverse(&l))).transpose()?;
        Ok((logdet_from_factor(&l), b))
    } else {
        // det(JᵀJ + δI_d) = det(JJᵀ + δI_m) δ^{d-m}
        let mut g = j.matmul_nt(j)?;
        (0..m).for_each(|i| g[(i, i)] += DENSITY_JITTER);
        let l = cholesky(&g)?;
        let b = with_grad.then(|| cholesky_inverse(&l).matmul(j)).transpose()?;
        Ok((logdet_from_factor(&l) + (d - m) as f64 * DENSITY_JITTER.ln(), b))
    }
}

fn check_segment(segment: &[Layer], z_e: &Matrix) -> Result<()> {
    if segment.is_empty() {
        return Err(Error::InvalidNetwork("empty segment".into()));
    }
    if z_e.rows() != input_dim(segment) {
        return Err(Error::dims("sample_densities", input_dim(segment), z_e.rows()));
    }
    if z_e.cols() == 0 {
        return Err(Error::BatchTooSmall("no samples".into()));
    }
    Ok(())
}

/// `p_i = (2N)⁻¹ det(J_iᵀJ_i + 1e-9 I)^{-1/2}` with `J_i` the segment Jacobian
/// at column `i` of `z_e` and `2N = z_e.cols()`.
pub fn sample_densities(segment: &[Layer], z_e: &Matrix) -> Result<BatchDensity> {
    check_segment(segment, z_e)?;
    let prefactor = -(z_e.cols() as f64).ln();
    let log_values = (0..z_e.cols())
        .map(|i| {
            let j = jacobian(segment, &z_e.col(i))?;
            Ok(prefactor - 0.5 * jacobian_logdet(&j, false)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchDensity::from_log_values(log_values))
}

fn check_pair(p: &BatchDensity, q: &BatchDensity) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    if !p.normalized || !q.normalized {
        return Err(Error::NotNormalized);
    }
    Ok(())
}

/// `½ KL(p‖m) + ½ KL(q‖m)`, `m = (p + q)/2`, with `0 log 0 = 0`.
pub fn js_divergence(p: &BatchDensity, q: &BatchDensity) -> Result<f64> {
    check_pair(p, q)?;
    Ok(js_values(&p.values(), &q.values()))
}

fn js_values(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        s += term(a, m) + term(b, m);
    }
    0.5 * s
}

/// `JS(p_early ‖ normalize(sample_densities(segment, z_e)))` and its gradient
/// with respect to the segment parameters.
pub fn grad_js_wrt_segment(segment: &[Layer], z_e: &Matrix, p_early: &BatchDensity) -> Result<(f64, ParamGrad)> {
    check_segment(segment, z_e)?;
    if !p_early.normalized {
        return Err(Error::NotNormalized);
    }
    if p_early.len() != z_e.cols() {
        return Err(Error::LengthMismatch(p_early.len(), z_e.cols()));
    }
    let n = z_e.cols();
    let mut logs = Vec::with_capacity(n);
    let mut halves = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let tr = jacobian_trace(segment, &z_e.col(i))?;
        let (ld, b) = jacobian_logdet(&tr.jacobian, true)?;
        logs.push(-0.5 * ld);
        halves.push(b.expect("requested"));
        traces.push(tr);
    }
    let q = BatchDensity::from_log_values(logs).normalize().values();
    let p = p_early.values();
    let js = js_values(&p, &q);

    // dJS/dq_i = ½ log(q_i / m_i); through the softmax, dJS/dℓ_i = q_i (g_i - Σ q_k g_k)
    let g: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| if b > 0.0 { 0.5 * (2.0 * b / (a + b)).ln() } else { 0.0 })
        .collect();
    let mean: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();

    let mut grad = ParamGrad::zeros_like(segment);
    for (i, b) in halves.iter().enumerate() {
        let c = q[i] * (g[i] - mean);
        if c == 0.0 {
            continue;
        }
        // ℓ_i = -½ logdet  ⇒  dℓ_i/dJ = -B_i
        let pull = jacobian_pullback_trace(segment, &z_e.col(i), &traces[i], b)?;
        grad.add_scaled(-c, &pull);
    }
    Ok((js, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn volume_scale_examples() {
        let q = Matrix::from_rows(&[vec![0.6, 0.0], vec![0.8, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(close(affine_volume_scale(&AffineMap::linear(q).unwrap()).unwrap(), 1.0, 1e-14));
        let d = Matrix::from_diag(&[2.0, 3.0]);
        assert!(close(affine_volume_scale(&AffineMap::linear(d).unwrap()).unwrap(), 6.0, 1e-13));
    }

    #[test]
    fn rank_deficient_maps() {
        let wide = AffineMap::linear(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert!(matches!(affine_volume_scale(&wide), Err(Error::RankDeficient(_))));
        let flat = AffineMap::linear(Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap()).unwrap();
        assert!(matches!(affine_volume_scale(&flat), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn pushforward_stretch() {
        let map = AffineMap::linear(Matrix::from_diag(&[2.0])).unwrap();
        let unit = |x: &[f64]| if (0.0..=1.0).contains(&x[0]) { 1.0 } else { 0.0 };
        for z in [0.0, 0.5, 1.3, 2.0] {
            assert!(close(pushforward_density(unit, &map, &[z]).unwrap(), 0.5, 1e-15));
        }
        assert_eq!(pushforward_density(unit, &map, &[2.5]).unwrap(), 0.0);
    }

    #[test]
    fn pushforward_identity() {
        let map = AffineMap::linear(Matrix::identity(2)).unwrap();
        let p = |x: &[f64]| (-(x[0] * x[0] + x[1] * x[1])).exp();
        let z = [0.3, -0.7];
        assert_eq!(pushforward_density(p, &map, &z).unwrap(), p(&z));
    }

    #[test]
    fn off_manifold_rejected() {
        let map = AffineMap::new(Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(), vec![0.0, 1.0]).unwrap();
        assert!(pushforward_density(|_| 1.0, &map, &[0.4, 1.0]).is_ok());
        assert!(matches!(
            pushforward_density(|_| 1.0, &map, &[0.4, 1.1]),
            Err(Error::OffManifold(_))
        ));
    }

    fn affine_segment(a: Matrix) -> Vec<Layer> {
        let b = vec![0.0; a.rows()];
        vec![Layer::new(a, b, Activation::Identity).unwrap()]
    }

    #[test]
    fn identity_segment_density() {
        let seg = affine_segment(Matrix::identity(3));
        let z = Matrix::from_fn(3, 6, |i, j| (i * 7 + j) as f64 * 0.1);
        let d = sample_densities(&seg, &z).unwrap();
        for v in d.values() {
            assert!(close(v, 1.0 / 6.0, 1e-8));
        }
    }

    #[test]
    fn scalar_segment_density() {
        let seg = affine_segment(Matrix::from_diag(&[2.0]));
        let z = Matrix::from_rows(&[vec![0.1, -0.2, 0.3, 0.9]]).unwrap();
        for v in sample_densities(&seg, &z).unwrap().values() {
            assert!(close(v, 0.125, 1e-9));
        }
    }

    #[test]
    fn narrow_segment_uses_jitter() {
        let seg = affine_segment(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let z = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        let d = sample_densities(&seg, &z).unwrap();
        // det(JᵀJ + δI) = (1 + δ) δ
        let expect = -(4f64).ln() - 0.5 * ((1.0 + DENSITY_JITTER).ln() + DENSITY_JITTER.ln());
        for &l in d.log_values() {
            assert!(close(l, expect, 1e-9));
        }
    }

    #[test]
    fn js_examples() {
        let p = BatchDensity::from_values(&[0.75, 0.25], true).unwrap();
        let q = BatchDensity::from_values(&[0.25, 0.75], true).unwrap();
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let one = BatchDensity::from_values(&[1.0, 0.0], true).unwrap();
        let two = BatchDensity::from_values(&[0.0, 1.0], true).unwrap();
        assert!(close(js_divergence(&one, &two).unwrap(), 2f64.ln(), 1e-15));
        // two-point formula
        let oracle = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!(close(js_divergence(&p, &q).unwrap(), oracle, 1e-15));
        assert!(close(oracle, 0.130812, 1e-6));
    }

    #[test]
    fn js_errors() {
        let p = BatchDensity::uniform(3);
        let q = BatchDensity::uniform(4);
        assert!(matches!(js_divergence(&p, &q), Err(Error::LengthMismatch(3, 4))));
        let raw = BatchDensity::from_log_values(vec![0.0; 3]);
        assert!(matches!(js_divergence(&p, &raw), Err(Error::NotNormalized)));
        assert!(BatchDensity::from_values(&[0.5, 0.6], true).is_err());
    }

    #[test]
    fn js_gradient_vanishes_at_minimum() {
        let seg = affine_segment(Matrix::identity(2));
        let z = Matrix::from_fn(2, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let (js, g) = grad_js_wrt_segment(&seg, &z, &BatchDensity::uniform(4)).unwrap();
        assert!(js.abs() < 1e-15);
        assert!(g.norm() < 1e-6);
    }
}
