//! Self-supervised objectives on paired views: NT-Xent (contrastive) and a
//! Barlow-style cross-correlation loss, each with exact gradients, and the
//! end-to-end loss through a network and projection head.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mlp::{backprop_trace, forward_trace, Layer, ParamGrad};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_OFF_DIAG_WEIGHT: f64 = 5e-3;

const NORM_TOL: f64 = 1e-9;
const MIN_VARIANCE: f64 = 1e-12;

/// Two views of the same `N` ancestors, one sample per column.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPairBatch {
    pub view1: Matrix,
    pub view2: Matrix,
    pub ancestors: Vec<usize>,
}

impl AugPairBatch {
    pub fn new(view1: Matrix, view2: Matrix, ancestors: Vec<usize>) -> Result<Self> {
        if view1.shape() != view2.shape() {
            return Err(Error::dims(
                "AugPairBatch",
                format!("{:?}", view1.shape()),
                format!("{:?}", view2.shape()),
            ));
        }
        if ancestors.len() != view1.cols() {
            return Err(Error::LengthMismatch(view1.cols(), ancestors.len()));
        }
        let mut sorted = ancestors.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSpec("ancestor ids must be unique within a batch".into()));
        }
        Ok(Self { view1, view2, ancestors })
    }

    pub fn len(&self) -> usize {
        self.view1.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.view1.cols() == 0
    }

    pub fn dim(&self) -> usize {
        self.view1.rows()
    }

    /// `[view1 | view2]`, the `2N` ordering used throughout.
    pub fn stacked(&self) -> Matrix {
        self.view1.hcat(&self.view2).expect("views share a shape")
    }

    /// Same pairs, columns reordered: new column `i` is old column `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> AugPairBatch {
        AugPairBatch {
            view1: self.view1.select_columns(perm),
            view2: self.view2.select_columns(perm),
            ancestors: perm.iter().map(|&p| self.ancestors[p]).collect(),
        }
    }
}

/// Which objective [`ssl_loss`] applies to the head outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SslKind {
    NtXent { temperature: f64 },
    Barlow { off_diag_weight: f64 },
}

impl SslKind {
    pub fn name(&self) -> &'static str {
        match self {
            SslKind::NtXent { .. } => "ntxent",
            SslKind::Barlow { .. } => "barlow",
        }
    }

    /// Loss and gradients on raw (unnormalized) embeddings. NT-Xent
    /// normalizes the columns first and differentiates through it.
    pub fn embedding_loss(&self, view1: &Matrix, view2: &Matrix) -> Result<(f64, Matrix, Matrix)> {
        match *self {
            SslKind::NtXent { temperature } => {
                let (n1, s1) = view1.normalize_columns()?;
                let (n2, s2) = view2.normalize_columns()?;
                let (loss, g1, g2) = ntxent_loss(&n1, &n2, temperature)?;
                Ok((loss, normalize_backward(&n1, &s1, &g1), normalize_backward(&n2, &s2, &g2)))
            }
            SslKind::Barlow { off_diag_weight } => barlow_loss(view1, view2, off_diag_weight),
        }
    }
}

/// Pulls `∂L/∂ẑ` back through `ẑ = y/‖y‖` column-wise.
pub fn normalize_backward(unit: &Matrix, norms: &[f64], g: &Matrix) -> Matrix {
    let mut out = g.clone();
    for (j, &nrm) in norms.iter().enumerate() {
        let proj: f64 = (0..unit.rows()).map(|i| g[(i, j)] * unit[(i, j)]).sum();
        for i in 0..unit.rows() {
            out[(i, j)] = (g[(i, j)] - proj * unit[(i, j)]) / nrm;
        }
    }
    out
}

/// Normalized-temperature cross-entropy over the `2N` embeddings
/// `[view1 | view2]`; the positive of sample `a` is its other view. Returns
/// the mean loss over anchors and its gradients with respect to each view.
pub fn ntxent_loss(view1: &Matrix, view2: &Matrix, temperature: f64) -> Result<(f64, Matrix, Matrix)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidTemperature(temperature));
    }
    if view1.shape() != view2.shape() {
        return Err(Error::dims(
            "ntxent_loss",
            format!("{:?}", view1.shape()),
            format!("{:?}", view2.shape()),
        ));
    }
    let n = view1.cols();
    if n < 2 {
        return Err(Error::BatchTooSmall(format!("NT-Xent needs at least 2 pairs, got {n}")));
    }
    let z = view1.hcat(view2)?;
    if z.column_norms().iter().any(|v| (v - 1.0).abs() > NORM_TOL) {
        return Err(Error::NotUnitNormalized);
    }
    let two_n = 2 * n;
    let inv = 1.0 / two_n as f64;
    let inv_t = 1.0 / temperature;
    // S = ZᵀZ is overwritten row by row with G = ∂L/∂S; S is symmetric so
    // ∂L/∂Z = Z (G + Gᵀ) / τ
    let mut g = z.matmul_tn(&z)?;
    let mut loss = 0.0;
    for a in 0..two_n {
        let pos = if a < n { a + n } else { a - n };
        let row = g.row_mut(a);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &v)| v * inv_t)
            .fold(f64::NEG_INFINITY, f64::max);
        let positive = row[pos] * inv_t;
        let mut denom = 0.0;
        for (b, v) in row.iter_mut().enumerate() {
            if b == a {
                *v = 0.0;
            } else {
                *v = (*v * inv_t - max).exp();
                denom += *v;
            }
        }
        loss += max + denom.ln() - positive;
        let scale = inv / denom;
        row.iter_mut().for_each(|v| *v *= scale);
        row[pos] -= inv;
    }
    let mut gz = z.matmul(&g)?;
    gz.axpy(1.0, &z.matmul_nt(&g)?);
    gz.scale_in_place(inv_t);
    let (g1, g2) = gz.split_columns(n);
    Ok((loss / two_n as f64, g1, g2))
}

/// Per-row batch standardization with population statistics; returns the
/// standardized matrix and the per-row standard deviations.
fn standardize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let (d, n) = x.shape();
    let mut out = x.clone();
    let mut stds = Vec::with_capacity(d);
    for r in 0..d {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var < MIN_VARIANCE {
            return Err(Error::DegenerateVariance(r));
        }
        let sd = var.sqrt();
        out.row_mut(r).iter_mut().for_each(|v| *v = (*v - mean) / sd);
        stds.push(sd);
    }
    Ok((out, stds))
}

/// `(1/σ)[g - mean(g) - ẑ mean(g ẑ)]` row-wise.
fn standardize_backward(zhat: &Matrix, stds: &[f64], g: &Matrix) -> Matrix {
    let n = zhat.cols() as f64;
    let mut out = g.clone();
    for (r, &sd) in stds.iter().enumerate() {
        let gr = g.row(r);
        let zr = zhat.row(r);
        let mg = gr.iter().sum::<f64>() / n;
        let mgz = gr.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>() / n;
        for (o, (&gv, &zv)) in out.row_mut(r).iter_mut().zip(gr.iter().zip(zr)) {
            *o = (gv - mg - zv * mgz) / sd;
        }
    }
    out
}

/// `Σ_d (1 - C_dd)² + w Σ_{d≠d'} C_dd'²` with `C` the cross-correlation of
/// the batch-standardized views.
pub fn barlow_loss(view1: &Matrix, view2: &Matrix, off_diag_weight: f64) -> Result<(f64, Matrix, Matrix)> {
    if view1.shape() != view2.shape() {
        return Err(Error::dims(
            "barlow_loss",
            format!("{:?}", view1.shape()),
            format!("{:?}", view2.shape()),
        ));
    }
    let (d, n) = view1.shape();
    if n < 2 {
        return Err(Error::BatchTooSmall(format!("cross-correlation needs N >= 2, got {n}")));
    }
    let (h1, s1) = standardize_rows(view1)?;
    let (h2, s2) = standardize_rows(view2)?;
    let c = h1.matmul_nt(&h2)?.scale(1.0 / n as f64);
    let mut loss = 0.0;
    let mut gc = Matrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let v = c[(a, b)];
            if a == b {
                loss += (1.0 - v) * (1.0 - v);
                gc[(a, b)] = -2.0 * (1.0 - v);
            } else {
                loss += off_diag_weight * v * v;
                gc[(a, b)] = 2.0 * off_diag_weight * v;
            }
        }
    }
    let gh1 = gc.matmul(&h2)?.scale(1.0 / n as f64);
    let gh2 = gc.matmul_tn(&h1)?.scale(1.0 / n as f64);
    Ok((loss, standardize_backward(&h1, &s1, &gh1), standardize_backward(&h2, &s2, &gh2)))
}

/// Result of [`ssl_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct SslOutput {
    pub loss: f64,
    pub net: ParamGrad,
    pub head: ParamGrad,
    /// `∂L/∂input`, `[view1 | view2]` order.
    pub input: Matrix,
}

/// Forwards both views through `net` then `head`, applies `kind`, and
/// backpropagates to every parameter.
pub fn ssl_loss(kind: SslKind, net: &[Layer], head: &[Layer], batch: &AugPairBatch) -> Result<SslOutput> {
    let stack: Vec<Layer> = net.iter().chain(head).cloned().collect();
    if stack.is_empty() {
        return Err(Error::InvalidNetwork("empty network".into()));
    }
    let n = batch.len();
    let trace = forward_trace(&stack, &batch.stacked())?;
    let (e1, e2) = trace.output().split_columns(n);
    let (loss, g1, g2) = kind.embedding_loss(&e1, &e2)?;
    let (grad, input) = backprop_trace(&stack, &trace, &g1.hcat(&g2)?)?;
    let mut layers = grad.layers;
    let head_layers = layers.split_off(net.len());
    Ok(SslOutput {
        loss,
        net: ParamGrad { layers },
        head: ParamGrad { layers: head_layers },
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::rng::Rng;

    #[test]
    fn ntxent_orthonormal() {
        let e = Matrix::identity(4);
        let (v1, v2) = e.split_columns(2);
        let (loss, _, _) = ntxent_loss(&v1, &v2, 1.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ntxent_rejects() {
        let e = Matrix::identity(2);
        let (v1, v2) = e.split_columns(1);
        assert!(matches!(ntxent_loss(&v1, &v2, 1.0), Err(Error::BatchTooSmall(_))));
        let e = Matrix::identity(4);
        let (v1, v2) = e.split_columns(2);
        assert!(matches!(ntxent_loss(&v1, &v2, 0.0), Err(Error::InvalidTemperature(_))));
        let big = v1.scale(2.0);
        assert!(matches!(ntxent_loss(&big, &v2, 1.0), Err(Error::NotUnitNormalized)));
    }

    #[test]
    fn barlow_identical_views() {
        // rows are orthogonal with unit population variance
        let v = Matrix::from_rows(&[vec![1.0, -1.0, 1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]]).unwrap();
        let (loss, _, _) = barlow_loss(&v, &v, 0.0).unwrap();
        assert!(loss.abs() < 1e-15);
        let (loss, _, _) = barlow_loss(&v, &v, 0.7).unwrap();
        assert!(loss.abs() < 1e-15);
        let corr = Matrix::from_rows(&[vec![1.0, -1.0, 1.0, -1.0], vec![1.0, -1.0, 1.0, 1.0]]).unwrap();
        let (loss, _, _) = barlow_loss(&corr, &corr, 0.5).unwrap();
        let (h, _) = standardize_rows(&corr).unwrap();
        let c01 = h.matmul_nt(&h).unwrap()[(0, 1)] / 4.0;
        assert!((loss - 0.5 * 2.0 * c01 * c01).abs() < 1e-14);
    }

    #[test]
    fn barlow_degenerate() {
        let v = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]]).unwrap();
        assert!(matches!(barlow_loss(&v, &v, 0.1), Err(Error::DegenerateVariance(1))));
    }

    #[test]
    fn identity_network_reduces_to_embedding_loss() {
        let mut rng = Rng::new(4);
        let x1 = rng.normal_matrix(3, 5);
        let x2 = rng.normal_matrix(3, 5);
        let id = |d| Layer::new(Matrix::identity(d), vec![0.0; d], Activation::Identity).unwrap();
        let batch = AugPairBatch::new(x1.clone(), x2.clone(), (0..5).collect()).unwrap();
        for kind in [SslKind::NtXent { temperature: 0.5 }, SslKind::Barlow { off_diag_weight: 5e-3 }] {
            let out = ssl_loss(kind, &[id(3)], &[id(3)], &batch).unwrap();
            let (direct, _, _) = kind.embedding_loss(&x1, &x2).unwrap();
            assert_eq!(out.loss, direct);
        }
    }

    #[test]
    fn duplicate_ancestors_rejected() {
        let m = Matrix::zeros(2, 3);
        assert!(AugPairBatch::new(m.clone(), m, vec![1, 2, 1]).is_err());
    }
}
