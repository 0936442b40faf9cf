//! Bi-level fine-tuning that undoes late-layer memorization.
//!
//! With `ψ = (θ, φ)` the late-layer and head parameters and `Z_e` the frozen
//! early-layer features of a batch:
//!
//! ```text
//! inner:  ψ* = ψ - λ ∇_ψ [ L_ssl(ψ) + β JS(p(Z_e) ‖ p(Z_last(θ))) ]
//! outer:  θ ← θ - γ ∇_θ [ L_ssl(ψ*) - α ΔR(Z_last(θ*), Π) ]
//! ```
//!
//! The outer gradient is taken through the inner update (`unrolled`, with
//! Hessian-vector products by central differences of inner gradients) or
//! with `∂ψ*/∂ψ = I` (`first_order`). The membership `Π` is rebuilt from the
//! features at `ψ*` and treated as a constant. The head takes its inner-step
//! value and is not moved by the outer step. Early layers are never written.

use std::time::Instant;

use crate::coding_rate::{
    build_ssl_membership, coding_rate_reduction, grad_coding_rate_reduction, FeatureBatch, Membership, RateMode,
    Stabilization,
};
use crate::cpa::{grad_js_wrt_segment, BatchDensity};
use crate::error::{Error, Result};
use crate::linalg::{format_g17, Matrix};
use crate::mlp::{apply_gradient, assign_params, backprop, flatten_params, output, param_count, Layer, Mlp, ParamGrad};
use crate::monitor::delta_r;
use crate::rng::Rng;
use crate::scm::{ScmDataset, ScmSpec};
use crate::ssl::{normalize_backward, ssl_loss, AugPairBatch, SslKind};
use crate::train::{epoch_batches, streams, DataSplit};

/// Largest `inner_steps` accepted in unrolled mode.
pub const MAX_UNROLLED_STEPS: usize = 3;
/// Relative finite-difference step of the Hessian-vector products.
pub const HVP_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradMode {
    #[default]
    Unrolled,
    FirstOrder,
}

impl std::str::FromStr for GradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unrolled" => Ok(GradMode::Unrolled),
            "first_order" => Ok(GradMode::FirstOrder),
            other => Err(Error::ModeUnsupported(format!("grad mode {other:?}"))),
        }
    }
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Unrolled => "unrolled",
            GradMode::FirstOrder => "first_order",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UmmConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub inner_steps: usize,
    pub grad_mode: GradMode,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub kind: SslKind,
}

impl Default for UmmConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            eps: 1.0,
            lambda: 1e-3,
            gamma: 1e-3,
            inner_steps: 1,
            grad_mode: GradMode::Unrolled,
            epochs: 200,
            batch_pairs: 256,
            kind: SslKind::NtXent {
                temperature: crate::ssl::DEFAULT_TEMPERATURE,
            },
        }
    }
}

impl UmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0");
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidEpsilon(self.eps));
        }
        if !(self.lambda >= 0.0) || !(self.gamma > 0.0) {
            return bad("lambda must be >= 0 and gamma > 0");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1");
        }
        if self.grad_mode == GradMode::Unrolled && self.inner_steps > MAX_UNROLLED_STEPS {
            return Err(Error::ModeUnsupported(format!(
                "unrolled differentiation through {} inner steps (max {MAX_UNROLLED_STEPS})",
                self.inner_steps
            )));
        }
        Ok(())
    }
}

/// Value and gradient of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Eval {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Result of [`hypergradient`].
#[derive(Clone, Debug, PartialEq)]
pub struct BilevelStep {
    pub psi_star: Vec<f64>,
    /// Inner objective at the starting point.
    pub inner_value: f64,
    /// Outer objective at `ψ*`.
    pub outer_value: f64,
    /// `d outer(ψ*(ψ)) / dψ`.
    pub grad: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} (entry {i} = {})", v[i]))),
        None => Ok(()),
    }
}

/// `H(ψ) v` by central differences of the inner gradient.
pub fn hessian_vector<G>(inner: &mut G, psi: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Eval>,
{
    let nv = norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let r = HVP_STEP * norm(psi).max(1.0) / nv;
    let shifted = |s: f64| -> Vec<f64> { psi.iter().zip(v).map(|(p, d)| p + s * r * d).collect() };
    let gp = inner(&shifted(1.0))?.grad;
    let gm = inner(&shifted(-1.0))?.grad;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * r)).collect())
}

/// Runs `steps` inner gradient steps from `psi` and returns the gradient of
/// the outer objective at the result with respect to `psi`.
pub fn hypergradient<G, O>(
    psi: &[f64],
    lambda: f64,
    steps: usize,
    mode: GradMode,
    mut inner: G,
    outer: O,
) -> Result<BilevelStep>
where
    G: FnMut(&[f64]) -> Result<Eval>,
    O: FnOnce(&[f64]) -> Result<Eval>,
{
    if steps == 0 {
        return Err(Error::InvalidConfig("inner_steps must be >= 1".into()));
    }
    if mode == GradMode::Unrolled && steps > MAX_UNROLLED_STEPS {
        return Err(Error::ModeUnsupported(format!(
            "unrolled differentiation through {steps} inner steps (max {MAX_UNROLLED_STEPS})"
        )));
    }
    let mut trajectory = Vec::with_capacity(steps);
    let mut cur = psi.to_vec();
    let mut inner_value = f64::NAN;
    for t in 0..steps {
        let e = inner(&cur)?;
        ensure_finite(&e.grad, "inner gradient")?;
        if t == 0 {
            inner_value = e.value;
        }
        let next: Vec<f64> = cur.iter().zip(&e.grad).map(|(p, g)| p - lambda * g).collect();
        ensure_finite(&next, "inner update")?;
        trajectory.push(std::mem::replace(&mut cur, next));
    }
    let out = outer(&cur)?;
    ensure_finite(&out.grad, "outer gradient")?;
    let mut v = out.grad;
    if mode == GradMode::Unrolled && lambda != 0.0 {
        for point in trajectory.iter().rev() {
            let hv = hessian_vector(&mut inner, point, &v)?;
            v.iter_mut().zip(&hv).for_each(|(a, h)| *a -= lambda * h);
        }
        ensure_finite(&v, "unrolled gradient")?;
    }
    Ok(BilevelStep {
        psi_star: cur,
        inner_value,
        outer_value: out.value,
        grad: v,
    })
}

/// The objectives of one UMM step, over flattened `ψ = (θ, φ)`.
pub struct UmmProblem<'a> {
    late: Vec<Layer>,
    head: Vec<Layer>,
    n_late: usize,
    /// Early-layer features of both views.
    ze: AugPairBatch,
    ze_stacked: Matrix,
    p_early: BatchDensity,
    cfg: &'a UmmConfig,
}

/// Outer objective parts at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterParts {
    pub ssl: f64,
    pub delta_r: f64,
    pub membership: Membership,
}

impl<'a> UmmProblem<'a> {
    pub fn new(late: &[Layer], head: &[Layer], ze: AugPairBatch, cfg: &'a UmmConfig) -> Self {
        let ze_stacked = ze.stacked();
        let p_early = BatchDensity::uniform(ze_stacked.cols());
        Self {
            late: late.to_vec(),
            head: head.to_vec(),
            n_late: param_count(late),
            ze,
            ze_stacked,
            p_early,
            cfg,
        }
    }

    pub fn psi(&self) -> Vec<f64> {
        let mut v = flatten_params(&self.late);
        v.extend(flatten_params(&self.head));
        v
    }

    pub fn theta_len(&self) -> usize {
        self.n_late
    }

    /// `(late, head)` at `psi`.
    pub fn unflatten(&self, psi: &[f64]) -> Result<(Vec<Layer>, Vec<Layer>)> {
        let mut late = self.late.clone();
        let mut head = self.head.clone();
        assign_params(&mut late, &psi[..self.n_late])?;
        assign_params(&mut head, &psi[self.n_late..])?;
        Ok((late, head))
    }

    fn join(net: &ParamGrad, head: &ParamGrad) -> Vec<f64> {
        let mut v = net.flatten();
        v.extend(head.flatten());
        v
    }

    /// `L_ssl + β JS` and its gradient; the second value is the JS term alone.
    pub fn inner_eval(&self, psi: &[f64]) -> Result<(Eval, f64)> {
        let (late, head) = self.unflatten(psi)?;
        let ssl = ssl_loss(self.cfg.kind, &late, &head, &self.ze)?;
        let mut g_late = ssl.net;
        let mut js = 0.0;
        if self.cfg.beta != 0.0 {
            let (value, g) = grad_js_wrt_segment(&late, &self.ze_stacked, &self.p_early)?;
            g_late.add_scaled(self.cfg.beta, &g);
            js = value;
        }
        Ok((
            Eval {
                value: ssl.loss + self.cfg.beta * js,
                grad: Self::join(&g_late, &ssl.head),
            },
            js,
        ))
    }

    /// Normalized last-layer features at `late`.
    fn last_features(&self, late: &[Layer]) -> Result<(Matrix, Matrix, Vec<f64>)> {
        let y = output(late, &self.ze_stacked)?;
        let (z, norms) = y.normalize_columns()?;
        Ok((y, z, norms))
    }

    /// Membership built from the last-layer features at `psi`.
    pub fn membership_at(&self, psi: &[f64]) -> Result<Membership> {
        let (late, _) = self.unflatten(psi)?;
        let (_, z, _) = self.last_features(&late)?;
        build_ssl_membership(&FeatureBatch::from_normalized(z)?, Stabilization::Softmax)
    }

    /// `L_ssl(ψ) - α ΔR` with the membership either given or rebuilt at `psi`.
    pub fn outer_eval(&self, psi: &[f64], frozen: Option<&Membership>) -> Result<(Eval, OuterParts)> {
        let (late, head) = self.unflatten(psi)?;
        let ssl = ssl_loss(self.cfg.kind, &late, &head, &self.ze)?;
        let (_, z, norms) = self.last_features(&late)?;
        let zb = FeatureBatch::from_normalized(z)?;
        let membership = match frozen {
            Some(m) => m.clone(),
            None => build_ssl_membership(&zb, Stabilization::Softmax)?,
        };
        let dr = coding_rate_reduction(&zb, &membership, self.cfg.eps, RateMode::Exact)?;
        let mut g_late = ssl.net;
        if self.cfg.alpha != 0.0 {
            let gz = grad_coding_rate_reduction(&zb, &membership, self.cfg.eps)?;
            let gy = normalize_backward(zb.z(), &norms, &gz).scale(-self.cfg.alpha);
            let (g, _) = backprop(&late, &self.ze_stacked, &gy)?;
            g_late.add_scaled(1.0, &g);
        }
        Ok((
            Eval {
                value: ssl.loss - self.cfg.alpha * dr,
                grad: Self::join(&g_late, &ssl.head),
            },
            OuterParts {
                ssl: ssl.loss,
                delta_r: dr,
                membership,
            },
        ))
    }

    /// One bi-level step: the hypergradient plus the inner JS value.
    pub fn step(&self, psi: &[f64]) -> Result<(BilevelStep, f64)> {
        let mut js = f64::NAN;
        let inner = |p: &[f64]| -> Result<Eval> {
            let (e, j) = self.inner_eval(p)?;
            if js.is_nan() {
                js = j;
            }
            Ok(e)
        };
        let outer = |p: &[f64]| -> Result<Eval> { Ok(self.outer_eval(p, None)?.0) };
        let step = hypergradient(psi, self.cfg.lambda, self.cfg.inner_steps, self.cfg.grad_mode, inner, outer)?;
        Ok((step, js))
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct UmmLogRow {
    pub epoch: usize,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub delta_r_last: f64,
    pub delta_r_early: f64,
    pub js_value: f64,
}

pub const METRIC_HEADER: &str = "epoch,inner_loss,outer_loss,delta_r_last,delta_r_early,js_value";

impl UmmLogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            format_g17(self.inner_loss),
            format_g17(self.outer_loss),
            format_g17(self.delta_r_last),
            format_g17(self.delta_r_early),
            format_g17(self.js_value)
        )
    }
}

/// Metric CSV without wall-clock fields.
pub fn metrics_csv(rows: &[UmmLogRow]) -> String {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// `epoch,wall_ms` lines, kept apart from the deterministic metrics.
pub fn timings_csv(timings: &[(usize, f64)]) -> String {
    let mut s = String::from("epoch,wall_ms\n");
    for (e, ms) in timings {
        s.push_str(&format!("{e},{ms:.3}\n"));
    }
    s
}

#[derive(Clone, Debug)]
pub struct UmmOutput {
    pub net: Mlp,
    pub head: Vec<Layer>,
    pub log: Vec<UmmLogRow>,
    pub timings: Vec<(usize, f64)>,
}

/// Which update rule [`finetune`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Umm,
    /// Plain SSL gradient steps on the late layers at rate `γ`, head fixed.
    Baseline,
}

/// Fine-tunes the late layers of `net` for `cfg.epochs` epochs. Epoch `0`
/// returns the inputs unchanged. Each epoch is logged with the mean inner and
/// outer losses over its batches and ΔR on the monitoring batch.
pub fn finetune(
    net: &Mlp,
    head: &[Layer],
    spec: &ScmSpec,
    ds: &ScmDataset,
    split: &DataSplit,
    cfg: &UmmConfig,
    variant: Variant,
    seed: u64,
) -> Result<UmmOutput> {
    cfg.validate()?;
    let mut net = net.clone();
    let mut head = head.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut timings = Vec::with_capacity(cfg.epochs);
    let mut rng = Rng::new(seed).fork(streams::UMM);
    let split_at = net.split_index();
    // f_e is frozen, so its ΔR is computed once
    let monitor = split.monitor_batch.stacked();
    let dr_early = delta_r(&output(net.early(), &monitor)?, cfg.eps)?;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut inner_sum, mut outer_sum, mut js_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch_idx in epoch_batches(&split.train, cfg.batch_pairs, &mut rng) {
            let batch = spec.augment_indices(ds, &batch_idx, &mut rng)?;
            let early = net.early();
            let ze = AugPairBatch::new(
                output(early, &batch.view1)?,
                output(early, &batch.view2)?,
                batch.ancestors.clone(),
            )?;
            match variant {
                Variant::Umm => {
                    let problem = UmmProblem::new(net.late(), &head, ze, cfg);
                    let (step, js) = problem.step(&problem.psi())?;
                    let (_, new_head) = problem.unflatten(&step.psi_star)?;
                    let theta_grad = ParamGrad::from_flat(net.late(), &step.grad[..problem.theta_len()])?;
                    apply_gradient(&mut net.layers_mut()[split_at..], &theta_grad, cfg.gamma);
                    head = new_head;
                    inner_sum += step.inner_value;
                    outer_sum += step.outer_value;
                    js_sum += js;
                }
                Variant::Baseline => {
                    let out = ssl_loss(cfg.kind, net.late(), &head, &ze)?;
                    if !out.net.is_finite() {
                        return Err(Error::NonFinite(format!("baseline gradient at epoch {epoch}")));
                    }
                    apply_gradient(&mut net.layers_mut()[split_at..], &out.net, cfg.gamma);
                    inner_sum += out.loss;
                    outer_sum += out.loss;
                }
            }
            count += 1;
            if !crate::mlp::params_finite(net.late()) {
                return Err(Error::NonFinite(format!("late-layer parameters at epoch {epoch}")));
            }
        }
        let dr_last = delta_r(&output(net.layers(), &monitor)?, cfg.eps)?;
        let c = count.max(1) as f64;
        log.push(UmmLogRow {
            epoch,
            inner_loss: inner_sum / c,
            outer_loss: outer_sum / c,
            delta_r_last: dr_last,
            delta_r_early: dr_early,
            js_value: js_sum / c,
        });
        timings.push((epoch, start.elapsed().as_secs_f64() * 1e3));
    }
    Ok(UmmOutput {
        net,
        head,
        log,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_inner(a: [[f64; 2]; 2], b: [f64; 2]) -> impl FnMut(&[f64]) -> Result<Eval> {
        move |p: &[f64]| {
            let g = vec![a[0][0] * p[0] + a[0][1] * p[1] - b[0], a[1][0] * p[0] + a[1][1] * p[1] - b[1]];
            let v = 0.5 * (p[0] * (a[0][0] * p[0] + a[0][1] * p[1]) + p[1] * (a[1][0] * p[0] + a[1][1] * p[1]))
                - b[0] * p[0]
                - b[1] * p[1];
            Ok(Eval { value: v, grad: g })
        }
    }

    #[test]
    fn null_inner_step() {
        let inner = quad_inner([[2.0, 0.5], [0.5, 1.0]], [1.0, -1.0]);
        let outer = |p: &[f64]| Ok(Eval { value: 0.0, grad: p.to_vec() });
        let s = hypergradient(&[0.3, 0.7], 0.0, 1, GradMode::Unrolled, inner, outer).unwrap();
        assert_eq!(s.psi_star, vec![0.3, 0.7]);
        assert_eq!(s.grad, vec![0.3, 0.7]);
    }

    #[test]
    fn unrolled_step_guard() {
        let inner = quad_inner([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]);
        let outer = |p: &[f64]| Ok(Eval { value: 0.0, grad: p.to_vec() });
        assert!(matches!(
            hypergradient(&[0.0, 0.0], 0.1, 4, GradMode::Unrolled, inner, outer),
            Err(Error::ModeUnsupported(_))
        ));
        let cfg = UmmConfig {
            inner_steps: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::ModeUnsupported(_))));
        let cfg = UmmConfig {
            inner_steps: 4,
            grad_mode: GradMode::FirstOrder,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn nonfinite_aborts() {
        let inner = |p: &[f64]| Ok(Eval { value: 0.0, grad: vec![f64::NAN; p.len()] });
        let outer = |p: &[f64]| Ok(Eval { value: 0.0, grad: p.to_vec() });
        assert!(matches!(
            hypergradient(&[1.0], 0.1, 1, GradMode::FirstOrder, inner, outer),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn metric_csv_format() {
        let rows = [UmmLogRow {
            epoch: 1,
            inner_loss: 0.5,
            outer_loss: -1.25,
            delta_r_last: 2.0,
            delta_r_early: 3.0,
            js_value: 0.0,
        }];
        assert_eq!(metrics_csv(&rows), format!("{METRIC_HEADER}\n1,0.5,-1.25,2,3,0\n"));
    }
}
