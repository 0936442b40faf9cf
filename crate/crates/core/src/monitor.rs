//! Overfitting monitor and evaluation harness: ΔR series per layer, linear
//! probe, leave-one-out k-NN, Pearson correlation, peak/decline detection and
//! evaluation timing.

use std::time::Instant;

use serde::Serialize;

use crate::coding_rate::{build_ssl_membership, coding_rate_reduction, FeatureBatch, RateMode, Stabilization};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, cholesky_with_jitter, format_g17, Matrix};
use crate::mlp::Mlp;
use crate::rng::Rng;
use crate::ssl::AugPairBatch;

pub const DEFAULT_MARGIN: f64 = 0.05;
pub const DEFAULT_PATIENCE: usize = 3;
pub const DEFAULT_EVERY_K: usize = 5;
pub const MONITOR_PAIRS: usize = 256;

const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.1;
const PROBE_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Early,
    Last,
}

impl LayerTag {
    pub fn name(self) -> &'static str {
        match self {
            LayerTag::Early => "early",
            LayerTag::Last => "last",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSeries {
    pub epochs: Vec<usize>,
    pub values: Vec<f64>,
    pub layer: LayerTag,
    pub normalized: bool,
}

impl MetricSeries {
    pub fn new(epochs: Vec<usize>, values: Vec<f64>, layer: LayerTag) -> Result<Self> {
        if epochs.len() != values.len() {
            return Err(Error::LengthMismatch(epochs.len(), values.len()));
        }
        if epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("series epochs must be strictly increasing".into()));
        }
        Ok(Self {
            epochs,
            values,
            layer,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, epoch: usize, value: f64) -> Result<()> {
        if self.epochs.last().is_some_and(|&e| e >= epoch) {
            return Err(Error::InvalidConfig(format!("epoch {epoch} is not after the last record")));
        }
        self.epochs.push(epoch);
        self.values.push(value);
        Ok(())
    }

    /// Divides by the maximum over the whole series (post hoc).
    pub fn normalized_by_max(&self) -> Result<MetricSeries> {
        let max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            return Err(Error::InvalidConfig("series maximum must be positive to normalize".into()));
        }
        Ok(MetricSeries {
            values: self.values.iter().map(|v| v / max).collect(),
            normalized: true,
            ..self.clone()
        })
    }

    /// Divides each value by the running maximum up to that record (what a
    /// live monitor can compute).
    pub fn running_normalized(&self) -> Vec<f64> {
        let mut max = f64::NEG_INFINITY;
        self.values
            .iter()
            .map(|&v| {
                max = max.max(v);
                if max > 0.0 {
                    v / max
                } else {
                    f64::NAN
                }
            })
            .collect()
    }
}

/// Exact-mode ΔR of unit-normalized feature columns under the anchored
/// softmax membership.
pub fn delta_r(features: &Matrix, eps: f64) -> Result<f64> {
    let zb = FeatureBatch::unit(features)?;
    let pi = build_ssl_membership(&zb, Stabilization::Softmax)?;
    coding_rate_reduction(&zb, &pi, eps, RateMode::Exact)
}

/// `(ΔR early, ΔR last)` on the stacked views of a monitoring batch.
pub fn layer_delta_r(net: &Mlp, batch: &AugPairBatch, eps: f64) -> Result<(f64, f64)> {
    let (early, last) = net.early_and_last(&batch.stacked())?;
    Ok((delta_r(&early, eps)?, delta_r(&last, eps)?))
}

/// One monitor record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackRecord {
    pub epoch: usize,
    pub delta_r_early: f64,
    pub delta_r_last: f64,
    pub probe_early: f64,
    pub probe_last: f64,
    pub knn_early: f64,
    pub knn_last: f64,
}

/// Fixed inputs of a monitoring run.
#[derive(Clone, Debug)]
pub struct MonitorSetup<'a> {
    pub batch: &'a AugPairBatch,
    /// Clean features (`d_x x n`) and labels for the probes.
    pub x: &'a Matrix,
    pub labels: &'a [usize],
    pub eps: f64,
    pub probe_seed: u64,
    pub with_knn: bool,
}

/// Evaluates one checkpoint.
pub fn evaluate_checkpoint(net: &Mlp, epoch: usize, setup: &MonitorSetup) -> Result<TrackRecord> {
    let (dr_early, dr_last) = layer_delta_r(net, setup.batch, setup.eps)?;
    let (fe, fl) = net.early_and_last(setup.x)?;
    let probe_early = linear_probe(&fe, setup.labels, setup.probe_seed)?.accuracy;
    let probe_last = linear_probe(&fl, setup.labels, setup.probe_seed)?.accuracy;
    let (knn_early, knn_last) = if setup.with_knn {
        (knn_eval(&fe, setup.labels, 5)?.accuracy, knn_eval(&fl, setup.labels, 5)?.accuracy)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(TrackRecord {
        epoch,
        delta_r_early: dr_early,
        delta_r_last: dr_last,
        probe_early,
        probe_last,
        knn_early,
        knn_last,
    })
}

/// Epochs at which a run of `epochs` epochs is recorded: multiples of
/// `every_k` in `1..=epochs`, plus the terminal epoch (epoch 0 when there is
/// no training at all).
pub fn record_epochs(epochs: usize, every_k: usize) -> Vec<usize> {
    if epochs == 0 {
        return vec![0];
    }
    let k = every_k.max(1);
    let mut out: Vec<usize> = (1..=epochs).filter(|e| e % k == 0).collect();
    if out.last() != Some(&epochs) {
        out.push(epochs);
    }
    out
}

/// Per-layer ΔR series from records.
pub fn series_from(records: &[TrackRecord]) -> Result<(MetricSeries, MetricSeries)> {
    let epochs: Vec<usize> = records.iter().map(|r| r.epoch).collect();
    Ok((
        MetricSeries::new(epochs.clone(), records.iter().map(|r| r.delta_r_early).collect(), LayerTag::Early)?,
        MetricSeries::new(epochs, records.iter().map(|r| r.delta_r_last).collect(), LayerTag::Last)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Knn5,
    Crr,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Knn5 => "knn5",
            ProbeKind::Crr => "crr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub accuracy: f64,
    pub wall_ms: f64,
}

fn class_count(labels: &[usize]) -> Result<usize> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateLabels);
    }
    Ok(k)
}

/// Stratified split: per class, a seeded shuffle puts `round(0.2 * count)`
/// samples (at least one when the class has two or more) into the test set.
pub fn stratified_split(labels: &[usize], k: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let mut n_test = (idx.len() as f64 * PROBE_TEST_FRACTION).round() as usize;
        if n_test == 0 && idx.len() >= 2 {
            n_test = 1;
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Rows standardized to zero mean and unit population deviation (constant
/// rows are only centered). Returns the matrix, means and deviations.
fn standardized(x: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = x.clone();
    let (mut mean, mut sd) = (Vec::with_capacity(x.rows()), Vec::with_capacity(x.rows()));
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().sum::<f64>() / n;
        let mut s = (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        if s < 1e-12 {
            s = 1.0;
        }
        row.iter_mut().for_each(|v| *v = (*v - m) / s);
        mean.push(m);
        sd.push(s);
    }
    (out, mean, sd)
}

/// Multinomial logistic regression on frozen features (`d x n`), trained by
/// full-batch gradient descent on a stratified 80% split and scored on the
/// remaining 20%. The step size halves whenever the loss fails to decrease.
pub fn linear_probe(features: &Matrix, labels: &[usize], seed: u64) -> Result<ProbeResult> {
    let start = Instant::now();
    if labels.len() != features.cols() {
        return Err(Error::LengthMismatch(features.cols(), labels.len()));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("probe features".into()));
    }
    let k = class_count(labels)?;
    let d = features.rows();
    let (train, test) = stratified_split(labels, k, seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::TooFewSamples("probe split is empty".into()));
    }

    // standardize with train statistics
    let (xtr, mean, sd) = standardized(&features.select_columns(&train));
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let ntr = train.len();

    // W: k x d plus bias; logits and gradients as whole-matrix products
    let mut w = Matrix::zeros(k, d);
    let mut bias = vec![0.0; k];
    let mut lr = PROBE_LR;
    let loss_and_grad = |w: &Matrix, bias: &[f64]| -> Result<(f64, Matrix, Vec<f64>)> {
        // row-wise passes over classes keep every loop contiguous
        let mut p = w.matmul(&xtr)?;
        let mut max = vec![f64::NEG_INFINITY; ntr];
        for (c, &b) in bias.iter().enumerate() {
            for (m, v) in max.iter_mut().zip(p.row_mut(c)) {
                *v += b;
                *m = m.max(*v);
            }
        }
        let mut z = vec![0.0; ntr];
        for c in 0..k {
            for ((s, v), m) in z.iter_mut().zip(p.row_mut(c)).zip(&max) {
                *v = (*v - m).exp();
                *s += *v;
            }
        }
        let mut loss = 0.0;
        for (i, &y) in ytr.iter().enumerate() {
            loss -= (p[(y, i)] / z[i]).ln();
        }
        for c in 0..k {
            p.row_mut(c).iter_mut().zip(&z).for_each(|(v, s)| *v /= s);
        }
        for (i, &y) in ytr.iter().enumerate() {
            p[(y, i)] -= 1.0;
        }
        let scale = 1.0 / ntr as f64;
        let gw = p.matmul_nt(&xtr)?.scale(scale);
        let gb = (0..k).map(|c| p.row(c).iter().sum::<f64>() * scale).collect();
        Ok((loss * scale, gw, gb))
    };
    let (mut prev, mut gw, mut gb) = loss_and_grad(&w, &bias)?;
    for _ in 0..PROBE_ITERS {
        let mut tw = w.clone();
        tw.axpy(-lr, &gw);
        let tb: Vec<f64> = bias.iter().zip(&gb).map(|(b, g)| b - lr * g).collect();
        let (loss, tgw, tgb) = loss_and_grad(&tw, &tb)?;
        if loss < prev {
            (w, bias, gw, gb, prev) = (tw, tb, tgw, tgb, loss);
        } else {
            lr *= 0.5;
        }
    }

    let mut xte = features.select_columns(&test);
    for r in 0..d {
        xte.row_mut(r).iter_mut().for_each(|v| *v = (*v - mean[r]) / sd[r]);
    }
    let scores = w.matmul(&xte)?;
    let mut correct = 0usize;
    for (i, &t) in test.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..k {
            let l = scores[(c, i)] + bias[c];
            if l > best.0 {
                best = (l, c);
            }
        }
        correct += usize::from(best.1 == labels[t]);
    }
    Ok(ProbeResult {
        kind: ProbeKind::Linear,
        accuracy: correct as f64 / test.len() as f64,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Leave-one-out k-NN majority vote under cosine distance. Vote ties go to
/// the class with the smallest summed distance, then the smallest label.
pub fn knn_eval(features: &Matrix, labels: &[usize], k: usize) -> Result<ProbeResult> {
    let start = Instant::now();
    let n = features.cols();
    if labels.len() != n {
        return Err(Error::LengthMismatch(n, labels.len()));
    }
    if n <= k || k == 0 {
        return Err(Error::TooFewSamples(format!("k-NN with k = {k} needs n > k, got {n}")));
    }
    let (unit, _) = features.normalize_columns()?;
    let gram = unit.matmul_tn(&unit)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut correct = 0usize;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (1.0 - gram[(i, j)], j)));
        cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); n_classes];
        for &(dist, j) in &cand[..k] {
            votes[labels[j]].0 += 1;
            votes[labels[j]].1 += dist;
        }
        let mut best = 0;
        for c in 1..n_classes {
            let (v, s) = votes[c];
            let (bv, bs) = votes[best];
            if v > bv || (v == bv && v > 0 && s < bs) {
                best = c;
            }
        }
        correct += usize::from(best == labels[i]);
    }
    Ok(ProbeResult {
        kind: ProbeKind::Knn5,
        accuracy: correct as f64 / n as f64,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(Error::SeriesTooShort { need: 3, got: a.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson_series(a: &MetricSeries, b: &MetricSeries) -> Result<f64> {
    pearson(&a.values, &b.values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OverfitVerdict {
    /// Record index of the (first) maximum.
    pub peak_index: usize,
    pub overfit: bool,
}

/// Flags overfitting when, after the peak, the series stays below
/// `(1 - margin) * peak` for at least `patience` consecutive records.
pub fn detect_overfit(values: &[f64], patience: usize, margin: f64) -> Result<OverfitVerdict> {
    if values.len() < patience + 1 {
        return Err(Error::SeriesTooShort {
            need: patience + 1,
            got: values.len(),
        });
    }
    let mut peak_index = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[peak_index] {
            peak_index = i;
        }
    }
    let threshold = (1.0 - margin) * values[peak_index];
    let (mut run, mut longest) = (0, 0);
    for &v in &values[peak_index + 1..] {
        run = if v < threshold { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    Ok(OverfitVerdict {
        peak_index,
        overfit: patience > 0 && longest >= patience,
    })
}

/// Wall-clock comparison of the three evaluations of one network: the probes
/// on the last-layer features of `x`, CRR on the last-layer features of the
/// monitoring batch (the evaluation the monitor performs). CRR never sees
/// labels; its `accuracy` field carries the ΔR value.
pub fn timing_report(
    net: &Mlp,
    x: &Matrix,
    labels: &[usize],
    batch: &AugPairBatch,
    eps: f64,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    let (_, last) = net.early_and_last(x)?;
    let (_, batch_last) = net.early_and_last(&batch.stacked())?;
    let linear = linear_probe(&last, labels, seed)?;
    let knn = knn_eval(&last, labels, 5)?;
    let crr = time_crr(&batch_last, eps)?;
    Ok(vec![linear, knn, crr])
}

pub fn time_crr(features: &Matrix, eps: f64) -> Result<ProbeResult> {
    let start = Instant::now();
    let value = delta_r(features, eps)?;
    Ok(ProbeResult {
        kind: ProbeKind::Crr,
        accuracy: value,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// In-sample R² of an ordinary least-squares fit (with intercept) of each
/// target row on the feature rows, pooled over targets:
/// `1 - Σ SS_res / Σ SS_tot`.
pub fn linear_r2(features: &Matrix, targets: &Matrix) -> Result<f64> {
    let n = features.cols();
    if targets.cols() != n {
        return Err(Error::LengthMismatch(n, targets.cols()));
    }
    let ones = Matrix::from_fn(1, n, |_, _| 1.0);
    let design = features.vcat(&ones)?;
    let l = cholesky_with_jitter(&design.gram_rows())?;
    let (mut res, mut tot) = (0.0, 0.0);
    for t in 0..targets.rows() {
        let y = targets.row(t);
        let coef = cholesky_solve(&l, &design.matvec(y)?)?;
        let fit = design.matvec_t(&coef)?;
        let mean = y.iter().sum::<f64>() / n as f64;
        for (yv, fv) in y.iter().zip(&fit) {
            res += (yv - fv) * (yv - fv);
            tot += (yv - mean) * (yv - mean);
        }
    }
    if tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(1.0 - res / tot)
}

pub const CURVE_HEADER: &str = "epoch,layer,delta_r_raw,delta_r_normalized,probe_acc,knn_acc";

fn csv_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format_g17(v)
    }
}

/// Plot-ready curve CSV, two rows (early, last) per record. The normalized
/// column divides by the maximum over the whole run; an empty `knn_acc` means
/// k-NN was not evaluated.
pub fn curve_csv(records: &[TrackRecord]) -> String {
    let max = |f: fn(&TrackRecord) -> f64| records.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let (max_e, max_l) = (max(|r| r.delta_r_early), max(|r| r.delta_r_last));
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in records {
        for (tag, dr, norm, probe, knn) in [
            (LayerTag::Early, r.delta_r_early, max_e, r.probe_early, r.knn_early),
            (LayerTag::Last, r.delta_r_last, max_l, r.probe_last, r.knn_last),
        ] {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                tag.name(),
                format_g17(dr),
                format_g17(dr / norm),
                format_g17(probe),
                csv_float(knn)
            ));
        }
    }
    s
}

/// Inverse of [`curve_csv`] (the normalized column is recomputable and
/// ignored).
pub fn parse_curve_csv(text: &str, origin: &str) -> Result<Vec<TrackRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                location: format!("{origin}:1"),
                reason: format!("expected header {CURVE_HEADER:?}"),
            })
        }
    }
    let mut records: Vec<TrackRecord> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{origin}:{}", i + 1);
        let bad = |reason: String| Error::Parse {
            location: location.clone(),
            reason,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", f.len())));
        }
        let num = |v: &str| -> Result<f64> {
            if v.is_empty() {
                Ok(f64::NAN)
            } else {
                v.parse().map_err(|_| bad(format!("bad number {v:?}")))
            }
        };
        let epoch: usize = f[0].parse().map_err(|_| bad(format!("bad epoch {:?}", f[0])))?;
        let (dr, probe, knn) = (num(f[2])?, num(f[4])?, num(f[5])?);
        match f[1] {
            "early" => records.push(TrackRecord {
                epoch,
                delta_r_early: dr,
                delta_r_last: f64::NAN,
                probe_early: probe,
                probe_last: f64::NAN,
                knn_early: knn,
                knn_last: f64::NAN,
            }),
            "last" => {
                let r = records
                    .last_mut()
                    .filter(|r| r.epoch == epoch && r.delta_r_last.is_nan())
                    .ok_or_else(|| bad("`last` row without a preceding `early` row".into()))?;
                r.delta_r_last = dr;
                r.probe_last = probe;
                r.knn_last = knn;
            }
            other => return Err(bad(format!("unknown layer {other:?}"))),
        }
    }
    if records.iter().any(|r| r.delta_r_last.is_nan()) {
        return Err(Error::Parse {
            location: origin.to_string(),
            reason: "record without a `last` row".into(),
        });
    }
    Ok(records)
}

/// JSON report over a monitored run: per-layer series (raw, normalized by
/// the run maximum and by the running maximum), final-epoch probe results,
/// peak detection and probe/ΔR Pearson correlations. Analyses that need more
/// points than available are replaced by a `note`.
pub fn report_json(records: &[TrackRecord], patience: usize, margin: f64) -> Result<serde_json::Value> {
    use serde_json::{json, Value};
    if records.is_empty() {
        return Err(Error::SeriesTooShort { need: 1, got: 0 });
    }
    let (early, last) = series_from(records)?;
    let num = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
    let mut series = Vec::new();
    let mut peak = serde_json::Map::new();
    let mut corr = serde_json::Map::new();
    for (s, probe, knn) in [
        (&early, records.iter().map(|r| r.probe_early).collect::<Vec<_>>(), records.iter().map(|r| r.knn_early).collect::<Vec<_>>()),
        (&last, records.iter().map(|r| r.probe_last).collect(), records.iter().map(|r| r.knn_last).collect()),
    ] {
        let name = s.layer.name();
        series.push(json!({
            "layer": name,
            "epochs": s.epochs,
            "delta_r_raw": s.values,
            "delta_r_normalized": s.normalized_by_max()?.values,
            "delta_r_running_normalized": s.running_normalized(),
            "probe_acc": probe,
            "knn_acc": knn.iter().map(|&v| num(v)).collect::<Vec<_>>(),
        }));
        peak.insert(
            name.into(),
            match detect_overfit(&s.values, patience, margin) {
                Ok(v) => json!({
                    "peak_index": v.peak_index,
                    "peak_epoch": s.epochs[v.peak_index],
                    "peak_value": s.values[v.peak_index],
                    "final_value": s.values[s.len() - 1],
                    "final_over_peak": s.values[s.len() - 1] / s.values[v.peak_index],
                    "overfit": v.overfit,
                }),
                Err(e) => json!({ "note": format!("insufficient points: {e}") }),
            },
        );
        corr.insert(
            name.into(),
            match pearson(&probe, &s.values) {
                Ok(r) => json!({ "probe_vs_delta_r": r }),
                Err(Error::SeriesTooShort { need, got }) => {
                    json!({ "note": format!("insufficient points: pearson needs {need}, got {got}") })
                }
                Err(e) => json!({ "note": e.to_string() }),
            },
        );
    }
    let fin = &records[records.len() - 1];
    Ok(json!({
        "series": series,
        "probes": [
            { "epoch": fin.epoch, "layer": "early", "linear": fin.probe_early, "knn5": num(fin.knn_early) },
            { "epoch": fin.epoch, "layer": "last", "linear": fin.probe_last, "knn5": num(fin.knn_last) },
        ],
        "peak": { "patience": patience, "margin": margin, "layers": peak },
        "pearson": corr,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_rule_example() {
        let v = detect_overfit(&[1.0, 2.0, 3.0, 2.5, 2.4, 2.4], 3, 0.05).unwrap();
        assert_eq!(v, OverfitVerdict { peak_index: 2, overfit: true });
        let v = detect_overfit(&[1.0, 2.0, 3.0, 4.0], 3, 0.05).unwrap();
        assert_eq!(v, OverfitVerdict { peak_index: 3, overfit: false });
        assert!(!detect_overfit(&[2.0; 6], 3, 0.05).unwrap().overfit);
        assert!(matches!(
            detect_overfit(&[1.0, 2.0], 3, 0.05),
            Err(Error::SeriesTooShort { need: 4, got: 2 })
        ));
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.5, 3.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&a, &[1.0; 4]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn record_schedule() {
        assert_eq!(record_epochs(0, 5), vec![0]);
        assert_eq!(record_epochs(3, 5), vec![3]);
        assert_eq!(record_epochs(12, 5), vec![5, 10, 12]);
        assert_eq!(record_epochs(10, 5), vec![5, 10]);
    }

    #[test]
    fn separable_blobs() {
        let mut rng = Rng::new(1);
        let n = 100;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Matrix::from_fn(2, n, |r, c| {
            let centre = if labels[c] == 0 { -3.0 } else { 3.0 };
            if r == 0 {
                centre + 0.3 * rng.normal()
            } else {
                rng.normal()
            }
        });
        assert_eq!(linear_probe(&x, &labels, 4).unwrap().accuracy, 1.0);
    }

    #[test]
    fn duplicated_points_knn() {
        let labels: Vec<usize> = (0..18).map(|i| i / 6).collect();
        let x = Matrix::from_fn(3, 18, |r, c| if r == labels[c] { 1.0 } else { 0.1 });
        assert_eq!(knn_eval(&x, &labels, 5).unwrap().accuracy, 1.0);
        assert!(matches!(knn_eval(&x, &labels, 18), Err(Error::TooFewSamples(_))));
    }

    #[test]
    fn degenerate_labels() {
        let x = Matrix::zeros(2, 10);
        assert!(matches!(linear_probe(&x, &[1; 10], 0), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn normalization_keeps_argmax() {
        let s = MetricSeries::new(vec![5, 10, 15], vec![0.5, 2.0, 1.0], LayerTag::Last).unwrap();
        let n = s.normalized_by_max().unwrap();
        assert_eq!(n.values, vec![0.25, 1.0, 0.5]);
        assert_eq!(s.running_normalized(), vec![1.0, 1.0, 0.5]);
        assert!(MetricSeries::new(vec![5, 5], vec![1.0, 2.0], LayerTag::Early).is_err());
    }

    #[test]
    fn r2_of_exact_fit() {
        let mut rng = Rng::new(3);
        let f = rng.normal_matrix(3, 50);
        let t = Matrix::from_fn(1, 50, |_, j| 2.0 * f[(0, j)] - f[(2, j)] + 0.5);
        assert!((linear_r2(&f, &t).unwrap() - 1.0).abs() < 1e-10);
    }
}
