//! Command implementations behind the `umm` binary. Each command reads a
//! [`RunConfig`], writes its outputs plus `config.txt` (the resolved
//! configuration) into the `out` directory, and returns a one-line summary.
//!
//! Run layout written by `pretrain`:
//!
//! ```text
//! out/config.txt
//! out/curve.csv                  monitor curve, one row per (epoch, layer)
//! out/checkpoints/epoch_NNNNN.mlpc (+ .head when a projection head exists)
//! out/final.mlpc (+ final.head)
//! ```
//!
//! A checkpoint is addressed by its path prefix (`out/final`), so the
//! extractor and head travel together.

use std::path::{Path, PathBuf};

use crate::config::{Command, RunConfig};
use crate::error::{Error, Result};
use crate::mlp::{load_stack, save_stack, Activation, Layer, Mlp};
use crate::monitor::{
    curve_csv, evaluate_checkpoint, knn_eval, layer_delta_r, linear_probe, parse_curve_csv, report_json,
    timing_report, MonitorSetup, TrackRecord,
};
use crate::scm::{load_dataset, save_dataset, ScmDataset, ScmParams, ScmSpec};
use crate::ssl::SslKind;
use crate::train::{build_network, data_seed, pretrain, probe_seed, DataSplit, PretrainConfig};
use crate::umm::{finetune, metrics_csv, timings_csv, GradMode, UmmConfig, Variant};

/// Runs `cfg.command()`.
pub fn run(cfg: &RunConfig) -> Result<String> {
    match cfg.command() {
        Command::GenData => gen_data(cfg),
        Command::Pretrain => cmd_pretrain(cfg),
        Command::Monitor => monitor(cfg),
        Command::Umm => cmd_umm(cfg),
        Command::Eval => eval(cfg),
        Command::Report => report(cfg),
    }
}

fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.path("out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(out.join("config.txt"), cfg.to_text())?;
    Ok(out)
}

/// Generator parameters from a `gen-data` config.
pub fn scm_params(cfg: &RunConfig) -> Result<ScmParams> {
    Ok(ScmParams {
        d_r: cfg.get("d_r")?,
        d_ur: cfg.get("d_ur")?,
        d_x: cfg.get("d_x")?,
        k: cfg.get("k")?,
        sigma_a: cfg.get("sigma_a")?,
        dependence: cfg.get("dependence")?,
        ur_scale: cfg.get("ur_scale")?,
        r_gain: cfg.get("r_gain")?,
    })
}

pub fn ssl_kind(cfg: &RunConfig) -> Result<SslKind> {
    match cfg.raw("ssl")? {
        "ntxent" => Ok(SslKind::NtXent {
            temperature: cfg.get("temperature")?,
        }),
        "barlow" => Ok(SslKind::Barlow {
            off_diag_weight: cfg.get("off_diag_weight")?,
        }),
        other => Err(Error::Config {
            key: "ssl".into(),
            reason: format!("expected ntxent or barlow, got {other:?}"),
        }),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<String> {
    let seed: u64 = cfg.get("seed")?;
    let n: usize = cfg.get("n")?;
    let spec = ScmSpec::new(scm_params(cfg)?, seed)?;
    let ds = spec.generate(n, data_seed(seed))?;
    let out = prepare_out(cfg)?;
    save_dataset(&out, &spec, &ds, data_seed(seed))?;
    Ok(format!("wrote {n} samples (d_x = {}) to {}", spec.d_x(), out.display()))
}

struct Loaded {
    spec: ScmSpec,
    ds: ScmDataset,
    split: DataSplit,
    seed: u64,
    eps: f64,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let seed: u64 = cfg.get("seed")?;
    let (spec, ds, _) = load_dataset(cfg.path("data")?)?;
    let split = DataSplit::new(&spec, &ds, cfg.get("monitor_pairs")?, seed)?;
    Ok(Loaded {
        spec,
        ds,
        split,
        seed,
        eps: cfg.get("eps")?,
    })
}

impl Loaded {
    fn setup(&self, with_knn: bool) -> MonitorSetup<'_> {
        MonitorSetup {
            batch: &self.split.monitor_batch,
            x: &self.ds.x,
            labels: &self.ds.labels,
            eps: self.eps,
            probe_seed: probe_seed(self.seed),
            with_knn,
        }
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `prefix.mlpc` and, for a non-empty head, `prefix.head`.
pub fn save_checkpoint(prefix: &Path, net: &Mlp, head: &[Layer]) -> Result<()> {
    net.save(with_ext(prefix, "mlpc"))?;
    if !head.is_empty() {
        save_stack(with_ext(prefix, "head"), head, 0)?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; a missing head file
/// means no head.
pub fn load_checkpoint(prefix: &Path) -> Result<(Mlp, Vec<Layer>)> {
    let net = Mlp::load(with_ext(prefix, "mlpc"))?;
    let head_path = with_ext(prefix, "head");
    let head = if head_path.exists() {
        load_stack(head_path)?.0
    } else {
        Vec::new()
    };
    Ok((net, head))
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<String> {
    let data = load(cfg)?;
    let activation: Activation = cfg.get("activation")?;
    let (net, head) = build_network(
        data.ds.x.rows(),
        &cfg.list::<usize>("widths")?,
        activation,
        cfg.get("split_index")?,
        &cfg.list::<usize>("head_widths")?,
        data.seed,
    )?;
    let pcfg = PretrainConfig {
        kind: ssl_kind(cfg)?,
        epochs: cfg.get("epochs")?,
        lr: cfg.get("lr")?,
        batch_pairs: cfg.get("batch_pairs")?,
        every_k: cfg.get("every_k")?,
    };
    let out = prepare_out(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let result = pretrain(
        net,
        head,
        &data.spec,
        &data.ds,
        &data.split,
        &pcfg,
        &data.setup(cfg.get("knn")?),
        data.seed,
        |epoch, net, head| save_checkpoint(&ckpt_dir.join(format!("epoch_{epoch:05}")), net, head),
    )?;
    save_checkpoint(&out.join("final"), &result.net, &result.head)?;
    write(out.join("curve.csv"), curve_csv(&result.records))?;
    let fin = result.records.last().expect("at least one record");
    Ok(format!(
        "pretrained {} epochs; final ΔR early {:.6} last {:.6}, probe early {:.4} last {:.4}",
        pcfg.epochs, fin.delta_r_early, fin.delta_r_last, fin.probe_early, fin.probe_last
    ))
}

/// `(epoch, prefix)` of every `epoch_NNNNN.mlpc` in `dir`, by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("mlpc") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Some(epoch) = stem.strip_prefix("epoch_").and_then(|e| e.parse().ok()) {
            out.push((epoch, path.with_extension("")));
        }
    }
    out.sort();
    Ok(out)
}

fn monitor(cfg: &RunConfig) -> Result<String> {
    let data = load(cfg)?;
    let ckpts = list_checkpoints(&cfg.path("run")?.join("checkpoints"))?;
    if ckpts.is_empty() {
        return Err(Error::Config {
            key: "run".into(),
            reason: "no epoch_NNNNN.mlpc checkpoints found".into(),
        });
    }
    let setup = data.setup(cfg.get("knn")?);
    let records = ckpts
        .iter()
        .map(|(epoch, prefix)| evaluate_checkpoint(&load_checkpoint(prefix)?.0, *epoch, &setup))
        .collect::<Result<Vec<TrackRecord>>>()?;
    let out = prepare_out(cfg)?;
    write(out.join("curve.csv"), curve_csv(&records))?;
    Ok(format!("evaluated {} checkpoints", records.len()))
}

/// Fine-tuning settings from a `umm` config.
pub fn umm_config(cfg: &RunConfig) -> Result<UmmConfig> {
    Ok(UmmConfig {
        alpha: cfg.get("alpha")?,
        beta: cfg.get("beta")?,
        eps: cfg.get("eps")?,
        lambda: cfg.get("lambda")?,
        gamma: cfg.get("gamma")?,
        inner_steps: cfg.get("inner_steps")?,
        grad_mode: cfg.get::<GradMode>("grad_mode")?,
        epochs: cfg.get("epochs")?,
        batch_pairs: cfg.get("batch_pairs")?,
        kind: ssl_kind(cfg)?,
    })
}

fn cmd_umm(cfg: &RunConfig) -> Result<String> {
    let data = load(cfg)?;
    let (net, head) = load_checkpoint(&cfg.path("checkpoint")?)?;
    let ucfg = umm_config(cfg)?;
    let variant = match cfg.raw("variant")? {
        "umm" => Variant::Umm,
        "baseline" => Variant::Baseline,
        other => {
            return Err(Error::Config {
                key: "variant".into(),
                reason: format!("expected umm or baseline, got {other:?}"),
            })
        }
    };
    let before = layer_delta_r(&net, &data.split.monitor_batch, ucfg.eps)?;
    let result = finetune(&net, &head, &data.spec, &data.ds, &data.split, &ucfg, variant, data.seed)?;
    let after = layer_delta_r(&result.net, &data.split.monitor_batch, ucfg.eps)?;
    let out = prepare_out(cfg)?;
    save_checkpoint(&out.join("final"), &result.net, &result.head)?;
    write(out.join("metrics.csv"), metrics_csv(&result.log))?;
    write(out.join("timings.csv"), timings_csv(&result.timings))?;
    Ok(format!(
        "fine-tuned {} epochs; last-layer ΔR {:.6} -> {:.6}",
        ucfg.epochs, before.1, after.1
    ))
}

fn eval(cfg: &RunConfig) -> Result<String> {
    use serde_json::json;
    let data = load(cfg)?;
    let prefix = cfg.path("checkpoint")?;
    let (net, _) = load_checkpoint(&prefix)?;
    let pseed = probe_seed(data.seed);
    let (fe, fl) = net.early_and_last(&data.ds.x)?;
    let (dr_early, dr_last) = layer_delta_r(&net, &data.split.monitor_batch, data.eps)?;
    let mut probes = Vec::new();
    for (layer, f) in [("early", &fe), ("last", &fl)] {
        probes.push(json!({ "layer": layer, "kind": "linear", "accuracy": linear_probe(f, &data.ds.labels, pseed)?.accuracy }));
        probes.push(json!({ "layer": layer, "kind": "knn5", "accuracy": knn_eval(f, &data.ds.labels, 5)?.accuracy }));
    }
    let timing = timing_report(&net, &data.ds.x, &data.ds.labels, &data.split.monitor_batch, data.eps, pseed)?;
    let doc = json!({
        "checkpoint": prefix.display().to_string(),
        "probes": probes,
        "crr": { "delta_r_early": dr_early, "delta_r_last": dr_last },
    });
    let out = prepare_out(cfg)?;
    write(out.join("eval.json"), serde_json::to_string_pretty(&doc).expect("serializable") + "\n")?;
    let mut t = String::from("kind,wall_ms\n");
    for p in &timing {
        t.push_str(&format!("{},{:.3}\n", p.kind.name(), p.wall_ms));
    }
    write(out.join("timings.csv"), t)?;
    Ok(format!(
        "linear {:.1} ms, knn5 {:.1} ms, crr {:.1} ms",
        timing[0].wall_ms, timing[1].wall_ms, timing[2].wall_ms
    ))
}

fn report(cfg: &RunConfig) -> Result<String> {
    let path = cfg.path("run")?.join("curve.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records = parse_curve_csv(&text, &path.display().to_string())?;
    let doc = report_json(&records, cfg.get("patience")?, cfg.get("margin")?)?;
    let out = prepare_out(cfg)?;
    write(out.join("report.json"), serde_json::to_string_pretty(&doc).expect("serializable") + "\n")?;
    Ok(format!("report over {} records", records.len()))
}
