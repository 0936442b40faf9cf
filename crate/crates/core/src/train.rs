//! Plain SSL pretraining with periodic monitoring.

use crate::error::{Error, Result};
use crate::mlp::{apply_gradient, init_stack, params_finite, Activation, Layer, Mlp};
use crate::monitor::{evaluate_checkpoint, record_epochs, MonitorSetup, TrackRecord};
use crate::rng::Rng;
use crate::scm::{ScmDataset, ScmSpec};
use crate::ssl::{ssl_loss, AugPairBatch, SslKind};

/// Stream ids forked from a run seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const MONITOR: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const UMM: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const DATA: u64 = 7;
}

/// Seed of the samples drawn for a generator built from `seed`.
pub fn data_seed(seed: u64) -> u64 {
    Rng::new(seed).fork(streams::DATA).next_u64()
}

/// Seed of the linear probe's stratified split.
pub fn probe_seed(seed: u64) -> u64 {
    Rng::new(seed).fork(streams::PROBE).next_u64()
}

/// Extractor with layer widths `widths` on top of `d_in` inputs, split after
/// `split_index` layers, plus an optional projection head (`head_widths`,
/// hidden layers with `activation`, linear output). All weights come from the
/// seed's INIT stream.
pub fn build_network(
    d_in: usize,
    widths: &[usize],
    activation: Activation,
    split_index: usize,
    head_widths: &[usize],
    seed: u64,
) -> Result<(Mlp, Vec<Layer>)> {
    let mut rng = Rng::new(seed).fork(streams::INIT);
    let dims: Vec<usize> = std::iter::once(d_in).chain(widths.iter().copied()).collect();
    let net = Mlp::random(&dims, activation, Some(split_index), &mut rng)?;
    let head = if head_widths.is_empty() {
        Vec::new()
    } else {
        let dims: Vec<usize> = std::iter::once(net.output_dim()).chain(head_widths.iter().copied()).collect();
        let mut acts = vec![activation; head_widths.len()];
        *acts.last_mut().expect("non-empty head") = Activation::Identity;
        init_stack(&dims, &acts, &mut rng)?
    };
    Ok((net, head))
}

/// Training indices plus a fixed held-out monitoring batch.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub monitor: Vec<usize>,
    pub monitor_batch: AugPairBatch,
}

impl DataSplit {
    /// Holds out `monitor_pairs` samples (seeded) and draws their two views
    /// once.
    pub fn new(spec: &ScmSpec, ds: &ScmDataset, monitor_pairs: usize, seed: u64) -> Result<Self> {
        let n = ds.len();
        if monitor_pairs < 2 || monitor_pairs + 2 > n {
            return Err(Error::InvalidConfig(format!(
                "monitor_pairs = {monitor_pairs} must lie in 2..={}",
                n.saturating_sub(2)
            )));
        }
        let root = Rng::new(seed);
        let perm = root.fork(streams::SPLIT).permutation(n);
        let mut monitor = perm[..monitor_pairs].to_vec();
        let mut train = perm[monitor_pairs..].to_vec();
        monitor.sort_unstable();
        train.sort_unstable();
        let monitor_batch = spec.augment_indices(ds, &monitor, &mut root.fork(streams::MONITOR))?;
        Ok(Self {
            train,
            monitor,
            monitor_batch,
        })
    }
}

/// Epoch-shuffled mini-batches of training indices; a trailing batch with
/// fewer than two samples is dropped.
pub fn epoch_batches(train: &[usize], batch_pairs: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx = train.to_vec();
    rng.shuffle(&mut idx);
    idx.chunks(batch_pairs.max(2))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub kind: SslKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_pairs: usize,
    pub every_k: usize,
}

/// Output of [`pretrain`]; `records` follow [`record_epochs`].
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub net: Mlp,
    pub head: Vec<Layer>,
    pub records: Vec<TrackRecord>,
}

/// Trains `net` and `head` jointly by plain gradient descent on the SSL loss.
/// At each recorded epoch the monitor evaluates the network and
/// `on_checkpoint` receives it (e.g. to write it to disk).
pub fn pretrain(
    mut net: Mlp,
    mut head: Vec<Layer>,
    spec: &ScmSpec,
    ds: &ScmDataset,
    split: &DataSplit,
    cfg: &PretrainConfig,
    setup: &MonitorSetup,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &Mlp, &[Layer]) -> Result<()>,
) -> Result<PretrainOutput> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig(format!("lr = {} must be > 0", cfg.lr)));
    }
    let schedule = record_epochs(cfg.epochs, cfg.every_k);
    let mut rng = Rng::new(seed).fork(streams::PRETRAIN);
    let mut records = Vec::with_capacity(schedule.len());
    let mut next = 0;
    if schedule == [0] {
        records.push(evaluate_checkpoint(&net, 0, setup)?);
        on_checkpoint(0, &net, &head)?;
    }
    let n_net = net.layers().len();
    for epoch in 1..=cfg.epochs {
        for batch_idx in epoch_batches(&split.train, cfg.batch_pairs, &mut rng) {
            let batch = spec.augment_indices(ds, &batch_idx, &mut rng)?;
            let out = ssl_loss(cfg.kind, net.layers(), &head, &batch)?;
            if !out.loss.is_finite() || !out.net.is_finite() || !out.head.is_finite() {
                return Err(Error::NonFinite(format!("pretraining gradient at epoch {epoch}")));
            }
            apply_gradient(net.layers_mut(), &out.net, cfg.lr);
            apply_gradient(&mut head, &out.head, cfg.lr);
            debug_assert_eq!(net.layers().len(), n_net);
        }
        if !params_finite(net.layers()) || !params_finite(&head) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        if schedule.get(next) == Some(&epoch) {
            records.push(evaluate_checkpoint(&net, epoch, setup)?);
            on_checkpoint(epoch, &net, &head)?;
            next += 1;
        }
    }
    Ok(PretrainOutput { net, head, records })
}
