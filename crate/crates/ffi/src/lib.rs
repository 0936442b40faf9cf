//! C ABI over `umm-core`.
//!
//! Conventions:
//! - every fallible function returns a [`UmmStatus`]; on failure
//!   [`umm_last_error_message`] describes the error on the calling thread;
//! - objects are opaque handles created by `*_generate`/`*_load` and released
//!   by the matching `*_free` (null is accepted and ignored);
//! - matrices cross the boundary sample-major: `n` rows of `d` contiguous
//!   doubles, i.e. a C-order `n x d` array;
//! - output buffers are caller-allocated; their capacity is passed in
//!   elements and must be at least the documented size.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use umm_core::coding_rate::{coding_rate, FeatureBatch, RateMode};
use umm_core::commands::{load_checkpoint, save_checkpoint};
use umm_core::config::{Command, RunConfig};
use umm_core::mlp::{Layer, Mlp};
use umm_core::monitor::{delta_r, knn_eval, linear_probe};
use umm_core::scm::{load_dataset, save_dataset, ScmDataset, ScmParams, ScmSpec};
use umm_core::{Error, Matrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    /// Non-finite values, non-SPD matrices, rank deficiency and similar.
    Numerical = 4,
    InvalidSpec = 5,
    InvalidConfig = 6,
    Io = 7,
    Format = 8,
    Unsupported = 9,
    BufferTooSmall = 10,
    /// A Rust panic was caught at the boundary.
    Panic = 11,
}

/// Which side of the network split a feature request refers to.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmmLayer {
    /// Output of the frozen early part `f_e`.
    Early = 0,
    /// Output of the full extractor.
    Last = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmmRateMode {
    Exact = 0,
    Trace = 1,
}

/// Scalar knobs of the synthetic data generator.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UmmScmParams {
    pub d_r: usize,
    pub d_ur: usize,
    /// `0` selects `2 (d_r + d_ur)`.
    pub d_x: usize,
    pub k: usize,
    pub sigma_a: f64,
    pub dependence: f64,
    pub ur_scale: f64,
    pub r_gain: f64,
}

impl From<ScmParams> for UmmScmParams {
    fn from(p: ScmParams) -> Self {
        Self {
            d_r: p.d_r,
            d_ur: p.d_ur,
            d_x: p.d_x,
            k: p.k,
            sigma_a: p.sigma_a,
            dependence: p.dependence,
            ur_scale: p.ur_scale,
            r_gain: p.r_gain,
        }
    }
}

impl From<UmmScmParams> for ScmParams {
    fn from(p: UmmScmParams) -> Self {
        Self {
            d_r: p.d_r,
            d_ur: p.d_ur,
            d_x: p.d_x,
            k: p.k,
            sigma_a: p.sigma_a,
            dependence: p.dependence,
            ur_scale: p.ur_scale,
            r_gain: p.r_gain,
        }
    }
}

/// Opaque generated or loaded dataset.
pub struct UmmDataset {
    spec: ScmSpec,
    ds: ScmDataset,
    data_seed: u64,
}

/// Opaque extractor plus optional projection head.
pub struct UmmNetwork {
    net: Mlp,
    head: Vec<Layer>,
}

struct Failure {
    status: UmmStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } | Error::LengthMismatch(..) | Error::RaggedRows { .. } => {
                UmmStatus::DimensionMismatch
            }
            Error::NonSpd { .. }
            | Error::NotSymmetric(_)
            | Error::NonFinite(_)
            | Error::RankDeficient(_)
            | Error::OffManifold(_)
            | Error::DegenerateVariance(_)
            | Error::ZeroVariance
            | Error::NegativeWeight { .. } => UmmStatus::Numerical,
            Error::InvalidSpec(_) => UmmStatus::InvalidSpec,
            Error::Config { .. } | Error::InvalidConfig(_) => UmmStatus::InvalidConfig,
            Error::Io { .. } => UmmStatus::Io,
            Error::Format { .. } | Error::Parse { .. } => UmmStatus::Format,
            Error::ModeUnsupported(_) => UmmStatus::Unsupported,
            _ => UmmStatus::InvalidArgument,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn fail(status: UmmStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            UmmStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            UmmStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(UmmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(UmmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(UmmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(UmmStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(UmmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T: Copy>(dst: *mut T, capacity: usize, src: &[T], what: &str) -> Result<(), Failure> {
    if capacity < src.len() {
        return Err(fail(
            UmmStatus::BufferTooSmall,
            format!("{what} needs {} elements, capacity is {capacity}", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if dst.is_null() {
        return Err(fail(UmmStatus::NullPointer, format!("{what} is null")));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Sample-major `n x d` buffer to the internal `d x n` layout.
unsafe fn read_samples(p: *const f64, n: usize, d: usize, what: &str) -> Result<Matrix, Failure> {
    let len = n
        .checked_mul(d)
        .ok_or_else(|| fail(UmmStatus::InvalidArgument, format!("{what}: n * d overflows")))?;
    let data = slice(p, len, what)?.to_vec();
    Ok(Matrix::from_vec(n, d, data)?.transpose())
}

fn samples_out(m: &Matrix) -> Vec<f64> {
    m.transpose().into_vec()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn umm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn umm_status_name(status: UmmStatus) -> *const c_char {
    let s: &'static str = match status {
        UmmStatus::Ok => "ok\0",
        UmmStatus::NullPointer => "null_pointer\0",
        UmmStatus::InvalidArgument => "invalid_argument\0",
        UmmStatus::DimensionMismatch => "dimension_mismatch\0",
        UmmStatus::Numerical => "numerical\0",
        UmmStatus::InvalidSpec => "invalid_spec\0",
        UmmStatus::InvalidConfig => "invalid_config\0",
        UmmStatus::Io => "io\0",
        UmmStatus::Format => "format\0",
        UmmStatus::Unsupported => "unsupported\0",
        UmmStatus::BufferTooSmall => "buffer_too_small\0",
        UmmStatus::Panic => "panic\0",
    };
    s.as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a success).
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn umm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generator defaults.
#[no_mangle]
pub extern "C" fn umm_scm_params_default() -> UmmScmParams {
    ScmParams::default().into()
}

/// Builds a generator from `params` and `spec_seed` and draws `n` samples
/// with `data_seed`.
///
/// # Safety
/// `params` must point to a valid struct and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn umm_dataset_generate(
    params: *const UmmScmParams,
    spec_seed: u64,
    n: usize,
    data_seed: u64,
    out: *mut *mut UmmDataset,
) -> UmmStatus {
    guard(|| {
        let params = *non_null(params, "params")?;
        let out = out_ref(out, "out")?;
        let spec = ScmSpec::new(params.into(), spec_seed)?;
        let ds = spec.generate(n, data_seed)?;
        *out = Box::into_raw(Box::new(UmmDataset { spec, ds, data_seed }));
        Ok(())
    })
}

/// Loads a dataset directory written by `umm gen-data` or
/// [`umm_dataset_save`].
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn umm_dataset_load(dir: *const c_char, out: *mut *mut UmmDataset) -> UmmStatus {
    guard(|| {
        let dir = c_str(dir, "dir")?;
        let out = out_ref(out, "out")?;
        let (spec, ds, data_seed) = load_dataset(dir)?;
        *out = Box::into_raw(Box::new(UmmDataset { spec, ds, data_seed }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn umm_dataset_save(dataset: *const UmmDataset, dir: *const c_char) -> UmmStatus {
    guard(|| {
        let h = non_null(dataset, "dataset")?;
        save_dataset(c_str(dir, "dir")?, &h.spec, &h.ds, h.data_seed)?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn umm_dataset_free(dataset: *mut UmmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Feature dimension, sample count and class count.
///
/// # Safety
/// `dataset` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn umm_dataset_shape(
    dataset: *const UmmDataset,
    d_x: *mut usize,
    n: *mut usize,
    k: *mut usize,
) -> UmmStatus {
    guard(|| {
        let h = non_null(dataset, "dataset")?;
        *out_ref(d_x, "d_x")? = h.ds.x.rows();
        *out_ref(n, "n")? = h.ds.len();
        *out_ref(k, "k")? = h.spec.params().k;
        Ok(())
    })
}

/// Copies the observations (`n x d_x`, sample-major).
///
/// # Safety
/// `dataset` must be a live handle; `buf` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn umm_dataset_copy_x(dataset: *const UmmDataset, buf: *mut f64, capacity: usize) -> UmmStatus {
    guard(|| {
        let h = non_null(dataset, "dataset")?;
        write_out(buf, capacity, &samples_out(&h.ds.x), "buf")
    })
}

/// Copies the `n` class labels.
///
/// # Safety
/// `dataset` must be a live handle; `buf` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn umm_dataset_copy_labels(
    dataset: *const UmmDataset,
    buf: *mut usize,
    capacity: usize,
) -> UmmStatus {
    guard(|| {
        let h = non_null(dataset, "dataset")?;
        write_out(buf, capacity, &h.ds.labels, "buf")
    })
}

/// Loads a checkpoint by path prefix (`prefix.mlpc`, optional `prefix.head`).
///
/// # Safety
/// `prefix` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn umm_network_load(prefix: *const c_char, out: *mut *mut UmmNetwork) -> UmmStatus {
    guard(|| {
        let prefix = PathBuf::from(c_str(prefix, "prefix")?);
        let out = out_ref(out, "out")?;
        let (net, head) = load_checkpoint(&prefix)?;
        *out = Box::into_raw(Box::new(UmmNetwork { net, head }));
        Ok(())
    })
}

/// # Safety
/// `network` must be a live handle and `prefix` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn umm_network_save(network: *const UmmNetwork, prefix: *const c_char) -> UmmStatus {
    guard(|| {
        let h = non_null(network, "network")?;
        save_checkpoint(&PathBuf::from(c_str(prefix, "prefix")?), &h.net, &h.head)?;
        Ok(())
    })
}

/// # Safety
/// `network` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn umm_network_free(network: *mut UmmNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Input, early-layer and output widths.
///
/// # Safety
/// `network` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn umm_network_shape(
    network: *const UmmNetwork,
    d_in: *mut usize,
    d_early: *mut usize,
    d_out: *mut usize,
) -> UmmStatus {
    guard(|| {
        let h = non_null(network, "network")?;
        *out_ref(d_in, "d_in")? = h.net.input_dim();
        *out_ref(d_early, "d_early")? = h.net.early_dim();
        *out_ref(d_out, "d_out")? = h.net.output_dim();
        Ok(())
    })
}

/// Features of `n` inputs (`n x d_in`) at `layer`, written sample-major
/// (`n x d_early` or `n x d_out`).
///
/// # Safety
/// `network` must be a live handle; `x` must hold `n * d_in` doubles and
/// `out` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn umm_network_features(
    network: *const UmmNetwork,
    x: *const f64,
    n: usize,
    d_in: usize,
    layer: UmmLayer,
    out: *mut f64,
    capacity: usize,
) -> UmmStatus {
    guard(|| {
        let h = non_null(network, "network")?;
        let x = read_samples(x, n, d_in, "x")?;
        let (early, last) = h.net.early_and_last(&x)?;
        let f = match layer {
            UmmLayer::Early => early,
            UmmLayer::Last => last,
        };
        write_out(out, capacity, &samples_out(&f), "out")
    })
}

/// Coding rate `R(Z, eps)` of `n` feature vectors of width `m`
/// (`n x m`, used as given).
///
/// # Safety
/// `z` must hold `n * m` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn umm_coding_rate(
    z: *const f64,
    n: usize,
    m: usize,
    eps: f64,
    mode: UmmRateMode,
    out: *mut f64,
) -> UmmStatus {
    guard(|| {
        let zb = FeatureBatch::new(read_samples(z, n, m, "z")?)?;
        let mode = match mode {
            UmmRateMode::Exact => RateMode::Exact,
            UmmRateMode::Trace => RateMode::Trace,
        };
        *out_ref(out, "out")? = coding_rate(&zb, eps, mode)?;
        Ok(())
    })
}

/// Monitoring ΔR: features are unit-normalized, membership is the anchored
/// softmax assignment, exact mode.
///
/// # Safety
/// `z` must hold `n * m` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn umm_delta_r(z: *const f64, n: usize, m: usize, eps: f64, out: *mut f64) -> UmmStatus {
    guard(|| {
        let z = read_samples(z, n, m, "z")?;
        *out_ref(out, "out")? = delta_r(&z, eps)?;
        Ok(())
    })
}

/// Held-out accuracy of the seeded linear probe on `n x d` features.
///
/// # Safety
/// `features` must hold `n * d` doubles, `labels` `n` entries; `accuracy`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn umm_linear_probe(
    features: *const f64,
    n: usize,
    d: usize,
    labels: *const usize,
    seed: u64,
    accuracy: *mut f64,
) -> UmmStatus {
    guard(|| {
        let f = read_samples(features, n, d, "features")?;
        let labels = slice(labels, n, "labels")?;
        *out_ref(accuracy, "accuracy")? = linear_probe(&f, labels, seed)?.accuracy;
        Ok(())
    })
}

/// Leave-one-out k-NN accuracy (cosine distance) on `n x d` features.
///
/// # Safety
/// As for [`umm_linear_probe`].
#[no_mangle]
pub unsafe extern "C" fn umm_knn_accuracy(
    features: *const f64,
    n: usize,
    d: usize,
    labels: *const usize,
    k: usize,
    accuracy: *mut f64,
) -> UmmStatus {
    guard(|| {
        let f = read_samples(features, n, d, "features")?;
        let labels = slice(labels, n, "labels")?;
        *out_ref(accuracy, "accuracy")? = knn_eval(&f, labels, k)?.accuracy;
        Ok(())
    })
}

/// Runs a CLI command (`gen-data`, `pretrain`, `monitor`, `umm`, `eval`,
/// `report`) with `config_text` in the `key=value` config format. Outputs go
/// to the configured `out` directory.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn umm_run(command: *const c_char, config_text: *const c_char) -> UmmStatus {
    guard(|| {
        let command = match c_str(command, "command")? {
            "gen-data" => Command::GenData,
            "pretrain" => Command::Pretrain,
            "monitor" => Command::Monitor,
            "umm" => Command::Umm,
            "eval" => Command::Eval,
            "report" => Command::Report,
            other => return Err(fail(UmmStatus::InvalidArgument, format!("unknown command {other:?}"))),
        };
        let mut cfg = RunConfig::defaults(command);
        cfg.merge_text(c_str(config_text, "config_text")?, "config_text")?;
        umm_core::commands::run(&cfg)?;
        Ok(())
    })
}
