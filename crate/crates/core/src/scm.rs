//! Synthetic structural-causal-model data.
//!
//! ```text
//! S_r  = tanh(r_gain A_r U_r)
//! S_ur = dependence * tanh(M S_r) + ur_scale * U_ur
//! X    = mixing(S_r ⊕ S_ur)
//! y    = quantile bin of w·S_r
//! ```
//!
//! `U_r`, `U_ur` are standard normal. `mixing` is a fixed, injective two-layer
//! network (tanh on a full-column-rank layer, then a square orthogonal layer).
//! Augmentation re-noises `S_ur` per view and re-mixes; `S_r` is untouched, so
//! labels are invariant to augmentation by construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, format_g17, Matrix};
use crate::mlp::{Activation, Layer, Mlp};
use crate::rng::Rng;
use crate::ssl::AugPairBatch;

/// Scalar knobs of the generator; the random components are derived from
/// these plus a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmParams {
    pub d_r: usize,
    pub d_ur: usize,
    /// `0` selects `2 (d_r + d_ur)`.
    pub d_x: usize,
    pub k: usize,
    pub sigma_a: f64,
    pub dependence: f64,
    pub ur_scale: f64,
    /// Gain inside the `S_r` tanh; large values push `S_r` towards the
    /// corners of the hypercube (clustered task factors).
    pub r_gain: f64,
}

impl Default for ScmParams {
    fn default() -> Self {
        Self {
            d_r: 4,
            d_ur: 16,
            d_x: 0,
            k: 10,
            sigma_a: 0.1,
            dependence: 0.0,
            ur_scale: 1.0,
            r_gain: 1.0,
        }
    }
}

impl ScmParams {
    pub fn resolved_d_x(&self) -> usize {
        if self.d_x == 0 {
            2 * (self.d_r + self.d_ur)
        } else {
            self.d_x
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.d_r == 0 {
            return bad("d_r must be >= 1".into());
        }
        if self.resolved_d_x() < self.d_r + self.d_ur {
            return bad(format!(
                "d_x = {} must be >= d_r + d_ur = {}",
                self.resolved_d_x(),
                self.d_r + self.d_ur
            ));
        }
        if self.k < 2 {
            return bad(format!("k = {} must be >= 2", self.k));
        }
        if !(self.sigma_a >= 0.0) || !self.sigma_a.is_finite() {
            return bad(format!("sigma_a = {} must be >= 0", self.sigma_a));
        }
        if !self.dependence.is_finite() || !(self.ur_scale >= 0.0) || !self.ur_scale.is_finite() {
            return bad("dependence and ur_scale must be finite, ur_scale >= 0".into());
        }
        if !(self.r_gain > 0.0) || !self.r_gain.is_finite() {
            return bad(format!("r_gain = {} must be > 0", self.r_gain));
        }
        Ok(())
    }
}

/// A fully instantiated generator. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmSpec {
    params: ScmParams,
    seed: u64,
    a_r: Matrix,
    dep: Matrix,
    label_w: Vec<f64>,
    mixing: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScmDataset {
    /// `d_x x n`
    pub x: Matrix,
    /// `d_r x n`
    pub s_r: Matrix,
    /// `d_ur x n`
    pub s_ur: Matrix,
    pub labels: Vec<usize>,
}

/// Features and labels without latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    /// `d x n`
    pub x: Matrix,
    pub labels: Vec<usize>,
}

fn orthogonal(n: usize, rng: &mut Rng) -> Matrix {
    // Gram-Schmidt on Gaussian columns; re-draws a column if it collapses
    let mut q = Matrix::zeros(n, n);
    let mut j = 0;
    while j < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for p in 0..j {
                let c: f64 = (0..n).map(|i| q[(i, p)] * v[i]).sum();
                (0..n).for_each(|i| v[i] -= c * q[(i, p)]);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        (0..n).for_each(|i| q[(i, j)] = v[i] / norm);
        j += 1;
    }
    q
}

fn full_column_rank(w: &Matrix) -> bool {
    cholesky(&w.matmul_tn(w).expect("square product"))
        .map(|l| (0..l.rows()).all(|i| l[(i, i)] > 1e-6))
        .unwrap_or(false)
}

impl ScmSpec {
    pub fn new(params: ScmParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let root = Rng::new(seed);
        let (d_r, d_ur, d_x) = (params.d_r, params.d_ur, params.resolved_d_x());
        let d_s = d_r + d_ur;

        let mut rng = root.fork(1);
        let a_r = rng.normal_matrix(d_r, d_r).scale(params.r_gain / (d_r as f64).sqrt());
        let dep = rng.normal_matrix(d_ur, d_r).scale(1.0 / (d_r as f64).sqrt());
        let mut label_w: Vec<f64> = (0..d_r).map(|_| rng.normal()).collect();
        let norm = label_w.iter().map(|v| v * v).sum::<f64>().sqrt();
        label_w.iter_mut().for_each(|v| *v /= norm);

        let mut rng = root.fork(2);
        let w1 = loop {
            let w = rng.normal_matrix(d_x, d_s).scale(1.0 / (d_s as f64).sqrt());
            if full_column_rank(&w) {
                break w;
            }
        };
        let b1 = (0..d_x).map(|_| 0.1 * rng.normal()).collect();
        let mixing = Mlp::new(
            vec![
                Layer::new(w1, b1, Activation::Tanh)?,
                Layer::new(orthogonal(d_x, &mut rng), vec![0.0; d_x], Activation::Identity)?,
            ],
            1,
        )?;
        Ok(Self {
            params,
            seed,
            a_r,
            dep,
            label_w,
            mixing,
        })
    }

    pub fn params(&self) -> &ScmParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mixing(&self) -> &Mlp {
        &self.mixing
    }

    pub fn d_x(&self) -> usize {
        self.params.resolved_d_x()
    }

    /// Quantile-bin labels of `w·S_r`; class sizes differ by at most one.
    pub fn labels_from(&self, s_r: &Matrix) -> Vec<usize> {
        let n = s_r.cols();
        let score: Vec<f64> = (0..n)
            .map(|i| (0..self.params.d_r).map(|r| self.label_w[r] * s_r[(r, i)]).sum())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
        let mut labels = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            labels[i] = rank * self.params.k / n;
        }
        labels
    }

    /// `mixing(S_r ⊕ S_ur)`.
    pub fn mix(&self, s_r: &Matrix, s_ur: &Matrix) -> Result<Matrix> {
        let s = s_r.vcat(s_ur)?;
        Ok(self.mixing.forward(&s)?.pop().expect("non-empty network"))
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<ScmDataset> {
        let k = self.params.k;
        if n < 2 * k {
            return Err(Error::InvalidSpec(format!("n = {n} must be >= 2k = {}", 2 * k)));
        }
        let mut rng = Rng::new(seed);
        let u_r = rng.normal_matrix(self.params.d_r, n);
        let u_ur = rng.normal_matrix(self.params.d_ur, n);
        let mut s_r = self.a_r.matmul(&u_r)?;
        s_r.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        let mut s_ur = u_ur.scale(self.params.ur_scale);
        if self.params.dependence != 0.0 {
            let mut g = self.dep.matmul(&s_r)?;
            g.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            s_ur.axpy(self.params.dependence, &g);
        }
        let x = self.mix(&s_r, &s_ur)?;
        let labels = self.labels_from(&s_r);
        Ok(ScmDataset { x, s_r, s_ur, labels })
    }

    /// Two views of the samples `indices`: `S*_ur = S_ur + σ_A ξ` with fresh
    /// `ξ` per view, re-mixed. `σ_A = 0` reproduces the stored `X` exactly.
    pub fn augment_indices(&self, ds: &ScmDataset, indices: &[usize], rng: &mut Rng) -> Result<AugPairBatch> {
        let s_r = ds.s_r.select_columns(indices);
        let s_ur = ds.s_ur.select_columns(indices);
        let mut view = || -> Result<Matrix> {
            if self.params.sigma_a == 0.0 {
                return self.mix(&s_r, &s_ur);
            }
            let noise = rng.normal_matrix(s_ur.rows(), s_ur.cols());
            let mut pert = s_ur.clone();
            pert.axpy(self.params.sigma_a, &noise);
            self.mix(&s_r, &pert)
        };
        let v1 = view()?;
        let v2 = view()?;
        AugPairBatch::new(v1, v2, indices.to_vec())
    }

    /// Views of the whole dataset.
    pub fn augment(&self, ds: &ScmDataset, seed: u64) -> Result<AugPairBatch> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        self.augment_indices(ds, &idx, &mut Rng::new(seed))
    }

    fn manifest(&self, ds: &ScmDataset, data_seed: u64) -> String {
        let p = &self.params;
        let mut s = String::new();
        let _ = writeln!(s, "d_r={}", p.d_r);
        let _ = writeln!(s, "d_ur={}", p.d_ur);
        let _ = writeln!(s, "d_x={}", p.resolved_d_x());
        let _ = writeln!(s, "k={}", p.k);
        let _ = writeln!(s, "sigma_a={}", format_g17(p.sigma_a));
        let _ = writeln!(s, "dependence={}", format_g17(p.dependence));
        let _ = writeln!(s, "ur_scale={}", format_g17(p.ur_scale));
        let _ = writeln!(s, "r_gain={}", format_g17(p.r_gain));
        let _ = writeln!(s, "spec_seed={}", self.seed);
        let _ = writeln!(s, "n={}", ds.len());
        let _ = writeln!(s, "data_seed={data_seed}");
        s
    }
}

impl ScmDataset {
    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.cols() == 0
    }

    pub fn labeled(&self) -> LabeledData {
        LabeledData {
            x: self.x.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> ScmDataset {
        ScmDataset {
            x: self.x.select_columns(indices),
            s_r: self.s_r.select_columns(indices),
            s_ur: self.s_ur.select_columns(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn labels_matrix(labels: &[usize]) -> Matrix {
    Matrix::from_fn(1, labels.len(), |_, j| labels[j] as f64)
}

fn labels_from_matrix(m: &Matrix, path: &Path) -> Result<Vec<usize>> {
    m.as_slice()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("label {v} is not a class id"),
                })
            }
        })
        .collect()
}

/// Writes `x.crrm`, `s_r.crrm`, `s_ur.crrm`, `labels.crrm`, `mixing.mlpc` and
/// `manifest.txt` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, spec: &ScmSpec, ds: &ScmDataset, data_seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.x.save(dir.join("x.crrm"))?;
    ds.s_r.save(dir.join("s_r.crrm"))?;
    ds.s_ur.save(dir.join("s_ur.crrm"))?;
    labels_matrix(&ds.labels).save(dir.join("labels.crrm"))?;
    spec.mixing.save(dir.join("mixing.mlpc"))?;
    let path = dir.join("manifest.txt");
    std::fs::write(&path, spec.manifest(ds, data_seed)).map_err(|e| Error::io(&path, e))
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            location: format!("{origin}:{}", lineno + 1),
            reason: format!("expected key=value, got {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn manifest_value<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    kv.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing or malformed `{key}`"),
        })
}

/// Reads a dataset written by [`save_dataset`], rebuilding the generator from
/// the manifest and checking it against the stored mixing network.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(ScmSpec, ScmDataset, u64)> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let kv = parse_key_values(&text, &mpath.display().to_string())?;
    let params = ScmParams {
        d_r: manifest_value(&kv, "d_r", &mpath)?,
        d_ur: manifest_value(&kv, "d_ur", &mpath)?,
        d_x: manifest_value(&kv, "d_x", &mpath)?,
        k: manifest_value(&kv, "k", &mpath)?,
        sigma_a: manifest_value(&kv, "sigma_a", &mpath)?,
        dependence: manifest_value(&kv, "dependence", &mpath)?,
        ur_scale: manifest_value(&kv, "ur_scale", &mpath)?,
        r_gain: manifest_value(&kv, "r_gain", &mpath)?,
    };
    let spec = ScmSpec::new(params, manifest_value(&kv, "spec_seed", &mpath)?)?;
    let data_seed = manifest_value(&kv, "data_seed", &mpath)?;
    let stored = Mlp::load(dir.join("mixing.mlpc"))?;
    if stored != spec.mixing {
        return Err(Error::Format {
            path: dir.join("mixing.mlpc"),
            reason: "mixing network does not match the manifest".into(),
        });
    }
    let lpath = dir.join("labels.crrm");
    let ds = ScmDataset {
        x: Matrix::load(dir.join("x.crrm"))?,
        s_r: Matrix::load(dir.join("s_r.crrm"))?,
        s_ur: Matrix::load(dir.join("s_ur.crrm"))?,
        labels: labels_from_matrix(&Matrix::load(&lpath)?, &lpath)?,
    };
    Ok((spec, ds, data_seed))
}

/// Loads a numeric CSV (one sample per row). A non-numeric first line is
/// taken as a header. Column `label_column` holds integer class ids; the
/// remaining columns become features, one sample per column of `x`.
pub fn load_csv(path: impl AsRef<Path>, label_column: usize) -> Result<LabeledData> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut body = text.as_str();
    if let Some(first) = text.lines().next() {
        if first.split(',').any(|f| f.trim().parse::<f64>().is_err()) {
            body = &text[first.len()..];
        }
    }
    let table = Matrix::from_csv(body)?;
    if label_column >= table.cols() {
        return Err(Error::Parse {
            location: path.display().to_string(),
            reason: format!("label column {label_column} out of range ({} columns)", table.cols()),
        });
    }
    let features: Vec<usize> = (0..table.cols()).filter(|&c| c != label_column).collect();
    let x = table.select_columns(&features).transpose();
    let labels = labels_from_matrix(&Matrix::from_fn(1, table.rows(), |_, i| table[(i, label_column)]), path)?;
    Ok(LabeledData { x, labels })
}

/// Inverse of [`load_csv`] with the label in the last column.
pub fn write_csv(path: impl AsRef<Path>, data: &LabeledData) -> Result<()> {
    let path = path.as_ref();
    let table = data.x.transpose().hcat(&labels_matrix(&data.labels).transpose())?;
    std::fs::write(path, table.to_csv()).map_err(|e| Error::io(path, e))
}
