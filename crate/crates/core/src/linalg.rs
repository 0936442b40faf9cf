//! Dense row-major `f64` matrices and the handful of factorizations the rest
//! of the crate needs.
//!
//! Features are stored column-wise: a batch of `n` samples in `m` dimensions
//! is an `m x n` matrix.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::ops::{Index, IndexMut};
use std::path::Path;

use crate::error::{Error, Result};

/// Default diagonal jitter used before Cholesky on near-singular Gram matrices.
pub const DEFAULT_JITTER: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-10;
const MATRIX_MAGIC: &[u8; 4] = b"CRRM";

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dims("Matrix::from_rows", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let c = cols.len();
        let r = cols.first().map_or(0, Vec::len);
        let mut m = Self::zeros(r, c);
        for (j, col) in cols.iter().enumerate() {
            if col.len() != r {
                return Err(Error::dims("Matrix::from_columns", r, col.len()));
            }
            m.set_col(j, col);
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_columns".into()));
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        for (i, &x) in v.iter().enumerate() {
            self.data[i * self.cols + j] = x;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        const TILE: usize = 16;
        let (r, c) = (self.rows, self.cols);
        let mut t = Matrix::zeros(c, r);
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        t.data[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("inner dim {}", self.cols),
                format!("{}", other.rows),
            ));
        }
        let (n, k, p) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, p);
        // four output rows per pass over `other`; each entry still sums over
        // `l` in increasing order
        let mut i = 0;
        while i + 4 <= n {
            let (r0, rest) = out.data[i * p..(i + 4) * p].split_at_mut(p);
            let (r1, rest) = rest.split_at_mut(p);
            let (r2, r3) = rest.split_at_mut(p);
            for l in 0..k {
                let a = [
                    self.data[i * k + l],
                    self.data[(i + 1) * k + l],
                    self.data[(i + 2) * k + l],
                    self.data[(i + 3) * k + l],
                ];
                let b_row = &other.data[l * p..(l + 1) * p];
                for j in 0..p {
                    let b = b_row[j];
                    r0[j] += a[0] * b;
                    r1[j] += a[1] * b;
                    r2[j] += a[2] * b;
                    r3[j] += a[3] * b;
                }
            }
            i += 4;
        }
        for i in i..n {
            let out_row = &mut out.data[i * p..(i + 1) * p];
            for l in 0..k {
                let a = self.data[i * k + l];
                let b_row = &other.data[l * p..(l + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims("matmul_nt", self.cols, other.cols));
        }
        let k = self.cols;
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = &other.data[j * k..(j + 1) * k];
                out.data[i * other.rows + j] = dot(a, b);
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims("matmul_tn", self.rows, other.rows));
        }
        // one pass over the output; the summation order matches `matmul`
        self.transpose().matmul(other)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dims("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dims("matvec_t", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    /// `Z Z^T`, computed on one triangle and mirrored so the result is exactly
    /// symmetric.
    pub fn gram_rows(&self) -> Matrix {
        self.weighted_gram_rows(None)
    }

    /// `Z diag(w) Z^T`, exactly symmetric. `None` means unit weights.
    pub fn weighted_gram_rows(&self, weights: Option<&[f64]>) -> Matrix {
        let m = self.rows;
        // one side carries the weights so the inner loop is a plain dot
        let scaled = weights.map(|w| {
            let mut s = self.clone();
            for a in 0..m {
                s.row_mut(a).iter_mut().zip(w).for_each(|(x, w)| *x *= w);
            }
            s
        });
        let left = scaled.as_ref().unwrap_or(self);
        let mut g = Matrix::zeros(m, m);
        for a in 0..m {
            let ra = left.row(a);
            for b in 0..=a {
                let s = dot(ra, self.row(b));
                g.data[a * m + b] = s;
                g.data[b * m + a] = s;
            }
        }
        g
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                "add",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                "sub",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (n, v) in norms.iter_mut().zip(self.row(i)) {
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        norms
    }

    /// Selects columns by index, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = &mut out.data[i * idx.len()..(i + 1) * idx.len()];
            for (d, &j) in dst.iter_mut().zip(idx) {
                *d = src[j];
            }
        }
        out
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims("hcat", self.rows, other.rows));
        }
        let c = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, c);
        for i in 0..self.rows {
            out.data[i * c..i * c + self.cols].copy_from_slice(self.row(i));
            out.data[i * c + self.cols..(i + 1) * c].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims("vcat", self.cols, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Splits columns into `[0, at)` and `[at, cols)`.
    pub fn split_columns(&self, at: usize) -> (Matrix, Matrix) {
        let left: Vec<usize> = (0..at).collect();
        let right: Vec<usize> = (at..self.cols).collect();
        (self.select_columns(&left), self.select_columns(&right))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Returns a copy with each column scaled to unit l2 norm, together with
    /// the original norms. Zero columns are an error.
    pub fn normalize_columns(&self) -> Result<(Matrix, Vec<f64>)> {
        let norms = self.column_norms();
        if let Some(j) = norms.iter().position(|&n| n <= 0.0 || !n.is_finite()) {
            return Err(Error::NonFinite(format!("column {j} has zero or non-finite norm")));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, n) in out.row_mut(i).iter_mut().zip(&norms) {
                *v /= n;
            }
        }
        Ok((out, norms))
    }

    fn check_square(&self, op: &'static str) -> Result<()> {
        if !self.is_square() {
            return Err(Error::dims(op, "square matrix", format!("{}x{}", self.rows, self.cols)));
        }
        Ok(())
    }

    fn check_symmetric(&self) -> Result<()> {
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.data[i * n + j] - self.data[j * n + i]).abs());
            }
        }
        if worst > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(worst));
        }
        Ok(())
    }

    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> std::io::Result<Matrix> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "missing CRRM magic",
            ));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let data = read_f64s(r, rows * cols)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "non-finite matrix entry",
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + 8 * self.data.len());
        self.write_binary(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Matrix> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Matrix::read_binary(&mut bytes.as_slice()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Header-less CSV, one matrix row per line, `%.17g` formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                s.push_str(&format_g17(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Matrix> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|e| Error::Parse {
                        location: format!("line {}", lineno + 1),
                        reason: format!("{f:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::RaggedRows {
                        row: lineno + 1,
                        expected: first.len(),
                        got: row.len(),
                    });
                }
            }
            rows.push(row);
        }
        Matrix::from_rows(&rows)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Inner product with eight independent partial sums (fixed order, so results
/// are reproducible; the split lets the loop vectorize).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Formats like C's `%.17g`.
pub fn format_g17(v: f64) -> String {
    const P: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -4 || exp >= P {
        let mantissa = strip_zeros(mantissa);
        let mut s = String::new();
        let sign = if exp < 0 { '-' } else { '+' };
        let _ = write!(s, "{mantissa}e{sign}{:02}", exp.abs());
        s
    } else {
        let decimals = (P - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, v)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `A + jitter * I`.
pub fn spd_jitter(a: &Matrix, jitter: f64) -> Result<Matrix> {
    a.check_square("spd_jitter")?;
    let mut out = a.clone();
    for i in 0..a.rows {
        out[(i, i)] += jitter;
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    a.check_square("cholesky")?;
    a.check_symmetric()?;
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let d = a.data[j * n + j] - dot(lj, lj);
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NonSpd { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l.data[j * n + j] = djj;
        for i in j + 1..n {
            let (head, tail) = l.data.split_at_mut(i * n);
            let li = &tail[..j];
            let lj = &head[j * n..j * n + j];
            let s = a.data[i * n + j] - dot(li, lj);
            tail[j] = s / djj;
        }
    }
    Ok(l)
}

/// `log det A = 2 sum log diag(chol(A))`. No jitter.
pub fn cholesky_logdet(a: &Matrix) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(logdet_from_factor(&l))
}

pub fn logdet_from_factor(l: &Matrix) -> f64 {
    2.0 * (0..l.rows).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Cholesky with a single jittered retry: the plain factorization is tried
/// first, and `DEFAULT_JITTER` is added to the diagonal only when it fails.
pub fn cholesky_with_jitter(a: &Matrix) -> Result<Matrix> {
    match cholesky(a) {
        Ok(l) => Ok(l),
        Err(Error::NonSpd { .. }) => cholesky(&spd_jitter(a, DEFAULT_JITTER)?),
        Err(e) => Err(e),
    }
}

pub fn logdet_spd(a: &Matrix) -> Result<f64> {
    cholesky_with_jitter(a).map(|l| logdet_from_factor(&l))
}

/// Forward substitution for `L x = b`.
pub fn solve_lower_triangular(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    l.check_square("solve_lower_triangular")?;
    if b.len() != l.rows {
        return Err(Error::dims("solve_lower_triangular", l.rows, b.len()));
    }
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s = b[i] - dot(&l.data[i * n..i * n + i], &x[..i]);
        x[i] = s / l.data[i * n + i];
    }
    Ok(x)
}

/// Back substitution for `L^T x = b` given the lower factor `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    l.check_square("solve_lower_transpose")?;
    if b.len() != l.rows {
        return Err(Error::dims("solve_lower_transpose", l.rows, b.len()));
    }
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l.data[k * n + i] * x[k];
        }
        x[i] = s / l.data[i * n + i];
    }
    Ok(x)
}

/// Solves `A x = b` from the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let y = solve_lower_triangular(l, b)?;
    solve_lower_transpose(l, &y)
}

/// `A^{-1}` from the Cholesky factor of `A`. Exactly symmetric.
pub fn cholesky_inverse(l: &Matrix) -> Matrix {
    let n = l.rows;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, &e).expect("square factor");
        inv.set_col(j, &col);
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    inv
}
