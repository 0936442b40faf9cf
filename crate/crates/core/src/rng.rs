//! Counter-based random stream.
//!
//! Draw `k` (zero-based) of a stream with seed `s` is
//!
//! ```text
//! x = s + (k + 1) * 0x9E3779B97F4A7C15          (wrapping u64)
//! x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
//! x = (x ^ (x >> 27)) * 0x94D049BB133111EB
//! out = x ^ (x >> 31)
//! ```
//!
//! i.e. the SplitMix64 finalizer applied to a Weyl counter. Derived values:
//!
//! * `uniform()` = `(out >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()` consumes two draws `u1, u2`: `sqrt(-2 ln(1 - U1)) * cos(2 pi U2)`
//!   (Box-Muller, cosine branch only).
//! * `below(n)` = `out % n` (the modulo bias is irrelevant for `n << 2^64`).
//!
//! Any port that reproduces these four lines reproduces the streams.

use crate::linalg::Matrix;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

#[inline]
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of raw draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    /// An independent stream keyed by `(seed, stream)`; the parent is untouched.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(stream.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform_range(lo, hi))
    }

    /// Fisher-Yates, from the back.
    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
