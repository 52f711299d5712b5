//! Small dense linear-algebra and numerics helpers.
//!
//! Everything here is `f64` and deterministic: transcendentals go through
//! `libm` so results are bit-identical across platforms, which the
//! reproducibility contracts elsewhere in the crate rely on.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn abs(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        x
    }
}

/// Probabilities are clamped to this floor inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln` with the zero-probability convention used by every loss in the crate.
pub fn ln_clamped(x: f64) -> f64 {
    ln(if x < LOG_FLOOR { LOG_FLOOR } else { x })
}

/// Dense row-major matrix. Dimensions here are tiny (tokens, attributes,
/// feature dims), so plain loops beat pulling in a linear-algebra crate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `self * v`
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = dot(self.row(i), v);
        }
        out
    }

    /// `self^T * v`
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += vi * x;
            }
        }
        out
    }

    /// Stack `self` on top of `other` (same column count).
    pub fn vstack(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Mean over rows.
    pub fn row_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / self.rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

pub fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// L2-normalize in place; returns the original norm. Zero vectors are left
/// untouched and report a zero norm so callers can decide what to do.
pub fn normalize_mut(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        let inv = 1.0 / n;
        for x in v.iter_mut() {
            *x *= inv;
        }
    }
    n
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    normalize_mut(&mut out);
    out
}

/// Cosine similarity. Unit inputs reduce this to a dot product, but the
/// general form keeps key/feature call sites honest.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// VJP of `y = u / ||u||` at forward point `u`: given `dL/dy`, returns `dL/du`.
pub fn normalize_vjp(u: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = norm(u);
    assert!(n > 0.0, "normalize_vjp at zero vector");
    let y = normalized(u);
    let proj = dot(&y, upstream);
    let mut out = vec![0.0; u.len()];
    for i in 0..u.len() {
        out[i] = (upstream[i] - proj * y[i]) / n;
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| exp(l - max)).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

/// VJP of softmax: given probabilities `p` and `dL/dp`, returns `dL/dlogits`.
pub fn softmax_vjp(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mean = dot(p, upstream);
    p.iter()
        .zip(upstream)
        .map(|(&pi, &gi)| pi * (gi - mean))
        .collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Standard normal sample via Box-Muller, driven by any `Rng`.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    sqrt(-2.0 * ln(u1)) * cos(2.0 * core::f64::consts::PI * u2)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, sigma: f64) -> Vec<f64> {
    (0..len).map(|_| sigma * sample_gaussian(rng)).collect()
}

pub fn gaussian_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sigma: f64) -> Mat {
    Mat {
        rows,
        cols,
        data: gaussian_vec(rng, rows * cols, sigma),
    }
}

/// Sample an index with probability proportional to `weights`.
/// Returns `None` when all weights are zero.
pub fn weighted_choice<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 && w > 0.0 {
            return Some(i);
        }
    }
    // Fall back to the last positive weight if rounding pushed us past the end.
    weights.iter().rposition(|&w| w > 0.0)
}

/// Random orthonormal matrix (n x n) via Gram-Schmidt on a Gaussian matrix.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Mat {
    let mut m = gaussian_mat(rng, n, n, 1.0);
    for i in 0..n {
        for j in 0..i {
            let proj = dot(m.row(i), m.row(j));
            let prev = m.row(j).to_vec();
            axpy(m.row_mut(i), -proj, &prev);
        }
        let nrm = normalize_mut(m.row_mut(i));
        if nrm < 1e-9 {
            // Degenerate draw; replace with a fresh Gaussian row and redo.
            let fresh = gaussian_vec(rng, n, 1.0);
            m.row_mut(i).copy_from_slice(&fresh);
            for j in 0..i {
                let proj = dot(m.row(i), m.row(j));
                let prev = m.row(j).to_vec();
                axpy(m.row_mut(i), -proj, &prev);
            }
            normalize_mut(m.row_mut(i));
        }
    }
    m
}

/// FNV-1a over raw f64 bits; used for frozen-weight checksums.
pub fn checksum_f64s<'a>(chunks: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for chunk in chunks {
        for v in chunk {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}
