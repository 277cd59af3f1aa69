//! Dense numeric kernels, flat-vector utilities, and a deterministic
//! counter-based random number generator.
//!
//! Everything operates on 64-bit reals. Vectors and matrices are plain
//! row-major buffers; public operations validate finiteness so NaN/Inf
//! never propagate silently.

use crate::error::{Error, Result};

/// Non-empty vector of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVec {
    data: Vec<f64>,
}

impl RealVec {
    /// Validate and wrap a buffer. Rejects empty and non-finite input.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("RealVec"));
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: "RealVec",
                    index,
                    value,
                });
            }
        }
        Ok(RealVec { data })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::from_vec(vec![0.0; len.max(1)]).and_then(|v| {
            if len == 0 {
                Err(Error::EmptyInput("RealVec::zeros"))
            } else {
                Ok(v)
            }
        })
    }

    pub fn constant(len: usize, value: f64) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyInput("RealVec::constant"));
        }
        Self::from_vec(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees length > 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    fn check_len(&self, other: &RealVec, context: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                context,
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &RealVec) -> Result<RealVec> {
        self.check_len(other, "RealVec::add")?;
        RealVec::from_vec(
            self.iter()
                .zip(other.iter())
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &RealVec) -> Result<RealVec> {
        self.check_len(other, "RealVec::sub")?;
        RealVec::from_vec(
            self.iter()
                .zip(other.iter())
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scale(&self, factor: f64) -> Result<RealVec> {
        RealVec::from_vec(self.iter().map(|a| a * factor).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl std::ops::Index<usize> for RealVec {
    type Output = f64;
    fn index(&self, index: usize) -> &f64 {
        &self.data[index]
    }
}

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                context: "RealMat::from_vec",
                left: data.len(),
                right: rows * cols,
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: "RealMat",
                    index,
                    value,
                });
            }
        }
        Ok(RealMat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gather the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> RealMat {
        let mut out = RealMat::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// self (m x k) times other (k x n).
    pub fn matmul(&self, other: &RealMat) -> Result<RealMat> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                context: "RealMat::matmul",
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let mut out = RealMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = self.row(i);
            let dst = out.row_mut(i);
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs = other.row(k);
                for (d, &b) in dst.iter_mut().zip(rhs.iter()) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self (m x k) times other^T where other is (n x k).
    pub fn matmul_transpose(&self, other: &RealMat) -> Result<RealMat> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                context: "RealMat::matmul_transpose",
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let mut out = RealMat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let lhs = self.row(i);
            for j in 0..other.rows {
                let rhs = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in lhs.iter().zip(rhs.iter()) {
                    acc += a * b;
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    /// self^T (k x m becomes m-major) times other (k x n); self is (k x m).
    pub fn transpose_matmul(&self, other: &RealMat) -> Result<RealMat> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                context: "RealMat::transpose_matmul",
                lr: self.rows,
                lc: self.cols,
                rr: other.rows,
                rc: other.cols,
            });
        }
        let mut out = RealMat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let lhs = self.row(k);
            let rhs = other.row(k);
            for (i, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(rhs.iter()) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit finalizer used for counter/stream mixing (splitmix-style).
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic counter-based random number generator.
///
/// Draw i of a stream with key k is `mix64(k + i * GOLDEN_GAMMA)`: pure
/// integer arithmetic, so identical seeds produce identical sequences on
/// every platform. Substreams are derived by hashing a tag or index into
/// the key; adding a consumer never perturbs sibling streams.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed ^ GOLDEN_GAMMA),
            counter: 0,
        }
    }

    /// Derive an independent substream named by a tag.
    pub fn split(&self, tag: &str) -> Rng {
        Rng {
            key: mix64(self.key ^ fnv1a64(tag.as_bytes())),
            counter: 0,
        }
    }

    /// Derive an independent substream for an index (task number, run id).
    pub fn split_index(&self, index: u64) -> Rng {
        Rng {
            key: mix64(self.key.wrapping_add(mix64(index ^ 0xa076_1d64_78bd_642f))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let value = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)));
        self.counter += 1;
        value
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below requires n > 0");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from [0, n) (partial Fisher-Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Number of entries kept by a top-fraction rule: ceil(keep_fraction * n).
pub fn keep_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Threshold delta such that the top ceil(keep_fraction * n) entries satisfy
/// value >= delta; delta is the k-th largest value. Ties at delta are broken
/// by the mask builder, which keeps lowest indices first.
pub fn quantile_threshold(values: &RealVec, keep_fraction: f64) -> Result<f64> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "keep_fraction",
            message: format!("{keep_fraction} not in (0, 1]"),
        });
    }
    let k = keep_count(values.len(), keep_fraction);
    let mut sorted = values.to_vec();
    // Entries are finite by construction, so the comparator is total.
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, |a, b| b.partial_cmp(a).unwrap());
    Ok(*kth)
}

/// EMA step: out[i] = alpha * prev[i] + (1 - alpha) * observed[i].
///
/// Callers choose which operand plays "previous": the inner-loop recurrence
/// weights the previous smoothed value by its factor, while the outer-loop
/// recurrence weights the new observation instead.
pub fn ema_update(prev: &RealVec, observed: &RealVec, alpha: f64) -> Result<RealVec> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            message: format!("{alpha} not in [0, 1]"),
        });
    }
    prev.check_len(observed, "ema_update")?;
    RealVec::from_vec(
        prev.iter()
            .zip(observed.iter())
            .map(|(p, o)| alpha * p + (1.0 - alpha) * o)
            .collect(),
    )
}

fn check_mask(mask: &[u8], len: usize, context: &'static str) -> Result<()> {
    if mask.len() != len {
        return Err(Error::LengthMismatch {
            context,
            left: mask.len(),
            right: len,
        });
    }
    for (index, &bit) in mask.iter().enumerate() {
        if bit > 1 {
            return Err(Error::InvalidMaskBit { index, value: bit });
        }
    }
    Ok(())
}

/// out[i] = base[i] + mask_a[i]*delta_a[i] + mask_b[i]*delta_b[i].
///
/// Coordinates where both masks are 0 are copied bit-exactly from base
/// (no arithmetic is applied, so even signed zeros survive). Where both
/// masks are 1 both deltas are added: that is the task-shared region.
pub fn masked_add(
    base: &RealVec,
    mask_a: &[u8],
    delta_a: &RealVec,
    mask_b: &[u8],
    delta_b: &RealVec,
) -> Result<RealVec> {
    base.check_len(delta_a, "masked_add")?;
    base.check_len(delta_b, "masked_add")?;
    check_mask(mask_a, base.len(), "masked_add mask_a")?;
    check_mask(mask_b, base.len(), "masked_add mask_b")?;
    let mut out = base.to_vec();
    for i in 0..out.len() {
        if mask_a[i] == 1 {
            out[i] += delta_a.as_slice()[i];
        }
        if mask_b[i] == 1 {
            out[i] += delta_b.as_slice()[i];
        }
    }
    RealVec::from_vec(out)
}
