//! Dense-array arithmetic, log-domain helpers, seeded randomness and the
//! finite-difference gradient checker used by every other module.
//!
//! All training math is carried out in `f64`. Probabilities live in natural-log
//! space; a probability of zero is represented by the [`LOG_ZERO`] sentinel
//! (a large negative *finite* value) so that log-space arithmetic stays NaN-free.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Log-domain sentinel for probability zero.
///
/// Deliberately not `f64::NEG_INFINITY`: adding two sentinels or adding a
/// finite log-probability to one keeps the value finite and far below any
/// reachable log-probability, so downstream arithmetic never produces NaN.
pub const LOG_ZERO: f64 = -1.0e30;

/// Anything at or below this threshold is treated as log-domain zero.
/// Sums of a sentinel with ordinary log-probabilities drift only marginally,
/// so one order of magnitude of slack is plenty.
pub const LOG_ZERO_THRESHOLD: f64 = -1.0e29;

/// Returns true if `x` represents probability zero in log space.
#[inline]
pub fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO_THRESHOLD
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    /// Builds a matrix by evaluating `f(row, col)` at every cell.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// ln(e^a + e^b) for two log-domain values, honoring the [`LOG_ZERO`] sentinel.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if is_log_zero(hi) {
        return LOG_ZERO;
    }
    if is_log_zero(lo) {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// ln Σ exp(vᵢ) over a non-empty slice, computed by max-shift.
///
/// Returns [`LOG_ZERO`] iff every input is log-domain zero. Panics on an
/// empty slice: an empty sum has no meaningful log.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "log_sum_exp of empty sequence");
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    if is_log_zero(max) {
        return LOG_ZERO;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-row log-softmax: turns a row of raw scores into log-probabilities.
///
/// exp of the outputs sums to 1 (within 1e-12); a constant shift of the
/// inputs leaves the outputs unchanged.
pub fn softmax_log(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_log_into(logits, &mut out);
    out
}

/// In-place variant of [`softmax_log`] writing into `out`.
pub fn softmax_log_into(logits: &[f64], out: &mut [f64]) {
    assert!(!logits.is_empty(), "softmax_log of empty row");
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::MIN, f64::max);
    let log_norm = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - log_norm;
    }
}

/// Compares an analytic gradient against central finite differences at
/// every coordinate and returns the maximum relative error
/// `|g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)`.
///
/// Panics if `f` evaluates to a non-finite value at any probe point.
pub fn finite_diff_check<F>(mut f: F, analytic_grad: &[f64], point: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(analytic_grad.len(), point.len());
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x = point[i];
        probe[i] = x + step;
        let up = f(&probe);
        probe[i] = x - step;
        let down = f(&probe);
        probe[i] = x;
        assert!(
            up.is_finite() && down.is_finite(),
            "non-finite function value at coordinate {i}"
        );
        let fd = (up - down) / (2.0 * step);
        let err = (fd - analytic_grad[i]).abs() / f64::max(1e-8, fd.abs() + analytic_grad[i].abs());
        worst = worst.max(err);
    }
    worst
}

/// Subsampled parallel variant of [`finite_diff_check`] for large parameter
/// vectors: only the listed coordinates are probed.
pub fn finite_diff_check_at<F>(
    f: F,
    analytic_grad: &[f64],
    point: &[f64],
    step: f64,
    coords: &[usize],
) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert_eq!(analytic_grad.len(), point.len());
    coords
        .par_iter()
        .map(|&i| {
            let mut probe = point.to_vec();
            let x = point[i];
            probe[i] = x + step;
            let up = f(&probe);
            probe[i] = x - step;
            let down = f(&probe);
            assert!(
                up.is_finite() && down.is_finite(),
                "non-finite function value at coordinate {i}"
            );
            let fd = (up - down) / (2.0 * step);
            (fd - analytic_grad[i]).abs() / f64::max(1e-8, fd.abs() + analytic_grad[i].abs())
        })
        .reduce(|| 0.0, f64::max)
}

/// Named random streams. Every sampling site draws from its own stream so
/// that runs are replayable and adding a consumer never perturbs another.
pub mod streams {
    /// Parameter initialization.
    pub const INIT: u64 = 1;
    /// Dropout masks; offset by a per-example counter during training.
    pub const DROPOUT: u64 = 0x1000_0000;
    /// Confusing-set sampling (RSS/HS); offset by a per-example counter.
    pub const CONFUSER: u64 = 0x2000_0000;
    /// Corpus synthesis; offset by utterance index.
    pub const SYNTH: u64 = 0x3000_0000;
    /// Per-epoch example shuffling; offset by epoch.
    pub const SHUFFLE: u64 = 0x4000_0000;
    /// Noise augmentation.
    pub const AUGMENT: u64 = 0x5000_0000;
    /// Synthesis-profile generation (state means and dial directions).
    pub const PROFILE: u64 = 0x6000_0000;
    /// Scratch stream for tests.
    pub const TEST: u64 = 0x9000_0000;
}

/// The one PRNG used everywhere: ChaCha with 8 rounds, keyed by `seed` and
/// positioned on an independent `stream`. Identical (seed, stream, call
/// sequence) produces identical output on every platform.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
