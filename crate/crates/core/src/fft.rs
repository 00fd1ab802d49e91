//! Batched 1-D FFT passes over the rows or columns of a real nx×np field.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse plan pair for one transform length.
#[derive(Clone)]
pub(crate) struct FftPair {
    pub n: usize,
    pub forward: Arc<dyn Fft<f64>>,
    pub inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

impl std::fmt::Debug for FftPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPair").field("n", &self.n).finish()
    }
}

/// Signed frequency index of bin `m` for a length-`n` DFT, in `[-n/2, n/2)`.
#[inline]
pub(crate) fn signed_bin(m: usize, n: usize) -> i64 {
    if m < n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// For every row `r` of a row-major `rows × pair.n` real array: forward FFT,
/// multiply bin `m` by `mult(r, signed_bin(m))`, inverse FFT, keep the real part.
pub(crate) fn filter_rows<F>(data: &mut [f64], pair: &FftPair, mult: F)
where
    F: Fn(usize, i64) -> Complex64 + Sync,
{
    let n = pair.n;
    debug_assert_eq!(data.len() % n, 0);
    let scale = 1.0 / n as f64;
    let scratch_len = pair
        .forward
        .get_inplace_scratch_len()
        .max(pair.inverse.get_inplace_scratch_len());
    data.par_chunks_mut(n).enumerate().for_each_init(
        || {
            (
                vec![Complex64::new(0.0, 0.0); n],
                vec![Complex64::new(0.0, 0.0); scratch_len],
            )
        },
        |(buf, scratch), (r, row)| {
            for (b, &v) in buf.iter_mut().zip(row.iter()) {
                *b = Complex64::new(v, 0.0);
            }
            pair.forward.process_with_scratch(buf, scratch);
            for (m, b) in buf.iter_mut().enumerate() {
                *b *= mult(r, signed_bin(m, n));
            }
            pair.inverse.process_with_scratch(buf, scratch);
            for (v, b) in row.iter_mut().zip(buf.iter()) {
                *v = b.re * scale;
            }
        },
    );
}

/// Transpose a row-major `rows × cols` array into `out` (`cols × rows`).
pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    const BLOCK: usize = 32;
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Same as [`filter_rows`] but along columns of a `rows × cols` array, with
/// `mult(col, signed_bin)`. `work` must hold `rows * cols` values.
pub(crate) fn filter_cols<F>(data: &mut [f64], rows: usize, pair: &FftPair, work: &mut Vec<f64>, mult: F)
where
    F: Fn(usize, i64) -> Complex64 + Sync,
{
    let cols = data.len() / rows;
    debug_assert_eq!(pair.n, rows);
    work.resize(data.len(), 0.0);
    transpose(data, rows, cols, work);
    filter_rows(work, pair, mult);
    transpose(work, cols, rows, data);
}

/// Complex in-place transform of a single vector; `inverse` is unnormalised.
pub(crate) fn transform(pair: &FftPair, buf: &mut [Complex64], inverse: bool) {
    if inverse {
        pair.inverse.process(buf);
    } else {
        pair.forward.process(buf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_multiplier_round_trips() {
        let pair = FftPair::new(16);
        let mut data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let orig = data.clone();
        filter_rows(&mut data, &pair, |_, _| Complex64::new(1.0, 0.0));
        for (a, b) in data.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
        let mut work = Vec::new();
        let pair4 = FftPair::new(4);
        filter_cols(&mut data, 4, &pair4, &mut work, |_, _| Complex64::new(1.0, 0.0));
        for (a, b) in data.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn signed_bins_cover_range() {
        let bins: Vec<i64> = (0..8).map(|m| signed_bin(m, 8)).collect();
        assert_eq!(bins, vec![0, 1, 2, 3, -4, -3, -2, -1]);
    }
}
