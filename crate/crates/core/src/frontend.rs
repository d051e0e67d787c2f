//! Feature preprocessing: short-term mean/variance normalization and the
//! Hamming-weighted DCT context expansion used as network input.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE_HZ: f64 = 100.0;
pub const DEFAULT_STMVN_WINDOW_S: f64 = 3.0;
pub const DEFAULT_HALF_WINDOW: usize = 15;
pub const DEFAULT_N_DCT: usize = 6;

const STD_FLOOR: f64 = 1e-10;

/// A `T × D` matrix of acoustic frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f64>,
    pub frame_rate_hz: f64,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::input("feature matrix has no frames"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("feature matrix has non-finite entries"));
        }
        Ok(Self {
            frames,
            frame_rate_hz,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Window length in frames for a duration in seconds.
pub fn window_frames(window_s: f64, frame_rate_hz: f64) -> usize {
    ((window_s * frame_rate_hz).round() as usize).max(1)
}

/// Frame range `[lo, hi)` of the centered window around `t`, clipped to `[0, n)`.
fn centered_range(t: usize, win: usize, n: usize) -> (usize, usize) {
    let lo = t.saturating_sub(win / 2);
    let hi = (t + win - win / 2).min(n);
    (lo, hi)
}

/// Short-term mean and variance normalization over a centered sliding
/// window clipped to the utterance.
pub fn stmvn(f: &FeatureMatrix, window_s: f64) -> Result<FeatureMatrix> {
    if !(window_s > 0.0) {
        return Err(Error::input(format!(
            "window must be positive, got {window_s}"
        )));
    }
    let x = &f.frames;
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::input("cannot normalize an empty utterance"));
    }
    let win = window_frames(window_s, f.frame_rate_hz);

    // Running sums over a copy offset by the first frame keep cancellation small.
    let centered = x - &x.row(0);
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    let (mut cur_lo, mut cur_hi) = (0usize, 0usize);
    let mut out = Array2::zeros((n, d));
    for t in 0..n {
        let (lo, hi) = centered_range(t, win, n);
        while cur_hi < hi {
            for j in 0..d {
                let v = centered[[cur_hi, j]];
                sum[j] += v;
                sumsq[j] += v * v;
            }
            cur_hi += 1;
        }
        while cur_lo < lo {
            for j in 0..d {
                let v = centered[[cur_lo, j]];
                sum[j] -= v;
                sumsq[j] -= v * v;
            }
            cur_lo += 1;
        }
        let count = (hi - lo) as f64;
        for j in 0..d {
            let mean = sum[j] / count;
            let var = (sumsq[j] / count - mean * mean).max(0.0);
            let std = var.sqrt().max(STD_FLOOR);
            out[[t, j]] = (centered[[t, j]] - mean) / std;
        }
    }
    FeatureMatrix::new(out, f.frame_rate_hz)
}

/// Hamming window `0.54 − 0.46·cos(2πn/(L−1))`; a single point has weight 1.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// First `n_basis` orthonormal DCT-II basis vectors of length `len`.
pub fn dct_basis(len: usize, n_basis: usize) -> Vec<Vec<f64>> {
    (0..n_basis)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / len as f64).sqrt()
            } else {
                (2.0 / len as f64).sqrt()
            };
            (0..len)
                .map(|n| scale * (PI * k as f64 * (2 * n + 1) as f64 / (2 * len) as f64).cos())
                .collect()
        })
        .collect()
}

/// Hamming-weighted DCT kernels, `n_dct × (2·half_window + 1)`.
pub fn context_kernels(half_window: usize, n_dct: usize) -> Vec<Vec<f64>> {
    let len = 2 * half_window + 1;
    let w = hamming(len);
    dct_basis(len, n_dct)
        .into_iter()
        .map(|b| b.iter().zip(&w).map(|(b, w)| b * w).collect())
        .collect()
}

/// Projects each coefficient's temporal trajectory around every frame onto
/// Hamming-weighted DCT bases.
///
/// Output column `d·n_dct + k` holds basis `k` of input coefficient `d`.
/// Edge frames are replicated past the utterance boundaries.
pub fn context_expand(
    frames: &ArrayView2<f64>,
    half_window: usize,
    n_dct: usize,
) -> Result<Array2<f64>> {
    let (n, d) = frames.dim();
    if n == 0 {
        return Err(Error::input("cannot expand an empty utterance"));
    }
    let len = 2 * half_window + 1;
    if n_dct == 0 || n_dct > len {
        return Err(Error::input(format!(
            "need 1 <= n_dct <= {len}, got {n_dct}"
        )));
    }
    let kernels = context_kernels(half_window, n_dct);
    let mut out = Array2::zeros((n, d * n_dct));
    let mut traj = vec![0.0; len];
    for t in 0..n {
        for j in 0..d {
            for (p, v) in traj.iter_mut().enumerate() {
                let src = (t + p).saturating_sub(half_window).min(n - 1);
                *v = frames[[src, j]];
            }
            for (k, kern) in kernels.iter().enumerate() {
                out[[t, j * n_dct + k]] = kern.iter().zip(&traj).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(out)
}

/// Settings shared by every stage that consumes frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    pub stmvn_window_s: f64,
    pub half_window: usize,
    pub n_dct: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            stmvn_window_s: DEFAULT_STMVN_WINDOW_S,
            half_window: DEFAULT_HALF_WINDOW,
            n_dct: DEFAULT_N_DCT,
        }
    }
}

/// Normalized frames of one utterance and their context expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUtt {
    pub raw: Array2<f64>,
    pub expanded: Array2<f64>,
}

impl FrontendConfig {
    pub fn normalize(&self, f: &FeatureMatrix) -> Result<Array2<f64>> {
        Ok(stmvn(f, self.stmvn_window_s)?.frames)
    }

    pub fn prepare(&self, f: &FeatureMatrix) -> Result<PreparedUtt> {
        let raw = self.normalize(f)?;
        let expanded = context_expand(&raw.view(), self.half_window, self.n_dct)?;
        Ok(PreparedUtt { raw, expanded })
    }

    pub fn expanded_dim(&self, feature_dim: usize) -> usize {
        feature_dim * self.n_dct
    }
}
