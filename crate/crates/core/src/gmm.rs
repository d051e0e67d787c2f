//! Diagonal-covariance GMM-UBM: EM training, frame posteriors and
//! zeroth/first-order sufficient statistics.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_COMPONENTS: usize = 2048;
/// Variance floor as a fraction of the global per-dimension variance.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    pub weights: Array1<f64>,
    /// `C × D`
    pub means: Array2<f64>,
    /// `C × D` diagonal covariances.
    pub vars: Array2<f64>,
}

/// Per-utterance zeroth and first order statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    /// Soft frame counts, length `C`.
    pub n: Array1<f64>,
    /// Responsibility-weighted frame sums, `C × D`.
    pub f: Array2<f64>,
    pub frames_total: usize,
}

impl SuffStats {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            n: Array1::zeros(c),
            f: Array2::zeros((c, d)),
            frames_total: 0,
        }
    }

    pub fn n_components(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.n.iter().chain(self.f.iter()).all(|v| v.is_finite())
    }
}

/// Result of UBM training, including the per-iteration log-likelihood.
#[derive(Debug, Clone)]
pub struct UbmFit {
    pub gmm: DiagGmm,
    /// Total data log-likelihood before each EM iteration, plus the final value.
    pub log_likelihood: Vec<f64>,
}

impl DiagGmm {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, vars: Array2<f64>) -> Result<Self> {
        let c = weights.len();
        if means.nrows() != c || vars.dim() != means.dim() {
            return Err(Error::shape(format!(
                "weights {c}, means {:?}, vars {:?}",
                means.dim(),
                vars.dim()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Model(
                "mixture weights must form a distribution".into(),
            ));
        }
        if vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Model("variances must be positive and finite".into()));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("means must be finite".into()));
        }
        Ok(Self {
            weights,
            means,
            vars,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Per-frame, per-component joint log densities `log w_c + log N(x_t; m_c, v_c)`.
    pub fn component_log_densities(&self, frames: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "model has dimension {}, frames have {}",
                self.dim(),
                frames.ncols()
            )));
        }
        let d = self.dim() as f64;
        let prec = self.vars.mapv(|v| 1.0 / v);
        let mean_prec = &self.means * &prec;
        let consts: Array1<f64> = (0..self.n_components())
            .map(|c| {
                let logdet: f64 = self.vars.row(c).iter().map(|v| v.ln()).sum();
                let quad: f64 = self.means.row(c).dot(&mean_prec.row(c));
                self.weights[c].ln() - 0.5 * (d * (2.0 * PI).ln() + logdet + quad)
            })
            .collect();
        let sq = frames.mapv(|v| v * v);
        let mut out = frames.dot(&mean_prec.t());
        out -= &(sq.dot(&prec.t()) * 0.5);
        out += &consts;
        Ok(out)
    }

    /// Frame posteriors `T × C`, computed in log space.
    pub fn responsibilities(&self, frames: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.posteriors_and_loglik(frames)?.0)
    }

    /// Total log-likelihood of the frames.
    pub fn log_likelihood(&self, frames: &ArrayView2<f64>) -> Result<f64> {
        Ok(self.posteriors_and_loglik(frames)?.1)
    }

    fn posteriors_and_loglik(&self, frames: &ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
        let mut lp = self.component_log_densities(frames)?;
        let mut total = 0.0;
        for mut row in lp.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
            total += max + s.ln();
        }
        Ok((lp, total))
    }

    /// Statistics of an utterance computed with this model's posteriors.
    pub fn utterance_stats(&self, frames: &ArrayView2<f64>) -> Result<SuffStats> {
        let resp = self.responsibilities(frames)?;
        sufficient_stats(&resp.view(), frames)
    }
}

/// Pools frame posteriors into zeroth and first order statistics.
pub fn sufficient_stats(resp: &ArrayView2<f64>, frames: &ArrayView2<f64>) -> Result<SuffStats> {
    if resp.nrows() != frames.nrows() {
        return Err(Error::shape(format!(
            "{} posterior rows for {} frames",
            resp.nrows(),
            frames.nrows()
        )));
    }
    if resp.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::input("responsibilities must be non-negative"));
    }
    Ok(SuffStats {
        n: resp.sum_axis(Axis(0)),
        f: resp.t().dot(frames),
        frames_total: frames.nrows(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct UbmConfig {
    pub components: usize,
    pub iterations: usize,
    /// Fraction of the global per-dimension variance used as floor.
    pub variance_floor: f64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        Self {
            components: 64,
            iterations: 10,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

/// EM training from `C` randomly chosen distinct frames, the global variance
/// and uniform weights.
pub fn train_ubm<R: Rng + ?Sized>(
    frames: &ArrayView2<f64>,
    cfg: &UbmConfig,
    rng: &mut R,
) -> Result<UbmFit> {
    let (t, d) = frames.dim();
    let c = cfg.components;
    if c == 0 {
        return Err(Error::input("UBM needs at least one component"));
    }
    if t < c {
        return Err(Error::input(format!(
            "{t} frames cannot support {c} components"
        )));
    }
    let global_var = frames.var_axis(Axis(0), 0.0);
    let floor = global_var.mapv(|v| (v * cfg.variance_floor).max(1e-12));

    let picks = rand::seq::index::sample(rng, t, c);
    let mut means = Array2::zeros((c, d));
    for (row, idx) in picks.iter().enumerate() {
        means.row_mut(row).assign(&frames.row(idx));
    }
    let init_var = Array1::from_iter(global_var.iter().zip(&floor).map(|(v, f)| v.max(*f)));
    let mut gmm = DiagGmm {
        weights: Array1::from_elem(c, 1.0 / c as f64),
        means,
        vars: Array2::from_shape_fn((c, d), |(_, j)| init_var[j]),
    };

    let mut history = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let (resp, ll) = gmm.posteriors_and_loglik(frames)?;
        history.push(ll);
        let n = resp.sum_axis(Axis(0));
        let f = resp.t().dot(frames);
        let s = resp.t().dot(&frames.mapv(|v| v * v));
        for k in 0..c {
            gmm.weights[k] = n[k] / t as f64;
            if n[k] <= 1e-10 {
                continue;
            }
            for j in 0..d {
                let m = f[[k, j]] / n[k];
                let v = s[[k, j]] / n[k] - m * m;
                gmm.means[[k, j]] = m;
                gmm.vars[[k, j]] = v.max(floor[j]);
            }
        }
        let wsum = gmm.weights.sum();
        gmm.weights.mapv_inplace(|w| w / wsum);
    }
    history.push(gmm.log_likelihood(frames)?);
    Ok(UbmFit {
        gmm,
        log_likelihood: history,
    })
}
