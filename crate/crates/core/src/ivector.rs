//! Total-variability i-vector extraction and the mean / length-norm / LDA
//! chain that turns raw i-vectors into the reference embeddings.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{DiagGmm, SuffStats};
use crate::linalg::{length_norm, sym_eig, Spd};

pub const DEFAULT_IVECTOR_DIM: usize = 600;
pub const DEFAULT_LDA_DIM: usize = 250;

/// Total-variability matrix, `(C·D) × R`, rows ordered component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TvModel {
    pub t: Array2<f64>,
}

impl TvModel {
    pub fn new(t: Array2<f64>) -> Result<Self> {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(
                "total-variability matrix is not finite".into(),
            ));
        }
        if t.ncols() > t.nrows() {
            return Err(Error::Model(format!(
                "rank {} exceeds supervector dimension {}",
                t.ncols(),
                t.nrows()
            )));
        }
        Ok(Self { t })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn extractor(&self, ubm: &DiagGmm) -> Result<IvectorExtractor> {
        IvectorExtractor::new(self, ubm)
    }
}

/// Gaussian posterior of the latent factor for one utterance.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    /// `½ bᵀL⁻¹b − ½ log|L|`, the T-dependent part of the marginal log-likelihood.
    pub evidence: f64,
}

/// Precomputed quantities for repeated extraction with one (T, UBM) pair.
pub struct IvectorExtractor {
    c: usize,
    d: usize,
    r: usize,
    means: Array2<f64>,
    /// `Σ⁻¹ T`, `(C·D) × R`.
    prec_t: Array2<f64>,
    /// `T_cᵀ Σ_c⁻¹ T_c` per component.
    tt: Vec<Array2<f64>>,
}

impl IvectorExtractor {
    pub fn new(tv: &TvModel, ubm: &DiagGmm) -> Result<Self> {
        let (c, d) = (ubm.n_components(), ubm.dim());
        if tv.t.nrows() != c * d {
            return Err(Error::shape(format!(
                "T has {} rows, UBM supervector has {}",
                tv.t.nrows(),
                c * d
            )));
        }
        let r = tv.rank();
        let mut prec_t = tv.t.clone();
        for k in 0..c {
            for j in 0..d {
                let p = 1.0 / ubm.vars[[k, j]];
                prec_t.row_mut(k * d + j).mapv_inplace(|v| v * p);
            }
        }
        let tt = (0..c)
            .map(|k| {
                let rows = s![k * d..(k + 1) * d, ..];
                tv.t.slice(rows).t().dot(&prec_t.slice(rows))
            })
            .collect();
        Ok(Self {
            c,
            d,
            r,
            means: ubm.means.clone(),
            prec_t,
            tt,
        })
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    /// `f − N·m`, flattened component-major.
    pub fn centered_first_order(&self, s: &SuffStats) -> Result<Array1<f64>> {
        if s.n.len() != self.c || s.f.dim() != (self.c, self.d) {
            return Err(Error::shape(format!(
                "stats are {}x{}, extractor expects {}x{}",
                s.f.nrows(),
                s.f.ncols(),
                self.c,
                self.d
            )));
        }
        if !s.is_finite() {
            return Err(Error::input("non-finite sufficient statistics"));
        }
        let mut out = Array1::zeros(self.c * self.d);
        for k in 0..self.c {
            for j in 0..self.d {
                out[k * self.d + j] = s.f[[k, j]] - s.n[k] * self.means[[k, j]];
            }
        }
        Ok(out)
    }

    /// Precision of the latent posterior, `I + Σ_c n_c T_cᵀ Σ_c⁻¹ T_c`.
    fn precision(&self, n: &ArrayView1<f64>) -> Array2<f64> {
        let mut l = Array2::eye(self.r);
        for (k, tt) in self.tt.iter().enumerate() {
            if n[k] != 0.0 {
                l.scaled_add(n[k], tt);
            }
        }
        l
    }

    pub fn posterior(&self, s: &SuffStats) -> Result<LatentPosterior> {
        let fc = self.centered_first_order(s)?;
        let b = self.prec_t.t().dot(&fc);
        let spd = Spd::new(&self.precision(&s.n.view()).view())?;
        let mean = spd.solve_vec(&b.view());
        let evidence = 0.5 * b.dot(&mean) - 0.5 * spd.log_det();
        Ok(LatentPosterior {
            mean,
            cov: spd.inverse(),
            evidence,
        })
    }

    /// Posterior mean `(I + TᵀΣ⁻¹NT)⁻¹ TᵀΣ⁻¹(f − N·m)`.
    pub fn extract(&self, s: &SuffStats) -> Result<Array1<f64>> {
        let fc = self.centered_first_order(s)?;
        let b = self.prec_t.t().dot(&fc);
        let spd = Spd::new(&self.precision(&s.n.view()).view())?;
        Ok(spd.solve_vec(&b.view()))
    }
}

/// Convenience wrapper around [`IvectorExtractor::extract`].
pub fn extract_ivector(tv: &TvModel, ubm: &DiagGmm, s: &SuffStats) -> Result<Array1<f64>> {
    tv.extractor(ubm)?.extract(s)
}

#[derive(Debug, Clone, Copy)]
pub struct TvConfig {
    pub rank: usize,
    pub iterations: usize,
    /// Standard deviation of the random initialization, relative to the UBM
    /// standard deviation of each supervector coordinate.
    pub init_scale: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            rank: 100,
            iterations: 10,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TvFit {
    pub model: TvModel,
    /// Summed per-utterance evidence before each iteration, plus the final value.
    pub objective: Vec<f64>,
}

/// Plain EM for the total-variability matrix with the UBM covariances held fixed.
pub fn train_tv<R: Rng + ?Sized>(
    stats: &[SuffStats],
    ubm: &DiagGmm,
    cfg: &TvConfig,
    rng: &mut R,
) -> Result<TvFit> {
    if stats.is_empty() {
        return Err(Error::input("no statistics to train on"));
    }
    if cfg.rank == 0 {
        return Err(Error::input("i-vector rank must be at least 1"));
    }
    let (c, d, r) = (ubm.n_components(), ubm.dim(), cfg.rank);
    let mut t = Array2::from_shape_fn((c * d, r), |(row, _)| {
        let z: f64 = StandardNormal.sample(rng);
        z * cfg.init_scale * ubm.vars[[row / d, row % d]].sqrt()
    });
    let mut objective = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let model = TvModel::new(t.clone())?;
        let ext = model.extractor(ubm)?;
        let posts: Vec<(Array1<f64>, LatentPosterior)> = stats
            .par_iter()
            .map(|s| Ok((ext.centered_first_order(s)?, ext.posterior(s)?)))
            .collect::<Result<_>>()?;
        objective.push(posts.iter().map(|(_, p)| p.evidence).sum());

        let mut acc_a = vec![Array2::<f64>::zeros((r, r)); c];
        let mut acc_c = Array2::<f64>::zeros((c * d, r));
        for (s, (fc, post)) in stats.iter().zip(&posts) {
            let second = &post.cov + &outer(&post.mean.view(), &post.mean.view());
            for (k, a) in acc_a.iter_mut().enumerate() {
                if s.n[k] != 0.0 {
                    a.scaled_add(s.n[k], &second);
                }
            }
            acc_c += &outer(&fc.view(), &post.mean.view());
        }
        let updated: Vec<Option<Array2<f64>>> = acc_a
            .par_iter()
            .enumerate()
            .map(|(k, a)| {
                let spd = Spd::new(&a.view()).ok()?;
                let ck = acc_c.slice(s![k * d..(k + 1) * d, ..]);
                // T_c = C_c A_c⁻¹  ⇔  T_cᵀ = A_c⁻¹ C_cᵀ
                Some(spd.solve_mat(&ck.t()).reversed_axes())
            })
            .collect();
        for (k, tk) in updated.into_iter().enumerate() {
            if let Some(tk) = tk {
                t.slice_mut(s![k * d..(k + 1) * d, ..]).assign(&tk);
            }
        }
    }
    let model = TvModel::new(t)?;
    let ext = model.extractor(ubm)?;
    let last: f64 = stats
        .par_iter()
        .map(|s| ext.posterior(s).map(|p| p.evidence))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    objective.push(last);
    Ok(TvFit { model, objective })
}

fn outer(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Centering and LDA projection fitted on training i-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct IvecPrep {
    pub global_mean: Array1<f64>,
    /// `R × R'`
    pub lda: Array2<f64>,
}

impl IvecPrep {
    pub fn input_dim(&self) -> usize {
        self.lda.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.ncols()
    }

    /// `lengthnorm(ldaᵀ · lengthnorm(w − mean))`.
    pub fn apply(&self, w: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if w.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "prep expects {} dims, got {}",
                self.input_dim(),
                w.len()
            )));
        }
        let centered = length_norm(&(w - &self.global_mean).view());
        Ok(length_norm(&self.lda.t().dot(&centered).view()))
    }

    pub fn apply_rows(&self, w: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((w.nrows(), self.output_dim()));
        for (i, row) in w.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.apply(&row)?);
        }
        Ok(out)
    }
}

/// Class scatter matrices `(between, within)`, both normalized by the sample count.
pub fn class_scatter(x: &ArrayView2<f64>, labels: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let (m, r) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut sb = Array2::zeros((r, r));
    let mut sw = Array2::zeros((r, r));
    for rows in groups.values() {
        let sel = x.select(Axis(0), rows);
        let cm = sel.mean_axis(Axis(0)).expect("non-empty group");
        let dm = &cm - &mean;
        sb.scaled_add(rows.len() as f64, &outer(&dm.view(), &dm.view()));
        let dev = &sel - &cm;
        sw += &dev.t().dot(&dev);
    }
    (sb / m as f64, sw / m as f64)
}

/// Fits the global mean and an LDA projection on mean-subtracted,
/// length-normalized i-vectors.
pub fn fit_prep(ivectors: &ArrayView2<f64>, labels: &[usize], out_dim: usize) -> Result<IvecPrep> {
    let (m, r) = ivectors.dim();
    if labels.len() != m {
        return Err(Error::shape(format!(
            "{m} vectors but {} labels",
            labels.len()
        )));
    }
    let n_classes = labels
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if out_dim == 0 || n_classes < out_dim + 1 {
        return Err(Error::input(format!(
            "LDA to {out_dim} dims needs at least {} classes, got {n_classes}",
            out_dim + 1
        )));
    }
    if out_dim > r {
        return Err(Error::input(format!(
            "cannot project {r} dims up to {out_dim}"
        )));
    }
    let global_mean = ivectors.mean_axis(Axis(0)).expect("non-empty");
    let mut x = ivectors - &global_mean;
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    let (sb, mut sw) = class_scatter(&x.view(), labels);
    let reg = 1e-6 * sw.diag().sum() / r as f64;
    for i in 0..r {
        sw[[i, i]] += reg.max(1e-12);
    }
    let spd = Spd::new(&sw.view())?;
    let (_, u) = sym_eig(&spd.whiten(&sb.view()).view());
    let top = u.slice(s![.., ..out_dim]).to_owned();
    let lda = spd.solve_upper_t(&top.view());
    Ok(IvecPrep { global_mean, lda })
}
