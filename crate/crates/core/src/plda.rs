//! Two-covariance PLDA: EM training, generative verification scores and the
//! conversion into the quadratic pairwise score of [`crate::dplda`].

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::dplda::DpldaParams;
use crate::error::{Error, Result};
use crate::linalg::{sym_eig, symmetrize, Spd};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `y ~ N(mu, b)` per speaker, `x = y + e` with `e ~ N(0, w)` per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoCovPlda {
    pub mu: Array1<f64>,
    pub b: Array2<f64>,
    pub w: Array2<f64>,
}

impl TwoCovPlda {
    /// Symmetrizes `b` and `w`; requires `w` positive definite and `b`
    /// positive semi-definite.
    pub fn new(mu: Array1<f64>, b: Array2<f64>, w: Array2<f64>) -> Result<Self> {
        let d = mu.len();
        if b.dim() != (d, d) || w.dim() != (d, d) {
            return Err(Error::shape(format!(
                "mu has {d} entries but b is {:?} and w is {:?}",
                b.dim(),
                w.dim()
            )));
        }
        let b = symmetrize(&b);
        let w = symmetrize(&w);
        Spd::new(&w.view())
            .map_err(|_| Error::Model("within-class covariance is not positive definite".into()))?;
        let (vals, _) = sym_eig(&b.view());
        let scale = vals.iter().map(|v| v.abs()).fold(1.0, f64::max);
        if vals.iter().any(|&v| v < -1e-10 * scale) {
            return Err(Error::Model(
                "across-class covariance has a negative eigenvalue".into(),
            ));
        }
        Ok(Self { mu, b, w })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Total covariance of a single utterance.
    pub fn total(&self) -> Array2<f64> {
        &self.b + &self.w
    }
}

fn gaussian_log_density(x: &ArrayView1<f64>, cov: &Spd) -> f64 {
    let z = cov.solve_vec(x);
    -0.5 * (x.len() as f64 * LN_2PI + cov.log_det() + x.dot(&z))
}

fn check_dims(m: &TwoCovPlda, e: &ArrayView1<f64>, t: &ArrayView1<f64>) -> Result<()> {
    if e.len() != m.dim() || t.len() != m.dim() {
        return Err(Error::shape(format!(
            "vectors of length {} and {} scored by a {}-dim model",
            e.len(),
            t.len(),
            m.dim()
        )));
    }
    Ok(())
}

/// `log p(e, t | same) − log p(e, t | different)` from explicit Gaussian densities.
pub fn plda_llr(m: &TwoCovPlda, e: &ArrayView1<f64>, t: &ArrayView1<f64>) -> Result<f64> {
    check_dims(m, e, t)?;
    let d = m.dim();
    let total = m.total();
    let mut joint = Array2::zeros((2 * d, 2 * d));
    for i in 0..d {
        for j in 0..d {
            joint[[i, j]] = total[[i, j]];
            joint[[d + i, d + j]] = total[[i, j]];
            joint[[i, d + j]] = m.b[[i, j]];
            joint[[d + i, j]] = m.b[[i, j]];
        }
    }
    let joint = Spd::new(&joint.view())?;
    let marginal = Spd::new(&total.view())?;
    let stack = |a: &ArrayView1<f64>, b: &ArrayView1<f64>| {
        let mut v = Array1::zeros(2 * d);
        for i in 0..d {
            v[i] = a[i] - m.mu[i];
            v[d + i] = b[i] - m.mu[i];
        }
        v
    };
    let same = 0.5
        * (gaussian_log_density(&stack(e, t).view(), &joint)
            + gaussian_log_density(&stack(t, e).view(), &joint));
    let ec = e - &m.mu;
    let tc = t - &m.mu;
    let diff =
        gaussian_log_density(&ec.view(), &marginal) + gaussian_log_density(&tc.view(), &marginal);
    Ok(same - diff)
}

/// Expands the two-Gaussian score into `(Λ, Γ, c, k)`.
pub fn to_dplda(m: &TwoCovPlda) -> Result<DpldaParams> {
    let total = m.total();
    let t_spd = Spd::new(&total.view())?;
    let plus = Spd::new(&(&total + &m.b).view())?;
    let minus = Spd::new(&m.w.view())?;
    let plus_inv = plus.inverse();
    let minus_inv = minus.inverse();
    let p = 0.5 * (&plus_inv + &minus_inv);
    let q = 0.5 * (&plus_inv - &minus_inv);
    let lambda = symmetrize(&(-0.5 * &q));
    let gamma = symmetrize(&(0.5 * (&t_spd.inverse() - &p)));
    let k0 = t_spd.log_det() - 0.5 * plus.log_det() - 0.5 * minus.log_det();
    let lg = &lambda + &gamma;
    let c = -2.0 * lg.dot(&m.mu);
    let k = k0 + 2.0 * m.mu.dot(&lg.dot(&m.mu));
    DpldaParams::new(lambda, gamma, c, k)
}

#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: TwoCovPlda,
    /// Training log-likelihood before each M-step and after the last one.
    pub log_likelihood: Vec<f64>,
}

struct SpeakerStats {
    n: usize,
    mean: Array1<f64>,
    scatter: Array2<f64>,
}

fn speaker_stats(vectors: &ArrayView2<f64>, labels: &[usize]) -> Result<Vec<SpeakerStats>> {
    if vectors.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} vectors but {} labels",
            vectors.nrows(),
            labels.len()
        )));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("training vectors contain non-finite values"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::input(format!(
            "PLDA needs at least two speakers, got {}",
            groups.len()
        )));
    }
    if groups.values().all(|g| g.len() < 2) {
        return Err(Error::input(
            "PLDA needs at least one speaker with two or more utterances",
        ));
    }
    Ok(groups
        .values()
        .map(|idx| {
            let x = vectors.select(Axis(0), idx);
            let mean = x.mean_axis(Axis(0)).expect("non-empty group");
            let centered = &x - &mean;
            SpeakerStats {
                n: idx.len(),
                mean,
                scatter: centered.t().dot(&centered),
            }
        })
        .collect())
}

fn log_likelihood(m: &TwoCovPlda, stats: &[SpeakerStats]) -> Result<f64> {
    let d = m.dim() as f64;
    let w = Spd::new(&m.w.view())?;
    let w_inv = w.inverse();
    let mut ll = 0.0;
    for s in stats {
        let n = s.n as f64;
        let cov = Spd::new(&(&m.w + &(n * &m.b)).view())?;
        let z = n.sqrt() * (&s.mean - &m.mu);
        ll += gaussian_log_density(&z.view(), &cov);
        ll -= 0.5 * (n - 1.0) * (d * LN_2PI + w.log_det());
        ll -= 0.5 * (&w_inv * &s.scatter).sum();
    }
    Ok(ll)
}

fn initial_model(stats: &[SpeakerStats], d: usize) -> Result<TwoCovPlda> {
    let total_n: usize = stats.iter().map(|s| s.n).sum();
    let mut mu = Array1::zeros(d);
    for s in stats {
        mu.scaled_add(s.n as f64 / total_n as f64, &s.mean);
    }
    let within_n: usize = stats.iter().map(|s| s.n - 1).sum();
    let mut w = Array2::zeros((d, d));
    for s in stats {
        w += &s.scatter;
    }
    w /= within_n as f64;
    let ridge = 1e-6 * (w.diag().sum() / d as f64).max(1e-12);
    w.diag_mut().mapv_inplace(|v| v + ridge);

    let mut between = Array2::<f64>::zeros((d, d));
    let mut inv_n = 0.0;
    for s in stats {
        let c = &s.mean - &mu;
        between += &c
            .view()
            .insert_axis(Axis(1))
            .dot(&c.view().insert_axis(Axis(0)));
        inv_n += 1.0 / s.n as f64;
    }
    between /= stats.len() as f64;
    inv_n /= stats.len() as f64;
    let (vals, vecs) = sym_eig(&(&between - &(inv_n * &w)).view());
    let floor = 1e-3 * w.diag().sum() / d as f64;
    let clipped = vals.mapv(|v| v.max(floor));
    let b = vecs.dot(&Array2::from_diag(&clipped)).dot(&vecs.t());
    TwoCovPlda::new(mu, b, w)
}

/// EM for the two-covariance model.
pub fn train_plda(vectors: &ArrayView2<f64>, labels: &[usize], iters: usize) -> Result<PldaFit> {
    let stats = speaker_stats(vectors, labels)?;
    let d = vectors.ncols();
    let n_total: usize = stats.iter().map(|s| s.n).sum();
    let mut model = initial_model(&stats, d)?;
    let mut history = Vec::with_capacity(iters + 1);

    for _ in 0..iters {
        history.push(log_likelihood(&model, &stats)?);
        let mut sum_ey = Array1::<f64>::zeros(d);
        let mut sum_eyy = Array2::<f64>::zeros((d, d));
        let mut w_acc = Array2::<f64>::zeros((d, d));
        for s in &stats {
            let n = s.n as f64;
            let gain_t = Spd::new(&(&model.b + &(&model.w / n)).view())?.solve_mat(&model.b.view());
            // gain_t = (B + W/n)⁻¹ B, so the gain is its transpose
            let cov = symmetrize(&(&model.b - &model.b.dot(&gain_t)));
            let ey = &model.mu + &gain_t.t().dot(&(&s.mean - &model.mu));
            let outer = ey
                .view()
                .insert_axis(Axis(1))
                .dot(&ey.view().insert_axis(Axis(0)));
            let eyy = &cov + &outer;
            sum_ey += &ey;
            sum_eyy += &eyy;
            // Σᵢ (xᵢ − y)(xᵢ − y)ᵀ in expectation
            let dm = &s.mean - &ey;
            let dm_outer = dm
                .view()
                .insert_axis(Axis(1))
                .dot(&dm.view().insert_axis(Axis(0)));
            w_acc += &s.scatter;
            w_acc.scaled_add(n, &(&dm_outer + &cov));
        }
        let s_count = stats.len() as f64;
        let mu = sum_ey / s_count;
        let mu_outer = mu
            .view()
            .insert_axis(Axis(1))
            .dot(&mu.view().insert_axis(Axis(0)));
        let b = symmetrize(&(&sum_eyy / s_count - &mu_outer));
        let w = symmetrize(&(w_acc / n_total as f64));
        model = TwoCovPlda::new(mu, b, w)?;
    }
    history.push(log_likelihood(&model, &stats)?);
    Ok(PldaFit {
        model,
        log_likelihood: history,
    })
}
