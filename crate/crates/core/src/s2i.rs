//! Statistics-to-i-vector network: MAP-adapted mean supervectors, a fixed
//! PCA projection and a tanh MLP with a length-normalized output.

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::f2s::StatsGrad;
use crate::gmm::{DiagGmm, SuffStats};
use crate::linalg::sym_eig;
use crate::netcore::{sgd_step, Activation, FlatParams, Mlp};

pub const DEFAULT_RELEVANCE: f64 = 16.0;
pub const FULL_PCA_DIM: usize = 4000;
pub const FULL_HIDDEN: [usize; 2] = [600, 600];

fn check_stats(ubm: &DiagGmm, s: &SuffStats) -> Result<()> {
    if s.n_components() != ubm.n_components() || s.dim() != ubm.dim() {
        return Err(Error::shape(format!(
            "statistics for {}x{} do not match a {}x{} UBM",
            s.n_components(),
            s.dim(),
            ubm.n_components(),
            ubm.dim()
        )));
    }
    Ok(())
}

/// Concatenated `(f_c + r·m_c) / (n_c + r)`, component-major.
pub fn map_supervector(ubm: &DiagGmm, s: &SuffStats, r: f64) -> Result<Array1<f64>> {
    check_stats(ubm, s)?;
    if !(r > 0.0) {
        return Err(Error::input(format!(
            "relevance factor must be positive, got {r}"
        )));
    }
    let (c, d) = (ubm.n_components(), ubm.dim());
    let mut sv = Array1::zeros(c * d);
    for k in 0..c {
        let denom = s.n[k] + r;
        for j in 0..d {
            sv[k * d + j] = (s.f[[k, j]] + r * ubm.means[[k, j]]) / denom;
        }
    }
    Ok(sv)
}

/// dL/d(stats) from dL/d(supervector).
pub fn map_supervector_backward(
    ubm: &DiagGmm,
    s: &SuffStats,
    r: f64,
    grad_sv: &ArrayView1<f64>,
) -> Result<StatsGrad> {
    let sv = map_supervector(ubm, s, r)?;
    if grad_sv.len() != sv.len() {
        return Err(Error::shape(format!(
            "supervector gradient has {} entries, expected {}",
            grad_sv.len(),
            sv.len()
        )));
    }
    let (c, d) = (ubm.n_components(), ubm.dim());
    let mut out = StatsGrad::zeros(c, d);
    for k in 0..c {
        let inv = 1.0 / (s.n[k] + r);
        let mut dn = 0.0;
        for j in 0..d {
            let g = grad_sv[k * d + j];
            out.f[[k, j]] = g * inv;
            dn -= g * sv[k * d + j] * inv;
        }
        out.n[k] = dn;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// Orthonormal principal directions in columns.
    pub basis: Array2<f64>,
}

impl PcaModel {
    pub fn new(mean: Array1<f64>, basis: Array2<f64>) -> Result<Self> {
        if basis.nrows() != mean.len() {
            return Err(Error::shape(format!(
                "basis has {} rows but the mean has {} entries",
                basis.nrows(),
                mean.len()
            )));
        }
        Ok(Self { mean, basis })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "PCA expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(self.basis.t().dot(&(x - &self.mean)))
    }

    pub fn project_rows(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "PCA expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok((x - &self.mean).dot(&self.basis))
    }

    pub fn reconstruct(&self, z: &ArrayView1<f64>) -> Array1<f64> {
        self.basis.dot(z) + &self.mean
    }

    /// dL/dx from dL/d(projection).
    pub fn backward(&self, grad: &ArrayView1<f64>) -> Array1<f64> {
        self.basis.dot(grad)
    }
}

/// Top-`p` principal directions of the rows of `x`.
pub fn fit_pca(x: &ArrayView2<f64>, p: usize) -> Result<PcaModel> {
    let (m, dim) = x.dim();
    if p == 0 || p > m.min(dim) {
        return Err(Error::input(format!(
            "cannot keep {p} components of {m} vectors in {dim} dimensions"
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("m >= 1");
    let xc = x - &mean;
    let (vals, basis) = if m < dim {
        let (vals, u) = sym_eig(&xc.dot(&xc.t()).view());
        let mut basis = Array2::zeros((dim, p));
        for k in 0..p.min(vals.len()) {
            if vals[k] > 0.0 {
                let col = xc.t().dot(&u.column(k)) / vals[k].sqrt();
                basis.column_mut(k).assign(&col);
            }
        }
        (vals, basis)
    } else {
        let (vals, v) = sym_eig(&xc.t().dot(&xc).view());
        (vals, v.slice(ndarray::s![.., ..p]).to_owned())
    };
    let tol = 1e-10 * vals[0].max(f64::MIN_POSITIVE);
    if vals[p - 1] <= tol {
        return Err(Error::input(format!(
            "data has fewer than {p} directions with non-zero variance"
        )));
    }
    PcaModel::new(mean, basis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2iNet {
    net: Mlp,
}

impl S2iNet {
    pub fn new(net: Mlp) -> Result<Self> {
        let last = net.layers().last().expect("networks are non-empty");
        if last.activation != Activation::LinearLengthNorm {
            return Err(Error::input(
                "s2i network must end in a length-normalized linear layer",
            ));
        }
        Ok(Self { net })
    }

    /// Tanh hidden layers and a length-normalized linear output.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::LinearLengthNorm);
        Self::new(Mlp::random(&dims, &acts, rng)?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn embed_rows(&self, projected: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.predict(*projected)
    }
}

impl FlatParams for S2iNet {
    fn flat_len(&self) -> usize {
        self.net.flat_len()
    }

    fn extend_flat(&self, out: &mut Vec<f64>) {
        self.net.extend_flat(out)
    }

    fn load_flat(&mut self, src: &[f64]) -> Result<usize> {
        self.net.load_flat(src)
    }
}

/// Unit-norm embedding of one supervector.
pub fn s2i_extract(
    pca: &PcaModel,
    net: &S2iNet,
    supervector: &ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let z = pca.project(supervector)?;
    let out = net.net.predict(z.view().insert_axis(Axis(0)))?;
    Ok(out.row(0).to_owned())
}

/// Mean of `1 − yᵢᵀrᵢ` and its gradient with respect to `y`.
pub fn cosine_loss(
    outputs: &ArrayView2<f64>,
    refs: &ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if outputs.dim() != refs.dim() {
        return Err(Error::shape(format!(
            "outputs {:?} and references {:?} differ",
            outputs.dim(),
            refs.dim()
        )));
    }
    let m = outputs.nrows() as f64;
    let loss = (outputs * refs).sum_axis(Axis(1)).mapv(|c| 1.0 - c).sum() / m;
    Ok((loss, refs.mapv(|r| -r / m)))
}

#[derive(Debug, Clone)]
pub struct S2iConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l1_weight: f64,
    pub plateau_tolerance: f64,
}

impl Default for S2iConfig {
    fn default() -> Self {
        Self {
            hidden: FULL_HIDDEN.to_vec(),
            lr: 0.1,
            batch_size: 64,
            epochs: 50,
            l1_weight: 1e-6,
            plateau_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct S2iFit {
    pub net: S2iNet,
    /// Mean cosine distance on the training set: at initialization, then after each epoch.
    pub history: Vec<f64>,
}

impl S2iFit {
    pub fn final_loss(&self) -> f64 {
        *self
            .history
            .last()
            .expect("history starts with the initial loss")
    }
}

/// SGD with L1 regularization on the mean cosine distance to `refs`.
pub fn train_s2i<R: Rng + ?Sized>(
    inputs: &ArrayView2<f64>,
    refs: &ArrayView2<f64>,
    cfg: &S2iConfig,
    rng: &mut R,
) -> Result<S2iFit> {
    if inputs.nrows() != refs.nrows() || inputs.nrows() == 0 {
        return Err(Error::input(format!(
            "{} inputs but {} reference vectors",
            inputs.nrows(),
            refs.nrows()
        )));
    }
    for (i, r) in refs.rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !((n - 1.0).abs() < 1e-6) {
            return Err(Error::input(format!(
                "reference {i} has norm {n}, expected 1"
            )));
        }
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.l1_weight >= 0.0) {
        return Err(Error::Config(
            "s2i needs a positive batch size and learning rate".into(),
        ));
    }
    let mut net = S2iNet::random(inputs.ncols(), &cfg.hidden, refs.ncols(), rng)?;
    let eval =
        |net: &S2iNet| -> Result<f64> { Ok(cosine_loss(&net.embed_rows(inputs)?.view(), refs)?.0) };
    let mut history = vec![eval(&net)?];
    let mut params = net.to_flat();
    let mut lr = cfg.lr;
    let mut best = history[0];
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = inputs.select(Axis(0), chunk);
            let rb = refs.select(Axis(0), chunk);
            let trace = net.net.forward(xb.view())?;
            let (_, gy) = cosine_loss(&trace.output().view(), &rb.view())?;
            let (grads, _) = net.net.backward(&trace, gy.view())?;
            sgd_step(&mut params, &grads.to_flat(), lr, cfg.l1_weight)?;
            net.load_flat(&params)?;
        }
        let loss = eval(&net)?;
        debug!("s2i epoch {epoch}: cosine distance {loss:.6}, lr {lr}");
        if loss > best - cfg.plateau_tolerance * best.abs() {
            lr *= 0.5;
        }
        best = best.min(loss);
        history.push(loss);
    }
    Ok(S2iFit { net, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn ubm(g: &mut ChaCha8Rng) -> DiagGmm {
        DiagGmm::new(
            Array1::from_elem(3, 1.0 / 3.0),
            Array2::from_shape_fn((3, 2), |_| g.random_range(-1.0..1.0)),
            Array2::ones((3, 2)),
        )
        .unwrap()
    }

    #[test]
    fn zero_evidence_gives_ubm_means() {
        let mut g = rng(41);
        let u = ubm(&mut g);
        let sv = map_supervector(&u, &SuffStats::zeros(3, 2), DEFAULT_RELEVANCE).unwrap();
        assert_eq!(sv.to_vec(), u.means.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn large_counts_reach_the_data_mean() {
        let mut g = rng(42);
        let u = ubm(&mut g);
        let xbar = Array2::from_shape_fn((3, 2), |(c, d)| (c as f64) - 0.5 * d as f64);
        let mut s = SuffStats::zeros(3, 2);
        s.n.fill(1e6);
        s.f = &xbar * 1e6;
        let sv = map_supervector(&u, &s, 16.0).unwrap();
        for (a, b) in sv.iter().zip(xbar.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn adapted_means_lie_between_prior_and_data() {
        let mut g = rng(43);
        let u = ubm(&mut g);
        let mut s = SuffStats::zeros(3, 2);
        s.n = Array1::from_vec(vec![0.5, 10.0, 200.0]);
        s.f = Array2::from_shape_fn((3, 2), |(c, _)| s.n[c] * g.random_range(-3.0..3.0));
        let sv = map_supervector(&u, &s, 16.0).unwrap();
        for c in 0..3 {
            for d in 0..2 {
                let lo = u.means[[c, d]].min(s.f[[c, d]] / s.n[c]);
                let hi = u.means[[c, d]].max(s.f[[c, d]] / s.n[c]);
                assert!(sv[c * 2 + d] >= lo - 1e-12 && sv[c * 2 + d] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn exact_subspace_is_reconstructed() {
        let mut g = rng(44);
        let basis = Array2::from_shape_fn((12, 3), |_| g.random_range(-1.0..1.0));
        let offset = Array1::from_shape_fn(12, |_| g.random_range(-1.0..1.0));
        let coords = Array2::from_shape_fn((40, 3), |_| g.random_range(-1.0..1.0));
        let x = coords.dot(&basis.t()) + &offset;
        for dense in [false, true] {
            // both the Gram route (m < dim) and the covariance route
            let data = if dense {
                x.slice(ndarray::s![..8, ..]).to_owned()
            } else {
                x.clone()
            };
            let pca = fit_pca(&data.view(), 3).unwrap();
            let gram = pca.basis.t().dot(&pca.basis);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
                }
            }
            for row in data.rows() {
                let back = pca.reconstruct(&pca.project(&row).unwrap().view());
                assert!((&back - &row).mapv(f64::abs).sum() < 1e-8);
            }
        }
    }

    #[test]
    fn too_many_components_rejected() {
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * j) as f64);
        assert!(matches!(fit_pca(&x.view(), 6), Err(Error::Input(_))));
        assert!(matches!(fit_pca(&x.view(), 4), Err(Error::Input(_))));
    }

    #[test]
    fn extract_is_unit_norm_and_deterministic() {
        let mut g = rng(45);
        let pca = PcaModel::new(
            Array1::zeros(6),
            crate::linalg::orthonormal_columns(
                &Array2::from_shape_fn((6, 4), |_| g.random_range(-1.0..1.0)).view(),
            )
            .slice(ndarray::s![.., ..4])
            .to_owned(),
        )
        .unwrap();
        let net = S2iNet::random(4, &[5, 5], 3, &mut g).unwrap();
        let sv = Array1::from_shape_fn(6, |_| g.random_range(-2.0..2.0));
        let a = s2i_extract(&pca, &net, &sv.view()).unwrap();
        let b = s2i_extract(&pca, &net, &sv.view()).unwrap();
        assert_eq!(a, b);
        assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_loss_zero_at_match() {
        let r = Array2::from_shape_fn((3, 2), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        let r = &r / &crate::linalg::row_norms(&r.view()).insert_axis(Axis(1));
        assert!(cosine_loss(&r.view(), &r.view()).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn unnormalized_reference_rejected() {
        let mut g = rng(46);
        let x = Array2::ones((2, 3));
        let refs = Array2::zeros((2, 2));
        assert!(matches!(
            train_s2i(&x.view(), &refs.view(), &S2iConfig::default(), &mut g),
            Err(Error::Input(_))
        ));
    }
}
