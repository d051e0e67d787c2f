//! Features-to-statistics network: an MLP predicting UBM responsibilities
//! from context-expanded frames, followed by exact statistics pooling.

use log::debug;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::{sufficient_stats, SuffStats};
use crate::netcore::{sgd_step, Activation, FlatParams, Mlp, MlpGrads, Trace};

pub const FULL_HIDDEN: [usize; 4] = [1500; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct F2sNet {
    net: Mlp,
}

impl F2sNet {
    /// Wraps a network whose last layer is a softmax.
    pub fn new(net: Mlp) -> Result<Self> {
        let last = net.layers().last().expect("networks are non-empty");
        if last.activation != Activation::Softmax {
            return Err(Error::input("f2s network must end in a softmax layer"));
        }
        Ok(Self { net })
    }

    /// Sigmoid hidden layers of the given widths and a softmax over `components`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        components: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(components);
        let mut acts = vec![Activation::Sigmoid; hidden.len()];
        acts.push(Activation::Softmax);
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

    pub fn n_components(&self) -> usize {
        self.net.output_dim()
    }

    pub fn responsibilities(&self, expanded: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.predict(*expanded)
    }
}

impl FlatParams for F2sNet {
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

#[derive(Debug, Clone)]
pub struct F2sConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_frames: usize,
    pub epochs: usize,
    /// Relative improvement of the epoch loss below which the rate is halved.
    pub plateau_tolerance: f64,
}

impl Default for F2sConfig {
    fn default() -> Self {
        Self {
            hidden: FULL_HIDDEN.to_vec(),
            lr: 0.1,
            batch_frames: 512,
            epochs: 10,
            plateau_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct F2sFit {
    pub net: F2sNet,
    /// Mean per-frame cross-entropy seen during each epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean per-frame cross-entropy of the returned network on all frames.
    pub final_loss: f64,
}

/// Mean of `−Σ_c t_c log y_c` over rows.
pub fn soft_cross_entropy(pred: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(targets.iter())
        .filter(|(_, &t)| t > 0.0)
        .map(|(&y, &t)| -t * y.max(f64::MIN_POSITIVE).ln())
        .sum();
    total / pred.nrows() as f64
}

fn stack_rows(parts: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// SGD on the frame-level cross-entropy against soft UBM posteriors.
pub fn train_f2s<R: Rng + ?Sized>(
    expanded: &[Array2<f64>],
    targets: &[Array2<f64>],
    cfg: &F2sConfig,
    rng: &mut R,
) -> Result<F2sFit> {
    if expanded.is_empty() || expanded.len() != targets.len() {
        return Err(Error::input(format!(
            "{} feature matrices but {} target matrices",
            expanded.len(),
            targets.len()
        )));
    }
    for (i, (x, t)) in expanded.iter().zip(targets).enumerate() {
        if x.nrows() != t.nrows() {
            return Err(Error::input(format!(
                "utterance {i}: {} frames but {} target rows",
                x.nrows(),
                t.nrows()
            )));
        }
        if t.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::input(format!(
                "utterance {i}: negative or NaN target"
            )));
        }
        if t.rows().into_iter().any(|r| (r.sum() - 1.0).abs() > 1e-6) {
            return Err(Error::input(format!(
                "utterance {i}: target rows must sum to one"
            )));
        }
    }
    if cfg.batch_frames == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(
            "f2s needs a positive batch size and learning rate".into(),
        ));
    }
    let x = stack_rows(expanded)?;
    let t = stack_rows(targets)?;
    let components = t.ncols();
    let mut net = F2sNet::random(x.ncols(), &cfg.hidden, components, rng)?;
    let mut params = net.to_flat();
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..x.nrows()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_frames) {
            let xb = x.select(Axis(0), chunk);
            let tb = t.select(Axis(0), chunk);
            let trace = net.net.forward(xb.view())?;
            let y = trace.output();
            sum += soft_cross_entropy(&y.view(), &tb.view()) * chunk.len() as f64;
            let dz = (y - &tb) / chunk.len() as f64;
            let (grads, _) = net.net.backward_from_logits(&trace, dz.view())?;
            sgd_step(&mut params, &grads.to_flat(), lr, 0.0)?;
            net.load_flat(&params)?;
        }
        let loss = sum / x.nrows() as f64;
        debug!("f2s epoch {epoch}: loss {loss:.6}, lr {lr}");
        if loss > best - cfg.plateau_tolerance * best.abs() {
            lr *= 0.5;
        }
        best = best.min(loss);
        epoch_loss.push(loss);
    }
    let pred = net.responsibilities(&x.view())?;
    let final_loss = soft_cross_entropy(&pred.view(), &t.view());
    Ok(F2sFit {
        net,
        epoch_loss,
        final_loss,
    })
}

/// dL/dN and dL/dF for a scalar function of the statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsGrad {
    pub n: Array1<f64>,
    pub f: Array2<f64>,
}

impl StatsGrad {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            n: Array1::zeros(c),
            f: Array2::zeros((c, d)),
        }
    }
}

/// Network activations of one utterance together with its statistics.
#[derive(Debug, Clone)]
pub struct F2sActivations {
    trace: Trace,
    pub stats: SuffStats,
}

impl F2sActivations {
    pub fn stored_values(&self) -> usize {
        self.trace.stored_values()
    }
}

fn check_frames(expanded: &ArrayView2<f64>, raw: &ArrayView2<f64>) -> Result<()> {
    if expanded.nrows() != raw.nrows() {
        return Err(Error::input(format!(
            "{} expanded frames but {} raw frames",
            expanded.nrows(),
            raw.nrows()
        )));
    }
    Ok(())
}

/// Forward pass keeping everything needed for [`f2s_backward`].
pub fn f2s_forward(
    net: &F2sNet,
    expanded: &ArrayView2<f64>,
    raw: &ArrayView2<f64>,
) -> Result<F2sActivations> {
    check_frames(expanded, raw)?;
    let trace = net.net.forward(*expanded)?;
    let stats = sufficient_stats(&trace.output().view(), raw)?;
    Ok(F2sActivations { trace, stats })
}

/// Statistics from predicted responsibilities and the raw frames.
pub fn f2s_stats(
    net: &F2sNet,
    expanded: &ArrayView2<f64>,
    raw: &ArrayView2<f64>,
) -> Result<SuffStats> {
    Ok(f2s_forward(net, expanded, raw)?.stats)
}

/// Parameter gradients given dL/d(stats).
pub fn f2s_backward(
    net: &F2sNet,
    acts: &F2sActivations,
    raw: &ArrayView2<f64>,
    grad: &StatsGrad,
) -> Result<MlpGrads> {
    let c = net.n_components();
    if grad.n.len() != c || grad.f.dim() != (c, raw.ncols()) {
        return Err(Error::shape(format!(
            "statistics gradient {}/{:?} does not match {c} components of dim {}",
            grad.n.len(),
            grad.f.dim(),
            raw.ncols()
        )));
    }
    let mut dresp = raw.dot(&grad.f.t());
    dresp += &grad.n;
    Ok(net.net.backward(&acts.trace, dresp.view())?.0)
}

/// Recomputes the forward pass of one utterance and backpropagates.
pub fn f2s_stats_backward(
    net: &F2sNet,
    expanded: &ArrayView2<f64>,
    raw: &ArrayView2<f64>,
    grad: &StatsGrad,
) -> Result<MlpGrads> {
    let acts = f2s_forward(net, expanded, raw)?;
    f2s_backward(net, &acts, raw, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::DiagGmm;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: usize, c: usize, g: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| g.random_range(-1.0..1.0))
    }

    #[test]
    fn conservation_for_untrained_net() {
        let mut g = rng(31);
        let net = F2sNet::random(6, &[5], 4, &mut g).unwrap();
        let x = random_matrix(20, 6, &mut g);
        let raw = random_matrix(20, 3, &mut g);
        let s = f2s_stats(&net, &x.view(), &raw.view()).unwrap();
        assert!((s.n.sum() - 20.0).abs() < 1e-12);
        let fsum = s.f.sum_axis(Axis(0));
        let xsum = raw.sum_axis(Axis(0));
        for (a, b) in fsum.iter().zip(xsum.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_count_mismatch_is_input_error() {
        let mut g = rng(32);
        let net = F2sNet::random(2, &[3], 2, &mut g).unwrap();
        let r = f2s_stats(
            &net,
            &Array2::zeros((4, 2)).view(),
            &Array2::zeros((5, 1)).view(),
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn non_softmax_output_rejected() {
        let mut g = rng(33);
        let mlp = Mlp::random(&[2, 3], &[Activation::Tanh], &mut g).unwrap();
        assert!(F2sNet::new(mlp).is_err());
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut g = rng(34);
        let q = Array1::from_vec(vec![0.5, 0.3, 0.15, 0.05]);
        let utts: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(300, 5, &mut g)).collect();
        let targets: Vec<Array2<f64>> = utts
            .iter()
            .map(|u| Array2::from_shape_fn((u.nrows(), 4), |(_, c)| q[c]))
            .collect();
        let cfg = F2sConfig {
            hidden: vec![8],
            lr: 0.5,
            batch_frames: 64,
            epochs: 20,
            plateau_tolerance: 1e-3,
        };
        let fit = train_f2s(&utts, &targets, &cfg, &mut g).unwrap();
        let x = stack_rows(&utts).unwrap();
        let mean = fit
            .net
            .responsibilities(&x.view())
            .unwrap()
            .mean_axis(Axis(0))
            .unwrap();
        let tv = 0.5 * (&mean - &q).mapv(f64::abs).sum();
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn beats_the_best_constant_predictor() {
        let mut g = rng(35);
        let mut ubm_means = random_matrix(4, 2, &mut g);
        ubm_means *= 3.0;
        let ubm = DiagGmm::new(
            Array1::from_elem(4, 0.25),
            ubm_means.clone(),
            Array2::from_elem((4, 2), 0.5),
        )
        .unwrap();
        let utts: Vec<Array2<f64>> = (0..5)
            .map(|_| {
                Array2::from_shape_fn((200, 2), |(t, d)| {
                    ubm_means[[t % 4, d]] + g.random_range(-0.7..0.7)
                })
            })
            .collect();
        let targets: Vec<Array2<f64>> = utts
            .iter()
            .map(|u| ubm.responsibilities(&u.view()).unwrap())
            .collect();
        let cfg = F2sConfig {
            hidden: vec![16, 16],
            lr: 0.5,
            batch_frames: 32,
            epochs: 15,
            plateau_tolerance: 1e-3,
        };
        let fit = train_f2s(&utts, &targets, &cfg, &mut g).unwrap();
        let t = stack_rows(&targets).unwrap();
        let avg = t.mean_axis(Axis(0)).unwrap();
        let constant = Array2::from_shape_fn(t.dim(), |(_, c)| avg[c]);
        let baseline = soft_cross_entropy(&constant.view(), &t.view());
        assert!(
            fit.final_loss <= baseline,
            "{} vs {baseline}",
            fit.final_loss
        );
    }

    #[test]
    fn misaligned_targets_rejected() {
        let mut g = rng(36);
        let x = vec![random_matrix(5, 2, &mut g)];
        let t = vec![Array2::from_elem((4, 2), 0.5)];
        assert!(matches!(
            train_f2s(&x, &t, &F2sConfig::default(), &mut g),
            Err(Error::Input(_))
        ));
    }
}
