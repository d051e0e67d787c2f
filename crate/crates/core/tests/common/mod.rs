//! Fixtures and numeric checks shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use svpipe::dplda::{weighted_bxe, DpldaParams, ObjectiveConfig, TrialBatch};
use svpipe::e2e::{
    batch_gradient, checkpointed_grads, full_graph_grads, stats_loss, E2eSystem, ResidencyMeter,
};
use svpipe::f2s::{f2s_stats, f2s_stats_backward, soft_cross_entropy, F2sNet, StatsGrad};
use svpipe::frontend::{FeatureMatrix, FrontendConfig, PreparedUtt};
use svpipe::gmm::{DiagGmm, SuffStats};
use svpipe::netcore::{Activation, FlatParams, Layer, Mlp};
use svpipe::s2i::{
    cosine_loss, fit_pca, map_supervector, map_supervector_backward, PcaModel, S2iNet,
};
use svpipe::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: usize, c: usize, g: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| g.sample(StandardNormal))
}

pub fn normal_vector(n: usize, g: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| g.sample(StandardNormal))
}

/// `A Aᵀ / d + ridge·I`.
pub fn random_spd(d: usize, ridge: f64, g: &mut ChaCha8Rng) -> Array2<f64> {
    let a = normal_matrix(d, d, g);
    a.dot(&a.t()) / d as f64 + Array2::<f64>::eye(d) * ridge
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `max |a − b| / max |b|`, the error relative to the largest reference entry.
pub fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Central differences of a scalar function.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + FD_STEP;
            let up = f(&work);
            work[i] = x[i] - FD_STEP;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn fd_err(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    max_rel_err(analytic, &central_diff(f, x), FD_FLOOR)
}

pub fn random_ubm(c: usize, d: usize, g: &mut ChaCha8Rng) -> DiagGmm {
    let w = Array1::from_shape_fn(c, |_| g.random_range(0.5..1.5));
    let w = &w / w.sum();
    let means = normal_matrix(c, d, g);
    let vars = Array2::from_shape_fn((c, d), |_| g.random_range(0.5..2.0));
    DiagGmm::new(w, means, vars).unwrap()
}

pub fn frontend() -> FrontendConfig {
    FrontendConfig {
        stmvn_window_s: 3.0,
        half_window: 2,
        n_dct: 2,
    }
}

pub fn random_utts(n: usize, d: usize, g: &mut ChaCha8Rng) -> Vec<PreparedUtt> {
    (0..n)
        .map(|_| {
            let t = g.random_range(12..30);
            let f = FeatureMatrix::new(normal_matrix(t, d, g), 100.0).unwrap();
            frontend().prepare(&f).unwrap()
        })
        .collect()
}

pub fn random_dplda(r: usize, g: &mut ChaCha8Rng) -> DpldaParams {
    let a = normal_matrix(r, r, g) * 0.3;
    let b = normal_matrix(r, r, g) * 0.3;
    DpldaParams::new(a, b, normal_vector(r, g) * 0.3, g.random_range(-1.0..1.0)).unwrap()
}

pub const TINY_D: usize = 3;
pub const TINY_C: usize = 4;

/// A complete system small enough for finite differences.
pub fn tiny_system(g: &mut ChaCha8Rng) -> E2eSystem {
    let fe = frontend();
    let ubm = random_ubm(TINY_C, TINY_D, g);
    let f2s = F2sNet::random(fe.expanded_dim(TINY_D), &[5], TINY_C, g).unwrap();
    let sv = normal_matrix(20, TINY_C * TINY_D, g);
    let pca = fit_pca(&sv.view(), 5).unwrap();
    let s2i = S2iNet::random(5, &[4], 3, g).unwrap();
    E2eSystem::new(fe, f2s, ubm, 16.0, pca, s2i, random_dplda(3, g)).unwrap()
}

/// Speaker labels with both trial classes for `n ≥ 4` utterances.
pub fn batch_labels(n: usize) -> Vec<usize> {
    (0..n).map(|i| i / 2 % (n / 2).max(2)).collect()
}

pub fn objective() -> ObjectiveConfig {
    ObjectiveConfig {
        p_target: 0.3,
        l2_weight: 0.05,
    }
}

/// Worst finite-difference error for a net whose last layer uses `last`.
pub fn check_mlp(last: Activation, seed: u64) -> f64 {
    let mut g = rng(seed);
    let dims = [4, 6, 5, 3];
    let net = Mlp::random(
        &dims,
        &[Activation::Sigmoid, Activation::Tanh, last],
        &mut g,
    )
    .unwrap();
    let mut net = net;
    for l in net.layers_mut() {
        l.bias = normal_vector(l.out_dim(), &mut g) * 0.3;
    }
    let x = normal_matrix(7, 4, &mut g);
    let w = normal_matrix(7, 3, &mut g);
    let trace = net.forward(x.view()).unwrap();
    let (grads, gin) = net.backward(&trace, w.view()).unwrap();
    let p0 = net.to_flat();
    let mut work = net.clone();
    let mut by_params = |p: &[f64]| {
        work.load_flat(p).unwrap();
        (&work.predict(x.view()).unwrap() * &w).sum()
    };
    let e1 = fd_err(&mut by_params, &p0, &grads.to_flat());
    let x0: Vec<f64> = x.iter().copied().collect();
    let mut by_input = |v: &[f64]| {
        let xi = Array2::from_shape_vec((7, 4), v.to_vec()).unwrap();
        (&net.predict(xi.view()).unwrap() * &w).sum()
    };
    let e2 = fd_err(&mut by_input, &x0, &gin.iter().copied().collect::<Vec<_>>());
    e1.max(e2)
}

/// Softmax cross-entropy backpropagated from the logits.
pub fn check_softmax_logits(seed: u64) -> f64 {
    let mut g = rng(seed);
    let net = F2sNet::random(4, &[5], 3, &mut g).unwrap();
    let x = normal_matrix(6, 4, &mut g);
    let t = Array2::from_shape_fn((6, 3), |_| g.random_range(0.1..1.0));
    let t = &t / &t.sum_axis(Axis(1)).insert_axis(Axis(1));
    let trace = net.net().forward(x.view()).unwrap();
    let dz = (trace.output() - &t) / 6.0;
    let (grads, _) = net.net().backward_from_logits(&trace, dz.view()).unwrap();
    let mut work = net.net().clone();
    let mut f = |p: &[f64]| {
        work.load_flat(p).unwrap();
        soft_cross_entropy(&work.predict(x.view()).unwrap().view(), &t.view())
    };
    fd_err(&mut f, &net.net().to_flat(), &grads.to_flat())
}

pub fn check_bxe(seed: u64) -> f64 {
    let mut g = rng(seed);
    let r = 3;
    let params = random_dplda(r, &mut g);
    let labels = vec![0, 0, 1, 1, 1, 2, 2, 3];
    let x = normal_matrix(labels.len(), r, &mut g);
    let cfg = objective();
    let batch = TrialBatch::new(x.clone(), labels.clone()).unwrap();
    let out = weighted_bxe(&params, &batch, &cfg).unwrap();
    let mut work = params.clone();
    let mut by_params = |p: &[f64]| {
        work.load_flat(p).unwrap();
        weighted_bxe(&work, &batch, &cfg).unwrap().loss
    };
    let e1 = fd_err(&mut by_params, &params.to_flat(), &out.grads.to_flat());
    let x0: Vec<f64> = x.iter().copied().collect();
    let mut by_vectors = |v: &[f64]| {
        let b = TrialBatch::new(
            Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap(),
            labels.clone(),
        )
        .unwrap();
        weighted_bxe(&params, &b, &cfg).unwrap().loss
    };
    let e2 = fd_err(
        &mut by_vectors,
        &x0,
        &out.grad_vectors.iter().copied().collect::<Vec<_>>(),
    );
    e1.max(e2)
}

/// A random linear functional of the pooled statistics, differentiated with
/// respect to the f2s parameters.
pub fn check_f2s_pooling(seed: u64) -> f64 {
    let mut g = rng(seed);
    let sys = tiny_system(&mut g);
    let utt = &random_utts(1, TINY_D, &mut g)[0];
    let sg = StatsGrad {
        n: normal_vector(TINY_C, &mut g),
        f: normal_matrix(TINY_C, TINY_D, &mut g),
    };
    let grads = f2s_stats_backward(&sys.f2s, &utt.expanded.view(), &utt.raw.view(), &sg).unwrap();
    let mut work = sys.f2s.clone();
    let mut f = |p: &[f64]| {
        work.load_flat(p).unwrap();
        let s = f2s_stats(&work, &utt.expanded.view(), &utt.raw.view()).unwrap();
        s.n.dot(&sg.n) + (&s.f * &sg.f).sum()
    };
    fd_err(&mut f, &sys.f2s.to_flat(), &grads.to_flat())
}

/// Cosine distance on its own and through a length-normalizing s2i network.
pub fn check_cosine(seed: u64) -> f64 {
    let mut g = rng(seed);
    let out = normal_matrix(5, 4, &mut g);
    let refs = normal_matrix(5, 4, &mut g);
    let refs = &refs
        / &refs
            .mapv(|v| v * v)
            .sum_axis(Axis(1))
            .mapv(f64::sqrt)
            .insert_axis(Axis(1));
    let (_, grad) = cosine_loss(&out.view(), &refs.view()).unwrap();
    let o0: Vec<f64> = out.iter().copied().collect();
    let mut direct = |v: &[f64]| {
        let o = Array2::from_shape_vec((5, 4), v.to_vec()).unwrap();
        cosine_loss(&o.view(), &refs.view()).unwrap().0
    };
    let e1 = fd_err(&mut direct, &o0, &grad.iter().copied().collect::<Vec<_>>());

    let net = S2iNet::random(6, &[5], 4, &mut g).unwrap();
    let z = normal_matrix(5, 6, &mut g);
    let trace = net.net().forward(z.view()).unwrap();
    let (_, gy) = cosine_loss(&trace.output().view(), &refs.view()).unwrap();
    let (grads, _) = net.net().backward(&trace, gy.view()).unwrap();
    let mut work = net.net().clone();
    let mut through = |p: &[f64]| {
        work.load_flat(p).unwrap();
        cosine_loss(&work.predict(z.view()).unwrap().view(), &refs.view())
            .unwrap()
            .0
    };
    let e2 = fd_err(&mut through, &net.net().to_flat(), &grads.to_flat());
    e1.max(e2)
}

/// MAP adaptation followed by PCA projection, differentiated with respect
/// to the statistics.
pub fn check_map_pca(seed: u64) -> f64 {
    let mut g = rng(seed);
    let ubm = random_ubm(TINY_C, TINY_D, &mut g);
    let sv = normal_matrix(20, TINY_C * TINY_D, &mut g);
    let pca: PcaModel = fit_pca(&sv.view(), 5).unwrap();
    let stats = SuffStats {
        n: Array1::from_shape_fn(TINY_C, |_| g.random_range(0.5..8.0)),
        f: normal_matrix(TINY_C, TINY_D, &mut g) * 3.0,
        frames_total: 20,
    };
    let w = normal_vector(5, &mut g);
    let r = 16.0;
    let sg = map_supervector_backward(&ubm, &stats, r, &pca.backward(&w.view()).view()).unwrap();
    let mut x0: Vec<f64> = stats.n.to_vec();
    x0.extend(stats.f.iter());
    let mut analytic: Vec<f64> = sg.n.to_vec();
    analytic.extend(sg.f.iter());
    let mut f = |v: &[f64]| {
        let s = SuffStats {
            n: Array1::from_vec(v[..TINY_C].to_vec()),
            f: Array2::from_shape_vec((TINY_C, TINY_D), v[TINY_C..].to_vec()).unwrap(),
            frames_total: 20,
        };
        pca.project(&map_supervector(&ubm, &s, r).unwrap().view())
            .unwrap()
            .dot(&w)
    };
    fd_err(&mut f, &x0, &analytic)
}

/// The whole chain from frames to the weighted cross-entropy.
pub fn check_full_chain(seed: u64) -> f64 {
    let mut g = rng(seed);
    let sys = tiny_system(&mut g);
    let utts = random_utts(6, TINY_D, &mut g);
    let labels = batch_labels(6);
    let cfg = objective();
    let (_, grad) =
        batch_gradient(&sys, &utts, &labels, &cfg, &mut ResidencyMeter::default()).unwrap();
    let mut work = sys.clone();
    let mut f = |p: &[f64]| {
        work.load_trainable(p).unwrap();
        batch_gradient(&work, &utts, &labels, &cfg, &mut ResidencyMeter::default())
            .unwrap()
            .0
    };
    fd_err(&mut f, &sys.trainable_flat(), &grad)
}

/// Named finite-difference checks with their worst error.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("sigmoid layer", check_mlp(Activation::Sigmoid, seed)),
        ("tanh layer", check_mlp(Activation::Tanh, seed + 1)),
        ("softmax layer", check_mlp(Activation::Softmax, seed + 2)),
        ("linear layer", check_mlp(Activation::Linear, seed + 3)),
        (
            "length-norm layer",
            check_mlp(Activation::LinearLengthNorm, seed + 4),
        ),
        ("softmax logits", check_softmax_logits(seed + 5)),
        ("weighted bxe", check_bxe(seed + 6)),
        ("f2s pooling", check_f2s_pooling(seed + 7)),
        ("cosine loss", check_cosine(seed + 8)),
        ("map and pca", check_map_pca(seed + 9)),
        ("full chain", check_full_chain(seed + 10)),
    ]
}

/// Gradient of a stats-level loss for the f2s parameters by one batched
/// forward and backward pass over the concatenated frames of all utterances.
pub fn batched_f2s_grads(
    net: &F2sNet,
    utts: &[PreparedUtt],
    loss: impl FnOnce(&[SuffStats]) -> Result<(f64, Vec<StatsGrad>)>,
) -> (f64, Vec<f64>) {
    let expanded: Vec<_> = utts.iter().map(|u| u.expanded.view()).collect();
    let x = concatenate(Axis(0), &expanded).unwrap();
    let trace = net.net().forward(x.view()).unwrap();
    let resp = trace.output();
    let mut stats = Vec::new();
    let mut start = 0;
    for u in utts {
        let t = u.raw.nrows();
        let r = resp.slice(s![start..start + t, ..]);
        stats.push(SuffStats {
            n: r.sum_axis(Axis(0)),
            f: r.t().dot(&u.raw),
            frames_total: t,
        });
        start += t;
    }
    let (value, sgs) = loss(&stats).unwrap();
    let mut dresp = Array2::zeros(resp.dim());
    let mut start = 0;
    for (u, sg) in utts.iter().zip(&sgs) {
        let t = u.raw.nrows();
        let mut block = dresp.slice_mut(s![start..start + t, ..]);
        block.assign(&u.raw.dot(&sg.f.t()));
        block += &sg.n;
        start += t;
    }
    let (grads, _) = net.net().backward(&trace, dresp.view()).unwrap();
    (value, grads.to_flat())
}

pub struct CheckpointReport {
    pub worst_vs_batched: f64,
    pub worst_vs_full_graph: f64,
    pub checkpoint_peak: usize,
    pub full_peak_matches_batch: bool,
}

/// Checkpointed gradients against the library's full-graph route and an
/// independent batched pass, for every batch size in `sizes`.
pub fn checkpoint_equivalence(
    sizes: impl IntoIterator<Item = usize>,
    seed: u64,
) -> CheckpointReport {
    let mut g = rng(seed);
    let sys = tiny_system(&mut g);
    let cfg = objective();
    let mut report = CheckpointReport {
        worst_vs_batched: 0.0,
        worst_vs_full_graph: 0.0,
        checkpoint_peak: 0,
        full_peak_matches_batch: true,
    };
    for n in sizes {
        let utts = random_utts(n, TINY_D, &mut g);
        let labels = batch_labels(n);
        let loss = |stats: &[SuffStats]| -> Result<(f64, Vec<StatsGrad>)> {
            let (h, per) = stats_loss(&sys, stats, &labels, &cfg)?;
            Ok((h.loss, per))
        };
        let mut m1 = ResidencyMeter::default();
        let (l1, g1) = checkpointed_grads(&sys.f2s, &utts, loss, &mut m1).unwrap();
        let mut m2 = ResidencyMeter::default();
        let (l2, g2) = full_graph_grads(&sys.f2s, &utts, loss, &mut m2).unwrap();
        let (l3, g3) = batched_f2s_grads(&sys.f2s, &utts, loss);
        let (g1, g2) = (g1.to_flat(), g2.to_flat());
        let loss_err = ((l1 - l3) / l3).abs().max(((l2 - l3) / l3).abs());
        report.worst_vs_batched = report
            .worst_vs_batched
            .max(normwise_rel_err(&g1, &g3))
            .max(loss_err);
        report.worst_vs_full_graph = report.worst_vs_full_graph.max(normwise_rel_err(&g1, &g2));
        report.checkpoint_peak = report.checkpoint_peak.max(m1.peak());
        report.full_peak_matches_batch &= m2.peak() == n;
    }
    report
}

/// A single softmax layer on `[x, x²]` whose outputs are exactly the
/// posteriors of `ubm`.
pub fn gmm_as_softmax(ubm: &DiagGmm) -> F2sNet {
    let (c, d) = (ubm.weights.len(), ubm.means.ncols());
    let mut weight = Array2::zeros((c, 2 * d));
    let mut bias = Array1::zeros(c);
    for k in 0..c {
        let mut b = ubm.weights[k].ln();
        for j in 0..d {
            let (m, v) = (ubm.means[[k, j]], ubm.vars[[k, j]]);
            weight[[k, j]] = m / v;
            weight[[k, d + j]] = -0.5 / v;
            b -= 0.5 * (m * m / v + (2.0 * std::f64::consts::PI * v).ln());
        }
        bias[k] = b;
    }
    let layer = Layer {
        weight,
        bias,
        activation: Activation::Softmax,
    };
    F2sNet::new(Mlp::new(vec![layer]).unwrap()).unwrap()
}

pub fn with_squares(x: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[x.view(), x.mapv(|v| v * v).view()]).unwrap()
}
