//! Discriminative PLDA: the quadratic pairwise score, a prior-weighted
//! binary cross-entropy over all trials of a batch, full-batch L-BFGS
//! training, and the speaker-pair minibatch sampler.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsConfig, LbfgsReport};
use crate::linalg::symmetrize;
use crate::netcore::FlatParams;

/// Arithmetic mean of the two detection-cost operating points (0.01, 0.005).
pub const DEFAULT_P_TARGET: f64 = 0.0075;
pub const JOINT_N_PAIRS: usize = 5000;
pub const E2E_N_PAIRS: usize = 75;

/// Parameters of `s = φᵢᵀΛφⱼ + φⱼᵀΛφᵢ + φᵢᵀΓφᵢ + φⱼᵀΓφⱼ + (φᵢ+φⱼ)ᵀc + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpldaParams {
    pub lambda: Array2<f64>,
    pub gamma: Array2<f64>,
    pub c: Array1<f64>,
    pub k: f64,
}

impl DpldaParams {
    /// Symmetrizes `lambda` and `gamma`.
    pub fn new(lambda: Array2<f64>, gamma: Array2<f64>, c: Array1<f64>, k: f64) -> Result<Self> {
        let r = c.len();
        if lambda.dim() != (r, r) || gamma.dim() != (r, r) {
            return Err(Error::shape(format!(
                "Λ {:?}, Γ {:?} and c {} disagree",
                lambda.dim(),
                gamma.dim(),
                r
            )));
        }
        Ok(Self {
            lambda: symmetrize(&lambda),
            gamma: symmetrize(&gamma),
            c,
            k,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            lambda: Array2::zeros((dim, dim)),
            gamma: Array2::zeros((dim, dim)),
            c: Array1::zeros(dim),
            k: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Scores one pair, term by term.
    pub fn score(&self, phi_i: &ArrayView1<f64>, phi_j: &ArrayView1<f64>) -> Result<f64> {
        let r = self.dim();
        if phi_i.len() != r || phi_j.len() != r {
            return Err(Error::shape(format!(
                "vectors of length {} and {} scored by a {r}-dim model",
                phi_i.len(),
                phi_j.len()
            )));
        }
        let cross = phi_i.dot(&self.lambda.dot(phi_j)) + phi_j.dot(&self.lambda.dot(phi_i));
        let quad = phi_i.dot(&self.gamma.dot(phi_i)) + phi_j.dot(&self.gamma.dot(phi_j));
        let lin = (phi_i + phi_j).dot(&self.c);
        Ok(cross + quad + lin + self.k)
    }

    /// Scores of all pairs of rows, `U × U`, symmetric.
    pub fn score_matrix(&self, phi: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if phi.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "{}-dim vectors scored by a {}-dim model",
                phi.ncols(),
                self.dim()
            )));
        }
        let cross = phi.dot(&self.lambda).dot(&phi.t());
        let quad = (phi.dot(&self.gamma) * phi).sum_axis(Axis(1));
        let lin = phi.dot(&self.c);
        let u = phi.nrows();
        Ok(Array2::from_shape_fn((u, u), |(i, j)| {
            (cross[[i, j]] + cross[[j, i]]) + (quad[i] + quad[j]) + (lin[i] + lin[j]) + self.k
        }))
    }

    /// `‖Λ‖² + ‖Γ‖² + ‖c‖²`; `k` is not regularized.
    pub fn l2_norm_sq(&self) -> f64 {
        let sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
        sq(&self.lambda) + sq(&self.gamma) + self.c.dot(&self.c)
    }
}

/// Convenience free function for a single score.
pub fn dplda_score(
    p: &DpldaParams,
    phi_i: &ArrayView1<f64>,
    phi_j: &ArrayView1<f64>,
) -> Result<f64> {
    p.score(phi_i, phi_j)
}

impl FlatParams for DpldaParams {
    fn flat_len(&self) -> usize {
        2 * self.lambda.len() + self.c.len() + 1
    }

    fn extend_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.lambda.iter());
        out.extend(self.gamma.iter());
        out.extend(self.c.iter());
        out.push(self.k);
    }

    fn load_flat(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.flat_len();
        if src.len() < need {
            return Err(Error::shape(format!(
                "need {need} parameters, got {}",
                src.len()
            )));
        }
        let mut it = src.iter().copied();
        for v in self
            .lambda
            .iter_mut()
            .chain(self.gamma.iter_mut())
            .chain(self.c.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        self.k = it.next().expect("length checked");
        Ok(need)
    }
}

/// How the training prior is placed between the two cost operating points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMidpoint {
    Arithmetic,
    LogOdds,
}

impl PriorMidpoint {
    pub fn p_target(self, a: f64, b: f64) -> f64 {
        match self {
            PriorMidpoint::Arithmetic => 0.5 * (a + b),
            PriorMidpoint::LogOdds => sigmoid(0.5 * (logit(a) + logit(b))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub p_target: f64,
    /// Pull of Λ, Γ and c toward zero.
    pub l2_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            p_target: DEFAULT_P_TARGET,
            l2_weight: 0.0,
        }
    }
}

impl ObjectiveConfig {
    fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "p_target {} outside (0, 1)",
                self.p_target
            )));
        }
        if !(self.l2_weight >= 0.0) {
            return Err(Error::Config(format!(
                "negative l2 weight {}",
                self.l2_weight
            )));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Utterance vectors of a minibatch; the trials are all unordered pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialBatch {
    pub vectors: Array2<f64>,
    pub speaker_of: Vec<usize>,
}

impl TrialBatch {
    pub fn new(vectors: Array2<f64>, speaker_of: Vec<usize>) -> Result<Self> {
        if vectors.nrows() != speaker_of.len() {
            return Err(Error::shape(format!(
                "{} vectors but {} speaker labels",
                vectors.nrows(),
                speaker_of.len()
            )));
        }
        Ok(Self {
            vectors,
            speaker_of,
        })
    }

    /// Gathers the rows named by `selection`.
    pub fn from_selection(
        vectors: &ArrayView2<f64>,
        labels: &[usize],
        selection: &[usize],
    ) -> Result<Self> {
        Self::new(
            vectors.select(Axis(0), selection),
            selection.iter().map(|&i| labels[i]).collect(),
        )
    }

    pub fn n_utterances(&self) -> usize {
        self.speaker_of.len()
    }

    pub fn n_trials(&self) -> usize {
        let u = self.n_utterances();
        u * u.saturating_sub(1) / 2
    }

    /// `(i, j, is_target)` for all `i < j`.
    pub fn trials(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        let u = self.n_utterances();
        (0..u).flat_map(move |i| {
            ((i + 1)..u).map(move |j| (i, j, self.speaker_of[i] == self.speaker_of[j]))
        })
    }

    pub fn n_targets(&self) -> usize {
        self.trials().filter(|t| t.2).count()
    }
}

/// Loss of a batch together with its gradients.
#[derive(Debug, Clone)]
pub struct BxeOutput {
    pub loss: f64,
    pub grads: DpldaParams,
    /// dL/dφ for every row of the batch.
    pub grad_vectors: Array2<f64>,
}

/// Prior-weighted binary cross-entropy over all trials of `batch`.
///
/// Targets are weighted by `p/#targets` and non-targets by
/// `(1−p)/#nontargets`, with the score offset by `logit(p)`.
pub fn weighted_bxe(
    p: &DpldaParams,
    batch: &TrialBatch,
    cfg: &ObjectiveConfig,
) -> Result<BxeOutput> {
    cfg.validate()?;
    let scores = p.score_matrix(&batch.vectors.view())?;
    let u = batch.n_utterances();
    let n_targets = batch.n_targets();
    let n_nontargets = batch.n_trials() - n_targets;
    if n_targets == 0 || n_nontargets == 0 {
        return Err(Error::Objective(format!(
            "batch has {n_targets} target and {n_nontargets} non-target trials; both are required"
        )));
    }
    let theta = logit(cfg.p_target);
    let alpha = cfg.p_target / n_targets as f64;
    let beta = (1.0 - cfg.p_target) / n_nontargets as f64;

    let mut loss = 0.0;
    let mut dscore = Array2::<f64>::zeros((u, u));
    for (i, j, target) in batch.trials() {
        let a = scores[[i, j]] + theta;
        let (l, g) = if target {
            (alpha * softplus(-a), alpha * (sigmoid(a) - 1.0))
        } else {
            (beta * softplus(a), beta * sigmoid(a))
        };
        loss += l;
        dscore[[i, j]] = g;
        dscore[[j, i]] = g;
    }
    loss += cfg.l2_weight * p.l2_norm_sq();

    let phi = &batch.vectors;
    let rowsum = dscore.sum_axis(Axis(1));
    let weighted_phi = phi * &rowsum.view().insert_axis(Axis(1));
    let mut grads = DpldaParams {
        lambda: symmetrize(&phi.t().dot(&dscore.dot(phi))),
        gamma: symmetrize(&phi.t().dot(&weighted_phi)),
        c: phi.t().dot(&rowsum),
        k: 0.5 * dscore.sum(),
    };
    if cfg.l2_weight > 0.0 {
        grads.lambda.scaled_add(2.0 * cfg.l2_weight, &p.lambda);
        grads.gamma.scaled_add(2.0 * cfg.l2_weight, &p.gamma);
        grads.c.scaled_add(2.0 * cfg.l2_weight, &p.c);
    }
    let lam2 = &p.lambda + &p.lambda.t();
    let gam2 = &p.gamma + &p.gamma.t();
    let mut grad_vectors = dscore.dot(phi).dot(&lam2);
    grad_vectors += &weighted_phi.dot(&gam2);
    grad_vectors += &rowsum
        .view()
        .insert_axis(Axis(1))
        .dot(&p.c.view().insert_axis(Axis(0)));
    Ok(BxeOutput {
        loss,
        grads,
        grad_vectors,
    })
}

#[derive(Debug, Clone)]
pub struct DpldaFit {
    pub params: DpldaParams,
    pub report: LbfgsReport,
}

/// Full-batch L-BFGS on all trials formed from `vectors`.
pub fn train_dplda_fullbatch(
    init: &DpldaParams,
    vectors: &ArrayView2<f64>,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    opt: &LbfgsConfig,
) -> Result<DpldaFit> {
    let batch = TrialBatch::new(vectors.to_owned(), labels.to_vec())?;
    let mut work = init.clone();
    let report = lbfgs::minimize(
        |x| {
            let mut p = work.clone();
            p.load_flat(x)?;
            let out = weighted_bxe(&p, &batch, cfg)?;
            Ok((out.loss, out.grads.to_flat()))
        },
        init.to_flat(),
        opt,
    )?;
    work.load_flat(&report.x)?;
    Ok(DpldaFit {
        params: work,
        report,
    })
}

/// A random grouping of each speaker's utterances into pairs; an odd
/// remainder joins the last pair and a lone utterance forms its own group.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPool {
    groups: Vec<Vec<usize>>,
    next: usize,
}

impl PairPool {
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn remaining(&self) -> usize {
        self.groups.len() - self.next
    }
}

pub fn make_pair_pool<R: Rng + ?Sized>(by_speaker: &[Vec<usize>], rng: &mut R) -> PairPool {
    let mut groups = Vec::new();
    for utts in by_speaker {
        let mut utts = utts.clone();
        utts.shuffle(rng);
        match utts.len() {
            0 => {}
            1 => groups.push(utts),
            n => {
                let mut chunks: Vec<Vec<usize>> = utts.chunks(2).map(|c| c.to_vec()).collect();
                if n % 2 == 1 {
                    let lone = chunks.pop().expect("odd count has a remainder");
                    chunks.last_mut().expect("n >= 3").extend(lone);
                }
                groups.extend(chunks);
            }
        }
    }
    groups.shuffle(rng);
    PairPool { groups, next: 0 }
}

/// Draws groups without replacement, re-pairing everything when the pool runs out.
#[derive(Debug, Clone)]
pub struct PairSampler {
    by_speaker: Vec<Vec<usize>>,
    pool: PairPool,
    passes: usize,
}

impl PairSampler {
    pub fn new<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::input("cannot sample trials from an empty corpus"));
        }
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        let by_speaker: Vec<Vec<usize>> = map.into_values().collect();
        let pool = make_pair_pool(&by_speaker, rng);
        Ok(Self {
            by_speaker,
            pool,
            passes: 0,
        })
    }

    pub fn pool(&self) -> &PairPool {
        &self.pool
    }

    /// Completed passes over the pool.
    pub fn passes(&self) -> usize {
        self.passes
    }

    /// Utterance indices of the next `n_pairs` groups, concatenated.
    pub fn next_minibatch<R: Rng + ?Sized>(
        &mut self,
        n_pairs: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if n_pairs == 0 {
            return Err(Error::input("minibatch needs at least one pair"));
        }
        let mut out = Vec::with_capacity(2 * n_pairs);
        for _ in 0..n_pairs {
            if self.pool.remaining() == 0 {
                self.pool = make_pair_pool(&self.by_speaker, rng);
                self.passes += 1;
            }
            out.extend_from_slice(&self.pool.groups[self.pool.next]);
            self.pool.next += 1;
        }
        Ok(out)
    }
}
