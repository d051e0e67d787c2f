//! The assembled system `features → f2s → MAP → PCA → s2i → DPLDA` and its
//! joint training with Adam, dev-driven learning-rate halving and an L2
//! pull toward the initial parameters.

use std::fmt;
use std::ops::Range;

use log::{debug, info};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::dplda::{
    weighted_bxe, DpldaParams, ObjectiveConfig, PairSampler, TrialBatch, E2E_N_PAIRS, JOINT_N_PAIRS,
};
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ScoredTrials};
use crate::f2s::{f2s_backward, f2s_forward, F2sNet, StatsGrad};
use crate::frontend::{FeatureMatrix, FrontendConfig, PreparedUtt};
use crate::gmm::{DiagGmm, SuffStats};
use crate::netcore::{AdamConfig, AdamState, FlatParams, MlpGrads, ParamGroup, ParamSnapshot};
use crate::s2i::{map_supervector, map_supervector_backward, PcaModel, S2iNet};

pub const DEFAULT_EPOCH_BATCHES: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct E2eSystem {
    pub frontend: FrontendConfig,
    pub f2s: F2sNet,
    /// Supplies the MAP prior means; frozen.
    pub ubm: DiagGmm,
    pub relevance: f64,
    /// Frozen.
    pub pca: PcaModel,
    pub s2i: S2iNet,
    pub dplda: DpldaParams,
    pub snapshot: ParamSnapshot,
}

impl E2eSystem {
    /// Assembles the stages and snapshots the current trainable parameters
    /// with zero penalty weight.
    pub fn new(
        frontend: FrontendConfig,
        f2s: F2sNet,
        ubm: DiagGmm,
        relevance: f64,
        pca: PcaModel,
        s2i: S2iNet,
        dplda: DpldaParams,
    ) -> Result<Self> {
        let mut sys = Self {
            frontend,
            f2s,
            ubm,
            relevance,
            pca,
            s2i,
            dplda,
            snapshot: ParamSnapshot::uniform(Vec::new(), 0.0)?,
        };
        sys.check_chain()?;
        sys.reset_snapshot(0.0)?;
        Ok(sys)
    }

    /// Like [`E2eSystem::new`] with an explicit snapshot.
    #[allow(clippy::too_many_arguments)]
    pub fn with_snapshot(
        frontend: FrontendConfig,
        f2s: F2sNet,
        ubm: DiagGmm,
        relevance: f64,
        pca: PcaModel,
        s2i: S2iNet,
        dplda: DpldaParams,
        snapshot: ParamSnapshot,
    ) -> Result<Self> {
        let mut sys = Self::new(frontend, f2s, ubm, relevance, pca, s2i, dplda)?;
        if snapshot.values().len() != sys.trainable_len() {
            return Err(Error::shape(format!(
                "snapshot holds {} values, system has {} trainable parameters",
                snapshot.values().len(),
                sys.trainable_len()
            )));
        }
        sys.snapshot = snapshot;
        Ok(sys)
    }

    fn check_chain(&self) -> Result<()> {
        let (c, d) = (self.ubm.n_components(), self.ubm.dim());
        let checks = [
            (
                "f2s input",
                self.f2s.input_dim(),
                self.frontend.expanded_dim(d),
            ),
            ("f2s output", self.f2s.n_components(), c),
            ("PCA input", self.pca.input_dim(), c * d),
            ("s2i input", self.s2i.input_dim(), self.pca.output_dim()),
            ("DPLDA dimension", self.dplda.dim(), self.s2i.output_dim()),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::shape(format!("{what} is {got}, expected {want}")));
            }
        }
        if !(self.relevance > 0.0) {
            return Err(Error::input("relevance factor must be positive"));
        }
        Ok(())
    }

    /// Flat ranges of the f2s, s2i and DPLDA parameters.
    pub fn group_ranges(&self) -> [Range<usize>; 3] {
        let a = self.f2s.flat_len();
        let b = a + self.s2i.flat_len();
        let c = b + self.dplda.flat_len();
        [0..a, a..b, b..c]
    }

    pub fn trainable_len(&self) -> usize {
        self.group_ranges()[2].end
    }

    pub fn trainable_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.trainable_len());
        self.f2s.extend_flat(&mut v);
        self.s2i.extend_flat(&mut v);
        self.dplda.extend_flat(&mut v);
        v
    }

    pub fn load_trainable(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.trainable_len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.trainable_len(),
                src.len()
            )));
        }
        let mut at = self.f2s.load_flat(src)?;
        at += self.s2i.load_flat(&src[at..])?;
        self.dplda.load_flat(&src[at..])?;
        Ok(())
    }

    /// Makes the current parameters the regularization target.
    pub fn reset_snapshot(&mut self, lambda: f64) -> Result<()> {
        let [f, s, d] = self.group_ranges();
        let groups = [("f2s", f), ("s2i", s), ("dplda", d)]
            .into_iter()
            .map(|(name, range)| ParamGroup {
                name: name.into(),
                range,
                weight: lambda,
            })
            .collect();
        self.snapshot = ParamSnapshot::new(self.trainable_flat(), groups)?;
        Ok(())
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.snapshot.set_all_weights(lambda);
    }

    pub fn prepare(&self, utt: &FeatureMatrix) -> Result<PreparedUtt> {
        self.frontend.prepare(utt)
    }

    pub fn stats(&self, utt: &PreparedUtt) -> Result<SuffStats> {
        Ok(f2s_forward(&self.f2s, &utt.expanded.view(), &utt.raw.view())?.stats)
    }

    /// PCA-projected MAP supervector of one utterance.
    pub fn projected(&self, utt: &PreparedUtt) -> Result<Array1<f64>> {
        let sv = map_supervector(&self.ubm, &self.stats(utt)?, self.relevance)?;
        self.pca.project(&sv.view())
    }

    pub fn embed_prepared(&self, utt: &PreparedUtt) -> Result<Array1<f64>> {
        let z = self.projected(utt)?;
        Ok(self
            .s2i
            .embed_rows(&z.view().insert_axis(Axis(0)))?
            .row(0)
            .to_owned())
    }

    pub fn embed(&self, utt: &FeatureMatrix) -> Result<Array1<f64>> {
        self.embed_prepared(&self.prepare(utt)?)
    }

    /// Embeddings of many utterances, one row each, computed in parallel.
    pub fn embed_all(&self, utts: &[PreparedUtt]) -> Result<Array2<f64>> {
        let rows: Vec<Array1<f64>> = utts
            .par_iter()
            .map(|u| self.embed_prepared(u))
            .collect::<Result<_>>()?;
        stack(&rows)
    }
}

fn stack(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

pub fn e2e_score(sys: &E2eSystem, a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    sys.dplda
        .score(&sys.embed(a)?.view(), &sys.embed(b)?.view())
}

/// Counts utterances whose network activations are held in memory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResidencyMeter {
    live: usize,
    peak: usize,
    live_values: usize,
    peak_values: usize,
}

impl ResidencyMeter {
    fn acquire(&mut self, values: usize) {
        self.live += 1;
        self.live_values += values;
        self.peak = self.peak.max(self.live);
        self.peak_values = self.peak_values.max(self.live_values);
    }

    fn release(&mut self, values: usize) {
        self.live -= 1;
        self.live_values -= values;
    }

    pub fn live(&self) -> usize {
        self.live
    }

    /// Most utterances resident at once.
    pub fn peak(&self) -> usize {
        self.peak
    }

    /// Most activation values resident at once.
    pub fn peak_values(&self) -> usize {
        self.peak_values
    }
}

fn check_loss_grads(grads: &[StatsGrad], n: usize) -> Result<()> {
    if grads.len() != n {
        return Err(Error::shape(format!(
            "loss returned {} statistics gradients for {n} utterances",
            grads.len()
        )));
    }
    Ok(())
}

/// Gradients of `loss(stats)` with respect to the f2s parameters, keeping
/// the activations of one utterance at a time and recomputing them on the
/// way back.
pub fn checkpointed_grads<F>(
    net: &F2sNet,
    utts: &[PreparedUtt],
    loss: F,
    meter: &mut ResidencyMeter,
) -> Result<(f64, MlpGrads)>
where
    F: FnOnce(&[SuffStats]) -> Result<(f64, Vec<StatsGrad>)>,
{
    let mut stats = Vec::with_capacity(utts.len());
    for u in utts {
        let acts = f2s_forward(net, &u.expanded.view(), &u.raw.view())?;
        meter.acquire(acts.stored_values());
        let values = acts.stored_values();
        stats.push(acts.stats.clone());
        drop(acts);
        meter.release(values);
    }
    let (value, grads) = loss(&stats)?;
    check_loss_grads(&grads, utts.len())?;
    let mut total = MlpGrads::zeros_like(net.net());
    for (u, g) in utts.iter().zip(&grads) {
        let acts = f2s_forward(net, &u.expanded.view(), &u.raw.view())?;
        meter.acquire(acts.stored_values());
        total.add_assign(&f2s_backward(net, &acts, &u.raw.view(), g)?);
        meter.release(acts.stored_values());
    }
    Ok((value, total))
}

/// Reference version of [`checkpointed_grads`] that keeps every
/// utterance's activations until the backward pass.
pub fn full_graph_grads<F>(
    net: &F2sNet,
    utts: &[PreparedUtt],
    loss: F,
    meter: &mut ResidencyMeter,
) -> Result<(f64, MlpGrads)>
where
    F: FnOnce(&[SuffStats]) -> Result<(f64, Vec<StatsGrad>)>,
{
    let mut all = Vec::with_capacity(utts.len());
    for u in utts {
        let acts = f2s_forward(net, &u.expanded.view(), &u.raw.view())?;
        meter.acquire(acts.stored_values());
        all.push(acts);
    }
    let stats: Vec<SuffStats> = all.iter().map(|a| a.stats.clone()).collect();
    let (value, grads) = loss(&stats)?;
    check_loss_grads(&grads, utts.len())?;
    let mut total = MlpGrads::zeros_like(net.net());
    for ((u, acts), g) in utts.iter().zip(&all).zip(&grads) {
        total.add_assign(&f2s_backward(net, acts, &u.raw.view(), g)?);
    }
    for acts in &all {
        meter.release(acts.stored_values());
    }
    Ok((value, total))
}

/// Loss and gradients of the s2i and DPLDA stages for one batch of
/// projected supervectors.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub loss: f64,
    pub s2i: MlpGrads,
    pub dplda: DpldaParams,
    /// dL/d(projected supervector), one row per utterance.
    pub projected: Array2<f64>,
}

pub fn head_grads(
    s2i: &S2iNet,
    dplda: &DpldaParams,
    projected: &ArrayView2<f64>,
    labels: &[usize],
    objective: &ObjectiveConfig,
) -> Result<HeadGrads> {
    let trace = s2i.net().forward(*projected)?;
    let batch = TrialBatch::new(trace.output().clone(), labels.to_vec())?;
    let out = weighted_bxe(dplda, &batch, objective)?;
    let (g_s2i, g_in) = s2i.net().backward(&trace, out.grad_vectors.view())?;
    Ok(HeadGrads {
        loss: out.loss,
        s2i: g_s2i,
        dplda: out.grads,
        projected: g_in,
    })
}

/// Loss of a batch of statistics through MAP, PCA, s2i and DPLDA, with
/// gradients for the head and for every utterance's statistics.
pub fn stats_loss(
    sys: &E2eSystem,
    stats: &[SuffStats],
    labels: &[usize],
    objective: &ObjectiveConfig,
) -> Result<(HeadGrads, Vec<StatsGrad>)> {
    let z: Vec<Array1<f64>> = stats
        .iter()
        .map(|s| {
            sys.pca
                .project(&map_supervector(&sys.ubm, s, sys.relevance)?.view())
        })
        .collect::<Result<_>>()?;
    let head = head_grads(&sys.s2i, &sys.dplda, &stack(&z)?.view(), labels, objective)?;
    let per_utt = stats
        .iter()
        .zip(head.projected.rows())
        .map(|(s, g)| {
            let dsv = sys.pca.backward(&g);
            map_supervector_backward(&sys.ubm, s, sys.relevance, &dsv.view())
        })
        .collect::<Result<_>>()?;
    Ok((head, per_utt))
}

/// Full gradient of the batch loss (without the snapshot penalty) in the
/// layout of [`E2eSystem::trainable_flat`].
pub fn batch_gradient(
    sys: &E2eSystem,
    utts: &[PreparedUtt],
    labels: &[usize],
    objective: &ObjectiveConfig,
    meter: &mut ResidencyMeter,
) -> Result<(f64, Vec<f64>)> {
    let mut head = None;
    let (loss, g_f2s) = checkpointed_grads(
        &sys.f2s,
        utts,
        |stats| {
            let (h, per_utt) = stats_loss(sys, stats, labels, objective)?;
            let loss = h.loss;
            head = Some(h);
            Ok((loss, per_utt))
        },
        meter,
    )?;
    let head = head.expect("loss closure ran");
    let mut flat = Vec::with_capacity(sys.trainable_len());
    g_f2s.extend_flat(&mut flat);
    head.s2i.extend_flat(&mut flat);
    head.dplda.extend_flat(&mut flat);
    Ok((loss, flat))
}

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub n_pairs: usize,
    pub epoch_batches: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub halve_on_stagnation: bool,
    pub objective: ObjectiveConfig,
}

impl TrainSchedule {
    pub fn joint() -> Self {
        Self {
            n_pairs: JOINT_N_PAIRS,
            epoch_batches: DEFAULT_EPOCH_BATCHES,
            max_epochs: 10,
            adam: AdamConfig::default(),
            halve_on_stagnation: true,
            objective: ObjectiveConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            n_pairs: E2E_N_PAIRS,
            ..Self::joint()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.epoch_batches == 0 {
            return Err(Error::Config(
                "n_pairs and epoch_batches must be at least 1".into(),
            ));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config(format!(
                "negative learning rate {}",
                self.adam.lr
            )));
        }
        Ok(())
    }
}

/// Halves `lr` when the latest dev cost is no better than the best before it.
pub fn lr_schedule_step(history: &[f64], lr: f64) -> Result<f64> {
    let Some((&latest, previous)) = history.split_last() else {
        return Err(Error::input(
            "learning-rate schedule needs at least one epoch",
        ));
    };
    let best = previous.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if latest >= best { 0.5 * lr } else { lr })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
    pub dev_c_primary: f64,
    pub lr: f64,
    /// Largest deviation from the snapshot at the end of the epoch; not printed.
    pub drift: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:e}",
            self.epoch, self.train_loss, self.dev_eer, self.dev_c_primary, self.lr
        )
    }
}

/// Utterances with speaker labels.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub utts: Vec<PreparedUtt>,
    pub labels: Vec<usize>,
}

/// Utterances and the trials formed from them, as `(enroll, test, is_target)`.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub utts: Vec<PreparedUtt>,
    pub trials: Vec<(usize, usize, bool)>,
}

impl DevSet {
    /// All unordered pairs of the given utterances.
    pub fn all_pairs(utts: Vec<PreparedUtt>, labels: &[usize]) -> Self {
        let n = utts.len();
        let trials = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, labels[i] == labels[j]))
            .collect();
        Self { utts, trials }
    }

    fn validate(&self) -> Result<()> {
        if self.utts.is_empty() || self.trials.is_empty() {
            return Err(Error::Config("development set is empty".into()));
        }
        if self
            .trials
            .iter()
            .any(|&(i, j, _)| i >= self.utts.len() || j >= self.utts.len())
        {
            return Err(Error::Config(
                "development trial refers to a missing utterance".into(),
            ));
        }
        Ok(())
    }
}

/// Scores every trial from precomputed embeddings.
pub fn score_trials(
    dplda: &DpldaParams,
    emb: &Array2<f64>,
    trials: &[(usize, usize, bool)],
) -> Result<ScoredTrials> {
    let scores = trials
        .iter()
        .map(|&(i, j, _)| dplda.score(&emb.row(i), &emb.row(j)))
        .collect::<Result<Vec<f64>>>()?;
    ScoredTrials::new(scores, trials.iter().map(|t| t.2).collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch on the development set.
    pub system: E2eSystem,
    pub logs: Vec<EpochLog>,
    pub initial_dev: MetricsReport,
    /// 0 when no epoch improved on the initialization.
    pub best_epoch: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Joint,
    Full,
}

/// Adam on the s2i and DPLDA parameters with the f2s network frozen.
pub fn train_joint_s2i_dplda<R: Rng + ?Sized>(
    sys: &E2eSystem,
    train: &TrainSet,
    dev: &DevSet,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<TrainOutcome> {
    train_impl(sys, train, dev, schedule, Mode::Joint, rng)
}

/// Adam on all trainable parameters, backpropagating through f2s with
/// per-utterance recomputation.
pub fn train_e2e_full<R: Rng + ?Sized>(
    sys: &E2eSystem,
    train: &TrainSet,
    dev: &DevSet,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<TrainOutcome> {
    train_impl(sys, train, dev, schedule, Mode::Full, rng)
}

fn train_impl<R: Rng + ?Sized>(
    init: &E2eSystem,
    train: &TrainSet,
    dev: &DevSet,
    schedule: &TrainSchedule,
    mode: Mode,
    rng: &mut R,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    dev.validate()?;
    if train.utts.len() != train.labels.len() {
        return Err(Error::input(format!(
            "{} training utterances but {} labels",
            train.utts.len(),
            train.labels.len()
        )));
    }
    let mut sys = init.clone();
    // with f2s frozen the projected supervectors never change
    let (train_z, dev_z) = if mode == Mode::Joint {
        let tz: Vec<Array1<f64>> = train
            .utts
            .par_iter()
            .map(|u| sys.projected(u))
            .collect::<Result<_>>()?;
        let dz: Vec<Array1<f64>> = dev
            .utts
            .par_iter()
            .map(|u| sys.projected(u))
            .collect::<Result<_>>()?;
        (Some(stack(&tz)?), Some(stack(&dz)?))
    } else {
        (None, None)
    };
    let dev_metrics = |sys: &E2eSystem| -> Result<MetricsReport> {
        let emb = match &dev_z {
            Some(z) => sys.s2i.embed_rows(&z.view())?,
            None => sys.embed_all(&dev.utts)?,
        };
        MetricsReport::compute(&score_trials(&sys.dplda, &emb, &dev.trials)?)
    };

    let initial_dev = dev_metrics(&sys)?;
    info!(
        "initial dev EER {:.4}, C_primary {:.4}",
        initial_dev.eer, initial_dev.c_primary
    );
    let offset = match mode {
        Mode::Joint => sys.group_ranges()[1].start,
        Mode::Full => 0,
    };
    let mut flat = sys.trainable_flat();
    let mut adam = AdamState::new(flat.len() - offset, schedule.adam);
    let mut sampler = PairSampler::new(&train.labels, rng)?;
    let mut history = vec![initial_dev.c_primary];
    let mut best = (initial_dev.c_primary, 0usize, flat.clone());
    let mut logs = Vec::with_capacity(schedule.max_epochs);
    let mut meter = ResidencyMeter::default();

    for epoch in 1..=schedule.max_epochs {
        let lr = adam.config.lr;
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for _ in 0..schedule.epoch_batches {
            let sel = sampler.next_minibatch(schedule.n_pairs, rng)?;
            let labels: Vec<usize> = sel.iter().map(|&i| train.labels[i]).collect();
            let probe = TrialBatch::new(Array2::zeros((labels.len(), 0)), labels.clone())?;
            let nt = probe.n_targets();
            if nt == 0 || nt == probe.n_trials() {
                debug!("skipping a batch with a single trial class");
                continue;
            }
            let (loss, mut grad) = match (&train_z, mode) {
                (Some(z), Mode::Joint) => {
                    let zb = z.select(Axis(0), &sel);
                    let h = head_grads(
                        &sys.s2i,
                        &sys.dplda,
                        &zb.view(),
                        &labels,
                        &schedule.objective,
                    )?;
                    let mut g = vec![0.0; offset];
                    h.s2i.extend_flat(&mut g);
                    h.dplda.extend_flat(&mut g);
                    (h.loss, g)
                }
                _ => {
                    let utts: Vec<PreparedUtt> =
                        sel.iter().map(|&i| train.utts[i].clone()).collect();
                    batch_gradient(&sys, &utts, &labels, &schedule.objective, &mut meter)?
                }
            };
            let (penalty, pgrad) = sys.snapshot.penalty(&flat)?;
            for (g, p) in grad.iter_mut().zip(&pgrad) {
                *g += p;
            }
            adam.step(&mut flat[offset..], &grad[offset..])?;
            sys.load_trainable(&flat)?;
            loss_sum += loss + penalty;
            used += 1;
        }
        if used == 0 {
            return Err(Error::Objective(
                "no batch contained both trial classes".into(),
            ));
        }
        let metrics = dev_metrics(&sys)?;
        history.push(metrics.c_primary);
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / used as f64,
            dev_eer: metrics.eer,
            dev_c_primary: metrics.c_primary,
            lr,
            drift: sys.snapshot.max_drift(&flat),
        };
        info!("{log}");
        logs.push(log);
        if metrics.c_primary < best.0 {
            best = (metrics.c_primary, epoch, flat.clone());
        }
        if schedule.halve_on_stagnation {
            adam.config.lr = lr_schedule_step(&history, adam.config.lr)?;
        }
    }
    sys.load_trainable(&best.2)?;
    Ok(TrainOutcome {
        system: sys,
        logs,
        initial_dev,
        best_epoch: best.1,
    })
}
