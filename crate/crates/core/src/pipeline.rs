//! Stage settings and the in-memory cascade shared by the command line
//! driver and the tests.

use std::path::{Path, PathBuf};

use log::info;
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::corpus::{dense_labels, Corpus, Split, SynthConfig, Utterance};
use crate::dplda::{train_dplda_fullbatch, DpldaParams, ObjectiveConfig, PriorMidpoint};
use crate::e2e::{DevSet, E2eSystem, TrainSchedule, TrainSet};
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ScoredTrials};
use crate::f2s::{train_f2s, F2sConfig, F2sNet};
use crate::frontend::{FrontendConfig, PreparedUtt};
use crate::gmm::{train_ubm, DiagGmm, SuffStats, UbmConfig};
use crate::ivector::{fit_prep, train_tv, IvecPrep, TvConfig, TvModel};
use crate::lbfgs::LbfgsConfig;
use crate::netcore::AdamConfig;
use crate::plda::{plda_llr, to_dplda, train_plda, TwoCovPlda};
use crate::s2i::{fit_pca, map_supervector, train_s2i, PcaModel, S2iConfig, S2iNet};

/// Every tunable of the pipeline, with desk-scale defaults.
#[derive(Debug, Clone)]
pub struct Settings {
    pub workdir: PathBuf,
    pub synth: SynthConfig,
    pub frontend: FrontendConfig,
    pub ubm: UbmConfig,
    /// Frames sampled from the training split for UBM training; 0 uses all.
    pub ubm_max_frames: usize,
    pub tv: TvConfig,
    pub lda_dim: usize,
    pub plda_iterations: usize,
    pub plda_min_utts: usize,
    pub objective: ObjectiveConfig,
    /// Candidate L2 weights for DPLDA; the one with the lowest dev
    /// C_primary wins. Empty uses `objective.l2_weight`.
    pub dplda_l2_grid: Vec<f64>,
    pub lbfgs: LbfgsConfig,
    pub f2s: F2sConfig,
    pub relevance: f64,
    pub pca_dim: usize,
    pub s2i: S2iConfig,
    pub joint: TrainSchedule,
    pub joint_lambda: f64,
    pub e2e: TrainSchedule,
    pub e2e_lambda: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let joint = TrainSchedule {
            n_pairs: 32,
            epoch_batches: 50,
            max_epochs: 6,
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            halve_on_stagnation: true,
            objective: ObjectiveConfig::default(),
        };
        let e2e = TrainSchedule {
            n_pairs: 8,
            epoch_batches: 10,
            max_epochs: 2,
            adam: AdamConfig {
                lr: 1e-5,
                ..AdamConfig::default()
            },
            ..joint.clone()
        };
        Self {
            workdir: PathBuf::from("work"),
            synth: SynthConfig::default(),
            frontend: FrontendConfig::default(),
            ubm: UbmConfig {
                components: 32,
                iterations: 10,
                ..UbmConfig::default()
            },
            ubm_max_frames: 60_000,
            tv: TvConfig {
                rank: 40,
                iterations: 6,
                init_scale: 0.1,
            },
            lda_dim: 6,
            plda_iterations: 20,
            plda_min_utts: 0,
            objective: ObjectiveConfig {
                p_target: PriorMidpoint::Arithmetic.p_target(0.01, 0.005),
                l2_weight: 1e-4,
            },
            dplda_l2_grid: vec![1e-6, 3e-6, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3],
            lbfgs: LbfgsConfig::default(),
            f2s: F2sConfig {
                hidden: vec![128, 128],
                epochs: 8,
                ..F2sConfig::default()
            },
            relevance: crate::s2i::DEFAULT_RELEVANCE,
            pca_dim: 100,
            s2i: S2iConfig {
                hidden: vec![128, 128],
                lr: 0.05,
                batch_size: 16,
                epochs: 60,
                l1_weight: 1e-6,
                plateau_tolerance: 1e-3,
            },
            joint,
            joint_lambda: 0.0,
            e2e,
            e2e_lambda: 0.0,
        }
    }
}

impl Settings {
    /// Reads every known key, falling back to the defaults.
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = Self::default();
        let synth = SynthConfig {
            n_speakers: c.get("synth.n_speakers", d.synth.n_speakers)?,
            utts_per_speaker: c.get("synth.utts_per_speaker", d.synth.utts_per_speaker)?,
            min_frames: c.get("synth.min_frames", d.synth.min_frames)?,
            max_frames: c.get("synth.max_frames", d.synth.max_frames)?,
            feature_dim: c.get("synth.feature_dim", d.synth.feature_dim)?,
            speaker_dim: c.get("synth.speaker_dim", d.synth.speaker_dim)?,
            channel_dim: c.get("synth.channel_dim", d.synth.channel_dim)?,
            noise: c.get("synth.noise", d.synth.noise)?,
            nonlinearity: c.get("synth.nonlinearity", d.synth.nonlinearity)?,
            seed: c.get("synth.seed", c.get("seed", d.synth.seed)?)?,
        };
        let midpoint = match c.raw("dplda.prior_midpoint").unwrap_or("arithmetic") {
            "arithmetic" => PriorMidpoint::Arithmetic,
            "log-odds" => PriorMidpoint::LogOdds,
            other => {
                return Err(Error::Config(format!(
                    "dplda.prior_midpoint: unknown value {other:?}"
                )))
            }
        };
        let objective = ObjectiveConfig {
            p_target: c.get("dplda.p_target", midpoint.p_target(0.01, 0.005))?,
            l2_weight: c.get("dplda.l2", d.objective.l2_weight)?,
        };
        let schedule = |prefix: &str, base: &TrainSchedule| -> Result<TrainSchedule> {
            Ok(TrainSchedule {
                n_pairs: c.get(&format!("{prefix}.n_pairs"), base.n_pairs)?,
                epoch_batches: c.get(&format!("{prefix}.epoch_batches"), base.epoch_batches)?,
                max_epochs: c.get(&format!("{prefix}.epochs"), base.max_epochs)?,
                adam: AdamConfig {
                    lr: c.get(&format!("{prefix}.lr"), base.adam.lr)?,
                    ..base.adam
                },
                halve_on_stagnation: c
                    .get(&format!("{prefix}.halve_lr"), base.halve_on_stagnation)?,
                objective,
            })
        };
        let s = Self {
            workdir: PathBuf::from(c.raw("paths.workdir").unwrap_or("work")),
            synth,
            frontend: FrontendConfig {
                stmvn_window_s: c.get("frontend.stmvn_window_s", d.frontend.stmvn_window_s)?,
                half_window: c.get("frontend.half_window", d.frontend.half_window)?,
                n_dct: c.get("frontend.n_dct", d.frontend.n_dct)?,
            },
            ubm: UbmConfig {
                components: c.get("ubm.components", d.ubm.components)?,
                iterations: c.get("ubm.iterations", d.ubm.iterations)?,
                variance_floor: c.get("ubm.variance_floor", d.ubm.variance_floor)?,
            },
            ubm_max_frames: c.get("ubm.max_frames", d.ubm_max_frames)?,
            tv: TvConfig {
                rank: c.get("tv.rank", d.tv.rank)?,
                iterations: c.get("tv.iterations", d.tv.iterations)?,
                init_scale: c.get("tv.init_scale", d.tv.init_scale)?,
            },
            lda_dim: c.get("lda.dim", d.lda_dim)?,
            plda_iterations: c.get("plda.iterations", d.plda_iterations)?,
            plda_min_utts: c.get("plda.min_utts", d.plda_min_utts)?,
            objective,
            dplda_l2_grid: c.get_list("dplda.l2_grid", &d.dplda_l2_grid)?,
            lbfgs: LbfgsConfig {
                max_iterations: c.get("dplda.max_iterations", d.lbfgs.max_iterations)?,
                ..d.lbfgs
            },
            f2s: F2sConfig {
                hidden: c.get_list("f2s.hidden", &d.f2s.hidden)?,
                lr: c.get("f2s.lr", d.f2s.lr)?,
                batch_frames: c.get("f2s.batch_frames", d.f2s.batch_frames)?,
                epochs: c.get("f2s.epochs", d.f2s.epochs)?,
                plateau_tolerance: d.f2s.plateau_tolerance,
            },
            relevance: c.get("s2i.relevance", d.relevance)?,
            pca_dim: c.get("pca.dim", d.pca_dim)?,
            s2i: S2iConfig {
                hidden: c.get_list("s2i.hidden", &d.s2i.hidden)?,
                lr: c.get("s2i.lr", d.s2i.lr)?,
                batch_size: c.get("s2i.batch_size", d.s2i.batch_size)?,
                epochs: c.get("s2i.epochs", d.s2i.epochs)?,
                l1_weight: c.get("s2i.l1", d.s2i.l1_weight)?,
                plateau_tolerance: d.s2i.plateau_tolerance,
            },
            joint: schedule("joint", &d.joint)?,
            joint_lambda: c.get("joint.lambda", d.joint_lambda)?,
            e2e: schedule("e2e", &d.e2e)?,
            e2e_lambda: c.get("e2e.lambda", d.e2e_lambda)?,
        };
        Ok(s)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }
}

/// Labeled view of one split with its prepared frames.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub utts: Vec<PreparedUtt>,
}

impl SplitData {
    pub fn new(corpus: &Corpus, split: Split, frontend: &FrontendConfig) -> Result<Self> {
        Self::from_utterances(&corpus.split(split), frontend)
    }

    pub fn from_utterances(utts: &[&Utterance], frontend: &FrontendConfig) -> Result<Self> {
        let prepared = utts
            .par_iter()
            .map(|u| frontend.prepare(&u.features))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            labels: dense_labels(utts.iter().map(|u| u.speaker.as_str())),
            utts: prepared,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn all_pairs(&self) -> Vec<(usize, usize, bool)> {
        let n = self.len();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, self.labels[i] == self.labels[j]))
            .collect()
    }

    pub fn train_set(&self) -> TrainSet {
        TrainSet {
            utts: self.utts.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn dev_set(&self) -> DevSet {
        DevSet {
            utts: self.utts.clone(),
            trials: self.all_pairs(),
        }
    }
}

pub fn stack_rows(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

pub fn ubm_frames<R: Rng + ?Sized>(
    data: &SplitData,
    max_frames: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let views: Vec<_> = data.utts.iter().map(|u| u.raw.view()).collect();
    let all = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    if max_frames == 0 || all.nrows() <= max_frames {
        return Ok(all);
    }
    let mut idx = rand::seq::index::sample(rng, all.nrows(), max_frames).into_vec();
    idx.sort_unstable();
    Ok(all.select(Axis(0), &idx))
}

pub fn ubm_stats(ubm: &DiagGmm, data: &SplitData) -> Result<Vec<SuffStats>> {
    data.utts
        .par_iter()
        .map(|u| ubm.utterance_stats(&u.raw.view()))
        .collect()
}

pub fn extract_ivectors(tv: &TvModel, ubm: &DiagGmm, stats: &[SuffStats]) -> Result<Array2<f64>> {
    let ext = tv.extractor(ubm)?;
    let rows = stats
        .par_iter()
        .map(|s| ext.extract(s))
        .collect::<Result<Vec<_>>>()?;
    stack_rows(&rows)
}

pub fn supervectors(ubm: &DiagGmm, stats: &[SuffStats], relevance: f64) -> Result<Array2<f64>> {
    let rows = stats
        .par_iter()
        .map(|s| map_supervector(ubm, s, relevance))
        .collect::<Result<Vec<_>>>()?;
    stack_rows(&rows)
}

pub fn score_pairs(
    trials: &[(usize, usize, bool)],
    score: impl Fn(usize, usize) -> Result<f64> + Sync,
) -> Result<ScoredTrials> {
    let scores = trials
        .par_iter()
        .map(|&(i, j, _)| score(i, j))
        .collect::<Result<Vec<_>>>()?;
    ScoredTrials::new(scores, trials.iter().map(|t| t.2).collect())
}

pub fn plda_metrics(
    m: &TwoCovPlda,
    emb: &Array2<f64>,
    trials: &[(usize, usize, bool)],
) -> Result<MetricsReport> {
    MetricsReport::compute(&score_pairs(trials, |i, j| {
        plda_llr(m, &emb.row(i), &emb.row(j))
    })?)
}

pub fn dplda_metrics(
    p: &DpldaParams,
    emb: &Array2<f64>,
    trials: &[(usize, usize, bool)],
) -> Result<MetricsReport> {
    MetricsReport::compute(&score_pairs(trials, |i, j| {
        p.score(&emb.row(i), &emb.row(j))
    })?)
}

/// Full-batch DPLDA from the PLDA initialization for every L2 weight of the
/// grid, keeping the lowest dev C_primary (first on ties).
pub fn tune_dplda(
    plda: &TwoCovPlda,
    train: &Array2<f64>,
    labels: &[usize],
    dev: &Array2<f64>,
    dev_trials: &[(usize, usize, bool)],
    s: &Settings,
) -> Result<(DpldaParams, f64)> {
    let init = to_dplda(plda)?;
    let grid = if s.dplda_l2_grid.is_empty() {
        vec![s.objective.l2_weight]
    } else {
        s.dplda_l2_grid.clone()
    };
    let mut best: Option<(f64, DpldaParams, f64)> = None;
    for &l2 in &grid {
        let cfg = ObjectiveConfig {
            l2_weight: l2,
            ..s.objective
        };
        let params = train_dplda_fullbatch(&init, &train.view(), labels, &cfg, &s.lbfgs)?.params;
        let cost = if grid.len() == 1 {
            0.0
        } else {
            dplda_metrics(&params, dev, dev_trials)?.c_primary
        };
        info!("DPLDA l2={l2:e} dev C_primary {cost:.4}");
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, params, l2));
        }
    }
    let (_, params, l2) = best.expect("grid is non-empty");
    Ok((params, l2))
}

/// The individually trained modules of the i-vector and NN cascades.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub ubm: DiagGmm,
    pub ubm_loglik: Vec<f64>,
    pub tv: TvModel,
    pub tv_objective: Vec<f64>,
    pub prep: IvecPrep,
    pub plda: TwoCovPlda,
    pub plda_loglik: Vec<f64>,
    pub dplda: DpldaParams,
    pub dplda_l2: f64,
    pub train: SplitData,
    pub dev: SplitData,
    /// Length-normalized LDA i-vectors of the train and dev splits.
    pub train_ivec: Array2<f64>,
    pub dev_ivec: Array2<f64>,
    pub train_stats: Vec<SuffStats>,
}

impl Cascade {
    /// UBM, total variability, LDA, PLDA and full-batch DPLDA.
    pub fn train_ivector<R: Rng + ?Sized>(
        corpus: &Corpus,
        s: &Settings,
        rng: &mut R,
    ) -> Result<Self> {
        let train = SplitData::new(corpus, Split::Train, &s.frontend)?;
        let dev = SplitData::new(corpus, Split::Dev, &s.frontend)?;
        if train.is_empty() || dev.is_empty() {
            return Err(Error::Config(
                "train and dev splits must be non-empty".into(),
            ));
        }
        let frames = ubm_frames(&train, s.ubm_max_frames, rng)?;
        let ubm_fit = train_ubm(&frames.view(), &s.ubm, rng)?;
        info!("UBM trained on {} frames", frames.nrows());
        let ubm = ubm_fit.gmm;
        let train_stats = ubm_stats(&ubm, &train)?;
        let dev_stats = ubm_stats(&ubm, &dev)?;
        let tv_fit = train_tv(&train_stats, &ubm, &s.tv, rng)?;
        let tv = tv_fit.model;
        let train_raw = extract_ivectors(&tv, &ubm, &train_stats)?;
        let dev_raw = extract_ivectors(&tv, &ubm, &dev_stats)?;
        let prep = fit_prep(&train_raw.view(), &train.labels, s.lda_dim)?;
        let train_ivec = prep.apply_rows(&train_raw.view())?;
        let dev_ivec = prep.apply_rows(&dev_raw.view())?;
        let plda_fit = train_plda(&train_ivec.view(), &train.labels, s.plda_iterations)?;
        let (dplda, dplda_l2) = tune_dplda(
            &plda_fit.model,
            &train_ivec,
            &train.labels,
            &dev_ivec,
            &dev.all_pairs(),
            s,
        )?;
        Ok(Self {
            ubm,
            ubm_loglik: ubm_fit.log_likelihood,
            tv,
            tv_objective: tv_fit.objective,
            prep,
            plda: plda_fit.model,
            plda_loglik: plda_fit.log_likelihood,
            dplda,
            dplda_l2,
            train,
            dev,
            train_ivec,
            dev_ivec,
            train_stats,
        })
    }

    pub fn plda_dev(&self) -> Result<MetricsReport> {
        plda_metrics(&self.plda, &self.dev_ivec, &self.dev.all_pairs())
    }

    pub fn dplda_dev(&self) -> Result<MetricsReport> {
        dplda_metrics(&self.dplda, &self.dev_ivec, &self.dev.all_pairs())
    }

    /// Frame-level UBM posteriors of the training split, the f2s targets.
    pub fn f2s_targets(&self) -> Result<Vec<Array2<f64>>> {
        self.train
            .utts
            .par_iter()
            .map(|u| self.ubm.responsibilities(&u.raw.view()))
            .collect()
    }

    pub fn train_f2s<R: Rng + ?Sized>(&self, s: &Settings, rng: &mut R) -> Result<F2sNet> {
        let expanded: Vec<Array2<f64>> =
            self.train.utts.iter().map(|u| u.expanded.clone()).collect();
        Ok(train_f2s(&expanded, &self.f2s_targets()?, &s.f2s, rng)?.net)
    }

    pub fn fit_pca(&self, s: &Settings) -> Result<PcaModel> {
        let sv = supervectors(&self.ubm, &self.train_stats, s.relevance)?;
        fit_pca(&sv.view(), s.pca_dim.min(sv.nrows() - 1))
    }

    pub fn train_s2i<R: Rng + ?Sized>(
        &self,
        pca: &PcaModel,
        s: &Settings,
        rng: &mut R,
    ) -> Result<(S2iNet, Vec<f64>)> {
        let sv = supervectors(&self.ubm, &self.train_stats, s.relevance)?;
        let z = pca.project_rows(&sv.view())?;
        let fit = train_s2i(&z.view(), &self.train_ivec.view(), &s.s2i, rng)?;
        Ok((fit.net, fit.history))
    }

    /// Assembles the NN cascade with the given back-end.
    pub fn assemble(
        &self,
        f2s: F2sNet,
        pca: PcaModel,
        s2i: S2iNet,
        dplda: DpldaParams,
        s: &Settings,
    ) -> Result<E2eSystem> {
        E2eSystem::new(
            s.frontend,
            f2s,
            self.ubm.clone(),
            s.relevance,
            pca,
            s2i,
            dplda,
        )
    }
}

/// Seeded generator used by every stage.
pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    let salt = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}
