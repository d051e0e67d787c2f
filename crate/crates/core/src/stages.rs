//! One function per command-line stage. Each reads its inputs from and
//! writes its outputs to the work directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::corpus::{synth_corpus, Corpus, Split, SynthConfig};
use crate::dplda::DpldaParams;
use crate::e2e::{train_e2e_full, train_joint_s2i_dplda, E2eSystem, TrainOutcome, TrainSchedule};
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ScoredTrials};
use crate::f2s::{train_f2s, F2sNet};
use crate::gmm::{train_ubm, DiagGmm, SuffStats};
use crate::io::{
    read_container, read_scores, read_trials, write_container, write_file, write_scores,
    write_trials, ScoreLine, TrialLabel, TrialList,
};
use crate::ivector::{fit_prep, train_tv, IvecPrep, TvModel};
use crate::persist::{
    load_model, rows_with_ids, save_model, stats_from_tensors, stats_to_tensors,
    vectors_from_tensors, vectors_to_tensors, Persist,
};
use crate::pipeline::{
    extract_ivectors, stack_rows, stage_rng, supervectors, tune_dplda, ubm_frames, ubm_stats,
    Settings, SplitData,
};
use crate::plda::{plda_llr, to_dplda, train_plda, TwoCovPlda};
use crate::s2i::{fit_pca, train_s2i, PcaModel, S2iNet};

pub const SPLITS: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

/// Scoring back-ends selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Plda,
    Dplda,
    Joint,
    E2e,
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plda" => Ok(Self::Plda),
            "dplda" => Ok(Self::Dplda),
            "joint" => Ok(Self::Joint),
            "e2e" => Ok(Self::E2e),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plda => "plda",
            Self::Dplda => "dplda",
            Self::Joint => "joint",
            Self::E2e => "e2e",
        }
    }
}

/// File locations inside the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.svm"))
    }

    pub fn stats(&self, split: Split) -> PathBuf {
        self.root.join("stats").join(format!("{split}.svm"))
    }

    pub fn ivectors(&self, split: Split) -> PathBuf {
        self.root.join("ivectors").join(format!("{split}.svm"))
    }

    pub fn trials(&self, split: Split) -> PathBuf {
        self.root.join("trials").join(format!("{split}.trials"))
    }

    pub fn scores(&self, system: System, trials: &Path) -> PathBuf {
        let stem = trials
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("trials");
        self.root
            .join("scores")
            .join(format!("{}_{stem}.scores", system.name()))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.log"))
    }
}

/// Everything a stage needs besides its own arguments.
#[derive(Debug, Clone)]
pub struct Context {
    pub settings: Settings,
    pub layout: Layout,
    pub seed: u64,
}

impl Context {
    pub fn new(settings: Settings, seed: u64) -> Self {
        let layout = Layout::new(settings.workdir.clone());
        Self {
            settings,
            layout,
            seed,
        }
    }

    fn corpus(&self) -> Result<Corpus> {
        Corpus::read(&self.layout.corpus())
    }

    fn load<T: Persist>(&self, name: &str) -> Result<T> {
        load_model(&self.layout.model(name))
    }

    fn save<T: Persist>(&self, name: &str, model: &T) -> Result<()> {
        let path = self.layout.model(name);
        save_model(&path, model)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn split_data(&self, corpus: &Corpus, split: Split) -> Result<SplitData> {
        SplitData::new(corpus, split, &self.settings.frontend)
    }

    fn write_log(&self, name: &str, text: &str) -> Result<()> {
        write_file(&self.layout.log(name), text.as_bytes())
    }
}

fn lines<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().fold(String::new(), |mut s, v| {
        let _ = writeln!(s, "{v}");
        s
    })
}

pub fn synth_data(ctx: &Context) -> Result<Corpus> {
    let cfg: SynthConfig = ctx.settings.synth.clone();
    let corpus = synth_corpus(&cfg)?;
    corpus.write(&ctx.layout.corpus())?;
    for split in [Split::Dev, Split::Eval] {
        write_trials(&ctx.layout.trials(split), &corpus.all_pairs_trials(split))?;
    }
    info!(
        "wrote {} utterances to {}",
        corpus.len(),
        ctx.layout.corpus().display()
    );
    Ok(corpus)
}

pub fn train_ubm_stage(ctx: &Context) -> Result<DiagGmm> {
    let s = &ctx.settings;
    let train = ctx.split_data(&ctx.corpus()?, Split::Train)?;
    let mut rng = stage_rng(ctx.seed, "ubm");
    let frames = ubm_frames(&train, s.ubm_max_frames, &mut rng)?;
    let fit = train_ubm(&frames.view(), &s.ubm, &mut rng)?;
    ctx.write_log("ubm", &lines(&fit.log_likelihood))?;
    ctx.save("ubm", &fit.gmm)?;
    Ok(fit.gmm)
}

pub fn extract_stats_stage(ctx: &Context) -> Result<()> {
    let corpus = ctx.corpus()?;
    let ubm: DiagGmm = ctx.load("ubm")?;
    for split in SPLITS {
        let data = ctx.split_data(&corpus, split)?;
        let stats = ubm_stats(&ubm, &data)?;
        let items: Vec<(String, SuffStats)> = data.ids.into_iter().zip(stats).collect();
        write_container(&ctx.layout.stats(split), &stats_to_tensors(&items)?)?;
    }
    Ok(())
}

fn load_stats(ctx: &Context, split: Split) -> Result<Vec<(String, SuffStats)>> {
    stats_from_tensors(&read_container(&ctx.layout.stats(split))?)
}

pub fn train_tv_stage(ctx: &Context) -> Result<TvModel> {
    let ubm: DiagGmm = ctx.load("ubm")?;
    let stats: Vec<SuffStats> = load_stats(ctx, Split::Train)?
        .into_iter()
        .map(|p| p.1)
        .collect();
    let mut rng = stage_rng(ctx.seed, "tv");
    let fit = train_tv(&stats, &ubm, &ctx.settings.tv, &mut rng)?;
    ctx.write_log("tv", &lines(&fit.objective))?;
    ctx.save("tv", &fit.model)?;
    Ok(fit.model)
}

fn speaker_labels(corpus: &Corpus, ids: &[String]) -> Result<Vec<usize>> {
    let speakers = ids
        .iter()
        .map(|id| {
            corpus
                .get(id)
                .map(|u| u.speaker.as_str())
                .ok_or_else(|| Error::input(format!("utterance {id} is not in the corpus")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::corpus::dense_labels(speakers))
}

/// Raw i-vectors of every split, then the LDA/length-norm transform fitted on train.
pub fn extract_ivec_stage(ctx: &Context) -> Result<IvecPrep> {
    let ubm: DiagGmm = ctx.load("ubm")?;
    let tv: TvModel = ctx.load("tv")?;
    let mut train = None;
    for split in SPLITS {
        let (ids, stats): (Vec<String>, Vec<SuffStats>) =
            load_stats(ctx, split)?.into_iter().unzip();
        let ivec = if ids.is_empty() {
            Array2::zeros((0, tv.rank()))
        } else {
            extract_ivectors(&tv, &ubm, &stats)?
        };
        write_container(
            &ctx.layout.ivectors(split),
            &vectors_to_tensors("ivec", &rows_with_ids(&ids, &ivec))?,
        )?;
        if split == Split::Train {
            train = Some((ids, ivec));
        }
    }
    let (ids, ivec) = train.expect("train split is always processed");
    let labels = speaker_labels(&ctx.corpus()?, &ids)?;
    let prep = fit_prep(&ivec.view(), &labels, ctx.settings.lda_dim)?;
    ctx.save("prep", &prep)?;
    Ok(prep)
}

/// Ids and LDA-reduced, length-normalized i-vectors of one split.
fn load_ivectors(
    ctx: &Context,
    split: Split,
    prep: &IvecPrep,
) -> Result<(Vec<String>, Array2<f64>)> {
    let (ids, rows): (Vec<String>, Vec<Array1<f64>>) =
        vectors_from_tensors("ivec", &read_container(&ctx.layout.ivectors(split))?)?
            .into_iter()
            .unzip();
    if ids.is_empty() {
        return Ok((ids, Array2::zeros((0, prep.output_dim()))));
    }
    let raw = stack_rows(&rows)?;
    Ok((ids, prep.apply_rows(&raw.view())?))
}

pub fn train_plda_stage(ctx: &Context) -> Result<TwoCovPlda> {
    let prep: IvecPrep = ctx.load("prep")?;
    let (ids, x) = load_ivectors(ctx, Split::Train, &prep)?;
    let labels = speaker_labels(&ctx.corpus()?, &ids)?;
    let fit = train_plda(&x.view(), &labels, ctx.settings.plda_iterations)?;
    ctx.write_log("plda", &lines(&fit.log_likelihood))?;
    ctx.save("plda", &fit.model)?;
    Ok(fit.model)
}

pub fn train_dplda_stage(ctx: &Context) -> Result<DpldaParams> {
    let corpus = ctx.corpus()?;
    let prep: IvecPrep = ctx.load("prep")?;
    let plda: TwoCovPlda = ctx.load("plda")?;
    let (train_ids, train) = load_ivectors(ctx, Split::Train, &prep)?;
    let (dev_ids, dev) = load_ivectors(ctx, Split::Dev, &prep)?;
    let labels = speaker_labels(&corpus, &train_ids)?;
    let dev_labels = speaker_labels(&corpus, &dev_ids)?;
    let n = dev_ids.len();
    let trials: Vec<(usize, usize, bool)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, dev_labels[i] == dev_labels[j]))
        .collect();
    let (params, l2) = tune_dplda(&plda, &train, &labels, &dev, &trials, &ctx.settings)?;
    ctx.write_log("dplda", &format!("l2={l2:e}\n"))?;
    ctx.save("dplda", &params)?;
    Ok(params)
}

pub fn train_f2s_stage(ctx: &Context) -> Result<F2sNet> {
    let ubm: DiagGmm = ctx.load("ubm")?;
    let train = ctx.split_data(&ctx.corpus()?, Split::Train)?;
    let targets = train
        .utts
        .par_iter()
        .map(|u| ubm.responsibilities(&u.raw.view()))
        .collect::<Result<Vec<_>>>()?;
    let expanded: Vec<Array2<f64>> = train.utts.into_iter().map(|u| u.expanded).collect();
    let mut rng = stage_rng(ctx.seed, "f2s");
    let fit = train_f2s(&expanded, &targets, &ctx.settings.f2s, &mut rng)?;
    ctx.write_log("f2s", &lines(&fit.epoch_loss))?;
    ctx.save("f2s", &fit.net)?;
    Ok(fit.net)
}

fn train_supervectors(ctx: &Context, ubm: &DiagGmm) -> Result<(Vec<String>, Array2<f64>)> {
    let (ids, stats): (Vec<String>, Vec<SuffStats>) =
        load_stats(ctx, Split::Train)?.into_iter().unzip();
    Ok((ids, supervectors(ubm, &stats, ctx.settings.relevance)?))
}

pub fn fit_pca_stage(ctx: &Context) -> Result<PcaModel> {
    let ubm: DiagGmm = ctx.load("ubm")?;
    let (_, sv) = train_supervectors(ctx, &ubm)?;
    let dim = ctx.settings.pca_dim.min(sv.nrows().saturating_sub(1));
    let pca = fit_pca(&sv.view(), dim)?;
    ctx.save("pca", &pca)?;
    Ok(pca)
}

pub fn train_s2i_stage(ctx: &Context) -> Result<S2iNet> {
    let ubm: DiagGmm = ctx.load("ubm")?;
    let pca: PcaModel = ctx.load("pca")?;
    let prep: IvecPrep = ctx.load("prep")?;
    let (sv_ids, sv) = train_supervectors(ctx, &ubm)?;
    let (iv_ids, refs) = load_ivectors(ctx, Split::Train, &prep)?;
    if sv_ids != iv_ids {
        return Err(Error::input(
            "train statistics and i-vectors list different utterances",
        ));
    }
    let z = pca.project_rows(&sv.view())?;
    let mut rng = stage_rng(ctx.seed, "s2i");
    let fit = train_s2i(&z.view(), &refs.view(), &ctx.settings.s2i, &mut rng)?;
    ctx.write_log("s2i", &lines(&fit.history))?;
    ctx.save("s2i", &fit.net)?;
    Ok(fit.net)
}

/// The NN cascade assembled from the individually trained modules, with the
/// DPLDA back-end if present and the converted PLDA otherwise.
pub fn assemble_system(ctx: &Context) -> Result<E2eSystem> {
    let dplda = if ctx.layout.model("dplda").exists() {
        ctx.load("dplda")?
    } else {
        to_dplda(&ctx.load::<TwoCovPlda>("plda")?)?
    };
    E2eSystem::new(
        ctx.settings.frontend,
        ctx.load("f2s")?,
        ctx.load("ubm")?,
        ctx.settings.relevance,
        ctx.load("pca")?,
        ctx.load("s2i")?,
        dplda,
    )
}

fn run_training(
    ctx: &Context,
    name: &str,
    mut sys: E2eSystem,
    schedule: &TrainSchedule,
    lambda: f64,
    full: bool,
) -> Result<TrainOutcome> {
    sys.reset_snapshot(lambda)?;
    let corpus = ctx.corpus()?;
    let train = ctx.split_data(&corpus, Split::Train)?.train_set();
    let dev = ctx.split_data(&corpus, Split::Dev)?.dev_set();
    let mut rng = stage_rng(ctx.seed, name);
    let out = if full {
        train_e2e_full(&sys, &train, &dev, schedule, &mut rng)?
    } else {
        train_joint_s2i_dplda(&sys, &train, &dev, schedule, &mut rng)?
    };
    let mut log = format!(
        "# initial dev eer={} c_primary={}\n",
        out.initial_dev.eer, out.initial_dev.c_primary
    );
    log.push_str(&lines(&out.logs));
    let _ = writeln!(log, "# best epoch {}", out.best_epoch);
    ctx.write_log(name, &log)?;
    ctx.save(name, &out.system)?;
    Ok(out)
}

pub fn train_joint_stage(ctx: &Context) -> Result<TrainOutcome> {
    let s = &ctx.settings;
    run_training(
        ctx,
        "joint",
        assemble_system(ctx)?,
        &s.joint,
        s.joint_lambda,
        false,
    )
}

pub fn train_e2e_stage(ctx: &Context) -> Result<TrainOutcome> {
    let s = &ctx.settings;
    let sys = if ctx.layout.model("joint").exists() {
        ctx.load("joint")?
    } else {
        assemble_system(ctx)?
    };
    run_training(ctx, "e2e", sys, &s.e2e, s.e2e_lambda, true)
}

/// Distinct utterance ids of a trial list in first-appearance order.
fn trial_ids(trials: &TrialList) -> Vec<String> {
    let mut seen = HashMap::new();
    let mut ids = Vec::new();
    for t in &trials.trials {
        for id in [&t.enroll, &t.test] {
            if !seen.contains_key(id) {
                seen.insert(id.clone(), ids.len());
                ids.push(id.clone());
            }
        }
    }
    ids
}

fn embeddings_for(
    ctx: &Context,
    system: System,
    ids: &[String],
) -> Result<(HashMap<String, usize>, Array2<f64>, Scorer)> {
    let index: HashMap<String, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    match system {
        System::Plda | System::Dplda => {
            let prep: IvecPrep = ctx.load("prep")?;
            let mut found: HashMap<String, Array1<f64>> = HashMap::new();
            for split in SPLITS {
                let (sids, x) = load_ivectors(ctx, split, &prep)?;
                for (id, row) in sids.into_iter().zip(x.rows()) {
                    if index.contains_key(&id) {
                        found.insert(id, row.to_owned());
                    }
                }
            }
            let rows = ids
                .iter()
                .map(|id| {
                    found
                        .remove(id)
                        .ok_or_else(|| Error::input(format!("no i-vector for utterance {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let emb = stack_rows(&rows)?;
            let scorer = if system == System::Plda {
                Scorer::Plda(ctx.load("plda")?)
            } else {
                Scorer::Dplda(ctx.load("dplda")?)
            };
            Ok((index, emb, scorer))
        }
        System::Joint | System::E2e => {
            let sys: E2eSystem = ctx.load(system.name())?;
            let corpus = ctx.corpus()?;
            let utts = ids
                .iter()
                .map(|id| {
                    corpus
                        .get(id)
                        .ok_or_else(|| Error::input(format!("utterance {id} is not in the corpus")))
                })
                .collect::<Result<Vec<_>>>()?;
            let prepared = utts
                .par_iter()
                .map(|u| sys.prepare(&u.features))
                .collect::<Result<Vec<_>>>()?;
            let emb = sys.embed_all(&prepared)?;
            Ok((index, emb, Scorer::Dplda(sys.dplda)))
        }
    }
}

enum Scorer {
    Plda(TwoCovPlda),
    Dplda(DpldaParams),
}

/// Scores every trial of the list with the chosen system.
pub fn score_stage(
    ctx: &Context,
    system: System,
    trials_path: &Path,
    out: Option<&Path>,
) -> Result<Vec<ScoreLine>> {
    let trials = read_trials(trials_path)?;
    let ids = trial_ids(&trials);
    let (index, emb, scorer) = embeddings_for(ctx, system, &ids)?;
    let lines = trials
        .trials
        .par_iter()
        .map(|t| {
            let (a, b) = (emb.row(index[&t.enroll]), emb.row(index[&t.test]));
            let score = match &scorer {
                Scorer::Plda(m) => plda_llr(m, &a, &b)?,
                Scorer::Dplda(p) => p.score(&a, &b)?,
            };
            Ok(ScoreLine {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.layout.scores(system, trials_path));
    write_scores(&path, &lines)?;
    info!("wrote {} scores to {}", lines.len(), path.display());
    Ok(lines)
}

/// Joins scores with the labels of a trial list.
pub fn labeled_scores(scores: &[ScoreLine], trials: &TrialList) -> Result<ScoredTrials> {
    let by_pair: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score))
        .collect();
    let mut values = Vec::with_capacity(trials.trials.len());
    let mut targets = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let is_target = match t.label {
            TrialLabel::Target => true,
            TrialLabel::Nontarget => false,
            TrialLabel::Unlabeled => {
                return Err(Error::input(format!(
                    "trial {} {} has no label",
                    t.enroll, t.test
                )));
            }
        };
        let score = by_pair
            .get(&(t.enroll.as_str(), t.test.as_str()))
            .ok_or_else(|| Error::input(format!("no score for trial {} {}", t.enroll, t.test)))?;
        values.push(*score);
        targets.push(is_target);
    }
    ScoredTrials::new(values, targets)
}

/// Metrics of a score file against a labeled trial list; with `out`, the text
/// report goes to `out` and the key-value form next to it with extension `kv`.
pub fn eval_stage(
    scores_path: &Path,
    trials_path: &Path,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let scored = labeled_scores(&read_scores(scores_path)?, &read_trials(trials_path)?)?;
    let report = MetricsReport::compute(&scored)?;
    if let Some(out) = out {
        write_file(out, report.to_text().as_bytes())?;
        write_file(&out.with_extension("kv"), report.to_kv().as_bytes())?;
    }
    Ok(report)
}
