//! Labeled utterance collections, their on-disk layout and a synthetic
//! generator with speaker, channel and content variability.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, DEFAULT_FRAME_RATE_HZ};
use crate::io::{
    read_features, read_file, write_features, write_file, Trial, TrialLabel, TrialList,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::input(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
}

impl Corpus {
    /// Requires unique whitespace-free ids and disjoint dev and eval speakers.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut speakers: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
        for u in &utterances {
            if u.id.is_empty() || u.id.contains(char::is_whitespace) {
                return Err(Error::input(format!("bad utterance id {:?}", u.id)));
            }
            if u.speaker.is_empty() || u.speaker.contains(char::is_whitespace) {
                return Err(Error::input(format!("bad speaker id {:?}", u.speaker)));
            }
            if !ids.insert(u.id.as_str()) {
                return Err(Error::input(format!("duplicate utterance id {}", u.id)));
            }
            speakers.entry(u.split).or_default().insert(&u.speaker);
        }
        let empty = BTreeSet::new();
        let dev = speakers.get(&Split::Dev).unwrap_or(&empty);
        let eval = speakers.get(&Split::Eval).unwrap_or(&empty);
        if let Some(s) = dev.intersection(eval).next() {
            return Err(Error::input(format!(
                "speaker {s} appears in both dev and eval"
            )));
        }
        Ok(Self { utterances })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<&str> {
        self.split(split)
            .into_iter()
            .map(|u| u.speaker.as_str())
            .collect()
    }

    /// Keeps training speakers with at least `min` utterances; other splits are untouched.
    pub fn filter_train_speakers(&self, min: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for u in self.split(Split::Train) {
            *counts.entry(&u.speaker).or_default() += 1;
        }
        Self::new(
            self.utterances
                .iter()
                .filter(|u| u.split != Split::Train || counts[u.speaker.as_str()] >= min)
                .cloned()
                .collect(),
        )
    }

    /// All unordered pairs of a split, labeled by speaker identity.
    pub fn all_pairs_trials(&self, split: Split) -> TrialList {
        let utts = self.split(split);
        let mut trials = Vec::new();
        for i in 0..utts.len() {
            for j in (i + 1)..utts.len() {
                trials.push(Trial {
                    enroll: utts[i].id.clone(),
                    test: utts[j].id.clone(),
                    label: if utts[i].speaker == utts[j].speaker {
                        TrialLabel::Target
                    } else {
                        TrialLabel::Nontarget
                    },
                });
            }
        }
        TrialList { trials }
    }

    /// Writes `corpus.lst` and one feature file per utterance under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut list = String::new();
        for u in &self.utterances {
            list.push_str(&format!("{} {} {}\n", u.id, u.speaker, u.split));
            write_features(
                &dir.join("features").join(format!("{}.svf", u.id)),
                &u.features,
            )?;
        }
        write_file(&dir.join("corpus.lst"), list.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let bytes = read_file(&dir.join("corpus.lst"))?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::format(0, "corpus list is not UTF-8"))?;
        let mut utts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!(
                        "expected id, speaker and split, found {} columns",
                        cols.len()
                    ),
                });
            }
            let split = cols[2].parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("unknown split {:?}", cols[2]),
            })?;
            utts.push(Utterance {
                id: cols[0].to_owned(),
                speaker: cols[1].to_owned(),
                split,
                features: read_features(&dir.join("features").join(format!("{}.svf", cols[0])))?,
            });
        }
        Self::new(utts)
    }
}

/// Speaker ids mapped to dense labels in order of first appearance.
pub fn dense_labels<'a>(speakers: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
    let mut map: BTreeMap<&str, usize> = BTreeMap::new();
    speakers
        .into_iter()
        .map(|s| {
            let n = map.len();
            *map.entry(s).or_insert(n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub speaker_dim: usize,
    pub channel_dim: usize,
    /// Scale of the per-frame content process and observation noise.
    pub noise: f64,
    /// Gain inside the `tanh` of the mixing map; 0 makes it linear.
    pub nonlinearity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 50,
            utts_per_speaker: 8,
            min_frames: 200,
            max_frames: 800,
            feature_dim: 20,
            speaker_dim: 10,
            channel_dim: 4,
            noise: 1.0,
            nonlinearity: 0.5,
            seed: 1,
        }
    }
}

const CONTENT_AR: f64 = 0.9;
const CONTENT_SCALE: f64 = 0.3;
const CHANNEL_SCALE: f64 = 0.5;
const OBSERVATION_NOISE: f64 = 0.2;
const N_PHONES: usize = 12;
const PHONE_SPREAD: f64 = 2.0;
const SPEAKER_SCALE: f64 = 0.4;
/// Probability of staying in the current phone, i.e. a mean duration of 10 frames.
const PHONE_STAY: f64 = 0.9;

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_speakers == 0
            || self.utts_per_speaker == 0
            || self.feature_dim == 0
            || self.speaker_dim == 0
        {
            return Err(Error::Config(
                "synthetic corpus counts must be at least 1".into(),
            ));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "bad duration range {}..{}",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.noise >= 0.0 && self.nonlinearity >= 0.0) {
            return Err(Error::Config(
                "noise and nonlinearity must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Split of the `i`-th speaker: the first 60% train, then 20% dev, 20% eval.
    pub fn split_of(&self, speaker: usize) -> Split {
        let train = (self.n_speakers * 3).div_ceil(5);
        let dev = (self.n_speakers - train).div_ceil(2);
        if speaker < train {
            Split::Train
        } else if speaker < train + dev {
            Split::Dev
        } else {
            Split::Eval
        }
    }
}

fn gaussian_matrix(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Deterministic corpus. Each frame comes from a hidden phone `k` (a
/// sticky Markov chain) through `x = A₂·tanh(g·A₁·l)/g + ε` with latent
/// `l = P_k + M_k·y + C·h + content`, where `y` is the speaker factor, `h`
/// the per-utterance channel factor and `content` an AR(1) process. Values
/// are rounded to `f32` so they survive the feature format.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (l, d) = (cfg.speaker_dim, cfg.feature_dim);
    let hidden = 2 * d;
    let a1 = gaussian_matrix(hidden, l, 1.0 / (l as f64).sqrt(), &mut rng);
    let a2 = gaussian_matrix(d, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng);
    let chan = gaussian_matrix(
        l,
        cfg.channel_dim,
        CHANNEL_SCALE / (cfg.channel_dim.max(1) as f64).sqrt(),
        &mut rng,
    );
    let phones: Vec<Array1<f64>> = (0..N_PHONES)
        .map(|_| PHONE_SPREAD * gaussian_vector(l, &mut rng))
        .collect();
    let loadings: Vec<Array2<f64>> = (0..N_PHONES)
        .map(|_| gaussian_matrix(l, l, SPEAKER_SCALE / (l as f64).sqrt(), &mut rng))
        .collect();
    let g = cfg.nonlinearity;
    let innovation = (1.0 - CONTENT_AR * CONTENT_AR).sqrt();

    let mut utts = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for s in 0..cfg.n_speakers {
        let speaker = gaussian_vector(l, &mut rng);
        let centers: Vec<Array1<f64>> = phones
            .iter()
            .zip(&loadings)
            .map(|(p, m)| p + &m.dot(&speaker))
            .collect();
        let spk_id = format!("spk{s:03}");
        for u in 0..cfg.utts_per_speaker {
            let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let channel = chan.dot(&gaussian_vector(cfg.channel_dim, &mut rng));
            let mut content = gaussian_vector(l, &mut rng);
            let mut phone = rng.random_range(0..N_PHONES);
            let mut frames = Array2::zeros((t, d));
            for (i, mut row) in frames.rows_mut().into_iter().enumerate() {
                if i > 0 {
                    content = CONTENT_AR * &content + innovation * &gaussian_vector(l, &mut rng);
                    if !rng.random_bool(PHONE_STAY) {
                        phone = rng.random_range(0..N_PHONES);
                    }
                }
                let latent = &centers[phone] + &channel + &(cfg.noise * CONTENT_SCALE * &content);
                let h = a1.dot(&latent);
                let h = if g > 0.0 {
                    h.mapv(|v| (g * v).tanh() / g)
                } else {
                    h
                };
                let obs = gaussian_vector(d, &mut rng);
                let x = a2.dot(&h) + cfg.noise * OBSERVATION_NOISE * &obs;
                row.assign(&x.mapv(|v| v as f32 as f64));
            }
            utts.push(Utterance {
                id: format!("{spk_id}_utt{u:02}"),
                speaker: spk_id.clone(),
                split: cfg.split_of(s),
                features: FeatureMatrix::new(frames, DEFAULT_FRAME_RATE_HZ)?,
            });
        }
    }
    Corpus::new(utts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_speakers: 5,
            utts_per_speaker: 3,
            min_frames: 20,
            max_frames: 40,
            feature_dim: 4,
            speaker_dim: 3,
            channel_dim: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(
            synth_corpus(&small()).unwrap(),
            synth_corpus(&small()).unwrap()
        );
    }

    #[test]
    fn noiseless_channel_free_speakers_use_few_distinct_frames() {
        let cfg = SynthConfig {
            noise: 0.0,
            channel_dim: 0,
            ..small()
        };
        let c = synth_corpus(&cfg).unwrap();
        for spk in c.utterances().chunks(3) {
            let mut seen: Vec<Vec<u64>> = Vec::new();
            for u in spk {
                for r in u.features.frames.rows() {
                    let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
                    if !seen.contains(&key) {
                        seen.push(key);
                    }
                }
            }
            assert!(seen.len() <= N_PHONES, "{} distinct frames", seen.len());
        }
    }

    #[test]
    fn splits_are_speaker_disjoint() {
        let c = synth_corpus(&SynthConfig {
            n_speakers: 50,
            utts_per_speaker: 1,
            min_frames: 2,
            max_frames: 2,
            ..small()
        })
        .unwrap();
        let (tr, dv, ev) = (
            c.speakers(Split::Train),
            c.speakers(Split::Dev),
            c.speakers(Split::Eval),
        );
        assert_eq!((tr.len(), dv.len(), ev.len()), (30, 10, 10));
        assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&ev) && dv.is_disjoint(&ev));
    }

    #[test]
    fn durations_in_range() {
        let c = synth_corpus(&small()).unwrap();
        assert!(c
            .utterances()
            .iter()
            .all(|u| (20..=40).contains(&u.features.n_frames())));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(&small()).unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(Corpus::read(dir.path()).unwrap(), c);
    }

    #[test]
    fn overlapping_dev_eval_rejected() {
        let f = FeatureMatrix::new(Array2::zeros((1, 1)), 100.0).unwrap();
        let u = |id: &str, split| Utterance {
            id: id.into(),
            speaker: "s".into(),
            split,
            features: f.clone(),
        };
        assert!(Corpus::new(vec![u("a", Split::Dev), u("b", Split::Eval)]).is_err());
        assert!(Corpus::new(vec![u("a", Split::Dev), u("a", Split::Dev)]).is_err());
    }

    #[test]
    fn dense_labels_follow_first_appearance() {
        assert_eq!(dense_labels(["b", "a", "b", "c"]), vec![0, 1, 0, 2]);
    }
}
