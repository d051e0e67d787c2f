use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use svpipe::config::Config;
use svpipe::corpus::{self, Split};
use svpipe::dplda::DpldaParams;
use svpipe::e2e::{self, E2eSystem, EpochLog};
use svpipe::eval::{MetricsReport, ScoredTrials};
use svpipe::frontend::FeatureMatrix;
use svpipe::io::TrialLabel;
use svpipe::persist::{load_model, save_model};
use svpipe::pipeline::{stage_rng, Cascade, Settings};
use svpipe::plda::{plda_llr, to_dplda, TwoCovPlda};

fn py_err(e: svpipe::Error) -> PyErr {
    match e {
        svpipe::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn settings(seed: u64, overrides: Option<HashMap<String, String>>) -> PyResult<Settings> {
    let mut cfg = Config::default();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, v);
    }
    let mut s = Settings::from_config(&cfg).map_err(py_err)?;
    if cfg.raw("synth.seed").is_none() {
        s.synth.seed = seed;
    }
    Ok(s)
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().map_err(py_err)
}

fn report<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n_trials", m.n_trials)?;
    d.set_item("n_targets", m.n_targets)?;
    d.set_item("eer", m.eer)?;
    d.set_item("min_dcf_01", m.min_dcf_01)?;
    d.set_item("min_dcf_005", m.min_dcf_005)?;
    d.set_item("c_primary", m.c_primary)?;
    Ok(d)
}

fn features(frames: Vec<Vec<f64>>, rate: f64) -> PyResult<FeatureMatrix> {
    FeatureMatrix::new(matrix(frames)?, rate).map_err(py_err)
}

/// EER, minimum detection costs and C_primary of scored trials.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    is_target: Vec<bool>,
) -> PyResult<Bound<'py, PyDict>> {
    let t = ScoredTrials::new(scores, is_target).map_err(py_err)?;
    report(py, &MetricsReport::compute(&t).map_err(py_err)?)
}

/// Synthetic multi-speaker corpus split into train, dev and eval speakers.
#[pyclass(name = "Corpus", module = "svpipe_py")]
struct PyCorpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (seed = 1, settings = None))]
    fn synth(seed: u64, settings: Option<HashMap<String, String>>) -> PyResult<Self> {
        let s = self::settings(seed, settings)?;
        Ok(Self {
            inner: corpus::synth_corpus(&s.synth).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: corpus::Corpus::read(&dir).map_err(py_err)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self
            .inner
            .split(self::split(split)?)
            .iter()
            .map(|u| u.id.clone())
            .collect())
    }

    fn speaker(&self, id: &str) -> PyResult<String> {
        self.utt(id).map(|u| u.speaker.clone())
    }

    fn features(&self, id: &str) -> PyResult<Vec<Vec<f64>>> {
        self.utt(id).map(|u| rows(&u.features.frames))
    }

    /// All unordered pairs of a split as `(enroll, test, is_target)`.
    fn trials(&self, split: &str) -> PyResult<Vec<(String, String, bool)>> {
        Ok(self
            .inner
            .all_pairs_trials(self::split(split)?)
            .trials
            .into_iter()
            .map(|t| (t.enroll, t.test, t.label == TrialLabel::Target))
            .collect())
    }
}

impl PyCorpus {
    fn utt(&self, id: &str) -> PyResult<&corpus::Utterance> {
        self.inner
            .get(id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown utterance {id}")))
    }
}

/// Two-covariance PLDA model.
#[pyclass(name = "Plda", module = "svpipe_py")]
struct PyPlda {
    inner: TwoCovPlda,
}

#[pymethods]
impl PyPlda {
    #[new]
    fn new(mu: Vec<f64>, b: Vec<Vec<f64>>, w: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: TwoCovPlda::new(Array1::from(mu), matrix(b)?, matrix(w)?).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn llr(&self, enroll: Vec<f64>, test: Vec<f64>) -> PyResult<f64> {
        plda_llr(
            &self.inner,
            &Array1::from(enroll).view(),
            &Array1::from(test).view(),
        )
        .map_err(py_err)
    }

    fn to_dplda(&self) -> PyResult<PyDplda> {
        Ok(PyDplda {
            inner: to_dplda(&self.inner).map_err(py_err)?,
        })
    }
}

/// Pairwise quadratic scoring function.
#[pyclass(name = "Dplda", module = "svpipe_py")]
struct PyDplda {
    inner: DpldaParams,
}

#[pymethods]
impl PyDplda {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        self.inner
            .score(&Array1::from(a).view(), &Array1::from(b).view())
            .map_err(py_err)
    }
}

/// Neural cascade from frames to a verification score.
#[pyclass(name = "System", module = "svpipe_py")]
struct PySystem {
    inner: E2eSystem,
}

#[pymethods]
impl PySystem {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(py_err)
    }

    #[pyo3(signature = (frames, frame_rate_hz = 100.0))]
    fn embed(&self, frames: Vec<Vec<f64>>, frame_rate_hz: f64) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .embed(&features(frames, frame_rate_hz)?)
            .map_err(py_err)?
            .to_vec())
    }

    #[pyo3(signature = (a, b, frame_rate_hz = 100.0))]
    fn score(&self, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, frame_rate_hz: f64) -> PyResult<f64> {
        e2e::e2e_score(
            &self.inner,
            &features(a, frame_rate_hz)?,
            &features(b, frame_rate_hz)?,
        )
        .map_err(py_err)
    }

    fn dplda(&self) -> PyDplda {
        PyDplda {
            inner: self.inner.dplda.clone(),
        }
    }
}

type LogRow = (usize, f64, f64, f64, f64);

fn log_tuple(l: &EpochLog) -> LogRow {
    (l.epoch, l.train_loss, l.dev_eer, l.dev_c_primary, l.lr)
}

/// The trained i-vector chain of a corpus, plus helpers that build and train
/// the neural cascade on top of it.
#[pyclass(name = "Pipeline", module = "svpipe_py")]
struct PyPipeline {
    settings: Settings,
    cascade: Cascade,
    seed: u64,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (corpus, seed = 1, settings = None))]
    fn new(
        py: Python<'_>,
        corpus: &PyCorpus,
        seed: u64,
        settings: Option<HashMap<String, String>>,
    ) -> PyResult<Self> {
        let s = self::settings(seed, settings)?;
        let c = &corpus.inner;
        let cascade = py
            .detach(|| Cascade::train_ivector(c, &s, &mut stage_rng(seed, "ivector")))
            .map_err(py_err)?;
        Ok(Self {
            settings: s,
            cascade,
            seed,
        })
    }

    fn plda(&self) -> PyPlda {
        PyPlda {
            inner: self.cascade.plda.clone(),
        }
    }

    fn dplda(&self) -> PyDplda {
        PyDplda {
            inner: self.cascade.dplda.clone(),
        }
    }

    fn plda_dev<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report(py, &self.cascade.plda_dev().map_err(py_err)?)
    }

    fn dplda_dev<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report(py, &self.cascade.dplda_dev().map_err(py_err)?)
    }

    /// Dev-split i-vectors after LDA and length normalization.
    fn dev_ivectors(&self) -> Vec<Vec<f64>> {
        rows(&self.cascade.dev_ivec)
    }

    /// Trains f2s, PCA and s2i against the i-vector chain.
    fn build_system(&self, py: Python<'_>) -> PyResult<PySystem> {
        let (c, s) = (&self.cascade, &self.settings);
        let mut rng = stage_rng(self.seed, "nn");
        py.detach(|| {
            let f2s = c.train_f2s(s, &mut rng)?;
            let pca = c.fit_pca(s)?;
            let (s2i, _) = c.train_s2i(&pca, s, &mut rng)?;
            c.assemble(f2s, pca, s2i, c.dplda.clone(), s)
        })
        .map(|inner| PySystem { inner })
        .map_err(py_err)
    }

    /// Joint s2i and DPLDA training; returns the best system and the epoch
    /// log as `(epoch, loss, eer, c_primary, lr)` tuples.
    fn train_joint(&self, py: Python<'_>, system: &PySystem) -> PyResult<(PySystem, Vec<LogRow>)> {
        let (c, s) = (&self.cascade, &self.settings);
        let mut rng = stage_rng(self.seed, "joint");
        let out = py
            .detach(|| {
                e2e::train_joint_s2i_dplda(
                    &system.inner,
                    &c.train.train_set(),
                    &c.dev.dev_set(),
                    &s.joint,
                    &mut rng,
                )
            })
            .map_err(py_err)?;
        Ok((
            PySystem { inner: out.system },
            out.logs.iter().map(log_tuple).collect(),
        ))
    }

    fn evaluate<'py>(&self, py: Python<'py>, system: &PySystem) -> PyResult<Bound<'py, PyDict>> {
        let dev = &self.cascade.dev;
        let emb = system.inner.embed_all(&dev.utts).map_err(py_err)?;
        let t = e2e::score_trials(&system.inner.dplda, &emb, &dev.all_pairs()).map_err(py_err)?;
        report(py, &MetricsReport::compute(&t).map_err(py_err)?)
    }
}

#[pymodule]
fn svpipe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyPlda>()?;
    m.add_class::<PyDplda>()?;
    m.add_class::<PySystem>()?;
    m.add_class::<PyPipeline>()?;
    Ok(())
}
