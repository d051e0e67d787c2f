//! Conversion of every model type to and from named tensors.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dplda::DpldaParams;
use crate::e2e::E2eSystem;
use crate::error::{Error, Result};
use crate::f2s::F2sNet;
use crate::frontend::FrontendConfig;
use crate::gmm::{DiagGmm, SuffStats};
use crate::io::{read_container, write_container, Tensor, TensorSet};
use crate::ivector::{IvecPrep, TvModel};
use crate::netcore::{Activation, Layer, Mlp, ParamGroup, ParamSnapshot};
use crate::plda::TwoCovPlda;
use crate::s2i::{PcaModel, S2iNet};

pub trait Persist: Sized {
    /// Default name prefix when the model is stored on its own.
    const KIND: &'static str;

    fn save_into(&self, set: &mut TensorSet, prefix: &str) -> Result<()>;

    fn load_from(set: &TensorSet, prefix: &str) -> Result<Self>;
}

fn key(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

fn count(set: &TensorSet, name: &str) -> Result<usize> {
    let v = set.scalar(name)?;
    if !(v >= 0.0 && v.fract() == 0.0 && v < 1e12) {
        return Err(Error::input(format!("{name}: {v} is not a count")));
    }
    Ok(v as usize)
}

pub fn to_tensors<T: Persist>(model: &T) -> Result<TensorSet> {
    let mut set = TensorSet::new();
    model.save_into(&mut set, T::KIND)?;
    Ok(set)
}

pub fn from_tensors<T: Persist>(set: &TensorSet) -> Result<T> {
    T::load_from(set, T::KIND)
}

pub fn save_model<T: Persist>(path: &Path, model: &T) -> Result<()> {
    write_container(path, &to_tensors(model)?)
}

pub fn load_model<T: Persist>(path: &Path) -> Result<T> {
    from_tensors(&read_container(path)?)
}

impl Persist for DiagGmm {
    const KIND: &'static str = "ubm";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(key(p, "weights"), Tensor::vector(&self.weights))?;
        set.insert(key(p, "means"), Tensor::matrix(&self.means))?;
        set.insert(key(p, "vars"), Tensor::matrix(&self.vars))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        DiagGmm::new(
            set.vector(&key(p, "weights"))?,
            set.matrix(&key(p, "means"))?,
            set.matrix(&key(p, "vars"))?,
        )
    }
}

impl Persist for TvModel {
    const KIND: &'static str = "tv";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(key(p, "t"), Tensor::matrix(&self.t))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        TvModel::new(set.matrix(&key(p, "t"))?)
    }
}

impl Persist for IvecPrep {
    const KIND: &'static str = "prep";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(key(p, "global_mean"), Tensor::vector(&self.global_mean))?;
        set.insert(key(p, "lda"), Tensor::matrix(&self.lda))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        let global_mean = set.vector(&key(p, "global_mean"))?;
        let lda = set.matrix(&key(p, "lda"))?;
        if lda.nrows() != global_mean.len() {
            return Err(Error::shape("LDA rows do not match the mean"));
        }
        Ok(IvecPrep { global_mean, lda })
    }
}

impl Persist for TwoCovPlda {
    const KIND: &'static str = "plda";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(key(p, "mu"), Tensor::vector(&self.mu))?;
        set.insert(key(p, "b"), Tensor::matrix(&self.b))?;
        set.insert(key(p, "w"), Tensor::matrix(&self.w))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        TwoCovPlda::new(
            set.vector(&key(p, "mu"))?,
            set.matrix(&key(p, "b"))?,
            set.matrix(&key(p, "w"))?,
        )
    }
}

impl Persist for DpldaParams {
    const KIND: &'static str = "dplda";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(key(p, "lambda"), Tensor::matrix(&self.lambda))?;
        set.insert(key(p, "gamma"), Tensor::matrix(&self.gamma))?;
        set.insert(key(p, "c"), Tensor::vector(&self.c))?;
        set.insert(key(p, "k"), Tensor::scalar(self.k))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        DpldaParams::new(
            set.matrix(&key(p, "lambda"))?,
            set.matrix(&key(p, "gamma"))?,
            set.vector(&key(p, "c"))?,
            set.scalar(&key(p, "k"))?,
        )
    }
}

impl Persist for Mlp {
    const KIND: &'static str = "mlp";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(
            key(p, "n_layers"),
            Tensor::scalar(self.layers().len() as f64),
        )?;
        for (i, l) in self.layers().iter().enumerate() {
            set.insert(format!("{p}.layer{i}.weight"), Tensor::matrix(&l.weight))?;
            set.insert(format!("{p}.layer{i}.bias"), Tensor::vector(&l.bias))?;
            set.insert(
                format!("{p}.layer{i}.activation"),
                Tensor::scalar(l.activation.code() as f64),
            )?;
        }
        Ok(())
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        let n = count(set, &key(p, "n_layers"))?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let code = set.scalar(&format!("{p}.layer{i}.activation"))?;
            let activation = Activation::from_code(code as u8)
                .filter(|_| code.fract() == 0.0 && (0.0..256.0).contains(&code))
                .ok_or_else(|| {
                    Error::input(format!("{p}.layer{i}: unknown activation code {code}"))
                })?;
            layers.push(Layer {
                weight: set.matrix(&format!("{p}.layer{i}.weight"))?,
                bias: set.vector(&format!("{p}.layer{i}.bias"))?,
                activation,
            });
        }
        Mlp::new(layers)
    }
}

impl Persist for F2sNet {
    const KIND: &'static str = "f2s";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        self.net().save_into(set, p)
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        F2sNet::new(Mlp::load_from(set, p)?)
    }
}

impl Persist for S2iNet {
    const KIND: &'static str = "s2i";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        self.net().save_into(set, p)
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        S2iNet::new(Mlp::load_from(set, p)?)
    }
}

impl Persist for PcaModel {
    const KIND: &'static str = "pca";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(key(p, "mean"), Tensor::vector(&self.mean))?;
        set.insert(key(p, "basis"), Tensor::matrix(&self.basis))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        PcaModel::new(set.vector(&key(p, "mean"))?, set.matrix(&key(p, "basis"))?)
    }
}

impl Persist for FrontendConfig {
    const KIND: &'static str = "frontend";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(
            key(p, "stmvn_window_s"),
            Tensor::scalar(self.stmvn_window_s),
        )?;
        set.insert(
            key(p, "half_window"),
            Tensor::scalar(self.half_window as f64),
        )?;
        set.insert(key(p, "n_dct"), Tensor::scalar(self.n_dct as f64))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        Ok(FrontendConfig {
            stmvn_window_s: set.scalar(&key(p, "stmvn_window_s"))?,
            half_window: count(set, &key(p, "half_window"))?,
            n_dct: count(set, &key(p, "n_dct"))?,
        })
    }
}

impl Persist for ParamSnapshot {
    const KIND: &'static str = "snapshot";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        set.insert(
            key(p, "values"),
            Tensor::vector(&Array1::from_vec(self.values().to_vec())),
        )?;
        set.insert(
            key(p, "n_groups"),
            Tensor::scalar(self.groups().len() as f64),
        )?;
        for (i, g) in self.groups().iter().enumerate() {
            let name: Vec<f64> = g.name.bytes().map(f64::from).collect();
            set.insert(
                format!("{p}.group{i}.name"),
                Tensor::new(vec![name.len()], name)?,
            )?;
            set.insert(
                format!("{p}.group{i}.range"),
                Tensor::new(vec![2], vec![g.range.start as f64, g.range.end as f64])?,
            )?;
            set.insert(format!("{p}.group{i}.weight"), Tensor::scalar(g.weight))?;
        }
        Ok(())
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        let values = set.vector(&key(p, "values"))?.to_vec();
        let n = count(set, &key(p, "n_groups"))?;
        let mut groups = Vec::with_capacity(n);
        for i in 0..n {
            let bytes: Vec<u8> = set
                .vector(&format!("{p}.group{i}.name"))?
                .iter()
                .map(|&b| b as u8)
                .collect();
            let name = String::from_utf8(bytes)
                .map_err(|_| Error::input(format!("{p}.group{i}: name is not UTF-8")))?;
            let range = set.vector(&format!("{p}.group{i}.range"))?;
            if range.len() != 2 {
                return Err(Error::input(format!(
                    "{p}.group{i}: range needs two entries"
                )));
            }
            groups.push(ParamGroup {
                name,
                range: range[0] as usize..range[1] as usize,
                weight: set.scalar(&format!("{p}.group{i}.weight"))?,
            });
        }
        ParamSnapshot::new(values, groups)
    }
}

impl Persist for E2eSystem {
    const KIND: &'static str = "e2e";

    fn save_into(&self, set: &mut TensorSet, p: &str) -> Result<()> {
        self.frontend.save_into(set, &key(p, "frontend"))?;
        self.f2s.save_into(set, &key(p, "f2s"))?;
        self.ubm.save_into(set, &key(p, "ubm"))?;
        set.insert(key(p, "relevance"), Tensor::scalar(self.relevance))?;
        self.pca.save_into(set, &key(p, "pca"))?;
        self.s2i.save_into(set, &key(p, "s2i"))?;
        self.dplda.save_into(set, &key(p, "dplda"))?;
        self.snapshot.save_into(set, &key(p, "snapshot"))
    }

    fn load_from(set: &TensorSet, p: &str) -> Result<Self> {
        E2eSystem::with_snapshot(
            FrontendConfig::load_from(set, &key(p, "frontend"))?,
            F2sNet::load_from(set, &key(p, "f2s"))?,
            DiagGmm::load_from(set, &key(p, "ubm"))?,
            set.scalar(&key(p, "relevance"))?,
            PcaModel::load_from(set, &key(p, "pca"))?,
            S2iNet::load_from(set, &key(p, "s2i"))?,
            DpldaParams::load_from(set, &key(p, "dplda"))?,
            ParamSnapshot::load_from(set, &key(p, "snapshot"))?,
        )
    }
}

/// Per-utterance statistics keyed by utterance id.
pub fn stats_to_tensors(items: &[(String, SuffStats)]) -> Result<TensorSet> {
    let mut set = TensorSet::new();
    for (id, s) in items {
        set.insert(format!("stats.{id}.n"), Tensor::vector(&s.n))?;
        set.insert(format!("stats.{id}.f"), Tensor::matrix(&s.f))?;
        set.insert(
            format!("stats.{id}.frames"),
            Tensor::scalar(s.frames_total as f64),
        )?;
    }
    Ok(set)
}

pub fn stats_from_tensors(set: &TensorSet) -> Result<Vec<(String, SuffStats)>> {
    let ids: Vec<String> = set
        .names()
        .filter_map(|n| n.strip_prefix("stats.").and_then(|r| r.strip_suffix(".n")))
        .map(str::to_owned)
        .collect();
    ids.into_iter()
        .map(|id| {
            let n = set.vector(&format!("stats.{id}.n"))?;
            let f = set.matrix(&format!("stats.{id}.f"))?;
            if f.nrows() != n.len() {
                return Err(Error::shape(format!("stats of {id}: N and F disagree")));
            }
            let frames_total = count(set, &format!("stats.{id}.frames"))?;
            Ok((id, SuffStats { n, f, frames_total }))
        })
        .collect()
}

/// Vectors keyed by utterance id, stored as `{prefix}.{id}`.
pub fn vectors_to_tensors(prefix: &str, items: &[(String, Array1<f64>)]) -> Result<TensorSet> {
    let mut set = TensorSet::new();
    for (id, v) in items {
        set.insert(key(prefix, id), Tensor::vector(v))?;
    }
    Ok(set)
}

pub fn vectors_from_tensors(prefix: &str, set: &TensorSet) -> Result<Vec<(String, Array1<f64>)>> {
    let lead = format!("{prefix}.");
    let ids: Vec<String> = set
        .names()
        .filter_map(|n| n.strip_prefix(lead.as_str()))
        .map(str::to_owned)
        .collect();
    ids.into_iter()
        .map(|id| {
            let v = set.vector(&key(prefix, &id))?;
            Ok((id, v))
        })
        .collect()
}

/// Rows of `m` paired with their ids.
pub fn rows_with_ids(ids: &[String], m: &Array2<f64>) -> Vec<(String, Array1<f64>)> {
    ids.iter()
        .cloned()
        .zip(m.rows().into_iter().map(|r| r.to_owned()))
        .collect()
}
