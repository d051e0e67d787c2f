//! On-disk formats: binary feature files, the named-tensor model container,
//! trial lists and score files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, DEFAULT_FRAME_RATE_HZ};

pub const FEATURE_MAGIC: &[u8; 4] = b"SVF1";
pub const CONTAINER_MAGIC: &[u8; 4] = b"SVM1";
pub const CONTAINER_VERSION: u32 = 1;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Little-endian reader that reports byte offsets in its errors.
struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.at as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            ));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.buf.is_empty() {
            return Err(Error::format(0, "empty file"));
        }
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.at as u64,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

/// Frames are stored as 32-bit floats; values not representable in `f32`
/// are rounded on write.
pub fn encode_features(f: &FeatureMatrix) -> Result<Vec<u8>> {
    let (t, d) = f.frames.dim();
    let t32 = u32::try_from(t).map_err(|_| Error::input("too many frames for a feature file"))?;
    let d32 = u32::try_from(d).map_err(|_| Error::input("feature dimension too large"))?;
    let mut out = Vec::with_capacity(12 + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in f.frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(buf);
    r.magic(FEATURE_MAGIC)?;
    let t = r.u32("frame count")? as usize;
    let d = r.u32("dimension")? as usize;
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(4, format!("declared size {t}x{d} overflows")))?;
    if r.remaining() < expected {
        return Err(Error::format(
            12,
            format!(
                "truncated payload: {t}x{d} frames need {expected} bytes, found {}",
                r.remaining()
            ),
        ));
    }
    if t == 0 || d == 0 {
        return Err(Error::format(4, format!("degenerate shape {t}x{d}")));
    }
    let payload = r.take(expected, "payload")?;
    r.finish()?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let frames = Array2::from_shape_vec((t, d), values).expect("size checked");
    FeatureMatrix::new(frames, DEFAULT_FRAME_RATE_HZ).map_err(|e| Error::format(12, e.to_string()))
}

pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    write_file(path, &encode_features(f)?)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    decode_features(&read_file(path)?)
}

/// A dense 64-bit tensor of any rank; rank 0 holds one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::shape("tensor rank above 255"));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(v: &Array1<f64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }
}

/// Named tensors, kept sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorSet {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    /// Fails if `name` is already present.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u32::MAX as usize {
            return Err(Error::input("tensor names must be non-empty"));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::input(format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::input(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if !t.shape.is_empty() {
            return Err(Error::input(format!(
                "{name}: expected a scalar, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.get(name)?;
        if t.shape.len() != 1 {
            return Err(Error::input(format!(
                "{name}: expected a vector, got shape {:?}",
                t.shape
            )));
        }
        Ok(Array1::from_vec(t.data.clone()))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        if t.shape.len() != 2 {
            return Err(Error::input(format!(
                "{name}: expected a matrix, got shape {:?}",
                t.shape
            )));
        }
        Ok(
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .expect("validated shape"),
        )
    }
}

pub fn encode_container(set: &TensorSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in &set.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_container(buf: &[u8]) -> Result<TensorSet> {
    let mut r = Reader::new(buf);
    r.magic(CONTAINER_MAGIC)?;
    let version = r.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported container version {version}, expected {CONTAINER_VERSION}"),
        ));
    }
    let count = r.u32("tensor count")?;
    let mut set = TensorSet::new();
    for _ in 0..count {
        let start = r.at as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(start + 4, "tensor name is not UTF-8"))?
            .to_owned();
        if set.contains(&name) {
            return Err(Error::format(
                start,
                format!("duplicate tensor name {name}"),
            ));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let at = r.at as u64;
            let d = usize::try_from(r.u64("dimension")?)
                .map_err(|_| Error::format(at, "dimension does not fit in memory"))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::format(at, format!("shape of {name} overflows")))?;
            shape.push(d);
        }
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(r.at as u64, format!("shape of {name} overflows")))?;
        if r.remaining() < bytes {
            return Err(Error::format(
                r.at as u64,
                format!(
                    "tensor {name} needs {bytes} payload bytes, found {}",
                    r.remaining()
                ),
            ));
        }
        let data = r
            .take(bytes, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        set.insert(name, Tensor { shape, data })?;
    }
    r.finish()?;
    Ok(set)
}

pub fn write_container(path: &Path, set: &TensorSet) -> Result<()> {
    write_file(path, &encode_container(set))
}

pub fn read_container(path: &Path) -> Result<TensorSet> {
    decode_container(&read_file(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn is_fully_labeled(&self) -> bool {
        self.trials.iter().all(|t| t.label != TrialLabel::Unlabeled)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = match t.label {
                TrialLabel::Target => writeln!(s, "{} {} target", t.enroll, t.test),
                TrialLabel::Nontarget => writeln!(s, "{} {} nontarget", t.enroll, t.test),
                TrialLabel::Unlabeled => writeln!(s, "{} {}", t.enroll, t.test),
            };
        }
        s
    }
}

/// Lines of `enroll test [target|nontarget]`; blank lines and `#` comments are skipped.
pub fn parse_trials(text: &str) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let cols: Vec<&str> = content.split_whitespace().collect();
        let label = match cols.len() {
            2 => TrialLabel::Unlabeled,
            3 => match cols[2] {
                "target" => TrialLabel::Target,
                "nontarget" => TrialLabel::Nontarget,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown label {other:?}"),
                    })
                }
            },
            n => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 2 or 3 columns, found {n}"),
                })
            }
        };
        trials.push(Trial {
            enroll: cols[0].to_owned(),
            test: cols[1].to_owned(),
            label,
        });
    }
    Ok(TrialList { trials })
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(0, "trial list is not UTF-8"))?;
    parse_trials(&text)
}

pub fn write_trials(path: &Path, list: &TrialList) -> Result<()> {
    write_file(path, list.to_text().as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

/// `enroll test score` with the shortest representation that reads back exactly.
pub fn format_scores(lines: &[ScoreLine]) -> String {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{} {} {}", l.enroll, l.test, l.score);
    }
    s
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 columns, found {}", cols.len()),
            });
        }
        let score: f64 = cols[2].parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: format!("bad score {:?}", cols[2]),
        })?;
        out.push(ScoreLine {
            enroll: cols[0].to_owned(),
            test: cols[1].to_owned(),
            score,
        });
    }
    Ok(out)
}

pub fn write_scores(path: &Path, lines: &[ScoreLine]) -> Result<()> {
    write_file(path, format_scores(lines).as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(0, "score file is not UTF-8"))?;
    parse_scores(&text)
}
