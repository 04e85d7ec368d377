//! Labeled data: IDX ingestion, seeded synthetic blobs, batching and a
//! compact binary dump format.
//!
//! # Dump format
//!
//! All integers little-endian:
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 0..4             | `d` (u32), columns per row               |
//! | 4..8             | `n` (u32), number of rows                |
//! | 8..12            | `K` (u32), number of classes             |
//! | 12..12+8nd       | row-major `f64` values                   |
//! | then 4n bytes    | `u32` labels                             |
//!
//! The same layout stores logits (with `d == K`) for post-hoc analysis, so
//! the reader does not require values in `[0, 1]`; [`LabeledBatch::new`]
//! enforces that separately.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::{Matrix, RngStream};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs in `[0,1]^d`, one sample per row, with labels below `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    inputs: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Consistency(format!("{} input rows but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        if inputs.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("inputs must lie in [0, 1]".into()));
        }
        Ok(LabeledBatch { inputs, labels, classes })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        LabeledBatch { inputs: self.inputs.select_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect(), classes: self.classes }
    }

    /// Same labels with replacement inputs (e.g. adversarial examples).
    pub fn with_inputs(&self, inputs: Matrix) -> Result<LabeledBatch> {
        if inputs.shape() != self.inputs.shape() {
            return Err(Error::shape("LabeledBatch::with_inputs", format!("{:?} vs {:?}", inputs.shape(), self.inputs.shape())));
        }
        LabeledBatch::new(inputs, self.labels.clone(), self.classes)
    }

    /// SHA-256 over the dump encoding, hex-encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(encode_dump(&self.inputs, &self.labels, self.classes));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    IdxFiles,
    Synthetic,
}

#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub name: String,
    pub source: DataSource,
}

impl DatasetHandle {
    pub fn new(name: impl Into<String>, source: DataSource, train: LabeledBatch, test: LabeledBatch) -> Result<Self> {
        if train.dim() != test.dim() || train.classes() != test.classes() {
            return Err(Error::Consistency(format!(
                "train (d={}, K={}) and test (d={}, K={}) disagree",
                train.dim(),
                train.classes(),
                test.dim(),
                test.classes()
            )));
        }
        Ok(DatasetHandle { train, test, name: name.into(), source })
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn classes(&self) -> usize {
        self.train.classes()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64_le(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair, scaling pixels by 1/255.
///
/// `limit` keeps the first `limit` samples; `Some(0)` is rejected.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<LabeledBatch> {
    if limit == Some(0) {
        return Err(Error::Parameter("limit must be at least 1 (empty batch)".into()));
    }
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    parse_idx(&image_bytes, &label_bytes, limit)
}

pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8], limit: Option<usize>) -> Result<LabeledBatch> {
    let mut img = Reader { bytes: image_bytes, pos: 0 };
    let magic = img.u32_be("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}") });
    }
    let count = img.u32_be("image count")? as usize;
    let rows = img.u32_be("image rows")? as usize;
    let cols = img.u32_be("image cols")? as usize;

    let mut lab = Reader { bytes: label_bytes, pos: 0 };
    let magic = lab.u32_be("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}") });
    }
    let label_count = lab.u32_be("label count")? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!("{count} images but {label_count} labels")));
    }

    let n = limit.map_or(count, |l| l.min(count));
    if n == 0 {
        return Err(Error::Parameter("IDX files contain no samples".into()));
    }
    let d = rows * cols;
    let pixels = img.take(n * d, "pixels")?;
    let inputs = Matrix::from_vec(n, d, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let labels: Vec<usize> = lab.take(n, "labels")?.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledBatch::new(inputs, labels, classes)
}

/// `K` Gaussian clusters with centres drawn uniformly in `[0,1]^d`, samples
/// clipped to the unit cube. Labels cycle `0, 1, …, K-1` so class counts
/// differ by at most one.
pub fn synth_blobs(rng: &mut RngStream, n: usize, d: usize, classes: usize, spread: f64) -> Result<LabeledBatch> {
    if classes < 2 || n < classes || d == 0 {
        return Err(Error::Parameter(format!("synthetic blobs need n >= K >= 2 and d >= 1 (n={n}, K={classes}, d={d})")));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Parameter(format!("spread must be positive, got {spread}")));
    }
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| rng.uniform()).collect()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for &c in &centres[k] {
            data.push((c + spread * rng.normal()).clamp(0.0, 1.0));
        }
        labels.push(k);
    }
    LabeledBatch::new(Matrix::from_vec(n, d, data)?, labels, classes)
}

/// Seeded permutation of `b` cut into consecutive chunks of `batch_size`
/// (the last chunk may be smaller).
pub fn batches(b: &LabeledBatch, batch_size: usize, rng: &mut RngStream) -> Vec<LabeledBatch> {
    let batch_size = batch_size.max(1);
    let perm = rng.permutation(b.len());
    perm.chunks(batch_size).map(|idx| b.select(idx)).collect()
}

/// The shuffle stream for one epoch, derived from the master seed so any
/// epoch can be replayed in isolation.
pub fn epoch_stream(master_seed: u64, epoch: usize) -> RngStream {
    RngStream::derive(master_seed, 0x5348_5546, epoch as u64)
}

pub fn encode_dump(values: &Matrix, labels: &[usize], classes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * values.as_slice().len() + 4 * labels.len());
    out.extend_from_slice(&(values.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(values.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(classes as u32).to_le_bytes());
    for v in values.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

/// Raw contents of a dump: values, labels and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dump {
    pub values: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

pub fn decode_dump(bytes: &[u8]) -> Result<Dump> {
    let mut r = Reader { bytes, pos: 0 };
    let d = r.u32_le("header d")? as usize;
    let n = r.u32_le("header n")? as usize;
    let classes = r.u32_le("header K")? as usize;
    let mut data = Vec::with_capacity((n * d).min(bytes.len() / 8));
    for _ in 0..n * d {
        let offset = r.pos as u64;
        let v = r.f64_le("values")?;
        if !v.is_finite() {
            return Err(Error::Format { offset, detail: "non-finite value".into() });
        }
        data.push(v);
    }
    let mut labels = Vec::with_capacity(n.min(bytes.len() / 4));
    for _ in 0..n {
        let offset = r.pos as u64;
        let l = r.u32_le("labels")? as usize;
        if l >= classes {
            return Err(Error::Format { offset, detail: format!("label {l} out of range for K={classes}") });
        }
        labels.push(l);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, detail: format!("{} trailing bytes", bytes.len() - r.pos) });
    }
    Ok(Dump { values: Matrix::from_vec(n, d, data)?, labels, classes })
}

pub fn write_dump(path: &Path, values: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    fs::write(path, encode_dump(values, labels, classes)).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Dump> {
    decode_dump(&read_file(path)?)
}

impl TryFrom<Dump> for LabeledBatch {
    type Error = Error;

    fn try_from(d: Dump) -> Result<Self> {
        LabeledBatch::new(d.values, d.labels, d.classes)
    }
}
