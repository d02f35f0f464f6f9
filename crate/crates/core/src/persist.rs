//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTOC"  u16 version
//! entries: u8 kind, u16 name length, name bytes, then
//!          kind 0 (matrix): u64 rows, u64 cols, rows·cols f64 in column-major order
//!          kind 1 (text):   u64 length, UTF-8 bytes
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! The version is checked before the checksum so that a file from another
//! format revision reports a migration error rather than corruption.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{fingerprint, ModelConfig, TrainedModel};
use crate::trace::TrainingTrace;

pub const MAGIC: &[u8; 4] = b"MTOC";
pub const FORMAT_VERSION: u16 = 1;
const CHECKSUM_LEN: usize = 32;
const KIND_MATRIX: u8 = 0;
const KIND_TEXT: u8 = 1;

enum Entry {
    Matrix(Mat),
    Text(String),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn name(&mut self, kind: u8, name: &str) {
        self.buf.push(kind);
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
    }

    fn matrix(&mut self, name: &str, m: &Mat) {
        self.name(KIND_MATRIX, name);
        self.buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        self.buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn text(&mut self, name: &str, s: &str) {
        self.name(KIND_TEXT, name);
        self.buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
    }
}

fn column(values: impl Iterator<Item = f64>) -> Mat {
    let v: Vec<f64> = values.collect();
    Mat::from_column_slice(v.len(), 1, &v)
}

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.text("config", &model.config.to_toml());
    w.text("fingerprint", &model.fingerprint);
    w.text("trace", &serde_json::to_string(&model.trace).expect("trace serializes"));
    let kernel = Mat::from_row_slice(1, 2, &[model.sigma, model.theta.unwrap_or(f64::NAN)]);
    w.matrix("kernel", &kernel);
    w.matrix("X", &model.train_features);
    w.matrix("task_ids", &column(model.task_ids.iter().map(|&t| t as f64)));
    w.matrix("target_means", &column(model.target_means.iter().copied()));
    w.matrix("A", &model.a);
    if let Some(b) = &model.b {
        w.matrix("B", b);
    }
    if let Some(y) = &model.y_train {
        w.matrix("Y", y);
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corruption(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Corruption("length does not fit in memory".into()))
    }

    fn entry(&mut self) -> Result<(String, Entry)> {
        let kind = self.take(1)?[0];
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Corruption("entry name is not UTF-8".into()))?
            .to_string();
        let entry = match kind {
            KIND_MATRIX => {
                let rows = self.u64()?;
                let cols = self.u64()?;
                let count = rows
                    .checked_mul(cols)
                    .and_then(|c| c.checked_mul(8))
                    .ok_or_else(|| Error::Corruption(format!("matrix {name} is impossibly large")))?;
                let data = self.take(count)?;
                let values: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Entry::Matrix(Mat::from_column_slice(rows, cols, &values))
            }
            KIND_TEXT => {
                let len = self.u64()?;
                let s = std::str::from_utf8(self.take(len)?)
                    .map_err(|_| Error::Corruption(format!("text {name} is not UTF-8")))?;
                Entry::Text(s.to_string())
            }
            other => return Err(Error::Corruption(format!("unknown entry kind {other}"))),
        };
        Ok((name, entry))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < MAGIC.len() + 2 || &bytes[..4] != MAGIC {
        return Err(Error::Corruption("missing MTOC header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Migration {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 6 + CHECKSUM_LEN {
        return Err(Error::Corruption("file too short for its checksum".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Corruption("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 6 };
    let mut entries = BTreeMap::new();
    while r.pos < body.len() {
        let (name, e) = r.entry()?;
        if entries.insert(name.clone(), e).is_some() {
            return Err(Error::Corruption(format!("duplicate entry {name}")));
        }
    }

    let mut text = |name: &str| match entries.remove(name) {
        Some(Entry::Text(s)) => Ok(s),
        _ => Err(Error::Corruption(format!("missing text entry {name}"))),
    };
    let config_text = text("config")?;
    let stored_fp = text("fingerprint")?;
    let trace_json = text("trace")?;
    let mut matrix = |name: &str| match entries.remove(name) {
        Some(Entry::Matrix(m)) => Ok(Some(m)),
        Some(Entry::Text(_)) => Err(Error::Corruption(format!("entry {name} should be a matrix"))),
        None => Ok(None),
    };
    let required = |m: Option<Mat>, name: &str| m.ok_or_else(|| Error::Corruption(format!("missing matrix {name}")));
    let kernel = required(matrix("kernel")?, "kernel")?;
    let x = required(matrix("X")?, "X")?;
    let ids = required(matrix("task_ids")?, "task_ids")?;
    let means = required(matrix("target_means")?, "target_means")?;
    let a = required(matrix("A")?, "A")?;
    let b = matrix("B")?;
    let y = matrix("Y")?;
    if let Some(name) = entries.keys().next() {
        return Err(Error::Corruption(format!("unexpected entry {name}")));
    }

    if fingerprint(&config_text) != stored_fp {
        return Err(Error::Corruption(
            "config fingerprint does not match the stored config".into(),
        ));
    }
    let config = ModelConfig::from_toml(&config_text)
        .map_err(|e| Error::Corruption(format!("stored config unreadable: {e}")))?;
    let trace: TrainingTrace =
        serde_json::from_str(&trace_json).map_err(|e| Error::Corruption(format!("stored trace unreadable: {e}")))?;
    if kernel.shape() != (1, 2) {
        return Err(Error::Corruption("kernel entry must be 1x2".into()));
    }
    let mut task_ids = Vec::with_capacity(ids.len());
    for &v in ids.iter() {
        if !(v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64) {
            return Err(Error::Corruption(format!("bad task id {v}")));
        }
        task_ids.push(v as usize);
    }
    let model = TrainedModel {
        sigma: kernel[(0, 0)],
        theta: Some(kernel[(0, 1)]).filter(|t| !t.is_nan()),
        tasks: a.ncols(),
        train_features: x,
        task_ids,
        target_means: means.iter().copied().collect(),
        a,
        b,
        y_train: y,
        trace,
        fingerprint: stored_fp,
        config,
    };
    model.check_invariants()?;
    Ok(model)
}

/// Writes the model atomically: to a sibling temporary file, then renamed.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model);
    let tmp = path.with_extension("mtoc.partial");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    decode_model(&std::fs::read(path).map_err(Error::io_at(path))?)
}
