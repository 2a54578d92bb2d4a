//! Binary containers for tensor trains, compressed sample batches, trained
//! models and one-vs-one ensembles. All integers and floats little-endian.
//!
//! Tensor train (`TTRAIN01`):
//! `magic[8] | u32 version | u32 d | u64 dims[d] | u64 ranks[d+1] | u64 center (0 = none) | f64 cores...`
//! with each core `r_k x n_k x r_{k+1}` first-index-fastest.
//!
//! Batch (`TTBATCH1`): `magic | u32 version | f64 epsilon | u64 count | (u32 label, u64 len, train)...`
//!
//! Model (`STTMODEL`): `magic | u32 version | u8 kind | u64 len | JSON metadata | u64 len | payload`.
//! Kinds 0, 1, 2 are SVM, STM and STTM; the payload holds every float needed
//! for decisions so that reloaded models reproduce decisions bit for bit.
//! Kind 3 is an ensemble whose payload is a sequence of `u64 len | model`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiclass::{BinaryModel, ModelKind, OvoEnsemble, PairModel};
use crate::stm::{StmModel, StmTraceEntry};
use crate::sttm::{SttmConfig, SttmModel, SttmTraceEntry};
use crate::svm::SvmClassifier;
use crate::tensor::DenseTensor;
use crate::tt::TensorTrain;

const TT_MAGIC: &[u8; 8] = b"TTRAIN01";
const BATCH_MAGIC: &[u8; 8] = b"TTBATCH1";
const MODEL_MAGIC: &[u8; 8] = b"STTMODEL";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` within the file, for error messages.
    base: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a str) -> Self {
        Self {
            buf,
            pos: 0,
            base: 0,
            path,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, (self.base + self.pos) as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: {n} more bytes expected")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn magic(&mut self, m: &[u8; 8]) -> Result<()> {
        let at = self.pos;
        if self.take(8)? != m {
            self.pos = at;
            return Err(self.err(format!("bad magic, expected {:?}", String::from_utf8_lossy(m))));
        }
        let v = self.u32()?;
        if v != VERSION {
            self.pos -= 4;
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("size {v} too large")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.buf.len() - self.pos) / 8 < n {
            return Err(self.err(format!("truncated: {n} doubles expected")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn blob(&mut self) -> Result<Reader<'a>> {
        let n = self.usize()?;
        let start = self.base + self.pos;
        let buf = self.take(n)?;
        Ok(Reader {
            buf,
            pos: 0,
            base: start,
            path: self.path,
        })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_tt(w: &mut Writer, t: &TensorTrain) {
    w.bytes(TT_MAGIC);
    w.u32(VERSION);
    w.u32(t.order() as u32);
    t.dims().iter().for_each(|&n| w.u64(n as u64));
    t.ranks().iter().for_each(|&r| w.u64(r as u64));
    w.u64(t.center().unwrap_or(0) as u64);
    for c in t.cores() {
        w.f64s(c.data());
    }
}

fn read_tt(r: &mut Reader<'_>) -> Result<TensorTrain> {
    r.magic(TT_MAGIC)?;
    let d = r.u32()? as usize;
    if d == 0 || d > 64 {
        return Err(r.err(format!("implausible order {d}")));
    }
    let dims = (0..d).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let ranks = (0..=d).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let center = r.usize()?;
    if center > d {
        return Err(r.err(format!("center {center} beyond order {d}")));
    }
    let mut cores = Vec::with_capacity(d);
    for k in 0..d {
        let n = ranks[k]
            .checked_mul(dims[k])
            .and_then(|x| x.checked_mul(ranks[k + 1]))
            .ok_or_else(|| r.err("core size overflows"))?;
        let data = r.f64s(n)?;
        cores.push(DenseTensor::new(vec![ranks[k], dims[k], ranks[k + 1]], data)?);
    }
    let mut t = TensorTrain::new(cores)?;
    if center > 0 {
        t.set_center_unchecked(center);
    }
    Ok(t)
}

pub fn tt_to_bytes(t: &TensorTrain) -> Vec<u8> {
    let mut w = Writer::default();
    write_tt(&mut w, t);
    w.0
}

pub fn tt_from_bytes(bytes: &[u8], path: &str) -> Result<TensorTrain> {
    let mut r = Reader::new(bytes, path);
    let t = read_tt(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn save_tt(t: &TensorTrain, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tt_to_bytes(t))?;
    Ok(())
}

pub fn load_tt(path: impl AsRef<Path>) -> Result<TensorTrain> {
    let p = path.as_ref();
    tt_from_bytes(&fs::read(p)?, &p.display().to_string())
}

/// Compressed samples with their labels and the epsilon used.
#[derive(Clone, Debug, PartialEq)]
pub struct TtBatch {
    pub epsilon: f64,
    pub labels: Vec<u32>,
    pub trains: Vec<TensorTrain>,
}

pub fn save_batch(batch: &TtBatch, path: impl AsRef<Path>) -> Result<()> {
    if batch.labels.len() != batch.trains.len() {
        return Err(Error::LengthMismatch {
            expected: batch.trains.len(),
            found: batch.labels.len(),
        });
    }
    let mut w = Writer::default();
    w.bytes(BATCH_MAGIC);
    w.u32(VERSION);
    w.f64(batch.epsilon);
    w.u64(batch.trains.len() as u64);
    for (t, &l) in batch.trains.iter().zip(&batch.labels) {
        w.u32(l);
        w.blob(&tt_to_bytes(t));
    }
    fs::write(path, w.0)?;
    Ok(())
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<TtBatch> {
    let p = path.as_ref();
    let bytes = fs::read(p)?;
    let name = p.display().to_string();
    let mut r = Reader::new(&bytes, &name);
    r.magic(BATCH_MAGIC)?;
    let epsilon = r.f64()?;
    let count = r.usize()?;
    let mut labels = Vec::new();
    let mut trains = Vec::new();
    for _ in 0..count {
        labels.push(r.u32()?);
        let mut inner = r.blob()?;
        trains.push(read_tt(&mut inner)?);
        inner.finish()?;
    }
    r.finish()?;
    Ok(TtBatch {
        epsilon,
        labels,
        trains,
    })
}

#[derive(Serialize, Deserialize)]
struct StmMeta {
    dims: Vec<usize>,
    trace: Vec<StmTraceEntry>,
}

#[derive(Serialize, Deserialize)]
struct SttmMeta {
    config: SttmConfig,
    trace: Vec<SttmTraceEntry>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleMeta {
    classes: Vec<u32>,
    kind: ModelKind,
    pairs: Vec<(u32, u32)>,
}

fn write_container(kind: u8, meta: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u32(VERSION);
    w.u8(kind);
    w.blob(&serde_json::to_vec(meta)?);
    w.blob(payload);
    Ok(w.0)
}

pub fn model_to_bytes(m: &BinaryModel) -> Result<Vec<u8>> {
    let mut p = Writer::default();
    match m {
        BinaryModel::Svm(s) => {
            p.f64(s.b);
            p.u64(s.w.len() as u64);
            p.f64s(&s.w);
            write_container(0, &serde_json::json!({ "n_features": s.w.len() }), &p.0)
        }
        BinaryModel::Stm(s) => {
            p.f64(s.bias);
            for v in &s.weight_vectors {
                p.f64s(v);
            }
            let meta = StmMeta {
                dims: s.dims(),
                trace: s.trace.clone(),
            };
            write_container(1, &meta, &p.0)
        }
        BinaryModel::Sttm(s) => {
            p.f64(s.bias);
            write_tt(&mut p, &s.weight);
            let meta = SttmMeta {
                config: s.config.clone(),
                trace: s.trace.clone(),
            };
            write_container(2, &meta, &p.0)
        }
    }
}

/// A loaded container: a single binary model or an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Binary(BinaryModel),
    Ensemble(OvoEnsemble),
}

fn read_model(r: &mut Reader<'_>) -> Result<SavedModel> {
    r.magic(MODEL_MAGIC)?;
    let kind = r.u8()?;
    let meta_r = r.blob()?;
    let meta = meta_r.buf;
    let mut p = r.blob()?;
    let json_err = |e: serde_json::Error| meta_r.err(format!("bad metadata: {e}"));
    let out = match kind {
        0 => {
            let b = p.f64()?;
            let n = p.usize()?;
            let w = p.f64s(n)?;
            SavedModel::Binary(BinaryModel::Svm(SvmClassifier { w, b }))
        }
        1 => {
            let m: StmMeta = serde_json::from_slice(meta).map_err(json_err)?;
            let bias = p.f64()?;
            let weight_vectors = m.dims.iter().map(|&n| p.f64s(n)).collect::<Result<_>>()?;
            SavedModel::Binary(BinaryModel::Stm(StmModel {
                weight_vectors,
                bias,
                trace: m.trace,
            }))
        }
        2 => {
            let m: SttmMeta = serde_json::from_slice(meta).map_err(json_err)?;
            let bias = p.f64()?;
            let weight = read_tt(&mut p)?;
            SavedModel::Binary(BinaryModel::Sttm(SttmModel {
                weight,
                bias,
                trace: m.trace,
                config: m.config,
            }))
        }
        3 => {
            let m: EnsembleMeta = serde_json::from_slice(meta).map_err(json_err)?;
            let mut pairs = Vec::with_capacity(m.pairs.len());
            for &(positive, negative) in &m.pairs {
                let mut inner = p.blob()?;
                let model = match read_model(&mut inner)? {
                    SavedModel::Binary(b) => b,
                    SavedModel::Ensemble(_) => return Err(inner.err("nested ensemble")),
                };
                inner.finish()?;
                if model.kind() != m.kind {
                    return Err(inner.err(format!("pair model kind {:?} in a {:?} ensemble", model.kind(), m.kind)));
                }
                pairs.push(PairModel {
                    positive,
                    negative,
                    model,
                });
            }
            SavedModel::Ensemble(OvoEnsemble {
                classes: m.classes,
                kind: m.kind,
                pairs,
            })
        }
        k => {
            r.pos = 12;
            return Err(r.err(format!("unknown model kind {k}")));
        }
    };
    p.finish()?;
    Ok(out)
}

pub fn ensemble_to_bytes(e: &OvoEnsemble) -> Result<Vec<u8>> {
    let meta = EnsembleMeta {
        classes: e.classes.clone(),
        kind: e.kind,
        pairs: e.pairs.iter().map(|p| (p.positive, p.negative)).collect(),
    };
    let mut p = Writer::default();
    for pair in &e.pairs {
        p.blob(&model_to_bytes(&pair.model)?);
    }
    write_container(3, &meta, &p.0)
}

pub fn saved_from_bytes(bytes: &[u8], path: &str) -> Result<SavedModel> {
    let mut r = Reader::new(bytes, path);
    let m = read_model(&mut r)?;
    r.finish()?;
    Ok(m)
}

pub fn save_model(m: &BinaryModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(m)?)?;
    Ok(())
}

pub fn save_ensemble(e: &OvoEnsemble, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ensemble_to_bytes(e)?)?;
    Ok(())
}

pub fn load_saved(path: impl AsRef<Path>) -> Result<SavedModel> {
    let p = path.as_ref();
    saved_from_bytes(&fs::read(p)?, &p.display().to_string())
}
