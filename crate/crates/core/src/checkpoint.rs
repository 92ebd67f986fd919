//! Binary checkpoints.
//!
//! ```text
//! "SVAECKPT" | u32 version | u64 len | meta TOML (model config, hyper-parameters)
//! u64 n | n x (u32 len | name | u32 rank | u64 dims.. | f64 data..)
//! u64 n | n x (u64 channels | f64 momentum | f64 epsilon | f64 mean.. | f64 var..)
//! u64 t | per parameter: f64 m.. | f64 v..
//! u64 n | n x (u64 epoch | 6 x f64 train | 6 x f64 val | f64 r | f64 D | u64 skipped)
//! sha256 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{ModelConfig, VaeModel};
use crate::tensor::{RunningStats, Tensor};
use crate::training::{AdamState, EpochRecord, HyperParams, Trainer, TrainingHistory};

pub const MAGIC: &[u8; 8] = b"SVAECKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config_hash: String,
    model: ModelConfig,
    hyper: HyperParams,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {}: needed {n} more bytes",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // every counted item occupies at least one byte
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("implausible {what} count {n}")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn breakdown(w: &mut Writer, b: &LossBreakdown) {
    w.f64s(&[b.mse, b.kl, b.similarity, b.total, b.beta, b.alpha]);
}

fn read_breakdown(r: &mut Reader) -> Result<LossBreakdown> {
    let v = r.f64s(6)?;
    Ok(LossBreakdown {
        mse: v[0],
        kl: v[1],
        similarity: v[2],
        total: v[3],
        beta: v[4],
        alpha: v[5],
    })
}

/// Serializes the full trainer state.
pub fn encode_checkpoint(trainer: &Trainer) -> Result<Vec<u8>> {
    let model = &trainer.model;
    let meta = Meta {
        config_hash: model.config().hash_hex(),
        model: model.config().clone(),
        hyper: trainer.hyper.clone(),
    };
    let meta = toml::to_string(&meta).map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(meta.as_bytes());
    w.u64(model.params().len() as u64);
    for (name, p) in model.param_names().iter().zip(model.params()) {
        w.u32(name.len() as u32);
        w.0.extend_from_slice(name.as_bytes());
        w.u32(p.shape().len() as u32);
        for &d in p.shape() {
            w.u64(d as u64);
        }
        w.f64s(p.data());
    }
    w.u64(model.running_stats().len() as u64);
    for s in model.running_stats() {
        w.u64(s.mean.len() as u64);
        w.f64(s.momentum);
        w.f64(s.epsilon);
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    w.u64(trainer.adam.t);
    for (m, v) in trainer.adam.m.iter().zip(&trainer.adam.v) {
        w.f64s(m);
        w.f64s(v);
    }
    w.u64(trainer.history.len() as u64);
    for e in &trainer.history.epochs {
        w.u64(e.epoch as u64);
        breakdown(&mut w, &e.train);
        breakdown(&mut w, &e.val);
        w.f64(e.val_r);
        w.f64(e.val_dispersion);
        w.u64(e.skipped_steps as u64);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupted or truncated".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let n = r.len("meta")?;
    let meta = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("meta is not UTF-8".into()))?;
    let meta: Meta = toml::from_str(meta).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    if meta.model.hash_hex() != meta.config_hash {
        return Err(Error::Checkpoint("model config does not match its recorded hash".into()));
    }
    let n = r.len("parameter")?;
    let mut named = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("bad name".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let data = r.f64s(count)?;
        named.push((name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?));
    }
    let n = r.len("running statistics")?;
    let mut running = Vec::with_capacity(n);
    for _ in 0..n {
        let c = r.len("channel")?;
        let momentum = r.f64()?;
        let epsilon = r.f64()?;
        let mean = r.f64s(c)?;
        let var = r.f64s(c)?;
        running.push(RunningStats {
            mean,
            var,
            momentum,
            epsilon,
        });
    }
    let model = VaeModel::from_parts(meta.model, named, running)?;
    let t = r.u64()?;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for p in model.params() {
        m.push(r.f64s(p.len())?);
        v.push(r.f64s(p.len())?);
    }
    let n = r.len("epoch")?;
    let mut history = TrainingHistory::default();
    for _ in 0..n {
        history.epochs.push(EpochRecord {
            epoch: r.u64()? as usize,
            train: read_breakdown(&mut r)?,
            val: read_breakdown(&mut r)?,
            val_r: r.f64()?,
            val_dispersion: r.f64()?,
            skipped_steps: r.u64()? as usize,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut trainer = Trainer::new(model, meta.hyper)?;
    trainer.adam = AdamState { t, m, v };
    trainer.history = history;
    Ok(trainer)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(trainer)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
