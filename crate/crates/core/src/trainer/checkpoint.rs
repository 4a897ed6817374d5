//! Checkpoint directory: `params.bin`, `codebook.bin`, `sid_table.tsv`,
//! `config.json` and, when training wrote it, `metrics.jsonl`.
//!
//! `params.bin` layout (little endian): magic `DIGPARAM`, version `u32`,
//! tensor count `u32`, then per non-codebook tensor its name (`u32` length +
//! UTF-8), rows and cols (`u32`) and `f64` values; then batch-norm count
//! `u32` and per layer name, dim, running mean and variance; finally a crc32
//! of everything before it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DigError, Result};
use crate::eval::{write_events, MetricEvent};
use crate::mixer::BnSlot;
use crate::numerics::Scalar;
use crate::tokenizer::{decode_codebook_into, encode_codebook, SidTable};

use super::{DigModel, ModelShape, TrainConfig};

const MAGIC: &[u8; 8] = b"DIGPARAM";
const VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;

pub const PARAMS_FILE: &str = "params.bin";
pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const SID_FILE: &str = "sid_table.tsv";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub train: TrainConfig,
    pub shape: ModelShape,
}

const BN_SLOTS: [(BnSlot, &str); 5] = [
    (BnSlot::User, "bn_u"),
    (BnSlot::Item, "bn_v"),
    (BnSlot::U2i, "bn_u2i"),
    (BnSlot::Sid, "bn_sid"),
    (BnSlot::U2t, "bn_u2t"),
];

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s<T: Scalar>(buf: &mut Vec<u8>, v: &[T]) {
    for &x in v {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

pub fn encode_params<T: Scalar>(model: &DigModel<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let saved: Vec<_> = model.store.iter().filter(|(id, _)| !model.codebook.layers.contains(id)).collect();
    buf.extend_from_slice(&(saved.len() as u32).to_le_bytes());
    for (_, p) in saved {
        put_str(&mut buf, &p.name);
        buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        put_f64s(&mut buf, p.value.data());
    }
    buf.extend_from_slice(&(BN_SLOTS.len() as u32).to_le_bytes());
    for (slot, name) in BN_SLOTS {
        let s = &model.mixer.bn(slot).state;
        put_str(&mut buf, name);
        buf.extend_from_slice(&(s.dim as u32).to_le_bytes());
        put_f64s(&mut buf, &s.running_mean);
        put_f64s(&mut buf, &s.running_var);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> DigError {
        DigError::Corrupt {
            path: self.origin.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }
}

/// Loads every non-codebook tensor and the batch-norm statistics into a
/// model of the same architecture.
pub fn decode_params_into<T: Scalar>(bytes: &[u8], origin: &str, model: &mut DigModel<T>) -> Result<()> {
    let mut c = Cursor { buf: bytes, pos: 0, origin };
    if bytes.len() < 12 {
        return Err(c.err("truncated"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(c.err("checksum mismatch"));
    }
    if c.take(8)? != MAGIC {
        return Err(c.err("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.err(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let expected = model.store.len() - model.codebook.layers.len();
    if count != expected {
        return Err(c.err(format!("{count} tensors, model has {expected}")));
    }
    for _ in 0..count {
        let name = c.string()?;
        let (rows, cols) = (c.u32()? as usize, c.u32()? as usize);
        let values = c.f64s::<T>(rows * cols)?;
        let id = model.store.find(&name).ok_or_else(|| c.err(format!("unknown tensor {name}")))?;
        let t = model.store.value_mut(id);
        if t.shape() != (rows, cols) {
            return Err(DigError::shape("decode_params", format!("{:?}", t.shape()), format!("({rows}, {cols})")));
        }
        t.data_mut().copy_from_slice(&values);
    }
    let n_bn = c.u32()? as usize;
    for _ in 0..n_bn {
        let name = c.string()?;
        let dim = c.u32()? as usize;
        let mean = c.f64s::<T>(dim)?;
        let var = c.f64s::<T>(dim)?;
        let slot = BN_SLOTS
            .iter()
            .find(|(_, n)| *n == name)
            .map(|(s, _)| *s)
            .ok_or_else(|| c.err(format!("unknown batch norm {name}")))?;
        let state = &mut model.mixer.bn_mut(slot).state;
        if state.dim != dim {
            return Err(DigError::shape("decode_params", state.dim, dim));
        }
        state.running_mean = mean;
        state.running_var = var;
    }
    Ok(())
}

fn write_atomic(dir: &Path, files: Vec<(&str, Vec<u8>)>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    for (name, bytes) in files {
        let tmp = dir.join(format!(".{name}.partial"));
        std::fs::write(&tmp, bytes)?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, dst) in staged {
        std::fs::rename(tmp, dst)?;
    }
    Ok(())
}

/// Writes every checkpoint artifact; all files are staged before any is
/// moved into place.
pub fn save_checkpoint<T: Scalar>(model: &DigModel<T>, dir: &Path, events: Option<&[MetricEvent]>) -> Result<()> {
    let cfg = CheckpointConfig {
        format_version: FORMAT_VERSION,
        train: model.config.clone(),
        shape: model.shape.clone(),
    };
    let mut sid = Vec::new();
    model.sid_table()?.write_tsv(&mut sid)?;
    let mut config = serde_json::to_vec_pretty(&cfg)?;
    config.push(b'\n');
    let mut files = vec![
        (PARAMS_FILE, encode_params(model)),
        (CODEBOOK_FILE, encode_codebook(&model.codebook, &model.store)),
        (SID_FILE, sid),
        (CONFIG_FILE, config),
    ];
    if let Some(ev) = events {
        let mut m = Vec::new();
        write_events(ev, &mut m)?;
        files.push((METRICS_FILE, m));
    }
    write_atomic(dir, files)
}

pub fn read_checkpoint_config(dir: &Path) -> Result<CheckpointConfig> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(DigError::MissingArtifact(path));
    }
    let cfg: CheckpointConfig = serde_json::from_slice(&std::fs::read(&path)?)?;
    if cfg.format_version != FORMAT_VERSION {
        return Err(DigError::Corrupt {
            path: path.display().to_string(),
            reason: format!("unsupported format version {}", cfg.format_version),
        });
    }
    Ok(cfg)
}

/// Restores a model saved by [`save_checkpoint`] against the dataset it was
/// trained on.
pub fn load_checkpoint<T: Scalar>(dir: &Path, ds: &Dataset) -> Result<DigModel<T>> {
    let cfg = read_checkpoint_config(dir)?;
    if cfg.shape != ModelShape::of(ds) {
        return Err(DigError::Data("checkpoint was trained on a dataset with a different shape".into()));
    }
    for f in [PARAMS_FILE, CODEBOOK_FILE, SID_FILE] {
        if !dir.join(f).exists() {
            return Err(DigError::MissingArtifact(dir.join(f)));
        }
    }
    // parameter values are overwritten below; the rng only sizes tensors
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.train.seed);
    let mut model = DigModel::for_dataset(cfg.train, ds, &mut rng)?;
    let p = dir.join(PARAMS_FILE);
    decode_params_into(&std::fs::read(&p)?, &p.display().to_string(), &mut model)?;
    let cb = dir.join(CODEBOOK_FILE);
    decode_codebook_into(&std::fs::read(&cb)?, &cb.display().to_string(), &mut model.codebook, &mut model.store)?;
    let table = SidTable::load(&dir.join(SID_FILE))?;
    model.set_sid_table(&table)?;
    Ok(model)
}
