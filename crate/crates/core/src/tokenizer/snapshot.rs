//! Versioned binary codebook snapshot.
//!
//! Layout (little endian): magic `DIGCB\0\0\0`, version `u32`, `L`, `K`, `d`
//! as `u32`, null-code flag `u8`, `alpha`, `dead_threshold` as `f64`, `grace`
//! `u64`, header crc32; then vectors, EMA counts (all `f64`), ages (`u64`),
//! and a payload crc32.

use std::path::Path;

use crate::error::{DigError, Result};
use crate::numerics::{ParamStore, Scalar};

use super::Codebook;

const MAGIC: &[u8; 8] = b"DIGCB\0\0\0";
const VERSION: u32 = 1;

pub fn encode_codebook<T: Scalar>(cb: &Codebook<T>, store: &ParamStore<T>) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cb.depth(), cb.k, cb.dim] {
        head.extend_from_slice(&(v as u32).to_le_bytes());
    }
    head.push(u8::from(cb.null_code));
    head.extend_from_slice(&cb.alpha.as_f64().to_le_bytes());
    head.extend_from_slice(&cb.dead_threshold.as_f64().to_le_bytes());
    head.extend_from_slice(&cb.grace.to_le_bytes());
    let hcrc = crc32fast::hash(&head);
    head.extend_from_slice(&hcrc.to_le_bytes());

    let mut body = Vec::new();
    for &id in &cb.layers {
        for &v in store.value(id).data() {
            body.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    for row in &cb.ema_counts {
        for &v in row {
            body.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    for row in &cb.ages {
        for &a in row {
            body.extend_from_slice(&a.to_le_bytes());
        }
    }
    let pcrc = crc32fast::hash(&body);
    head.extend_from_slice(&body);
    head.extend_from_slice(&pcrc.to_le_bytes());
    head
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DigError::Corrupt {
                path: self.origin.into(),
                reason: "truncated".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Restores a snapshot into an existing codebook of matching shape.
pub fn decode_codebook_into<T: Scalar>(
    bytes: &[u8],
    origin: &str,
    cb: &mut Codebook<T>,
    store: &mut ParamStore<T>,
) -> Result<()> {
    let corrupt = |reason: &str| DigError::Corrupt {
        path: origin.into(),
        reason: reason.into(),
    };
    let mut r = Reader { buf: bytes, pos: 0, origin };
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let (depth, k, dim) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let null = r.take(1)?[0] != 0;
    let alpha = r.f64()?;
    let threshold = r.f64()?;
    let grace = r.u64()?;
    let head_end = r.pos;
    if crc32fast::hash(&bytes[..head_end]) != r.u32()? {
        return Err(corrupt("header checksum mismatch"));
    }
    if (depth, k, dim) != (cb.depth(), cb.k, cb.dim) {
        return Err(DigError::shape(
            "decode_codebook",
            format!("{}x{}x{}", cb.depth(), cb.k, cb.dim),
            format!("{depth}x{k}x{dim}"),
        ));
    }
    let body_start = r.pos;
    let mut vectors = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut t = store.value(cb.layers[0]).clone();
        for v in t.data_mut() {
            *v = T::of(r.f64()?);
        }
        vectors.push(t);
    }
    let mut counts = vec![vec![T::zero(); k]; depth];
    for row in &mut counts {
        for v in row.iter_mut() {
            *v = T::of(r.f64()?);
        }
    }
    let mut ages = vec![vec![0u64; k]; depth];
    for row in &mut ages {
        for a in row.iter_mut() {
            *a = r.u64()?;
        }
    }
    let body_end = r.pos;
    if crc32fast::hash(&bytes[body_start..body_end]) != r.u32()? {
        return Err(corrupt("payload checksum mismatch"));
    }
    for (id, t) in cb.layers.clone().into_iter().zip(vectors) {
        *store.value_mut(id) = t;
    }
    cb.null_code = null;
    cb.alpha = T::of(alpha);
    cb.dead_threshold = T::of(threshold);
    cb.grace = grace;
    cb.ema_counts = counts;
    cb.ages = ages;
    Ok(())
}

pub fn save_codebook<T: Scalar>(cb: &Codebook<T>, store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_codebook(cb, store))?;
    Ok(())
}

pub fn load_codebook_into<T: Scalar>(path: &Path, cb: &mut Codebook<T>, store: &mut ParamStore<T>) -> Result<()> {
    if !path.exists() {
        return Err(DigError::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    decode_codebook_into(&bytes, &path.display().to_string(), cb, store)
}
