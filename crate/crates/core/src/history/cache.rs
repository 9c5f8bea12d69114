//! Binary cache of swept contexts.
//!
//! Layout: magic `CENETCTX`, `u32` version (LE), the 32-byte dataset
//! fingerprint, then three splits. Each split is a varint count followed by
//! contexts encoded as varints `s p o t n` and `n` pairs of
//! `(entity delta, count)`. Labels are recomputed on load.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use super::{QueryContext, SparseCounts, SplitContexts};
use crate::error::{CenetError, Result};

const MAGIC: &[u8; 8] = b"CENETCTX";
const VERSION: u32 = 1;

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let byte = *self
                .buf
                .get(self.pos)
                .ok_or_else(|| CenetError::Cache("truncated varint".into()))?;
            self.pos += 1;
            v |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(CenetError::Cache("varint too long".into()))
    }

    fn u32(&mut self) -> Result<u32> {
        u32::try_from(self.varint()?).map_err(|_| CenetError::Cache("value exceeds u32".into()))
    }
}

pub fn encode(fingerprint: &[u8; 32], contexts: &SplitContexts) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(fingerprint);
    for split in [&contexts.train, &contexts.valid, &contexts.test] {
        put_varint(&mut out, split.len() as u64);
        for c in split {
            for v in [c.s, c.p, c.true_o, c.t] {
                put_varint(&mut out, v.into());
            }
            put_varint(&mut out, c.freq.len() as u64);
            let mut prev = 0u32;
            for &(e, n) in c.freq.pairs() {
                put_varint(&mut out, (e - prev).into());
                put_varint(&mut out, n.into());
                prev = e;
            }
        }
    }
    out
}

/// Decodes a cache. Returns `Ok(None)` when the fingerprint or version does
/// not match (a stale cache), and an error when the bytes are corrupt.
pub fn decode(bytes: &[u8], fingerprint: &[u8; 32]) -> Result<Option<SplitContexts>> {
    if bytes.len() < 44 || &bytes[..8] != MAGIC {
        return Err(CenetError::Cache("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION || &bytes[12..44] != fingerprint {
        return Ok(None);
    }
    let mut r = Reader {
        buf: bytes,
        pos: 44,
    };
    let mut splits = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.varint()? as usize;
        let mut out = Vec::with_capacity(n);
        let mut shared: HashMap<(u32, u32, u32), Arc<SparseCounts>> = HashMap::new();
        for _ in 0..n {
            let (s, p, o, t) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let len = r.varint()? as usize;
            let mut pairs = Vec::with_capacity(len);
            let mut prev = 0u32;
            for _ in 0..len {
                prev = prev
                    .checked_add(r.u32()?)
                    .ok_or_else(|| CenetError::Cache("entity overflow".into()))?;
                pairs.push((prev, r.u32()?));
            }
            let freq = shared
                .entry((s, p, t))
                .or_insert_with(|| Arc::new(SparseCounts::from_pairs(pairs)))
                .clone();
            out.push(QueryContext::new(s, p, t, o, freq));
        }
        splits.push(out);
    }
    if r.pos != bytes.len() {
        return Err(CenetError::Cache("trailing bytes".into()));
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Some(SplitContexts { train, valid, test }))
}

pub fn save(
    path: impl AsRef<Path>,
    fingerprint: &[u8; 32],
    contexts: &SplitContexts,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CenetError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CenetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(fingerprint, contexts))
        .and_then(|_| w.flush())
        .map_err(|e| CenetError::io(path, e))
}

/// Loads a cache if one exists for this fingerprint.
pub fn load(path: impl AsRef<Path>, fingerprint: &[u8; 32]) -> Result<Option<SplitContexts>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(path).map_err(|e| CenetError::io(path, e))?;
    decode(&bytes, fingerprint)
}
