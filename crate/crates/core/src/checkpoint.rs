//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `CENETCKP`, `u32` version, `u64` d, `u64` |E|, `u64` |R_total|,
//! `u64` metadata length, metadata JSON, `u32` block count, then per block:
//! `u32` name length, name, `u32` rank, `u64` dims, row-major `f64` values.
//! Parameter blocks come first in a fixed order, followed by the optimizer
//! moments (`adam.m/<name>`, `adam.v/<name>`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::Classifier;
use crate::error::{CenetError, Result};
use crate::model::{HyperParams, ModelParams, TrainSwitches};
use crate::optim::{Adam, AdamConfig, Parameter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CENETCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub hyperparams: HyperParams,
    pub switches: TrainSwitches,
    pub num_relations_raw: usize,
    pub stage1_epochs_done: usize,
    pub adam: Option<AdamState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    /// Stage-1 optimizer, kept so training can resume mid-run.
    pub adam: Option<Adam>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CenetError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CenetError::Checkpoint("size overflow".into()))
    }
}

/// SHA-256 of a parameter's shape and values.
pub fn parameter_digest(p: &Parameter) -> [u8; 32] {
    let mut h = Sha256::new();
    for &d in p.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &x in p.value.data() {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let mut meta = self.meta.clone();
        meta.adam = self.adam.as_ref().map(|a| AdamState {
            config: a.config.clone(),
            step: a.step_count(),
        });
        let json = serde_json::to_vec(&meta).map_err(|e| CenetError::Checkpoint(e.to_string()))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, p.dim as u64);
        put_u64(&mut out, p.num_entities as u64);
        put_u64(&mut out, p.num_relations as u64);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);

        let params = p.all();
        let moments: Vec<(&str, &[f64], &[f64])> =
            self.adam.iter().flat_map(|a| a.moments()).collect();
        put_u32(&mut out, (params.len() + 2 * moments.len()) as u32);
        for q in &params {
            put_block(&mut out, &q.name, q.shape(), q.value.data());
        }
        for (name, m, v) in moments {
            put_block(&mut out, &format!("adam.m/{name}"), &[m.len()], m);
            put_block(&mut out, &format!("adam.v/{name}"), &[v.len()], v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CenetError::Checkpoint(
                "not a checkpoint (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CenetError::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let (dim, num_entities, num_relations) = (r.usize()?, r.usize()?, r.usize()?);
        let meta_len = r.usize()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CenetError::Checkpoint(format!("metadata: {e}")))?;
        if meta.hyperparams.dim != dim {
            return Err(CenetError::Checkpoint(format!(
                "header dim {dim} disagrees with metadata dim {}",
                meta.hyperparams.dim
            )));
        }

        let count = r.u32()? as usize;
        let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CenetError::Checkpoint("block name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| CenetError::Checkpoint("block too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if blocks
                .insert(name.clone(), Tensor::new(shape, data)?)
                .is_some()
            {
                return Err(CenetError::Checkpoint(format!("duplicate block `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CenetError::Checkpoint("trailing bytes".into()));
        }

        let mut params = ModelParams::init(0, 0, dim, 0);
        params.num_entities = num_entities;
        params.num_relations = num_relations;
        let expected = expected_shapes(dim, num_entities, num_relations);
        for (p, (name, shape)) in params.stage1_mut().into_iter().zip(&expected) {
            debug_assert_eq!(&p.name, name);
            *p = take_block(&mut blocks, name, shape)?;
        }
        let has_w = blocks.contains_key("classifier.weight");
        let has_b = blocks.contains_key("classifier.bias");
        if has_w != has_b {
            return Err(CenetError::Checkpoint(
                "classifier block is incomplete".into(),
            ));
        }
        if has_w {
            params.classifier = Some(Classifier {
                weight: take_block(&mut blocks, "classifier.weight", &[1, dim])?,
                bias: take_block(&mut blocks, "classifier.bias", &[1])?,
            });
        }

        let adam = match &meta.adam {
            None => None,
            Some(state) => {
                let mut moments = BTreeMap::new();
                let names: Vec<String> = blocks
                    .keys()
                    .filter_map(|k| k.strip_prefix("adam.m/").map(str::to_string))
                    .collect();
                for name in names {
                    let m = blocks.remove(&format!("adam.m/{name}")).expect("listed");
                    let v = blocks.remove(&format!("adam.v/{name}")).ok_or_else(|| {
                        CenetError::Checkpoint(format!("missing second moment for `{name}`"))
                    })?;
                    let size = params
                        .all()
                        .into_iter()
                        .find(|p| p.name == name)
                        .map(|p| p.value.len())
                        .ok_or_else(|| {
                            CenetError::Checkpoint(format!(
                                "moments for unknown parameter `{name}`"
                            ))
                        })?;
                    if m.len() != size || v.len() != size {
                        return Err(CenetError::Checkpoint(format!(
                            "moment size mismatch for `{name}`"
                        )));
                    }
                    moments.insert(name, (m.into_data(), v.into_data()));
                }
                Some(Adam::restore(state.config.clone(), state.step, moments))
            }
        };
        if let Some(extra) = blocks.keys().next() {
            return Err(CenetError::Checkpoint(format!(
                "unexpected block `{extra}`"
            )));
        }
        Ok(Checkpoint { meta, params, adam })
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CenetError::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| CenetError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CenetError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CenetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors unless the checkpoint was built for this vocabulary.
    pub fn check_vocab(&self, num_entities: usize, num_relations_total: usize) -> Result<()> {
        let p = &self.params;
        if p.num_entities != num_entities || p.num_relations != num_relations_total {
            return Err(CenetError::Checkpoint(format!(
                "vocabulary mismatch: checkpoint has {} entities and {} relations, dataset has {} and {}",
                p.num_entities, p.num_relations, num_entities, num_relations_total
            )));
        }
        Ok(())
    }
}

fn expected_shapes(d: usize, e: usize, r: usize) -> [(&'static str, Vec<usize>); 11] {
    [
        ("entity", vec![e, d]),
        ("relation", vec![r, d]),
        ("his.weight", vec![d, 2 * d]),
        ("his.bias", vec![d]),
        ("nhis.weight", vec![d, 2 * d]),
        ("nhis.bias", vec![d]),
        ("freq.weight", vec![d, e]),
        ("mlp.hidden.weight", vec![d, 3 * d]),
        ("mlp.hidden.bias", vec![d]),
        ("mlp.out.weight", vec![d, d]),
        ("mlp.out.bias", vec![d]),
    ]
}

fn take_block(
    blocks: &mut BTreeMap<String, Tensor>,
    name: &str,
    shape: &[usize],
) -> Result<Parameter> {
    let t = blocks
        .remove(name)
        .ok_or_else(|| CenetError::Checkpoint(format!("missing block `{name}`")))?;
    if t.shape() != shape {
        return Err(CenetError::Checkpoint(format!(
            "block `{name}` has shape {:?}, header implies {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(Parameter::new(name, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_classifier: bool) -> Checkpoint {
        let mut params = ModelParams::init(5, 4, 3, 9);
        if with_classifier {
            params.classifier = Some(Classifier::init(3, 2));
        }
        let hp = HyperParams {
            dim: 3,
            ..HyperParams::default()
        };
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        for p in params.stage1_mut() {
            p.grad.data_mut().fill(0.5);
        }
        adam.step(&mut params.stage1_mut());
        Checkpoint {
            meta: CheckpointMeta {
                hyperparams: hp,
                switches: TrainSwitches::default(),
                num_relations_raw: 2,
                stage1_epochs_done: 1,
                adam: None,
            },
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for with_classifier in [false, true] {
            let ck = sample(with_classifier);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.params.all().len(), ck.params.all().len());
            for (a, b) in back.params.all().iter().zip(ck.params.all()) {
                assert_eq!(a.value, b.value);
            }
            assert_eq!(back.adam.as_ref().unwrap().step_count(), 1);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample(true).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut v = bytes.clone();
        v[8] = 99;
        assert!(Checkpoint::from_bytes(&v).is_err());
    }

    #[test]
    fn vocab_check_names_sizes() {
        let ck = sample(false);
        assert!(ck.check_vocab(5, 4).is_ok());
        let msg = ck.check_vocab(6, 4).unwrap_err().to_string();
        assert!(msg.contains('5') && msg.contains('6'), "{msg}");
    }
}
