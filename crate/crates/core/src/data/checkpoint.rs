//! Versioned binary checkpoint container.
//!
//! Layout: the magic `LTMSCKPT`, a little-endian `u32` version, a `u64`
//! manifest length, a JSON manifest (config, counters, parameter names,
//! kinds and shapes), then every parameter as little-endian `f64` values in
//! manifest order, followed by the optimizer moments when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, ModelConfig};
use crate::numerics::{ParamKind, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LTMSCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// AdamW moments, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// State of the training data-order stream.
    pub rng_state: u64,
    pub params: Vec<StoredParam>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    epoch: usize,
    rng_state: u64,
    optimizer_step: Option<u64>,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::NoDecay => "no_decay",
        ParamKind::Buffer => "buffer",
    }
}

fn parse_kind(s: &str) -> Result<ParamKind, DataError> {
    match s {
        "weight" => Ok(ParamKind::Weight),
        "no_decay" => Ok(ParamKind::NoDecay),
        "buffer" => Ok(ParamKind::Buffer),
        other => Err(DataError::Checkpoint(format!("unknown parameter kind {other:?}"))),
    }
}

fn bad(msg: impl Into<String>) -> DataError {
    DataError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_store(
        config: &ModelConfig,
        store: &ParamStore,
        epoch: usize,
        rng_state: u64,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Self {
            config: config.clone(),
            epoch,
            rng_state,
            params: store
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            optimizer,
        }
    }

    /// Copies stored values into `store`, which must hold exactly the same
    /// parameter names and shapes. Nothing is written on mismatch.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), DataError> {
        if store.len() != self.params.len() {
            return Err(bad(format!(
                "checkpoint has {} parameters but the model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let mut ids = Vec::with_capacity(self.params.len());
        for sp in &self.params {
            let id = store
                .id(&sp.name)
                .ok_or_else(|| bad(format!("parameter {} is not part of the model", sp.name)))?;
            let have = store.value(id).shape();
            if have != sp.shape.as_slice() {
                return Err(bad(format!(
                    "parameter {}: shape {:?} in checkpoint but {:?} in model",
                    sp.name, sp.shape, have
                )));
            }
            ids.push(id);
        }
        for (sp, id) in self.params.iter().zip(ids) {
            store.get_mut(id).value.data_mut().copy_from_slice(&sp.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config.clone(),
            epoch: self.epoch,
            rng_state: self.rng_state,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            params: self
                .params
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    kind: kind_name(p.kind).to_string(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let floats: usize = self.params.iter().map(|p| p.data.len()).sum::<usize>()
            * if self.optimizer.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(20 + text.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for p in &self.params {
            put(&p.data);
        }
        if let Some(opt) = &self.optimizer {
            opt.m.iter().for_each(|b| put(b));
            opt.v.iter().for_each(|b| put(b));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| bad(format!("manifest: {e}")))?;
        manifest.config.validate()?;
        let payload = &body[mlen..];
        let sizes: Vec<usize> = manifest
            .params
            .iter()
            .map(|p| p.shape.iter().product())
            .collect();
        let per_set: usize = sizes.iter().sum();
        let sets = if manifest.optimizer_step.is_some() { 3 } else { 1 };
        if payload.len() != 8 * per_set * sets {
            return Err(bad(format!(
                "payload has {} bytes, expected {} (truncated or corrupt)",
                payload.len(),
                8 * per_set * sets
            )));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
        let mut params = Vec::with_capacity(sizes.len());
        for (e, &n) in manifest.params.iter().zip(&sizes) {
            params.push(StoredParam {
                name: e.name.clone(),
                kind: parse_kind(&e.kind)?,
                shape: e.shape.clone(),
                data: take(n),
            });
        }
        let optimizer = manifest.optimizer_step.map(|step| {
            let m = sizes.iter().map(|&n| take(n)).collect();
            let v = sizes.iter().map(|&n| take(n)).collect();
            OptimizerState { step, m, v }
        });
        Ok(Self {
            config: manifest.config,
            epoch: manifest.epoch,
            rng_state: manifest.rng_state,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| DataError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameter tensors in stored order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.params.iter().map(|p| {
            (
                p.name.as_str(),
                Tensor::new(p.shape.clone(), p.data.clone()).expect("consistent shape"),
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.xavier("w", &[3, 4], 3, 4, &mut rng);
        s.filled("b", ParamKind::NoDecay, &[4], 0.25);
        s.filled("rm", ParamKind::Buffer, &[4], 1.0);
        s
    }

    fn opt(s: &ParamStore) -> OptimizerState {
        OptimizerState {
            step: 7,
            m: s.iter().map(|(_, p)| vec![0.5; p.value.len()]).collect(),
            v: s.iter().map(|(_, p)| vec![0.125; p.value.len()]).collect(),
        }
    }

    #[test]
    fn byte_round_trip() {
        let s = store();
        let c = Checkpoint::from_store(&ModelConfig::default(), &s, 3, 99, Some(opt(&s)));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_detected() {
        let s = store();
        let bytes = Checkpoint::from_store(&ModelConfig::default(), &s, 0, 0, None).to_bytes();
        for cut in [5, 19, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let s = store();
        let mut bytes = Checkpoint::from_store(&ModelConfig::default(), &s, 0, 0, None).to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let s = store();
        let c = Checkpoint::from_store(&ModelConfig::default(), &s, 0, 0, None);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut other = ParamStore::new();
        other.xavier("w", &[3, 5], 3, 5, &mut rng);
        other.filled("b", ParamKind::NoDecay, &[4], 0.0);
        other.filled("rm", ParamKind::Buffer, &[4], 0.0);
        let before: Vec<f64> = other.value(other.id("b").unwrap()).data().to_vec();
        let err = c.restore_into(&mut other).unwrap_err();
        assert!(err.to_string().contains("parameter w"), "{err}");
        assert_eq!(other.value(other.id("b").unwrap()).data(), before.as_slice());
    }
}
