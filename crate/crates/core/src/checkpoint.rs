//! Checkpoint directories: `manifest.json` plus `params.bin`, a flat
//! little-endian `f32` payload in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::{ParamKind, ParamStore, Tensor};

pub const FORMAT: &str = "mgt-checkpoint";
pub const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub config: RunConfig,
    pub normalizer: Option<Normalizer>,
    /// Optimizer steps taken when saved.
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Tensor>,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    config: &RunConfig,
    stage: Stage,
    normalizer: Option<Normalizer>,
    step: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload = Vec::with_capacity(
        4 * store.num_scalars(ParamKind::Trainable) + 4 * store.num_scalars(ParamKind::Buffer),
    );
    for id in store.ids() {
        let v = store.value(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: v.shape().to_vec(),
            buffer: store.kind(id) == ParamKind::Buffer,
        });
        for &x in v.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        stage,
        config: config.clone(),
        normalizer,
        step,
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let m = dir.join(MANIFEST);
    fs::write(&m, text).map_err(|e| Error::io(&m, e))?;
    let p = dir.join(PAYLOAD);
    fs::write(&p, payload).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = dir.join(MANIFEST);
    let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", m.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
            manifest.format, manifest.version
        )));
    }
    manifest.config.validate()?;
    let p = dir.join(PAYLOAD);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| 4 * t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest describes {expected}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(manifest.tensors.len());
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for t in &manifest.tensors {
        let n = t.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        values.push(Tensor::new(t.shape.clone(), data)?);
    }
    Ok(Checkpoint { manifest, values })
}

impl Checkpoint {
    /// Copy every tensor whose name passes `filter` into `store`. All
    /// selected names must exist in `store` with the same shape; nothing is
    /// written unless every check passes. Returns the names copied.
    pub fn restore_into(
        &self,
        store: &mut ParamStore,
        filter: impl Fn(&str) -> bool,
    ) -> Result<Vec<String>> {
        let mut plan = Vec::new();
        for (entry, value) in self.manifest.tensors.iter().zip(&self.values) {
            if !filter(&entry.name) {
                continue;
            }
            let id = store.id(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("model has no tensor `{}`", entry.name))
            })?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}`: checkpoint shape {:?}, model shape {:?}",
                    entry.name,
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            plan.push((id, entry.name.clone(), value.clone()));
        }
        Ok(plan
            .into_iter()
            .map(|(id, name, value)| {
                store.set_value(id, value).expect("shape checked");
                name
            })
            .collect())
    }

    /// Restore a store that must match the checkpoint name-for-name.
    pub fn restore_exact(&self, store: &mut ParamStore) -> Result<()> {
        let names: std::collections::BTreeSet<&str> = self
            .manifest
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .collect();
        let missing: Vec<String> = store
            .ids()
            .map(|id| store.name(id))
            .filter(|n| !names.contains(n))
            .map(String::from)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks tensors: {}",
                missing.join(", ")
            )));
        }
        self.restore_into(store, |_| true).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a.weight",
            Tensor::matrix(2, 2, vec![0.1, -2.0, 3.5, 1e-3]),
            ParamKind::Trainable,
        );
        s.insert(
            "a.running_var",
            Tensor::row(vec![1.0, 0.25]),
            ParamKind::Buffer,
        );
        s
    }

    #[test]
    fn round_trip_casts_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        save_checkpoint(
            dir.path(),
            &s,
            &RunConfig::default(),
            Stage::Finetune,
            Some(Normalizer::identity()),
            7,
        )
        .unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.manifest.step, 7);
        assert_eq!(ck.values[0].data()[0], 0.1f32 as f64);
        let mut t = store();
        ck.restore_exact(&mut t).unwrap();
        assert_eq!(t.value(t.id("a.running_var").unwrap()).data(), &[1.0, 0.25]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(
            dir.path(),
            &store(),
            &RunConfig::default(),
            Stage::Pretrain,
            None,
            0,
        )
        .unwrap();
        let p = dir.path().join(PAYLOAD);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let e = load_checkpoint(dir.path()).unwrap_err();
        assert!(e.to_string().contains("payload"), "{e}");
    }

    #[test]
    fn version_and_shape_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(
            dir.path(),
            &store(),
            &RunConfig::default(),
            Stage::Pretrain,
            None,
            0,
        )
        .unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        let mut other = ParamStore::new();
        other.insert("a.weight", Tensor::zeros(&[3, 2]), ParamKind::Trainable);
        other.insert("a.running_var", Tensor::zeros(&[2]), ParamKind::Buffer);
        assert!(ck.restore_exact(&mut other).is_err());
        // nothing partially written
        assert!(other
            .value(other.id("a.running_var").unwrap())
            .data()
            .iter()
            .all(|&x| x == 0.0));
        let m = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&m)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        fs::write(&m, text).unwrap();
        assert!(load_checkpoint(dir.path())
            .unwrap_err()
            .to_string()
            .contains("v9"));
    }
}
