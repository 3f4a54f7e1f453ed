//! Checkpoint format: a single file holding a JSON header line (version,
//! backbone config, tensor directory) followed by the concatenated
//! little-endian float32 tensor payloads. Frozen backbone weights are not
//! stored; they are regenerated from the recorded seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// offset into the payload, in f32 elements
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: BackboneConfig,
    pub backbone_seed: u64,
    pub epoch: usize,
    pub dev_eer: f64,
    pub opt_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    /// Snapshot a model's trainable tensors plus any extra named vectors
    /// (optimizer moments). Values are stored as f32.
    pub fn capture(
        model: &Model,
        epoch: usize,
        dev_eer: f64,
        opt_step: u64,
        extra: &[(String, Vec<f64>)],
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        for (name, t) in model.trainable_params() {
            let data = t.to_vec();
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len(),
                len: data.len(),
            });
            payload.extend(data.iter().map(|&v| v as f32));
        }
        for (name, data) in extra {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: vec![data.len()],
                offset: payload.len(),
                len: data.len(),
            });
            payload.extend(data.iter().map(|&v| v as f32));
        }
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                config: model.config().clone(),
                backbone_seed: model.seed(),
                epoch,
                dev_eer,
                opt_step,
                tensors,
            },
            payload,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.header)
            .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;
        let mut bytes = header.into_bytes();
        bytes.push(b'\n');
        for v in &self.payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Format(format!("checkpoint header parse: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let body = &bytes[newline + 1..];
        if body.len() % 4 != 0 {
            return Err(Error::Format("checkpoint payload not f32-aligned".into()));
        }
        let payload: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint payload has {} values, directory expects {expected}",
                payload.len()
            )));
        }
        Ok(Checkpoint { header, payload })
    }

    pub fn tensor_data(&self, name: &str) -> Option<Vec<f64>> {
        let entry = self.header.tensors.iter().find(|t| t.name == name)?;
        Some(
            self.payload[entry.offset..entry.offset + entry.len]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
    }

    /// Rebuild the model: frozen backbone from the recorded seed, trainable
    /// tensors from the stored payload. Optimizer-state entries ("opt.*")
    /// are ignored here.
    pub fn build_model(&self) -> Result<Model> {
        let model = Model::build(&self.header.config, self.header.backbone_seed)?;
        let params = model.trainable_params();
        for (name, tensor) in &params {
            let entry = self
                .header
                .tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))?;
            if entry.shape != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor '{name}' shape {:?} != model shape {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.with_data_mut(|d| {
                for (dst, src) in d
                    .iter_mut()
                    .zip(&self.payload[entry.offset..entry.offset + entry.len])
                {
                    *dst = *src as f64;
                }
            });
        }
        // every non-optimizer entry must correspond to a model parameter
        for entry in &self.header.tensors {
            if !entry.name.starts_with("opt.") && !params.iter().any(|(n, _)| n == &entry.name) {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{}' has no slot in the model",
                    entry.name
                )));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::AdapterMode;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            input_dim: 4,
            adapter_mode: AdapterMode::MoeLora,
            lora_rank: 2,
            num_experts: 2,
            top_k: 2,
            head_hidden: 6,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = Model::build(&tiny_cfg(), 3).unwrap();
        // make values non-trivial
        for (_, t) in model.trainable_params() {
            t.with_data_mut(|d| {
                let mut rng = Rng::new(55);
                for v in d.iter_mut() {
                    *v += 0.001 * rng.gaussian();
                }
            });
        }
        let ckpt = Checkpoint::capture(&model, 4, 0.125, 77, &[]);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_is_idempotent_on_eval_scores() {
        let model = Model::build(&tiny_cfg(), 9).unwrap();
        for (_, t) in model.trainable_params() {
            t.with_data_mut(|d| {
                let mut rng = Rng::new(70);
                for v in d.iter_mut() {
                    *v += 0.01 * rng.gaussian();
                }
            });
        }
        let once = Checkpoint::capture(&model, 1, 0.5, 1, &[])
            .build_model()
            .unwrap();
        let twice = Checkpoint::capture(&once, 1, 0.5, 1, &[])
            .build_model()
            .unwrap();
        let mut xr = Rng::new(8);
        for _ in 0..10 {
            let x = Tensor::randn(&[5, 4], 1.0, &mut xr);
            let a = once.score(&x).unwrap();
            let b = twice.score(&x).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn build_model_restores_trainables_and_seed() {
        let model = Model::build(&tiny_cfg(), 21).unwrap();
        model.trainable_params()[0]
            .1
            .with_data_mut(|d| d.iter_mut().for_each(|v| *v = 0.25));
        let ckpt = Checkpoint::capture(&model, 2, 0.3, 10, &[]);
        let rebuilt = ckpt.build_model().unwrap();
        assert_eq!(rebuilt.seed(), 21);
        assert_eq!(
            rebuilt.trainable_params()[0].1.to_vec(),
            vec![0.25; model.trainable_params()[0].1.numel()]
        );
        // frozen weights identical to a fresh build with the same seed
        let fresh = Model::build(&tiny_cfg(), 21).unwrap();
        for ((_, a), (_, b)) in rebuilt.frozen_params().iter().zip(fresh.frozen_params().iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"not json\n\x00\x00\x00\x00").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }

    #[test]
    fn optimizer_entries_are_carried_but_not_loaded_into_model() {
        let model = Model::build(&tiny_cfg(), 2).unwrap();
        let extra = vec![("opt.m.head.w1".to_string(), vec![0.5; 4])];
        let ckpt = Checkpoint::capture(&model, 1, 0.4, 3, &extra);
        assert_eq!(ckpt.tensor_data("opt.m.head.w1").unwrap().len(), 4);
        assert!(ckpt.build_model().is_ok());
    }
}
