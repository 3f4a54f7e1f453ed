//! Full classifier: frozen encoder plus trainable head, with the adapter
//! configuration taken from the backbone config. Built deterministically
//! from a single seed; the backbone, adapter, and head substreams are
//! independent, so models that differ only in adapter mode share frozen
//! weights and head initialization.

use crate::backbone::{build_backbone, BackboneConfig, FrozenEncoder};
use crate::error::Result;
use crate::head::{score_from_logits, Head};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

const STREAM_HEAD: u64 = 0x4ead;

pub struct Model {
    pub encoder: FrozenEncoder,
    pub head: Head,
    seed: u64,
}

impl Model {
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Model> {
        let rng = Rng::new(seed);
        let encoder = build_backbone(cfg, &rng)?;
        let mut head_rng = rng.derive(STREAM_HEAD);
        let head = Head::init(cfg.model_dim, cfg.head_hidden, &mut head_rng);
        Ok(Model {
            encoder,
            head,
            seed,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.encoder.config()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_train_mode(&self, on: bool) {
        self.encoder.set_train_mode(on);
    }

    /// Logits [2] for one feature sequence [t, d_in].
    pub fn logits(&self, frames: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        let encoded = self.encoder.encode(frames, rng)?;
        self.head.classify(&encoded)
    }

    /// Detection score (higher = more bonafide) with no graph construction.
    /// Callers are responsible for having evaluation mode set.
    pub fn score(&self, frames: &Tensor) -> Result<f64> {
        no_grad(|| {
            let logits = self.logits(frames, None)?;
            score_from_logits(&logits)
        })
    }

    /// Mean NLL over a batch of (frames, label) pairs.
    pub fn batch_nll(&self, batch: &[(&Tensor, u8)], mut rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for (frames, label) in batch {
            rows.push(self.logits(frames, rng.as_deref_mut())?);
            labels.push(*label);
        }
        Tensor::stack_rows(&rows)?.log_softmax_nll(&labels)
    }

    /// Trainable parameters in a stable order: adapters then head.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.trainable_params();
        for (name, t) in self.head.params() {
            out.push((format!("head.{name}"), t.clone()));
        }
        out
    }

    pub fn frozen_params(&self) -> Vec<(String, Tensor)> {
        self.encoder.frozen_params()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn adapter_macs(&self) -> u64 {
        self.encoder.mac_counter().get()
    }

    pub fn reset_adapter_macs(&self) {
        self.encoder.mac_counter().set(0);
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable_params() {
            t.zero_grad();
        }
    }
}
