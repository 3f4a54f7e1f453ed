//! Frozen pre-norm transformer encoder with adapters injected at the query,
//! key, value, and output projections of every layer. Backbone weights are
//! seeded random and never trained; only adapters (and the classifier head)
//! carry gradients.

use std::cell::Cell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GatingRouter;
use crate::lora::LoraExpert;
use crate::moe::{MacCounter, MoeLoraProjection, RoutingGranularity, Site, SITES};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    None,
    SingleLora,
    MoeLora,
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdapterMode::None),
            "single_lora" => Ok(AdapterMode::SingleLora),
            "moe_lora" => Ok(AdapterMode::MoeLora),
            other => Err(Error::Validation(format!("unknown adapter_mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    pub adapter_mode: AdapterMode,
    pub lora_rank: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub lora_scale: f64,
    pub routing: RoutingGranularity,
    pub renormalize_topk: bool,
    pub head_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            model_dim: 32,
            heads: 4,
            ffn_dim: 128,
            input_dim: 16,
            adapter_mode: AdapterMode::MoeLora,
            lora_rank: 8,
            num_experts: 3,
            top_k: 3,
            lora_scale: 1.0,
            routing: RoutingGranularity::Token,
            renormalize_topk: false,
            head_hidden: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.input_dim == 0 {
            return Err(Error::Validation("zero-sized backbone dimension".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Validation(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Validation("ffn_dim must be positive".into()));
        }
        match self.adapter_mode {
            AdapterMode::None => {}
            AdapterMode::SingleLora | AdapterMode::MoeLora => {
                if self.lora_rank == 0 || self.lora_rank > self.model_dim {
                    return Err(Error::Validation(format!(
                        "lora_rank {} outside [1, {}]",
                        self.lora_rank, self.model_dim
                    )));
                }
                if self.adapter_mode == AdapterMode::MoeLora {
                    if self.num_experts == 0 {
                        return Err(Error::Validation("num_experts must be positive".into()));
                    }
                    if self.top_k == 0 || self.top_k > self.num_experts {
                        return Err(Error::Validation(format!(
                            "top_k {} outside [1, {}]",
                            self.top_k, self.num_experts
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One attention projection, possibly adapter-wrapped.
pub enum ProjectionSlot {
    Frozen {
        w0: Tensor,
    },
    Single {
        w0: Tensor,
        expert: LoraExpert,
        macs: MacCounter,
    },
    Moe(MoeLoraProjection),
}

impl ProjectionSlot {
    fn forward_rows(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        match self {
            ProjectionSlot::Frozen { w0 } => x.linear(w0),
            ProjectionSlot::Single { w0, expert, macs } => {
                let base = x.linear(w0)?;
                let delta = expert.apply_rows(x)?;
                let (d, m) = expert.dims();
                macs.set(macs.get() + (x.shape()[0] * expert.rank() * (d + m)) as u64);
                base.add(&delta)
            }
            ProjectionSlot::Moe(p) => p.forward_rows(x, rng),
        }
    }

    pub fn w0(&self) -> &Tensor {
        match self {
            ProjectionSlot::Frozen { w0 } => w0,
            ProjectionSlot::Single { w0, .. } => w0,
            ProjectionSlot::Moe(p) => p.w0(),
        }
    }

    pub fn moe(&self) -> Option<&MoeLoraProjection> {
        match self {
            ProjectionSlot::Moe(p) => Some(p),
            _ => None,
        }
    }

    fn set_train_mode(&self, on: bool) {
        if let ProjectionSlot::Moe(p) = self {
            p.set_train_mode(on);
        }
    }

    fn push_trainable(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            ProjectionSlot::Frozen { .. } => {}
            ProjectionSlot::Single { expert, .. } => {
                out.push((format!("{prefix}.lora.a"), expert.a().clone()));
                out.push((format!("{prefix}.lora.b"), expert.b().clone()));
            }
            ProjectionSlot::Moe(p) => {
                for (i, e) in p.experts().iter().enumerate() {
                    out.push((format!("{prefix}.expert{i}.a"), e.a().clone()));
                    out.push((format!("{prefix}.expert{i}.b"), e.b().clone()));
                }
                for (name, t) in p.router().params() {
                    out.push((format!("{prefix}.router.{name}"), t.clone()));
                }
            }
        }
    }
}

pub struct EncoderLayer {
    pub q: ProjectionSlot,
    pub k: ProjectionSlot,
    pub v: ProjectionSlot,
    pub p: ProjectionSlot,
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    ffn_w1: Tensor, // [ffn, d]
    ffn_b1: Tensor,
    ffn_w2: Tensor, // [d, ffn]
    ffn_b2: Tensor,
}

impl EncoderLayer {
    pub fn slot(&self, site: Site) -> &ProjectionSlot {
        match site {
            Site::Q => &self.q,
            Site::K => &self.k,
            Site::V => &self.v,
            Site::P => &self.p,
        }
    }
}

pub struct FrozenEncoder {
    cfg: BackboneConfig,
    embed_w: Tensor, // [d, d_in]
    embed_b: Tensor, // [d]
    pub layers: Vec<EncoderLayer>,
    final_gamma: Tensor,
    final_beta: Tensor,
    macs: MacCounter,
}

const STREAM_BACKBONE: u64 = 0xb0;
const STREAM_ADAPTERS: u64 = 0xada;

/// Deterministic frozen encoder from a seed. The backbone weight stream is
/// independent of the adapter stream, so different adapter modes share
/// bit-identical frozen weights for the same rng.
pub fn build_backbone(cfg: &BackboneConfig, rng: &Rng) -> Result<FrozenEncoder> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let ffn = cfg.ffn_dim;
    let macs: MacCounter = Rc::new(Cell::new(0));

    let mut brng = rng.derive(STREAM_BACKBONE);
    let embed_w = Tensor::randn(&[d, cfg.input_dim], (1.0 / cfg.input_dim as f64).sqrt(), &mut brng);
    let embed_b = Tensor::zeros(&[d]);
    let mut raw_layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let std_d = (1.0 / d as f64).sqrt();
        let wq = Tensor::randn(&[d, d], std_d, &mut brng);
        let wk = Tensor::randn(&[d, d], std_d, &mut brng);
        let wv = Tensor::randn(&[d, d], std_d, &mut brng);
        let wp = Tensor::randn(&[d, d], std_d, &mut brng);
        let ffn_w1 = Tensor::randn(&[ffn, d], std_d, &mut brng);
        let ffn_w2 = Tensor::randn(&[d, ffn], (1.0 / ffn as f64).sqrt(), &mut brng);
        raw_layers.push((wq, wk, wv, wp, ffn_w1, ffn_w2));
    }

    let mut arng = rng.derive(STREAM_ADAPTERS);
    let mut layers = Vec::with_capacity(cfg.layers);
    for (layer_idx, (wq, wk, wv, wp, ffn_w1, ffn_w2)) in raw_layers.into_iter().enumerate() {
        let wrap = |w0: Tensor, site: Site, arng: &mut Rng| -> Result<ProjectionSlot> {
            match cfg.adapter_mode {
                AdapterMode::None => Ok(ProjectionSlot::Frozen { w0 }),
                AdapterMode::SingleLora => Ok(ProjectionSlot::Single {
                    w0,
                    expert: LoraExpert::init(d, d, cfg.lora_rank, cfg.lora_scale, arng)?,
                    macs: macs.clone(),
                }),
                AdapterMode::MoeLora => {
                    let experts = (0..cfg.num_experts)
                        .map(|_| LoraExpert::init(d, d, cfg.lora_rank, cfg.lora_scale, arng))
                        .collect::<Result<Vec<_>>>()?;
                    let router = GatingRouter::init(d, cfg.num_experts, cfg.top_k, arng)?;
                    Ok(ProjectionSlot::Moe(MoeLoraProjection::new(
                        w0,
                        experts,
                        router,
                        site,
                        layer_idx,
                        cfg.routing,
                        cfg.renormalize_topk,
                        macs.clone(),
                    )?))
                }
            }
        };
        layers.push(EncoderLayer {
            q: wrap(wq, Site::Q, &mut arng)?,
            k: wrap(wk, Site::K, &mut arng)?,
            v: wrap(wv, Site::V, &mut arng)?,
            p: wrap(wp, Site::P, &mut arng)?,
            ln1_gamma: ones(d),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: ones(d),
            ln2_beta: Tensor::zeros(&[d]),
            ffn_w1,
            ffn_b1: Tensor::zeros(&[ffn]),
            ffn_w2,
            ffn_b2: Tensor::zeros(&[d]),
        });
    }

    Ok(FrozenEncoder {
        cfg: cfg.clone(),
        embed_w,
        embed_b,
        layers,
        final_gamma: ones(d),
        final_beta: Tensor::zeros(&[d]),
        macs,
    })
}

fn ones(d: usize) -> Tensor {
    Tensor::from_vec(&[d], vec![1.0; d]).expect("shape matches data")
}

/// Sinusoidal positional encoding for a sequence of length t.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (pos as f64 * freq).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::from_vec(&[t, d], data).expect("shape matches data")
}

impl FrozenEncoder {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn mac_counter(&self) -> &MacCounter {
        &self.macs
    }

    pub fn set_train_mode(&self, on: bool) {
        for layer in &self.layers {
            for site in SITES {
                layer.slot(site).set_train_mode(on);
            }
        }
    }

    /// Encode a feature sequence [t, d_in] into [t, d].
    pub fn encode(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        self.encode_impl(x, rng, None)
    }

    /// Encode and also return every attention matrix (layer-major, then
    /// head-major), for diagnostics and tests.
    pub fn encode_with_attention(
        &self,
        x: &Tensor,
        rng: Option<&mut Rng>,
    ) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let mut maps = Vec::new();
        let out = self.encode_impl(x, rng, Some(&mut maps))?;
        Ok((out, maps))
    }

    fn encode_impl(
        &self,
        x: &Tensor,
        mut rng: Option<&mut Rng>,
        mut attn_sink: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Tensor> {
        let (t, width) = match x.shape() {
            [t, w] => (*t, *w),
            s => {
                return Err(Error::Validation(format!(
                    "encode expects [T, {}], got {:?}",
                    self.cfg.input_dim, s
                )))
            }
        };
        if t == 0 || width != self.cfg.input_dim {
            return Err(Error::Validation(format!(
                "encode expects [T>=1, {}], got {:?}",
                self.cfg.input_dim,
                x.shape()
            )));
        }
        let d = self.cfg.model_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut h = x
            .linear(&self.embed_w)?
            .add_bias(&self.embed_b)?
            .add(&positional_encoding(t, d))?;

        for (l, layer) in self.layers.iter().enumerate() {
            let normed = h.layer_norm(&layer.ln1_gamma, &layer.ln1_beta, 1e-5)?;
            let q = layer.q.forward_rows(&normed, rng.as_deref_mut())?;
            let k = layer.k.forward_rows(&normed, rng.as_deref_mut())?;
            let v = layer.v.forward_rows(&normed, rng.as_deref_mut())?;
            let mut ctx_heads = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = q.slice_cols(head * dh, dh)?;
                let kh = k.slice_cols(head * dh, dh)?;
                let vh = v.slice_cols(head * dh, dh)?;
                let attn = qh.linear(&kh)?.scale(scale).softmax()?;
                if let Some(sink) = attn_sink.as_deref_mut() {
                    sink.push(attn.to_vec());
                }
                ctx_heads.push(attn.matmul(&vh)?);
            }
            let ctx = Tensor::concat_cols(&ctx_heads)?;
            let attn_out = layer.p.forward_rows(&ctx, rng.as_deref_mut())?;
            h = h.add(&attn_out)?;

            let normed2 = h.layer_norm(&layer.ln2_gamma, &layer.ln2_beta, 1e-5)?;
            let ff = normed2
                .linear(&layer.ffn_w1)?
                .add_bias(&layer.ffn_b1)?
                .gelu()
                .linear(&layer.ffn_w2)?
                .add_bias(&layer.ffn_b2)?;
            h = h.add(&ff)?;
            if !h.is_finite() {
                return Err(Error::Numeric {
                    site: format!("layer{l}"),
                    detail: "non-finite activations".into(),
                });
            }
        }
        h.layer_norm(&self.final_gamma, &self.final_beta, 1e-5)
    }

    /// Adapter parameters in a stable order (layer, then site, then expert).
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for site in SITES {
                layer
                    .slot(site)
                    .push_trainable(&format!("layer{l}.{site}"), &mut out);
            }
        }
        out
    }

    /// Every frozen tensor of the backbone, for freeze-invariance checks.
    pub fn frozen_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed.w".to_string(), self.embed_w.clone()),
            ("embed.b".to_string(), self.embed_b.clone()),
            ("final_ln.gamma".to_string(), self.final_gamma.clone()),
            ("final_ln.beta".to_string(), self.final_beta.clone()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for site in SITES {
                out.push((format!("layer{l}.{site}.w0"), layer.slot(site).w0().clone()));
            }
            out.push((format!("layer{l}.ln1.gamma"), layer.ln1_gamma.clone()));
            out.push((format!("layer{l}.ln1.beta"), layer.ln1_beta.clone()));
            out.push((format!("layer{l}.ln2.gamma"), layer.ln2_gamma.clone()));
            out.push((format!("layer{l}.ln2.beta"), layer.ln2_beta.clone()));
            out.push((format!("layer{l}.ffn.w1"), layer.ffn_w1.clone()));
            out.push((format!("layer{l}.ffn.b1"), layer.ffn_b1.clone()));
            out.push((format!("layer{l}.ffn.w2"), layer.ffn_w2.clone()));
            out.push((format!("layer{l}.ffn.b2"), layer.ffn_b2.clone()));
        }
        out
    }
}
