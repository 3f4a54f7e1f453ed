//! Trainable-parameter accounting and per-expert singular-value analysis.
//!
//! Paper-scale accounting uses the reference backbone geometry (24 layers,
//! model dim 1024, adapters at the four attention projections) and a fixed
//! 447,000-parameter back-end constant; the toy head is counted literally
//! in toy mode. Expert counts are N * 2 r d per site; each gate carries two
//! N x d matrices plus per-expert noise mean/log-sigma scalars.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterMode, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::moe::SITES;

pub const PAPER_MODEL_DIM: usize = 1024;
pub const PAPER_LAYERS: usize = 24;
pub const PAPER_HEAD_PARAMS: u64 = 447_000;
const ADAPTER_SITES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    Paper,
    Toy,
}

impl std::str::FromStr for CountMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(CountMode::Paper),
            "toy" => Ok(CountMode::Toy),
            other => Err(Error::Validation(format!("unknown count mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub mode: CountMode,
    pub adapter_mode: AdapterMode,
    pub num_experts: usize,
    pub lora_rank: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub experts: u64,
    pub routers: u64,
    pub head: u64,
    pub total: u64,
}

impl ParamCountReport {
    /// Table-style rounding: totals below 1M as "xxxK", otherwise two
    /// decimals with an "M" suffix.
    pub fn formatted_total(&self) -> String {
        format_count(self.total)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode:        {:?}", self.mode);
        let _ = writeln!(out, "adapter:     {:?}", self.adapter_mode);
        let _ = writeln!(out, "experts (N): {}", self.num_experts);
        let _ = writeln!(out, "rank (r):    {}", self.lora_rank);
        let _ = writeln!(out, "geometry:    {} layers x dim {}", self.layers, self.model_dim);
        let _ = writeln!(out, "expert params:  {}", self.experts);
        let _ = writeln!(out, "router params:  {}", self.routers);
        let _ = writeln!(out, "head params:    {}", self.head);
        let _ = writeln!(out, "total trainable: {} ({})", self.total, self.formatted_total());
        out
    }
}

pub fn format_count(count: u64) -> String {
    if count < 1_000_000 {
        format!("{}K", (count as f64 / 1000.0).round() as u64)
    } else {
        format!("{:.2}M", count as f64 / 1.0e6)
    }
}

/// Trainable-parameter accounting for a configuration. Paper mode forces
/// the reference geometry and head constant; toy mode counts the configured
/// dimensions and the actual toy head.
pub fn count_params(cfg: &BackboneConfig, mode: CountMode) -> Result<ParamCountReport> {
    cfg.validate()?;
    let (d, layers) = match mode {
        CountMode::Paper => (PAPER_MODEL_DIM, PAPER_LAYERS),
        CountMode::Toy => (cfg.model_dim, cfg.layers),
    };
    let (d64, l64) = (d as u64, layers as u64);
    let r = cfg.lora_rank as u64;
    let n = cfg.num_experts as u64;
    let per_site_expert = 2 * r * d64;
    let (experts, routers) = match cfg.adapter_mode {
        AdapterMode::None => (0, 0),
        AdapterMode::SingleLora => (per_site_expert * ADAPTER_SITES * l64, 0),
        AdapterMode::MoeLora => {
            let experts = n * per_site_expert * ADAPTER_SITES * l64;
            // W_g and W_noise ([N, d] each) plus mu and log_sigma ([N] each)
            let routers = (2 * n * d64 + 2 * n) * ADAPTER_SITES * l64;
            (experts, routers)
        }
    };
    let head = match mode {
        CountMode::Paper => PAPER_HEAD_PARAMS,
        CountMode::Toy => {
            (cfg.head_hidden * cfg.model_dim + cfg.head_hidden + 2 * cfg.head_hidden + 2) as u64
        }
    };
    Ok(ParamCountReport {
        mode,
        adapter_mode: cfg.adapter_mode,
        num_experts: match cfg.adapter_mode {
            AdapterMode::MoeLora => cfg.num_experts,
            AdapterMode::SingleLora => 1,
            AdapterMode::None => 0,
        },
        lora_rank: match cfg.adapter_mode {
            AdapterMode::None => 0,
            _ => cfg.lora_rank,
        },
        model_dim: d,
        layers,
        experts,
        routers,
        head,
        total: experts + routers + head,
    })
}

/// Largest singular value of every expert update, per site and layer.
pub fn expert_svd_map(model: &Model) -> Result<Vec<(String, usize, usize, f64)>> {
    if model.config().adapter_mode != AdapterMode::MoeLora {
        return Err(Error::Validation(
            "expert analysis requires a mixture-of-experts checkpoint".into(),
        ));
    }
    let mut rows = Vec::new();
    for (l, layer) in model.encoder.layers.iter().enumerate() {
        for site in SITES {
            let proj = layer.slot(site).moe().ok_or_else(|| {
                Error::Validation(format!("layer{l}.{site} is not a MoE projection"))
            })?;
            for (e, expert) in proj.experts().iter().enumerate() {
                rows.push((site.to_string(), l, e, expert.sigma_max()));
            }
        }
    }
    Ok(rows)
}

pub const SVD_MAP_HEADER: &str = "site,layer,expert,sigma_max";

pub fn svd_map_csv(rows: &[(String, usize, usize, f64)]) -> String {
    let mut out = String::from(SVD_MAP_HEADER);
    out.push('\n');
    for (site, layer, expert, sigma) in rows {
        let _ = writeln!(out, "{site},{layer},{expert},{sigma}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: AdapterMode, n: usize, r: usize) -> BackboneConfig {
        BackboneConfig {
            adapter_mode: mode,
            num_experts: n,
            top_k: n.max(1),
            lora_rank: r,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn single_lora_rows() {
        let r4 = count_params(&cfg(AdapterMode::SingleLora, 1, 4), CountMode::Paper).unwrap();
        assert_eq!(r4.experts, 786_432);
        assert_eq!(r4.routers, 0);
        assert_eq!(r4.total, 1_233_432);
        assert_eq!(r4.formatted_total(), "1.23M");
        let r8 = count_params(&cfg(AdapterMode::SingleLora, 1, 8), CountMode::Paper).unwrap();
        assert_eq!(r8.total, 2_019_864);
        assert_eq!(r8.formatted_total(), "2.02M");
    }

    #[test]
    fn moe_rows_exact_integers() {
        // arithmetic oracle for N=3, r=4:
        //   experts 3 * (2*4*1024) * 4 * 24 = 2,359,296
        //   routers (2*3*1024 + 2*3) * 96  =   589,824 + 576
        let rep = count_params(&cfg(AdapterMode::MoeLora, 3, 4), CountMode::Paper).unwrap();
        assert_eq!(rep.experts, 2_359_296);
        assert_eq!(rep.routers, 589_824 + 576);
        assert_eq!(rep.total, 2_359_296 + 589_824 + 576 + 447_000);
        assert_eq!(rep.formatted_total(), "3.40M");
    }

    #[test]
    fn all_eight_table_rows_round_trip() {
        let expected = [
            (AdapterMode::SingleLora, 1usize, 4usize, "1.23M"),
            (AdapterMode::SingleLora, 1, 8, "2.02M"),
            (AdapterMode::MoeLora, 3, 4, "3.40M"),
            (AdapterMode::MoeLora, 5, 4, "5.36M"),
            (AdapterMode::MoeLora, 7, 4, "7.33M"),
            (AdapterMode::MoeLora, 3, 8, "5.76M"),
            (AdapterMode::MoeLora, 5, 8, "9.30M"),
            (AdapterMode::MoeLora, 7, 8, "12.83M"),
        ];
        for (mode, n, r, want) in expected {
            let rep = count_params(&cfg(mode, n, r), CountMode::Paper).unwrap();
            assert_eq!(rep.formatted_total(), want, "N={n} r={r}");
        }
        // frozen-backbone baseline: only the back end is trainable
        let rep = count_params(&cfg(AdapterMode::None, 0, 4), CountMode::Paper);
        // rank is irrelevant in none mode but config validation needs >=1
        let rep = rep.or_else(|_| count_params(&cfg(AdapterMode::None, 1, 4), CountMode::Paper));
        assert_eq!(rep.unwrap().formatted_total(), "447K");
    }

    #[test]
    fn toy_mode_counts_the_actual_model() {
        let c = BackboneConfig {
            adapter_mode: AdapterMode::MoeLora,
            ..BackboneConfig::default()
        };
        let rep = count_params(&c, CountMode::Toy).unwrap();
        let model = Model::build(&c, 11).unwrap();
        assert_eq!(rep.total as usize, model.trainable_count());
    }

    #[test]
    fn toy_mode_counts_single_lora_too() {
        let c = BackboneConfig {
            adapter_mode: AdapterMode::SingleLora,
            ..BackboneConfig::default()
        };
        let rep = count_params(&c, CountMode::Toy).unwrap();
        let model = Model::build(&c, 12).unwrap();
        assert_eq!(rep.total as usize, model.trainable_count());
    }

    #[test]
    fn svd_map_untrained_is_all_zero() {
        let c = BackboneConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            input_dim: 4,
            num_experts: 3,
            top_k: 2,
            lora_rank: 2,
            ..BackboneConfig::default()
        };
        let model = Model::build(&c, 5).unwrap();
        let rows = expert_svd_map(&model).unwrap();
        assert_eq!(rows.len(), 2 * 4 * 3);
        for (_, _, _, sigma) in &rows {
            assert_eq!(*sigma, 0.0);
        }
    }

    #[test]
    fn svd_map_sees_planted_adapter() {
        let c = BackboneConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            input_dim: 4,
            num_experts: 2,
            top_k: 2,
            lora_rank: 1,
            ..BackboneConfig::default()
        };
        let model = Model::build(&c, 5).unwrap();
        // plant a rank-1 all-ones-like update on layer0.Q expert 1
        let proj = model.encoder.layers[0].q.moe().unwrap();
        proj.experts()[1].a().with_data_mut(|d| {
            d.fill(0.0);
            d[0] = 1.0;
            d[1] = 1.0; // A column has two ones
        });
        proj.experts()[1].b().with_data_mut(|d| {
            d.fill(0.0);
            d[0] = 1.0;
            d[1] = 1.0; // B row has two ones
        });
        let rows = expert_svd_map(&model).unwrap();
        let hit = rows
            .iter()
            .find(|(s, l, e, _)| s == "Q" && *l == 0 && *e == 1)
            .unwrap();
        assert!((hit.3 - 2.0).abs() < 1e-10, "sigma {}", hit.3);
    }

    #[test]
    fn svd_map_rejects_non_moe() {
        let c = BackboneConfig {
            adapter_mode: AdapterMode::SingleLora,
            ..BackboneConfig::default()
        };
        let model = Model::build(&c, 5).unwrap();
        assert!(expert_svd_map(&model).is_err());
    }

    #[test]
    fn csv_schema() {
        let rows = vec![("Q".to_string(), 0usize, 1usize, 0.5f64)];
        let csv = svd_map_csv(&rows);
        assert!(csv.starts_with("site,layer,expert,sigma_max\n"));
        assert!(csv.contains("Q,0,1,0.5"));
    }
}
