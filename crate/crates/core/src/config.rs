//! Run configuration: a flat `key = value` file (with `#` comments) that
//! covers the backbone, training, and paths, plus an echo format so every
//! run directory records exactly what produced it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{AdapterMode, BackboneConfig};
use crate::error::{Error, Result};
use crate::moe::RoutingGranularity;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Validation(format!("config line {}: expected 'key = value'", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(&parse_kv(&text)?)?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides (CLI flags use the same keys).
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in pairs {
            self.apply(key, value)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Validation(format!("config key '{key}': {e}")))
        }
        match key {
            "layers" => self.backbone.layers = num(key, value)?,
            "model_dim" => self.backbone.model_dim = num(key, value)?,
            "heads" => self.backbone.heads = num(key, value)?,
            "ffn_dim" => self.backbone.ffn_dim = num(key, value)?,
            "input_dim" => self.backbone.input_dim = num(key, value)?,
            "adapter_mode" => self.backbone.adapter_mode = value.parse()?,
            "lora_rank" => self.backbone.lora_rank = num(key, value)?,
            "num_experts" => self.backbone.num_experts = num(key, value)?,
            "top_k" => self.backbone.top_k = num(key, value)?,
            "lora_scale" => self.backbone.lora_scale = num(key, value)?,
            "routing" => {
                self.backbone.routing = match value {
                    "token" => RoutingGranularity::Token,
                    "utterance" => RoutingGranularity::Utterance,
                    other => {
                        return Err(Error::Validation(format!(
                            "config key 'routing': unknown value '{other}'"
                        )))
                    }
                }
            }
            "renormalize_topk" => self.backbone.renormalize_topk = num(key, value)?,
            "head_hidden" => self.backbone.head_hidden = num(key, value)?,
            "lr_min" => self.train.lr_min = num(key, value)?,
            "lr_max" => self.train.lr_max = num(key, value)?,
            "cycle_epochs" => self.train.cycle_epochs = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "max_epochs" => self.train.max_epochs = num(key, value)?,
            "patience" => self.train.patience = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Validation(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()
    }

    /// Complete key=value rendering; parsing it back reproduces the config.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let b = &self.backbone;
        let t = &self.train;
        let _ = writeln!(out, "layers = {}", b.layers);
        let _ = writeln!(out, "model_dim = {}", b.model_dim);
        let _ = writeln!(out, "heads = {}", b.heads);
        let _ = writeln!(out, "ffn_dim = {}", b.ffn_dim);
        let _ = writeln!(out, "input_dim = {}", b.input_dim);
        let mode = match b.adapter_mode {
            AdapterMode::None => "none",
            AdapterMode::SingleLora => "single_lora",
            AdapterMode::MoeLora => "moe_lora",
        };
        let _ = writeln!(out, "adapter_mode = {mode}");
        let _ = writeln!(out, "lora_rank = {}", b.lora_rank);
        let _ = writeln!(out, "num_experts = {}", b.num_experts);
        let _ = writeln!(out, "top_k = {}", b.top_k);
        let _ = writeln!(out, "lora_scale = {}", b.lora_scale);
        let routing = match b.routing {
            RoutingGranularity::Token => "token",
            RoutingGranularity::Utterance => "utterance",
        };
        let _ = writeln!(out, "routing = {routing}");
        let _ = writeln!(out, "renormalize_topk = {}", b.renormalize_topk);
        let _ = writeln!(out, "head_hidden = {}", b.head_hidden);
        let _ = writeln!(out, "lr_min = {}", t.lr_min);
        let _ = writeln!(out, "lr_max = {}", t.lr_max);
        let _ = writeln!(out, "cycle_epochs = {}", t.cycle_epochs);
        let _ = writeln!(out, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "max_epochs = {}", t.max_epochs);
        let _ = writeln!(out, "patience = {}", t.patience);
        let _ = writeln!(out, "seed = {}", t.seed);
        if let Some(d) = &self.data_dir {
            let _ = writeln!(out, "data_dir = {}", d.display());
        }
        if let Some(d) = &self.out_dir {
            let _ = writeln!(out, "out_dir = {}", d.display());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let text = "\n# a comment\nlayers = 2  # trailing comment\nmodel_dim=16\n\nseed = 7\n";
        let pairs = parse_kv(text).unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(&pairs).unwrap();
        assert_eq!(cfg.backbone.layers, 2);
        assert_eq!(cfg.backbone.model_dim, 16);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("no_such_key", "1").is_err());
        assert!(parse_kv("just words\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply("adapter_mode", "single_lora").unwrap();
        cfg.apply("lora_rank", "4").unwrap();
        cfg.apply("seed", "99").unwrap();
        cfg.apply("data_dir", "/tmp/ds").unwrap();
        let echoed = cfg.echo();
        let mut back = RunConfig::default();
        back.apply_pairs(&parse_kv(&echoed).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
