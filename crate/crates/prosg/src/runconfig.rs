//! Flat `key = value` run configuration.
//!
//! One line per setting, `#` comments, every key typed and validated,
//! unknown or duplicate keys rejected. All tunables that shape a run
//! live here so a config file plus a seed fully determines the run.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, BYTE_VOCAB};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub n_layers: usize,
    pub d_model: usize,
    pub rank: usize,
    pub stack_depth: usize,
    pub ffn_mult: usize,
    // training
    pub batch_size: usize,
    pub steps: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    // data / runtime
    pub context_cap: usize,
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_layers: 4,
            d_model: 128,
            rank: 2,
            stack_depth: 2,
            ffn_mult: 4,
            batch_size: 8,
            steps: 1000,
            lr_phase1: 3e-4,
            lr_phase2: 1e-3,
            warmup_steps: 100,
            clip_norm: 1.0,
            seed: 0,
            context_cap: 512,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            vocab: BYTE_VOCAB,
            ffn_mult: self.ffn_mult,
            rank: self.rank,
            stack_depth: self.stack_depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        for (name, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("clip_norm must be finite and > 0".into()));
        }
        if self.context_cap < 8 {
            return Err(Error::Config("context_cap must be >= 8".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    ln + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", ln + 1)));
            }
            seen.push(key.to_string());
            let badval = |detail: &str| {
                Error::Config(format!("line {}: key {key}: {detail}", ln + 1))
            };
            let as_usize =
                |v: &str| v.parse::<usize>().map_err(|e| badval(&e.to_string()));
            let as_f64 = |v: &str| v.parse::<f64>().map_err(|e| badval(&e.to_string()));
            match key {
                "n_layers" => cfg.n_layers = as_usize(value)?,
                "d_model" => cfg.d_model = as_usize(value)?,
                "rank" => cfg.rank = as_usize(value)?,
                "stack_depth" => cfg.stack_depth = as_usize(value)?,
                "ffn_mult" => cfg.ffn_mult = as_usize(value)?,
                "batch_size" => cfg.batch_size = as_usize(value)?,
                "steps" => cfg.steps = as_usize(value)?,
                "lr_phase1" => cfg.lr_phase1 = as_f64(value)?,
                "lr_phase2" => cfg.lr_phase2 = as_f64(value)?,
                "warmup_steps" => cfg.warmup_steps = as_usize(value)?,
                "clip_norm" => cfg.clip_norm = as_f64(value)?,
                "seed" => {
                    cfg.seed = value.parse::<u64>().map_err(|e| badval(&e.to_string()))?
                }
                "context_cap" => cfg.context_cap = as_usize(value)?,
                "precision" => {
                    cfg.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        other => return Err(badval(&format!("unknown precision {other:?}"))),
                    }
                }
                other => {
                    return Err(Error::Config(format!("line {}: unknown key {other}", ln + 1)));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_defaults() {
        let cfg = RunConfig::parse("d_model = 32\nseed = 7 # comment\n\nrank=1\n").unwrap();
        assert_eq!(cfg.d_model, 32);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.rank, 1);
        assert_eq!(cfg.n_layers, RunConfig::default().n_layers);
    }

    #[test]
    fn rejects_unknown_duplicate_and_badly_typed() {
        assert!(matches!(
            RunConfig::parse("nope = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("d_model = fast"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("rank = 9"),
            Err(Error::Config(_))
        ));
    }
}
