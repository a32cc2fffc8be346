//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `v ← μv + g; θ ← θ − ηv`.
    Sgd,
    /// `m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²; θ ← θ − η m̂ / (√v̂ + ε)` with bias-corrected `m̂, v̂`.
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(contract_err!("unknown optimizer {s:?} (sgd|adam)")),
        }
    }
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub lambda_h: f64,
    pub hsic_normalize: bool,
    pub clst_weight: f64,
    pub sep_weight: f64,
    pub ce_attr_weight: f64,
    pub ce_obj_weight: f64,
    pub ce_comp_weight: f64,
    /// Prototype and feature width `C`.
    pub proto_dim: usize,
    pub graph_hidden: usize,
    pub grid_steps: usize,
    pub seed: u64,
    pub finetune: bool,
    pub independence: bool,
    /// Learned `C×C` map applied to the pooled feature before composition scoring.
    pub projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data"),
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 5e-5,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            lambda_h: 10.0,
            hsic_normalize: false,
            clst_weight: 0.01,
            sep_weight: 0.01,
            ce_attr_weight: 1.0,
            ce_obj_weight: 1.0,
            ce_comp_weight: 1.0,
            proto_dim: 64,
            graph_hidden: 128,
            grid_steps: 201,
            seed: 0,
            finetune: true,
            independence: true,
            projection: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| contract_err!("bad value {value:?} for config key {key}"))
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "lambda_h" => self.lambda_h = parse(key, v)?,
            "hsic_normalize" => self.hsic_normalize = parse(key, v)?,
            "clst_weight" => self.clst_weight = parse(key, v)?,
            "sep_weight" => self.sep_weight = parse(key, v)?,
            "ce_attr_weight" => self.ce_attr_weight = parse(key, v)?,
            "ce_obj_weight" => self.ce_obj_weight = parse(key, v)?,
            "ce_comp_weight" => self.ce_comp_weight = parse(key, v)?,
            "proto_dim" => self.proto_dim = parse(key, v)?,
            "graph_hidden" => self.graph_hidden = parse(key, v)?,
            "grid_steps" => self.grid_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "finetune" => self.finetune = parse(key, v)?,
            "independence" => self.independence = parse(key, v)?,
            "projection" => self.projection = parse(key, v)?,
            other => return Err(contract_err!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| contract_err!("override must be key=value, got {kv:?}"))?;
        self.set(k, v)
    }

    /// Parses config text over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| contract_err!("config line {}: expected key = value", n + 1))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", &self.dataset.display());
        kv("epochs", &self.epochs);
        kv("batch_size", &self.batch_size);
        kv("learning_rate", &self.learning_rate);
        kv("weight_decay", &self.weight_decay);
        kv("momentum", &self.momentum);
        kv("optimizer", &self.optimizer.name());
        kv("lambda_h", &self.lambda_h);
        kv("hsic_normalize", &self.hsic_normalize);
        kv("clst_weight", &self.clst_weight);
        kv("sep_weight", &self.sep_weight);
        kv("ce_attr_weight", &self.ce_attr_weight);
        kv("ce_obj_weight", &self.ce_obj_weight);
        kv("ce_comp_weight", &self.ce_comp_weight);
        kv("proto_dim", &self.proto_dim);
        kv("graph_hidden", &self.graph_hidden);
        kv("grid_steps", &self.grid_steps);
        kv("seed", &self.seed);
        kv("finetune", &self.finetune);
        kv("independence", &self.independence);
        kv("projection", &self.projection);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("lambda_h", self.lambda_h),
            ("clst_weight", self.clst_weight),
            ("sep_weight", self.sep_weight),
            ("ce_attr_weight", self.ce_attr_weight),
            ("ce_obj_weight", self.ce_obj_weight),
            ("ce_comp_weight", self.ce_comp_weight),
        ];
        if let Some((k, v)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(contract_err!("{k} must be a finite nonnegative number, got {v}"));
        }
        if self.batch_size == 0 || self.proto_dim == 0 || self.graph_hidden == 0 {
            return Err(contract_err!("batch_size, proto_dim and graph_hidden must be at least 1"));
        }
        Ok(())
    }

    /// Weight of the independence term after the on/off switch.
    pub fn effective_lambda(&self) -> f64 {
        if self.independence {
            self.lambda_h
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let c = TrainConfig {
            seed: 17,
            optimizer: OptimizerKind::Sgd,
            finetune: false,
            learning_rate: 0.0125,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let c = TrainConfig::parse("# run\n\nepochs = 3  # short\nlambda_h=0\n").unwrap();
        assert_eq!((c.epochs, c.lambda_h), (3, 0.0));
        let mut c = c;
        c.apply_override("batch_size=8").unwrap();
        assert_eq!(c.batch_size, 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("nope = 1").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("epochs = many").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("sep_weight = -1").is_err());
        assert!(TrainConfig::parse("optimizer = rmsprop").is_err());
    }
}
