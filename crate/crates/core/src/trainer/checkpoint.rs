//! Checkpoint directory: `manifest.json` plus one tensor blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::Tensor;
use crate::synthdata::{PrimitiveVocab, Splits};

use super::config::TrainConfig;
use super::model::Model;

const CHECKPOINT_FORMAT: &str = "czsl-checkpoint-v1";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    /// Epoch the parameters come from; 0 is the initialization.
    pub epoch: usize,
    pub val_hm: f64,
    pub vocab: PrimitiveVocab,
    pub splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: TrainConfig,
    epoch: usize,
    val_hm: f64,
    vocab: PrimitiveVocab,
    splits: Splits,
    backbone_stages: usize,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut params = Vec::new();
        for (name, t) in self.model.named_params() {
            let file = format!("{name}.ppt");
            t.save(dir.join(&file))?;
            params.push(ParamEntry { name, file, shape: t.shape().to_vec() });
        }
        let m = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            val_hm: self.val_hm,
            vocab: self.vocab.clone(),
            splits: self.splits.clone(),
            backbone_stages: self.model.backbone.stages.len(),
            params,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {:?}", m.format)));
        }
        let tensors = m
            .params
            .iter()
            .map(|p| {
                let t = Tensor::load(dir.join(&p.file))?;
                if t.shape() != p.shape.as_slice() {
                    return Err(Error::Format(format!(
                        "{}: shape {:?}, manifest says {:?}",
                        p.name,
                        t.shape(),
                        p.shape
                    )));
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            model: Model::from_params(tensors, m.backbone_stages)?,
            config: m.config,
            epoch: m.epoch,
            val_hm: m.val_hm,
            vocab: m.vocab,
            splits: m.splits,
        })
    }
}
