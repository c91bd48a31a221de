//! Versioned JSON checkpoints: the model config plus every named tensor.
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{ScorerKind, TrainedModel};

pub const FORMAT: &str = "stepscore-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ScorerKind,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel) -> Self {
        let mut tensors = Vec::new();
        model.params().visit_dyn(&mut |name, shape, data| {
            tensors.push(NamedTensor {
                name: name.to_owned(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        Self {
            format: FORMAT.to_owned(),
            version: VERSION,
            kind: model.kind(),
            config: model.config().clone(),
            tensors,
        }
    }

    /// Rebuild the model, checking every tensor against the config's layout.
    pub fn into_model(self) -> Result<TrainedModel> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = TrainedModel::new(self.kind, &self.config)?;
        let mut tensors = self.tensors.into_iter();
        let mut failure: Option<Error> = None;
        model.params_mut().visit_mut_dyn(&mut |name, shape, values| {
            if failure.is_some() {
                return;
            }
            match tensors.next() {
                Some(t) if t.name == name && t.shape == shape && t.data.len() == values.len() => {
                    values.copy_from_slice(&t.data);
                }
                Some(t) if t.name == name => {
                    failure = Some(Error::IncompatibleCheckpoint {
                        name: name.to_owned(),
                        expected: shape.to_vec(),
                        found: t.shape,
                    });
                }
                Some(t) => {
                    failure = Some(Error::IncompatibleCheckpoint {
                        name: format!("{name} (found `{}`)", t.name),
                        expected: shape.to_vec(),
                        found: t.shape,
                    });
                }
                None => {
                    failure = Some(Error::IncompatibleCheckpoint {
                        name: name.to_owned(),
                        expected: shape.to_vec(),
                        found: Vec::new(),
                    });
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = tensors.next() {
            return Err(Error::IncompatibleCheckpoint {
                name: extra.name,
                expected: Vec::new(),
                found: extra.shape,
            });
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.into_model()
}
