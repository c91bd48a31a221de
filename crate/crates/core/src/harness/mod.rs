//! Run configuration, training loop, evaluation, ablations and plots.

mod ablate;
mod evaluate;
mod plots;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{load_manifest, ModelConfig, VideoRecord};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ScorerKind;
use crate::optim::AdamConfig;
use crate::tensor::Matrix;

pub use ablate::{ablate, AblationMode, AblationReport, AblationRow};
pub use evaluate::{
    evaluate, evaluate_model, read_predictions, score_predictions, write_evaluation, EvaluationReport, PredictionRecord,
    VideoAssessment,
};
pub use plots::{emit_plots, loss_curve_svg, timeline_svg};
pub use train::{fit, train, EpochLog, EvalSummary, FitResult, RunLog, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Epochs during which step segments are routed by ground-truth labels.
    pub teacher_forcing_epochs: usize,
    /// Evaluate every this many epochs (0 disables periodic evaluation);
    /// the final epoch is always evaluated.
    pub eval_every: usize,
    pub scorer: ScorerKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            teacher_forcing_epochs: 10,
            eval_every: 1,
            scorer: ScorerKind::KeyAction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: PathBuf,
    /// Split used for checkpoint selection; the training split when unset.
    pub eval_manifest: Option<PathBuf>,
    /// Held-out split evaluated with the selected checkpoint after training.
    pub test_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_manifest: PathBuf::from("train.json"),
            eval_manifest: None,
            test_manifest: None,
            output_dir: PathBuf::from("run"),
        }
    }
}

/// Everything a training run needs. `seed` overrides `model.seed` and also
/// drives the per-epoch shuffle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub training: TrainingConfig,
    pub paths: PathsConfig,
}


impl RunConfig {
    /// Parse TOML; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| Error::ConfigParse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.resolve_against(base);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_manifest);
        fix(&mut self.output_dir);
        if let Some(p) = self.eval_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.test_manifest.as_mut() {
            fix(p);
        }
    }
}

/// A record with its features already in the model's input layout.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub record: VideoRecord,
    pub features: Matrix,
}

pub fn prepare_videos(records: Vec<VideoRecord>, config: &ModelConfig) -> Result<Vec<PreparedVideo>> {
    records
        .into_iter()
        .map(|record| {
            let seq = record.load_features()?;
            let features = config.prepare_features(&seq).map_err(|e| e.in_video(&record.id))?;
            Ok(PreparedVideo { record, features })
        })
        .collect()
}

pub fn load_prepared(manifest: &Path, config: &ModelConfig) -> Result<Vec<PreparedVideo>> {
    prepare_videos(load_manifest(manifest)?, config)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
