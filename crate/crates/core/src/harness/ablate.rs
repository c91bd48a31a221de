use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_model, EvaluationReport};
use super::train::train;
use super::{create_dir, load_prepared, write_json, RunConfig};
use crate::datamodel::AttentionMode;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::ScorerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Appearance + motion features vs. appearance only.
    MotionFeatures,
    /// Linear attention vs. the explicit quadratic kernel.
    Attention,
    /// Key action scorer vs. whole-video regression.
    StepVsWhole,
    /// Learnable vs. fixed sigmoid steepness.
    Sigmoid,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::MotionFeatures, Self::Attention, Self::StepVsWhole, Self::Sigmoid];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MotionFeatures => "motion-features",
            Self::Attention => "attention",
            Self::StepVsWhole => "step-vs-whole",
            Self::Sigmoid => "sigmoid",
        }
    }

    /// The two paired variants, reference first.
    fn variants(self, base: &RunConfig) -> [(&'static str, RunConfig); 2] {
        let mut a = base.clone();
        let mut b = base.clone();
        match self {
            Self::MotionFeatures => {
                a.model.use_motion_features = true;
                b.model.use_motion_features = false;
                [("with-motion", a), ("appearance-only", b)]
            }
            Self::Attention => {
                a.model.attention_mode = AttentionMode::Linear;
                b.model.attention_mode = AttentionMode::QuadraticReference;
                [("linear", a), ("quadratic", b)]
            }
            Self::StepVsWhole => {
                a.training.scorer = ScorerKind::KeyAction;
                b.training.scorer = ScorerKind::WholeVideo;
                [("key-action", a), ("whole-video", b)]
            }
            Self::Sigmoid => {
                a.model.learnable_sigmoid = true;
                b.model.learnable_sigmoid = false;
                [("learnable", a), ("fixed", b)]
            }
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvaluationReport,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = format!("Variant | {} | Train s | Eval s\n", MetricsReport::table_header());
        for r in &self.rows {
            s.push_str(&format!(
                "{} | {} | {:.1} | {:.2}\n",
                r.variant,
                r.report.table_row(),
                r.train_seconds,
                r.eval_seconds
            ));
        }
        s
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Train both variants with the same seed and evaluate each selected model
/// on the test split. Results go to `<output_dir>/ablate-<mode>/`.
pub fn ablate(config: &RunConfig, mode: AblationMode) -> Result<AblationReport> {
    let test = config
        .paths
        .test_manifest
        .clone()
        .ok_or_else(|| Error::Config("ablation needs paths.test_manifest".into()))?;
    let dir = config.paths.output_dir.join(format!("ablate-{mode}"));
    create_dir(&dir)?;
    let mut rows = Vec::with_capacity(2);
    for (name, mut variant) in mode.variants(config) {
        variant.paths.output_dir = dir.join(name);
        variant.paths.test_manifest = None;
        let started = Instant::now();
        let outcome = train(&variant)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let test_set = load_prepared(&test, &variant.model_config())?;
        let started = Instant::now();
        let report = evaluate_model(&outcome.best, &test_set)?;
        let eval_seconds = started.elapsed().as_secs_f64();
        rows.push(AblationRow {
            variant: name.to_owned(),
            report,
            train_seconds,
            eval_seconds,
        });
    }
    let report = AblationReport { mode, rows };
    write_json(&dir.join("comparison.json"), &report)?;
    std::fs::write(dir.join("comparison.txt"), report.table()).map_err(|e| Error::io(dir.join("comparison.txt"), e))?;
    Ok(report)
}
