use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{create_dir, load_prepared, write_json, PreparedVideo};
use crate::checkpoint::load_checkpoint;
use crate::datamodel::{read_manifest_entries, FrameLabelSequence, NUM_STEPS};
use crate::error::{Error, Result};
use crate::metrics::{relative_l2, spearman, CorpusMetrics, MetricsReport};
use crate::model::{ScorerKind, TrainedModel};

/// Per-video output. The segmentation fields are absent for the
/// whole-video baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAssessment {
    pub id: String,
    pub gt_score: f64,
    pub predicted_score: f64,
    pub gt_labels: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_labels: Option<Vec<[usize; 2]>>,
    /// Selected `[start, end)` per step, `null` when the step is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<Option<[usize; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_scores: Option<Vec<Option<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_scores: Option<[f64; NUM_STEPS]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub kind: ScorerKind,
    /// Full segmentation and score metrics (key action scorer only).
    pub metrics: Option<MetricsReport>,
    pub spearman: f64,
    pub r_l2_x100: f64,
    pub videos: Vec<VideoAssessment>,
}

impl EvaluationReport {
    pub fn table_row(&self) -> String {
        match &self.metrics {
            Some(m) => m.table_row(),
            None => format!("- | - | - | {:.3} | {:.2}", self.spearman, self.r_l2_x100),
        }
    }
}

/// Evaluate without touching the model's parameters.
pub fn evaluate_model(model: &TrainedModel, videos: &[PreparedVideo]) -> Result<EvaluationReport> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut assessments = Vec::with_capacity(videos.len());
    match model {
        TrainedModel::KeyAction(m) => {
            let mut corpus = CorpusMetrics::new();
            for v in videos {
                let id = &v.record.id;
                let (seg, a) = m.predict(&v.features).map_err(|e| e.in_video(id))?;
                corpus
                    .add_video(&seg.predicted_labels, &v.record.labels, a.total, v.record.gt_score)
                    .map_err(|e| e.in_video(id))?;
                assessments.push(VideoAssessment {
                    id: id.clone(),
                    gt_score: v.record.gt_score,
                    predicted_score: a.total,
                    gt_labels: v.record.labels.to_pairs(),
                    predicted_labels: Some(seg.predicted_labels.to_pairs()),
                    spans: Some(a.selection.spans.iter().map(|s| s.map(|(b, e)| [b, e])).collect()),
                    branch_scores: Some(a.branch_scores.clone()),
                    step_scores: Some(a.step_scores),
                });
            }
            let report = corpus.report()?;
            Ok(EvaluationReport {
                kind: ScorerKind::KeyAction,
                spearman: report.spearman,
                r_l2_x100: report.r_l2_x100,
                metrics: Some(report),
                videos: assessments,
            })
        }
        TrainedModel::WholeVideo(m) => {
            for v in videos {
                let score = m.predict(&v.features).map_err(|e| e.in_video(&v.record.id))?;
                assessments.push(VideoAssessment {
                    id: v.record.id.clone(),
                    gt_score: v.record.gt_score,
                    predicted_score: score,
                    gt_labels: v.record.labels.to_pairs(),
                    predicted_labels: None,
                    spans: None,
                    branch_scores: None,
                    step_scores: None,
                });
            }
            let (rho, rl2) = score_metrics(&assessments)?;
            Ok(EvaluationReport {
                kind: ScorerKind::WholeVideo,
                metrics: None,
                spearman: rho,
                r_l2_x100: rl2,
                videos: assessments,
            })
        }
    }
}

/// Same conventions as [`CorpusMetrics::report`]: observed ground-truth
/// range, undefined correlation reported as 0.
fn score_metrics(videos: &[VideoAssessment]) -> Result<(f64, f64)> {
    let pred: Vec<f64> = videos.iter().map(|v| v.predicted_score).collect();
    let gt: Vec<f64> = videos.iter().map(|v| v.gt_score).collect();
    let rho = match spearman(&pred, &gt) {
        Ok(r) => r,
        Err(Error::UndefinedCorrelation(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let lo = gt.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((rho, 100.0 * relative_l2(&pred, &gt, lo, hi)?))
}

pub fn evaluate(checkpoint: &Path, manifest: &Path) -> Result<EvaluationReport> {
    let model = load_checkpoint(checkpoint)?;
    let videos = load_prepared(manifest, model.config())?;
    evaluate_model(&model, &videos)
}

/// Writes `metrics.json`, `assessments.json` and `metrics.txt` into `dir`.
pub fn write_evaluation(report: &EvaluationReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        kind: ScorerKind,
        metrics: &'a Option<MetricsReport>,
        spearman: f64,
        r_l2_x100: f64,
        videos: usize,
    }
    write_json(
        &dir.join("metrics.json"),
        &Summary {
            kind: report.kind,
            metrics: &report.metrics,
            spearman: report.spearman,
            r_l2_x100: report.r_l2_x100,
            videos: report.videos.len(),
        },
    )?;
    write_json(&dir.join("assessments.json"), &report.videos)?;
    let table = format!("{}\n{}\n", MetricsReport::table_header(), report.table_row());
    std::fs::write(dir.join("metrics.txt"), table).map_err(|e| Error::io(dir.join("metrics.txt"), e))
}

/// One line of a prediction file: `{"id", "labels": [[class, len], ...], "score"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub labels: FrameLabelSequence,
    pub score: f64,
}

/// Read a JSON array of prediction records, or a dataset manifest (its
/// labels and `gt_score` are used; feature files are not opened).
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(records) = serde_json::from_str::<Vec<PredictionRecord>>(&text) {
        return Ok(records);
    }
    read_manifest_entries(path)?
        .into_iter()
        .map(|e| {
            let labels = FrameLabelSequence::from_pairs(&e.labels).map_err(|err| err.in_video(&e.id))?;
            Ok(PredictionRecord {
                id: e.id,
                labels,
                score: e.gt_score,
            })
        })
        .collect()
}

/// Offline scoring: every ground-truth id needs a prediction.
pub fn score_predictions(pred: &[PredictionRecord], gt: &[PredictionRecord]) -> Result<MetricsReport> {
    let by_id: BTreeMap<&str, &PredictionRecord> = pred.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut corpus = CorpusMetrics::new();
    for g in gt {
        let p = by_id.get(g.id.as_str()).ok_or_else(|| Error::MissingPrediction(g.id.clone()))?;
        corpus
            .add_video(&p.labels, &g.labels, p.score, g.score)
            .map_err(|e| e.in_video(&g.id))?;
    }
    corpus.report()
}
