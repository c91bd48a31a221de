use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_model, write_evaluation, EvaluationReport};
use super::{create_dir, load_prepared, plots, write_json, PreparedVideo, RunConfig};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{StepGradients, TrainedModel};
use crate::nn::Params;
use crate::optim::Adam;

/// Stream constant mixed into the seed for the epoch shuffle.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Present for the key action scorer.
    pub metrics: Option<MetricsReport>,
    pub spearman: f64,
    pub r_l2_x100: f64,
}

impl From<&EvaluationReport> for EvalSummary {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            metrics: r.metrics.clone(),
            spearman: r.spearman,
            r_l2_x100: r.r_l2_x100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Means over the epoch's videos.
    pub total_loss: f64,
    pub seg_loss: f64,
    pub mse_loss: f64,
    pub teacher_forcing: bool,
    pub eval: Option<EvalSummary>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept as best (0 means the initial ones).
    pub best_epoch: usize,
    pub best_spearman: Option<f64>,
}

/// In-memory result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: TrainedModel,
    pub last: TrainedModel,
    pub log: RunLog,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: RunLog,
    pub best: TrainedModel,
    /// Selected model evaluated on `paths.test_manifest`, when set.
    pub test_report: Option<EvaluationReport>,
}

/// Train from manifests and write checkpoints, the run log, plots and (with
/// a test split) the held-out evaluation under `paths.output_dir`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = config.model_config();
    let train_set = load_prepared(&config.paths.train_manifest, &model_config)?;
    let eval_set = match &config.paths.eval_manifest {
        Some(p) => Some(load_prepared(p, &model_config)?),
        None => None,
    };
    let FitResult { best, last, log } = fit(config, &train_set, eval_set.as_deref().unwrap_or(&train_set))?;

    let out = &config.paths.output_dir;
    create_dir(out)?;
    let best_checkpoint = out.join("best.ckpt.json");
    let last_checkpoint = out.join("last.ckpt.json");
    save_checkpoint(&best, &best_checkpoint)?;
    save_checkpoint(&last, &last_checkpoint)?;
    write_json(&out.join("run_log.json"), &log)?;
    std::fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| Error::io(out.join("config.toml"), e))?;

    let test_report = match &config.paths.test_manifest {
        Some(p) => {
            let test_set = load_prepared(p, &model_config)?;
            let report = evaluate_model(&best, &test_set)?;
            let dir = out.join("test");
            write_evaluation(&report, &dir)?;
            plots::emit_plots(&log, Some(&report), &dir.join("plots"))?;
            Some(report)
        }
        None => {
            plots::emit_plots(&log, None, &out.join("plots"))?;
            None
        }
    };

    Ok(TrainOutcome {
        best_checkpoint,
        last_checkpoint,
        log,
        best,
        test_report,
    })
}

/// The training loop proper: one video per optimizer step, seeded shuffle
/// per epoch, best parameters kept by eval-split Spearman (later epochs win
/// ties).
pub fn fit(config: &RunConfig, train_set: &[PreparedVideo], eval_set: &[PreparedVideo]) -> Result<FitResult> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = TrainedModel::new(config.training.scorer, &config.model_config())?;
    let num_params = match &model {
        TrainedModel::KeyAction(m) => m.num_params(),
        TrainedModel::WholeVideo(m) => m.num_params(),
    };
    let mut adam = Adam::new(config.optimizer.clone(), num_params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut log = RunLog::default();
    let mut best = model.clone();
    let epochs = config.training.epochs;
    for epoch in 1..=epochs {
        let started = Instant::now();
        let teacher_forcing = epoch <= config.training.teacher_forcing_epochs;
        order.shuffle(&mut rng);
        let (mut total, mut seg, mut mse) = (0.0, 0.0, 0.0);
        for &i in &order {
            let video = &train_set[i];
            let id = &video.record.id;
            match &mut model {
                TrainedModel::KeyAction(m) => {
                    let g = m
                        .gradients(&video.features, &video.record.labels, video.record.gt_score, &config.loss, teacher_forcing)
                        .map_err(|e| e.in_video(id))?;
                    check_finite(epoch, id, &g)?;
                    adam.step(m, &g.grads);
                    (total, seg, mse) = (total + g.total, seg + g.seg_loss, mse + g.mse_loss);
                }
                TrainedModel::WholeVideo(m) => {
                    let g = m.gradients(&video.features, video.record.gt_score).map_err(|e| e.in_video(id))?;
                    check_finite(epoch, id, &g)?;
                    adam.step(m, &g.grads);
                    (total, seg, mse) = (total + g.total, seg + g.seg_loss, mse + g.mse_loss);
                }
            }
        }
        let n = train_set.len() as f64;
        let due = config.training.eval_every > 0 && epoch % config.training.eval_every == 0;
        let eval = if (due || epoch == epochs) && !eval_set.is_empty() {
            let report = evaluate_model(&model, eval_set)?;
            if log.best_spearman.is_none_or(|b| report.spearman >= b) {
                log.best_spearman = Some(report.spearman);
                log.best_epoch = epoch;
                best = model.clone();
            }
            Some(EvalSummary::from(&report))
        } else {
            None
        };
        log.epochs.push(EpochLog {
            epoch,
            total_loss: total / n,
            seg_loss: seg / n,
            mse_loss: mse / n,
            teacher_forcing,
            eval,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    if log.best_spearman.is_none() && epochs > 0 {
        best = model.clone();
        log.best_epoch = epochs;
    }
    Ok(FitResult { best, last: model, log })
}

fn check_finite<M: Params>(epoch: usize, video: &str, g: &StepGradients<M>) -> Result<()> {
    let grads_finite = g.grads.flatten().iter().all(|v| v.is_finite());
    if g.total.is_finite() && grads_finite {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            video: video.to_owned(),
            seg: g.seg_loss,
            mse: g.mse_loss,
        })
    }
}
