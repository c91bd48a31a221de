//! Trainable models: the segmentation network joined with the key action
//! scorer, and the whole-video regression baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameLabelSequence, ModelConfig};
use crate::error::{Error, Result};
use crate::kas::{assess_backward, assess_with_selection, select_step_segments, KasParams, StepAssessment, WholeVideoMlp};
use crate::losses::{segmentation_loss, LossConfig};
use crate::nn::{join, Params};
use crate::segnet::{network_backward, network_forward_traced, output_from_trace, SegNet, SegmentationOutput};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    /// Segment, then score each step with the key action scorer.
    KeyAction,
    /// Regress the score from the average-pooled video.
    WholeVideo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepScoreModel {
    pub config: ModelConfig,
    pub segnet: SegNet,
    pub kas: KasParams,
}

/// Loss values and gradients for one video.
#[derive(Debug, Clone)]
pub struct StepGradients<M> {
    pub seg_loss: f64,
    pub mse_loss: f64,
    pub total: f64,
    pub predicted_score: f64,
    pub grads: M,
}

impl StepScoreModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let segnet = SegNet::with_rng(config, &mut rng);
        let kas = KasParams::new(&mut rng, config.hidden_dim, config.sigmoid_init);
        Ok(Self {
            config: config.clone(),
            segnet,
            kas,
        })
    }

    /// Segment and score one video; selection uses the predicted labels.
    pub fn predict(&self, features: &Matrix) -> Result<(SegmentationOutput, StepAssessment)> {
        let trace = network_forward_traced(features, &self.segnet, self.config.attention_mode)?;
        let out = output_from_trace(&trace);
        let selection = select_step_segments(&out.predicted_labels);
        let assessment = assess_with_selection(&out.final_feature, &selection, &self.kas)?;
        Ok((out, assessment))
    }

    /// Joint loss and gradients. With `teacher_forcing`, segments are
    /// selected from `labels` instead of the prediction.
    pub fn gradients(
        &self,
        features: &Matrix,
        labels: &FrameLabelSequence,
        gt_score: f64,
        loss: &LossConfig,
        teacher_forcing: bool,
    ) -> Result<StepGradients<StepScoreModel>> {
        let trace = network_forward_traced(features, &self.segnet, self.config.attention_mode)?;
        let logits = trace.stage_logits();
        let seg = segmentation_loss(&logits, labels, loss)?;
        let selection = if teacher_forcing {
            select_step_segments(labels)
        } else {
            select_step_segments(&output_from_trace(&trace).predicted_labels)
        };
        let feature = trace.final_feature();
        let assessment = assess_with_selection(feature, &selection, &self.kas)?;
        let diff = assessment.total - gt_score;
        let mse_loss = diff * diff;

        let mut grads = self.zeros_like();
        let d_feature = assess_backward(feature, &selection, &self.kas, 2.0 * diff, &mut grads.kas)?;
        network_backward(&self.segnet, &trace, &seg.grads, Some(&d_feature), &mut grads.segnet);
        if !self.config.learnable_sigmoid {
            freeze_steepness(&mut grads.kas);
        }
        Ok(StepGradients {
            seg_loss: seg.value,
            mse_loss,
            total: seg.value + mse_loss,
            predicted_score: assessment.total,
            grads,
        })
    }
}

fn freeze_steepness(grads: &mut KasParams) {
    grads.visit_mut("", &mut |name, _, v| {
        if name.ends_with("steepness_raw") {
            v.fill(0.0);
        }
    });
}

impl Params for StepScoreModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.segnet.visit(&join(prefix, "segnet"), f);
        self.kas.visit(&join(prefix, "kas"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.segnet.visit_mut(&join(prefix, "segnet"), f);
        self.kas.visit_mut(&join(prefix, "kas"), f);
    }
}

/// Whole-video regression baseline; hidden width is `config.hidden_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub config: ModelConfig,
    pub mlp: WholeVideoMlp,
}

impl BaselineModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config: config.clone(),
            mlp: WholeVideoMlp::new(&mut rng, config.input_dim(), config.hidden_dim),
        })
    }

    pub fn predict(&self, features: &Matrix) -> Result<f64> {
        if features.cols() != self.mlp.hidden.input_dim() {
            return Err(Error::shape("baseline input", self.mlp.hidden.input_dim(), features.cols()));
        }
        Ok(self.mlp.forward(features))
    }

    pub fn gradients(&self, features: &Matrix, gt_score: f64) -> Result<StepGradients<BaselineModel>> {
        let predicted = self.predict(features)?;
        let diff = predicted - gt_score;
        let mut grads = self.zeros_like();
        self.mlp.backward(features, 2.0 * diff, &mut grads.mlp);
        Ok(StepGradients {
            seg_loss: 0.0,
            mse_loss: diff * diff,
            total: diff * diff,
            predicted_score: predicted,
            grads,
        })
    }
}

impl Params for BaselineModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.mlp.visit(&join(prefix, "baseline"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.mlp.visit_mut(&join(prefix, "baseline"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    KeyAction(StepScoreModel),
    WholeVideo(BaselineModel),
}

impl TrainedModel {
    pub fn new(kind: ScorerKind, config: &ModelConfig) -> Result<Self> {
        Ok(match kind {
            ScorerKind::KeyAction => TrainedModel::KeyAction(StepScoreModel::new(config)?),
            ScorerKind::WholeVideo => TrainedModel::WholeVideo(BaselineModel::new(config)?),
        })
    }

    pub fn kind(&self) -> ScorerKind {
        match self {
            TrainedModel::KeyAction(_) => ScorerKind::KeyAction,
            TrainedModel::WholeVideo(_) => ScorerKind::WholeVideo,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            TrainedModel::KeyAction(m) => &m.config,
            TrainedModel::WholeVideo(m) => &m.config,
        }
    }

    pub fn params(&self) -> &dyn ParamsDyn {
        match self {
            TrainedModel::KeyAction(m) => m,
            TrainedModel::WholeVideo(m) => m,
        }
    }

    pub fn params_mut(&mut self) -> &mut dyn ParamsDyn {
        match self {
            TrainedModel::KeyAction(m) => m,
            TrainedModel::WholeVideo(m) => m,
        }
    }
}

/// Object-safe view of [`Params`] for checkpoint code.
pub trait ParamsDyn {
    fn visit_dyn(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut_dyn(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

impl<P: Params> ParamsDyn for P {
    fn visit_dyn(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visit("", f)
    }

    fn visit_mut_dyn(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.visit_mut("", f)
    }
}
