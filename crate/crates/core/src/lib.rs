//! Step-wise assessment of procedural videos: a multi-stage temporal
//! segmentation network with linear attention, a key action scorer over the
//! segmented steps, the losses and metrics used to train and evaluate them,
//! a synthetic data generator, and a training/evaluation harness.

pub mod attention;
pub mod checkpoint;
pub mod datamodel;
pub mod error;
pub mod featureio;

pub mod harness;
pub mod kas;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod segnet;
pub mod synthgen;
pub mod tensor;

pub use datamodel::{
    AttentionMode, ClassId, FeatureSequence, FrameLabelSequence, LabelTaxonomy, ModelConfig, StepAttribute, VideoRecord,
};
pub use error::{Error, Result};
pub use model::{BaselineModel, ScorerKind, StepScoreModel, TrainedModel};
pub use tensor::Matrix;
