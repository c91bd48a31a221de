//! Step segment selection and the key action scorer.
//!
//! For each step, the longest contiguous run of that step in a labelling is
//! its representative segment. The final-stage feature is average-pooled
//! over the segment and scored by independent branches (one per key
//! action), each a linear unit followed by a sigmoid with its own trainable
//! steepness. The step score is the branch mean; the video score is the sum
//! over steps, with missing steps scoring zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameLabelSequence, KEY_ACTIONS_PER_STEP, NUM_STEPS};
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, uniform, Linear, Params};
use crate::segnet::SegmentationOutput;
use crate::tensor::Matrix;

/// Half-open frame span.
pub type Span = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepSegmentSelection {
    pub spans: [Option<Span>; NUM_STEPS],
}

impl StepSegmentSelection {
    pub fn present_steps(&self) -> usize {
        self.spans.iter().filter(|s| s.is_some()).count()
    }
}

/// Longest maximal run of each step class; ties go to the earliest start.
pub fn select_step_segments(labels: &FrameLabelSequence) -> StepSegmentSelection {
    let mut spans: [Option<Span>; NUM_STEPS] = [None; NUM_STEPS];
    for (class, start, end) in labels.spans() {
        if let Some(step) = class.step_index() {
            let longer = match spans[step] {
                Some((s, e)) => end - start > e - s,
                None => true,
            };
            if longer {
                spans[step] = Some((start, end));
            }
        }
    }
    StepSegmentSelection { spans }
}

/// Mean of `feature` rows over `span`.
pub fn pool_segment(feature: &Matrix, span: Span) -> Result<Vec<f64>> {
    let (start, end) = span;
    if start >= end {
        return Err(Error::EmptySpan);
    }
    if end > feature.rows() {
        return Err(Error::shape("segment span", format!("end <= {}", feature.rows()), end));
    }
    let mut out = vec![0.0; feature.cols()];
    for r in start..end {
        for (o, v) in out.iter_mut().zip(feature.row(r)) {
            *o += v;
        }
    }
    let n = (end - start) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// `1 / (1 + exp(-steepness * x))`, evaluated without overflow.
pub fn learnable_sigmoid(x: f64, steepness: f64) -> f64 {
    let z = steepness * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One key-action branch. Steepness is stored pre-softplus so it stays positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub steepness_raw: Vec<f64>,
}

impl BranchParams {
    pub fn new(rng: &mut impl Rng, dim: usize, steepness: f64) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            weight: uniform(rng, bound, dim),
            bias: vec![0.0],
            steepness_raw: vec![softplus_inverse(steepness)],
        }
    }

    pub fn steepness(&self) -> f64 {
        softplus(self.steepness_raw[0])
    }

    fn linear(&self, x: &[f64]) -> f64 {
        self.bias[0] + self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScorerParams {
    pub branches: Vec<BranchParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KasParams {
    pub steps: Vec<StepScorerParams>,
}

impl KasParams {
    pub fn new(rng: &mut impl Rng, dim: usize, steepness: f64) -> Self {
        Self::with_branches(rng, dim, steepness, KEY_ACTIONS_PER_STEP)
    }

    pub fn with_branches(rng: &mut impl Rng, dim: usize, steepness: f64, branches: usize) -> Self {
        Self {
            steps: (0..NUM_STEPS)
                .map(|_| StepScorerParams {
                    branches: (0..branches).map(|_| BranchParams::new(rng, dim, steepness)).collect(),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.steps[0].branches[0].weight.len()
    }
}

impl Params for StepScorerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (j, b) in self.branches.iter().enumerate() {
            let p = join(prefix, &format!("branch{}", j + 1));
            f(&join(&p, "weight"), &[b.weight.len()], &b.weight);
            f(&join(&p, "bias"), &[1], &b.bias);
            f(&join(&p, "steepness_raw"), &[1], &b.steepness_raw);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (j, b) in self.branches.iter_mut().enumerate() {
            let p = join(prefix, &format!("branch{}", j + 1));
            f(&join(&p, "weight"), &[b.weight.len()], &mut b.weight);
            f(&join(&p, "bias"), &[1], &mut b.bias);
            f(&join(&p, "steepness_raw"), &[1], &mut b.steepness_raw);
        }
    }
}

impl Params for KasParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, step) in self.steps.iter().enumerate() {
            step.visit(&join(prefix, &format!("step{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, step) in self.steps.iter_mut().enumerate() {
            step.visit_mut(&join(prefix, &format!("step{}", i + 1)), f);
        }
    }
}

/// Branch scores and their mean for one pooled segment feature.
pub fn score_step(segment_feature: &[f64], params: &StepScorerParams) -> (Vec<f64>, f64) {
    let scores: Vec<f64> = params
        .branches
        .iter()
        .map(|b| learnable_sigmoid(b.linear(segment_feature), b.steepness()))
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    (scores, mean)
}

/// Accumulate gradients of `d_step * s_i` into `grad`; returns `d/d feature`.
pub fn score_step_backward(segment_feature: &[f64], params: &StepScorerParams, d_step: f64, grad: &mut StepScorerParams) -> Vec<f64> {
    let k = params.branches.len() as f64;
    let mut d_feature = vec![0.0; segment_feature.len()];
    for (b, g) in params.branches.iter().zip(grad.branches.iter_mut()) {
        let x = b.linear(segment_feature);
        let lambda = b.steepness();
        let y = learnable_sigmoid(x, lambda);
        let d_z = d_step / k * y * (1.0 - y);
        let d_x = d_z * lambda;
        // d softplus(r) / dr = sigmoid(r)
        g.steepness_raw[0] += d_z * x * learnable_sigmoid(b.steepness_raw[0], 1.0);
        g.bias[0] += d_x;
        for ((gw, df), (&w, &v)) in g.weight.iter_mut().zip(d_feature.iter_mut()).zip(b.weight.iter().zip(segment_feature)) {
            *gw += d_x * v;
            *df += d_x * w;
        }
    }
    d_feature
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAssessment {
    pub selection: StepSegmentSelection,
    /// `None` for steps without a segment.
    pub branch_scores: Vec<Option<Vec<f64>>>,
    pub step_scores: [f64; NUM_STEPS],
    pub total: f64,
}

/// Score a video from a final-stage feature and a segment selection.
pub fn assess_with_selection(feature: &Matrix, selection: &StepSegmentSelection, params: &KasParams) -> Result<StepAssessment> {
    if feature.cols() != params.dim() {
        return Err(Error::shape("scorer input width", params.dim(), feature.cols()));
    }
    let mut branch_scores = Vec::with_capacity(NUM_STEPS);
    let mut step_scores = [0.0; NUM_STEPS];
    for (i, span) in selection.spans.iter().enumerate() {
        match span {
            Some(span) => {
                let pooled = pool_segment(feature, *span)?;
                let (branches, s) = score_step(&pooled, &params.steps[i]);
                branch_scores.push(Some(branches));
                step_scores[i] = s;
            }
            None => branch_scores.push(None),
        }
    }
    Ok(StepAssessment {
        selection: *selection,
        branch_scores,
        step_scores,
        total: step_scores.iter().sum(),
    })
}

/// Select on the network's own predicted labels and score.
pub fn assess_video(seg_out: &SegmentationOutput, params: &KasParams) -> Result<StepAssessment> {
    let selection = select_step_segments(&seg_out.predicted_labels);
    assess_with_selection(&seg_out.final_feature, &selection, params)
}

/// Backward of `d_total * S` through pooling and scoring. Selection is
/// treated as fixed routing. Returns `dL/d feature` (`T x D`).
pub fn assess_backward(feature: &Matrix, selection: &StepSegmentSelection, params: &KasParams, d_total: f64, grad: &mut KasParams) -> Result<Matrix> {
    let mut d_feature = Matrix::zeros(feature.rows(), feature.cols());
    for (i, span) in selection.spans.iter().enumerate() {
        let Some((start, end)) = *span else { continue };
        let pooled = pool_segment(feature, (start, end))?;
        let d_pooled = score_step_backward(&pooled, &params.steps[i], d_total, &mut grad.steps[i]);
        let n = (end - start) as f64;
        for r in start..end {
            for (d, g) in d_feature.row_mut(r).iter_mut().zip(&d_pooled) {
                *d += g / n;
            }
        }
    }
    Ok(d_feature)
}

/// Whole-video regression baseline: average-pool every frame, then a
/// two-layer ReLU MLP to a scalar score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WholeVideoMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl WholeVideoMlp {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(rng, input, hidden),
            out: Linear::new(rng, hidden, 1),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::zeros(input, hidden),
            out: Linear::zeros(hidden, 1),
        }
    }

    fn pooled(features: &Matrix) -> Matrix {
        let pooled = pool_segment(features, (0, features.rows())).expect("T >= 1");
        Matrix::from_vec(1, pooled.len(), pooled)
    }

    pub fn forward(&self, features: &Matrix) -> f64 {
        let h = relu(&self.hidden.forward(&Self::pooled(features)));
        self.out.forward(&h).get(0, 0)
    }

    /// Accumulate `d_out * dS/dθ` into `grad`.
    pub fn backward(&self, features: &Matrix, d_out: f64, grad: &mut WholeVideoMlp) {
        let x = Self::pooled(features);
        let pre = self.hidden.forward(&x);
        let h = relu(&pre);
        let d_h = self.out.backward(&h, &Matrix::from_vec(1, 1, vec![d_out]), &mut grad.out);
        let d_pre = relu_backward(&pre, &d_h);
        self.hidden.backward(&x, &d_pre, &mut grad.hidden);
    }
}

/// Free-function form of [`WholeVideoMlp::forward`].
pub fn whole_video_baseline(features: &Matrix, mlp: &WholeVideoMlp) -> f64 {
    mlp.forward(features)
}

impl Params for WholeVideoMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
