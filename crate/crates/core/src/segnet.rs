//! Multi-stage convolution + attention step segmentation network.
//!
//! Stage 1 maps raw frame features through a 1x1 projection, a stack of
//! residual dilated convolutions (dilation `2^l`) and a 1x1 classifier.
//! Every later stage consumes the previous stage's softmax prediction
//! concatenated with its attention-enhanced feature. All stage logits are
//! returned for supervision; the last stage's feature feeds the scorer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_forward, AttentionKernel, AttentionParams, AttentionTrace};
use crate::datamodel::{AttentionMode, ClassId, FrameLabelSequence, ModelConfig, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, DilatedConv, Linear, Params};
use crate::tensor::{softmax_rows, softmax_rows_backward, Matrix};

/// One residual block: `x + W_out relu(conv(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualLayer {
    pub conv: DilatedConv,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub input: Linear,
    pub layers: Vec<ResidualLayer>,
    pub head: Linear,
}

impl StageParams {
    pub fn new(rng: &mut ChaCha8Rng, input_dim: usize, hidden: usize, layers: usize, kernel_size: usize, classes: usize) -> Self {
        Self {
            input: Linear::new(rng, input_dim, hidden),
            layers: (0..layers)
                .map(|l| ResidualLayer {
                    conv: DilatedConv::new(rng, hidden, hidden, kernel_size, 1 << l),
                    out: Linear::new(rng, hidden, hidden),
                })
                .collect(),
            head: Linear::new(rng, hidden, classes),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.input.output_dim()
    }
}

impl Params for StageParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.input.visit(&join(prefix, "input"), f);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{l}"));
            layer.conv.visit(&join(&p, "conv"), f);
            layer.out.visit(&join(&p, "out"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{l}"));
            layer.conv.visit_mut(&join(&p, "conv"), f);
            layer.out.visit_mut(&join(&p, "out"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct StageTrace {
    input: Matrix,
    /// Input of each residual layer; the last entry is the stage feature.
    states: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
    pub logits: Matrix,
}

impl StageTrace {
    pub fn feature(&self) -> &Matrix {
        self.states.last().expect("at least the projected input")
    }
}

/// Run one stage; returns logits (`T x C`) and feature (`T x D_n`) via the trace.
pub fn stage_forward(input: &Matrix, params: &StageParams) -> StageTrace {
    let mut x = params.input.forward(input);
    let mut states = Vec::with_capacity(params.layers.len() + 1);
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut activations = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let pre = layer.conv.forward(&x);
        let act = relu(&pre);
        let mut next = layer.out.forward(&act);
        next.add_assign(&x);
        states.push(x);
        pre_activations.push(pre);
        activations.push(act);
        x = next;
    }
    let logits = params.head.forward(&x);
    states.push(x);
    StageTrace {
        input: input.clone(),
        states,
        pre_activations,
        activations,
        logits,
    }
}

/// Backward through one stage. `d_logits` and `d_feature` are upstream
/// gradients on the stage outputs; returns `dL/d(input)`.
pub fn stage_backward(
    params: &StageParams,
    trace: &StageTrace,
    d_logits: &Matrix,
    d_feature: Option<&Matrix>,
    grad: &mut StageParams,
) -> Matrix {
    let mut dx = params.head.backward(trace.feature(), d_logits, &mut grad.head);
    if let Some(extra) = d_feature {
        dx.add_assign(extra);
    }
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let g = &mut grad.layers[l];
        let d_act = layer.out.backward(&trace.activations[l], &dx, &mut g.out);
        let d_pre = relu_backward(&trace.pre_activations[l], &d_act);
        let d_state = layer.conv.backward(&trace.states[l], &d_pre, &mut g.conv);
        dx.add_assign(&d_state);
    }
    params.input.backward(&trace.input, &dx, &mut grad.input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNet {
    pub stages: Vec<StageParams>,
    /// One block per refinement stage; empty when attention is off.
    pub attention: Vec<AttentionParams>,
}

impl SegNet {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::with_rng(config, &mut rng))
    }

    pub fn with_rng(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden_dim;
        let mut stages = Vec::with_capacity(config.stages);
        let mut attention = Vec::new();
        stages.push(StageParams::new(rng, config.input_dim(), h, config.layers_per_stage, config.kernel_size, NUM_CLASSES));
        for _ in 1..config.stages {
            if config.attention_mode != AttentionMode::Off {
                attention.push(AttentionParams::new(rng, h));
            }
            stages.push(StageParams::new(rng, NUM_CLASSES + h, h, config.layers_per_stage, config.kernel_size, NUM_CLASSES));
        }
        Self { stages, attention }
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].input.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.stages[0].hidden_dim()
    }
}

impl Params for SegNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        for (i, a) in self.attention.iter().enumerate() {
            a.visit(&join(prefix, &format!("attention{}", i + 2)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        for (i, a) in self.attention.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("attention{}", i + 2)), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    pub per_stage_logits: Vec<Matrix>,
    pub final_feature: Matrix,
    pub predicted_labels: FrameLabelSequence,
}

impl SegmentationOutput {
    pub fn final_probabilities(&self) -> Matrix {
        softmax_rows(self.per_stage_logits.last().expect("at least one stage"))
    }
}

#[derive(Debug, Clone)]
pub struct NetworkTrace {
    stages: Vec<StageTrace>,
    /// Softmax of each non-final stage, fed forward.
    probs: Vec<Matrix>,
    attention: Vec<AttentionTrace>,
}

impl NetworkTrace {
    pub fn stage_logits(&self) -> Vec<Matrix> {
        self.stages.iter().map(|s| s.logits.clone()).collect()
    }

    pub fn final_feature(&self) -> &Matrix {
        self.stages.last().expect("stages").feature()
    }
}

fn kernel_for(mode: AttentionMode) -> Option<AttentionKernel> {
    match mode {
        AttentionMode::Linear => Some(AttentionKernel::Linear),
        AttentionMode::QuadraticReference => Some(AttentionKernel::Quadratic),
        AttentionMode::Off => None,
    }
}

pub fn network_forward_traced(features: &Matrix, net: &SegNet, mode: AttentionMode) -> Result<NetworkTrace> {
    if features.cols() != net.input_dim() {
        return Err(Error::shape("network input", net.input_dim(), features.cols()));
    }
    if features.rows() == 0 {
        return Err(Error::shape("network input", "T >= 1", 0));
    }
    let kernel = kernel_for(mode);
    if kernel.is_some() != !net.attention.is_empty() {
        return Err(Error::Config(format!(
            "attention mode {mode:?} does not match a network with {} attention blocks",
            net.attention.len()
        )));
    }
    let mut stages = Vec::with_capacity(net.stages.len());
    let mut probs = Vec::new();
    let mut attention = Vec::new();
    stages.push(stage_forward(features, &net.stages[0]));
    for m in 1..net.stages.len() {
        let prev = &stages[m - 1];
        let p = softmax_rows(&prev.logits);
        let enhanced = match kernel {
            Some(k) => {
                let tr = attention_forward(prev.feature(), &net.attention[m - 1], k)?;
                let out = tr.output().clone();
                attention.push(tr);
                out
            }
            None => prev.feature().clone(),
        };
        let input = p.hconcat(&enhanced);
        probs.push(p);
        stages.push(stage_forward(&input, &net.stages[m]));
    }
    Ok(NetworkTrace {
        stages,
        probs,
        attention,
    })
}

pub fn network_forward(features: &Matrix, net: &SegNet, mode: AttentionMode) -> Result<SegmentationOutput> {
    let trace = network_forward_traced(features, net, mode)?;
    Ok(output_from_trace(&trace))
}

pub fn output_from_trace(trace: &NetworkTrace) -> SegmentationOutput {
    let per_stage_logits = trace.stage_logits();
    let predicted_labels = argmax_labels(per_stage_logits.last().expect("stages"));
    SegmentationOutput {
        per_stage_logits,
        final_feature: trace.final_feature().clone(),
        predicted_labels,
    }
}

/// Backward through the whole network given per-stage logit gradients and an
/// optional gradient on the final feature. Accumulates into `grad`.
pub fn network_backward(net: &SegNet, trace: &NetworkTrace, d_logits: &[Matrix], d_final_feature: Option<&Matrix>, grad: &mut SegNet) {
    let n = net.stages.len();
    assert_eq!(d_logits.len(), n, "one logit gradient per stage");
    let mut d_logits: Vec<Matrix> = d_logits.to_vec();
    let mut d_feature: Option<Matrix> = d_final_feature.cloned();
    for m in (0..n).rev() {
        let d_in = stage_backward(&net.stages[m], &trace.stages[m], &d_logits[m], d_feature.as_ref(), &mut grad.stages[m]);
        if m == 0 {
            break;
        }
        let d_probs = d_in.column_slice(0, NUM_CLASSES);
        let d_enh = d_in.column_slice(NUM_CLASSES, d_in.cols());
        d_logits[m - 1].add_assign(&softmax_rows_backward(&trace.probs[m - 1], &d_probs));
        d_feature = Some(if net.attention.is_empty() {
            d_enh
        } else {
            attention_backward(&net.attention[m - 1], &trace.attention[m - 1], &d_enh, &mut grad.attention[m - 1])
        });
    }
}

/// Per-frame argmax of the last stage's softmax; ties go to the lowest class index.
pub fn predict_labels(output: &SegmentationOutput) -> FrameLabelSequence {
    argmax_labels(output.per_stage_logits.last().expect("stages"))
}

fn argmax_labels(logits: &Matrix) -> FrameLabelSequence {
    let probs = softmax_rows(logits);
    let frames: Vec<ClassId> = (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            ClassId::new(best).expect("row width is the class count")
        })
        .collect();
    FrameLabelSequence::from_frames(&frames).expect("T >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Run;
    use crate::nn::uniform;

    fn small_config() -> ModelConfig {
        ModelConfig {
            stages: 3,
            layers_per_stage: 3,
            hidden_dim: 6,
            kernel_size: 3,
            appearance_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stage = StageParams::new(&mut rng, 5, 4, 2, 3, NUM_CLASSES);
        stage.visit_mut("", &mut |_, _, v| v.fill(0.0));
        let x = Matrix::from_vec(8, 5, uniform(&mut rng, 1.0, 40));
        let tr = stage_forward(&x, &stage);
        assert!(tr.logits.as_slice().iter().all(|&v| v == 0.0));
        let p = softmax_rows(&tr.logits);
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn every_stage_preserves_length() {
        let cfg = small_config();
        let net = SegNet::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [1, 2, 7, 33] {
            let x = Matrix::from_vec(t, 8, uniform(&mut rng, 1.0, t * 8));
            let out = network_forward(&x, &net, AttentionMode::Linear).unwrap();
            assert_eq!(out.per_stage_logits.len(), 3);
            for l in &out.per_stage_logits {
                assert_eq!(l.shape(), (t, NUM_CLASSES));
            }
            assert_eq!(out.final_feature.shape(), (t, 6));
            assert_eq!(out.predicted_labels.len(), t);
        }
    }

    #[test]
    fn attention_off_keeps_output_shapes() {
        let cfg = small_config();
        let off = ModelConfig {
            attention_mode: AttentionMode::Off,
            ..cfg.clone()
        };
        let a = SegNet::new(&cfg).unwrap();
        let b = SegNet::new(&off).unwrap();
        assert!(b.attention.is_empty());
        let x = Matrix::filled(10, 8, 0.3);
        let oa = network_forward(&x, &a, AttentionMode::Linear).unwrap();
        let ob = network_forward(&x, &b, AttentionMode::Off).unwrap();
        assert_eq!(oa.per_stage_logits.len(), ob.per_stage_logits.len());
        assert_eq!(oa.final_feature.shape(), ob.final_feature.shape());
        assert!(network_forward(&x, &a, AttentionMode::Off).is_err());
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = SegNet::new(&small_config()).unwrap();
        assert!(matches!(
            network_forward(&Matrix::zeros(4, 3), &net, AttentionMode::Linear),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn argmax_tie_break_and_runs() {
        let uniform_logits = Matrix::zeros(4, NUM_CLASSES);
        let labels = argmax_labels(&uniform_logits);
        assert_eq!(labels.runs(), &[Run { class: ClassId::step(1), len: 4 }]);

        let mut rows = Vec::new();
        let mut push = |class: usize, n: usize| {
            for _ in 0..n {
                let mut r = vec![0.0; NUM_CLASSES];
                r[class] = 5.0;
                rows.push(r);
            }
        };
        push(6, 5);
        push(0, 10);
        push(6, 3);
        let labels = argmax_labels(&Matrix::from_rows(&rows));
        assert_eq!(labels.to_pairs(), vec![[6, 5], [0, 10], [6, 3]]);
    }
}
