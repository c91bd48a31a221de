//! Central finite differences against the hand-written backward passes.
//!
//! Relative error is `|a - n| / max(|a|, |n|, ABS_FLOOR)`; the floor keeps
//! gradients that are zero in both computations from dividing by zero.

use rand::seq::index::sample;
use rand::Rng;
use stepscore_core::attention::{attention_backward, attention_forward, AttentionKernel, AttentionParams};
use stepscore_core::datamodel::ModelConfig;
use stepscore_core::kas::{
    assess_backward, assess_with_selection, learnable_sigmoid, score_step, score_step_backward, select_step_segments,
    softplus_inverse, BranchParams, KasParams, StepScorerParams, WholeVideoMlp,
};
use stepscore_core::losses::{
    assessment_mse, assessment_mse_grad, cross_entropy_logits, segmentation_loss_with, smoothing_logits, LossConfig,
    SmoothingGradient,
};
use stepscore_core::model::StepScoreModel;
use stepscore_core::nn::Params;
use stepscore_core::segnet::{network_backward, network_forward_traced, stage_backward, stage_forward, SegNet, StageParams};
use stepscore_core::{AttentionMode, Matrix};

use super::{dot, labels, random_matrix, rng};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;
pub const MIN_SAMPLES: usize = 20;
const SAMPLES: usize = 32;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    fn empty(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            checked: 0,
            max_rel: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, label: String, analytic: f64, numeric: f64) {
        let rel = rel_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel || self.checked == 1 {
            self.max_rel = rel;
            self.worst = format!("{label}: analytic {analytic:.6e}, numeric {numeric:.6e}");
        }
    }

    fn merge(mut self, other: GradCheck) -> Self {
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }

    pub fn passed(&self) -> bool {
        self.checked >= MIN_SAMPLES && self.max_rel <= REL_TOL
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} coords, max rel err {:.2e} ({})",
            self.name, self.checked, self.max_rel, self.worst
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// A plain matrix viewed as a parameter tensor, so inputs can be checked
/// with the same machinery as weights.
#[derive(Debug, Clone)]
pub struct Input(pub Matrix);

impl Params for Input {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&format!("{prefix}input"), &[self.0.rows(), self.0.cols()], self.0.as_slice())
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.0.rows(), self.0.cols()];
        f(&format!("{prefix}input"), &shape, self.0.as_mut_slice())
    }
}

fn tensor_layout<P: Params>(p: &P) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut offset = 0;
    p.visit("", &mut |name, _, v| {
        out.push((name.to_owned(), offset, v.len()));
        offset += v.len();
    });
    out
}

fn flat_add<P: Params>(p: &mut P, idx: usize, delta: f64) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, _, v| {
        if (offset..offset + v.len()).contains(&idx) {
            v[idx - offset] += delta;
        }
        offset += v.len();
    });
}

/// One coordinate from every tensor, the rest uniformly without
/// replacement, up to `SAMPLES` (or every coordinate if fewer).
fn sample_coords<P: Params>(p: &P, rng: &mut impl Rng) -> Vec<(String, usize)> {
    let layout = tensor_layout(p);
    let total: usize = layout.iter().map(|l| l.2).sum();
    let mut picked: Vec<usize> = layout.iter().map(|(_, off, len)| off + rng.random_range(0..*len)).collect();
    let want = SAMPLES.max(picked.len()).min(total);
    for i in sample(rng, total, total).into_iter() {
        if picked.len() >= want {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let (name, off, _) = layout.iter().find(|(_, off, len)| (*off..off + len).contains(&i)).unwrap();
            (format!("{name}[{}]", i - off), i)
        })
        .collect()
}

/// Compare `analytic` (same layout as `params`) with central differences of
/// `loss` on sampled coordinates.
pub fn check<P: Params + Clone>(name: &str, params: &P, analytic: &P, loss: impl Fn(&P) -> f64, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let grads = analytic.flatten();
    let mut report = GradCheck::empty(name);
    for (label, idx) in sample_coords(params, &mut r) {
        let mut plus = params.clone();
        flat_add(&mut plus, idx, FD_STEP);
        let mut minus = params.clone();
        flat_add(&mut minus, idx, -FD_STEP);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        report.record(label, grads[idx], numeric);
    }
    report
}

pub fn attention(kernel: AttentionKernel) -> GradCheck {
    let mut r = rng(101);
    let (t, d) = (9, 5);
    let p = AttentionParams::new(&mut r, d);
    let f = random_matrix(&mut r, t, d, 1.0);
    let upstream = random_matrix(&mut r, t, d, 1.0);
    let trace = attention_forward(&f, &p, kernel).unwrap();
    let mut g = p.zeros_like();
    let df = attention_backward(&p, &trace, &upstream, &mut g);
    let name = format!("attention ({kernel:?})");
    let loss = |p: &AttentionParams, f: &Matrix| dot(attention_forward(f, p, kernel).unwrap().output(), &upstream);
    check(&name, &p, &g, |q| loss(q, &f), 1).merge(check(&name, &Input(f.clone()), &Input(df), |x| loss(&p, &x.0), 2))
}

pub fn stage() -> GradCheck {
    let mut r = rng(202);
    let (t, input_dim) = (10, 6);
    let p = StageParams::new(&mut r, input_dim, 5, 3, 3, 7);
    let x = random_matrix(&mut r, t, input_dim, 1.0);
    let r_logits = random_matrix(&mut r, t, 7, 1.0);
    let r_feature = random_matrix(&mut r, t, 5, 1.0);
    let loss = |p: &StageParams, x: &Matrix| {
        let tr = stage_forward(x, p);
        dot(&tr.logits, &r_logits) + dot(tr.feature(), &r_feature)
    };
    let trace = stage_forward(&x, &p);
    let mut g = p.zeros_like();
    let dx = stage_backward(&p, &trace, &r_logits, Some(&r_feature), &mut g);
    check("stage_forward", &p, &g, |q| loss(q, &x), 3).merge(check("stage_forward", &Input(x.clone()), &Input(dx), |i| loss(&p, &i.0), 4))
}

fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        stages: 3,
        layers_per_stage: 2,
        hidden_dim: 5,
        kernel_size: 3,
        appearance_dim: 3,
        attention_mode: mode,
        seed: 9,
        ..ModelConfig::default()
    }
}

/// Full network with every stage supervised (full smoothing gradient) plus
/// the scorer on ground-truth routing.
pub fn network(mode: AttentionMode) -> GradCheck {
    let config = tiny_config(mode);
    let net = SegNet::new(&config).unwrap();
    let mut r = rng(303);
    let x = random_matrix(&mut r, 14, 6, 1.0);
    let gt = labels(&[[6, 2], [0, 4], [6, 1], [3, 5], [6, 2]]);
    let loss_cfg = LossConfig::default();
    let kas = KasParams::new(&mut r, config.hidden_dim, 1.0);
    let selection = select_step_segments(&gt);
    let gt_score = 0.7;
    let loss = |net: &SegNet, x: &Matrix| {
        let tr = network_forward_traced(x, net, mode).unwrap();
        let seg = segmentation_loss_with(&tr.stage_logits(), &gt, &loss_cfg, SmoothingGradient::Full).unwrap();
        let s = assess_with_selection(tr.final_feature(), &selection, &kas).unwrap().total;
        seg.value + (s - gt_score).powi(2)
    };
    let tr = network_forward_traced(&x, &net, mode).unwrap();
    let seg = segmentation_loss_with(&tr.stage_logits(), &gt, &loss_cfg, SmoothingGradient::Full).unwrap();
    let s = assess_with_selection(tr.final_feature(), &selection, &kas).unwrap().total;
    let mut kg = kas.zeros_like();
    let d_feature = assess_backward(tr.final_feature(), &selection, &kas, 2.0 * (s - gt_score), &mut kg).unwrap();
    let mut g = net.zeros_like();
    network_backward(&net, &tr, &seg.grads, Some(&d_feature), &mut g);
    check(&format!("network ({mode:?})"), &net, &g, |n| loss(n, &x), 5)
}

/// The production training gradient (teacher-forced routing, smoothing
/// weight 0 so the stop-gradient is irrelevant).
pub fn joint_model() -> GradCheck {
    let config = tiny_config(AttentionMode::Linear);
    let model = StepScoreModel::new(&config).unwrap();
    let mut r = rng(404);
    let x = random_matrix(&mut r, 16, 6, 1.0);
    let gt = labels(&[[6, 1], [1, 3], [6, 2], [2, 4], [5, 3], [6, 3]]);
    let loss_cfg = LossConfig {
        smoothing_weight: 0.0,
        ..LossConfig::default()
    };
    let g = model.gradients(&x, &gt, 1.3, &loss_cfg, true).unwrap();
    let loss = |m: &StepScoreModel| {
        let tr = network_forward_traced(&x, &m.segnet, config.attention_mode).unwrap();
        let seg = segmentation_loss_with(&tr.stage_logits(), &gt, &loss_cfg, SmoothingGradient::Full).unwrap();
        let s = assess_with_selection(tr.final_feature(), &select_step_segments(&gt), &m.kas).unwrap().total;
        seg.value + (s - 1.3).powi(2)
    };
    check("joint model", &model, &g.grads, loss, 6)
}

/// Derivatives of `1 / (1 + exp(-lambda x))` in `x` and `lambda`, with the
/// analytic side taken from the scorer's backward pass.
pub fn sigmoid() -> GradCheck {
    let mut r = rng(505);
    let mut report = GradCheck::empty("learnable_sigmoid");
    for k in 0..12 {
        let x: f64 = r.random_range(-4.0..4.0);
        let lambda: f64 = r.random_range(0.2..3.0);
        let params = StepScorerParams {
            branches: vec![BranchParams {
                weight: vec![1.0],
                bias: vec![0.0],
                steepness_raw: vec![softplus_inverse(lambda)],
            }],
        };
        let mut g = params.zeros_like();
        let dx = score_step_backward(&[x], &params, 1.0, &mut g)[0];
        // d lambda / d raw = sigmoid(raw)
        let d_lambda = g.branches[0].steepness_raw[0] / learnable_sigmoid(params.branches[0].steepness_raw[0], 1.0);
        let h = FD_STEP;
        let nx = (learnable_sigmoid(x + h, lambda) - learnable_sigmoid(x - h, lambda)) / (2.0 * h);
        let nl = (learnable_sigmoid(x, lambda + h) - learnable_sigmoid(x, lambda - h)) / (2.0 * h);
        report.record(format!("case {k} d/dx"), dx, nx);
        report.record(format!("case {k} d/dlambda"), d_lambda, nl);
    }
    report
}

pub fn score_step_case() -> GradCheck {
    let mut r = rng(606);
    let dim = 6;
    let p = StepScorerParams {
        branches: (0..2)
            .map(|_| {
                let steepness = r.random_range(0.5..2.0);
                BranchParams::new(&mut r, dim, steepness)
            })
            .collect(),
    };
    let feat = random_matrix(&mut r, 1, dim, 2.0);
    let mut g = p.zeros_like();
    let df = score_step_backward(feat.as_slice(), &p, 1.0, &mut g);
    let df = Matrix::from_vec(1, dim, df);
    check("score_step", &p, &g, |q| score_step(feat.as_slice(), q).1, 7)
        .merge(check("score_step", &Input(feat.clone()), &Input(df), |x| score_step(x.0.as_slice(), &p).1, 8))
}

pub fn assess() -> GradCheck {
    let mut r = rng(707);
    let dim = 4;
    let kas = KasParams::new(&mut r, dim, 1.0);
    let gt = labels(&[[6, 3], [0, 5], [6, 2], [2, 4], [3, 6], [0, 2], [5, 4], [6, 4]]);
    let selection = select_step_segments(&gt);
    let feature = random_matrix(&mut r, gt.len(), dim, 2.0);
    let mut g = kas.zeros_like();
    let df = assess_backward(&feature, &selection, &kas, 1.0, &mut g).unwrap();
    let total = |f: &Matrix, k: &KasParams| assess_with_selection(f, &selection, k).unwrap().total;
    check("assess_video", &kas, &g, |k| total(&feature, k), 9)
        .merge(check("assess_video", &Input(feature.clone()), &Input(df), |x| total(&x.0, &kas), 10))
}

pub fn cross_entropy() -> GradCheck {
    let mut r = rng(808);
    let gt = labels(&[[6, 2], [0, 3], [4, 3]]);
    let logits = random_matrix(&mut r, 8, 7, 3.0);
    let (_, g) = cross_entropy_logits(&logits, &gt).unwrap();
    check("cross_entropy", &Input(logits), &Input(g), |x| cross_entropy_logits(&x.0, &gt).unwrap().0, 11)
}

pub fn smoothing() -> GradCheck {
    let mut r = rng(909);
    let logits = random_matrix(&mut r, 9, 7, 3.0);
    let tau = 4.0;
    let (_, g) = smoothing_logits(&logits, tau, SmoothingGradient::Full);
    check("truncated smoothing", &Input(logits), &Input(g), |x| smoothing_logits(&x.0, tau, SmoothingGradient::Full).0, 12)
}

/// Two supervised stages, with non-unit stage weights.
pub fn segmentation() -> GradCheck {
    let mut r = rng(1010);
    let gt = labels(&[[6, 3], [1, 4], [6, 1]]);
    let a = random_matrix(&mut r, 8, 7, 2.0);
    let b = random_matrix(&mut r, 8, 7, 2.0);
    let cfg = LossConfig {
        stage_weights: vec![0.5, 1.5],
        ..LossConfig::default()
    };
    let stacked = Matrix::from_vec(16, 7, [a.as_slice(), b.as_slice()].concat());
    let split = |m: &Matrix| {
        vec![
            Matrix::from_vec(8, 7, m.as_slice()[..56].to_vec()),
            Matrix::from_vec(8, 7, m.as_slice()[56..].to_vec()),
        ]
    };
    let loss = segmentation_loss_with(&split(&stacked), &gt, &cfg, SmoothingGradient::Full).unwrap();
    let g = Matrix::from_vec(16, 7, [loss.grads[0].as_slice(), loss.grads[1].as_slice()].concat());
    check("segmentation loss", &Input(stacked), &Input(g), |x| {
        segmentation_loss_with(&split(&x.0), &gt, &cfg, SmoothingGradient::Full).unwrap().value
    }, 13)
}

pub fn mse() -> GradCheck {
    let mut r = rng(1111);
    let pred = random_matrix(&mut r, 1, 24, 3.0);
    let gt: Vec<f64> = (0..24).map(|_| r.random_range(0.0..6.0)).collect();
    let g = Matrix::from_vec(1, 24, assessment_mse_grad(pred.as_slice(), &gt));
    check("assessment mse", &Input(pred), &Input(g), |x| assessment_mse(x.0.as_slice(), &gt).unwrap(), 14)
}

pub fn baseline_mlp() -> GradCheck {
    let mut r = rng(1212);
    let mlp = WholeVideoMlp::new(&mut r, 6, 5);
    let x = random_matrix(&mut r, 11, 6, 1.0);
    let mut g = mlp.zeros_like();
    mlp.backward(&x, 1.0, &mut g);
    check("whole-video mlp", &mlp, &g, |m| m.forward(&x), 15)
}

/// Every case, in a stable order.
pub fn all() -> Vec<GradCheck> {
    vec![
        attention(AttentionKernel::Linear),
        attention(AttentionKernel::Quadratic),
        stage(),
        network(AttentionMode::Linear),
        network(AttentionMode::Off),
        joint_model(),
        sigmoid(),
        score_step_case(),
        assess(),
        cross_entropy(),
        smoothing(),
        segmentation(),
        mse(),
        baseline_mlp(),
    ]
}
