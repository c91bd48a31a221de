//! Segmentation and assessment metrics: frame accuracy, segmental edit
//! score, segmental F1 at IoU thresholds, Spearman rank correlation and
//! relative L2 distance, plus corpus-level aggregation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassId, FrameLabelSequence, NUM_STEPS};
use crate::error::{Error, Result};

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub class: ClassId,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

/// Maximal runs as `(class, start, end)` segments covering `[0, T)`.
pub fn segments(labels: &FrameLabelSequence) -> Vec<Segment> {
    labels
        .spans()
        .map(|(class, start, end)| Segment { class, start, end })
        .collect()
}

/// Percentage of frames whose labels agree, background included.
pub fn frame_accuracy(pred: &FrameLabelSequence, gt: &FrameLabelSequence) -> Result<f64> {
    let (correct, total) = frame_matches(pred, gt)?;
    Ok(100.0 * correct as f64 / total as f64)
}

fn frame_matches(pred: &FrameLabelSequence, gt: &FrameLabelSequence) -> Result<(usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let correct = pred.decode().iter().zip(gt.decode()).filter(|(a, b)| **a == *b).count();
    Ok((correct, gt.len()))
}

fn levenshtein(a: &[ClassId], b: &[ClassId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 * (1 - lev(pred, gt) / max(|pred|, |gt|))` over collapsed segment
/// label strings, background included.
pub fn segmental_edit_score(pred: &FrameLabelSequence, gt: &FrameLabelSequence) -> f64 {
    let p: Vec<ClassId> = pred.runs().iter().map(|r| r.class).collect();
    let g: Vec<ClassId> = gt.runs().iter().map(|r| r.class).collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / longest as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn add(&mut self, other: F1Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `100 * 2PR / (P + R)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        if precision + recall == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * precision * recall / (precision + recall)
        }
    }
}

/// Greedy matching: each predicted segment, in temporal order, is a hit if
/// its best-IoU unmatched ground-truth segment of the same class reaches
/// `threshold`.
pub fn f1_counts(pred: &FrameLabelSequence, gt: &FrameLabelSequence, threshold: f64, include_background: bool) -> F1Counts {
    let keep = |s: &Segment| include_background || !s.class.is_background();
    let p: Vec<Segment> = segments(pred).into_iter().filter(keep).collect();
    let g: Vec<Segment> = segments(gt).into_iter().filter(keep).collect();
    let mut matched = vec![false; g.len()];
    let mut counts = F1Counts::default();
    for ps in &p {
        let best = g
            .iter()
            .enumerate()
            .filter(|(j, gs)| !matched[*j] && gs.class == ps.class)
            .map(|(j, gs)| (j, ps.iou(gs)))
            .fold(None, |acc: Option<(usize, f64)>, (j, iou)| match acc {
                Some((_, best)) if best >= iou => acc,
                _ => Some((j, iou)),
            });
        match best {
            Some((j, iou)) if iou >= threshold => {
                matched[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = matched.iter().filter(|m| !**m).count();
    counts
}

/// Segmental F1 (percent) with background excluded.
pub fn segmental_f1(pred: &FrameLabelSequence, gt: &FrameLabelSequence, threshold: f64) -> f64 {
    f1_counts(pred, gt, threshold, false).f1()
}

/// Ranks starting at 1; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(p: &[f64], q: &[f64]) -> Option<f64> {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vq = 0.0;
    for (a, b) in p.iter().zip(q) {
        cov += (a - mp) * (b - mq);
        vp += (a - mp).powi(2);
        vq += (b - mq).powi(2);
    }
    if vp == 0.0 || vq == 0.0 {
        return None;
    }
    Some((cov / (vp * vq).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(pred_scores: &[f64], gt_scores: &[f64]) -> Result<f64> {
    if pred_scores.len() != gt_scores.len() {
        return Err(Error::LengthMismatch {
            left: pred_scores.len(),
            right: gt_scores.len(),
        });
    }
    if pred_scores.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    if pred_scores.iter().chain(gt_scores).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite score"));
    }
    pearson(&average_ranks(pred_scores), &average_ranks(gt_scores))
        .ok_or(Error::UndefinedCorrelation("constant input list"))
}

/// `(1/K) * sum ((|s_k - s^_k|) / (s_max - s_min))^2`, not yet scaled by 100.
pub fn relative_l2(pred_scores: &[f64], gt_scores: &[f64], s_min: f64, s_max: f64) -> Result<f64> {
    if pred_scores.len() != gt_scores.len() || pred_scores.is_empty() {
        return Err(Error::LengthMismatch {
            left: pred_scores.len(),
            right: gt_scores.len(),
        });
    }
    if !(s_max > s_min) {
        return Err(Error::DegenerateRange { min: s_min, max: s_max });
    }
    let range = s_max - s_min;
    let k = pred_scores.len() as f64;
    Ok(pred_scores
        .iter()
        .zip(gt_scores)
        .map(|(p, g)| ((g - p).abs() / range).powi(2))
        .sum::<f64>()
        / k)
}

/// Corpus-level results in the usual table column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub edit: f64,
    /// Keyed `"0.10"`, `"0.25"`, `"0.50"`.
    pub f1: BTreeMap<String, f64>,
    pub spearman: f64,
    pub r_l2_x100: f64,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl MetricsReport {
    pub fn f1_at(&self, threshold: f64) -> f64 {
        self.f1[&threshold_key(threshold)]
    }

    pub fn table_header() -> &'static str {
        "F1@{10,25,50} | Edit | Acc | Spearman | R-l2(*100)"
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:.1}/{:.1}/{:.1} | {:.1} | {:.1} | {:.3} | {:.2}",
            self.f1_at(0.10),
            self.f1_at(0.25),
            self.f1_at(0.50),
            self.edit,
            self.acc,
            self.spearman,
            self.r_l2_x100
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.acc, self.edit, self.spearman, self.r_l2_x100]
            .iter()
            .chain(self.f1.values())
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table_row())
    }
}

/// Accumulates per-video results. Accuracy is micro-averaged over frames,
/// F1 pools TP/FP/FN over videos, edit is the mean per-video score, and the
/// score metrics are computed over the whole corpus.
#[derive(Debug, Clone, Default)]
pub struct CorpusMetrics {
    correct_frames: usize,
    total_frames: usize,
    edit_sum: f64,
    videos: usize,
    f1: [F1Counts; 3],
    pred_scores: Vec<f64>,
    gt_scores: Vec<f64>,
}

impl CorpusMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_video(&mut self, pred: &FrameLabelSequence, gt: &FrameLabelSequence, pred_score: f64, gt_score: f64) -> Result<()> {
        let (correct, total) = frame_matches(pred, gt)?;
        self.correct_frames += correct;
        self.total_frames += total;
        self.edit_sum += segmental_edit_score(pred, gt);
        self.videos += 1;
        for (acc, &t) in self.f1.iter_mut().zip(&F1_THRESHOLDS) {
            acc.add(f1_counts(pred, gt, t, false));
        }
        self.pred_scores.push(pred_score);
        self.gt_scores.push(gt_score);
        Ok(())
    }

    pub fn videos(&self) -> usize {
        self.videos
    }

    /// Finish with an explicit score range for relative L2.
    ///
    /// An undefined rank correlation (constant predictions or ground truth)
    /// is reported as 0.
    pub fn report_with_range(&self, s_min: f64, s_max: f64) -> Result<MetricsReport> {
        if self.videos == 0 {
            return Err(Error::EmptyDataset);
        }
        let rho = match spearman(&self.pred_scores, &self.gt_scores) {
            Ok(r) => r,
            Err(Error::UndefinedCorrelation(_)) => 0.0,
            Err(e) => return Err(e),
        };
        let rl2 = relative_l2(&self.pred_scores, &self.gt_scores, s_min, s_max)?;
        Ok(MetricsReport {
            acc: 100.0 * self.correct_frames as f64 / self.total_frames as f64,
            edit: self.edit_sum / self.videos as f64,
            f1: F1_THRESHOLDS
                .iter()
                .zip(&self.f1)
                .map(|(&t, c)| (threshold_key(t), c.f1()))
                .collect(),
            spearman: rho,
            r_l2_x100: 100.0 * rl2,
        })
    }

    /// Finish using the observed ground-truth range, or the full `[0, 6]`
    /// scale when every video has the same score.
    pub fn report(&self) -> Result<MetricsReport> {
        let lo = self.gt_scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.gt_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            self.report_with_range(lo, hi)
        } else {
            self.report_with_range(0.0, NUM_STEPS as f64)
        }
    }
}
