//! Synthetic staged-procedure videos: per-frame features, labels, per-step
//! attributes and a rubric score.
//!
//! Every class has a fixed prototype vector (orthogonal within the
//! appearance half and within the motion half). A frame's feature is its
//! class prototype plus Gaussian noise. Steps appear in order 1..6 separated
//! by background gaps; a not-existing step is simply absent. A nonstandard
//! step has one of its two key-action halves blended toward the background
//! prototype, so quality is visible in the features.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    write_manifest, ClassId, FeatureSequence, FrameLabelSequence, Run, StepAttribute, VideoRecord, NUM_CLASSES, NUM_STEPS,
};
use crate::error::{Error, Result};
use crate::featureio::write_features;
use crate::tensor::Matrix;

/// Numeric worth of each attribute level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rubric {
    pub not_existing: f64,
    pub nonstandard: f64,
    pub standard: f64,
}

impl Default for Rubric {
    fn default() -> Self {
        Self {
            not_existing: 0.0,
            nonstandard: 0.5,
            standard: 1.0,
        }
    }
}

impl Rubric {
    pub fn value(&self, a: StepAttribute) -> f64 {
        match a {
            StepAttribute::NotExisting => self.not_existing,
            StepAttribute::ExistsNonstandard => self.nonstandard,
            StepAttribute::ExistsStandard => self.standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.not_existing
            && self.not_existing < self.nonstandard
            && self.nonstandard < self.standard
            && self.standard <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("rubric must satisfy 0 <= NE < EN < ES <= 1".into()))
        }
    }
}

/// Per-step scores and their total.
pub fn rubric_score(attributes: &[StepAttribute; NUM_STEPS], rubric: &Rubric) -> ([f64; NUM_STEPS], f64) {
    let mut per_step = [0.0; NUM_STEPS];
    for (s, a) in per_step.iter_mut().zip(attributes) {
        *s = rubric.value(*a);
    }
    (per_step, per_step.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_videos: usize,
    /// Inclusive range of frames per present step.
    pub frames_per_step: (usize, usize),
    /// Inclusive range of background frames between steps and at both ends.
    pub background_gap: (usize, usize),
    /// Full feature width, appearance half then motion half.
    pub feature_dim: usize,
    /// Distance between any two class prototypes.
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Probabilities of (NE, EN, ES) for each step.
    pub attribute_distribution: [[f64; 3]; NUM_STEPS],
    /// Overrides sampling when set.
    pub forced_attributes: Option<[StepAttribute; NUM_STEPS]>,
    /// How far a nonstandard key action moves toward background, in `[0, 1)`.
    pub corruption_blend: f64,
    pub train_fraction: f64,
    pub rubric: Rubric,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_videos: 100,
            frames_per_step: (20, 40),
            background_gap: (5, 15),
            feature_dim: 2048,
            class_separation: 4.0,
            noise_sigma: 0.5,
            attribute_distribution: [[0.15, 0.4, 0.45]; NUM_STEPS],
            forced_attributes: None,
            corruption_blend: 0.4,
            train_fraction: 0.75,
            rubric: Rubric::default(),
        }
    }
}

impl GeneratorSpec {
    /// Read a spec from TOML (`.toml`) or JSON (anything else). Missing
    /// fields take their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: GeneratorSpec = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::ConfigParse {
                path: path.to_owned(),
                message: e.to_string(),
            })?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::ConfigParse {
                path: path.to_owned(),
                message: e.to_string(),
            })?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::DegenerateSpec(m));
        if self.frames_per_step.0 > self.frames_per_step.1 {
            return fail("frames_per_step min exceeds max".into());
        }
        if self.background_gap.0 > self.background_gap.1 {
            return fail("background_gap min exceeds max".into());
        }
        if !self.feature_dim.is_multiple_of(2) || self.feature_dim / 2 < NUM_CLASSES {
            return fail(format!(
                "feature_dim must be even with at least {NUM_CLASSES} channels per half, got {}",
                self.feature_dim
            ));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return fail("class_separation must be > 0".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.corruption_blend) {
            return fail("corruption_blend must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return fail("train_fraction must lie in [0, 1]".into());
        }
        for (i, probs) in self.attribute_distribution.iter().enumerate() {
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail(format!("attribute distribution for step {} must be probabilities summing to 1", i + 1));
            }
        }
        self.rubric.validate().map_err(|e| Error::DegenerateSpec(e.to_string()))
    }
}

/// Class prototypes, one row per class.
pub fn class_prototypes(spec: &GeneratorSpec) -> Matrix {
    let half = spec.feature_dim / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x7072_6f74_6f74_7970));
    // Each half carries norm s / 2 so the full distance between two classes is s.
    let scale = spec.class_separation / 2.0;
    let appearance = orthonormal_rows(&mut rng, NUM_CLASSES, half);
    let motion = orthonormal_rows(&mut rng, NUM_CLASSES, half);
    let mut out = Matrix::zeros(NUM_CLASSES, spec.feature_dim);
    for c in 0..NUM_CLASSES {
        let row = out.row_mut(c);
        for k in 0..half {
            row[k] = scale * appearance[c][k];
            row[half + k] = scale * motion[c][k];
        }
    }
    out
}

fn orthonormal_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-video RNG seed; serial and parallel generation agree.
pub fn video_seed(seed: u64, video_index: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ video_index as u64)
}

pub fn video_id(video_index: usize) -> String {
    format!("video_{video_index:05}")
}

fn sample_attribute(rng: &mut ChaCha8Rng, probs: &[f64; 3]) -> StepAttribute {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in StepAttribute::ALL.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *a;
        }
    }
    StepAttribute::ExistsStandard
}

/// Generate one video. The record's `feature_path` is `features/<id>.hhaf`,
/// relative to wherever the dataset is written.
pub fn generate_video(spec: &GeneratorSpec, video_index: usize) -> Result<(VideoRecord, FeatureSequence)> {
    spec.validate()?;
    generate_with_prototypes(spec, video_index, &class_prototypes(spec))
}

fn generate_with_prototypes(spec: &GeneratorSpec, video_index: usize, prototypes: &Matrix) -> Result<(VideoRecord, FeatureSequence)> {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(spec.seed, video_index));
    let attributes: [StepAttribute; NUM_STEPS] = match spec.forced_attributes {
        Some(a) => a,
        None => std::array::from_fn(|i| sample_attribute(&mut rng, &spec.attribute_distribution[i])),
    };
    if spec.frames_per_step.0 == 0 && attributes.iter().any(|a| a.is_present()) {
        return Err(Error::DegenerateSpec("present steps need at least one frame".into()));
    }

    let gap = |rng: &mut ChaCha8Rng| rng.random_range(spec.background_gap.0..=spec.background_gap.1);
    let mut runs: Vec<Run> = Vec::new();
    // (step index, start, len, corrupted half) for present steps.
    let mut layout = Vec::new();
    let push = |runs: &mut Vec<Run>, class: ClassId, len: usize| {
        if len > 0 {
            runs.push(Run { class, len });
        }
    };
    let g = gap(&mut rng);
    push(&mut runs, ClassId::BACKGROUND, g);
    let mut t = g;
    for (i, attr) in attributes.iter().enumerate() {
        if !attr.is_present() {
            continue;
        }
        let len = rng.random_range(spec.frames_per_step.0..=spec.frames_per_step.1);
        let corrupt_second = rng.random_bool(0.5);
        push(&mut runs, ClassId::step(i + 1), len);
        layout.push((i, t, len, corrupt_second));
        t += len;
        let g = gap(&mut rng);
        push(&mut runs, ClassId::BACKGROUND, g);
        t += g;
    }
    if t == 0 {
        return Err(Error::DegenerateSpec("video has no frames".into()));
    }
    let labels = FrameLabelSequence::from_runs(runs)?;

    let d = spec.feature_dim;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::DegenerateSpec(e.to_string()))?;
    let mut values = Matrix::zeros(t, d);
    for (r, class) in labels.decode().iter().enumerate() {
        values.row_mut(r).copy_from_slice(prototypes.row(class.index()));
    }
    let bg = prototypes.row(ClassId::BACKGROUND.index()).to_vec();
    let beta = spec.corruption_blend;
    for &(step, start, len, corrupt_second) in &layout {
        if attributes[step] != StepAttribute::ExistsNonstandard {
            continue;
        }
        let mid = start + len / 2;
        let (a, b) = if corrupt_second { (mid, start + len) } else { (start, mid) };
        for r in a..b {
            for (v, bgv) in values.row_mut(r).iter_mut().zip(&bg) {
                *v = (1.0 - beta) * *v + beta * bgv;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in values.as_mut_slice() {
            *v += noise.sample(&mut rng);
        }
    }
    // Quantize now so the in-memory matrix equals what the file stores.
    let values = values.map(|v| v as f32 as f64);

    let id = video_id(video_index);
    let (_, gt_score) = rubric_score(&attributes, &spec.rubric);
    let record = VideoRecord {
        feature_path: PathBuf::from(format!("features/{id}.hhaf")),
        id,
        labels,
        attributes,
        gt_score,
    };
    Ok((record, FeatureSequence::new(values)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Number of training videos for `n` videos.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * train_fraction).round() as usize).min(n)
}

/// Write feature files plus `train.json` and `test.json` manifests. The
/// first videos by index form the training split.
pub fn generate_dataset(spec: &GeneratorSpec, out_dir: &Path) -> Result<DatasetPaths> {
    spec.validate()?;
    if spec.n_videos == 0 {
        return Err(Error::EmptyDataset);
    }
    let feature_dir = out_dir.join("features");
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let prototypes = class_prototypes(spec);
    let mut records = Vec::with_capacity(spec.n_videos);
    for index in 0..spec.n_videos {
        let (mut record, features) = generate_with_prototypes(spec, index, &prototypes)?;
        let path = out_dir.join(&record.feature_path);
        write_features(&features, &path)?;
        record.feature_path = path;
        records.push(record);
    }
    let n_train = train_count(spec.n_videos, spec.train_fraction);
    let paths = DatasetPaths {
        train_manifest: out_dir.join("train.json"),
        test_manifest: out_dir.join("test.json"),
    };
    write_manifest(&paths.train_manifest, &records[..n_train])?;
    write_manifest(&paths.test_manifest, &records[n_train..])?;
    let spec_path = out_dir.join("generator.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(paths)
}
