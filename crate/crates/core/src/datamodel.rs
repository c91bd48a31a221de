//! Domain types shared by every other module: the label taxonomy, run-length
//! encoded frame labels, feature matrices, per-step attributes, dataset
//! records and the manifest that binds them together.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featureio;
use crate::tensor::Matrix;

/// Number of procedure steps.
pub const NUM_STEPS: usize = 6;
/// Steps plus background.
pub const NUM_CLASSES: usize = 7;
/// Key actions (scoring branches) per step.
pub const KEY_ACTIONS_PER_STEP: usize = 2;

/// Frame class. Indices `0..6` are steps 1..6, index 6 is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(6);

    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_CLASSES).then_some(ClassId(index as u8))
    }

    /// Class for step `n` in `1..=6`.
    pub fn step(n: usize) -> Self {
        assert!((1..=NUM_STEPS).contains(&n), "step number {n} out of 1..=6");
        ClassId((n - 1) as u8)
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }

    /// Zero-based step index, `None` for background.
    pub fn step_index(self) -> Option<usize> {
        (!self.is_background()).then_some(self.0 as usize)
    }

    pub fn name(self) -> &'static str {
        LabelTaxonomy::NAMES[self.index()]
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The fixed seven-class taxonomy.
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelTaxonomy;

impl LabelTaxonomy {
    pub const NAMES: [&'static str; NUM_CLASSES] = [
        "step1", "step2", "step3", "step4", "step5", "step6", "background",
    ];

    pub const DESCRIPTIONS: [&'static str; NUM_CLASSES] = [
        "palm to palm",
        "palm over dorsum with fingers interlaced",
        "palm to palm with fingers interlaced",
        "back of fingers to opposing palm",
        "rotational rubbing of the thumb",
        "fingertips to palm",
        "background",
    ];

    pub fn classes() -> impl Iterator<Item = ClassId> {
        (0..NUM_CLASSES).map(|i| ClassId(i as u8))
    }

    pub fn steps() -> impl Iterator<Item = ClassId> {
        (0..NUM_STEPS).map(|i| ClassId(i as u8))
    }

    pub fn class_count() -> usize {
        NUM_CLASSES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub class: ClassId,
    pub len: usize,
}

/// Per-frame labels stored as canonical runs: every run non-empty, adjacent
/// runs distinct, at least one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabelSequence {
    runs: Vec<Run>,
    total: usize,
}

impl FrameLabelSequence {
    pub fn from_runs(runs: Vec<Run>) -> Result<Self> {
        if let Some(problem) = run_problems(runs.iter().map(|r| (r.class.index(), r.len))).first() {
            return Err(Error::InvalidLabels(problem.clone()));
        }
        let total = runs.iter().map(|r| r.len).sum();
        Ok(Self { runs, total })
    }

    /// Run-length encode a frame-wise labelling.
    pub fn from_frames(frames: &[ClassId]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidLabels("no frames".into()));
        }
        let mut runs: Vec<Run> = Vec::new();
        for &class in frames {
            match runs.last_mut() {
                Some(last) if last.class == class => last.len += 1,
                _ => runs.push(Run { class, len: 1 }),
            }
        }
        Ok(Self {
            runs,
            total: frames.len(),
        })
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    /// Total frame count `T`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn decode(&self) -> Vec<ClassId> {
        let mut out = Vec::with_capacity(self.total);
        for r in &self.runs {
            out.extend(std::iter::repeat_n(r.class, r.len));
        }
        out
    }

    /// Runs as half-open `(class, start, end)` spans.
    pub fn spans(&self) -> impl Iterator<Item = (ClassId, usize, usize)> + '_ {
        self.runs.iter().scan(0usize, |start, r| {
            let s = *start;
            *start += r.len;
            Some((r.class, s, s + r.len))
        })
    }

    pub fn to_pairs(&self) -> Vec<[usize; 2]> {
        self.runs.iter().map(|r| [r.class.index(), r.len]).collect()
    }

    pub fn from_pairs(pairs: &[[usize; 2]]) -> Result<Self> {
        if let Some(problem) = run_problems(pairs.iter().map(|p| (p[0], p[1]))).first() {
            return Err(Error::InvalidLabels(problem.clone()));
        }
        let runs = pairs
            .iter()
            .map(|p| Run {
                class: ClassId(p[0] as u8),
                len: p[1],
            })
            .collect();
        Self::from_runs(runs)
    }
}

impl Serialize for FrameLabelSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_pairs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FrameLabelSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<[usize; 2]>::deserialize(d)?;
        Self::from_pairs(&pairs).map_err(serde::de::Error::custom)
    }
}

/// Every canonical-form problem with a raw run list.
fn run_problems(runs: impl Iterator<Item = (usize, usize)>) -> Vec<String> {
    let mut problems = Vec::new();
    let mut prev: Option<usize> = None;
    let mut count = 0;
    for (i, (class, len)) in runs.enumerate() {
        count += 1;
        if class >= NUM_CLASSES {
            problems.push(format!("run {i}: class {class} outside taxonomy"));
        }
        if len == 0 {
            problems.push(format!("run {i}: zero length"));
        }
        if prev == Some(class) {
            problems.push(format!("run {i}: repeats class {class} of previous run"));
        }
        prev = Some(class);
    }
    if count == 0 {
        problems.push("no runs".into());
    }
    problems
}

/// `T x D` per-frame features, appearance channels first then motion.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Matrix,
}

impl FeatureSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::shape("feature sequence", "T>=1, D>=1", format!("{:?}", values.shape())));
        }
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature {
                row: pos / values.cols(),
                col: pos % values.cols(),
            });
        }
        Ok(Self { values })
    }

    /// Skips the finiteness check; for records under validation.
    pub(crate) fn new_unchecked(values: Matrix) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Keep only the appearance half of the channels.
    pub fn appearance_only(&self) -> Result<Self> {
        if !self.dim().is_multiple_of(2) {
            return Err(Error::shape("appearance split", "even D", self.dim()));
        }
        Ok(Self {
            values: self.values.column_slice(0, self.dim() / 2),
        })
    }
}

/// Standardization level of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum StepAttribute {
    /// Step not performed.
    NotExisting,
    /// Performed, but not to standard.
    ExistsNonstandard,
    /// Performed to standard.
    ExistsStandard,
}

impl StepAttribute {
    pub const ALL: [StepAttribute; 3] = [
        StepAttribute::NotExisting,
        StepAttribute::ExistsNonstandard,
        StepAttribute::ExistsStandard,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            StepAttribute::NotExisting => "NE",
            StepAttribute::ExistsNonstandard => "EN",
            StepAttribute::ExistsStandard => "ES",
        }
    }

    pub fn is_present(self) -> bool {
        self != StepAttribute::NotExisting
    }
}

impl From<StepAttribute> for u8 {
    fn from(a: StepAttribute) -> u8 {
        a.code()
    }
}

impl TryFrom<u8> for StepAttribute {
    type Error = String;

    fn try_from(code: u8) -> std::result::Result<Self, String> {
        Self::from_code(code).ok_or_else(|| format!("attribute code {code} not in 0..=2"))
    }
}

/// A validated dataset record. `feature_path` is absolute (resolved against
/// the manifest directory).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub feature_path: PathBuf,
    pub labels: FrameLabelSequence,
    pub attributes: [StepAttribute; NUM_STEPS],
    pub gt_score: f64,
}

impl VideoRecord {
    pub fn load_features(&self) -> Result<FeatureSequence> {
        let seq = featureio::read_features(&self.feature_path).map_err(|e| e.in_video(&self.id))?;
        if seq.frames() != self.labels.len() {
            return Err(Error::shape("record features", self.labels.len(), seq.frames()).in_video(&self.id));
        }
        Ok(seq)
    }

    /// The manifest form, with `feature_path` written relative to `base_dir` when possible.
    pub fn to_entry(&self, base_dir: &Path) -> ManifestEntry {
        let rel = self
            .feature_path
            .strip_prefix(base_dir)
            .unwrap_or(&self.feature_path);
        ManifestEntry {
            id: self.id.clone(),
            feature_path: rel.to_string_lossy().replace('\\', "/"),
            labels: self.labels.to_pairs(),
            attributes: self.attributes.iter().map(|a| a.code()).collect(),
            gt_score: self.gt_score,
        }
    }
}

/// One manifest record exactly as it appears on disk, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    pub labels: Vec<[usize; 2]>,
    pub attributes: Vec<u8>,
    pub gt_score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Violation {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

/// Check every record invariant and return all violations; empty means valid.
/// Feature files are resolved against `base_dir` and read.
pub fn validate_record(entry: &ManifestEntry, base_dir: &Path) -> Vec<Violation> {
    let mut out = Vec::new();
    if entry.id.is_empty() {
        out.push(Violation::new("id", "empty id"));
    }
    if !(entry.gt_score.is_finite() && (0.0..=6.0).contains(&entry.gt_score)) {
        out.push(Violation::new(
            "gt_score",
            format!("gt_score out of [0,6]: {}", entry.gt_score),
        ));
    }
    if entry.attributes.len() != NUM_STEPS {
        out.push(Violation::new(
            "attributes",
            format!("expected 6 attributes, found {}", entry.attributes.len()),
        ));
    }
    for (i, &code) in entry.attributes.iter().enumerate() {
        if StepAttribute::from_code(code).is_none() {
            out.push(Violation::new("attributes", format!("attribute {i}: code {code} not in 0..=2")));
        }
    }
    for problem in run_problems(entry.labels.iter().map(|p| (p[0], p[1]))) {
        out.push(Violation::new("labels", problem));
    }
    let label_frames: usize = entry.labels.iter().map(|p| p[1]).sum();

    let path = base_dir.join(&entry.feature_path);
    match featureio::read_features_unchecked(&path) {
        Ok(seq) => {
            if let Some(pos) = seq.values().as_slice().iter().position(|v| !v.is_finite()) {
                let cols = seq.dim();
                out.push(Violation::new(
                    "features",
                    format!("non-finite value at row {}, column {}", pos / cols, pos % cols),
                ));
            }
            if seq.frames() != label_frames {
                out.push(Violation::new(
                    "labels",
                    format!("run lengths sum to {label_frames} but features have {} frames", seq.frames()),
                ));
            }
        }
        Err(e) => out.push(Violation::new("feature_path", e.to_string())),
    }
    out
}

/// Turn a manifest entry into a record, or report every violation.
pub fn check_entry(entry: &ManifestEntry, base_dir: &Path) -> Result<VideoRecord> {
    let violations = validate_record(entry, base_dir);
    if !violations.is_empty() {
        return Err(Error::InvalidRecord {
            id: entry.id.clone(),
            violations,
        });
    }
    let mut attributes = [StepAttribute::NotExisting; NUM_STEPS];
    for (slot, &code) in attributes.iter_mut().zip(&entry.attributes) {
        *slot = StepAttribute::from_code(code).expect("validated");
    }
    Ok(VideoRecord {
        id: entry.id.clone(),
        feature_path: base_dir.join(&entry.feature_path),
        labels: FrameLabelSequence::from_pairs(&entry.labels)?,
        attributes,
        gt_score: entry.gt_score,
    })
}

/// Parse the manifest without touching feature files.
pub fn read_manifest_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ManifestParse {
        path: path.to_owned(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Load and validate a manifest. Records come back sorted by id.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoRecord>> {
    let entries = read_manifest_entries(path)?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in &entries {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id.clone()));
        }
        records.push(check_entry(entry, base_dir)?);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

/// Write records as a manifest whose feature paths are relative to the
/// manifest's own directory.
pub fn write_manifest(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<_> = records.iter().map(|r| r.to_entry(base_dir)).collect();
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Linear,
    QuadraticReference,
    Off,
}

/// Network architecture and scorer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: usize,
    pub layers_per_stage: usize,
    pub hidden_dim: usize,
    pub kernel_size: usize,
    /// Channels per modality; the network input is twice this with motion features.
    pub appearance_dim: usize,
    pub use_motion_features: bool,
    pub attention_mode: AttentionMode,
    /// Initial sigmoid steepness.
    pub sigmoid_init: f64,
    pub learnable_sigmoid: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            layers_per_stage: 10,
            hidden_dim: 64,
            kernel_size: 3,
            appearance_dim: 1024,
            use_motion_features: true,
            attention_mode: AttentionMode::Linear,
            sigmoid_init: 1.0,
            learnable_sigmoid: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        if self.use_motion_features {
            2 * self.appearance_dim
        } else {
            self.appearance_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.stages < 2 {
            return fail("stages must be >= 2");
        }
        if self.layers_per_stage == 0 {
            return fail("layers_per_stage must be >= 1");
        }
        if self.hidden_dim == 0 || self.appearance_dim == 0 {
            return fail("dimensions must be >= 1");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail("kernel_size must be odd for centered padding");
        }
        if !(self.sigmoid_init.is_finite() && self.sigmoid_init > 0.0) {
            return fail("sigmoid_init must be > 0");
        }
        Ok(())
    }

    /// Bring a record's features to this config's input layout.
    pub fn prepare_features(&self, seq: &FeatureSequence) -> Result<Matrix> {
        let full = 2 * self.appearance_dim;
        if seq.dim() != full {
            return Err(Error::shape("feature dimension", full, seq.dim()));
        }
        if self.use_motion_features {
            Ok(seq.values().clone())
        } else {
            Ok(seq.appearance_only()?.into_matrix())
        }
    }
}
