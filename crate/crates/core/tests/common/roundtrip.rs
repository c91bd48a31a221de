//! Property runners for the on-disk formats, returning the first failure
//! instead of panicking so the acceptance target can report it.

use std::path::Path;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use stepscore_core::datamodel::{load_manifest, write_manifest, Run, NUM_CLASSES, NUM_STEPS};
use stepscore_core::featureio::{read_features, write_features, HEADER_LEN};
use stepscore_core::{ClassId, FeatureSequence, FrameLabelSequence, Matrix, StepAttribute, VideoRecord};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn finite_f32() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO
}

/// Matrices whose values are exactly representable in the file's `f32`.
pub fn feature_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(finite_f32(), r * c)
            .prop_map(move |v| Matrix::from_vec(r, c, v.into_iter().map(f64::from).collect()))
    })
}

/// Canonical run lists: positive lengths, no two neighbours share a class.
pub fn label_runs(max_runs: usize, max_len: usize) -> impl Strategy<Value = FrameLabelSequence> {
    prop::collection::vec((0..NUM_CLASSES, 1..=max_len), 1..=max_runs).prop_map(|raw| {
        let mut runs: Vec<Run> = Vec::with_capacity(raw.len());
        for (mut c, len) in raw {
            if let Some(prev) = runs.last() {
                if prev.class.index() == c {
                    c = (c + 1) % NUM_CLASSES;
                }
            }
            runs.push(Run {
                class: ClassId::new(c).unwrap(),
                len,
            });
        }
        FrameLabelSequence::from_runs(runs).unwrap()
    })
}

fn attributes() -> impl Strategy<Value = [StepAttribute; NUM_STEPS]> {
    prop::array::uniform6(prop::sample::select(StepAttribute::ALL.to_vec()))
}

fn err(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

/// Write, read back, compare bit for bit; also check the file size.
pub fn hhaf(cases: u32, dir: &Path) -> Result<(), String> {
    let path = dir.join("prop.hhaf");
    runner(cases)
        .run(&feature_matrix(48, 24), |m| {
            let seq = FeatureSequence::new(m.clone()).map_err(err)?;
            let bytes = write_features(&seq, &path).map_err(err)?;
            prop_assert_eq!(bytes, HEADER_LEN + 4 * (m.rows() * m.cols()) as u64);
            prop_assert_eq!(std::fs::metadata(&path).map_err(err)?.len(), bytes);
            let back = read_features(&path).map_err(err)?;
            prop_assert_eq!(back.values().shape(), m.shape());
            let same = back
                .values()
                .as_slice()
                .iter()
                .zip(m.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same, "values changed");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone)]
struct ManifestCase {
    videos: Vec<(FrameLabelSequence, [StepAttribute; NUM_STEPS], f64, String)>,
    dim: usize,
}

fn manifest_case() -> impl Strategy<Value = ManifestCase> {
    let video = (label_runs(6, 8), attributes(), 0.0..=6.0f64, "[a-z0-9_-]{0,6}");
    (prop::collection::vec(video, 1..=4), 1usize..=3).prop_map(|(videos, dim)| ManifestCase { videos, dim })
}

/// Records (with real feature files) survive write + load unchanged, apart
/// from coming back sorted by id.
pub fn manifest(cases: u32, dir: &Path) -> Result<(), String> {
    let features = dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| e.to_string())?;
    let manifest = dir.join("manifest.json");
    runner(cases)
        .run(&manifest_case(), |case| {
            let mut records = Vec::new();
            for (i, (labels, attributes, gt_score, suffix)) in case.videos.iter().enumerate() {
                let id = format!("v{}{suffix}", case.videos.len() - i);
                let path = features.join(format!("{id}.hhaf"));
                let m = Matrix::filled(labels.len(), case.dim, i as f64 + 0.5);
                write_features(&FeatureSequence::new(m).map_err(err)?, &path).map_err(err)?;
                records.push(VideoRecord {
                    id,
                    feature_path: path,
                    labels: labels.clone(),
                    attributes: *attributes,
                    gt_score: *gt_score,
                });
            }
            write_manifest(&manifest, &records).map_err(err)?;
            let back = load_manifest(&manifest).map_err(err)?;
            records.sort_by(|a, b| a.id.cmp(&b.id));
            prop_assert_eq!(back, records);
            Ok(())
        })
        .map_err(|e| e.to_string())
}
