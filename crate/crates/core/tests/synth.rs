mod common;

use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use sha2::{Digest, Sha256};
use stepscore_core::datamodel::{load_manifest, NUM_CLASSES, NUM_STEPS};
use stepscore_core::synthgen::{class_prototypes, generate_dataset, generate_video, rubric_score, GeneratorSpec, Rubric};
use stepscore_core::{ClassId, Error, StepAttribute};

fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                let name = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(name, format!("{digest:x}"));
            }
        }
    }
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let spec = common::small_spec(42, 6, 0.5, 0.5);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&spec, a.path()).unwrap();
    generate_dataset(&spec, b.path()).unwrap();
    let (ha, hb) = (hash_tree(a.path()), hash_tree(b.path()));
    assert_eq!(ha.len(), 6 + 3);
    assert_eq!(ha, hb);

    let other = tempfile::tempdir().unwrap();
    generate_dataset(&GeneratorSpec { seed: 43, ..spec }, other.path()).unwrap();
    assert_ne!(hash_tree(other.path())["features/video_00000.hhaf"], ha["features/video_00000.hhaf"]);
}

#[test]
fn split_follows_three_to_one_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        n_videos: 8,
        ..common::small_spec(1, 8, 0.1, 0.75)
    };
    let paths = generate_dataset(&spec, dir.path()).unwrap();
    let train = load_manifest(&paths.train_manifest).unwrap();
    let test = load_manifest(&paths.test_manifest).unwrap();
    assert_eq!((train.len(), test.len()), (6, 2));
    for r in train.iter().chain(&test) {
        assert_eq!(r.load_features().unwrap().dim(), 64);
    }
    let empty = GeneratorSpec { n_videos: 0, ..spec };
    assert!(matches!(generate_dataset(&empty, dir.path()), Err(Error::EmptyDataset)));
}

#[test]
fn rubric_fixtures() {
    use StepAttribute::*;
    let r = Rubric::default();
    assert_eq!(rubric_score(&[ExistsStandard; 6], &r), ([1.0; 6], 6.0));
    assert_eq!(rubric_score(&[NotExisting; 6], &r), ([0.0; 6], 0.0));
    let mixed = [ExistsStandard, ExistsNonstandard, NotExisting, ExistsStandard, ExistsStandard, ExistsNonstandard];
    assert_eq!(rubric_score(&mixed, &r).1, 4.0);
}

#[test]
fn forced_not_existing_step_lowers_score_by_one() {
    let mut attrs = [StepAttribute::ExistsStandard; NUM_STEPS];
    let spec = GeneratorSpec {
        forced_attributes: Some(attrs),
        ..common::small_spec(9, 1, 0.2, 1.0)
    };
    let (full, _) = generate_video(&spec, 0).unwrap();
    attrs[2] = StepAttribute::NotExisting;
    let twin_spec = GeneratorSpec {
        forced_attributes: Some(attrs),
        ..spec.clone()
    };
    let (twin, _) = generate_video(&twin_spec, 0).unwrap();
    assert!(twin.labels.runs().iter().all(|r| r.class != ClassId::step(3)));
    assert!((full.gt_score - twin.gt_score - 1.0).abs() < 1e-12);
    let order: Vec<usize> = full.labels.runs().iter().filter_map(|r| r.class.step_index()).collect();
    assert_eq!(order, (0..NUM_STEPS).collect::<Vec<_>>());
}

fn nearest_prototype(protos: &stepscore_core::Matrix, row: &[f64]) -> usize {
    (0..NUM_CLASSES)
        .min_by(|&a, &b| {
            let d = |c: usize| protos.row(c).iter().zip(row).map(|(p, x)| (p - x).powi(2)).sum::<f64>();
            d(a).total_cmp(&d(b))
        })
        .unwrap()
}

/// Without noise every frame, including corrupted key-action frames, is
/// closest to its own class prototype.
#[test]
fn noise_free_frames_are_separable() {
    let spec = common::small_spec(5, 12, 0.0, 1.0);
    let protos = class_prototypes(&spec);
    for i in 0..spec.n_videos {
        let (record, features) = generate_video(&spec, i).unwrap();
        for (t, class) in record.labels.decode().into_iter().enumerate() {
            assert_eq!(nearest_prototype(&protos, features.values().row(t)), class.index(), "video {i} frame {t}");
        }
    }
}

#[test]
fn rubric_is_monotone() {
    use StepAttribute::*;
    let r = Rubric::default();
    let levels = [NotExisting, ExistsNonstandard, ExistsStandard];
    for step in 0..NUM_STEPS {
        for w in levels.windows(2) {
            let mut lo = [ExistsNonstandard; NUM_STEPS];
            let mut hi = lo;
            lo[step] = w[0];
            hi[step] = w[1];
            assert!(rubric_score(&hi, &r).1 >= rubric_score(&lo, &r).1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generated_videos_are_well_formed(seed in any::<u64>(), index in 0usize..1000) {
        let spec = GeneratorSpec { seed, feature_dim: 14, ..GeneratorSpec::default() };
        let (record, features) = generate_video(&spec, index).unwrap();
        prop_assert_eq!(features.frames(), record.labels.len());
        let steps: Vec<usize> = record.labels.runs().iter().filter_map(|r| r.class.step_index()).collect();
        prop_assert!(steps.windows(2).all(|w| w[0] < w[1]), "steps out of order or repeated: {:?}", steps);
        for (i, a) in record.attributes.iter().enumerate() {
            prop_assert_eq!(a.is_present(), steps.contains(&i));
        }
        prop_assert_eq!(record.gt_score, rubric_score(&record.attributes, &spec.rubric).1);
        let (again, f2) = generate_video(&spec, index).unwrap();
        prop_assert_eq!(again, record);
        prop_assert_eq!(f2, features);
    }
}
