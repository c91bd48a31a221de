//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod gradcheck;
pub mod roundtrip;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepscore_core::datamodel::ModelConfig;
use stepscore_core::harness::RunConfig;
use stepscore_core::synthgen::GeneratorSpec;
use stepscore_core::{AttentionMode, FrameLabelSequence, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn labels(pairs: &[[usize; 2]]) -> FrameLabelSequence {
    FrameLabelSequence::from_pairs(pairs).unwrap()
}

/// Elementwise inner product.
pub fn dot(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Small synthetic corpus: 64-wide features, step lengths and gaps at the
/// generator defaults.
pub fn small_spec(seed: u64, n_videos: usize, noise_sigma: f64, train_fraction: f64) -> GeneratorSpec {
    GeneratorSpec {
        seed,
        n_videos,
        feature_dim: 64,
        noise_sigma,
        train_fraction,
        ..GeneratorSpec::default()
    }
}

/// Desk-scale network matching [`small_spec`].
pub fn small_model() -> ModelConfig {
    ModelConfig {
        stages: 3,
        layers_per_stage: 6,
        hidden_dim: 32,
        appearance_dim: 32,
        attention_mode: AttentionMode::Linear,
        ..ModelConfig::default()
    }
}

pub fn small_run(seed: u64, epochs: usize) -> RunConfig {
    let mut c = RunConfig {
        seed,
        model: small_model(),
        ..RunConfig::default()
    };
    c.optimizer.learning_rate = 0.002;
    c.training.epochs = epochs;
    c.training.eval_every = 5;
    c
}

/// Tiny network for fast plumbing tests.
pub fn tiny_run(seed: u64, epochs: usize) -> RunConfig {
    let mut c = small_run(seed, epochs);
    c.model.stages = 2;
    c.model.layers_per_stage = 2;
    c.model.hidden_dim = 8;
    c
}
