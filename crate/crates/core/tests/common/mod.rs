#![allow(dead_code)]

use diffmatch::datasets::synthetic::{generate, SyntheticConfig};
use diffmatch::diffusion::{ToyUnet, ToyUnetConfig};
use diffmatch::training::{ProviderKind, TrainConfig, TrainingPair};
use diffmatch::Scalar;

/// Synthetic pairs loaded at their native resolution.
pub fn synthetic_pairs<T: Scalar>(pairs: usize, size: usize, keypoints: usize, seed: u64) -> Vec<TrainingPair<T>> {
    let cfg = SyntheticConfig {
        pairs,
        image_size: size,
        keypoints,
        max_shift: (size / 8).max(1) as i32,
        seed,
        ..Default::default()
    };
    generate(&cfg)
        .unwrap()
        .iter()
        .map(|p| TrainingPair::from_rgb(&p.pair, &p.image_a, &p.image_b, size).unwrap())
        .collect()
}

pub fn toy<T: Scalar>(size: usize) -> ToyUnet<T> {
    ToyUnet::new(ToyUnetConfig::default(), size)
}

/// Small, fast configuration for tests on `size`-pixel images.
pub fn small_config(size: usize, provider: ProviderKind) -> TrainConfig {
    TrainConfig {
        steps: 10,
        batch_pairs: 2,
        image_size: size,
        provider,
        prompt_length: 8,
        checkpoint_every: 0,
        seed: 3,
        ..Default::default()
    }
}

/// The 8-pair overfit set: 32 px images, noise-free features, sharp targets.
pub fn overfit_setup() -> (Vec<TrainingPair<f32>>, ToyUnet<f32>, TrainConfig) {
    let size = 32;
    let data = synthetic_pairs(8, size, 8, 7);
    let cfg = TrainConfig {
        steps: 500,
        batch_pairs: 8,
        image_size: size,
        provider: ProviderKind::Single,
        t_train: 0,
        t_infer: 0,
        sigma: 0.3,
        lr_prompt: 0.1,
        seed: 1,
        checkpoint_every: 0,
        ..Default::default()
    };
    (data, toy(size), cfg)
}
