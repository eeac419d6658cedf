#![allow(dead_code)]

use danp::augment::NoiseSchedule;
use danp::datagen::{
    sample_task, sample_task_with_context_size, GeneratorKind, GeneratorSpec, Task,
};
use danp::models::{BaseHead, ModelSpec, NeuralProcess};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A small model that keeps tests fast.
pub fn small_spec(levels: usize, head: BaseHead) -> ModelSpec {
    let schedule = if levels == 0 {
        NoiseSchedule::none()
    } else {
        NoiseSchedule::from_beta(levels, 0.1).unwrap()
    };
    ModelSpec {
        rank: 4,
        unet_levels: 2,
        unet_channels: 6,
        unet_kernel: 5,
        unet_stride: 2,
        points_per_unit: 16.0,
        ..ModelSpec::danp(schedule, head)
    }
}

pub fn small_model(levels: usize, head: BaseHead, seed: u64) -> NeuralProcess {
    NeuralProcess::init(
        small_spec(levels, head),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sawtooth_task(seed: u64, nc: usize, nt: usize) -> Task {
    let spec = GeneratorSpec::default_for(GeneratorKind::Sawtooth, seed);
    sample_task_with_context_size(&spec, &mut rng(seed), nc, nt).unwrap()
}

pub fn gp_task(seed: u64, nc: usize, nt: usize) -> Task {
    let spec = GeneratorSpec::default_for(GeneratorKind::Gp, seed);
    sample_task_with_context_size(&spec, &mut rng(seed), nc, nt).unwrap()
}

pub fn random_task(kind: GeneratorKind, seed: u64) -> Task {
    let spec = GeneratorSpec::default_for(kind, seed);
    sample_task(&spec, &mut rng(seed), 0..=30, 50).unwrap()
}
