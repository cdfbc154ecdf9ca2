//! Ready-made configurations for the bundled synthetic corpus.

use crate::config::Config;
use crate::dataset::{Corpus, DatasetSpec};
use crate::discriminator::DiscriminatorConfig;
use crate::error::Result;
use crate::evaluator::{ClassifierConfig, EvalConfig};
use crate::generator::GeneratorConfig;
use crate::synth::synthetic_corpus;

/// Ten 8x8 classes (eight source, two target) with six images each.
pub fn tiny_corpus() -> Result<Corpus> {
    synthetic_corpus(10, 6, 8, 0)
}

/// Smallest usable networks; for tests and gradient checks.
pub fn tiny(dataset: &DatasetSpec) -> Config {
    let mut c = Config {
        dataset: dataset.clone(),
        ..Config::default()
    };
    c.dataset.image_size = 8;
    c.generator = GeneratorConfig {
        image_size: 8,
        downsamples: 1,
        base_channels: 4,
        content_resblocks: 1,
        adain_resblocks: 1,
        class_downsamples: 1,
        class_code_dim: 8,
        mlp_hidden: 16,
        ..GeneratorConfig::default()
    };
    c.discriminator = DiscriminatorConfig {
        base_channels: 4,
        stage_multipliers: vec![2],
        blocks_per_stage: 1,
        ..DiscriminatorConfig::default()
    };
    c.trainer.batch_size = 2;
    c.trainer.lr = 1e-3;
    c.trainer.total_steps = 4;
    c.eval = EvalConfig {
        content_images: 4,
        shots: vec![1, 2],
        is_splits: 1,
        batch_size: 8,
        seed: 0,
        classifier: ClassifierConfig {
            channels: vec![4, 8, 8],
            epochs: 1,
            min_images: 2,
            ..ClassifierConfig::default()
        },
    };
    c
}

/// Reduced-width networks for 32x32 runs on a few CPU cores.
pub fn desk(dataset: &DatasetSpec) -> Config {
    let mut c = Config {
        dataset: dataset.clone(),
        ..Config::default()
    };
    c.dataset.image_size = 32;
    c.generator = GeneratorConfig {
        image_size: 32,
        base_channels: DESK_WIDTH,
        class_code_dim: 64,
        mlp_hidden: 128,
        ..GeneratorConfig::default()
    };
    c.discriminator = DiscriminatorConfig {
        base_channels: DESK_WIDTH,
        ..DiscriminatorConfig::default()
    };
    c
}

/// Base channel count of the desk preset.
pub const DESK_WIDTH: usize = 16;
