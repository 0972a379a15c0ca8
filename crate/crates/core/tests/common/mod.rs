#![allow(dead_code)]

use std::path::Path;

use dbdc::backbone::NetworkConfig;
use dbdc::data::{generate_synthetic, Dataset, SynthConfig};
use dbdc::trainer::TrainerConfig;

/// Small two-modality dataset on disk.
pub fn tiny_dataset(dir: &Path, size: usize, train: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        train_per_modality: train,
        val_per_modality: 2,
        test_per_modality: 2,
        image_size: size,
        labeled_ratio: 0.25,
        seed,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, dir).unwrap();
    Dataset::open(dir).unwrap()
}

/// Network and schedule small enough for unit-scale runs.
pub fn tiny_config(epochs: usize, seed: u64) -> TrainerConfig {
    let mut cfg = TrainerConfig {
        network: NetworkConfig {
            base_width: 4,
            depth: 2,
            embed_dim: 8,
            ..NetworkConfig::default()
        },
        ..TrainerConfig::default()
    };
    cfg.train.epochs = epochs;
    cfg.train.seed = seed;
    cfg.train.lr = 1e-3;
    cfg.train.crop_size = 16;
    cfg.train.batch_labeled = 2;
    cfg.train.batch_unlabeled = 2;
    cfg.eval.window = 32;
    cfg.eval.stride = 16;
    cfg
}
