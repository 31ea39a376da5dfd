#![allow(dead_code)]

use mist::data::{Dataset, DatasetConfig};
use mist::models::ModelConfig;
use mist::train::{self, PretrainOutcome, TrainConfig};

/// Small dataset for tests that only need the plumbing.
pub fn small_dataset(seed: u64) -> Dataset {
    Dataset::generate(&DatasetConfig {
        seed,
        pretrain_size: 128,
        pretrain_heldout_size: 32,
        train_size: 96,
        eval_pairs: 20,
        ..DatasetConfig::default()
    })
    .unwrap()
}

pub fn short_train(seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 5,
        epochs: 2,
        pretrain_seed: seed,
        train_seed: seed,
        ..TrainConfig::default()
    }
}

pub fn pretrained(ds: &Dataset, cfg: &TrainConfig) -> PretrainOutcome {
    train::pretrain(
        &ds.splits.pretrain,
        &ds.splits.pretrain_heldout,
        &ModelConfig::default(),
        cfg,
        serde_json::Value::Null,
    )
    .unwrap()
}
