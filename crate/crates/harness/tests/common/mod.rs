#![allow(dead_code)]

use dbs_harness::ExperimentConfig;

/// A synthetic task small enough for debug-speed tests.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(
        "
name = tiny
synthetic_samples = 240
synthetic_features = 6
synthetic_priors = 0.6, 0.3, 0.1
synthetic_seed = 7
sequence_length = 2
hidden1 = 4
hidden2 = 3
dense_units = 6
dropout = 0.2
max_epochs = 6
patience = 2
seeds = 1, 2, 3
sweep_seeds = 2
",
        None,
    )
    .unwrap();
    cfg
}
