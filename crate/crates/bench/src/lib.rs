//! Shared fixtures for the benchmarks.

use fnri_core::experiment::ExperimentConfig;
use fnri_core::model::Batch;
use fnri_core::sim::{generate_dataset, DatasetSplits, SplitCounts};

/// A small simulated dataset with the default simulator settings.
pub fn small_splits(train: usize) -> DatasetSplits {
    let cfg = ExperimentConfig::desk();
    let counts = SplitCounts {
        train,
        validation: 1,
        test: 1,
    };
    generate_dataset(&cfg.simulator, counts, 7).expect("default simulator config is valid")
}

/// The first `batch` training trajectories as model input.
pub fn training_batch(splits: &DatasetSplits, batch: usize) -> Batch {
    let cfg = ExperimentConfig::desk();
    let indices: Vec<usize> = (0..batch).collect();
    Batch::from_dataset(&splits.train, &indices, &cfg.model).expect("dataset long enough")
}
