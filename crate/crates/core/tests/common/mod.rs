#![allow(dead_code)]

use czsl::synthdata::{generate_dataset, Dataset, PrimitiveVocab, SplitSpec};
use czsl::trainer::TrainConfig;

/// 4×3 grid, 2:8 split, a handful of images per class.
pub fn tiny_dataset(seed: u64) -> Dataset {
    let spec = SplitSpec { seed, train_per_class: 4, val_per_class: 2, test_per_class: 2, ..SplitSpec::default() };
    generate_dataset(&PrimitiveVocab::grid(4, 3).unwrap(), &spec).unwrap()
}

/// Small model and few epochs so a run takes well under a second.
pub fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 1e-3,
        proto_dim: 16,
        graph_hidden: 24,
        grid_steps: 51,
        ..TrainConfig::default()
    }
}
