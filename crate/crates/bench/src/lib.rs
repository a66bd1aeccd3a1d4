//! Shared inputs for the benchmarks.

use edgedis::autodiff::Matrix;
use edgedis::data::{generate_synthetic, DatasetBundle, SynthSpec};
use edgedis::model::TrainConfig;

/// Default two-relation synthetic graph with `per_class` nodes per class.
pub fn synthetic(per_class: usize) -> DatasetBundle {
    let spec = SynthSpec {
        nodes_per_class: per_class,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec).expect("default spec is valid").0
}

/// The smaller model used for synthetic experiments.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        channels: 4,
        d_channel: 8,
        hidden: 32,
        layer2_out: 32,
        scorer_hidden: 16,
        classifier_hidden: 32,
        disc_hidden: 16,
        max_epochs: 1,
        ..TrainConfig::default()
    }
}

pub fn dense(rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}
