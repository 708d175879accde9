//! Benchmark fixtures shared by the criterion targets.

use fpmine_core::encoders::generate_synthetic_dataset;
use fpmine_core::{Dataset, EncoderConfig, SyntheticConfig, TrainConfig};

/// A synthetic dataset and a default training config fitted to it.
pub fn fixture(identities: usize, per_identity: usize) -> (Dataset, TrainConfig) {
    let ds = generate_synthetic_dataset(42, identities, per_identity, &SyntheticConfig::default())
        .expect("valid generator settings");
    let mut config = TrainConfig {
        eval_every: 0,
        ..TrainConfig::default()
    };
    config.model.encoder = EncoderConfig::default().with_dataset_dims(&ds.dims);
    (ds, config)
}
