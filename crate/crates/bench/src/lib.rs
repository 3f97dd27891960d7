//! Fixtures shared by the benchmarks.

use orca_core::datasets::{apply_open_world_split, generate_gaussian_mixture};
use orca_core::{Matrix, Model, ModelConfig, OpenWorldDataset, Rng, SplitConfig};

/// The 6-class, 2-D separable mixture used by the default experiment.
pub fn mixture(per_class: usize) -> OpenWorldDataset {
    let (x, y) = generate_gaussian_mixture(6, 2, per_class, 8.0, 1.0, &mut Rng::new(0)).unwrap();
    apply_open_world_split(x, y, &SplitConfig::default()).unwrap()
}

/// The default backbone shape (`[256]` hidden, 64-dim embedding) for `ds`.
pub fn default_model(ds: &OpenWorldDataset) -> Model {
    let cfg = ModelConfig {
        input_dim: ds.num_features(),
        hidden_dims: vec![256],
        embed_dim: 64,
        num_seen_heads: ds.seen_classes.len(),
        extra_head_capacity: ds.novel_classes.len(),
        dropout_rate: 0.0,
        frozen_layers: vec![],
    };
    Model::init(cfg, &mut Rng::new(3)).unwrap()
}

/// Uniform random entries in `[0, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform()).collect()).unwrap()
}
