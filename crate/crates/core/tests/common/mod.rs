#![allow(dead_code)]

use msnerf::encoding::HashGridConfig;
use msnerf::field::FieldConfig;
use msnerf::model::ModelConfig;
use msnerf::rays::{Ray, Vec3};
use msnerf::sampling::ProposalConfig;

/// A model small enough to finite-difference every parameter.
pub fn toy_config(bands: usize, final_samples: usize) -> ModelConfig {
    let grid = HashGridConfig { levels: 4, features_per_level: 2, log2_table_size: 8, base_resolution: 4, max_resolution: 32 };
    ModelConfig {
        field: FieldConfig {
            band_count: bands,
            grid,
            base_hidden_dim: 16,
            base_hidden_layers: 1,
            geo_feature_dim: 7,
            color_hidden_dim: 16,
            color_hidden_layers: 1,
        },
        proposal: ProposalConfig {
            samples_per_round: [8, 6],
            hash_max_resolution: [16, 32],
            hash_levels: [2, 3],
            log2_table_size: 8,
            base_resolution: 4,
            final_samples,
            ..Default::default()
        },
    }
}

pub fn toy_rays(n: usize) -> Vec<Ray> {
    (0..n)
        .map(|i| Ray::new(Vec3::new(0.15 * i as f64 - 0.1, 0.05, 2.0), Vec3::new(0.02, -0.03, -1.0).normalize(), 0.5, 4.0))
        .collect()
}

