//! Shared fixtures for model-level tests.
#![allow(dead_code)]

use stsn_core::civil::CivilTime;
use stsn_core::features::encode_time;
use stsn_core::grid::GridSpec;
use stsn_core::model::{ModelConfig, ReadoutPool, Sample, StsnModel};
use stsn_core::rng::Rng;
use stsn_core::tensor::Tensor;

pub fn toy_grid() -> GridSpec {
    GridSpec::new(0.0, 0.02, 0.0, 0.02, 4, 4, 500.0).unwrap()
}

/// 4x4 grid, d=8, one residual block, T=3 (closeness/period/trend 1/1/1),
/// single-layer transformers. Small enough for exhaustive finite differences.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        rows: 4,
        cols: 4,
        channels: 2,
        poi_channels: 2,
        d: 8,
        resnet_blocks: 1,
        kernel: 3,
        scpe_levels: 3,
        scpe_branch: 2,
        heads: 2,
        spatial_layers: 1,
        temporal_layers: 1,
        ffn_mult: 2,
        closeness: 1,
        period: 1,
        trend: 1,
        period_span: 2,
        trend_span: 4,
        keep_ratio: 1.0,
        gumbel_tau: 1.0,
        readout: ReadoutPool::Token,
    }
}

pub fn toy_model(cfg: ModelConfig) -> StsnModel {
    StsnModel::new(cfg, &toy_grid()).unwrap()
}

/// Random sample with plausible time features and in-range values.
pub fn toy_sample(cfg: &ModelConfig, seed: u64) -> Sample {
    let mut rng = Rng::new(seed);
    let t = cfg.input_intervals();
    let shape = [cfg.channels, cfg.rows, cfg.cols];
    let inputs = (0..t)
        .map(|_| Tensor::from_fn(&shape, |_| rng.uniform(-0.9, 0.9)))
        .collect();
    let time_feats = (0..t)
        .map(|i| {
            let civil = CivilTime {
                year: 2019,
                month: 7,
                day: 1 + (i as u32 % 20),
                hour: (seed as u32 + 3 * i as u32) % 24,
                minute: 0,
            };
            encode_time(&civil).to_tensor()
        })
        .collect();
    let target = Tensor::from_fn(&shape, |_| rng.uniform(-0.9, 0.9));
    Sample {
        target_interval: 1000,
        inputs,
        time_feats,
        target: target.clone(),
        target_raw: target,
    }
}

/// Random normalized POI image.
pub fn toy_poi(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed ^ 0x5151);
    Tensor::from_fn(&[cfg.poi_channels, cfg.rows, cfg.cols], |_| {
        rng.uniform(-1.0, 1.0)
    })
}
