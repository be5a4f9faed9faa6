//! Analytic compute-cost model.
//!
//! Counts multiply-accumulate operations per component with the dominant-term
//! convention of common profilers: convolutions as k^2 * Cin * Cout * H * W,
//! linear layers as in * out per row, self-attention as the four token
//! projections 4 (s) d^2 plus score and mix terms 2 s^2 d per layer.
//! Activations, normalisations and softmax are excluded, so only comparisons
//! between configurations of this model are meaningful. One MAC is reported
//! as two FLOPs.

use crate::model::ModelConfig;
use crate::sampler::kept_count;

/// Per-component MAC counts for one forward pass (a full T-interval sample).
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub lfe: u64,
    pub sfe: u64,
    pub tfe: u64,
    pub scpe: u64,
    pub sampler: u64,
    pub gfe_attention: u64,
    pub gfe_ffn: u64,
    pub temporal: u64,
    pub predictor: u64,
    /// Echoed configuration.
    pub regions: usize,
    pub kept: usize,
    pub d: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub intervals: usize,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.lfe
            + self.sfe
            + self.tfe
            + self.scpe
            + self.sampler
            + self.gfe_attention
            + self.gfe_ffn
            + self.temporal
            + self.predictor
    }

    /// Giga-FLOPs at 2 FLOPs per MAC.
    pub fn gflops(&self) -> f64 {
        2.0 * self.total() as f64 / 1e9
    }

    pub fn components(&self) -> [(&'static str, u64); 9] {
        [
            ("lfe", self.lfe),
            ("sfe", self.sfe),
            ("tfe", self.tfe),
            ("scpe", self.scpe),
            ("sampler", self.sampler),
            ("gfe_attention", self.gfe_attention),
            ("gfe_ffn", self.gfe_ffn),
            ("temporal", self.temporal),
            ("predictor", self.predictor),
        ]
    }
}

/// MACs of the residual encoder: initial k x k conv lifting C -> d, m blocks
/// of two d -> d convs, and the 1 x 1 merge conv.
fn resnet_macs(in_channels: usize, cfg: &ModelConfig) -> u64 {
    let hw = (cfg.rows * cfg.cols) as u64;
    let (d, k) = (cfg.d as u64, cfg.kernel as u64);
    let init = k * k * in_channels as u64 * d * hw;
    let blocks = cfg.resnet_blocks as u64 * 2 * k * k * d * d * hw;
    let merge = d * d * hw;
    init + blocks + merge
}

/// Attention MACs for one layer over `s` tokens: QKV and output projections
/// plus the quadratic score/mix terms.
pub fn attention_layer_macs(s: usize, d: usize) -> u64 {
    let (s, d) = (s as u64, d as u64);
    4 * s * d * d + 2 * s * s * d
}

/// Score/mix share only (the quadratic term), exposed for the cost-curve
/// ratio checks.
pub fn attention_score_mix_macs(s: usize, d: usize) -> u64 {
    2 * (s as u64) * (s as u64) * (d as u64)
}

fn ffn_layer_macs(s: usize, d: usize, ffn_mult: usize) -> u64 {
    2 * (s as u64) * (d as u64) * (d as u64 * ffn_mult as u64)
}

/// Closed-form MAC counts for one forward pass at the given keep ratio.
/// The sampler counts only below keep ratio 1.0, where it exists; position
/// embedding lookups are free (pure gathers).
pub fn count_flops(cfg: &ModelConfig, keep_ratio: f64) -> FlopReport {
    let n = cfg.regions();
    let t = cfg.input_intervals() as u64;
    let d = cfg.d;
    let k = kept_count(keep_ratio, n);
    // Token count includes the prepended readout.
    let s_spatial = k + 1;
    let s_temporal = cfg.input_intervals() + 1;

    let sampler = if keep_ratio < 1.0 {
        t * (n as u64) * ((d as u64) * (d as u64) + 2 * d as u64)
    } else {
        0
    };

    FlopReport {
        lfe: t * resnet_macs(cfg.channels, cfg),
        sfe: resnet_macs(cfg.poi_channels, cfg),
        tfe: t * (10 * d as u64 + (d as u64) * (d as u64)),
        scpe: 0,
        sampler,
        gfe_attention: t
            * cfg.spatial_layers as u64
            * attention_layer_macs(s_spatial, d),
        gfe_ffn: t * cfg.spatial_layers as u64 * ffn_layer_macs(s_spatial, d, cfg.ffn_mult),
        temporal: cfg.temporal_layers as u64
            * (attention_layer_macs(s_temporal, d) + ffn_layer_macs(s_temporal, d, cfg.ffn_mult)),
        predictor: (d * cfg.channels * cfg.rows * cfg.cols) as u64,
        regions: n,
        kept: k,
        d,
        spatial_layers: cfg.spatial_layers,
        temporal_layers: cfg.temporal_layers,
        intervals: cfg.input_intervals(),
    }
}
