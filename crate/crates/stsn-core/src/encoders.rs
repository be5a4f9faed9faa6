//! The three per-interval feature encoders of the spatial encoder: a
//! residual CNN over the measurement image (LFE), the same architecture over
//! the POI image (SFE), and a two-layer MLP over the temporal features (TFE).

use alloc::format;
use alloc::vec::Vec;

use crate::params::{insert_bn, insert_conv, insert_conv_no_bias, insert_linear, Binder, ParamSet};
use crate::rng::Rng;
use crate::tape::{BnMode, BnStats, Tape, Var};
use crate::tensor::TensorError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Residual CNN configuration shared by LFE and SFE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResNetConfig {
    pub in_channels: usize,
    /// Feature dimension d; must be even (the sampler splits it in half).
    pub d: usize,
    /// Residual block count m.
    pub blocks: usize,
    /// Conv kernel size; odd so same-padding preserves H x W.
    pub kernel: usize,
}

impl ResNetConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !self.d.is_multiple_of(2) || self.blocks == 0 || self.kernel.is_multiple_of(2) {
            return Err(crate::tensor::shape_err(
                "resnet_config",
                format!(
                    "d={} (must be even), blocks={}, kernel={} (must be odd)",
                    self.d, self.blocks, self.kernel
                ),
            ));
        }
        Ok(())
    }
}

/// Inserts the parameters of one residual encoder under `prefix` ("lfe" or
/// "sfe").
pub fn insert_resnet_params(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &ResNetConfig,
    rng: &mut Rng,
) {
    insert_conv_no_bias(
        params,
        &format!("{prefix}.conv_in"),
        cfg.in_channels,
        cfg.d,
        cfg.kernel,
        rng,
    );
    insert_bn(params, &format!("{prefix}.conv_in.bn"), cfg.d);
    for b in 0..cfg.blocks {
        insert_conv_no_bias(params, &format!("{prefix}.block{b}.conv1"), cfg.d, cfg.d, cfg.kernel, rng);
        insert_bn(params, &format!("{prefix}.block{b}.bn1"), cfg.d);
        insert_conv_no_bias(params, &format!("{prefix}.block{b}.conv2"), cfg.d, cfg.d, cfg.kernel, rng);
        insert_bn(params, &format!("{prefix}.block{b}.bn2"), cfg.d);
    }
    // The merge conv has no batch norm after it, so its bias is live.
    insert_conv(params, &format!("{prefix}.conv_out"), cfg.d, cfg.d, 1, rng);
}

/// Inserts the TFE parameters: two linear layers 10 -> d -> d.
pub fn insert_tfe_params(params: &mut ParamSet, d: usize, rng: &mut Rng) {
    insert_linear(params, "tfe.fc1", 10, d, rng);
    insert_linear(params, "tfe.fc2", d, d, rng);
}

/// Batch-norm application that routes the running statistics through the
/// parameter store: eval mode reads them, train mode reads and collects the
/// updated values into `bn_updates` for the caller to commit after the step.
#[allow(clippy::too_many_arguments)]
fn batch_norm(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    prefix: &str,
    x: Var,
    mode: BnMode,
    bn_updates: &mut Vec<(alloc::string::String, BnStats)>,
) -> Result<Var, TensorError> {
    let gamma = binder.var(tape, &format!("{prefix}.gamma"));
    let beta = binder.var(tape, &format!("{prefix}.beta"));
    let stats = binder.params().bn_stats(prefix);
    let (out, updated) = tape.batch_norm2d(x, gamma, beta, &stats, mode, BN_EPS, BN_MOMENTUM)?;
    if let Some(next) = updated {
        bn_updates.push((alloc::string::String::from(prefix), next));
    }
    Ok(out)
}

/// Residual encoder forward: initial conv (BN, GELU), `m` residual blocks
/// (conv-BN-GELU-conv-BN, skip add, GELU), then a 1x1 merge conv. The
/// `[d,H,W]` map is returned as region-major `[N,d]`.
#[allow(clippy::too_many_arguments)]
pub fn resnet_forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    prefix: &str,
    cfg: &ResNetConfig,
    image: Var,
    mode: BnMode,
    bn_updates: &mut Vec<(alloc::string::String, BnStats)>,
) -> Result<Var, TensorError> {
    cfg.validate()?;
    let shp = tape.value(image).shape().to_vec();
    if shp.len() != 3 || shp[0] != cfg.in_channels {
        return Err(crate::tensor::shape_err(
            "resnet_forward",
            format!("expected [{}, H, W], got {shp:?}", cfg.in_channels),
        ));
    }
    let (h, w) = (shp[1], shp[2]);

    let w_in = binder.var(tape, &format!("{prefix}.conv_in.weight"));
    let b_in = tape.constant(crate::tensor::Tensor::zeros(&[cfg.d]));
    let mut x = tape.conv2d(image, w_in, b_in)?;
    x = batch_norm(tape, binder, &format!("{prefix}.conv_in.bn"), x, mode, bn_updates)?;
    x = tape.gelu(x)?;

    for b in 0..cfg.blocks {
        let w1 = binder.var(tape, &format!("{prefix}.block{b}.conv1.weight"));
        let b1 = tape.constant(crate::tensor::Tensor::zeros(&[cfg.d]));
        let mut y = tape.conv2d(x, w1, b1)?;
        y = batch_norm(tape, binder, &format!("{prefix}.block{b}.bn1"), y, mode, bn_updates)?;
        y = tape.gelu(y)?;
        let w2 = binder.var(tape, &format!("{prefix}.block{b}.conv2.weight"));
        let b2 = tape.constant(crate::tensor::Tensor::zeros(&[cfg.d]));
        y = tape.conv2d(y, w2, b2)?;
        y = batch_norm(tape, binder, &format!("{prefix}.block{b}.bn2"), y, mode, bn_updates)?;
        x = tape.add(x, y)?;
        x = tape.gelu(x)?;
    }

    let w_out = binder.var(tape, &format!("{prefix}.conv_out.weight"));
    let b_out = binder.var(tape, &format!("{prefix}.conv_out.bias"));
    x = tape.conv2d(x, w_out, b_out)?;

    // [d, H, W] -> [d, N] -> [N, d]: region n = row * W + col keeps its
    // identity through the stride-1 same-padded stack.
    let flat = tape.reshape(x, &[cfg.d, h * w])?;
    tape.transpose2d(flat)
}

/// Local feature encoder: residual CNN over the normalized measurement image.
#[allow(clippy::too_many_arguments)]
pub fn lfe_forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &ResNetConfig,
    image: Var,
    mode: BnMode,
    bn_updates: &mut Vec<(alloc::string::String, BnStats)>,
) -> Result<Var, TensorError> {
    resnet_forward(tape, binder, "lfe", cfg, image, mode, bn_updates)
}

/// Semantic feature encoder: residual CNN over the normalized POI image.
/// Time-invariant, so callers compute it once per sample and reuse it for
/// every input interval.
#[allow(clippy::too_many_arguments)]
pub fn sfe_forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &ResNetConfig,
    poi_image: Var,
    mode: BnMode,
    bn_updates: &mut Vec<(alloc::string::String, BnStats)>,
) -> Result<Var, TensorError> {
    resnet_forward(tape, binder, "sfe", cfg, poi_image, mode, bn_updates)
}

/// Temporal feature encoder: MLP 10 -> d -> d with GELU after the first
/// layer. Returns the `[1, d]` representation; use
/// [`crate::tape::Tape::broadcast_rows`] to replicate it across regions.
pub fn tfe_forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    time_feat: Var,
    d: usize,
) -> Result<Var, TensorError> {
    let shp = tape.value(time_feat).shape();
    if shp != [1, 10] {
        return Err(crate::tensor::shape_err(
            "tfe_forward",
            format!("expected [1, 10], got {shp:?}"),
        ));
    }
    let w1 = binder.var(tape, "tfe.fc1.weight");
    let b1 = binder.var(tape, "tfe.fc1.bias");
    let w2 = binder.var(tape, "tfe.fc2.weight");
    let b2 = binder.var(tape, "tfe.fc2.bias");
    let mut x = tape.matmul(time_feat, w1)?;
    x = tape.add_bias(x, b1)?;
    x = tape.gelu(x)?;
    x = tape.matmul(x, w2)?;
    x = tape.add_bias(x, b2)?;
    debug_assert_eq!(tape.value(x).shape(), [1, d]);
    Ok(x)
}
