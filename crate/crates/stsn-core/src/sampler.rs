//! Lightweight region importance scoring and differentiable top-k pruning.
//!
//! Scoring applies per-region MLPs only (projection d -> d, scoring d -> 2),
//! so the parameter count is independent of how many regions the grid has.
//! Global context enters through the mean of the second feature half.
//! Selection perturbs the log keep-probabilities with Gumbel noise during
//! training (noise-free at inference) and takes the top-k; kept tokens are
//! rescaled by their differentiable keep probability so the scorer receives
//! gradient through hard selection.

use alloc::format;
use alloc::vec::Vec;

use crate::fmath;
use crate::params::{insert_linear, Binder, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{shape_err, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Training,
    Inference,
}

/// Outcome of sampling one interval's regions.
#[derive(Clone, Debug)]
pub struct SampleDecision {
    /// `[N, 2]` probabilities; column 0 drop, column 1 keep.
    pub rho: Tensor,
    /// Kept region ids, ascending.
    pub kept: Vec<usize>,
    /// Per-region scale applied to kept tokens: the keep probability during
    /// training, 1 at inference, 0 for dropped regions.
    pub soft_scale: Vec<f64>,
    pub mode: SampleMode,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SamplerError {
    OddFeatureDim(usize),
    InvalidK { k: usize, n: usize },
    NonPositiveTemperature(f64),
    IndexMismatch { expected: usize, got: usize },
    Tensor(TensorError),
}

impl core::fmt::Display for SamplerError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SamplerError::OddFeatureDim(d) => write!(f, "feature dim {d} must be even"),
            SamplerError::InvalidK { k, n } => write!(f, "k={k} outside [1, {n}]"),
            SamplerError::NonPositiveTemperature(t) => write!(f, "temperature {t} must be > 0"),
            SamplerError::IndexMismatch { expected, got } => {
                write!(f, "decision built for {expected} regions, got {got}")
            }
            SamplerError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SamplerError {}

impl From<TensorError> for SamplerError {
    fn from(e: TensorError) -> Self {
        SamplerError::Tensor(e)
    }
}

/// Inserts sampler parameters: projection (one linear layer + GELU) and the
/// two-logit scoring layer. Skipped entirely at keep ratio 1.0, where the
/// module is absent from the model.
pub fn insert_sampler_params(params: &mut ParamSet, d: usize, rng: &mut Rng) {
    insert_linear(params, "sampler.proj", d, d, rng);
    insert_linear(params, "sampler.score", d, 2, rng);
}

/// Number of kept regions for a keep ratio: round(ratio * N), clamped to
/// [1, N].
pub fn kept_count(keep_ratio: f64, n: usize) -> usize {
    (fmath::round(keep_ratio * n as f64) as usize).clamp(1, n)
}

/// Keep/drop probabilities per region.
///
/// `Z_sampler = GELU((Z_poi + Z_time) W + b)`; each row splits into a local
/// half and a global half averaged over all regions; the scoring layer maps
/// `[local || global]` to two logits, and a row-wise softmax yields rho.
pub fn score_regions(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    z_poi: Var,
    z_time: Var,
) -> Result<Var, SamplerError> {
    let shp = tape.value(z_poi).shape().to_vec();
    if shp.len() != 2 || tape.value(z_time).shape() != shp.as_slice() {
        return Err(SamplerError::Tensor(shape_err(
            "score_regions",
            format!(
                "Z_poi {:?} vs Z_time {:?}",
                shp,
                tape.value(z_time).shape()
            ),
        )));
    }
    let (n, d) = (shp[0], shp[1]);
    if d % 2 != 0 {
        return Err(SamplerError::OddFeatureDim(d));
    }
    let half = d / 2;

    let fused = tape.add(z_poi, z_time)?;
    let wp = binder.var(tape, "sampler.proj.weight");
    let bp = binder.var(tape, "sampler.proj.bias");
    let mut z = tape.matmul(fused, wp)?;
    z = tape.add_bias(z, bp)?;
    z = tape.gelu(z)?;

    let local = tape.slice(z, 1, 0, half)?;
    let second = tape.slice(z, 1, half, half)?;
    let global_mean = tape.mean(second, Some(0))?; // [half]
    let global_row = tape.reshape(global_mean, &[1, half])?;
    let global = tape.broadcast_rows(global_row, n)?;
    let cat = tape.concat(&[local, global], 1)?;

    let ws = binder.var(tape, "sampler.score.weight");
    let bs = binder.var(tape, "sampler.score.bias");
    let mut logits = tape.matmul(cat, ws)?;
    logits = tape.add_bias(logits, bs)?;
    Ok(tape.softmax(logits, 1)?)
}

/// Top-k selection over the keep column of rho.
///
/// Training mode ranks `(ln rho_keep + Gumbel) / tau` with noise drawn from
/// the caller's stream; inference ranks rho_keep directly and scales kept
/// tokens by 1. Ties break toward the lower region index.
pub fn gumbel_topk(
    rho: &Tensor,
    k: usize,
    tau: f64,
    mode: SampleMode,
    rng: &mut Rng,
) -> Result<SampleDecision, SamplerError> {
    let shp = rho.shape();
    if shp.len() != 2 || shp[1] != 2 {
        return Err(SamplerError::Tensor(shape_err(
            "gumbel_topk",
            format!("rho must be [N, 2], got {shp:?}"),
        )));
    }
    let n = shp[0];
    if k == 0 || k > n {
        return Err(SamplerError::InvalidK { k, n });
    }
    if tau <= 0.0 {
        return Err(SamplerError::NonPositiveTemperature(tau));
    }
    let mut scores: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let keep_p = rho.at2(i, 1);
            let s = match mode {
                SampleMode::Training => (fmath::ln(keep_p) + rng.gumbel()) / tau,
                SampleMode::Inference => keep_p,
            };
            (s, i)
        })
        .collect();
    // Descending score, ascending index on ties.
    scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = scores[..k].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();

    let mut soft_scale = alloc::vec![0.0; n];
    for &i in &kept {
        soft_scale[i] = match mode {
            SampleMode::Training => rho.at2(i, 1),
            SampleMode::Inference => 1.0,
        };
    }
    Ok(SampleDecision {
        rho: rho.clone(),
        kept,
        soft_scale,
        mode,
    })
}

/// Gathers the kept token rows. During training each kept row is multiplied
/// by its keep probability taken from the live rho graph node, giving the
/// scoring MLP a gradient path through the otherwise hard selection.
pub fn apply_selection(
    tape: &mut Tape,
    tokens: Var,
    rho: Var,
    decision: &SampleDecision,
) -> Result<Var, SamplerError> {
    let shp = tape.value(tokens).shape().to_vec();
    if shp.len() != 2 || shp[0] != decision.soft_scale.len() {
        return Err(SamplerError::IndexMismatch {
            expected: decision.soft_scale.len(),
            got: shp.first().copied().unwrap_or(0),
        });
    }
    let d = shp[1];
    let gathered = tape.gather_rows(tokens, &decision.kept)?;
    match decision.mode {
        SampleMode::Inference => Ok(gathered),
        SampleMode::Training => {
            let keep_col = tape.slice(rho, 1, 1, 1)?; // [N, 1]
            let kept_scale = tape.gather_rows(keep_col, &decision.kept)?; // [k, 1]
            let scale = tape.broadcast_cols(kept_scale, d)?;
            Ok(tape.mul(gathered, scale)?)
        }
    }
}
