//! Full network assembly: token fusion, the global feature encoder
//! (transformer over kept region tokens), the temporal encoder (transformer
//! over interval representations) and the tanh prediction head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoders::{insert_resnet_params, insert_tfe_params, lfe_forward, sfe_forward,
    tfe_forward, ResNetConfig};
use crate::fmath;
use crate::params::{embedding_init, insert_linear, Binder, ParamSet};
use crate::rng::Rng;
use crate::sampler::{apply_selection, gumbel_topk, insert_sampler_params, kept_count,
    score_regions, SampleDecision, SampleMode, SamplerError};
use crate::scpe::{build_hierarchy, ScpeLayout};
use crate::tape::{BnMode, BnStats, Tape, Var};
use crate::tensor::{shape_err, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

/// How a transformer stack reduces its token set to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadoutPool {
    /// Learnable readout token prepended to the sequence (default; keeps
    /// teacher and student representations comparable across region subsets).
    Token,
    /// Mean over all token outputs.
    Mean,
}

/// All architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub rows: usize,
    pub cols: usize,
    /// Measurement channels M.
    pub channels: usize,
    /// POI category channels P.
    pub poi_channels: usize,
    pub d: usize,
    pub resnet_blocks: usize,
    pub kernel: usize,
    pub scpe_levels: usize,
    pub scpe_branch: usize,
    pub heads: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub ffn_mult: usize,
    pub closeness: usize,
    pub period: usize,
    pub trend: usize,
    pub period_span: i64,
    pub trend_span: i64,
    pub keep_ratio: f64,
    pub gumbel_tau: f64,
    pub readout: ReadoutPool,
}

impl ModelConfig {
    /// Reference configuration for real-city grids: d = 128, three residual
    /// blocks, three hierarchy levels, closeness/period/trend 4/3/2 on
    /// hourly intervals.
    pub fn city_default(rows: usize, cols: usize, channels: usize, poi_channels: usize) -> Self {
        ModelConfig {
            rows,
            cols,
            channels,
            poi_channels,
            d: 128,
            resnet_blocks: 3,
            kernel: 3,
            scpe_levels: 3,
            scpe_branch: 4,
            heads: 8,
            spatial_layers: 2,
            temporal_layers: 2,
            ffn_mult: 4,
            closeness: 4,
            period: 3,
            trend: 2,
            period_span: 24,
            trend_span: 168,
            keep_ratio: 1.0,
            gumbel_tau: 1.0,
            readout: ReadoutPool::Token,
        }
    }

    /// Default for the synthetic 20x20 benchmark: one residual block keeps
    /// the convolutional share of the cost model small enough that attention
    /// pruning dominates the total.
    pub fn synth_default(rows: usize, cols: usize, channels: usize, poi_channels: usize) -> Self {
        ModelConfig {
            resnet_blocks: 1,
            ..Self::city_default(rows, cols, channels, poi_channels)
        }
    }

    /// Input interval count T = closeness + period + trend.
    pub fn input_intervals(&self) -> usize {
        self.closeness + self.period + self.trend
    }

    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn kept_regions(&self) -> usize {
        kept_count(self.keep_ratio, self.regions())
    }

    /// The sampler exists only below keep ratio 1.0; at 1.0 full attention
    /// runs and the module contributes no parameters.
    pub fn sampler_active(&self) -> bool {
        self.keep_ratio < 1.0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(ModelError::Config(format!("d={} must be positive even", self.d)));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.input_intervals() == 0 {
            return Err(ModelError::Config("closeness+period+trend must be >= 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!("kernel={} must be odd", self.kernel)));
        }
        if !(0.0 < self.keep_ratio && self.keep_ratio <= 1.0) {
            return Err(ModelError::Config(format!(
                "keep_ratio={} outside (0, 1]",
                self.keep_ratio
            )));
        }
        if self.gumbel_tau <= 0.0 {
            return Err(ModelError::Config(format!(
                "gumbel_tau={} must be > 0",
                self.gumbel_tau
            )));
        }
        if self.scpe_levels < 1 || (self.scpe_levels > 1 && self.scpe_branch < 2) {
            return Err(ModelError::Config("invalid scpe hierarchy".into()));
        }
        Ok(())
    }

    fn lfe_config(&self) -> ResNetConfig {
        ResNetConfig {
            in_channels: self.channels,
            d: self.d,
            blocks: self.resnet_blocks,
            kernel: self.kernel,
        }
    }

    fn sfe_config(&self) -> ResNetConfig {
        ResNetConfig {
            in_channels: self.poi_channels,
            d: self.d,
            blocks: self.resnet_blocks,
            kernel: self.kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    Config(String),
    Tensor(TensorError),
    Sampler(SamplerError),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::Config(s) => write!(f, "config error: {s}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Sampler(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<SamplerError> for ModelError {
    fn from(e: SamplerError) -> Self {
        ModelError::Sampler(e)
    }
}

/// One training/evaluation sample: T normalized input images (oldest first),
/// their temporal feature rows, and the normalized target image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub target_interval: i64,
    /// T tensors `[M, H, W]`, values in [-1, 1].
    pub inputs: Vec<Tensor>,
    /// T rows `[1, 10]`.
    pub time_feats: Vec<Tensor>,
    /// `[M, H, W]`, values in [-1, 1].
    pub target: Tensor,
    /// `[M, H, W]` raw counts for reporting metrics.
    pub target_raw: Tensor,
}

/// Forward execution mode. Training draws Gumbel noise, scales kept tokens
/// by their keep probability, uses batch statistics in batch norm and (below
/// keep ratio 1) runs the gradient-blocked teacher pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass produces.
pub struct ForwardOutput<'p> {
    pub binder: Binder<'p>,
    /// `[M, H, W]` normalized prediction.
    pub prediction: Var,
    /// Per-interval student spatial representations `[1, d]`.
    pub student_reps: Vec<Var>,
    /// Gradient-blocked teacher representations; empty unless training with
    /// keep ratio < 1 (or when skipped by options).
    pub teacher_reps: Vec<Tensor>,
    /// Per-interval sampling decisions; empty at keep ratio 1.0.
    pub decisions: Vec<SampleDecision>,
    /// Batch-norm running-stat updates to commit after the step.
    pub bn_updates: Vec<(String, BnStats)>,
    /// Captured per-interval, per-layer attention tensors `[h, s, s]` from
    /// the student's spatial encoder.
    pub attention: Vec<Vec<Tensor>>,
}

/// Forward options beyond the mode.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    pub capture_attention: bool,
    /// Skip the teacher pass even when it would run; used by gradient checks
    /// that must hold the distillation target fixed.
    pub skip_teacher: bool,
    /// Normalise with running statistics even in training mode. Gradient
    /// checks need this: with batch statistics a conv bias cancels exactly,
    /// leaving a zero gradient that central differences can only resolve as
    /// roundoff noise.
    pub bn_eval: bool,
}

/// Model = configuration + position-embedding hierarchy.
#[derive(Clone, Debug)]
pub struct StsnModel {
    pub cfg: ModelConfig,
    pub scpe: ScpeLayout,
}

impl StsnModel {
    pub fn new(cfg: ModelConfig, grid: &crate::grid::GridSpec) -> Result<Self, ModelError> {
        cfg.validate()?;
        if grid.rows != cfg.rows || grid.cols != cfg.cols {
            return Err(ModelError::Config(format!(
                "grid {}x{} does not match config {}x{}",
                grid.rows, grid.cols, cfg.rows, cfg.cols
            )));
        }
        let scpe = build_hierarchy(grid, cfg.scpe_levels, cfg.scpe_branch.max(2), cfg.d);
        Ok(StsnModel { cfg, scpe })
    }

    /// Fresh parameter set. Sampler parameters exist only when the keep
    /// ratio is below 1.0.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let cfg = &self.cfg;
        let mut params = ParamSet::new();
        insert_resnet_params(&mut params, "lfe", &cfg.lfe_config(), rng);
        insert_resnet_params(&mut params, "sfe", &cfg.sfe_config(), rng);
        insert_tfe_params(&mut params, cfg.d, rng);
        self.scpe.insert_params(&mut params, rng);
        if cfg.sampler_active() {
            insert_sampler_params(&mut params, cfg.d, rng);
        }
        insert_encoder_stack_params(&mut params, "gfe", cfg.d, cfg.spatial_layers, cfg.ffn_mult, rng);
        insert_encoder_stack_params(
            &mut params,
            "temporal",
            cfg.d,
            cfg.temporal_layers,
            cfg.ffn_mult,
            rng,
        );
        if cfg.readout == ReadoutPool::Token {
            params.insert("readout.spatial", embedding_init(&[1, cfg.d], rng));
            params.insert("readout.temporal", embedding_init(&[1, cfg.d], rng));
        }
        insert_linear(
            &mut params,
            "predictor",
            cfg.d,
            cfg.channels * cfg.rows * cfg.cols,
            rng,
        );
        params
    }

    /// Element-wise fusion of the four per-region feature maps.
    pub fn fuse_tokens(
        &self,
        tape: &mut Tape,
        z_l: Var,
        z_poi: Var,
        z_time: Var,
        pos: Var,
    ) -> Result<Var, ModelError> {
        let a = tape.add(z_l, z_poi)?;
        let b = tape.add(a, z_time)?;
        Ok(tape.add(b, pos)?)
    }

    /// Spatial (global feature) encoder over kept tokens: readout prepend,
    /// `spatial_layers` pre-norm transformer layers, final layer norm, then
    /// the readout-position output `[1, d]`.
    pub fn spatial_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        kept_tokens: Var,
        capture: Option<&mut Vec<Tensor>>,
    ) -> Result<Var, ModelError> {
        encode_sequence(
            tape,
            binder,
            "gfe",
            "readout.spatial",
            &self.cfg,
            self.cfg.spatial_layers,
            kept_tokens,
            capture,
        )
    }

    /// Temporal encoder over the fused per-interval representations.
    pub fn temporal_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        spatial_reps: &[Var],
        time_vecs: &[Var],
    ) -> Result<Var, ModelError> {
        if spatial_reps.is_empty() || spatial_reps.len() != time_vecs.len() {
            return Err(ModelError::Tensor(shape_err(
                "temporal_forward",
                format!(
                    "{} spatial reps vs {} time vectors",
                    spatial_reps.len(),
                    time_vecs.len()
                ),
            )));
        }
        let mut fused = Vec::with_capacity(spatial_reps.len());
        for (&s, &t) in spatial_reps.iter().zip(time_vecs) {
            fused.push(tape.add(s, t)?);
        }
        let tokens = tape.concat(&fused, 0)?;
        encode_sequence(
            tape,
            binder,
            "temporal",
            "readout.temporal",
            &self.cfg,
            self.cfg.temporal_layers,
            tokens,
            None,
        )
    }

    /// Prediction head: linear d -> M*H*W, tanh, reshape to `[M, H, W]`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        z_st: Var,
    ) -> Result<Var, ModelError> {
        let w = binder.var(tape, "predictor.weight");
        let b = binder.var(tape, "predictor.bias");
        let mut x = tape.matmul(z_st, w)?;
        x = tape.add_bias(x, b)?;
        x = tape.tanh(x)?;
        Ok(tape.reshape(x, &[self.cfg.channels, self.cfg.rows, self.cfg.cols])?)
    }

    /// End-to-end forward over one sample.
    ///
    /// Per interval: encoders, fusion with the position embedding, region
    /// sampling (below keep ratio 1), spatial encoding; then the temporal
    /// encoder over the student representations feeds the predictor. The
    /// teacher pass re-encodes all N fused tokens through the same weights
    /// bound as constants, so no gradient flows into it.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p>(
        &self,
        tape: &mut Tape,
        params: &'p ParamSet,
        poi_norm: &Tensor,
        sample: &Sample,
        mode: Mode,
        mut rng: Option<&mut Rng>,
        opts: ForwardOpts,
    ) -> Result<ForwardOutput<'p>, ModelError> {
        let cfg = &self.cfg;
        let t_len = cfg.input_intervals();
        if sample.inputs.len() != t_len || sample.time_feats.len() != t_len {
            return Err(ModelError::Config(format!(
                "sample has {} inputs, config wants {t_len}",
                sample.inputs.len()
            )));
        }
        let n = cfg.regions();
        let bn_mode = match (mode, opts.bn_eval) {
            (Mode::Train, false) => BnMode::Train,
            _ => BnMode::Eval,
        };
        let sample_mode = match mode {
            Mode::Train => SampleMode::Training,
            Mode::Eval => SampleMode::Inference,
        };
        let run_teacher =
            mode == Mode::Train && cfg.sampler_active() && !opts.skip_teacher;

        let mut binder = Binder::new(params, true);
        let mut bn_updates = Vec::new();

        // Time-invariant work shared by all intervals.
        let poi_leaf = tape.constant(poi_norm.clone());
        let z_poi = sfe_forward(tape, &mut binder, &cfg.sfe_config(), poi_leaf, bn_mode, &mut bn_updates)?;
        let pos = self.scpe.lookup_all(tape, &mut binder)?;

        let mut student_reps = Vec::with_capacity(t_len);
        let mut teacher_reps = Vec::new();
        let mut decisions = Vec::new();
        let mut attention = Vec::new();
        let mut time_vecs = Vec::with_capacity(t_len);

        for i in 0..t_len {
            let img = tape.constant(sample.inputs[i].clone());
            let z_l = lfe_forward(tape, &mut binder, &cfg.lfe_config(), img, bn_mode, &mut bn_updates)?;
            let tf = tape.constant(sample.time_feats[i].clone());
            let z_time_vec = tfe_forward(tape, &mut binder, tf, cfg.d)?;
            time_vecs.push(z_time_vec);
            let z_time = tape.broadcast_rows(z_time_vec, n)?;
            let tokens = self.fuse_tokens(tape, z_l, z_poi, z_time, pos)?;

            let mut capture_buf = if opts.capture_attention {
                Some(Vec::new())
            } else {
                None
            };

            let student_tokens = if cfg.sampler_active() {
                let rho = score_regions(tape, &mut binder, z_poi, z_time)?;
                let k = cfg.kept_regions();
                let decision = match (&sample_mode, rng.as_deref_mut()) {
                    (SampleMode::Training, Some(stream)) => {
                        gumbel_topk(tape.value(rho), k, cfg.gumbel_tau, SampleMode::Training, stream)?
                    }
                    (SampleMode::Training, None) => {
                        return Err(ModelError::Config(
                            "training forward needs an rng stream".into(),
                        ))
                    }
                    (SampleMode::Inference, _) => {
                        let mut unused = Rng::new(0);
                        gumbel_topk(tape.value(rho), k, cfg.gumbel_tau, SampleMode::Inference, &mut unused)?
                    }
                };
                if run_teacher {
                    teacher_reps.push(self.teacher_rep(tape, params, tokens)?);
                }
                let selected = apply_selection(tape, tokens, rho, &decision)?;
                decisions.push(decision);
                selected
            } else {
                tokens
            };

            let rep = self.spatial_forward(tape, &mut binder, student_tokens, capture_buf.as_mut())?;
            student_reps.push(rep);
            if let Some(buf) = capture_buf {
                attention.push(buf);
            }
        }

        let z_st = self.temporal_forward(tape, &mut binder, &student_reps, &time_vecs)?;
        let prediction = self.predict(tape, &mut binder, z_st)?;

        Ok(ForwardOutput {
            binder,
            prediction,
            student_reps,
            teacher_reps,
            decisions,
            bn_updates,
            attention,
        })
    }

    /// Spatial encoding of all N fused tokens with gradients blocked: token
    /// values are detached into constants and the weights are bound through
    /// a non-trainable binder.
    fn teacher_rep(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        tokens: Var,
    ) -> Result<Tensor, ModelError> {
        let detached = tape.constant(tape.value(tokens).clone());
        let mut frozen = Binder::new(params, false);
        let rep = self.spatial_forward(tape, &mut frozen, detached, None)?;
        Ok(tape.value(rep).clone())
    }
}

/// Inserts pre-norm transformer stack parameters under `prefix`.
pub fn insert_encoder_stack_params(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    layers: usize,
    ffn_mult: usize,
    rng: &mut Rng,
) {
    for i in 0..layers {
        let lp = format!("{prefix}.layer{i}");
        params.insert(&format!("{lp}.ln1.gamma"), Tensor::full(&[d], 1.0));
        params.insert(&format!("{lp}.ln1.beta"), Tensor::zeros(&[d]));
        for name in ["wq", "wv", "wo"] {
            insert_linear(params, &format!("{lp}.attn.{name}"), d, d, rng);
        }
        // No key bias: softmax is invariant to constant score-row shifts, so
        // a key bias would be a parameter with identically zero gradient.
        params.insert(
            &format!("{lp}.attn.wk.weight"),
            crate::params::xavier_uniform(&[d, d], rng),
        );
        params.insert(&format!("{lp}.ln2.gamma"), Tensor::full(&[d], 1.0));
        params.insert(&format!("{lp}.ln2.beta"), Tensor::zeros(&[d]));
        insert_linear(params, &format!("{lp}.ffn.fc1"), d, d * ffn_mult, rng);
        insert_linear(params, &format!("{lp}.ffn.fc2"), d * ffn_mult, d, rng);
    }
    params.insert(&format!("{prefix}.ln_out.gamma"), Tensor::full(&[d], 1.0));
    params.insert(&format!("{prefix}.ln_out.beta"), Tensor::zeros(&[d]));
}

/// Pre-norm transformer encoder returning the pooled `[1, d]` representation.
#[allow(clippy::too_many_arguments)]
fn encode_sequence(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    prefix: &str,
    readout_name: &str,
    cfg: &ModelConfig,
    layers: usize,
    tokens: Var,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<Var, ModelError> {
    let shp = tape.value(tokens).shape().to_vec();
    if shp.len() != 2 || shp[1] != cfg.d {
        return Err(ModelError::Tensor(shape_err(
            "encoder",
            format!("tokens {:?}, want [s, {}]", shp, cfg.d),
        )));
    }
    let mut x = match cfg.readout {
        ReadoutPool::Token => {
            let readout = binder.var(tape, readout_name);
            tape.concat(&[readout, tokens], 0)?
        }
        ReadoutPool::Mean => tokens,
    };
    let s = tape.value(x).shape()[0];
    let dh = cfg.d / cfg.heads;
    let scale = 1.0 / fmath::sqrt(dh as f64);

    for layer in 0..layers {
        let lp = format!("{prefix}.layer{layer}");
        let g1 = binder.var(tape, &format!("{lp}.ln1.gamma"));
        let b1 = binder.var(tape, &format!("{lp}.ln1.beta"));
        let xn = tape.layer_norm(x, g1, b1, LN_EPS)?;

        let proj = |tape: &mut Tape, binder: &mut Binder<'_>, name: &str| -> Result<Var, ModelError> {
            let w = binder.var(tape, &format!("{lp}.attn.{name}.weight"));
            let b = binder.var(tape, &format!("{lp}.attn.{name}.bias"));
            let y = tape.matmul(xn, w)?;
            Ok(tape.add_bias(y, b)?)
        };
        let q = proj(tape, binder, "wq")?;
        let v = proj(tape, binder, "wv")?;
        let wk = binder.var(tape, &format!("{lp}.attn.wk.weight"));
        let k = tape.matmul(xn, wk)?;

        let mut heads_out = Vec::with_capacity(cfg.heads);
        let mut head_maps: Vec<Tensor> = Vec::new();
        for h in 0..cfg.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose2d(kh)?;
            let mut scores = tape.matmul(qh, kt)?;
            scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            if capture.is_some() {
                head_maps.push(tape.value(attn).clone());
            }
            heads_out.push(tape.matmul(attn, vh)?);
        }
        if let Some(buf) = capture.as_deref_mut() {
            let mut data = Vec::with_capacity(cfg.heads * s * s);
            for m in &head_maps {
                data.extend_from_slice(m.data());
            }
            buf.push(
                Tensor::new(alloc::vec![cfg.heads, s, s], data).expect("attention capture shape"),
            );
        }
        let merged = tape.concat(&heads_out, 1)?;
        let wo = binder.var(tape, &format!("{lp}.attn.wo.weight"));
        let bo = binder.var(tape, &format!("{lp}.attn.wo.bias"));
        let mut attn_out = tape.matmul(merged, wo)?;
        attn_out = tape.add_bias(attn_out, bo)?;
        x = tape.add(x, attn_out)?;

        let g2 = binder.var(tape, &format!("{lp}.ln2.gamma"));
        let b2 = binder.var(tape, &format!("{lp}.ln2.beta"));
        let xn2 = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = binder.var(tape, &format!("{lp}.ffn.fc1.weight"));
        let bf1 = binder.var(tape, &format!("{lp}.ffn.fc1.bias"));
        let w2 = binder.var(tape, &format!("{lp}.ffn.fc2.weight"));
        let bf2 = binder.var(tape, &format!("{lp}.ffn.fc2.bias"));
        let mut ffn = tape.matmul(xn2, w1)?;
        ffn = tape.add_bias(ffn, bf1)?;
        ffn = tape.gelu(ffn)?;
        ffn = tape.matmul(ffn, w2)?;
        ffn = tape.add_bias(ffn, bf2)?;
        x = tape.add(x, ffn)?;
    }

    let go = binder.var(tape, &format!("{prefix}.ln_out.gamma"));
    let bo = binder.var(tape, &format!("{prefix}.ln_out.beta"));
    let xo = tape.layer_norm(x, go, bo, LN_EPS)?;
    match cfg.readout {
        ReadoutPool::Token => Ok(tape.slice(xo, 0, 0, 1)?),
        ReadoutPool::Mean => {
            let m = tape.mean(xo, Some(0))?;
            Ok(tape.reshape(m, &[1, cfg.d])?)
        }
    }
}
