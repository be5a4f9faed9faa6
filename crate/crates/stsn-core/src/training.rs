//! Composite loss (MSE + MAE + alpha * KL self-distillation), AdamW and the
//! early-stopping training loop.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::PreparedData;
use crate::eval::pooled_metrics;
use crate::fmath;
use crate::model::{ForwardOpts, Mode, ModelError, Sample, StsnModel};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{shape_err, Tensor, TensorError};

/// Stream labels for deriving independent RNG streams from one seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_SYNTH: u64 = 3;

/// Training hyperparameters. Defaults: alpha 0.3, learning rate 1e-3 (mid
/// grid), 500 epochs with patience 30, batch size 16, validation fraction
/// 0.2.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.3,
            lr: 0.001,
            weight_decay: 0.01,
            max_epochs: 500,
            patience: 30,
            batch_size: 16,
            seed: 42,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.alpha < 0.0 {
            return Err(TrainError::Config("alpha must be >= 0".into()));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "patience, max_epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(TrainError::Config("val_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    EmptyDataset,
    Config(String),
    Model(String),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "empty dataset"),
            TrainError::Config(s) => write!(f, "config error: {s}"),
            TrainError::Model(s) => write!(f, "model error: {s}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(alloc::format!("{e}"))
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(alloc::format!("{e}"))
    }
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Mean over all elements of the squared difference.
pub fn loss_mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, TensorError> {
    check_same_shape(tape, pred, target, "loss_mse")?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq, None)
}

/// Mean absolute difference; subgradient 0 at exact zeros.
pub fn loss_mae(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, TensorError> {
    check_same_shape(tape, pred, target, "loss_mae")?;
    let diff = tape.sub(pred, target)?;
    let ab = tape.abs(diff)?;
    tape.mean(ab, None)
}

fn check_same_shape(
    tape: &Tape,
    a: Var,
    b: Var,
    op: &'static str,
) -> Result<(), TensorError> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(shape_err(
            op,
            alloc::format!(
                "{:?} vs {:?}",
                tape.value(a).shape(),
                tape.value(b).shape()
            ),
        ));
    }
    Ok(())
}

/// Softmax of a slice, numerically stable; host-side helper for the constant
/// teacher distribution.
pub fn softmax_values(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| fmath::exp(v - m)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean over intervals of KL(teacher || student) between the softmax-mapped
/// d-dimensional representations. The teacher side enters as constants, so
/// gradient flows only into the student.
pub fn loss_kl(
    tape: &mut Tape,
    teacher_reps: &[Tensor],
    student_reps: &[Var],
) -> Result<Var, TensorError> {
    // No teacher pass (keep ratio 1.0): the distillation term is defined as
    // exactly zero.
    if teacher_reps.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    if teacher_reps.len() != student_reps.len() {
        return Err(shape_err(
            "loss_kl",
            alloc::format!(
                "{} teacher vs {} student representations",
                teacher_reps.len(),
                student_reps.len()
            ),
        ));
    }
    let mut acc: Option<Var> = None;
    for (t, &s) in teacher_reps.iter().zip(student_reps) {
        if t.shape() != tape.value(s).shape() {
            return Err(shape_err(
                "loss_kl",
                alloc::format!("teacher {:?} vs student {:?}", t.shape(), tape.value(s).shape()),
            ));
        }
        let p = softmax_values(t.data());
        // sum p ln p is a constant; the cross term carries the gradient.
        let neg_entropy: f64 = p.iter().map(|&v| v * fmath::ln(v)).sum();
        let p_leaf = tape.constant(Tensor::new(t.shape().to_vec(), p).expect("teacher shape"));
        let ls = tape.log_softmax(s, 1)?;
        let cross = tape.mul(p_leaf, ls)?;
        let cross_sum = tape.sum(cross, None)?;
        let ne = tape.scalar(neg_entropy);
        let kl = tape.sub(ne, cross_sum)?;
        acc = Some(match acc {
            None => kl,
            Some(a) => tape.add(a, kl)?,
        });
    }
    tape.scale(acc.expect("nonempty"), 1.0 / teacher_reps.len() as f64)
}

/// `L = L_MSE + L_MAE + alpha * L_KL`; the KL term is identically 0 when no
/// teacher representations exist (keep ratio 1.0).
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    teacher_reps: &[Tensor],
    student_reps: &[Var],
    alpha: f64,
) -> Result<LossParts, TensorError> {
    let mse = loss_mse(tape, pred, target)?;
    let mae = loss_mae(tape, pred, target)?;
    let kl = loss_kl(tape, teacher_reps, student_reps)?;
    let sum = tape.add(mse, mae)?;
    let scaled_kl = tape.scale(kl, alpha)?;
    let total = tape.add(sum, scaled_kl)?;
    Ok(LossParts {
        total,
        mse,
        mae,
        kl,
    })
}

/// Loss node handles for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mse: Var,
    pub mae: Var,
    pub kl: Var,
}

// ── AdamW ───────────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every trainable parameter present in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| alloc::vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| alloc::vec![0.0; grad.len()]);
            let w = params.get_mut(name);
            debug_assert_eq!(w.len(), grad.len());
            for ((wi, gi), (mi, vi)) in w
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= self.lr * (mhat / (fmath::sqrt(vhat) + self.eps) + self.weight_decay * *wi);
            }
        }
    }
}

// ── Training loop ───────────────────────────────────────────────────────

/// One metric-log row per epoch. `seconds` is whatever the caller's clock
/// reports at the end of the epoch (cumulative).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_mae: f64,
    pub train_kl: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

/// Best-epoch snapshot plus the full metric log.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub best_params: ParamSet,
    pub best_opt: AdamW,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Mean loss components over one batch after a single optimizer step.
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    pub mae: f64,
    pub kl: f64,
}

/// Forward + backward over each sample of the batch, gradient averaging, one
/// AdamW step. Batch-norm running stats commit after each sample's forward.
pub fn train_step(
    model: &StsnModel,
    params: &mut ParamSet,
    opt: &mut AdamW,
    batch: &[&Sample],
    poi_norm: &Tensor,
    alpha: f64,
    rng: &mut Rng,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let scale = 1.0 / batch.len() as f64;
    let mut stats = StepStats {
        loss: 0.0,
        mse: 0.0,
        mae: 0.0,
        kl: 0.0,
    };
    for sample in batch {
        let mut tape = Tape::new();
        let out = model.forward(
            &mut tape,
            params,
            poi_norm,
            sample,
            Mode::Train,
            Some(rng),
            ForwardOpts::default(),
        )?;
        let target = tape.constant(sample.target.clone());
        let parts = total_loss(
            &mut tape,
            out.prediction,
            target,
            &out.teacher_reps,
            &out.student_reps,
            alpha,
        )?;
        tape.backward(parts.total)?;
        stats.loss += tape.value(parts.total).item() * scale;
        stats.mse += tape.value(parts.mse).item() * scale;
        stats.mae += tape.value(parts.mae).item() * scale;
        stats.kl += tape.value(parts.kl).item() * scale;
        for (name, grad) in out.binder.collect_grads(&tape) {
            match grad_acc.get_mut(&name) {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += g * scale;
                    }
                }
                None => {
                    let mut scaled = grad;
                    for v in scaled.data_mut() {
                        *v *= scale;
                    }
                    grad_acc.insert(name, scaled);
                }
            }
        }
        for (prefix, bn) in &out.bn_updates {
            params.set_bn_stats(prefix, bn);
        }
    }
    opt.step(params, &grad_acc);
    Ok(stats)
}

/// Denormalized pooled RMSE/MAE of eval-mode predictions over a sample set.
pub fn evaluate(
    model: &StsnModel,
    params: &ParamSet,
    data: &PreparedData,
    samples: &[Sample],
) -> Result<(f64, f64), TrainError> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut tape = Tape::new();
        let out = model.forward(
            &mut tape,
            params,
            &data.poi_norm,
            sample,
            Mode::Eval,
            None,
            ForwardOpts::default(),
        )?;
        preds.push(data.normalizer.denormalize(tape.value(out.prediction)));
        targets.push(sample.target_raw.clone());
    }
    Ok(pooled_metrics(&preds, &targets))
}

/// Epochs of shuffled mini-batches with early stopping on validation RMSE.
///
/// RNG fork order (the reproducibility contract): one root stream labelled
/// `STREAM_TRAIN` from the seed; each epoch forks a child used for the
/// shuffle; each batch forks a grandchild consumed by Gumbel sampling.
/// Parameters initialize from an independent `STREAM_INIT` stream.
pub fn train_loop(
    model: &StsnModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut init_rng = Rng::stream(cfg.seed, STREAM_INIT);
    let mut params = model.init_params(&mut init_rng);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut root = Rng::stream(cfg.seed, STREAM_TRAIN);

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamSet, AdamW)> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let mut epoch_rng = root.fork();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        epoch_rng.shuffle(&mut order);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_rng = epoch_rng.fork();
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let stats = train_step(
                model,
                &mut params,
                &mut opt,
                &batch,
                &data.poi_norm,
                cfg.alpha,
                &mut batch_rng,
            )?;
            sums.0 += stats.loss;
            sums.1 += stats.mse;
            sums.2 += stats.mae;
            sums.3 += stats.kl;
            batches += 1;
        }
        let bf = batches as f64;
        let (val_rmse, val_mae) = evaluate(model, &params, data, &data.val)?;
        log.push(EpochRecord {
            epoch,
            train_loss: sums.0 / bf,
            train_mse: sums.1 / bf,
            train_mae: sums.2 / bf,
            train_kl: sums.3 / bf,
            val_rmse,
            val_mae,
            seconds: clock(),
        });

        let improved = match &best {
            None => true,
            Some((_, best_rmse, _, _)) => val_rmse < *best_rmse,
        };
        if improved {
            best = Some((epoch, val_rmse, params.clone(), opt.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_rmse, best_params, best_opt) =
        best.expect("at least one epoch ran");
    Ok(TrainResult {
        best_params,
        best_opt,
        best_epoch,
        best_val_rmse,
        log,
        stopped_early,
    })
}
