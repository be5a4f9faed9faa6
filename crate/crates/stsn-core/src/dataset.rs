//! In-memory feature archive and training-sample assembly.

use alloc::string::String;
use alloc::vec::Vec;

use crate::civil::interval_civil;
use crate::features::{encode_time, select_history, FeatureError, Normalizer};
use crate::model::{ModelConfig, Sample};
use crate::tensor::Tensor;

/// A contiguous run of per-interval measurement images plus the static POI
/// image: everything the model consumes for one city.
#[derive(Clone, Debug)]
pub struct IntervalSeries {
    pub grid: crate::grid::GridSpec,
    /// Interval id (hours since the Unix epoch) of `images[0]`.
    pub first_interval: i64,
    /// Raw count images `[M, H, W]`, one per interval, contiguous.
    pub images: Vec<Tensor>,
    pub channel_names: Vec<String>,
    /// Raw POI counts `[P, H, W]`.
    pub poi: Tensor,
    pub poi_categories: Vec<String>,
    pub utc_offset_minutes: i32,
}

impl IntervalSeries {
    /// Inclusive first and exclusive last interval id.
    pub fn interval_range(&self) -> (i64, i64) {
        (
            self.first_interval,
            self.first_interval + self.images.len() as i64,
        )
    }

    pub fn image(&self, interval_id: i64) -> Option<&Tensor> {
        let off = interval_id - self.first_interval;
        if off < 0 {
            return None;
        }
        self.images.get(off as usize)
    }
}

/// Assembled splits, normalizers and the normalized POI image.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub normalizer: Normalizer,
    pub poi_normalizer: Normalizer,
    /// `[P, H, W]` POI counts scaled to [-1, 1].
    pub poi_norm: Tensor,
}

/// Builds one sample per target id. The measurement normalizer fits on the
/// training period only (all intervals up to the last training target); the
/// validation split is the chronologically last `val_fraction` of the
/// training targets, avoiding time-series leakage.
pub fn prepare(
    series: &IntervalSeries,
    cfg: &ModelConfig,
    train_targets: &[i64],
    test_targets: &[i64],
    val_fraction: f64,
) -> Result<PreparedData, FeatureError> {
    if train_targets.is_empty() {
        return Err(FeatureError::EmptyTrainingSet);
    }
    let last_train = *train_targets.iter().max().expect("nonempty");
    let (first, _) = series.interval_range();
    let train_span = (first..=last_train)
        .filter_map(|id| series.image(id));
    let normalizer = Normalizer::fit(train_span)?;
    let poi_normalizer = Normalizer::fit([&series.poi])?;
    let poi_norm = poi_normalizer.normalize(&series.poi);

    let mut train: Vec<Sample> = Vec::with_capacity(train_targets.len());
    for &id in train_targets {
        train.push(assemble(series, cfg, &normalizer, id)?);
    }
    let mut test: Vec<Sample> = Vec::with_capacity(test_targets.len());
    for &id in test_targets {
        test.push(assemble(series, cfg, &normalizer, id)?);
    }

    // Chronological validation split.
    train.sort_by_key(|s| s.target_interval);
    let val_len = ((train.len() as f64 * val_fraction) as usize)
        .max(1)
        .min(train.len().saturating_sub(1).max(1));
    let split = train.len() - val_len;
    let val = train.split_off(split);

    Ok(PreparedData {
        train,
        val,
        test,
        normalizer,
        poi_normalizer,
        poi_norm,
    })
}

/// One sample: normalized history images (oldest first), their time feature
/// rows, and the normalized + raw target.
pub fn assemble(
    series: &IntervalSeries,
    cfg: &ModelConfig,
    normalizer: &Normalizer,
    target_id: i64,
) -> Result<Sample, FeatureError> {
    let (first, end) = series.interval_range();
    let ids = select_history(
        target_id,
        cfg.closeness,
        cfg.period,
        cfg.trend,
        cfg.period_span,
        cfg.trend_span,
        first,
        end - 1,
    )?;
    let target_raw = series
        .image(target_id)
        .ok_or(FeatureError::InsufficientHistory { missing: target_id })?
        .clone();
    let mut inputs = Vec::with_capacity(ids.len());
    let mut time_feats = Vec::with_capacity(ids.len());
    for &id in &ids {
        let img = series
            .image(id)
            .ok_or(FeatureError::InsufficientHistory { missing: id })?;
        inputs.push(normalizer.normalize(img));
        let civil = interval_civil(id, series.utc_offset_minutes);
        time_feats.push(encode_time(&civil).to_tensor());
    }
    Ok(Sample {
        target_interval: target_id,
        inputs,
        time_feats,
        target: normalizer.normalize(&target_raw),
        target_raw,
    })
}

/// Every interval in `[start, end)` that has the full closeness/period/trend
/// history available inside the series.
pub fn viable_targets(series: &IntervalSeries, cfg: &ModelConfig, start: i64, end: i64) -> Vec<i64> {
    let (first, series_end) = series.interval_range();
    (start.max(first)..end.min(series_end))
        .filter(|&id| {
            select_history(
                id,
                cfg.closeness,
                cfg.period,
                cfg.trend,
                cfg.period_span,
                cfg.trend_span,
                first,
                series_end - 1,
            )
            .is_ok()
        })
        .collect()
}
