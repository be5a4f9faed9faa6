//! Metrics and the historical-average baseline.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::civil::interval_civil;
use crate::dataset::IntervalSeries;
use crate::fmath;
use crate::tensor::Tensor;

/// Per-channel RMSE and MAE over equally shaped `[M, H, W]` prediction and
/// target collections, aggregated over all samples and cells.
pub fn channel_metrics(preds: &[Tensor], targets: &[Tensor]) -> Vec<(f64, f64)> {
    assert_eq!(preds.len(), targets.len());
    assert!(!preds.is_empty(), "no samples to evaluate");
    let channels = preds[0].shape()[0];
    let per = preds[0].len() / channels;
    let mut sq = alloc::vec![0.0; channels];
    let mut ab = alloc::vec![0.0; channels];
    for (p, t) in preds.iter().zip(targets) {
        assert_eq!(p.shape(), t.shape());
        for c in 0..channels {
            for i in 0..per {
                let d = p.data()[c * per + i] - t.data()[c * per + i];
                sq[c] += d * d;
                ab[c] += fmath::abs(d);
            }
        }
    }
    let count = (preds.len() * per) as f64;
    (0..channels)
        .map(|c| {
            let (rmse, mae) = (fmath::sqrt(sq[c] / count), ab[c] / count);
            debug_assert!(rmse + 1e-12 >= mae, "power-mean inequality violated");
            (rmse, mae)
        })
        .collect()
}

/// RMSE and MAE pooled over every channel, sample and cell.
pub fn pooled_metrics(preds: &[Tensor], targets: &[Tensor]) -> (f64, f64) {
    assert_eq!(preds.len(), targets.len());
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        assert_eq!(p.shape(), t.shape());
        for (a, b) in p.data().iter().zip(t.data()) {
            let d = a - b;
            sq += d * d;
            ab += fmath::abs(d);
            count += 1;
        }
    }
    assert!(count > 0, "no elements to evaluate");
    let (rmse, mae) = (fmath::sqrt(sq / count as f64), ab / count as f64);
    debug_assert!(rmse + 1e-12 >= mae, "power-mean inequality violated");
    (rmse, mae)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalError {
    EmptyHistory,
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::EmptyHistory => write!(f, "no historical observations to average"),
        }
    }
}

impl core::error::Error for EvalError {}

/// Historical-average baseline: the prediction for a target interval is the
/// training-set mean of its (day-of-week, hour) slot, per region and
/// channel; slots never observed fall back to the global channel mean.
#[derive(Clone, Debug)]
pub struct HaBaseline {
    slot_sum: BTreeMap<(u32, u32), (Tensor, usize)>,
    global_mean: Tensor,
    utc_offset_minutes: i32,
}

impl HaBaseline {
    /// Averages the measured images of `train_ids`.
    pub fn fit(series: &IntervalSeries, train_ids: &[i64]) -> Result<Self, EvalError> {
        let mut slot_sum: BTreeMap<(u32, u32), (Tensor, usize)> = BTreeMap::new();
        let mut global: Option<Tensor> = None;
        let mut count = 0usize;
        for &id in train_ids {
            let Some(img) = series.image(id) else {
                continue;
            };
            let civil = interval_civil(id, series.utc_offset_minutes);
            let key = (civil.weekday(), civil.hour);
            match slot_sum.get_mut(&key) {
                Some((sum, n)) => {
                    for (a, b) in sum.data_mut().iter_mut().zip(img.data()) {
                        *a += b;
                    }
                    *n += 1;
                }
                None => {
                    slot_sum.insert(key, (img.clone(), 1));
                }
            }
            match &mut global {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(img.data()) {
                        *a += b;
                    }
                }
                None => global = Some(img.clone()),
            }
            count += 1;
        }
        let Some(mut global_mean) = global else {
            return Err(EvalError::EmptyHistory);
        };
        // Global fallback: per-channel mean over all cells and intervals.
        let channels = global_mean.shape()[0];
        let per = global_mean.len() / channels;
        for c in 0..channels {
            let mean = global_mean.data()[c * per..(c + 1) * per]
                .iter()
                .sum::<f64>()
                / (per * count) as f64;
            for v in &mut global_mean.data_mut()[c * per..(c + 1) * per] {
                *v = mean;
            }
        }
        Ok(HaBaseline {
            slot_sum,
            global_mean,
            utc_offset_minutes: series.utc_offset_minutes,
        })
    }

    /// Slot-mean prediction for a target interval.
    pub fn predict(&self, interval_id: i64) -> Tensor {
        let civil = interval_civil(interval_id, self.utc_offset_minutes);
        match self.slot_sum.get(&(civil.weekday(), civil.hour)) {
            Some((sum, n)) => {
                let mut out = sum.clone();
                for v in out.data_mut() {
                    *v /= *n as f64;
                }
                out
            }
            None => self.global_mean.clone(),
        }
    }
}
