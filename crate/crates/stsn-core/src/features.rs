//! Model input construction: measurement images from raw trajectories or
//! events, POI category images, temporal feature vectors, min-max
//! normalisation and historical-interval selection.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::civil::CivilTime;
use crate::fmath;
use crate::grid::GridSpec;
use crate::tensor::Tensor;

pub const SECONDS_PER_INTERVAL: i64 = 3600;

/// Measurement channels for vehicle trajectory data.
pub const FLOW_CHANNELS: [&str; 3] = ["inflow", "outflow", "density"];
/// Measurement channels for pickup/dropoff event data.
pub const EVENT_CHANNELS: [&str; 2] = ["pickup", "dropoff"];

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureError {
    UnknownCategory(String),
    /// A trajectory's timestamps are not strictly increasing.
    UnorderedTrajectory { vehicle: usize },
    EmptyTrainingSet,
    /// `select_history` would need an interval that does not exist.
    InsufficientHistory { missing: i64 },
}

impl core::fmt::Display for FeatureError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FeatureError::UnknownCategory(c) => write!(f, "unknown POI category {c:?}"),
            FeatureError::UnorderedTrajectory { vehicle } => {
                write!(f, "trajectory {vehicle} has non-increasing timestamps")
            }
            FeatureError::EmptyTrainingSet => write!(f, "normalizer fit on empty training set"),
            FeatureError::InsufficientHistory { missing } => {
                write!(f, "history selection needs missing interval {missing}")
            }
        }
    }
}

impl core::error::Error for FeatureError {}

/// Measurement image for one time interval: `[M, H, W]` non-negative counts.
#[derive(Clone, Debug, PartialEq)]
pub struct STImage {
    /// Hours since the Unix epoch.
    pub interval_id: i64,
    pub values: Tensor,
}

/// POI category counts: `[P, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct POIImage {
    pub values: Tensor,
    pub categories: Vec<String>,
    /// POIs outside the bounding box, skipped during counting.
    pub skipped: usize,
}

/// Ten temporal features: day-of-week one-hot (7), weekend flag (1) and the
/// sinusoidal time-of-day pair (2).
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFeature(pub [f64; 10]);

impl TemporalFeature {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 10], self.0.to_vec()).expect("temporal feature shape")
    }
}

/// Sinusoidal + one-hot time encoding of an interval start.
pub fn encode_time(t: &CivilTime) -> TemporalFeature {
    let mut v = [0.0; 10];
    let dow = t.weekday() as usize;
    v[dow] = 1.0;
    v[7] = if dow >= 5 { 1.0 } else { 0.0 };
    let angle = 2.0 * core::f64::consts::PI * t.minutes_of_day() as f64 / 1440.0;
    v[8] = fmath::sin(angle);
    v[9] = fmath::cos(angle);
    TemporalFeature(v)
}

/// Counts POIs per category per grid cell. Out-of-bounds POIs are skipped and
/// tallied in the result's `skipped` field; a category missing from the
/// vocabulary is an error.
pub fn count_pois(
    grid: &GridSpec,
    categories: &[String],
    pois: &[(String, f64, f64)],
) -> Result<POIImage, FeatureError> {
    let p = categories.len();
    let (h, w) = (grid.rows, grid.cols);
    let mut values = Tensor::zeros(&[p, h, w]);
    let mut skipped = 0;
    for (cat, lat, lon) in pois {
        let Some(ci) = categories.iter().position(|c| c == cat) else {
            return Err(FeatureError::UnknownCategory(cat.clone()));
        };
        match grid.locate(*lat, *lon) {
            Ok(n) => {
                let (row, col) = grid.row_col(n);
                let cur = values.at3(ci, row, col);
                values.set3(ci, row, col, cur + 1.0);
            }
            Err(_) => skipped += 1,
        }
    }
    Ok(POIImage {
        values,
        categories: categories.to_vec(),
        skipped,
    })
}

/// One trajectory sample: Unix seconds and a position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajPoint {
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

/// Aggregation tallies besides the image itself.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SkipStats {
    pub out_of_bounds_points: usize,
}

fn in_interval(t: i64, interval_id: i64) -> bool {
    let start = interval_id * SECONDS_PER_INTERVAL;
    t >= start && t < start + SECONDS_PER_INTERVAL
}

/// Builds the three-channel (inflow, outflow, density) image of one interval
/// from per-vehicle trajectories.
///
/// A transition is each consecutive in-bounds point pair whose cells differ;
/// it is attributed to the interval containing the *arrival* timestamp and
/// adds one outflow at the source cell and one inflow at the destination.
/// Density counts distinct vehicles with at least one in-bounds point inside
/// the interval.
pub fn aggregate_trajectories(
    grid: &GridSpec,
    trajectories: &[Vec<TrajPoint>],
    interval_id: i64,
) -> Result<(STImage, SkipStats), FeatureError> {
    let (h, w) = (grid.rows, grid.cols);
    let mut values = Tensor::zeros(&[3, h, w]);
    let mut stats = SkipStats::default();
    for (vid, traj) in trajectories.iter().enumerate() {
        if traj.windows(2).any(|p| p[1].t <= p[0].t) {
            return Err(FeatureError::UnorderedTrajectory { vehicle: vid });
        }
        let mut present = false;
        let cells: Vec<Option<usize>> = traj
            .iter()
            .map(|p| grid.locate(p.lat, p.lon).ok())
            .collect();
        for (p, cell) in traj.iter().zip(&cells) {
            if cell.is_none() {
                stats.out_of_bounds_points += 1;
            } else if in_interval(p.t, interval_id) {
                present = true;
            }
        }
        for i in 1..traj.len() {
            let (Some(src), Some(dst)) = (cells[i - 1], cells[i]) else {
                continue;
            };
            if src != dst && in_interval(traj[i].t, interval_id) {
                let (sr, sc) = grid.row_col(src);
                let (dr, dc) = grid.row_col(dst);
                let out = values.at3(1, sr, sc);
                values.set3(1, sr, sc, out + 1.0);
                let inf = values.at3(0, dr, dc);
                values.set3(0, dr, dc, inf + 1.0);
            }
        }
        if present {
            // Density: one count per cell the vehicle appeared in.
            let mut seen: Vec<usize> = Vec::new();
            for (p, cell) in traj.iter().zip(&cells) {
                if let Some(n) = cell {
                    if in_interval(p.t, interval_id) && !seen.contains(n) {
                        seen.push(*n);
                        let (r, c) = grid.row_col(*n);
                        let d = values.at3(2, r, c);
                        values.set3(2, r, c, d + 1.0);
                    }
                }
            }
        }
    }
    Ok((
        STImage {
            interval_id,
            values,
        },
        stats,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Pickup,
    Dropoff,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

/// Builds the two-channel (pickup, dropoff) image of one interval.
pub fn aggregate_events(
    grid: &GridSpec,
    events: &[Event],
    interval_id: i64,
) -> (STImage, SkipStats) {
    let (h, w) = (grid.rows, grid.cols);
    let mut values = Tensor::zeros(&[2, h, w]);
    let mut stats = SkipStats::default();
    for ev in events {
        if !in_interval(ev.t, interval_id) {
            continue;
        }
        match grid.locate(ev.lat, ev.lon) {
            Ok(n) => {
                let (r, c) = grid.row_col(n);
                let ch = match ev.kind {
                    EventKind::Pickup => 0,
                    EventKind::Dropoff => 1,
                };
                let cur = values.at3(ch, r, c);
                values.set3(ch, r, c, cur + 1.0);
            }
            Err(_) => stats.out_of_bounds_points += 1,
        }
    }
    (
        STImage {
            interval_id,
            values,
        },
        stats,
    )
}

/// Per-channel min-max scaling to [-1, 1], fitted on the training split only.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Fits per-channel extrema over `[C, H, W]` images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self, FeatureError> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        let mut seen = false;
        for img in images {
            let c = img.shape()[0];
            let per = img.len() / c;
            if !seen {
                min = vec![f64::INFINITY; c];
                max = vec![f64::NEG_INFINITY; c];
                seen = true;
            }
            for ch in 0..c {
                for &v in &img.data()[ch * per..(ch + 1) * per] {
                    min[ch] = min[ch].min(v);
                    max[ch] = max[ch].max(v);
                }
            }
        }
        if !seen {
            return Err(FeatureError::EmptyTrainingSet);
        }
        Ok(Normalizer { min, max })
    }

    /// `2 (x - min) / (max - min) - 1`; degenerate channels map to -1.
    pub fn normalize(&self, img: &Tensor) -> Tensor {
        self.apply(img, |v, lo, hi| {
            if hi > lo {
                2.0 * (v - lo) / (hi - lo) - 1.0
            } else {
                -1.0
            }
        })
    }

    pub fn denormalize(&self, img: &Tensor) -> Tensor {
        self.apply(img, |v, lo, hi| {
            if hi > lo {
                (v + 1.0) / 2.0 * (hi - lo) + lo
            } else {
                lo
            }
        })
    }

    fn apply(&self, img: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = img.shape()[0];
        debug_assert_eq!(c, self.min.len());
        let per = img.len() / c;
        let mut out = img.clone();
        for ch in 0..c {
            let (lo, hi) = (self.min[ch], self.max[ch]);
            for v in &mut out.data_mut()[ch * per..(ch + 1) * per] {
                *v = f(*v, lo, hi);
            }
        }
        out.requires_grad = false;
        out
    }
}

/// Historical interval ids feeding one prediction: `closeness` most recent
/// hours, `period` day-offset and `trend` week-offset intervals, returned
/// oldest to newest. Ids that fall before `earliest` are reported as missing.
#[allow(clippy::too_many_arguments)]
pub fn select_history(
    next_interval: i64,
    closeness: usize,
    period: usize,
    trend: usize,
    period_span: i64,
    trend_span: i64,
    earliest: i64,
    latest: i64,
) -> Result<Vec<i64>, FeatureError> {
    let mut ids = Vec::with_capacity(closeness + period + trend);
    for i in 1..=closeness as i64 {
        ids.push(next_interval - i);
    }
    for j in 1..=period as i64 {
        ids.push(next_interval - j * period_span);
    }
    for j in 1..=trend as i64 {
        ids.push(next_interval - j * trend_span);
    }
    ids.sort_unstable();
    for &id in &ids {
        if id < earliest || id > latest {
            return Err(FeatureError::InsufficientHistory { missing: id });
        }
    }
    Ok(ids)
}
