//! Synthetic-city generator: pre-aggregated measurement grids whose regions
//! carry planted redundancy structure, a desk-scale stand-in for city-scale
//! floating-car measurements.
//!
//! Every region's series is a per-region scale factor times one source
//! pattern (a sum of daily and weekly sinusoids with seeded phases) plus
//! optional noise. Regions backed by a source shared with other regions are
//! labelled redundant, regions with a private source unique, and an
//! all-zero "lake" block empty. The labels are exported as ground truth for
//! pruning-behaviour checks.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::civil::days_from_civil;
use crate::dataset::IntervalSeries;
use crate::fmath;
use crate::grid::GridSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SYNTH_POI_CATEGORIES: [&str; 4] =
    ["commercial", "residential", "transport", "recreation"];

/// Channel scale factors applied to the common pattern.
const CHANNEL_FACTORS: [f64; 3] = [1.0, 0.85, 0.7];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionLabel {
    Unique,
    Redundant,
    Empty,
}

impl RegionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::Unique => "unique",
            RegionLabel::Redundant => "redundant",
            RegionLabel::Empty => "empty",
        }
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCitySpec {
    pub rows: usize,
    pub cols: usize,
    /// Source patterns shared by the redundant regions.
    pub shared_sources: usize,
    /// Regions with a private pattern (must stay un-pruned to predict them).
    pub unique_regions: usize,
    /// Rows/cols of the all-zero block in the min-lat/min-lon corner.
    pub empty_rows: usize,
    pub empty_cols: usize,
    /// Additive Gaussian noise std in count units (0 = noise-free variant).
    pub noise: f64,
    pub train_hours: usize,
    pub test_hours: usize,
    /// Base magnitude of the count patterns.
    pub amplitude: f64,
    pub seed: u64,
}

impl SyntheticCitySpec {
    /// Small seeded default: 6 weeks of training data, one week of test.
    pub fn default_spec(rows: usize, cols: usize) -> Self {
        SyntheticCitySpec {
            rows,
            cols,
            shared_sources: 3,
            unique_regions: 4,
            empty_rows: rows.div_ceil(3),
            empty_cols: cols.div_ceil(3),
            noise: 0.0,
            train_hours: 6 * 168,
            test_hours: 168,
            amplitude: 50.0,
            seed: 7,
        }
    }
}

/// Generated dataset plus redundancy ground truth.
#[derive(Clone, Debug)]
pub struct SynthCity {
    pub series: IntervalSeries,
    /// Target-id ranges `[start, end)`.
    pub train_range: (i64, i64),
    pub test_range: (i64, i64),
    pub labels: Vec<RegionLabel>,
    /// Source pattern per region; -1 for empty regions.
    pub source_id: Vec<i64>,
    pub scale: Vec<f64>,
}

struct Source {
    daily_weight: f64,
    weekly_weight: f64,
    daily_phase: f64,
    weekly_phase: f64,
}

impl Source {
    fn sample(rng: &mut Rng) -> Source {
        Source {
            daily_weight: rng.uniform(0.3, 0.5),
            weekly_weight: rng.uniform(0.15, 0.3),
            daily_phase: rng.uniform(0.0, core::f64::consts::TAU),
            weekly_phase: rng.uniform(0.0, core::f64::consts::TAU),
        }
    }

    /// Non-negative periodic intensity at an absolute interval id.
    fn value(&self, interval_id: i64) -> f64 {
        let daily = (interval_id.rem_euclid(24)) as f64 / 24.0;
        let weekly = (interval_id.rem_euclid(168)) as f64 / 168.0;
        0.8 + self.daily_weight * fmath::sin(core::f64::consts::TAU * daily + self.daily_phase)
            + self.weekly_weight
                * fmath::sin(core::f64::consts::TAU * weekly + self.weekly_phase)
    }
}

/// Deterministic generation from the spec's seed. The series starts on a
/// Monday midnight so HA's (day-of-week, hour) slots align with the planted
/// periods.
pub fn generate(spec: &SyntheticCitySpec) -> SynthCity {
    let grid = GridSpec::new(
        0.0,
        spec.rows as f64 * 0.005,
        0.0,
        spec.cols as f64 * 0.005,
        spec.rows,
        spec.cols,
        500.0,
    )
    .expect("synthetic grid");
    let n = grid.regions();
    let mut rng = Rng::stream(spec.seed, crate::training::STREAM_SYNTH);

    let sources: Vec<Source> = (0..spec.shared_sources + spec.unique_regions)
        .map(|_| Source::sample(&mut rng))
        .collect();

    // Labels: empty block first, then seeded unique picks, rest redundant.
    let mut labels = alloc::vec![RegionLabel::Redundant; n];
    let mut source_id = alloc::vec![0i64; n];
    let mut scale = alloc::vec![0.0f64; n];
    for r in 0..spec.empty_rows.min(spec.rows) {
        for c in 0..spec.empty_cols.min(spec.cols) {
            labels[r * spec.cols + c] = RegionLabel::Empty;
            source_id[r * spec.cols + c] = -1;
        }
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| labels[i] != RegionLabel::Empty).collect();
    let mut unique_picked = 0usize;
    while unique_picked < spec.unique_regions && !candidates.is_empty() {
        let pick = rng.below(candidates.len());
        let region = candidates.swap_remove(pick);
        labels[region] = RegionLabel::Unique;
        source_id[region] = (spec.shared_sources + unique_picked) as i64;
        scale[region] = 1.0;
        unique_picked += 1;
    }
    for i in 0..n {
        if labels[i] == RegionLabel::Redundant {
            source_id[i] = (rng.below(spec.shared_sources.max(1))) as i64;
            scale[i] = rng.uniform(0.4, 1.0);
        }
    }

    // First interval: Monday 2019-07-01 00:00 UTC.
    let first_interval = days_from_civil(2019, 7, 1) * 24;
    let total = spec.train_hours + spec.test_hours;
    let mut images = Vec::with_capacity(total);
    for step in 0..total {
        let id = first_interval + step as i64;
        let mut img = Tensor::zeros(&[3, spec.rows, spec.cols]);
        for region in 0..n {
            if labels[region] == RegionLabel::Empty {
                continue;
            }
            let base = scale[region] * spec.amplitude * sources[source_id[region] as usize].value(id);
            let (r, c) = grid.row_col(region);
            for (ch, factor) in CHANNEL_FACTORS.iter().enumerate() {
                let noise = if spec.noise > 0.0 {
                    rng.normal() * spec.noise
                } else {
                    0.0
                };
                img.set3(ch, r, c, (base * factor + noise).max(0.0));
            }
        }
        images.push(img);
    }

    let poi = synth_poi(&grid, &labels, &mut rng);
    let series = IntervalSeries {
        grid,
        first_interval,
        images,
        channel_names: alloc::vec![
            "inflow".to_string(),
            "outflow".to_string(),
            "density".to_string()
        ],
        poi,
        poi_categories: SYNTH_POI_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        utc_offset_minutes: 0,
    };
    SynthCity {
        train_range: (first_interval, first_interval + spec.train_hours as i64),
        test_range: (
            first_interval + spec.train_hours as i64,
            first_interval + total as i64,
        ),
        series,
        labels,
        source_id,
        scale,
    }
}

/// POI counts correlated with the planted labels: unique regions look like
/// dense mixed-use centers, redundant ones like transit corridors, empty
/// ones have no POIs at all.
fn synth_poi(grid: &GridSpec, labels: &[RegionLabel], rng: &mut Rng) -> Tensor {
    let mut poi = Tensor::zeros(&[SYNTH_POI_CATEGORIES.len(), grid.rows, grid.cols]);
    for (region, label) in labels.iter().enumerate() {
        let (r, c) = grid.row_col(region);
        match label {
            RegionLabel::Empty => {}
            RegionLabel::Unique => {
                poi.set3(0, r, c, fmath::round(rng.uniform(15.0, 30.0)));
                poi.set3(1, r, c, fmath::round(rng.uniform(10.0, 20.0)));
                poi.set3(2, r, c, fmath::round(rng.uniform(3.0, 8.0)));
                poi.set3(3, r, c, fmath::round(rng.uniform(2.0, 6.0)));
            }
            RegionLabel::Redundant => {
                poi.set3(1, r, c, fmath::round(rng.uniform(2.0, 6.0)));
                poi.set3(2, r, c, fmath::round(rng.uniform(4.0, 10.0)));
            }
        }
    }
    poi
}
