//! Deterministic toy-city trajectory simulator.
//!
//! Vehicles move between cell centers, one waypoint per simulated five
//! minutes, so consecutive points are at most one cell transition apart and
//! the expected inflow/outflow/density images can be counted directly from
//! the scripted cell sequences. That count is the independent oracle for the
//! trajectory aggregation pipeline, which sees only (timestamp, lat, lon)
//! triples and must re-derive the cells geometrically.

use alloc::vec::Vec;

use crate::features::TrajPoint;
use crate::grid::GridSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const WAYPOINT_SECONDS: i64 = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripPattern {
    /// Vehicles traverse a planted west-to-east chain of cells.
    Highway,
    /// Vehicles shuttle between a residential cell and a work cell.
    Commuter,
    /// Alternating highway and commuter vehicles.
    Mixed,
}

/// One scripted waypoint: the intended cell is recorded alongside the
/// emitted coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptPoint {
    pub t: i64,
    pub cell: usize,
    pub lat: f64,
    pub lon: f64,
}

/// Scripted vehicle set plus the planted structure.
#[derive(Clone, Debug)]
pub struct TripScript {
    pub grid: GridSpec,
    pub vehicles: Vec<Vec<ScriptPoint>>,
    pub highway_chain: Vec<usize>,
    pub clusters: Vec<usize>,
}

fn waypoint(grid: &GridSpec, cell: usize, t: i64) -> ScriptPoint {
    let (lat, lon) = grid.cell_center(cell);
    ScriptPoint { t, cell, lat, lon }
}

/// Scripts `n_vehicles` trips inside `[start_interval, start_interval +
/// intervals)` hours.
pub fn script_trips(
    grid: &GridSpec,
    n_vehicles: usize,
    pattern: TripPattern,
    start_interval: i64,
    intervals: usize,
    seed: u64,
) -> TripScript {
    let mut rng = Rng::new(seed);
    let mid_row = grid.rows / 2;
    let highway_chain: Vec<usize> = (0..grid.cols).map(|c| mid_row * grid.cols + c).collect();
    let home = 0usize;
    let work = grid.regions() - 1;
    let clusters = alloc::vec![home, work];
    let window_secs = intervals as i64 * 3600;
    let t0 = start_interval * 3600;

    let mut vehicles = Vec::with_capacity(n_vehicles);
    for v in 0..n_vehicles {
        let this_pattern = match pattern {
            TripPattern::Mixed => {
                if v % 2 == 0 {
                    TripPattern::Highway
                } else {
                    TripPattern::Commuter
                }
            }
            p => p,
        };
        let path: Vec<usize> = match this_pattern {
            TripPattern::Highway => {
                // Enter at a seeded offset along the chain, drive to the end.
                let entry = rng.below(highway_chain.len().max(1));
                highway_chain[entry..].to_vec()
            }
            TripPattern::Commuter | TripPattern::Mixed => l_path(grid, home, work),
        };
        // Stagger the start so the trip fits inside the window.
        let travel = (path.len() as i64).max(1) * WAYPOINT_SECONDS;
        let slack = (window_secs - travel).max(1);
        let offset = (rng.next_u64() % slack as u64) as i64;
        let mut points = Vec::with_capacity(path.len());
        for (i, &cell) in path.iter().enumerate() {
            points.push(waypoint(grid, cell, t0 + offset + i as i64 * WAYPOINT_SECONDS));
        }
        vehicles.push(points);
    }
    TripScript {
        grid: grid.clone(),
        vehicles,
        highway_chain,
        clusters,
    }
}

/// L-shaped cell path: along the row, then along the column.
fn l_path(grid: &GridSpec, from: usize, to: usize) -> Vec<usize> {
    let (fr, fc) = grid.row_col(from);
    let (tr, tc) = grid.row_col(to);
    let mut path = Vec::new();
    let mut c = fc as i64;
    let step_c: i64 = if tc >= fc { 1 } else { -1 };
    loop {
        path.push(fr * grid.cols + c as usize);
        if c == tc as i64 {
            break;
        }
        c += step_c;
    }
    let mut r = fr as i64;
    let step_r: i64 = if tr >= fr { 1 } else { -1 };
    while r != tr as i64 {
        r += step_r;
        path.push(r as usize * grid.cols + tc);
    }
    path
}

/// Exact expected `[3, H, W]` image (inflow, outflow, density) for one
/// interval, counted from the intended cell sequences. A transition counts
/// in the interval containing its arrival timestamp; density counts distinct
/// vehicles per visited cell.
pub fn expected_counts(script: &TripScript, interval_id: i64) -> Tensor {
    let grid = &script.grid;
    let mut img = Tensor::zeros(&[3, grid.rows, grid.cols]);
    let lo = interval_id * 3600;
    let hi = lo + 3600;
    for points in &script.vehicles {
        for w in points.windows(2) {
            if w[1].t >= lo && w[1].t < hi && w[0].cell != w[1].cell {
                let (sr, sc) = grid.row_col(w[0].cell);
                let (dr, dc) = grid.row_col(w[1].cell);
                img.set3(1, sr, sc, img.at3(1, sr, sc) + 1.0);
                img.set3(0, dr, dc, img.at3(0, dr, dc) + 1.0);
            }
        }
        let mut visited: Vec<usize> = Vec::new();
        for p in points {
            if p.t >= lo && p.t < hi && !visited.contains(&p.cell) {
                visited.push(p.cell);
                let (r, c) = grid.row_col(p.cell);
                img.set3(2, r, c, img.at3(2, r, c) + 1.0);
            }
        }
    }
    img
}

/// The script as plain trajectory points, the format ingestion consumes.
pub fn to_trajectories(script: &TripScript) -> Vec<Vec<TrajPoint>> {
    script
        .vehicles
        .iter()
        .map(|points| {
            points
                .iter()
                .map(|p| TrajPoint {
                    t: p.t,
                    lat: p.lat,
                    lon: p.lon,
                })
                .collect()
        })
        .collect()
}
