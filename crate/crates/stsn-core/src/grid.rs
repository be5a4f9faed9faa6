//! Uniform H x W partition of a city bounding box.

use alloc::format;
use alloc::string::String;

/// Grid over a lat/lon bounding box. Region index `n = row * cols + col`,
/// row 0 at `lat_min`, col 0 at `lon_min`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub rows: usize,
    pub cols: usize,
    /// Nominal cell edge length in meters; metadata only.
    pub cell_meters: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridError {
    InvalidBounds(String),
    OutOfBounds { lat: f64, lon: f64 },
}

impl core::fmt::Display for GridError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GridError::InvalidBounds(s) => write!(f, "invalid grid: {s}"),
            GridError::OutOfBounds { lat, lon } => {
                write!(f, "point ({lat}, {lon}) outside grid bounding box")
            }
        }
    }
}

impl core::error::Error for GridError {}

impl GridSpec {
    pub fn new(
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
        rows: usize,
        cols: usize,
        cell_meters: f64,
    ) -> Result<Self, GridError> {
        // NaN bounds fail this check too, which is intended.
        let ordered = lat_min < lat_max && lon_min < lon_max;
        if !ordered {
            return Err(GridError::InvalidBounds(format!(
                "lat [{lat_min}, {lat_max}], lon [{lon_min}, {lon_max}]"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(GridError::InvalidBounds(format!("{rows} x {cols} cells")));
        }
        Ok(GridSpec {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            rows,
            cols,
            cell_meters,
        })
    }

    /// Number of regions N = rows * cols.
    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }

    /// Region index of the cell containing a point.
    ///
    /// Boundary convention: a point on a shared cell edge belongs to the cell
    /// with the larger row/col index; points on the outer max edges belong to
    /// the last cell, so the closed bounding box is fully partitioned.
    pub fn locate(&self, lat: f64, lon: f64) -> Result<usize, GridError> {
        if !(self.lat_min..=self.lat_max).contains(&lat)
            || !(self.lon_min..=self.lon_max).contains(&lon)
        {
            return Err(GridError::OutOfBounds { lat, lon });
        }
        let fr = (lat - self.lat_min) / (self.lat_max - self.lat_min) * self.rows as f64;
        let fc = (lon - self.lon_min) / (self.lon_max - self.lon_min) * self.cols as f64;
        let row = (crate::fmath::floor(fr) as usize).min(self.rows - 1);
        let col = (crate::fmath::floor(fc) as usize).min(self.cols - 1);
        Ok(row * self.cols + col)
    }

    /// (row, col) of a region index.
    pub fn row_col(&self, region: usize) -> (usize, usize) {
        (region / self.cols, region % self.cols)
    }

    /// Latitude/longitude of a cell's center.
    pub fn cell_center(&self, region: usize) -> (f64, f64) {
        let (row, col) = self.row_col(region);
        let lat =
            self.lat_min + (row as f64 + 0.5) / self.rows as f64 * (self.lat_max - self.lat_min);
        let lon =
            self.lon_min + (col as f64 + 0.5) / self.cols as f64 * (self.lon_max - self.lon_min);
        (lat, lon)
    }
}
