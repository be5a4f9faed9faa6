//! Binary PGM (P5) writer for grid heatmaps.

use std::io::Write;
use std::path::Path;

use crate::error::CliError;

/// Writes an H x W value grid as a binary P5 PGM, maxval 255, row-major.
/// Values scale linearly from [0, max] to [0, 255]; an all-zero grid is
/// all-black.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<(), CliError> {
    assert_eq!(values.len(), rows * cols);
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut buf = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for &v in values {
        let byte = if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        buf.push(byte);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}
