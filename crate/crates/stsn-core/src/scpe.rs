//! Spatially constrained position embedding: per-region concatenation of
//! learnable cell embeddings over a spatial hierarchy.
//!
//! Level 1 is the finest (one cell per region); each further level groups
//! `branch x branch` blocks of the previous one, so two regions share a
//! level's sub-vector exactly when they fall into the same block at that
//! level.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::grid::GridSpec;
use crate::params::{embedding_init, Binder, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{shape_err, TensorError};

/// Region -> cell index maps plus per-level embedding widths.
#[derive(Clone, Debug, PartialEq)]
pub struct ScpeLayout {
    pub levels: usize,
    pub branch: usize,
    /// Embedding width per level; sums to the feature dimension d.
    pub widths: Vec<usize>,
    /// Dictionary size per level.
    pub cells: Vec<usize>,
    /// `maps[level][region]` = cell id at that level (level 0 = finest).
    pub maps: Vec<Vec<usize>>,
}

/// Splits d across levels: every level gets `d / levels`, the finest level
/// absorbs the remainder (d = 128, 3 levels -> 44/42/42).
pub fn split_widths(d: usize, levels: usize) -> Vec<usize> {
    let base = d / levels;
    let mut widths = alloc::vec![base; levels];
    widths[0] += d - base * levels;
    widths
}

/// Builds the hierarchy index maps for a grid.
pub fn build_hierarchy(grid: &GridSpec, levels: usize, branch: usize, d: usize) -> ScpeLayout {
    assert!(levels >= 1, "at least one level");
    assert!(branch >= 2, "branching factor >= 2");
    let widths = split_widths(d, levels);
    let mut cells = Vec::with_capacity(levels);
    let mut maps = Vec::with_capacity(levels);
    let mut step = 1usize;
    for _ in 0..levels {
        let crows = grid.rows.div_ceil(step);
        let ccols = grid.cols.div_ceil(step);
        cells.push(crows * ccols);
        let mut map = Vec::with_capacity(grid.regions());
        for n in 0..grid.regions() {
            let (row, col) = grid.row_col(n);
            map.push((row / step) * ccols + col / step);
        }
        maps.push(map);
        step *= branch;
    }
    ScpeLayout {
        levels,
        branch,
        widths,
        cells,
        maps,
    }
}

impl ScpeLayout {
    /// Total learnable scalars across all dictionaries.
    pub fn parameter_count(&self) -> usize {
        self.cells
            .iter()
            .zip(&self.widths)
            .map(|(c, w)| c * w)
            .sum()
    }

    pub fn level_param_name(level_1based: usize) -> String {
        format!("scpe.level{level_1based}.table")
    }

    pub fn insert_params(&self, params: &mut ParamSet, rng: &mut Rng) {
        for j in 0..self.levels {
            params.insert(
                &Self::level_param_name(j + 1),
                embedding_init(&[self.cells[j], self.widths[j]], rng),
            );
        }
    }

    /// Position embeddings for all regions: `[N, d]`, rows in region order.
    pub fn lookup_all(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
    ) -> Result<Var, TensorError> {
        let mut parts = Vec::with_capacity(self.levels);
        for j in 0..self.levels {
            let table = binder.var(tape, &Self::level_param_name(j + 1));
            parts.push(tape.embedding_lookup(table, &self.maps[j])?);
        }
        tape.concat(&parts, 1)
    }

    /// Position embedding of a single region: `[1, d]`.
    pub fn lookup_region(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        region: usize,
    ) -> Result<Var, TensorError> {
        if region >= self.maps[0].len() {
            return Err(shape_err(
                "scpe_lookup",
                format!("region {region} out of range"),
            ));
        }
        let mut parts = Vec::with_capacity(self.levels);
        for j in 0..self.levels {
            let table = binder.var(tape, &Self::level_param_name(j + 1));
            parts.push(tape.embedding_lookup(table, &[self.maps[j][region]])?);
        }
        tape.concat(&parts, 1)
    }
}
