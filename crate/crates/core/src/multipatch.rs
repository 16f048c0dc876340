//! Partition of the label image into an m×n grid of patches, one head per patch.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn patch_height(&self) -> usize {
        self.height / self.rows
    }

    pub fn patch_width(&self) -> usize {
        self.width / self.cols
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_height() * self.patch_width()
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major patch index and in-patch flat offset of a label pixel.
    pub fn locate(&self, row: usize, col: usize) -> (usize, usize) {
        let (ph, pw) = (self.patch_height(), self.patch_width());
        ((row / ph) * self.cols + col / pw, (row % ph) * pw + col % pw)
    }
}

pub fn make_grid(height: usize, width: usize, rows: usize, cols: usize) -> Result<PatchGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::Grid(format!("grid {rows}x{cols} must have at least one patch")));
    }
    if height % rows != 0 || width % cols != 0 {
        return Err(Error::Grid(format!(
            "{height}x{width} labels do not divide into a {rows}x{cols} grid"
        )));
    }
    Ok(PatchGrid { rows, cols, height, width })
}

/// Splits a row-major `height × width` buffer into row-major patches.
pub fn split_grid<T: Clone>(data: &[T], grid: &PatchGrid) -> Result<Vec<Vec<T>>> {
    if data.len() != grid.height * grid.width {
        return Err(Error::Dimension(format!(
            "{} values for a {}x{} grid area",
            data.len(),
            grid.height,
            grid.width
        )));
    }
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    let mut out = Vec::with_capacity(grid.patch_count());
    for pr in 0..grid.rows {
        for pc in 0..grid.cols {
            let mut patch = Vec::with_capacity(ph * pw);
            for r in pr * ph..(pr + 1) * ph {
                let start = r * grid.width + pc * pw;
                patch.extend_from_slice(&data[start..start + pw]);
            }
            out.push(patch);
        }
    }
    Ok(out)
}

/// Inverse of [`split_grid`].
pub fn assemble_grid<T: Clone>(patches: &[Vec<T>], grid: &PatchGrid) -> Result<Vec<T>> {
    if patches.len() != grid.patch_count() {
        return Err(Error::Dimension(format!(
            "{} patches for a {}x{} grid",
            patches.len(),
            grid.rows,
            grid.cols
        )));
    }
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    if let Some(i) = patches.iter().position(|p| p.len() != ph * pw) {
        return Err(Error::Dimension(format!(
            "patch {i} has {} values, expected {ph}x{pw}",
            patches[i].len()
        )));
    }
    let mut out = Vec::with_capacity(grid.height * grid.width);
    for r in 0..grid.height {
        let (pr, ir) = (r / ph, r % ph);
        for pc in 0..grid.cols {
            out.extend_from_slice(&patches[pr * grid.cols + pc][ir * pw..(ir + 1) * pw]);
        }
    }
    Ok(out)
}

pub fn split_labels(labels: &LabelMap, grid: &PatchGrid) -> Result<Vec<LabelMap>> {
    if labels.height != grid.height || labels.width != grid.width {
        return Err(Error::Dimension(format!(
            "labels {}x{} vs grid over {}x{}",
            labels.height, labels.width, grid.height, grid.width
        )));
    }
    split_grid(&labels.data, grid)?
        .into_iter()
        .map(|d| LabelMap::new(grid.patch_height(), grid.patch_width(), d))
        .collect()
}

pub fn assemble_prediction(patches: &[LabelMap], grid: &PatchGrid) -> Result<LabelMap> {
    let data: Vec<Vec<usize>> = patches.iter().map(|p| p.data.clone()).collect();
    LabelMap::new(grid.height, grid.width, assemble_grid(&data, grid)?)
}

/// Per-head seed; depends only on the run seed and the patch index.
pub fn head_seed(seed: u64, patch: usize) -> u64 {
    crate::rng::derive_seed(seed, &[0x4845_4144, patch as u64])
}

/// Trains one head per patch; `train(patch_index, head_seed)` must be independent across patches.
pub fn train_multipatch<H, F>(grid: &PatchGrid, seed: u64, train: F) -> Result<Vec<H>>
where
    H: Send,
    F: Fn(usize, u64) -> Result<H> + Sync,
{
    (0..grid.patch_count())
        .into_par_iter()
        .map(|i| train(i, head_seed(seed, i)))
        .collect()
}
