//! Void filling and feathered blending of a high-resolution DEM over a
//! coarser reference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{DemGrid, Lattice};

pub const DEFAULT_BLEND_LEN: f64 = 14.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    pub lattice: Lattice,
    pub alpha: Vec<f64>,
}

impl WeightField {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.alpha[self.lattice.index(col, row)]
    }
}

/// Resamples `src` onto `lattice` by nodata-aware bilinear interpolation.
/// Identical lattices are copied verbatim.
pub fn resample_to(src: &DemGrid, lattice: Lattice) -> Result<DemGrid> {
    if src.lattice == lattice {
        return Ok(src.clone());
    }
    if !src.lattice.overlaps(&lattice) {
        return Err(Error::Extent("grids do not overlap".into()));
    }
    let rows: Vec<Vec<Option<f64>>> = (0..lattice.n_rows)
        .into_par_iter()
        .map(|r| {
            (0..lattice.n_cols)
                .map(|c| {
                    let (x, y) = lattice.cell_center(c, r);
                    src.sample_bilinear(x, y)
                })
                .collect()
        })
        .collect();
    let mut out = DemGrid::empty(lattice);
    out.nodata = src.nodata;
    for (r, vals) in rows.into_iter().enumerate() {
        for (c, v) in vals.into_iter().enumerate() {
            out.set(c, r, v);
        }
    }
    Ok(out)
}

/// Primary where valid, otherwise the reference resampled to the
/// primary lattice.
pub fn fill_holes(primary: &DemGrid, reference: &DemGrid) -> Result<DemGrid> {
    let r = resample_to(reference, primary.lattice)?;
    let mut out = primary.clone();
    for row in 0..out.n_rows() {
        for col in 0..out.n_cols() {
            if out.get(col, row).is_none() {
                out.set(col, row, r.get(col, row));
            }
        }
    }
    Ok(out)
}

/// Two-pass 3-4 chamfer distance (in units of 1/3 cell) from every cell
/// to the nearest `false` cell. Cells with no `false` cell anywhere get
/// `u32::MAX`; the area beyond the grid edge does not count as exterior.
fn chamfer(mask: &[bool], w: usize, h: usize) -> Vec<u32> {
    const INF: u32 = u32::MAX / 2;
    let mut d: Vec<u32> = mask.iter().map(|&m| if m { INF } else { 0 }).collect();
    let at = |d: &[u32], c: isize, r: isize| -> u32 {
        if c < 0 || r < 0 || c >= w as isize || r >= h as isize {
            INF
        } else {
            d[r as usize * w + c as usize]
        }
    };
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                at(&d, c - 1, r).saturating_add(3),
                at(&d, c, r - 1).saturating_add(3),
                at(&d, c - 1, r - 1).saturating_add(4),
                at(&d, c + 1, r - 1).saturating_add(4),
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(best);
        }
    }
    for r in (0..h as isize).rev() {
        for c in (0..w as isize).rev() {
            let i = r as usize * w + c as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                at(&d, c + 1, r).saturating_add(3),
                at(&d, c, r + 1).saturating_add(3),
                at(&d, c + 1, r + 1).saturating_add(4),
                at(&d, c - 1, r + 1).saturating_add(4),
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(best);
        }
    }
    d.into_iter().map(|v| if v >= INF { u32::MAX } else { v }).collect()
}

/// Linear ramp from 0 on the footprint exterior to 1 at `blend_len` cells
/// inside. `blend_len == 0` gives the binary validity mask.
pub fn compute_alpha(primary: &DemGrid, blend_len: f64) -> Result<WeightField> {
    let mask: Vec<bool> = primary.values.iter().map(|&v| v != primary.nodata).collect();
    Ok(WeightField {
        lattice: primary.lattice,
        alpha: alpha_from_mask(&mask, primary.n_cols(), primary.n_rows(), blend_len)?,
    })
}

pub fn alpha_from_mask(mask: &[bool], n_cols: usize, n_rows: usize, blend_len: f64) -> Result<Vec<f64>> {
    if !(blend_len >= 0.0 && blend_len.is_finite()) {
        return Err(Error::Domain(format!("blend length {blend_len} must be >= 0")));
    }
    if mask.len() != n_cols * n_rows {
        return Err(Error::Extent("mask size does not match grid".into()));
    }
    if blend_len == 0.0 {
        return Ok(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
    }
    Ok(chamfer(mask, n_cols, n_rows)
        .into_iter()
        .map(|d| {
            if d == u32::MAX {
                1.0
            } else {
                (d as f64 / 3.0 / blend_len).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// `α·primary + (1 − α)·reference`, with α forced to 0 where the primary
/// is void and to 1 where the reference is void.
pub fn blend(primary: &DemGrid, reference: &DemGrid, alpha: &WeightField) -> Result<DemGrid> {
    if primary.lattice != reference.lattice || primary.lattice != alpha.lattice {
        return Err(Error::Extent("blend inputs must share one lattice".into()));
    }
    let mut out = primary.clone();
    for row in 0..out.n_rows() {
        for col in 0..out.n_cols() {
            let v = match (primary.get(col, row), reference.get(col, row)) {
                (Some(p), Some(r)) => {
                    let a = alpha.get(col, row);
                    if a >= 1.0 {
                        Some(p)
                    } else if a <= 0.0 {
                        Some(r)
                    } else {
                        Some(a * p + (1.0 - a) * r)
                    }
                }
                (Some(p), None) => Some(p),
                (None, r) => r,
            };
            out.set(col, row, v);
        }
    }
    Ok(out)
}

/// Resamples the reference to the primary lattice and blends with a
/// chamfer ramp of `blend_len` cells.
pub fn mosaic(primary: &DemGrid, reference: &DemGrid, blend_len: f64) -> Result<DemGrid> {
    let r = resample_to(reference, primary.lattice)?;
    let alpha = compute_alpha(primary, blend_len)?;
    blend(primary, &r, &alpha)
}
