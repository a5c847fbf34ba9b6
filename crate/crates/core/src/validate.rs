//! Accuracy measures: elevation profiles, vertical RMSE, planimetric
//! offsets from hillshade correlation, triangulation statistics.

use rayon::prelude::*;

use crate::densematch::parabola_offset;
use crate::error::{Error, Result};
use crate::ingest::{DemGrid, Lattice, PointCloud, RasterImage};
use crate::mosaic::resample_to;

pub type XY = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub a: XY,
    pub b: XY,
    /// arc length from `a` and elevation, `None` over nodata
    pub samples: Vec<(f64, Option<f64>)>,
}

impl Profile {
    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.1.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileStats {
    pub rmse: f64,
    pub mean_delta: f64,
    pub n: usize,
}

/// Bilinear samples every `step` metres from `a` towards `b`.
pub fn extract_profile(dem: &DemGrid, a: XY, b: XY, step: f64) -> Result<Profile> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("profile step {step} must be > 0")));
    }
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let n = (len / step).floor() as usize + 1;
    let (ux, uy) = if len > 0.0 {
        ((b.0 - a.0) / len, (b.1 - a.1) / len)
    } else {
        (0.0, 0.0)
    };
    let mut inside = false;
    let samples = (0..n)
        .map(|i| {
            let s = i as f64 * step;
            let (x, y) = (a.0 + ux * s, a.1 + uy * s);
            inside |= dem.lattice.contains(x, y);
            (s, dem.sample_bilinear(x, y))
        })
        .collect();
    if !inside {
        return Err(Error::Extent(format!("profile {a:?} -> {b:?} misses the grid")));
    }
    Ok(Profile { a, b, samples })
}

fn stats(deltas: impl Iterator<Item = f64>) -> Option<ProfileStats> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for d in deltas {
        n += 1;
        sum += d;
        sq += d * d;
    }
    (n > 0).then(|| ProfileStats {
        rmse: (sq / n as f64).sqrt(),
        mean_delta: sum / n as f64,
        n,
    })
}

/// Statistics of `p1 − p2` over samples valid in both.
pub fn profile_rmse(p1: &Profile, p2: &Profile) -> Result<ProfileStats> {
    if p1.samples.len() != p2.samples.len()
        || p1.samples.iter().zip(&p2.samples).any(|(a, b)| (a.0 - b.0).abs() > 1e-9)
    {
        return Err(Error::Domain("profiles use different arc-length sampling".into()));
    }
    let deltas = p1
        .samples
        .iter()
        .zip(&p2.samples)
        .filter_map(|(a, b)| Some(a.1? - b.1?));
    stats(deltas).ok_or_else(|| Error::InsufficientOverlap("profiles share no valid samples".into()))
}

/// `dem − reference` statistics over every valid cell of `dem` whose
/// centre has a reference value (reference sampled bilinearly).
pub fn grid_stats(dem: &DemGrid, reference: &DemGrid) -> Result<ProfileStats> {
    let deltas = (0..dem.n_rows()).flat_map(|r| {
        (0..dem.n_cols()).filter_map(move |c| {
            let z = dem.get(c, r)?;
            let (x, y) = dem.cell_center(c, r);
            Some(z - reference.sample_bilinear(x, y)?)
        })
    });
    stats(deltas).ok_or_else(|| Error::InsufficientOverlap("grids share no valid cells".into()))
}

/// Block mean of `dem` onto the coarser `lattice`: each output cell
/// averages the valid fine cells whose centres fall inside it.
pub fn aggregate_to(dem: &DemGrid, lattice: Lattice) -> DemGrid {
    let mut sum = vec![0.0; lattice.len()];
    let mut count = vec![0usize; lattice.len()];
    for r in 0..dem.n_rows() {
        for c in 0..dem.n_cols() {
            let Some(z) = dem.get(c, r) else { continue };
            let (x, y) = dem.cell_center(c, r);
            let cc = ((x - lattice.origin_x) / lattice.cell_size).floor();
            let rr = ((y - lattice.origin_y) / lattice.cell_size).floor();
            if cc < 0.0 || rr < 0.0 || cc >= lattice.n_cols as f64 || rr >= lattice.n_rows as f64 {
                continue;
            }
            let i = lattice.index(cc as usize, rr as usize);
            sum[i] += z;
            count[i] += 1;
        }
    }
    let mut out = DemGrid::empty(lattice);
    out.nodata = dem.nodata;
    for i in 0..lattice.len() {
        if count[i] > 0 {
            out.values[i] = sum[i] / count[i] as f64;
        }
    }
    out
}

/// Mean and population standard deviation of per-point miss distances.
pub fn triangulation_error_stats(cloud: &PointCloud) -> Result<(f64, f64)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud has no points".into()));
    }
    let e = cloud
        .errors
        .as_ref()
        .ok_or_else(|| Error::Domain("cloud carries no triangulation errors".into()))?;
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Surface gradient at a cell from central differences, one-sided at
/// voids and edges.
fn gradient(dem: &DemGrid, c: usize, r: usize) -> Option<(f64, f64)> {
    let z = dem.get(c, r)?;
    let cs = dem.cell_size();
    let axis = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
        (Some(a), Some(b)) => Some((b - a) / (2.0 * cs)),
        (Some(a), None) => Some((z - a) / cs),
        (None, Some(b)) => Some((b - z) / cs),
        (None, None) => None,
    };
    let left = c.checked_sub(1).and_then(|c| dem.get(c, r));
    let right = (c + 1 < dem.n_cols()).then(|| dem.get(c + 1, r)).flatten();
    let down = r.checked_sub(1).and_then(|r| dem.get(c, r));
    let up = (r + 1 < dem.n_rows()).then(|| dem.get(c, r + 1)).flatten();
    Some((axis(left, right)?, axis(down, up)?))
}

/// Lambertian intensity in [0, 1] per cell, grid orientation (row 0 south);
/// `None` at nodata.
fn shade(dem: &DemGrid, sun_azimuth_deg: f64, sun_elevation_deg: f64) -> Vec<Option<f64>> {
    let (az, el) = (sun_azimuth_deg.to_radians(), sun_elevation_deg.to_radians());
    let sun = (az.sin() * el.cos(), az.cos() * el.cos(), el.sin());
    (0..dem.n_rows())
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..dem.n_cols()).map(move |c| {
                let (gx, gy) = gradient(dem, c, r)?;
                let norm = (gx * gx + gy * gy + 1.0).sqrt();
                let i = (-gx * sun.0 - gy * sun.1 + sun.2) / norm;
                Some(i.clamp(0.0, 1.0))
            })
        })
        .collect()
}

/// Shaded relief scaled to `[0, 65535]`, north up; nodata renders as 0.
pub fn hillshade(dem: &DemGrid, sun_azimuth_deg: f64, sun_elevation_deg: f64) -> RasterImage {
    let s = shade(dem, sun_azimuth_deg, sun_elevation_deg);
    let (w, h) = (dem.n_cols(), dem.n_rows());
    RasterImage::from_fn(w, h, |c, r| s[(h - 1 - r) * w + c].unwrap_or(0.0) * 65535.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetParams {
    /// patch half-width, cells
    pub patch_radius: usize,
    /// search half-width, cells
    pub search_radius: usize,
    pub sun_azimuth_deg: f64,
    pub sun_elevation_deg: f64,
}

impl Default for OffsetParams {
    fn default() -> Self {
        Self {
            patch_radius: 8,
            search_radius: 4,
            sun_azimuth_deg: 315.0,
            sun_elevation_deg: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetReport {
    pub mean_offset: f64,
    /// per input feature, `None` where skipped
    pub offsets: Vec<Option<XY>>,
}

/// Planimetric displacement of `reference` relative to `dem` around each
/// feature, from NCC of hillshade patches on the `dem` lattice. A feature
/// is skipped if any patch or search cell is void in either grid.
pub fn horizontal_offset(
    dem: &DemGrid,
    reference: &DemGrid,
    features: &[XY],
    params: &OffsetParams,
) -> Result<OffsetReport> {
    let reference = resample_to(reference, dem.lattice)?;
    let s1 = shade(dem, params.sun_azimuth_deg, params.sun_elevation_deg);
    let s2 = shade(&reference, params.sun_azimuth_deg, params.sun_elevation_deg);
    let (w, h) = (dem.n_cols() as i64, dem.n_rows() as i64);
    let (pr, sr) = (params.patch_radius as i64, params.search_radius as i64);
    let cs = dem.cell_size();

    let window = |s: &[Option<f64>], cx: i64, cy: i64| -> Option<Vec<f64>> {
        let mut v = Vec::with_capacity(((2 * pr + 1) * (2 * pr + 1)) as usize);
        for y in cy - pr..=cy + pr {
            for x in cx - pr..=cx + pr {
                if x < 0 || y < 0 || x >= w || y >= h {
                    return None;
                }
                v.push(s[(y * w + x) as usize]?);
            }
        }
        Some(v)
    };

    let offsets: Vec<Option<XY>> = features
        .par_iter()
        .map(|&(fx, fy)| {
            let cx = ((fx - dem.lattice.origin_x) / cs).floor() as i64;
            let cy = ((fy - dem.lattice.origin_y) / cs).floor() as i64;
            let base = window(&s1, cx, cy)?;
            let n = (2 * sr + 1) as usize;
            let mut scores = vec![f64::NAN; n * n];
            for j in -sr..=sr {
                for i in -sr..=sr {
                    let cand = window(&s2, cx + i, cy + j)?;
                    scores[((j + sr) as usize) * n + (i + sr) as usize] =
                        crate::densematch::ncc(&base, &cand).unwrap_or(f64::NAN);
                }
            }
            let (mut best, mut bi, mut bj) = (f64::NEG_INFINITY, 0usize, 0usize);
            for j in 0..n {
                for i in 0..n {
                    if scores[j * n + i] > best {
                        best = scores[j * n + i];
                        bi = i;
                        bj = j;
                    }
                }
            }
            if !best.is_finite() || bi == 0 || bj == 0 || bi == n - 1 || bj == n - 1 {
                return None;
            }
            let at = |i: usize, j: usize| scores[j * n + i];
            let ox = parabola_offset(at(bi - 1, bj), best, at(bi + 1, bj))?;
            let oy = parabola_offset(at(bi, bj - 1), best, at(bi, bj + 1))?;
            Some((
                (bi as f64 - sr as f64 + ox) * cs,
                (bj as f64 - sr as f64 + oy) * cs,
            ))
        })
        .collect();

    let kept: Vec<f64> = offsets.iter().flatten().map(|(x, y)| x.hypot(*y)).collect();
    if kept.is_empty() {
        return Err(Error::InsufficientFeatures(
            "no feature had a complete patch in both grids".into(),
        ));
    }
    Ok(OffsetReport {
        mean_offset: kept.iter().sum::<f64>() / kept.len() as f64,
        offsets,
    })
}
