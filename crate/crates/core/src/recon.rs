//! Ray triangulation and inverse-distance gridding.

use rayon::prelude::*;

use crate::densematch::DisparityMap;
use crate::error::{Error, Result};
use crate::geom::{PushbroomCamera, Ray, Vec3};
use crate::ingest::{DemGrid, Lattice, PointCloud};

pub const DEFAULT_MAX_MISS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulatedPoint {
    pub position: Vec3,
    pub ray_miss_distance: f64,
}

/// Midpoint of the shortest segment between two rays, restricted to
/// non-negative ray parameters.
pub fn triangulate(r1: &Ray, r2: &Ray) -> Result<TriangulatedPoint> {
    let (d1, d2) = (r1.direction(), r2.direction());
    let b = d1.dot(&d2);
    if b.abs() >= 1.0 - 1e-12 {
        return Err(Error::DegenerateGeometry("rays are parallel".into()));
    }
    let w = r1.origin - r2.origin;
    let (d, e) = (d1.dot(&w), d2.dot(&w));
    let denom = 1.0 - b * b;
    let (s, t) = ((b * e - d) / denom, (e - b * d) / denom);

    let closest = |s: f64, t: f64| {
        let (p, q) = (r1.at(s), r2.at(t));
        (p, q, (p - q).norm())
    };
    let (p, q, miss) = if s >= 0.0 && t >= 0.0 {
        closest(s, t)
    } else {
        // the constrained optimum lies on one of the two boundary rays
        let on_s0 = closest(0.0, e.max(0.0));
        let on_t0 = closest((-d).max(0.0), 0.0);
        if on_s0.2 <= on_t0.2 {
            on_s0
        } else {
            on_t0
        }
    };
    Ok(TriangulatedPoint {
        position: 0.5 * (p + q),
        ray_miss_distance: miss,
    })
}

/// One point per valid disparity pixel; rays missing by more than
/// `max_miss` metres are dropped.
pub fn cloud_from_disparity(
    disp: &DisparityMap,
    left: &PushbroomCamera,
    right: &PushbroomCamera,
    max_miss: f64,
) -> PointCloud {
    let rows: Vec<Vec<TriangulatedPoint>> = (0..disp.n_rows)
        .into_par_iter()
        .map(|r| {
            (0..disp.n_cols)
                .filter_map(|c| {
                    let (pl, pr) = disp.correspondence(c, r)?;
                    let ray1 = left.back_project(&pl).ok()?;
                    let ray2 = right.back_project(&pr).ok()?;
                    let tp = triangulate(&ray1, &ray2).ok()?;
                    (tp.ray_miss_distance <= max_miss).then_some(tp)
                })
                .collect()
        })
        .collect();
    let pts: Vec<TriangulatedPoint> = rows.into_iter().flatten().collect();
    PointCloud {
        points: pts.iter().map(|p| p.position).collect(),
        errors: Some(pts.iter().map(|p| p.ray_miss_distance).collect()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GriddingParams {
    pub cell_size: f64,
    pub search_radius: f64,
    pub idw_power: f64,
    pub min_samples: usize,
}

impl GriddingParams {
    /// Conventional defaults for a given cell size.
    pub fn with_cell_size(cell_size: f64) -> Self {
        Self {
            cell_size,
            search_radius: 2.0 * cell_size,
            idw_power: 2.0,
            min_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Domain("cell size must be > 0".into()));
        }
        if !(self.search_radius >= self.cell_size / 2.0 && self.search_radius.is_finite()) {
            return Err(Error::Domain("search radius must be >= cell_size / 2".into()));
        }
        if !(self.idw_power >= 0.0) {
            return Err(Error::Domain("IDW power must be >= 0".into()));
        }
        if self.min_samples < 1 {
            return Err(Error::Domain("min_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weighted mean of `(distance, z)` samples; `scale` multiplies every
/// weight and exists only to make scale invariance testable.
fn idw(samples: impl Iterator<Item = (f64, f64)>, power: f64, eps: f64, scale: f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (d, z) in samples {
        let w = scale / (d + eps).powf(power);
        num += w * z;
        den += w;
    }
    (den > 0.0).then(|| num / den)
}

/// Uniform bucket index over the horizontal plane.
struct Buckets {
    x0: f64,
    y0: f64,
    pitch: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl Buckets {
    fn new(points: &[Vec3], pitch: f64) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        let nx = (((x1 - x0) / pitch).floor() as usize + 1).min(1 << 14);
        let ny = (((y1 - y0) / pitch).floor() as usize + 1).min(1 << 14);
        let pitch = pitch.max((x1 - x0) / nx as f64).max((y1 - y0) / ny as f64);
        let mut cells = vec![Vec::new(); nx * ny];
        let mut out = Self {
            x0,
            y0,
            pitch,
            nx,
            ny,
            cells: Vec::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let (bx, by) = out.bucket_of(p.x, p.y);
            cells[by * nx + bx].push(i as u32);
        }
        out.cells = cells;
        out
    }

    fn bucket_of(&self, x: f64, y: f64) -> (usize, usize) {
        let bx = ((x - self.x0) / self.pitch).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let by = ((y - self.y0) / self.pitch).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (bx, by)
    }

    /// Indices of all points that might lie within `radius` of `(x, y)`,
    /// in ascending order.
    fn candidates(&self, x: f64, y: f64, radius: f64, out: &mut Vec<u32>) {
        out.clear();
        let lo_x = ((x - radius - self.x0) / self.pitch).floor();
        let hi_x = ((x + radius - self.x0) / self.pitch).floor();
        let lo_y = ((y - radius - self.y0) / self.pitch).floor();
        let hi_y = ((y + radius - self.y0) / self.pitch).floor();
        if hi_x < 0.0 || hi_y < 0.0 || lo_x >= self.nx as f64 || lo_y >= self.ny as f64 {
            return;
        }
        let (lo_x, hi_x) = (lo_x.max(0.0) as usize, (hi_x as usize).min(self.nx - 1));
        let (lo_y, hi_y) = (lo_y.max(0.0) as usize, (hi_y as usize).min(self.ny - 1));
        for by in lo_y..=hi_y {
            for bx in lo_x..=hi_x {
                out.extend_from_slice(&self.cells[by * self.nx + bx]);
            }
        }
        out.sort_unstable();
    }
}

/// Grids a cloud onto `lattice`. Cells with fewer than `min_samples`
/// points within the search radius of their centre are nodata.
pub fn grid_dem(cloud: &PointCloud, params: &GriddingParams, lattice: Lattice) -> Result<DemGrid> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud has no points".into()));
    }
    let pts = &cloud.points;
    let buckets = Buckets::new(pts, params.search_radius);
    let eps = params.cell_size / 100.0;
    let r2 = params.search_radius * params.search_radius;

    let rows: Vec<Vec<Option<f64>>> = (0..lattice.n_rows)
        .into_par_iter()
        .map(|row| {
            let mut cand = Vec::new();
            (0..lattice.n_cols)
                .map(|col| {
                    let (cx, cy) = lattice.cell_center(col, row);
                    buckets.candidates(cx, cy, params.search_radius, &mut cand);
                    let near = cand.iter().filter_map(|&i| {
                        let p = &pts[i as usize];
                        let d2 = (p.x - cx).powi(2) + (p.y - cy).powi(2);
                        (d2 <= r2).then(|| (d2.sqrt(), p.z))
                    });
                    let count = near.clone().count();
                    if count < params.min_samples {
                        return None;
                    }
                    idw(near, params.idw_power, eps, 1.0)
                })
                .collect()
        })
        .collect();

    let mut dem = DemGrid::empty(lattice);
    for (row, vals) in rows.into_iter().enumerate() {
        for (col, v) in vals.into_iter().enumerate() {
            dem.set(col, row, v);
        }
    }
    Ok(dem)
}

/// Fills void cells of `dem` by IDW over points within `fill_radius`,
/// accepting a cell only when those points surround its centre in all four
/// quadrants, so voids are interpolated across but never extrapolated past
/// the edge of the data. Valid cells are left untouched.
pub fn fill_voids(dem: &DemGrid, cloud: &PointCloud, params: &GriddingParams, fill_radius: f64) -> Result<DemGrid> {
    GriddingParams { search_radius: fill_radius, ..*params }.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud has no points".into()));
    }
    let pts = &cloud.points;
    let buckets = Buckets::new(pts, fill_radius);
    let eps = params.cell_size / 100.0;
    let r2 = fill_radius * fill_radius;
    let lattice = dem.lattice;
    let rows: Vec<Vec<Option<f64>>> = (0..lattice.n_rows)
        .into_par_iter()
        .map(|row| {
            let mut cand = Vec::new();
            (0..lattice.n_cols)
                .map(|col| {
                    if let Some(z) = dem.get(col, row) {
                        return Some(z);
                    }
                    let (cx, cy) = lattice.cell_center(col, row);
                    buckets.candidates(cx, cy, fill_radius, &mut cand);
                    let mut quadrants = [false; 4];
                    let near: Vec<(f64, f64)> = cand
                        .iter()
                        .filter_map(|&i| {
                            let p = &pts[i as usize];
                            let (dx, dy) = (p.x - cx, p.y - cy);
                            let d2 = dx * dx + dy * dy;
                            (d2 <= r2).then(|| {
                                quadrants[(dx >= 0.0) as usize + 2 * (dy >= 0.0) as usize] = true;
                                (d2.sqrt(), p.z)
                            })
                        })
                        .collect();
                    if near.len() < params.min_samples || !quadrants.iter().all(|&q| q) {
                        return None;
                    }
                    idw(near.into_iter(), params.idw_power, eps, 1.0)
                })
                .collect()
        })
        .collect();
    let mut out = DemGrid::empty(lattice);
    for (row, vals) in rows.into_iter().enumerate() {
        for (col, v) in vals.into_iter().enumerate() {
            out.set(col, row, v);
        }
    }
    Ok(out)
}
