//! Dense NCC block matching after affine pre-alignment.
//!
//! Disparities are expressed in continuous image coordinates: a left pixel
//! `(col, row)` of the full frame has centre `(col + 0.5, row + 0.5)` and
//! its match in the right image sits at that centre plus `(dx, dy)`.
//!
//! All window sums are evaluated per pixel in a fixed order, so the result
//! for a given pixel does not depend on the crop, the row partitioning or
//! the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::ImagePoint;
use crate::ingest::RasterImage;

/// `x' = m[0]·x + m[1]·y + m[2]`, `y' = m[3]·x + m[4]·y + m[5]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [f64; 6],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = m[0] * m[4] - m[1] * m[3];
        if det.abs() < 1e-12 {
            return Err(Error::DegenerateGeometry("singular affine".into()));
        }
        let (a, b, c, d) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Ok(Self {
            m: [a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])],
        })
    }

    /// Least-squares affine mapping `from[i]` onto `to[i]`.
    pub fn fit(from: &[ImagePoint], to: &[ImagePoint]) -> Result<Self> {
        if from.len() != to.len() || from.len() < 3 {
            return Err(Error::DegenerateGeometry(format!(
                "affine fit needs >= 3 correspondences, got {}",
                from.len().min(to.len())
            )));
        }
        // centre for conditioning
        let n = from.len() as f64;
        let (cx, cy) = from
            .iter()
            .fold((0.0, 0.0), |a, p| (a.0 + p.sample / n, a.1 + p.line / n));
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut atx = nalgebra::Vector3::<f64>::zeros();
        let mut aty = nalgebra::Vector3::<f64>::zeros();
        for (p, q) in from.iter().zip(to) {
            let a = nalgebra::Vector3::new(p.sample - cx, p.line - cy, 1.0);
            ata += a * a.transpose();
            atx += a * q.sample;
            aty += a * q.line;
        }
        let chol = ata
            .cholesky()
            .ok_or_else(|| Error::DegenerateGeometry("collinear correspondences".into()))?;
        let sx = chol.solve(&atx);
        let sy = chol.solve(&aty);
        Ok(Self {
            m: [
                sx[0],
                sx[1],
                sx[2] - sx[0] * cx - sx[1] * cy,
                sy[0],
                sy[1],
                sy[2] - sy[0] * cx - sy[1] * cy,
            ],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub x_min: usize,
    pub y_min: usize,
    pub width: usize,
    pub height: usize,
}

impl Crop {
    pub fn full(img: &RasterImage) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            width: img.n_cols,
            height: img.n_rows,
        }
    }

    fn check(&self, img: &RasterImage, which: &str) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || self.x_min + self.width > img.n_cols
            || self.y_min + self.height > img.n_rows
        {
            return Err(Error::Bounds(format!(
                "{which} crop {self:?} outside {}x{} image",
                img.n_cols, img.n_rows
            )));
        }
        Ok(())
    }

    fn contains_window(&self, cx: i64, cy: i64, r: i64) -> bool {
        cx - r >= self.x_min as i64
            && cy - r >= self.y_min as i64
            && cx + r < (self.x_min + self.width) as i64
            && cy + r < (self.y_min + self.height) as i64
    }
}

impl std::str::FromStr for Crop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Domain(format!("crop `{s}` is not x,y,w,h")))?;
        match parts[..] {
            [x_min, y_min, width, height] => Ok(Self {
                x_min,
                y_min,
                width,
                height,
            }),
            _ => Err(Error::Domain(format!("crop `{s}` is not x,y,w,h"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchParams {
    pub window_radius: usize,
    pub search_x: (i32, i32),
    pub search_y: (i32, i32),
    pub min_ncc: f64,
    pub left_crop: Option<Crop>,
    pub right_crop: Option<Crop>,
    /// reverse match must land within this many pixels of the origin
    pub lr_tolerance: Option<f64>,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            window_radius: 7,
            search_x: (-16, 16),
            search_y: (-3, 3),
            min_ncc: 0.5,
            left_crop: None,
            right_crop: None,
            lr_tolerance: Some(1.0),
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_radius < 1 {
            return Err(Error::Domain("window radius must be >= 1".into()));
        }
        if self.search_x.0 > self.search_x.1 || self.search_y.0 > self.search_y.1 {
            return Err(Error::Domain("empty search range".into()));
        }
        if !(-1.0..=1.0).contains(&self.min_ncc) {
            return Err(Error::Domain(format!("min_ncc {} outside [-1, 1]", self.min_ncc)));
        }
        if let Some(t) = self.lr_tolerance {
            if !(t >= 0.0) {
                return Err(Error::Domain("left-right tolerance must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub n_cols: usize,
    pub n_rows: usize,
    /// position of this map's (0, 0) in the full left frame
    pub col_offset: usize,
    pub row_offset: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn invalid(n_cols: usize, n_rows: usize, col_offset: usize, row_offset: usize) -> Self {
        let n = n_cols * n_rows;
        Self {
            n_cols,
            n_rows,
            col_offset,
            row_offset,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> Option<(f64, f64)> {
        let i = row * self.n_cols + col;
        self.valid[i].then(|| (self.dx[i], self.dy[i]))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.valid.len() as f64
        }
    }

    /// Correspondence for map cell `(col, row)` as (left, right) image points.
    pub fn correspondence(&self, col: usize, row: usize) -> Option<(ImagePoint, ImagePoint)> {
        let (dx, dy) = self.get(col, row)?;
        let left = ImagePoint::pixel_center(col + self.col_offset, row + self.row_offset);
        Some((left, ImagePoint::new(left.sample + dx, left.line + dy)))
    }

    pub fn sub_block(&self, crop: Crop) -> Result<Self> {
        if crop.x_min < self.col_offset
            || crop.y_min < self.row_offset
            || crop.x_min + crop.width > self.col_offset + self.n_cols
            || crop.y_min + crop.height > self.row_offset + self.n_rows
        {
            return Err(Error::Bounds(format!("{crop:?} outside disparity map")));
        }
        let mut out = Self::invalid(crop.width, crop.height, crop.x_min, crop.y_min);
        for r in 0..crop.height {
            for c in 0..crop.width {
                let src = (r + crop.y_min - self.row_offset) * self.n_cols + c + crop.x_min - self.col_offset;
                let dst = r * crop.width + c;
                out.dx[dst] = self.dx[src];
                out.dy[dst] = self.dy[src];
                out.valid[dst] = self.valid[src];
            }
        }
        Ok(out)
    }
}

pub fn write_disparity(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    let _ = writeln!(s, "ncols {}", map.n_cols);
    let _ = writeln!(s, "nrows {}", map.n_rows);
    let _ = writeln!(s, "col_offset {}", map.col_offset);
    let _ = writeln!(s, "row_offset {}", map.row_offset);
    let plane = |s: &mut String, f: &dyn Fn(usize) -> String| {
        for r in 0..map.n_rows {
            let row: Vec<String> = (0..map.n_cols).map(|c| f(r * map.n_cols + c)).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    };
    // invalid cells are written as 0 so the file stays finite
    plane(&mut s, &|i| if map.valid[i] { map.dx[i].to_string() } else { "0".into() });
    plane(&mut s, &|i| if map.valid[i] { map.dy[i].to_string() } else { "0".into() });
    plane(&mut s, &|i| if map.valid[i] { "1".into() } else { "0".into() });
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_disparity(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tok = text.split_whitespace();
    let mut header = [0usize; 4];
    for (slot, key) in header
        .iter_mut()
        .zip(["ncols", "nrows", "col_offset", "row_offset"])
    {
        if tok.next() != Some(key) {
            return Err(Error::Format(format!("disparity header lacks `{key}`")));
        }
        *slot = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad `{key}`")))?;
    }
    let [n_cols, n_rows, col_offset, row_offset] = header;
    let n = n_cols * n_rows;
    let vals = tok
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad disparity value `{t}`"))))
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != 3 * n {
        return Err(Error::Format(format!("expected {} disparity values, found {}", 3 * n, vals.len())));
    }
    let valid: Vec<bool> = vals[2 * n..].iter().map(|&v| v != 0.0).collect();
    if vals[..2 * n].iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite disparity".into()));
    }
    Ok(DisparityMap {
        n_cols,
        n_rows,
        col_offset,
        row_offset,
        dx: vals[..n].to_vec(),
        dy: vals[n..2 * n].to_vec(),
        valid,
    })
}

/// Zero-mean normalised cross-correlation of two equal-size windows.
/// `None` when either window has no variance.
///
/// # Panics
/// If the windows differ in length.
pub fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "ncc windows differ in size");
    let n = a.len() as f64;
    if a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean-removed copy of an image plus per-pixel window statistics.
struct Prepared {
    w: usize,
    h: usize,
    data: Vec<f64>,
    /// window mean and sqrt(variance * n); NaN when the window leaves the
    /// image or is flat
    mean: Vec<f64>,
    norm: Vec<f64>,
}

impl Prepared {
    fn new(img: &RasterImage, r: usize) -> Self {
        let (w, h) = (img.n_cols, img.n_rows);
        let total = img.values.len() as f64;
        let global = img.values.iter().sum::<f64>() / total;
        let data: Vec<f64> = img.values.iter().map(|v| v - global).collect();
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let side = 2 * r + 1;
        let mut mean = vec![f64::NAN; w * h];
        let mut norm = vec![f64::NAN; w * h];
        if w >= side && h >= side {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (r..h - r)
                .into_par_iter()
                .map(|y| {
                    let mut cs = vec![0.0; w];
                    let mut cq = vec![0.0; w];
                    for yy in y - r..=y + r {
                        let row = &data[yy * w..(yy + 1) * w];
                        for x in 0..w {
                            cs[x] += row[x];
                            cq[x] += row[x] * row[x];
                        }
                    }
                    let mut m = vec![f64::NAN; w];
                    let mut q = vec![f64::NAN; w];
                    for x in r..w - r {
                        let (mut s, mut s2) = (0.0, 0.0);
                        for xx in x - r..=x + r {
                            s += cs[xx];
                            s2 += cq[xx];
                        }
                        let var = s2 - s * s / n;
                        if var > 1e-9 * s2.max(f64::MIN_POSITIVE) && var > 0.0 {
                            m[x] = s / n;
                            q[x] = var.sqrt();
                        }
                    }
                    (m, q)
                })
                .collect();
            for (k, (m, q)) in rows.into_iter().enumerate() {
                let y = k + r;
                mean[y * w..(y + 1) * w].copy_from_slice(&m);
                norm[y * w..(y + 1) * w].copy_from_slice(&q);
            }
        }
        Self {
            w,
            h,
            data,
            mean,
            norm,
        }
    }
}

/// Result of a one-directional match over `region` of the left image.
struct OneWay {
    region: Crop,
    dx: Vec<f64>,
    dy: Vec<f64>,
    valid: Vec<bool>,
}

/// Correlation at or above this is treated as an exact match: the integer
/// offset is the answer and parabola refinement would only add window bias.
pub(crate) const PERFECT_NCC: f64 = 1.0 - 1e-9;

/// Sub-pixel offset of a correlation peak from its two neighbours, clamped
/// to half a pixel. `None` when a neighbour is undefined.
pub(crate) fn parabola_offset(sm: f64, s0: f64, sp: f64) -> Option<f64> {
    if !(sm.is_finite() && sp.is_finite()) {
        return None;
    }
    if s0 >= PERFECT_NCC {
        return Some(0.0);
    }
    let denom = sm - 2.0 * s0 + sp;
    if denom >= 0.0 {
        return Some(0.0);
    }
    Some((0.5 * (sm - sp) / denom).clamp(-0.5, 0.5))
}

fn match_one_way(
    left: &Prepared,
    right: &Prepared,
    region: Crop,
    affine: &Affine2,
    params: &MatchParams,
    right_crop: Crop,
) -> OneWay {
    let r = params.window_radius as i64;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let (sx0, sx1) = (params.search_x.0 as i64, params.search_x.1 as i64);
    let (sy0, sy1) = (params.search_y.0 as i64, params.search_y.1 as i64);
    let nx = (sx1 - sx0 + 1) as usize;
    let ny = (sy1 - sy0 + 1) as usize;
    let (lw, rw) = (left.w as i64, right.w as i64);

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = (region.y_min..region.y_min + region.height)
        .into_par_iter()
        .map(|v| {
            let width = region.width;
            let mut dx = vec![0.0; width];
            let mut dy = vec![0.0; width];
            let mut valid = vec![false; width];
            let v = v as i64;
            if v < r || v + r >= left.h as i64 {
                return (dx, dy, valid);
            }
            // active left pixels and their integer seed offsets
            let mut active: Vec<(usize, i64, i64, i64)> = Vec::with_capacity(width);
            for k in 0..width {
                let u = (region.x_min + k) as i64;
                if u < r || u + r >= lw || !left.norm[(v * lw + u) as usize].is_finite() {
                    continue;
                }
                let (px, py) = affine.apply(u as f64 + 0.5, v as f64 + 0.5);
                let (bx, by) = ((px - 0.5).round(), (py - 0.5).round());
                if !(bx.is_finite() && by.is_finite()) || bx.abs() > 1e9 || by.abs() > 1e9 {
                    continue;
                }
                active.push((k, u, bx as i64 - u, by as i64 - v));
            }
            if active.is_empty() {
                return (dx, dy, valid);
            }
            let mut scores = vec![f64::NAN; active.len() * nx * ny];
            let bx_min = active.iter().map(|a| a.2).min().unwrap();
            let bx_max = active.iter().map(|a| a.2).max().unwrap();
            let by_min = active.iter().map(|a| a.3).min().unwrap();
            let by_max = active.iter().map(|a| a.3).max().unwrap();
            let mut colsum = vec![0.0; left.w];

            for oy in by_min + sy0..=by_max + sy1 {
                for ox in bx_min + sx0..=bx_max + sx1 {
                    // left pixels needing this absolute offset with a legal right window
                    let mut lo = i64::MAX;
                    let mut hi = i64::MIN;
                    for &(_, u, bx, by) in &active {
                        let (i, j) = (ox - bx, oy - by);
                        if i < sx0 || i > sx1 || j < sy0 || j > sy1 {
                            continue;
                        }
                        if !right_crop.contains_window(u + ox, v + oy, r) {
                            continue;
                        }
                        lo = lo.min(u);
                        hi = hi.max(u);
                    }
                    if lo > hi {
                        continue;
                    }
                    for c in &mut colsum[(lo - r) as usize..=(hi + r) as usize] {
                        *c = 0.0;
                    }
                    for b in -r..=r {
                        let lrow = &left.data[((v + b) * lw) as usize..((v + b + 1) * lw) as usize];
                        let rrow_start = ((v + oy + b) * rw + ox) as isize;
                        for x in (lo - r)..=(hi + r) {
                            let rv = right.data[(rrow_start + x as isize) as usize];
                            colsum[x as usize] += lrow[x as usize] * rv;
                        }
                    }
                    for (idx, &(_, u, bx, by)) in active.iter().enumerate() {
                        let (i, j) = (ox - bx, oy - by);
                        if i < sx0 || i > sx1 || j < sy0 || j > sy1 {
                            continue;
                        }
                        if !right_crop.contains_window(u + ox, v + oy, r) {
                            continue;
                        }
                        let ri = ((v + oy) * rw + u + ox) as usize;
                        let rnorm = right.norm[ri];
                        if !rnorm.is_finite() {
                            continue;
                        }
                        let mut s = 0.0;
                        for x in u - r..=u + r {
                            s += colsum[x as usize];
                        }
                        let li = (v * lw + u) as usize;
                        let cov = s - n * left.mean[li] * right.mean[ri];
                        let score = cov / (left.norm[li] * rnorm);
                        scores[(idx * nx + (i - sx0) as usize) * ny + (j - sy0) as usize] = score;
                    }
                }
            }

            for (idx, &(k, _, bx, by)) in active.iter().enumerate() {
                let s = &scores[idx * nx * ny..(idx + 1) * nx * ny];
                let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
                for i in 0..nx {
                    for j in 0..ny {
                        let sc = s[i * ny + j];
                        if sc > best.0 {
                            best = (sc, i, j);
                        }
                    }
                }
                let (peak, i, j) = best;
                if !(peak >= params.min_ncc) {
                    continue;
                }
                let on_border = (nx > 1 && (i == 0 || i == nx - 1)) || (ny > 1 && (j == 0 || j == ny - 1));
                if on_border {
                    continue;
                }
                let fx = if nx > 1 {
                    parabola_offset(s[(i - 1) * ny + j], peak, s[(i + 1) * ny + j])
                } else {
                    Some(0.0)
                };
                let fy = if ny > 1 {
                    parabola_offset(s[i * ny + j - 1], peak, s[i * ny + j + 1])
                } else {
                    Some(0.0)
                };
                let (Some(fx), Some(fy)) = (fx, fy) else { continue };
                dx[k] = (bx + sx0 + i as i64) as f64 + fx;
                dy[k] = (by + sy0 + j as i64) as f64 + fy;
                valid[k] = true;
            }
            (dx, dy, valid)
        })
        .collect();

    let mut out = OneWay {
        region,
        dx: Vec::with_capacity(region.width * region.height),
        dy: Vec::with_capacity(region.width * region.height),
        valid: Vec::with_capacity(region.width * region.height),
    };
    for (dx, dy, valid) in rows {
        out.dx.extend(dx);
        out.dy.extend(dy);
        out.valid.extend(valid);
    }
    out
}

/// Dense disparity between `img1` (left) and `img2` (right). `prealign`
/// maps left image coordinates to the expected right coordinates.
pub fn match_dense(
    img1: &RasterImage,
    img2: &RasterImage,
    params: &MatchParams,
    prealign: &Affine2,
) -> Result<DisparityMap> {
    params.validate()?;
    let left_crop = params.left_crop.unwrap_or_else(|| Crop::full(img1));
    let right_crop = params.right_crop.unwrap_or_else(|| Crop::full(img2));
    left_crop.check(img1, "left")?;
    right_crop.check(img2, "right")?;

    let r = params.window_radius;
    let left = Prepared::new(img1, r);
    let right = Prepared::new(img2, r);
    let fwd = match_one_way(&left, &right, left_crop, prealign, params, right_crop);

    let mut map = DisparityMap {
        n_cols: left_crop.width,
        n_rows: left_crop.height,
        col_offset: left_crop.x_min,
        row_offset: left_crop.y_min,
        dx: fwd.dx,
        dy: fwd.dy,
        valid: fwd.valid,
    };
    let Some(tol) = params.lr_tolerance else {
        return Ok(map);
    };

    // reverse pass over the bounding box of the forward targets
    let targets: Vec<(i64, i64)> = (0..map.valid.len())
        .map(|i| {
            let (c, rr) = (i % map.n_cols, i / map.n_cols);
            let x = (c + map.col_offset) as f64 + map.dx[i];
            let y = (rr + map.row_offset) as f64 + map.dy[i];
            (x.round() as i64, y.round() as i64)
        })
        .collect();
    let mut bbox: Option<(i64, i64, i64, i64)> = None;
    for i in (0..map.valid.len()).filter(|&i| map.valid[i]) {
        let (x, y) = targets[i];
        bbox = Some(match bbox {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    let Some((x0, y0, x1, y1)) = bbox else {
        return Ok(map);
    };
    let clamp_x = |v: i64| v.clamp(0, img2.n_cols as i64 - 1) as usize;
    let clamp_y = |v: i64| v.clamp(0, img2.n_rows as i64 - 1) as usize;
    let region = Crop {
        x_min: clamp_x(x0),
        y_min: clamp_y(y0),
        width: clamp_x(x1) - clamp_x(x0) + 1,
        height: clamp_y(y1) - clamp_y(y0) + 1,
    };
    let reverse_params = MatchParams {
        search_x: (-params.search_x.1, -params.search_x.0),
        search_y: (-params.search_y.1, -params.search_y.0),
        ..params.clone()
    };
    let inv = prealign.inverse()?;
    let rev = match_one_way(&right, &left, region, &inv, &reverse_params, Crop::full(img1));

    for i in 0..map.valid.len() {
        if !map.valid[i] {
            continue;
        }
        let (tx, ty) = targets[i];
        let ok = (|| {
            if tx < rev.region.x_min as i64 || ty < rev.region.y_min as i64 {
                return false;
            }
            let (rc, rr) = ((tx as usize) - rev.region.x_min, (ty as usize) - rev.region.y_min);
            if rc >= rev.region.width || rr >= rev.region.height {
                return false;
            }
            let j = rr * rev.region.width + rc;
            if !rev.valid[j] {
                return false;
            }
            let (c, row) = (i % map.n_cols + map.col_offset, i / map.n_cols + map.row_offset);
            let ex = tx as f64 + rev.dx[j] - c as f64;
            let ey = ty as f64 + rev.dy[j] - row as f64;
            (ex * ex + ey * ey).sqrt() <= tol
        })();
        if !ok {
            map.valid[i] = false;
            map.dx[i] = 0.0;
            map.dy[i] = 0.0;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Non-periodic band-limited texture evaluated at `(c - shift, r)`.
    fn texture(w: usize, h: usize, shift: f64) -> RasterImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let comps: Vec<(f64, f64, f64, f64)> = (0..80)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let f: f64 = rng.random_range(0.15..0.9);
                (f * a.cos(), f * a.sin(), rng.random_range(0.0..6.3), rng.random_range(20.0..60.0))
            })
            .collect();
        RasterImage::from_fn(w, h, |c, r| {
            let (x, y) = (c as f64 - shift, r as f64);
            1000.0 + comps.iter().map(|(kx, ky, ph, am)| am * (kx * x + ky * y + ph).sin()).sum::<f64>()
        })
    }

    /// mean dx error, mean dy, max |dx error|, max |dy|
    fn errors(map: &DisparityMap, sx: f64) -> (f64, f64, f64, f64) {
        let idx: Vec<usize> = (0..map.valid.len()).filter(|&i| map.valid[i]).collect();
        let n = idx.len() as f64;
        let mean_x = idx.iter().map(|&i| map.dx[i] - sx).sum::<f64>() / n;
        let mean_y = idx.iter().map(|&i| map.dy[i]).sum::<f64>() / n;
        let max_x = idx.iter().map(|&i| (map.dx[i] - sx).abs()).fold(0.0, f64::max);
        let max_y = idx.iter().map(|&i| map.dy[i].abs()).fold(0.0, f64::max);
        (mean_x, mean_y, max_x, max_y)
    }

    fn small_params() -> MatchParams {
        MatchParams {
            window_radius: 4,
            search_x: (-7, 7),
            search_y: (-2, 2),
            ..Default::default()
        }
    }

    #[test]
    fn ncc_basic_identities() {
        let a = [1.0, 5.0, 2.0, 8.0, 3.0];
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((ncc(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let m = a.iter().sum::<f64>() / 5.0;
        let z: Vec<f64> = a.iter().map(|v| v - m).collect();
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert!((ncc(&z, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(ncc(&a, &[2.0; 5]).is_none());
    }

    #[test]
    #[should_panic]
    fn ncc_size_mismatch_panics() {
        let _ = ncc(&[1.0, 2.0], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn integer_shift_is_recovered() {
        let (a, b) = (texture(120, 100, 0.0), texture(120, 100, 4.0));
        let map = match_dense(&a, &b, &MatchParams::default(), &Affine2::identity()).unwrap();
        assert!(map.valid_fraction() > 0.6, "{}", map.valid_fraction());
        let (_, _, max_x, max_y) = errors(&map, 4.0);
        assert!(max_x <= 0.01 && max_y <= 0.01, "{max_x} {max_y}");
    }

    #[test]
    fn subpixel_shift_within_parabola_bias() {
        let a = texture(120, 100, 0.0);
        // linear interpolation half-way between the 2 px and 3 px shifts
        let (b2, b3) = (texture(120, 100, 2.0), texture(120, 100, 3.0));
        let b = RasterImage::from_fn(120, 100, |c, r| 0.5 * (b2.get(c, r) + b3.get(c, r)));
        let map = match_dense(&a, &b, &MatchParams::default(), &Affine2::identity()).unwrap();
        assert!(map.valid_fraction() > 0.5);
        let (mx, my, max_x, max_y) = errors(&map, 2.5);
        assert!(mx.abs() < 0.05 && my.abs() < 0.05, "{mx} {my}");
        assert!(max_x <= 0.25, "{max_x}");
        // interpolation blurs along x only, which skews the y profile
        assert!(max_y <= 0.5, "{max_y}");
    }

    #[test]
    fn constant_images_are_all_invalid() {
        let a = RasterImage::from_fn(40, 40, |_, _| 500.0);
        let map = match_dense(&a, &a, &small_params(), &Affine2::identity()).unwrap();
        assert_eq!(map.valid_count(), 0);
    }

    #[test]
    fn crop_equals_sub_block() {
        let (a, b) = (texture(90, 70, 0.0), texture(90, 70, 3.0));
        let full = match_dense(&a, &b, &small_params(), &Affine2::identity()).unwrap();
        let crop = Crop {
            x_min: 13,
            y_min: 9,
            width: 41,
            height: 37,
        };
        let p = MatchParams {
            left_crop: Some(crop),
            ..small_params()
        };
        let part = match_dense(&a, &b, &p, &Affine2::identity()).unwrap();
        assert_eq!(part, full.sub_block(crop).unwrap());
    }

    #[test]
    fn gain_offset_invariance() {
        let (a, b) = (texture(80, 60, 0.0), texture(80, 60, 1.7));
        let b2 = RasterImage::from_fn(80, 60, |c, r| 2.0 * b.get(c, r) + 100.0);
        let m1 = match_dense(&a, &b, &small_params(), &Affine2::identity()).unwrap();
        let m2 = match_dense(&a, &b2, &small_params(), &Affine2::identity()).unwrap();
        assert_eq!(m1.valid, m2.valid);
        for i in (0..m1.valid.len()).filter(|&i| m1.valid[i]) {
            assert!((m1.dx[i] - m2.dx[i]).abs() < 1e-6);
            assert!((m1.dy[i] - m2.dy[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn valid_fraction_non_increasing_in_min_ncc() {
        let a = texture(80, 60, 0.0);
        let shifted = texture(80, 60, 3.0);
        let b = RasterImage::from_fn(80, 60, |c, r| {
            // mild noise to spread the correlation peaks
            let n = ((c * 7919 + r * 104_729) % 97) as f64 - 48.0;
            shifted.get(c, r) + 2.0 * n
        });
        let mut last = f64::INFINITY;
        for t in [0.0, 0.3, 0.6, 0.8, 0.9, 0.95, 0.99] {
            let p = MatchParams {
                min_ncc: t,
                ..small_params()
            };
            let f = match_dense(&a, &b, &p, &Affine2::identity()).unwrap().valid_fraction();
            assert!(f <= last, "{t}: {f} > {last}");
            last = f;
        }
    }

    #[test]
    fn swapping_images_negates_disparity() {
        let (a, b) = (texture(100, 70, 0.0), texture(100, 70, 3.3));
        let p = MatchParams {
            search_x: (-6, 6),
            ..Default::default()
        };
        let fwd = match_dense(&a, &b, &p, &Affine2::translation(3.0, 0.0)).unwrap();
        let rev = match_dense(&b, &a, &p, &Affine2::translation(-3.0, 0.0)).unwrap();
        let mut checked = 0;
        for r in 0..fwd.n_rows {
            for c in 0..fwd.n_cols {
                let Some((dx, dy)) = fwd.get(c, r) else { continue };
                let (tc, tr) = ((c as f64 + dx).round() as usize, (r as f64 + dy).round() as usize);
                if let Some((rx, ry)) = rev.get(tc, tr) {
                    assert!((rx + dx).abs() < 0.5 && (ry + dy).abs() < 0.5, "{c} {r} {dx} {dy} {rx} {ry}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 500, "{checked}");
    }

    #[test]
    fn affine_fit_recovers_known_map() {
        let truth = Affine2 {
            m: [1.01, 0.02, 5.0, -0.01, 0.99, -3.0],
        };
        let from: Vec<ImagePoint> = (0..20)
            .map(|i| ImagePoint::new((i * 37 % 101) as f64, (i * 53 % 97) as f64))
            .collect();
        let to: Vec<ImagePoint> = from
            .iter()
            .map(|p| {
                let (x, y) = truth.apply(p.sample, p.line);
                ImagePoint::new(x, y)
            })
            .collect();
        let fit = Affine2::fit(&from, &to).unwrap();
        for (a, b) in fit.m.iter().zip(truth.m) {
            assert!((a - b).abs() < 1e-9);
        }
        let inv = fit.inverse().unwrap();
        let (x, y) = inv.apply(fit.apply(3.0, 4.0).0, fit.apply(3.0, 4.0).1);
        assert!((x - 3.0).abs() < 1e-9 && (y - 4.0).abs() < 1e-9);
    }

    #[test]
    fn disparity_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let mut map = DisparityMap::invalid(3, 2, 5, 7);
        map.valid[1] = true;
        map.dx[1] = 1.25;
        map.dy[1] = -0.1;
        write_disparity(&map, &path).unwrap();
        assert_eq!(read_disparity(&path).unwrap(), map);
    }

    #[test]
    fn crop_parsing_and_bounds() {
        let c: Crop = "1,2,30,40".parse().unwrap();
        assert_eq!((c.x_min, c.y_min, c.width, c.height), (1, 2, 30, 40));
        assert!("1,2,3".parse::<Crop>().is_err());
        let img = texture(20, 20, 0.0);
        let p = MatchParams {
            left_crop: Some(Crop {
                x_min: 10,
                y_min: 0,
                width: 11,
                height: 5,
            }),
            ..small_params()
        };
        assert!(matches!(match_dense(&img, &img, &p, &Affine2::identity()), Err(Error::Bounds(_))));
    }
}
