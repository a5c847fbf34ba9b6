//! Sparse tie points and two-camera robust bundle adjustment.
//!
//! Each camera gets a constant pointing correction (axis-angle, applied on
//! the world side of every attitude) and a constant position offset. Tie
//! point world positions are solved jointly; the point block is eliminated
//! with a Schur complement so the reduced system is 12×12.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, Vector2};
use rayon::prelude::*;

use crate::densematch::{ncc, parabola_offset, Affine2};
use crate::error::{Error, Result};
use crate::geom::{ImagePoint, PushbroomCamera, Vec3};
use crate::ingest::RasterImage;
use crate::kv::KeyValues;
use crate::recon::triangulate;

pub const MIN_TIE_POINTS: usize = 6;
const FD_STEP: f64 = 1e-4;
const MAX_LAMBDA: f64 = 1e16;

type Mat12 = SMatrix<f64, 12, 12>;
type Vec12 = SVector<f64, 12>;
type Mat2x6 = SMatrix<f64, 2, 6>;
type Mat2x3 = SMatrix<f64, 2, 3>;
type Mat12x3 = SMatrix<f64, 12, 3>;

/// `c² ln(1 + s/c²)` for a squared residual `s`.
pub fn cauchy_loss(s: f64, c: f64) -> f64 {
    let c2 = c * c;
    c2 * (s / c2).ln_1p()
}

/// d/ds of [`cauchy_loss`].
pub fn cauchy_weight(s: f64, c: f64) -> f64 {
    1.0 / (1.0 + s / (c * c))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiePoint {
    pub obs1: ImagePoint,
    pub obs2: ImagePoint,
    pub world: Vec3,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CameraAdjustment {
    pub rotation_delta: Vec3,
    pub position_delta: Vec3,
}

impl CameraAdjustment {
    pub fn apply(&self, cam: &PushbroomCamera) -> PushbroomCamera {
        cam.adjusted(&self.rotation_delta, &self.position_delta)
    }

    fn from_params(p: &[f64; 6]) -> Self {
        Self {
            rotation_delta: Vec3::new(p[0], p[1], p[2]),
            position_delta: Vec3::new(p[3], p[4], p[5]),
        }
    }

    fn params(&self) -> [f64; 6] {
        let (r, t) = (self.rotation_delta, self.position_delta);
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustLossParams {
    /// pixels
    pub cauchy_scale_c: f64,
    pub max_iterations: usize,
    pub ground_constraint_weight: f64,
    /// metres; also scales the ground constraint
    pub position_sigma: f64,
}

impl Default for RobustLossParams {
    fn default() -> Self {
        Self {
            cauchy_scale_c: 2.0,
            max_iterations: 100,
            ground_constraint_weight: 1.0,
            position_sigma: 25.0,
        }
    }
}

impl RobustLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cauchy_scale_c > 0.0 && self.cauchy_scale_c.is_finite()) {
            return Err(Error::Domain(format!("cauchy scale must be > 0, got {}", self.cauchy_scale_c)));
        }
        if self.max_iterations < 1 {
            return Err(Error::Domain("max_iterations must be >= 1".into()));
        }
        if !(self.ground_constraint_weight >= 0.0) {
            return Err(Error::Domain(format!(
                "ground constraint weight must be >= 0, got {}",
                self.ground_constraint_weight
            )));
        }
        if !(self.position_sigma > 0.0 && self.position_sigma.is_finite()) {
            return Err(Error::Domain(format!("position sigma must be > 0, got {}", self.position_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BundleResult {
    pub adjustments: [CameraAdjustment; 2],
    /// tie points with adjusted world positions, input order
    pub ties: Vec<TiePoint>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub hit_iteration_cap: bool,
    /// cost after every accepted step, starting with the initial cost
    pub cost_trace: Vec<f64>,
}

/// Observed minus predicted image coordinates, in pixels.
fn residual(cam: &PushbroomCamera, obs: &ImagePoint, x: &Vec3) -> Result<Vector2<f64>> {
    let p = cam.project_with_margin(x, cam.n_lines() as f64)?;
    Ok(Vector2::new(obs.sample - p.sample, obs.line - p.line))
}

/// Residual of one observation and its central-difference Jacobian with
/// respect to the camera adjustment (rotation then position) and the world
/// point.
pub fn residual_jacobian(
    cam: &PushbroomCamera,
    adjustment: &CameraAdjustment,
    obs: &ImagePoint,
    world: &Vec3,
    step: f64,
) -> Result<(Vector2<f64>, Mat2x6, Mat2x3)> {
    let base = adjustment.params();
    let r0 = residual(&adjustment.apply(cam), obs, world)?;
    let mut jc = Mat2x6::zeros();
    for m in 0..6 {
        let (mut lo, mut hi) = (base, base);
        lo[m] -= step;
        hi[m] += step;
        let rp = residual(&CameraAdjustment::from_params(&hi).apply(cam), obs, world)?;
        let rm = residual(&CameraAdjustment::from_params(&lo).apply(cam), obs, world)?;
        jc.set_column(m, &((rp - rm) / (2.0 * step)));
    }
    let adjusted = adjustment.apply(cam);
    let jp = point_jacobian(&adjusted, obs, world, step)?;
    Ok((r0, jc, jp))
}

fn point_jacobian(cam: &PushbroomCamera, obs: &ImagePoint, x: &Vec3, step: f64) -> Result<Mat2x3> {
    let mut jp = Mat2x3::zeros();
    for j in 0..3 {
        let mut e = Vec3::zeros();
        e[j] = step;
        let rp = residual(cam, obs, &(x + e))?;
        let rm = residual(cam, obs, &(x - e))?;
        jp.set_column(j, &((rp - rm) / (2.0 * step)));
    }
    Ok(jp)
}

/// Root-mean-square reprojection distance (pixels) over both observations
/// of every tie.
pub fn reprojection_rms(cams: [&PushbroomCamera; 2], ties: &[TiePoint]) -> Result<f64> {
    if ties.is_empty() {
        return Err(Error::EmptyInput("no tie points".into()));
    }
    let mut sum = 0.0;
    for t in ties {
        sum += residual(cams[0], &t.obs1, &t.world)?.norm_squared();
        sum += residual(cams[1], &t.obs2, &t.world)?.norm_squared();
    }
    Ok((sum / (2 * ties.len()) as f64).sqrt())
}

struct Problem<'a> {
    cams: [&'a PushbroomCamera; 2],
    ties: &'a [TiePoint],
    params: RobustLossParams,
}

#[derive(Clone)]
struct State {
    cams: [[f64; 6]; 2],
    points: Vec<Vec3>,
}

/// Per-tie linearization in the Gauss-Newton form of the IRLS-weighted
/// problem: contributions to the camera block, the coupling block and the
/// tie's own 3×3 block, plus gradients.
struct TieBlock {
    hcc: Mat12,
    hcp: Mat12x3,
    hpp: Matrix3<f64>,
    gc: Vec12,
    gp: Vec3,
}

impl<'a> Problem<'a> {
    fn prior_scale(&self) -> f64 {
        1.0 / (self.params.position_sigma * self.params.position_sigma)
    }

    fn ground_scale(&self) -> f64 {
        self.params.ground_constraint_weight * self.prior_scale()
    }

    fn adjusted_cams(&self, s: &[[f64; 6]; 2]) -> [PushbroomCamera; 2] {
        [0, 1].map(|k| CameraAdjustment::from_params(&s[k]).apply(self.cams[k]))
    }

    fn cost(&self, s: &State) -> Option<f64> {
        let cams = self.adjusted_cams(&s.cams);
        let c = self.params.cauchy_scale_c;
        let wg = self.ground_scale();
        let terms: Vec<Option<f64>> = self
            .ties
            .par_iter()
            .zip(s.points.par_iter())
            .map(|(t, x)| {
                let r1 = residual(&cams[0], &t.obs1, x).ok()?;
                let r2 = residual(&cams[1], &t.obs2, x).ok()?;
                let ground = if wg > 0.0 { wg * (x - t.world).norm_squared() } else { 0.0 };
                Some(cauchy_loss(r1.norm_squared(), c) + cauchy_loss(r2.norm_squared(), c) + ground)
            })
            .collect();
        let mut total = 0.0;
        for t in terms {
            total += t?;
        }
        for k in 0..2 {
            let dt = Vec3::new(s.cams[k][3], s.cams[k][4], s.cams[k][5]);
            total += dt.norm_squared() * self.prior_scale();
        }
        total.is_finite().then_some(total)
    }

    fn linearize(&self, s: &State) -> Result<(Mat12, Vec12, Vec<TieBlock>)> {
        let cams = self.adjusted_cams(&s.cams);
        // cameras with one adjustment parameter nudged either way
        let nudged: Vec<[PushbroomCamera; 2]> = (0..12)
            .map(|idx| {
                let (k, m) = (idx / 6, idx % 6);
                let mut lo = s.cams[k];
                let mut hi = s.cams[k];
                lo[m] -= FD_STEP;
                hi[m] += FD_STEP;
                [
                    CameraAdjustment::from_params(&lo).apply(self.cams[k]),
                    CameraAdjustment::from_params(&hi).apply(self.cams[k]),
                ]
            })
            .collect();
        let c = self.params.cauchy_scale_c;
        let wg = self.ground_scale();
        let blocks: Vec<Result<TieBlock>> = self
            .ties
            .par_iter()
            .zip(s.points.par_iter())
            .map(|(t, x)| {
                let mut b = TieBlock {
                    hcc: Mat12::zeros(),
                    hcp: Mat12x3::zeros(),
                    hpp: Matrix3::identity() * wg,
                    gc: Vec12::zeros(),
                    gp: (x - t.world) * wg,
                };
                for (k, obs) in [(0usize, &t.obs1), (1usize, &t.obs2)] {
                    let r = residual(&cams[k], obs, x)?;
                    let mut jc = Mat2x6::zeros();
                    for m in 0..6 {
                        let [lo, hi] = &nudged[6 * k + m];
                        let d = (residual(hi, obs, x)? - residual(lo, obs, x)?) / (2.0 * FD_STEP);
                        jc.set_column(m, &d);
                    }
                    let jp = point_jacobian(&cams[k], obs, x, FD_STEP)?;
                    let w = cauchy_weight(r.norm_squared(), c);
                    let o = 6 * k;
                    let jtj = jc.transpose() * jc * w;
                    let mut view = b.hcc.fixed_view_mut::<6, 6>(o, o);
                    view += jtj;
                    let mut cp = b.hcp.fixed_view_mut::<6, 3>(o, 0);
                    cp += jc.transpose() * jp * w;
                    b.hpp += jp.transpose() * jp * w;
                    let mut gc = b.gc.fixed_view_mut::<6, 1>(o, 0);
                    gc += jc.transpose() * r * w;
                    b.gp += jp.transpose() * r * w;
                }
                Ok(b)
            })
            .collect();
        let mut hcc = Mat12::zeros();
        let mut gc = Vec12::zeros();
        let ps = self.prior_scale();
        for k in 0..2 {
            for m in 3..6 {
                hcc[(6 * k + m, 6 * k + m)] += ps;
                gc[6 * k + m] += s.cams[k][m] * ps;
            }
        }
        let mut out = Vec::with_capacity(blocks.len());
        for b in blocks {
            let b = b?;
            hcc += b.hcc;
            gc += b.gc;
            out.push(b);
        }
        Ok((hcc, gc, out))
    }
}

/// Solves the damped normal equations by eliminating the tie-point blocks.
fn solve_step(
    hcc: &Mat12,
    gc: &Vec12,
    blocks: &[TieBlock],
    lambda: f64,
) -> Option<(Vec12, Vec<Vec3>)> {
    let damp3 = |h: &Matrix3<f64>| {
        let mut d = *h;
        for i in 0..3 {
            d[(i, i)] *= 1.0 + lambda;
        }
        d
    };
    let mut s = *hcc;
    for i in 0..12 {
        s[(i, i)] *= 1.0 + lambda;
    }
    let mut rhs = -gc;
    let mut inverses = Vec::with_capacity(blocks.len());
    for b in blocks {
        let inv = damp3(&b.hpp).cholesky()?.inverse();
        let coupling = b.hcp * inv;
        s -= coupling * b.hcp.transpose();
        rhs += coupling * b.gp;
        inverses.push(inv);
    }
    let dc = s.cholesky()?.solve(&rhs);
    if !dc.iter().all(|v| v.is_finite()) {
        return None;
    }
    let dp = blocks
        .iter()
        .zip(&inverses)
        .map(|(b, inv)| inv * (-b.gp - b.hcp.transpose() * dc))
        .collect();
    Some((dc, dp))
}

/// Levenberg-Marquardt refinement of both cameras and all tie-point world
/// positions under the Cauchy loss with ground and position priors.
pub fn bundle_adjust(
    cams: [&PushbroomCamera; 2],
    ties: &[TiePoint],
    params: &RobustLossParams,
) -> Result<BundleResult> {
    params.validate()?;
    if ties.len() < MIN_TIE_POINTS {
        return Err(Error::InsufficientTiePoints { found: ties.len(), required: MIN_TIE_POINTS });
    }
    let problem = Problem { cams, ties, params: *params };
    let mut state = State {
        cams: [[0.0; 6]; 2],
        points: ties.iter().map(|t| t.world).collect(),
    };
    let Some(mut cost) = problem.cost(&state) else {
        return Err(Error::Projection("a tie point does not project into its camera".into()));
    };
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iterations {
        let (hcc, gc, blocks) = problem.linearize(&state)?;
        let g_inf = gc
            .iter()
            .chain(blocks.iter().flat_map(|b| b.gp.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if g_inf < 1e-10 || cost == 0.0 {
            converged = true;
            break;
        }
        let degenerate = (0..12).any(|i| !(hcc[(i, i)] > 0.0))
            || blocks.iter().any(|b| (0..3).any(|i| !(b.hpp[(i, i)] > 0.0)));
        if degenerate {
            return Err(Error::DegenerateGeometry("normal equations are singular".into()));
        }
        iterations += 1;
        let mut accepted = None;
        while lambda <= MAX_LAMBDA {
            let Some((dc, dp)) = solve_step(&hcc, &gc, &blocks, lambda) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = state.clone();
            for k in 0..2 {
                for m in 0..6 {
                    cand.cams[k][m] += dc[6 * k + m];
                }
            }
            for (p, d) in cand.points.iter_mut().zip(&dp) {
                *p += d;
            }
            match problem.cost(&cand) {
                Some(c) if c < cost => {
                    lambda *= 0.1;
                    accepted = Some((cand, c));
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        let Some((cand, new_cost)) = accepted else {
            // no damping produces a decrease: at a minimum to machine precision
            converged = true;
            break;
        };
        let rel = (cost - new_cost) / cost;
        state = cand;
        cost = new_cost;
        trace.push(cost);
        if rel < 1e-10 {
            converged = true;
            break;
        }
    }
    if lambda > MAX_LAMBDA && iterations == 0 {
        return Err(Error::DegenerateGeometry("normal equations are singular".into()));
    }

    let adjustments = [0, 1].map(|k| CameraAdjustment::from_params(&state.cams[k]));
    let adjusted_ties = ties
        .iter()
        .zip(&state.points)
        .map(|(t, x)| TiePoint { world: *x, ..*t })
        .collect();
    Ok(BundleResult {
        adjustments,
        ties: adjusted_ties,
        initial_cost,
        final_cost: cost,
        iterations,
        hit_iteration_cap: !converged,
        cost_trace: trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TieParams {
    pub max_points: usize,
    pub window_radius: usize,
    /// half-width of the square search around the seeded position, pixels
    pub search_radius: usize,
    pub min_ncc: f64,
    /// height of the flat surface used to seed the search, metres
    pub ground_height: f64,
}

impl Default for TieParams {
    fn default() -> Self {
        Self { max_points: 300, window_radius: 7, search_radius: 32, min_ncc: 0.7, ground_height: 0.0 }
    }
}

fn window(img: &RasterImage, col: i64, row: i64, r: i64, out: &mut Vec<f64>) -> bool {
    out.clear();
    if col - r < 0 || row - r < 0 || col + r >= img.n_cols as i64 || row + r >= img.n_rows as i64 {
        return false;
    }
    for y in row - r..=row + r {
        let line = img.row(y as usize);
        out.extend_from_slice(&line[(col - r) as usize..=(col + r) as usize]);
    }
    true
}

/// Window variance at every pixel whose window fits inside the image.
fn variance_field(img: &RasterImage, r: usize) -> Vec<f64> {
    let (w, h) = (img.n_cols, img.n_rows);
    let mean = img.values.iter().sum::<f64>() / img.values.len().max(1) as f64;
    // integral images of the mean-removed values keep the subtraction well-conditioned
    let mut s1 = vec![0.0; (w + 1) * (h + 1)];
    let mut s2 = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let (mut a, mut b) = (0.0, 0.0);
        for x in 0..w {
            let v = img.get(x, y) - mean;
            a += v;
            b += v * v;
            s1[(y + 1) * (w + 1) + x + 1] = s1[y * (w + 1) + x + 1] + a;
            s2[(y + 1) * (w + 1) + x + 1] = s2[y * (w + 1) + x + 1] + b;
        }
    }
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut var = vec![f64::NAN; w * h];
    if w < 2 * r + 1 || h < 2 * r + 1 {
        return var;
    }
    let rect = |s: &[f64], x0: usize, y0: usize, x1: usize, y1: usize| {
        s[y1 * (w + 1) + x1] - s[y0 * (w + 1) + x1] - s[y1 * (w + 1) + x0] + s[y0 * (w + 1) + x0]
    };
    for y in r..h - r {
        for x in r..w - r {
            let (x0, y0, x1, y1) = (x - r, y - r, x + r + 1, y + r + 1);
            let m = rect(&s1, x0, y0, x1, y1) / n;
            var[y * w + x] = (rect(&s2, x0, y0, x1, y1) / n - m * m).max(0.0);
        }
    }
    var
}

/// Sparse correspondences between the two images: the most textured pixel
/// of each cell of a coarse grid in `img1`, matched into `img2` by NCC
/// around the position predicted through a flat surface, with world
/// positions triangulated from the two rays.
pub fn detect_tie_points(
    img1: &RasterImage,
    img2: &RasterImage,
    cams: [&PushbroomCamera; 2],
    params: &TieParams,
) -> Result<Vec<TiePoint>> {
    if params.max_points == 0 {
        return Err(Error::Domain("max_points must be >= 1".into()));
    }
    let r = params.window_radius;
    let var = variance_field(img1, r);
    let (w, h) = (img1.n_cols, img1.n_rows);
    let cell = (((w * h) as f64 / params.max_points as f64).sqrt().floor() as usize).max(2 * r + 1);
    let mut seeds = Vec::new();
    for cy in (0..h).step_by(cell) {
        for cx in (0..w).step_by(cell) {
            let mut best: Option<(f64, usize, usize)> = None;
            for y in cy..(cy + cell).min(h) {
                for x in cx..(cx + cell).min(w) {
                    let v = var[y * w + x];
                    if v > 1e-9 && best.is_none_or(|b| v > b.0) {
                        best = Some((v, x, y));
                    }
                }
            }
            seeds.extend(best);
        }
    }
    // strongest texture first, ties broken by position for determinism
    seeds.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    seeds.truncate(params.max_points);

    let ri = r as i64;
    let sr = params.search_radius as i64;
    let n = (2 * sr + 1) as usize;
    let ties: Vec<Option<TiePoint>> = seeds
        .par_iter()
        .map(|&(_, col, row)| {
            let obs1 = ImagePoint::pixel_center(col, row);
            let ray1 = cams[0].back_project(&obs1).ok()?;
            let ground = ray1.intersect_height(params.ground_height)?;
            let pred = cams[1].project(&ground).ok()?;
            let (c2, r2) = (pred.sample.floor() as i64, pred.line.floor() as i64);
            let mut left = Vec::new();
            window(img1, col as i64, row as i64, ri, &mut left);
            let mut buf = Vec::new();
            let mut scores = vec![f64::NAN; n * n];
            let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
            for j in 0..n {
                for i in 0..n {
                    let (x, y) = (c2 - sr + i as i64, r2 - sr + j as i64);
                    if !window(img2, x, y, ri, &mut buf) {
                        continue;
                    }
                    if let Some(s) = ncc(&left, &buf) {
                        scores[j * n + i] = s;
                        if s > best.0 {
                            best = (s, i, j);
                        }
                    }
                }
            }
            let (peak, bi, bj) = best;
            if !(peak >= params.min_ncc) || bi == 0 || bj == 0 || bi == n - 1 || bj == n - 1 {
                return None;
            }
            let at = |i: usize, j: usize| scores[j * n + i];
            let fx = parabola_offset(at(bi - 1, bj), peak, at(bi + 1, bj))?;
            let fy = parabola_offset(at(bi, bj - 1), peak, at(bi, bj + 1))?;
            let obs2 = ImagePoint::new(
                (c2 - sr + bi as i64) as f64 + 0.5 + fx,
                (r2 - sr + bj as i64) as f64 + 0.5 + fy,
            );
            let ray2 = cams[1].back_project(&obs2).ok()?;
            let world = match triangulate(&ray1, &ray2) {
                Ok(p) => p.position,
                // parallel rays carry no depth: fall back to the seeding surface
                Err(_) => ground,
            };
            Some(TiePoint { obs1, obs2, world })
        })
        .collect();
    let ties: Vec<TiePoint> = ties.into_iter().flatten().collect();
    if ties.len() < MIN_TIE_POINTS {
        return Err(Error::InsufficientTiePoints { found: ties.len(), required: MIN_TIE_POINTS });
    }
    Ok(ties)
}

/// One tie per line: `sample1 line1 sample2 line2 x y z`.
pub fn write_ties(ties: &[TiePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for t in ties {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            t.obs1.sample, t.obs1.line, t.obs2.sample, t.obs2.line, t.world.x, t.world.y, t.world.z
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ties(path: impl AsRef<Path>) -> Result<Vec<TiePoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match v {
            Ok(v) if v.len() == 7 => out.push(TiePoint {
                obs1: ImagePoint::new(v[0], v[1]),
                obs2: ImagePoint::new(v[2], v[3]),
                world: Vec3::new(v[4], v[5], v[6]),
            }),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "expected 7 numbers".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Contents of an adjust file.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjustmentRecord {
    pub cameras: [CameraAdjustment; 2],
    pub final_cost: f64,
    pub iterations: usize,
    pub hit_iteration_cap: bool,
    pub n_ties: usize,
    pub reprojection_rms: f64,
    /// left→right image mapping fitted to the tie points
    pub prealign: Affine2,
}

fn vec_str(v: &Vec3) -> String {
    format!("{:e} {:e} {:e}", v.x, v.y, v.z)
}

pub fn format_adjustment(rec: &AdjustmentRecord) -> String {
    let mut s = String::new();
    for (k, c) in rec.cameras.iter().enumerate() {
        let _ = writeln!(s, "cam{}_rotation_delta = {}", k + 1, vec_str(&c.rotation_delta));
        let _ = writeln!(s, "cam{}_position_delta = {}", k + 1, vec_str(&c.position_delta));
    }
    let _ = writeln!(s, "final_cost = {:e}", rec.final_cost);
    let _ = writeln!(s, "iterations = {}", rec.iterations);
    let _ = writeln!(s, "hit_iteration_cap = {}", rec.hit_iteration_cap);
    let _ = writeln!(s, "n_ties = {}", rec.n_ties);
    let _ = writeln!(s, "reprojection_rms_px = {:e}", rec.reprojection_rms);
    let m = rec.prealign.m.map(|v| format!("{v:e}")).join(" ");
    let _ = writeln!(s, "prealign = {m}");
    s
}

pub fn write_adjustment(rec: &AdjustmentRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_adjustment(rec)).map_err(|e| Error::io(path, e))
}

pub fn parse_adjustment(text: &str, origin: &str) -> Result<AdjustmentRecord> {
    let kv = KeyValues::parse(text, origin)?;
    let v3 = |key: &str| kv.numbers(key, 3).map(|v| Vec3::new(v[0], v[1], v[2]));
    let cameras = [
        CameraAdjustment { rotation_delta: v3("cam1_rotation_delta")?, position_delta: v3("cam1_position_delta")? },
        CameraAdjustment { rotation_delta: v3("cam2_rotation_delta")?, position_delta: v3("cam2_position_delta")? },
    ];
    let m = kv.numbers("prealign", 6)?;
    Ok(AdjustmentRecord {
        cameras,
        final_cost: kv.value("final_cost")?,
        iterations: kv.value("iterations")?,
        hit_iteration_cap: kv.value("hit_iteration_cap")?,
        n_ties: kv.value("n_ties")?,
        reprojection_rms: kv.value("reprojection_rms_px")?,
        prealign: Affine2 { m: [m[0], m[1], m[2], m[3], m[4], m[5]] },
    })
}

pub fn read_adjustment(path: impl AsRef<Path>) -> Result<AdjustmentRecord> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_adjustment(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::tests::nadir_camera;
    use crate::geom::RigidTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ALT: f64 = 100_000.0;
    const GSD: f64 = 0.5;
    const N: usize = 400;

    /// Two cameras tilted ±`half_deg` about the flight-orthogonal axis
    /// through the ground origin, both viewing the origin mid-strip.
    fn pair(half_deg: f64) -> [PushbroomCamera; 2] {
        let base = nadir_camera(ALT, GSD, N);
        [half_deg, -half_deg].map(|a| {
            let t = RigidTransform::from_axis_angle(Vec3::x() * a.to_radians(), Vec3::zeros());
            base.transformed(&t)
        })
    }

    fn height(x: f64, y: f64) -> f64 {
        8.0 * (x / 23.0).sin() + 5.0 * (y / 31.0).cos()
    }

    /// Exact ties: ground points on a smooth surface projected by the true
    /// cameras.
    fn synthetic_ties(cams: &[PushbroomCamera; 2], n: usize, seed: u64) -> Vec<TiePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = 0.4 * N as f64 * GSD;
        let mut out = Vec::new();
        while out.len() < n {
            let (x, y) = (rng.random_range(-half..half), rng.random_range(-half..half));
            let p = Vec3::new(x, y, height(x, y));
            let (Ok(a), Ok(b)) = (cams[0].project(&p), cams[1].project(&p)) else { continue };
            out.push(TiePoint { obs1: a, obs2: b, world: p });
        }
        out
    }

    fn perturbations() -> [CameraAdjustment; 2] {
        let d = 0.05f64.to_radians();
        [
            CameraAdjustment {
                rotation_delta: Vec3::new(0.6, -0.8, 0.0) * d,
                position_delta: Vec3::new(12.0, -16.0, 0.0),
            },
            CameraAdjustment {
                rotation_delta: Vec3::new(-0.48, 0.0, 0.877) * d,
                position_delta: Vec3::new(0.0, 12.0, 16.0),
            },
        ]
    }

    /// Re-triangulates each tie with the given cameras, as a pipeline would.
    fn retriangulate(cams: [&PushbroomCamera; 2], ties: &[TiePoint]) -> Vec<TiePoint> {
        ties.iter()
            .map(|t| {
                // outlier observations may fall just outside the frame
                let r1 = cams[0].back_project_unchecked(&t.obs1);
                let r2 = cams[1].back_project_unchecked(&t.obs2);
                TiePoint { world: triangulate(&r1, &r2).unwrap().position, ..*t }
            })
            .collect()
    }

    /// Pointing error of the adjusted camera: angle between true and
    /// recovered mid-strip boresights.
    fn pointing_error_deg(truth: &PushbroomCamera, cam: &PushbroomCamera) -> f64 {
        let p = ImagePoint::new(N as f64 / 2.0, N as f64 / 2.0);
        let a = truth.back_project(&p).unwrap().direction();
        let b = cam.back_project(&p).unwrap().direction();
        a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
    }

    #[test]
    fn cauchy_values() {
        assert_eq!(cauchy_loss(0.0, 2.0), 0.0);
        assert!((cauchy_loss(1.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        let c: f64 = 3.0;
        let s = c * c / 100.0;
        assert!((cauchy_loss(s, c) - s).abs() / s < 0.01);
        let h = 1e-6;
        let fd = (cauchy_loss(2.0 + h, 1.5) - cauchy_loss(2.0 - h, 1.5)) / (2.0 * h);
        assert!((fd - cauchy_weight(2.0, 1.5)).abs() < 1e-8);
    }

    #[test]
    fn params_validation() {
        assert!(RobustLossParams::default().validate().is_ok());
        let bad = [
            RobustLossParams { cauchy_scale_c: 0.0, ..Default::default() },
            RobustLossParams { max_iterations: 0, ..Default::default() },
            RobustLossParams { ground_constraint_weight: -1.0, ..Default::default() },
            RobustLossParams { position_sigma: 0.0, ..Default::default() },
        ];
        for p in bad {
            assert!(matches!(p.validate(), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn perfect_ties_are_a_fixed_point() {
        let cams = pair(15.0);
        let ties = synthetic_ties(&cams, 40, 1);
        let res = bundle_adjust([&cams[0], &cams[1]], &ties, &RobustLossParams::default()).unwrap();
        assert!(res.final_cost.abs() < 1e-12, "{}", res.final_cost);
        for a in res.adjustments {
            assert!(a.rotation_delta.norm() < 1e-12 && a.position_delta.norm() < 1e-9);
        }
        assert!(!res.hit_iteration_cap);
    }

    #[test]
    fn too_few_ties_rejected() {
        let cams = pair(15.0);
        let ties = synthetic_ties(&cams, 5, 1);
        assert!(matches!(
            bundle_adjust([&cams[0], &cams[1]], &ties, &RobustLossParams::default()),
            Err(Error::InsufficientTiePoints { found: 5, required: 6 })
        ));
    }

    #[test]
    fn jacobian_agrees_at_half_step() {
        let cams = pair(15.0);
        let ties = synthetic_ties(&cams, 5, 2);
        let adj = perturbations()[0];
        for t in &ties {
            let (_, c1, p1) = residual_jacobian(&cams[0], &adj, &t.obs1, &t.world, FD_STEP).unwrap();
            let (_, c2, p2) = residual_jacobian(&cams[0], &adj, &t.obs1, &t.world, FD_STEP / 2.0).unwrap();
            // relative to each column's magnitude: entries far below it carry roundoff only
            let cols = c1.column_iter().zip(c2.column_iter()).chain(p1.column_iter().zip(p2.column_iter()));
            for (a, b) in cols {
                let rel = (a - b).norm() / a.norm().max(b.norm());
                assert!(rel < 1e-4, "{a} {b}");
            }
        }
    }

    fn perturbed_run(outlier_fraction: f64) -> (f64, f64, BundleResult, [PushbroomCamera; 2]) {
        let truth = pair(15.0);
        let mut ties = synthetic_ties(&truth, 150, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_out = (outlier_fraction * ties.len() as f64).round() as usize;
        for t in ties.iter_mut().take(n_out) {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            t.obs2.sample += 50.0 * a.cos();
            t.obs2.line += 50.0 * a.sin();
        }
        let pert = perturbations();
        let start = [pert[0].apply(&truth[0]), pert[1].apply(&truth[1])];
        let ties = retriangulate([&start[0], &start[1]], &ties);
        let before = reprojection_rms([&start[0], &start[1]], &ties[n_out..]).unwrap();
        let res = bundle_adjust([&start[0], &start[1]], &ties, &RobustLossParams::default()).unwrap();
        let adjusted = [res.adjustments[0].apply(&start[0]), res.adjustments[1].apply(&start[1])];
        let after = reprojection_rms([&adjusted[0], &adjusted[1]], &res.ties[n_out..]).unwrap();
        let _ = truth;
        (before, after, res, adjusted)
    }

    #[test]
    fn perturbed_cameras_recover_consistent_geometry() {
        let (before, after, res, adjusted) = perturbed_run(0.0);
        assert!(before > 5.0, "pre-adjustment rms {before}");
        assert!(after < 0.05, "post-adjustment rms {after}");
        for w in res.cost_trace.windows(2) {
            assert!(w[1] < w[0]);
        }
        let truth = pair(15.0);
        let clean: f64 = (0..2).map(|k| pointing_error_deg(&truth[k], &adjusted[k])).sum();

        let (_, after_o, _, adjusted_o) = perturbed_run(0.2);
        assert!(after_o < 0.05, "inlier rms with outliers {after_o}");
        let dirty: f64 = (0..2).map(|k| pointing_error_deg(&truth[k], &adjusted_o[k])).sum();
        assert!(dirty <= 3.0 * clean.max(1e-6), "{dirty} vs {clean}");
    }

    #[test]
    fn tie_order_does_not_matter() {
        let truth = pair(15.0);
        let pert = perturbations();
        let start = [pert[0].apply(&truth[0]), pert[1].apply(&truth[1])];
        let ties = retriangulate([&start[0], &start[1]], &synthetic_ties(&truth, 30, 5));
        let p = RobustLossParams { max_iterations: 20, ..Default::default() };
        let a = bundle_adjust([&start[0], &start[1]], &ties, &p).unwrap();
        let mut rev = ties.clone();
        rev.reverse();
        let b = bundle_adjust([&start[0], &start[1]], &rev, &p).unwrap();
        assert!((a.final_cost - b.final_cost).abs() < 1e-10, "{} {}", a.final_cost, b.final_cost);
    }

    #[test]
    fn dominant_ground_constraint_pins_points() {
        let truth = pair(15.0);
        let pert = perturbations();
        let start = [pert[0].apply(&truth[0]), pert[1].apply(&truth[1])];
        let ties = retriangulate([&start[0], &start[1]], &synthetic_ties(&truth, 30, 9));
        let p = RobustLossParams { ground_constraint_weight: 1e14, max_iterations: 30, ..Default::default() };
        let res = bundle_adjust([&start[0], &start[1]], &ties, &p).unwrap();
        for (a, b) in ties.iter().zip(&res.ties) {
            assert!((a.world - b.world).norm() < 1e-6, "{}", (a.world - b.world).norm());
        }
    }

    fn texture(w: usize, h: usize, shift: f64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let comps: Vec<(f64, f64, f64, f64)> = (0..80)
            .map(|_| {
                (
                    rng.random_range(0.15..0.9),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        RasterImage::from_fn(w, h, |c, r| {
            let (x, y) = (c as f64 - shift, r as f64);
            comps
                .iter()
                .map(|&(f, th, ph, a)| a * (f * (x * th.cos() + y * th.sin()) + ph).sin())
                .sum::<f64>()
                * 100.0
                + 1000.0
        })
    }

    #[test]
    fn ties_on_identical_images_have_no_displacement() {
        let cam = nadir_camera(ALT, GSD, 160);
        let img = texture(160, 160, 0.0);
        let p = TieParams { max_points: 40, search_radius: 6, ..Default::default() };
        let ties = detect_tie_points(&img, &img, [&cam, &cam], &p).unwrap();
        assert!(ties.len() >= 20);
        for t in &ties {
            assert!((t.obs1.sample - t.obs2.sample).abs() < 1e-9 && (t.obs1.line - t.obs2.line).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_recover_known_shift() {
        let cam = nadir_camera(ALT, GSD, 160);
        let (a, b) = (texture(160, 160, 0.0), texture(160, 160, 3.0));
        let p = TieParams { max_points: 40, search_radius: 6, ..Default::default() };
        let ties = detect_tie_points(&a, &b, [&cam, &cam], &p).unwrap();
        assert!(ties.len() >= 20);
        for t in &ties {
            assert!((t.obs2.sample - t.obs1.sample - 3.0).abs() < 1e-9, "{:?}", t);
            assert!((t.obs2.line - t.obs1.line).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_images_have_no_ties() {
        let cam = nadir_camera(ALT, GSD, 80);
        let img = RasterImage::from_fn(80, 80, |_, _| 700.0);
        assert!(matches!(
            detect_tie_points(&img, &img, [&cam, &cam], &TieParams::default()),
            Err(Error::InsufficientTiePoints { found: 0, .. })
        ));
    }

    #[test]
    fn adjustment_file_round_trip() {
        let rec = AdjustmentRecord {
            cameras: perturbations(),
            final_cost: 1.25e-3,
            iterations: 17,
            hit_iteration_cap: false,
            n_ties: 212,
            reprojection_rms: 0.031,
            prealign: Affine2 { m: [1.0, 0.01, 3.5, -0.02, 1.0, -7.25] },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.adjust");
        write_adjustment(&rec, &path).unwrap();
        assert_eq!(read_adjustment(&path).unwrap(), rec);
        let ties = vec![TiePoint { obs1: ImagePoint::new(1.5, 2.25), obs2: ImagePoint::new(3.0, 0.1), world: Vec3::new(-1.0, 1e5, 0.3) }];
        write_ties(&ties, dir.path().join("ties.txt")).unwrap();
        assert_eq!(read_ties(dir.path().join("ties.txt")).unwrap(), ties);
        let text = format_adjustment(&rec).replace("n_ties", "ties");
        assert!(matches!(parse_adjustment(&text, "x"), Err(Error::MissingKey { .. })));
    }
}
