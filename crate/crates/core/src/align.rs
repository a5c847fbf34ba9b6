//! Rigid registration of a reconstructed cloud to a reference DTM and
//! removal of the residual constant vertical offset.
//!
//! Correspondences are vertical projections onto the bilinear reference
//! surface; each iteration solves the point-to-plane problem linearised
//! about the cloud centroid and composes the increment.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{exp_rotation, Mat3, RigidTransform, Vec3};
use crate::ingest::{DemGrid, PointCloud};
use crate::validate::{extract_profile, XY};

pub const MIN_CORRESPONDENCES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpParams {
    pub max_iter: usize,
    /// stop when the RMS improves by less than this, metres
    pub tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// maps the input cloud into the reference frame
    pub transform: RigidTransform,
    pub final_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RMS before the first iteration and after every accepted one
    pub rms_trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasCorrection {
    pub delta_z: f64,
    pub n_samples: usize,
}

/// Reference height and upward unit normal under `(x, y)`.
fn surface(reference: &DemGrid, x: f64, y: f64) -> (Option<f64>, Option<Vec3>) {
    let Some(z) = reference.sample_bilinear(x, y) else {
        return (None, None);
    };
    let h = reference.cell_size();
    let normal = (|| {
        let gx = (reference.sample_bilinear(x + h, y)? - reference.sample_bilinear(x - h, y)?) / (2.0 * h);
        let gy = (reference.sample_bilinear(x, y + h)? - reference.sample_bilinear(x, y - h)?) / (2.0 * h);
        Some(Vec3::new(-gx, -gy, 1.0).normalize())
    })();
    (Some(z), normal)
}

struct Correspondences {
    /// (transformed point, point-to-plane residual, normal) per usable point
    usable: Vec<(Vec3, f64, Vec3)>,
    with_height: usize,
}

impl Correspondences {
    fn rms(&self) -> f64 {
        let n = self.usable.len() as f64;
        (self.usable.iter().map(|u| u.1 * u.1).sum::<f64>() / n).sqrt()
    }
}

fn correspond(points: &[Vec3], t: &RigidTransform, reference: &DemGrid) -> Correspondences {
    let per_point: Vec<(bool, Option<(Vec3, f64, Vec3)>)> = points
        .par_iter()
        .map(|p| {
            let q = t.apply(p);
            match surface(reference, q.x, q.y) {
                (Some(z), Some(n)) => (true, Some((q, n.z * (q.z - z), n))),
                (Some(_), None) => (true, None),
                _ => (false, None),
            }
        })
        .collect();
    Correspondences {
        with_height: per_point.iter().filter(|p| p.0).count(),
        usable: per_point.into_iter().filter_map(|p| p.1).collect(),
    }
}

fn check_usable(c: &Correspondences) -> Result<()> {
    if c.with_height < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientOverlap(format!(
            "{} cloud points over valid reference cells, need {MIN_CORRESPONDENCES}",
            c.with_height
        )));
    }
    if c.usable.is_empty() {
        return Err(Error::DegenerateReference(
            "no reference surface normal can be estimated under the cloud".into(),
        ));
    }
    if c.usable.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientOverlap(format!(
            "{} usable correspondences, need {MIN_CORRESPONDENCES}",
            c.usable.len()
        )));
    }
    Ok(())
}

/// Point-to-plane step `(ω, t)` about `centre`.
fn solve_step(c: &Correspondences, centre: &Vec3) -> Option<Vector6<f64>> {
    let mut jtj = Matrix6::<f64>::zeros();
    let mut jtr = Vector6::<f64>::zeros();
    for (q, r, n) in &c.usable {
        let a = (q - centre).cross(n);
        let j = Vector6::new(a.x, a.y, a.z, n.x, n.y, n.z);
        jtj += j * j.transpose();
        jtr += j * *r;
    }
    // mild damping keeps unobservable directions (flat terrain) at zero
    let damp = 1e-9 * jtj.trace().max(1e-12);
    for i in 0..6 {
        jtj[(i, i)] += damp;
    }
    Some(-jtj.cholesky()?.solve(&jtr))
}

fn increment(x: &Vector6<f64>, centre: &Vec3) -> RigidTransform {
    let rot = exp_rotation(&Vec3::new(x[0], x[1], x[2]));
    let t = Vec3::new(x[3], x[4], x[5]);
    RigidTransform {
        rotation: rot,
        translation: centre + t - rot * centre,
    }
}

pub fn icp_align(cloud: &PointCloud, reference: &DemGrid, params: &IcpParams) -> Result<IcpResult> {
    if params.max_iter == 0 || !(params.tol >= 0.0) {
        return Err(Error::Domain("ICP needs max_iter >= 1 and tol >= 0".into()));
    }
    let pts = &cloud.points;
    let mut transform = RigidTransform::identity();
    let mut current = correspond(pts, &transform, reference);
    check_usable(&current)?;
    let mut rms = current.rms();
    let mut trace = vec![rms];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iter {
        iterations += 1;
        let n = current.usable.len() as f64;
        let centre = current.usable.iter().map(|u| u.0).sum::<Vec3>() / n;
        let Some(step) = solve_step(&current, &centre) else {
            converged = true;
            break;
        };
        // backtrack until the RMS does not increase
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let cand = increment(&(step * scale), &centre).compose(&transform);
            let c = correspond(pts, &cand, reference);
            if c.usable.len() >= MIN_CORRESPONDENCES {
                let r = c.rms();
                if r <= rms {
                    accepted = Some((cand, c, r));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((cand, c, r)) = accepted else {
            converged = true;
            break;
        };
        let gain = rms - r;
        transform = cand;
        current = c;
        rms = r;
        trace.push(rms);
        if gain < params.tol {
            converged = true;
            break;
        }
    }

    Ok(IcpResult {
        transform,
        final_rms: rms,
        iterations,
        converged,
        rms_trace: trace,
    })
}

pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        errors: cloud.errors.clone(),
    }
}

/// Mean `dem − reference` along `transects` (endpoint pairs sampled at
/// the DEM cell size), or over every co-valid DEM cell when empty.
pub fn estimate_bias(dem: &DemGrid, reference: &DemGrid, transects: &[(XY, XY)]) -> Result<BiasCorrection> {
    let (mut sum, mut n) = (0.0, 0usize);
    if transects.is_empty() {
        for r in 0..dem.n_rows() {
            for c in 0..dem.n_cols() {
                let Some(z) = dem.get(c, r) else { continue };
                let (x, y) = dem.cell_center(c, r);
                if let Some(zr) = reference.sample_bilinear(x, y) {
                    sum += z - zr;
                    n += 1;
                }
            }
        }
    } else {
        let step = dem.cell_size();
        for &(a, b) in transects {
            let pd = extract_profile(dem, a, b, step)?;
            let pr = extract_profile(reference, a, b, step).ok();
            for (i, &(_, z)) in pd.samples.iter().enumerate() {
                let zr = pr.as_ref().and_then(|p| p.samples[i].1);
                if let (Some(z), Some(zr)) = (z, zr) {
                    sum += z - zr;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::InsufficientOverlap("no co-valid samples for bias estimation".into()));
    }
    Ok(BiasCorrection {
        delta_z: sum / n as f64,
        n_samples: n,
    })
}

pub fn apply_bias(dem: &DemGrid, corr: &BiasCorrection) -> DemGrid {
    let mut out = dem.clone();
    for v in out.values.iter_mut().filter(|v| **v != dem.nodata) {
        *v -= corr.delta_z;
    }
    out
}

pub fn write_transform(t: &RigidTransform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let r = &t.rotation;
    let mut s = String::new();
    for i in 0..3 {
        s.push_str(&format!("{} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)]));
    }
    s.push_str(&format!("{} {} {}\n", t.translation.x, t.translation.y, t.translation.z));
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Format(format!("{}: non-numeric transform", path.display())))?;
    if v.len() != 12 {
        return Err(Error::Format(format!("transform needs 12 numbers, found {}", v.len())));
    }
    RigidTransform::new(Mat3::from_row_slice(&v[..9]), Vec3::new(v[9], v[10], v[11]))
}
