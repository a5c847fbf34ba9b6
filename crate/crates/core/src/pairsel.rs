//! Stereo pair scoring from acquisition metadata alone.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::ingest::{footprint_area, AcquisitionMeta};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGeometry {
    pub baseline: f64,
    /// mean altitude of the two acquisitions
    pub height: f64,
    pub bh_ratio: f64,
    pub convergence_deg: f64,
    pub overlap_fraction: f64,
    pub d_incidence: f64,
    pub d_azimuth: f64,
    /// one-pixel matching precision at the mean GSD; infinite when the
    /// convergence angle leaves (0°, 90°)
    pub expected_precision: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairThresholds {
    pub bh_min: f64,
    pub bh_max: f64,
    pub max_d_incidence: f64,
    pub max_d_azimuth: f64,
    pub min_overlap: f64,
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self {
            bh_min: 0.3,
            bh_max: 0.9,
            max_d_incidence: 10.0,
            max_d_azimuth: 20.0,
            min_overlap: 0.3,
        }
    }
}

impl PairThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.bh_min,
            self.bh_max,
            self.max_d_incidence,
            self.max_d_azimuth,
            self.min_overlap,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("pair thresholds must be finite and non-negative".into()));
        }
        if self.bh_min >= self.bh_max {
            return Err(Error::Domain(format!(
                "bh_min {} must be below bh_max {}",
                self.bh_min, self.bh_max
            )));
        }
        if self.min_overlap > 1.0 {
            return Err(Error::Domain("min_overlap must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.bh_min + self.bh_max)
    }

    pub fn accepts(&self, g: &PairGeometry) -> bool {
        g.overlap_fraction > 0.0
            && g.bh_ratio >= self.bh_min
            && g.bh_ratio <= self.bh_max
            && g.d_incidence <= self.max_d_incidence
            && g.d_azimuth <= self.max_d_azimuth
            && g.overlap_fraction >= self.min_overlap
    }
}

pub fn baseline(s1: &Vec3, s2: &Vec3) -> f64 {
    (s1 - s2).norm()
}

pub fn bh_ratio(baseline: f64, height: f64) -> Result<f64> {
    if !(height > 0.0) {
        return Err(Error::Domain(format!("height {height} must be > 0")));
    }
    Ok(baseline / height)
}

pub fn convergence_from_views(v1: &Vec3, v2: &Vec3) -> Result<f64> {
    for v in [v1, v2] {
        if (v.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("view vector norm {} is not unit", v.norm())));
        }
    }
    Ok(v1.dot(v2).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Symmetric-geometry approximation; underestimates at high B/H.
pub fn convergence_from_bh(bh: f64) -> f64 {
    2.0 * (bh / 2.0).atan().to_degrees()
}

pub fn expected_precision(rho_px: f64, gsd: f64, theta_deg: f64) -> Result<f64> {
    if !(theta_deg > 0.0 && theta_deg < 90.0) {
        return Err(Error::DegenerateGeometry(format!(
            "convergence {theta_deg}° outside (0°, 90°)"
        )));
    }
    if !(gsd > 0.0 && rho_px > 0.0) {
        return Err(Error::Domain("rho and gsd must be > 0".into()));
    }
    Ok(rho_px * gsd / theta_deg.to_radians().tan())
}

/// Clips polygon `subject` against convex polygon `clip` (both
/// counter-clockwise after orientation fix-up), horizontal plane only.
fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p.0 * q.1 - q.0 * p.1
        })
        .sum::<f64>()
        * 0.5
}

fn ccw(quad: &[Vec3; 4]) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = quad.iter().map(|v| (v.x, v.y)).collect();
    if signed_area(&p) < 0.0 {
        p.reverse();
    }
    p
}

fn is_convex(poly: &[(f64, f64)]) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let (a, b, c) = (poly[i], poly[(i + 1) % n], poly[(i + 2) % n]);
        (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0) >= 0.0
    })
}

/// Intersection polygon of two footprints in the horizontal plane.
pub fn footprint_intersection(a: &[Vec3; 4], b: &[Vec3; 4]) -> Result<Vec<(f64, f64)>> {
    let (pa, pb) = (ccw(a), ccw(b));
    for (p, q) in [(&pa, a), (&pb, b)] {
        if footprint_area(q) <= 1e-12 || !is_convex(p) {
            return Err(Error::Domain("footprint is not a non-degenerate convex quad".into()));
        }
    }
    Ok(clip_polygon(&pa, &pb))
}

pub fn footprint_overlap(a: &AcquisitionMeta, b: &AcquisitionMeta) -> Result<f64> {
    overlap_of(&a.footprint, &b.footprint)
}

fn overlap_of(a: &[Vec3; 4], b: &[Vec3; 4]) -> Result<f64> {
    let inter = footprint_intersection(a, b)?;
    let area = if inter.len() < 3 { 0.0 } else { signed_area(&inter).abs() };
    let denom = footprint_area(a).min(footprint_area(b));
    Ok((area / denom).clamp(0.0, 1.0))
}

fn polygon_centroid(poly: &[(f64, f64)]) -> Option<(f64, f64)> {
    let a = signed_area(poly);
    if poly.len() < 3 || a.abs() < 1e-12 {
        return None;
    }
    let n = poly.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let cr = p.0 * q.1 - q.0 * p.1;
        cx += (p.0 + q.0) * cr;
        cy += (p.1 + q.1) * cr;
    }
    Some((cx / (6.0 * a), cy / (6.0 * a)))
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Full pair geometry. The convergence angle is measured between the
/// view vectors from the common ground target (centroid of the footprint
/// intersection) to the mid-acquisition spacecraft positions.
pub fn pair_geometry(a: &AcquisitionMeta, b: &AcquisitionMeta) -> Result<PairGeometry> {
    let (s1, s2) = (a.mid_position()?, b.mid_position()?);
    let height = 0.5 * (a.altitude + b.altitude);
    let base = baseline(&s1, &s2);
    let bh = bh_ratio(base, height)?;
    let inter = footprint_intersection(&a.footprint, &b.footprint)?;
    let overlap = overlap_of(&a.footprint, &b.footprint)?;

    let (ca, cb) = (a.footprint_centroid(), b.footprint_centroid());
    let mean_z = 0.5 * (ca.z + cb.z);
    let target = match polygon_centroid(&inter) {
        Some((x, y)) => Vec3::new(x, y, mean_z),
        None => 0.5 * (ca + cb),
    };
    let (v1, v2) = ((s1 - target).normalize(), (s2 - target).normalize());
    let convergence = convergence_from_views(&v1, &v2)?;
    let gsd = 0.5 * (a.gsd + b.gsd);
    let ep = expected_precision(1.0, gsd, convergence).unwrap_or(f64::INFINITY);

    Ok(PairGeometry {
        baseline: base,
        height,
        bh_ratio: bh,
        convergence_deg: convergence,
        overlap_fraction: overlap,
        d_incidence: (a.solar_incidence - b.solar_incidence).abs(),
        d_azimuth: angle_diff(a.solar_azimuth, b.solar_azimuth),
        expected_precision: ep,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPair {
    /// indices into the input slice, `first < second`
    pub first: usize,
    pub second: usize,
    pub id1: String,
    pub id2: String,
    pub geometry: PairGeometry,
}

pub fn rank_pairs(metas: &[AcquisitionMeta], thresholds: &PairThresholds) -> Result<Vec<RankedPair>> {
    thresholds.validate()?;
    let n = metas.len();
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let mut scored = candidates
        .par_iter()
        .map(|&(i, j)| {
            pair_geometry(&metas[i], &metas[j]).map(|g| RankedPair {
                first: i,
                second: j,
                id1: metas[i].product_id.clone(),
                id2: metas[j].product_id.clone(),
                geometry: g,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.retain(|p| thresholds.accepts(&p.geometry));

    let mid = thresholds.midpoint();
    scored.sort_by(|p, q| {
        let (dp, dq) = ((p.geometry.bh_ratio - mid).abs(), (q.geometry.bh_ratio - mid).abs());
        dp.total_cmp(&dq)
            .then_with(|| q.geometry.overlap_fraction.total_cmp(&p.geometry.overlap_fraction))
            .then_with(|| p.id1.cmp(&q.id1))
            .then_with(|| p.id2.cmp(&q.id2))
            .then(Ordering::Equal)
    });
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(x0: f64, y0: f64, s: f64) -> [Vec3; 4] {
        [
            Vec3::new(x0, y0, 0.0),
            Vec3::new(x0 + s, y0, 0.0),
            Vec3::new(x0 + s, y0 + s, 0.0),
            Vec3::new(x0, y0 + s, 0.0),
        ]
    }

    #[test]
    fn baseline_and_ratio() {
        assert_eq!(baseline(&Vec3::zeros(), &Vec3::new(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(baseline(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(1.0, 2.0, 3.0)), 0.0);
        assert_eq!(bh_ratio(0.0, 100.0).unwrap(), 0.0);
        assert!(bh_ratio(1.0, 0.0).is_err());
        assert!(bh_ratio(1.0, -5.0).is_err());
    }

    #[test]
    fn convergence_values() {
        let x = Vec3::x();
        assert_eq!(convergence_from_views(&x, &x).unwrap(), 0.0);
        assert!((convergence_from_views(&x, &Vec3::y()).unwrap() - 90.0).abs() < 1e-12);
        let nudged = Vec3::new(1.0 + 1e-16, 0.0, 0.0);
        let c = convergence_from_views(&x, &nudged).unwrap();
        assert!(c.is_finite() && c == 0.0);
        assert!(convergence_from_views(&x, &Vec3::new(2.0, 0.0, 0.0)).is_err());

        assert!((convergence_from_bh(0.396) - 22.40).abs() < 0.01);
        assert!((convergence_from_bh(0.877) - 47.36).abs() < 0.01);
        assert!((convergence_from_bh(1.161) - 60.3).abs() < 0.05);
    }

    #[test]
    fn precision_values() {
        let ep = expected_precision(1.0, 0.26, 22.40).unwrap();
        let oracle = 0.26 / (22.40f64 * std::f64::consts::PI / 180.0).tan();
        assert!((ep - oracle).abs() < 1e-12);
        assert!((ep - 0.631).abs() < 5e-4);
        assert!((expected_precision(1.0, 0.7, 45.0).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(expected_precision(1.0, 0.3, 0.0), Err(Error::DegenerateGeometry(_))));
        assert!(expected_precision(1.0, 0.3, 30.0).unwrap() > expected_precision(1.0, 0.3, 31.0).unwrap());
    }

    #[test]
    fn overlap_cases() {
        let a = square(0.0, 0.0, 1.0);
        assert!((overlap_of(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(overlap_of(&a, &square(5.0, 5.0, 1.0)).unwrap(), 0.0);
        let half = overlap_of(&a, &square(0.5, 0.0, 1.0)).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        // a small image entirely inside a large one
        assert!((overlap_of(&square(0.0, 0.0, 10.0), &square(2.0, 2.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let degenerate = [Vec3::zeros(); 4];
        assert!(overlap_of(&a, &degenerate).is_err());
    }

    #[test]
    fn overlap_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = square(0.0, 0.0, 1.0);
        let b = square(0.5, 0.0, 1.0);
        let n = 1_000_000;
        let inside_b = |x: f64, y: f64| {
            let poly = ccw(&b);
            (0..4).all(|i| {
                let (p, q) = (poly[i], poly[(i + 1) % 4]);
                (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0) >= 0.0
            })
        };
        let hits = (0..n)
            .filter(|_| {
                let (x, y): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                inside_b(x, y)
            })
            .count();
        let mc = hits as f64 / n as f64;
        assert!((overlap_of(&a, &b).unwrap() - mc).abs() < 1e-2);
    }

    #[test]
    fn azimuth_difference_wraps() {
        assert_eq!(angle_diff(350.0, 10.0), 20.0);
        assert_eq!(angle_diff(10.0, 350.0), 20.0);
        assert_eq!(angle_diff(90.0, 90.0), 0.0);
    }

    #[test]
    fn threshold_validation() {
        assert!(PairThresholds::default().validate().is_ok());
        let bad = PairThresholds {
            bh_min: 1.0,
            bh_max: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn bh_convergence_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(convergence_from_bh(lo) <= convergence_from_bh(hi));
        }

        #[test]
        fn view_convergence_symmetric(
            a in prop::array::uniform3(-1.0f64..1.0),
            b in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let (u, v) = (Vec3::from(a), Vec3::from(b));
            prop_assume!(u.norm() > 1e-3 && v.norm() > 1e-3);
            let (u, v) = (u.normalize(), v.normalize());
            let c = convergence_from_views(&u, &v).unwrap();
            prop_assert_eq!(c, convergence_from_views(&v, &u).unwrap());
            prop_assert!((0.0..=180.0).contains(&c));
        }

        #[test]
        fn baseline_triangle_inequality(
            a in prop::array::uniform3(-1e5f64..1e5),
            b in prop::array::uniform3(-1e5f64..1e5),
            c in prop::array::uniform3(-1e5f64..1e5),
        ) {
            let (a, b, c) = (Vec3::from(a), Vec3::from(b), Vec3::from(c));
            prop_assert!(baseline(&a, &c) <= baseline(&a, &b) + baseline(&b, &c) + 1e-9);
            let d = a - b;
            let oracle = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
            prop_assert!((baseline(&a, &b) - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }

        #[test]
        fn overlap_in_unit_interval(dx in -2.0f64..2.0, dy in -2.0f64..2.0, s in 0.1f64..3.0) {
            let f = overlap_of(&square(0.0, 0.0, 1.0), &square(dx, dy, s)).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
