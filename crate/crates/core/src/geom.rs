//! Geometric primitives and the pushbroom sensor model.
//!
//! Frames: every position lives in a local body-fixed Cartesian frame
//! (x east, y north, z up, metres). A camera orientation matrix maps
//! camera-frame vectors into the body frame; its columns are the camera
//! axes. In the camera frame the detector line runs along +x, the flight
//! direction is -y and the boresight is +z, so the viewing plane of one
//! image line is the camera-frame plane `y = 0`.
//!
//! Image coordinates are continuous: pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)`, so its centre is at
//! `(col + 0.5, row + 0.5)` and a full image spans `[0, n_samples] x [0, n_lines]`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;
const ROOT_TOL_LINES: f64 = 1e-6;
const MAX_ROOT_ITERATIONS: usize = 100;

/// Largest per-entry deviation of `mᵀm` from the identity.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    (m.transpose() * m - Mat3::identity()).abs().max()
}

pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    orthonormality_error(m) <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Nearest rotation matrix in the Frobenius sense (polar decomposition).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Mat3::identity();
    };
    if (u * v_t).determinant() < 0.0 {
        let c = -u.column(2);
        u.set_column(2, &c);
    }
    u * v_t
}

/// Rotation matrix for an axis-angle vector (Rodrigues).
pub fn exp_rotation(axis_angle: &Vec3) -> Mat3 {
    Rotation3::new(*axis_angle).into_inner()
}

/// Axis-angle vector of a rotation matrix.
pub fn log_rotation(r: &Mat3) -> Vec3 {
    // sin(θ)·axis from the skew part; atan2 stays accurate near 0
    let w = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if c > -0.9 {
        if s < 1e-300 {
            return Vec3::zeros();
        }
        return w * (theta / s);
    }
    Rotation3::from_matrix_unchecked(orthonormalize(r)).scaled_axis()
}

/// Rotation angle of `r` in radians, in `[0, π]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let w = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    w.norm().atan2(0.5 * (r.trace() - 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !is_rotation(&rotation, ORTHONORMAL_TOL) {
            return Err(Error::Domain(format!(
                "rotation is not orthonormal (error {:.3e})",
                orthonormality_error(&rotation)
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: exp_rotation(&axis_angle),
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    /// The product rotation is re-orthonormalized so that long chains
    /// of compositions stay on SO(3).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: orthonormalize(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    /// metres
    pub focal_length: f64,
    /// metres per pixel
    pub detector_pitch: f64,
    /// continuous sample coordinate of the boresight
    pub principal_sample: f64,
    pub n_samples: usize,
}

impl Intrinsics {
    pub fn new(
        focal_length: f64,
        detector_pitch: f64,
        principal_sample: f64,
        n_samples: usize,
    ) -> Result<Self> {
        if !(focal_length > 0.0 && focal_length.is_finite()) {
            return Err(Error::Domain(format!("focal length {focal_length} must be > 0")));
        }
        if !(detector_pitch > 0.0 && detector_pitch.is_finite()) {
            return Err(Error::Domain(format!("detector pitch {detector_pitch} must be > 0")));
        }
        if !(0.0..n_samples as f64).contains(&principal_sample) {
            return Err(Error::Domain(format!(
                "principal sample {principal_sample} outside [0, {n_samples})"
            )));
        }
        Ok(Self {
            focal_length,
            detector_pitch,
            principal_sample,
            n_samples,
        })
    }

    /// Unit viewing direction of a detector sample in the camera frame.
    pub fn detector_direction(&self, sample: f64) -> Vec3 {
        Vec3::new(
            (sample - self.principal_sample) * self.detector_pitch,
            0.0,
            self.focal_length,
        )
        .normalize()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EphemerisSample {
    /// seconds
    pub time: f64,
    pub position: Vec3,
    /// camera-to-body rotation
    pub orientation: Mat3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint {
    pub sample: f64,
    pub line: f64,
}

impl ImagePoint {
    pub fn new(sample: f64, line: f64) -> Self {
        Self { sample, line }
    }

    /// Centre of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> Self {
        Self::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.sample - other.sample).hypot(self.line - other.line)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("ray needs a finite origin and non-zero direction".into()));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Forward intersection with the horizontal plane `z = height`.
    pub fn intersect_height(&self, height: f64) -> Option<Vec3> {
        if self.direction.z.abs() < 1e-15 {
            return None;
        }
        let t = (height - self.origin.z) / self.direction.z;
        (t >= 0.0).then(|| self.at(t))
    }
}

/// Pushbroom line-scan camera: fixed intrinsics plus a time series of
/// exterior orientations, one image line per `line_exposure` seconds.
#[derive(Clone, Debug)]
pub struct PushbroomCamera {
    intrinsics: Intrinsics,
    ephemeris: Vec<EphemerisSample>,
    quats: Vec<UnitQuaternion<f64>>,
    line_exposure: f64,
    n_lines: usize,
    start_time: f64,
}

impl PushbroomCamera {
    pub fn new(
        intrinsics: Intrinsics,
        ephemeris: Vec<EphemerisSample>,
        line_exposure: f64,
        n_lines: usize,
        start_time: f64,
    ) -> Result<Self> {
        if ephemeris.len() < 2 {
            return Err(Error::Domain("ephemeris needs at least 2 samples".into()));
        }
        if ephemeris.windows(2).any(|w| w[1].time <= w[0].time) {
            return Err(Error::Domain("ephemeris times must be strictly increasing".into()));
        }
        for s in &ephemeris {
            if !is_rotation(&s.orientation, ORTHONORMAL_TOL) {
                return Err(Error::Domain(format!(
                    "orientation at t={} is not a rotation (error {:.3e})",
                    s.time,
                    orthonormality_error(&s.orientation)
                )));
            }
        }
        if !(line_exposure > 0.0 && line_exposure.is_finite()) {
            return Err(Error::Domain("line exposure must be > 0".into()));
        }
        if n_lines == 0 {
            return Err(Error::Domain("camera needs at least one line".into()));
        }
        let end_time = start_time + n_lines as f64 * line_exposure;
        let slack = 1e-9 * (end_time.abs() + 1.0);
        let (first, last) = (ephemeris[0].time, ephemeris[ephemeris.len() - 1].time);
        if first > start_time + slack || last < end_time - slack {
            return Err(Error::Domain(format!(
                "ephemeris [{first}, {last}] does not cover acquisition [{start_time}, {end_time}]"
            )));
        }
        let mut quats: Vec<UnitQuaternion<f64>> = ephemeris
            .iter()
            .map(|s| UnitQuaternion::from_matrix(&s.orientation))
            .collect();
        // keep consecutive quaternions in the same hemisphere for blending
        for i in 1..quats.len() {
            if quats[i].coords.dot(&quats[i - 1].coords) < 0.0 {
                quats[i] = UnitQuaternion::new_unchecked(-quats[i].into_inner());
            }
        }
        Ok(Self {
            intrinsics,
            ephemeris,
            quats,
            line_exposure,
            n_lines,
            start_time,
        })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn ephemeris(&self) -> &[EphemerisSample] {
        &self.ephemeris
    }

    pub fn line_exposure(&self) -> f64 {
        self.line_exposure
    }

    pub fn n_lines(&self) -> usize {
        self.n_lines
    }

    pub fn n_samples(&self) -> usize {
        self.intrinsics.n_samples
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn time_at_line(&self, line: f64) -> f64 {
        self.start_time + line * self.line_exposure
    }

    /// Exterior orientation at a continuous image line.
    pub fn state_at_line(&self, line: f64) -> Result<(Vec3, Mat3)> {
        if !(0.0..=self.n_lines as f64).contains(&line) {
            return Err(Error::Bounds(format!(
                "line {line} outside [0, {}]",
                self.n_lines
            )));
        }
        Ok(self.state_at_time(self.time_at_line(line)))
    }

    /// Piecewise-linear position and normalized-blend orientation. Times
    /// outside the ephemeris extrapolate along the end segment.
    fn state_at_time(&self, t: f64) -> (Vec3, Mat3) {
        let eph = &self.ephemeris;
        let k = match eph.partition_point(|s| s.time <= t) {
            0 => 0,
            n if n >= eph.len() => eph.len() - 2,
            n => n - 1,
        };
        let (a, b) = (&eph[k], &eph[k + 1]);
        let w = (t - a.time) / (b.time - a.time);
        let position = a.position * (1.0 - w) + b.position * w;
        let orientation = if w == 0.0 || a.orientation == b.orientation {
            a.orientation
        } else if w == 1.0 {
            b.orientation
        } else {
            let q = self.quats[k].coords * (1.0 - w) + self.quats[k + 1].coords * w;
            UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q))
                .to_rotation_matrix()
                .into_inner()
        };
        (position, orientation)
    }

    fn camera_frame(&self, p: &Vec3, line: f64) -> Vec3 {
        let (c, r) = self.state_at_time(self.time_at_line(line));
        r.transpose() * (p - c)
    }

    /// Image coordinates of a body-fixed point.
    pub fn project(&self, p: &Vec3) -> Result<ImagePoint> {
        self.project_in(p, 0.0, self.n_lines as f64)
    }

    /// Projection with the line search widened by `margin` lines on both
    /// sides, extrapolating the ephemeris. Used where a smooth residual is
    /// needed for points near the first or last image line.
    pub fn project_with_margin(&self, p: &Vec3, margin: f64) -> Result<ImagePoint> {
        self.project_in(p, -margin, self.n_lines as f64 + margin)
    }

    fn project_in(&self, p: &Vec3, lo: f64, hi: f64) -> Result<ImagePoint> {
        let line = self.solve_line(p, lo, hi)?;
        let q = self.camera_frame(p, line);
        if q.z <= 0.0 {
            return Err(Error::Projection(format!("point {p:?} is behind the sensor")));
        }
        let f = self.intrinsics.focal_length;
        let sample = self.intrinsics.principal_sample + f * (q.x / q.z) / self.intrinsics.detector_pitch;
        Ok(ImagePoint { sample, line })
    }

    /// Finds the line whose viewing plane contains `p`: bisection to a
    /// sub-line bracket, then safeguarded Newton to `ROOT_TOL_LINES`.
    fn solve_line(&self, p: &Vec3, mut lo: f64, mut hi: f64) -> Result<f64> {
        let along = |l: f64| self.camera_frame(p, l).y;
        let mut g_lo = along(lo);
        let g_hi = along(hi);
        if g_lo == 0.0 {
            return Ok(lo);
        }
        if g_hi == 0.0 {
            return Ok(hi);
        }
        if g_lo.signum() == g_hi.signum() {
            return Err(Error::Projection(format!(
                "no image line in [{lo}, {hi}] sees point {p:?}"
            )));
        }
        let mut iterations = 0;
        while hi - lo > 0.5 {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            let g = along(mid);
            if g == 0.0 {
                return Ok(mid);
            }
            if g.signum() == g_lo.signum() {
                lo = mid;
                g_lo = g;
            } else {
                hi = mid;
            }
        }
        let mut l = 0.5 * (lo + hi);
        let h = 1e-4;
        while iterations < MAX_ROOT_ITERATIONS {
            iterations += 1;
            let g = along(l);
            let dg = (along(l + h) - along(l - h)) / (2.0 * h);
            let mut next = if dg != 0.0 { l - g / dg } else { f64::NAN };
            if !(next > lo && next < hi) {
                // Newton left the bracket: fall back to a bisection step
                if g.signum() == g_lo.signum() {
                    lo = l;
                    g_lo = g;
                } else {
                    hi = l;
                }
                next = 0.5 * (lo + hi);
            }
            let step = next - l;
            l = next;
            if step.abs() < ROOT_TOL_LINES {
                return Ok(l);
            }
        }
        Err(Error::Convergence {
            iterations: MAX_ROOT_ITERATIONS,
        })
    }

    /// Viewing ray through a continuous image point.
    pub fn back_project(&self, p: &ImagePoint) -> Result<Ray> {
        let in_samples = (0.0..=self.intrinsics.n_samples as f64).contains(&p.sample);
        let in_lines = (0.0..=self.n_lines as f64).contains(&p.line);
        if !(in_samples && in_lines) {
            return Err(Error::Bounds(format!(
                "image point ({}, {}) outside {}x{} frame",
                p.sample, p.line, self.intrinsics.n_samples, self.n_lines
            )));
        }
        Ok(self.back_project_unchecked(p))
    }

    pub(crate) fn back_project_unchecked(&self, p: &ImagePoint) -> Ray {
        let (c, r) = self.state_at_time(self.time_at_line(p.line));
        Ray {
            origin: c,
            direction: (r * self.intrinsics.detector_direction(p.sample)).normalize(),
        }
    }

    /// Camera with a constant pointing correction `exp(rotation_delta)`
    /// pre-multiplied onto every orientation and `position_delta` added to
    /// every position.
    pub fn adjusted(&self, rotation_delta: &Vec3, position_delta: &Vec3) -> PushbroomCamera {
        let dr = exp_rotation(rotation_delta);
        self.map_states(|s| EphemerisSample {
            time: s.time,
            position: s.position + position_delta,
            orientation: orthonormalize(&(dr * s.orientation)),
        })
    }

    /// Camera carried rigidly by `t` (positions and attitudes).
    pub fn transformed(&self, t: &RigidTransform) -> PushbroomCamera {
        self.map_states(|s| EphemerisSample {
            time: s.time,
            position: t.apply(&s.position),
            orientation: orthonormalize(&(t.rotation * s.orientation)),
        })
    }

    fn map_states(&self, f: impl Fn(&EphemerisSample) -> EphemerisSample) -> PushbroomCamera {
        let ephemeris: Vec<_> = self.ephemeris.iter().map(f).collect();
        PushbroomCamera::new(
            self.intrinsics,
            ephemeris,
            self.line_exposure,
            self.n_lines,
            self.start_time,
        )
        .expect("rigid motion preserves camera invariants")
    }

    /// Image corners intersected with the plane `z = height`, in the order
    /// (0,0), (n_samples,0), (n_samples,n_lines), (0,n_lines).
    pub fn footprint_at_height(&self, height: f64) -> Result<[Vec3; 4]> {
        let (ns, nl) = (self.intrinsics.n_samples as f64, self.n_lines as f64);
        let corners = [(0.0, 0.0), (ns, 0.0), (ns, nl), (0.0, nl)];
        let mut out = [Vec3::zeros(); 4];
        for (o, (s, l)) in out.iter_mut().zip(corners) {
            *o = self
                .back_project(&ImagePoint::new(s, l))?
                .intersect_height(height)
                .ok_or_else(|| Error::Projection("image corner does not reach the ground plane".into()))?;
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Nadir-looking camera flying +y at `altitude`, one ground sample
    /// distance `gsd` per line.
    pub(crate) fn nadir_camera(altitude: f64, gsd: f64, n: usize) -> PushbroomCamera {
        let pitch = 1e-5;
        let f = pitch * altitude / gsd;
        let intr = Intrinsics::new(f, pitch, n as f64 / 2.0, n).unwrap();
        let r = nadir_orientation();
        let speed = 1600.0;
        let dt = gsd / speed;
        let span = n as f64 * dt;
        let y0 = -(n as f64) * gsd / 2.0;
        let eph = vec![
            EphemerisSample { time: 0.0, position: Vec3::new(0.0, y0, altitude), orientation: r },
            EphemerisSample { time: span, position: Vec3::new(0.0, y0 + speed * span, altitude), orientation: r },
        ];
        PushbroomCamera::new(intr, eph, dt, n, 0.0).unwrap()
    }

    pub(crate) fn nadir_orientation() -> Mat3 {
        Mat3::from_columns(&[
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
        ])
    }

    #[test]
    fn state_at_sample_time_is_verbatim() {
        let r1 = exp_rotation(&Vec3::new(0.01, -0.02, 0.03)) * nadir_orientation();
        let r2 = exp_rotation(&Vec3::new(0.02, 0.01, -0.01)) * nadir_orientation();
        let intr = Intrinsics::new(1.0, 1e-5, 50.0, 100).unwrap();
        let eph = vec![
            EphemerisSample { time: 0.0, position: Vec3::new(1.0, 2.0, 3.0), orientation: r1 },
            EphemerisSample { time: 1.0, position: Vec3::new(4.0, 5.0, 6.5), orientation: r2 },
        ];
        let cam = PushbroomCamera::new(intr, eph.clone(), 0.01, 100, 0.0).unwrap();
        let (p0, o0) = cam.state_at_line(0.0).unwrap();
        assert_eq!(p0, eph[0].position);
        assert_eq!(o0, eph[0].orientation);
        let (p1, o1) = cam.state_at_line(100.0).unwrap();
        assert_eq!(p1, eph[1].position);
        assert_eq!(o1, eph[1].orientation);
        let (pm, om) = cam.state_at_line(50.0).unwrap();
        assert_eq!(pm, (eph[0].position + eph[1].position) * 0.5);
        assert!(orthonormality_error(&om) < 1e-12);
    }

    #[test]
    fn state_matches_piecewise_linear_oracle() {
        // quadratic trajectory sampled at three times
        let pos = |t: f64| Vec3::new(t * t, 2.0 * t, 100.0 - 3.0 * t * t);
        let r = nadir_orientation();
        let times = [0.0, 0.6, 2.0];
        let eph: Vec<_> = times
            .iter()
            .map(|&t| EphemerisSample { time: t, position: pos(t), orientation: r })
            .collect();
        let intr = Intrinsics::new(1.0, 1e-5, 5.0, 10).unwrap();
        let cam = PushbroomCamera::new(intr, eph, 0.01, 200, 0.0).unwrap();
        // independent oracle: explicit two-segment linear interpolation
        let oracle = |t: f64| -> Vec3 {
            let (t0, t1) = if t <= 0.6 { (0.0, 0.6) } else { (0.6, 2.0) };
            let u = (t - t0) / (t1 - t0);
            pos(t0) + (pos(t1) - pos(t0)) * u
        };
        for line in [13.7, 59.9, 60.0, 60.01, 137.25, 199.999] {
            let (p, _) = cam.state_at_line(line).unwrap();
            let e = oracle(line * 0.01);
            assert!((p - e).norm() < 1e-12, "line {line}: {p:?} vs {e:?}");
        }
    }

    #[test]
    fn state_is_continuous_and_bounded() {
        let cam = nadir_camera(1000.0, 0.5, 100);
        let (a, ra) = cam.state_at_line(37.0).unwrap();
        let (b, rb) = cam.state_at_line(37.0 + 1e-6).unwrap();
        assert!((a - b).norm() < 1e-5);
        assert!((ra - rb).abs().max() < 1e-9);
        assert!(matches!(cam.state_at_line(-0.1), Err(Error::Bounds(_))));
        assert!(matches!(cam.state_at_line(100.1), Err(Error::Bounds(_))));
    }

    #[test]
    fn nadir_point_projects_to_principal_and_mid_line() {
        let cam = nadir_camera(100_000.0, 0.3, 512);
        let (c, _) = cam.state_at_line(256.0).unwrap();
        let p = cam.project(&Vec3::new(c.x, c.y, 0.0)).unwrap();
        assert!(close(p.sample, 256.0, 1e-9));
        assert!(close(p.line, 256.0, 1e-6));
    }

    #[test]
    fn cross_track_offset_follows_similar_triangles() {
        let (h, gsd) = (100_000.0, 0.3);
        let cam = nadir_camera(h, gsd, 512);
        let intr = *cam.intrinsics();
        let (c, _) = cam.state_at_line(100.0).unwrap();
        for d in [0.3, 7.5, -21.0] {
            let p = cam.project(&Vec3::new(c.x + d, c.y, 0.0)).unwrap();
            let expected = d * intr.focal_length / (h * intr.detector_pitch);
            assert!(close(p.sample - intr.principal_sample, expected, 1e-9), "{d}");
        }
    }

    #[test]
    fn back_project_boresight_and_one_pixel_angle() {
        let cam = nadir_camera(100_000.0, 0.3, 512);
        let intr = *cam.intrinsics();
        let ray = cam.back_project(&ImagePoint::new(intr.principal_sample, 10.0)).unwrap();
        assert!((ray.direction() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let ray1 = cam.back_project(&ImagePoint::new(intr.principal_sample + 1.0, 10.0)).unwrap();
        let (a, b) = (ray.direction(), ray1.direction());
        let angle = a.cross(&b).norm().atan2(a.dot(&b));
        let expected = (intr.detector_pitch / intr.focal_length).atan();
        assert!(close(angle, expected, 1e-12));
        assert!(ray1.direction().x > 0.0);
        assert!(cam.back_project(&ImagePoint::new(-1.0, 0.0)).is_err());
    }

    #[test]
    fn back_project_project_round_trip() {
        let mut cam = nadir_camera(100_000.0, 0.3, 512);
        cam = cam.adjusted(&Vec3::new(0.05, -0.1, 0.02), &Vec3::new(3.0, -4.0, 10.0));
        for (s, l) in [(0.5, 0.5), (100.25, 300.75), (511.5, 511.5), (256.0, 10.0)] {
            let ray = cam.back_project(&ImagePoint::new(s, l)).unwrap();
            let ground = ray.intersect_height(12.0).unwrap();
            let p = cam.project(&ground).unwrap();
            assert!(close(p.sample, s, 1e-3) && close(p.line, l, 1e-3), "{s},{l} -> {p:?}");
        }
    }

    #[test]
    fn point_outside_swath_fails_projection() {
        let cam = nadir_camera(100_000.0, 0.3, 512);
        let err = cam.project(&Vec3::new(0.0, 5_000.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Projection(_)));
    }

    #[test]
    fn rigid_transform_algebra() {
        let t = RigidTransform::from_axis_angle(Vec3::new(0.3, -0.2, 0.9), Vec3::new(1.0, 2.0, 3.0));
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Mat3::identity()).abs().max() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
        let mut acc = RigidTransform::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&t);
        }
        assert!(orthonormality_error(&acc.rotation) < 1e-9);
        assert!(RigidTransform::new(Mat3::identity() * 2.0, Vec3::zeros()).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1e-5, 1.0, 10).is_err());
        assert!(Intrinsics::new(1.0, -1e-5, 1.0, 10).is_err());
        assert!(Intrinsics::new(1.0, 1e-5, 10.0, 10).is_err());
        assert!(Intrinsics::new(1.0, 1e-5, 0.0, 10).is_ok());
    }
}
