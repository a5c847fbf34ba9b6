//! Synthetic ground truth: cratered terrains, pushbroom renders of them and
//! self-consistent acquisition metadata.
//!
//! Everything is a pure function of the scene description; noise comes from
//! an integer hash rather than a random-number generator so fixtures are
//! reproducible bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::adjust::CameraAdjustment;
use crate::error::{Error, Result};
use crate::geom::{EphemerisSample, ImagePoint, Intrinsics, Mat3, PushbroomCamera, Ray, Vec3};
use crate::ingest::{AcquisitionMeta, DemGrid, Lattice, RasterImage, DEFAULT_DETECTOR_PITCH};
use crate::kv::KeyValues;
use crate::validate::aggregate_to;

/// Mean lunar radius, metres. Fixture orbits are laid out on this sphere.
pub const BODY_RADIUS: f64 = 1_737_400.0;
/// Rim height as a fraction of crater depth.
pub const RIM_FRACTION: f64 = 0.15;
const GROUND_SPEED: f64 = 1600.0;
const RADIANCE_SCALE: f64 = 20_000.0;
const NOISE_OCTAVES: u32 = 4;
const INTERSECT_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crater {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub depth: f64,
}

impl Crater {
    /// Parabolic bowl to a raised rim at `radius`, decaying smoothly to zero
    /// at twice the radius.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let r = ((x - self.x).hypot(y - self.y)) / self.radius;
        let rim = RIM_FRACTION * self.depth;
        if r < 1.0 {
            rim + (self.depth + rim) * (r * r - 1.0)
        } else if r < 2.0 {
            rim * (2.0 - r) * (2.0 - r)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// width (x) and height (y) in metres, centred on the origin
    pub extent: (f64, f64),
    pub base_elevation: f64,
    pub craters: Vec<Crater>,
    pub noise_amplitude: f64,
    /// longest wavelength of the terrain noise, metres
    pub noise_wavelength: f64,
    pub albedo_texture_seed: u64,
    /// peak albedo variation as a fraction of the mean
    pub albedo_amplitude: f64,
    /// longest wavelength of the albedo texture, metres
    pub texture_wavelength: f64,
    pub sun_incidence: f64,
    pub sun_azimuth: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent: (240.0, 240.0),
            base_elevation: -1500.0,
            craters: Vec::new(),
            noise_amplitude: 0.0,
            noise_wavelength: 25.0,
            albedo_texture_seed: 1,
            albedo_amplitude: 0.2,
            texture_wavelength: 4.0,
            sun_incidence: 40.0,
            sun_azimuth: 135.0,
        }
    }
}

impl SceneSpec {
    /// A scene with `n` craters of 6-30 m radius and depth/diameter
    /// 0.05-0.1 scattered over the central 70% of the extent, plus 1 m of
    /// rolling noise.
    pub fn cratered(seed: u64, n: usize) -> Self {
        let mut spec = Self { albedo_texture_seed: seed, noise_amplitude: 1.0, ..Self::default() };
        let (hw, hh) = (0.35 * spec.extent.0, 0.35 * spec.extent.1);
        spec.craters = (0..n as i64)
            .map(|i| {
                let u = |k: i64| 0.5 * (hash(seed ^ 0xC7A7, i, k) + 1.0);
                let radius = 6.0 + 24.0 * u(2);
                Crater {
                    x: hw * (2.0 * u(0) - 1.0),
                    y: hh * (2.0 * u(1) - 1.0),
                    radius,
                    depth: 2.0 * radius * (0.05 + 0.05 * u(3)),
                }
            })
            .collect();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::Domain(format!("scene extent {:?} must be positive", self.extent)));
        }
        for c in &self.craters {
            if !(c.radius > 0.0 && c.depth > 0.0) {
                return Err(Error::Domain(format!("crater {c:?} needs positive radius and depth")));
            }
        }
        if !(self.noise_amplitude >= 0.0 && self.albedo_amplitude >= 0.0 && self.albedo_amplitude < 1.0) {
            return Err(Error::Domain("noise and albedo amplitudes must be >= 0 (albedo < 1)".into()));
        }
        if !(self.noise_wavelength > 0.0 && self.texture_wavelength > 0.0) {
            return Err(Error::Domain("noise wavelengths must be > 0".into()));
        }
        if !(0.0..90.0).contains(&self.sun_incidence) {
            return Err(Error::Domain(format!("sun incidence {} outside [0, 90)", self.sun_incidence)));
        }
        if !(0.0..360.0).contains(&self.sun_azimuth) {
            return Err(Error::Domain(format!("sun azimuth {} outside [0, 360)", self.sun_azimuth)));
        }
        Ok(())
    }

    /// Unit vector towards the sun (azimuth clockwise from north = +y).
    pub fn sun_direction(&self) -> Vec3 {
        let (i, a) = (self.sun_incidence.to_radians(), self.sun_azimuth.to_radians());
        Vec3::new(i.sin() * a.sin(), i.sin() * a.cos(), i.cos())
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut h = self.base_elevation;
        for c in &self.craters {
            h += c.height(x, y);
        }
        if self.noise_amplitude > 0.0 {
            h += self.noise_amplitude * fbm(self.albedo_texture_seed ^ 0x7E44A1, x, y, self.noise_wavelength);
        }
        h
    }

    pub fn albedo(&self, x: f64, y: f64) -> f64 {
        1.0 + self.albedo_amplitude * fbm(self.albedo_texture_seed, x, y, self.texture_wavelength)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [-1, 1) from an integer lattice coordinate.
fn hash(seed: u64, ix: i64, iy: i64) -> f64 {
    let z = splitmix(seed ^ splitmix((ix as u64) ^ splitmix(iy as u64).rotate_left(17)));
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (u, v) = (fade(x - fx), fade(y - fy));
    let a = hash(seed, ix, iy);
    let b = hash(seed, ix + 1, iy);
    let c = hash(seed, ix, iy + 1);
    let d = hash(seed, ix + 1, iy + 1);
    (a + (b - a) * u) * (1.0 - v) + (c + (d - c) * u) * v
}

/// Octave sum of value noise from `wavelength` downwards, in [-1, 1].
fn fbm(seed: u64, x: f64, y: f64, wavelength: f64) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0 / wavelength);
    for k in 0..NOISE_OCTAVES {
        sum += amp * value_noise(seed.wrapping_add(k as u64 * 0x51ED), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

pub fn make_terrain(spec: &SceneSpec, cell_size: f64) -> Result<DemGrid> {
    spec.validate()?;
    let (hw, hh) = (0.5 * spec.extent.0, 0.5 * spec.extent.1);
    let lattice = Lattice::covering(-hw, -hh, hw, hh, cell_size)?;
    let mut values = vec![0.0; lattice.len()];
    values
        .par_chunks_mut(lattice.n_cols)
        .enumerate()
        .for_each(|(row, out)| {
            for (col, v) in out.iter_mut().enumerate() {
                let (x, y) = lattice.cell_center(col, row);
                *v = spec.height(x, y);
            }
        });
    DemGrid::new(lattice, crate::ingest::DEFAULT_NODATA, values)
}

/// First crossing of `ray` with the bilinear surface of `truth`, found
/// by marching half-cell steps through the grid's height range and
/// bisecting to 1 mm.
pub fn intersect_surface(truth: &DemGrid, ray: &Ray, z_range: (f64, f64)) -> Option<Vec3> {
    let d = ray.direction();
    if d.z >= 0.0 {
        return None;
    }
    let (zmin, zmax) = (z_range.0 - 0.01, z_range.1 + 0.01);
    let t0 = ((zmax - ray.origin.z) / d.z).max(0.0);
    let t1 = (zmin - ray.origin.z) / d.z;
    if t1 <= t0 {
        return None;
    }
    let above = |t: f64| -> Option<f64> {
        let p = ray.at(t);
        truth.sample_bilinear(p.x, p.y).map(|h| p.z - h)
    };
    let step = 0.5 * truth.lattice.cell_size;
    let mut prev: Option<f64> = None;
    let mut t_prev = t0;
    let mut t = t0;
    loop {
        let f = above(t);
        if let (Some(fp), Some(fc)) = (prev, f) {
            if fp > 0.0 && fc <= 0.0 {
                let (mut lo, mut hi) = (t_prev, t);
                while hi - lo > INTERSECT_TOL {
                    let mid = 0.5 * (lo + hi);
                    match above(mid) {
                        Some(fm) if fm > 0.0 => lo = mid,
                        _ => hi = mid,
                    }
                }
                return Some(ray.at(0.5 * (lo + hi)));
            }
        }
        if t >= t1 {
            return None;
        }
        prev = f;
        t_prev = t;
        t = (t + step).min(t1);
    }
}

/// Lambertian shading of the bilinear surface normal.
fn shade(truth: &DemGrid, x: f64, y: f64, sun: &Vec3) -> f64 {
    let h = truth.lattice.cell_size;
    let at = |x: f64, y: f64| truth.sample_bilinear(x, y);
    let (Some(e), Some(w), Some(n), Some(s)) = (at(x + h, y), at(x - h, y), at(x, y + h), at(x, y - h)) else {
        return 0.0;
    };
    let normal = Vec3::new(-(e - w) / (2.0 * h), -(n - s) / (2.0 * h), 1.0).normalize();
    normal.dot(sun).max(0.0)
}

/// One ray per pixel centre; radiance = albedo × Lambert shading, 0 where
/// the ray misses the terrain.
pub fn render_pushbroom(truth: &DemGrid, cam: &PushbroomCamera, spec: &SceneSpec) -> RasterImage {
    let (ns, nl) = (cam.n_samples(), cam.n_lines());
    let z_range = truth.min_max().unwrap_or((0.0, 0.0));
    let sun = spec.sun_direction();
    let mut values = vec![0.0; ns * nl];
    values.par_chunks_mut(ns).enumerate().for_each(|(row, out)| {
        for (col, v) in out.iter_mut().enumerate() {
            let Ok(ray) = cam.back_project(&ImagePoint::pixel_center(col, row)) else { continue };
            if let Some(p) = intersect_surface(truth, &ray, z_range) {
                *v = RADIANCE_SCALE * spec.albedo(p.x, p.y) * shade(truth, p.x, p.y, &sun);
            }
        }
    });
    RasterImage::new(ns, nl, values).expect("buffer sized to the image")
}

#[derive(Clone, Debug)]
pub struct StereoFixture {
    pub img1: RasterImage,
    pub img2: RasterImage,
    pub meta1: AcquisitionMeta,
    pub meta2: AcquisitionMeta,
    pub truth: DemGrid,
}

/// Straight-line acquisition at constant attitude, boresight on `target`,
/// flying +y with the line through `target` mid-strip.
fn fixture_camera(position: Vec3, target: Vec3, gsd: f64, n: usize) -> Result<PushbroomCamera> {
    let boresight = (target - position).normalize();
    let flight = Vec3::new(0.0, -1.0, 0.0);
    let across = flight.cross(&boresight).normalize();
    let flight = boresight.cross(&across);
    let orientation = Mat3::from_columns(&[across, flight, boresight]);
    let range = (target - position).norm();
    let intr = Intrinsics::new(
        DEFAULT_DETECTOR_PITCH * range / gsd,
        DEFAULT_DETECTOR_PITCH,
        n as f64 / 2.0,
        n,
    )?;
    let dt = gsd / GROUND_SPEED;
    let span = n as f64 * dt;
    let y0 = target.y - 0.5 * n as f64 * gsd;
    let eph = vec![
        EphemerisSample { time: 0.0, position: Vec3::new(position.x, y0, position.z), orientation },
        EphemerisSample {
            time: span,
            position: Vec3::new(position.x, y0 + GROUND_SPEED * span, position.z),
            orientation,
        },
    ];
    PushbroomCamera::new(intr, eph, dt, n, 0.0)
}

pub fn meta_for_camera(
    id: &str,
    cam: &PushbroomCamera,
    gsd: f64,
    altitude: f64,
    spec: &SceneSpec,
) -> Result<AcquisitionMeta> {
    let intr = cam.intrinsics();
    let meta = AcquisitionMeta {
        product_id: id.into(),
        gsd,
        altitude,
        start_time: cam.start_time(),
        line_exposure: cam.line_exposure(),
        n_lines: cam.n_lines(),
        n_samples: cam.n_samples(),
        ephemeris: cam.ephemeris().to_vec(),
        solar_incidence: spec.sun_incidence,
        solar_azimuth: spec.sun_azimuth,
        footprint: cam.footprint_at_height(spec.base_elevation)?,
        focal_length: Some(intr.focal_length),
        detector_pitch: Some(intr.detector_pitch),
        principal_sample: Some(intr.principal_sample),
    };
    meta.validate()?;
    Ok(meta)
}

/// Two `size`×`size` acquisitions from `altitude` above a spherical body,
/// separated across track by the chord `bh_target · altitude` and both
/// pointed at the scene centre. Because the orbit curves away from the
/// local tangent plane, the measured convergence slightly exceeds the
/// flat-geometry value for the same B/H.
pub fn make_stereo_fixture(
    spec: &SceneSpec,
    bh_target: f64,
    gsd: f64,
    altitude: f64,
    size: usize,
) -> Result<StereoFixture> {
    spec.validate()?;
    if !(bh_target >= 0.0 && gsd > 0.0 && altitude > 0.0) || size == 0 {
        return Err(Error::Domain(format!(
            "fixture needs bh >= 0, gsd > 0, altitude > 0, size > 0 (got {bh_target}, {gsd}, {altitude}, {size})"
        )));
    }
    let orbit = BODY_RADIUS + altitude;
    let half_chord = 0.5 * bh_target * altitude;
    if half_chord >= orbit {
        return Err(Error::Domain(format!("baseline for B/H {bh_target} exceeds the orbit diameter")));
    }
    let half_angle = (half_chord / orbit).asin();
    // the sphere's surface passes through the scene base, so altitude is above the terrain
    let (x, z) = (orbit * half_angle.sin(), spec.base_elevation + orbit * half_angle.cos() - BODY_RADIUS);
    let target = Vec3::new(0.0, 0.0, spec.base_elevation);
    let cams = [
        fixture_camera(Vec3::new(-x, 0.0, z), target, gsd, size)?,
        fixture_camera(Vec3::new(x, 0.0, z), target, gsd, size)?,
    ];

    let truth = make_terrain(spec, gsd)?;
    let (zmin, zmax) = truth.min_max().unwrap_or((spec.base_elevation, spec.base_elevation));
    let lat = &truth.lattice;
    for cam in &cams {
        for h in [zmin, zmax] {
            for p in cam.footprint_at_height(h)? {
                // the shading stencil reaches one cell further than the surface itself
                let inside = p.x - lat.cell_size > lat.origin_x + 0.5 * lat.cell_size
                    && p.x + lat.cell_size < lat.x_max() - 0.5 * lat.cell_size
                    && p.y - lat.cell_size > lat.origin_y + 0.5 * lat.cell_size
                    && p.y + lat.cell_size < lat.y_max() - 0.5 * lat.cell_size;
                if !inside {
                    return Err(Error::Extent(format!(
                        "image footprint corner ({:.1}, {:.1}) lies outside the {:?} m scene",
                        p.x, p.y, spec.extent
                    )));
                }
            }
        }
    }
    let img1 = render_pushbroom(&truth, &cams[0], spec);
    let img2 = render_pushbroom(&truth, &cams[1], spec);
    Ok(StereoFixture {
        img1,
        img2,
        meta1: meta_for_camera("SYN_A", &cams[0], gsd, altitude, spec)?,
        meta2: meta_for_camera("SYN_B", &cams[1], gsd, altitude, spec)?,
        truth,
    })
}

/// Coarse reference terrain model: block means of `truth` on a lattice of
/// `cell_size` covering the same ground.
pub fn reference_dtm(truth: &DemGrid, cell_size: f64) -> Result<DemGrid> {
    let l = &truth.lattice;
    let lattice = Lattice::covering(l.origin_x, l.origin_y, l.x_max(), l.y_max(), cell_size)?;
    Ok(aggregate_to(truth, lattice))
}

/// Metadata as a biased navigation solution would report it: every
/// ephemeris state carries the same attitude and position error.
pub fn perturb_meta(meta: &AcquisitionMeta, bias: &CameraAdjustment) -> Result<AcquisitionMeta> {
    let cam = bias.apply(&meta.camera()?);
    Ok(AcquisitionMeta { ephemeris: cam.ephemeris().to_vec(), ..meta.clone() })
}

pub fn parse_scene_spec(text: &str, origin: &str) -> Result<SceneSpec> {
    let kv = KeyValues::parse(text, origin)?;
    let d = SceneSpec::default();
    let extent = match kv.get("extent_m") {
        Some(_) => {
            let e = kv.numbers("extent_m", 2)?;
            (e[0], e[1])
        }
        None => d.extent,
    };
    let mut craters = Vec::new();
    for (line, v) in kv.all("crater") {
        let c = kv.numbers_at("crater", line, v, Some(4))?;
        craters.push(Crater { x: c[0], y: c[1], radius: c[2], depth: c[3] });
    }
    let spec = SceneSpec {
        extent,
        base_elevation: kv.optional("base_elevation_m")?.unwrap_or(d.base_elevation),
        craters,
        noise_amplitude: kv.optional("noise_amplitude_m")?.unwrap_or(d.noise_amplitude),
        noise_wavelength: kv.optional("noise_wavelength_m")?.unwrap_or(d.noise_wavelength),
        albedo_texture_seed: kv.optional("albedo_seed")?.unwrap_or(d.albedo_texture_seed),
        albedo_amplitude: kv.optional("albedo_amplitude")?.unwrap_or(d.albedo_amplitude),
        texture_wavelength: kv.optional("texture_wavelength_m")?.unwrap_or(d.texture_wavelength),
        sun_incidence: kv.optional("sun_incidence_deg")?.unwrap_or(d.sun_incidence),
        sun_azimuth: kv.optional("sun_azimuth_deg")?.unwrap_or(d.sun_azimuth),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn read_scene_spec(path: impl AsRef<Path>) -> Result<SceneSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene_spec(&text, &path.display().to_string())
}

pub fn format_scene_spec(spec: &SceneSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "extent_m = {:?} {:?}", spec.extent.0, spec.extent.1);
    let _ = writeln!(s, "base_elevation_m = {:?}", spec.base_elevation);
    let _ = writeln!(s, "noise_amplitude_m = {:?}", spec.noise_amplitude);
    let _ = writeln!(s, "noise_wavelength_m = {:?}", spec.noise_wavelength);
    let _ = writeln!(s, "albedo_seed = {}", spec.albedo_texture_seed);
    let _ = writeln!(s, "albedo_amplitude = {:?}", spec.albedo_amplitude);
    let _ = writeln!(s, "texture_wavelength_m = {:?}", spec.texture_wavelength);
    let _ = writeln!(s, "sun_incidence_deg = {:?}", spec.sun_incidence);
    let _ = writeln!(s, "sun_azimuth_deg = {:?}", spec.sun_azimuth);
    for c in &spec.craters {
        let _ = writeln!(s, "crater = {:?} {:?} {:?} {:?}", c.x, c.y, c.radius, c.depth);
    }
    s
}

pub fn write_scene_spec(spec: &SceneSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_scene_spec(spec)).map_err(|e| Error::io(path, e))
}
