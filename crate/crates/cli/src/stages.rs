//! File-to-file pipeline stages. Every stage reads its inputs from disk and
//! writes its outputs to disk, so any stage can be re-run in isolation from
//! the artifacts of a previous run.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use stereoforge::adjust::{
    bundle_adjust, detect_tie_points, read_adjustment, read_ties, reprojection_rms, write_adjustment,
    write_ties, AdjustmentRecord, RobustLossParams, TieParams, TiePoint,
};
use stereoforge::align::{apply_bias, estimate_bias, icp_align, read_transform, transform_cloud, write_transform, IcpParams};
use stereoforge::densematch::{match_dense, read_disparity, write_disparity, Affine2, MatchParams};
use stereoforge::geom::{ImagePoint, PushbroomCamera};
use stereoforge::ingest::{
    parse_meta, read_cloud, read_dem, read_image, write_cloud, write_dem, write_image, AcquisitionMeta, DemGrid,
    Lattice,
};
use stereoforge::kv::KeyValues;
use stereoforge::mosaic::mosaic;
use stereoforge::pairsel::{footprint_intersection, pair_geometry, rank_pairs, PairGeometry, PairThresholds};
use stereoforge::recon::{cloud_from_disparity, fill_voids, grid_dem, GriddingParams};
use stereoforge::validate::{
    extract_profile, grid_stats, hillshade, horizontal_offset, profile_rmse, triangulation_error_stats, XY,
};
use stereoforge::{Error, Result};

use crate::config::{SceneInput, ValidateSettings};
use crate::manifest::{Recorder, StageRecord};

pub const SCENES: &str = "scenes.txt";
pub const PAIRS: &str = "pairs.txt";
pub const TIES: &str = "ties.txt";
pub const ADJUST: &str = "cams.adjust";
pub const DISPARITY: &str = "disparity.txt";
pub const CLOUD: &str = "cloud.xyz";
pub const DEM_RAW: &str = "dem_raw.asc";
pub const TRANSFORM: &str = "icp.transform";
pub const CLOUD_ALIGNED: &str = "cloud_aligned.xyz";
pub const DEM_ALIGNED: &str = "dem_aligned.asc";
pub const BIAS: &str = "bias.txt";
pub const DEM: &str = "dem.asc";
pub const MOSAIC: &str = "mosaic.asc";
pub const VALIDATION: &str = "validation.json";
pub const HILLSHADE: &str = "hillshade.pgm";

/// Ties whose reprojection residual exceeds this many Cauchy scales in
/// either image are left out of the prealignment fit.
const INLIER_SCALES: f64 = 3.0;

pub struct IngestOutput {
    pub metas: Vec<AcquisitionMeta>,
    pub record: StageRecord,
}

/// Parses and validates every sidecar and checks that each image has the
/// dimensions its sidecar declares.
pub fn ingest(scenes: &[SceneInput], root: &Path) -> Result<IngestOutput> {
    let mut rec = Recorder::new("ingest", root);
    let mut metas = Vec::new();
    let mut listing = String::new();
    for (i, sc) in scenes.iter().enumerate() {
        rec.input(&sc.meta)?;
        rec.input(&sc.image)?;
        let meta = parse_meta(&sc.meta)?;
        meta.validate()?;
        let img = read_image(&sc.image)?;
        if (img.n_cols, img.n_rows) != (meta.n_samples, meta.n_lines) {
            return Err(Error::Format(format!(
                "{}: image is {}x{} but {} declares {}x{}",
                sc.image.display(),
                img.n_cols,
                img.n_rows,
                sc.meta.display(),
                meta.n_samples,
                meta.n_lines
            )));
        }
        let _ = writeln!(
            listing,
            "{i} {} {} {} {}x{} gsd={}",
            meta.product_id,
            sc.image.display(),
            sc.meta.display(),
            meta.n_samples,
            meta.n_lines,
            meta.gsd
        );
        metas.push(meta);
    }
    let out = root.join(SCENES);
    std::fs::write(&out, listing).map_err(|e| Error::io(&out, e))?;
    rec.output(&out);
    rec.result("n_scenes", metas.len() as f64);
    Ok(IngestOutput { metas, record: rec.finish()? })
}

pub struct PairChoice {
    pub first: usize,
    pub second: usize,
    pub geometry: PairGeometry,
    pub record: StageRecord,
}

fn violations(g: &PairGeometry, t: &PairThresholds) -> Vec<String> {
    let mut v = Vec::new();
    if g.bh_ratio < t.bh_min {
        v.push(format!("B/H {:.4} < bh_min {}", g.bh_ratio, t.bh_min));
    }
    if g.bh_ratio > t.bh_max {
        v.push(format!("B/H {:.4} > bh_max {}", g.bh_ratio, t.bh_max));
    }
    if g.d_incidence > t.max_d_incidence {
        v.push(format!("incidence difference {:.2} > {}", g.d_incidence, t.max_d_incidence));
    }
    if g.d_azimuth > t.max_d_azimuth {
        v.push(format!("azimuth difference {:.2} > {}", g.d_azimuth, t.max_d_azimuth));
    }
    if g.overlap_fraction < t.min_overlap || g.overlap_fraction <= 0.0 {
        v.push(format!("overlap {:.3} < min_overlap {}", g.overlap_fraction, t.min_overlap));
    }
    v
}

/// Ranks all scene pairs and picks the best acceptable one. With
/// `override_thresholds` the best overlapping pair is taken even when it
/// violates the thresholds.
pub fn pairsel(
    metas: &[AcquisitionMeta],
    thresholds: &PairThresholds,
    override_thresholds: bool,
    root: &Path,
) -> Result<PairChoice> {
    let mut rec = Recorder::new("pairsel", root);
    let mut listing = String::new();
    let mut all = Vec::new();
    for i in 0..metas.len() {
        for j in i + 1..metas.len() {
            let g = pair_geometry(&metas[i], &metas[j])?;
            let bad = violations(&g, thresholds);
            let _ = writeln!(
                listing,
                "{} {} bh={} convergence_deg={} overlap={} d_incidence={} d_azimuth={} expected_precision_m={} {}",
                metas[i].product_id,
                metas[j].product_id,
                g.bh_ratio,
                g.convergence_deg,
                g.overlap_fraction,
                g.d_incidence,
                g.d_azimuth,
                g.expected_precision,
                if bad.is_empty() { "accepted".to_string() } else { format!("rejected: {}", bad.join("; ")) }
            );
            all.push((i, j, g, bad));
        }
    }
    let ranked = rank_pairs(metas, thresholds)?;
    let chosen = match ranked.first() {
        Some(p) => (p.first, p.second, p.geometry, false),
        None if override_thresholds => {
            let mid = thresholds.midpoint();
            let best = all
                .iter()
                .filter(|(_, _, g, _)| g.overlap_fraction > 0.0)
                .min_by(|a, b| {
                    (a.2.bh_ratio - mid)
                        .abs()
                        .total_cmp(&(b.2.bh_ratio - mid).abs())
                        .then(b.2.overlap_fraction.total_cmp(&a.2.overlap_fraction))
                })
                .ok_or_else(|| Error::InsufficientOverlap("no pair of scenes overlaps".into()))?;
            (best.0, best.1, best.2, true)
        }
        None => {
            let why: Vec<String> = all
                .iter()
                .map(|(i, j, _, bad)| format!("{}/{}: {}", metas[*i].product_id, metas[*j].product_id, bad.join(", ")))
                .collect();
            let _ = writeln!(listing, "selected none");
            let out = root.join(PAIRS);
            std::fs::write(&out, listing).map_err(|e| Error::io(&out, e))?;
            return Err(Error::Domain(format!(
                "no stereo pair satisfies the selection thresholds ({})",
                why.join("; ")
            )));
        }
    };
    let (first, second, geometry, overridden) = chosen;
    let _ = writeln!(listing, "selected {} {}", metas[first].product_id, metas[second].product_id);
    let out = root.join(PAIRS);
    std::fs::write(&out, listing).map_err(|e| Error::io(&out, e))?;
    rec.output(&out);
    rec.param("bh_min", thresholds.bh_min);
    rec.param("bh_max", thresholds.bh_max);
    rec.param("max_d_incidence", thresholds.max_d_incidence);
    rec.param("max_d_azimuth", thresholds.max_d_azimuth);
    rec.param("min_overlap", thresholds.min_overlap);
    rec.param("override", override_thresholds);
    rec.result("first", first as f64);
    rec.result("second", second as f64);
    rec.result("bh_ratio", geometry.bh_ratio);
    rec.result("convergence_deg", geometry.convergence_deg);
    rec.result("overlap_fraction", geometry.overlap_fraction);
    rec.result("expected_precision_m", geometry.expected_precision);
    rec.result("thresholds_overridden", if overridden { 1.0 } else { 0.0 });
    Ok(PairChoice { first, second, geometry, record: rec.finish()? })
}

fn cameras(meta1: &AcquisitionMeta, meta2: &AcquisitionMeta) -> Result<[PushbroomCamera; 2]> {
    Ok([meta1.camera()?, meta2.camera()?])
}

/// Cameras with an adjust file's corrections applied.
pub fn adjusted_cameras(meta1: &Path, meta2: &Path, adjust: &Path) -> Result<[PushbroomCamera; 2]> {
    let rec = read_adjustment(adjust)?;
    let [c1, c2] = cameras(&parse_meta(meta1)?, &parse_meta(meta2)?)?;
    Ok([rec.cameras[0].apply(&c1), rec.cameras[1].apply(&c2)])
}

/// Flat-surface height used to seed tie matching: the sidecars' mean
/// footprint elevation.
pub fn seed_height(meta1: &AcquisitionMeta, meta2: &AcquisitionMeta) -> f64 {
    0.5 * (meta1.footprint_centroid().z + meta2.footprint_centroid().z)
}

/// Bundle adjustment of the given ties, the prealignment fit, and the
/// adjust / tie files.
pub fn solve_bundle(
    cams: [&PushbroomCamera; 2],
    ties: &[TiePoint],
    params: &RobustLossParams,
    out_adjust: &Path,
    out_ties: &Path,
    rec: &mut Recorder,
) -> Result<AdjustmentRecord> {
    let before = reprojection_rms(cams, ties)?;
    let res = bundle_adjust(cams, ties, params)?;
    let adjusted = [res.adjustments[0].apply(cams[0]), res.adjustments[1].apply(cams[1])];
    let limit = INLIER_SCALES * params.cauchy_scale_c;
    let mut inliers = Vec::new();
    for t in &res.ties {
        let ok = [(0usize, &t.obs1), (1, &t.obs2)].iter().all(|(k, obs)| {
            adjusted[*k]
                .project_with_margin(&t.world, adjusted[*k].n_lines() as f64)
                .map(|p| (p.sample - obs.sample).hypot(p.line - obs.line) < limit)
                .unwrap_or(false)
        });
        if ok {
            inliers.push(*t);
        }
    }
    let fit_set = if inliers.len() >= 3 { &inliers } else { &res.ties };
    let from: Vec<ImagePoint> = fit_set.iter().map(|t| t.obs1).collect();
    let to: Vec<ImagePoint> = fit_set.iter().map(|t| t.obs2).collect();
    let prealign = Affine2::fit(&from, &to)?;
    let after_all = reprojection_rms([&adjusted[0], &adjusted[1]], &res.ties)?;
    let after = reprojection_rms([&adjusted[0], &adjusted[1]], fit_set)?;
    let record = AdjustmentRecord {
        cameras: res.adjustments,
        final_cost: res.final_cost,
        iterations: res.iterations,
        hit_iteration_cap: res.hit_iteration_cap,
        n_ties: res.ties.len(),
        reprojection_rms: after,
        prealign,
    };
    write_adjustment(&record, out_adjust)?;
    write_ties(&res.ties, out_ties)?;
    rec.output(out_adjust);
    rec.output(out_ties);
    rec.param("cauchy_c", params.cauchy_scale_c);
    rec.param("max_iter", params.max_iterations);
    rec.param("ground_weight", params.ground_constraint_weight);
    rec.param("position_sigma", params.position_sigma);
    rec.result("n_ties", res.ties.len() as f64);
    rec.result("n_inliers", inliers.len() as f64);
    rec.result("initial_cost", res.initial_cost);
    rec.result("final_cost", res.final_cost);
    rec.result("iterations", res.iterations as f64);
    rec.result("hit_iteration_cap", if res.hit_iteration_cap { 1.0 } else { 0.0 });
    rec.result("reprojection_rms_before_px", before);
    rec.result("reprojection_rms_after_px", after_all);
    rec.result("reprojection_rms_after_inliers_px", after);
    Ok(record)
}

/// Tie detection followed by bundle adjustment.
pub fn adjust(
    images: [&Path; 2],
    metas: [&Path; 2],
    ties: &TieParams,
    params: &RobustLossParams,
    out_adjust: &Path,
    out_ties: &Path,
    root: &Path,
) -> Result<StageRecord> {
    let mut rec = Recorder::new("adjust", root);
    for p in images.iter().chain(metas.iter()) {
        rec.input(p)?;
    }
    let (m1, m2) = (parse_meta(metas[0])?, parse_meta(metas[1])?);
    let [c1, c2] = cameras(&m1, &m2)?;
    let (i1, i2) = (read_image(images[0])?, read_image(images[1])?);
    let tp = TieParams { ground_height: seed_height(&m1, &m2), ..*ties };
    let found = detect_tie_points(&i1, &i2, [&c1, &c2], &tp)?;
    rec.param("max_points", tp.max_points);
    rec.param("tie_window_radius", tp.window_radius);
    rec.param("tie_search_radius", tp.search_radius);
    rec.param("tie_min_ncc", tp.min_ncc);
    rec.param("seed_height", tp.ground_height);
    solve_bundle([&c1, &c2], &found, params, out_adjust, out_ties, &mut rec)?;
    rec.finish()
}

pub fn densematch(
    images: [&Path; 2],
    adjust: &Path,
    params: &MatchParams,
    out: &Path,
    root: &Path,
) -> Result<StageRecord> {
    let mut rec = Recorder::new("densematch", root);
    rec.input(images[0])?;
    rec.input(images[1])?;
    rec.input(adjust)?;
    let prealign = read_adjustment(adjust)?.prealign;
    let (i1, i2) = (read_image(images[0])?, read_image(images[1])?);
    let map = match_dense(&i1, &i2, params, &prealign)?;
    write_disparity(&map, out)?;
    rec.output(out);
    rec.param("window_radius", params.window_radius);
    rec.param("search_x", format!("{} {}", params.search_x.0, params.search_x.1));
    rec.param("search_y", format!("{} {}", params.search_y.0, params.search_y.1));
    rec.param("min_ncc", params.min_ncc);
    rec.param("lr_tolerance", params.lr_tolerance.map_or("none".into(), |v| v.to_string()));
    rec.result("valid_fraction", map.valid_fraction());
    rec.finish()
}

pub fn triangulate(
    disparity: &Path,
    metas: [&Path; 2],
    adjust: &Path,
    max_miss: f64,
    out: &Path,
    root: &Path,
) -> Result<StageRecord> {
    let mut rec = Recorder::new("triangulate", root);
    for p in [disparity, metas[0], metas[1], adjust] {
        rec.input(p)?;
    }
    let [c1, c2] = adjusted_cameras(metas[0], metas[1], adjust)?;
    let map = read_disparity(disparity)?;
    let cloud = cloud_from_disparity(&map, &c1, &c2, max_miss);
    if cloud.is_empty() {
        return Err(Error::EmptyInput("no disparities triangulated within the miss-distance limit".into()));
    }
    write_cloud(&cloud, out)?;
    rec.output(out);
    rec.param("max_miss", max_miss);
    rec.result("n_points", cloud.len() as f64);
    if let Ok((mean, sd)) = triangulation_error_stats(&cloud) {
        rec.result("miss_mean_m", mean);
        rec.result("miss_sd_m", sd);
    }
    rec.finish()
}

/// DEM lattice over the bounding box of the two footprints' intersection.
pub fn dem_lattice(meta1: &AcquisitionMeta, meta2: &AcquisitionMeta, cell_size: f64) -> Result<Lattice> {
    let inter = footprint_intersection(&meta1.footprint, &meta2.footprint)?;
    if inter.len() < 3 {
        return Err(Error::InsufficientOverlap("footprints do not intersect".into()));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &inter {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Lattice::covering(x0, y0, x1, y1, cell_size)
}

pub fn lattice_param(l: &Lattice) -> String {
    format!("{} {} {} {} {}", l.n_cols, l.n_rows, l.origin_x, l.origin_y, l.cell_size)
}

pub fn grid(cloud: &Path, lattice: Lattice, params: &GriddingParams, out: &Path, root: &Path) -> Result<StageRecord> {
    let mut rec = Recorder::new("grid", root);
    rec.input(cloud)?;
    let pts = read_cloud(cloud)?;
    let dem = grid_dem(&pts, params, lattice)?;
    write_dem(&dem, out)?;
    rec.output(out);
    rec.param("lattice", lattice_param(&lattice));
    rec.param("search_radius", params.search_radius);
    rec.param("idw_power", params.idw_power);
    rec.param("min_samples", params.min_samples);
    rec.result("valid_fraction", dem.valid_fraction());
    rec.result("void_fraction", dem.void_fraction());
    rec.finish()
}

/// Grids at the configured radius, then interpolates the cells left void
/// using points within `fill_radius`.
pub fn grid_with_fill(
    cloud: &Path,
    lattice: Lattice,
    params: &GriddingParams,
    fill_radius: f64,
    out: &Path,
    root: &Path,
) -> Result<StageRecord> {
    let mut rec = Recorder::new("grid", root);
    rec.input(cloud)?;
    let pts = read_cloud(cloud)?;
    let mut dem = grid_dem(&pts, params, lattice)?;
    let base_valid = dem.valid_fraction();
    if fill_radius > params.search_radius {
        dem = fill_voids(&dem, &pts, params, fill_radius)?;
    }
    write_dem(&dem, out)?;
    rec.output(out);
    rec.param("lattice", lattice_param(&lattice));
    rec.param("search_radius", params.search_radius);
    rec.param("fill_radius", fill_radius);
    rec.param("idw_power", params.idw_power);
    rec.param("min_samples", params.min_samples);
    rec.result("valid_fraction_before_fill", base_valid);
    rec.result("valid_fraction", dem.valid_fraction());
    rec.result("void_fraction", dem.void_fraction());
    rec.finish()
}

pub fn icp(
    cloud: &Path,
    reference: &Path,
    params: &IcpParams,
    out_transform: &Path,
    out_cloud: &Path,
    root: &Path,
) -> Result<StageRecord> {
    let mut rec = Recorder::new("icp", root);
    rec.input(cloud)?;
    rec.input(reference)?;
    let pts = read_cloud(cloud)?;
    let refdem = read_dem(reference)?;
    let res = icp_align(&pts, &refdem, params)?;
    write_transform(&res.transform, out_transform)?;
    write_cloud(&transform_cloud(&pts, &res.transform), out_cloud)?;
    rec.output(out_transform);
    rec.output(out_cloud);
    rec.param("max_iter", params.max_iter);
    rec.param("tol", params.tol);
    rec.result("initial_rms_m", res.rms_trace[0]);
    rec.result("final_rms_m", res.final_rms);
    rec.result("iterations", res.iterations as f64);
    rec.result("converged", if res.converged { 1.0 } else { 0.0 });
    rec.result("rotation_deg", res.transform.rotation_angle().to_degrees());
    let t = res.transform.translation;
    rec.result("translation_x_m", t.x);
    rec.result("translation_y_m", t.y);
    rec.result("translation_z_m", t.z);
    rec.finish()
}

pub fn debias(
    dem: &Path,
    reference: &Path,
    transects: &[(XY, XY)],
    out_bias: &Path,
    out_dem: &Path,
    root: &Path,
) -> Result<StageRecord> {
    let mut rec = Recorder::new("debias", root);
    rec.input(dem)?;
    rec.input(reference)?;
    let d = read_dem(dem)?;
    let r = read_dem(reference)?;
    let corr = estimate_bias(&d, &r, transects)?;
    let fixed = apply_bias(&d, &corr);
    std::fs::write(out_bias, format!("delta_z = {}\nn_samples = {}\n", corr.delta_z, corr.n_samples))
        .map_err(|e| Error::io(out_bias, e))?;
    write_dem(&fixed, out_dem)?;
    rec.output(out_bias);
    rec.output(out_dem);
    rec.param("transects", transects.len());
    rec.result("delta_z_m", corr.delta_z);
    rec.result("n_samples", corr.n_samples as f64);
    rec.finish()
}

pub fn read_bias(path: &Path) -> Result<f64> {
    KeyValues::read(path)?.value("delta_z")
}

pub fn mosaic_stage(dem: &Path, reference: &Path, blend_len: f64, out: &Path, root: &Path) -> Result<StageRecord> {
    let mut rec = Recorder::new("mosaic", root);
    rec.input(dem)?;
    rec.input(reference)?;
    let d = read_dem(dem)?;
    let r = read_dem(reference)?;
    let m = mosaic(&d, &r, blend_len)?;
    write_dem(&m, out)?;
    rec.output(out);
    rec.param("blend_len", blend_len);
    rec.result("valid_fraction", m.valid_fraction());
    rec.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub rmse: f64,
    pub mean_delta: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileReport {
    pub from: XY,
    pub to: XY,
    pub stats: Option<Stats>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub cells: usize,
    pub valid_cells: usize,
    pub valid_fraction: f64,
    pub void_fraction: f64,
    pub dem_vs_reference: Option<Stats>,
    pub dem_vs_truth: Option<Stats>,
    pub mosaic_vs_truth: Option<Stats>,
    pub triangulation_miss_mean_m: Option<f64>,
    pub triangulation_miss_sd_m: Option<f64>,
    pub mean_horizontal_offset_m: Option<f64>,
    pub profiles: Vec<ProfileReport>,
}

fn stats(dem: &DemGrid, reference: &DemGrid) -> Option<Stats> {
    grid_stats(dem, reference).ok().map(|s| Stats { rmse: s.rmse, mean_delta: s.mean_delta, n: s.n })
}

pub struct ValidateInputs<'a> {
    pub dem: &'a Path,
    pub mosaic: Option<&'a Path>,
    pub reference: &'a Path,
    pub truth: Option<&'a Path>,
    pub cloud: Option<&'a Path>,
}

pub fn validate_stage(
    inputs: &ValidateInputs,
    settings: &ValidateSettings,
    out_report: &Path,
    out_hillshade: &Path,
    root: &Path,
) -> Result<(ValidationReport, StageRecord)> {
    let mut rec = Recorder::new("validate", root);
    for p in [Some(inputs.dem), inputs.mosaic, Some(inputs.reference), inputs.truth, inputs.cloud]
        .into_iter()
        .flatten()
    {
        rec.input(p)?;
    }
    let dem = read_dem(inputs.dem)?;
    let reference = read_dem(inputs.reference)?;
    let truth = inputs.truth.map(read_dem).transpose()?;
    let mos = inputs.mosaic.map(read_dem).transpose()?;
    let (miss_mean, miss_sd) = match inputs.cloud.map(read_cloud).transpose()? {
        Some(c) => match triangulation_error_stats(&c) {
            Ok((m, s)) => (Some(m), Some(s)),
            Err(_) => (None, None),
        },
        None => (None, None),
    };
    let offset = if settings.features.is_empty() {
        None
    } else {
        horizontal_offset(&dem, &reference, &settings.features, &settings.offset)
            .ok()
            .map(|r| r.mean_offset)
    };
    let profiles = settings
        .profiles
        .iter()
        .map(|&(a, b)| {
            let st = extract_profile(&dem, a, b, settings.profile_step)
                .and_then(|p1| extract_profile(&reference, a, b, settings.profile_step).map(|p2| (p1, p2)))
                .and_then(|(p1, p2)| profile_rmse(&p1, &p2))
                .ok()
                .map(|s| Stats { rmse: s.rmse, mean_delta: s.mean_delta, n: s.n });
            ProfileReport { from: a, to: b, stats: st }
        })
        .collect();
    let report = ValidationReport {
        cells: dem.lattice.len(),
        valid_cells: dem.valid_count(),
        valid_fraction: dem.valid_fraction(),
        void_fraction: dem.void_fraction(),
        dem_vs_reference: stats(&dem, &reference),
        dem_vs_truth: truth.as_ref().and_then(|t| stats(&dem, t)),
        mosaic_vs_truth: match (&mos, &truth) {
            (Some(m), Some(t)) => stats(m, t),
            _ => None,
        },
        triangulation_miss_mean_m: miss_mean,
        triangulation_miss_sd_m: miss_sd,
        mean_horizontal_offset_m: offset,
        profiles,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    std::fs::write(out_report, text).map_err(|e| Error::io(out_report, e))?;
    let shade_src = mos.as_ref().unwrap_or(&dem);
    write_image(
        &hillshade(shade_src, settings.offset.sun_azimuth_deg, settings.offset.sun_elevation_deg),
        out_hillshade,
    )?;
    rec.output(out_report);
    rec.output(out_hillshade);
    rec.result("valid_fraction", report.valid_fraction);
    rec.result("void_fraction", report.void_fraction);
    if let Some(s) = &report.dem_vs_reference {
        rec.result("rmse_vs_reference_m", s.rmse);
    }
    if let Some(s) = &report.dem_vs_truth {
        rec.result("rmse_vs_truth_m", s.rmse);
        rec.result("mean_vs_truth_m", s.mean_delta);
    }
    if let Some(s) = &report.mosaic_vs_truth {
        rec.result("mosaic_rmse_vs_truth_m", s.rmse);
    }
    Ok((report, rec.finish()?))
}

/// Reads back a transform and tie file pair written by earlier stages.
pub fn read_alignment_inputs(transform: &Path, ties: &Path) -> Result<(stereoforge::geom::RigidTransform, Vec<TiePoint>)> {
    Ok((read_transform(transform)?, read_ties(ties)?))
}
