//! Second pass seeded by the first pass's ICP transform.
//!
//! The adjusted cameras and tie points of the first pass are carried into
//! the reference frame by the ICP transform (a hard re-initialisation), the
//! bundle is re-solved with a tightened position prior, and the pair is
//! re-matched and re-triangulated. Gridding runs on the first pass's DEM
//! lattice, and cells void at the standard search radius are recovered
//! with the expanded radius. Outputs go to `<out_dir>/refine/`.

use std::path::{Path, PathBuf};

use stereoforge::adjust::{read_adjustment, read_ties, RobustLossParams, TiePoint};
use stereoforge::align::read_transform;
use stereoforge::geom::PushbroomCamera;
use stereoforge::ingest::{parse_meta, read_dem, write_meta, AcquisitionMeta};
use stereoforge::validate::grid_stats;
use stereoforge::Result;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{Manifest, Recorder, MANIFEST_FILE};
use crate::stages::*;
use crate::{merged, Runner};

pub const REFINE_DIR: &str = "refine";
pub const STAGE: &str = "refine";

fn dependency(message: impl Into<String>) -> CliError {
    CliError::Dependency { stage: STAGE.into(), message: message.into() }
}

/// Sidecar for `cam`, keeping everything but the states and footprint of
/// `meta`.
fn meta_for(meta: &AcquisitionMeta, cam: &PushbroomCamera, footprint: [stereoforge::geom::Vec3; 4]) -> AcquisitionMeta {
    AcquisitionMeta { ephemeris: cam.ephemeris().to_vec(), footprint, ..meta.clone() }
}

/// Refine pass over a completed first run found in `cfg.out_dir`.
pub fn run_refine(cfg: &PipelineConfig) -> CliResult<Manifest> {
    cfg.validate()?;
    let path = cfg.out_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(dependency(format!("{} not found; run the pipeline first", path.display())));
    }
    let manifest = Manifest::read(&path).map_err(|e| dependency(e.to_string()))?;
    let mut run = Runner { dir: &cfg.out_dir, manifest };
    run.manifest.stages.retain(|s| s.stage != STAGE);
    run.manifest.failed_stage = None;
    run_refine_pass(cfg, &mut run)?;
    Ok(run.manifest)
}

pub(crate) fn run_refine_pass(cfg: &PipelineConfig, run: &mut Runner) -> CliResult<()> {
    let dir = run.dir.to_path_buf();
    let m = &run.manifest;
    if m.stage("align").is_none() || m.failed_stage.as_deref().is_some_and(|s| s != STAGE) {
        return Err(dependency("first run did not complete through align"));
    }
    let pair = m.stage("pairsel").ok_or_else(|| dependency("manifest has no pairsel stage"))?;
    let index = |k: &str| -> CliResult<usize> {
        let v = *pair.results.get(k).ok_or_else(|| dependency(format!("pairsel result `{k}` missing")))?;
        cfg.scenes.get(v as usize).map(|_| v as usize).ok_or_else(|| dependency("pair index outside the scene list"))
    };
    let (a, b) = (index("first")?, index("second")?);
    for name in [ADJUST, TIES, TRANSFORM, DEM] {
        if !dir.join(name).exists() {
            return Err(dependency(format!("{} missing from the first run", dir.join(name).display())));
        }
    }
    let out = dir.join(REFINE_DIR);
    std::fs::create_dir_all(&out).map_err(|e| dependency(format!("{}: {e}", out.display())))?;
    let (left, right) = (&cfg.scenes[a], &cfg.scenes[b]);
    let before = run.step(STAGE, || refine(cfg, &dir, &out, [&left.image, &right.image], [&left.meta, &right.meta]))?;
    let s = &mut run.manifest.summary;
    s.insert("refine.void_fraction_before".into(), before.void_before);
    s.insert("refine.void_fraction_after".into(), before.void_after);
    if let (Some(x), Some(y)) = (before.truth_rmse_before, before.truth_rmse_after) {
        s.insert("refine.rmse_vs_truth_before_m".into(), x);
        s.insert("refine.rmse_vs_truth_after_m".into(), y);
    }
    run.manifest.write(&dir).map_err(CliError::stage(STAGE))?;
    Ok(())
}

struct Comparison {
    void_before: f64,
    void_after: f64,
    truth_rmse_before: Option<f64>,
    truth_rmse_after: Option<f64>,
}

fn refine(
    cfg: &PipelineConfig,
    first: &Path,
    out: &Path,
    images: [&PathBuf; 2],
    metas: [&PathBuf; 2],
) -> Result<(Comparison, crate::manifest::StageRecord)> {
    let p = |name: &str| out.join(name);
    let f = |name: &str| first.join(name);

    let mut init = Recorder::new("init", first);
    for path in [f(ADJUST), f(TIES), f(TRANSFORM), metas[0].clone(), metas[1].clone()] {
        init.input(&path)?;
    }
    let t = read_transform(f(TRANSFORM))?;
    let adj = read_adjustment(f(ADJUST))?;
    let base = [parse_meta(metas[0])?, parse_meta(metas[1])?];
    let mut cams = Vec::new();
    let meta_paths = [p("left.meta"), p("right.meta")];
    for k in 0..2 {
        let cam = adj.cameras[k].apply(&base[k].camera()?).transformed(&t);
        let footprint = base[k].footprint.map(|c| t.apply(&c));
        write_meta(&meta_for(&base[k], &cam, footprint), &meta_paths[k])?;
        init.output(&meta_paths[k]);
        cams.push(cam);
    }
    let ties: Vec<TiePoint> =
        read_ties(f(TIES))?.into_iter().map(|tp| TiePoint { world: t.apply(&tp.world), ..tp }).collect();
    let params = RobustLossParams {
        position_sigma: cfg.bundle.position_sigma * cfg.prior_tightening,
        ..cfg.bundle
    };
    init.param("initialisation", "icp transform applied to adjusted cameras and tie points");
    init.param("prior_tightening", cfg.prior_tightening);
    solve_bundle([&cams[0], &cams[1]], &ties, &params, &p(ADJUST), &p(TIES), &mut init)?;
    let init = init.finish()?;

    let images = [images[0].as_path(), images[1].as_path()];
    let mp = [meta_paths[0].as_path(), meta_paths[1].as_path()];
    let m = densematch(images, &p(ADJUST), &cfg.matching, &p(DISPARITY), first)?;
    let tr = triangulate(&p(DISPARITY), mp, &p(ADJUST), cfg.max_miss, &p(CLOUD), first)?;
    let first_dem = read_dem(f(DEM))?;
    let (lattice, fill) = (first_dem.lattice, cfg.expanded_search_radius);
    let g = grid_with_fill(&p(CLOUD), lattice, &cfg.gridding, fill, &p(DEM_RAW), first)?;
    let i = icp(&p(CLOUD), &cfg.reference_dtm, &cfg.icp, &p(TRANSFORM), &p(CLOUD_ALIGNED), first)?;
    let g2 = grid_with_fill(&p(CLOUD_ALIGNED), lattice, &cfg.gridding, fill, &p(DEM_ALIGNED), first)?;
    let d = debias(&p(DEM_ALIGNED), &cfg.reference_dtm, &cfg.debias_transects, &p(BIAS), &p(DEM), first)?;
    let mo = mosaic_stage(&p(DEM), &cfg.reference_dtm, cfg.blend_len, &p(MOSAIC), first)?;
    let inputs = ValidateInputs {
        dem: &p(DEM),
        mosaic: Some(&p(MOSAIC)),
        reference: &cfg.reference_dtm,
        truth: cfg.truth_dem.as_deref(),
        cloud: Some(&p(CLOUD_ALIGNED)),
    };
    let (report, v) = validate_stage(&inputs, &cfg.validate, &p(VALIDATION), &p(HILLSHADE), first)?;

    let truth = cfg.truth_dem.as_deref().map(read_dem).transpose()?;
    let truth_rmse_before = match &truth {
        Some(t) => Some(grid_stats(&first_dem, t)?.rmse),
        None => None,
    };
    let cmp = Comparison {
        void_before: first_dem.void_fraction(),
        void_after: report.void_fraction,
        truth_rmse_before,
        truth_rmse_after: report.dem_vs_truth.as_ref().map(|s| s.rmse),
    };
    let mut rec = merged(STAGE, vec![init, m, tr, g, i, g2, d, mo, v]);
    rec.parameters.insert("expanded_search_radius".into(), cfg.expanded_search_radius.to_string());
    rec.results.insert("void_fraction_before".into(), cmp.void_before);
    rec.results.insert("void_fraction_after".into(), cmp.void_after);
    if let (Some(x), Some(y)) = (cmp.truth_rmse_before, cmp.truth_rmse_after) {
        rec.results.insert("rmse_vs_truth_before_m".into(), x);
        rec.results.insert("rmse_vs_truth_after_m".into(), y);
    }
    Ok((cmp, rec))
}
