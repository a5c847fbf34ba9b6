//! Stage orchestration for the `stereoforge` command-line tool.
//!
//! A run takes a set of scenes through pair selection, bundle adjustment,
//! dense matching, reconstruction, alignment, mosaicking and validation,
//! writing every intermediate artifact and a `manifest.json` to the output
//! directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod refine;
pub mod stages;
pub mod synthetic;

use std::path::Path;

use stereoforge::Result;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{Manifest, StageRecord};
use crate::stages::*;

/// Runs stages in order, appending each record to the manifest and
/// rewriting it after every stage so a failed run keeps its history.
pub(crate) struct Runner<'a> {
    pub dir: &'a Path,
    pub manifest: Manifest,
}

impl Runner<'_> {
    pub fn step<T>(&mut self, name: &str, f: impl FnOnce() -> Result<(T, StageRecord)>) -> CliResult<T> {
        log::info!("stage {name}");
        match f() {
            Ok((value, record)) => {
                log::info!("stage {name} done in {:.2} s", record.wall_time_s);
                self.manifest.stages.push(record);
                self.manifest.write(self.dir).map_err(CliError::stage(name))?;
                Ok(value)
            }
            Err(e) => {
                log::error!("stage {name} failed: {e}");
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.write(self.dir).map_err(CliError::stage(name))?;
                Err(CliError::Stage { stage: name.to_string(), source: e })
            }
        }
    }
}

fn merged(name: &str, parts: Vec<StageRecord>) -> StageRecord {
    let mut rec = StageRecord {
        stage: name.to_string(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        parameters: Default::default(),
        results: Default::default(),
        wall_time_s: 0.0,
    };
    for p in parts {
        rec.absorb(p);
    }
    rec
}

/// Full pipeline over the configured scenes. Writes `manifest.json` to the
/// output directory whether or not the run succeeds.
pub fn run_pipeline(cfg: &PipelineConfig) -> CliResult<Manifest> {
    cfg.validate()?;
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
    let mut run = Runner { dir, manifest: Manifest::new(cfg.seed, cfg.to_text()) };
    let p = |name: &str| dir.join(name);

    let metas = run.step("ingest", || {
        let out = ingest(&cfg.scenes, dir)?;
        Ok((out.metas, out.record))
    })?;

    let (a, b) = run.step("pairsel", || {
        let c = pairsel(&metas, &cfg.pair_thresholds, cfg.pair_override, dir)?;
        Ok(((c.first, c.second), c.record))
    })?;
    let (left, right) = (&cfg.scenes[a], &cfg.scenes[b]);
    let images = [left.image.as_path(), right.image.as_path()];
    let meta_paths = [left.meta.as_path(), right.meta.as_path()];

    run.step("adjust", || {
        let rec = adjust(images, meta_paths, &cfg.ties, &cfg.bundle, &p(ADJUST), &p(TIES), dir)?;
        Ok(((), rec))
    })?;

    run.step("densematch", || {
        Ok(((), densematch(images, &p(ADJUST), &cfg.matching, &p(DISPARITY), dir)?))
    })?;

    let lattice = run.step("recon", || {
        let lattice = dem_lattice(&metas[a], &metas[b], cfg.gridding.cell_size)?;
        let t = triangulate(&p(DISPARITY), meta_paths, &p(ADJUST), cfg.max_miss, &p(CLOUD), dir)?;
        let g = grid(&p(CLOUD), lattice, &cfg.gridding, &p(DEM_RAW), dir)?;
        Ok((lattice, merged("recon", vec![t, g])))
    })?;

    run.step("align", || {
        let i = icp(&p(CLOUD), &cfg.reference_dtm, &cfg.icp, &p(TRANSFORM), &p(CLOUD_ALIGNED), dir)?;
        let g = grid(&p(CLOUD_ALIGNED), lattice, &cfg.gridding, &p(DEM_ALIGNED), dir)?;
        let d = debias(&p(DEM_ALIGNED), &cfg.reference_dtm, &cfg.debias_transects, &p(BIAS), &p(DEM), dir)?;
        Ok(((), merged("align", vec![i, g, d])))
    })?;

    run.step("mosaic", || {
        Ok(((), mosaic_stage(&p(DEM), &cfg.reference_dtm, cfg.blend_len, &p(MOSAIC), dir)?))
    })?;

    let report = run.step("validate", || {
        let inputs = ValidateInputs {
            dem: &p(DEM),
            mosaic: Some(&p(MOSAIC)),
            reference: &cfg.reference_dtm,
            truth: cfg.truth_dem.as_deref(),
            cloud: Some(&p(CLOUD_ALIGNED)),
        };
        validate_stage(&inputs, &cfg.validate, &p(VALIDATION), &p(HILLSHADE), dir)
    })?;

    let summary = &mut run.manifest.summary;
    summary.insert("valid_fraction".into(), report.valid_fraction);
    summary.insert("void_fraction".into(), report.void_fraction);
    if let Some(s) = &report.dem_vs_reference {
        summary.insert("rmse_vs_reference_m".into(), s.rmse);
    }
    if let Some(s) = &report.dem_vs_truth {
        summary.insert("rmse_vs_truth_m".into(), s.rmse);
    }
    if let Some(v) = report.mean_horizontal_offset_m {
        summary.insert("mean_horizontal_offset_m".into(), v);
    }
    run.manifest.write(dir).map_err(CliError::stage("validate"))?;

    if cfg.refine_pass {
        refine::run_refine_pass(cfg, &mut run)?;
    }
    Ok(run.manifest)
}
