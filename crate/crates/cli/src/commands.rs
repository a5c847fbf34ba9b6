//! Single-stage invocations. Each reads the artifacts a previous run left in
//! the output directory and rewrites only its own outputs, so a stage can be
//! re-run in isolation and checked against the run manifest.

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::StageRecord;
use crate::stages::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageCommand {
    Pairs,
    Adjust,
    Match,
    Triangulate,
    Grid,
    Icp,
    Debias,
    Mosaic,
    Validate,
}

impl StageCommand {
    pub fn name(self) -> &'static str {
        match self {
            StageCommand::Pairs => "pairsel",
            StageCommand::Adjust => "adjust",
            StageCommand::Match => "densematch",
            StageCommand::Triangulate => "triangulate",
            StageCommand::Grid => "grid",
            StageCommand::Icp => "icp",
            StageCommand::Debias => "debias",
            StageCommand::Mosaic => "mosaic",
            StageCommand::Validate => "validate",
        }
    }
}

fn need(cfg: &PipelineConfig, stage: &str, names: &[&str]) -> CliResult<()> {
    for n in names {
        let p = cfg.out_dir.join(n);
        if !p.exists() {
            return Err(CliError::Dependency {
                stage: stage.into(),
                message: format!("{} not found; run the earlier stages first", p.display()),
            });
        }
    }
    Ok(())
}

pub fn run_stage(cfg: &PipelineConfig, cmd: StageCommand) -> CliResult<StageRecord> {
    cfg.validate()?;
    let name = cmd.name();
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
    let err = CliError::stage(name);
    let p = |n: &str| dir.join(n);

    let metas = ingest(&cfg.scenes, dir).map_err(CliError::stage("ingest"))?.metas;
    let choice = pairsel(&metas, &cfg.pair_thresholds, cfg.pair_override, dir).map_err(CliError::stage("pairsel"))?;
    if cmd == StageCommand::Pairs {
        return Ok(choice.record);
    }
    let (a, b) = (choice.first, choice.second);
    let (left, right) = (&cfg.scenes[a], &cfg.scenes[b]);
    let images = [left.image.as_path(), right.image.as_path()];
    let metas_p = [left.meta.as_path(), right.meta.as_path()];

    match cmd {
        StageCommand::Pairs => unreachable!(),
        StageCommand::Adjust => adjust(images, metas_p, &cfg.ties, &cfg.bundle, &p(ADJUST), &p(TIES), dir).map_err(err),
        StageCommand::Match => {
            need(cfg, name, &[ADJUST])?;
            densematch(images, &p(ADJUST), &cfg.matching, &p(DISPARITY), dir).map_err(err)
        }
        StageCommand::Triangulate => {
            need(cfg, name, &[ADJUST, DISPARITY])?;
            triangulate(&p(DISPARITY), metas_p, &p(ADJUST), cfg.max_miss, &p(CLOUD), dir).map_err(err)
        }
        StageCommand::Grid => {
            need(cfg, name, &[CLOUD])?;
            let lattice = dem_lattice(&metas[a], &metas[b], cfg.gridding.cell_size).map_err(CliError::stage(name))?;
            let mut rec = grid(&p(CLOUD), lattice, &cfg.gridding, &p(DEM_RAW), dir).map_err(CliError::stage(name))?;
            if p(CLOUD_ALIGNED).exists() {
                let r = grid(&p(CLOUD_ALIGNED), lattice, &cfg.gridding, &p(DEM_ALIGNED), dir).map_err(err)?;
                rec.absorb(r);
            }
            Ok(rec)
        }
        StageCommand::Icp => {
            need(cfg, name, &[CLOUD])?;
            icp(&p(CLOUD), &cfg.reference_dtm, &cfg.icp, &p(TRANSFORM), &p(CLOUD_ALIGNED), dir).map_err(err)
        }
        StageCommand::Debias => {
            need(cfg, name, &[DEM_ALIGNED])?;
            debias(&p(DEM_ALIGNED), &cfg.reference_dtm, &cfg.debias_transects, &p(BIAS), &p(DEM), dir).map_err(err)
        }
        StageCommand::Mosaic => {
            need(cfg, name, &[DEM])?;
            mosaic_stage(&p(DEM), &cfg.reference_dtm, cfg.blend_len, &p(MOSAIC), dir).map_err(err)
        }
        StageCommand::Validate => {
            need(cfg, name, &[DEM])?;
            let (mosaic, cloud) = (p(MOSAIC), p(CLOUD_ALIGNED));
            let inputs = ValidateInputs {
                dem: &p(DEM),
                mosaic: mosaic.exists().then_some(mosaic.as_path()),
                reference: &cfg.reference_dtm,
                truth: cfg.truth_dem.as_deref(),
                cloud: cloud.exists().then_some(cloud.as_path()),
            };
            validate_stage(&inputs, &cfg.validate, &p(VALIDATION), &p(HILLSHADE), dir).map(|(_, r)| r).map_err(err)
        }
    }
}
