//! Synthetic scene generation for the `synth` subcommand: a rendered stereo
//! pair, truth and reference terrain, and a ready-to-run pipeline config.

use std::path::{Path, PathBuf};

use stereoforge::adjust::CameraAdjustment;
use stereoforge::geom::Vec3;
use stereoforge::ingest::{write_dem, write_image, write_meta};
use stereoforge::synth::{make_stereo_fixture, perturb_meta, reference_dtm, write_scene_spec, SceneSpec};

use crate::config::{PipelineConfig, SceneInput};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "pipeline.cfg";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub spec: SceneSpec,
    pub bh: f64,
    pub gsd: f64,
    /// metres above the scene base
    pub altitude: f64,
    pub size: usize,
    pub reference_cell: f64,
    /// navigation error written into each sidecar
    pub left_bias: CameraAdjustment,
    pub right_bias: CameraAdjustment,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            spec: SceneSpec::cratered(1, 40),
            bh: 0.5,
            gsd: 0.3,
            altitude: 100_000.0,
            size: 512,
            reference_cell: 2.0,
            left_bias: CameraAdjustment::default(),
            right_bias: CameraAdjustment::default(),
        }
    }
}

/// Parses `"rx ry rz tx ty tz"`: rotation in degrees, then offset in metres.
pub fn parse_bias(text: &str) -> CliResult<CameraAdjustment> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("bias `{text}`: {e}")))?;
    if v.len() != 6 || v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Config(format!("bias `{text}` needs 6 finite numbers: rx ry rz (deg) tx ty tz (m)")));
    }
    Ok(CameraAdjustment {
        rotation_delta: Vec3::new(v[0], v[1], v[2]).map(f64::to_radians),
        position_delta: Vec3::new(v[3], v[4], v[5]),
    })
}

/// Writes `left.pgm/.meta`, `right.pgm/.meta`, `truth.asc`, `reference.asc`,
/// `scene.spec` and `pipeline.cfg` (which runs into `dir/run`) and returns
/// the config path.
pub fn write_synthetic(opts: &SynthOptions, dir: &Path) -> CliResult<PathBuf> {
    let stage = CliError::stage;
    std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
    let fx = make_stereo_fixture(&opts.spec, opts.bh, opts.gsd, opts.altitude, opts.size).map_err(stage("synth"))?;
    let reference = reference_dtm(&fx.truth, opts.reference_cell).map_err(stage("synth"))?;
    let meta1 = perturb_meta(&fx.meta1, &opts.left_bias).map_err(stage("synth"))?;
    let meta2 = perturb_meta(&fx.meta2, &opts.right_bias).map_err(stage("synth"))?;
    let p = |n: &str| dir.join(n);
    (|| {
        write_image(&fx.img1, p("left.pgm"))?;
        write_image(&fx.img2, p("right.pgm"))?;
        write_meta(&meta1, p("left.meta"))?;
        write_meta(&meta2, p("right.meta"))?;
        write_dem(&fx.truth, p("truth.asc"))?;
        write_dem(&reference, p("reference.asc"))?;
        write_scene_spec(&opts.spec, p("scene.spec"))
    })()
    .map_err(stage("synth"))?;

    let cfg = PipelineConfig {
        scenes: vec![
            SceneInput { image: "left.pgm".into(), meta: "left.meta".into() },
            SceneInput { image: "right.pgm".into(), meta: "right.meta".into() },
        ],
        reference_dtm: "reference.asc".into(),
        truth_dem: Some("truth.asc".into()),
        out_dir: "run".into(),
        ..PipelineConfig::default()
    };
    let path = p(CONFIG_FILE);
    std::fs::write(&path, cfg.to_text()).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(path)
}
