use std::path::Path;
use std::process::Command;

use stereoforge::ingest::read_dem;
use stereoforge::synth::SceneSpec;
use stereoforge_cli::commands::{run_stage, StageCommand};
use stereoforge_cli::config::PipelineConfig;
use stereoforge_cli::error::{CliError, EXIT_CONFIG, EXIT_INSUFFICIENT_DATA, EXIT_STAGE};
use stereoforge_cli::manifest::{sha256_file, Manifest};
use stereoforge_cli::refine::run_refine;
use stereoforge_cli::stages::*;
use stereoforge_cli::synthetic::{write_synthetic, SynthOptions};
use stereoforge_cli::run_pipeline;

fn small(bh: f64) -> SynthOptions {
    SynthOptions { bh, size: 256, ..SynthOptions::default() }
}

fn scene(dir: &Path, opts: &SynthOptions) -> PipelineConfig {
    PipelineConfig::read(write_synthetic(opts, dir).unwrap()).unwrap()
}

fn output_hash(m: &Manifest, stage: &str, file: &str) -> String {
    m.stage(stage).unwrap().outputs.iter().find(|f| f.path.ends_with(file)).unwrap().sha256.clone()
}

#[test]
fn full_run_supports_isolated_reruns_and_refine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scene(tmp.path(), &small(0.5));
    let m = run_pipeline(&cfg).unwrap();
    assert_eq!(
        m.stage_names(),
        ["ingest", "pairsel", "adjust", "densematch", "recon", "align", "mosaic", "validate"]
    );
    assert!(m.failed_stage.is_none());
    assert!(m.stage("refine").is_none());

    // reported void fraction is the nodata count of the written DEM
    let dem = read_dem(cfg.out_dir.join(DEM)).unwrap();
    let nodata = dem.values.iter().filter(|v| **v == dem.nodata).count();
    assert_eq!(m.summary["void_fraction"], nodata as f64 / dem.values.len() as f64);
    assert!(m.summary["rmse_vs_truth_m"] < 0.6);

    // each stage re-run on its own reproduces the recorded outputs
    for (cmd, stage, file) in [
        (StageCommand::Adjust, "adjust", ADJUST),
        (StageCommand::Match, "densematch", DISPARITY),
        (StageCommand::Triangulate, "recon", CLOUD),
        (StageCommand::Icp, "align", TRANSFORM),
        (StageCommand::Debias, "align", DEM),
        (StageCommand::Mosaic, "mosaic", MOSAIC),
    ] {
        let rec = run_stage(&cfg, cmd).unwrap();
        let fresh = &rec.outputs.iter().find(|f| f.path.ends_with(file)).unwrap().sha256;
        assert_eq!(fresh, &output_hash(&m, stage, file), "{stage}/{file}");
        assert_eq!(&sha256_file(&cfg.out_dir.join(file)).unwrap(), fresh);
    }
    let rec = run_stage(&cfg, StageCommand::Grid).unwrap();
    assert!(rec.outputs.iter().any(|f| f.path == DEM_RAW && f.sha256 == output_hash(&m, "recon", DEM_RAW)));
    assert!(rec.outputs.iter().any(|f| f.path == DEM_ALIGNED && f.sha256 == output_hash(&m, "align", DEM_ALIGNED)));

    // an unbiased run is already converged: the second pass must not degrade it
    let refined = run_refine(&cfg).unwrap();
    let s = &refined.summary;
    assert!(refined.stage("refine").is_some());
    assert!(s["refine.void_fraction_after"] <= s["refine.void_fraction_before"]);
    let (before, after) = (s["refine.rmse_vs_truth_before_m"], s["refine.rmse_vs_truth_after_m"]);
    assert!((after - before).abs() < 0.05 * before, "{before} -> {after}");
    assert!(cfg.out_dir.join("refine").join(DEM).exists());
    assert_eq!(Manifest::read(&cfg.out_dir.join("manifest.json")).unwrap(), refined);
}

#[test]
fn pair_outside_thresholds_stops_at_pairsel() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scene(tmp.path(), &SynthOptions { size: 64, ..small(1.16) });
    let err = run_pipeline(&cfg).unwrap_err();
    match &err {
        CliError::Stage { stage, source } => {
            assert_eq!(stage, "pairsel");
            let msg = source.to_string();
            assert!(msg.contains("bh_max"), "{msg}");
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(err.exit_code(), EXIT_STAGE);
    let m = Manifest::read(&cfg.out_dir.join("manifest.json")).unwrap();
    assert_eq!(m.failed_stage.as_deref(), Some("pairsel"));
    assert_eq!(m.stage_names(), ["ingest"]);
    assert!(cfg.out_dir.join(PAIRS).exists());

    let mut cfg = cfg;
    cfg.pair_override = true;
    let rec = run_stage(&cfg, StageCommand::Pairs).unwrap();
    assert_eq!(rec.results["thresholds_overridden"], 1.0);
    assert!((rec.results["bh_ratio"] - 1.16).abs() < 1e-6);
}

#[test]
fn refine_needs_a_completed_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scene(tmp.path(), &SynthOptions { size: 64, ..small(0.5) });
    let err = run_refine(&cfg).unwrap_err();
    assert!(matches!(err, CliError::Dependency { .. }), "{err}");
    assert_eq!(err.exit_code(), EXIT_STAGE);
    let err = run_stage(&cfg, StageCommand::Mosaic).unwrap_err();
    assert!(matches!(err, CliError::Dependency { .. }), "{err}");
}

fn exe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stereoforge"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let st = exe().args(["run"]).status().unwrap();
    assert_eq!(st.code(), Some(EXIT_CONFIG));

    let bad = dir.join("bad.cfg");
    std::fs::write(&bad, "[inputs]\nscene = a.pgm a.meta\nscene = b.pgm b.meta\nreference_dtm = r.asc\n[match]\nwindw_radius = 3\n").unwrap();
    let st = exe().args(["run", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(EXIT_CONFIG));

    // featureless terrain: no tie points survive
    let flat = SceneSpec { albedo_amplitude: 0.0, ..SceneSpec::default() };
    let out = dir.join("flat");
    let st = exe()
        .args(["synth", "--size", "96", "--out-dir"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    std::fs::write(out.join("scene.spec"), stereoforge::synth::format_scene_spec(&flat)).unwrap();
    let st = exe()
        .args(["synth", "--size", "96", "--spec"])
        .arg(out.join("scene.spec"))
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let o = exe().args(["run", "--config"]).arg(out.join("pipeline.cfg")).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_INSUFFICIENT_DATA), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::read(&out.join("run/manifest.json")).unwrap();
    assert_eq!(m.failed_stage.as_deref(), Some("adjust"));

    let st = exe().args(["synth", "--bh", "0.5", "--left-bias", "1 2 3"]).arg("--out-dir").arg(dir.join("b")).status().unwrap();
    assert_eq!(st.code(), Some(EXIT_CONFIG));
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = SynthOptions { size: 64, ..small(0.5) };
    write_synthetic(&opts, &tmp.path().join("a")).unwrap();
    write_synthetic(&opts, &tmp.path().join("b")).unwrap();
    for f in ["left.pgm", "right.pgm", "left.meta", "right.meta", "truth.asc", "reference.asc", "scene.spec", "pipeline.cfg"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
