use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stereoforge::synth::{read_scene_spec, SceneSpec};
use stereoforge_cli::commands::{run_stage, StageCommand};
use stereoforge_cli::config::PipelineConfig;
use stereoforge_cli::error::{CliError, CliResult};
use stereoforge_cli::refine::run_refine;
use stereoforge_cli::synthetic::{parse_bias, write_synthetic, SynthOptions};
use stereoforge_cli::run_pipeline;

#[derive(Parser)]
#[command(name = "stereoforge", version, about = "Pushbroom stereo DEM pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// pipeline configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides run.out_dir
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// overrides run.seed; for `synth`, seeds the crater field and texture
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stereo pair with truth and reference terrain
    Synth(SynthArgs),
    /// Rank scene pairs and select the stereo pair
    Pairs,
    /// Detect tie points and bundle-adjust the selected pair
    Adjust,
    /// Dense NCC matching of the selected pair
    Match,
    /// Triangulate the disparity map into a point cloud
    Triangulate,
    /// Grid the point cloud(s) into DEMs
    Grid,
    /// Align the point cloud to the reference DTM
    Icp,
    /// Remove the residual vertical bias of the aligned DEM
    Debias,
    /// Fill and feather the DEM with the reference DTM
    Mosaic,
    /// Accuracy and completeness report
    Validate,
    /// Full pipeline
    Run,
    /// ICP-informed second pass over a completed run
    Refine,
}

#[derive(Args)]
struct SynthArgs {
    /// scene spec file (default: a seeded cratered scene)
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    bh: f64,
    /// metres per pixel
    #[arg(long, default_value_t = 0.3)]
    gsd: f64,
    /// kilometres above the scene
    #[arg(long, default_value_t = 100.0)]
    altitude: f64,
    /// image width and height, pixels
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// reference DTM cell size, metres
    #[arg(long, default_value_t = 2.0)]
    reference_cell: f64,
    /// navigation error of the left sidecar: "rx ry rz tx ty tz" (deg, m)
    #[arg(long, allow_hyphen_values = true)]
    left_bias: Option<String>,
    /// navigation error of the right sidecar
    #[arg(long, allow_hyphen_values = true)]
    right_bias: Option<String>,
}

fn load_config(g: &Global) -> CliResult<PipelineConfig> {
    let path = g.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::read(path)?;
    if let Some(d) = &g.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(t) = g.threads {
        cfg.threads = Some(t);
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn init_threads(n: Option<usize>) -> CliResult<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn synth(g: &Global, a: &SynthArgs) -> CliResult<()> {
    init_threads(g.threads)?;
    let spec = match &a.spec {
        Some(p) => read_scene_spec(p).map_err(CliError::config)?,
        None => SceneSpec::cratered(g.seed.unwrap_or(1), 40),
    };
    let bias = |s: &Option<String>| s.as_deref().map(parse_bias).transpose().map(Option::unwrap_or_default);
    let opts = SynthOptions {
        spec,
        bh: a.bh,
        gsd: a.gsd,
        altitude: a.altitude * 1000.0,
        size: a.size,
        reference_cell: a.reference_cell,
        left_bias: bias(&a.left_bias)?,
        right_bias: bias(&a.right_bias)?,
    };
    let dir = g.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let cfg = write_synthetic(&opts, &dir)?;
    println!("{}", cfg.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let stage = match &cli.command {
        Command::Synth(a) => return synth(g, a),
        Command::Pairs => StageCommand::Pairs,
        Command::Adjust => StageCommand::Adjust,
        Command::Match => StageCommand::Match,
        Command::Triangulate => StageCommand::Triangulate,
        Command::Grid => StageCommand::Grid,
        Command::Icp => StageCommand::Icp,
        Command::Debias => StageCommand::Debias,
        Command::Mosaic => StageCommand::Mosaic,
        Command::Validate => StageCommand::Validate,
        Command::Run | Command::Refine => {
            let cfg = load_config(g)?;
            init_threads(cfg.threads)?;
            let manifest = if matches!(cli.command, Command::Run) { run_pipeline(&cfg)? } else { run_refine(&cfg)? };
            println!("{}", serde_json::to_string_pretty(&manifest.summary).expect("summary serialises"));
            return Ok(());
        }
    };
    let cfg = load_config(g)?;
    init_threads(cfg.threads)?;
    let rec = run_stage(&cfg, stage)?;
    println!("{}", serde_json::to_string_pretty(&rec).expect("record serialises"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
