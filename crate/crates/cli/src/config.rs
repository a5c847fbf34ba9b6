//! Pipeline configuration: `[section]` / `key = value` text.
//!
//! Relative paths are resolved against the directory of the config file.
//! Unknown keys are rejected so that typos do not silently fall back to
//! defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stereoforge::adjust::{RobustLossParams, TieParams};
use stereoforge::align::IcpParams;
use stereoforge::densematch::{Crop, MatchParams};
use stereoforge::kv::KeyValues;
use stereoforge::mosaic::DEFAULT_BLEND_LEN;
use stereoforge::pairsel::PairThresholds;
use stereoforge::recon::{GriddingParams, DEFAULT_MAX_MISS};
use stereoforge::validate::{OffsetParams, XY};

use crate::error::{CliError, CliResult};

pub const DEFAULT_CELL_SIZE: f64 = 1.0;
pub const DEFAULT_EXPANDED_SEARCH_RADIUS: f64 = 4.0;
pub const DEFAULT_PRIOR_TIGHTENING: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub image: PathBuf,
    pub meta: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidateSettings {
    /// planimetric check points (x, y), metres
    pub features: Vec<XY>,
    pub offset: OffsetParams,
    pub profiles: Vec<(XY, XY)>,
    pub profile_step: f64,
}

impl Default for ValidateSettings {
    fn default() -> Self {
        Self { features: Vec::new(), offset: OffsetParams::default(), profiles: Vec::new(), profile_step: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub scenes: Vec<SceneInput>,
    pub reference_dtm: PathBuf,
    pub truth_dem: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub seed: u64,
    pub pair_thresholds: PairThresholds,
    /// process the best pair even when it violates the thresholds
    pub pair_override: bool,
    pub ties: TieParams,
    pub bundle: RobustLossParams,
    pub matching: MatchParams,
    pub max_miss: f64,
    pub gridding: GriddingParams,
    pub icp: IcpParams,
    pub debias_transects: Vec<(XY, XY)>,
    pub blend_len: f64,
    pub validate: ValidateSettings,
    pub refine_pass: bool,
    /// gridding search radius of the refine pass, metres
    pub expanded_search_radius: f64,
    /// factor applied to the position prior sigma in the refine pass
    pub prior_tightening: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenes: Vec::new(),
            reference_dtm: PathBuf::new(),
            truth_dem: None,
            out_dir: PathBuf::from("out"),
            threads: None,
            seed: 0,
            pair_thresholds: PairThresholds::default(),
            pair_override: false,
            ties: TieParams::default(),
            bundle: RobustLossParams::default(),
            matching: MatchParams::default(),
            max_miss: DEFAULT_MAX_MISS,
            gridding: GriddingParams::with_cell_size(DEFAULT_CELL_SIZE),
            icp: IcpParams::default(),
            debias_transects: Vec::new(),
            blend_len: DEFAULT_BLEND_LEN,
            validate: ValidateSettings::default(),
            refine_pass: false,
            expanded_search_radius: DEFAULT_EXPANDED_SEARCH_RADIUS,
            prior_tightening: DEFAULT_PRIOR_TIGHTENING,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "inputs.scene",
    "inputs.reference_dtm",
    "inputs.truth_dem",
    "run.out_dir",
    "run.threads",
    "run.seed",
    "pairsel.bh_min",
    "pairsel.bh_max",
    "pairsel.max_d_incidence",
    "pairsel.max_d_azimuth",
    "pairsel.min_overlap",
    "pairsel.override",
    "adjust.max_points",
    "adjust.window_radius",
    "adjust.search_radius",
    "adjust.min_ncc",
    "adjust.cauchy_c",
    "adjust.max_iter",
    "adjust.ground_weight",
    "adjust.position_sigma",
    "match.window_radius",
    "match.search_x",
    "match.search_y",
    "match.min_ncc",
    "match.left_crop",
    "match.right_crop",
    "match.lr_tolerance",
    "recon.max_miss",
    "recon.cell_size",
    "recon.search_radius",
    "recon.idw_power",
    "recon.min_samples",
    "align.max_iter",
    "align.tol",
    "align.transect",
    "mosaic.blend_len",
    "validate.feature",
    "validate.patch_radius",
    "validate.search_radius",
    "validate.sun_azimuth",
    "validate.sun_elevation",
    "validate.profile",
    "validate.profile_step",
    "refine.enabled",
    "refine.expanded_search_radius",
    "refine.prior_tightening",
];

fn range(kv: &KeyValues, key: &str, default: (i32, i32)) -> CliResult<(i32, i32)> {
    if kv.get(key).is_none() {
        return Ok(default);
    }
    let v = kv.numbers(key, 2).map_err(CliError::config)?;
    if v.iter().any(|x| x.fract() != 0.0) {
        return Err(CliError::Config(format!("{key}: expected two integers")));
    }
    Ok((v[0] as i32, v[1] as i32))
}

fn crop(kv: &KeyValues, key: &str) -> CliResult<Option<Crop>> {
    match kv.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<Crop>().map(Some).map_err(|e| CliError::Config(format!("{key}: {e}"))),
    }
}

fn segments(kv: &KeyValues, key: &str) -> CliResult<Vec<(XY, XY)>> {
    kv.all(key)
        .map(|(line, v)| {
            kv.numbers_at(key, line, v, Some(4))
                .map(|n| ((n[0], n[1]), (n[2], n[3])))
                .map_err(CliError::config)
        })
        .collect()
}

impl PipelineConfig {
    pub fn read(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let kv = KeyValues::read(path).map_err(CliError::config)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_kv(&kv, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> CliResult<Self> {
        let kv = KeyValues::parse(text, "<config>").map_err(CliError::config)?;
        Self::from_kv(&kv, base_dir)
    }

    fn from_kv(kv: &KeyValues, base: &Path) -> CliResult<Self> {
        for k in kv.keys() {
            if !KNOWN_KEYS.contains(&k) {
                return Err(CliError::Config(format!("{}: unknown key `{k}`", kv.origin())));
            }
        }
        let d = Self::default();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };
        let opt = |key: &str| -> CliResult<Option<f64>> { kv.optional(key).map_err(CliError::config) };
        let opt_usize = |key: &str| -> CliResult<Option<usize>> { kv.optional(key).map_err(CliError::config) };
        let opt_bool = |key: &str| -> CliResult<Option<bool>> { kv.optional(key).map_err(CliError::config) };

        let mut scenes = Vec::new();
        for (line, v) in kv.all("inputs.scene") {
            let parts: Vec<&str> = v.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(CliError::config(kv.parse_error(line, "inputs.scene: expected `<image> <meta>`")));
            }
            scenes.push(SceneInput { image: resolve(parts[0]), meta: resolve(parts[1]) });
        }

        let pt = d.pair_thresholds;
        let pair_thresholds = PairThresholds {
            bh_min: opt("pairsel.bh_min")?.unwrap_or(pt.bh_min),
            bh_max: opt("pairsel.bh_max")?.unwrap_or(pt.bh_max),
            max_d_incidence: opt("pairsel.max_d_incidence")?.unwrap_or(pt.max_d_incidence),
            max_d_azimuth: opt("pairsel.max_d_azimuth")?.unwrap_or(pt.max_d_azimuth),
            min_overlap: opt("pairsel.min_overlap")?.unwrap_or(pt.min_overlap),
        };
        let ties = TieParams {
            max_points: opt_usize("adjust.max_points")?.unwrap_or(d.ties.max_points),
            window_radius: opt_usize("adjust.window_radius")?.unwrap_or(d.ties.window_radius),
            search_radius: opt_usize("adjust.search_radius")?.unwrap_or(d.ties.search_radius),
            min_ncc: opt("adjust.min_ncc")?.unwrap_or(d.ties.min_ncc),
            ground_height: d.ties.ground_height,
        };
        let bundle = RobustLossParams {
            cauchy_scale_c: opt("adjust.cauchy_c")?.unwrap_or(d.bundle.cauchy_scale_c),
            max_iterations: opt_usize("adjust.max_iter")?.unwrap_or(d.bundle.max_iterations),
            ground_constraint_weight: opt("adjust.ground_weight")?.unwrap_or(d.bundle.ground_constraint_weight),
            position_sigma: opt("adjust.position_sigma")?.unwrap_or(d.bundle.position_sigma),
        };
        let lr_tolerance = match kv.get("match.lr_tolerance") {
            None => d.matching.lr_tolerance,
            Some("none") => None,
            Some(_) => Some(kv.value("match.lr_tolerance").map_err(CliError::config)?),
        };
        let matching = MatchParams {
            window_radius: opt_usize("match.window_radius")?.unwrap_or(d.matching.window_radius),
            search_x: range(kv, "match.search_x", d.matching.search_x)?,
            search_y: range(kv, "match.search_y", d.matching.search_y)?,
            min_ncc: opt("match.min_ncc")?.unwrap_or(d.matching.min_ncc),
            left_crop: crop(kv, "match.left_crop")?,
            right_crop: crop(kv, "match.right_crop")?,
            lr_tolerance,
        };
        let cell = opt("recon.cell_size")?.unwrap_or(DEFAULT_CELL_SIZE);
        let g = GriddingParams::with_cell_size(cell);
        let gridding = GriddingParams {
            cell_size: cell,
            search_radius: opt("recon.search_radius")?.unwrap_or(g.search_radius),
            idw_power: opt("recon.idw_power")?.unwrap_or(g.idw_power),
            min_samples: opt_usize("recon.min_samples")?.unwrap_or(g.min_samples),
        };
        let icp = IcpParams {
            max_iter: opt_usize("align.max_iter")?.unwrap_or(d.icp.max_iter),
            tol: opt("align.tol")?.unwrap_or(d.icp.tol),
        };
        let mut features = Vec::new();
        for (line, v) in kv.all("validate.feature") {
            let n = kv.numbers_at("validate.feature", line, v, Some(2)).map_err(CliError::config)?;
            features.push((n[0], n[1]));
        }
        let o = d.validate.offset;
        let validate = ValidateSettings {
            features,
            offset: OffsetParams {
                patch_radius: opt_usize("validate.patch_radius")?.unwrap_or(o.patch_radius),
                search_radius: opt_usize("validate.search_radius")?.unwrap_or(o.search_radius),
                sun_azimuth_deg: opt("validate.sun_azimuth")?.unwrap_or(o.sun_azimuth_deg),
                sun_elevation_deg: opt("validate.sun_elevation")?.unwrap_or(o.sun_elevation_deg),
            },
            profiles: segments(kv, "validate.profile")?,
            profile_step: opt("validate.profile_step")?.unwrap_or(d.validate.profile_step),
        };

        let cfg = Self {
            scenes,
            reference_dtm: kv.get("inputs.reference_dtm").map(resolve).unwrap_or_default(),
            truth_dem: kv.get("inputs.truth_dem").map(resolve),
            out_dir: kv.get("run.out_dir").map(resolve).unwrap_or_else(|| base.join(&d.out_dir)),
            threads: opt_usize("run.threads")?,
            seed: kv.optional("run.seed").map_err(CliError::config)?.unwrap_or(d.seed),
            pair_thresholds,
            pair_override: opt_bool("pairsel.override")?.unwrap_or(false),
            ties,
            bundle,
            matching,
            max_miss: opt("recon.max_miss")?.unwrap_or(d.max_miss),
            gridding,
            icp,
            debias_transects: segments(kv, "align.transect")?,
            blend_len: opt("mosaic.blend_len")?.unwrap_or(d.blend_len),
            validate,
            refine_pass: opt_bool("refine.enabled")?.unwrap_or(false),
            expanded_search_radius: opt("refine.expanded_search_radius")?.unwrap_or(d.expanded_search_radius),
            prior_tightening: opt("refine.prior_tightening")?.unwrap_or(d.prior_tightening),
        };
        Ok(cfg)
    }

    /// Checks every parameter set against its module's invariants.
    pub fn validate(&self) -> CliResult<()> {
        if self.scenes.len() < 2 {
            return Err(CliError::Config(format!("need at least 2 scenes, got {}", self.scenes.len())));
        }
        if self.reference_dtm.as_os_str().is_empty() {
            return Err(CliError::Config("inputs.reference_dtm is required".into()));
        }
        self.pair_thresholds.validate().map_err(CliError::config)?;
        if self.ties.max_points == 0 || !(self.ties.min_ncc > -1.0 && self.ties.min_ncc <= 1.0) {
            return Err(CliError::Config("adjust.max_points must be >= 1 and adjust.min_ncc in (-1, 1]".into()));
        }
        self.bundle.validate().map_err(CliError::config)?;
        self.matching.validate().map_err(CliError::config)?;
        self.gridding.validate().map_err(CliError::config)?;
        if !(self.max_miss > 0.0) {
            return Err(CliError::Config("recon.max_miss must be > 0".into()));
        }
        if self.icp.max_iter == 0 || !(self.icp.tol >= 0.0) {
            return Err(CliError::Config("align.max_iter must be >= 1 and align.tol >= 0".into()));
        }
        if !(self.blend_len >= 0.0) {
            return Err(CliError::Config("mosaic.blend_len must be >= 0".into()));
        }
        if !(self.validate.profile_step > 0.0) {
            return Err(CliError::Config("validate.profile_step must be > 0".into()));
        }
        if !(self.expanded_search_radius > 0.0 && self.prior_tightening > 0.0) {
            return Err(CliError::Config(
                "refine.expanded_search_radius and refine.prior_tightening must be > 0".into(),
            ));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("run.threads must be >= 1".into()));
        }
        Ok(())
    }

    /// Full text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = |p: &Path| p.display().to_string();
        let _ = writeln!(s, "[inputs]");
        for sc in &self.scenes {
            let _ = writeln!(s, "scene = {} {}", p(&sc.image), p(&sc.meta));
        }
        let _ = writeln!(s, "reference_dtm = {}", p(&self.reference_dtm));
        if let Some(t) = &self.truth_dem {
            let _ = writeln!(s, "truth_dem = {}", p(t));
        }
        let _ = writeln!(s, "\n[run]\nout_dir = {}", p(&self.out_dir));
        if let Some(t) = self.threads {
            let _ = writeln!(s, "threads = {t}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let t = &self.pair_thresholds;
        let _ = writeln!(
            s,
            "\n[pairsel]\nbh_min = {}\nbh_max = {}\nmax_d_incidence = {}\nmax_d_azimuth = {}\nmin_overlap = {}\noverride = {}",
            t.bh_min, t.bh_max, t.max_d_incidence, t.max_d_azimuth, t.min_overlap, self.pair_override
        );
        let (ti, b) = (&self.ties, &self.bundle);
        let _ = writeln!(
            s,
            "\n[adjust]\nmax_points = {}\nwindow_radius = {}\nsearch_radius = {}\nmin_ncc = {}\ncauchy_c = {}\nmax_iter = {}\nground_weight = {}\nposition_sigma = {}",
            ti.max_points, ti.window_radius, ti.search_radius, ti.min_ncc,
            b.cauchy_scale_c, b.max_iterations, b.ground_constraint_weight, b.position_sigma
        );
        let m = &self.matching;
        let _ = writeln!(
            s,
            "\n[match]\nwindow_radius = {}\nsearch_x = {} {}\nsearch_y = {} {}\nmin_ncc = {}",
            m.window_radius, m.search_x.0, m.search_x.1, m.search_y.0, m.search_y.1, m.min_ncc
        );
        for (key, c) in [("left_crop", m.left_crop), ("right_crop", m.right_crop)] {
            if let Some(c) = c {
                let _ = writeln!(s, "{key} = {},{},{},{}", c.x_min, c.y_min, c.width, c.height);
            }
        }
        match m.lr_tolerance {
            Some(v) => {
                let _ = writeln!(s, "lr_tolerance = {v}");
            }
            None => {
                let _ = writeln!(s, "lr_tolerance = none");
            }
        }
        let g = &self.gridding;
        let _ = writeln!(
            s,
            "\n[recon]\nmax_miss = {}\ncell_size = {}\nsearch_radius = {}\nidw_power = {}\nmin_samples = {}",
            self.max_miss, g.cell_size, g.search_radius, g.idw_power, g.min_samples
        );
        let _ = writeln!(s, "\n[align]\nmax_iter = {}\ntol = {}", self.icp.max_iter, self.icp.tol);
        for ((x0, y0), (x1, y1)) in &self.debias_transects {
            let _ = writeln!(s, "transect = {x0} {y0} {x1} {y1}");
        }
        let _ = writeln!(s, "\n[mosaic]\nblend_len = {}", self.blend_len);
        let v = &self.validate;
        let _ = writeln!(
            s,
            "\n[validate]\npatch_radius = {}\nsearch_radius = {}\nsun_azimuth = {}\nsun_elevation = {}\nprofile_step = {}",
            v.offset.patch_radius, v.offset.search_radius, v.offset.sun_azimuth_deg, v.offset.sun_elevation_deg, v.profile_step
        );
        for (x, y) in &v.features {
            let _ = writeln!(s, "feature = {x} {y}");
        }
        for ((x0, y0), (x1, y1)) in &v.profiles {
            let _ = writeln!(s, "profile = {x0} {y0} {x1} {y1}");
        }
        let _ = writeln!(
            s,
            "\n[refine]\nenabled = {}\nexpanded_search_radius = {}\nprior_tightening = {}",
            self.refine_pass, self.expanded_search_radius, self.prior_tightening
        );
        s
    }
}
