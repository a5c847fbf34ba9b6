//! Acquisition metadata sidecars and the raster, image and point-cloud
//! file formats shared by every stage.
//!
//! Sidecar grammar: one `key = value` per line, `#` starts a comment line.
//! `ephemeris` and `footprint` open a block; the data lines that follow
//! (lines without `=`) belong to that block. Ephemeris rows are
//! `t px py pz r11 r12 r13 r21 r22 r23 r31 r32 r33`, footprint rows `x y z`.
//!
//! DEM grids use the ASCII grid layout (`ncols`, `nrows`, `xllcorner`,
//! `yllcorner`, `cellsize`, `nodata_value` then values, north row first).
//! In memory, row 0 is the *southernmost* row.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{EphemerisSample, Intrinsics, Mat3, PushbroomCamera, Vec3};

pub const DEFAULT_NODATA: f64 = -32768.0;

/// Detector pitch assumed when a sidecar carries no `detector_pitch_m`.
/// The focal length then follows from `altitude * pitch / gsd`.
pub const DEFAULT_DETECTOR_PITCH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionMeta {
    pub product_id: String,
    /// metres per pixel
    pub gsd: f64,
    /// metres
    pub altitude: f64,
    pub start_time: f64,
    pub line_exposure: f64,
    pub n_lines: usize,
    pub n_samples: usize,
    pub ephemeris: Vec<EphemerisSample>,
    /// degrees from the local vertical
    pub solar_incidence: f64,
    /// degrees clockwise from north
    pub solar_azimuth: f64,
    pub footprint: [Vec3; 4],
    pub focal_length: Option<f64>,
    pub detector_pitch: Option<f64>,
    pub principal_sample: Option<f64>,
}

impl AcquisitionMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.gsd > 0.0) {
            return Err(Error::Domain(format!("gsd {} must be > 0", self.gsd)));
        }
        if !(self.altitude > 0.0) {
            return Err(Error::Domain(format!("altitude {} must be > 0", self.altitude)));
        }
        if self.n_lines == 0 || self.n_samples == 0 {
            return Err(Error::Domain("image dimensions must be >= 1".into()));
        }
        if !(0.0..=90.0).contains(&self.solar_incidence) {
            return Err(Error::Domain(format!(
                "solar incidence {} outside [0, 90]",
                self.solar_incidence
            )));
        }
        if !(0.0..360.0).contains(&self.solar_azimuth) {
            return Err(Error::Domain(format!(
                "solar azimuth {} outside [0, 360)",
                self.solar_azimuth
            )));
        }
        if self.ephemeris.len() < 2 {
            return Err(Error::Domain("ephemeris needs at least 2 samples".into()));
        }
        if footprint_area(&self.footprint) <= 0.0 {
            return Err(Error::Domain(format!("{}: degenerate footprint", self.product_id)));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let pitch = self.detector_pitch.unwrap_or(DEFAULT_DETECTOR_PITCH);
        let focal = self
            .focal_length
            .unwrap_or(self.altitude * pitch / self.gsd);
        let principal = self.principal_sample.unwrap_or(self.n_samples as f64 / 2.0);
        Intrinsics::new(focal, pitch, principal, self.n_samples)
    }

    pub fn camera(&self) -> Result<PushbroomCamera> {
        PushbroomCamera::new(
            self.intrinsics()?,
            self.ephemeris.clone(),
            self.line_exposure,
            self.n_lines,
            self.start_time,
        )
    }

    /// Spacecraft position at the middle of the acquisition.
    pub fn mid_position(&self) -> Result<Vec3> {
        Ok(self.camera()?.state_at_line(self.n_lines as f64 / 2.0)?.0)
    }

    pub fn footprint_centroid(&self) -> Vec3 {
        self.footprint.iter().sum::<Vec3>() / 4.0
    }
}

/// Unsigned area of a quadrilateral in the horizontal plane.
pub fn footprint_area(corners: &[Vec3; 4]) -> f64 {
    let mut a = 0.0;
    for i in 0..4 {
        let (p, q) = (corners[i], corners[(i + 1) % 4]);
        a += p.x * q.y - q.x * p.y;
    }
    (0.5 * a).abs()
}

const META_KEYS: [&str; 11] = [
    "product_id",
    "gsd_m",
    "altitude_km",
    "start_time_s",
    "line_exposure_s",
    "n_lines",
    "n_samples",
    "solar_incidence_deg",
    "solar_azimuth_deg",
    "ephemeris",
    "footprint",
];

pub fn parse_meta(path: impl AsRef<Path>) -> Result<AcquisitionMeta> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_meta_str(&text, &path.display().to_string())
}

/// Parses sidecar text; `origin` names the source in error messages.
pub fn parse_meta_str(text: &str, origin: &str) -> Result<AcquisitionMeta> {
    let mut scalars: HashMap<String, (usize, String)> = HashMap::new();
    let mut blocks: HashMap<String, Vec<(usize, Vec<f64>)>> = HashMap::new();
    let mut current_block: Option<String> = None;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "ephemeris" || k == "footprint" {
                if !v.is_empty() {
                    return Err(parse_err(lineno, format!("`{k}` takes its rows on the following lines")));
                }
                blocks.insert(k.clone(), Vec::new());
                current_block = Some(k);
            } else {
                scalars.insert(k, (lineno, v));
                current_block = None;
            }
            continue;
        }
        let Some(block) = current_block.as_ref() else {
            return Err(parse_err(lineno, format!("expected `key = value`, found `{line}`")));
        };
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("non-numeric value `{t}` in {block}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        blocks.get_mut(block).expect("block opened").push((lineno, row));
    }

    for key in META_KEYS {
        if !scalars.contains_key(key) && !blocks.contains_key(key) {
            return Err(Error::MissingKey {
                path: origin.to_string(),
                key: key.to_string(),
            });
        }
    }

    let get = |key: &str| -> &(usize, String) { &scalars[key] };
    let num = |key: &str| -> Result<f64> {
        let (line, v) = get(key);
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| parse_err(*line, format!("`{key}`: non-numeric value `{v}`")))
    };
    let opt_num = |key: &str| -> Result<Option<f64>> {
        if scalars.contains_key(key) {
            num(key).map(Some)
        } else {
            Ok(None)
        }
    };
    let count = |key: &str| -> Result<usize> {
        let (line, v) = get(key);
        v.parse::<usize>()
            .map_err(|_| parse_err(*line, format!("`{key}`: expected a non-negative integer, found `{v}`")))
    };
    let altitude = {
        let (line, v) = get("altitude_km");
        scale_decimal(v, 3)
            .ok_or_else(|| parse_err(*line, format!("`altitude_km`: non-numeric value `{v}`")))?
    };

    let mut ephemeris = Vec::new();
    for (line, row) in &blocks["ephemeris"] {
        if row.len() != 13 {
            return Err(parse_err(*line, format!("ephemeris row needs 13 numbers, found {}", row.len())));
        }
        ephemeris.push(EphemerisSample {
            time: row[0],
            position: Vec3::new(row[1], row[2], row[3]),
            orientation: Mat3::from_row_slice(&row[4..13]),
        });
    }
    ephemeris.sort_by(|a, b| a.time.total_cmp(&b.time));

    let fp_rows = &blocks["footprint"];
    if fp_rows.len() != 4 {
        let line = fp_rows.last().map(|r| r.0).unwrap_or(0);
        return Err(parse_err(line, format!("footprint needs 4 rows, found {}", fp_rows.len())));
    }
    let mut footprint = [Vec3::zeros(); 4];
    for (corner, (line, row)) in footprint.iter_mut().zip(fp_rows) {
        if row.len() != 3 {
            return Err(parse_err(*line, "footprint row needs 3 numbers".into()));
        }
        *corner = Vec3::new(row[0], row[1], row[2]);
    }

    let meta = AcquisitionMeta {
        product_id: get("product_id").1.clone(),
        gsd: num("gsd_m")?,
        altitude,
        start_time: num("start_time_s")?,
        line_exposure: num("line_exposure_s")?,
        n_lines: count("n_lines")?,
        n_samples: count("n_samples")?,
        ephemeris,
        solar_incidence: num("solar_incidence_deg")?,
        solar_azimuth: num("solar_azimuth_deg")?,
        footprint,
        focal_length: opt_num("focal_length_m")?,
        detector_pitch: opt_num("detector_pitch_m")?,
        principal_sample: opt_num("principal_sample")?,
    };
    meta.validate()?;
    Ok(meta)
}

/// Multiplies a decimal literal by `10^shift` exactly by moving its
/// exponent, so `"101.90"` with shift 3 yields exactly `101900.0`.
fn scale_decimal(v: &str, shift: i32) -> Option<f64> {
    let (mantissa, exp) = match v.find(['e', 'E']) {
        Some(i) => (&v[..i], v[i + 1..].parse::<i32>().ok()?),
        None => (v, 0),
    };
    mantissa.parse::<f64>().ok()?;
    format!("{mantissa}e{}", exp + shift)
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
}

/// Formats `x / 10^shift` so that [`scale_decimal`] restores `x` exactly.
fn unscale_decimal(x: f64, shift: i32) -> String {
    let s = format!("{x:e}");
    let (m, e) = s.split_once('e').expect("exponent form");
    format!("{m}e{}", e.parse::<i32>().expect("integer exponent") - shift)
}

pub fn format_meta(meta: &AcquisitionMeta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# acquisition metadata sidecar");
    let _ = writeln!(s, "product_id = {}", meta.product_id);
    let _ = writeln!(s, "gsd_m = {}", meta.gsd);
    let _ = writeln!(s, "altitude_km = {}", unscale_decimal(meta.altitude, 3));
    let _ = writeln!(s, "start_time_s = {}", meta.start_time);
    let _ = writeln!(s, "line_exposure_s = {}", meta.line_exposure);
    let _ = writeln!(s, "n_lines = {}", meta.n_lines);
    let _ = writeln!(s, "n_samples = {}", meta.n_samples);
    let _ = writeln!(s, "solar_incidence_deg = {}", meta.solar_incidence);
    let _ = writeln!(s, "solar_azimuth_deg = {}", meta.solar_azimuth);
    if let Some(f) = meta.focal_length {
        let _ = writeln!(s, "focal_length_m = {f}");
    }
    if let Some(p) = meta.detector_pitch {
        let _ = writeln!(s, "detector_pitch_m = {p}");
    }
    if let Some(c) = meta.principal_sample {
        let _ = writeln!(s, "principal_sample = {c}");
    }
    let _ = writeln!(s, "ephemeris =");
    for e in &meta.ephemeris {
        let _ = write!(s, "{} {} {} {}", e.time, e.position.x, e.position.y, e.position.z);
        for r in 0..3 {
            for c in 0..3 {
                let _ = write!(s, " {}", e.orientation[(r, c)]);
            }
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "footprint =");
    for p in &meta.footprint {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn write_meta(meta: &AcquisitionMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_meta(meta)).map_err(|e| Error::io(path, e))
}

/// Geometry of a regular grid: cell `(col, row)` has its lower-left
/// corner at `(origin_x + col*cell_size, origin_y + row*cell_size)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub n_cols: usize,
    pub n_rows: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
}

impl Lattice {
    pub fn new(n_cols: usize, n_rows: usize, origin_x: f64, origin_y: f64, cell_size: f64) -> Result<Self> {
        if n_cols == 0 || n_rows == 0 {
            return Err(Error::Domain("lattice needs at least one cell".into()));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Domain(format!("cell size {cell_size} must be > 0")));
        }
        if !(origin_x.is_finite() && origin_y.is_finite()) {
            return Err(Error::Domain("non-finite lattice origin".into()));
        }
        Ok(Self {
            n_cols,
            n_rows,
            origin_x,
            origin_y,
            cell_size,
        })
    }

    /// Smallest lattice with corners on multiples of `cell_size` that
    /// covers the rectangle `[x_min, x_max] x [y_min, y_max]`.
    pub fn covering(x_min: f64, y_min: f64, x_max: f64, y_max: f64, cell_size: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Extent(format!(
                "empty extent [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        let ox = (x_min / cell_size).floor() * cell_size;
        let oy = (y_min / cell_size).floor() * cell_size;
        let n_cols = (((x_max - ox) / cell_size).ceil() as usize).max(1);
        let n_rows = (((y_max - oy) / cell_size).ceil() as usize).max(1);
        Self::new(n_cols, n_rows, ox, oy, cell_size)
    }

    pub fn len(&self) -> usize {
        self.n_cols * self.n_rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.n_cols + col
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn x_max(&self) -> f64 {
        self.origin_x + self.n_cols as f64 * self.cell_size
    }

    pub fn y_max(&self) -> f64 {
        self.origin_y + self.n_rows as f64 * self.cell_size
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin_x && x <= self.x_max() && y >= self.origin_y && y <= self.y_max()
    }

    pub fn overlaps(&self, other: &Lattice) -> bool {
        self.origin_x < other.x_max()
            && other.origin_x < self.x_max()
            && self.origin_y < other.y_max()
            && other.origin_y < self.y_max()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemGrid {
    pub lattice: Lattice,
    pub nodata: f64,
    /// row-major, row 0 southernmost
    pub values: Vec<f64>,
}

impl DemGrid {
    pub fn new(lattice: Lattice, nodata: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::Format(format!(
                "{} values for a {}x{} grid",
                values.len(),
                lattice.n_cols,
                lattice.n_rows
            )));
        }
        if !nodata.is_finite() {
            return Err(Error::Format("nodata sentinel must be finite".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite elevation {v}")));
        }
        Ok(Self {
            lattice,
            nodata,
            values,
        })
    }

    pub fn filled(lattice: Lattice, value: f64) -> Self {
        Self {
            lattice,
            nodata: DEFAULT_NODATA,
            values: vec![value; lattice.len()],
        }
    }

    pub fn empty(lattice: Lattice) -> Self {
        Self::filled(lattice, DEFAULT_NODATA)
    }

    pub fn n_cols(&self) -> usize {
        self.lattice.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.lattice.n_rows
    }

    pub fn cell_size(&self) -> f64 {
        self.lattice.cell_size
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let v = self.values[self.lattice.index(col, row)];
        (v != self.nodata).then_some(v)
    }

    pub fn set(&mut self, col: usize, row: usize, v: Option<f64>) {
        let i = self.lattice.index(col, row);
        self.values[i] = v.unwrap_or(self.nodata);
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.get(col, row).is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != self.nodata).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.values.len() as f64
    }

    pub fn void_fraction(&self) -> f64 {
        (self.values.len() - self.valid_count()) as f64 / self.values.len() as f64
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.lattice.cell_center(col, row)
    }

    /// Bilinear interpolation between cell centres. Inside the grid
    /// extent but beyond the outermost centres the nearest centre row or
    /// column is used. `None` outside the extent or when any cell with
    /// non-zero weight is nodata.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let l = &self.lattice;
        if !l.contains(x, y) {
            return None;
        }
        let fx = ((x - l.origin_x) / l.cell_size - 0.5).clamp(0.0, (l.n_cols - 1) as f64);
        let fy = ((y - l.origin_y) / l.cell_size - 0.5).clamp(0.0, (l.n_rows - 1) as f64);
        let c0 = (fx.floor() as usize).min(l.n_cols.saturating_sub(2));
        let r0 = (fy.floor() as usize).min(l.n_rows.saturating_sub(2));
        let tx = fx - c0 as f64;
        let ty = fy - r0 as f64;
        let mut acc = 0.0;
        for (dr, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dc, wx) in [(0, 1.0 - tx), (1, tx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                acc += w * self.get(c0 + dc, r0 + dr)?;
            }
        }
        Some(acc)
    }

    /// Minimum and maximum valid elevation.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .filter(|&&v| v != self.nodata)
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }
}

pub fn read_dem(path: impl AsRef<Path>) -> Result<DemGrid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dem(&text)
}

pub fn parse_dem(text: &str) -> Result<DemGrid> {
    let mut tokens = text.split_whitespace();
    let mut header = HashMap::new();
    for _ in 0..6 {
        let key = tokens
            .next()
            .ok_or_else(|| Error::Format("truncated grid header".into()))?
            .to_ascii_lowercase();
        let value = tokens
            .next()
            .ok_or_else(|| Error::Format(format!("missing value for `{key}`")))?;
        header.insert(key, value);
    }
    let field = |k: &str| -> Result<&str> {
        header
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("grid header lacks `{k}`")))
    };
    let float = |k: &str| -> Result<f64> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{k}` in grid header")))
    };
    let int = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{k}` in grid header")))
    };
    let lattice = Lattice::new(
        int("ncols")?,
        int("nrows")?,
        float("xllcorner")?,
        float("yllcorner")?,
        float("cellsize")?,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    let nodata = float("nodata_value")?;
    let file_values = tokens
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad grid value `{t}`"))))
        .collect::<Result<Vec<f64>>>()?;
    if file_values.len() != lattice.len() {
        return Err(Error::Format(format!(
            "header declares {}x{} = {} cells but {} values follow",
            lattice.n_cols,
            lattice.n_rows,
            lattice.len(),
            file_values.len()
        )));
    }
    let mut values = vec![0.0; lattice.len()];
    for file_row in 0..lattice.n_rows {
        let row = lattice.n_rows - 1 - file_row;
        let src = &file_values[file_row * lattice.n_cols..(file_row + 1) * lattice.n_cols];
        values[row * lattice.n_cols..(row + 1) * lattice.n_cols].copy_from_slice(src);
    }
    DemGrid::new(lattice, nodata, values)
}

pub fn write_dem(dem: &DemGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dem_to(dem, &mut w).map_err(|e| Error::io(path, e))
}

pub fn write_dem_to(dem: &DemGrid, w: &mut impl Write) -> std::io::Result<()> {
    let l = &dem.lattice;
    writeln!(w, "ncols {}", l.n_cols)?;
    writeln!(w, "nrows {}", l.n_rows)?;
    writeln!(w, "xllcorner {}", l.origin_x)?;
    writeln!(w, "yllcorner {}", l.origin_y)?;
    writeln!(w, "cellsize {}", l.cell_size)?;
    writeln!(w, "nodata_value {}", dem.nodata)?;
    for row in (0..l.n_rows).rev() {
        let vals = &dem.values[row * l.n_cols..(row + 1) * l.n_cols];
        for (i, v) in vals.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub n_cols: usize,
    pub n_rows: usize,
    pub values: Vec<f64>,
}

impl RasterImage {
    pub fn new(n_cols: usize, n_rows: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_cols * n_rows {
            return Err(Error::Format(format!(
                "{} values for a {n_cols}x{n_rows} image",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite pixel value".into()));
        }
        Ok(Self {
            n_cols,
            n_rows,
            values,
        })
    }

    pub fn from_fn(n_cols: usize, n_rows: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_cols * n_rows);
        for r in 0..n_rows {
            for c in 0..n_cols {
                values.push(f(c, r));
            }
        }
        Self {
            n_cols,
            n_rows,
            values,
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.n_cols..(row + 1) * self.n_cols]
    }

    /// Bilinear sample with pixel-index coordinates (`(0, 0)` is the
    /// centre of the first pixel); `None` outside the pixel-centre hull.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.n_cols - 1) as f64 && y <= (self.n_rows - 1) as f64) {
            return None;
        }
        let c0 = (x.floor() as usize).min(self.n_cols.saturating_sub(2));
        let r0 = (y.floor() as usize).min(self.n_rows.saturating_sub(2));
        let (tx, ty) = (x - c0 as f64, y - r0 as f64);
        let at = |c: usize, r: usize| {
            if c < self.n_cols && r < self.n_rows {
                self.get(c, r)
            } else {
                0.0
            }
        };
        Some(
            (1.0 - ty) * ((1.0 - tx) * at(c0, r0) + tx * at(c0 + 1, r0))
                + ty * ((1.0 - tx) * at(c0, r0 + 1) + tx * at(c0 + 1, r0 + 1)),
        )
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

/// Binary PGM (`P5`). 16-bit samples are big-endian.
pub fn parse_pgm(bytes: &[u8]) -> Result<RasterImage> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if header[0] != "P5" {
        return Err(Error::Format(format!("unsupported PGM magic `{}`", header[0])));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field `{s}`")));
    let (w, h, maxval) = (dim(&header[1])?, dim(&header[2])?, dim(&header[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h * bpp {
        return Err(Error::Format(format!(
            "PGM raster has {} bytes, expected {}",
            data.len(),
            w * h * bpp
        )));
    }
    let values = if bpp == 1 {
        data.iter().map(|&b| b as f64).collect()
    } else {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    RasterImage::new(w, h, values)
}

/// Writes a 16-bit PGM; values are rounded and clamped to `[0, 65535]`.
pub fn write_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.n_cols, img.n_rows).into_bytes();
    out.reserve(img.values.len() * 2);
    for v in &img.values {
        let q = v.round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// per-point triangulation (ray miss) distance, metres
    pub errors: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, errors: Option<Vec<f64>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Format("non-finite point coordinate".into()));
        }
        if let Some(e) = &errors {
            if e.len() != points.len() {
                return Err(Error::Format("error count differs from point count".into()));
            }
            if e.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Format("triangulation errors must be finite and >= 0".into()));
            }
        }
        Ok(Self { points, errors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Horizontal bounding box `(x_min, y_min, x_max, y_max)`.
    pub fn bounds_xy(&self) -> Option<(f64, f64, f64, f64)> {
        let first = self.points.first()?;
        Some(self.points.iter().fold(
            (first.x, first.y, first.x, first.y),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        ))
    }
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text)
}

pub fn parse_cloud(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut errors = Vec::new();
    let mut columns = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format(format!("line {}: non-numeric point", i + 1)))?;
        if !(vals.len() == 3 || vals.len() == 4) || *columns.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Format(format!("line {}: inconsistent column count", i + 1)));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 4 {
            errors.push(vals[3]);
        }
    }
    PointCloud::new(points, (columns == Some(4)).then_some(errors))
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        for (i, p) in cloud.points.iter().enumerate() {
            match &cloud.errors {
                Some(e) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, e[i])?,
                None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sidecar(gsd: &str, alt: &str, skip: Option<&str>) -> String {
        let mut lines = vec![
            "# test sidecar".to_string(),
            "product_id = ch2_ohr_nrp_20240425T1209509264".into(),
            format!("gsd_m = {gsd}"),
            format!("altitude_km = {alt}"),
            "start_time_s = 0".into(),
            "line_exposure_s = 0.001".into(),
            "n_lines = 100".into(),
            "n_samples = 200".into(),
            "solar_incidence_deg = 40".into(),
            "solar_azimuth_deg = 270".into(),
            "ephemeris =".into(),
            "0 0 -50 100000 1 0 0 0 -1 0 0 0 -1".into(),
            "1 0 1550 100000 1 0 0 0 -1 0 0 0 -1".into(),
            "footprint =".into(),
            "-26 -15 0".into(),
            "26 -15 0".into(),
            "26 15 0".into(),
            "-26 15 0".into(),
        ];
        if let Some(k) = skip {
            lines.retain(|l| !l.starts_with(k));
        }
        lines.join("\n")
    }

    #[test]
    fn parses_table_values() {
        let m = parse_meta_str(&sidecar("0.26", "101.90", None), "r1").unwrap();
        assert_eq!(m.gsd, 0.26);
        assert_eq!(m.altitude, 101_900.0);
        let m = parse_meta_str(&sidecar("0.19", "76.66", None), "r5").unwrap();
        assert_eq!(m.gsd, 0.19);
        assert_eq!(m.altitude, 76_660.0);
        assert_eq!(m.ephemeris.len(), 2);
        assert!(m.camera().is_ok());
    }

    #[test]
    fn missing_key_is_named() {
        let err = parse_meta_str(&sidecar("0.26", "101.90", Some("solar_incidence_deg")), "x").unwrap_err();
        match err {
            Error::MissingKey { key, .. } => assert_eq!(key, "solar_incidence_deg"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_numeric_value_reports_line() {
        let err = parse_meta_str(&sidecar("abc", "101.90", None), "x").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn meta_round_trips() {
        let m = parse_meta_str(&sidecar("0.26", "101.90", None), "r1").unwrap();
        let again = parse_meta_str(&format_meta(&m), "again").unwrap();
        assert_eq!(m, again);
        let mut odd = m.clone();
        odd.altitude = 123_456.789_012_345_6;
        odd.focal_length = Some(3.3);
        let again = parse_meta_str(&format_meta(&odd), "odd").unwrap();
        assert_eq!(odd, again);
    }

    #[test]
    fn scale_decimal_is_exact() {
        assert_eq!(scale_decimal("101.90", 3), Some(101_900.0));
        assert_eq!(scale_decimal("1.019e2", 3), Some(101_900.0));
        assert_eq!(scale_decimal("x", 3), None);
        for x in [1.0, 0.1, 76_320.0, 1e-7, 123.456_789] {
            assert_eq!(scale_decimal(&unscale_decimal(x, 3), 3), Some(x));
        }
    }

    #[test]
    fn dem_small_round_trips() {
        let l = Lattice::new(1, 1, 10.0, 20.0, 0.5).unwrap();
        let dem = DemGrid::new(l, DEFAULT_NODATA, vec![42.0]).unwrap();
        let mut buf = Vec::new();
        write_dem_to(&dem, &mut buf).unwrap();
        assert_eq!(parse_dem(std::str::from_utf8(&buf).unwrap()).unwrap(), dem);

        let l = Lattice::new(2, 2, 0.0, 0.0, 1.0).unwrap();
        let dem = DemGrid::new(l, DEFAULT_NODATA, vec![1.0, DEFAULT_NODATA, 3.0, 4.5]).unwrap();
        let mut buf = Vec::new();
        write_dem_to(&dem, &mut buf).unwrap();
        let back = parse_dem(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, dem);
        assert!(!back.is_valid(1, 0));
    }

    #[test]
    fn dem_north_row_first_on_disk() {
        let l = Lattice::new(1, 2, 0.0, 0.0, 1.0).unwrap();
        let dem = DemGrid::new(l, DEFAULT_NODATA, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_dem_to(&dem, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let body: Vec<&str> = text.lines().skip(6).collect();
        assert_eq!(body, vec!["2", "1"]);
    }

    #[test]
    fn dem_count_mismatch_is_format_error() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -32768\n1 2 3\n";
        assert!(matches!(parse_dem(text), Err(Error::Format(_))));
    }

    #[test]
    fn bilinear_on_plane_is_exact() {
        let l = Lattice::new(5, 4, 0.0, 0.0, 2.0).unwrap();
        let mut dem = DemGrid::empty(l);
        for r in 0..4 {
            for c in 0..5 {
                let (x, y) = l.cell_center(c, r);
                dem.set(c, r, Some(3.0 * x - 2.0 * y + 1.0));
            }
        }
        let v = dem.sample_bilinear(4.3, 3.1).unwrap();
        assert!((v - (3.0 * 4.3 - 2.0 * 3.1 + 1.0)).abs() < 1e-12);
        assert!(dem.sample_bilinear(-0.1, 1.0).is_none());
        dem.set(2, 1, None);
        assert!(dem.sample_bilinear(5.5, 3.5).is_none());
        // exactly on a valid centre next to a nodata cell
        assert!(dem.sample_bilinear(3.0, 3.0).is_some());
    }

    #[test]
    fn pgm_round_trip_and_8bit() {
        let img = RasterImage::from_fn(3, 2, |c, r| (c * 1000 + r * 20000) as f64);
        assert_eq!(parse_pgm(&encode_pgm(&img)).unwrap(), img);
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 250]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.values, vec![7.0, 250.0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n1").is_err());
    }

    #[test]
    fn cloud_round_trip_with_and_without_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let c = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.1, 1e-9, 7e5)], Some(vec![0.0, 0.25])).unwrap();
        write_cloud(&c, &path).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), c);
        let c = PointCloud::new(vec![Vec3::new(0.3, 0.1, 0.2)], None).unwrap();
        write_cloud(&c, &path).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), c);
        assert!(parse_cloud("1 2 3\n1 2 3 4\n").is_err());
        assert!(PointCloud::new(vec![Vec3::zeros()], Some(vec![-1.0])).is_err());
    }
}
