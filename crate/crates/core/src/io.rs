//! On-disk formats: raw little-endian `f32` arrays with a JSON sidecar,
//! model checkpoints, the run configuration document and 16-bit PNG
//! export.
//!
//! A raw array `base` is stored as `base.raw` (row-major payload) next to
//! `base.json` (`{width, height, kind, scale, src_dims?}`). Paths given with
//! either extension are accepted.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::FanGeometry;
use crate::grid::{Image, Sinogram};
use crate::hankel::{HankelMatrix, SourceDims};
use crate::noise::{DoseSpec, DEFAULT_ETA};
use crate::sampler::ReconConfig;
use crate::score::{make_schedule, ModelKind, ModelMeta, Prior, ScoreModel, ScoreNet, SigmaSchedule, TrainConfig, PARTITIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrayKind {
    Image,
    Sinogram,
    Hankel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub width: usize,
    pub height: usize,
    pub kind: ArrayKind,
    /// Factor already applied to the stored values (1 when untouched).
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_dims: Option<SourceDims>,
}

fn one() -> f64 {
    1.0
}

impl Sidecar {
    pub fn new(kind: ArrayKind, height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            kind,
            scale: 1.0,
            src_dims: None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Strips a trailing `.raw`, `.json` or `.bin` so either file of a pair
/// names the pair.
pub fn base_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw" | "json" | "bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn raw_paths(base: &Path) -> (PathBuf, PathBuf) {
    let base = base_path(base);
    (with_suffix(&base, "raw"), with_suffix(&base, "json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn parse_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != 4 * expected {
        return Err(format_err(
            path,
            format!("{} bytes, expected {} ({expected} floats)", bytes.len(), 4 * expected),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `base.raw` and `base.json`. The sidecar's width and height are
/// taken from `data`.
pub fn write_raw(base: &Path, data: ArrayView2<f64>, mut sidecar: Sidecar) -> Result<()> {
    let (raw, json) = raw_paths(base);
    if let Some(dir) = raw.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    (sidecar.height, sidecar.width) = data.dim();
    fs::write(&raw, f32_bytes(data.iter().copied())).map_err(io_err(&raw))?;
    write_json(&json, &sidecar)
}

pub fn read_raw(base: &Path) -> Result<(Array2<f64>, Sidecar)> {
    let (raw, json) = raw_paths(base);
    let sidecar: Sidecar = read_json(&json)?;
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    let values = parse_f32(&raw, &bytes, sidecar.width * sidecar.height)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format_err(&raw, "non-finite values"));
    }
    let data = Array2::from_shape_vec((sidecar.height, sidecar.width), values)
        .map_err(|e| format_err(&raw, e.to_string()))?;
    Ok((data, sidecar))
}

fn read_kind(base: &Path, kind: ArrayKind) -> Result<(Array2<f64>, Sidecar)> {
    let (data, sidecar) = read_raw(base)?;
    if sidecar.kind != kind {
        return Err(format_err(
            &raw_paths(base).1,
            format!("holds a {:?}, expected a {kind:?}", sidecar.kind),
        ));
    }
    Ok((data, sidecar))
}

pub fn write_image(base: &Path, img: &Image, scale: f64) -> Result<()> {
    let mut side = Sidecar::new(ArrayKind::Image, img.height(), img.width());
    side.scale = scale;
    write_raw(base, img.view(), side)
}

pub fn read_image(base: &Path) -> Result<(Image, Sidecar)> {
    let (data, side) = read_kind(base, ArrayKind::Image)?;
    Ok((Image::from_array(data)?, side))
}

pub fn write_sinogram(base: &Path, sino: &Sinogram, scale: f64) -> Result<()> {
    let mut side = Sidecar::new(ArrayKind::Sinogram, sino.num_views(), sino.num_detectors());
    side.scale = scale;
    write_raw(base, sino.view(), side)
}

pub fn read_sinogram(base: &Path) -> Result<(Sinogram, Sidecar)> {
    let (data, side) = read_kind(base, ArrayKind::Sinogram)?;
    Ok((Sinogram::from_array(data)?, side))
}

pub fn write_hankel(base: &Path, h: &HankelMatrix) -> Result<()> {
    let mut side = Sidecar::new(ArrayKind::Hankel, h.rows(), h.cols());
    side.src_dims = Some(h.src_dims());
    write_raw(base, h.view(), side)
}

pub fn read_hankel(base: &Path) -> Result<HankelMatrix> {
    let (data, side) = read_kind(base, ArrayKind::Hankel)?;
    let src = side
        .src_dims
        .ok_or_else(|| format_err(&raw_paths(base).1, "Hankel sidecar without src_dims"))?;
    HankelMatrix::from_parts(data, src)
}

/// Checkpoint manifest stored next to the parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub meta: ModelMeta,
    /// Network layer widths, for trainable models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_sizes: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scale: Option<f64>,
    /// Rows of the stored mean and the prior variance, for Gaussian models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    pub param_count: usize,
}

/// Writes `base.bin` (little-endian `f32` parameters) and `base.json`.
pub fn save_model(base: &Path, model: &ScoreModel) -> Result<()> {
    let base = base_path(base);
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let (manifest, blob) = match model.prior() {
        Prior::Net(net) => (
            ModelManifest {
                meta: model.meta().clone(),
                layer_sizes: Some(net.sizes()),
                input_scale: Some(net.input_scale()),
                mean_rows: None,
                variance: None,
                param_count: net.params().len(),
            },
            f32_bytes(net.params().iter().copied()),
        ),
        Prior::Gaussian { mean, variance } => (
            ModelManifest {
                meta: model.meta().clone(),
                layer_sizes: None,
                input_scale: None,
                mean_rows: Some(mean.nrows()),
                variance: Some(*variance),
                param_count: mean.len(),
            },
            f32_bytes(mean.iter().copied()),
        ),
    };
    let bin = with_suffix(&base, "bin");
    fs::write(&bin, blob).map_err(io_err(&bin))?;
    write_json(&with_suffix(&base, "json"), &manifest)
}

pub fn load_model(base: &Path) -> Result<ScoreModel> {
    let base = base_path(base);
    let json = with_suffix(&base, "json");
    let bin = with_suffix(&base, "bin");
    let manifest: ModelManifest = read_json(&json)?;
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let params = parse_f32(&bin, &bytes, manifest.param_count)?;
    let prior = match (
        manifest.meta.kind,
        manifest.layer_sizes,
        manifest.input_scale,
        manifest.mean_rows,
        manifest.variance,
    ) {
        (ModelKind::TrainableNet, Some(sizes), Some(input_scale), None, None) => {
            Prior::Net(ScoreNet::from_params(sizes, params)?.with_input_scale(input_scale)?)
        }
        (ModelKind::AnalyticGaussian, None, None, Some(rows), Some(variance)) => {
            let cols = manifest.meta.patch_cols;
            let mean = Array2::from_shape_vec((rows, cols), params).map_err(|e| format_err(&bin, e.to_string()))?;
            Prior::Gaussian { mean, variance }
        }
        _ => return Err(format_err(&json, "manifest fields do not match the model kind")),
    };
    ScoreModel::from_parts(manifest.meta, prior)
}

fn model_base(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("partition{k}"))
}

/// Saves the three partition models as `dir/partition{0,1,2}.{bin,json}`.
pub fn save_models(dir: &Path, models: &[ScoreModel]) -> Result<()> {
    if models.len() != PARTITIONS {
        return Err(Error::invalid(format!("expected {PARTITIONS} models, got {}", models.len())));
    }
    for (k, m) in models.iter().enumerate() {
        save_model(&model_base(dir, k), m)?;
    }
    Ok(())
}

pub fn load_models(dir: &Path) -> Result<Vec<ScoreModel>> {
    (0..PARTITIONS).map(|k| load_model(&model_base(dir, k))).collect()
}

/// Geometric noise schedule used for training; reconstruction anneals over
/// the same range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub levels: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            levels: 10,
            sigma_min: 0.002,
            sigma_max: 0.05,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<SigmaSchedule> {
        make_schedule(self.levels, self.sigma_min, self.sigma_max)
    }
}

/// Default file locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Normal-dose training sinograms.
    #[serde(default)]
    pub shots: Vec<PathBuf>,
    /// Directory holding the partition checkpoints.
    #[serde(default)]
    pub models: Option<PathBuf>,
    /// Low-dose sinogram to restore.
    #[serde(default)]
    pub low_dose: Option<PathBuf>,
    /// Ground-truth sinogram for per-iteration PSNR logging.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Everything a run needs, as one JSON document. Missing sections take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: FanGeometry,
    pub dose: DoseSpec,
    /// PWLS calibration constant.
    pub eta: f64,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub recon: ReconConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: FanGeometry::default(),
            dose: DoseSpec::default(),
            eta: DEFAULT_ETA,
            schedule: ScheduleSpec::default(),
            train: TrainConfig::default(),
            recon: ReconConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON serialisation.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

/// Maps `[low, high]` linearly onto `[0, 65535]`, clamping and rounding.
pub fn window_to_u16(value: f64, low: f64, high: f64) -> u16 {
    let t = ((value - low) / (high - low)).clamp(0.0, 1.0);
    (t * 65535.0).round() as u16
}

fn check_window(low: f64, high: f64) -> Result<()> {
    if !(low.is_finite() && high.is_finite() && low < high) {
        return Err(Error::invalid(format!("display window needs low < high, got [{low}, {high}]")));
    }
    Ok(())
}

/// Writes a 16-bit grayscale PNG of `data` through the display window
/// `[low, high]`.
pub fn export_png(path: &Path, data: ArrayView2<f64>, low: f64, high: f64) -> Result<()> {
    check_window(low, high)?;
    let (h, w) = data.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot export an empty array"));
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let png_err = |e: png::EncodingError| format_err(path, e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = data
        .iter()
        .flat_map(|&v| window_to_u16(v, low, high).to_be_bytes())
        .collect();
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads back a 16-bit grayscale PNG.
pub fn read_png16(path: &Path) -> Result<Array2<u16>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let png_err = |e: png::DecodingError| format_err(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(format_err(path, "not a 16-bit grayscale PNG"));
    }
    let values = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Array2::from_shape_vec((info.height as usize, info.width as usize), values)
        .map_err(|e| format_err(path, e.to_string()))
}
