use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use phd_core::geometry::{make_phantom, radon_forward, FilterKind, PhantomKind};
use phd_core::io::{self, RunConfig};
use phd_core::metrics::{disk_mask, psnr, psnr_masked, MetricReport};
use phd_core::noise::{pwls_weights, simulate_low_dose};
use phd_core::sampler::reconstruct_with;
use phd_core::score::train;
use phd_core::{Error, FanGeometry};

#[derive(Parser)]
#[command(name = "phd", version, about = "Partitioned Hankel diffusion toolkit for low-dose CT sinograms")]
struct Cli {
    /// Run configuration (JSON); missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an analytic phantom image.
    Phantom(PhantomArgs),
    /// Forward-project an image into a sinogram.
    Project(ProjectArgs),
    /// Simulate a low-dose acquisition of a sinogram.
    Lowdose(LowdoseArgs),
    /// Train the three partition score models.
    Train(TrainArgs),
    /// Restore a low-dose sinogram and reconstruct the image.
    Reconstruct(ReconArgs),
    /// Compare two arrays.
    Metrics(MetricsArgs),
    /// Render an array as a 16-bit grayscale PNG.
    ExportPng(PngArgs),
    /// Print the default run configuration.
    Defaults,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// shepp-logan, uniform-disk or constant
    #[arg(long, default_value = "shepp-logan")]
    kind: String,
    /// Attenuation of the disk or constant phantom.
    #[arg(long, default_value_t = 1.0)]
    value: f64,
    /// Disk radius in pixels (default: half the image).
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    input: PathBuf,
    /// Defaults to `<input>_sino`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rescale the image so the largest line integral equals this value;
    /// 0 keeps the image as is.
    #[arg(long, default_value_t = 4.0)]
    max_line_integral: f64,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    detectors: Option<usize>,
}

#[derive(Args)]
struct LowdoseArgs {
    #[arg(long)]
    input: PathBuf,
    /// Defaults to `<input>_ld`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    intensity: Option<f64>,
    #[arg(long)]
    background: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Normal-dose training sinograms.
    #[arg(long, num_args = 1..)]
    shots: Vec<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    models: Option<PathBuf>,
    /// Output sinogram; the image goes to `<out>_image`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Normal-dose sinogram for per-iteration PSNR logging.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    corrector_steps: Option<usize>,
    /// Source intensity used for the PWLS weights.
    #[arg(long)]
    intensity: Option<f64>,
    /// ram-lak or hann
    #[arg(long)]
    filter: Option<String>,
    /// Side of the reconstructed image in pixels, over the configured field
    /// of view.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Also report PSNR inside a centred disk of this radius fraction.
    #[arg(long)]
    roi: Option<f64>,
}

#[derive(Args)]
struct PngArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    low: f64,
    #[arg(long, allow_hyphen_values = true)]
    high: f64,
}

/// Collects the run-record printed on stdout.
struct Record {
    command: &'static str,
    inputs: Vec<Value>,
    outputs: Vec<String>,
    timings: Map<String, Value>,
    seed: Option<u64>,
    result: Value,
}

impl Record {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Map::new(),
            seed: None,
            result: Value::Null,
        }
    }

    fn input(&mut self, path: &Path) -> phd_core::Result<()> {
        let hash = io::file_sha256(path)?;
        self.inputs.push(json!({ "path": path.display().to_string(), "sha256": hash }));
        Ok(())
    }

    fn raw_input(&mut self, base: &Path) -> phd_core::Result<()> {
        let (raw, side) = io::raw_paths(base);
        self.input(&raw)?;
        self.input(&side)
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings
            .insert(phase.to_string(), json!(start.elapsed().as_secs_f64() * 1e3));
        out
    }

    fn finish(self, config: &RunConfig) -> phd_core::Result<Value> {
        Ok(json!({
            "command": self.command,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config_hash": config.hash()?,
            "seed": self.seed,
            "timings_ms": self.timings,
            "result": self.result,
        }))
    }
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut s = io::base_path(base).into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn required(path: Option<PathBuf>, what: &str) -> phd_core::Result<PathBuf> {
    path.ok_or_else(|| Error::InvalidParameter(format!("{what} is required (flag or config paths)")))
}

/// The configured geometry resized to `size` pixels over the same field of
/// view.
fn geometry_for(config: &RunConfig, size: usize) -> FanGeometry {
    let mut geom = config.geometry.clone();
    if geom.image_size != size {
        geom.pixel_spacing *= geom.image_size as f64 / size as f64;
        geom.image_size = size;
    }
    geom
}

fn run(cli: Cli) -> phd_core::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut rec = match &cli.command {
        Command::Defaults => {
            emit(&config.to_json()?);
            return Ok(());
        }
        Command::Phantom(_) => Record::new("phantom"),
        Command::Project(_) => Record::new("project"),
        Command::Lowdose(_) => Record::new("lowdose"),
        Command::Train(_) => Record::new("train"),
        Command::Reconstruct(_) => Record::new("reconstruct"),
        Command::Metrics(_) => Record::new("metrics"),
        Command::ExportPng(_) => Record::new("export-png"),
    };
    if let Some(path) = &cli.config {
        rec.input(path)?;
    }

    match cli.command {
        Command::Defaults => unreachable!("handled above"),
        Command::Phantom(a) => {
            let kind = PhantomKind::parse(&a.kind, a.value, a.radius, a.size)?;
            let img = rec.time("phantom", || make_phantom(a.size, kind))?;
            io::write_image(&a.out, &img, 1.0)?;
            rec.output(&a.out);
        }
        Command::Project(a) => {
            rec.raw_input(&a.input)?;
            let (img, side) = io::read_image(&a.input)?;
            let mut geom = geometry_for(&config, img.width());
            if let Some(v) = a.views {
                geom.num_views = v;
            }
            if let Some(d) = a.detectors {
                geom.num_detectors = d;
            }
            config.geometry = geom.clone();
            let raw = rec.time("project", || radon_forward(&img, &geom))?;
            let peak = raw.max();
            let factor = if a.max_line_integral > 0.0 && peak > 0.0 {
                a.max_line_integral / peak
            } else {
                1.0
            };
            let sino = raw.scaled(factor);
            let out = a.out.unwrap_or_else(|| suffixed(&a.input, "_sino"));
            io::write_sinogram(&out, &sino, side.scale * factor)?;
            rec.output(&out);
            // the image in the units of the sinogram, for image-domain metrics
            let truth = suffixed(&out, "_image");
            io::write_image(&truth, &img.scaled(factor), side.scale * factor)?;
            rec.output(&truth);
            rec.result = json!({ "scale": factor });
        }
        Command::Lowdose(a) => {
            rec.raw_input(&a.input)?;
            if let Some(v) = a.intensity {
                config.dose.source_intensity = v;
            }
            if let Some(v) = a.background {
                config.dose.background = v;
            }
            if let Some(v) = a.seed {
                config.dose.seed = v;
            }
            rec.seed = Some(config.dose.seed);
            let (x, side) = io::read_sinogram(&a.input)?;
            let y = rec.time("lowdose", || simulate_low_dose(&x, &config.dose))?;
            let out = a.out.unwrap_or_else(|| suffixed(&a.input, "_ld"));
            io::write_sinogram(&out, &y, side.scale)?;
            rec.output(&out);
        }
        Command::Train(a) => {
            let shots = if a.shots.is_empty() { config.paths.shots.clone() } else { a.shots };
            if shots.is_empty() {
                return Err(Error::InvalidParameter("train needs at least one --shots file".into()));
            }
            if let Some(v) = a.steps {
                config.train.steps = v;
            }
            if let Some(v) = a.batch_size {
                config.train.batch_size = v;
            }
            if let Some(v) = a.hidden {
                config.train.hidden = v;
            }
            if let Some(v) = a.seed {
                config.train.seed = v;
            }
            rec.seed = Some(config.train.seed);
            let out = required(a.out.or_else(|| config.paths.models.clone()), "--out")?;
            let mut sinos = Vec::with_capacity(shots.len());
            for s in &shots {
                rec.raw_input(s)?;
                sinos.push(io::read_sinogram(s)?.0);
            }
            let schedule = config.schedule.build()?;
            let trained = rec.time("train", || train(&sinos, &config.train, &schedule))?;
            io::save_models(&out, &trained.models)?;
            rec.output(&out);
            let smooth = |l: &[f64], end: usize| {
                let w = &l[end.saturating_sub(100)..end];
                if w.is_empty() {
                    None
                } else {
                    Some(w.iter().sum::<f64>() / w.len() as f64)
                }
            };
            let losses: Vec<Value> = trained
                .losses
                .iter()
                .map(|l| json!({ "first": smooth(l, l.len().min(100)), "last": smooth(l, l.len()) }))
                .collect();
            rec.result = json!({ "scale": trained.scale, "smoothed_loss": losses });
        }
        Command::Reconstruct(a) => {
            let input = required(a.input.or_else(|| config.paths.low_dose.clone()), "--input")?;
            let models_dir = required(a.models.or_else(|| config.paths.models.clone()), "--models")?;
            let out = required(a.out.or_else(|| config.paths.output.clone()), "--out")?;
            let truth_path = a.truth.or_else(|| config.paths.truth.clone());
            if let Some(v) = a.iterations {
                config.recon.iterations = v;
            }
            if let Some(v) = a.corrector_steps {
                config.recon.corrector_steps = v;
            }
            if let Some(v) = a.intensity {
                config.dose.source_intensity = v;
            }
            if let Some(f) = &a.filter {
                config.recon.filter = FilterKind::parse(f)?;
            }
            if let Some(v) = a.seed {
                config.recon.seed = v;
            }
            rec.seed = Some(config.recon.seed);
            rec.raw_input(&input)?;
            let (y, side) = io::read_sinogram(&input)?;
            let models = io::load_models(&models_dir)?;
            for k in 0..models.len() {
                let base = models_dir.join(format!("partition{k}"));
                rec.input(&suffixed(&base, ".bin"))?;
                rec.input(&suffixed(&base, ".json"))?;
            }
            let truth = match &truth_path {
                Some(p) => {
                    rec.raw_input(p)?;
                    Some(io::read_sinogram(p)?.0)
                }
                None => None,
            };
            // the bin counts follow the sinogram; distances and detector width
            // come from the configuration
            let size = a.image_size.unwrap_or(config.geometry.image_size);
            config.geometry = geometry_for(&config, size);
            config.geometry.num_views = y.num_views();
            config.geometry.num_detectors = y.num_detectors();
            let weights = pwls_weights(&y, &config.dose, config.eta)?;
            let (x, image) = rec.time("reconstruct", || {
                reconstruct_with(&y, &models, &weights, &config.geometry, &config.recon, |r| {
                    let p = truth.as_ref().and_then(|t| psnr(t.view(), r.sinogram.view()).ok());
                    let line = json!({
                        "iteration": r.iteration,
                        "sigma": r.sigma,
                        "psnr_sinogram": p.filter(|v| v.is_finite()),
                    });
                    eprintln!("{line}");
                })
            })?;
            io::write_sinogram(&out, &x, side.scale)?;
            rec.output(&out);
            let image_out = suffixed(&out, "_image");
            io::write_image(&image_out, &image, side.scale)?;
            rec.output(&image_out);
        }
        Command::Metrics(a) => {
            rec.raw_input(&a.reference)?;
            rec.raw_input(&a.test)?;
            let (r, rs) = io::read_raw(&a.reference)?;
            let (t, ts) = io::read_raw(&a.test)?;
            if rs.kind != ts.kind {
                return Err(Error::DimensionMismatch(format!(
                    "comparing a {:?} with a {:?}",
                    rs.kind, ts.kind
                )));
            }
            let report = MetricReport::compute(r.view(), t.view())?;
            let mut value = serde_json::to_value(&report)?;
            value["domain"] = serde_json::to_value(rs.kind)?;
            if let Some(frac) = a.roi {
                let mask = disk_mask(r.nrows(), r.ncols(), frac);
                let p = psnr_masked(r.view(), t.view(), mask.view())?;
                value["psnr_roi"] = json!(p.is_finite().then_some(p));
            }
            rec.result = value;
        }
        Command::ExportPng(a) => {
            rec.raw_input(&a.input)?;
            let (data, _) = io::read_raw(&a.input)?;
            io::export_png(&a.out, data.view(), a.low, a.high)?;
            rec.output(&a.out);
        }
    }
    emit(&serde_json::to_string(&rec.finish(&config)?)?);
    Ok(())
}

/// Prints a line on stdout, ignoring a closed pipe.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidParameter(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
