//! Command-line front end.
//!
//! Every command reads an optional JSON config with a `version` field;
//! unknown keys are rejected before any work starts. Failures print one
//! line `sceneflow: error[<kind>]: <reason>` to stderr and exit with 2
//! (validation), 3 (runtime) or 4 (numeric divergence).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::dataset::{Dataset, FrameCamera, Views};
use crate::error::{Error, Result};
use crate::formats::{write_pfm, write_png};
use crate::interp::{direct_time_blend, render_spacetime};
use crate::metrics::{evaluate, EvalReport, EvalSpec};
use crate::model::render_view;
use crate::synth::{generate_dataset, scene_from_meta, SynthConfig};
use crate::train::{load_checkpoint, train, TrainConfig, TrainResult};

pub const CONFIG_VERSION: u64 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sceneflow", version, about = "Space-time radiance fields with scene flow")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Make every output reproducible byte for byte (zero wall times in logs).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view to `rgb.png` and `depth.pfm`.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        /// Frame time; fractional values feed the time input directly.
        #[arg(long)]
        frame: f64,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render frames between `frame` and `frame + 1`.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        #[arg(long)]
        frame: usize,
        /// Comma-separated fractions in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        deltas: Vec<f64>,
        #[arg(long, value_enum, default_value_t = InterpMode::Both)]
        mode: InterpMode,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against dataset views and write a CSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Where the rendered camera comes from.
#[derive(Debug, Args)]
pub struct ViewArgs {
    /// JSON camera in the dataset manifest's per-frame format.
    #[arg(long, conflicts_with_all = ["data", "view"])]
    pub camera: Option<PathBuf>,
    /// Dataset whose view `--view` is used.
    #[arg(long, requires = "view")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub view: Option<usize>,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpMode {
    Splat,
    Blend,
    Both,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

/// Object keys of `value` absent from `template`, as dotted paths.
fn unknown_keys(value: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(t)) = (value, template) else { return };
    for (k, child) in v {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match t.get(k) {
            Some(tc) => unknown_keys(child, tc, &path, out),
            None => out.push(path),
        }
    }
}

/// Parses a versioned JSON config, listing every unrecognized key.
pub fn parse_config<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Validation(format!("malformed config: {e}")))?;
    let Value::Object(map) = &mut value else {
        return invalid("config must be a JSON object");
    };
    match map.remove("version") {
        Some(Value::Number(n)) if n.as_u64() == Some(CONFIG_VERSION) => {}
        Some(v) => return invalid(format!("unsupported config version {v}")),
        None => return invalid("config lacks a version field"),
    }
    let mut unknown = Vec::new();
    unknown_keys(&value, &serde_json::to_value(T::default())?, "", &mut unknown);
    if !unknown.is_empty() {
        return invalid(format!("unknown config keys: {}", unknown.join(", ")));
    }
    serde_json::from_value(value).map_err(|e| Error::Validation(format!("invalid config: {e}")))
}

pub fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => parse_config(&fs::read_to_string(p)?),
        None => Ok(T::default()),
    }
}

/// The config as a versioned JSON document.
pub fn config_json<T: Serialize>(cfg: &T) -> Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    if let Value::Object(map) = &mut v {
        map.insert("version".into(), CONFIG_VERSION.into());
    }
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    ds.write(out)?;
    Ok(ds)
}

/// Trains on the dataset at `data`, writing checkpoints, the loss log and
/// the resolved config into `out`.
pub fn cmd_train(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    let ds = Dataset::read(data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), config_json(cfg)?)?;
    train(&ds, cfg, Some(out))
}

fn views_of(ds: &Dataset, split: Split) -> Result<&Views> {
    match split {
        Split::Train => Ok(&ds.train),
        Split::Heldout => ds
            .heldout
            .as_ref()
            .ok_or_else(|| Error::Validation("dataset has no held-out views".into())),
    }
}

fn resolve_camera(v: &ViewArgs) -> Result<crate::geometry::Camera<f64>> {
    if let Some(path) = &v.camera {
        let fc: FrameCamera = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Validation(format!("invalid camera file: {e}")))?;
        return fc.camera();
    }
    let (Some(data), Some(k)) = (&v.data, v.view) else {
        return invalid("give --camera or --data with --view");
    };
    let ds = Dataset::read(data)?;
    let views = views_of(&ds, v.split)?;
    views
        .cameras
        .get(k)
        .cloned()
        .ok_or_else(|| Error::Validation(format!("view {k} out of range ({} views)", views.len())))
}

pub fn cmd_render(
    checkpoint: &Path,
    camera: &crate::geometry::Camera<f64>,
    frame: f64,
    samples: usize,
    out: &Path,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.model;
    let r = render_view(&model, camera, frame, model.bounds, samples)?;
    fs::create_dir_all(out)?;
    write_png(&out.join("rgb.png"), &r.image)?;
    write_pfm(&out.join("depth.pfm"), &r.depth)?;
    Ok(())
}

/// Writes `splat/%04d.png` and/or `blend/%04d.png`, one per fraction.
pub fn cmd_interpolate(
    checkpoint: &Path,
    camera: &crate::geometry::Camera<f64>,
    frame: usize,
    deltas: &[f64],
    mode: InterpMode,
    samples: usize,
    out: &Path,
) -> Result<()> {
    if let Some(d) = deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return invalid(format!("fraction {d} outside [0, 1]"));
    }
    let model = load_checkpoint(checkpoint)?.model;
    for (dir, on) in [
        ("splat", mode != InterpMode::Blend),
        ("blend", mode != InterpMode::Splat),
    ] {
        if !on {
            continue;
        }
        fs::create_dir_all(out.join(dir))?;
        for (k, &d) in deltas.iter().enumerate() {
            let img = if dir == "splat" {
                render_spacetime(&model, camera, frame, d, model.bounds, samples)?.image
            } else {
                direct_time_blend(&model, camera, frame, d, model.bounds, samples)?
            };
            write_png(&out.join(dir).join(format!("{k:04}.png")), &img)?;
        }
    }
    Ok(())
}

/// Scores `checkpoint` on a split of the dataset and writes the CSV report.
pub fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, spec: &EvalSpec, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?.model;
    let ds = Dataset::read(data)?;
    if model.frame_count != ds.frame_count {
        return invalid(format!(
            "checkpoint models {} frames, dataset has {}",
            model.frame_count, ds.frame_count
        ));
    }
    let scene = ds.meta.as_ref().map(scene_from_meta).transpose()?;
    let report = evaluate(&model, views_of(&ds, split)?, ds.bounds, scene.as_ref(), spec)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, report.to_csv())?;
    Ok(report)
}

/// Exit code and stderr kind for an error.
pub fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Validation(_) | Error::Json(_) | Error::Format(_) => (EXIT_VALIDATION, "validation"),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (EXIT_VALIDATION, "validation"),
        Error::Divergence(_) => (EXIT_DIVERGENCE, "divergence"),
        _ => (EXIT_RUNTIME, "runtime"),
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return invalid("--threads must be positive");
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = load_config(config.as_deref())?;
            cfg.validate()?;
            let ds = cmd_synth(&cfg, &out)?;
            println!("wrote {} frames to {}", ds.frame_count, out.display());
        }
        Command::Train { config, data, out } => {
            let mut cfg: TrainConfig = load_config(config.as_deref())?;
            cfg.deterministic |= cli.deterministic;
            let r = cmd_train(&cfg, &data, &out)?;
            let last = r.log.rows.last().map_or(f64::NAN, |row| row.total);
            println!("trained {} iterations, final loss {last:e}", cfg.iterations);
        }
        Command::Render {
            checkpoint,
            view,
            frame,
            samples,
            out,
        } => {
            let cam = resolve_camera(&view)?;
            cmd_render(&checkpoint, &cam, frame, samples, &out)?;
        }
        Command::Interpolate {
            checkpoint,
            view,
            frame,
            deltas,
            mode,
            samples,
            out,
        } => {
            let cam = resolve_camera(&view)?;
            cmd_interpolate(&checkpoint, &cam, frame, &deltas, mode, samples, &out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
            out,
        } => {
            let spec: EvalSpec = load_config(config.as_deref())?;
            let report = cmd_eval(&checkpoint, &data, split, &spec, &out)?;
            let a = report.aggregate();
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "psnr_full {} ssim_full {} psnr_dynamic {} ssim_dynamic {} flow_epe {} depth_rmse_aligned {}",
                show(a[0]),
                show(a[1]),
                show(a[2]),
                show(a[3]),
                show(a[4]),
                show(a[5])
            );
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("sceneflow: error[validation]: {}", first.trim_start_matches("error: "));
            return EXIT_VALIDATION;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("sceneflow: error[{kind}]: {msg}");
            code
        }
    }
}
