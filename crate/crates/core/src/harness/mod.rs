//! The `pbr` command line: dataset synthesis, training, evaluation,
//! single-image inference, plotting and the self-test.
//!
//! Exit codes: 0 success, 1 invalid arguments/configuration/input, 2 runtime failure.

pub mod svg;

use crate::detector::{infer, infer_batch, read_log_csv, train, write_log_csv, Detector, DetectorConfig, DetectorError, EpochLog};
use crate::evalkit::{evaluate_stages, report_csv, FullReport, GtBox};
use crate::synthdata::{generate_split, read_annotations, read_dataset, read_image, write_dataset, DataError, SceneSpec};
use crate::tensor::{weights_digest, TensorError, WEIGHTS_FILE};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const CONFIG_ECHO_FILE: &str = "config_echo.json";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const THREADS_ENV: &str = "PBR_THREADS";

/// Everything a training run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model, training and inference settings.
    pub detector: DetectorConfig,
    /// Dataset directory for training (default `data/train`).
    pub train_data: PathBuf,
    /// Dataset directory for per-epoch validation IoU (default `data/val`).
    pub val_data: PathBuf,
    /// Run directory; `train --out` overrides it (default `runs/default`).
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            detector: DetectorConfig::default(),
            train_data: "data/train".into(),
            val_data: "data/val".into(),
            output_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; errors name the offending JSON path.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Validation(format!("config field '{path}': {}", e.into_inner()))
        })?;
        cfg.detector.validate_at("detector")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::Config { .. } | DetectorError::Input(_) => CliError::Validation(e.to_string()),
            DetectorError::Data(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "pbr", version, about = "Multi-stage boundary refinement detector on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val datasets into OUT/train and OUT/val.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        /// Train split seed; the val split uses seed + 1.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a detector from a run config; writes the checkpoint and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; writes report.json/report.csv and plots.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect objects in one PPM image and draw every stage's boxes to an SVG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit plots from an eval directory (and its training log, if present).
    Report {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the geometry, oracle, gradient and identity suites.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Provenance written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub started_unix_secs: u64,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// SHA-256 digests of produced files.
    pub digests: BTreeMap<String, String>,
}

impl RunMeta {
    fn new(command: &str, seed: Option<u64>) -> Self {
        RunMeta {
            command: command.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
            started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            timings: BTreeMap::new(),
            digests: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(phase.into(), start.elapsed().as_secs_f64());
        out
    }
}

fn runtime(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(runtime(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(path, text + "\n")
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(runtime(path))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(runtime(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Configures the global thread pool from `PBR_THREADS` (unset: one per core).
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first) and runs the subcommand. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match init_threads().and_then(|_| dispatch(cli.cmd)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { out, train, val, seed } => synth(&out, train, val, seed),
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            train_run(&cfg, out.as_deref()).map(|_| ())
        }
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, &out).map(|_| ()),
        Command::Infer { ckpt, image, out } => infer_image(&ckpt, &image, &out),
        Command::Report { from, out } => report(&from, &out),
        Command::Selftest { seed } => selftest(seed),
    }
}

#[derive(Serialize)]
struct SynthEcho {
    train: SceneSpec,
    val: SceneSpec,
    train_count: usize,
    val_count: usize,
}

pub fn synth(out: &Path, n_train: usize, n_val: usize, seed: u64) -> Result<(), CliError> {
    let val_seed = seed.checked_add(1).ok_or_else(|| CliError::Validation(format!("seed {seed} leaves no room for the val seed")))?;
    let echo = SynthEcho {
        train: SceneSpec { seed, ..SceneSpec::default() },
        val: SceneSpec { seed: val_seed, ..SceneSpec::default() },
        train_count: n_train,
        val_count: n_val,
    };
    create_dir(out)?;
    write_json(&out.join(CONFIG_ECHO_FILE), &echo)?;
    let mut meta = RunMeta::new("synth", Some(seed));
    for (name, spec, n) in [("train", &echo.train, n_train), ("val", &echo.val, n_val)] {
        let scenes = meta.time(&format!("generate_{name}"), || generate_split(spec, n))?;
        let dir = out.join(name);
        meta.time(&format!("write_{name}"), || write_dataset(&dir, &scenes))?;
        meta.digests.insert(format!("{name}/annotations.json"), sha256_file(&dir.join(crate::synthdata::ANNOTATIONS_FILE))?);
        log::info!("wrote {n} {name} scenes to {}", dir.display());
    }
    write_json(&out.join(RUN_META_FILE), &meta)
}

/// Trains per `cfg`, writing into `out` (or `cfg.output_dir`). Returns the run directory.
pub fn train_run(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf, CliError> {
    cfg.detector.validate_at("detector")?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out)?;
    let echo = RunConfig { output_dir: out.clone(), ..cfg.clone() };
    write_json(&out.join(CONFIG_ECHO_FILE), &echo)?;
    let mut meta = RunMeta::new("train", Some(cfg.detector.seed));
    let train_set = meta.time("load_train", || read_dataset(&cfg.train_data))?;
    let val_set = meta.time("load_val", || read_dataset(&cfg.val_data))?;
    let log_path = out.join(TRAIN_LOG);
    let mut rows: Vec<EpochLog> = Vec::new();
    let start = Instant::now();
    let (det, logs) = train(&cfg.detector, &train_set, &val_set, |_, row| {
        log::info!(
            "epoch {} step {} loss {:.4} (cls {:.4} box {:.4} ref {:?}) val mIoU {:?} [{:.0}s]",
            row.epoch,
            row.step,
            row.loss_total,
            row.loss_cls,
            row.loss_box,
            row.loss_ref,
            row.miou,
            start.elapsed().as_secs_f64()
        );
        rows.push(row.clone());
        if let Err(e) = fs::write(&log_path, write_log_csv(&rows)) {
            log::warn!("{}: {e}", log_path.display());
        }
    })?;
    meta.timings.insert("train".into(), start.elapsed().as_secs_f64());
    det.save(&out)?;
    write_file(&log_path, write_log_csv(&logs))?;
    write_file(&out.join("loss.svg"), svg::loss(&logs))?;
    meta.digests.insert(WEIGHTS_FILE.into(), weights_digest(&out)?);
    write_json(&out.join(RUN_META_FILE), &meta)?;
    Ok(out)
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    detector: &'a DetectorConfig,
}

/// Runs inference over a dataset and writes `report.json`, `report.csv` and plots.
pub fn eval(ckpt: &Path, data: &Path, out: &Path) -> Result<FullReport, CliError> {
    let mut meta = RunMeta::new("eval", None);
    let det = meta.time("load_model", || Detector::load(ckpt))?;
    meta.seed = Some(det.config.seed);
    create_dir(out)?;
    write_json(&out.join(CONFIG_ECHO_FILE), &EvalEcho { ckpt, data, detector: &det.config })?;
    let (categories, _) = read_annotations(data)?;
    if categories.len() != det.config.num_categories {
        return Err(CliError::Validation(format!(
            "dataset has {} categories, model has {}",
            categories.len(),
            det.config.num_categories
        )));
    }
    let scenes = meta.time("load_data", || read_dataset(data))?;
    if let Some(s) = scenes.iter().find(|s| s.image.width != det.config.image_size || s.image.height != det.config.image_size) {
        return Err(CliError::Validation(format!(
            "{}: {}x{} image, model expects {}",
            s.annotation.file, s.image.width, s.image.height, det.config.image_size
        )));
    }
    let images: Vec<_> = scenes.iter().map(|s| s.image.to_tensor()).collect();
    let dets = meta.time("inference", || infer_batch(&det, &images))?;
    let pairs: Vec<_> = dets
        .iter()
        .zip(&scenes)
        .map(|(d, s)| {
            let gts = s.annotation.objects.iter().map(|o| GtBox { bbox: o.bbox, category: o.category_id }).collect();
            (d.iter().map(|x| x.staged()).collect(), gts)
        })
        .collect();
    let report = meta.time("evaluate", || evaluate_stages(&pairs, &categories));
    write_json(&out.join(REPORT_JSON), &report)?;
    write_file(&out.join(REPORT_CSV), report_csv(&report))?;
    emit_report_plots(&report, out)?;
    meta.digests.insert(REPORT_JSON.into(), sha256_file(&out.join(REPORT_JSON))?);
    write_json(&out.join(RUN_META_FILE), &meta)?;
    Ok(report)
}

fn emit_report_plots(report: &FullReport, out: &Path) -> Result<(), CliError> {
    write_file(&out.join("stage_iou.svg"), svg::stage_iou(report))?;
    write_file(&out.join("pr_curves.svg"), svg::pr_curves(report))
}

pub fn infer_image(ckpt: &Path, image: &Path, out: &Path) -> Result<(), CliError> {
    let det = Detector::load(ckpt)?;
    let img = read_image(image)?;
    let n = det.config.image_size;
    if img.width != n || img.height != n {
        return Err(CliError::Validation(format!("{}: {}x{} image, model expects {n}x{n}", image.display(), img.width, img.height)));
    }
    let dets = infer(&det, &img.to_tensor())?;
    for d in &dets {
        let b = d.final_box();
        println!("{} {:.4} {:.2} {:.2} {:.2} {:.2}", crate::synthdata::CATEGORIES.get(d.category).unwrap_or(&"?"), d.score, b.x1, b.y1, b.x2, b.y2);
    }
    let svg = svg::detections(&img, &dets, 4.0).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, svg)
}

#[derive(Serialize)]
struct ReportEcho<'a> {
    from: &'a Path,
}

/// Plots from `from/report.json` and, when present, `from/train_log.csv`.
pub fn report(from: &Path, out: &Path) -> Result<(), CliError> {
    let path = from.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(runtime(&path))?;
    let report: FullReport =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let log_path = from.join(TRAIN_LOG);
    let logs = if log_path.exists() {
        let text = fs::read_to_string(&log_path).map_err(runtime(&log_path))?;
        read_log_csv(&text).map_err(|e| CliError::Validation(format!("{}: {e}", log_path.display())))?
    } else {
        Vec::new()
    };
    create_dir(out)?;
    write_json(&out.join(CONFIG_ECHO_FILE), &ReportEcho { from })?;
    let meta = RunMeta::new("report", None);
    emit_report_plots(&report, out)?;
    write_file(&out.join("loss.svg"), svg::loss(&logs))?;
    write_json(&out.join(RUN_META_FILE), &meta)
}

pub fn selftest(seed: u64) -> Result<(), CliError> {
    let suites = crate::verify::run_all(seed);
    for s in &suites {
        print!("{s}");
    }
    let failed: Vec<&str> = suites.iter().filter(|s| !s.passed()).map(|s| s.name).collect();
    if failed.is_empty() {
        println!("selftest: all {} suites passed", suites.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("selftest failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_its_path() {
        let e = RunConfig::from_json(r#"{"detector": {"optim": {"lr": 0.1, "momentun": 0.9}}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("detector.optim"), "{e}");
    }

    #[test]
    fn semantic_violation_names_its_path() {
        let e = RunConfig::from_json(r#"{"detector": {"optim": {"batch_size": 0}}}"#).unwrap_err();
        assert!(e.to_string().contains("detector.optim.batch_size"), "{e}");
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn bad_usage_exits_1_and_help_exits_0() {
        assert_eq!(run(["pbr", "frobnicate"]), 1);
        assert_eq!(run(["pbr", "train"]), 1);
        assert_eq!(run(["pbr", "--help"]), 0);
    }

    #[test]
    fn log_csv_round_trip() {
        let rows = vec![EpochLog {
            epoch: 1,
            step: 10,
            loss_total: 1.5,
            loss_cls: 0.5,
            loss_box: 0.25,
            loss_ref: vec![0.5, 0.25],
            miou: vec![Some(0.5), None, Some(0.75)],
        }];
        assert_eq!(read_log_csv(&write_log_csv(&rows)).unwrap(), rows);
        assert!(read_log_csv("nope\n").is_err());
    }
}
