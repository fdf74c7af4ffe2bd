//! Command-line surface: dataset generation, training, evaluation, ablation
//! sweeps and standalone mask refinement.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric, 5 artifact mismatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::fsutil::atomic_write;
use crate::mask::{AnnotationMode, ProbMask};
use crate::metrics::MetricMeans;
use crate::models::{ModelBundle, ModelError};
use crate::pseudolabel::{self, TrustBand};
use crate::synthdata::{self, DatasetConfig, SynthError};
use crate::trainer::{self, Axis, ModelKind, Prepared, RunOptions, TrainConfig, TrainError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_ARTIFACT: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "scaler", version, about = "Label-deficient concealed object segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Run the full training procedure.
    Train(TrainArgs),
    /// Evaluate one model of a checkpoint.
    Eval(EvalArgs),
    /// Run the full configuration plus one run per ablation axis.
    Ablate(AblateArgs),
    /// Apply a pseudo-label operation to mask files.
    RefineMasks(RefineArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training images.
    #[arg(long, default_value_t = 160)]
    pub n: usize,
    /// Number of test images (default: 40% of --n).
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub contrast: Option<f64>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw per-image contrast from the auxiliary (high-contrast) distribution.
    #[arg(long)]
    pub aux_distribution: bool,
    #[arg(long, value_enum, default_value_t = AnnotationArg::Point)]
    pub annotation: AnnotationArg,
    #[arg(long, default_value_t = 0.125)]
    pub labeled_fraction: f64,
    /// Config file supplying scene keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AnnotationArg {
    Point,
    Scribble,
}

impl From<AnnotationArg> for AnnotationMode {
    fn from(a: AnnotationArg) -> Self {
        match a {
            AnnotationArg::Point => AnnotationMode::Point,
            AnnotationArg::Scribble => AnnotationMode::Scribble,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelArg {
    Student,
    Teacher,
    Generalist,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A model directory, a training output directory, or a checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Per-sample CSV destination; the mean is always printed as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated axes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub axes: Vec<Axis>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RefineOp {
    Entropy,
    Uncertainty,
    Trust,
    Fuse,
    Consensus,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Mask directory; repeat for fuse (two or more) and consensus (exactly two).
    #[arg(long = "masks", required = true)]
    pub masks: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub op: RefineOp,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub trust_low: f64,
    #[arg(long, default_value_t = 0.9)]
    pub trust_high: f64,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::Io { .. } | SynthError::Format { .. } => EXIT_IO,
            SynthError::Spec(_) | SynthError::Split(_) => EXIT_USAGE,
            _ => EXIT_NUMERIC,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Io { .. } => EXIT_IO,
            ModelError::Artifact { .. } | ModelError::ParamMismatch(_) | ModelError::ImageShape(_) => EXIT_ARTIFACT,
            _ => EXIT_NUMERIC,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Synth(e) => e.into(),
            TrainError::Model(e) => e.into(),
            TrainError::Config(_) | TrainError::NoLabeledData => Self::usage(e.to_string()),
            TrainError::Io { .. } => Self { code: EXIT_IO, message: e.to_string() },
            TrainError::Artifact { .. } => Self { code: EXIT_ARTIFACT, message: e.to_string() },
            other => Self { code: EXIT_NUMERIC, message: other.to_string() },
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Messages go to standard error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::RefineMasks(a) => refine_masks(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RunConfig::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    atomic_write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut scene = load_config(a.config.as_deref())?.scene;
    if let Some(c) = a.contrast {
        scene.contrast = c;
    }
    if let Some(s) = a.side {
        scene.side = s;
    }
    let cfg = DatasetConfig {
        n_train: a.n,
        n_test: a.n_test.unwrap_or(a.n * 2 / 5),
        scene,
        aux: a.aux_distribution,
        annotation: a.annotation.into(),
        labeled_fraction: a.labeled_fraction,
        seed: a.seed,
    };
    let ds = synthdata::generate(&cfg)?;
    synthdata::write_dataset(&a.out, &ds)?;
    Ok(())
}

/// Train with `cfg`, echoing the effective config into `out`.
pub fn train_run(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<trainer::TrainOutcome, CliError> {
    cfg.train.validate()?;
    let ds = synthdata::read_dataset(data)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let opts = RunOptions { out_dir: Some(out.to_path_buf()), resume, stop_after: None };
    Ok(trainer::train(&ds, &cfg.train, &opts)?)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let outcome = train_run(&cfg, &a.data, &a.out, a.resume)?;
    if let Some(m) = outcome.metrics {
        for (name, s) in [("student", &m.student), ("teacher", &m.teacher), ("generalist", &m.generalist)] {
            let t = s.test.mean;
            println!(
                "{name:<10} test mae {:.4} f_beta {:.4} e_phi {:.4} s_alpha {:.4}",
                t.mae, t.f_beta, t.e_phi, t.s_alpha
            );
        }
    }
    Ok(())
}

fn resolve_checkpoint(dir: &Path) -> PathBuf {
    for candidate in [dir.to_path_buf(), dir.join("model"), dir.join("checkpoints").join("latest")] {
        if candidate.join("arch.json").exists() {
            return candidate;
        }
    }
    dir.to_path_buf()
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let dir = resolve_checkpoint(&a.checkpoint);
    let bundle = ModelBundle::load(&dir)?;
    let ds = synthdata::read_dataset(&a.data)?;
    let prepared = Prepared::new(&ds, &TrainConfig::default())?;
    let ids = match a.split {
        SplitArg::Train => &ds.manifest.train,
        SplitArg::Test => &ds.manifest.test,
    };
    if ids.is_empty() {
        return Err(CliError::usage("the requested split is empty"));
    }
    let samples = prepared.samples(&ds, ids);
    let kind = match a.model {
        ModelArg::Student => ModelKind::Student,
        ModelArg::Teacher => ModelKind::Teacher,
        ModelArg::Generalist => ModelKind::Generalist,
    };
    let report = trainer::evaluate_model(&bundle, kind, &samples).map_err(|e| match e {
        TrainError::Model(ModelError::Autodiff(_)) => {
            CliError { code: EXIT_ARTIFACT, message: format!("checkpoint does not fit the data: {e}") }
        }
        other => other.into(),
    })?;
    if let Some(out) = &a.out {
        write_file(out, report.to_csv_string().as_bytes())?;
    }
    println!("{}", serde_json::to_string(&report.mean).expect("means serialize"));
    Ok(())
}

#[derive(Serialize)]
struct TableRow<'a> {
    run: &'a str,
    mae: f64,
    f_beta: f64,
    e_phi: f64,
    s_alpha: f64,
    delta_mae: f64,
    delta_f_beta: f64,
    delta_e_phi: f64,
    delta_s_alpha: f64,
}

pub const TABLE_COLUMNS: [&str; 9] =
    ["run", "mae", "f_beta", "e_phi", "s_alpha", "delta_mae", "delta_f_beta", "delta_e_phi", "delta_s_alpha"];

fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let base = load_config(a.config.as_deref())?;
    let mut axes = a.axes.clone();
    axes.sort();
    axes.dedup();
    let student_test = |o: trainer::TrainOutcome| -> Result<MetricMeans, CliError> {
        Ok(o.metrics.ok_or_else(|| CliError::usage("run stopped early"))?.student.test.mean)
    };
    let full = student_test(train_run(&base, &a.data, &a.out.join("full"), false)?)?;
    let mut rows = vec![("full".to_string(), full)];
    for axis in axes {
        let mut cfg = base.clone();
        axis.apply(&mut cfg.train);
        rows.push((axis.name().to_string(), student_test(train_run(&cfg, &a.data, &a.out.join(axis.name()), false)?)?));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (run, m) in &rows {
        w.serialize(TableRow {
            run,
            mae: m.mae,
            f_beta: m.f_beta,
            e_phi: m.e_phi,
            s_alpha: m.s_alpha,
            delta_mae: m.mae - full.mae,
            delta_f_beta: m.f_beta - full.f_beta,
            delta_e_phi: m.e_phi - full.e_phi,
            delta_s_alpha: m.s_alpha - full.s_alpha,
        })
        .expect("in-memory csv");
    }
    let bytes = w.into_inner().expect("in-memory csv");
    write_file(&a.out.join("table.csv"), &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

/// `*.bin` file names of a mask directory, sorted.
fn mask_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".bin") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn read_masks(dir: &Path) -> Result<Vec<(String, ProbMask)>, CliError> {
    mask_files(dir)?.into_iter().map(|n| Ok((n.clone(), synthdata::read_mask(&dir.join(&n))?))).collect()
}

/// Same-named masks across several directories; names missing from any directory are an error.
fn read_aligned(dirs: &[PathBuf]) -> Result<Vec<(String, Vec<ProbMask>)>, CliError> {
    let names = mask_files(&dirs[0])?;
    for d in &dirs[1..] {
        if mask_files(d)? != names {
            return Err(CliError::usage(format!(
                "{} and {} hold different mask files",
                dirs[0].display(),
                d.display()
            )));
        }
    }
    names
        .into_iter()
        .map(|n| {
            let masks = dirs.iter().map(|d| synthdata::read_mask(&d.join(&n))).collect::<Result<Vec<_>, _>>()?;
            Ok((n, masks))
        })
        .collect()
}

fn mismatch(name: &str, e: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_ARTIFACT, message: format!("{name}: {e}") }
}

fn refine_masks(a: RefineArgs) -> Result<(), CliError> {
    let needs = |ok: bool, what: &str| if ok { Ok(()) } else { Err(CliError::usage(format!("--op requires {what}"))) };
    match a.op {
        RefineOp::Consensus => needs(a.masks.len() == 2, "exactly two --masks directories")?,
        RefineOp::Fuse => needs(a.masks.len() >= 2, "at least two --masks directories")?,
        _ => needs(a.masks.len() == 1, "exactly one --masks directory")?,
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let write = |name: &str, m: &ProbMask| -> Result<(), CliError> { Ok(synthdata::write_mask(&a.out.join(name), m)?) };
    match a.op {
        RefineOp::Entropy => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["file", "entropy"]).expect("in-memory csv");
            for (name, m) in read_masks(&a.masks[0])? {
                w.write_record([name.clone(), pseudolabel::entropy(&m).to_string()]).expect("in-memory csv");
                write(&name, &pseudolabel::pixel_entropy(&m))?;
            }
            write_file(&a.out.join("entropy.csv"), &w.into_inner().expect("in-memory csv"))?;
        }
        RefineOp::Uncertainty => {
            for (name, m) in read_masks(&a.masks[0])? {
                write(&name, &pseudolabel::uncertainty(&m))?;
            }
        }
        RefineOp::Trust => {
            let band = TrustBand { low: a.trust_low, high: a.trust_high };
            if !(0.0 <= band.low && band.low < band.high && band.high <= 1.0) {
                return Err(CliError::usage("trust band must satisfy 0 <= low < high <= 1"));
            }
            for (name, m) in read_masks(&a.masks[0])? {
                write(&name, &pseudolabel::trust_mask(&m, band))?;
            }
        }
        RefineOp::Fuse => {
            for (name, masks) in read_aligned(&a.masks)? {
                write(&name, &pseudolabel::average(&masks).map_err(|e| mismatch(&name, e))?)?;
            }
        }
        RefineOp::Consensus => {
            for (name, masks) in read_aligned(&a.masks)? {
                write(&name, &pseudolabel::consensus(&masks[0], &masks[1]).map_err(|e| mismatch(&name, e))?)?;
            }
        }
    }
    Ok(())
}
