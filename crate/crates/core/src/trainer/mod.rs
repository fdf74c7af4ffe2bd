//! The three-stage procedure: initialization, segmenter warm-up, and
//! alternating mutual enhancement, with checkpoints and an exact resume.

mod config;
mod steps;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{lr_schedule, Axis, TrainConfig};
pub use steps::{
    fused_label, noisy_oracle_label, prompt_for, run_phase1_step, run_phase2_step, supervised_step, StepPos,
    TrainSample, Trainee,
};

use crate::augment::AugmentError;
use crate::autodiff::AutodiffError;
use crate::fsutil::{atomic_write, replace_dir};
use crate::losses::{LossError, LossReport, Mode};
use crate::mask::{ProbMask, SparseAnnotation};
use crate::metrics::{MetricError, MetricMeans, MetricReport};
use crate::models::{EmaConfig, MaskPredictor, ModelBundle, ModelError, SegmenterArch};
use crate::pseudolabel::PseudoLabelError;
use crate::seeds::{self, tag};
use crate::synthdata::{self, Dataset, DatasetConfig, SynthError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("phase isolation violated: {0}")]
    PhaseIsolation(String),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no labelled training sample")]
    NoLabeledData,
    #[error("internal: {0}")]
    Internal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl TrainError {
    /// Tags a numeric failure with the step that produced it.
    fn at(self, stage: &str, epoch: usize, step: usize) -> Self {
        match self {
            TrainError::Numeric(m) => TrainError::Numeric(format!("{stage} epoch {epoch} step {step}: {m}")),
            other => other,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Student,
    Teacher,
    Generalist,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "student" => Ok(ModelKind::Student),
            "teacher" => Ok(ModelKind::Teacher),
            "generalist" => Ok(ModelKind::Generalist),
            other => Err(format!("unknown model '{other}' (student|teacher|generalist)")),
        }
    }
}

/// Last completed point of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Position {
    Start,
    Stage1,
    Stage2,
    Alternation(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
}

/// Resumable training state, stored next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub position: Position,
    /// Stage the run is in (1, 2 or 3).
    pub stage: u8,
    pub phase: Option<Phase>,
    pub epoch: usize,
    pub step: usize,
    /// Number of generalist updates that invalidated the fused labels.
    pub generalist_version: u64,
    pub log_records: usize,
    pub stage_metrics: Vec<StageMetrics>,
    /// All randomness derives from this seed (see `seeds`).
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub student: MetricMeans,
    pub teacher: MetricMeans,
    pub generalist: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub phase: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alternation: Option<usize>,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: MetricReport,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub student: SplitMetrics,
    pub teacher: SplitMetrics,
    pub generalist: SplitMetrics,
    pub stages: Vec<StageMetrics>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where logs, checkpoints and metrics go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/checkpoints/latest` if present.
    pub resume: bool,
    /// Stop right after checkpointing this position.
    pub stop_after: Option<Position>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<LogRecord>,
    pub state: StageState,
    /// `None` when the run stopped early.
    pub metrics: Option<RunMetrics>,
}

pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const STATE_FILE: &str = "state.json";

/// Annotations and labelled flags of a dataset under a given config.
pub struct Prepared {
    pub annotations: Vec<SparseAnnotation>,
    pub labeled: Vec<bool>,
}

impl Prepared {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let annotations = if cfg.mode == Mode::Weak && cfg.annotation != ds.manifest.annotation {
            ds.samples
                .iter()
                .map(|s| {
                    synthdata::sparse_annotate(
                        &s.gt,
                        cfg.annotation,
                        &mut seeds::rng(cfg.seed, &[tag::ANNOTATION, s.id as u64]),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?
        } else {
            ds.samples.iter().map(|s| s.annotation.clone()).collect()
        };
        let split = match cfg.labeled_fraction {
            Some(f) if f != ds.manifest.split.labeled_fraction => {
                synthdata::make_split(&ds.manifest.train, f, &mut seeds::rng(cfg.seed, &[tag::SPLIT]))?
            }
            _ => ds.manifest.split.clone(),
        };
        let labeled = (0..ds.samples.len()).map(|i| split.is_labeled(i)).collect();
        Ok(Self { annotations, labeled })
    }

    pub fn samples<'a>(&'a self, ds: &'a Dataset, ids: &[usize]) -> Vec<TrainSample<'a>> {
        ids.iter()
            .map(|&i| {
                let s = &ds.samples[i];
                TrainSample {
                    id: i,
                    image: &s.image,
                    gt: &s.gt,
                    annotation: &self.annotations[i],
                    labeled: self.labeled[i],
                }
            })
            .collect()
    }
}

/// Predictions of one model on `samples` (un-augmented input). The
/// generalist is evaluated without a prompt: test images carry no
/// annotation in the label-deficient protocol.
pub fn predict_samples(
    bundle: &ModelBundle,
    kind: ModelKind,
    samples: &[TrainSample<'_>],
) -> Result<Vec<ProbMask>, TrainError> {
    samples
        .iter()
        .map(|s| {
            Ok(match kind {
                ModelKind::Student => bundle.student_model().predict(s.image, None)?,
                ModelKind::Teacher => bundle.teacher_model().predict(s.image, None)?,
                ModelKind::Generalist => bundle.generalist_model().predict(s.image, None)?,
            })
        })
        .collect()
}

pub fn evaluate_model(
    bundle: &ModelBundle,
    kind: ModelKind,
    samples: &[TrainSample<'_>],
) -> Result<MetricReport, TrainError> {
    let preds = predict_samples(bundle, kind, samples)?;
    Ok(MetricReport::evaluate(samples.iter().zip(&preds).map(|(s, p)| (s.id, p, s.gt)))?)
}

const ALL_KINDS: [ModelKind; 3] = [ModelKind::Student, ModelKind::Teacher, ModelKind::Generalist];

/// Stage tags used in seed derivation.
mod stage_tag {
    pub const AUX: u64 = 100;
    pub const STAGE1_STUDENT: u64 = 101;
    pub const STAGE1_GENERALIST: u64 = 102;
    pub const STAGE2: u64 = 103;
    pub const STAGE3_PHASE1: u64 = 104;
    pub const STAGE3_PHASE2: u64 = 105;
}

struct Run<'a> {
    cfg: TrainConfig,
    train: Vec<TrainSample<'a>>,
    test: Vec<TrainSample<'a>>,
    side: usize,
    scene: synthdata::SceneSpec,
    bundle: ModelBundle,
    state: StageState,
    log: Vec<LogRecord>,
    log_file: Option<fs::File>,
    out: Option<PathBuf>,
    plf_cache: Option<(u64, HashMap<usize, ProbMask>)>,
}

/// Trains on `ds` with `cfg`. See [`RunOptions`] for persistence.
pub fn train(ds: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let prepared = Prepared::new(ds, cfg)?;
    let train = prepared.samples(ds, &ds.manifest.train);
    let test = prepared.samples(ds, &ds.manifest.test);
    let run = Run::start(cfg, train, test, ds, opts)?;
    run.execute(opts.stop_after)
}

impl<'a> Run<'a> {
    fn start(
        cfg: &TrainConfig,
        train: Vec<TrainSample<'a>>,
        test: Vec<TrainSample<'a>>,
        ds: &Dataset,
        opts: &RunOptions,
    ) -> Result<Self, TrainError> {
        let fresh_state = StageState {
            position: Position::Start,
            stage: 1,
            phase: None,
            epoch: 0,
            step: 0,
            generalist_version: 0,
            log_records: 0,
            stage_metrics: Vec::new(),
            seed: cfg.seed,
            config: cfg.clone(),
        };
        let fresh_bundle = ModelBundle::new(
            SegmenterArch::student(),
            SegmenterArch::generalist(),
            EmaConfig { eta: cfg.eta },
            seeds::derive(cfg.seed, &[tag::INIT]),
        );
        let mut run = Run {
            cfg: cfg.clone(),
            train,
            test,
            side: ds.side(),
            scene: ds.manifest.scene.clone(),
            bundle: fresh_bundle,
            state: fresh_state,
            log: Vec::new(),
            log_file: None,
            out: opts.out_dir.clone(),
            plf_cache: None,
        };
        let Some(out) = opts.out_dir.clone() else { return Ok(run) };
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let latest = out.join("checkpoints").join("latest");
        let log_path = out.join(LOG_FILE);
        if opts.resume && latest.join(STATE_FILE).exists() {
            let state_path = latest.join(STATE_FILE);
            let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
            let state: StageState = serde_json::from_str(&text)
                .map_err(|e| TrainError::Artifact { path: state_path.clone(), message: e.to_string() })?;
            if state.config != *cfg {
                return Err(TrainError::Artifact {
                    path: state_path,
                    message: "checkpoint was written with a different config".into(),
                });
            }
            run.bundle = ModelBundle::load(&latest)?;
            run.log = read_log(&log_path, state.log_records)?;
            run.state = state;
        }
        let mut file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        for r in &run.log {
            writeln!(file, "{}", serde_json::to_string(r).expect("log record serializes"))
                .map_err(io_err(&log_path))?;
        }
        run.log_file = Some(file);
        Ok(run)
    }

    fn execute(mut self, stop_after: Option<Position>) -> Result<TrainOutcome, TrainError> {
        let stop = |run: &Self, p: Position| stop_after == Some(p) && run.state.position == p;
        if self.state.position < Position::Stage1 {
            self.stage1()?;
            self.finish_position(Position::Stage1, "stage1")?;
            if stop(&self, Position::Stage1) {
                return Ok(self.outcome(None));
            }
        }
        if self.state.position < Position::Stage2 {
            if !self.cfg.no_stage2 {
                self.stage2()?;
            }
            self.finish_position(Position::Stage2, "stage2")?;
            if stop(&self, Position::Stage2) {
                return Ok(self.outcome(None));
            }
        }
        if !self.cfg.no_phase2 {
            let first = match self.state.position {
                Position::Alternation(a) => a + 1,
                _ => 0,
            };
            for a in first..self.cfg.stage3_alternations {
                self.alternation(a)?;
                let label = if a + 1 == self.cfg.stage3_alternations { Some("stage3") } else { None };
                self.state.position = Position::Alternation(a);
                if let Some(l) = label {
                    self.record_stage_metrics(l)?;
                }
                self.checkpoint()?;
                if stop(&self, Position::Alternation(a)) {
                    return Ok(self.outcome(None));
                }
            }
        }
        let metrics = self.final_metrics()?;
        if let Some(out) = &self.out {
            let path = out.join(METRICS_FILE);
            let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
            atomic_write(&path, json.as_bytes()).map_err(io_err(&path))?;
            let csv_path = out.join("metrics_test.csv");
            atomic_write(&csv_path, metrics.student.test.to_csv_string().as_bytes()).map_err(io_err(&csv_path))?;
            self.bundle.save(&out.join("model"))?;
        }
        Ok(self.outcome(Some(metrics)))
    }

    fn outcome(self, metrics: Option<RunMetrics>) -> TrainOutcome {
        TrainOutcome { bundle: self.bundle, log: self.log, state: self.state, metrics }
    }

    fn finish_position(&mut self, p: Position, label: &str) -> Result<(), TrainError> {
        self.state.position = p;
        self.record_stage_metrics(label)?;
        self.checkpoint()
    }

    fn record_stage_metrics(&mut self, label: &str) -> Result<(), TrainError> {
        if !self.cfg.stage_metrics || self.test.is_empty() {
            return Ok(());
        }
        let mut means = Vec::new();
        for kind in ALL_KINDS {
            means.push(evaluate_model(&self.bundle, kind, &self.test)?.mean);
        }
        self.state.stage_metrics.push(StageMetrics {
            stage: label.into(),
            student: means[0],
            teacher: means[1],
            generalist: means[2],
        });
        Ok(())
    }

    fn final_metrics(&self) -> Result<RunMetrics, TrainError> {
        let split = |kind| -> Result<SplitMetrics, TrainError> {
            Ok(SplitMetrics {
                train: evaluate_model(&self.bundle, kind, &self.train)?,
                test: if self.test.is_empty() {
                    evaluate_model(&self.bundle, kind, &self.train)?
                } else {
                    evaluate_model(&self.bundle, kind, &self.test)?
                },
            })
        };
        Ok(RunMetrics {
            student: split(ModelKind::Student)?,
            teacher: split(ModelKind::Teacher)?,
            generalist: split(ModelKind::Generalist)?,
            stages: self.state.stage_metrics.clone(),
        })
    }

    fn checkpoint(&mut self) -> Result<(), TrainError> {
        let Some(out) = self.out.clone() else { return Ok(()) };
        if let Some(f) = self.log_file.as_mut() {
            f.flush().map_err(io_err(&out))?;
        }
        self.state.log_records = self.log.len();
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let tmp = dir.join(".latest.tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        self.bundle.save(&tmp)?;
        let state_path = tmp.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&self.state).expect("state serializes");
        atomic_write(&state_path, json.as_bytes()).map_err(io_err(&state_path))?;
        let latest = dir.join("latest");
        replace_dir(&tmp, &latest).map_err(io_err(&latest))
    }

    fn push_log(&mut self, rec: LogRecord) -> Result<(), TrainError> {
        if let Some(f) = self.log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec).expect("log record serializes"))
                .map_err(|source| TrainError::Io { path: PathBuf::from(LOG_FILE), source })?;
        }
        self.log.push(rec);
        Ok(())
    }

    /// Deterministic shuffled batches of `samples` for one epoch.
    fn batches(&self, samples: &[TrainSample<'a>], stage: u64, epoch: usize) -> Vec<Vec<TrainSample<'a>>> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeds::rng(self.cfg.seed, &[tag::SHUFFLE, stage, epoch as u64]));
        order.chunks(self.cfg.batch_size).map(|c| c.iter().map(|&i| samples[i]).collect()).collect()
    }

    fn labeled_set(&self) -> Vec<TrainSample<'a>> {
        match self.cfg.mode {
            Mode::Weak => self.train.clone(),
            Mode::Semi => self.train.iter().copied().filter(|s| s.labeled).collect(),
        }
    }

    fn stage0(&mut self) -> Result<(), TrainError> {
        if self.cfg.stage0_epochs == 0 || self.cfg.aux_samples == 0 {
            return Ok(());
        }
        let aux = synthdata::generate(&DatasetConfig {
            n_train: self.cfg.aux_samples,
            n_test: 0,
            scene: synthdata::SceneSpec { side: self.side, ..self.scene.clone() },
            aux: true,
            annotation: self.cfg.annotation,
            labeled_fraction: 1.0,
            seed: seeds::derive(self.cfg.seed, &[tag::AUX_DATA]),
        })?;
        let samples: Vec<TrainSample<'_>> = aux
            .samples
            .iter()
            .map(|s| TrainSample { id: s.id, image: &s.image, gt: &s.gt, annotation: &s.annotation, labeled: true })
            .collect();
        let prompt_rate = self.prompt_rate();
        for epoch in 0..self.cfg.stage0_epochs {
            let lr = self.lr(epoch, true);
            let batches = {
                use rand::seq::SliceRandom;
                let mut order: Vec<usize> = (0..samples.len()).collect();
                order.shuffle(&mut seeds::rng(self.cfg.seed, &[tag::SHUFFLE, stage_tag::AUX, epoch as u64]));
                order
                    .chunks(self.cfg.batch_size)
                    .map(|c| c.iter().map(|&i| samples[i]).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            };
            for (step, batch) in batches.iter().enumerate() {
                let pos = StepPos { stage_tag: stage_tag::AUX, epoch, step };
                let rep = supervised_step(
                    &mut self.bundle,
                    Trainee::Generalist,
                    batch,
                    &self.cfg,
                    pos,
                    lr,
                    true,
                    prompt_rate,
                )
                .map_err(|e| e.at("stage0", epoch, step))?;
                self.push_log(LogRecord {
                    stage: "stage0".into(),
                    phase: "aux".into(),
                    model: "generalist".into(),
                    alternation: None,
                    epoch,
                    step,
                    lr,
                    loss: rep,
                })?;
            }
        }
        Ok(())
    }

    fn prompt_rate(&self) -> f64 {
        if self.cfg.mode == Mode::Weak {
            self.cfg.generalist_prompt_rate
        } else {
            0.0
        }
    }

    fn lr(&self, epoch: usize, generalist: bool) -> f64 {
        let base = if generalist { self.cfg.generalist_lr } else { self.cfg.lr };
        lr_schedule(epoch, base, self.cfg.lr_decay_every, self.cfg.lr_decay_factor)
    }

    fn stage1(&mut self) -> Result<(), TrainError> {
        self.state.stage = 1;
        self.stage0()?;
        if self.cfg.no_stage1 {
            return Ok(());
        }
        let labeled = self.labeled_set();
        if labeled.is_empty() {
            return Err(TrainError::NoLabeledData);
        }
        let prompt_rate = self.prompt_rate();
        for (trainee, epochs, st, name) in [
            (Trainee::Student, self.cfg.stage1_epochs, stage_tag::STAGE1_STUDENT, "student"),
            (Trainee::Generalist, self.cfg.generalist_finetune_epochs, stage_tag::STAGE1_GENERALIST, "generalist"),
        ] {
            for epoch in 0..epochs {
                let lr = self.lr(epoch, trainee == Trainee::Generalist);
                for (step, batch) in self.batches(&labeled, st, epoch).into_iter().enumerate() {
                    let pos = StepPos { stage_tag: st, epoch, step };
                    let rep =
                        supervised_step(&mut self.bundle, trainee, &batch, &self.cfg, pos, lr, false, prompt_rate)
                            .map_err(|e| e.at("stage1", epoch, step))?;
                    self.push_log(LogRecord {
                        stage: "stage1".into(),
                        phase: "supervised".into(),
                        model: name.into(),
                        alternation: None,
                        epoch,
                        step,
                        lr,
                        loss: rep,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Fused labels for the current generalist version.
    fn ensure_plf(&mut self) -> Result<(), TrainError> {
        if self.cfg.no_plf && !self.cfg.trust_from_plf {
            return Ok(());
        }
        let version = if self.cfg.plf_oracle_noise.is_some() { 0 } else { self.state.generalist_version };
        if self.plf_cache.as_ref().is_some_and(|(v, _)| *v == version) {
            return Ok(());
        }
        let mut map = HashMap::with_capacity(self.train.len());
        for s in &self.train {
            let m = match self.cfg.plf_oracle_noise {
                Some(rate) => noisy_oracle_label(s.gt, rate, self.cfg.k, self.cfg.seed, s.id),
                None => fused_label(&self.bundle, s, &self.cfg, version)?,
            };
            map.insert(s.id, m);
        }
        self.plf_cache = Some((version, map));
        Ok(())
    }

    fn phase1_epoch(
        &mut self,
        stage: &str,
        st: u64,
        epoch: usize,
        lr_epoch: usize,
        alt: Option<usize>,
    ) -> Result<(), TrainError> {
        self.ensure_plf()?;
        self.state.phase = Some(Phase::One);
        self.state.epoch = epoch;
        let lr = self.lr(lr_epoch, false);
        let train = self.train.clone();
        for (step, batch) in self.batches(&train, st, epoch).into_iter().enumerate() {
            let pos = StepPos { stage_tag: st, epoch, step };
            let before = cfg!(debug_assertions).then(|| self.bundle.generalist.fingerprint());
            let plf = self.plf_cache.as_ref().map(|(_, m)| m);
            let rep = run_phase1_step(&mut self.bundle, &batch, plf, &self.cfg, pos, lr)
                .map_err(|e| e.at(stage, epoch, step))?;
            if let Some(fp) = before {
                if fp != self.bundle.generalist.fingerprint() {
                    return Err(TrainError::PhaseIsolation(format!("phase I step {step} changed the generalist")));
                }
            }
            self.state.step = step;
            self.push_log(LogRecord {
                stage: stage.into(),
                phase: "I".into(),
                model: "student".into(),
                alternation: alt,
                epoch,
                step,
                lr,
                loss: rep,
            })?;
        }
        Ok(())
    }

    fn phase2_epoch(&mut self, epoch: usize, lr_epoch: usize, alt: usize) -> Result<(), TrainError> {
        self.state.phase = Some(Phase::Two);
        self.state.epoch = epoch;
        let lr = self.lr(lr_epoch, true);
        let train = self.train.clone();
        let st = stage_tag::STAGE3_PHASE2;
        for (step, batch) in self.batches(&train, st, epoch).into_iter().enumerate() {
            let pos = StepPos { stage_tag: st, epoch, step };
            let before =
                cfg!(debug_assertions).then(|| (self.bundle.student.fingerprint(), self.bundle.teacher.fingerprint()));
            let rep = run_phase2_step(&mut self.bundle, &batch, &self.cfg, pos, lr)
                .map_err(|e| e.at("stage3", epoch, step))?;
            if let Some(fp) = before {
                if fp != (self.bundle.student.fingerprint(), self.bundle.teacher.fingerprint()) {
                    return Err(TrainError::PhaseIsolation(format!("phase II step {step} changed the segmenter")));
                }
            }
            self.state.step = step;
            self.push_log(LogRecord {
                stage: "stage3".into(),
                phase: "II".into(),
                model: "generalist".into(),
                alternation: Some(alt),
                epoch,
                step,
                lr,
                loss: rep,
            })?;
        }
        self.state.generalist_version += 1;
        Ok(())
    }

    fn stage2(&mut self) -> Result<(), TrainError> {
        self.state.stage = 2;
        for epoch in 0..self.cfg.stage2_epochs {
            self.phase1_epoch("stage2", stage_tag::STAGE2, epoch, epoch, None)?;
        }
        Ok(())
    }

    fn alternation(&mut self, a: usize) -> Result<(), TrainError> {
        self.state.stage = 3;
        for e in 0..self.cfg.phase1_epochs {
            let epoch = a * self.cfg.phase1_epochs + e;
            self.phase1_epoch("stage3", stage_tag::STAGE3_PHASE1, epoch, epoch, Some(a))?;
        }
        // The noisy oracle stands in for the generalist, so there is nothing to fine-tune.
        if self.cfg.plf_oracle_noise.is_some() {
            return Ok(());
        }
        for e in 0..self.cfg.phase2_epochs {
            let epoch = a * self.cfg.phase2_epochs + e;
            self.phase2_epoch(epoch, epoch, a)?;
        }
        Ok(())
    }
}

fn read_log(path: &Path, records: usize) -> Result<Vec<LogRecord>, TrainError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::with_capacity(records);
    for line in BufReader::new(f).lines().take(records) {
        let line = line.map_err(io_err(path))?;
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TrainError::Artifact { path: path.to_path_buf(), message: e.to_string() })?,
        );
    }
    if out.len() != records {
        return Err(TrainError::Artifact {
            path: path.to_path_buf(),
            message: format!("log has {} records, checkpoint expects {records}", out.len()),
        });
    }
    Ok(out)
}
