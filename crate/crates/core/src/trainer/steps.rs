//! One optimizer step of each kind: supervised, Phase I and Phase II.
//!
//! Every sample draws its augmentations from a stream derived from
//! `(seed, stage, epoch, step, sample id)`, so a step can be replayed in
//! isolation. Per-sample losses are scaled by `1 / batch` before backprop,
//! which makes the accumulated gradient that of the batch mean.

use std::collections::HashMap;

use crate::augment::{self, apply_strong, apply_weak, sample_strong, sample_weak, WeakAug};
use crate::autodiff::{adam_step, AdamConfig, NodeId, ParamSet, Tensor};
use crate::losses::{
    dense_supervised, partial_ce, phase1_loss, phase2_loss, LossReport, Mode, Phase1Options, Phase2Options, Pred,
    Supervision,
};
use crate::mask::{ProbMask, SparseAnnotation};
use crate::models::{ema_update, generalist_forward, student_forward, teacher_forward, ModelBundle, SegmenterArch};
use crate::pseudolabel::{consensus, entropy};
use crate::seeds;

use super::{TrainConfig, TrainError};

/// A training sample as seen by the step functions.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub id: usize,
    pub image: &'a Tensor,
    pub gt: &'a ProbMask,
    pub annotation: &'a SparseAnnotation,
    /// Whether the dense mask may be used (semi mode).
    pub labeled: bool,
}

/// Where in the schedule a step sits; used for seed derivation and logging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPos {
    pub stage_tag: u64,
    pub epoch: usize,
    pub step: usize,
}

impl StepPos {
    fn rng(&self, seed: u64, sample: usize) -> rand_chacha::ChaCha8Rng {
        seeds::rng(seed, &[seeds::tag::AUG, self.stage_tag, self.epoch as u64, self.step as u64, sample as u64])
    }
}

fn draw_weak(rng: &mut rand_chacha::ChaCha8Rng, scales: bool) -> WeakAug {
    let a = sample_weak(rng);
    if scales {
        a
    } else {
        a.without_scale()
    }
}

enum OwnedSupervision {
    Sparse(SparseAnnotation),
    Dense(ProbMask),
    Unlabeled,
}

impl OwnedSupervision {
    fn view(&self) -> Supervision<'_> {
        match self {
            OwnedSupervision::Sparse(a) => Supervision::Sparse(a),
            OwnedSupervision::Dense(m) => Supervision::Dense(m),
            OwnedSupervision::Unlabeled => Supervision::Unlabeled,
        }
    }
}

/// Supervision for `sample`, moved into the frame of `aug`.
fn supervision_in_frame(mode: Mode, sample: &TrainSample<'_>, aug: &WeakAug) -> Result<OwnedSupervision, TrainError> {
    Ok(match mode {
        Mode::Weak => OwnedSupervision::Sparse(augment::warp_annotation(aug, sample.annotation)?),
        Mode::Semi if sample.labeled => OwnedSupervision::Dense(augment::warp_mask(aug, sample.gt)?),
        Mode::Semi => OwnedSupervision::Unlabeled,
    })
}

/// Generalist prompt: the sparse annotation in weak mode, nothing in semi mode.
pub fn prompt_for(mode: Mode, annotation: &SparseAnnotation) -> Option<&SparseAnnotation> {
    match mode {
        Mode::Weak => Some(annotation),
        Mode::Semi => None,
    }
}

fn check_finite(report: &LossReport, what: &str) -> Result<(), TrainError> {
    if !report.total.is_finite() {
        return Err(TrainError::Numeric(format!("{what}: loss is {}", report.total)));
    }
    Ok(())
}

fn finish_step(params: &mut ParamSet, lr: f64, what: &str) -> Result<(), TrainError> {
    adam_step(params, &AdamConfig::with_lr(lr))?;
    for (name, e) in params.iter() {
        if !e.value.is_finite() {
            return Err(TrainError::Numeric(format!("{what}: parameter '{name}' became non-finite")));
        }
    }
    Ok(())
}

/// Which network a supervised step trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainee {
    Student,
    Generalist,
}

/// Supervised step on labelled data: partial CE on sparse labels, or
/// CE + IoU on dense masks. `dense` forces dense supervision (used for
/// auxiliary pre-training); `prompt_rate` is the probability that the
/// generalist sees the annotation as a prompt.
#[allow(clippy::too_many_arguments)]
pub fn supervised_step(
    bundle: &mut ModelBundle,
    trainee: Trainee,
    batch: &[TrainSample<'_>],
    cfg: &TrainConfig,
    pos: StepPos,
    lr: f64,
    dense: bool,
    prompt_rate: f64,
) -> Result<LossReport, TrainError> {
    use rand::Rng;
    let scale = 1.0 / batch.len() as f64;
    let mut reports = Vec::with_capacity(batch.len());
    for s in batch {
        let mut rng = pos.rng(cfg.seed, s.id);
        let aug = draw_weak(&mut rng, cfg.aug_scales);
        let img = apply_weak(&aug, s.image)?;
        let (arch, params) = match trainee {
            Trainee::Student => (&bundle.student_arch, &mut bundle.student),
            Trainee::Generalist => (&bundle.generalist_arch, &mut bundle.generalist),
        };
        let ann = augment::warp_annotation(&aug, s.annotation)?;
        let with_prompt = trainee == Trainee::Generalist && rng.random_bool(prompt_rate.clamp(0.0, 1.0));
        let mut pred = generalist_or_student(arch, &img, with_prompt.then_some(&ann), params)?;
        let node = if dense || cfg.mode == Mode::Semi {
            let y = augment::warp_mask(&aug, s.gt)?;
            dense_supervised(&mut pred.graph, pred.output, &y)?
        } else {
            partial_ce(&mut pred.graph, pred.output, &ann)?
        };
        let scaled = pred.graph.scalar_mul(node, scale)?;
        pred.extend(params)?;
        let value = pred.eval.scalar(node);
        let report = LossReport { supervised: Some(value), total: value, ..Default::default() };
        check_finite(&report, "supervised step")?;
        pred.graph.backprop(&pred.eval, params, scaled)?;
        reports.push(report);
    }
    let params = match trainee {
        Trainee::Student => &mut bundle.student,
        Trainee::Generalist => &mut bundle.generalist,
    };
    finish_step(params, lr, "supervised step")?;
    if trainee == Trainee::Student {
        ema_update(&mut bundle.teacher, &bundle.student, bundle.ema.eta)?;
    }
    Ok(LossReport::mean(&reports))
}

fn generalist_or_student(
    arch: &SegmenterArch,
    img: &Tensor,
    prompt: Option<&SparseAnnotation>,
    params: &ParamSet,
) -> Result<crate::models::Prediction, TrainError> {
    Ok(if arch.takes_prompt() {
        generalist_forward(arch, img, prompt, params)?
    } else {
        student_forward(arch, img, params)?
    })
}

/// Appends a second forward pass of `arch` on `image` to an existing graph.
fn append_view(
    pred: &mut crate::models::Prediction,
    arch: &SegmenterArch,
    prefix: &str,
    image: &Tensor,
    prompt: Option<&SparseAnnotation>,
) -> Result<NodeId, TrainError> {
    let input = arch.append_input(&mut pred.graph, &mut pred.feed, prefix, image, prompt)?;
    Ok(arch.append_forward(&mut pred.graph, input)?)
}

/// Phase I: the generalist is fixed; the student learns from the teacher
/// pseudo-label, the fused generalist pseudo-label (both given in the
/// reference frame) and the available supervision. One Adam step on the
/// student, then one EMA update of the teacher.
pub fn run_phase1_step(
    bundle: &mut ModelBundle,
    batch: &[TrainSample<'_>],
    pl_fused: Option<&HashMap<usize, ProbMask>>,
    cfg: &TrainConfig,
    pos: StepPos,
    lr: f64,
) -> Result<LossReport, TrainError> {
    let thr = cfg.thresholds();
    let scale = 1.0 / batch.len() as f64;
    let mut reports = Vec::with_capacity(batch.len());
    for s in batch {
        let mut rng = pos.rng(cfg.seed, s.id);
        let w_teacher = draw_weak(&mut rng, cfg.aug_scales);
        let w_student = draw_weak(&mut rng, cfg.aug_scales);
        let strong = sample_strong(&mut rng, w_student);

        let pl_t_ref = crate::pseudolabel::teacher_pseudo(&bundle.student_arch, &bundle.teacher, s.image, &w_teacher)?;
        let pl_t = augment::warp_mask(&w_student, &pl_t_ref)?;
        let pl_f = match pl_fused {
            Some(map) => {
                let m = map.get(&s.id).ok_or_else(|| TrainError::Internal(format!("no fused label for {}", s.id)))?;
                Some(augment::warp_mask(&w_student, m)?)
            }
            None => None,
        };
        let supervision = supervision_in_frame(cfg.mode, s, &w_student)?;

        let img = apply_weak(&w_student, s.image)?;
        let mut pred = student_forward(&bundle.student_arch, &img, &bundle.student)?;
        let e_pred = entropy(&pred.mask);
        let easy_possible = e_pred <= thr.easy_entropy
            && (entropy(&pl_t) < thr.hard_entropy || pl_f.as_ref().is_some_and(|m| entropy(m) < thr.hard_entropy));
        let strong_node = if easy_possible {
            let img_s = apply_strong(&strong, s.image)?;
            Some(append_view(&mut pred, &bundle.student_arch, "strong/", &img_s, None)?)
        } else {
            None
        };
        let weak_mask = pred.mask.clone();
        let trust_source = if cfg.trust_from_plf { pl_f.as_ref() } else { None };
        let loss = phase1_loss(
            &mut pred.graph,
            cfg.mode,
            supervision.view(),
            &pl_t,
            if cfg.no_plf { None } else { pl_f.as_ref() },
            Pred { node: pred.output, value: &weak_mask },
            strong_node,
            &thr,
            Phase1Options { refine: cfg.refine_options(), teacher_trust_source: trust_source },
        )?;
        let scaled = pred.graph.scalar_mul(loss.total, scale)?;
        pred.extend(&bundle.student)?;
        let report = loss.report(&pred.eval);
        check_finite(&report, "phase I")?;
        pred.graph.backprop(&pred.eval, &mut bundle.student, scaled)?;
        reports.push(report);
    }
    finish_step(&mut bundle.student, lr, "phase I")?;
    ema_update(&mut bundle.teacher, &bundle.student, bundle.ema.eta)?;
    Ok(LossReport::mean(&reports))
}

/// Phase II: student and teacher are fixed; the generalist learns from
/// their consensus and from weak/strong consistency. One Adam step on the
/// generalist.
pub fn run_phase2_step(
    bundle: &mut ModelBundle,
    batch: &[TrainSample<'_>],
    cfg: &TrainConfig,
    pos: StepPos,
    lr: f64,
) -> Result<LossReport, TrainError> {
    use rand::Rng;
    let scale = 1.0 / batch.len() as f64;
    let mut reports = Vec::with_capacity(batch.len());
    for s in batch {
        let mut rng = pos.rng(cfg.seed, s.id);
        let w = draw_weak(&mut rng, cfg.aug_scales);
        let strong = sample_strong(&mut rng, w);
        let w2 = draw_weak(&mut rng, cfg.aug_scales);
        let prompted = cfg.mode == Mode::Weak && rng.random_bool(cfg.generalist_prompt_rate);

        let img = apply_weak(&w, s.image)?;
        let pl_s = teacher_forward(&bundle.student_arch, &img, &bundle.student)?;
        let pl_tt = teacher_forward(&bundle.student_arch, &img, &bundle.teacher)?;
        let pl_m = consensus(&pl_s, &pl_tt)?;
        let supervision = supervision_in_frame(cfg.mode, s, &w)?;
        let prompt = prompted.then(|| augment::warp_annotation(&w, s.annotation)).transpose()?;

        let arch = &bundle.generalist_arch;
        let mut pred = generalist_forward(arch, &img, prompt.as_ref(), &bundle.generalist)?;
        let weak_mask = pred.mask.clone();
        let (second, ai_target) = if cfg.lai_weak_weak {
            let img2 = apply_weak(&w2, s.image)?;
            let prompt2 = prompted.then(|| augment::warp_annotation(&w2, s.annotation)).transpose()?;
            let node = append_view(&mut pred, arch, "second/", &img2, prompt2.as_ref())?;
            let target = augment::warp_mask(&w2, &augment::invert_to_reference(&w, &weak_mask)?)?;
            (node, Some(target))
        } else {
            let img_s = apply_strong(&strong, s.image)?;
            (append_view(&mut pred, arch, "strong/", &img_s, prompt.as_ref())?, None)
        };
        let loss = phase2_loss(
            &mut pred.graph,
            cfg.mode,
            supervision.view(),
            Pred { node: pred.output, value: &weak_mask },
            second,
            &pl_m,
            Phase2Options {
                ai_target: ai_target.as_ref(),
                nr_as_refine: cfg.lnr_with_refine.then(|| cfg.thresholds()),
            },
        )?;
        let scaled = pred.graph.scalar_mul(loss.total, scale)?;
        pred.extend(&bundle.generalist)?;
        let report = loss.report(&pred.eval);
        check_finite(&report, "phase II")?;
        pred.graph.backprop(&pred.eval, &mut bundle.generalist, scaled)?;
        reports.push(report);
    }
    finish_step(&mut bundle.generalist, lr, "phase II")?;
    Ok(LossReport::mean(&reports))
}

/// Fused generalist pseudo-label of one sample (reference frame).
pub fn fused_label(
    bundle: &ModelBundle,
    sample: &TrainSample<'_>,
    cfg: &TrainConfig,
    version: u64,
) -> Result<ProbMask, TrainError> {
    let policy = cfg.ensemble_policy(seeds::derive(cfg.seed, &[seeds::tag::ENSEMBLE, version, sample.id as u64]));
    Ok(crate::pseudolabel::ensemble_fuse(
        &bundle.generalist_model(),
        sample.image,
        prompt_for(cfg.mode, sample.annotation),
        &policy,
    )?)
}

/// Average of `k` ground-truth copies whose boundary band (pixels within
/// two pixels of the other class) is flipped independently at `rate`.
pub fn noisy_oracle_label(gt: &ProbMask, rate: f64, k: usize, seed: u64, id: usize) -> ProbMask {
    use rand::Rng;
    let (h, w) = gt.dims();
    let interior: std::collections::HashSet<(usize, usize)> =
        crate::synthdata::eroded(gt, true, 2).into_iter().chain(crate::synthdata::eroded(gt, false, 2)).collect();
    let mut acc = vec![0.0; h * w];
    for copy in 0..k {
        let mut rng = seeds::rng(seed, &[seeds::tag::NOISE_ORACLE, id as u64, copy as u64]);
        for y in 0..h {
            for x in 0..w {
                let v = gt.get(y, x);
                let flipped = !interior.contains(&(y, x)) && rng.random_bool(rate);
                acc[y * w + x] += if flipped { 1.0 - v } else { v };
            }
        }
    }
    ProbMask::from_clamped(h, w, acc.into_iter().map(|v| v / k as f64).collect()).expect("sizes match")
}
