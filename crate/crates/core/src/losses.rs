//! Training objectives, built as graph nodes on top of model predictions.
//!
//! Targets are constants (or stop-grad nodes), so gradients only reach the
//! network that produced the prediction. Per-pixel weights multiply the
//! per-pixel cross-entropy before averaging over all pixels, and enter both
//! the intersection and union sums of the soft IoU.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CompGraph, Evaluation, NodeId, Tensor};
use crate::mask::{Label, ProbMask, SparseAnnotation};
use crate::pseudolabel::{entropy, trust_mask, uncertainty, TrustBand};

/// Smoothing constant of the soft IoU.
pub const IOU_SMOOTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error("prediction node has shape {pred:?}, target is {target:?}")]
    Shape { pred: Vec<usize>, target: (usize, usize) },
    #[error("sparse annotation has no labelled pixels")]
    NoLabels,
    #[error("easy branch selected but no strong-augmentation prediction was supplied")]
    MissingStrong,
    #[error("weak supervision requires a sparse annotation")]
    MissingAnnotation,
    #[error("{0} supervision is not valid in {1:?} mode")]
    SupervisionMode(&'static str, Mode),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Weak,
    Semi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementThresholds {
    pub hard_entropy: f64,
    pub easy_entropy: f64,
    pub trust: TrustBand,
}

impl Default for RefinementThresholds {
    fn default() -> Self {
        Self { hard_entropy: 0.8, easy_entropy: 0.2, trust: TrustBand::default() }
    }
}

impl RefinementThresholds {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0 <= self.easy_entropy && self.easy_entropy < self.hard_entropy && self.hard_entropy <= 1.0) {
            return Err(LossError::Thresholds(format!(
                "need 0 <= easy ({}) < hard ({}) <= 1",
                self.easy_entropy, self.hard_entropy
            )));
        }
        if !(0.0 <= self.trust.low && self.trust.low <= self.trust.high && self.trust.high <= 1.0) {
            return Err(LossError::Thresholds(format!(
                "need 0 <= trust_low ({}) <= trust_high ({}) <= 1",
                self.trust.low, self.trust.high
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Hard,
    Easy,
    Normal,
}

/// Branch of the piecewise refinement. Hard is checked first.
pub fn select_branch(pl_entropy: f64, pred_entropy: f64, thr: &RefinementThresholds) -> Branch {
    if pl_entropy >= thr.hard_entropy {
        Branch::Hard
    } else if pred_entropy <= thr.easy_entropy {
        Branch::Easy
    } else {
        Branch::Normal
    }
}

/// A prediction node together with its evaluated value.
#[derive(Clone, Copy, Debug)]
pub struct Pred<'a> {
    pub node: NodeId,
    pub value: &'a ProbMask,
}

/// Loss target: a constant mask, or an existing node (expected to be stop-grad).
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Mask(&'a ProbMask),
    Node(NodeId),
}

/// Switches used by the ablation study. All `true` is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub entropy_weight: bool,
    pub uncertainty_weight: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { entropy_weight: true, uncertainty_weight: true }
    }
}

fn check_pred(g: &CompGraph, pred: NodeId, dims: (usize, usize)) -> Result<(), LossError> {
    let s = g.shape(pred);
    if s != [1, 1, dims.0, dims.1] {
        return Err(LossError::Shape { pred: s.to_vec(), target: dims });
    }
    Ok(())
}

fn mask_const(g: &mut CompGraph, m: &ProbMask) -> NodeId {
    g.constant(m.to_tensor())
}

fn weights_const(g: &mut CompGraph, dims: (usize, usize), w: &[f64]) -> NodeId {
    g.constant(Tensor::new(vec![1, 1, dims.0, dims.1], w.to_vec()).expect("finite weights"))
}

fn target_node(g: &mut CompGraph, pred: NodeId, target: Target<'_>) -> Result<NodeId, LossError> {
    match target {
        Target::Mask(m) => {
            check_pred(g, pred, m.dims())?;
            Ok(mask_const(g, m))
        }
        Target::Node(n) => {
            if g.shape(n) != g.shape(pred) {
                let s = g.shape(n);
                return Err(LossError::Shape {
                    pred: g.shape(pred).to_vec(),
                    target: (s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0)),
                });
            }
            Ok(n)
        }
    }
}

/// Sum over pixels of `w * -[t ln p + (1-t) ln(1-p)]`.
fn weighted_bce_sum(
    g: &mut CompGraph,
    pred: NodeId,
    target: NodeId,
    weights: Option<NodeId>,
) -> Result<NodeId, LossError> {
    let logp = g.log(pred)?;
    let one_minus_p = g.one_minus(pred)?;
    let log1mp = g.log(one_minus_p)?;
    let one_minus_t = g.one_minus(target)?;
    let a = g.mul(logp, target)?;
    let b = g.mul(log1mp, one_minus_t)?;
    let mut s = g.add(a, b)?;
    if let Some(w) = weights {
        s = g.mul(s, w)?;
    }
    let total = g.sum(s)?;
    Ok(g.scalar_mul(total, -1.0)?)
}

fn weights_node(g: &mut CompGraph, pred: NodeId, weights: Option<&ProbMask>) -> Result<Option<NodeId>, LossError> {
    match weights {
        None => Ok(None),
        Some(w) => {
            check_pred(g, pred, w.dims())?;
            Ok(Some(mask_const(g, w)))
        }
    }
}

/// Pixel-weighted binary cross-entropy, averaged over all pixels (natural log).
pub fn bce(
    g: &mut CompGraph,
    pred: NodeId,
    target: Target<'_>,
    weights: Option<&ProbMask>,
) -> Result<NodeId, LossError> {
    let t = target_node(g, pred, target)?;
    let w = weights_node(g, pred, weights)?;
    let n = g.shape(pred).iter().product::<usize>() as f64;
    let s = weighted_bce_sum(g, pred, t, w)?;
    Ok(g.scalar_mul(s, 1.0 / n)?)
}

/// `1 - (Σ w p t + s) / (Σ w (p + t - p t) + s)` with `s = IOU_SMOOTH`.
pub fn soft_iou(
    g: &mut CompGraph,
    pred: NodeId,
    target: Target<'_>,
    weights: Option<&ProbMask>,
) -> Result<NodeId, LossError> {
    let t = target_node(g, pred, target)?;
    let w = weights_node(g, pred, weights)?;
    let (pw, tw) = match w {
        Some(w) => (g.mul(pred, w)?, g.mul(t, w)?),
        None => (pred, t),
    };
    let pt = g.mul(pw, t)?;
    let inter = g.sum(pt)?;
    let sum_p = g.sum(pw)?;
    let sum_t = g.sum(tw)?;
    let both = g.add(sum_p, sum_t)?;
    let neg_inter = g.scalar_mul(inter, -1.0)?;
    let union = g.add(both, neg_inter)?;
    let num = g.add_scalar(inter, IOU_SMOOTH)?;
    let den = g.add_scalar(union, IOU_SMOOTH)?;
    let inv = g.recip(den)?;
    let ratio = g.mul(num, inv)?;
    Ok(g.one_minus(ratio)?)
}

/// Cross-entropy averaged over labelled pixels only.
pub fn partial_ce(g: &mut CompGraph, pred: NodeId, annotation: &SparseAnnotation) -> Result<NodeId, LossError> {
    check_pred(g, pred, annotation.dims())?;
    let labeled = annotation.labeled_count();
    if labeled == 0 {
        return Err(LossError::NoLabels);
    }
    let dims = annotation.dims();
    let target: Vec<f64> =
        annotation.labels().iter().map(|l| if *l == Label::Foreground { 1.0 } else { 0.0 }).collect();
    let mask: Vec<f64> = annotation.labels().iter().map(|l| if l.is_known() { 1.0 } else { 0.0 }).collect();
    let t = weights_const(g, dims, &target);
    let w = weights_const(g, dims, &mask);
    let s = weighted_bce_sum(g, pred, t, Some(w))?;
    Ok(g.scalar_mul(s, 1.0 / labeled as f64)?)
}

/// Fully supervised term: `bce + soft_iou` against a dense mask.
pub fn dense_supervised(g: &mut CompGraph, pred: NodeId, y: &ProbMask) -> Result<NodeId, LossError> {
    let ce = bce(g, pred, Target::Mask(y), None)?;
    let iou = soft_iou(g, pred, Target::Mask(y), None)?;
    Ok(g.add(ce, iou)?)
}

/// `U(pl) * extra` (or just `extra`) as a weight map.
fn pixel_weights(
    pl: &ProbMask,
    use_uncertainty: bool,
    extra: Option<&ProbMask>,
) -> Result<Option<ProbMask>, LossError> {
    let base = if use_uncertainty { Some(uncertainty(pl)) } else { None };
    Ok(match (base, extra) {
        (None, None) => None,
        (Some(u), None) => Some(u),
        (None, Some(e)) => Some(e.clone()),
        (Some(u), Some(e)) => Some(
            u.zip_map(e, |a, b| a * b)
                .map_err(|_| LossError::Shape { pred: vec![1, 1, e.height(), e.width()], target: pl.dims() })?,
        ),
    })
}

/// Basic refined loss: `(1 - E(pl)) * [bce(pred, pl; U) + iou(pred, pl; U)]`,
/// with an optional extra per-pixel weight folded into `U`.
pub fn refine_basic(
    g: &mut CompGraph,
    pl: &ProbMask,
    pred: NodeId,
    extra_weight: Option<&ProbMask>,
    options: RefineOptions,
) -> Result<NodeId, LossError> {
    let w = pixel_weights(pl, options.uncertainty_weight, extra_weight)?;
    let ce = bce(g, pred, Target::Mask(pl), w.as_ref())?;
    let iou = soft_iou(g, pred, Target::Mask(pl), w.as_ref())?;
    let both = g.add(ce, iou)?;
    let confidence = if options.entropy_weight { 1.0 - entropy(pl) } else { 1.0 };
    Ok(g.scalar_mul(both, confidence)?)
}

/// Piecewise refinement. `trust_source` selects the map the hard-branch trust
/// mask is computed from (defaults to `pl`).
pub fn refine_piecewise(
    g: &mut CompGraph,
    pl: &ProbMask,
    pred_weak: Pred<'_>,
    pred_strong: Option<NodeId>,
    thr: &RefinementThresholds,
    options: RefineOptions,
    trust_source: Option<&ProbMask>,
) -> Result<(NodeId, Branch), LossError> {
    thr.validate()?;
    let branch = select_branch(entropy(pl), entropy(pred_weak.value), thr);
    let node = match branch {
        Branch::Hard => {
            let w = trust_mask(trust_source.unwrap_or(pl), thr.trust);
            refine_basic(g, pl, pred_weak.node, Some(&w), options)?
        }
        Branch::Easy => {
            let strong = pred_strong.ok_or(LossError::MissingStrong)?;
            let a = refine_basic(g, pl, pred_weak.node, None, options)?;
            let b = refine_basic(g, pl, strong, None, options)?;
            g.add(a, b)?
        }
        Branch::Normal => refine_basic(g, pl, pred_weak.node, None, options)?,
    };
    Ok((node, branch))
}

/// Weak/strong consistency: the strong-branch prediction learns from the
/// (stop-grad) weak-branch prediction.
pub fn aug_invariance(g: &mut CompGraph, y2_weak: NodeId, y2_strong: NodeId) -> Result<NodeId, LossError> {
    let target = g.stop_grad(y2_weak)?;
    aug_invariance_to(g, Target::Node(target), y2_strong)
}

/// Consistency against an explicit target.
pub fn aug_invariance_to(g: &mut CompGraph, target: Target<'_>, pred: NodeId) -> Result<NodeId, LossError> {
    let ce = bce(g, pred, target, None)?;
    let iou = soft_iou(g, pred, target, None)?;
    Ok(g.add(ce, iou)?)
}

/// Uncertainty-weighted distillation without the image-level entropy factor.
pub fn noise_resistance(g: &mut CompGraph, y2: NodeId, pl_m: &ProbMask) -> Result<NodeId, LossError> {
    let u = uncertainty(pl_m);
    let ce = bce(g, y2, Target::Mask(pl_m), Some(&u))?;
    let iou = soft_iou(g, y2, Target::Mask(pl_m), Some(&u))?;
    Ok(g.add(ce, iou)?)
}

/// What a sample is supervised with.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    Sparse(&'a SparseAnnotation),
    Dense(&'a ProbMask),
    Unlabeled,
}

fn supervised_term(
    g: &mut CompGraph,
    mode: Mode,
    supervision: Supervision<'_>,
    pred: NodeId,
) -> Result<Option<NodeId>, LossError> {
    match (mode, supervision) {
        (Mode::Weak, Supervision::Sparse(a)) => Ok(Some(partial_ce(g, pred, a)?)),
        (Mode::Weak, _) => Err(LossError::MissingAnnotation),
        (Mode::Semi, Supervision::Dense(y)) => Ok(Some(dense_supervised(g, pred, y)?)),
        (Mode::Semi, Supervision::Unlabeled) => Ok(None),
        (Mode::Semi, Supervision::Sparse(_)) => Err(LossError::SupervisionMode("sparse", Mode::Semi)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    RTeacher,
    RFused,
    Supervised,
    Ai,
    Nr,
}

/// Graph nodes of one sample's phase loss.
#[derive(Clone, Debug)]
pub struct PhaseLoss {
    pub terms: Vec<(Term, NodeId)>,
    pub total: NodeId,
    pub branches: BranchRecord,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<Branch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fused: Option<Branch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus: Option<Branch>,
}

/// Named scalar loss terms. `total` is the sum of the present terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_teacher: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_fused: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supervised: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ai: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nr: Option<f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchRecord>,
}

impl LossReport {
    fn slot(&mut self, term: Term) -> &mut Option<f64> {
        match term {
            Term::RTeacher => &mut self.r_teacher,
            Term::RFused => &mut self.r_fused,
            Term::Supervised => &mut self.supervised,
            Term::Ai => &mut self.ai,
            Term::Nr => &mut self.nr,
        }
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::RTeacher => self.r_teacher,
            Term::RFused => self.r_fused,
            Term::Supervised => self.supervised,
            Term::Ai => self.ai,
            Term::Nr => self.nr,
        }
    }

    pub fn term_count(&self) -> usize {
        [self.r_teacher, self.r_fused, self.supervised, self.ai, self.nr].iter().filter(|t| t.is_some()).count()
    }

    /// Mean of per-sample reports; a term is present if any sample has it.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let mut out = LossReport::default();
        if reports.is_empty() {
            return out;
        }
        let n = reports.len() as f64;
        for term in [Term::RTeacher, Term::RFused, Term::Supervised, Term::Ai, Term::Nr] {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(term)).collect();
            if !vals.is_empty() {
                *out.slot(term) = Some(vals.iter().sum::<f64>() / n);
            }
        }
        out.total = reports.iter().map(|r| r.total).sum::<f64>() / n;
        out.branches = reports.iter().flat_map(|r| r.branches.iter().copied()).collect();
        out
    }
}

impl PhaseLoss {
    fn build(g: &mut CompGraph, terms: Vec<(Term, NodeId)>, branches: BranchRecord) -> Result<Self, LossError> {
        let mut total = terms[0].1;
        for &(_, n) in &terms[1..] {
            total = g.add(total, n)?;
        }
        Ok(Self { terms, total, branches })
    }

    pub fn report(&self, eval: &Evaluation) -> LossReport {
        let mut r = LossReport { total: eval.scalar(self.total), ..Default::default() };
        for &(term, node) in &self.terms {
            *r.slot(term) = Some(eval.scalar(node));
        }
        if self.branches != BranchRecord::default() {
            r.branches.push(self.branches);
        }
        r
    }
}

/// Options of the segmenter-side loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct Phase1Options<'a> {
    pub refine: RefineOptions,
    /// When set, the hard-branch trust mask of the teacher term is computed
    /// from this map instead of the teacher pseudo-label.
    pub teacher_trust_source: Option<&'a ProbMask>,
}

/// Segmenter loss for one sample. `pl_fused` may be omitted (ablation).
#[allow(clippy::too_many_arguments)]
pub fn phase1_loss(
    g: &mut CompGraph,
    mode: Mode,
    supervision: Supervision<'_>,
    pl_teacher: &ProbMask,
    pl_fused: Option<&ProbMask>,
    pred_weak: Pred<'_>,
    pred_strong: Option<NodeId>,
    thr: &RefinementThresholds,
    options: Phase1Options<'_>,
) -> Result<PhaseLoss, LossError> {
    if mode == Mode::Weak && !matches!(supervision, Supervision::Sparse(_)) {
        return Err(LossError::MissingAnnotation);
    }
    let mut terms = Vec::new();
    let mut branches = BranchRecord::default();
    let (rt, bt) =
        refine_piecewise(g, pl_teacher, pred_weak, pred_strong, thr, options.refine, options.teacher_trust_source)?;
    terms.push((Term::RTeacher, rt));
    branches.teacher = Some(bt);
    if let Some(pl_f) = pl_fused {
        let (rf, bf) = refine_piecewise(g, pl_f, pred_weak, pred_strong, thr, options.refine, None)?;
        terms.push((Term::RFused, rf));
        branches.fused = Some(bf);
    }
    if let Some(s) = supervised_term(g, mode, supervision, pred_weak.node)? {
        terms.push((Term::Supervised, s));
    }
    PhaseLoss::build(g, terms, branches)
}

/// Options of the generalist-side loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct Phase2Options<'a> {
    /// Replace the stop-grad weak prediction as the invariance target
    /// (used to compare two weak views).
    pub ai_target: Option<&'a ProbMask>,
    /// Replace the noise-resistance term with the segmenter-side piecewise refinement.
    pub nr_as_refine: Option<RefinementThresholds>,
}

/// Generalist loss for one sample.
pub fn phase2_loss(
    g: &mut CompGraph,
    mode: Mode,
    supervision: Supervision<'_>,
    y2_weak: Pred<'_>,
    y2_strong: NodeId,
    pl_consensus: &ProbMask,
    options: Phase2Options<'_>,
) -> Result<PhaseLoss, LossError> {
    if mode == Mode::Weak && !matches!(supervision, Supervision::Sparse(_)) {
        return Err(LossError::MissingAnnotation);
    }
    let mut branches = BranchRecord::default();
    let ai = match options.ai_target {
        Some(t) => aug_invariance_to(g, Target::Mask(t), y2_strong)?,
        None => aug_invariance(g, y2_weak.node, y2_strong)?,
    };
    let nr = match options.nr_as_refine {
        Some(thr) => {
            let (n, b) =
                refine_piecewise(g, pl_consensus, y2_weak, Some(y2_strong), &thr, RefineOptions::default(), None)?;
            branches.consensus = Some(b);
            n
        }
        None => noise_resistance(g, y2_weak.node, pl_consensus)?,
    };
    let mut terms = vec![(Term::Ai, ai), (Term::Nr, nr)];
    if let Some(s) = supervised_term(g, mode, supervision, y2_weak.node)? {
        terms.push((Term::Supervised, s));
    }
    PhaseLoss::build(g, terms, branches)
}
