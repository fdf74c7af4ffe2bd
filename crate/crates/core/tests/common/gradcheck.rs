//! Analytic gradients against central finite differences, one seeded trial
//! at a time. Each trial panics with the failing block on mismatch.

use super::*;
use rand::Rng;
use scaler::autodiff::{finite_diff_check, CompGraph, Feed, NodeId, ParamSet, Tensor};
use scaler::losses::{
    aug_invariance, aug_invariance_to, bce, dense_supervised, noise_resistance, partial_ce, phase1_loss, phase2_loss,
    refine_basic, refine_piecewise, soft_iou, Branch, Mode, Phase1Options, Phase2Options, Pred, RefineOptions,
    RefinementThresholds, Supervision, Target,
};
use scaler::mask::ProbMask;

pub const TOLERANCE: f64 = 1e-6;

/// Reduces `node` to a scalar through a fixed random projection so that
/// every output element carries a distinct gradient.
fn project(g: &mut CompGraph, rng: &mut impl Rng, node: NodeId) -> NodeId {
    let shape = g.shape(node).to_vec();
    let c = g.constant(random_tensor(rng, &shape, -1.0, 1.0));
    let m = g.mul(node, c).unwrap();
    g.sum(m).unwrap()
}

fn check(g: &CompGraph, params: &ParamSet, loss: NodeId, what: &str) {
    let report = finite_diff_check(g, &Feed::new(), params, loss, TOLERANCE).unwrap();
    assert!(report.passed(), "{what}: blocks {:?} max rel error {:e}", report.flagged(), report.max_rel_error());
}

fn param(g: &mut CompGraph, params: &mut ParamSet, name: &str, value: Tensor) -> NodeId {
    let n = g.param(name, value.shape()).unwrap();
    params.insert(name, value);
    n
}

pub fn every_op_kind(seed: u64) {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
    let shape = [1, 2, h, w];
    let mut g = CompGraph::new();
    let mut p = ParamSet::new();

    let x = param(&mut g, &mut p, "x", random_tensor(&mut r, &shape, -1.0, 1.0));
    let k = param(&mut g, &mut p, "k", random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5));
    let b = param(&mut g, &mut p, "b", random_tensor(&mut r, &[3], -0.5, 0.5));
    let conv = g.conv2d(x, k, Some(b)).unwrap();
    let conv_nb = g.conv2d(x, k, None).unwrap();
    let y = param(&mut g, &mut p, "y", random_tensor(&mut r, &shape, -1.0, 1.0));
    let add = g.add(x, y).unwrap();
    let mul = g.mul(x, y).unwrap();
    let smul = g.scalar_mul(x, -1.7).unwrap();
    let lrelu = g.leaky_relu(x).unwrap();
    let sig = g.sigmoid(x).unwrap();
    let pos = param(&mut g, &mut p, "pos", random_tensor(&mut r, &shape, 0.2, 2.0));
    let log = g.log(pos).unwrap();
    let recip = g.recip(pos).unwrap();
    let mean = g.mean(x).unwrap();
    let sum = g.sum(y).unwrap();
    let cat = g.concat_channels(&[x, conv, y]).unwrap();
    let om = g.one_minus(sig).unwrap();
    let adds = g.add_scalar(mul, 0.3).unwrap();

    let mut total = None;
    for node in [conv, conv_nb, add, mul, smul, lrelu, sig, log, recip, mean, sum, cat, om, adds] {
        let s = project(&mut g, &mut r, node);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s).unwrap(),
        });
        check(&g, &p, s, g.op(node).kind());
    }
    check(&g, &p, total.unwrap(), "all ops");
}

/// Finite differences cannot see through `stop_grad`; its contract is that
/// the stopped input receives no gradient at all.
pub fn stop_grad_blocks_the_path() {
    let mut r = rng(3);
    let mut g = CompGraph::new();
    let mut p = ParamSet::new();
    let x = param(&mut g, &mut p, "x", random_tensor(&mut r, &[1, 1, 3, 3], -1.0, 1.0));
    let s = g.stop_grad(x).unwrap();
    let l = g.sum(s).unwrap();
    let eval = g.evaluate(&Feed::new(), &p).unwrap();
    g.backprop(&eval, &mut p, l).unwrap();
    assert!(p.grad("x").unwrap().data().iter().all(|&v| v == 0.0));
}

struct Instance {
    g: CompGraph,
    p: ParamSet,
    pred: NodeId,
    pred2: NodeId,
    pl: ProbMask,
    h: usize,
    w: usize,
}

fn instance(seed: u64) -> (Instance, rand_chacha::ChaCha8Rng) {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
    let mut g = CompGraph::new();
    let mut p = ParamSet::new();
    let pred = logit_prediction(&mut g, &mut p, &mut r, "z", h, w);
    let pred2 = logit_prediction(&mut g, &mut p, &mut r, "z2", h, w);
    let pl = random_mask(&mut r, h, w);
    (Instance { g, p, pred, pred2, pl, h, w }, r)
}

pub fn basic_losses(seed: u64) {
    let (mut t, mut r) = instance(1_000 + seed);
    let wts = random_mask(&mut r, t.h, t.w);
    let l = bce(&mut t.g, t.pred, Target::Mask(&t.pl), Some(&wts)).unwrap();
    check(&t.g, &t.p, l, "bce");
    let l = soft_iou(&mut t.g, t.pred, Target::Mask(&t.pl), Some(&wts)).unwrap();
    check(&t.g, &t.p, l, "soft iou");
    let l = soft_iou(&mut t.g, t.pred, Target::Node(t.pred2), None).unwrap();
    check(&t.g, &t.p, l, "soft iou between predictions");
    let ann = random_annotation(&mut r, t.h, t.w);
    let l = partial_ce(&mut t.g, t.pred, &ann).unwrap();
    check(&t.g, &t.p, l, "partial ce");
    let y = random_binary(&mut r, t.h, t.w);
    let l = dense_supervised(&mut t.g, t.pred, &y).unwrap();
    check(&t.g, &t.p, l, "dense supervised");
}

pub fn refinement_losses(seed: u64) {
    let thr = RefinementThresholds::default();
    let (mut t, _) = instance(2_000 + seed);
    let l = refine_basic(&mut t.g, &t.pl, t.pred, None, RefineOptions::default()).unwrap();
    check(&t.g, &t.p, l, "refine basic");

    // Hard branch: mostly 0.5 with every seventh pixel trusted (entropy
    // stays above 0.8); easy branch: a confident pseudo-label with a
    // confident prediction; normal otherwise.
    let hard = ProbMask::from_fn(t.h, t.w, |y, x| if (y * t.w + x) % 7 == 0 { 0.95 } else { 0.5 });
    let eval = t.g.evaluate(&Feed::new(), &t.p).unwrap();
    let value = ProbMask::from_tensor(eval.value(t.pred)).unwrap();
    let (l, b) = refine_piecewise(
        &mut t.g,
        &hard,
        Pred { node: t.pred, value: &value },
        None,
        &thr,
        RefineOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(b, Branch::Hard);
    check(&t.g, &t.p, l, "refine hard");

    let confident = ProbMask::from_fn(t.h, t.w, |y, x| if (y * 3 + x) % 2 == 0 { 0.995 } else { 0.004 });
    let easy_value = confident.clone();
    let (l, b) = refine_piecewise(
        &mut t.g,
        &confident,
        Pred { node: t.pred, value: &easy_value },
        Some(t.pred2),
        &thr,
        RefineOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(b, Branch::Easy);
    check(&t.g, &t.p, l, "refine easy");

    let mid = ProbMask::filled(t.h, t.w, 0.5);
    let (l, b) = refine_piecewise(
        &mut t.g,
        &confident,
        Pred { node: t.pred, value: &mid },
        None,
        &thr,
        RefineOptions::default(),
        None,
    )
    .unwrap();
    assert_eq!(b, Branch::Normal);
    check(&t.g, &t.p, l, "refine normal");
}

/// The invariance target is stop-grad, so the gradient must equal that of
/// the same loss with the weak prediction frozen into a constant.
fn assert_same_gradients(a: &ParamSet, b: &ParamSet, what: &str) {
    for (name, e) in a.iter() {
        let d = e.grad.max_abs_diff(b.grad(name).unwrap()).unwrap();
        assert!(d <= 1e-12, "{what}: gradient of '{name}' differs by {d:e}");
    }
}

fn gradients(g: &CompGraph, p: &ParamSet, loss: NodeId) -> ParamSet {
    let mut q = p.clone();
    q.zero_grad();
    let eval = g.evaluate(&Feed::new(), &q).unwrap();
    g.backprop(&eval, &mut q, loss).unwrap();
    q
}

pub fn generalist_losses(seed: u64) {
    let (mut t, _) = instance(3_000 + seed);
    let weak = eval_mask(&t.g, &Feed::new(), &t.p, t.pred);
    let stopped = aug_invariance(&mut t.g, t.pred, t.pred2).unwrap();
    let frozen = aug_invariance_to(&mut t.g, Target::Mask(&weak), t.pred2).unwrap();
    check(&t.g, &t.p, frozen, "augmentation invariance");
    assert_same_gradients(&gradients(&t.g, &t.p, stopped), &gradients(&t.g, &t.p, frozen), "invariance");
    let l = noise_resistance(&mut t.g, t.pred, &t.pl).unwrap();
    check(&t.g, &t.p, l, "noise resistance");
}

pub fn phase_losses(seed: u64) {
    let thr = RefinementThresholds::default();
    let (mut t, mut r) = instance(4_000 + seed);
    let ann = random_annotation(&mut r, t.h, t.w);
    let pl_f = random_mask(&mut r, t.h, t.w);
    let eval = t.g.evaluate(&Feed::new(), &t.p).unwrap();
    let value = ProbMask::from_tensor(eval.value(t.pred)).unwrap();
    let pred = Pred { node: t.pred, value: &value };
    let l = phase1_loss(
        &mut t.g,
        Mode::Weak,
        Supervision::Sparse(&ann),
        &t.pl,
        Some(&pl_f),
        pred,
        Some(t.pred2),
        &thr,
        Phase1Options::default(),
    )
    .unwrap();
    check(&t.g, &t.p, l.total, "phase I weak");

    let y = random_binary(&mut r, t.h, t.w);
    let l = phase1_loss(
        &mut t.g,
        Mode::Semi,
        Supervision::Dense(&y),
        &t.pl,
        Some(&pl_f),
        pred,
        Some(t.pred2),
        &thr,
        Phase1Options::default(),
    )
    .unwrap();
    check(&t.g, &t.p, l.total, "phase I semi");

    for (mode, sup) in [(Mode::Weak, Supervision::Sparse(&ann)), (Mode::Semi, Supervision::Unlabeled)] {
        let stopped = phase2_loss(&mut t.g, mode, sup, pred, t.pred2, &t.pl, Phase2Options::default()).unwrap();
        let frozen = Phase2Options { ai_target: Some(&value), ..Phase2Options::default() };
        let l = phase2_loss(&mut t.g, mode, sup, pred, t.pred2, &t.pl, frozen).unwrap();
        check(&t.g, &t.p, l.total, "phase II");
        assert_same_gradients(&gradients(&t.g, &t.p, stopped.total), &gradients(&t.g, &t.p, l.total), "phase II");
    }
}
