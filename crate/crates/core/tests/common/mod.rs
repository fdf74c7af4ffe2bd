//! Shared fixtures and independent reference implementations for the
//! integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod checks;
pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaler::autodiff::{CompGraph, Feed, NodeId, ParamSet, Tensor};
use scaler::mask::{AnnotationMode, Label, ProbMask, SparseAnnotation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probabilities kept away from 0 and 1 so every log stays in its smooth region.
pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> ProbMask {
    ProbMask::new(h, w, (0..h * w).map(|_| rng.random_range(0.02..0.98)).collect()).unwrap()
}

pub fn random_binary(rng: &mut impl Rng, h: usize, w: usize) -> ProbMask {
    loop {
        let m =
            ProbMask::new(h, w, (0..h * w).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap();
        let fg = m.data().iter().filter(|&&v| v == 1.0).count();
        if fg > 0 && fg < h * w {
            return m;
        }
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A sparse annotation with at least one pixel of each class.
pub fn random_annotation(rng: &mut impl Rng, h: usize, w: usize) -> SparseAnnotation {
    let mut a = SparseAnnotation::unknown(h, w, AnnotationMode::Point);
    let n = h * w;
    let fg = rng.random_range(0..n);
    let mut bg = rng.random_range(0..n);
    while bg == fg {
        bg = rng.random_range(0..n);
    }
    a.set(fg / w, fg % w, Label::Foreground);
    a.set(bg / w, bg % w, Label::Background);
    a
}

/// Graph whose prediction is `sigmoid(param)` for a parameter named `name`
/// initialised with logits that keep the prediction inside (0.05, 0.95).
pub fn logit_prediction(
    g: &mut CompGraph,
    params: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    h: usize,
    w: usize,
) -> NodeId {
    let z = g.param(name, &[1, 1, h, w]).unwrap();
    params.insert(name, random_tensor(rng, &[1, 1, h, w], -2.5, 2.5));
    g.sigmoid(z).unwrap()
}

pub fn eval_mask(g: &CompGraph, feed: &Feed, params: &ParamSet, node: NodeId) -> ProbMask {
    ProbMask::from_tensor(g.evaluate(feed, params).unwrap().value(node)).unwrap()
}

/// Smooth blob in [0, 1]: a logistic ramp around an ellipse.
pub fn smooth_blob(n: usize, cy: f64, cx: f64, ry: f64, rx: f64, softness: f64) -> ProbMask {
    ProbMask::from_fn(n, n, |y, x| {
        let d = (((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2)).sqrt();
        1.0 / (1.0 + ((d - 1.0) / softness).exp())
    })
}

// Reference metrics, written directly from the published definitions with
// per-pixel loops so they share no code path with the library.

fn fg(v: f64) -> bool {
    v >= 0.5
}

pub fn ref_mae(p: &ProbMask, g: &ProbMask) -> f64 {
    let (h, w) = p.dims();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            s += (p.get(y, x) - g.get(y, x)).abs();
        }
    }
    s / (h * w) as f64
}

fn ref_binary(p: &ProbMask) -> Vec<Vec<f64>> {
    let (h, w) = p.dims();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            total += p.get(y, x);
        }
    }
    let t = f64::min(2.0 * total / (h * w) as f64, 1.0);
    (0..h).map(|y| (0..w).map(|x| if p.get(y, x) >= t && p.get(y, x) > 0.0 { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn ref_f_beta(p: &ProbMask, g: &ProbMask) -> f64 {
    let b = ref_binary(p);
    let (h, w) = p.dims();
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            match (b[y][x] == 1.0, fg(g.get(y, x))) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fneg);
    1.3 * precision * recall / (0.3 * precision + recall)
}

pub fn ref_e_measure(p: &ProbMask, g: &ProbMask) -> f64 {
    let b = ref_binary(p);
    let (h, w) = p.dims();
    let n = (h * w) as f64;
    let gv = |y: usize, x: usize| if fg(g.get(y, x)) { 1.0 } else { 0.0 };
    let gt_sum: f64 = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| gv(y, x)).sum();
    let pred_sum: f64 = b.iter().flatten().sum();
    let score = if gt_sum == 0.0 {
        (n - pred_sum) / n
    } else if gt_sum == n {
        pred_sum / n
    } else {
        let (mb, mg) = (pred_sum / n, gt_sum / n);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let a = b[y][x] - mb;
                let c = gv(y, x) - mg;
                let d = a * a + c * c;
                let align = if d == 0.0 { 0.0 } else { 2.0 * a * c / d };
                acc += (1.0 + align) * (1.0 + align) / 4.0;
            }
        }
        acc / n
    };
    score.clamp(0.0, 1.0)
}

fn ref_ssim(p: &ProbMask, g: &ProbMask, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let n = (y1 - y0) * (x1 - x0);
    if n == 0 {
        return 0.0;
    }
    let gv = |y: usize, x: usize| if fg(g.get(y, x)) { 1.0 } else { 0.0 };
    let (mut mx, mut my) = (0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            mx += p.get(y, x);
            my += gv(y, x);
        }
    }
    mx /= n as f64;
    my /= n as f64;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let a = p.get(y, x) - mx;
            let b = gv(y, x) - my;
            vx += a * a;
            vy += b * b;
            cxy += a * b;
        }
    }
    let d = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let (vx, vy, cxy) = (vx / d, vy / d, cxy / d);
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn ref_object_part(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd =
        if values.len() > 1 { (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    2.0 * m / (m * m + 1.0 + sd)
}

pub fn ref_s_measure(p: &ProbMask, g: &ProbMask) -> f64 {
    let (h, w) = p.dims();
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    let (mut sy, mut sx) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if fg(g.get(y, x)) {
                fg_vals.push(p.get(y, x));
                sy += y as f64;
                sx += x as f64;
            } else {
                bg_vals.push(1.0 - p.get(y, x));
            }
        }
    }
    let n = (h * w) as f64;
    let k = fg_vals.len() as f64;
    let mean_p = p.data().iter().sum::<f64>() / n;
    let s = if k == 0.0 {
        1.0 - mean_p
    } else if k == n {
        mean_p
    } else {
        let u = k / n;
        let object = u * ref_object_part(&fg_vals) + (1.0 - u) * ref_object_part(&bg_vals);
        let cy = ((sy / k).round_ties_even() as usize + 1).min(h);
        let cx = ((sx / k).round_ties_even() as usize + 1).min(w);
        let blocks = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
        let region: f64 = blocks
            .iter()
            .map(|&(y0, y1, x0, x1)| ((y1 - y0) * (x1 - x0)) as f64 / n * ref_ssim(p, g, y0, y1, x0, x1))
            .sum();
        0.5 * object + 0.5 * region
    };
    s.clamp(0.0, 1.0)
}

/// A small benchmark that trains in a few seconds.
pub fn tiny_dataset(seed: u64) -> scaler::synthdata::Dataset {
    use scaler::synthdata::{generate, DatasetConfig, SceneSpec};
    generate(&DatasetConfig {
        n_train: 24,
        n_test: 8,
        scene: SceneSpec { side: 16, ..SceneSpec::default() }.with_contrast(0.4),
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

pub fn tiny_config() -> scaler::trainer::TrainConfig {
    scaler::trainer::TrainConfig {
        lr: 0.003,
        generalist_lr: 0.003,
        eta: 0.98,
        k: 2,
        stage0_epochs: 1,
        aux_samples: 12,
        stage1_epochs: 2,
        generalist_finetune_epochs: 1,
        stage2_epochs: 1,
        stage3_alternations: 2,
        ..scaler::trainer::TrainConfig::default()
    }
}
