//! Deterministic property checks shared by the unit-style integration tests
//! and the acceptance harness. Each check panics on the first violation and
//! returns a short summary of what it measured.

use super::*;
use scaler::augment::{apply_weak, warp_mask, AugPolicy, Rotation, Scale, WeakAug};
use scaler::autodiff::Tensor;
use scaler::losses::{refine_piecewise, select_branch, Branch, Pred, RefineOptions, RefinementThresholds};
use scaler::mask::{ProbMask, SparseAnnotation};
use scaler::metrics::{e_measure, f_beta, mae, s_measure};
use scaler::models::{ema_update, MaskPredictor, ModelBundle, ModelError};
use scaler::pseudolabel::{consensus, ensemble_fuse, entropy, trust_mask, uncertainty, TrustBand};

/// Exact values of the entropy, uncertainty and trust weights.
pub fn weighting_fixtures() -> String {
    let row = |v: &[f64]| ProbMask::new(1, v.len(), v.to_vec()).unwrap();
    assert_eq!(entropy(&ProbMask::filled(4, 4, 0.5)), 1.0);
    assert_eq!(entropy(&row(&[0.0, 1.0, 1.0, 0.0])), 0.0);
    assert_eq!(entropy(&row(&[0.5, 1.0, 0.5, 1.0])), 0.5);
    assert_eq!(uncertainty(&row(&[0.5, 0.0, 1.0, 0.75, 0.25])).data(), &[0.0, 1.0, 1.0, 0.25, 0.25]);
    let band = TrustBand::default();
    let w = trust_mask(&row(&[0.05, 0.5, 0.1, 0.9, 0.95, 0.0, 1.0]), band);
    assert_eq!(w.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let just_outside = trust_mask(&row(&[0.1 - 1e-12, 0.9 + 1e-12]), band);
    assert_eq!(just_outside.data(), &[1.0, 1.0]);
    assert_eq!(
        consensus(&ProbMask::filled(2, 2, 0.0), &ProbMask::filled(2, 2, 1.0)).unwrap(),
        ProbMask::filled(2, 2, 0.5)
    );
    "entropy {1, 0, 0.5}, uncertainty {0, 1, 0.25}, trust closed at 0.1/0.9".into()
}

/// Runs `steps` EMA updates against a frozen student and returns the worst
/// relative deviation of the per-step contraction from `eta`, and of the
/// total contraction from `eta^steps`.
pub fn ema_contraction(eta: f64, steps: usize) -> (f64, f64) {
    let bundle = ModelBundle::with_defaults(11);
    let student = bundle.student.clone();
    let mut teacher = ModelBundle::with_defaults(12).student;
    let gap = |t: &scaler::autodiff::ParamSet| t.max_abs_diff(&student).unwrap();
    let d0 = gap(&teacher);
    assert!(d0 > 0.1, "initial gap {d0} too small to measure");
    let mut prev = d0;
    let mut worst_step = 0.0f64;
    for _ in 0..steps {
        ema_update(&mut teacher, &student, eta).unwrap();
        let d = gap(&teacher);
        worst_step = worst_step.max((d / prev - eta).abs() / eta);
        prev = d;
    }
    let total = ((prev / d0) - eta.powi(steps as i32)).abs() / eta.powi(steps as i32);
    (worst_step, total)
}

/// Returns the warped ground truth for whichever candidate augmentation
/// produced the image it is shown.
struct EquivariantOracle {
    reference: Tensor,
    gt: ProbMask,
}

fn all_weak_augs() -> Vec<WeakAug> {
    let mut out = Vec::new();
    for scale in Scale::ALL {
        for rotation in Rotation::ALL {
            for hflip in [false, true] {
                for vflip in [false, true] {
                    out.push(WeakAug { hflip, vflip, rotation, scale });
                }
            }
        }
    }
    out
}

impl MaskPredictor for EquivariantOracle {
    fn predict(&self, image: &Tensor, _: Option<&SparseAnnotation>) -> Result<ProbMask, ModelError> {
        let aug = all_weak_augs()
            .into_iter()
            .find(|a| apply_weak(a, &self.reference).is_ok_and(|t| &t == image))
            .expect("image is a weak augmentation of the reference");
        Ok(warp_mask(&aug, &self.gt).unwrap())
    }
}

/// Ensemble fusion with an equivariant oracle over `images` seeded scenes.
/// Returns the worst max-abs error without and with scale augmentations.
pub fn fusion_oracle(images: u64) -> (f64, f64) {
    let n = 32;
    let (mut exact, mut scaled) = (0.0f64, 0.0f64);
    for seed in 0..images {
        let mut r = rng(50_000 + seed);
        let gt = smooth_blob(
            n,
            r.random_range(10.0..22.0),
            r.random_range(10.0..22.0),
            r.random_range(5.0..10.0),
            r.random_range(5.0..10.0),
            r.random_range(0.15..0.3),
        );
        // An asymmetric texture makes every augmentation distinguishable.
        let texture = random_tensor(&mut r, &[1, 1, n, n], 0.0, 1.0);
        // Binary ground truth averages without round-off; bilinear rescaling
        // needs a smooth one.
        let binary = gt.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        for (scales, gt, worst) in [(false, binary, &mut exact), (true, gt, &mut scaled)] {
            let oracle = EquivariantOracle { reference: texture.clone(), gt: gt.clone() };
            let policy = AugPolicy { k: 12, seed: 60_000 + seed, scales };
            let fused = ensemble_fuse(&oracle, &texture, None, &policy).unwrap();
            *worst = worst.max(fused.max_abs_diff(&gt).unwrap());
        }
    }
    assert_eq!(exact, 0.0, "fusion without scales must be exact");
    assert!(scaled <= 0.05, "fusion with scales off by {scaled}");
    (exact, scaled)
}

/// Hand-computed branch table over the entropy grid {0, 0.1, ..., 1.0}:
/// row = pseudo-label entropy, column = prediction entropy.
const BRANCH_TABLE: [&str; 11] = [
    "EEENNNNNNNN",
    "EEENNNNNNNN",
    "EEENNNNNNNN",
    "EEENNNNNNNN",
    "EEENNNNNNNN",
    "EEENNNNNNNN",
    "EEENNNNNNNN",
    "EEENNNNNNNN",
    "HHHHHHHHHHH",
    "HHHHHHHHHHH",
    "HHHHHHHHHHH",
];

/// A 1x10 mask whose mean entropy is exactly `tenths / 10`: that many
/// pixels at 0.5 and the rest at 0.
fn mask_with_entropy(tenths: usize) -> ProbMask {
    ProbMask::from_fn(1, 10, |_, x| if x < tenths { 0.5 } else { 0.0 })
}

/// Drives `refine_piecewise` through every grid cell and compares the branch
/// it takes with the table. Returns the number of cells per branch.
pub fn branch_coverage() -> [usize; 3] {
    let thr = RefinementThresholds::default();
    let mut counts = [0usize; 3];
    let mut g = scaler::autodiff::CompGraph::new();
    let mut p = scaler::autodiff::ParamSet::new();
    let mut r = rng(7);
    let pred = logit_prediction(&mut g, &mut p, &mut r, "z", 1, 10);
    let strong = logit_prediction(&mut g, &mut p, &mut r, "z2", 1, 10);
    for (i, row) in BRANCH_TABLE.iter().enumerate() {
        for (j, cell) in row.chars().enumerate() {
            let expected = match cell {
                'H' => Branch::Hard,
                'E' => Branch::Easy,
                _ => Branch::Normal,
            };
            let (pl, value) = (mask_with_entropy(i), mask_with_entropy(j));
            assert_eq!(entropy(&pl), i as f64 / 10.0);
            assert_eq!(entropy(&value), j as f64 / 10.0);
            assert_eq!(select_branch(i as f64 / 10.0, j as f64 / 10.0, &thr), expected, "grid ({i}, {j})");
            let (_, taken) = refine_piecewise(
                &mut g,
                &pl,
                Pred { node: pred, value: &value },
                Some(strong),
                &thr,
                RefineOptions::default(),
                None,
            )
            .unwrap();
            assert_eq!(taken, expected, "refine_piecewise at grid ({i}, {j})");
            counts[match taken {
                Branch::Hard => 0,
                Branch::Easy => 1,
                Branch::Normal => 2,
            }] += 1;
        }
    }
    assert!(counts.iter().all(|&c| c > 0), "branch never taken: {counts:?}");
    counts
}

fn half_gt(n: usize) -> ProbMask {
    ProbMask::from_fn(n, n, |_, x| if x < n / 2 { 1.0 } else { 0.0 })
}

/// Closed-form metric values on perfect, inverted and constant predictions.
pub fn metric_fixtures() {
    let gt = half_gt(8);
    let inv = gt.map(|v| 1.0 - v);
    assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
    assert_eq!(mae(&inv, &gt).unwrap(), 1.0);
    assert_eq!(mae(&ProbMask::filled(8, 8, 0.5), &gt).unwrap(), 0.5);
    assert_eq!(f_beta(&gt, &gt).unwrap(), 1.0);
    assert_eq!(f_beta(&ProbMask::filled(8, 8, 0.0), &gt).unwrap(), 0.0);
    assert_eq!(e_measure(&gt, &gt).unwrap(), 1.0);
    assert!((s_measure(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    assert!(e_measure(&inv, &gt).unwrap() < 1e-9);
    let square = ProbMask::from_fn(8, 8, |y, x| if (2..6).contains(&y) && (2..6).contains(&x) { 1.0 } else { 0.0 });
    assert!(s_measure(&square.map(|v| 1.0 - v), &square).unwrap() < 1e-9);
}

/// Largest absolute difference between the library metrics and the
/// reference implementations over `trials` random 8x8 instances plus the
/// constant and inverted cases.
pub fn metric_references(trials: u64) -> f64 {
    let mut cases = vec![(ProbMask::filled(8, 8, 0.5), half_gt(8)), (half_gt(8).map(|v| 1.0 - v), half_gt(8))];
    let pr = ProbMask::new(3, 3, vec![0.9, 0.9, 0.1, 0.8, 0.2, 0.1, 0.6, 0.3, 0.05]).unwrap();
    let pg = ProbMask::new(3, 3, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    cases.push((pr, pg));
    for seed in 0..trials {
        let mut r = rng(70_000 + seed);
        let gt = random_binary(&mut r, 8, 8);
        let pred = if seed % 4 == 0 { random_binary(&mut r, 8, 8) } else { random_mask(&mut r, 8, 8) };
        cases.push((pred, gt));
    }
    let mut worst = 0.0f64;
    for (pred, gt) in &cases {
        for (name, got, want) in [
            ("mae", mae(pred, gt).unwrap(), ref_mae(pred, gt)),
            ("f_beta", f_beta(pred, gt).unwrap(), ref_f_beta(pred, gt)),
            ("e_measure", e_measure(pred, gt).unwrap(), ref_e_measure(pred, gt)),
            ("s_measure", s_measure(pred, gt).unwrap(), ref_s_measure(pred, gt)),
        ] {
            let d = (got - want).abs();
            assert!(d <= 1e-9, "{name}: library {got} vs reference {want}");
            worst = worst.max(d);
        }
    }
    worst
}
