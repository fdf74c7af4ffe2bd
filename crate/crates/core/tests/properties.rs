//! Hand-evaluated loss values, resampling tolerance, the synthetic scene
//! generator's contrast control, and dataset persistence.

mod common;

use common::*;
use rand::Rng;
use scaler::augment::{invert_to_reference, warp_mask, Rotation, Scale, WeakAug};
use scaler::autodiff::{CompGraph, Feed, ParamSet};
use scaler::losses::{noise_resistance, refine_basic, RefineOptions};
use scaler::mask::ProbMask;
use scaler::synthdata::{self, gen_sample, DatasetConfig, SceneSpec, SynthError};
use statrs::distribution::{ContinuousCDF, StudentsT};

fn constant_pred(m: &ProbMask) -> (CompGraph, scaler::autodiff::NodeId) {
    let mut g = CompGraph::new();
    let n = g.constant(m.to_tensor());
    (g, n)
}

fn scalar(g: &CompGraph, n: scaler::autodiff::NodeId) -> f64 {
    g.evaluate(&Feed::new(), &ParamSet::new()).unwrap().scalar(n)
}

#[test]
fn refine_basic_matches_hand_evaluation() {
    // pl = [1, 1, 0, 0.5], pred = 0.5: entropy 1/4, weights U = [1, 1, 1, 0].
    // Weighted BCE = 3 ln 2 / 4. Weighted IoU: intersection 1, union 2.5,
    // so 1 - 2 / 3.5 = 3/7.
    let pl = ProbMask::new(2, 2, vec![1.0, 1.0, 0.0, 0.5]).unwrap();
    let (mut g, pred) = constant_pred(&ProbMask::filled(2, 2, 0.5));
    let rb = refine_basic(&mut g, &pl, pred, None, RefineOptions::default()).unwrap();
    let expected = 0.75 * (0.75 * std::f64::consts::LN_2 + 3.0 / 7.0);
    assert!((scalar(&g, rb) - expected).abs() < 1e-14);

    let nr = noise_resistance(&mut g, pred, &pl).unwrap();
    assert!((scalar(&g, nr) / scalar(&g, rb) - 4.0 / 3.0).abs() < 1e-14);
}

#[test]
fn scale_round_trip_on_smooth_masks() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let m = smooth_blob(
            32,
            r.random_range(8.0..24.0),
            r.random_range(8.0..24.0),
            r.random_range(5.0..12.0),
            r.random_range(5.0..12.0),
            r.random_range(0.15..0.3),
        );
        let aug = WeakAug { rotation: Rotation::R90, hflip: seed % 2 == 0, scale: Scale::Double, ..WeakAug::IDENTITY };
        let back = invert_to_reference(&aug, &warp_mask(&aug, &m).unwrap()).unwrap();
        worst = worst.max(back.max_abs_diff(&m).unwrap());
    }
    assert!(worst <= 0.05, "round trip error {worst}");
}

/// Per-image difference between mean foreground and mean background intensity.
fn intensity_gaps(contrast: f64, images: u64) -> Vec<f64> {
    let spec = SceneSpec { side: 32, ..SceneSpec::default() }.with_contrast(contrast);
    (0..images)
        .map(|seed| {
            let s = gen_sample(&spec, &mut rng(90_000 + seed)).unwrap();
            let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (v, m) in s.image.data().iter().zip(s.gt.data()) {
                if *m >= 0.5 {
                    fg += v;
                    nf += 1.0;
                } else {
                    bg += v;
                    nb += 1.0;
                }
            }
            fg / nf - bg / nb
        })
        .collect()
}

#[test]
fn full_contrast_separates_classes() {
    let gaps = intensity_gaps(1.0, 100);
    let mean = gaps.iter().map(|g| g.abs()).sum::<f64>() / gaps.len() as f64;
    assert!(mean >= 0.5, "mean gap {mean}");
}

#[test]
fn zero_contrast_hides_the_object() {
    let gaps = intensity_gaps(0.0, 100);
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var / n).sqrt();
    let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t.abs()));
    assert!(p > 0.01, "fg/bg gap is detectable: t = {t}, p = {p}");
}

#[test]
fn dataset_round_trip_and_damage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_train: 8,
        n_test: 2,
        scene: SceneSpec { side: 16, ..SceneSpec::default() },
        ..Default::default()
    };
    let ds = synthdata::generate(&cfg).unwrap();
    synthdata::write_dataset(dir.path(), &ds).unwrap();
    let back = synthdata::read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.samples, ds.samples);

    let victim = std::fs::read_dir(dir.path().join("images")).unwrap().next().unwrap().unwrap().path();
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    match synthdata::read_dataset(dir.path()) {
        Err(SynthError::Format { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected a format error naming {victim:?}, got {other:?}"),
    }
}

#[test]
fn labelled_split_counts() {
    assert_eq!(synthdata::labeled_count(160, 1.0 / 8.0), 20);
    assert_eq!(synthdata::labeled_count(160, 1.0 / 16.0), 10);
}
