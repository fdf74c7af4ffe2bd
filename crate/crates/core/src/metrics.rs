//! Evaluation measures: MAE, adaptive F-beta, E-measure and S-measure.
//!
//! F-beta and E-measure binarize the prediction at the adaptive threshold
//! `min(2 * mean(pred), 1)`. A pixel is positive when `pred >= threshold`
//! and `pred > 0`, so an all-zero prediction selects nothing.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{MaskError, ProbMask};

pub const BETA_SQUARED: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Shape(#[from] MaskError),
    #[error("ground truth has no foreground pixel")]
    EmptyForeground,
    #[error("no samples to evaluate")]
    Empty,
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

fn is_fg(v: f64) -> bool {
    v >= 0.5
}

pub fn mae(pred: &ProbMask, gt: &ProbMask) -> Result<f64, MetricError> {
    pred.check_same_dims(gt)?;
    Ok(pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn adaptive_threshold(pred: &ProbMask) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

fn binarize(pred: &ProbMask) -> Vec<bool> {
    let thr = adaptive_threshold(pred);
    pred.data().iter().map(|&p| p >= thr && p > 0.0).collect()
}

/// Weighted harmonic mean of precision and recall at the adaptive threshold.
pub fn f_beta(pred: &ProbMask, gt: &ProbMask) -> Result<f64, MetricError> {
    pred.check_same_dims(gt)?;
    let gt_fg = gt.data().iter().filter(|&&g| is_fg(g)).count();
    if gt_fg == 0 {
        return Err(MetricError::EmptyForeground);
    }
    let bin = binarize(pred);
    let selected = bin.iter().filter(|&&b| b).count();
    let tp = bin.iter().zip(gt.data()).filter(|(&b, &g)| b && is_fg(g)).count();
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / selected as f64;
    let recall = tp as f64 / gt_fg as f64;
    Ok((1.0 + BETA_SQUARED) * precision * recall / (BETA_SQUARED * precision + recall))
}

fn enhanced(a: f64, b: f64) -> f64 {
    let denom = a * a + b * b;
    let align = if denom == 0.0 { 0.0 } else { 2.0 * a * b / denom };
    (align + 1.0).powi(2) / 4.0
}

/// Enhanced-alignment measure of the binarized prediction, averaged over
/// pixels. The four (prediction, truth) class combinations each share one
/// alignment value, so the sum is taken over those groups.
pub fn e_measure(pred: &ProbMask, gt: &ProbMask) -> Result<f64, MetricError> {
    pred.check_same_dims(gt)?;
    let n = pred.len() as f64;
    let bin = binarize(pred);
    let mut counts = [[0usize; 2]; 2];
    for (&b, &g) in bin.iter().zip(gt.data()) {
        counts[b as usize][is_fg(g) as usize] += 1;
    }
    let pred_fg = (counts[1][0] + counts[1][1]) as f64;
    let gt_fg = (counts[0][1] + counts[1][1]) as f64;
    let sum = if gt_fg == 0.0 {
        n - pred_fg
    } else if gt_fg == n {
        pred_fg
    } else {
        let (mp, mg) = (pred_fg / n, gt_fg / n);
        let mut s = 0.0;
        for (pb, pv) in [(0usize, 0.0), (1, 1.0)] {
            for (gb, gv) in [(0usize, 0.0), (1, 1.0)] {
                s += counts[pb][gb] as f64 * enhanced(pv - mp, gv - mg);
            }
        }
        s
    };
    Ok((sum / n).clamp(0.0, 1.0))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_dev(values))
}

fn object_score(pred: &ProbMask, gt: &ProbMask) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if is_fg(g) {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let u = fg.len() as f64 / pred.len() as f64;
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

/// Structural similarity of one block; an empty block scores 0.
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let denom = (n.max(2) - 1) as f64;
    let (x, y) = (mean(pred), mean(gt));
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sx += (p - x).powi(2);
        sy += (g - y).powi(2);
        sxy += (p - x) * (g - y);
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point: the rounded (ties to even) foreground centroid, plus one.
fn split_point(gt: &ProbMask) -> (usize, usize) {
    let (h, w) = gt.dims();
    let (mut sy, mut sx, mut count) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if is_fg(gt.get(y, x)) {
                sy += y as f64;
                sx += x as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return ((h as f64 / 2.0).round_ties_even() as usize + 1, (w as f64 / 2.0).round_ties_even() as usize + 1);
    }
    let cy = (sy / count as f64).round_ties_even() as usize + 1;
    let cx = (sx / count as f64).round_ties_even() as usize + 1;
    (cy.min(h), cx.min(w))
}

fn region_score(pred: &ProbMask, gt: &ProbMask) -> f64 {
    let (h, w) = gt.dims();
    let (cy, cx) = split_point(gt);
    let area = (h * w) as f64;
    let mut total = 0.0;
    for (y0, y1) in [(0, cy), (cy, h)] {
        for (x0, x1) in [(0, cx), (cx, w)] {
            let mut p = Vec::new();
            let mut g = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    p.push(pred.get(y, x));
                    g.push(if is_fg(gt.get(y, x)) { 1.0 } else { 0.0 });
                }
            }
            let weight = ((y1 - y0) * (x1 - x0)) as f64 / area;
            if weight > 0.0 {
                total += weight * block_ssim(&p, &g);
            }
        }
    }
    total
}

/// Structure measure: `alpha * object + (1 - alpha) * region`, clamped to [0, 1].
pub fn s_measure(pred: &ProbMask, gt: &ProbMask) -> Result<f64, MetricError> {
    pred.check_same_dims(gt)?;
    let fg_fraction = gt.data().iter().filter(|&&g| is_fg(g)).count() as f64 / gt.len() as f64;
    let s = if fg_fraction == 0.0 {
        1.0 - pred.mean()
    } else if fg_fraction == 1.0 {
        pred.mean()
    } else {
        S_ALPHA * object_score(pred, gt) + (1.0 - S_ALPHA) * region_score(pred, gt)
    };
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub mae: f64,
    pub f_beta: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mae: f64,
    pub f_beta: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub mean: MetricMeans,
}

pub fn evaluate_sample(sample_id: usize, pred: &ProbMask, gt: &ProbMask) -> Result<SampleMetrics, MetricError> {
    Ok(SampleMetrics {
        sample_id,
        mae: mae(pred, gt)?,
        f_beta: f_beta(pred, gt)?,
        e_phi: e_measure(pred, gt)?,
        s_alpha: s_measure(pred, gt)?,
    })
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Result<Self, MetricError> {
        if samples.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = samples.len() as f64;
        let avg = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let mean = MetricMeans {
            mae: avg(|s| s.mae),
            f_beta: avg(|s| s.f_beta),
            e_phi: avg(|s| s.e_phi),
            s_alpha: avg(|s| s.s_alpha),
        };
        Ok(Self { samples, mean })
    }

    /// Evaluates `(sample_id, prediction, ground truth)` triples.
    pub fn evaluate<'a>(
        items: impl IntoIterator<Item = (usize, &'a ProbMask, &'a ProbMask)>,
    ) -> Result<Self, MetricError> {
        let samples = items.into_iter().map(|(id, p, g)| evaluate_sample(id, p, g)).collect::<Result<Vec<_>, _>>()?;
        Self::from_samples(samples)
    }

    pub const CSV_COLUMNS: [&'static str; 5] = ["sample_id", "mae", "f_beta", "e_phi", "s_alpha"];

    /// One row per sample; no summary row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_gt(n: usize) -> ProbMask {
        ProbMask::from_fn(n, n, |_, x| if x < n / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn trivial_fixtures() {
        let gt = half_gt(8);
        let inv = gt.map(|v| 1.0 - v);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&inv, &gt).unwrap(), 1.0);
        assert_eq!(mae(&ProbMask::filled(8, 8, 0.5), &gt).unwrap(), 0.5);
        assert_eq!(f_beta(&gt, &gt).unwrap(), 1.0);
        assert_eq!(f_beta(&ProbMask::filled(8, 8, 0.0), &gt).unwrap(), 0.0);
        assert!(matches!(f_beta(&gt, &ProbMask::filled(8, 8, 0.0)), Err(MetricError::EmptyForeground)));
        assert_eq!(e_measure(&gt, &gt).unwrap(), 1.0);
        assert!((s_measure(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!(e_measure(&inv, &gt).unwrap() < 1e-9);
        // Every quadrant of a centred square mixes both classes.
        let square = ProbMask::from_fn(8, 8, |y, x| if (2..6).contains(&y) && (2..6).contains(&x) { 1.0 } else { 0.0 });
        assert!(s_measure(&square.map(|v| 1.0 - v), &square).unwrap() < 1e-9);
        assert!(mae(&gt, &ProbMask::filled(4, 4, 0.0)).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let gt = half_gt(4);
        let r = MetricReport::evaluate([(3, &gt, &gt), (4, &ProbMask::filled(4, 4, 0.5), &gt)]).unwrap();
        assert_eq!(r.mean.mae, 0.25);
        let csv = r.to_csv_string();
        assert!(csv.starts_with("sample_id,mae,f_beta,e_phi,s_alpha\n3,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
