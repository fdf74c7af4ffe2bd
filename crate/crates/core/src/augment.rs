//! Weak (geometric) and strong (geometric + photometric) augmentations, and
//! exact inversion of their geometry on masks.
//!
//! Geometry is applied as: horizontal flip, vertical flip, counter-clockwise
//! quarter turns, then rescale. Inversion undoes these in reverse order.
//! Rescaling is bilinear with half-pixel centres and edge clamping.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::mask::{Label, ProbMask, SparseAnnotation};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("augmentation needs a square input, got {height}x{width}")]
    NotSquare { height: usize, width: usize },
    #[error("image tensor must be 1xCxHxW, got {0:?}")]
    TensorShape(Vec<usize>),
    #[error("side {side} cannot be scaled by {scale}")]
    Indivisible { side: usize, scale: f64 },
    #[error("ensemble size K must be at least 1")]
    EmptyEnsemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn inverse(self) -> Rotation {
        Rotation::ALL[(4 - self.quarter_turns()) % 4]
    }

    pub fn degrees(self) -> u32 {
        90 * self.quarter_turns() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Half,
    One,
    Double,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Half, Scale::One, Scale::Double];

    pub fn factor(self) -> f64 {
        match self {
            Scale::Half => 0.5,
            Scale::One => 1.0,
            Scale::Double => 2.0,
        }
    }

    /// Side length after scaling a square of side `n`.
    pub fn scaled_side(self, n: usize) -> Result<usize, AugmentError> {
        match self {
            Scale::One => Ok(n),
            Scale::Double => Ok(2 * n),
            Scale::Half if n.is_multiple_of(2) && n > 0 => Ok(n / 2),
            Scale::Half => Err(AugmentError::Indivisible { side: n, scale: 0.5 }),
        }
    }

    /// Original side recovered from a scaled side `m`.
    pub fn original_side(self, m: usize) -> Result<usize, AugmentError> {
        match self {
            Scale::One => Ok(m),
            Scale::Half => Ok(2 * m),
            Scale::Double if m.is_multiple_of(2) && m > 0 => Ok(m / 2),
            Scale::Double => Err(AugmentError::Indivisible { side: m, scale: 0.5 }),
        }
    }
}

/// Invertible spatial transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakAug {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation: Rotation,
    pub scale: Scale,
}

impl WeakAug {
    pub const IDENTITY: WeakAug = WeakAug { hflip: false, vflip: false, rotation: Rotation::R0, scale: Scale::One };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Same flips and rotation, no rescale.
    pub fn without_scale(self) -> WeakAug {
        WeakAug { scale: Scale::One, ..self }
    }
}

/// Square cutout, given as fractions of the augmented side so it is
/// resolution independent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutout {
    pub top: f64,
    pub left: f64,
    pub side: f64,
}

/// A weak augmentation plus photometric perturbations that leave geometry untouched.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongAug {
    pub base: WeakAug,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub cutout: Option<Cutout>,
}

pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.2, 0.2);
pub const CONTRAST_RANGE: (f64, f64) = (0.7, 1.3);
pub const NOISE_SIGMA_MAX: f64 = 0.1;
pub const CUTOUT_MAX_SIDE: f64 = 0.25;
const CUTOUT_PROBABILITY: f64 = 0.5;

/// Ensemble size and sampling stream for test-time style augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub k: usize,
    pub seed: u64,
    pub scales: bool,
}

pub const DEFAULT_ENSEMBLE_SIZE: usize = 12;

impl Default for AugPolicy {
    fn default() -> Self {
        Self { k: DEFAULT_ENSEMBLE_SIZE, seed: 0, scales: true }
    }
}

impl AugPolicy {
    /// Draws the K weak augmentations of this policy.
    pub fn draw(&self) -> Result<Vec<WeakAug>, AugmentError> {
        if self.k == 0 {
            return Err(AugmentError::EmptyEnsemble);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.k)
            .map(|_| {
                let aug = sample_weak(&mut rng);
                if self.scales {
                    aug
                } else {
                    aug.without_scale()
                }
            })
            .collect())
    }
}

pub fn sample_weak<R: Rng + ?Sized>(rng: &mut R) -> WeakAug {
    WeakAug {
        hflip: rng.random_bool(0.5),
        vflip: rng.random_bool(0.5),
        rotation: Rotation::ALL[rng.random_range(0..4)],
        scale: Scale::ALL[rng.random_range(0..3)],
    }
}

pub fn sample_strong<R: Rng + ?Sized>(rng: &mut R, base: WeakAug) -> StrongAug {
    let brightness = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
    let contrast = rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
    let noise_sigma = rng.random_range(0.0..=NOISE_SIGMA_MAX);
    let noise_seed = rng.random();
    let cutout = if rng.random_bool(CUTOUT_PROBABILITY) {
        let side = rng.random_range(1.0 / 16.0..=CUTOUT_MAX_SIDE);
        Some(Cutout { top: rng.random_range(0.0..=1.0 - side), left: rng.random_range(0.0..=1.0 - side), side })
    } else {
        None
    };
    StrongAug { base, brightness, contrast, noise_sigma, noise_seed, cutout }
}

// ---------------------------------------------------------------------------
// grid primitives on square n×n planes

fn flip_h<T: Copy>(src: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..n {
        out.extend(src[y * n..(y + 1) * n].iter().rev());
    }
    out
}

fn flip_v<T: Copy>(src: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in (0..n).rev() {
        out.extend_from_slice(&src[y * n..(y + 1) * n]);
    }
    out
}

/// Counter-clockwise quarter turns: one turn maps `out[y][x] = src[x][n-1-y]`.
fn rotate<T: Copy>(src: &[T], n: usize, turns: usize) -> Vec<T> {
    let mut cur = src.to_vec();
    for _ in 0..turns % 4 {
        let mut next = Vec::with_capacity(cur.len());
        for y in 0..n {
            for x in 0..n {
                next.push(cur[x * n + (n - 1 - y)]);
            }
        }
        cur = next;
    }
    cur
}

fn resample_axis(src: &[f64], n: usize, m: usize, lines: usize, horizontal: bool) -> Vec<f64> {
    // Precompute taps: (i0, i1, frac) per output index.
    let ratio = n as f64 / m as f64;
    let taps: Vec<(usize, usize, f64)> = (0..m)
        .map(|i| {
            let u = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect();
    if horizontal {
        let mut out = Vec::with_capacity(lines * m);
        for l in 0..lines {
            let row = &src[l * n..(l + 1) * n];
            out.extend(taps.iter().map(|&(a, b, t)| row[a] * (1.0 - t) + row[b] * t));
        }
        out
    } else {
        let mut out = vec![0.0; m * lines];
        for (i, &(a, b, t)) in taps.iter().enumerate() {
            for x in 0..lines {
                out[i * lines + x] = src[a * lines + x] * (1.0 - t) + src[b * lines + x] * t;
            }
        }
        out
    }
}

/// Bilinear resize of an n×n plane to m×m.
pub fn resize_bilinear(src: &[f64], n: usize, m: usize) -> Vec<f64> {
    if n == m {
        return src.to_vec();
    }
    let rows = resample_axis(src, n, m, n, true);
    resample_axis(&rows, n, m, m, false)
}

/// Label-preserving resize: upscaling replicates (nearest); downscaling keeps a
/// label when every labelled source pixel in the block agrees, so sparse labels
/// survive but are never invented.
fn resize_labels(src: &[Label], n: usize, m: usize) -> Vec<Label> {
    if n == m {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(m * m);
    if m > n {
        for y in 0..m {
            let sy = ((y as f64 + 0.5) * n as f64 / m as f64).floor() as usize;
            for x in 0..m {
                let sx = ((x as f64 + 0.5) * n as f64 / m as f64).floor() as usize;
                out.push(src[sy.min(n - 1) * n + sx.min(n - 1)]);
            }
        }
    } else {
        let block = n / m;
        for y in 0..m {
            for x in 0..m {
                let mut label = Label::Unknown;
                let mut conflict = false;
                for by in 0..block {
                    for bx in 0..block {
                        let l = src[(y * block + by) * n + x * block + bx];
                        if !l.is_known() {
                            continue;
                        }
                        if label.is_known() && label != l {
                            conflict = true;
                        }
                        label = l;
                    }
                }
                out.push(if conflict { Label::Unknown } else { label });
            }
        }
    }
    out
}

fn forward_geometry<T: Copy>(aug: &WeakAug, src: &[T], n: usize) -> Vec<T> {
    let mut cur = src.to_vec();
    if aug.hflip {
        cur = flip_h(&cur, n);
    }
    if aug.vflip {
        cur = flip_v(&cur, n);
    }
    rotate(&cur, n, aug.rotation.quarter_turns())
}

fn inverse_geometry<T: Copy>(aug: &WeakAug, src: &[T], n: usize) -> Vec<T> {
    let mut cur = rotate(src, n, aug.rotation.inverse().quarter_turns());
    if aug.vflip {
        cur = flip_v(&cur, n);
    }
    if aug.hflip {
        cur = flip_h(&cur, n);
    }
    cur
}

fn square_side(height: usize, width: usize) -> Result<usize, AugmentError> {
    if height != width {
        return Err(AugmentError::NotSquare { height, width });
    }
    Ok(height)
}

fn image_dims(image: &Tensor) -> Result<(usize, usize), AugmentError> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(AugmentError::TensorShape(s.to_vec()));
    }
    Ok((s[1], square_side(s[2], s[3])?))
}

/// Applies the geometry of `aug` to every channel of a 1×C×H×W image.
pub fn apply_weak(aug: &WeakAug, image: &Tensor) -> Result<Tensor, AugmentError> {
    let (c, n) = image_dims(image)?;
    let m = aug.scale.scaled_side(n)?;
    let mut data = Vec::with_capacity(c * m * m);
    for ch in image.data().chunks_exact(n * n) {
        let g = forward_geometry(aug, ch, n);
        data.extend(resize_bilinear(&g, n, m));
    }
    Ok(Tensor::new(vec![1, c, m, m], data).expect("finite in, finite out"))
}

/// Applies geometry then photometric perturbation. Pixel values are clamped to [0, 1].
pub fn apply_strong(aug: &StrongAug, image: &Tensor) -> Result<Tensor, AugmentError> {
    let geo = apply_weak(&aug.base, image)?;
    let m = geo.shape()[2];
    let mut data = geo.into_data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(aug.noise_seed);
    for v in data.iter_mut() {
        let noise: f64 = StandardNormal.sample(&mut rng);
        *v = ((*v - mean) * aug.contrast + mean + aug.brightness + aug.noise_sigma * noise).clamp(0.0, 1.0);
    }
    if let Some(cut) = aug.cutout {
        let side = ((cut.side * m as f64).round() as usize).clamp(1, m);
        let top = ((cut.top * m as f64) as usize).min(m - side);
        let left = ((cut.left * m as f64) as usize).min(m - side);
        let planes = data.len() / (m * m);
        for p in 0..planes {
            for y in top..top + side {
                let row = p * m * m + y * m;
                data[row + left..row + left + side].fill(0.0);
            }
        }
    }
    Ok(Tensor::new(vec![1, data.len() / (m * m), m, m], data).expect("clamped values are finite"))
}

/// Augmentation that can be applied to an image.
pub trait ImageAugment {
    fn apply(&self, image: &Tensor) -> Result<Tensor, AugmentError>;
    fn geometry(&self) -> &WeakAug;
}

impl ImageAugment for WeakAug {
    fn apply(&self, image: &Tensor) -> Result<Tensor, AugmentError> {
        apply_weak(self, image)
    }
    fn geometry(&self) -> &WeakAug {
        self
    }
}

impl ImageAugment for StrongAug {
    fn apply(&self, image: &Tensor) -> Result<Tensor, AugmentError> {
        apply_strong(self, image)
    }
    fn geometry(&self) -> &WeakAug {
        &self.base
    }
}

/// Generic entry point: `apply(aug, image)`.
pub fn apply<A: ImageAugment>(aug: &A, image: &Tensor) -> Result<Tensor, AugmentError> {
    aug.apply(image)
}

/// Moves a mask from the reference frame into the frame of `aug`.
pub fn warp_mask(aug: &WeakAug, mask: &ProbMask) -> Result<ProbMask, AugmentError> {
    let n = square_side(mask.height(), mask.width())?;
    let m = aug.scale.scaled_side(n)?;
    let g = forward_geometry(aug, mask.data(), n);
    Ok(ProbMask::from_clamped(m, m, resize_bilinear(&g, n, m)).expect("sizes match"))
}

/// Expresses a mask predicted in the frame of `aug` in the un-augmented frame.
pub fn invert_to_reference(aug: &WeakAug, mask: &ProbMask) -> Result<ProbMask, AugmentError> {
    let m = square_side(mask.height(), mask.width())?;
    let n = aug.scale.original_side(m)?;
    let resized = resize_bilinear(mask.data(), m, n);
    let g = inverse_geometry(aug, &resized, n);
    Ok(ProbMask::from_clamped(n, n, g).expect("sizes match"))
}

/// Moves a sparse annotation into the frame of `aug` without inventing labels.
pub fn warp_annotation(aug: &WeakAug, ann: &SparseAnnotation) -> Result<SparseAnnotation, AugmentError> {
    let n = square_side(ann.height(), ann.width())?;
    let m = aug.scale.scaled_side(n)?;
    let g = forward_geometry(aug, ann.labels(), n);
    Ok(SparseAnnotation::new(m, m, resize_labels(&g, n, m), ann.mode()).expect("sizes match"))
}
