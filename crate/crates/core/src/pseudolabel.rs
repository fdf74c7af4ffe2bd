//! Pseudo-label generation and the confidence weights derived from them.
//!
//! Every pseudo-label produced here is a plain [`ProbMask`]: it carries no
//! graph and therefore acts as a constant target when fed to a loss.

use thiserror::Error;

use crate::augment::{self, AugPolicy, AugmentError, WeakAug};
use crate::autodiff::ParamSet;
use crate::autodiff::Tensor;
use crate::mask::{MaskError, ProbMask, SparseAnnotation};
use crate::models::{teacher_forward, MaskPredictor, ModelError, SegmenterArch};

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Closed interval of ambiguous probabilities excluded by the trust mask.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrustBand {
    pub low: f64,
    pub high: f64,
}

impl Default for TrustBand {
    fn default() -> Self {
        Self { low: 0.1, high: 0.9 }
    }
}

fn binary_entropy_bits(p: f64) -> f64 {
    let log2 = |x: f64| x.max(crate::autodiff::LOG_FLOOR).log2();
    -p * log2(p) - (1.0 - p) * log2(1.0 - p)
}

/// Per-pixel binary entropy in bits.
pub fn pixel_entropy(mask: &ProbMask) -> ProbMask {
    mask.map(binary_entropy_bits)
}

/// Mean per-pixel binary entropy (base 2), in [0, 1].
pub fn entropy(mask: &ProbMask) -> f64 {
    let total: f64 = mask.data().iter().map(|&p| binary_entropy_bits(p)).sum();
    (total / mask.len() as f64).clamp(0.0, 1.0)
}

/// `(2p - 1)^2` per pixel.
pub fn uncertainty(mask: &ProbMask) -> ProbMask {
    mask.map(|p| (2.0 * p - 1.0).powi(2))
}

/// 0 inside the closed band `[low, high]`, 1 outside.
pub fn trust_mask(mask: &ProbMask, band: TrustBand) -> ProbMask {
    mask.map(|p| if p >= band.low && p <= band.high { 0.0 } else { 1.0 })
}

/// Average of the student and teacher predictions.
pub fn consensus(student_out: &ProbMask, teacher_out: &ProbMask) -> Result<ProbMask, PseudoLabelError> {
    Ok(student_out.zip_map(teacher_out, |a, b| (a + b) / 2.0)?)
}

/// Teacher prediction on the weakly augmented image, mapped back to the reference frame.
pub fn teacher_pseudo(
    arch: &SegmenterArch,
    teacher: &ParamSet,
    image: &Tensor,
    weak: &WeakAug,
) -> Result<ProbMask, PseudoLabelError> {
    let augmented = augment::apply_weak(weak, image)?;
    let pred = teacher_forward(arch, &augmented, teacher)?;
    Ok(augment::invert_to_reference(weak, &pred)?)
}

/// One generalist prediction per augmentation of the policy, each expressed
/// in the reference frame. The prompt is warped with the image.
pub fn ensemble_variants(
    generalist: &dyn MaskPredictor,
    image: &Tensor,
    prompt: Option<&SparseAnnotation>,
    policy: &AugPolicy,
) -> Result<Vec<ProbMask>, PseudoLabelError> {
    policy
        .draw()?
        .iter()
        .map(|aug| {
            let img = augment::apply_weak(aug, image)?;
            let warped_prompt = prompt.map(|p| augment::warp_annotation(aug, p)).transpose()?;
            let pred = generalist.predict(&img, warped_prompt.as_ref())?;
            Ok(augment::invert_to_reference(aug, &pred)?)
        })
        .collect()
}

/// Mean of the aligned ensemble predictions.
pub fn ensemble_fuse(
    generalist: &dyn MaskPredictor,
    image: &Tensor,
    prompt: Option<&SparseAnnotation>,
    policy: &AugPolicy,
) -> Result<ProbMask, PseudoLabelError> {
    average(&ensemble_variants(generalist, image, prompt, policy)?)
}

/// Elementwise mean of equally sized masks.
pub fn average(masks: &[ProbMask]) -> Result<ProbMask, PseudoLabelError> {
    let first = masks.first().ok_or(AugmentError::EmptyEnsemble)?;
    let mut acc = vec![0.0; first.len()];
    for m in masks {
        first.check_same_dims(m)?;
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let k = masks.len() as f64;
    Ok(ProbMask::from_clamped(first.height(), first.width(), acc.into_iter().map(|v| v / k).collect())?)
}
