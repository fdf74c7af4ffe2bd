//! Dense probability masks and sparse ternary annotations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask of {height}x{width} needs {} values, got {len}", height * width)]
    Length { height: usize, width: usize, len: usize },
    #[error("mask value {value} at index {index} outside [0, 1]")]
    Range { index: usize, value: f64 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape { left: (usize, usize), right: (usize, usize) },
    #[error("tensor of shape {0:?} is not 1x1xHxW")]
    TensorShape(Vec<usize>),
    #[error("invalid annotation label {value} at index {index}")]
    Label { index: usize, value: f64 },
}

/// H×W map of foreground probabilities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, MaskError> {
        if data.len() != height * width {
            return Err(MaskError::Length { height, width, len: data.len() });
        }
        if let Some((index, &value)) =
            data.iter().enumerate().find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(MaskError::Range { index, value });
        }
        Ok(Self { height, width, data })
    }

    /// Clamps every value into [0, 1]; non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self, MaskError> {
        let data = data.into_iter().map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }).collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value.clamp(0.0, 1.0); height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Self { height, width, data }
    }

    /// Reads a 1×1×H×W tensor as a mask, clamping into [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self, MaskError> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 {
            return Err(MaskError::TensorShape(s.to_vec()));
        }
        Self::from_clamped(s[2], s[3], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("mask is finite")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn check_same_dims(&self, other: &ProbMask) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::Shape { left: self.dims(), right: other.dims() });
        }
        Ok(())
    }

    /// Elementwise map, clamped back into [0, 1].
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ProbMask {
        ProbMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ProbMask, f: impl Fn(f64, f64) -> f64) -> Result<ProbMask, MaskError> {
        self.check_same_dims(other)?;
        Ok(ProbMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b).clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &ProbMask) -> Result<f64, MaskError> {
        self.check_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Unknown,
    Background,
    Foreground,
}

impl Label {
    /// Prompt-channel / file encoding: +1 foreground, -1 background, 0 unknown.
    pub fn code(self) -> f64 {
        match self {
            Label::Unknown => 0.0,
            Label::Background => -1.0,
            Label::Foreground => 1.0,
        }
    }

    pub fn from_code(v: f64) -> Option<Label> {
        match v {
            0.0 => Some(Label::Unknown),
            1.0 => Some(Label::Foreground),
            -1.0 => Some(Label::Background),
            _ => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != Label::Unknown
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    Point,
    Scribble,
}

impl std::str::FromStr for AnnotationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "point" => Ok(AnnotationMode::Point),
            "scribble" => Ok(AnnotationMode::Scribble),
            other => Err(format!("unknown annotation mode '{other}' (point|scribble)")),
        }
    }
}

/// Per-pixel ternary label map encoding point or scribble supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAnnotation {
    height: usize,
    width: usize,
    labels: Vec<Label>,
    mode: AnnotationMode,
}

impl SparseAnnotation {
    pub fn new(height: usize, width: usize, labels: Vec<Label>, mode: AnnotationMode) -> Result<Self, MaskError> {
        if labels.len() != height * width {
            return Err(MaskError::Length { height, width, len: labels.len() });
        }
        Ok(Self { height, width, labels, mode })
    }

    pub fn unknown(height: usize, width: usize, mode: AnnotationMode) -> Self {
        Self { height, width, labels: vec![Label::Unknown; height * width], mode }
    }

    /// Every pixel labelled from a binary mask (threshold 0.5).
    pub fn dense_from(mask: &ProbMask) -> Self {
        let labels =
            mask.data().iter().map(|&v| if v >= 0.5 { Label::Foreground } else { Label::Background }).collect();
        Self { height: mask.height(), width: mask.width(), labels, mode: AnnotationMode::Scribble }
    }

    pub fn from_codes(height: usize, width: usize, codes: &[f64], mode: AnnotationMode) -> Result<Self, MaskError> {
        let labels = codes
            .iter()
            .enumerate()
            .map(|(index, &value)| Label::from_code(value).ok_or(MaskError::Label { index, value }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(height, width, labels, mode)
    }

    pub fn codes(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    /// The prompt channel as a 1×1×H×W tensor.
    pub fn to_prompt_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.codes()).expect("codes are finite")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mode(&self) -> AnnotationMode {
        self.mode
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_known()).count()
    }

    /// Number of 8-connected components formed by labelled pixels.
    pub fn labeled_components(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut components = 0;
        for start in 0..h * w {
            if seen[start] || !self.labels[start].is_known() {
                continue;
            }
            components += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if !seen[j] && self.labels[j].is_known() {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        components
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(ProbMask::new(1, 2, vec![0.2, 1.2]).is_err());
        assert!(ProbMask::new(1, 2, vec![0.2, f64::NAN]).is_err());
        assert!(ProbMask::new(1, 2, vec![0.2]).is_err());
        assert_eq!(ProbMask::from_clamped(1, 2, vec![-1.0, 2.0]).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn label_codes_roundtrip() {
        for l in [Label::Unknown, Label::Background, Label::Foreground] {
            assert_eq!(Label::from_code(l.code()), Some(l));
        }
        assert_eq!(Label::from_code(0.5), None);
    }

    #[test]
    fn components() {
        let mut a = SparseAnnotation::unknown(5, 5, AnnotationMode::Scribble);
        a.set(0, 0, Label::Foreground);
        a.set(1, 1, Label::Foreground);
        a.set(4, 4, Label::Background);
        assert_eq!(a.labeled_components(), 2);
        assert_eq!(a.labeled_count(), 3);
    }
}
