//! Procedural concealed-object scenes.
//!
//! A scene is one smooth Gaussian random field shared by foreground and
//! background; the foreground blob only shifts the field's mean by the
//! contrast `δ`. With `δ = 0` the object is invisible by construction.
//!
//! On disk a dataset is a directory with `images/`, `masks/` and `annots/`
//! holding one `NNNN.bin` file per sample plus `manifest.json`. Every `.bin`
//! starts with a 16-byte header (`SCLRDS01`, `u16` rank, three `u16` dims,
//! unused dims 0) followed by little-endian `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::fsutil::atomic_write;
use crate::mask::{AnnotationMode, Label, MaskError, ProbMask, SparseAnnotation};
use crate::seeds::{self, tag};

pub const DATA_MAGIC: &[u8; 8] = b"SCLRDS01";
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_PLACEMENT_TRIES: usize = 200;
/// Labelled pixels keep at least this Chebyshev distance from the other class.
pub const ANNOTATION_MARGIN: usize = 2;
/// Contrast range of the auxiliary (generalist pre-training) distribution.
pub const AUX_CONTRAST: (f64, f64) = (0.6, 1.0);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place a valid object after {0} attempts")]
    Placement(usize),
    #[error("{0} region too small to place an annotation")]
    Annotation(&'static str),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub side: usize,
    /// Foreground/background mean intensity gap δ ∈ [0, 1].
    pub contrast: f64,
    /// Standard deviation of the shared texture field.
    pub texture_amplitude: f64,
    /// Gaussian smoothing radius (pixels) of the texture field.
    pub texture_correlation: f64,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Blob semi-axis range as a fraction of the side.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            side: 64,
            contrast: 0.2,
            texture_amplitude: 0.12,
            texture_correlation: 2.0,
            min_blobs: 1,
            max_blobs: 2,
            min_radius: 0.12,
            max_radius: 0.25,
        }
    }
}

impl SceneSpec {
    pub fn with_contrast(&self, contrast: f64) -> Self {
        Self { contrast, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Spec(m));
        if self.side < 16 || !self.side.is_multiple_of(4) || self.side > u16::MAX as usize {
            return fail(format!("side {} must be a multiple of 4 and at least 16", self.side));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return fail(format!("contrast {} outside [0, 1]", self.contrast));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return fail(format!("texture_amplitude {} must be >= 0", self.texture_amplitude));
        }
        if !(self.texture_correlation > 0.0 && self.texture_correlation.is_finite()) {
            return fail(format!("texture_correlation {} must be > 0", self.texture_correlation));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return fail(format!("blob count range {}..={} is empty", self.min_blobs, self.max_blobs));
        }
        if !(0.0 < self.min_radius && self.min_radius <= self.max_radius && self.max_radius <= 0.5) {
            return fail(format!("radius range {}..={} must lie in (0, 0.5]", self.min_radius, self.max_radius));
        }
        Ok(())
    }
}

/// One generated image with its exact mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub gt: ProbMask,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Zero-mean, unit-variance smooth random field.
fn texture_field<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] =
                k.iter().enumerate().map(|(j, w)| w * noise[y * n + reflect(x as isize + j as isize - r, n)]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] =
                k.iter().enumerate().map(|(j, w)| w * tmp[reflect(y as isize + j as isize - r, n) * n + x]).sum();
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64;
    let sd = var.sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    out
}

/// Superellipse with a low-frequency radial wobble.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    p: f64,
    theta: f64,
    wobble: [(f64, f64); 3],
}

impl Blob {
    fn sample<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Self {
        let n = spec.side as f64;
        let mut wobble = [(0.0, 0.0); 3];
        for w in wobble.iter_mut() {
            *w = (rng.random_range(-0.12..=0.12), rng.random_range(0.0..std::f64::consts::TAU));
        }
        Blob {
            cx: rng.random_range(0.25 * n..=0.75 * n),
            cy: rng.random_range(0.25 * n..=0.75 * n),
            a: rng.random_range(spec.min_radius..=spec.max_radius) * n,
            b: rng.random_range(spec.min_radius..=spec.max_radius) * n,
            p: rng.random_range(1.5..=3.0),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            wobble,
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let norm = ((u / self.a).abs().powf(self.p) + (v / self.b).abs().powf(self.p)).powf(1.0 / self.p);
        let phi = v.atan2(u);
        let radius: f64 = 1.0
            + self
                .wobble
                .iter()
                .enumerate()
                .map(|(k, (amp, ph))| amp * ((k as f64 + 2.0) * phi + ph).cos())
                .sum::<f64>();
        norm <= radius
    }
}

/// Pixels of class `fg` whose every in-image neighbour within Chebyshev
/// distance `r` has the same class.
pub fn eroded(gt: &ProbMask, fg: bool, r: usize) -> Vec<(usize, usize)> {
    let (h, w) = gt.dims();
    let is = |y: usize, x: usize| (gt.get(y, x) >= 0.5) == fg;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !is(y, x) {
                continue;
            }
            let ok = (y.saturating_sub(r)..=(y + r).min(h - 1))
                .all(|yy| (x.saturating_sub(r)..=(x + r).min(w - 1)).all(|xx| is(yy, xx)));
            if ok {
                out.push((y, x));
            }
        }
    }
    out
}

/// Generates one scene. Deterministic for a given spec and generator state.
pub fn gen_sample<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Scene, SynthError> {
    spec.validate()?;
    let n = spec.side;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let count = rng.random_range(spec.min_blobs..=spec.max_blobs);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::sample(spec, rng)).collect();
        let gt = ProbMask::from_fn(n, n, |y, x| if blobs.iter().any(|b| b.contains(y, x)) { 1.0 } else { 0.0 });
        let area = gt.mean();
        if !(0.03..=0.5).contains(&area)
            || eroded(&gt, true, ANNOTATION_MARGIN).is_empty()
            || eroded(&gt, false, ANNOTATION_MARGIN).is_empty()
        {
            continue;
        }
        let field = texture_field(n, spec.texture_correlation, rng);
        let (lo, hi) = (0.5 - spec.contrast / 2.0, 0.5 + spec.contrast / 2.0);
        let data = field
            .iter()
            .zip(gt.data())
            .map(|(t, &m)| ((if m >= 0.5 { hi } else { lo }) + spec.texture_amplitude * t).clamp(0.0, 1.0))
            .collect();
        let image = Tensor::new(vec![1, 1, n, n], data).expect("finite pixels");
        return Ok(Scene { image, gt });
    }
    Err(SynthError::Placement(MAX_PLACEMENT_TRIES))
}

fn random_walk<R: Rng + ?Sized>(region: &[(usize, usize)], len: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let inside: std::collections::HashSet<(usize, usize)> = region.iter().copied().collect();
    let mut cur = region[rng.random_range(0..region.len())];
    let mut path = vec![cur];
    for _ in 1..len {
        let neigh: Vec<(usize, usize)> = (-1isize..=1)
            .flat_map(|dy| (-1isize..=1).map(move |dx| (dy, dx)))
            .filter(|&d| d != (0, 0))
            .filter_map(|(dy, dx)| {
                let y = cur.0.checked_add_signed(dy)?;
                let x = cur.1.checked_add_signed(dx)?;
                inside.contains(&(y, x)).then_some((y, x))
            })
            .collect();
        if neigh.is_empty() {
            break;
        }
        let fresh: Vec<_> = neigh.iter().copied().filter(|p| !path.contains(p)).collect();
        let pool = if fresh.is_empty() { &neigh } else { &fresh };
        cur = pool[rng.random_range(0..pool.len())];
        if !path.contains(&cur) {
            path.push(cur);
        }
    }
    path
}

/// Sparse labels consistent with `gt`, kept `ANNOTATION_MARGIN` pixels away
/// from the object boundary. Points: one per class. Scribbles: one random
/// walk per class of length about a tenth of the side.
pub fn sparse_annotate<R: Rng + ?Sized>(
    gt: &ProbMask,
    mode: AnnotationMode,
    rng: &mut R,
) -> Result<SparseAnnotation, SynthError> {
    let (h, w) = gt.dims();
    let mut ann = SparseAnnotation::unknown(h, w, mode);
    for (fg, label, name) in [(true, Label::Foreground, "foreground"), (false, Label::Background, "background")] {
        let region = eroded(gt, fg, ANNOTATION_MARGIN);
        if region.is_empty() {
            return Err(SynthError::Annotation(name));
        }
        let pixels = match mode {
            AnnotationMode::Point => vec![region[rng.random_range(0..region.len())]],
            AnnotationMode::Scribble => {
                let len = ((h.max(w) as f64) * 0.1).round().max(2.0) as usize;
                random_walk(&region, len, rng)
            }
        };
        for (y, x) in pixels {
            ann.set(y, x, label);
        }
    }
    Ok(ann)
}

/// Train ids and which of them carry full labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ids: Vec<usize>,
    pub labeled: Vec<usize>,
    pub labeled_fraction: f64,
}

impl SplitManifest {
    pub fn is_labeled(&self, id: usize) -> bool {
        self.labeled.binary_search(&id).is_ok()
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        self.ids.iter().copied().filter(|&i| !self.is_labeled(i)).collect()
    }
}

/// Number of labelled samples: `floor(n * fraction)`, with a tiny tolerance so
/// that products like `0.29 * 100` do not lose a sample to rounding.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Uniformly samples `floor(n * fraction)` of `ids` as the labelled subset.
pub fn make_split<R: Rng + ?Sized>(ids: &[usize], fraction: f64, rng: &mut R) -> Result<SplitManifest, SynthError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SynthError::Split(format!("labeled fraction {fraction} outside (0, 1]")));
    }
    let k = labeled_count(ids.len(), fraction);
    if k == 0 {
        return Err(SynthError::Split(format!(
            "{} samples at fraction {fraction} leaves no labelled sample",
            ids.len()
        )));
    }
    let mut labeled: Vec<usize> = index::sample(rng, ids.len(), k).into_iter().map(|i| ids[i]).collect();
    labeled.sort_unstable();
    Ok(SplitManifest { ids: ids.to_vec(), labeled, labeled_fraction: fraction })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Tensor,
    pub gt: ProbMask,
    pub annotation: SparseAnnotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub scene: SceneSpec,
    /// Contrast of each sample, indexed by id.
    pub contrasts: Vec<f64>,
    pub aux: bool,
    pub annotation: AnnotationMode,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub split: SplitManifest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// All samples, indexed by id.
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.manifest.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.manifest.test.iter().map(|&i| &self.samples[i])
    }

    pub fn side(&self) -> usize {
        self.manifest.scene.side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub scene: SceneSpec,
    /// Draw each sample's contrast from [`AUX_CONTRAST`] instead of `scene.contrast`.
    pub aux: bool,
    pub annotation: AnnotationMode,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 160,
            n_test: 64,
            scene: SceneSpec::default(),
            aux: false,
            annotation: AnnotationMode::Point,
            labeled_fraction: 0.125,
            seed: 0,
        }
    }
}

pub const FORMAT_NAME: &str = "scaler-synth-1";

/// Generates train ids `0..n_train` and test ids `n_train..n_train + n_test`.
/// Each sample draws from its own derived stream.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset, SynthError> {
    cfg.scene.validate()?;
    if cfg.n_train == 0 {
        return Err(SynthError::Split("n_train must be positive".into()));
    }
    let total = cfg.n_train + cfg.n_test;
    let mut samples = Vec::with_capacity(total);
    let mut contrasts = Vec::with_capacity(total);
    for id in 0..total {
        let contrast = if cfg.aux {
            seeds::rng(cfg.seed, &[tag::AUX_CONTRAST, id as u64]).random_range(AUX_CONTRAST.0..=AUX_CONTRAST.1)
        } else {
            cfg.scene.contrast
        };
        let spec = cfg.scene.with_contrast(contrast);
        let scene = gen_sample(&spec, &mut seeds::rng(cfg.seed, &[tag::SCENE, id as u64]))?;
        let annotation =
            sparse_annotate(&scene.gt, cfg.annotation, &mut seeds::rng(cfg.seed, &[tag::ANNOTATION, id as u64]))?;
        contrasts.push(contrast);
        samples.push(Sample { id, image: scene.image, gt: scene.gt, annotation });
    }
    let train: Vec<usize> = (0..cfg.n_train).collect();
    let split = make_split(&train, cfg.labeled_fraction, &mut seeds::rng(cfg.seed, &[tag::SPLIT]))?;
    Ok(Dataset {
        manifest: DatasetManifest {
            format: FORMAT_NAME.into(),
            seed: cfg.seed,
            scene: cfg.scene.clone(),
            contrasts,
            aux: cfg.aux,
            annotation: cfg.annotation,
            train,
            test: (cfg.n_train..total).collect(),
            split,
        },
        samples,
    })
}

/// Encodes a tensor of rank 1..=3 in the `.bin` layout.
pub fn encode_bin(dims: &[usize], data: &[f64]) -> Vec<u8> {
    assert!((1..=3).contains(&dims.len()), "rank must be 1..=3");
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 8);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for i in 0..3 {
        out.extend_from_slice(&(dims.get(i).copied().unwrap_or(0) as u16).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `.bin` file into its dims and values.
pub fn decode_bin(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>), SynthError> {
    let fail = |message: String| SynthError::Format { path: path.to_path_buf(), message };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..8] != DATA_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let rank = u16_at(8);
    if !(1..=3).contains(&rank) {
        return Err(fail(format!("rank {rank} not in 1..=3")));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u16_at(10 + 2 * i)).collect();
    if (rank..3).any(|i| u16_at(10 + 2 * i) != 0) {
        return Err(fail("unused dims must be 0".into()));
    }
    let count: usize = dims.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 8 {
        return Err(fail(format!("dims {dims:?} need {} data bytes, found {}", count * 8, body.len())));
    }
    let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(fail(format!("non-finite value at index {i}")));
    }
    Ok((dims, data))
}

pub fn read_bin(path: &Path) -> Result<(Vec<usize>, Vec<f64>), SynthError> {
    let bytes = fs::read(path).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })?;
    decode_bin(path, &bytes)
}

/// Reads a single-channel mask file (rank 2, or rank 3 with one channel).
pub fn read_mask(path: &Path) -> Result<ProbMask, SynthError> {
    let (dims, data) = read_bin(path)?;
    let (h, w) = match dims.as_slice() {
        [h, w] | [1, h, w] => (*h, *w),
        other => {
            return Err(SynthError::Format {
                path: path.to_path_buf(),
                message: format!("dims {other:?} are not a mask"),
            })
        }
    };
    ProbMask::new(h, w, data).map_err(|e| SynthError::Format { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_mask(path: &Path, mask: &ProbMask) -> Result<(), SynthError> {
    atomic_write(path, &encode_bin(&[mask.height(), mask.width()], mask.data()))
        .map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

fn file_name(id: usize) -> String {
    format!("{id:04}.bin")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), SynthError> {
    let io = |path: &Path| {
        let p = path.to_path_buf();
        move |source| SynthError::Io { path: p, source }
    };
    for sub in ["images", "masks", "annots"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io(&d))?;
    }
    for s in &ds.samples {
        let (h, w) = s.gt.dims();
        let files = [
            ("images", encode_bin(&[1, h, w], s.image.data())),
            ("masks", encode_bin(&[h, w], s.gt.data())),
            ("annots", encode_bin(&[h, w], &s.annotation.codes())),
        ];
        for (sub, bytes) in files {
            let path = dir.join(sub).join(file_name(s.id));
            atomic_write(&path, &bytes).map_err(io(&path))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    atomic_write(&path, json.as_bytes()).map_err(io(&path))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| SynthError::Io { path: path.clone(), source })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Format { path: path.clone(), message: e.to_string() })?;
    let n = manifest.contrasts.len();
    let side = manifest.scene.side;
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let img_path = dir.join("images").join(file_name(id));
        let (dims, data) = read_bin(&img_path)?;
        if dims != [1, side, side] {
            return Err(SynthError::Format {
                path: img_path,
                message: format!("dims {dims:?}, manifest says [1, {side}, {side}]"),
            });
        }
        let image = Tensor::new(vec![1, 1, side, side], data).expect("validated length");
        let mask_path = dir.join("masks").join(file_name(id));
        let gt = read_mask(&mask_path)?;
        let ann_path = dir.join("annots").join(file_name(id));
        let (adims, codes) = read_bin(&ann_path)?;
        let bad = |message: String| SynthError::Format { path: ann_path.clone(), message };
        if adims != [side, side] || gt.dims() != (side, side) {
            return Err(bad(format!("dims {adims:?} do not match side {side}")));
        }
        let annotation =
            SparseAnnotation::from_codes(side, side, &codes, manifest.annotation).map_err(|e| bad(e.to_string()))?;
        samples.push(Sample { id, image, gt, annotation });
    }
    for &id in manifest.train.iter().chain(&manifest.test).chain(&manifest.split.labeled) {
        if id >= n {
            return Err(SynthError::Format { path: path.clone(), message: format!("sample id {id} out of range") });
        }
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let ids: Vec<usize> = (0..160).collect();
        let mut rng = seeds::rng(0, &[]);
        assert_eq!(make_split(&ids, 1.0 / 8.0, &mut rng).unwrap().labeled.len(), 20);
        assert_eq!(make_split(&ids, 1.0 / 16.0, &mut rng).unwrap().labeled.len(), 10);
        assert_eq!(make_split(&ids, 1.0, &mut rng).unwrap().labeled, ids);
        assert!(make_split(&ids[..4], 0.1, &mut rng).is_err());
        assert!(make_split(&ids, 0.0, &mut rng).is_err());
        assert_eq!(labeled_count(100, 0.29), 29);
    }

    #[test]
    fn bin_codec_rejects_damage() {
        let bytes = encode_bin(&[2, 3], &[0.0, 1.0, 0.5, 0.25, 0.125, 1.0]);
        let p = Path::new("x.bin");
        assert_eq!(decode_bin(p, &bytes).unwrap().0, vec![2, 3]);
        let err = decode_bin(p, &bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("x.bin"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_bin(p, &bad).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = SceneSpec::default();
        assert!(SceneSpec { side: 30, ..base.clone() }.validate().is_err());
        assert!(SceneSpec { contrast: 1.5, ..base.clone() }.validate().is_err());
        assert!(SceneSpec { min_blobs: 3, max_blobs: 2, ..base.clone() }.validate().is_err());
        assert!(base.validate().is_ok());
    }
}
