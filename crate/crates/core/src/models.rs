//! Student, EMA teacher and generalist segmenters built on the autodiff graph.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CompGraph, Evaluation, Feed, NodeId, ParamSet, Tensor};
use crate::mask::{MaskError, ProbMask, SparseAnnotation};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("image must be 1x1xHxW, got {0:?}")]
    ImageShape(Vec<usize>),
    #[error("prompt is {prompt:?} but image is {image:?}")]
    PromptShape { prompt: (usize, usize), image: (usize, usize) },
    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),
    #[error("eta must lie in [0, 1], got {0}")]
    Eta(f64),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
}

/// Plain conv stack: 3×3 conv + leaky-relu per hidden width, then a 1-channel
/// 3×3 head with sigmoid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterArch {
    pub name: String,
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl SegmenterArch {
    pub fn student() -> Self {
        Self { name: "student".into(), in_channels: 1, widths: vec![8, 16, 16, 8] }
    }

    /// Twice the student's width, six conv layers, image + prompt channels.
    pub fn generalist() -> Self {
        Self { name: "generalist".into(), in_channels: 2, widths: vec![16, 32, 32, 16, 16] }
    }

    pub fn takes_prompt(&self) -> bool {
        self.in_channels == 2
    }

    /// (name, shape) of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().chain(std::iter::once(&1)).enumerate() {
            out.push((format!("conv{i}.weight"), vec![w, cin, 3, 3]));
            out.push((format!("conv{i}.bias"), vec![w]));
            cin = w;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn head_index(&self) -> usize {
        self.widths.len()
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in = (shape[1] * 9) as f64;
                let bound = (6.0 / fan_in).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            set.insert(&name, Tensor::new(shape, data).expect("finite init"));
        }
        set
    }

    /// Zeroes the head so the model outputs exactly 0.5 everywhere.
    pub fn zero_head(&self, params: &mut ParamSet) {
        let h = self.head_index();
        for suffix in ["weight", "bias"] {
            if let Some(t) = params.value_mut(&format!("conv{h}.{suffix}")) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Appends the forward pass to `g`, reading from `input` (1×C×H×W).
    /// Returns the probability-map node (1×1×H×W).
    pub fn append_forward(&self, g: &mut CompGraph, input: NodeId) -> Result<NodeId, ModelError> {
        let mut x = input;
        let shapes = self.param_shapes();
        let last = shapes.len() / 2 - 1;
        for (i, pair) in shapes.chunks(2).enumerate() {
            let w = g.param(&pair[0].0, &pair[0].1)?;
            let b = g.param(&pair[1].0, &pair[1].1)?;
            x = g.conv2d(x, w, Some(b))?;
            x = if i == last { g.sigmoid(x)? } else { g.leaky_relu(x)? };
        }
        Ok(x)
    }

    /// Adds the input node(s) for an image (and prompt, for prompted archs)
    /// named with `prefix`, filling `feed`. Returns the node to pass to
    /// [`append_forward`](Self::append_forward).
    pub fn append_input(
        &self,
        g: &mut CompGraph,
        feed: &mut Feed,
        prefix: &str,
        image: &Tensor,
        prompt: Option<&SparseAnnotation>,
    ) -> Result<NodeId, ModelError> {
        let (h, w) = image_hw(image)?;
        let img_name = format!("{prefix}image");
        let img = g.input(&img_name, &[1, 1, h, w])?;
        feed.insert(img_name, image.clone());
        if !self.takes_prompt() {
            return Ok(img);
        }
        let prompt_tensor = match prompt {
            Some(p) => {
                if p.dims() != (h, w) {
                    return Err(ModelError::PromptShape { prompt: p.dims(), image: (h, w) });
                }
                p.to_prompt_tensor()
            }
            None => Tensor::zeros(&[1, 1, h, w]),
        };
        let prompt_name = format!("{prefix}prompt");
        let pn = g.input(&prompt_name, &[1, 1, h, w])?;
        feed.insert(prompt_name, prompt_tensor);
        Ok(g.concat_channels(&[img, pn])?)
    }
}

fn image_hw(image: &Tensor) -> Result<(usize, usize), ModelError> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(ModelError::ImageShape(s.to_vec()));
    }
    Ok((s[2], s[3]))
}

/// Forward pass whose graph and node values are kept for backprop.
#[derive(Debug)]
pub struct Prediction {
    pub graph: CompGraph,
    pub feed: Feed,
    pub eval: Evaluation,
    pub output: NodeId,
    pub mask: ProbMask,
}

impl Prediction {
    /// Evaluates nodes appended to `graph` after the forward pass.
    pub fn extend(&mut self, params: &ParamSet) -> Result<(), ModelError> {
        self.graph.extend(&mut self.eval, &self.feed, params)?;
        Ok(())
    }
}

fn predict(
    arch: &SegmenterArch,
    image: &Tensor,
    prompt: Option<&SparseAnnotation>,
    params: &ParamSet,
) -> Result<Prediction, ModelError> {
    let mut graph = CompGraph::new();
    let mut feed = Feed::new();
    let input = arch.append_input(&mut graph, &mut feed, "", image, prompt)?;
    let output = arch.append_forward(&mut graph, input)?;
    let eval = graph.evaluate(&feed, params)?;
    let mask = ProbMask::from_tensor(eval.value(output))?;
    Ok(Prediction { graph, feed, eval, output, mask })
}

/// Student forward with the graph retained.
pub fn student_forward(arch: &SegmenterArch, image: &Tensor, params: &ParamSet) -> Result<Prediction, ModelError> {
    predict(arch, image, None, params)
}

/// Teacher forward; nothing is retained and no gradient state is touched.
pub fn teacher_forward(arch: &SegmenterArch, image: &Tensor, params: &ParamSet) -> Result<ProbMask, ModelError> {
    Ok(predict(arch, image, None, params)?.mask)
}

/// Generalist forward; an absent prompt is an all-zero channel.
pub fn generalist_forward(
    arch: &SegmenterArch,
    image: &Tensor,
    prompt: Option<&SparseAnnotation>,
    params: &ParamSet,
) -> Result<Prediction, ModelError> {
    predict(arch, image, prompt, params)
}

/// Anything that maps an image (plus optional prompt) to a probability mask.
pub trait MaskPredictor {
    fn predict(&self, image: &Tensor, prompt: Option<&SparseAnnotation>) -> Result<ProbMask, ModelError>;
}

/// A segmenter bound to its parameters.
pub struct BoundModel<'a> {
    pub arch: &'a SegmenterArch,
    pub params: &'a ParamSet,
}

impl MaskPredictor for BoundModel<'_> {
    fn predict(&self, image: &Tensor, prompt: Option<&SparseAnnotation>) -> Result<ProbMask, ModelError> {
        let prompt = if self.arch.takes_prompt() { prompt } else { None };
        Ok(predict(self.arch, image, prompt, self.params)?.mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub eta: f64,
}

pub const DEFAULT_EMA_ETA: f64 = 0.996;

impl Default for EmaConfig {
    fn default() -> Self {
        Self { eta: DEFAULT_EMA_ETA }
    }
}

/// `teacher <- eta * teacher + (1 - eta) * student`, tensor by tensor.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, eta: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(ModelError::Eta(eta));
    }
    if teacher.len() != student.len() {
        return Err(ModelError::ParamMismatch(format!("{} vs {} tensors", teacher.len(), student.len())));
    }
    for (name, s) in student.iter() {
        let t = teacher.value_mut(name).ok_or_else(|| ModelError::ParamMismatch(format!("teacher lacks '{name}'")))?;
        if t.shape() != s.value.shape() {
            return Err(ModelError::ParamMismatch(format!("'{name}': {:?} vs {:?}", t.shape(), s.value.shape())));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.value.data()) {
            *tv = eta * *tv + (1.0 - eta) * sv;
        }
    }
    Ok(())
}

/// Student, teacher and generalist parameters with their architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub student_arch: SegmenterArch,
    pub generalist_arch: SegmenterArch,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub generalist: ParamSet,
    pub ema: EmaConfig,
}

#[derive(Serialize, Deserialize)]
struct BundleDescriptor {
    student: SegmenterArch,
    generalist: SegmenterArch,
    ema: EmaConfig,
    student_step: u64,
    generalist_step: u64,
}

const ARCH_FILE: &str = "arch.json";
const MODEL_FILES: [&str; 3] = ["student", "teacher", "generalist"];

impl ModelBundle {
    /// Fresh bundle; the teacher starts as an exact copy of the student.
    pub fn new(student_arch: SegmenterArch, generalist_arch: SegmenterArch, ema: EmaConfig, seed: u64) -> Self {
        let student = student_arch.init_params(seed);
        let generalist = generalist_arch.init_params(seed ^ 0x9e37_79b9_7f4a_7c15);
        Self { teacher: student.values_only(), student, generalist, student_arch, generalist_arch, ema }
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::new(SegmenterArch::student(), SegmenterArch::generalist(), EmaConfig::default(), seed)
    }

    pub fn student_model(&self) -> BoundModel<'_> {
        BoundModel { arch: &self.student_arch, params: &self.student }
    }

    pub fn teacher_model(&self) -> BoundModel<'_> {
        BoundModel { arch: &self.student_arch, params: &self.teacher }
    }

    pub fn generalist_model(&self) -> BoundModel<'_> {
        BoundModel { arch: &self.generalist_arch, params: &self.generalist }
    }

    /// Writes `student.params`, `teacher.params`, `generalist.params`, the
    /// matching `.adam` optimizer files, and `arch.json`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let io = |path: &Path| {
            let p = path.display().to_string();
            move |source| ModelError::Io { path: p, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, set) in MODEL_FILES.iter().zip([&self.student, &self.teacher, &self.generalist]) {
            let path = dir.join(format!("{name}.params"));
            let f = fs::File::create(&path).map_err(io(&path))?;
            set.write_to(BufWriter::new(f)).map_err(io(&path))?;
            let path = dir.join(format!("{name}.adam"));
            let f = fs::File::create(&path).map_err(io(&path))?;
            set.write_optimizer_state(BufWriter::new(f)).map_err(io(&path))?;
        }
        let desc = BundleDescriptor {
            student: self.student_arch.clone(),
            generalist: self.generalist_arch.clone(),
            ema: self.ema,
            student_step: self.student.step(),
            generalist_step: self.generalist.step(),
        };
        let path = dir.join(ARCH_FILE);
        let json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
        fs::write(&path, json).map_err(io(&path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let path = dir.join(ARCH_FILE);
        let text =
            fs::read_to_string(&path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        let desc: BundleDescriptor = serde_json::from_str(&text)
            .map_err(|e| ModelError::Artifact { path: path.display().to_string(), message: e.to_string() })?;
        let mut sets = Vec::new();
        for (name, arch, step) in [
            ("student", &desc.student, desc.student_step),
            ("teacher", &desc.student, 0),
            ("generalist", &desc.generalist, desc.generalist_step),
        ] {
            let path = dir.join(format!("{name}.params"));
            let artifact = |message: String| ModelError::Artifact { path: path.display().to_string(), message };
            let f =
                fs::File::open(&path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
            let mut set = ParamSet::read_from(BufReader::new(f)).map_err(|e| artifact(e.to_string()))?;
            check_against_arch(&set, arch).map_err(artifact)?;
            let opt = dir.join(format!("{name}.adam"));
            if opt.exists() {
                let f = fs::File::open(&opt)
                    .map_err(|source| ModelError::Io { path: opt.display().to_string(), source })?;
                set.read_optimizer_state(BufReader::new(f), step)
                    .map_err(|e| ModelError::Artifact { path: opt.display().to_string(), message: e.to_string() })?;
            }
            sets.push(set);
        }
        let generalist = sets.pop().unwrap();
        let teacher = sets.pop().unwrap();
        let student = sets.pop().unwrap();
        Ok(Self {
            student_arch: desc.student,
            generalist_arch: desc.generalist,
            student,
            teacher,
            generalist,
            ema: desc.ema,
        })
    }
}

fn check_against_arch(set: &ParamSet, arch: &SegmenterArch) -> Result<(), String> {
    let shapes = arch.param_shapes();
    if shapes.len() != set.len() {
        return Err(format!("{} tensors, architecture '{}' needs {}", set.len(), arch.name, shapes.len()));
    }
    for (name, shape) in shapes {
        match set.value(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => return Err(format!("'{name}' has shape {:?}, expected {shape:?}", t.shape())),
            None => return Err(format!("missing '{name}'")),
        }
    }
    Ok(())
}
