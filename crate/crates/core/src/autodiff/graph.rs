//! Computation graph over a fixed op set, with forward evaluation and
//! reverse-mode gradient accumulation into a [`ParamSet`].

use std::collections::BTreeMap;

use super::conv;
use super::params::ParamSet;
use super::tensor::Tensor;
use super::AutodiffError;

pub type NodeId = usize;

/// Named input tensors bound at evaluation time.
pub type Feed = BTreeMap<String, Tensor>;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Lower clamp applied before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    /// 3×3 kernel, stride 1, zero padding 1.
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    LeakyRelu(NodeId),
    Sigmoid(NodeId),
    /// `ln(max(x, LOG_FLOOR))`
    Log(NodeId),
    Recip(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    ConcatChannels(Vec<NodeId>),
    /// Identity forward, blocks gradient flow.
    StopGrad(NodeId),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar-mul",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::ConcatChannels(_) => "concat-channels",
            Op::StopGrad(_) => "stop-grad",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => Vec::new(),
            Op::Conv2d { x, weight, bias } => {
                let mut v = vec![*x, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::LeakyRelu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::StopGrad(a) => vec![*a],
            Op::ConcatChannels(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Append-only graph. Node ids are assigned in insertion order, which is
/// also a valid topological order because inputs must already exist.
#[derive(Clone, Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

/// Values of every node evaluated so far.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node].data()[0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node].op
    }

    /// Names of the parameters referenced by the graph, deduplicated.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }

    fn check_id(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode { node: id });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Const(_) | Op::StopGrad(_) => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node { op, shape, requires_grad });
        self.nodes.len() - 1
    }

    fn shape_error(&self, op: &str, detail: String) -> AutodiffError {
        AutodiffError::Shape { node: self.nodes.len(), op: op.to_string(), detail }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        if shape.len() > super::tensor::MAX_RANK {
            return Err(self.shape_error("input", format!("rank {} exceeds 4", shape.len())));
        }
        Ok(self.push(Op::Input(name.to_string()), shape.to_vec()))
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        if shape.len() > super::tensor::MAX_RANK {
            return Err(self.shape_error("param", format!("rank {} exceeds 4", shape.len())));
        }
        Ok(self.push(Op::Param(name.to_string()), shape.to_vec()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId, AutodiffError> {
        self.check_id(x)?;
        self.check_id(weight)?;
        let xs = self.nodes[x].shape.clone();
        let ws = self.nodes[weight].shape.clone();
        if xs.len() != 4 {
            return Err(self.shape_error("conv2d", format!("input must be N×C×H×W, got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
            return Err(self.shape_error(
                "conv2d",
                format!("weight {ws:?} incompatible with input {xs:?} (want Cout×{}×3×3)", xs[1]),
            ));
        }
        if let Some(b) = bias {
            self.check_id(b)?;
            let bs = &self.nodes[b].shape;
            if bs.as_slice() != [ws[0]] {
                return Err(self.shape_error("conv2d", format!("bias {bs:?} != [{}]", ws[0])));
            }
        }
        let shape = vec![xs[0], ws[0], xs[2], xs[3]];
        Ok(self.push(Op::Conv2d { x, weight, bias }, shape))
    }

    fn same_shape(&mut self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>, AutodiffError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa != sb {
            return Err(self.shape_error(kind, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    fn unary(&mut self, a: NodeId, make: impl FnOnce(NodeId) -> Op) -> Result<NodeId, AutodiffError> {
        self.check_id(a)?;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(make(a), shape))
    }

    pub fn scalar_mul(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        if !factor.is_finite() {
            return Err(self.shape_error("scalar-mul", format!("non-finite factor {factor}")));
        }
        self.unary(a, |a| Op::ScalarMul(a, factor))
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::LeakyRelu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Sigmoid)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Log)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Recip)
    }

    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::StopGrad)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_id(a)?;
        Ok(self.push(Op::Mean(a), Vec::new()))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_id(a)?;
        Ok(self.push(Op::Sum(a), Vec::new()))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(self.shape_error("concat-channels", "no operands".into()));
        }
        for &p in parts {
            self.check_id(p)?;
        }
        let first = self.nodes[parts[0]].shape.clone();
        if first.len() != 4 {
            return Err(self.shape_error("concat-channels", format!("operand {first:?} not rank 4")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(self.shape_error("concat-channels", format!("operand {s:?} incompatible with {first:?}")));
            }
            channels += s[1];
        }
        Ok(self.push(Op::ConcatChannels(parts.to_vec()), vec![first[0], channels, first[2], first[3]]))
    }

    /// Convenience: `1 - a`, built from scalar-mul and a constant.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_id(a)?;
        let neg = self.scalar_mul(a, -1.0)?;
        let ones = self.constant(Tensor::full(&self.nodes[a].shape.clone(), 1.0));
        self.add(neg, ones)
    }

    /// Convenience: `a + c` for a constant scalar `c` on a scalar node.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.check_id(a)?;
        let k = self.constant(Tensor::full(&self.nodes[a].shape.clone(), c));
        self.add(a, k)
    }

    /// Evaluates every node.
    pub fn evaluate(&self, feed: &Feed, params: &ParamSet) -> Result<Evaluation, AutodiffError> {
        let mut eval = Evaluation { values: Vec::with_capacity(self.nodes.len()) };
        self.extend(&mut eval, feed, params)?;
        Ok(eval)
    }

    /// Evaluates the nodes appended since `eval` was produced.
    pub fn extend(&self, eval: &mut Evaluation, feed: &Feed, params: &ParamSet) -> Result<(), AutodiffError> {
        for id in eval.values.len()..self.nodes.len() {
            let value = self.forward_node(id, &eval.values, feed, params)?;
            if cfg!(debug_assertions) && !value.is_finite() {
                return Err(AutodiffError::NonFinite { node: id, op: self.nodes[id].op.kind().to_string() });
            }
            eval.values.push(value);
        }
        Ok(())
    }

    fn forward_node(
        &self,
        id: NodeId,
        values: &[Tensor],
        feed: &Feed,
        params: &ParamSet,
    ) -> Result<Tensor, AutodiffError> {
        let node = &self.nodes[id];
        let shape = node.shape.clone();
        let map = |a: NodeId, f: &dyn Fn(f64) -> f64| {
            Tensor::from_parts(shape.clone(), values[a].data().iter().map(|&v| f(v)).collect())
        };
        let out = match &node.op {
            Op::Input(name) => {
                let t = feed.get(name).ok_or_else(|| AutodiffError::Unbound { node: id, name: name.clone() })?;
                if t.shape() != shape.as_slice() {
                    return Err(AutodiffError::Shape {
                        node: id,
                        op: "input".into(),
                        detail: format!("'{name}' fed {:?}, declared {shape:?}", t.shape()),
                    });
                }
                t.clone()
            }
            Op::Param(name) => {
                let t = params.value(name).ok_or_else(|| AutodiffError::Unbound { node: id, name: name.clone() })?;
                if t.shape() != shape.as_slice() {
                    return Err(AutodiffError::Shape {
                        node: id,
                        op: "param".into(),
                        detail: format!("'{name}' bound {:?}, declared {shape:?}", t.shape()),
                    });
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            Op::Conv2d { x, weight, bias } => conv::forward(&values[*x], &values[*weight], bias.map(|b| &values[b])),
            Op::Add(a, b) => Tensor::from_parts(
                shape.clone(),
                values[*a].data().iter().zip(values[*b].data()).map(|(x, y)| x + y).collect(),
            ),
            Op::Mul(a, b) => Tensor::from_parts(
                shape.clone(),
                values[*a].data().iter().zip(values[*b].data()).map(|(x, y)| x * y).collect(),
            ),
            Op::ScalarMul(a, s) => map(*a, &|v| v * s),
            Op::LeakyRelu(a) => map(*a, &|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            Op::Sigmoid(a) => map(*a, &sigmoid),
            Op::Log(a) => map(*a, &|v| v.max(LOG_FLOOR).ln()),
            Op::Recip(a) => map(*a, &|v| 1.0 / v),
            Op::StopGrad(a) => values[*a].clone(),
            Op::Mean(a) => {
                let d = values[*a].data();
                Tensor::scalar(sum_f64(d) / d.len() as f64)
            }
            Op::Sum(a) => Tensor::scalar(sum_f64(values[*a].data())),
            Op::ConcatChannels(parts) => concat_forward(parts.iter().map(|&p| &values[p]), &shape),
        };
        Ok(out)
    }

    /// Accumulates `d loss / d param` into the gradient buffers of `params`.
    /// Gradients add onto whatever the buffers already hold.
    pub fn backprop(&self, eval: &Evaluation, params: &mut ParamSet, loss: NodeId) -> Result<(), AutodiffError> {
        self.check_id(loss)?;
        if eval.values.len() <= loss {
            return Err(AutodiffError::NotEvaluated { node: loss });
        }
        if self.nodes[loss].shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss { node: loss, shape: self.nodes[loss].shape.clone() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor::full(&self.nodes[loss].shape, 1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let values = &eval.values;
            let send = |target: NodeId, grad: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            };
            let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
                Tensor::from_parts(
                    a.shape().to_vec(),
                    g.data().iter().zip(a.data()).map(|(&gv, &av)| f(gv, av)).collect(),
                )
            };
            match &node.op {
                Op::Input(_) | Op::Const(_) | Op::StopGrad(_) => {}
                Op::Param(name) => params.accumulate_grad(name, &g)?,
                Op::Conv2d { x, weight, bias } => {
                    let need_x = self.nodes[*x].requires_grad;
                    let (gx, gw, gb) = conv::backward(&values[*x], &values[*weight], &g, need_x, bias.is_some());
                    if let Some(gx) = gx {
                        send(*x, gx, &mut grads);
                    }
                    send(*weight, gw, &mut grads);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&values[*b], &|gv, bv| gv * bv);
                    let gb = zip(&values[*a], &|gv, av| gv * av);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::ScalarMul(a, s) => {
                    let ga = zip(&values[*a], &|gv, _| gv * s);
                    send(*a, ga, &mut grads);
                }
                Op::LeakyRelu(a) => {
                    let ga = zip(&values[*a], &|gv, x| if x > 0.0 { gv } else { LEAKY_SLOPE * gv });
                    send(*a, ga, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let ga = zip(&values[id], &|gv, y| gv * y * (1.0 - y));
                    send(*a, ga, &mut grads);
                }
                Op::Log(a) => {
                    let ga = zip(&values[*a], &|gv, x| if x > LOG_FLOOR { gv / x } else { 0.0 });
                    send(*a, ga, &mut grads);
                }
                Op::Recip(a) => {
                    let ga = zip(&values[*a], &|gv, x| -gv / (x * x));
                    send(*a, ga, &mut grads);
                }
                Op::Mean(a) => {
                    let n = values[*a].len();
                    let ga = Tensor::full(values[*a].shape(), g.data()[0] / n as f64);
                    send(*a, ga, &mut grads);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(values[*a].shape(), g.data()[0]);
                    send(*a, ga, &mut grads);
                }
                Op::ConcatChannels(parts) => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.nodes[p].shape.clone()).collect();
                    for (p, gp) in parts.iter().zip(concat_backward(&g, &shapes)) {
                        send(*p, gp, &mut grads);
                    }
                }
            }
        }
        Ok(())
    }

    /// One bit per non-smooth decision (leaky-relu sign, log clamp) taken
    /// during `eval`. Finite differencing is only valid while this is stable.
    pub fn kink_signature(&self, eval: &Evaluation) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(a) => bits.extend(eval.values[a].data().iter().map(|&v| v > 0.0)),
                Op::Log(a) => bits.extend(eval.values[a].data().iter().map(|&v| v > LOG_FLOOR)),
                _ => {}
            }
        }
        bits
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fixed-order summation in four lanes; deterministic for a given length.
pub(crate) fn sum_f64(data: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let chunks = data.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        lanes[0] += c[0];
        lanes[1] += c[1];
        lanes[2] += c[2];
        lanes[3] += c[3];
    }
    let mut total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for v in rest {
        total += v;
    }
    total
}

fn concat_forward<'a>(parts: impl Iterator<Item = &'a Tensor>, shape: &[usize]) -> Tensor {
    let parts: Vec<&Tensor> = parts.collect();
    let (n, plane) = (shape[0], shape[2] * shape[3]);
    let mut data = Vec::with_capacity(shape.iter().product());
    for b in 0..n {
        for p in &parts {
            let c = p.shape()[1];
            let start = b * c * plane;
            data.extend_from_slice(&p.data()[start..start + c * plane]);
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

fn concat_backward(g: &Tensor, shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let gs = g.shape();
    let (n, total_c, plane) = (gs[0], gs[1], gs[2] * gs[3]);
    let mut out: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for b in 0..n {
        let mut offset = 0;
        for (i, s) in shapes.iter().enumerate() {
            let c = s[1];
            let start = (b * total_c + offset) * plane;
            out[i].extend_from_slice(&g.data()[start..start + c * plane]);
            offset += c;
        }
    }
    out.into_iter().zip(shapes).map(|(d, s)| Tensor::from_parts(s.clone(), d)).collect()
}
