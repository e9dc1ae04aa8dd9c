//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node. Nodes whose inputs
//! all lack `requires_grad` keep only their value; the rest also record the
//! primitive and its inputs so [`Graph::backward`] can replay them in reverse
//! insertion order.

use std::collections::BTreeMap;

use super::kernels::{col2im, gemm, im2col, sigmoid, softplus, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Parameterised kinds carry their hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    /// `x[N, C, ...] + b[C]` or `x[N, C, ...] + b[N, C]`.
    AddBias,
    Conv2d { stride: usize, padding: usize },
    Conv2dTranspose { stride: usize, padding: usize },
    AvgPool2d { kernel: usize },
    UpsampleNearest { factor: usize },
    Silu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
    Exp,
    Clamp { lo: f64, hi: f64 },
    GroupNorm { groups: usize, eps: f64 },
    /// Concatenation along axis 1.
    Concat,
    Reshape(Vec<usize>),
    Sum,
    Mean,
    Mse,
    /// Elementwise binary cross-entropy on logits (no reduction).
    BceWithLogits,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::AddBias => "add_bias",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Conv2dTranspose { .. } => "conv2d_transpose",
            Primitive::AvgPool2d { .. } => "avg_pool2d",
            Primitive::UpsampleNearest { .. } => "upsample_nearest",
            Primitive::Silu => "silu",
            Primitive::LeakyRelu { .. } => "leaky_relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Clamp { .. } => "clamp",
            Primitive::GroupNorm { .. } => "group_norm",
            Primitive::Concat => "concat",
            Primitive::Reshape(_) => "reshape",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Mse => "mse",
            Primitive::BceWithLogits => "bce_with_logits",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::AddBias
            | Primitive::Conv2d { .. }
            | Primitive::Conv2dTranspose { .. }
            | Primitive::Mse
            | Primitive::BceWithLogits => Some(2),
            Primitive::GroupNorm { .. } => Some(3),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

enum Saved {
    None,
    /// Per (item, group) mean and reciprocal standard deviation.
    GroupNorm { mean: Vec<f64>, rstd: Vec<f64> },
}

struct Record {
    prim: Primitive,
    inputs: Vec<Var>,
    saved: Saved,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    record: Option<Record>,
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    op_counts: BTreeMap<&'static str, usize>,
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    numel(shape) == 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, requires_grad, record: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.shape, t.data, false)
    }

    /// Trainable leaf regardless of the tensor's flag.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.shape, t.data, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push_leaf(Vec::new(), vec![v], false)
    }

    /// Copy of `v` cut from the graph: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push_leaf(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), requires_grad: false, grad: None }
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(Error::NotScalar(n.shape.clone()))
        }
    }

    /// Number of evaluations of the named primitive since construction.
    pub fn op_count(&self, name: &str) -> usize {
        self.op_counts.get(name).copied().unwrap_or(0)
    }

    /// Total primitive evaluations (leaves excluded).
    pub fn total_ops(&self) -> usize {
        self.op_counts.values().sum()
    }

    /// Evaluates `prim` on `inputs` and appends the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(a) = prim.arity() {
            if inputs.len() != a {
                return Err(Error::UnsupportedKind(format!("{} takes {a} inputs, got {}", prim.name(), inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::UnsupportedKind(format!("{} needs at least one input", prim.name())));
        }
        let (shape, data, saved) = self.forward(&prim, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        *self.op_counts.entry(prim.name()).or_insert(0) += 1;
        let record = requires_grad.then(|| Record { prim, inputs: inputs.to_vec(), saved });
        self.nodes.push(Node { shape, data, requires_grad, record });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[x, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, w])
    }
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2dTranspose { stride, padding }, &[x, w])
    }
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        self.apply(Primitive::AvgPool2d { kernel }, &[x])
    }
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.apply(Primitive::UpsampleNearest { factor }, &[x])
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Silu, &[x])
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Primitive::LeakyRelu { slope }, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.apply(Primitive::GroupNorm { groups, eps: 1e-5 }, &[x, gamma, beta])
    }
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, xs)
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mse, &[a, b])
    }
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.apply(Primitive::BceWithLogits, &[logits, targets])
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<(Vec<usize>, Vec<f64>, Saved)> {
        let node = |i: usize| &self.nodes[inputs[i].0];
        let unary = |f: &dyn Fn(f64) -> f64| {
            let x = node(0);
            (x.shape.clone(), x.data.iter().map(|&v| f(v)).collect::<Vec<_>>(), Saved::None)
        };
        let out = match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (a, b) = (node(0), node(1));
                let f: fn(f64, f64) -> f64 = match prim {
                    Primitive::Add => |x, y| x + y,
                    Primitive::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                if a.shape == b.shape {
                    let d = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                    (a.shape.clone(), d, Saved::None)
                } else if is_scalar_shape(&b.shape) {
                    let y = b.data[0];
                    (a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect(), Saved::None)
                } else if is_scalar_shape(&a.shape) {
                    let x = a.data[0];
                    (b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect(), Saved::None)
                } else {
                    return Err(mismatch(format!("{}: {:?} vs {:?}", prim.name(), a.shape, b.shape)));
                }
            }
            Primitive::Scale(c) => unary(&|v| v * c),
            Primitive::AddScalar(c) => unary(&|v| v + c),
            Primitive::MatMul => {
                let (a, b) = (node(0), node(1));
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(mismatch(format!("matmul: {:?} x {:?}", a.shape, b.shape)));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut c);
                (vec![m, n], c, Saved::None)
            }
            Primitive::AddBias => {
                let (x, b) = (node(0), node(1));
                let (n, c, inner) = bias_layout(&x.shape, &b.shape)?;
                let per_item = b.shape.len() == 2;
                let mut d = x.data.clone();
                for i in 0..n {
                    for ch in 0..c {
                        let bv = if per_item { b.data[i * c + ch] } else { b.data[ch] };
                        let off = (i * c + ch) * inner;
                        d[off..off + inner].iter_mut().for_each(|v| *v += bv);
                    }
                }
                (x.shape.clone(), d, Saved::None)
            }
            Primitive::Conv2d { stride, padding } => {
                let (x, w) = (node(0), node(1));
                let (geom, co) = conv_geom(&x.shape, &w.shape, *stride, *padding)?;
                let n = x.shape[0];
                let per_in = numel(&x.shape[1..]);
                let per_out = co * geom.col_cols();
                let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
                let mut out = vec![0.0; n * per_out];
                for i in 0..n {
                    im2col(&x.data[i * per_in..(i + 1) * per_in], &geom, &mut cols);
                    gemm(co, geom.col_rows(), geom.col_cols(), &w.data, false, &cols, false, 0.0, &mut out[i * per_out..(i + 1) * per_out]);
                }
                (vec![n, co, geom.out_h, geom.out_w], out, Saved::None)
            }
            Primitive::Conv2dTranspose { stride, padding } => {
                let (x, w) = (node(0), node(1));
                let (geom, ci) = conv_t_geom(&x.shape, &w.shape, *stride, *padding)?;
                let n = x.shape[0];
                let hw_in = geom.col_cols();
                let per_out = numel(&[geom.channels, geom.height, geom.width]);
                let mut cols = vec![0.0; geom.col_rows() * hw_in];
                let mut out = vec![0.0; n * per_out];
                for i in 0..n {
                    // cols = Wᵀ · x_i, W viewed as (Ci, Co·k·k)
                    gemm(geom.col_rows(), ci, hw_in, &w.data, true, &x.data[i * ci * hw_in..(i + 1) * ci * hw_in], false, 0.0, &mut cols);
                    col2im(&cols, &geom, &mut out[i * per_out..(i + 1) * per_out]);
                }
                (vec![n, geom.channels, geom.height, geom.width], out, Saved::None)
            }
            Primitive::AvgPool2d { kernel } => {
                let x = node(0);
                let k = *kernel;
                if x.shape.len() != 4 || k == 0 || x.shape[2] % k != 0 || x.shape[3] % k != 0 {
                    return Err(mismatch(format!("avg_pool2d k={k} on {:?}", x.shape)));
                }
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut out = vec![0.0; n * c * oh * ow];
                for p in 0..n * c {
                    let src = &x.data[p * h * w..(p + 1) * h * w];
                    let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y / k) * ow + xx / k] += src[y * w + xx];
                        }
                    }
                    dst.iter_mut().for_each(|v| *v *= norm);
                }
                (vec![n, c, oh, ow], out, Saved::None)
            }
            Primitive::UpsampleNearest { factor } => {
                let x = node(0);
                let f = *factor;
                if x.shape.len() != 4 || f == 0 {
                    return Err(mismatch(format!("upsample_nearest f={f} on {:?}", x.shape)));
                }
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (h * f, w * f);
                let mut out = vec![0.0; n * c * oh * ow];
                for p in 0..n * c {
                    let src = &x.data[p * h * w..(p + 1) * h * w];
                    let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[y * ow + xx] = src[(y / f) * w + xx / f];
                        }
                    }
                }
                (vec![n, c, oh, ow], out, Saved::None)
            }
            Primitive::Silu => unary(&|v| v * sigmoid(v)),
            Primitive::LeakyRelu { slope } => unary(&|v| if v > 0.0 { v } else { slope * v }),
            Primitive::Sigmoid => unary(&sigmoid),
            Primitive::Tanh => unary(&f64::tanh),
            // Capped so finite inputs always give finite outputs.
            Primitive::Exp => unary(&|v| v.min(700.0).exp()),
            Primitive::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::UnsupportedKind(format!("clamp with lo {lo} > hi {hi}")));
                }
                unary(&|v| v.clamp(*lo, *hi))
            }
            Primitive::GroupNorm { groups, eps } => {
                let (x, gamma, beta) = (node(0), node(1), node(2));
                let (n, c, inner) = gn_layout(&x.shape, &gamma.shape, &beta.shape, *groups)?;
                let cpg = c / groups;
                let span = cpg * inner;
                let mut out = vec![0.0; x.data.len()];
                let mut means = Vec::with_capacity(n * groups);
                let mut rstds = Vec::with_capacity(n * groups);
                for i in 0..n {
                    for g in 0..*groups {
                        let off = (i * c + g * cpg) * inner;
                        let seg = &x.data[off..off + span];
                        let mean = seg.iter().sum::<f64>() / span as f64;
                        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
                        let rstd = 1.0 / (var + eps).sqrt();
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            let (gm, bt) = (gamma.data[ch], beta.data[ch]);
                            let o = off + cc * inner;
                            for j in 0..inner {
                                out[o + j] = (x.data[o + j] - mean) * rstd * gm + bt;
                            }
                        }
                        means.push(mean);
                        rstds.push(rstd);
                    }
                }
                (x.shape.clone(), out, Saved::GroupNorm { mean: means, rstd: rstds })
            }
            Primitive::Concat => {
                let first = node(0);
                let rank = first.shape.len();
                if rank < 2 {
                    return Err(mismatch("concat needs rank >= 2"));
                }
                let n = first.shape[0];
                let rest = &first.shape[2..];
                let mut total_c = 0;
                for (i, _) in inputs.iter().enumerate() {
                    let s = &node(i).shape;
                    if s.len() != rank || s[0] != n || &s[2..] != rest {
                        return Err(mismatch(format!("concat: {:?} vs {:?}", first.shape, s)));
                    }
                    total_c += s[1];
                }
                let inner = numel(rest);
                let mut out = Vec::with_capacity(n * total_c * inner);
                for item in 0..n {
                    for i in 0..inputs.len() {
                        let nd = node(i);
                        let per = nd.shape[1] * inner;
                        out.extend_from_slice(&nd.data[item * per..(item + 1) * per]);
                    }
                }
                let mut shape = first.shape.clone();
                shape[1] = total_c;
                (shape, out, Saved::None)
            }
            Primitive::Reshape(shape) => {
                let x = node(0);
                if numel(shape) != x.data.len() {
                    return Err(mismatch(format!("reshape {:?} -> {shape:?}", x.shape)));
                }
                (shape.clone(), x.data.clone(), Saved::None)
            }
            Primitive::Sum => (Vec::new(), vec![node(0).data.iter().sum()], Saved::None),
            Primitive::Mean => {
                let x = node(0);
                if x.data.is_empty() {
                    return Err(mismatch("mean of empty tensor"));
                }
                (Vec::new(), vec![x.data.iter().sum::<f64>() / x.data.len() as f64], Saved::None)
            }
            Primitive::Mse => {
                let (a, b) = (node(0), node(1));
                if a.shape != b.shape || a.data.is_empty() {
                    return Err(mismatch(format!("mse: {:?} vs {:?}", a.shape, b.shape)));
                }
                let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
                (Vec::new(), vec![s / a.data.len() as f64], Saved::None)
            }
            Primitive::BceWithLogits => {
                let (l, y) = (node(0), node(1));
                if l.shape != y.shape {
                    return Err(mismatch(format!("bce_with_logits: {:?} vs {:?}", l.shape, y.shape)));
                }
                let d = l.data.iter().zip(&y.data).map(|(&z, &t)| softplus(z) - z * t).collect();
                (l.shape.clone(), d, Saved::None)
            }
        };
        Ok(out)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf that
    /// requires them; intermediate gradients are released as the sweep passes.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::NotScalar(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(rec) = &self.nodes[idx].record else { continue };
            let Some(gout) = grads[idx].take() else { continue };
            self.backward_node(idx, rec, &gout, &mut grads);
        }
        // keep leaves only
        for (i, g) in grads.iter_mut().enumerate() {
            if self.nodes[i].record.is_some() {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, rec: &Record, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let inp = &rec.inputs;
        let val = |i: usize| &self.nodes[inp[i].0];
        let wants = |i: usize| self.nodes[inp[i].0].requires_grad;
        let out = &self.nodes[idx];

        // Accumulates a full-size gradient into input `i`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }
        let unary = |grads: &mut [Option<Vec<f64>>], f: &dyn Fn(usize) -> f64| {
            if wants(0) {
                acc(grads, inp[0], gout.iter().enumerate().map(|(j, g)| g * f(j)).collect());
            }
        };

        match &rec.prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                let sign_b = if rec.prim == Primitive::Sub { -1.0 } else { 1.0 };
                let is_mul = rec.prim == Primitive::Mul;
                let n = gout.len();
                let ga = |j: usize| if is_mul { gout[j] * b.data[if b.data.len() == 1 { 0 } else { j }] } else { gout[j] };
                let gb = |j: usize| {
                    if is_mul {
                        gout[j] * a.data[if a.data.len() == 1 { 0 } else { j }]
                    } else {
                        sign_b * gout[j]
                    }
                };
                if wants(0) {
                    let g = if a.data.len() == n && a.shape == out.shape {
                        (0..n).map(ga).collect()
                    } else {
                        vec![(0..n).map(ga).sum()]
                    };
                    acc(grads, inp[0], g);
                }
                if wants(1) {
                    let g = if b.data.len() == n && b.shape == out.shape {
                        (0..n).map(gb).collect()
                    } else {
                        vec![(0..n).map(gb).sum()]
                    };
                    acc(grads, inp[1], g);
                }
            }
            Primitive::Scale(c) => unary(grads, &|_| *c),
            Primitive::AddScalar(_) | Primitive::Reshape(_) => unary(grads, &|_| 1.0),
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                if wants(0) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gout, false, &b.data, true, 0.0, &mut ga);
                    acc(grads, inp[0], ga);
                }
                if wants(1) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &a.data, true, gout, false, 0.0, &mut gb);
                    acc(grads, inp[1], gb);
                }
            }
            Primitive::AddBias => {
                let (x, b) = (val(0), val(1));
                if wants(0) {
                    acc(grads, inp[0], gout.to_vec());
                }
                if wants(1) {
                    let (n, c, inner) = bias_layout(&x.shape, &b.shape).expect("validated in forward");
                    let per_item = b.shape.len() == 2;
                    let mut gb = vec![0.0; b.data.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * inner;
                            let s: f64 = gout[off..off + inner].iter().sum();
                            gb[if per_item { i * c + ch } else { ch }] += s;
                        }
                    }
                    acc(grads, inp[1], gb);
                }
            }
            Primitive::Conv2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let (geom, co) = conv_geom(&x.shape, &w.shape, *stride, *padding).expect("validated in forward");
                let n = x.shape[0];
                let per_in = numel(&x.shape[1..]);
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let per_out = co * ncol;
                let mut cols = vec![0.0; rows * ncol];
                let mut gw = wants(1).then(|| vec![0.0; w.data.len()]);
                let mut gx = wants(0).then(|| vec![0.0; x.data.len()]);
                for i in 0..n {
                    let go = &gout[i * per_out..(i + 1) * per_out];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&x.data[i * per_in..(i + 1) * per_in], &geom, &mut cols);
                        gemm(co, ncol, rows, go, false, &cols, true, 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(rows, co, ncol, &w.data, true, go, false, 0.0, &mut cols);
                        col2im(&cols, &geom, &mut gx[i * per_in..(i + 1) * per_in]);
                    }
                }
                if let Some(g) = gx {
                    acc(grads, inp[0], g);
                }
                if let Some(g) = gw {
                    acc(grads, inp[1], g);
                }
            }
            Primitive::Conv2dTranspose { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let (geom, ci) = conv_t_geom(&x.shape, &w.shape, *stride, *padding).expect("validated in forward");
                let n = x.shape[0];
                let (rows, hw_in) = (geom.col_rows(), geom.col_cols());
                let per_out = numel(&[geom.channels, geom.height, geom.width]);
                let mut cols = vec![0.0; rows * hw_in];
                let mut gw = wants(1).then(|| vec![0.0; w.data.len()]);
                let mut gx = wants(0).then(|| vec![0.0; x.data.len()]);
                for i in 0..n {
                    im2col(&gout[i * per_out..(i + 1) * per_out], &geom, &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        gemm(ci, rows, hw_in, &w.data, false, &cols, false, 0.0, &mut gx[i * ci * hw_in..(i + 1) * ci * hw_in]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(ci, hw_in, rows, &x.data[i * ci * hw_in..(i + 1) * ci * hw_in], false, &cols, true, 1.0, gw);
                    }
                }
                if let Some(g) = gx {
                    acc(grads, inp[0], g);
                }
                if let Some(g) = gw {
                    acc(grads, inp[1], g);
                }
            }
            Primitive::AvgPool2d { kernel } => {
                if wants(0) {
                    let x = val(0);
                    let k = *kernel;
                    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                    let (oh, ow) = (h / k, w / k);
                    let norm = 1.0 / (k * k) as f64;
                    let mut g = vec![0.0; x.data.len()];
                    for p in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                g[p * h * w + y * w + xx] = gout[p * oh * ow + (y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                    acc(grads, inp[0], g);
                }
            }
            Primitive::UpsampleNearest { factor } => {
                if wants(0) {
                    let x = val(0);
                    let f = *factor;
                    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                    let (oh, ow) = (h * f, w * f);
                    let mut g = vec![0.0; x.data.len()];
                    for p in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                g[p * h * w + (y / f) * w + xx / f] += gout[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                    acc(grads, inp[0], g);
                }
            }
            Primitive::Silu => {
                let x = &val(0).data;
                unary(grads, &|j| {
                    let s = sigmoid(x[j]);
                    s * (1.0 + x[j] * (1.0 - s))
                })
            }
            Primitive::LeakyRelu { slope } => {
                let x = &val(0).data;
                unary(grads, &|j| if x[j] > 0.0 { 1.0 } else { *slope })
            }
            Primitive::Sigmoid => {
                let y = &out.data;
                unary(grads, &|j| y[j] * (1.0 - y[j]))
            }
            Primitive::Tanh => {
                let y = &out.data;
                unary(grads, &|j| 1.0 - y[j] * y[j])
            }
            Primitive::Exp => {
                let (x, y) = (&val(0).data, &out.data);
                unary(grads, &|j| if x[j] > 700.0 { 0.0 } else { y[j] })
            }
            Primitive::Clamp { lo, hi } => {
                let x = &val(0).data;
                unary(grads, &|j| if x[j] < *lo || x[j] > *hi { 0.0 } else { 1.0 })
            }
            Primitive::GroupNorm { groups, .. } => {
                let (x, gamma, beta) = (val(0), val(1), val(2));
                let Saved::GroupNorm { mean, rstd } = &rec.saved else { unreachable!("group_norm saves statistics") };
                let (n, c, inner) = gn_layout(&x.shape, &gamma.shape, &beta.shape, *groups).expect("validated in forward");
                let cpg = c / groups;
                let span = (cpg * inner) as f64;
                let mut gx = wants(0).then(|| vec![0.0; x.data.len()]);
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..n {
                    for g in 0..*groups {
                        let (mu, rs) = (mean[i * groups + g], rstd[i * groups + g]);
                        let off = (i * c + g * cpg) * inner;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            let o = off + cc * inner;
                            for j in 0..inner {
                                let xh = (x.data[o + j] - mu) * rs;
                                let dy = gout[o + j];
                                gg[ch] += dy * xh;
                                gb[ch] += dy;
                                let dxh = dy * gamma.data[ch];
                                sum_d += dxh;
                                sum_dx += dxh * xh;
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let (md, mdx) = (sum_d / span, sum_dx / span);
                            for cc in 0..cpg {
                                let ch = g * cpg + cc;
                                let o = off + cc * inner;
                                for j in 0..inner {
                                    let xh = (x.data[o + j] - mu) * rs;
                                    let dxh = gout[o + j] * gamma.data[ch];
                                    gx[o + j] = rs * (dxh - md - xh * mdx);
                                }
                            }
                        }
                    }
                }
                if let Some(g) = gx {
                    acc(grads, inp[0], g);
                }
                if wants(1) {
                    acc(grads, inp[1], gg);
                }
                if wants(2) {
                    acc(grads, inp[2], gb);
                }
            }
            Primitive::Concat => {
                let n = out.shape[0];
                let inner = numel(&out.shape[2..]);
                let total = out.shape[1] * inner;
                let mut c_off = 0;
                for (i, v) in inp.iter().enumerate() {
                    let ci = val(i).shape[1];
                    if wants(i) {
                        let per = ci * inner;
                        let mut g = Vec::with_capacity(n * per);
                        for item in 0..n {
                            let start = item * total + c_off * inner;
                            g.extend_from_slice(&gout[start..start + per]);
                        }
                        acc(grads, *v, g);
                    }
                    c_off += ci;
                }
            }
            Primitive::Sum => {
                let len = val(0).data.len();
                if wants(0) {
                    acc(grads, inp[0], vec![gout[0]; len]);
                }
            }
            Primitive::Mean => {
                let len = val(0).data.len();
                if wants(0) {
                    acc(grads, inp[0], vec![gout[0] / len as f64; len]);
                }
            }
            Primitive::Mse => {
                let (a, b) = (val(0), val(1));
                let k = 2.0 * gout[0] / a.data.len() as f64;
                let diff: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| k * (x - y)).collect();
                if wants(1) {
                    acc(grads, inp[1], diff.iter().map(|d| -d).collect());
                }
                if wants(0) {
                    acc(grads, inp[0], diff);
                }
            }
            Primitive::BceWithLogits => {
                let (l, y) = (val(0), val(1));
                if wants(0) {
                    acc(grads, inp[0], gout.iter().zip(l.data.iter().zip(&y.data)).map(|(g, (&z, &t))| g * (sigmoid(z) - t)).collect());
                }
                if wants(1) {
                    acc(grads, inp[1], gout.iter().zip(&l.data).map(|(g, z)| -g * z).collect());
                }
            }
        }
    }
}

fn bias_layout(x: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() < 2 {
        return Err(mismatch(format!("add_bias needs rank >= 2, got {x:?}")));
    }
    let (n, c) = (x[0], x[1]);
    let ok = (b.len() == 1 && b[0] == c) || (b.len() == 2 && b[0] == n && b[1] == c);
    if !ok {
        return Err(mismatch(format!("add_bias: bias {b:?} does not fit {x:?}")));
    }
    Ok((n, c, numel(&x[2..])))
}

fn gn_layout(x: &[usize], gamma: &[usize], beta: &[usize], groups: usize) -> Result<(usize, usize, usize)> {
    if x.len() < 2 {
        return Err(mismatch(format!("group_norm needs rank >= 2, got {x:?}")));
    }
    let c = x[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::UnsupportedKind(format!("group_norm: {groups} groups for {c} channels")));
    }
    if gamma != [c] || beta != [c] {
        return Err(mismatch(format!("group_norm affine {gamma:?}/{beta:?} for {c} channels")));
    }
    Ok((x[0], c, numel(&x[2..])))
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<(ConvGeom, usize)> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || x[1] != w[1] {
        return Err(mismatch(format!("conv2d: input {x:?}, kernel {w:?}")));
    }
    let g = ConvGeom::new(x[1], x[2], x[3], w[2], stride, padding)
        .ok_or_else(|| Error::UnsupportedKind(format!("conv2d stride {stride} pad {padding} on {x:?}")))?;
    Ok((g, w[0]))
}

/// Geometry of the equivalent forward convolution whose *input* is the
/// transposed convolution's output.
fn conv_t_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<(ConvGeom, usize)> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || x[1] != w[0] || stride == 0 {
        return Err(mismatch(format!("conv2d_transpose: input {x:?}, kernel {w:?}")));
    }
    let k = w[2];
    let oh = ((x[2] - 1) * stride + k).checked_sub(2 * padding);
    let ow = ((x[3] - 1) * stride + k).checked_sub(2 * padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::UnsupportedKind(format!("conv2d_transpose padding {padding} too large")));
    };
    let g = ConvGeom::new(w[1], oh, ow, k, stride, padding)
        .filter(|g| g.out_h == x[2] && g.out_w == x[3])
        .ok_or_else(|| Error::UnsupportedKind(format!("conv2d_transpose geometry for {x:?}")))?;
    Ok((g, x[1]))
}
