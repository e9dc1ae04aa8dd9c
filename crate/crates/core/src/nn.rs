//! Parameter storage and the handful of layers the models are built from.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_weights, write_weights};
use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Shared encoder (down path, bottleneck, time embedding).
    Encoder,
    /// Denoising up path and output head.
    Decoder,
    /// Classifier head over pooled features.
    Classifier,
    /// Anything else (autoencoder, oracle).
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Graph handles for every parameter of a store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor: tensor.with_grad(), group });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn num_scalars_in(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.tensor.numel()).sum()
    }

    /// Inserts every parameter into `g`. With `trainable == false` they enter
    /// as constants and no weight gradients are formed.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| if trainable { g.variable(e.tensor.clone()) } else { g.constant(e.tensor.clone()) })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from a backward pass into each tensor's `grad` field
    /// (zeros for parameters the loss does not reach).
    pub fn collect_grads(&mut self, grads: &mut Gradients, bound: &Bound) {
        for (e, v) in self.entries.iter_mut().zip(&bound.vars) {
            let g = grads.take(*v).unwrap_or_else(|| vec![0.0; e.tensor.numel()]);
            e.tensor.grad = Some(g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.grad = None);
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), &e.tensor)).collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape. Extra names are returned untouched.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<Vec<(String, Tensor)>> {
        let mut map: BTreeMap<String, Tensor> = named.into_iter().collect();
        for e in &mut self.entries {
            let t = map
                .remove(&e.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {}", e.name)))?;
            if t.shape != e.tensor.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    e.name, t.shape, e.tensor.shape
                )));
            }
            e.tensor.data = t.data;
        }
        Ok(map.into_iter().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_weights(f, &self.named_tensors())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let named = read_weights(std::io::BufReader::new(std::fs::File::open(path)?))?;
        self.load_named(named).map(|_| ())
    }
}

/// Central-difference check of a loss built from `store`, at flat parameter
/// coordinates (indices into the concatenation of all tensors in store order).
/// Returns the worst relative error.
pub fn param_grad_check<F>(store: &ParamStore, f: F, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let loss = f(&mut g, &p)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = store
        .entries
        .iter()
        .zip(&p.vars)
        .flat_map(|(e, v)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; e.tensor.numel()]))
        .collect();
    let value = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let l = f(&mut g, &p)?;
        let v = g.item(l)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteFunction)
        }
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= analytic.len() {
            return Err(Error::InvalidRange(format!("coordinate {i} of {}", analytic.len())));
        }
        let (mut e, mut off) = (0, i);
        while off >= probe.entries[e].tensor.numel() {
            off -= probe.entries[e].tensor.numel();
            e += 1;
        }
        let orig = probe.entries[e].tensor.data[off];
        probe.entries[e].tensor.data[off] = orig + h;
        let fp = value(&probe)?;
        probe.entries[e].tensor.data[off] = orig - h;
        let fm = value(&probe)?;
        probe.entries[e].tensor.data[off] = orig;
        worst = worst.max(crate::autodiff::gradcheck::relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Square-kernel convolution with per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        group: ParamGroup,
        rng: &mut Rng,
        zero: bool,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let w = if zero { Tensor::zeros(&shape) } else { uniform(rng, &shape, 1.0 / ((cin * kernel * kernel) as f64).sqrt()) };
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), group);
        Self { weight, bias, stride, padding }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], self.stride, self.padding)?;
        g.add_bias(y, p[self.bias])
    }
}

/// Transposed convolution with per-channel bias; weight is `(cin, cout, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64 / (stride * stride) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cin, cout, kernel, kernel], bound), group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), group);
        Self { weight, bias, stride, padding }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d_transpose(x, p[self.weight], self.stride, self.padding)?;
        g.add_bias(y, p[self.bias])
    }
}

/// `x[N, in] · W[in, out] + b[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup, rng: &mut Rng, zero: bool) -> Self {
        let shape = [fan_in, fan_out];
        let w = if zero { Tensor::zeros(&shape) } else { uniform(rng, &shape, 1.0 / (fan_in as f64).sqrt()) };
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_bias(y, p[self.bias])
    }
}

/// Group normalisation with `min(4, channels)` groups.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub fn norm_groups(channels: usize) -> usize {
    let g = channels.min(4);
    // fall back to a divisor so odd channel counts still normalise
    (1..=g).rev().find(|d| channels % d == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0), group);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group);
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}
