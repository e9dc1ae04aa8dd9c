//! Joint UNet denoiser + classifier.
//!
//! The down path and bottleneck (`ν`) are shared: one encoder pass yields the
//! skip connections for the denoising up path (`ψ`) and the pooled bottleneck
//! features consumed by the two-layer classifier head (`ω`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, ParamGroup, ParamStore};
use crate::rng;

/// Negative slope between the two classifier layers.
pub const HEAD_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_stage: usize,
    pub time_embed_dim: usize,
    pub image_side: usize,
    /// Upper bound on the pooled classification feature length.
    pub feature_cap: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            num_res_blocks_per_stage: 1,
            time_embed_dim: 64,
            image_side: 32,
            feature_cap: 10_000,
            classifier_hidden: 128,
            num_classes: 3,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be nonempty and positive".into());
        }
        if self.base_channels < 8 {
            return bad(format!("base_channels {} < 8", self.base_channels));
        }
        // one stride-2 downsample after every stage
        let div = 1usize << self.channel_multipliers.len();
        if self.image_side == 0 || self.image_side % div != 0 {
            return bad(format!("image_side {} not divisible by {div}", self.image_side));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim {} must be even and positive", self.time_embed_dim));
        }
        if self.input_channels == 0 || self.num_res_blocks_per_stage == 0 || self.num_classes == 0 || self.classifier_hidden == 0 {
            return bad("channel, block, class and hidden counts must be positive".into());
        }
        if self.feature_cap == 0 {
            return bad("feature_cap must be positive".into());
        }
        Ok(())
    }

    pub fn bottleneck_side(&self) -> usize {
        self.image_side >> self.channel_multipliers.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels * self.channel_multipliers.last().copied().unwrap_or(1)
    }

    /// Average-pool kernel applied to the bottleneck: the smallest power of two
    /// bringing the flattened length within `feature_cap`.
    pub fn feature_pool(&self) -> usize {
        let (c, side) = (self.bottleneck_channels(), self.bottleneck_side());
        let mut k = 1;
        while c * (side / k) * (side / k) > self.feature_cap && side % (k * 2) == 0 {
            k *= 2;
        }
        k
    }

    pub fn feature_dim(&self) -> usize {
        let side = self.bottleneck_side() / self.feature_pool();
        self.bottleneck_channels() * side * side
    }
}

/// Sinusoidal embedding as interleaved `[sin(t/10000^{2i/d}), cos(t/10000^{2i/d})]` pairs.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::OddDim(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10_000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t as f64 / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, group: ParamGroup, r: &mut rng::Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, group),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, group, r, false),
            temb: Linear::new(store, &format!("{name}.temb"), tdim, cout, group, r, false),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, group),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, group, r, false),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, group, r, false)),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, p, h)?;
        let e = self.temb.forward(g, p, temb)?;
        let h = g.add_bias(h, e)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(h, s)
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    blocks: Vec<ResBlock>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Conv2d,
    blocks: Vec<ResBlock>,
}

/// Everything one encoder pass produces.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub temb: Var,
    pub skips: Vec<Var>,
    pub bottleneck: Var,
    /// Pooled, flattened bottleneck `(N, feature_dim)`.
    pub features: Var,
}

/// Output of [`JointModel::denoise_forward`].
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_hat: Tensor,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub config: UNetConfig,
    pub params: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<DownStage>,
    mid: ResBlock,
    up: Vec<UpStage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    head1: Linear,
    head2: Linear,
}

/// Which class log-probability guidance differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassTarget {
    pub class: usize,
    /// `false`: `log σ(logit)`; `true`: `log(1 − σ(logit))`.
    pub away: bool,
}

/// Anything the samplers can run: a noise predictor with an optional
/// differentiable classifier over the same input.
pub trait Denoiser {
    /// Per-item input shape `(C, H, W)`.
    fn sample_shape(&self) -> Vec<usize>;
    fn num_classes(&self) -> usize;
    fn predict_eps(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor>;
    /// `ε̂` and `∇_{z_t} Σ_i log p(target | z_t,i)` from one forward pass.
    fn eps_and_class_grad(&self, z_t: &Tensor, t: &[usize], target: ClassTarget) -> Result<(Tensor, Tensor)>;
    /// True when the weights are visibly still at initialisation.
    fn is_untrained(&self) -> bool {
        false
    }
}

impl JointModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model-init", 0);
        let mut s = ParamStore::new();
        let c = &config;
        let td = c.time_embed_dim;
        let enc = ParamGroup::Encoder;
        let dec = ParamGroup::Decoder;
        let time1 = Linear::new(&mut s, "time.fc1", td, td, enc, &mut r, false);
        let time2 = Linear::new(&mut s, "time.fc2", td, td, enc, &mut r, false);
        let ch0 = c.base_channels * c.channel_multipliers[0];
        let conv_in = Conv2d::new(&mut s, "enc.conv_in", c.input_channels, ch0, 3, 1, 1, enc, &mut r, false);
        let mut ch = ch0;
        let mut skip_ch = Vec::new();
        let mut down = Vec::new();
        for (i, &m) in c.channel_multipliers.iter().enumerate() {
            let out = c.base_channels * m;
            let mut blocks = Vec::new();
            for b in 0..c.num_res_blocks_per_stage {
                blocks.push(ResBlock::new(&mut s, &format!("enc.down{i}.res{b}"), ch, out, td, enc, &mut r));
                ch = out;
            }
            skip_ch.push(ch);
            let dn = Conv2d::new(&mut s, &format!("enc.down{i}.downsample"), ch, ch, 3, 2, 1, enc, &mut r, false);
            down.push(DownStage { blocks, down: dn });
        }
        let mid = ResBlock::new(&mut s, "enc.mid", ch, ch, td, enc, &mut r);
        let mut up = Vec::new();
        for (i, &m) in c.channel_multipliers.iter().enumerate().rev() {
            let out = c.base_channels * m;
            let upc = Conv2d::new(&mut s, &format!("dec.up{i}.upsample"), ch, ch, 3, 1, 1, dec, &mut r, false);
            let mut blocks = Vec::new();
            let mut cin = ch + skip_ch[i];
            for b in 0..c.num_res_blocks_per_stage {
                blocks.push(ResBlock::new(&mut s, &format!("dec.up{i}.res{b}"), cin, out, td, dec, &mut r));
                cin = out;
            }
            ch = out;
            up.push(UpStage { up: upc, blocks });
        }
        let out_norm = GroupNorm::new(&mut s, "dec.out_norm", ch, dec);
        let out_conv = Conv2d::new(&mut s, "dec.out_conv", ch, c.input_channels, 3, 1, 1, dec, &mut r, true);
        let cls = ParamGroup::Classifier;
        let head1 = Linear::new(&mut s, "cls.fc1", c.feature_dim(), c.classifier_hidden, cls, &mut r, false);
        let head2 = Linear::new(&mut s, "cls.fc2", c.classifier_hidden, c.num_classes, cls, &mut r, true);
        Ok(Self { config, params: s, time1, time2, conv_in, down, mid, up, out_norm, out_conv, head1, head2 })
    }

    fn check_input(&self, shape: &[usize], t: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = shape.len() == 4 && shape[1] == c.input_channels && shape[2] == c.image_side && shape[3] == c.image_side;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "model expects (N, {}, {s}, {s}), got {shape:?}",
                c.input_channels,
                s = c.image_side
            )));
        }
        if t.len() != shape[0] {
            return Err(Error::ShapeMismatch(format!("{} timesteps for batch {}", t.len(), shape[0])));
        }
        Ok(())
    }

    fn time_input(&self, t: &[usize]) -> Result<Tensor> {
        let d = self.config.time_embed_dim;
        let mut data = Vec::with_capacity(t.len() * d);
        for &ti in t {
            data.extend(time_embedding(ti, d)?);
        }
        Tensor::new(vec![t.len(), d], data)
    }

    /// Shared encoder pass over `z` (already in the graph).
    pub fn encode(&self, g: &mut Graph, p: &Bound, z: Var, t: &[usize]) -> Result<Encoded> {
        self.check_input(g.shape(z), t)?;
        let te = g.constant(self.time_input(t)?);
        let te = self.time1.forward(g, p, te)?;
        let te = g.silu(te)?;
        let te = self.time2.forward(g, p, te)?;
        let temb = g.silu(te)?;
        let mut h = self.conv_in.forward(g, p, z)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            for b in &stage.blocks {
                h = b.forward(g, p, h, temb)?;
            }
            skips.push(h);
            h = stage.down.forward(g, p, h)?;
        }
        let bottleneck = self.mid.forward(g, p, h, temb)?;
        let k = self.config.feature_pool();
        let pooled = if k > 1 { g.avg_pool2d(bottleneck, k)? } else { bottleneck };
        let n = t.len();
        let features = g.reshape(pooled, &[n, self.config.feature_dim()])?;
        Ok(Encoded { temb, skips, bottleneck, features })
    }

    /// Denoising up path: predicted noise `ε̂`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, enc: &Encoded) -> Result<Var> {
        let mut h = enc.bottleneck;
        for (stage, skip) in self.up.iter().zip(enc.skips.iter().rev()) {
            h = g.upsample_nearest(h, 2)?;
            h = stage.up.forward(g, p, h)?;
            h = g.concat(&[h, *skip])?;
            for b in &stage.blocks {
                h = b.forward(g, p, h, enc.temb)?;
            }
        }
        let h = self.out_norm.forward(g, p, h)?;
        let h = g.silu(h)?;
        self.out_conv.forward(g, p, h)
    }

    /// Classifier head: logits `(N, K)` from pooled features.
    pub fn head(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let h = self.head1.forward(g, p, features)?;
        let h = g.leaky_relu(h, HEAD_LEAKY_SLOPE)?;
        self.head2.forward(g, p, h)
    }

    pub fn denoise_forward(&self, z_t: &Tensor, t: &[usize]) -> Result<DenoiserOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(z_t.clone());
        let enc = self.encode(&mut g, &p, z, t)?;
        let eps = self.decode(&mut g, &p, &enc)?;
        Ok(DenoiserOutput { eps_hat: g.tensor(eps), features: g.tensor(enc.features) })
    }

    pub fn classify(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(z_t.clone());
        let enc = self.encode(&mut g, &p, z, t)?;
        let logits = self.head(&mut g, &p, enc.features)?;
        Ok(g.tensor(logits))
    }

    /// Sigmoid class probabilities `(N, K)`.
    pub fn predict_proba(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut l = self.classify(z_t, t)?;
        l.data.iter_mut().for_each(|v| *v = crate::autodiff::sigmoid(*v));
        Ok(l)
    }

    /// `∇_{z_t} Σ_i log p(target | z_t,i)` and the logits, without the decoder.
    pub fn class_log_prob_grad(&self, z_t: &Tensor, t: &[usize], target: ClassTarget) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.variable(z_t.clone());
        let enc = self.encode(&mut g, &p, z, t)?;
        let logits = self.head(&mut g, &p, enc.features)?;
        let obj = self.log_prob_objective(&mut g, logits, target)?;
        let grads = g.backward(obj)?;
        let grad = grads.get(z).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; z_t.numel()]);
        Ok((Tensor::new(z_t.shape.clone(), grad)?, g.tensor(logits)))
    }

    /// `Σ_i log σ(l_ik)` (toward) or `Σ_i log(1 − σ(l_ik))` (away), built from
    /// the elementwise logistic loss with a one-hot column mask.
    fn log_prob_objective(&self, g: &mut Graph, logits: Var, target: ClassTarget) -> Result<Var> {
        let k = self.config.num_classes;
        if target.class >= k {
            return Err(Error::BadClassIndex { index: target.class, classes: k });
        }
        let n = g.shape(logits)[0];
        let y = if target.away { 0.0 } else { 1.0 };
        let targets = g.constant(Tensor::filled(&[n, k], y));
        let mask = g.constant(Tensor::from_fn(&[n, k], |j| if j % k == target.class { -1.0 } else { 0.0 }));
        let nll = g.bce_with_logits(logits, targets)?;
        let masked = g.mul(nll, mask)?;
        g.sum(masked)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        self.params.load(path)
    }
}

impl Denoiser for JointModel {
    fn sample_shape(&self) -> Vec<usize> {
        let c = &self.config;
        vec![c.input_channels, c.image_side, c.image_side]
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_eps(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        Ok(self.denoise_forward(z_t, t)?.eps_hat)
    }

    fn is_untrained(&self) -> bool {
        // the output convolution starts at zero and moves on the first update
        self.params.tensor(self.out_conv.weight).data.iter().all(|&w| w == 0.0)
    }

    fn eps_and_class_grad(&self, z_t: &Tensor, t: &[usize], target: ClassTarget) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.variable(z_t.clone());
        let enc = self.encode(&mut g, &p, z, t)?;
        let logits = self.head(&mut g, &p, enc.features)?;
        let obj = self.log_prob_objective(&mut g, logits, target)?;
        // the decoder hangs off the same encoder pass but is not an ancestor of `obj`
        let eps = self.decode(&mut g, &p, &enc)?;
        let grads = g.backward(obj)?;
        let grad = grads.get(z).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; z_t.numel()]);
        Ok((g.tensor(eps), Tensor::new(z_t.shape.clone(), grad)?))
    }
}
