//! KL-regularised convolutional autoencoder for running diffusion on a
//! downscaled latent grid.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_weights, write_weights};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamGroup, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    pub enabled: bool,
    /// Downscale factor `H / h`.
    pub f: usize,
    pub channels: usize,
    pub kl_weight: f64,
    pub hidden: usize,
    pub image_side: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self { enabled: false, f: 2, channels: 2, kl_weight: 1e-6, hidden: 16, image_side: 32 }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.f) || self.image_side % self.f != 0 {
            return Err(Error::ConfigInvalid(format!("latent f {} must be 1, 2 or 4 and divide {}", self.f, self.image_side)));
        }
        if self.channels == 0 || self.hidden == 0 || self.kl_weight < 0.0 {
            return Err(Error::ConfigInvalid("latent channels and hidden width must be positive, kl_weight nonnegative".into()));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.image_side / self.f
    }
}

/// Anything mapping images to diffusion inputs and back.
pub trait Codec {
    /// Deterministic code for `(N, 1, H, W)` images.
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

/// Pixel-space diffusion.
pub struct Identity;

impl Codec for Identity {
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    pub config: LatentConfig,
    pub params: ParamStore,
    /// Multiplier bringing latent means to roughly unit variance.
    pub scale: f64,
    enc: Vec<Conv2d>,
    mean_head: Conv2d,
    logvar_head: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

pub struct EncodedLatent {
    pub mean: Var,
    pub logvar: Var,
}

impl LatentCodec {
    pub fn new(config: LatentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "codec-init", 0);
        let mut s = ParamStore::new();
        let (h, c) = (config.hidden, config.channels);
        let o = ParamGroup::Other;
        let downs = config.f.trailing_zeros() as usize;
        let mut enc = vec![Conv2d::new(&mut s, "ae.enc0", 1, h, 3, 1, 1, o, &mut r, false)];
        for i in 0..downs {
            enc.push(Conv2d::new(&mut s, &format!("ae.down{i}"), h, h, 3, 2, 1, o, &mut r, false));
        }
        enc.push(Conv2d::new(&mut s, "ae.enc_mid", h, h, 3, 1, 1, o, &mut r, false));
        let mean_head = Conv2d::new(&mut s, "ae.mean", h, c, 3, 1, 1, o, &mut r, false);
        let logvar_head = Conv2d::new(&mut s, "ae.logvar", h, c, 3, 1, 1, o, &mut r, false);
        let dec_in = Conv2d::new(&mut s, "ae.dec_in", c, h, 3, 1, 1, o, &mut r, false);
        let dec_up = (0..downs).map(|i| Conv2d::new(&mut s, &format!("ae.up{i}"), h, h, 3, 1, 1, o, &mut r, false)).collect();
        let dec_out = Conv2d::new(&mut s, "ae.dec_out", h, 1, 3, 1, 1, o, &mut r, true);
        Ok(Self { config, params: s, scale: 1.0, enc, mean_head, logvar_head, dec_in, dec_up, dec_out })
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.config.channels, self.config.latent_side(), self.config.latent_side()]
    }

    fn check(&self, shape: &[usize], channels: usize, side: usize) -> Result<()> {
        if shape.len() != 4 || shape[1] != channels || shape[2] != side || shape[3] != side {
            return Err(Error::ShapeMismatch(format!("codec expects (N, {channels}, {side}, {side}), got {shape:?}")));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<EncodedLatent> {
        self.check(g.shape(x), 1, self.config.image_side)?;
        let mut h = x;
        for c in &self.enc {
            h = c.forward(g, p, h)?;
            h = g.silu(h)?;
        }
        let mean = self.mean_head.forward(g, p, h)?;
        let lv = self.logvar_head.forward(g, p, h)?;
        let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(EncodedLatent { mean, logvar })
    }

    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        self.check(g.shape(z), self.config.channels, self.config.latent_side())?;
        let mut h = self.dec_in.forward(g, p, z)?;
        h = g.silu(h)?;
        for c in &self.dec_up {
            h = g.upsample_nearest(h, 2)?;
            h = c.forward(g, p, h)?;
            h = g.silu(h)?;
        }
        let out = self.dec_out.forward(g, p, h)?;
        g.tanh(out)
    }

    /// `mean + exp(½·logvar)·ξ`, or the mean when `rng` is `None`.
    pub fn encode(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = self.encode_graph(&mut g, &p, xv)?;
        let mut z = g.tensor(e.mean);
        if let Some(r) = rng {
            let lv = g.value(e.logvar);
            for (zi, l) in z.data.iter_mut().zip(lv) {
                *zi += (0.5 * l).exp() * rng::normal(r);
            }
        }
        Ok(z)
    }

    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let y = self.decode_graph(&mut g, &p, zv)?;
        Ok(g.tensor(y))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let scale = Tensor::scalar(self.scale);
        let mut named = self.params.named_tensors();
        named.push(("ae.scale".into(), &scale));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_weights(&mut f, &named)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let named = read_weights(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let rest = self.params.load_named(named)?;
        self.scale = match rest.iter().find(|(n, _)| n == "ae.scale") {
            Some((_, t)) => t.item()?,
            None => 1.0,
        };
        Ok(())
    }
}

impl Codec for LatentCodec {
    /// Scaled latent means.
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.encode(x, None)?;
        z.data.iter_mut().for_each(|v| *v *= self.scale);
        Ok(z)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut z = z.clone();
        z.data.iter_mut().for_each(|v| *v /= self.scale);
        self.decode_raw(&z)
    }
}

/// Closed-form `KL(N(μ, e^{lv}) ‖ N(0, 1))` summed over latent elements and
/// averaged over the batch.
pub fn kl_term(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var> {
    let n = g.shape(mean)[0] as f64;
    let m2 = g.mul(mean, mean)?;
    let var = g.exp(logvar)?;
    let a = g.add(m2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0)?;
    let s = g.sum(c)?;
    g.scale(s, 0.5 / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeLoss<T> {
    pub total: T,
    pub recon_mse: T,
    pub kl: T,
}

/// Builds `recon_mse + kl_weight·KL` with reparameterised sampling noise from `rng`.
pub fn ae_loss_graph(codec: &LatentCodec, g: &mut Graph, p: &Bound, x: &Tensor, r: &mut Rng) -> Result<AeLoss<Var>> {
    let xv = g.constant(x.clone());
    let e = codec.encode_graph(g, p, xv)?;
    let shape = g.shape(e.mean).to_vec();
    let xi = g.constant(Tensor::new(shape.clone(), rng::normals(r, shape.iter().product()))?);
    let half = g.scale(e.logvar, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, xi)?;
    let z = g.add(e.mean, noise)?;
    let y = codec.decode_graph(g, p, z)?;
    let recon_mse = g.mse(y, xv)?;
    let kl = kl_term(g, e.mean, e.logvar)?;
    let wkl = g.scale(kl, codec.config.kl_weight)?;
    let total = g.add(recon_mse, wkl)?;
    Ok(AeLoss { total, recon_mse, kl })
}

pub fn ae_loss(codec: &LatentCodec, x: &Tensor, r: &mut Rng) -> Result<AeLoss<f64>> {
    let mut g = Graph::new();
    let p = codec.params.bind(&mut g, false);
    let l = ae_loss_graph(codec, &mut g, &p, x, r)?;
    Ok(AeLoss { total: g.item(l.total)?, recon_mse: g.item(l.recon_mse)?, kl: g.item(l.kl)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 32, lr: 2e-3, seed: 0 }
    }
}

/// Trains the codec on `(1, H, W)` images, then sets `scale` from the spread
/// of the latent means. Returns per-step losses.
pub fn train_autoencoder(codec: &mut LatentCodec, images: &[Vec<f64>], cfg: &AeTrainConfig) -> Result<Vec<AeLoss<f64>>> {
    if images.is_empty() || cfg.batch == 0 {
        return Err(Error::ConfigInvalid("autoencoder training needs images and a positive batch".into()));
    }
    let side = codec.config.image_side;
    let shape = [1, side, side];
    let mut opt = Adam::new(AdamConfig::default(), &codec.params);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "ae-batch", step as u64);
        let items: Vec<&[f64]> = (0..cfg.batch).map(|_| images[r.random_range(0..images.len())].as_slice()).collect();
        let x = Tensor::stack(&items, &shape)?;
        let mut g = Graph::new();
        let p = codec.params.bind(&mut g, true);
        let l = ae_loss_graph(codec, &mut g, &p, &x, &mut r)?;
        let rec = AeLoss { total: g.item(l.total)?, recon_mse: g.item(l.recon_mse)?, kl: g.item(l.kl)? };
        if !rec.total.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: rec.total });
        }
        let mut grads = g.backward(l.total)?;
        codec.params.collect_grads(&mut grads, &p);
        opt.step(&mut codec.params, |_| Some(cfg.lr));
        codec.params.zero_grads();
        log.push(rec);
    }
    codec.scale = 1.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0.0;
    for chunk in images.chunks(64) {
        let items: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        let z = codec.encode(&Tensor::stack(&items, &shape)?, None)?;
        sum += z.data.iter().sum::<f64>();
        sq += z.data.iter().map(|v| v * v).sum::<f64>();
        count += z.numel() as f64;
    }
    let var = sq / count - (sum / count).powi(2);
    codec.scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    Ok(log)
}

/// Mean squared reconstruction error through the deterministic code.
pub fn reconstruction_mse(codec: &LatentCodec, images: &[Vec<f64>]) -> Result<f64> {
    let side = codec.config.image_side;
    let mut err = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(64) {
        let items: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        let x = Tensor::stack(&items, &[1, side, side])?;
        let y = codec.decode(&codec.encode_mean(&x)?)?;
        err += x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += x.numel();
    }
    Ok(err / count as f64)
}
