//! Ancestral DDPM and DDIM reverse processes with classifier guidance.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ClassTarget, Denoiser};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;

/// Per-item cap on the norm of the classifier gradient.
pub const GRAD_CLIP_NORM: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Toward,
    Away,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub target_class: usize,
    pub direction: Direction,
    pub scale: f64,
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self { target_class: 0, direction: Direction::None, scale: 0.0 }
    }

    pub fn toward(class: usize, scale: f64) -> Self {
        Self { target_class: class, direction: Direction::Toward, scale }
    }

    pub fn away(class: usize, scale: f64) -> Self {
        Self { target_class: class, direction: Direction::Away, scale }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.direction == Direction::None {
            return Ok(());
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::ConfigInvalid(format!("guidance scale {} must be finite and nonnegative", self.scale)));
        }
        if self.target_class >= classes {
            return Err(Error::BadClassIndex { index: self.target_class, classes });
        }
        Ok(())
    }

    /// Whether a classifier gradient is needed at all.
    pub fn is_active(&self) -> bool {
        self.direction != Direction::None && self.scale != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub ddim_steps: usize,
    pub eta: f64,
    /// Clamp each step's clean-sample estimate to `[−c, c]`. Only meaningful
    /// in pixel space, where data lives in `[−1, 1]`.
    pub clip_denoised: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Ddpm, ddim_steps: 50, eta: 0.0, clip_denoised: None }
    }
}

/// Counters collected along a trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceStats {
    pub guided_evaluations: usize,
    pub clip_events: usize,
}

/// Where Gaussian draws come from: one shared stream for the batch, or one
/// stream per item so results do not depend on how items are batched.
pub enum NoiseSource<'a> {
    Shared(&'a mut Rng),
    PerItem(&'a mut [Rng]),
}

impl NoiseSource<'_> {
    pub fn normals(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let data = match self {
            NoiseSource::Shared(r) => rng::normals(r, n * per),
            NoiseSource::PerItem(rs) => {
                if rs.len() != n {
                    return Err(Error::ShapeMismatch(format!("{} noise streams for batch {n}", rs.len())));
                }
                rs.iter_mut().flat_map(|r| rng::normals(r, per)).collect()
            }
        };
        Tensor::new(shape.to_vec(), data)
    }
}

/// `ε′ = ε̂ − s·√(1−ᾱ_t)·∇ log p`, with `p = σ(l_k)` toward or `1 − σ(l_k)` away.
pub fn guided_epsilon<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &Tensor,
    t: usize,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    stats: &mut GuidanceStats,
) -> Result<Tensor> {
    g.validate(model.num_classes())?;
    let ts = vec![t; z_t.shape[0]];
    if !g.is_active() {
        return model.predict_eps(z_t, &ts);
    }
    let target = ClassTarget { class: g.target_class, away: g.direction == Direction::Away };
    let (mut eps, mut grad) = model.eps_and_class_grad(z_t, &ts, target)?;
    let per = z_t.numel() / z_t.shape[0];
    for item in grad.data.chunks_mut(per) {
        let norm = item.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > GRAD_CLIP_NORM {
            let f = GRAD_CLIP_NORM / norm;
            item.iter_mut().for_each(|v| *v *= f);
            stats.clip_events += 1;
        }
    }
    stats.guided_evaluations += 1;
    let c = g.scale * (1.0 - sched.alpha_bar(t)).sqrt();
    for (e, d) in eps.data.iter_mut().zip(&grad.data) {
        *e -= c * d;
    }
    Ok(eps)
}

/// Ancestral steps from `z` at `t_start` down to `t = 1`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_from<D: Denoiser + ?Sized>(
    model: &D,
    mut z: Tensor,
    t_start: usize,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    clip: Option<f64>,
    noise: &mut NoiseSource,
    stats: &mut GuidanceStats,
) -> Result<Tensor> {
    if t_start == 0 || t_start > sched.steps() {
        return Err(Error::TimestepOutOfRange { t: t_start, max: sched.steps() });
    }
    for t in (1..=t_start).rev() {
        let eps = guided_epsilon(model, &z, t, g, sched, stats)?;
        let (beta, ab) = (sched.beta(t), sched.alpha_bar(t));
        match clip {
            None => {
                let a = 1.0 / sched.alpha(t).sqrt();
                let c = beta / (1.0 - ab).sqrt();
                for (zi, e) in z.data.iter_mut().zip(&eps.data) {
                    *zi = a * (*zi - c * e);
                }
            }
            Some(lim) => {
                // posterior mean from the clamped clean estimate
                let ab_prev = sched.alpha_bar_prev(t);
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                for (zi, e) in z.data.iter_mut().zip(&eps.data) {
                    let x0 = ((*zi - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-lim, lim);
                    *zi = c0 * x0 + ct * *zi;
                }
            }
        }
        if t > 1 {
            let sigma = (beta * (1.0 - sched.alpha_bar_prev(t)) / (1.0 - ab)).sqrt();
            let xi = noise.normals(&z.shape)?;
            for (zi, x) in z.data.iter_mut().zip(&xi.data) {
                *zi += sigma * x;
            }
        }
        check_finite(&z, t)?;
    }
    Ok(z)
}

fn check_finite(z: &Tensor, t: usize) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteSample(t))
    }
}

fn batch_shape<D: Denoiser + ?Sized>(model: &D, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend(model.sample_shape());
    s
}

/// `n` samples from `z_T ~ N(0, I)`.
pub fn ddpm_sample<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    clip: Option<f64>,
    rng: &mut Rng,
) -> Result<(Tensor, GuidanceStats)> {
    let mut noise = NoiseSource::Shared(rng);
    let z = noise.normals(&batch_shape(model, n))?;
    let mut stats = GuidanceStats::default();
    let out = ddpm_from(model, z, sched.steps(), g, sched, clip, &mut noise, &mut stats)?;
    Ok((out, stats))
}

/// `steps` evenly spaced timesteps in `[1, t_max]`, both ends included.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::BadSubsequence(format!("{steps} steps within 1..={t_max}")));
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let span = (t_max - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps).map(|i| 1 + (i as f64 * span).round() as usize).collect())
}

/// DDIM updates over an increasing timestep list, starting from `z` at its last entry.
#[allow(clippy::too_many_arguments)]
pub fn ddim_from<D: Denoiser + ?Sized>(
    model: &D,
    mut z: Tensor,
    taus: &[usize],
    eta: f64,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    clip: Option<f64>,
    noise: &mut NoiseSource,
    stats: &mut GuidanceStats,
) -> Result<Tensor> {
    if taus.is_empty() || taus.windows(2).any(|w| w[0] >= w[1]) || taus[0] == 0 || *taus.last().expect("nonempty") > sched.steps() {
        return Err(Error::BadSubsequence(format!("{taus:?}")));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::ConfigInvalid(format!("eta {eta}")));
    }
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let t_prev = if i == 0 { 0 } else { taus[i - 1] };
        let eps = guided_epsilon(model, &z, t, g, sched, stats)?;
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
        for (zi, e) in z.data.iter_mut().zip(&eps.data) {
            let z0 = (*zi - sb * e) / sa;
            *zi = match clip {
                None => pa * z0 + pb * e,
                Some(lim) => {
                    let x0 = z0.clamp(-lim, lim);
                    pa * x0 + pb * (*zi - sa * x0) / sb
                }
            };
        }
        if sigma > 0.0 {
            let xi = noise.normals(&z.shape)?;
            for (zi, x) in z.data.iter_mut().zip(&xi.data) {
                *zi += sigma * x;
            }
        }
        check_finite(&z, t)?;
    }
    Ok(z)
}

pub fn ddim_sample<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    g: &GuidanceConfig,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, GuidanceStats)> {
    let taus = ddim_timesteps(sched.steps(), cfg.ddim_steps)?;
    let mut noise = NoiseSource::Shared(rng);
    let z = noise.normals(&batch_shape(model, n))?;
    let mut stats = GuidanceStats::default();
    let out = ddim_from(model, z, &taus, cfg.eta, g, sched, cfg.clip_denoised, &mut noise, &mut stats)?;
    Ok((out, stats))
}

/// Dispatches on `cfg.kind`.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    g: &GuidanceConfig,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, GuidanceStats)> {
    match cfg.kind {
        SamplerKind::Ddpm => ddpm_sample(model, n, g, sched, cfg.clip_denoised, rng),
        SamplerKind::Ddim => ddim_sample(model, n, g, cfg, sched, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact noise predictor for a point mass at `c`.
    struct Constant(f64, NoiseSchedule);

    impl Denoiser for Constant {
        fn sample_shape(&self) -> Vec<usize> {
            vec![1, 2, 2]
        }
        fn num_classes(&self) -> usize {
            1
        }
        fn predict_eps(&self, z: &Tensor, t: &[usize]) -> Result<Tensor> {
            let ab = self.1.alpha_bar(t[0]);
            Ok(Tensor::new(z.shape.clone(), z.data.iter().map(|v| (v - ab.sqrt() * self.0) / (1.0 - ab).sqrt()).collect())?)
        }
        fn eps_and_class_grad(&self, z: &Tensor, t: &[usize], _: ClassTarget) -> Result<(Tensor, Tensor)> {
            Ok((self.predict_eps(z, t)?, Tensor::filled(&z.shape, 1e6)))
        }
    }

    #[test]
    fn single_step_has_no_noise() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let m = Constant(0.3, s.clone());
        let (z, _) = ddpm_sample(&m, 2, &GuidanceConfig::none(), &s, None, &mut rng::stream(0, "t", 0)).unwrap();
        assert!(z.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn subsequences() {
        assert_eq!(ddim_timesteps(200, 1).unwrap(), vec![200]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        let t = ddim_timesteps(200, 50).unwrap();
        assert_eq!((t[0], t[49]), (1, 200));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn clipping_counts_events() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let m = Constant(0.0, s.clone());
        let mut st = GuidanceStats::default();
        let z = Tensor::filled(&[3, 1, 2, 2], 0.5);
        let e = guided_epsilon(&m, &z, 2, &GuidanceConfig::toward(0, 1.0), &s, &mut st).unwrap();
        assert_eq!(st.clip_events, 3);
        let plain = m.predict_eps(&z, &[2; 3]).unwrap();
        // each item moves by exactly the clip norm times √(1−ᾱ)
        let shift: f64 = e.data[..4].iter().zip(&plain.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((shift - GRAD_CLIP_NORM * (1.0 - s.alpha_bar(2)).sqrt()).abs() < 1e-9);
        assert!(matches!(
            guided_epsilon(&m, &z, 2, &GuidanceConfig::toward(3, 1.0), &s, &mut st),
            Err(Error::BadClassIndex { .. })
        ));
    }

    #[test]
    fn clip_denoised_bounds_the_estimate() {
        let s = NoiseSchedule::linear(30, 1e-3, 0.1).unwrap();
        // a wide clip never binds and matches the ε-form update
        let m = Constant(0.6, s.clone());
        for cfg in [SamplerConfig::default(), SamplerConfig { kind: SamplerKind::Ddim, ddim_steps: 7, ..SamplerConfig::default() }] {
            let plain = sample(&m, 2, &GuidanceConfig::none(), &cfg, &s, &mut rng::stream(3, "t", 0)).unwrap().0;
            let wide = SamplerConfig { clip_denoised: Some(1e9), ..cfg };
            let clipped = sample(&m, 2, &GuidanceConfig::none(), &wide, &s, &mut rng::stream(3, "t", 0)).unwrap().0;
            assert!(plain.data.iter().zip(&clipped.data).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        // a target outside the range lands on the bound
        let far = Constant(3.0, s.clone());
        let cfg = SamplerConfig { clip_denoised: Some(1.0), ..SamplerConfig::default() };
        let z = sample(&far, 2, &GuidanceConfig::none(), &cfg, &s, &mut rng::stream(3, "t", 0)).unwrap().0;
        assert!(z.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ddim_eta_zero_ignores_rng() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let m = Constant(-0.4, s.clone());
        let z = Tensor::filled(&[1, 1, 2, 2], 0.7);
        let taus = ddim_timesteps(10, 4).unwrap();
        let run = |seed| {
            let mut r = rng::stream(seed, "t", 0);
            let mut st = GuidanceStats::default();
            ddim_from(&m, z.clone(), &taus, 0.0, &GuidanceConfig::none(), &s, None, &mut NoiseSource::Shared(&mut r), &mut st).unwrap()
        };
        assert_eq!(run(1), run(2));
        assert!(run(1).data.iter().all(|v| (v + 0.4).abs() < 1e-9));
    }
}
