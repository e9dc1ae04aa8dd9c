//! Linear noise schedule and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed tables, indexed by 1-based timestep. Index 0 of the cumulative
/// table is the clean-data row (`ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().expect("nonempty");
            alpha_bars.push(prev * a);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// `β_t`, 1-based. Panics outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_1..ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε` with one timestep per batch item.
    pub fn q_sample(&self, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.shape != eps.shape {
            return Err(Error::ShapeMismatch(format!("q_sample: z0 {:?} vs eps {:?}", z0.shape, eps.shape)));
        }
        let n = z0.shape.first().copied().unwrap_or(0);
        if t.len() != n {
            return Err(Error::ShapeMismatch(format!("q_sample: {} timesteps for batch {n}", t.len())));
        }
        let per = if n == 0 { 0 } else { z0.numel() / n };
        let mut out = Vec::with_capacity(z0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check(ti)?;
            let (a, s) = (self.alpha_bar(ti).sqrt(), (1.0 - self.alpha_bar(ti)).sqrt());
            let zs = &z0.data[i * per..(i + 1) * per];
            let es = &eps.data[i * per..(i + 1) * per];
            out.extend(zs.iter().zip(es).map(|(z, e)| a * z + s * e));
        }
        Tensor::new(z0.shape.clone(), out)
    }

    /// Inverse of [`q_sample`](Self::q_sample) for the noise.
    pub fn recover_eps(&self, z0: &Tensor, t: &[usize], zt: &Tensor) -> Result<Tensor> {
        let n = z0.shape[0];
        let per = z0.numel() / n;
        let mut out = Vec::with_capacity(z0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check(ti)?;
            let (a, s) = (self.alpha_bar(ti).sqrt(), (1.0 - self.alpha_bar(ti)).sqrt());
            let zs = &z0.data[i * per..(i + 1) * per];
            let ts = &zt.data[i * per..(i + 1) * per];
            out.extend(zs.iter().zip(ts).map(|(z, x)| (x - a * z) / s));
        }
        Tensor::new(z0.shape.clone(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_hand_value() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        let one = Tensor::filled(&[1, 1], 1.0);
        let z = s.q_sample(&one, &[2], &one).unwrap();
        assert!((z.data[0] - (0.63f64.sqrt() + 0.37f64.sqrt())).abs() < 1e-12);
        assert!((z.data[0] - 1.4021).abs() < 1e-4);
    }

    #[test]
    fn q_sample_checks_timestep() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        let z = Tensor::zeros(&[1, 1]);
        assert!(matches!(s.q_sample(&z, &[0], &z), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(s.q_sample(&z, &[3], &z), Err(Error::TimestepOutOfRange { .. })));
    }
}
