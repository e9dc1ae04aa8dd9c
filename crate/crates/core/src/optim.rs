//! Adaptive moment estimation with per-group learning rates.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Update count per group, for bias correction.
    steps: BTreeMap<ParamGroup, u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect::<Vec<_>>();
        Self { cfg, v: m.clone(), m, steps: BTreeMap::new() }
    }

    pub fn group_steps(&self, group: ParamGroup) -> u64 {
        self.steps.get(&group).copied().unwrap_or(0)
    }

    /// Applies one update using each tensor's `grad`. Groups mapped to `None`
    /// by `lr` are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> Option<f64>) {
        let groups: Vec<ParamGroup> = {
            let mut gs: Vec<_> = store.entries().iter().map(|e| e.group).collect();
            gs.sort();
            gs.dedup();
            gs
        };
        for g in groups {
            if lr(g).is_some() {
                *self.steps.entry(g).or_insert(0) += 1;
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let Some(rate) = lr(e.group) else { continue };
            let Some(grad) = e.tensor.grad.as_ref() else { continue };
            let t = self.steps[&e.group] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gr), (mi, vi)) in e.tensor.data.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                *w -= rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, e) in store.entries().iter().enumerate() {
            out.push((format!("adam.m/{}", e.name), Tensor::new(e.tensor.shape.clone(), self.m[i].clone()).expect("shape")));
            out.push((format!("adam.v/{}", e.name), Tensor::new(e.tensor.shape.clone(), self.v[i].clone()).expect("shape")));
        }
        for (g, s) in &self.steps {
            out.push((format!("adam.t/{g:?}"), Tensor::scalar(*s as f64)));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, named: &[(String, Tensor)]) -> Result<()> {
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        for (i, e) in store.entries().iter().enumerate() {
            let m = find(&format!("adam.m/{}", e.name));
            let v = find(&format!("adam.v/{}", e.name));
            match (m, v) {
                (Some(m), Some(v)) if m.numel() == e.tensor.numel() && v.numel() == e.tensor.numel() => {
                    self.m[i] = m.data.clone();
                    self.v[i] = v.data.clone();
                }
                _ => return Err(Error::CheckpointMismatch(format!("optimizer state for {}", e.name))),
            }
        }
        self.steps.clear();
        for g in [ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Classifier, ParamGroup::Other] {
            if let Some(t) = find(&format!("adam.t/{g:?}")) {
                self.steps.insert(g, t.data[0] as u64);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), ParamGroup::Other);
        s.tensor_mut(id).grad = Some(vec![0.5, -3.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, |_| Some(0.1));
        // bias-corrected first step is lr·sign(g) up to eps
        let d = &s.tensor(id).data;
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn skipped_group_is_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::filled(&[1], 1.0), ParamGroup::Encoder);
        let b = s.add("b", Tensor::filled(&[1], 1.0), ParamGroup::Classifier);
        s.tensor_mut(a).grad = Some(vec![1.0]);
        s.tensor_mut(b).grad = Some(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, |g| (g == ParamGroup::Encoder).then_some(0.1));
        assert_eq!(s.tensor(b).data[0], 1.0);
        assert_ne!(s.tensor(a).data[0], 1.0);
        assert_eq!(opt.group_steps(ParamGroup::Classifier), 0);
    }
}
