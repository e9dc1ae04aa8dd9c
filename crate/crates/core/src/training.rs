//! Joint semi-supervised optimisation: noise-prediction loss on every sample,
//! sigmoid cross-entropy on the labeled pool, one update per step.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_weights, write_weights};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::JointModel;
use crate::nn::{Bound, ParamGroup};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_diff + w·L_class`.
    Joint,
    /// `L_class` alone; the up path is never updated.
    ClassifierOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub lr_diffusion: f64,
    pub lr_classifier: f64,
    pub class_loss_weight: f64,
    pub class_start_step: usize,
    pub batch_diffusion: usize,
    pub batch_classification: usize,
    pub label_fraction: f64,
    pub seed: u64,
    /// Classifier noise levels are drawn from `1..=round(fraction·T)`.
    pub class_t_max_fraction: f64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // full-scale reference: batches 64/32, warmup 5000 steps
        Self {
            total_steps: 6000,
            lr_diffusion: 2e-4,
            lr_classifier: 1e-4,
            class_loss_weight: 0.05,
            class_start_step: 500,
            batch_diffusion: 64,
            batch_classification: 32,
            label_fraction: 0.05,
            seed: 0,
            class_t_max_fraction: 0.3,
            objective: Objective::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.total_steps == 0 || self.class_start_step >= self.total_steps {
            return bad(format!("need class_start_step {} < total_steps {}", self.class_start_step, self.total_steps));
        }
        if self.batch_diffusion == 0 || self.batch_classification == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return bad(format!("label_fraction {} outside [0, 1]", self.label_fraction));
        }
        if !(self.lr_diffusion > 0.0 && self.lr_classifier > 0.0 && self.class_loss_weight >= 0.0) {
            return bad("learning rates must be positive and class_loss_weight nonnegative".into());
        }
        if !(self.class_t_max_fraction > 0.0 && self.class_t_max_fraction <= 1.0) {
            return bad(format!("class_t_max_fraction {} outside (0, 1]", self.class_t_max_fraction));
        }
        Ok(())
    }

    pub fn class_t_max(&self, sched: &NoiseSchedule) -> usize {
        ((self.class_t_max_fraction * sched.steps() as f64).round() as usize).clamp(1, sched.steps())
    }
}

/// Training inputs in model space. Unlabeled items carry no label vector.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub item_shape: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Option<Vec<f64>>>,
}

impl TrainSet {
    pub fn new(item_shape: Vec<usize>, inputs: Vec<Vec<f64>>, labels: Vec<Option<Vec<f64>>>) -> Result<Self> {
        let per: usize = item_shape.iter().product();
        if inputs.len() != labels.len() || inputs.iter().any(|x| x.len() != per) {
            return Err(Error::ShapeMismatch(format!("train set: {} inputs, {} label slots, item shape {item_shape:?}", inputs.len(), labels.len())));
        }
        Ok(Self { item_shape, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let items: Vec<&[f64]> = idx.iter().map(|&i| self.inputs[i].as_slice()).collect();
        Tensor::stack(&items, &self.item_shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub diffusion_loss: Option<f64>,
    pub classification_loss: Option<f64>,
    pub total_loss: f64,
}

impl TrainStepReport {
    pub const CSV_HEADER: &'static str = "step,diffusion_loss,classification_loss,total_loss";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!("{},{},{},{:.9e}", self.step, f(self.diffusion_loss), f(self.classification_loss), self.total_loss)
    }
}

/// Noise, timesteps and noised inputs for one diffusion batch.
fn noised(set: &TrainSet, idx: &[usize], t: &[usize], r: &mut Rng, sched: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let z0 = set.batch(idx)?;
    let eps = Tensor::new(z0.shape.clone(), rng::normals(r, z0.numel()))?;
    let zt = sched.q_sample(&z0, t, &eps)?;
    Ok((zt, eps))
}

/// `mean((ε − ε̂(z_t, t))²)` for a batch drawn uniformly from all of `set`.
pub fn diffusion_loss(model: &JointModel, g: &mut Graph, p: &Bound, set: &TrainSet, batch: usize, sched: &NoiseSchedule, r: &mut Rng) -> Result<Var> {
    let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..set.len())).collect();
    let t: Vec<usize> = (0..batch).map(|_| r.random_range(1..=sched.steps())).collect();
    let (zt, eps) = noised(set, &idx, &t, r, sched)?;
    let zt = g.constant(zt);
    let enc = model.encode(g, p, zt, &t)?;
    let eps_hat = model.decode(g, p, &enc)?;
    let eps = g.constant(eps);
    g.mse(eps_hat, eps)
}

/// Mean binary cross-entropy over classes and a batch drawn from the labeled
/// pool, each item noised to `t ∈ [1, t_max]`. Returns the loss and the items.
#[allow(clippy::too_many_arguments)]
pub fn classification_loss(
    model: &JointModel,
    g: &mut Graph,
    p: &Bound,
    set: &TrainSet,
    pool: &[usize],
    batch: usize,
    t_max: usize,
    sched: &NoiseSchedule,
    r: &mut Rng,
) -> Result<(Var, Vec<usize>)> {
    if pool.is_empty() {
        return Err(Error::EmptyLabeledBatch);
    }
    let idx: Vec<usize> = (0..batch).map(|_| pool[r.random_range(0..pool.len())]).collect();
    let t: Vec<usize> = (0..batch).map(|_| r.random_range(1..=t_max)).collect();
    let (zt, _) = noised(set, &idx, &t, r, sched)?;
    let mut y = Vec::with_capacity(batch * model.config.num_classes);
    for &i in &idx {
        let l = set.labels[i].as_ref().ok_or(Error::EmptyLabeledBatch)?;
        if l.len() != model.config.num_classes {
            return Err(Error::ShapeMismatch(format!("label vector of length {} for {} classes", l.len(), model.config.num_classes)));
        }
        y.extend_from_slice(l);
    }
    let zt = g.constant(zt);
    let enc = model.encode(g, p, zt, &t)?;
    let logits = model.head(g, p, enc.features)?;
    let y = g.constant(Tensor::new(vec![batch, model.config.num_classes], y)?);
    let l = g.bce_with_logits(logits, y)?;
    Ok((g.mean(l)?, idx))
}

/// Graph handles of one step's losses. `total` is `None` when nothing is
/// optimised (classifier-only objective before `class_start_step`).
pub struct StepLoss {
    pub diffusion: Option<Var>,
    pub classification: Option<Var>,
    pub total: Option<Var>,
    pub class_batch: Option<Vec<usize>>,
}

/// `L_diff + w·L_cls` for step `step`, with the batches that step draws.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(model: &JointModel, g: &mut Graph, p: &Bound, set: &TrainSet, pool: &[usize], cfg: &TrainConfig, sched: &NoiseSchedule, step: usize) -> Result<StepLoss> {
    let joint = cfg.objective == Objective::Joint;
    let with_class = class_loss_active(cfg, step);
    let mut out = StepLoss { diffusion: None, classification: None, total: None, class_batch: None };
    if joint {
        let mut r = rng::stream(cfg.seed, "diffusion-batch", step as u64);
        let l = diffusion_loss(model, g, p, set, cfg.batch_diffusion, sched, &mut r)?;
        out.diffusion = Some(l);
        out.total = Some(l);
    }
    if with_class {
        let mut r = rng::stream(cfg.seed, "class-batch", step as u64);
        let (l, idx) = classification_loss(model, g, p, set, pool, cfg.batch_classification, cfg.class_t_max(sched), sched, &mut r)?;
        out.class_batch = Some(idx);
        out.classification = Some(l);
        out.total = Some(match out.total {
            Some(d) => {
                let wl = g.scale(l, cfg.class_loss_weight)?;
                g.add(d, wl)?
            }
            None => l,
        });
    }
    Ok(out)
}

/// Finite-difference check of the full step-`step` objective with respect to
/// the model parameters at flat coordinates `coords`.
pub fn joint_loss_grad_check(model: &JointModel, set: &TrainSet, cfg: &TrainConfig, sched: &NoiseSchedule, step: usize, coords: &[usize], h: f64) -> Result<f64> {
    let pool = set.labeled_indices();
    crate::nn::param_grad_check(
        &model.params,
        |g, p| joint_loss(model, g, p, set, &pool, cfg, sched, step)?.total.ok_or_else(|| Error::ConfigInvalid("no loss term active at this step".into())),
        h,
        coords,
    )
}

/// Whether step `step` includes the classification term.
pub fn class_loss_active(cfg: &TrainConfig, step: usize) -> bool {
    step >= cfg.class_start_step && (cfg.objective == Objective::ClassifierOnly || cfg.class_loss_weight > 0.0)
}

pub struct Trainer {
    pub model: JointModel,
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    opt: Adam,
    step: usize,
    last_class_batch: Option<Vec<usize>>,
}

impl Trainer {
    pub fn new(model: JointModel, cfg: TrainConfig, sched: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(AdamConfig::default(), &model.params);
        Ok(Self { model, cfg, sched, opt, step: 0, last_class_batch: None })
    }

    /// Next step index (number of completed steps).
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Items of the most recent classification batch.
    pub fn last_class_batch(&self) -> Option<&[usize]> {
        self.last_class_batch.as_deref()
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    fn check_set(&self, set: &TrainSet) -> Result<Vec<usize>> {
        if set.is_empty() {
            return Err(Error::ConfigInvalid("empty training set".into()));
        }
        let pool = set.labeled_indices();
        let want = (self.cfg.label_fraction * set.len() as f64).round() as usize;
        if pool.len() != want {
            return Err(Error::ConfigInvalid(format!(
                "labeled pool has {} items, label_fraction {} of {} needs {want}",
                pool.len(),
                self.cfg.label_fraction,
                set.len()
            )));
        }
        Ok(pool)
    }

    pub fn train_step(&mut self, set: &TrainSet) -> Result<TrainStepReport> {
        let pool = self.check_set(set)?;
        let step = self.step;
        let cfg = &self.cfg;
        let joint = cfg.objective == Objective::Joint;
        let with_class = class_loss_active(cfg, step);

        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let StepLoss { diffusion: diff, classification: class, total, class_batch } = joint_loss(&self.model, &mut g, &p, set, &pool, cfg, &self.sched, step)?;
        if class_batch.is_some() {
            self.last_class_batch = class_batch;
        }
        let Some(total) = total else {
            // classifier-only objective during warmup: nothing to optimise
            self.step += 1;
            return Ok(TrainStepReport { step, diffusion_loss: None, classification_loss: None, total_loss: 0.0 });
        };
        let report = TrainStepReport {
            step,
            diffusion_loss: diff.map(|v| g.item(v)).transpose()?,
            classification_loss: class.map(|v| g.item(v)).transpose()?,
            total_loss: g.item(total)?,
        };
        if !report.total_loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: report.total_loss });
        }
        let mut grads = g.backward(total)?;
        self.model.params.collect_grads(&mut grads, &p);
        let (lr_d, lr_c) = (cfg.lr_diffusion, cfg.lr_classifier);
        self.opt.step(&mut self.model.params, |grp| match grp {
            ParamGroup::Encoder => Some(lr_d),
            ParamGroup::Decoder => joint.then_some(lr_d),
            ParamGroup::Classifier => with_class.then_some(lr_c),
            ParamGroup::Other => None,
        });
        self.model.params.zero_grads();
        self.step += 1;
        Ok(report)
    }

    /// Runs to `total_steps`, passing every report to `on_report`.
    pub fn run(&mut self, set: &TrainSet, mut on_report: impl FnMut(&TrainStepReport) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let r = self.train_step(set)?;
            on_report(&r)?;
        }
        Ok(())
    }

    /// Model weights, optimizer moments and the step counter.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = self.model.params.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named.extend(self.opt.state_tensors(&self.model.params));
        named.push(("trainer.step".into(), Tensor::scalar(self.step as f64)));
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_weights(&mut f, &refs)?;
        f.flush()?;
        Ok(())
    }

    /// Restores a checkpoint written by [`save_checkpoint`](Self::save_checkpoint);
    /// plain weight files restore the model and leave the optimizer fresh.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let named = read_weights(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let rest = self.model.params.load_named(named)?;
        if let Some((_, s)) = rest.iter().find(|(n, _)| n == "trainer.step") {
            self.opt.load_state(&self.model.params, &rest)?;
            self.step = s.item()? as usize;
        }
        Ok(())
    }
}

/// Convenience wrapper: fresh model, full run, all reports.
pub fn train_joint(model: JointModel, set: &TrainSet, cfg: TrainConfig, sched: NoiseSchedule) -> Result<(JointModel, Vec<TrainStepReport>)> {
    let mut tr = Trainer::new(model, cfg, sched)?;
    let mut reports = Vec::new();
    tr.run(set, |r| {
        reports.push(*r);
        Ok(())
    })?;
    Ok((tr.model, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    fn toy_set(n: usize, labeled: usize) -> TrainSet {
        let mut r = rng::stream(1, "toy", 0);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| rng::normals(&mut r, 64)).collect();
        let labels = (0..n).map(|i| (i < labeled).then(|| vec![(i % 2) as f64, 1.0, 0.0])).collect();
        TrainSet::new(vec![1, 8, 8], inputs, labels).unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            class_start_step: 1,
            batch_diffusion: 3,
            batch_classification: 2,
            label_fraction: 0.5,
            lr_diffusion: 1e-3,
            lr_classifier: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-3, 0.1).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(cfg(4).validate().is_ok());
        assert!(TrainConfig { class_start_step: 4, ..cfg(4) }.validate().is_err());
        assert!(TrainConfig { batch_classification: 0, ..cfg(4) }.validate().is_err());
    }

    #[test]
    fn zero_head_gives_ln2_class_loss() {
        let m = JointModel::new(tiny(), 0).unwrap();
        let set = toy_set(6, 3);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let (l, idx) = classification_loss(&m, &mut g, &p, &set, &[0, 1, 2], 4, 5, &sched(), &mut rng::stream(0, "t", 0)).unwrap();
        assert!((g.item(l).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(idx.iter().all(|&i| i < 3));
        let err = classification_loss(&m, &mut g, &p, &set, &[], 4, 5, &sched(), &mut rng::stream(0, "t", 0));
        assert!(matches!(err, Err(Error::EmptyLabeledBatch)));
    }

    #[test]
    fn classifier_untouched_before_start() {
        let m = JointModel::new(tiny(), 0).unwrap();
        let before: Vec<_> = m.params.entries().iter().map(|e| e.tensor.data.clone()).collect();
        let mut tr = Trainer::new(m, TrainConfig { class_start_step: 2, ..cfg(3) }, sched()).unwrap();
        let set = toy_set(6, 3);
        let r0 = tr.train_step(&set).unwrap();
        assert!(r0.classification_loss.is_none());
        let r1 = tr.train_step(&set).unwrap();
        assert!(r1.classification_loss.is_none());
        for (e, b) in tr.model.params.entries().iter().zip(&before) {
            if e.group == ParamGroup::Classifier {
                assert_eq!(&e.tensor.data, b, "{}", e.name);
            }
        }
        assert_eq!(tr.optimizer().group_steps(ParamGroup::Classifier), 0);
        let r2 = tr.train_step(&set).unwrap();
        let c = r2.classification_loss.unwrap();
        assert!((r2.total_loss - (r2.diffusion_loss.unwrap() + 0.05 * c)).abs() < 1e-12);
        assert!(tr.last_class_batch().unwrap().iter().all(|&i| i < 3));
    }

    #[test]
    fn rejects_wrong_pool_size() {
        let mut tr = Trainer::new(JointModel::new(tiny(), 0).unwrap(), cfg(2), sched()).unwrap();
        assert!(matches!(tr.train_step(&toy_set(6, 2)), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn resume_continues_bitwise() {
        let set = toy_set(6, 3);
        let (full, reports) = train_joint(JointModel::new(tiny(), 0).unwrap(), &set, cfg(4), sched()).unwrap();
        assert_eq!(reports.len(), 4);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        let mut a = Trainer::new(JointModel::new(tiny(), 0).unwrap(), cfg(4), sched()).unwrap();
        a.train_step(&set).unwrap();
        a.train_step(&set).unwrap();
        a.save_checkpoint(&path).unwrap();
        let mut b = Trainer::new(JointModel::new(tiny(), 7).unwrap(), cfg(4), sched()).unwrap();
        b.load_checkpoint(&path).unwrap();
        assert_eq!(b.step_index(), 2);
        let mut rest = Vec::new();
        b.run(&set, |r| {
            rest.push(*r);
            Ok(())
        })
        .unwrap();
        assert_eq!(rest, reports[2..]);
        for (x, y) in full.params.entries().iter().zip(b.model.params.entries()) {
            assert_eq!(x.tensor.data, y.tensor.data);
        }
    }
}
