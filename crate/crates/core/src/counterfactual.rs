//! Visual counterfactuals: noise an input part-way, then run the guided reverse
//! process back to a clean sample.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::autoencoder::Codec;
use crate::error::{Error, Result};
use crate::eval::{box_means, other_abs_change, ConfidenceRow, OracleClassifier};
use crate::model::Denoiser;
use crate::phantom::BBox;
use crate::rng::{self, Rng};
use crate::sampling::{ddim_from, ddim_timesteps, ddpm_from, Direction, GuidanceConfig, GuidanceStats, NoiseSource, SamplerConfig, SamplerKind};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VceConfig {
    pub t_star: usize,
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// When set, each item draws its own depth uniformly from this inclusive range.
    #[serde(default)]
    pub t_star_range: Option<(usize, usize)>,
}

impl VceConfig {
    /// Removal default: depth `0.3·T`, guided away from the class.
    pub fn removal(sched: &NoiseSchedule, class: usize, scale: f64) -> Self {
        Self { t_star: depth(sched, 0.3), guidance: GuidanceConfig::away(class, scale), sampler: SamplerConfig::default(), t_star_range: None }
    }

    /// Enforcing default: depth `0.2·T`, guided toward the class.
    pub fn enforcing(sched: &NoiseSchedule, class: usize, scale: f64) -> Self {
        Self { t_star: depth(sched, 0.2), guidance: GuidanceConfig::toward(class, scale), sampler: SamplerConfig::default(), t_star_range: None }
    }

    pub fn validate(&self, sched: &NoiseSchedule, classes: usize) -> Result<()> {
        let t = sched.steps();
        let ok = |d: usize| d > 0 && d < t;
        if !ok(self.t_star) {
            return Err(Error::ConfigInvalid(format!("t_star {} must lie in (0, {t})", self.t_star)));
        }
        if let Some((lo, hi)) = self.t_star_range {
            if !(ok(lo) && ok(hi) && lo <= hi) {
                return Err(Error::ConfigInvalid(format!("t_star range ({lo}, {hi}) must lie in (0, {t})")));
            }
        }
        if self.sampler.kind == SamplerKind::Ddim && self.sampler.ddim_steps == 0 {
            return Err(Error::ConfigInvalid("ddim_steps must be positive".into()));
        }
        self.guidance.validate(classes)
    }
}

fn depth(sched: &NoiseSchedule, frac: f64) -> usize {
    ((frac * sched.steps() as f64).round() as usize).clamp(1, sched.steps().saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub item_id: String,
    pub original: Vec<f64>,
    pub counterfactual: Vec<f64>,
    pub diff: Vec<f64>,
    pub abs_diff: Vec<f64>,
    pub t_star: usize,
    pub guidance: GuidanceConfig,
    pub clip_events: usize,
    pub warnings: Vec<String>,
}

impl CounterfactualResult {
    pub fn mean_abs_diff(&self) -> f64 {
        self.abs_diff.iter().sum::<f64>() / self.abs_diff.len() as f64
    }
}

pub const UNTRAINED_WARNING: &str = "UntrainedModelWarning: denoiser weights are still at initialisation";

/// Counterfactuals for `images` (each `side × side` in `[−1, 1]`) processed as
/// one batch. Each item draws noise from its own stream keyed by its id, so
/// results do not depend on batch composition.
#[allow(clippy::too_many_arguments)]
pub fn generate_counterfactuals<D: Denoiser + ?Sized>(
    model: &D,
    codec: &dyn Codec,
    images: &[&[f64]],
    ids: &[String],
    side: usize,
    cfg: &VceConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<CounterfactualResult>> {
    cfg.validate(sched, model.num_classes())?;
    if images.len() != ids.len() {
        return Err(Error::ShapeMismatch(format!("{} images, {} ids", images.len(), ids.len())));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut rngs: Vec<Rng> = ids.iter().map(|id| rng::stream(seed, &format!("vce:{id}"), 0)).collect();
    if let Some((lo, hi)) = cfg.t_star_range {
        // per-item depths: run items one at a time
        let mut out = Vec::with_capacity(images.len());
        for (i, r) in rngs.iter_mut().enumerate() {
            let t = r.random_range(lo..=hi);
            out.extend(run_batch(model, codec, &images[i..=i], &ids[i..=i], side, cfg, t, sched, std::slice::from_mut(r))?);
        }
        return Ok(out);
    }
    run_batch(model, codec, images, ids, side, cfg, cfg.t_star, sched, &mut rngs)
}

#[allow(clippy::too_many_arguments)]
fn run_batch<D: Denoiser + ?Sized>(
    model: &D,
    codec: &dyn Codec,
    images: &[&[f64]],
    ids: &[String],
    side: usize,
    cfg: &VceConfig,
    t_star: usize,
    sched: &NoiseSchedule,
    rngs: &mut [Rng],
) -> Result<Vec<CounterfactualResult>> {
    let x = Tensor::stack(images, &[1, side, side])?;
    let z0 = codec.encode_mean(&x)?;
    let mut noise = NoiseSource::PerItem(rngs);
    let eps = noise.normals(&z0.shape)?;
    let n = images.len();
    let zt = sched.q_sample(&z0, &vec![t_star; n], &eps)?;
    let mut stats = GuidanceStats::default();
    let z = match cfg.sampler.kind {
        SamplerKind::Ddpm => ddpm_from(model, zt, t_star, &cfg.guidance, sched, cfg.sampler.clip_denoised, &mut noise, &mut stats)?,
        SamplerKind::Ddim => {
            let taus = ddim_timesteps(t_star, cfg.sampler.ddim_steps.min(t_star))?;
            ddim_from(model, zt, &taus, cfg.sampler.eta, &cfg.guidance, sched, cfg.sampler.clip_denoised, &mut noise, &mut stats)?
        }
    };
    let xp = codec.decode(&z)?;
    let warnings = if model.is_untrained() { vec![UNTRAINED_WARNING.to_string()] } else { Vec::new() };
    let per = side * side;
    Ok((0..n)
        .map(|i| {
            let original = images[i].to_vec();
            let counterfactual: Vec<f64> = xp.data[i * per..(i + 1) * per].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let diff: Vec<f64> = counterfactual.iter().zip(&original).map(|(a, b)| a - b).collect();
            let abs_diff = diff.iter().map(|d| d.abs()).collect();
            CounterfactualResult {
                item_id: ids[i].clone(),
                original,
                counterfactual,
                diff,
                abs_diff,
                t_star,
                guidance: cfg.guidance,
                clip_events: stats.clip_events,
                warnings: warnings.clone(),
            }
        })
        .collect())
}

/// Single-image convenience wrapper.
#[allow(clippy::too_many_arguments)]
pub fn generate_counterfactual<D: Denoiser + ?Sized>(
    model: &D,
    codec: &dyn Codec,
    image: &[f64],
    id: &str,
    side: usize,
    cfg: &VceConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<CounterfactualResult> {
    let mut v = generate_counterfactuals(model, codec, &[image], &[id.to_string()], side, cfg, sched, seed)?;
    Ok(v.remove(0))
}

/// An item offered to [`batch_vce`].
#[derive(Debug, Clone)]
pub struct VceItem<'a> {
    pub id: String,
    pub image: &'a [f64],
    pub labels: Vec<bool>,
    pub bboxes: Vec<BBox>,
}

/// Items eligible for a run: for removal, label present and oracle score above
/// ½; for enforcing, label absent and oracle score below ½. At most `limit`,
/// in input order.
pub fn select_items<'a>(items: &[VceItem<'a>], oracle_scores: &[Vec<f64>], class: usize, direction: Direction, limit: usize) -> Vec<VceItem<'a>> {
    items
        .iter()
        .zip(oracle_scores)
        .filter(|(it, s)| match direction {
            Direction::Away => it.labels[class] && s[class] > 0.5,
            Direction::Toward => !it.labels[class] && s[class] < 0.5,
            Direction::None => true,
        })
        .take(limit)
        .map(|(it, _)| it.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VceRow {
    pub item_id: String,
    pub class: usize,
    pub direction: Direction,
    pub score_before: f64,
    pub score_after: f64,
    pub other_mean_abs_change: f64,
    pub inbox_mean_diff: Option<f64>,
    pub outbox_mean_diff: Option<f64>,
}

impl VceRow {
    pub const CSV_HEADER: &'static str = "item_id,class,direction,score_before,score_after,other_mean_abs_change,inbox_mean_diff,outbox_mean_diff";

    pub fn csv_row(&self, class_name: &str) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let dir = match self.direction {
            Direction::Toward => "toward",
            Direction::Away => "away",
            Direction::None => "none",
        };
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{}",
            self.item_id,
            class_name,
            dir,
            self.score_before,
            self.score_after,
            self.other_mean_abs_change,
            f(self.inbox_mean_diff),
            f(self.outbox_mean_diff)
        )
    }
}

pub struct VceBatch {
    pub results: Vec<CounterfactualResult>,
    pub rows: Vec<VceRow>,
    pub summary: ConfidenceRow,
}

/// Runs counterfactuals for already-selected items in chunks of `batch`, then
/// scores originals and counterfactuals with the oracle.
#[allow(clippy::too_many_arguments)]
pub fn batch_vce<D: Denoiser + ?Sized>(
    model: &D,
    codec: &dyn Codec,
    items: &[VceItem],
    side: usize,
    cfg: &VceConfig,
    sched: &NoiseSchedule,
    seed: u64,
    oracle: &OracleClassifier,
    batch: usize,
) -> Result<VceBatch> {
    if items.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut results = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let imgs: Vec<&[f64]> = chunk.iter().map(|it| it.image).collect();
        let ids: Vec<String> = chunk.iter().map(|it| it.id.clone()).collect();
        results.extend(generate_counterfactuals(model, codec, &imgs, &ids, side, cfg, sched, seed)?);
    }
    let before = oracle.predict_proba(&results.iter().map(|r| r.original.as_slice()).collect::<Vec<_>>())?;
    let after = oracle.predict_proba(&results.iter().map(|r| r.counterfactual.as_slice()).collect::<Vec<_>>())?;
    let k = cfg.guidance.target_class;
    let rows = results
        .iter()
        .zip(items)
        .enumerate()
        .map(|(i, (r, it))| {
            let boxed = it.bboxes.iter().find(|b| b.class == k).map(|b| box_means(&r.abs_diff, side, b));
            VceRow {
                item_id: r.item_id.clone(),
                class: k,
                direction: cfg.guidance.direction,
                score_before: before[i][k],
                score_after: after[i][k],
                other_mean_abs_change: other_abs_change(&before[i], &after[i], k),
                inbox_mean_diff: boxed.map(|b| b.0),
                outbox_mean_diff: boxed.map(|b| b.1),
            }
        })
        .collect();
    let summary = crate::eval::confidence_row(&before, &after, k)?;
    Ok(VceBatch { results, rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::Identity;
    use crate::model::{tests::tiny, JointModel};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-3, 0.1).unwrap()
    }

    #[test]
    fn validation() {
        let s = sched();
        let mut c = VceConfig::removal(&s, 0, 1.0);
        assert_eq!(c.t_star, 6);
        assert!(c.validate(&s, 3).is_ok());
        c.t_star = 20;
        assert!(c.validate(&s, 3).is_err());
        c.t_star = 0;
        assert!(c.validate(&s, 3).is_err());
        assert_eq!(VceConfig::enforcing(&s, 0, 1.0).t_star, 4);
    }

    #[test]
    fn results_are_consistent_and_batch_independent() {
        let m = JointModel::new(tiny(), 0).unwrap();
        let s = sched();
        let imgs: Vec<Vec<f64>> = (0..3).map(|k| (0..64).map(|i| ((i * (k + 3)) % 17) as f64 / 8.5 - 1.0).collect()).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let ids: Vec<String> = (0..3).map(|i| format!("test_{i}")).collect();
        let cfg = VceConfig::removal(&s, 1, 2.0);
        let all = generate_counterfactuals(&m, &Identity, &refs, &ids, 8, &cfg, &s, 4).unwrap();
        let one = generate_counterfactual(&m, &Identity, refs[2], &ids[2], 8, &cfg, &s, 4).unwrap();
        assert_eq!(all[2].counterfactual, one.counterfactual);
        for r in &all {
            assert_eq!(r.original.len(), r.counterfactual.len());
            assert!(r.abs_diff.iter().zip(&r.diff).all(|(a, d)| *a == d.abs()));
            assert!(r.warnings.iter().any(|w| w.starts_with("UntrainedModelWarning")));
            assert_eq!((r.t_star, r.guidance), (6, cfg.guidance));
        }
    }

    #[test]
    fn empty_selection_errors() {
        let m = JointModel::new(tiny(), 0).unwrap();
        let o = OracleClassifier::new(8, 3, &Default::default()).unwrap();
        let s = sched();
        let r = batch_vce(&m, &Identity, &[], 8, &VceConfig::removal(&s, 0, 1.0), &s, 0, &o, 4);
        assert!(matches!(r, Err(Error::EmptySelection)));
    }
}
