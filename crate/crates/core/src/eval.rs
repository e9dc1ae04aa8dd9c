//! Evaluation protocols: rank AUC, counterfactual confidence tables, box
//! localisation, Fréchet feature distance and the external oracle classifier.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::counterfactual::CounterfactualResult;
use crate::error::{Error, Result};
use crate::model::{Denoiser, JointModel};
use crate::nn::{Bound, Conv2d, Linear, ParamGroup, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::BBox;
use crate::rng;
use crate::schedule::NoiseSchedule;

pub const MIN_FRECHET_SAMPLES: usize = 50;

/// Mann–Whitney estimate of `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` using midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[order[k]]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC per class from `(N, K)` probabilities and boolean labels.
pub fn per_class_auc(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Vec<f64>> {
    let k = probs.first().map_or(0, Vec::len);
    (0..k)
        .map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let l: Vec<bool> = labels.iter().map(|y| y[c]).collect();
            auc(&s, &l)
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_cov(x: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mut mu = vec![0.0; d];
    for row in x {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for row in x {
        let c: Vec<f64> = row.iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `|μ_a − μ_b|² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})` on feature rows.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    for set in [a, b] {
        if set.len() < MIN_FRECHET_SAMPLES {
            return Err(Error::TooFewSamples { needed: MIN_FRECHET_SAMPLES, got: set.len() });
        }
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::ShapeMismatch("feature rows differ in length".into()));
    }
    let (ma, sa) = mean_cov(a);
    let (mb, sb) = mean_cov(b);
    let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    // tr((Σa Σb)^½) = tr((Σa^½ Σb Σa^½)^½), the inner product being symmetric PSD
    let ra = sym_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((dmu + sa.trace() + sb.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub width: usize,
    pub feature_dim: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 32, lr: 1e-3, seed: 0, width: 16, feature_dim: 128 }
    }
}

/// Plain three-stage convolutional classifier, no time input, no skips.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub params: ParamStore,
    pub side: usize,
    pub classes: usize,
    convs: Vec<Conv2d>,
    fc: Linear,
    out: Linear,
}

const ORACLE_SLOPE: f64 = 0.1;

impl OracleClassifier {
    pub fn new(side: usize, classes: usize, cfg: &OracleConfig) -> Result<Self> {
        if side % 8 != 0 || classes == 0 {
            return Err(Error::ConfigInvalid(format!("oracle needs a side divisible by 8, got {side}")));
        }
        let mut r = rng::stream(cfg.seed, "oracle-init", 0);
        let mut s = ParamStore::new();
        let o = ParamGroup::Other;
        let w = cfg.width;
        let convs = vec![
            Conv2d::new(&mut s, "oracle.conv0", 1, w, 3, 1, 1, o, &mut r, false),
            Conv2d::new(&mut s, "oracle.conv1", w, 2 * w, 3, 1, 1, o, &mut r, false),
            Conv2d::new(&mut s, "oracle.conv2", 2 * w, 2 * w, 3, 1, 1, o, &mut r, false),
        ];
        let flat = 2 * w * (side / 8) * (side / 8);
        let fc = Linear::new(&mut s, "oracle.fc", flat, cfg.feature_dim, o, &mut r, false);
        let out = Linear::new(&mut s, "oracle.out", cfg.feature_dim, classes, o, &mut r, false);
        Ok(Self { params: s, side, classes, convs, fc, out })
    }

    /// Penultimate features and logits.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let n = g.shape(x)[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h)?;
            h = g.leaky_relu(h, ORACLE_SLOPE)?;
            h = g.avg_pool2d(h, 2)?;
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat])?;
        let f = self.fc.forward(g, p, h)?;
        let f = g.leaky_relu(f, ORACLE_SLOPE)?;
        let logits = self.out.forward(g, p, f)?;
        Ok((f, logits))
    }

    fn stack(&self, images: &[&[f64]]) -> Result<Tensor> {
        Tensor::stack(images, &[1, self.side, self.side])
    }

    fn run(&self, images: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut feats = Vec::with_capacity(images.len());
        let mut probs = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(self.stack(chunk)?);
            let (f, l) = self.forward(&mut g, &p, x)?;
            let fd = g.shape(f)[1];
            feats.extend(g.value(f).chunks(fd).map(<[f64]>::to_vec));
            probs.extend(g.value(l).chunks(self.classes).map(|r| r.iter().map(|&v| crate::autodiff::sigmoid(v)).collect()));
        }
        Ok((feats, probs))
    }

    /// Sigmoid scores per class.
    pub fn predict_proba(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.1)
    }

    pub fn features(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(images)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.params.load(path)
    }
}

/// Trains on clean, fully labeled images; returns the oracle and per-step losses.
pub fn train_oracle(images: &[&[f64]], labels: &[Vec<bool>], side: usize, cfg: &OracleConfig) -> Result<(OracleClassifier, Vec<f64>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::ConfigInvalid("oracle needs one label vector per image".into()));
    }
    let classes = labels[0].len();
    let mut oracle = OracleClassifier::new(side, classes, cfg)?;
    let mut opt = Adam::new(AdamConfig::default(), &oracle.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "oracle-batch", step as u64);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..images.len())).collect();
        let x = oracle.stack(&idx.iter().map(|&i| images[i]).collect::<Vec<_>>())?;
        let y: Vec<f64> = idx.iter().flat_map(|&i| labels[i].iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
        let mut g = Graph::new();
        let p = oracle.params.bind(&mut g, true);
        let xv = g.constant(x);
        let (_, logits) = oracle.forward(&mut g, &p, xv)?;
        let yv = g.constant(Tensor::new(vec![cfg.batch, classes], y)?);
        let l = g.bce_with_logits(logits, yv)?;
        let loss = g.mean(l)?;
        let v = g.item(loss)?;
        if !v.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: v });
        }
        let mut grads = g.backward(loss)?;
        oracle.params.collect_grads(&mut grads, &p);
        opt.step(&mut oracle.params, |_| Some(cfg.lr));
        oracle.params.zero_grads();
        losses.push(v);
    }
    Ok((oracle, losses))
}

/// Joint-model class probabilities on `(C, H, W)` inputs evaluated at `t = 1`
/// with seeded forward noise.
pub fn model_probabilities(model: &JointModel, inputs: &[&[f64]], sched: &NoiseSchedule, seed: u64) -> Result<Vec<Vec<f64>>> {
    let shape = model.sample_shape();
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(inputs.len());
    for (ci, chunk) in inputs.chunks(128).enumerate() {
        let z0 = Tensor::stack(chunk, &shape)?;
        let mut r = rng::stream(seed, "auc-noise", ci as u64);
        let eps = Tensor::new(z0.shape.clone(), rng::normals(&mut r, z0.numel()))?;
        let t = vec![1; chunk.len()];
        let zt = sched.q_sample(&z0, &t, &eps)?;
        let p = model.predict_proba(&zt, &t)?;
        out.extend(p.data.chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Oracle Fréchet distance between two image sets.
pub fn frechet_feature_distance(oracle: &OracleClassifier, a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    for set in [a, b] {
        if set.len() < MIN_FRECHET_SAMPLES {
            return Err(Error::TooFewSamples { needed: MIN_FRECHET_SAMPLES, got: set.len() });
        }
    }
    frechet_distance(&oracle.features(a)?, &oracle.features(b)?)
}

/// One row of the counterfactual confidence tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub class: usize,
    pub n: usize,
    pub orig: f64,
    pub counterfactual: f64,
    pub diff: f64,
    pub other_diff: f64,
}

/// Aggregates per-item oracle scores before and after.
pub fn confidence_row(before: &[Vec<f64>], after: &[Vec<f64>], target: usize) -> Result<ConfidenceRow> {
    if before.is_empty() {
        return Err(Error::EmptyResults);
    }
    if before.len() != after.len() {
        return Err(Error::ShapeMismatch(format!("{} scores before, {} after", before.len(), after.len())));
    }
    let k = before[0].len();
    if target >= k {
        return Err(Error::BadClassIndex { index: target, classes: k });
    }
    let orig = mean(&before.iter().map(|s| s[target]).collect::<Vec<_>>());
    let cf = mean(&after.iter().map(|s| s[target]).collect::<Vec<_>>());
    let other: Vec<f64> = before.iter().zip(after).map(|(b, a)| other_abs_change(b, a, target)).collect();
    Ok(ConfidenceRow { class: target, n: before.len(), orig, counterfactual: cf, diff: cf - orig, other_diff: mean(&other) })
}

/// Mean `|Δscore|` over the classes other than `target`.
pub fn other_abs_change(before: &[f64], after: &[f64], target: usize) -> f64 {
    let v: Vec<f64> = (0..before.len()).filter(|&c| c != target).map(|c| (after[c] - before[c]).abs()).collect();
    if v.is_empty() {
        0.0
    } else {
        mean(&v)
    }
}

pub fn cf_confidence_table(oracle: &OracleClassifier, results: &[CounterfactualResult], target: usize) -> Result<ConfidenceRow> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let before = oracle.predict_proba(&results.iter().map(|r| r.original.as_slice()).collect::<Vec<_>>())?;
    let after = oracle.predict_proba(&results.iter().map(|r| r.counterfactual.as_slice()).collect::<Vec<_>>())?;
    confidence_row(&before, &after, target)
}

/// Mean `|x′ − x|` inside and outside one box.
pub fn box_means(abs_diff: &[f64], side: usize, b: &BBox) -> (f64, f64) {
    let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for (p, v) in abs_diff.iter().enumerate() {
        let acc = if b.contains(p % side, p / side) { &mut inside } else { &mut outside };
        acc.0 += v;
        acc.1 += 1;
    }
    let m = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    (m(inside), m(outside))
}

/// `(inbox_mean_diff, outbox_mean_diff)` per result, using each item's box for
/// the guided class.
pub fn bbox_localization(results: &[CounterfactualResult], bboxes: &[Vec<BBox>], side: usize) -> Result<Vec<(f64, f64)>> {
    if results.len() != bboxes.len() {
        return Err(Error::ShapeMismatch(format!("{} results, {} box lists", results.len(), bboxes.len())));
    }
    results
        .iter()
        .zip(bboxes)
        .enumerate()
        .map(|(i, (r, bs))| {
            let class = r.guidance.target_class;
            let b = bs.iter().find(|b| b.class == class).ok_or(Error::MissingBbox { item: i, class })?;
            Ok(box_means(&r.abs_diff, side, b))
        })
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub class: usize,
    pub n: usize,
    pub inbox: Vec<f64>,
    pub outbox: Vec<f64>,
    pub median_inbox: f64,
    pub median_outbox: f64,
}

impl LocalizationSummary {
    pub fn new(class: usize, pairs: &[(f64, f64)]) -> Self {
        let inbox: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let outbox: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Self { class, n: pairs.len(), median_inbox: median(&inbox), median_outbox: median(&outbox), inbox, outbox }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub auc: Vec<f64>,
    pub mean_auc: Option<f64>,
    pub removal: Vec<ConfidenceRow>,
    pub enforcing: Vec<ConfidenceRow>,
    pub localization: Vec<LocalizationSummary>,
    pub frechet_unguided: Vec<f64>,
    pub frechet_guided: Vec<f64>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_values() {
        assert_eq!(auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[false, true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.5, 0.5], &[true, true]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn frechet_hand_values() {
        let a: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64 / 10.0]).collect();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 3.0]).collect();
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-9);
        assert!(matches!(frechet_distance(&a[..10], &b), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn box_means_constructed() {
        let mut d = vec![0.0; 32 * 32];
        let b = BBox { class: 1, x0: 3, y0: 5, x1: 6, y1: 8 };
        for y in 5..=8 {
            for x in 3..=6 {
                d[y * 32 + x] = 1.0;
            }
        }
        assert_eq!(box_means(&d, 32, &b), (1.0, 0.0));
        assert_eq!(box_means(&vec![0.0; 1024], 32, &b), (0.0, 0.0));
    }

    #[test]
    fn confidence_row_identity() {
        let s = vec![vec![0.2, 0.7, 0.4], vec![0.9, 0.1, 0.5]];
        let r = confidence_row(&s, &s, 1).unwrap();
        assert_eq!((r.diff, r.other_diff), (0.0, 0.0));
        assert!(matches!(confidence_row(&[], &[], 0), Err(Error::EmptyResults)));
    }

    #[test]
    fn oracle_has_no_time_path() {
        let o = OracleClassifier::new(32, 3, &OracleConfig::default()).unwrap();
        assert!(o.params.entries().iter().all(|e| e.name.starts_with("oracle.")));
        assert!(!o.params.entries().iter().any(|e| e.name.contains("time") || e.name.contains("norm")));
        let img = vec![0.0; 1024];
        let f = o.features(&[&img, &img]).unwrap();
        assert_eq!((f.len(), f[0].len()), (2, 128));
    }
}
