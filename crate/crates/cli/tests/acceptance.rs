//! Acceptance suite. One PASS/FAIL line per criterion.
//!
//! `cargo test -p jdl-cli --test acceptance` runs everything (about an hour on
//! one core). Pass criterion numbers after `--` to run a subset. The process
//! exits nonzero on a failure only when `JDL_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use jdl_core::autodiff::gradcheck::primitive_suite;
use jdl_core::autoencoder::{reconstruction_mse, train_autoencoder, AeTrainConfig, Codec, Identity, LatentCodec, LatentConfig};
use jdl_core::counterfactual::{batch_vce, select_items, VceBatch, VceConfig, VceItem};
use jdl_core::eval::{frechet_feature_distance, mean, model_probabilities, per_class_auc, LocalizationSummary, OracleClassifier, OracleConfig};
use jdl_core::phantom::{build_dataset, Dataset, CLASS_NAMES, NUM_CLASSES, SIDE};
use jdl_core::sampling::{sample, Direction, GuidanceConfig, SamplerConfig, SamplerKind};
use jdl_core::training::{joint_loss_grad_check, Objective, TrainConfig, TrainSet, Trainer};
use jdl_core::{rng, ClassTarget, Denoiser, JointModel, NoiseSchedule, Result, ScheduleConfig, Tensor, UNetConfig};
use rand::Rng as _;

// Pinned tolerances and budgets.
const GRAD_TOL: f64 = 1e-4;
const COLLAPSE_TOL: f64 = 1e-6;
const QUICK_BUDGET_S: f64 = 60.0;
const GAIN_MIN: f64 = 0.02;
const GAIN_BUDGET_S: f64 = 30.0 * 60.0;
const VCE_DIFF_MIN: f64 = 0.20;
const VCE_BUDGET_S: f64 = 10.0 * 60.0;
const OTHER_RATIO_MAX: f64 = 0.5;
const LOC_RATIO_SMALL: f64 = 1.5;
const LOC_RATIO_HEART: f64 = 1.0;
const AE_MSE_MAX: f64 = 0.01;
const LATENT_DIFF_MIN: f64 = 0.15;

// Desk-scale experiment settings.
const N_TRAIN: usize = 4000;
const N_TEST: usize = 1000;
const PRIORS: [f64; NUM_CLASSES] = [0.3; NUM_CLASSES];
const STEPS: usize = 1500;
const SEEDS: [u64; 3] = [0, 1, 2];
const GAIN_FRACTION: f64 = 0.05;
const FRACTIONS: [f64; 4] = [0.02, 0.05, 0.10, 0.20];
const VCE_FRACTION: f64 = 0.20;
const VCE_ITEMS: usize = 100;
const VCE_SCALE: f64 = 100.0;
const GEN_N: usize = 100;
const GEN_BATCH: usize = 50;
const GEN_SCALE: f64 = 5.0;
const AUC_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sched() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn unet(input_channels: usize, image_side: usize) -> UNetConfig {
    UNetConfig { input_channels, image_side, base_channels: 8, channel_multipliers: vec![1, 2, 2], time_embed_dim: 32, classifier_hidden: 64, ..UNetConfig::default() }
}

fn tiny() -> UNetConfig {
    UNetConfig {
        input_channels: 1,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        num_res_blocks_per_stage: 1,
        time_embed_dim: 8,
        image_side: 8,
        feature_cap: 10_000,
        classifier_hidden: 6,
        num_classes: 3,
    }
}

fn train_config(fraction: f64, seed: u64, objective: Objective) -> TrainConfig {
    TrainConfig {
        total_steps: STEPS,
        class_start_step: 0,
        batch_diffusion: 16,
        batch_classification: 16,
        class_loss_weight: 1.0,
        lr_diffusion: 2e-4,
        lr_classifier: 2e-4,
        label_fraction: fraction,
        seed,
        objective,
        ..TrainConfig::default()
    }
}

fn dataset(seed: u64, fraction: f64) -> Dataset {
    build_dataset(N_TRAIN, N_TEST, PRIORS, fraction, 1000 + seed).unwrap()
}

fn test_labels(ds: &Dataset) -> Vec<Vec<bool>> {
    ds.test.iter().map(|s| s.labels.to_vec()).collect()
}

fn test_refs(ds: &Dataset) -> Vec<&[f64]> {
    ds.test.iter().map(|s| s.image.as_slice()).collect()
}

fn encode_all(codec: &dyn Codec, images: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let z = codec.encode_mean(&Tensor::stack(chunk, &[1, SIDE, SIDE]).unwrap()).unwrap();
        out.extend((0..chunk.len()).map(|i| z.item_slice(i).to_vec()));
    }
    out
}

struct Trained {
    model: JointModel,
    auc: Vec<f64>,
    secs: f64,
}

impl Trained {
    fn mean_auc(&self) -> f64 {
        mean(&self.auc)
    }
}

fn train_model(ds: &Dataset, codec: &dyn Codec, cfg: UNetConfig, tc: TrainConfig) -> Trained {
    let t0 = Instant::now();
    let train: Vec<&[f64]> = ds.train.iter().map(|s| s.image.as_slice()).collect();
    let inputs = encode_all(codec, &train);
    let labels = ds.train.iter().map(|s| s.labeled.then(|| s.label_vector())).collect();
    let set = TrainSet::new(vec![cfg.input_channels, cfg.image_side, cfg.image_side], inputs, labels).unwrap();
    let model = JointModel::new(cfg, tc.seed).unwrap();
    let mut tr = Trainer::new(model, tc, sched()).unwrap();
    tr.run(&set, |_| Ok(())).unwrap();
    let test = encode_all(codec, &test_refs(ds));
    let refs: Vec<&[f64]> = test.iter().map(Vec::as_slice).collect();
    let probs = model_probabilities(&tr.model, &refs, &sched(), AUC_SEED).unwrap();
    let auc = per_class_auc(&probs, &test_labels(ds)).unwrap();
    Trained { model: tr.model, auc, secs: t0.elapsed().as_secs_f64() }
}

/// Expensive artifacts shared between criteria, built on first use.
#[derive(Default)]
struct Lab {
    runs: BTreeMap<(u64, u64, bool), Trained>,
    oracle: Option<OracleClassifier>,
    removal: Option<Vec<VceBatch>>,
    removal_secs: f64,
}

impl Lab {
    /// Joint (`joint = true`) or classifier-only model on the pixel path.
    fn run(&mut self, fraction: f64, seed: u64, joint: bool) -> &Trained {
        self.runs.entry((fraction.to_bits(), seed, joint)).or_insert_with(|| {
            let objective = if joint { Objective::Joint } else { Objective::ClassifierOnly };
            let t = train_model(&dataset(seed, fraction), &Identity, unet(1, SIDE), train_config(fraction, seed, objective));
            eprintln!("  trained {} fraction {fraction} seed {seed}: mean AUC {:.4} in {:.0}s", if joint { "joint" } else { "classifier-only" }, t.mean_auc(), t.secs);
            t
        })
    }

    fn oracle(&mut self) -> &OracleClassifier {
        self.oracle.get_or_insert_with(|| {
            let ds = dataset(0, VCE_FRACTION);
            let imgs: Vec<&[f64]> = ds.train.iter().map(|s| s.image.as_slice()).collect();
            let labels: Vec<Vec<bool>> = ds.train.iter().map(|s| s.labels.to_vec()).collect();
            let (o, _) = jdl_core::eval::train_oracle(&imgs, &labels, SIDE, &OracleConfig::default()).unwrap();
            let auc = per_class_auc(&o.predict_proba(&test_refs(&ds)).unwrap(), &test_labels(&ds)).unwrap();
            eprintln!("  oracle test AUC {auc:.3?}");
            o
        })
    }

    fn removal(&mut self) -> (&[VceBatch], f64) {
        if self.removal.is_none() {
            self.oracle();
            self.run(VCE_FRACTION, 0, true);
            let t0 = Instant::now();
            let b = vce_all(&self.runs[&(VCE_FRACTION.to_bits(), 0, true)].model, &Identity, self.oracle.as_ref().unwrap(), Direction::Away, VCE_SCALE);
            self.removal_secs = t0.elapsed().as_secs_f64();
            self.removal = Some(b);
        }
        (self.removal.as_deref().unwrap(), self.removal_secs)
    }
}

/// One VCE batch per class on the VCE dataset's test split.
fn vce_all<D: Denoiser>(model: &D, codec: &dyn Codec, oracle: &OracleClassifier, dir: Direction, scale: f64) -> Vec<VceBatch> {
    let ds = dataset(0, VCE_FRACTION);
    let s = sched();
    let items: Vec<VceItem> = ds.test.iter().map(|t| VceItem { id: t.id.clone(), image: &t.image, labels: t.labels.to_vec(), bboxes: t.bboxes.clone() }).collect();
    let scores = oracle.predict_proba(&test_refs(&ds)).unwrap();
    (0..NUM_CLASSES)
        .map(|k| {
            let sel = select_items(&items, &scores, k, dir, VCE_ITEMS);
            let cfg = match dir {
                Direction::Away => VceConfig::removal(&s, k, scale),
                _ => VceConfig::enforcing(&s, k, scale),
            };
            batch_vce(model, codec, &sel, SIDE, &cfg, &s, 0, oracle, 25).unwrap()
        })
        .collect()
}

/// Per-class Diff/Other check shared by the removal and enforcing criteria.
fn confidence_check(batches: &[VceBatch], dir: Direction, min_diff: f64) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, b) in batches.iter().enumerate() {
        let r = &b.summary;
        let ok_diff = match dir {
            Direction::Away => r.diff <= -min_diff,
            _ => r.diff >= min_diff,
        };
        let ok = r.n == VCE_ITEMS && ok_diff && r.other_diff <= OTHER_RATIO_MAX * r.diff.abs();
        pass &= ok;
        parts.push(format!("{} n={} diff {:+.3} other {:.3}", CLASS_NAMES[k], r.n, r.diff, r.other_diff));
    }
    (pass, parts.join("; "))
}

// 1
fn gradients() -> Outcome {
    let t0 = Instant::now();
    let checks = primitive_suite(100, 11, 1e-6).unwrap();
    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let mut m = JointModel::new(tiny(), 3).unwrap();
    let mut r = rng::stream(3, "jitter", 0);
    for e in m.params.entries_mut() {
        e.tensor.data.iter_mut().for_each(|v| *v += 0.1 * rng::normal(&mut r));
    }
    let mut cr = rng::stream(1, "coords", 0);
    let coords: Vec<usize> = (0..100).map(|_| cr.random_range(0..m.params.num_scalars())).collect();
    let mut tr = rng::stream(5, "toy", 0);
    let inputs = (0..20).map(|_| (0..64).map(|_| tr.random_range(-1.0..1.0)).collect()).collect();
    let labels = (0..20).map(|i| (i < 5).then(|| (0..3).map(|k| ((i + k) % 2) as f64).collect())).collect();
    let set = TrainSet::new(vec![1, 8, 8], inputs, labels).unwrap();
    let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    let tc = TrainConfig { batch_diffusion: 4, batch_classification: 4, class_loss_weight: 0.7, class_start_step: 0, label_fraction: 0.25, ..TrainConfig::default() };
    let joint = joint_loss_grad_check(&m, &set, &tc, &s, 2, &coords, 1e-5).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst.max_rel_error < GRAD_TOL && joint < GRAD_TOL && secs < QUICK_BUDGET_S;
    outcome(pass, format!("{} primitives, worst {} {:.2e}; joint loss {:.2e}; {:.1}s", checks.len(), worst.name, worst.max_rel_error, joint, secs))
}

// 2
fn guidance_zero() -> Outcome {
    let t0 = Instant::now();
    let mut m = JointModel::new(tiny(), 4).unwrap();
    let mut r = rng::stream(4, "jitter", 0);
    for e in m.params.entries_mut() {
        e.tensor.data.iter_mut().for_each(|v| *v += 0.05 * rng::normal(&mut r));
    }
    let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg) in [("DDPM", SamplerConfig::default()), ("DDIM", SamplerConfig { kind: SamplerKind::Ddim, ddim_steps: 10, eta: 0.0, clip_denoised: None })] {
        let run = |g: GuidanceConfig| sample(&m, 3, &g, &cfg, &s, &mut rng::stream(8, "guidance-zero", 0)).unwrap().0.data;
        let base = run(GuidanceConfig::none());
        let same = (0..NUM_CLASSES).all(|k| run(GuidanceConfig::toward(k, 0.0)) == base && run(GuidanceConfig::away(k, 0.0)) == base);
        // guidance must actually be wired in
        let moved = run(GuidanceConfig::toward(1, 5.0)) != base;
        pass &= same && moved;
        parts.push(format!("{name} identical={same} nonzero-scale-differs={moved}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(pass && secs < QUICK_BUDGET_S, format!("{}; {:.1}s", parts.join(", "), secs))
}

/// Exact noise predictor for a point mass at `c`; no classifier.
struct PointMass(f64, NoiseSchedule);

impl Denoiser for PointMass {
    fn sample_shape(&self) -> Vec<usize> {
        vec![1, 8, 8]
    }
    fn num_classes(&self) -> usize {
        1
    }
    fn predict_eps(&self, z: &Tensor, t: &[usize]) -> Result<Tensor> {
        let per = z.numel() / t.len();
        let data = z.data.iter().enumerate().map(|(i, v)| {
            let ab = self.1.alpha_bar(t[i / per]);
            (v - ab.sqrt() * self.0) / (1.0 - ab).sqrt()
        });
        Tensor::new(z.shape.clone(), data.collect())
    }
    fn eps_and_class_grad(&self, z: &Tensor, t: &[usize], _: ClassTarget) -> Result<(Tensor, Tensor)> {
        Ok((self.predict_eps(z, t)?, Tensor::zeros(&z.shape)))
    }
}

// 3
fn sampler_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for steps in [2, 200] {
        let s = NoiseSchedule::linear(steps, 1e-4, 0.02).unwrap();
        for target in [-0.8, 0.0, 0.37] {
            let d = PointMass(target, s.clone());
            let (x, _) = sample(&d, 4, &GuidanceConfig::none(), &SamplerConfig::default(), &s, &mut rng::stream(steps as u64, "point-mass", 0)).unwrap();
            worst = x.data.iter().fold(worst, |w, v| w.max((v - target).abs()));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < COLLAPSE_TOL && secs < QUICK_BUDGET_S, format!("T in {{2, 200}}, max |x0 - c| = {worst:.2e}; {secs:.1}s"))
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// 4
fn semi_supervised_gain(lab: &mut Lab) -> Outcome {
    let mut gains = Vec::new();
    let mut secs = 0.0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let j = lab.run(GAIN_FRACTION, seed, true);
        let (ja, js) = (j.mean_auc(), j.secs);
        let c = lab.run(GAIN_FRACTION, seed, false);
        let (ca, cs) = (c.mean_auc(), c.secs);
        secs += js + cs;
        gains.push(ja - ca);
        parts.push(format!("seed {seed} joint {ja:.4} cls-only {ca:.4}"));
    }
    let g = median3(gains);
    outcome(g >= GAIN_MIN && secs <= GAIN_BUDGET_S, format!("median gain {g:+.4} (need >= {GAIN_MIN}); {}; {:.0}s", parts.join(", "), secs))
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

// 5
fn label_fraction_trend(lab: &mut Lab) -> Outcome {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut parts = Vec::new();
    for f in FRACTIONS {
        let aucs: Vec<f64> = SEEDS.iter().map(|&s| lab.run(f, s, true).mean_auc()).collect();
        parts.push(format!("{f}: {:.4}", mean(&aucs)));
        xs.extend([f; 3]);
        ys.extend(aucs);
    }
    let rho = spearman(&xs, &ys);
    outcome(rho > 0.0, format!("Spearman rho {rho:.3}; mean AUC by fraction {}", parts.join(", ")))
}

// 6
fn removal(lab: &mut Lab) -> Outcome {
    let (b, secs) = lab.removal();
    let (pass, detail) = confidence_check(b, Direction::Away, VCE_DIFF_MIN);
    outcome(pass && secs <= VCE_BUDGET_S, format!("{detail}; {secs:.0}s"))
}

// 7
fn enforcing(lab: &mut Lab) -> Outcome {
    lab.oracle();
    lab.run(VCE_FRACTION, 0, true);
    let model = &lab.runs[&(VCE_FRACTION.to_bits(), 0, true)].model;
    let b = vce_all(model, &Identity, lab.oracle.as_ref().unwrap(), Direction::Toward, VCE_SCALE);
    let (pass, detail) = confidence_check(&b, Direction::Toward, VCE_DIFF_MIN);
    outcome(pass, detail)
}

// 8
fn localization(lab: &mut Lab) -> Outcome {
    let (b, _) = lab.removal();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, batch) in b.iter().enumerate() {
        let pairs: Vec<(f64, f64)> = batch.rows.iter().filter_map(|r| Some((r.inbox_mean_diff?, r.outbox_mean_diff?))).collect();
        let loc = LocalizationSummary::new(k, &pairs);
        let need = if k == 0 { LOC_RATIO_HEART } else { LOC_RATIO_SMALL };
        let ratio = loc.median_inbox / loc.median_outbox;
        pass &= pairs.len() == batch.rows.len() && ratio >= need;
        parts.push(format!("{} in {:.4} out {:.4} ratio {:.2} (need {need})", CLASS_NAMES[k], loc.median_inbox, loc.median_outbox, ratio));
    }
    outcome(pass, parts.join("; "))
}

/// `GEN_N` samples in pixel space, batch `b` always drawing from the same stream.
fn generate(model: &JointModel, g: GuidanceConfig, n: usize) -> Vec<Vec<f64>> {
    let s = sched();
    // Full ancestral chain: DDIM with few steps is too coarse for a model this small.
    let cfg = SamplerConfig { clip_denoised: Some(1.0), ..SamplerConfig::default() };
    let mut out = Vec::with_capacity(n);
    for (bi, start) in (0..n).step_by(GEN_BATCH).enumerate() {
        let m = GEN_BATCH.min(n - start);
        let (x, _) = sample(model, m, &g, &cfg, &s, &mut rng::stream(0, "acceptance-sample", bi as u64)).unwrap();
        out.extend((0..m).map(|i| x.item_slice(i).iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<f64>>()));
    }
    out
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Samples shared by the generation criteria: unguided, then per class the
/// guided sets at 1, 2 and 3 times the base scale.
struct Generated {
    unguided: Vec<Vec<f64>>,
    guided: Vec<[Vec<Vec<f64>>; 3]>,
}

fn generated(lab: &mut Lab, cache: &mut Option<Generated>) {
    if cache.is_some() {
        return;
    }
    let model = &lab.run(VCE_FRACTION, 0, true).model;
    let t0 = Instant::now();
    let unguided = generate(model, GuidanceConfig::none(), GEN_N);
    let guided = (0..NUM_CLASSES).map(|k| [(1.0, GEN_N), (2.0, GEN_N / 2), (3.0, GEN_N / 2)].map(|(m, n)| generate(model, GuidanceConfig::toward(k, m * GEN_SCALE), n))).collect();
    eprintln!("  generated samples in {:.0}s", t0.elapsed().as_secs_f64());
    *cache = Some(Generated { unguided, guided });
}

// 9
fn guided_quality(lab: &mut Lab, cache: &mut Option<Generated>) -> Outcome {
    generated(lab, cache);
    let gen = cache.as_ref().unwrap();
    let ds = dataset(0, VCE_FRACTION);
    let oracle = lab.oracle();
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..NUM_CLASSES {
        let target: Vec<&[f64]> = ds.test.iter().filter(|s| s.labels[k]).map(|s| s.image.as_slice()).collect();
        let fu = frechet_feature_distance(oracle, &refs(&gen.unguided), &target).unwrap();
        let fg = frechet_feature_distance(oracle, &refs(&gen.guided[k][0]), &target).unwrap();
        pass &= fg < fu;
        parts.push(format!("{} unguided {fu:.3} guided {fg:.3}", CLASS_NAMES[k]));
    }
    outcome(pass, format!("{GEN_N} samples each, scale {GEN_SCALE}; {}", parts.join("; ")))
}

// 10
fn scale_monotonicity(lab: &mut Lab, cache: &mut Option<Generated>) -> Outcome {
    generated(lab, cache);
    let gen = cache.as_ref().unwrap();
    let oracle = lab.oracle();
    let conf = |v: &[Vec<f64>], k: usize| mean(&oracle.predict_proba(&refs(v)).unwrap().iter().map(|p| p[k]).collect::<Vec<_>>());
    let mut good = 0;
    let mut parts = Vec::new();
    for k in 0..NUM_CLASSES {
        let c: Vec<f64> = std::iter::once(conf(&gen.unguided, k)).chain(gen.guided[k].iter().map(|v| conf(v, k))).collect();
        let mono = c.windows(2).all(|w| w[1] >= w[0]);
        good += mono as usize;
        parts.push(format!("{} {:.3?}{}", CLASS_NAMES[k], c, if mono { "" } else { " (not monotone)" }));
    }
    outcome(good >= 2, format!("scales 0/{GEN_SCALE}/{}/{}: {}", 2.0 * GEN_SCALE, 3.0 * GEN_SCALE, parts.join("; ")))
}

fn jdl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_jdl")).args(args).env_remove("JDL_THREADS").output().unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "log.txt") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

// 11
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "schema": 1,
        "dataset": {"n_train": 300, "n_test": 60, "priors": [0.4, 0.4, 0.4], "label_fraction": 0.1, "seed": 3},
        "schedule": {"T": 30, "beta_start": 0.001, "beta_end": 0.1},
        "latent": {"enabled": true},
        "autoencoder": {"steps": 10, "batch": 8},
        "model": {"input_channels": 2, "base_channels": 8, "channel_multipliers": [1, 2], "num_res_blocks_per_stage": 1, "time_embed_dim": 8,
                  "image_side": 16, "feature_cap": 10000, "classifier_hidden": 8, "num_classes": 3},
        "training": {"total_steps": 8, "batch_diffusion": 4, "batch_classification": 4, "class_start_step": 2, "label_fraction": 0.1, "seed": 1},
        "checkpoint_every": 4,
        "sampling": {"n": 4, "batch": 2, "seed": 2},
        "vce": {"items_per_class": 3, "batch": 2, "removal_scale": 5.0, "enforcing_scale": 5.0},
        "eval": {"oracle": {"steps": 10, "batch": 8, "width": 4, "feature_dim": 8}}
    });
    let path = tmp.path().join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let c = path.to_str().unwrap();
    let commands: [&[&str]; 9] = [
        &["gen-data"],
        &["train-ae"],
        &["train-oracle"],
        &["train"],
        &["eval-auc"],
        &["vce", "--direction", "away", "--class", "nodule"],
        &["vce", "--direction", "toward", "--class", "effusion"],
        &["sample", "--class", "cardiomegaly", "--direction", "toward", "--scales", "0,10"],
        &["report"],
    ];
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        let r = root.to_str().unwrap();
        for cmd in commands {
            let mut args = cmd.to_vec();
            args.extend(["--config", c, "--root", r]);
            let o = jdl(&args);
            if !o.status.success() {
                return outcome(false, format!("jdl {cmd:?} failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
            }
        }
        trees.push(files(&root));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).map(|k| k.display().to_string()).collect();
    outcome(differing.is_empty() && !a.is_empty(), format!("{} commands, {} files compared, differing: {differing:?}", commands.len(), a.len()))
}

// 12
fn latent_path(lab: &mut Lab) -> Outcome {
    let t0 = Instant::now();
    let ds = dataset(0, VCE_FRACTION);
    let lc = LatentConfig { enabled: true, ..LatentConfig::default() };
    let mut codec = LatentCodec::new(lc.clone(), 0).unwrap();
    let train: Vec<Vec<f64>> = ds.train.iter().map(|s| s.image.clone()).collect();
    train_autoencoder(&mut codec, &train, &AeTrainConfig::default()).unwrap();
    let test: Vec<Vec<f64>> = ds.test.iter().map(|s| s.image.clone()).collect();
    let mse = reconstruction_mse(&codec, &test).unwrap();
    let t = train_model(&ds, &codec, unet(lc.channels, lc.latent_side()), train_config(VCE_FRACTION, 0, Objective::Joint));
    eprintln!("  latent model mean AUC {:.4}", t.mean_auc());
    let oracle = lab.oracle();
    let away = vce_all(&t.model, &codec, oracle, Direction::Away, VCE_SCALE);
    let toward = vce_all(&t.model, &codec, oracle, Direction::Toward, VCE_SCALE);
    let (pa, da) = confidence_check(&away, Direction::Away, LATENT_DIFF_MIN);
    let (pt, dt) = confidence_check(&toward, Direction::Toward, LATENT_DIFF_MIN);
    outcome(mse < AE_MSE_MAX && pa && pt, format!("AE test MSE {mse:.5}; removal: {da}; enforcing: {dt}; {:.0}s", t0.elapsed().as_secs_f64()))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let names = [
        "gradient correctness",
        "guidance-zero equivalence",
        "sampler oracle",
        "semi-supervised gain",
        "label-fraction monotonicity",
        "counterfactual removal",
        "counterfactual enforcing",
        "localization",
        "guided generation quality",
        "guidance-scale monotonicity",
        "determinism",
        "latent path",
    ];
    let mut lab = Lab::default();
    let mut gen = None;
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| match n {
            1 => gradients(),
            2 => guidance_zero(),
            3 => sampler_oracle(),
            4 => semi_supervised_gain(&mut lab),
            5 => label_fraction_trend(&mut lab),
            6 => removal(&mut lab),
            7 => enforcing(&mut lab),
            8 => localization(&mut lab),
            9 => guided_quality(&mut lab, &mut gen),
            10 => scale_monotonicity(&mut lab, &mut gen),
            11 => determinism(),
            _ => latent_path(&mut lab),
        }));
        let o = res.unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += !o.pass as usize;
        println!("{} {n:>2} {name}: {} [{:.0}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, t0.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} failed");
    if failed > 0 && std::env::var("JDL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
