//! One function per CLI verb. Each reads the run directory, writes a fresh
//! output directory with a config echo, and logs progress to `log.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use jdl_core::autoencoder::{reconstruction_mse, train_autoencoder, Codec, Identity, LatentCodec};
use jdl_core::counterfactual::{batch_vce, select_items, VceConfig, VceItem, VceRow};
use jdl_core::eval::{self, ConfidenceRow, EvalReport, LocalizationSummary, OracleClassifier};
use jdl_core::phantom::{build_dataset, Dataset, PhantomSample, CLASS_NAMES, NUM_CLASSES, SIDE};
use jdl_core::pgm;
use jdl_core::rng;
use jdl_core::sampling::{self, Direction, GuidanceConfig};
use jdl_core::training::{Objective, TrainSet, TrainStepReport, Trainer};
use jdl_core::{JointModel, NoiseSchedule, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{self, prevalence};
use crate::error::{CliError, CliResult};
use crate::run::{self, read_json, write_json, Run};

const ENCODE_CHUNK: usize = 64;

pub const AE_WEIGHTS: &str = "ae/ae.bin";
pub const ORACLE_WEIGHTS: &str = "oracle/oracle.bin";
pub const FINAL_CHECKPOINT: &str = "model/final.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_META: &str = "train_meta.json";

fn sched(run: &Run) -> CliResult<NoiseSchedule> {
    Ok(run.cfg.schedule.build()?)
}

fn image_refs(items: &[PhantomSample]) -> Vec<&[f64]> {
    items.iter().map(|s| s.image.as_slice()).collect()
}

fn label_bools(items: &[PhantomSample]) -> Vec<Vec<bool>> {
    items.iter().map(|s| s.labels.to_vec()).collect()
}

pub fn load_data(run: &Run) -> CliResult<Dataset> {
    let dir = run.require(&format!("{}/{}", run::DATA_DIR, data::MANIFEST), "gen-data")?;
    data::read_dataset(dir.parent().expect("manifest has a parent"))
}

/// Identity unless the latent path is enabled, in which case the trained
/// autoencoder is required.
pub fn load_codec(run: &Run) -> CliResult<Box<dyn Codec>> {
    if !run.cfg.latent.enabled {
        return Ok(Box::new(Identity));
    }
    let p = run.require(AE_WEIGHTS, "train-ae")?;
    let mut codec = LatentCodec::new(run.cfg.latent.clone(), run.cfg.autoencoder.seed)?;
    codec.load(&p)?;
    Ok(Box::new(codec))
}

pub fn load_oracle(run: &Run) -> CliResult<OracleClassifier> {
    let p = run.path(ORACLE_WEIGHTS);
    if !p.exists() {
        return Err(CliError::Missing(format!(
            "OracleMissing: {} not found; train it first with `jdl train-oracle --config <same config>`",
            p.display()
        )));
    }
    let mut o = OracleClassifier::new(SIDE, NUM_CLASSES, &run.cfg.eval.oracle)?;
    o.load(&p)?;
    Ok(o)
}

/// Loads weights from a checkpoint or plain weight file. Returns the model
/// and the recorded step count.
pub fn load_model(run: &Run, path: &Path) -> CliResult<(JointModel, usize)> {
    if !path.exists() {
        return Err(CliError::Missing(format!("checkpoint {} not found; run `jdl train` first", path.display())));
    }
    let model = JointModel::new(run.cfg.model.clone(), run.cfg.training.seed)?;
    let mut tr = Trainer::new(model, run.cfg.training.clone(), sched(run)?)?;
    tr.load_checkpoint(path)?;
    let step = tr.step_index();
    Ok((tr.model, step))
}

/// Diffusion inputs for `images`: the images themselves or their latent codes.
pub fn encode_all(codec: &dyn Codec, images: &[&[f64]]) -> CliResult<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_CHUNK) {
        let z = codec.encode_mean(&Tensor::stack(chunk, &[1, SIDE, SIDE])?)?;
        out.extend((0..chunk.len()).map(|i| z.item_slice(i).to_vec()));
    }
    Ok(out)
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> CliResult<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub labeled: usize,
    pub prevalence_train: [f64; NUM_CLASSES],
    pub prevalence_test: [f64; NUM_CLASSES],
}

pub fn gen_data(run: &Run) -> CliResult<DataSummary> {
    let d = &run.cfg.dataset;
    let out = run.create_output(run::DATA_DIR)?;
    run.log(&format!("gen-data: {} train + {} test phantoms into {}", d.n_train, d.n_test, out.display()));
    let ds = build_dataset(d.n_train, d.n_test, d.priors, d.label_fraction, d.seed)?;
    data::write_dataset(&out, &ds)?;
    let summary = DataSummary {
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        labeled: ds.train.iter().filter(|s| s.labeled).count(),
        prevalence_train: prevalence(&ds.train),
        prevalence_test: prevalence(&ds.test),
    };
    write_json(&out.join("summary.json"), &summary)?;
    for (k, name) in CLASS_NAMES.iter().enumerate() {
        println!("{name:<13} train {:.3}  test {:.3}", summary.prevalence_train[k], summary.prevalence_test[k]);
    }
    println!("labeled train items: {}", summary.labeled);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeSummary {
    pub recon_mse_train: f64,
    pub recon_mse_test: f64,
    pub scale: f64,
}

pub fn train_ae(run: &Run) -> CliResult<AeSummary> {
    if !run.cfg.latent.enabled {
        return Err(CliError::Config("train-ae needs latent.enabled = true".into()));
    }
    let ds = load_data(run)?;
    let out = run.create_output(run::AE_DIR)?;
    let mut codec = LatentCodec::new(run.cfg.latent.clone(), run.cfg.autoencoder.seed)?;
    let train: Vec<Vec<f64>> = ds.train.iter().map(|s| s.image.clone()).collect();
    run.log(&format!("train-ae: {} steps on {} images", run.cfg.autoencoder.steps, train.len()));
    let losses = train_autoencoder(&mut codec, &train, &run.cfg.autoencoder)?;
    write_csv(
        &out.join("ae_log.csv"),
        "step,total,recon_mse,kl",
        losses.iter().enumerate().map(|(i, l)| format!("{i},{:.9e},{:.9e},{:.9e}", l.total, l.recon_mse, l.kl)),
    )?;
    codec.save(&out.join("ae.bin"))?;
    let test: Vec<Vec<f64>> = ds.test.iter().map(|s| s.image.clone()).collect();
    let summary = AeSummary { recon_mse_train: reconstruction_mse(&codec, &train)?, recon_mse_test: reconstruction_mse(&codec, &test)?, scale: codec.scale };
    write_json(&out.join("ae_meta.json"), &summary)?;
    println!("reconstruction MSE train {:.5} test {:.5}", summary.recon_mse_train, summary.recon_mse_test);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub test_auc: Vec<f64>,
    pub mean_test_auc: f64,
}

/// The oracle sees every training label: it is an evaluator, not a competitor.
pub fn train_oracle(run: &Run) -> CliResult<OracleSummary> {
    let ds = load_data(run)?;
    let out = run.create_output(run::ORACLE_DIR)?;
    run.log(&format!("train-oracle: {} steps", run.cfg.eval.oracle.steps));
    let (oracle, losses) = eval::train_oracle(&image_refs(&ds.train), &label_bools(&ds.train), SIDE, &run.cfg.eval.oracle)?;
    write_csv(&out.join("oracle_log.csv"), "step,loss", losses.iter().enumerate().map(|(i, l)| format!("{i},{l:.9e}")))?;
    oracle.save(&out.join("oracle.bin"))?;
    let probs = oracle.predict_proba(&image_refs(&ds.test))?;
    let test_auc = eval::per_class_auc(&probs, &label_bools(&ds.test))?;
    let summary = OracleSummary { mean_test_auc: eval::mean(&test_auc), test_auc };
    write_json(&out.join("oracle_meta.json"), &summary)?;
    println!("oracle test AUC {:?} mean {:.4}", summary.test_auc, summary.mean_test_auc);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// "joint", "diffusion-only baseline" or "classifier-only baseline".
    pub label: String,
    pub objective: Objective,
    pub class_loss_weight: f64,
    pub label_fraction: f64,
    pub total_steps: usize,
}

pub fn run_label(cfg: &jdl_core::training::TrainConfig) -> &'static str {
    match cfg.objective {
        Objective::ClassifierOnly => "classifier-only baseline",
        Objective::Joint if cfg.class_loss_weight == 0.0 => "diffusion-only baseline",
        Objective::Joint => "joint",
    }
}

fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.bin")
}

/// Trains from scratch, or continues from `resume` inside the existing model
/// directory. Log rows from the resumed step onward are rewritten, so a
/// resumed run ends with the same files as an uninterrupted one.
pub fn train(run: &Run, resume: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = &run.cfg;
    let ds = load_data(run)?;
    let codec = load_codec(run)?;
    let out = match resume {
        None => run.create_output(run::MODEL_DIR)?,
        Some(_) => run.require(run::MODEL_DIR, "train")?,
    };
    let (c, s) = cfg.model_input();
    let inputs = encode_all(codec.as_ref(), &image_refs(&ds.train))?;
    let labels = ds.train.iter().map(|it| it.labeled.then(|| it.label_vector())).collect();
    let set = TrainSet::new(vec![c, s, s], inputs, labels)?;

    let model = JointModel::new(cfg.model.clone(), cfg.training.seed)?;
    let mut tr = Trainer::new(model, cfg.training.clone(), sched(run)?)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = format!("{}\n", TrainStepReport::CSV_HEADER);
    if let Some(ckpt) = resume {
        if !ckpt.exists() {
            return Err(CliError::Missing(format!("checkpoint {} not found", ckpt.display())));
        }
        tr.load_checkpoint(ckpt)?;
        let done = tr.step_index();
        if let Ok(old) = std::fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
                    Some(st) if st < done => {
                        log.push_str(line);
                        log.push('\n');
                    }
                    _ => {}
                }
            }
        }
        run.log(&format!("train: resuming {} at step {done}", ckpt.display()));
    } else {
        run.log(&format!("train: {} ({} steps, {} labeled items)", run_label(&cfg.training), cfg.training.total_steps, set.labeled_indices().len()));
    }
    let every = cfg.checkpoint_every;
    while !tr.is_done() {
        let r = match tr.train_step(&set) {
            Ok(r) => r,
            Err(e) => {
                std::fs::write(&log_path, &log)?;
                run.log(&format!("train: {e}"));
                return Err(e.into());
            }
        };
        log.push_str(&r.csv_row());
        log.push('\n');
        let done = tr.step_index();
        if every > 0 && done % every == 0 && !tr.is_done() {
            tr.save_checkpoint(&out.join(checkpoint_name(done)))?;
            std::fs::write(&log_path, &log)?;
            run.log(&format!("train: step {done} total loss {:.5}", r.total_loss));
        }
    }
    std::fs::write(&log_path, &log)?;
    let final_path = out.join("final.bin");
    tr.save_checkpoint(&final_path)?;
    let meta = TrainMeta {
        label: run_label(&cfg.training).into(),
        objective: cfg.training.objective,
        class_loss_weight: cfg.training.class_loss_weight,
        label_fraction: cfg.training.label_fraction,
        total_steps: cfg.training.total_steps,
    };
    write_json(&out.join(TRAIN_META), &meta)?;
    run.log(&format!("train: finished at step {}", tr.step_index()));
    Ok(final_path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub checkpoint: String,
    pub label: String,
    pub label_fraction: f64,
    pub step: usize,
    pub auc: Vec<f64>,
    pub mean_auc: f64,
}

pub const AUC_HEADER: &str = "checkpoint,label,label_fraction,step,auc_cardiomegaly,auc_nodule,auc_effusion,mean_auc";

impl AucRow {
    pub fn csv_row(&self) -> String {
        let aucs: Vec<String> = self.auc.iter().map(|a| format!("{a:.6}")).collect();
        format!("{},{},{},{},{},{:.6}", self.checkpoint, self.label, self.label_fraction, self.step, aucs.join(","), self.mean_auc)
    }
}

/// Per-class test AUC from the joint model's classifier at `t = 1`.
pub fn eval_auc(run: &Run, checkpoints: &[PathBuf]) -> CliResult<Vec<AucRow>> {
    let default = [run.path(FINAL_CHECKPOINT)];
    let checkpoints = if checkpoints.is_empty() { &default[..] } else { checkpoints };
    let ds = load_data(run)?;
    let codec = load_codec(run)?;
    let sched = sched(run)?;
    let inputs = encode_all(codec.as_ref(), &image_refs(&ds.test))?;
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let labels = label_bools(&ds.test);
    let mut rows = Vec::new();
    for ckpt in checkpoints {
        let (model, step) = load_model(run, ckpt)?;
        let probs = eval::model_probabilities(&model, &refs, &sched, run.cfg.eval.auc_seed)?;
        let auc = eval::per_class_auc(&probs, &labels)?;
        let meta: Option<TrainMeta> = ckpt.parent().map(|d| d.join(TRAIN_META)).filter(|p| p.exists()).map(|p| read_json(&p)).transpose()?;
        let (label, frac) = match meta {
            Some(m) => (m.label, m.label_fraction),
            None => (run_label(&run.cfg.training).to_string(), run.cfg.training.label_fraction),
        };
        let row = AucRow { checkpoint: ckpt.strip_prefix(&run.dir).unwrap_or(ckpt).display().to_string(), label, label_fraction: frac, step, mean_auc: eval::mean(&auc), auc };
        println!("{}", row.csv_row());
        rows.push(row);
    }
    let out = run.create_output(run::EVAL_AUC_DIR)?;
    write_csv(&out.join("auc.csv"), AUC_HEADER, rows.iter().map(AucRow::csv_row))?;
    run.log(&format!("eval-auc: {} checkpoint(s)", rows.len()));
    Ok(rows)
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Away => "away",
        Direction::Toward => "toward",
        Direction::None => "none",
    }
}

pub fn parse_direction(s: &str) -> CliResult<Direction> {
    match s.to_ascii_lowercase().as_str() {
        "away" | "removal" | "remove" => Ok(Direction::Away),
        "toward" | "towards" | "enforcing" | "enforce" => Ok(Direction::Toward),
        "none" => Ok(Direction::None),
        _ => Err(CliError::Config(format!("unknown direction {s:?}; expected away, toward or none"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VceSummary {
    pub direction: Direction,
    pub class: usize,
    pub class_name: String,
    pub t_star: usize,
    pub scale: f64,
    pub confidence: ConfidenceRow,
    pub localization: Option<LocalizationSummary>,
    pub clip_events: usize,
    pub warnings: Vec<String>,
}

/// Removal (`away`, diseased items) or enforcing (`toward`, healthy items)
/// counterfactuals on the test split, scored by the oracle.
pub fn vce(run: &Run, checkpoint: Option<&Path>, direction: Direction, class: usize) -> CliResult<VceSummary> {
    let cfg = &run.cfg;
    if direction == Direction::None {
        return Err(CliError::Config("vce needs direction away or toward".into()));
    }
    if class >= NUM_CLASSES {
        return Err(CliError::Config(format!("class index {class} out of range")));
    }
    let oracle = load_oracle(run)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.path(FINAL_CHECKPOINT));
    let (model, _) = load_model(run, &ckpt)?;
    let ds = load_data(run)?;
    let codec = load_codec(run)?;
    let sched = sched(run)?;

    let items: Vec<VceItem> = ds
        .test
        .iter()
        .map(|s| VceItem { id: s.id.clone(), image: &s.image, labels: s.labels.to_vec(), bboxes: s.bboxes.clone() })
        .collect();
    let scores = oracle.predict_proba(&image_refs(&ds.test))?;
    let selected = select_items(&items, &scores, class, direction, cfg.vce.items_per_class);
    let (t_star, scale) = match direction {
        Direction::Away => (cfg.removal_t_star(), cfg.vce.removal_scale),
        _ => (cfg.enforcing_t_star(), cfg.vce.enforcing_scale),
    };
    let guidance = GuidanceConfig { target_class: class, direction, scale };
    let vcfg = VceConfig { t_star, guidance, sampler: cfg.vce.sampler, t_star_range: cfg.vce.t_star_range };
    let name = CLASS_NAMES[class];
    run.log(&format!("vce: {} {name}, {} items, t* {t_star}, scale {scale}", direction_name(direction), selected.len()));
    let b = batch_vce(&model, codec.as_ref(), &selected, SIDE, &vcfg, &sched, cfg.vce.seed, &oracle, cfg.vce.batch)?;

    let out = run.create_output(&format!("vce-{}-{name}", direction_name(direction)))?;
    write_csv(&out.join("vce_summary.csv"), VceRow::CSV_HEADER, b.rows.iter().map(|r| r.csv_row(name)))?;
    let trip = out.join("triptychs");
    std::fs::create_dir_all(&trip)?;
    for r in &b.results {
        let mut img = Vec::with_capacity(3 * SIDE * SIDE);
        for y in 0..SIDE {
            let row = y * SIDE..(y + 1) * SIDE;
            img.extend_from_slice(&r.original[row.clone()]);
            img.extend_from_slice(&r.counterfactual[row.clone()]);
            img.extend_from_slice(&r.diff[row]);
        }
        pgm::write_pgm(&trip.join(format!("{}.pgm", r.item_id)), 3 * SIDE, SIDE, &img, -1.0, 1.0)?;
    }
    let pairs: Vec<(f64, f64)> = b.rows.iter().filter_map(|r| Some((r.inbox_mean_diff?, r.outbox_mean_diff?))).collect();
    let mut warnings: Vec<String> = b.results.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
    warnings.sort();
    warnings.dedup();
    let summary = VceSummary {
        direction,
        class,
        class_name: name.into(),
        t_star,
        scale,
        confidence: b.summary,
        localization: (!pairs.is_empty()).then(|| LocalizationSummary::new(class, &pairs)),
        clip_events: b.results.iter().map(|r| r.clip_events).sum(),
        warnings,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let c = &summary.confidence;
    println!("{name} {}: n {} orig {:.4} cf {:.4} diff {:+.4} other {:.4}", direction_name(direction), c.n, c.orig, c.counterfactual, c.diff, c.other_diff);
    if let Some(l) = &summary.localization {
        println!("median |diff| inside box {:.4}, outside {:.4}", l.median_inbox, l.median_outbox);
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub scale: f64,
    pub n: usize,
    pub clip_events: usize,
    /// Mean oracle confidence for the target class.
    pub mean_target_confidence: Option<f64>,
    /// Fréchet feature distance to test items carrying the target class.
    pub fd_to_target_class: Option<f64>,
    /// Fréchet feature distance to the whole test split.
    pub fd_to_test: Option<f64>,
}

fn scale_dir(s: f64) -> String {
    format!("scale_{s}")
}

fn grid(images: &[Vec<f64>]) -> (usize, usize, Vec<f64>) {
    if images.is_empty() {
        return (0, 0, Vec::new());
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * SIDE, rows * SIDE);
    let mut out = vec![-1.0; w * h];
    for (i, img) in images.iter().enumerate() {
        let (gx, gy) = (i % cols * SIDE, i / cols * SIDE);
        for y in 0..SIDE {
            out[(gy + y) * w + gx..(gy + y) * w + gx + SIDE].copy_from_slice(&img[y * SIDE..(y + 1) * SIDE]);
        }
    }
    (w, h, out)
}

/// Draws `n` samples per guidance scale. Every scale reuses the same noise
/// streams, so scale 0 is the unguided reference for the sweep.
pub fn sample(run: &Run, checkpoint: Option<&Path>, n: usize, guidance: GuidanceConfig, scales: &[f64]) -> CliResult<Vec<SampleStats>> {
    let cfg = &run.cfg;
    guidance.validate(NUM_CLASSES)?;
    if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(CliError::Config("guidance scales must be finite and nonnegative".into()));
    }
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.path(FINAL_CHECKPOINT));
    let (model, _) = load_model(run, &ckpt)?;
    let codec = load_codec(run)?;
    let sched = sched(run)?;
    let oracle = load_oracle(run).ok();
    let ds = if oracle.is_some() { Some(load_data(run)?) } else { None };
    let class = guidance.target_class;
    let tag = match guidance.direction {
        Direction::None => "samples-unguided".to_string(),
        d => format!("samples-{}-{}", direction_name(d), CLASS_NAMES[class]),
    };
    let scales: Vec<f64> = if guidance.direction == Direction::None { vec![0.0] } else { scales.to_vec() };
    let out = run.create_output(&tag)?;
    if oracle.is_none() {
        run.log("sample: no oracle found, skipping confidence and Fréchet statistics");
    }
    let mut all = Vec::new();
    for &s in &scales {
        let g = GuidanceConfig { scale: s, ..guidance };
        let mut images: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut clips = 0;
        let mut bi = 0u64;
        while images.len() < n {
            let m = cfg.sampling.batch.min(n - images.len());
            let mut r = rng::stream(cfg.sampling.seed, "sample", bi);
            let (z, stats) = sampling::sample(&model, m, &g, &cfg.sampling.sampler, &sched, &mut r)?;
            clips += stats.clip_events;
            let x = codec.decode(&z)?;
            images.extend((0..m).map(|i| x.item_slice(i).iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<f64>>()));
            bi += 1;
        }
        let dir = out.join(scale_dir(s));
        std::fs::create_dir_all(&dir)?;
        let (w, h, px) = grid(&images);
        pgm::write_pgm(&dir.join("grid.pgm"), w, h, &px, -1.0, 1.0)?;
        let mut st = SampleStats { scale: s, n, clip_events: clips, mean_target_confidence: None, fd_to_target_class: None, fd_to_test: None };
        if let (Some(o), Some(ds)) = (&oracle, &ds) {
            let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
            if !refs.is_empty() {
                st.mean_target_confidence = Some(eval::mean(&o.predict_proba(&refs)?.iter().map(|p| p[class]).collect::<Vec<_>>()));
            }
            let target: Vec<&[f64]> = ds.test.iter().filter(|t| t.labels[class]).map(|t| t.image.as_slice()).collect();
            st.fd_to_target_class = eval::frechet_feature_distance(o, &refs, &target).ok();
            st.fd_to_test = eval::frechet_feature_distance(o, &refs, &image_refs(&ds.test)).ok();
        }
        write_json(&dir.join("stats.json"), &st)?;
        println!(
            "scale {s}: n {n} confidence {} fd(class) {} fd(test) {}",
            fmt_opt(st.mean_target_confidence),
            fmt_opt(st.fd_to_target_class),
            fmt_opt(st.fd_to_test)
        );
        all.push(st);
    }
    write_json(&out.join("sweep.json"), &all)?;
    run.log(&format!("sample: {tag}, {} scale(s) x {n}", scales.len()));
    Ok(all)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Output directory names under `dir` with the given prefix, sorted.
fn subdirs(dir: &Path, prefix: &str) -> CliResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .collect();
    v.sort();
    Ok(v)
}

/// Collects every CSV and summary in the run into `report/`.
pub fn report(run: &Run) -> CliResult<EvalReport> {
    let cfg = &run.cfg;
    if !run.dir.exists() {
        return Err(CliError::Missing(format!("run directory {} not found; nothing to report", run.dir.display())));
    }
    let mut rep = EvalReport {
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        config: cfg.echo(),
        seeds: vec![cfg.dataset.seed, cfg.training.seed, cfg.eval.oracle.seed, cfg.autoencoder.seed, cfg.sampling.seed, cfg.vce.seed, cfg.eval.auc_seed],
        frechet_unguided: vec![f64::NAN; NUM_CLASSES],
        frechet_guided: vec![f64::NAN; NUM_CLASSES],
        ..Default::default()
    };
    let mut md = String::from("# Experiment report\n\n");
    let _ = writeln!(md, "Run `{}`.\n", cfg.run_id());
    let mut tables: Vec<(String, PathBuf)> = Vec::new();

    if let Ok(s) = read_json::<DataSummary>(&run.path("data/summary.json")) {
        let _ = writeln!(md, "## Data\n\n{} train items ({} labeled), {} test items.\n", s.n_train, s.labeled, s.n_test);
        md.push_str("| class | train prevalence | test prevalence |\n|---|---|---|\n");
        for (k, name) in CLASS_NAMES.iter().enumerate() {
            let _ = writeln!(md, "| {name} | {:.3} | {:.3} |", s.prevalence_train[k], s.prevalence_test[k]);
        }
        md.push('\n');
    }
    if let Ok(m) = read_json::<TrainMeta>(&run.path(&format!("{}/{TRAIN_META}", run::MODEL_DIR))) {
        let _ = writeln!(md, "## Training\n\nRun type: {}. {} steps, label fraction {}, class loss weight {}.\n", m.label, m.total_steps, m.label_fraction, m.class_loss_weight);
        tables.push(("train_log.csv".into(), run.path(&format!("{}/{TRAIN_LOG}", run::MODEL_DIR))));
    }
    if let Ok(s) = read_json::<AeSummary>(&run.path("ae/ae_meta.json")) {
        let _ = writeln!(md, "## Autoencoder\n\nReconstruction MSE: train {:.5}, test {:.5}.\n", s.recon_mse_train, s.recon_mse_test);
    }
    if let Ok(s) = read_json::<OracleSummary>(&run.path("oracle/oracle_meta.json")) {
        let _ = writeln!(md, "## Oracle\n\nTest AUC {:?}, mean {:.4}.\n", s.test_auc.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(), s.mean_test_auc);
    }
    let auc_csv = run.path(&format!("{}/auc.csv", run::EVAL_AUC_DIR));
    if let Ok(text) = std::fs::read_to_string(&auc_csv) {
        md.push_str("## Classification AUC\n\n| checkpoint | run type | label fraction | step | cardiomegaly | nodule | effusion | mean |\n|---|---|---|---|---|---|---|---|\n");
        for (i, line) in text.lines().skip(1).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let _ = writeln!(md, "| {} |", f.join(" | "));
            if i == 0 && f.len() == 8 {
                rep.auc = f[4..7].iter().filter_map(|v| v.parse().ok()).collect();
                rep.mean_auc = f[7].parse().ok();
            }
        }
        md.push('\n');
        tables.push(("auc.csv".into(), auc_csv));
    }
    let vces = subdirs(&run.dir, "vce-")?;
    if !vces.is_empty() {
        md.push_str("## Counterfactuals\n\n| direction | class | n | orig | counterfactual | diff | other diff | median in box | median out of box |\n|---|---|---|---|---|---|---|---|---|\n");
    }
    for d in &vces {
        let s: VceSummary = read_json(&d.join("summary.json"))?;
        let c = &s.confidence;
        let (mi, mo) = s.localization.as_ref().map(|l| (format!("{:.4}", l.median_inbox), format!("{:.4}", l.median_outbox))).unwrap_or_default();
        let _ = writeln!(md, "| {} | {} | {} | {:.4} | {:.4} | {:+.4} | {:.4} | {mi} | {mo} |", direction_name(s.direction), s.class_name, c.n, c.orig, c.counterfactual, c.diff, c.other_diff);
        match s.direction {
            Direction::Away => {
                rep.removal.push(s.confidence.clone());
                rep.localization.extend(s.localization.clone());
            }
            _ => rep.enforcing.push(s.confidence.clone()),
        }
        let name = d.file_name().and_then(|n| n.to_str()).unwrap_or("vce");
        tables.push((format!("{name}.csv"), d.join("vce_summary.csv")));
    }
    if !vces.is_empty() {
        md.push('\n');
    }
    let samples = subdirs(&run.dir, "samples-")?;
    if !samples.is_empty() {
        md.push_str("## Sampling\n\n| run | scale | n | target confidence | FD to class | FD to test |\n|---|---|---|---|---|---|\n");
    }
    for d in &samples {
        let sweep: Vec<SampleStats> = read_json(&d.join("sweep.json"))?;
        let name = d.file_name().and_then(|n| n.to_str()).unwrap_or("samples").to_string();
        for s in &sweep {
            let _ = writeln!(md, "| {name} | {} | {} | {} | {} | {} |", s.scale, s.n, fmt_opt(s.mean_target_confidence), fmt_opt(s.fd_to_target_class), fmt_opt(s.fd_to_test));
        }
        if let Some(k) = CLASS_NAMES.iter().position(|c| name == format!("samples-toward-{c}")) {
            if let Some(v) = sweep.iter().find(|s| s.scale == 0.0).and_then(|s| s.fd_to_target_class) {
                rep.frechet_unguided[k] = v;
            }
            if let Some(v) = sweep.iter().filter(|s| s.scale > 0.0).max_by(|a, b| a.scale.total_cmp(&b.scale)).and_then(|s| s.fd_to_target_class) {
                rep.frechet_guided[k] = v;
            }
        }
    }
    if !samples.is_empty() {
        md.push('\n');
    }

    let out = run.create_output(run::REPORT_DIR)?;
    let tdir = out.join("tables");
    std::fs::create_dir_all(&tdir)?;
    for (name, src) in &tables {
        if src.exists() {
            std::fs::copy(src, tdir.join(name))?;
        }
    }
    md.push_str("## Configuration\n\n```json\n");
    md.push_str(&serde_json::to_string_pretty(&rep.config)?);
    md.push_str("\n```\n");
    std::fs::write(out.join("report.md"), md)?;
    // NaN marks classes without a guided sweep; JSON has no NaN, so emit null
    let mut json = serde_json::to_value(&rep)?;
    for key in ["frechet_unguided", "frechet_guided"] {
        let vals: Vec<Option<f64>> = [&rep.frechet_unguided, &rep.frechet_guided][(key == "frechet_guided") as usize].iter().map(|v| v.is_finite().then_some(*v)).collect();
        json[key] = serde_json::to_value(vals)?;
    }
    write_json(&out.join("eval_report.json"), &json)?;
    run.log(&format!("report: written to {}", out.display()));
    Ok(rep)
}
