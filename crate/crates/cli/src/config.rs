//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use jdl_core::autoencoder::{AeTrainConfig, LatentConfig};
use jdl_core::eval::OracleConfig;
use jdl_core::phantom::NUM_CLASSES;
use jdl_core::sampling::{GuidanceConfig, SamplerConfig, SamplerKind};
use jdl_core::training::TrainConfig;
use jdl_core::{ScheduleConfig, UNetConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub priors: [f64; NUM_CLASSES],
    pub label_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_train: 4000, n_test: 1000, priors: [0.3; NUM_CLASSES], label_fraction: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingBlock {
    pub sampler: SamplerConfig,
    pub n: usize,
    pub batch: usize,
    pub seed: u64,
    pub guidance: GuidanceConfig,
}

impl Default for SamplingBlock {
    fn default() -> Self {
        Self { sampler: SamplerConfig::default(), n: 100, batch: 50, seed: 0, guidance: GuidanceConfig::none() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VceBlock {
    pub removal_t_star: Option<usize>,
    pub enforcing_t_star: Option<usize>,
    pub removal_scale: f64,
    pub enforcing_scale: f64,
    pub t_star_range: Option<(usize, usize)>,
    pub sampler: SamplerConfig,
    pub items_per_class: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for VceBlock {
    fn default() -> Self {
        // full-scale reference scales: 500 removal, 200 enforcing
        Self {
            removal_t_star: None,
            enforcing_t_star: None,
            removal_scale: 50.0,
            enforcing_scale: 50.0,
            t_star_range: None,
            sampler: SamplerConfig::default(),
            items_per_class: 100,
            batch: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub oracle: OracleConfig,
    pub auc_seed: u64,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self { oracle: OracleConfig::default(), auc_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Parent of the run directory; not part of the run identity.
    #[serde(default = "default_root")]
    pub output_root: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub latent: LatentConfig,
    #[serde(default)]
    pub autoencoder: AeTrainConfig,
    #[serde(default)]
    pub training: TrainConfig,
    /// Write a checkpoint every this many steps (0: final only).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub sampling: SamplingBlock,
    #[serde(default)]
    pub vce: VceBlock,
    #[serde(default)]
    pub eval: EvalBlock,
}

fn default_checkpoint_every() -> usize {
    1000
}

fn default_root() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks every block before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: jdl_core::Error| CliError::Config(e.to_string());
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        let d = &self.dataset;
        if d.n_train == 0 || d.n_test == 0 {
            return Err(CliError::Config("dataset splits must be nonempty".into()));
        }
        if let Some(p) = d.priors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CliError::Config(format!("class prior {p} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&d.label_fraction) {
            return Err(CliError::Config(format!("dataset label_fraction {} outside [0, 1]", d.label_fraction)));
        }
        if self.training.label_fraction != d.label_fraction {
            return Err(CliError::Config(format!(
                "training.label_fraction {} differs from dataset.label_fraction {}",
                self.training.label_fraction, d.label_fraction
            )));
        }
        let sched = self.schedule.build().map_err(cfg_err)?;
        self.model.validate().map_err(cfg_err)?;
        self.latent.validate().map_err(cfg_err)?;
        if self.latent.image_side != jdl_core::phantom::SIDE {
            return Err(CliError::Config(format!("latent.image_side must be {}", jdl_core::phantom::SIDE)));
        }
        let (ch, side) = self.model_input();
        if self.model.input_channels != ch || self.model.image_side != side {
            return Err(CliError::Config(format!(
                "model input must be ({ch}, {side}, {side}) for this latent setting, got ({}, {}, {})",
                self.model.input_channels, self.model.image_side, self.model.image_side
            )));
        }
        if self.model.num_classes != NUM_CLASSES {
            return Err(CliError::Config(format!("model.num_classes must be {NUM_CLASSES}")));
        }
        self.training.validate().map_err(cfg_err)?;
        self.sampling.guidance.validate(NUM_CLASSES).map_err(cfg_err)?;
        for (name, s) in [("sampling", &self.sampling.sampler), ("vce", &self.vce.sampler)] {
            if s.kind == SamplerKind::Ddim && (s.ddim_steps == 0 || s.ddim_steps > sched.steps()) {
                return Err(CliError::Config(format!("{name}.sampler.ddim_steps must lie in 1..={}", sched.steps())));
            }
            if s.clip_denoised.is_some_and(|c| !(c > 0.0)) {
                return Err(CliError::Config(format!("{name}.sampler.clip_denoised must be positive")));
            }
        }
        if self.sampling.batch == 0 || self.vce.batch == 0 {
            return Err(CliError::Config("batch sizes must be positive".into()));
        }
        for t in [self.removal_t_star(), self.enforcing_t_star()] {
            if t == 0 || t >= sched.steps() {
                return Err(CliError::Config(format!("vce t_star {t} must lie in (0, {})", sched.steps())));
            }
        }
        if !(self.vce.removal_scale >= 0.0 && self.vce.enforcing_scale >= 0.0) {
            return Err(CliError::Config("vce scales must be nonnegative".into()));
        }
        if self.eval.oracle.steps == 0 || self.eval.oracle.batch == 0 || self.autoencoder.batch == 0 {
            return Err(CliError::Config("oracle and autoencoder need positive steps and batch".into()));
        }
        Ok(())
    }

    /// Channels and side of the diffusion input.
    pub fn model_input(&self) -> (usize, usize) {
        if self.latent.enabled {
            (self.latent.channels, self.latent.latent_side())
        } else {
            (1, jdl_core::phantom::SIDE)
        }
    }

    pub fn removal_t_star(&self) -> usize {
        self.vce.removal_t_star.unwrap_or(((0.3 * self.schedule.steps as f64).round() as usize).max(1))
    }

    pub fn enforcing_t_star(&self) -> usize {
        self.vce.enforcing_t_star.unwrap_or(((0.2 * self.schedule.steps as f64).round() as usize).max(1))
    }

    /// Canonical serialisation, used for the echo and the run identity.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// First 12 hex digits of the SHA-256 of the canonical config without
    /// `output_root`.
    pub fn run_id(&self) -> String {
        let mut v = self.echo();
        v.as_object_mut().expect("object").remove("output_root");
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(self.run_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"schema": 1, "dataset": {"n_train": 10, "n_test": 5, "priors": [0.3, 0.3, 0.3], "label_fraction": 0.05, "seed": 1}}"#.into()
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(&minimal()).unwrap();
        assert_eq!(c.schedule.steps, 200);
        assert_eq!(c.latent.kl_weight, 1e-6);
        assert_eq!(c.training.batch_diffusion, 64);
        assert_eq!(c.removal_t_star(), 60);
        assert_eq!(c.enforcing_t_star(), 40);
    }

    #[test]
    fn echo_round_trips() {
        let c = ExperimentConfig::parse(&minimal()).unwrap();
        let again = ExperimentConfig::parse(&c.echo().to_string()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.run_id(), again.run_id());
        let moved = ExperimentConfig { output_root: "elsewhere".into(), ..c.clone() };
        assert_eq!(moved.run_id(), c.run_id());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_schema() {
        let typo = minimal().replace("\"seed\": 1}", "\"seed\": 1, \"sed\": 2}");
        assert!(matches!(ExperimentConfig::parse(&typo), Err(CliError::Config(_))));
        let v2 = minimal().replace("\"schema\": 1", "\"schema\": 2");
        assert!(matches!(ExperimentConfig::parse(&v2), Err(CliError::Config(_))));
        match ExperimentConfig::parse("{\"schema\": 1,\n \"dataset\": }") {
            Err(CliError::Config(m)) => assert!(m.contains("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn latent_shape_must_match_model() {
        let on = minimal().replace("\"schema\": 1,", "\"schema\": 1, \"latent\": {\"enabled\": true},");
        assert!(ExperimentConfig::parse(&on).is_err());
        let ok = minimal().replace(
            "\"schema\": 1,",
            "\"schema\": 1, \"latent\": {\"enabled\": true}, \"model\": {\"input_channels\": 2, \"image_side\": 16, \"base_channels\": 8, \"channel_multipliers\": [1, 2], \"num_res_blocks_per_stage\": 1, \"time_embed_dim\": 16, \"feature_cap\": 10000, \"classifier_hidden\": 32, \"num_classes\": 3},",
        );
        ExperimentConfig::parse(&ok).unwrap();
    }

    #[test]
    fn sampler_checks_apply_per_kind() {
        // DDPM ignores ddim_steps, so a short schedule is fine
        let short = minimal().replace("\"schema\": 1,", "\"schema\": 1, \"schedule\": {\"T\": 20, \"beta_start\": 0.001, \"beta_end\": 0.1},");
        ExperimentConfig::parse(&short).unwrap();
        let ddim = short.replace("\"schema\": 1,", "\"schema\": 1, \"vce\": {\"sampler\": {\"kind\": \"ddim\"}},");
        assert!(ExperimentConfig::parse(&ddim).is_err());
        let clip = minimal().replace("\"schema\": 1,", "\"schema\": 1, \"sampling\": {\"sampler\": {\"clip_denoised\": 0.0}},");
        assert!(ExperimentConfig::parse(&clip).is_err());
    }
}
