//! Run directory layout, overwrite policy and the timestamped log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const DATA_DIR: &str = "data";
pub const AE_DIR: &str = "ae";
pub const ORACLE_DIR: &str = "oracle";
pub const MODEL_DIR: &str = "model";
pub const EVAL_AUC_DIR: &str = "eval-auc";
pub const REPORT_DIR: &str = "report";
pub const LOG_FILE: &str = "log.txt";
pub const CONFIG_ECHO: &str = "config.json";

pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Run {
    /// `root` overrides the config's `output_root`.
    pub fn open(config_path: &Path, root: Option<&Path>) -> CliResult<Self> {
        let cfg = ExperimentConfig::load(config_path)?;
        Ok(Self::from_config(cfg, root))
    }

    pub fn from_config(cfg: ExperimentConfig, root: Option<&Path>) -> Self {
        let dir = match root {
            Some(r) => r.join(cfg.run_id()),
            None => cfg.run_dir(),
        };
        Self { cfg, dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Creates a fresh output directory with the config echo inside. Refuses
    /// to touch an existing one.
    pub fn create_output(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            return Err(CliError::Config(format!("{} already exists; outputs are never overwritten", p.display())));
        }
        std::fs::create_dir_all(&p)?;
        self.write_echo(&p)?;
        Ok(p)
    }

    pub fn write_echo(&self, dir: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(&self.cfg.echo())?;
        text.push('\n');
        std::fs::write(dir.join(CONFIG_ECHO), text)?;
        Ok(())
    }

    /// Existing artifact path, or `Missing` with a hint naming the command
    /// that produces it.
    pub fn require(&self, rel: &str, producer: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(CliError::Missing(format!("{} not found; run `jdl {producer}` with this config first", p.display())));
        }
        Ok(p)
    }

    /// Appends a timestamped line to the run log and echoes it to stderr.
    /// Timestamps appear nowhere else.
    pub fn log(&self, msg: &str) {
        eprintln!("{msg}");
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        if std::fs::create_dir_all(&self.dir).is_ok() {
            if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(self.path(LOG_FILE)) {
                let _ = writeln!(f, "[{secs:.3}] {msg}");
            }
        }
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Missing(format!("unreadable {}: {e}", path.display())))
}

/// Worker cap from `JDL_THREADS`. Kernels are single-threaded, so any valid
/// value is accepted and only malformed ones are errors.
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var("JDL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("JDL_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}
