//! Run configuration: a TOML file merged over defaults, with command-line
//! overrides applied last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::birrt::ExpertParams;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::BenchParams;
use crate::sac::SacConfig;
use crate::taskgen::TaskGenParams;
use crate::trainer::{BcConfig, TrainConfig};

/// Names the config file used when `--config` is not given.
pub const CONFIG_ENV_VAR: &str = "MULTIARM_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub use_expert: bool,
    pub total_env_steps: usize,
    pub max_level: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            use_expert: t.use_expert,
            total_env_steps: t.total_env_steps,
            max_level: t.max_level,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Arm description file; the built-in UR5 when absent.
    pub arm: Option<PathBuf>,
    pub seed: u64,
    /// Parallel workers; 0 means one per logical core.
    pub workers: usize,
    pub taskgen: TaskGenParams,
    pub env: EnvConfig,
    pub expert: ExpertParams,
    pub sac: SacConfig,
    pub train: TrainSection,
    pub bc: BcConfig,
    pub bench: BenchParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arm: None,
            seed: 0,
            workers: 0,
            taskgen: TaskGenParams::default(),
            env: EnvConfig::default(),
            expert: ExpertParams::default(),
            sac: SacConfig::default(),
            train: TrainSection::default(),
            bc: BcConfig::default(),
            bench: BenchParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The explicit file if given, else the file named by the environment
    /// variable, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV_VAR) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override '{o}' is not of the form key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut root, &path, value).map_err(|m| Error::Usage(format!("override '{o}': {m}")))?;
        }
        *self = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sac: self.sac.clone(),
            env: self.env,
            use_expert: self.train.use_expert,
            total_env_steps: self.train.total_env_steps,
            max_level: self.train.max_level,
            workers: self.worker_count(),
            checkpoint_every: self.train.checkpoint_every,
            seed: self.seed,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = table;
    for p in parents {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(format!("'{p}' is not a section")),
            None => return Err(format!("unknown section '{p}'")),
        };
    }
    // Optional fields are omitted when unset, so only top-level keys may be new.
    if !cur.contains_key(*last) && !parents.is_empty() {
        return Err(format!("unknown key '{last}'"));
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

/// Contents of the provenance file written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub command: Vec<String>,
    pub config: RunConfig,
}

pub fn version_string() -> String {
    format!("multiarm {}", env!("CARGO_PKG_VERSION"))
}

/// Writes `<artifact>.run.toml` next to a file artifact, or `run.toml` inside
/// a directory artifact.
pub fn write_run_record(artifact: &Path, config: &RunConfig, command: &[String]) -> Result<PathBuf> {
    let path = if artifact.is_dir() {
        artifact.join("run.toml")
    } else {
        let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.toml");
        artifact.with_file_name(name)
    };
    let record = RunRecord { version: version_string(), command: command.to_vec(), config: config.clone() };
    let text = toml::to_string(&record).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
