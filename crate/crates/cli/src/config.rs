//! Settings resolution: command-line flags, then `MLAQP_*` environment
//! variables (both handled by clap), then the TOML config file, then
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub catalogue: Option<PathBuf>,
    pub bind: Option<String>,
    pub reload_interval_ms: Option<u64>,
    pub train: TrainFile,
    pub monitor: MonitorFile,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub miscoverage: Option<f64>,
    pub intervals: Option<bool>,
    pub calibration: Option<f64>,
    pub ensemble: Option<bool>,
    pub growth_threshold: Option<f64>,
    pub rounds: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: Option<usize>,
    pub quantile_rounds: Option<usize>,
    pub quantile_learning_rate: Option<f64>,
    pub cardinality_threshold: Option<usize>,
    pub min_pairs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorFile {
    pub alpha: Option<f64>,
    pub window: Option<usize>,
    pub check_every: Option<usize>,
    pub workload_bound: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Empty when no path is given.
    pub fn load_optional(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

/// First present of flag/env value and file value, else the default.
pub fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

pub fn require<T>(cli: Option<T>, file: Option<T>, name: &str) -> anyhow::Result<T> {
    cli.or(file)
        .ok_or_else(|| anyhow::anyhow!("missing `{name}`: pass the flag, set MLAQP_{}, or add it to the config file", name.to_uppercase()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
    }

    #[test]
    fn parses_sections() {
        let cfg: FileConfig = toml::from_str(
            "catalogue = \"cat\"\n[train]\nrounds = 20\n[monitor]\nalpha = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.catalogue.as_deref(), Some(Path::new("cat")));
        assert_eq!(cfg.train.rounds, Some(20));
        assert_eq!(cfg.monitor.alpha, Some(0.01));
        assert!(toml::from_str::<FileConfig>("nonsense = 1").is_err());
    }
}
