//! Declarative experiment configuration (TOML).
//!
//! Every key is optional; command-line flags override the file and the file
//! overrides the built-in defaults. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub format: Option<String>,
    pub out: Option<PathBuf>,
    pub force: Option<bool>,
    #[serde(default)]
    pub errors: ErrorsSection,
    #[serde(default)]
    pub traces: TracesSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub thresholds: ThresholdsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    pub max_abs: Option<f64>,
    pub rmse: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorsSection {
    pub interval: Option<[f64; 2]>,
    pub step: Option<f64>,
    pub kinds: Option<Vec<String>>,
    /// Optional assertion block, keyed by activation name.
    #[serde(default)]
    pub bounds: BTreeMap<String, Bound>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracesSection {
    pub interval: Option<[f64; 2]>,
    pub step: Option<f64>,
    pub kinds: Option<Vec<String>>,
    pub unprotected: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub interval: Option<[f64; 2]>,
    pub step: Option<f64>,
    pub kinds: Option<Vec<String>>,
    pub variant: Option<String>,
    pub reps: Option<u32>,
    pub clock: Option<String>,
    pub delay: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub classes: Option<Vec<String>>,
    pub n_prof: Option<usize>,
    pub n_max: Option<usize>,
    pub trials: Option<usize>,
    pub countermeasure: Option<String>,
    pub delay: Option<String>,
    pub jitter_cycles: Option<u32>,
    pub history_trials: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsSection {
    pub tolerance: Option<f64>,
    pub sweep: Option<bool>,
    pub interval: Option<[f64; 2]>,
    pub step: Option<f64>,
    pub gelu_candidates: Option<Vec<f32>>,
    pub swish_candidates: Option<Vec<f32>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<ConfigFile, toml::de::Error> {
        toml::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_example() {
        let cfg = ConfigFile::parse(
            r#"
            seed = 7
            format = "json"
            [errors]
            interval = [-8.0, 8.0]
            step = 0.01
            [errors.bounds.sigmoid]
            max_abs = 1.2e-5
            [attack]
            classes = ["relu", "sigmoid", "tanh"]
            delay = "uniform:2.0:17.6"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.errors.interval, Some([-8.0, 8.0]));
        assert_eq!(cfg.errors.bounds["sigmoid"].max_abs, Some(1.2e-5));
        assert_eq!(cfg.attack.delay.as_deref(), Some("uniform:2.0:17.6"));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ConfigFile::parse("sed = 1").is_err());
        assert!(ConfigFile::parse("[attack]\nn_prof = 10\nbogus = 1").is_err());
        assert!(ConfigFile::parse("[errors.bounds.tanh]\nmax = 1.0").is_err());
    }
}
