//! TOML run configuration: file paths, a global seed and the experiment
//! settings. Unknown keys are rejected all at once, each with its full path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wsmatch::experiment::ExperimentConfig;
use wsmatch::training::Objective;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub annotator: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every seed inside `experiment`.
    pub seed: u64,
    /// Objective for `train` when `--objective` is absent.
    pub objective: Option<Objective>,
    pub paths: Paths,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            objective: None,
            paths: Paths::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| wsmatch::Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let known = toml::Value::try_from(key_template()).map_err(|e| CliError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        collect_unknown(&value, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
        }
        value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// A configuration with every optional field set, so that its serialized
/// form names every accepted key.
fn key_template() -> RunConfig {
    let p = || Some(PathBuf::new());
    let mut c = RunConfig {
        objective: Some(Objective::Ws),
        paths: Paths {
            out: p(),
            corpus: p(),
            test: p(),
            oracle: p(),
            vocab: p(),
            index: p(),
            annotator: p(),
            candidates: p(),
            init: p(),
            model: p(),
            records: p(),
        },
        ..RunConfig::default()
    };
    let e = &mut c.experiment;
    e.annotator_training.clip_norm = Some(1.0);
    e.baseline.epsilon = Some(0.5);
    e.fine_tune.epsilon = Some(0.5);
    e.normalize.cap = Some(1.0);
    c
}

fn collect_unknown(value: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(table), Some(known_table)) = (value.as_table(), known.as_table()) else {
        return;
    };
    for (key, v) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match known_table.get(key) {
            Some(k) => collect_unknown(v, k, &path, out),
            None => out.push(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_unknown_key_is_listed() {
        let err = RunConfig::parse("sede = 3\n[experiment]\nn = 5\nbogus = 1\n[experiment.matcher]\nhiden = 4\n")
            .unwrap_err()
            .to_string();
        for key in ["sede", "experiment.bogus", "experiment.matcher.hiden"] {
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = RunConfig::parse("seed = 17\n[experiment.matcher]\narch = \"cnn\"\n").unwrap();
        assert_eq!(c.seed, 17);
        assert_eq!(c.experiment.matcher.arch.to_string(), "cnn");
        assert_eq!(c.experiment.n, ExperimentConfig::default().n);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = key_template();
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }
}
