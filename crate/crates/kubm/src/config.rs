//! Flat key-value configuration.
//!
//! Files are UTF-8 `key = value` lines; `#` starts a comment, blank lines
//! are skipped. Every key has a documented default and unknown keys are
//! rejected, so a typo fails loudly instead of silently falling back.
//! Precedence is defaults, then file, then command-line flags, and the
//! effective result can be dumped next to any output for exact re-runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{key}'")]
    UnknownKey { key: String },
    #[error("config line {line} is not a 'key = value' pair: {text:?}")]
    Malformed { line: usize, text: String },
    #[error("config key '{key}' has value {value:?}, expected {want}")]
    BadValue {
        key: String,
        value: String,
        want: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every key with its default value and a one-line description.
pub const KNOWN: &[(&str, &str, &str)] = &[
    ("seed", "0", "master random seed"),
    ("env.kind", "reach-grasp-move", "toy task: linear-coupled | reach-grasp-move | pendulum-push"),
    ("env.family", "vector", "observation family: vector | flow"),
    ("env.steps", "70", "episode length in executed transitions"),
    ("env.eps-task", "0.05", "success radius on the final object-goal distance"),
    ("demos.count", "30", "demonstrations to generate"),
    ("train.encoder-lr", "5e-4", "Adam rate for the lifting encoder"),
    ("train.koopman-lr", "5e-5", "Adam rate for the transition matrix"),
    ("train.horizon", "15", "multi-step prediction horizon"),
    ("train.epochs", "100", "training epochs"),
    ("train.batch-size", "32", "anchor states per batch"),
    ("train.hidden0", "128", "first encoder hidden width"),
    ("train.hidden1", "256", "second encoder hidden width"),
    ("train.psi-dim", "256", "learned coordinates appended to the latent"),
    ("train.identity-init", "true", "start the transition matrix at identity"),
    ("train.detach-targets", "true", "encode prediction targets without gradient"),
    ("train.truncate-tail", "true", "shorten horizons near trajectory ends"),
    ("train.clip-norm", "1.0", "global gradient-norm clip"),
    ("flow.epochs", "200", "flow autoencoder epochs"),
    ("flow.lr", "1e-3", "flow autoencoder learning rate"),
    ("flow.lr-decay", "0.99", "per-epoch learning-rate multiplier"),
    ("flow.batch-size", "64", "flow frames per batch"),
    ("trigger.tau", "0", "replan threshold; 0 calibrates from nominal episodes"),
    ("trigger.multiplier", "5", "calibration multiplier on the nominal p95 error"),
    ("trigger.persistence", "2", "consecutive over-threshold errors required"),
    ("trigger.mode", "absolute", "trigger rule: absolute | jump"),
    ("trigger.window", "5", "history window of the jump rule"),
    ("monitor.metric", "auto", "monitor metric: auto | cosine | flow-centroid"),
    ("metrics.bins", "100", "percentile bins for metric curves"),
    ("run.episodes", "10", "episodes per run"),
    ("run.mode", "monitored", "execution mode: open-loop | monitored"),
    ("run.noise", "0.02", "executor noise std for the noisy half of bench suites"),
    ("edmd.ridge", "0", "ridge strength for closed-form fits; 0 uses the pseudoinverse"),
    ("edmd.variant", "v1", "polynomial dictionary: v1 | v2 | v3"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KNOWN
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl Config {
    /// Overrides one key, rejecting anything not in [`KNOWN`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KNOWN.iter().any(|(k, _, _)| *k == key) {
            return Err(ConfigError::UnknownKey {
                key: key.to_string(),
            });
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies every assignment in a config file on top of current values.
    pub fn load_file<P: AsRef<Path>>(&mut self, path: P) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("lookup of key '{key}' missing from KNOWN"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, want: &'static str) -> Result<T, ConfigError> {
        let value = self.get_str(key);
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            want,
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.parse(key, "a real number")
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.parse(key, "a nonnegative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.parse(key, "a nonnegative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        self.parse(key, "true or false")
    }

    /// The effective configuration as a reloadable `key = value` file.
    pub fn effective(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Writes `config.effective` into the given directory.
    pub fn dump<P: AsRef<Path>>(&self, dir: P) -> Result<(), ConfigError> {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.as_ref().join("config.effective"), self.effective())?;
        Ok(())
    }

    /// One `key = default  # help` line per known key.
    pub fn describe() -> String {
        let mut out = String::new();
        let width = KNOWN.iter().map(|(k, d, _)| k.len() + d.len()).max().unwrap_or(0);
        for (k, d, help) in KNOWN {
            let pad = width - k.len() - d.len();
            let _ = writeln!(out, "{k} = {d}{:pad$}  # {help}", "");
        }
        out
    }
}
