//! Flat `key = value` run configuration, merged under command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lca_core::LcaError;

pub const SEED_ENV: &str = "NEURON_LCA_SEED";

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "jobs",
    "mode",
    "data-dir",
    "manifest",
    "train-activations",
    "dev-activations",
    "test-activations",
    "train-labels",
    "dev-labels",
    "test-labels",
    "epochs",
    "batch-size",
    "learning-rate",
    "standardize",
    "no-bias",
    "lambda1",
    "lambda2",
    "lambdas",
    "mass-fraction",
    "score-alpha",
    "score-beta",
    "alpha-step",
    "start-p",
    "delta",
    "step-percent",
    "max-percent",
    "ablation-percent",
    "accept-p",
    "no-control",
];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, LcaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LcaError::InvalidConfig(format!("{}: {e}", path.display())))?;
        ConfigFile::parse(&text)
            .map_err(|e| LcaError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<ConfigFile, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            let key = key.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(format!("line {}: unknown key {key:?}", i + 1));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// The flag value when given, else the parsed config entry.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, LcaError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| LcaError::InvalidConfig(format!("{key} = {v:?}: {e}"))),
        }
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, LcaError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Boolean switches: set by the flag or by `key = true` in the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool, LcaError> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }

    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.or_else(|| self.raw(key).map(PathBuf::from))
    }

    /// flag > config file > `NEURON_LCA_SEED` > 0
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, LcaError> {
        if let Some(s) = self.pick(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|e| LcaError::InvalidConfig(format!("{SEED_ENV}={v:?}: {e}"))),
            Err(_) => Ok(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_merges() {
        let c = ConfigFile::parse("# run\nseed = 7\nlambda_1 = 1e-3\n\nepochs=3\n");
        assert!(c.is_err());
        let c = ConfigFile::parse("# run\nseed = 7\nlambda1 = 1e-3\n\nepochs=3\n").unwrap();
        assert_eq!(c.seed(None).unwrap(), 7);
        assert_eq!(c.seed(Some(2)).unwrap(), 2);
        assert_eq!(c.pick::<f64>(None, "lambda1").unwrap(), Some(1e-3));
        assert_eq!(c.pick_or::<usize>(Some(5), "epochs", 10).unwrap(), 5);
        assert_eq!(c.pick_or::<usize>(None, "batch-size", 512).unwrap(), 512);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(ConfigFile::parse("seed 7").is_err());
        assert!(ConfigFile::parse("colour = red").is_err());
        let c = ConfigFile::parse("epochs = many").unwrap();
        assert!(c.pick::<usize>(None, "epochs").is_err());
    }
}
