//! `key = value` configuration files. Command-line flags override them.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key a config file may set; the spelling is the long flag name with
/// dashes turned into underscores.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "manifest",
    "checkpoint",
    "checkpoint_u",
    "checkpoint_s",
    "store",
    "store_u",
    "store_s",
    "image",
    "k",
    "w_unsup",
    "epochs",
    "batch_size",
    "base_lr",
    "plan",
    "proj_width",
    "val_fraction",
    "split",
    "classes",
    "samples",
    "size",
    "jitter",
    "gamma",
    "gain",
    "augment",
    "batch",
];

#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected `key = value`", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(CliError::Usage(format!(
                    "config line {}: unknown key `{k}`",
                    n + 1
                )));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Usage(format!(
                    "config line {}: key `{k}` set twice",
                    n + 1
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| glyphsieve::Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// The flag value if given, else the config value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Like [`Settings::pick`] but a missing value is a usage error naming
    /// the flag.
    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        self.pick(flag, key)?.ok_or_else(|| {
            CliError::Usage(format!("missing required flag --{}", key.replace('_', "-")))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let s = Settings::parse("# comment\nepochs = 7\nbase_lr=0.1\n").unwrap();
        assert_eq!(s.or(None, "epochs", 1usize).unwrap(), 7);
        assert_eq!(s.or(Some(3usize), "epochs", 1).unwrap(), 3);
        assert_eq!(s.or(None, "k", 5usize).unwrap(), 5);
        assert!(s.pick::<usize>(None, "base_lr").is_err());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Settings::parse("epoch = 3").is_err());
        assert!(Settings::parse("epochs 3").is_err());
        assert!(Settings::parse("k = 1\nk = 2").is_err());
    }

    #[test]
    fn require_names_flag() {
        let err = Settings::default()
            .require::<String>(None, "checkpoint_u")
            .unwrap_err();
        assert!(err.to_string().contains("--checkpoint-u"));
    }
}
