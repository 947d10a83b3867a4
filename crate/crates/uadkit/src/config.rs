//! Flat `key=value` configuration files: one pair per line, `#` comments,
//! no nesting. The same format is used for run manifests so configs and
//! manifests diff cleanly.

use crate::error::ConfigError;
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    pairs: Vec<(String, String)>,
    map: HashMap<String, String>,
    consumed: std::cell::RefCell<HashSet<String>>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = FlatConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    line: lineno + 1,
                    text: line.to_string(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            cfg.map.insert(key.clone(), value.clone());
            cfg.pairs.push((key, value));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.map.get(key).map(|s| s.as_str())
    }

    /// Parsed value or the given default when the key is absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
                key: key.to_string(),
                detail: e.to_string(),
            }),
        }
    }

    /// Parsed value; the key must be present.
    pub fn require<T: FromStr>(&self, key: &'static str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Err(ConfigError::MissingKey(key)),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
                key: key.to_string(),
                detail: e.to_string(),
            }),
        }
    }

    /// Fails on any key that was never read; catches typos in config files.
    pub fn reject_unknown(&self) -> Result<(), ConfigError> {
        let consumed = self.consumed.borrow();
        for (key, _) in &self.pairs {
            if !consumed.contains(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }
}

/// Serializes pairs in the flat format.
pub fn to_flat_string(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blank_lines() {
        let cfg = FlatConfig::parse("# header\n\nepochs = 30\nseed=7\n").unwrap();
        assert_eq!(cfg.get_or("epochs", 0usize).unwrap(), 30);
        assert_eq!(cfg.require::<u64>("seed").unwrap(), 7);
        assert!(cfg.reject_unknown().is_ok());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = FlatConfig::parse("a=1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let cfg = FlatConfig::parse("epochs=5\nepochz=7\n").unwrap();
        cfg.get_or("epochs", 0usize).unwrap();
        let err = cfg.reject_unknown().unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "epochz"));
    }

    #[test]
    fn missing_and_invalid_values() {
        let cfg = FlatConfig::parse("lr=fast\n").unwrap();
        assert!(matches!(
            cfg.require::<u32>("epochs"),
            Err(ConfigError::MissingKey("epochs"))
        ));
        assert!(matches!(
            cfg.get_or("lr", 0.1f64),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn round_trips_through_flat_string() {
        let pairs = vec![
            ("command".to_string(), "train".to_string()),
            ("seed".to_string(), "42".to_string()),
        ];
        let text = to_flat_string(&pairs);
        let cfg = FlatConfig::parse(&text).unwrap();
        assert_eq!(cfg.pairs(), pairs.as_slice());
    }

    #[test]
    fn later_duplicate_key_wins() {
        let cfg = FlatConfig::parse("seed=1\nseed=2\n").unwrap();
        assert_eq!(cfg.require::<u64>("seed").unwrap(), 2);
    }
}
