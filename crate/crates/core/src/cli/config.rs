//! Run configuration: plain-text `key = value` files with `#` comments,
//! overlaid by command-line flags. Unknown keys are a hard error, and every
//! run records the resolved configuration it actually used.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use super::CliError;

#[derive(Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    consumed: RefCell<BTreeSet<String>>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(CliError::Config(format!("config line {}: empty key", lineno + 1)));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(CliError::Config(format!(
                    "config line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(Self {
            values,
            ..Default::default()
        })
    }

    /// Command-line override; replaces any file value.
    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn mark(&self, key: &str, effective: &str) {
        self.consumed.borrow_mut().insert(key.to_string());
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), effective.to_string());
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self
            .values
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string());
        self.mark(key, &v);
        v
    }

    pub fn get_opt_str(&self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if let Some(ref v) = v {
            self.mark(key, v);
        } else {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn require_str(&self, key: &str) -> Result<String, CliError> {
        self.get_opt_str(key)
            .ok_or_else(|| CliError::Config(format!("missing mandatory key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: ToString,
    {
        match self.values.get(key) {
            None => {
                self.mark(key, &default.to_string());
                Ok(default)
            }
            Some(raw) => {
                self.mark(key, raw);
                raw.parse::<T>().map_err(|_| {
                    CliError::Config(format!("key `{key}`: cannot parse `{raw}`"))
                })
            }
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.require_str(key)?;
        raw.parse::<T>()
            .map_err(|_| CliError::Config(format!("key `{key}`: cannot parse `{raw}`")))
    }

    /// Comma-separated list with surrounding whitespace trimmed.
    pub fn get_list(&self, key: &str, default: &str) -> Vec<String> {
        self.get_str(key, default)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Unknown keys are a hard error: every supplied key must have been
    /// consumed by the subcommand.
    pub fn ensure_all_consumed(&self) -> Result<(), CliError> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list = unknown
                .iter()
                .map(|s| format!("`{s}`"))
                .collect::<Vec<_>>()
                .join(", ");
            Err(CliError::Config(format!("unknown config keys: {list}")))
        }
    }

    /// The effective configuration (defaults included), one `key = value`
    /// line per consumed key, sorted.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved.borrow().iter() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let cfg = RunConfig::from_text(
            "# header\n\nsteps = 100  # trailing\n lr = 0.5 \n",
        )
        .unwrap();
        assert_eq!(cfg.get::<usize>("steps", 1).unwrap(), 100);
        assert_eq!(cfg.get::<f64>("lr", 0.0).unwrap(), 0.5);
        cfg.ensure_all_consumed().unwrap();
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(RunConfig::from_text("just words\n").is_err());
        assert!(RunConfig::from_text("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let cfg = RunConfig::from_text("known = 1\nmystery = 2\n").unwrap();
        let _ = cfg.get::<usize>("known", 0).unwrap();
        let err = cfg.ensure_all_consumed().unwrap_err();
        match err {
            CliError::Config(msg) => assert!(msg.contains("mystery"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_mandatory_key_is_named() {
        let cfg = RunConfig::from_text("").unwrap();
        match cfg.require::<u64>("model.rng_seed") {
            Err(CliError::Config(msg)) => assert!(msg.contains("model.rng_seed")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resolved_text_includes_defaults() {
        let cfg = RunConfig::from_text("steps = 7\n").unwrap();
        let _ = cfg.get::<usize>("steps", 1).unwrap();
        let _ = cfg.get::<f64>("lr", 0.25).unwrap();
        let text = cfg.resolved_text();
        assert!(text.contains("steps = 7"));
        assert!(text.contains("lr = 0.25"));
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = RunConfig::from_text("steps = 7\n").unwrap();
        cfg.set("steps", "9");
        assert_eq!(cfg.get::<usize>("steps", 1).unwrap(), 9);
    }
}
