//! Run configuration: UTF-8 `key = value` lines, `#` comments, and
//! `[data]`, `[filter]`, `[train]`, `[score]`, `[sweep]` sections. Keys
//! before the first section are global (`seed`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

const SECTIONS: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    ("data", &["id_train", "id_val", "id_test", "candidates", "classes", "classes_file", "normalize"]),
    (
        "filter",
        &["kind", "k", "delta", "p", "direction", "noise_variance", "stats", "virtual_samples", "virtual_keep"],
    ),
    (
        "train",
        &["lambda", "epochs", "batch_id", "batch_oe", "lr", "betas", "eps", "noise_variance", "shuffle", "outliers"],
    ),
    ("score", &["kind", "temperature", "tpr", "head", "dump_scores"]),
    ("sweep", &["param", "values"]),
];

/// Parsed configuration. Values stay as written; typed access goes through
/// [`Config::get`] and friends so error messages can name the key.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    base: PathBuf,
}

fn key_name(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn known(section: &str, key: &str) -> bool {
    if section == "data" && key.strip_prefix("ood.").is_some_and(|n| !n.is_empty()) {
        return true;
    }
    SECTIONS.iter().any(|(s, keys)| *s == section && keys.contains(&key))
}

impl Config {
    /// Parses `text`; relative paths will resolve against `base`.
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self, CliError> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::config(format!("line {lineno}: unterminated section header")))?
                    .trim();
                if name.is_empty() || !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(CliError::config(format!("line {lineno}: unknown section [{name}]")));
                }
                current = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {lineno}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !known(&current, key) {
                return Err(CliError::config(format!("line {lineno}: unknown key '{}'", key_name(&current, key))));
            }
            let section = sections.entry(current.clone()).or_default();
            if section.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::config(format!("line {lineno}: duplicate key '{}'", key_name(&current, key))));
            }
        }
        Ok(Config { sections, base: base.into() })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::config(format!("bad value for '{}': '{v}' ({e})", key_name(section, key)))),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, CliError> {
        self.raw(section, key)
            .ok_or_else(|| CliError::config(format!("missing required key '{}'", key_name(section, key))))
    }

    /// Resolves a path relative to the config file's directory.
    pub fn path(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Comma-separated list, blanks dropped.
    pub fn list(&self, section: &str, key: &str) -> Vec<String> {
        self.raw(section, key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    }

    /// `ood.<name>` entries of `[data]`, sorted by name.
    pub fn ood_sets(&self) -> Vec<(String, String)> {
        self.sections
            .get("data")
            .map(|d| {
                d.iter()
                    .filter_map(|(k, v)| k.strip_prefix("ood.").map(|n| (n.to_string(), v.clone())))
                    .filter(|(_, v)| !v.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_or("", "seed", 0)
    }

    /// Every key as written, for the manifest.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.sections
            .iter()
            .flat_map(|(s, kv)| kv.iter().map(move |(k, v)| (key_name(s, k), v.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_globals() {
        let c = Config::parse(
            "seed = 7 # master\n[data]\nid_train = a.emb\nood.near = n.emb\n\n[train]\nlambda=0.25\n",
            "/cfg",
        )
        .unwrap();
        assert_eq!(c.seed().unwrap(), 7);
        assert_eq!(c.require("data", "id_train").unwrap(), "a.emb");
        assert_eq!(c.get::<f64>("train", "lambda").unwrap(), Some(0.25));
        assert_eq!(c.ood_sets(), vec![("near".to_string(), "n.emb".to_string())]);
        assert_eq!(c.path("a.emb"), PathBuf::from("/cfg/a.emb"));
        assert_eq!(c.snapshot().get("train.lambda").map(String::as_str), Some("0.25"));
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in ["[nope]\n", "[data\n", "just words\n", "[data]\nbogus = 1\n", "seed = 1\nseed = 2\n", "[data]\nood. = x\n"] {
            assert!(Config::parse(bad, ".").is_err(), "{bad:?}");
        }
    }

    #[test]
    fn missing_key_is_named() {
        let c = Config::parse("[data]\n", ".").unwrap();
        let e = c.require("data", "id_train").unwrap_err();
        assert!(e.to_string().contains("data.id_train"));
        assert_eq!(e.exit_code(), 2);
    }
}
