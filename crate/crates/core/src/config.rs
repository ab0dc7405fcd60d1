//! Experiment configuration: a TOML file of one-level tables whose values
//! are kept as strings and interpreted by the consumer.
//!
//! ```text
//! # comment
//! [experiment]
//! seed = 13
//! models = ["ce-lookup", "st-charcnn"]
//! ```
//!
//! Keys outside any table belong to the section named `""`. Arrays are
//! joined with commas, so `models = "ce-lookup, st-charcnn"` is equivalent
//! to the array form. Nested tables are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;
use toml::Value;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("override {0:?} is not of the form section.key=value")]
    BadOverride(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

fn scalar_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Integer(i) => Some(i.to_string()),
        Value::Float(f) => Some(f.to_string()),
        Value::Boolean(b) => Some(b.to_string()),
        Value::Array(items) => items.iter().map(scalar_text).collect::<Option<Vec<_>>>().map(|v| v.join(",")),
        Value::Datetime(_) | Value::Table(_) => None,
    }
}

/// Values that TOML reads back as the same number or boolean are written
/// bare; everything else is quoted.
fn toml_literal(value: &str) -> String {
    let numeric = !value.is_empty()
        && value.chars().all(|c| c.is_ascii_digit() || "+-.eE_".contains(c))
        && value.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '+');
    let bare = value == "true" || value == "false" || numeric && format!("x = {value}").parse::<toml::Table>().is_ok();
    if bare {
        value.to_string()
    } else {
        Value::String(value.to_string()).to_string()
    }
}

impl ConfigFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        let unsupported = |key: &str| ConfigError::Parse {
            line: text.lines().position(|l| l.contains(key)).map_or(0, |i| i + 1),
            msg: format!("unsupported value for {key:?}"),
        };
        let mut cfg = Self::new();
        for (name, value) in &table {
            match value {
                Value::Table(entries) => {
                    let section = cfg.sections.entry(name.clone()).or_default();
                    for (k, v) in entries {
                        section.insert(k.clone(), scalar_text(v).ok_or_else(|| unsupported(k))?);
                    }
                }
                other => {
                    let text = scalar_text(other).ok_or_else(|| unsupported(name))?;
                    cfg.sections.entry(String::new()).or_default().insert(name.clone(), text);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::File {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, section: &str, key: &str) -> Option<String> {
        self.sections.get_mut(section)?.remove(key)
    }

    /// Apply a command-line override `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadOverride(spec.to_string());
        let (path, value) = spec.split_once('=').ok_or_else(bad)?;
        let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
        if section.is_empty() || key.is_empty() {
            return Err(bad());
        }
        self.set(section, key, value.trim());
        Ok(())
    }

    pub fn sections(&self) -> &BTreeMap<String, BTreeMap<String, String>> {
        &self.sections
    }

    /// Canonical TOML text: sections and keys in sorted order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let write = |entries: &BTreeMap<String, String>, out: &mut String| {
            for (k, v) in entries {
                let key = if k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    k.clone()
                } else {
                    Value::String(k.clone()).to_string()
                };
                out.push_str(&format!("{key} = {}\n", toml_literal(v)));
            }
        };
        if let Some(top) = self.sections.get("") {
            write(top, &mut out);
        }
        for (name, entries) in self.sections.iter().filter(|(n, _)| !n.is_empty()) {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{name}]\n"));
            write(entries, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_overrides() {
        let mut c =
            ConfigFile::parse("top = 1\n# note\n[a]\nx = 2 # trailing\n y=\"hello world\" \nz = [\"p\", \"q\"]\n\n[b]\nx=3.5\n").unwrap();
        assert_eq!(c.get("", "top"), Some("1"));
        assert_eq!(c.get("a", "x"), Some("2"));
        assert_eq!(c.get("a", "y"), Some("hello world"));
        assert_eq!(c.get("a", "z"), Some("p,q"));
        assert_eq!(c.get("b", "x"), Some("3.5"));
        assert_eq!(c.get("b", "y"), None);
        c.apply_override("a.x = 9").unwrap();
        c.apply_override("c.z=ok").unwrap();
        assert_eq!(c.get("a", "x"), Some("9"));
        assert_eq!(c.get("c", "z"), Some("ok"));
        assert!(c.apply_override("nodot=1").is_err());
        assert!(c.apply_override("a.x").is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in ["[a\nx=1", "[a]\njust words", "[a]\nx=1\nx=2", "[]\n", "[a]\n=3", "[a.b]\nx=1", "[a]\nd=1979-05-27"] {
            assert!(ConfigFile::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = ConfigFile::parse("[z]\nb=2\na=1e-3\n[a]\nk = \"v w\"\n").unwrap();
        c.set("z", "t", "true");
        c.set("z", "n", "1-2");
        let text = c.to_text();
        assert_eq!(text, "[a]\nk = \"v w\"\n\n[z]\na = 0.001\nb = 2\nn = \"1-2\"\nt = true\n");
        assert_eq!(ConfigFile::parse(&text).unwrap(), c);
    }
}
