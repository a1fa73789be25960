//! Flat `key = value` configuration files.
//!
//! One entry per line. `#` starts a comment, blank lines are ignored, and a
//! line `include <path>` splices in another file (resolved relative to the
//! including file) at that point. Later assignments override earlier ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    origin: String,
    /// Directory relative paths in the value resolve against.
    base: PathBuf,
}

impl RawConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut stack = Vec::new();
        cfg.load_into(path.as_ref(), &mut stack)?;
        Ok(cfg)
    }

    /// Parses text with no file behind it; includes resolve against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<string>", base, &mut Vec::new())?;
        Ok(cfg)
    }

    fn load_into(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<(), CliError> {
        let canonical = fs::canonicalize(path)
            .map_err(|e| CliError::Io(format!("cannot open config {}: {e}", path.display())))?;
        if stack.contains(&canonical) {
            return Err(CliError::Config(format!(
                "include cycle through {}",
                path.display()
            )));
        }
        let text = fs::read_to_string(&canonical)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let base = canonical.parent().map(Path::to_path_buf).unwrap_or_default();
        stack.push(canonical.clone());
        let name = path.display().to_string();
        self.apply_text(&text, &name, &base, stack)?;
        stack.pop();
        Ok(())
    }

    fn apply_text(
        &mut self,
        text: &str,
        name: &str,
        base: &Path,
        stack: &mut Vec<PathBuf>,
    ) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{name}:{}", lineno + 1);
            if let Some(rest) = line.strip_prefix("include") {
                if rest.starts_with(char::is_whitespace) {
                    let target = base.join(rest.trim());
                    self.load_into(&target, stack)?;
                    continue;
                }
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}: expected key = value, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(CliError::Config(format!("{origin}: bad key {key:?}")));
            }
            self.entries.insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    origin,
                    base: base.to_path_buf(),
                },
            );
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.into(),
                origin: "command line".into(),
                base: PathBuf::new(),
            },
        );
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// A path value, resolved against the directory of the file that set it.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(|e| e.base.join(&e.value))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` with `FromStr`, naming the offending line on failure.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| {
                CliError::Config(format!("{}: {key} = {:?}: {err}", e.origin, e.value))
            }),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some("true" | "yes" | "on" | "1") => Ok(Some(true)),
            Some("false" | "no" | "off" | "0") => Ok(Some(false)),
            Some(other) => Err(CliError::Config(format!(
                "{}: {key} must be a boolean, got {other:?}",
                self.entries[key].origin
            ))),
        }
    }

    /// Comma-separated list.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }
}
