//! Line-oriented `key = value` configuration files.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{ClarError, Result};

/// Parsed key/value pairs, remembering the line each key came from.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ClarError::Format {
                line: line_no,
                msg: format!("expected `key = value`, found {line:?}"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(ClarError::Format { line: line_no, msg: "empty key".into() });
            }
            if entries.insert(key.clone(), (line_no, value.trim().to_string())).is_some() {
                return Err(ClarError::Format { line: line_no, msg: format!("duplicate key {key:?}") });
            }
        }
        Ok(KeyValues { entries })
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|_| ClarError::Format {
                line,
                msg: format!("invalid value {value:?} for {key}"),
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?.ok_or_else(|| ClarError::Config(format!("missing required key {key:?}")))
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(ClarError::Format { line, msg: format!("unknown key {key:?}") }),
        }
    }
}
