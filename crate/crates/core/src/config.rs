//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{FddmError, Result};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed entries; every key must be consumed before [`KeyValues::finish`].
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(FddmError::Config(format!("line {line}: expected `key = value`, got `{content}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(FddmError::Config(format!("line {line}: empty key")));
            }
            let entry = Entry {
                value: v.to_string(),
                line,
            };
            if let Some(prev) = entries.insert(k.to_string(), entry) {
                return Err(FddmError::Config(format!(
                    "line {line}: duplicate key `{k}` (first set on line {})",
                    prev.line
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                FddmError::Config(format!("line {}: cannot parse `{}` for key `{key}`", e.line, e.value))
            }),
        }
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| FddmError::Config(format!("line {}: cannot parse list `{}` for key `{key}`", e.line, e.value))),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some((k, e)) => Err(FddmError::Config(format!("line {}: unknown key `{k}`", e.line))),
        }
    }
}
