//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored, as is anything
//! after a ` #` on a value line. Keys may appear once. Every key must be
//! consumed by the reader, so typos surface as errors with a line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find(" #") {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::ConfigParse {
                path: path.clone(),
                line,
                msg,
            };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if let Some((_, first)) = entries.get(key) {
                return Err(err(format!("duplicate key {key:?} (first set on line {first})")));
            }
            entries.insert(key.to_string(), (value.to_string(), line));
        }
        Ok(KeyValues { path, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Remove and parse `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((value, line)) = self.entries.remove(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|e: T::Err| Error::ConfigParse {
            path: self.path.clone(),
            line,
            msg: format!("bad value {value:?} for {key}: {e}"),
        })
    }

    /// Like [`take`](Self::take), writing into `slot` when the key exists.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fail on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::ConfigParse {
                path: self.path,
                line,
                msg: format!("unknown key {key:?}"),
            }),
        }
    }
}
