//! Flat `key = value` text used for config files and machine-readable
//! reports.
//!
//! Blank lines and lines starting with `#` are ignored. Floats are written
//! with 17 significant digits so they parse back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Bit-exact decimal form of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Builds a report, starting with the format version line.
#[derive(Clone, Debug)]
pub struct KvWriter {
    lines: Vec<String>,
}

impl Default for KvWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl KvWriter {
    pub fn new() -> Self {
        KvWriter {
            lines: vec![format!("format_version = {FORMAT_VERSION}")],
        }
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.lines.push(format!("{key} = {value}"));
        self
    }

    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.put(key, fmt_f64(value))
    }

    pub fn floats(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.put(key, joined.join(","))
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.lines.push(format!("# {text}"));
        self
    }

    pub fn finish(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.finish())?;
        Ok(())
    }
}

/// Parsed key-value file. Keys are consumed with the `take_*` methods and
/// [`KvMap::finish`] rejects whatever is left, so typos do not pass silently.
#[derive(Clone, Debug)]
pub struct KvMap {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
        }
        let mut map = KvMap {
            path: path.to_path_buf(),
            entries,
        };
        if let Some(v) = map.take::<u32>("format_version")? {
            if v != FORMAT_VERSION {
                return Err(Error::Config(format!(
                    "{}: unsupported format_version {v}",
                    path.display()
                )));
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn take_str(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                path: self.path.clone(),
                line,
                msg: format!("invalid value {v:?} for {key}"),
            }),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::Parse {
                    path: self.path.clone(),
                    line,
                    msg: format!("invalid list {v:?} for {key}"),
                }),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!(
                "{}: line {line}: unknown key {k:?}",
                self.path.display()
            ))),
        }
    }
}
