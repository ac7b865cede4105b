//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear once.
//! Lists are comma separated; ranges are written `min:max`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyValues {
    origin: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(
                    origin,
                    n + 1,
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(origin, n + 1, "empty key"));
            }
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::parse(origin, n + 1, format!("duplicate key `{key}`")));
            }
        }
        Ok(KeyValues {
            origin: origin.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn origin(&self) -> &Path {
        &self.origin
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::parse(&self.origin, *line, format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn err(&self, key: &str, msg: String) -> Error {
        let line = self.entries.get(key).map_or(0, |(l, _)| *l);
        Error::parse(&self.origin, line, format!("{key}: {msg}"))
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| self.err(key, format!("`{v}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse().map_err(|e| self.err(key, format!("`{item}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// List of `min:max` pairs.
    pub fn get_ranges<T: FromStr + Copy>(&self, key: &str) -> Result<Option<Vec<(T, T)>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|item| {
                let item = item.trim();
                let (a, b) = item
                    .split_once(':')
                    .ok_or_else(|| self.err(key, format!("`{item}` is not a min:max range")))?;
                let parse = |s: &str| s.trim().parse::<T>().map_err(|e| self.err(key, format!("`{s}`: {e}")));
                Ok((parse(a)?, parse(b)?))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn invalid(&self, key: &str, msg: impl Into<String>) -> Error {
        self.err(key, msg.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_lists_and_ranges() {
        let kv = KeyValues::parse(
            "# c\nlr0 = 0.01\n\nfreq=0.9, 0.1\nsizes = 4:8,10:20\nmode = unit\n",
            Path::new("x.cfg"),
        )
        .unwrap();
        assert_eq!(kv.get::<f64>("lr0").unwrap(), Some(0.01));
        assert_eq!(kv.get_list::<f64>("freq").unwrap(), Some(vec![0.9, 0.1]));
        assert_eq!(kv.get_ranges::<usize>("sizes").unwrap(), Some(vec![(4, 8), (10, 20)]));
        assert_eq!(kv.get_or("missing", 3usize).unwrap(), 3);
        assert_eq!(kv.raw("mode"), Some("unit"));
    }

    #[test]
    fn errors_name_the_line() {
        let e = KeyValues::parse("a = 1\nbroken\n", Path::new("x.cfg")).unwrap_err();
        assert_eq!(e.to_string(), "x.cfg:2: expected `key = value`, got `broken`");
        let kv = KeyValues::parse("a = 1\nb = nope\n", Path::new("x.cfg")).unwrap();
        assert!(kv.get::<f64>("b").unwrap_err().to_string().starts_with("x.cfg:2: b:"));
        assert!(kv
            .check_known(&["a"])
            .unwrap_err()
            .to_string()
            .contains("unknown key `b`"));
        assert!(KeyValues::parse("a = 1\na = 2\n", Path::new("x.cfg")).is_err());
    }
}
