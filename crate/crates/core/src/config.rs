//! Flat `key = value` experiment files.
//!
//! ```text
//! # cascade-mean settings
//! seed = 7
//! depths = 8, 16
//! floor = 1e-3
//! ```
//!
//! Blank lines and lines starting with `#` are skipped. Lists are comma
//! separated. Keys an experiment does not declare are rejected. In a battery
//! file, keys of a member experiment are written `<experiment-id>.<key>`.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value pairs together with the keys consumed so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, String>,
    taken: Vec<String>,
}

impl Params {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Schema(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)));
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Schema(format!("line {}: bad key `{key}`", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Schema(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries, taken: Vec::new() })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            entries: pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            taken: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.entries.get(key).cloned();
        if v.is_some() {
            self.taken.push(key.to_string());
        }
        v
    }

    /// Scalar value, or `default` when the key is absent.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Schema(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn take_list<T: FromStr + Clone>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => {
                let items = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Schema(format!("`{key}`: cannot parse `{s}`"))))
                    .collect::<Result<Vec<T>>>()?;
                if items.is_empty() {
                    return Err(Error::Schema(format!("`{key}` is empty")));
                }
                Ok(items)
            }
        }
    }

    /// The entries under `prefix.`, with the prefix stripped. They count as
    /// consumed here.
    pub fn section(&mut self, prefix: &str) -> Params {
        let dotted = format!("{prefix}.");
        let mut sub = Params::default();
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        for k in keys {
            let v = self.raw(&k).unwrap();
            sub.entries.insert(k[dotted.len()..].to_string(), v);
        }
        sub
    }

    /// Fails on any key that was never taken.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> =
            self.entries.keys().filter(|k| !self.taken.contains(k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let mut p = Params::parse("# c\nseed = 7\n\ndepths = 8, 16\nfloor=1e-3\nextra = 1\n").unwrap();
        assert_eq!(p.take("seed", 0u64).unwrap(), 7);
        assert_eq!(p.take_list("depths", &[1u32]).unwrap(), vec![8, 16]);
        assert_eq!(p.take("floor", 0.0).unwrap(), 1e-3);
        assert_eq!(p.take("missing", 2.5).unwrap(), 2.5);
        assert!(matches!(p.finish(), Err(Error::Schema(m)) if m.contains("extra")));
    }

    #[test]
    fn bad_lines_are_schema_errors() {
        assert!(matches!(Params::parse("seed 7"), Err(Error::Schema(_))));
        assert!(matches!(Params::parse("a = 1\na = 2"), Err(Error::Schema(_))));
        let mut p = Params::parse("seed = x").unwrap();
        assert!(matches!(p.take("seed", 0u64), Err(Error::Schema(_))));
    }

    #[test]
    fn sections_strip_prefixes() {
        let mut p = Params::parse("renewal.reps = 10\nmeander.n = 64\nseed = 1").unwrap();
        let mut r = p.section("renewal");
        assert_eq!(r.take("reps", 0u64).unwrap(), 10);
        r.finish().unwrap();
        p.take("seed", 0u64).unwrap();
        assert!(p.finish().is_err());
        p.section("meander");
        p.finish().unwrap();
    }
}
