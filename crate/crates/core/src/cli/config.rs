//! Flat `key=value` configuration files and per-key provenance.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Flag => "flag",
            Source::Env => "env",
            Source::File => "config",
            Source::Default => "default",
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let k = k.trim().replace('_', "-");
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

/// Resolves settings with precedence flag > env > file > default and keeps
/// a record of where each value came from.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    used: Vec<(String, String, Source)>,
}

impl Resolver {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Resolver { file, used: Vec::new() }
    }

    pub fn from_path(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Ok(Self::new(parse_kv(&std::fs::read_to_string(p)?)?)),
        }
    }

    pub fn record(&mut self, key: &str, value: impl Display, source: Source) {
        self.used.push((key.to_string(), value.to_string(), source));
    }

    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, env: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display + Clone,
    {
        let (value, source) = if let Some(v) = flag {
            (v, Source::Flag)
        } else if let Some(v) = env {
            (v, Source::Env)
        } else if let Some(raw) = self.file.get(key) {
            let v = raw
                .parse::<T>()
                .map_err(|_| Error::Config(format!("config value `{raw}` is not valid for `{key}`")))?;
            (v, Source::File)
        } else {
            (default, Source::Default)
        };
        self.record(key, &value, source);
        Ok(value)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display + Clone,
    {
        self.resolve(key, flag, None, default)
    }

    /// Keys present in the file that no command consulted.
    pub fn unused_file_keys(&self) -> Vec<String> {
        self.file.keys().filter(|k| !self.used.iter().any(|(u, _, _)| u == *k)).cloned().collect()
    }

    /// `key=value  # source` lines in resolution order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v, src) in &self.used {
            s.push_str(&format!("{k}={v}  # {}\n", src.tag()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_precedence() {
        let file = parse_kv("# comment\nlr = 0.001\nsteps=200 # trailing\n\nweight_decay=0.0\n").unwrap();
        assert_eq!(file["weight-decay"], "0.0");
        let mut r = Resolver::new(file);
        assert_eq!(r.get("lr", Some(0.5), 3e-4).unwrap(), 0.5);
        assert_eq!(r.get("steps", None, 5000usize).unwrap(), 200);
        assert_eq!(r.get("batch", None, 64usize).unwrap(), 64);
        assert_eq!(r.resolve("seed", None, Some(9u64), 0).unwrap(), 9);
        let text = r.render();
        assert!(text.contains("lr=0.5  # flag"));
        assert!(text.contains("steps=200  # config"));
        assert!(text.contains("batch=64  # default"));
        assert!(text.contains("seed=9  # env"));
        assert_eq!(r.unused_file_keys(), vec!["weight-decay".to_string()]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv("a=1\na=2\n").is_err());
        let mut r = Resolver::new(parse_kv("steps=many").unwrap());
        assert!(r.get("steps", None, 1usize).is_err());
    }
}
