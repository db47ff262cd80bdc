//! Strict `key = value` configuration with `[section]` headers.
//!
//! Every key an experiment does not read is an error, so typos surface
//! instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    PoissonConvergence,
    QuadraticMc,
    WavePinn,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Self::PoissonConvergence, Self::QuadraticMc, Self::WavePinn];

    pub fn name(self) -> &'static str {
        match self {
            Self::PoissonConvergence => "poisson-convergence",
            Self::QuadraticMc => "quadratic-mc",
            Self::WavePinn => "wave-pinn",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Parsed file: section name (empty for the top level) to key/value entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
    hash: String,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        sections.insert(String::new(), BTreeMap::new());
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        CliError::Config(format!("line {line_no}: unterminated section header"))
                    })?
                    .trim();
                if name.is_empty() || sections.contains_key(name) {
                    return Err(CliError::Config(format!(
                        "line {line_no}: empty or repeated section `{name}`"
                    )));
                }
                sections.insert(name.to_owned(), BTreeMap::new());
                current = name.to_owned();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {line_no}: expected `key = value`"))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(CliError::Config(format!(
                    "line {line_no}: empty key or value"
                )));
            }
            let sec = sections.get_mut(&current).expect("section exists");
            if sec.contains_key(k) {
                return Err(CliError::Config(format!(
                    "line {line_no}: duplicate key `{k}`"
                )));
            }
            sec.insert(
                k.to_owned(),
                Entry {
                    value: v.to_owned(),
                    line: line_no,
                    used: false,
                },
            );
        }
        Ok(Self {
            sections,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the file contents, hex encoded.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let e = self.sections.get_mut(section)?.get_mut(key)?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    pub fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        match self.take(section, key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                CliError::Config(format!(
                    "line {line}: cannot parse `{v}` for {}",
                    qualified(section, key)
                ))
            }),
        }
    }

    pub fn get_opt<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        match self.take(section, key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                CliError::Config(format!(
                    "line {line}: cannot parse `{v}` for {}",
                    qualified(section, key)
                ))
            }),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(
        &mut self,
        section: &str,
        key: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>, CliError> {
        match self.take(section, key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        CliError::Config(format!(
                            "line {line}: cannot parse `{s}` in {}",
                            qualified(section, key)
                        ))
                    })
                })
                .collect(),
        }
    }

    /// Errors on any key that no reader asked for.
    pub fn finish(self) -> Result<(), CliError> {
        for (sec, entries) in &self.sections {
            if let Some((k, e)) = entries.iter().find(|(_, e)| !e.used) {
                return Err(CliError::Config(format!(
                    "line {}: unknown key {}",
                    e.line,
                    qualified(sec, k)
                )));
            }
        }
        Ok(())
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        format!("`{key}`")
    } else {
        format!("`{section}.{key}`")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_lists() {
        let mut c =
            RawConfig::parse("experiment = wave-pinn\n[model]\nhidden = 64, 64 # two layers\n")
                .unwrap();
        assert_eq!(
            c.get::<String>("", "experiment", String::new()).unwrap(),
            "wave-pinn"
        );
        assert_eq!(
            c.get_list::<usize>("model", "hidden", vec![]).unwrap(),
            vec![64, 64]
        );
        assert_eq!(c.get("train", "steps", 7usize).unwrap(), 7);
        c.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut c = RawConfig::parse("[train]\nsteps = 3\netaa = 1\n").unwrap();
        c.get("train", "steps", 0usize).unwrap();
        let err = c.finish().unwrap_err().to_string();
        assert!(err.contains("train.etaa"), "{err}");
    }

    #[test]
    fn malformed_lines() {
        assert!(RawConfig::parse("[train\n").is_err());
        assert!(RawConfig::parse("steps\n").is_err());
        assert!(RawConfig::parse("a = 1\na = 2\n").is_err());
        let mut c = RawConfig::parse("[train]\nsteps = many\n").unwrap();
        assert!(c.get("train", "steps", 0usize).is_err());
    }

    #[test]
    fn hash_depends_on_bytes() {
        let a = RawConfig::parse("a = 1\n").unwrap();
        let b = RawConfig::parse("a = 1 \n").unwrap();
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), b.hash());
    }
}
