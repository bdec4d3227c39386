//! Flat INI-style configuration files.
//!
//! The format is deliberately minimal: `key = value` pairs, optional
//! `[section]` headers (one per estimator), and full-line comments starting
//! with `#` or `;`. Values are never quoted; lists are comma-separated.
//!
//! Readers pull typed values through the getters, which record every key
//! they touch; [`ConfigMap::ensure_all_used`] then rejects configs with
//! leftover keys instead of silently ignoring typos.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<(String, String), String>,
    used: RefCell<BTreeSet<(String, String)>>,
}

fn qualify(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl ConfigMap {
    pub fn empty() -> Self {
        ConfigMap::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::empty();
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {lineno}: unterminated section header `{line}`"))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {lineno}: expected `key = value`, got `{line}`"
                ))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            let slot = (section.clone(), key);
            if map.entries.contains_key(&slot) {
                return Err(Error::Config(format!(
                    "line {lineno}: duplicate key `{}`",
                    qualify(&slot.0, &slot.1)
                )));
            }
            map.entries.insert(slot, value.trim().to_string());
        }
        Ok(map)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply a `key=value` or `section.key=value` override, replacing any
    /// existing entry.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (lhs, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{spec}` must look like key=value"))
        })?;
        let lhs = lhs.trim();
        if lhs.is_empty() {
            return Err(Error::Config(format!("override `{spec}` has an empty key")));
        }
        let (section, key) = match lhs.split_once('.') {
            Some((s, k)) => (s.trim().to_string(), k.trim().to_string()),
            None => (String::new(), lhs.to_string()),
        };
        self.entries.insert((section, key), value.trim().to_string());
        Ok(())
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        let slot = (section.to_string(), key.to_string());
        let value = self.entries.get(&slot)?;
        self.used.borrow_mut().insert(slot);
        Some(value.as_str())
    }

    pub fn get_str(&self, section: &str, key: &str) -> Result<Option<String>> {
        Ok(self.raw(section, key).map(str::to_string))
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.raw(section, key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "key `{}` must be a number, got `{v}`",
                        qualify(section, key)
                    ))
                })
            })
            .transpose()
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.raw(section, key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| {
                    Error::Config(format!(
                        "key `{}` must be a nonnegative integer, got `{v}`",
                        qualify(section, key)
                    ))
                })
            })
            .transpose()
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        Ok(self.get_u64(section, key)?.map(|v| v as usize))
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        self.raw(section, key)
            .map(|v| match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                other => Err(Error::Config(format!(
                    "key `{}` must be a boolean, got `{other}`",
                    qualify(section, key)
                ))),
            })
            .transpose()
    }

    fn split_list(value: &str, name: String) -> Result<Vec<String>> {
        let items: Vec<String> = value
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        if items.iter().any(String::is_empty) {
            return Err(Error::Config(format!(
                "key `{name}` contains an empty list item"
            )));
        }
        Ok(items)
    }

    pub fn get_str_list(&self, section: &str, key: &str) -> Result<Option<Vec<String>>> {
        self.raw(section, key)
            .map(|v| Self::split_list(v, qualify(section, key)))
            .transpose()
    }

    pub fn get_f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        let name = qualify(section, key);
        self.raw(section, key)
            .map(|v| {
                Self::split_list(v, name.clone())?
                    .iter()
                    .map(|item| {
                        item.parse::<f64>().map_err(|_| {
                            Error::Config(format!(
                                "key `{name}` must be a comma-separated list of numbers, got `{item}`"
                            ))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .transpose()
    }

    pub fn get_usize_list(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>> {
        let name = qualify(section, key);
        self.raw(section, key)
            .map(|v| {
                Self::split_list(v, name.clone())?
                    .iter()
                    .map(|item| {
                        item.parse::<usize>().map_err(|_| {
                            Error::Config(format!(
                                "key `{name}` must be a comma-separated list of nonnegative integers, got `{item}`"
                            ))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()
            })
            .transpose()
    }

    /// Error if any key was never read by a getter, listing all of them.
    pub fn ensure_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self
            .entries
            .keys()
            .filter(|slot| !used.contains(*slot))
            .map(|(s, k)| qualify(s, k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}
