//! Flat key-value config files applied on top of module defaults.
//!
//! Keys are field names of the module configs (`learning_rate = 0.001`).
//! A bare key applies to every config of the running command that has the
//! field; `section.field` or a `[section]` table targets one config
//! (`sft.learning_rate`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    entries: BTreeMap<String, Value>,
    used: BTreeSet<String>,
    sections: BTreeSet<String>,
}

impl Overrides {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        let mut entries = BTreeMap::new();
        for (k, v) in table {
            match v {
                toml::Value::Table(inner) => {
                    for (f, v) in inner {
                        if v.is_table() || v.is_array() {
                            bail!("config key {k}.{f}: only scalar values are supported");
                        }
                        entries.insert(format!("{k}.{f}"), serde_json::to_value(v)?);
                    }
                }
                toml::Value::Array(_) => bail!("config key {k}: only scalar values are supported"),
                v => {
                    entries.insert(k, serde_json::to_value(v)?);
                }
            }
        }
        Ok(Self { entries, ..Self::default() })
    }

    /// Overlay matching keys onto `base`, returning the updated config.
    pub fn apply<T: Serialize + DeserializeOwned>(&mut self, section: &str, base: &T) -> Result<T> {
        let mut value = serde_json::to_value(base)?;
        let obj = value.as_object_mut().context("config is not a record")?;
        self.sections.insert(section.to_string());
        let prefix = format!("{section}.");
        for (key, v) in &self.entries {
            let field = key.strip_prefix(&prefix).unwrap_or(key);
            if field.contains('.') {
                continue;
            }
            if obj.contains_key(field) {
                obj.insert(field.to_string(), v.clone());
                self.used.insert(key.clone());
            }
        }
        serde_json::from_value(value).with_context(|| format!("applying config to {section}"))
    }

    /// Fail on keys no config consumed (usually typos). Keys for a section in
    /// `known` that this run never applied are left alone so one file can
    /// serve several commands.
    pub fn finish(&self, known: &[&str]) -> Result<()> {
        let unused: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .filter(|k| match k.split_once('.') {
                Some((sec, _)) => self.sections.contains(sec) || !known.contains(&sec),
                None => true,
            })
            .collect();
        if !unused.is_empty() {
            bail!("unknown config keys: {unused:?}");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct A {
        learning_rate: f64,
        epochs: usize,
    }

    #[test]
    fn bare_and_prefixed_keys() {
        let mut o = Overrides::parse("learning_rate = 0.5\nsft.epochs = 3\n").unwrap();
        let a = o.apply("sft", &A { learning_rate: 1.0, epochs: 1 }).unwrap();
        assert_eq!(a, A { learning_rate: 0.5, epochs: 3 });
        let b = o.apply("rl", &A { learning_rate: 1.0, epochs: 1 }).unwrap();
        assert_eq!(b, A { learning_rate: 0.5, epochs: 1 });
        o.finish(&[]).unwrap();
        let mut o = Overrides::parse("weak.keep_fraction = 0.5\nsft.typo = 1").unwrap();
        o.apply("sft", &A { learning_rate: 1.0, epochs: 1 }).unwrap();
        let err = o.finish(&["weak", "sft"]).unwrap_err().to_string();
        assert!(err.contains("sft.typo") && !err.contains("weak"));
        assert!(o.finish(&["sft"]).unwrap_err().to_string().contains("weak.keep_fraction"));
    }

    #[test]
    fn unknown_keys_and_nesting_fail() {
        let mut o = Overrides::parse("learnin_rate = 0.5").unwrap();
        o.apply("x", &A { learning_rate: 1.0, epochs: 1 }).unwrap();
        assert!(o.finish(&[]).is_err());
        assert!(Overrides::parse("[a.b]\nc = 1").is_err());
        assert!(Overrides::parse("a = [1]").is_err());
        let t = Overrides::parse("[sft]\nepochs = 2").unwrap();
        assert_eq!(t, Overrides::parse("sft.epochs = 2").unwrap());
        let mut bad = Overrides::parse("epochs = \"many\"").unwrap();
        assert!(bad.apply("x", &A { learning_rate: 1.0, epochs: 1 }).is_err());
    }
}
