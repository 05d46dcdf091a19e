//! Layered configuration: preset, then config file, then flags.

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};
use std::path::Path;

pub const SECTIONS: [&str; 4] = ["model", "train", "cost", "pipeline"];

/// Sections of a JSON config file, each a partial override.
#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(sections) = value else {
            bail!("config {} must be a JSON object", path.display());
        };
        if let Some(k) = sections.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            bail!("unknown config section {k:?}; expected one of {SECTIONS:?}");
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.sections.get(name)
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else
/// replaces.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Builds an object from the flags that were given.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Into<Value>>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), v.into());
        }
        self
    }

    pub fn value(&self) -> Value {
        Value::Object(self.0.clone())
    }
}

/// `base`, overlaid by the file section, overlaid by the flags.
pub fn resolve<T>(base: &T, file: Option<&Value>, flags: &Overrides, what: &str) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(base)?;
    if let Some(f) = file {
        merge(&mut v, f);
    }
    merge(&mut v, &flags.value());
    serde_json::from_value(v).with_context(|| format!("invalid {what} configuration"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn later_layers_win() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, &json!({"b": {"c": 5}}));
        merge(&mut base, &json!({"a": 9}));
        assert_eq!(base, json!({"a": 9, "b": {"c": 5, "d": 3}}));
    }

    #[test]
    fn unset_flags_are_skipped() {
        let mut o = Overrides::default();
        o.set("x", Some(3)).set::<u64>("y", None);
        assert_eq!(o.value(), json!({"x": 3}));
    }
}
