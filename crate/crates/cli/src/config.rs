//! JSON config files with `--set dotted.key=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Reads `path` (or starts from the defaults), applies the overrides in
/// order and deserializes. Unknown keys are rejected with a suggestion.
pub fn load<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let schema = serde_json::to_value(T::default())?;
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            check_keys(&v, &schema, "").with_context(|| format!("in config {}", p.display()))?;
            v
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut value, &schema, o)?;
    }
    serde_json::from_value(value).context("config does not match the expected schema")
}

fn suggestion(key: &str, candidates: &[&String]) -> String {
    let best = candidates
        .iter()
        .map(|c| (strsim::jaro_winkler(key, c), *c))
        .filter(|(score, _)| *score > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((_, c)) => format!("; did you mean `{c}`?"),
        None => String::new(),
    }
}

fn unknown_key(prefix: &str, key: &str, schema: &Map<String, Value>) -> anyhow::Error {
    let known: Vec<&String> = schema.keys().collect();
    anyhow::anyhow!("unknown config key `{prefix}{key}`{}", suggestion(key, &known))
}

/// Every object key in `v` must exist in `schema`. Keys whose default is
/// `null` or a list are not descended into.
fn check_keys(v: &Value, schema: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(obj), Value::Object(sch)) = (v, schema) else {
        return Ok(());
    };
    for (k, sub) in obj {
        let Some(s) = sch.get(k) else {
            return Err(unknown_key(prefix, k, sch));
        };
        check_keys(sub, s, &format!("{prefix}{k}."))?;
    }
    Ok(())
}

fn apply_override(value: &mut Value, schema: &Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    // validate the whole path against the schema first
    let mut s = schema;
    let mut prefix = String::new();
    for p in &parts {
        let Value::Object(sch) = s else {
            bail!("`{prefix}` is not a section; cannot set `{key}`");
        };
        s = sch.get(*p).ok_or_else(|| unknown_key(&prefix, p, sch))?;
        prefix.push_str(p);
        prefix.push('.');
    }
    // JSON when it parses, a bare string otherwise
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut cur = value;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .expect("just made an object")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut()
        .expect("just made an object")
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// `key = default` lines for every leaf of the default config, each with its
/// description from `docs` when one exists.
pub fn keys_help<T: Serialize + Default>(title: &str, docs: &[(&str, &str)]) -> String {
    let v = serde_json::to_value(T::default()).expect("defaults serialize");
    let mut leaves = Vec::new();
    flatten(&v, "", &mut leaves);
    let width = leaves.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = format!("{title} (JSON file via --config, or --set key=value):\n");
    for (k, default) in leaves {
        let doc = docs
            .iter()
            .find(|(d, _)| *d == k)
            .map(|(_, d)| format!("  {d}"))
            .unwrap_or_default();
        out.push_str(&format!("  {k:width$} = {default}{doc}\n"));
    }
    out
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, sub) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(sub, &key, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        epochs: usize,
        rate: f64,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        name: String,
        training: Inner,
        holdouts: Vec<String>,
        cap: Option<usize>,
    }

    #[test]
    fn overrides_apply_in_order() {
        let c: Outer = load(
            None,
            &[
                "training.epochs=5".into(),
                "name=abc".into(),
                "training.epochs=7".into(),
                "holdouts=[\"a\",\"b\"]".into(),
                "cap=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.epochs, 7);
        assert_eq!(c.name, "abc");
        assert_eq!(c.holdouts, vec!["a", "b"]);
        assert_eq!(c.cap, Some(3));
    }

    #[test]
    fn unknown_keys_get_a_hint() {
        let err = load::<Outer>(None, &["training.epoch=5".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("did you mean `epochs`"), "{err}");
        let err = load::<Outer>(None, &["trainng.epochs=5".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("did you mean `training`"), "{err}");
        assert!(load::<Outer>(None, &["name".into()]).is_err());
    }

    #[test]
    fn file_keys_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"training": {"rte": 0.1}}"#).unwrap();
        let err = format!("{:#}", load::<Outer>(Some(&p), &[]).unwrap_err());
        assert!(err.contains("did you mean `rate`"), "{err}");
    }

    #[test]
    fn help_lists_every_leaf() {
        let h = keys_help::<Outer>("Keys", &[("training.rate", "step size")]);
        for k in ["name", "training.epochs", "training.rate", "holdouts", "cap"] {
            assert!(h.contains(k), "{h}");
        }
        assert!(h.contains("step size"));
    }
}
