//! Layered configuration: built-in defaults, then a TOML or JSON file, then
//! `--set key.path=value` overrides, then dedicated flags. Validation runs on
//! the final value only.

use std::path::Path;

use noisytune::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
        Some("toml") => {
            let v: toml::Value = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
            serde_json::to_value(v).map_err(|e| bad(e.to_string()))
        }
        _ => Err(bad("config files must end in .toml or .json".into())),
    }
}

/// Recursive merge of `over` into `base`. Tagged enums (objects carrying a
/// `kind` field) are replaced wholesale when the tag changes.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retag = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

/// Sets `dotted.key` in `root`. The key must already exist.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "cannot set '{key}': '{}' is not a table",
                parts[..i].join(".")
            ))
        })?;
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    }
    merge(cur, value);
    Ok(())
}

pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{assignment}'")))?;
    set_path(root, key.trim(), parse_scalar(raw.trim()))
}

/// Builds a `T` from defaults, an optional file, `--set` assignments and
/// finally flag overrides given as `(dotted key, value)` pairs.
pub fn load<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    sets: &[String],
    flags: Vec<(&str, Value)>,
) -> Result<T> {
    let mut value = serde_json::to_value(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        merge(&mut value, read_value(path)?);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    for (key, v) in flags {
        set_path(&mut value, key, v)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use noisytune::expbench::ScenarioSpec;
    use noisytune::perturb::NoiseSpec;
    use serde_json::json;

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.toml");
        std::fs::write(&path, "lambda = 0.3\nseed = 7\n").unwrap();
        let spec: NoiseSpec = load(Some(&path), &["seed=9".into()], vec![]).unwrap();
        assert_eq!((spec.lambda, spec.seed), (0.3, 9));
        let spec: NoiseSpec = load(Some(&path), &["seed=9".into()], vec![("lambda", json!(0.15))]).unwrap();
        assert_eq!(spec.lambda, 0.15);
        let spec: NoiseSpec = load(None, &[], vec![]).unwrap();
        assert_eq!(spec, NoiseSpec::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = load::<NoiseSpec>(None, &["lamda=1".into()], vec![]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, r#"{"corpus":{"bogus":1}}"#).unwrap();
        assert!(matches!(
            load::<ScenarioSpec>(Some(&path), &[], vec![]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nested_set_and_tag_switch() {
        let spec: ScenarioSpec = load(
            None,
            &[
                "downstream.delta=0.25".into(),
                "seeds=[1,2,3]".into(),
                r#"studies.mixout={"kind":"recadam","anneal_a":1.0,"penalty_weight":2.0}"#.into(),
            ],
            vec![],
        )
        .unwrap();
        assert_eq!(spec.downstream.delta, 0.25);
        assert_eq!(spec.seeds, vec![1, 2, 3]);
        assert_eq!(spec.studies.mixout.label(), "recadam");
    }

    #[test]
    fn missing_file_is_io_and_bad_extension_is_config() {
        let e = load::<NoiseSpec>(Some(Path::new("/nonexistent/x.toml")), &[], vec![]).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.yaml");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            load::<NoiseSpec>(Some(&path), &[], vec![]),
            Err(Error::Config(_))
        ));
    }
}
