use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{io, CliError, Result};

/// Recursively overlays `patch` onto `base`; objects merge key by key, every
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| io(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// `defaults`, then the optional config file, then explicit flag overrides.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, overrides: Value) -> Result<T> {
    let mut v = serde_json::to_value(defaults).expect("config serializes");
    if let Some(p) = file {
        merge(&mut v, read_json(p)?);
    }
    merge(&mut v, overrides);
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config: {e}")))
}

/// Flag overrides as a JSON object, skipping flags that were not given.
pub fn overrides<const N: usize>(pairs: [(&str, Option<Value>); N]) -> Value {
    Value::Object(pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect())
}

pub fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir.display(), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path.display(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Written before any other output of a run.
pub fn write_manifest<T: Serialize>(
    out: &Path,
    command: &str,
    seed: Option<u64>,
    config: &T,
    inputs: &[(&str, &PathBuf)],
) -> Result<()> {
    let inputs: serde_json::Map<String, Value> =
        inputs.iter().map(|(k, p)| (k.to_string(), Value::String(p.display().to_string()))).collect();
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "inputs": inputs,
    });
    write_json(&out.join("manifest.json"), &manifest)
}
