use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Rounds to six significant digits; non-finite values pass through.
pub fn round6(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

/// Text form of a rounded float used in CSV outputs.
pub fn fmt6(v: f64) -> String {
    round6(v).to_string()
}

/// Rounds every float in a JSON tree to six significant digits.
pub fn normalize(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            if let Some(v) = n.as_f64() {
                *value = serde_json::Number::from_f64(round6(v)).map_or(Value::Null, Value::Number);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize),
        Value::Object(map) => map.values_mut().for_each(normalize),
        _ => {}
    }
}

pub fn to_json(value: &impl Serialize) -> Result<Value, CliError> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Output(e.to_string()))?;
    normalize(&mut v);
    Ok(v)
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// SHA-256 of a file's bytes; for a directory, of every file name and its
/// bytes in sorted name order.
pub fn digest(path: &Path) -> Result<InputDigest, CliError> {
    let io = |e| CliError::Core(churnkit::Error::io(path, e));
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io)?;
        entries.sort();
        for p in entries.iter().filter(|p| p.is_file()) {
            hasher.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            hasher.update(fs::read(p).map_err(io)?);
        }
    } else {
        hasher.update(fs::read(path).map_err(io)?);
    }
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Writes the manifest to `out_dir/manifest.json`, or to stderr when no
/// output directory was given.
pub fn emit(manifest: &RunManifest, out_dir: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Output(e.to_string()))?;
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::Core(churnkit::Error::io(dir, e)))?;
            let path = dir.join("manifest.json");
            fs::write(&path, text + "\n").map_err(|e| CliError::Core(churnkit::Error::io(&path, e)))
        }
        None => {
            eprintln!("{text}");
            Ok(())
        }
    }
}
