//! The run manifest: one JSON object per output directory, merged across
//! commands. It holds only content-derived values (no timestamps, no
//! absolute paths), so identical inputs give a byte-identical file.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    root: Map<String, Value>,
    path: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    /// Opens the manifest in `dir`, starting empty if there is none.
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(FILE_NAME);
        let root = match std::fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(Value::Object(m)) => m,
                _ => return Err(CliError::config(format!("{} is not a JSON object", path.display()))),
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Map::new(),
            Err(e) => return Err(CliError::output(&path, e)),
        };
        let mut m = Manifest { root, path };
        m.root.insert("tool".into(), json!({ "name": "oe-forge", "version": env!("CARGO_PKG_VERSION") }));
        Ok(m)
    }

    fn section(&mut self, key: &str) -> &mut Map<String, Value> {
        let v = self.root.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if !v.is_object() {
            *v = Value::Object(Map::new());
        }
        v.as_object_mut().unwrap()
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.root.insert(key.to_string(), value);
    }

    pub fn record_input(&mut self, role: &str, path_as_written: &str, digest: String) {
        self.section("inputs").insert(role.to_string(), json!({ "path": path_as_written, "sha256": digest }));
    }

    pub fn record_seed(&mut self, label: &str, seed: u64) {
        self.section("seeds").insert(label.to_string(), json!(seed));
    }

    pub fn record_command(&mut self, name: &str, value: Value) {
        self.section("commands").insert(name.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.root.get(key)
    }

    pub fn save(&self) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(&self.root).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&self.path, text).map_err(|e| CliError::output(&self.path, e))
    }
}
