//! One `manifest.json` per run: what ran, on which data, with which
//! settings and code version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub git_describe: String,
    pub seed: Option<u64>,
    /// Config file text as resolved after overrides.
    pub config: Option<String>,
    pub dataset_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub details: BTreeMap<String, serde_json::Value>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Manifest {
    pub fn start(command: &str, arguments: Vec<String>) -> Self {
        Manifest {
            command: command.to_string(),
            arguments,
            git_describe: env!("ATTNVO_GIT_DESCRIBE").to_string(),
            seed: None,
            config: None,
            dataset_root: None,
            output_dir: None,
            started_at: now(),
            finished_at: None,
            details: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.details.insert(key.to_string(), value);
    }

    /// Stamps the finish time and writes `<out>/manifest.json`.
    pub fn finish(mut self, out: &Path) -> attnvo::Result<()> {
        self.output_dir = Some(out.to_path_buf());
        self.finished_at = Some(now());
        let json = serde_json::to_string_pretty(&self).expect("serializable");
        attnvo::util::atomic_write(&out.join("manifest.json"), json.as_bytes())
    }
}
