use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use crate::failure::Failure;

pub const VERSION: &str = env!("CTP4D_VERSION");

/// Record of one command run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    /// Command-specific settings after flags were applied.
    pub settings: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<String>,
}

pub struct ManifestBuilder {
    command: &'static str,
    started: DateTime<Utc>,
    pub config_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub settings: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<String>,
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestBuilder {
    pub fn start(command: &'static str) -> Self {
        ManifestBuilder {
            command,
            started: Utc::now(),
            config_paths: Vec::new(),
            seed: None,
            settings: serde_json::Value::Null,
            outputs: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn settings(&mut self, value: impl Serialize) {
        self.settings = serde_json::to_value(value).expect("settings serialise");
    }

    /// Writes the manifest to `path` and returns the run's outcome.
    pub fn finish(self, path: &Path) -> Result<(), Failure> {
        let failed = self.failures.len();
        let m = RunManifest {
            command: self.command.to_string(),
            version: VERSION.to_string(),
            config_paths: self.config_paths,
            seed: self.seed,
            started_at: stamp(self.started),
            finished_at: stamp(Utc::now()),
            settings: self.settings,
            outputs: self.outputs,
            failures: self.failures,
        };
        ctp4d_core::pipeline::io::write_json(path, &m)?;
        if failed > 0 {
            return Err(Failure::partial(format!(
                "{failed} item(s) failed; see {}",
                path.display()
            )));
        }
        Ok(())
    }
}

/// Manifest path for a command whose output is a single file.
pub fn beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
