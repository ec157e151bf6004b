use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use dsg_core::corpus_io::{file_digest, write_atomic};
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub flags: Value,
    pub input_digests: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub engine_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start<A: Serialize>(subcommand: &str, flags: &A, seed: Option<u64>) -> Result<Self, CliError> {
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            flags: serde_json::to_value(flags)?,
            input_digests: BTreeMap::new(),
            seed,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: String::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = file_digest(path)?;
        self.input_digests.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `<primary>.manifest.json`.
    pub fn finish(self, primary: &Path) -> Result<PathBuf, CliError> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        self.write(PathBuf::from(name))
    }

    /// Writes `<dir>/manifest.json`.
    pub fn finish_in_dir(self, dir: &Path) -> Result<PathBuf, CliError> {
        self.write(dir.join("manifest.json"))
    }

    fn write(mut self, path: PathBuf) -> Result<PathBuf, CliError> {
        self.finished_at = now();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
