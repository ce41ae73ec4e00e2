use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Record of one command invocation and the files it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    /// Stage name to artifact path.
    pub artifact_paths: BTreeMap<String, PathBuf>,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            artifact_paths: BTreeMap::new(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn artifact(&mut self, stage: &str, path: &Path) {
        self.artifact_paths.insert(stage.to_string(), path.to_path_buf());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// `<dir>/manifest.json`.
    pub fn write_in_dir(&self, dir: &Path) -> Result<()> {
        self.write(&dir.join("manifest.json"))
    }

    /// `<file>.manifest.json`, next to a single-file output.
    pub fn write_beside(&self, file: &Path) -> Result<()> {
        let mut name = file.as_os_str().to_owned();
        name.push(".manifest.json");
        self.write(Path::new(&name))
    }
}
