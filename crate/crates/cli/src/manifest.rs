use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path)?;
        Ok(FileHash {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// Provenance record written next to every output: what ran, on which
/// inputs, with which settings.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub inputs: Vec<FileHash>,
    pub config: serde_json::Value,
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            config,
            outputs: Vec::new(),
        }
    }

    /// Records an input file and, when present, the `.nmwt` container
    /// stored next to it.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileHash::of(path)?);
        let side = path.with_extension("nmwt");
        if side != path && side.exists() && path.extension().is_some_and(|e| e == "json") {
            self.inputs.push(FileHash::of(&side)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.push(FileHash::of(path)?);
        Ok(())
    }

    /// Writes the manifest as `<primary>.manifest.json`.
    pub fn write_beside(&self, primary: &Path) -> CliResult<PathBuf> {
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = primary.with_file_name(name);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}
