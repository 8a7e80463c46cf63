use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dceseg_core::models::checkpoint::FORMAT_VERSION;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VOLUME_FORMAT_VERSION: u32 = 1;
pub const METRICS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FormatVersions {
    pub volume: u32,
    pub checkpoint: u32,
    pub metrics_csv: u32,
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub format_versions: FormatVersions,
    pub seed: Option<u64>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub outputs: Vec<OutputFile>,
    /// Cases that could not be processed, with the reason.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<(String, String)>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    pub fn start(command: &str, config: impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            format_versions: FormatVersions {
                volume: VOLUME_FORMAT_VERSION,
                checkpoint: FORMAT_VERSION,
                metrics_csv: METRICS_FORMAT_VERSION,
            },
            seed,
            started_unix_s: now(),
            finished_unix_s: 0,
            outputs: Vec::new(),
            failures: Vec::new(),
        }
    }

    /// Records a written file; paths are stored relative to `root` when possible.
    pub fn add(&mut self, root: &Path, path: &Path) -> Result<()> {
        let meta = std::fs::metadata(path).with_context(|| format!("stat {}", path.display()))?;
        let shown = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(OutputFile {
            path: shown.display().to_string(),
            sha256: sha256_file(path)?,
            bytes: meta.len(),
        });
        Ok(())
    }

    /// Records a volume file together with its JSON sidecar.
    pub fn add_volume(&mut self, root: &Path, path: &Path) -> Result<()> {
        self.add(root, path)?;
        self.add(root, &dceseg_core::data::io::sidecar_path(path))
    }

    pub fn write(mut self, path: &Path) -> Result<PathBuf> {
        self.finished_unix_s = now();
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}
