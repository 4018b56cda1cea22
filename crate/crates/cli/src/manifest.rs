//! Run manifests and the partial-output marker.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tumorsynth::digest::sha256_hex;

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INCOMPLETE_MARKER: &str = ".incomplete";

pub fn version() -> String {
    match option_env!("TUMORSYNTH_GIT_DESCRIBE") {
        Some(v) if !v.is_empty() => v.to_owned(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the stage directory.
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Subcommand flags after defaults were applied.
    pub flags: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

/// Output directory of one subcommand. Created empty with an `.incomplete`
/// marker that only [`Stage::finish`] removes.
pub struct Stage {
    pub dir: PathBuf,
    command: String,
    flags: BTreeMap<String, String>,
    metrics: BTreeMap<String, serde_json::Value>,
}

impl Stage {
    pub fn begin(dir: PathBuf, command: &str) -> Result<Self, CliError> {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let marker = dir.join(INCOMPLETE_MARKER);
        fs::write(&marker, command).map_err(|e| CliError::io(&marker, e))?;
        Ok(Stage {
            dir,
            command: command.to_owned(),
            flags: BTreeMap::new(),
            metrics: BTreeMap::new(),
        })
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) {
        self.flags.insert(name.to_owned(), value.to_string());
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics
            .insert(name.to_owned(), serde_json::to_value(value).expect("metric serializes"));
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(rel);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json(&self, rel: impl AsRef<Path>, value: &impl Serialize) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).expect("value serializes");
        s.push('\n');
        self.write(rel, s)
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: impl AsRef<Path>, rows: &[T]) -> Result<(), CliError> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r).expect("row serializes"));
            s.push('\n');
        }
        self.write(rel, s)
    }

    /// Hashes every file under the stage, writes the manifest, drops the marker.
    pub fn finish(self, cfg: &RunConfig) -> Result<Manifest, CliError> {
        let mut files = Vec::new();
        collect_files(&self.dir, &self.dir, &mut files)?;
        files.sort();
        let mut artifacts = Vec::new();
        for rel in files {
            if rel == Path::new(INCOMPLETE_MARKER) || rel == Path::new(MANIFEST_FILE) {
                continue;
            }
            let p = self.dir.join(&rel);
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            artifacts.push(Artifact {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&[&bytes]),
            });
        }
        let m = Manifest {
            command: self.command.clone(),
            version: version(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            flags: self.flags.clone(),
            config: cfg.effective(),
            artifacts,
            metrics: self.metrics.clone(),
        };
        self.write_json(MANIFEST_FILE, &m)?;
        let marker = self.dir.join(INCOMPLETE_MARKER);
        fs::remove_file(&marker).map_err(|e| CliError::io(&marker, e))?;
        Ok(m)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_owned());
        }
    }
    Ok(())
}

pub fn load_manifest(stage_dir: &Path) -> Result<Manifest, CliError> {
    if stage_dir.join(INCOMPLETE_MARKER).exists() {
        return Err(CliError::Runtime(format!("{} holds partial output", stage_dir.display())));
    }
    let p = stage_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}
