//! Staged artifact writes with a manifest, removed again if the command fails.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{runtime, CliError, RunOutput};

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    files: Vec<ManifestEntry>,
}

pub(crate) struct Stage {
    id: String,
    out: PathBuf,
    dir: PathBuf,
    hash: String,
    seed: u64,
    overwrite: bool,
    files: Vec<String>,
    committed: bool,
}

impl Stage {
    pub(crate) fn open(
        out: &Path,
        id: &str,
        hash: &str,
        seed: u64,
        overwrite: bool,
    ) -> Result<Self, CliError> {
        let manifest = out.join(manifest_name(id));
        if manifest.exists() && !overwrite {
            return Err(CliError::Usage(format!(
                "{} exists; pass --overwrite to replace it",
                manifest.display()
            )));
        }
        let dir = out.join(format!(".staging-{id}"));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(runtime)?;
        }
        std::fs::create_dir_all(&dir).map_err(runtime)?;
        Ok(Self {
            id: id.to_string(),
            out: out.to_path_buf(),
            dir,
            hash: hash.to_string(),
            seed,
            overwrite,
            files: Vec::new(),
            committed: false,
        })
    }

    pub(crate) fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `bytes` to `rel` (a `/`-separated path) inside the stage.
    pub(crate) fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(runtime)?;
        }
        std::fs::write(&path, bytes).map_err(runtime)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    /// Registers a file something else already wrote inside the stage.
    pub(crate) fn adopt(&mut self, path: &Path) -> Result<(), CliError> {
        let rel = path
            .strip_prefix(&self.dir)
            .map_err(|_| CliError::Runtime(format!("{} is outside the stage", path.display())))?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        self.files.push(rel);
        Ok(())
    }

    /// Writes the manifest and moves every staged file into the output directory.
    pub(crate) fn commit(mut self) -> Result<RunOutput, CliError> {
        let mut entries = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = std::fs::read(self.dir.join(rel)).map_err(runtime)?;
            entries.push(ManifestEntry {
                path: rel.clone(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            command: &self.id,
            config_hash: &self.hash,
            seed: self.seed,
            files: entries,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("serializes");
        bytes.push(b'\n');
        let name = manifest_name(&self.id);
        self.write(&name, &bytes)?;

        if !self.overwrite {
            if let Some(rel) = self.files.iter().find(|r| self.out.join(r).exists()) {
                return Err(CliError::Usage(format!(
                    "{} exists; pass --overwrite to replace it",
                    self.out.join(rel).display()
                )));
            }
        }
        let mut moved = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let target = self.out.join(rel);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(runtime)?;
            }
            std::fs::rename(self.dir.join(rel), &target).map_err(runtime)?;
            moved.push(target);
        }
        std::fs::remove_dir_all(&self.dir).map_err(runtime)?;
        self.committed = true;
        Ok(RunOutput {
            command: self.id.clone(),
            config_hash: self.hash.clone(),
            files: moved,
        })
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

fn manifest_name(id: &str) -> String {
    format!("manifest_{id}.json")
}
