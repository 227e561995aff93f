use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{content_hash, read_json, sha256_hex, write_json};

pub const MANIFEST_DIR: &str = "manifests";
pub const LOCK_FILE: &str = ".dforge.lock";

/// Provenance record of one executed stage. Inputs and outputs are
/// workdir-relative paths mapped to content hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    /// JSON snapshot of the stage configuration.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub steps: u64,
}

pub fn manifest_path(workdir: &Path, stage: &str) -> PathBuf {
    workdir.join(MANIFEST_DIR).join(format!("{stage}.json"))
}

pub fn run_id(stage: &str, config_hash: &str, inputs: &BTreeMap<String, String>) -> String {
    let mut s = format!("{stage}\n{config_hash}\n");
    for (k, v) in inputs {
        s.push_str(&format!("{k}={v}\n"));
    }
    sha256_hex(s.as_bytes())[..16].to_string()
}

pub fn hash_paths(workdir: &Path, rel: &[String]) -> Result<BTreeMap<String, String>> {
    rel.iter().map(|r| Ok((r.clone(), content_hash(&workdir.join(r))?))).collect()
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Writes the manifest; an existing manifest is never overwritten.
    pub fn write_new(&self, workdir: &Path) -> Result<PathBuf> {
        let path = manifest_path(workdir, &self.stage);
        if path.exists() {
            return Err(Error::StaleArtifact(format!("manifest {} already exists", path.display())));
        }
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
        write_json(&path, self)?;
        Ok(path)
    }

    /// Whether this manifest still describes the workdir: same inputs and
    /// configuration, and every output present with its recorded hash.
    pub fn check_current(&self, workdir: &Path, inputs: &BTreeMap<String, String>, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::StaleArtifact(format!("stage `{}` was completed with a different configuration", self.stage)));
        }
        if &self.inputs != inputs {
            let changed: Vec<&String> = inputs.keys().chain(self.inputs.keys()).filter(|k| inputs.get(*k) != self.inputs.get(*k)).collect();
            return Err(Error::StaleArtifact(format!("stage `{}` inputs changed: {changed:?}", self.stage)));
        }
        for (rel, h) in &self.outputs {
            let p = workdir.join(rel);
            if !p.exists() {
                return Err(Error::StaleArtifact(format!("stage `{}` output {rel} is missing", self.stage)));
            }
            if &content_hash(&p)? != h {
                return Err(Error::StaleArtifact(format!("stage `{}` output {rel} was modified", self.stage)));
            }
        }
        Ok(())
    }
}

/// Reads every manifest in the workdir, ordered by stage name.
pub fn read_manifests(workdir: &Path) -> Result<Vec<RunManifest>> {
    let dir = workdir.join(MANIFEST_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| RunManifest::load(p)).collect()
}

/// Exclusive claim on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::validation(format!(
                "{} is locked by another pipeline (delete {} if that run is gone)",
                workdir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
