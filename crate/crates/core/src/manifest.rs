//! Run manifests: what a command read, what it wrote, and content hashes of
//! both, so downstream commands can detect stale inputs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 of a file, or for a directory of its sorted relative paths and
/// file hashes (manifest files excluded).
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path).map_err(|_| Error::MissingArtifact {
        path: path.to_path_buf(),
        reason: "not found".into(),
    })?;
    if meta.is_file() {
        return hash_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        hasher.update(name.as_bytes());
        hasher.update([0]);
        hasher.update(hash_file(&path.join(&rel))?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

fn hash_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn is_manifest(name: &str) -> bool {
    name == MANIFEST_FILE || name.ends_with(".manifest.json")
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if !is_manifest(&entry.file_name().to_string_lossy()) {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Where the manifest describing `artifact` lives: inside a directory, or
/// next to a file as `<name>.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join(MANIFEST_FILE)
    } else {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// path -> content hash
    pub inputs: BTreeMap<String, String>,
    /// path -> content hash
    pub outputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_secs: 0.0,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<String> {
        let h = hash_path(path)?;
        self.inputs.insert(path.display().to_string(), h.clone());
        Ok(h)
    }

    pub fn add_output(&mut self, path: &Path) -> Result<String> {
        let h = hash_path(path)?;
        self.outputs.insert(path.display().to_string(), h.clone());
        Ok(h)
    }

    /// Stamps the elapsed time and writes the manifest for `artifact`.
    pub fn finish(mut self, started: Instant, artifact: &Path) -> Result<PathBuf> {
        self.wall_time_secs = started.elapsed().as_secs_f64();
        let path = manifest_path(artifact);
        let text = serde_json::to_string_pretty(&self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))
    }
}

/// Checks that `artifact` exists and, when a manifest describes it, that its
/// content still matches the recorded hash. Returns the current hash.
pub fn verify_artifact(artifact: &Path) -> Result<String> {
    if !artifact.exists() {
        return Err(Error::MissingArtifact {
            path: artifact.to_path_buf(),
            reason: "not found".into(),
        });
    }
    let current = hash_path(artifact)?;
    let mpath = manifest_path(artifact);
    if mpath.exists() {
        let m = RunManifest::load(&mpath)?;
        let recorded = m
            .outputs
            .iter()
            .find(|(p, _)| Path::new(p).file_name() == artifact.file_name())
            .map(|(_, h)| h.clone());
        if let Some(h) = recorded {
            if h != current {
                return Err(Error::MissingArtifact {
                    path: artifact.to_path_buf(),
                    reason: format!("stale: manifest records {h}, content hashes to {current}"),
                });
            }
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_ignores_manifest_and_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        std::fs::write(dir.path().join("sub/b.txt"), "beta").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
        assert_eq!(hash_path(dir.path()).unwrap(), h1);
        std::fs::write(dir.path().join("sub/b.txt"), "beta!").unwrap();
        assert_ne!(hash_path(dir.path()).unwrap(), h1);
    }

    #[test]
    fn file_hash_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            hash_path(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn stale_artifacts_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("graph.json");
        std::fs::write(&p, "{}").unwrap();
        let mut m = RunManifest::new("build-graph", &serde_json::json!({}), 0).unwrap();
        m.add_output(&p).unwrap();
        let mpath = m.finish(Instant::now(), &p).unwrap();
        assert_eq!(mpath, dir.path().join("graph.json.manifest.json"));
        verify_artifact(&p).unwrap();
        std::fs::write(&p, "{ }").unwrap();
        assert!(matches!(verify_artifact(&p), Err(Error::MissingArtifact { .. })));
        assert!(matches!(
            verify_artifact(&dir.path().join("absent")),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
