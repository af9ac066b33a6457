//! Artifact store: one directory per stage plus a manifest recording the
//! content hashes of its inputs and outputs.
//!
//! Provenance is a hash chain over content: a manifest lists the hash of
//! every upstream artifact it consumed, and each manifest carries a hash of
//! itself. `verify_chain` recomputes all of them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_SCHEMA: &str = "true.manifest/v1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("missing artifact `{0}`")]
    Missing(String),
    #[error("tampered: {0}")]
    Tampered(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a sibling temp file and a rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(bytes).map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io(path))
}

/// Pretty JSON with a trailing newline; the canonical artifact encoding.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub schema: String,
    pub stage: String,
    /// Named input hashes: config slices, the dataset, upstream artifacts.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the store root) to content hash.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Hash of this manifest with this field empty.
    pub manifest_hash: String,
}

impl ArtifactManifest {
    pub fn new(stage: &str, inputs: BTreeMap<String, String>, outputs: BTreeMap<String, String>, warnings: Vec<String>) -> Self {
        let mut m = ArtifactManifest {
            schema: MANIFEST_SCHEMA.into(),
            stage: stage.into(),
            inputs,
            outputs,
            tool_version: TOOL_VERSION.into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            warnings,
            manifest_hash: String::new(),
        };
        m.manifest_hash = m.compute_hash();
        m
    }

    pub fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.manifest_hash.clear();
        sha256_hex(&serde_json::to_vec(&m).expect("manifest serializes"))
    }

    /// Hash over the inputs only; equal hashes mean the stage may be skipped.
    pub fn input_hash(&self) -> String {
        input_hash(&self.stage, &self.inputs)
    }
}

pub fn input_hash(stage: &str, inputs: &BTreeMap<String, String>) -> String {
    sha256_hex(&serde_json::to_vec(&(stage, TOOL_VERSION, inputs)).expect("inputs serialize"))
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root).map_err(io(root))?;
        Ok(ArtifactStore { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{stage}.json"))
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<String, StoreError> {
        write_atomic(&self.path(rel), bytes)?;
        Ok(sha256_hex(bytes))
    }

    pub fn read_bytes(&self, rel: &str) -> Result<Vec<u8>, StoreError> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(StoreError::Missing(rel.into()));
        }
        fs::read(&p).map_err(io(&p))
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T, StoreError> {
        let bytes = self.read_bytes(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt { path: self.path(rel), message: e.to_string() })
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn hash_of(&self, rel: &str) -> Result<String, StoreError> {
        Ok(sha256_hex(&self.read_bytes(rel)?))
    }

    pub fn manifest(&self, stage: &str) -> Result<Option<ArtifactManifest>, StoreError> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&p).map_err(io(&p))?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::Corrupt { path: p, message: e.to_string() })
    }

    pub fn write_manifest(&self, m: &ArtifactManifest) -> Result<(), StoreError> {
        write_atomic(&self.manifest_path(&m.stage), &to_json_bytes(m))
    }

    /// True when every recorded output still has its recorded hash.
    pub fn outputs_intact(&self, m: &ArtifactManifest) -> bool {
        m.outputs.iter().all(|(rel, h)| self.hash_of(rel).is_ok_and(|x| &x == h))
    }

    /// Checks every manifest's self-hash, every output file, and that each
    /// upstream artifact input matches what its producer recorded.
    pub fn verify_chain(&self, stages: &[&str]) -> Result<usize, StoreError> {
        let mut produced: BTreeMap<String, String> = BTreeMap::new();
        let mut checked = 0;
        for stage in stages {
            let Some(m) = self.manifest(stage)? else { continue };
            if m.compute_hash() != m.manifest_hash {
                return Err(StoreError::Tampered(format!("manifest of `{stage}` was edited")));
            }
            for (rel, h) in &m.outputs {
                match self.hash_of(rel) {
                    Ok(x) if &x == h => {}
                    Ok(_) => return Err(StoreError::Tampered(format!("`{rel}` no longer matches its manifest"))),
                    Err(_) => return Err(StoreError::Tampered(format!("`{rel}` is missing"))),
                }
            }
            for (name, h) in &m.inputs {
                if let Some(rel) = name.strip_prefix("artifact:") {
                    match produced.get(rel) {
                        Some(p) if p == h => {}
                        Some(_) => return Err(StoreError::Tampered(format!("`{stage}` consumed a different `{rel}` than was produced"))),
                        None => {}
                    }
                }
            }
            produced.extend(m.outputs.clone());
            checked += 1;
        }
        Ok(checked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_atomic(&p, b"{}").unwrap();
        write_atomic(&p, b"[]").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"[]");
        let names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn manifest_hash_detects_edits() {
        let m = ArtifactManifest::new("e3", BTreeMap::new(), BTreeMap::from([("e3/e3.json".into(), "00".into())]), vec![]);
        assert_eq!(m.compute_hash(), m.manifest_hash);
        let mut edited = m.clone();
        edited.outputs.insert("e3/e3.json".into(), "11".into());
        assert_ne!(edited.compute_hash(), edited.manifest_hash);
    }

    #[test]
    fn chain_catches_output_and_link_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let s = ArtifactStore::open(dir.path()).unwrap();
        let h = s.write("a/out.json", b"1").unwrap();
        s.write_manifest(&ArtifactManifest::new("a", BTreeMap::new(), BTreeMap::from([("a/out.json".into(), h.clone())]), vec![]))
            .unwrap();
        let h2 = s.write("b/out.json", b"2").unwrap();
        let inputs = BTreeMap::from([("artifact:a/out.json".to_string(), h)]);
        s.write_manifest(&ArtifactManifest::new("b", inputs, BTreeMap::from([("b/out.json".into(), h2)]), vec![])).unwrap();
        assert_eq!(s.verify_chain(&["a", "b"]).unwrap(), 2);

        // Rewriting an upstream artifact and its manifest breaks the link.
        let h = s.write("a/out.json", b"9").unwrap();
        s.write_manifest(&ArtifactManifest::new("a", BTreeMap::new(), BTreeMap::from([("a/out.json".into(), h)]), vec![])).unwrap();
        assert!(matches!(s.verify_chain(&["a", "b"]), Err(StoreError::Tampered(_))));

        s.write("b/out.json", b"3").unwrap();
        assert!(matches!(s.verify_chain(&["b"]), Err(StoreError::Tampered(_))));
    }
}
