use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::ProviderError;

/// Response cache keyed by request fingerprint: a memory layer in front of an
/// optional directory holding one JSON file per fingerprint.
#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
    tmp_counter: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    fingerprint: String,
    template_id: String,
    text: String,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache { dir: None, memory: Mutex::new(HashMap::new()), tmp_counter: AtomicU64::new(0) }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(ResponseCache { dir: Some(dir), ..Self::in_memory() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, fp: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{fp}.json")))
    }

    pub fn get(&self, fp: &str) -> Result<Option<String>, ProviderError> {
        if let Some(text) = self.memory.lock().unwrap().get(fp) {
            return Ok(Some(text.clone()));
        }
        let Some(path) = self.path(fp) else { return Ok(None) };
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        let entry: Entry = serde_json::from_slice(&raw)
            .map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?;
        if entry.fingerprint != fp {
            return Err(ProviderError::Cache(format!("{}: fingerprint mismatch", path.display())));
        }
        self.memory.lock().unwrap().insert(fp.to_string(), entry.text.clone());
        Ok(Some(entry.text))
    }

    /// Stores a response. Disk writes go to a temporary file first and are
    /// renamed into place, so readers never observe a partial entry.
    pub fn put(&self, fp: &str, template_id: &str, text: &str) -> Result<(), ProviderError> {
        self.memory.lock().unwrap().insert(fp.to_string(), text.to_string());
        let (Some(dir), Some(path)) = (&self.dir, self.path(fp)) else { return Ok(()) };
        let entry = Entry { fingerprint: fp.to_string(), template_id: template_id.to_string(), text: text.to_string() };
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{fp}.{}.{n}.tmp", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(&serde_json::to_vec_pretty(&entry).expect("entry serializes")).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    pub fn len(&self) -> usize {
        self.memory.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_err(path: &Path, e: std::io::Error) -> ProviderError {
    ProviderError::Cache(format!("{}: {e}", path.display()))
}
