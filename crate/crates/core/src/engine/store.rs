use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::session::PipelineSession;
use crate::error::{Error, Result};

pub const SESSION_FILE: &str = "session.json";
pub const ARTIFACT_DIR: &str = "artifacts";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Ids and artifact names are single path components.
fn safe_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Writes through a temporary sibling and renames, so readers see either the
/// old file or the new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| Error::StorageFailure(format!("{} has no parent", path.display())))?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One directory per session holding `session.json` and `artifacts/`.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> Result<PathBuf> {
        if !safe_name(id) {
            return Err(Error::SessionNotFound(id.to_string()));
        }
        Ok(self.root.join(id))
    }

    pub fn artifact_path(&self, id: &str, name: &str) -> Result<PathBuf> {
        if !safe_name(name) {
            return Err(Error::InvalidInput(format!("bad artifact name {name:?}")));
        }
        Ok(self.session_dir(id)?.join(ARTIFACT_DIR).join(name))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.session_dir(id).map(|d| d.join(SESSION_FILE).is_file()).unwrap_or(false)
    }

    pub fn save(&self, session: &PipelineSession) -> Result<()> {
        let path = self.session_dir(&session.id)?.join(SESSION_FILE);
        let json = serde_json::to_vec_pretty(session).map_err(|e| Error::StorageFailure(e.to_string()))?;
        write_atomic(&path, &json)
    }

    pub fn load(&self, id: &str) -> Result<PipelineSession> {
        let path = self.session_dir(id)?.join(SESSION_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::SessionNotFound(id.to_string())),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::StorageFailure(format!("corrupt session {id}: {e}")))
    }

    /// Session ids in lexicographic order.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if safe_name(&name) && entry.path().join(SESSION_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Stores artifact bytes and returns their SHA-256.
    pub fn write_artifact(&self, id: &str, name: &str, bytes: &[u8]) -> Result<String> {
        write_atomic(&self.artifact_path(id, name)?, bytes)?;
        Ok(sha256_hex(bytes))
    }

    pub fn read_artifact(&self, id: &str, name: &str) -> Result<Vec<u8>> {
        let path = self.artifact_path(id, name)?;
        fs::read(&path).map_err(|e| Error::StorageFailure(format!("{}: {e}", path.display())))
    }

    /// Files under the artifact directory, sorted.
    pub fn artifact_files(&self, id: &str) -> Result<Vec<String>> {
        let dir = self.session_dir(id)?.join(ARTIFACT_DIR);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        names.sort();
        Ok(names)
    }
}
