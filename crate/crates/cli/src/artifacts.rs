use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use corro_core::{Error, Result};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files under an output directory and records their content hashes.
pub struct ArtifactWriter {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            hashes: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `rel` uses `/` separators and is relative to the output directory.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Writes `manifest-<command>.txt` listing every file written, sorted by path.
    pub fn finish(self, command: &str) -> Result<PathBuf> {
        let text: String = self.hashes.iter().map(|(p, h)| format!("{h}  {p}\n")).collect();
        let path = self.root.join(format!("manifest-{command}.txt"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Path to hash, from a manifest file.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_once("  ")
                .map(|(h, p)| (p.to_string(), h.to_string()))
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: "expected `<hash>  <path>`".into(),
                })
        })
        .collect()
}

/// Recomputes the hash of every listed file and reports the first mismatch.
pub fn verify_manifest(root: &Path, command: &str) -> Result<usize> {
    let entries = read_manifest(&root.join(format!("manifest-{command}.txt")))?;
    for (p, h) in &entries {
        let path = root.join(p);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if &sha256_hex(&bytes) != h {
            return Err(Error::Format(format!("{p}: content does not match manifest")));
        }
    }
    Ok(entries.len())
}
