use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Write through a temporary sibling, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .with_context(|| format!("bad output path {}", path.display()))?;
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub kind: String,
    pub records: Option<usize>,
    pub sha256: String,
}

/// Everything a run wrote, with enough context to reproduce it.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub backend: Value,
    pub started_at: u64,
    pub finished_at: u64,
    pub counts: Value,
    pub outputs: Vec<OutputEntry>,
}

/// Tracks files written under one root.
#[derive(Debug)]
pub struct Outputs {
    pub root: PathBuf,
    entries: Vec<OutputEntry>,
}

impl Outputs {
    pub fn new(root: PathBuf) -> Self {
        Self {
            root,
            entries: Vec::new(),
        }
    }

    fn record(&mut self, path: &Path, kind: &str, records: Option<usize>) -> Result<()> {
        let bytes = fs::read(path)?;
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.entries.push(OutputEntry {
            path: rel.display().to_string(),
            kind: kind.to_owned(),
            records,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, kind: &str, value: &T) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_json(&path, value)?;
        self.record(&path, kind, None)?;
        Ok(path)
    }

    pub fn jsonl<T: Serialize>(&mut self, rel: &str, kind: &str, rows: &[T]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_jsonl(&path, rows)?;
        self.record(&path, kind, Some(rows.len()))?;
        Ok(path)
    }

    pub fn lines(&mut self, rel: &str, kind: &str, lines: &[String]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_lines(&path, lines)?;
        self.record(&path, kind, Some(lines.len()))?;
        Ok(path)
    }

    pub fn text(&mut self, rel: &str, kind: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_atomic(&path, text.as_bytes())?;
        self.record(&path, kind, None)?;
        Ok(path)
    }

    pub fn entries(&self) -> &[OutputEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<OutputEntry> {
        self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.json");
        write_atomic(&p, b"{}").unwrap();
        write_atomic(&p, b"[1]").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "[1]");
        let names: Vec<_> = fs::read_dir(dir.path().join("sub"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn sha_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
