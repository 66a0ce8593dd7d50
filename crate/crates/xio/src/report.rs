//! Output files of a run and the manifest that pins them.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, XioError};

pub const FORMAT_VERSION: &str = "advland-v1";
pub const MANIFEST_NAME: &str = "manifest.json";

/// `sha256("blob <len>\0" + content)`, hex encoded.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub task: String,
    pub seed: u64,
    /// The effective configuration as TOML; parses back to the same config.
    pub config: String,
    pub outputs: Vec<OutputEntry>,
}

/// Collects the files written into one output directory.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    task: String,
    written: Vec<OutputEntry>,
}

impl Outputs {
    pub fn create(dir: &Path, task: &str) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| XioError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            task: task.to_string(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, content: &[u8]) -> Result<()> {
        let path = self.path(name);
        let mut f: File = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| XioError::io(&path, e))?;
        f.write_all(content).map_err(|e| XioError::io(&path, e))?;
        self.written.retain(|o| o.path != name);
        self.written.push(OutputEntry {
            path: name.to_string(),
            bytes: content.len(),
            sha256: blob_hash(content),
        });
        Ok(())
    }

    /// CSV with the `# advland-v1 <task>` version line.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let mut text = format!("# {FORMAT_VERSION} {}\n{header}\n", self.task);
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write(name, &text)
    }

    pub fn entries(&self) -> &[OutputEntry] {
        &self.written
    }

    /// Writes the manifest last; it is not listed in itself.
    pub fn finish(mut self, seed: u64, config: String) -> Result<Manifest> {
        self.written.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            format: FORMAT_VERSION.to_string(),
            task: self.task.clone(),
            seed,
            config,
            outputs: self.written.clone(),
        };
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        let path = self.path(MANIFEST_NAME);
        std::fs::write(&path, text).map_err(|e| XioError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Checks every manifest entry against the files on disk.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read(&path).map_err(|e| XioError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    for o in &manifest.outputs {
        let p = dir.join(&o.path);
        let content = std::fs::read(&p).map_err(|e| XioError::io(&p, e))?;
        if blob_hash(&content) != o.sha256 {
            return Err(XioError::Config(format!(
                "{} does not match its manifest hash",
                o.path
            )));
        }
    }
    Ok(manifest)
}

/// Formats a float so that it parses back to the same bits.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_blob_hash() {
        // Empty blob id of a sha256 git repository.
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn csv_has_version_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::create(dir.path(), "schedule").unwrap();
        out.write_csv("s.csv", "epoch,eps,lr", &["0,0e0,1e-3".into()])
            .unwrap();
        let m = out.finish(7, String::new()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert!(text.starts_with("# advland-v1 schedule\nepoch,eps,lr\n"));
        assert_eq!(m.outputs.len(), 1);
        verify_manifest(dir.path()).unwrap();
    }
}
