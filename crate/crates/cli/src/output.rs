//! Atomic file output, CSV self-validation and run manifests.

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Serializes rows under `header` and checks that the result parses back
/// into the same number of rows with the same header.
pub fn csv_bytes<T: Serialize + DeserializeOwned>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
    validate_csv::<T>(&bytes, header, rows.len())?;
    Ok(bytes)
}

pub fn validate_csv<T: DeserializeOwned>(bytes: &[u8], header: &[&str], expected_rows: usize) -> Result<()> {
    let mut r = csv::Reader::from_reader(bytes);
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        bail!("csv header {got:?} does not match {header:?}");
    }
    let mut n = 0;
    for row in r.deserialize::<T>() {
        row.with_context(|| format!("csv row {} does not parse under its schema", n + 2))?;
        n += 1;
    }
    if n != expected_rows {
        bail!("csv has {n} rows, expected {expected_rows}");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// relative to the output directory
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    /// error message when the run failed
    pub error: Option<String>,
}

/// Inventory of one command invocation. Contains no timestamps, so reruns
/// with the same inputs produce the same manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub parameters: serde_json::Value,
    pub runs: Vec<RunRecord>,
    pub files: Vec<FileEntry>,
}

/// Collects output files of a command under one directory.
pub struct OutputSet {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputSet {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_csv<T: Serialize + DeserializeOwned>(
        &mut self,
        rel: &str,
        header: &[&str],
        rows: &[T],
    ) -> Result<PathBuf> {
        let bytes = csv_bytes(header, rows)?;
        self.write(rel, &bytes)
    }

    /// Writes `<command>_manifest.json` and returns the manifest.
    pub fn finish(
        mut self,
        command: &str,
        config: &impl Serialize,
        parameters: serde_json::Value,
        runs: Vec<RunRecord>,
    ) -> Result<RunManifest> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            parameters,
            runs,
            files: self.files,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.root.join(format!("{command}_manifest.json")), &bytes)?;
        Ok(manifest)
    }
}

/// Recomputes every hash listed in a manifest.
pub fn verify_manifest(root: &Path, manifest: &RunManifest) -> Result<()> {
    for f in &manifest.files {
        let bytes = std::fs::read(root.join(&f.path)).with_context(|| format!("reading {}", f.path))?;
        if sha256_hex(&bytes) != f.sha256 {
            bail!("hash mismatch for {}", f.path);
        }
    }
    Ok(())
}
