//! Run manifests and CSV outputs. Every CSV starts with a
//! `# manifest_sha256=<hex>` line tying it to the manifest of its run.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, args: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: "sttm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: serde_json::to_value(args)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec_pretty(self)?;
        b.push(b'\n');
        Ok(b)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// Writes `manifest.json` into `out` and returns its hash.
    pub fn write(&self, out: &Path) -> Result<String> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("manifest.json"), self.to_bytes()?)?;
        self.hash()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// A CSV writer with the manifest hash as its first line.
pub fn csv_writer(path: &Path, hash: &str) -> Result<csv::Writer<File>> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "# manifest_sha256={hash}")?;
    Ok(csv::Writer::from_writer(f))
}

#[cfg(test)]
/// Reads a CSV written by [`csv_writer`], returning the hash and the records.
pub fn read_csv(path: &Path) -> Result<(String, Vec<csv::StringRecord>, csv::StringRecord)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix("# manifest_sha256=")
        .with_context(|| format!("{} lacks a manifest hash line", path.display()))?
        .to_string();
    let mut rdr = csv::Reader::from_reader(rest.as_bytes());
    let header = rdr.headers()?.clone();
    let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((hash, rows, header))
}
