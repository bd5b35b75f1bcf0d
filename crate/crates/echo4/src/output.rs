//! CSV/JSON writers and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use echo4_core::ensemble::EmissionRecord;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::spectrum::Spectrum;

/// Collects files under one directory and remembers their hashes.
pub struct RunDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(CliError::io(format!("creating {}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
        }
        std::fs::write(&path, bytes).map_err(CliError::io(format!("writing {}", path.display())))?;
        self.files.insert(rel.to_owned(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_csv(&mut self, rel: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CliError::Config(format!("csv {rel}: {e}"));
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Config(format!("csv {rel}: {e}")))?;
        self.write_bytes(rel, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Config(format!("json {rel}: {e}")))?;
        bytes.push(b'\n');
        self.write_bytes(rel, &bytes)
    }

    /// Writes `manifest.json` with the hashes of every file written so far.
    pub fn finish<T: Serialize>(mut self, manifest: T) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            #[serde(flatten)]
            body: T,
            files: &'a BTreeMap<String, String>,
        }
        let files = self.files.clone();
        self.write_json("manifest.json", &Wrapped { body: manifest, files: &files })?;
        Ok(self.root)
    }
}

/// Shortest round-trip exponent form; negative zero prints as 0.
pub fn num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v:e}")
}

/// time_s, then re/im of the radiated field per transition.
pub fn emission_csv(dir: &mut RunDir, rel: &str, rec: &EmissionRecord, window: usize) -> Result<()> {
    let w = &rec.windows[window];
    let np = rec.transitions.len();
    let mut header = vec!["time_s".to_string()];
    for t in &rec.transitions {
        header.push(format!("re_{}", t.name()));
        header.push(format!("im_{}", t.name()));
    }
    let times = w.times();
    let rows = (0..w.n_samples).map(|k| {
        let mut r = Vec::with_capacity(1 + 2 * np);
        r.push(num(times[k]));
        for p in 0..np {
            let e = w.emitted[k * np + p];
            r.push(num(e.re));
            r.push(num(e.im));
        }
        r
    });
    dir.write_csv(rel, &header, rows)
}

pub fn spectrum_csv(dir: &mut RunDir, rel: &str, s: &Spectrum) -> Result<()> {
    let header = vec!["frequency_hz".to_string(), "amplitude".to_string()];
    let rows = s.frequency_hz.iter().zip(&s.amplitude).map(|(f, a)| vec![num(*f), num(*a)]);
    dir.write_csv(rel, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_are_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let mut d = RunDir::create(tmp.path()).unwrap();
        d.write_csv("a/b.csv", &["x".into()], vec![vec![num(1.5)], vec![num(-0.0)]]).unwrap();
        let root = d.finish(serde_json::json!({"tool": "t"})).unwrap();
        let text = std::fs::read_to_string(root.join("a/b.csv")).unwrap();
        assert_eq!(text, "x\n1.5e0\n0\n");
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["files"]["a/b.csv"].as_str().unwrap(), hex::encode(Sha256::digest(text.as_bytes())));
        assert_eq!(m["tool"], "t");
    }
}
