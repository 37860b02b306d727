//! Artifact files with bit-stable bytes.
//!
//! Floats go through the shortest-roundtrip formatter, JSON key order is
//! struct declaration order, and nothing records a timestamp, so rerunning
//! the same config and seed reproduces every file byte for byte.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{cfg, Failure};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A non-finite value in an artifact means the simulation left its domain.
pub fn fmt_f64(v: f64) -> Result<String, Failure> {
    if !v.is_finite() {
        return Err(Failure::Numeric(format!("non-finite value {v} in output")));
    }
    let v = if v == 0.0 { 0.0 } else { v };
    Ok(format!("{v}"))
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(cols: &[S]) -> Self {
        Self {
            header: cols.iter().map(|c| c.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "row width mismatch");
        self.rows.push(cells);
    }

    /// Formats the floats and appends optional trailing string cells
    /// (e.g. a seed column).
    pub fn push_f64(&mut self, vals: &[f64], tail: &[&str]) -> Result<(), Failure> {
        let mut cells = Vec::with_capacity(vals.len() + tail.len());
        for &v in vals {
            cells.push(fmt_f64(v)?);
        }
        cells.extend(tail.iter().map(|s| s.to_string()));
        self.push(cells);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(path: &str) -> Result<Self, Failure> {
        let root = PathBuf::from(path);
        fs::create_dir_all(&root)
            .map_err(|e| cfg(format!("cannot create output directory {path}: {e}")))?;
        Ok(Self { root })
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.root.join(name);
        fs::write(&path, bytes)
            .map_err(|e| cfg(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| cfg(format!("serialize {name}: {e}")))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub schema_version: u32,
    pub kind: &'a str,
    pub config_sha256: String,
    pub seeds: &'a [String],
    pub versions: Versions,
}

#[derive(Serialize)]
pub struct Versions {
    pub otto: &'static str,
    pub otto_cli: &'static str,
}

pub fn manifest<'a>(kind: &'a str, raw_config: &[u8], seeds: &'a [String]) -> Manifest<'a> {
    Manifest {
        schema_version: 1,
        kind,
        config_sha256: sha256_hex(raw_config),
        seeds,
        versions: Versions {
            otto: otto::VERSION,
            otto_cli: env!("CARGO_PKG_VERSION"),
        },
    }
}

/// Writes the standard artifact triple for one run.
pub fn write_run<T: Serialize>(
    out: &OutDir,
    table: &Table,
    diagnostics: &T,
    manifest: &Manifest,
) -> Result<(), Failure> {
    out.write("results.csv", &table.to_bytes())?;
    out.write_json("diagnostics.json", diagnostics)?;
    out.write_json("manifest.json", manifest)
}

/// Value column of the invariants table: non-finite values still get a
/// deterministic cell instead of aborting the report.
pub fn fmt_lenient(v: f64) -> String {
    if v.is_finite() {
        if v == 0.0 {
            "0".into()
        } else {
            format!("{v}")
        }
    } else {
        format!("{v}")
    }
}
