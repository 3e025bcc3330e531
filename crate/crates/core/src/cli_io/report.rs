//! JSON reports and CSV tables.
//!
//! JSON objects are emitted with sorted keys. CSV files have a header row,
//! `\n` line endings and floats in shortest round-trip form. Every file is
//! written to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    /// File name suffix: `<prefix>.<name>.csv`.
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

/// Shortest decimal that parses back to the same value.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.header.iter().map(|h| csv_text(h)).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(x) => format_float(*x),
                    Cell::Int(n) => n.to_string(),
                    Cell::Text(s) => csv_text(s),
                })
                .collect();
            let _ = write!(out, "{}", cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Everything a run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub command: String,
    /// The resolved configuration, defaults included.
    pub config: Value,
    pub results: Vec<Value>,
    pub tables: Vec<Table>,
}

pub fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

impl Report {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            command: command.into(),
            config,
            results: Vec::new(),
            tables: Vec::new(),
        }
    }

    fn hashed_section(&self) -> Value {
        json!({
            "command": self.command,
            "config": self.config,
            "results": self.results,
        })
    }

    /// SHA-256 of the compact serialization of command, config and results.
    pub fn content_hash(&self) -> String {
        let text = serde_json::to_string(&self.hashed_section()).expect("values always serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// The JSON document; `runtime` holds the details that may differ
    /// between otherwise identical runs and is not hashed.
    pub fn to_json(&self, runtime: Value) -> String {
        let mut doc = self.hashed_section();
        let obj = doc.as_object_mut().expect("object");
        obj.insert("content_hash".into(), Value::String(self.content_hash()));
        obj.insert("runtime".into(), runtime);
        let mut s = serde_json::to_string_pretty(&doc).expect("values always serialize");
        s.push('\n');
        s
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Write `<prefix>.json` and one `<prefix>.<name>.csv` per table. On failure
/// the files already written by this call are removed.
pub fn write_report(report: &Report, prefix: &str, runtime: Value) -> Result<Vec<PathBuf>> {
    let mut jobs = vec![(PathBuf::from(format!("{prefix}.json")), report.to_json(runtime))];
    for t in &report.tables {
        jobs.push((PathBuf::from(format!("{prefix}.{}.csv", t.name)), t.to_csv()));
    }
    let mut written = Vec::new();
    for (path, text) in jobs {
        if let Err(e) = write_atomic(&path, &text) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.0, -0.0, 0.1, 1.0 / 3.0, 1e-300, 6.02e23, -2.5e-7, 123456.789, f64::MAX, f64::MIN_POSITIVE] {
            let s = format_float(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(1e-7), "1e-7");
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new("curve", &["t", "R", "stderr"]);
        t.rows.push(vec![Cell::Num(0.0), Cell::Num(0.25), Cell::Num(1e-9)]);
        t.rows.push(vec![Cell::Text("a,b".into()), Cell::Int(3), Cell::Num(-1.5)]);
        assert_eq!(t.to_csv(), "t,R,stderr\n0,0.25,1e-9\n\"a,b\",3,-1.5\n");
    }

    #[test]
    fn empty_report_is_valid_json_with_sorted_keys() {
        let r = Report::new("check", json!({"zeta": 1, "alpha": 2}));
        let text = r.to_json(json!({}));
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["results"], json!([]));
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert_eq!(v["content_hash"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn hash_ignores_runtime() {
        let r = Report::new("check", json!({}));
        let a: Value = serde_json::from_str(&r.to_json(json!({"threads": 1}))).unwrap();
        let b: Value = serde_json::from_str(&r.to_json(json!({"threads": 8}))).unwrap();
        assert_eq!(a["content_hash"], b["content_hash"]);
    }

    #[test]
    fn files_are_written_and_cleaned_up() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("run").to_string_lossy().into_owned();
        let mut r = Report::new("simulate", json!({}));
        r.tables.push(Table::new("ensemble", &["x1"]));
        let files = write_report(&r, &prefix, json!({})).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files.iter().all(|f| f.exists()));

        let missing = dir.path().join("no/such/dir/run").to_string_lossy().into_owned();
        assert!(write_report(&r, &missing, json!({})).is_err());
    }
}
