//! Tables and files. Every CSV row and every JSON document carries the
//! config hash.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// sha256 over the effective config and every input file, canonically
/// re-serialized.
pub fn config_hash(cfg: &RunConfig, inputs: &[(String, Value)]) -> String {
    let doc = json!({ "config": cfg, "inputs": inputs });
    let canonical = serde_json::to_string(&doc).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A computed value with its oracle and tolerance.
#[derive(Clone, Debug)]
pub struct Claim {
    pub section: String,
    pub quantity: String,
    pub value: f64,
    pub oracle: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: Option<bool>,
}

/// `|value - oracle| ≤ tolerance`.
pub fn residual(section: &str, quantity: &str, value: f64, oracle: f64, tolerance: f64) -> Claim {
    Claim {
        section: section.into(),
        quantity: quantity.into(),
        value,
        oracle: Some(oracle),
        tolerance: Some(tolerance),
        pass: Some((value - oracle).abs() <= tolerance),
    }
}

/// `value ≤ bound`.
pub fn at_most(section: &str, quantity: &str, value: f64, bound: f64) -> Claim {
    Claim {
        section: section.into(),
        quantity: quantity.into(),
        value,
        oracle: Some(bound),
        tolerance: None,
        pass: Some(value <= bound),
    }
}

/// `value > 0`.
pub fn positive(section: &str, quantity: &str, value: f64) -> Claim {
    Claim { section: section.into(), quantity: quantity.into(), value, oracle: None, tolerance: None, pass: Some(value > 0.0) }
}

pub fn info(section: &str, quantity: &str, value: f64) -> Claim {
    Claim { section: section.into(), quantity: quantity.into(), value, oracle: None, tolerance: None, pass: None }
}

/// Shortest round-trip form, in exponent notation when very small or large.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) { format!("{v:e}") } else { v.to_string() }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Everything a command produces, written only once the run has finished.
pub struct Output {
    pub hash: String,
    pub claims: Vec<Claim>,
    /// Extra table: header and rows.
    pub table: Option<(Vec<String>, Vec<Vec<String>>)>,
    /// `(series, x, y)` in long format.
    pub plot: Vec<(String, f64, f64)>,
    pub details: Value,
}

impl Output {
    pub fn new(hash: String) -> Self {
        Output { hash, claims: Vec::new(), table: None, plot: Vec::new(), details: Value::Null }
    }

    pub fn series(&mut self, name: &str, points: impl IntoIterator<Item = (f64, f64)>) {
        self.plot.extend(points.into_iter().map(|(x, y)| (name.to_string(), x, y)));
    }

    pub fn failures(&self) -> Vec<&Claim> {
        self.claims.iter().filter(|c| c.pass == Some(false)).collect()
    }

    pub fn claims_csv(&self) -> String {
        let mut s = String::from("config_hash,section,quantity,value,oracle,tolerance,pass\n");
        for c in &self.claims {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.hash,
                csv_field(&c.section),
                csv_field(&c.quantity),
                num(c.value),
                opt(c.oracle),
                opt(c.tolerance),
                c.pass.map(|p| p.to_string()).unwrap_or_default()
            );
        }
        s
    }

    pub fn table_csv(&self) -> Option<String> {
        let (header, rows) = self.table.as_ref()?;
        let mut s = format!("config_hash,{}\n", header.join(","));
        for r in rows {
            let cells: Vec<String> = r.iter().map(|c| csv_field(c)).collect();
            let _ = writeln!(s, "{},{}", self.hash, cells.join(","));
        }
        Some(s)
    }

    pub fn plot_csv(&self) -> String {
        let mut s = String::from("config_hash,series,x,y\n");
        for (name, x, y) in &self.plot {
            let _ = writeln!(s, "{},{},{},{}", self.hash, csv_field(name), num(*x), num(*y));
        }
        s
    }

    pub fn json(&self) -> String {
        let claims: Vec<Value> = self
            .claims
            .iter()
            .map(|c| {
                json!({
                    "section": c.section,
                    "quantity": c.quantity,
                    "value": finite(c.value),
                    "oracle": c.oracle.map(finite),
                    "tolerance": c.tolerance.map(finite),
                    "pass": c.pass,
                })
            })
            .collect();
        let doc = json!({ "config_hash": self.hash, "claims": claims, "details": self.details });
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }
}

/// JSON has no infinities; they are written as strings.
fn finite(v: f64) -> Value {
    if v.is_finite() { json!(v) } else { json!(v.to_string()) }
}

pub fn write(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, contents)
}
