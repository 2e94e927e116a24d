//! Deterministic CSV/JSON output helpers.
//!
//! All floating-point values are written with 17 significant digits so that
//! re-running a scenario with the same inputs produces byte-identical files.

use crate::error::Result;
use std::fmt::Write as _;
use std::path::Path;

/// Format a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // normalize -0.0
        return "0".to_string();
    }
    format!("{:.16e}", x)
}

/// A rectangular CSV table with a header row.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        CsvTable {
            header: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.header.len(), "row width mismatch");
        self.rows.push(values.iter().map(|&v| fmt_f64(v)).collect());
    }

    pub fn push_mixed_row(&mut self, values: &[CsvValue]) {
        assert_eq!(values.len(), self.header.len(), "row width mismatch");
        self.rows.push(
            values
                .iter()
                .map(|v| match v {
                    CsvValue::Float(x) => fmt_f64(*x),
                    CsvValue::Int(i) => i.to_string(),
                    CsvValue::Str(s) => s.clone(),
                })
                .collect(),
        );
    }

    pub fn to_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

pub enum CsvValue {
    Float(f64),
    Int(i64),
    Str(String),
}

/// Write a serializable sidecar as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a whitespace/`=`-separated flat `key=value` configuration file.
/// Lines starting with `#` and blank lines are ignored.
pub fn parse_flat_config(text: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            crate::Error::Parse(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for &x in &[1.0, -3.25e-17, std::f64::consts::PI, 1e300, -0.0, 6.02e23] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            if x == 0.0 {
                assert_eq!(back, 0.0);
            } else {
                assert_eq!(back, x, "parsing {s} did not round-trip");
            }
        }
    }

    #[test]
    fn flat_config_parses_and_rejects() {
        let cfg = parse_flat_config("# comment\n\n a = 1.5 \n b=text\n").unwrap();
        assert_eq!(cfg["a"], "1.5");
        assert_eq!(cfg["b"], "text");
        assert!(parse_flat_config("oops").is_err());
    }
}
