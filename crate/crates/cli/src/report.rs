//! Comma-separated tables and line-delimited JSON records. Every row
//! carries the configuration hash.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use serde_json::{Map, Value};

/// Rows of a report with a fixed column order.
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Table {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    fn cell(v: &Value) -> String {
        let s = match v {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            other => other.to_string(),
        };
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s
        }
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = self.columns.join(",");
        out.push_str(",config_hash\n");
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Self::cell).collect();
            let _ = writeln!(out, "{},{config_hash}", cells.join(","));
        }
        out
    }

    pub fn to_jsonl(&self, config_hash: &str) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut m = Map::new();
            for (c, v) in self.columns.iter().zip(r) {
                m.insert((*c).to_string(), v.clone());
            }
            m.insert("config_hash".into(), config_hash.into());
            out.push_str(&Value::Object(m).to_string());
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.jsonl`; returns both file names.
    pub fn write(&self, dir: &Path, stem: &str, config_hash: &str) -> Result<Vec<String>> {
        let csv = format!("{stem}.csv");
        let jsonl = format!("{stem}.jsonl");
        std::fs::write(dir.join(&csv), self.to_csv(config_hash))?;
        std::fs::write(dir.join(&jsonl), self.to_jsonl(config_hash))?;
        Ok(vec![csv, jsonl])
    }

    /// Aligned text for the terminal.
    pub fn render(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(display).collect())
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].len())
                    .chain([self.columns[i].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let line = |xs: Vec<&str>| -> String {
            xs.iter()
                .zip(&widths)
                .map(|(x, w)| format!("{x:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(self.columns.clone());
        out.push('\n');
        for r in &cells {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}

fn display(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_i64() && !n.is_u64() => format!("{f:.6}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

/// Writes one JSON document with the config hash added at top level.
pub fn write_json(dir: &Path, name: &str, value: &impl Serialize, config_hash: &str) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(m) = &mut v {
        m.insert("config_hash".into(), config_hash.into());
    }
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}
