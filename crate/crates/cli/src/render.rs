//! Turning command results into json, csv or aligned-table text.

use anyhow::Result;
use clap::ValueEnum;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

/// A command result. `rows` is the tabular view used by csv and table output;
/// when absent the top-level fields of `json` become key/value rows.
pub struct Output {
    pub json: Value,
    pub rows: Option<Vec<Value>>,
}

impl Output {
    pub fn new(json: Value) -> Self {
        Output { json, rows: None }
    }

    pub fn with_rows(json: Value, rows: Vec<Value>) -> Self {
        Output { json, rows: Some(rows) }
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&self.json)?;
                s.push('\n');
                Ok(s)
            }
            Format::Csv => to_csv(&self.table()),
            Format::Table => Ok(to_table(&self.table())),
        }
    }

    fn table(&self) -> Vec<Vec<String>> {
        match &self.rows {
            Some(rows) => records_table(rows),
            None => key_value_table(&self.json),
        }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Header row followed by one row per object. Columns follow the first
/// object's keys, then any keys first seen later.
fn records_table(rows: &[Value]) -> Vec<Vec<String>> {
    let mut header: Vec<String> = Vec::new();
    for r in rows {
        if let Value::Object(m) = r {
            for k in m.keys() {
                if !header.contains(k) {
                    header.push(k.clone());
                }
            }
        }
    }
    let mut out = vec![header.clone()];
    for r in rows {
        out.push(header.iter().map(|k| r.get(k).map(cell).unwrap_or_default()).collect());
    }
    out
}

fn key_value_table(v: &Value) -> Vec<Vec<String>> {
    let mut out = vec![vec!["key".to_string(), "value".to_string()]];
    match v {
        Value::Object(m) => out.extend(m.iter().map(|(k, v)| vec![k.clone(), cell(v)])),
        other => out.push(vec!["value".into(), cell(other)]),
    }
    out
}

fn to_csv(table: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in table.iter().filter(|r| !r.is_empty()) {
        w.write_record(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn to_table(table: &[Vec<String>]) -> String {
    let ncol = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| table.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in table {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}
