use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataMeasure, Provenance, RunRecord, RunSet, SCHEMA_VERSION};
use crate::costmodel::{
    count_params, counts_from_inventory, flop_cost, FineTuneMethod, ModelArch, Registry,
};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    Csv,
    JsonLines,
}

impl SourceFormat {
    fn detect(path: &Path, bytes: &[u8]) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "csv" => SourceFormat::Csv,
            Some(e) if e == "jsonl" || e == "ndjson" || e == "json" => SourceFormat::JsonLines,
            _ => match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
                Some(b'{') => SourceFormat::JsonLines,
                _ => SourceFormat::Csv,
            },
        }
    }
}

/// How strictly a logged `flop` must agree with the cost model.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopCheck {
    /// Reject rows whose flop differs from the recomputed cost by 1e-6 relative or more.
    #[default]
    Strict,
    /// Keep such rows but report a warning.
    Warn,
    Off,
}

const FLOP_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub registry: Registry,
    pub flop_check: FlopCheck,
    /// Source column name → canonical field name, for logs written by other tools.
    pub column_map: BTreeMap<String, String>,
    /// Overrides each row's `data_measure`.
    pub data_measure: Option<DataMeasure>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            registry: Registry::bundled(),
            flop_check: FlopCheck::Strict,
            column_map: BTreeMap::new(),
            data_measure: None,
        }
    }
}

impl LoadOptions {
    /// Reads a column mapping from a JSON object `{ "source": "canonical", ... }`.
    pub fn with_column_map_file(mut self, path: &Path) -> Result<Self> {
        self.column_map = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    /// 1-based line in the source file.
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub runs: RunSet,
    pub rejected: Vec<RowDiagnostic>,
    pub warnings: Vec<RowDiagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Null,
    Num(f64),
    Text(String),
}

struct RawRow {
    line: u64,
    cells: BTreeMap<String, Cell>,
}

pub fn load_runs(path: &Path, opts: &LoadOptions) -> Result<LoadReport> {
    let bytes = std::fs::read(path)?;
    let format = SourceFormat::detect(path, &bytes);
    parse_runs(&bytes, format, path, opts)
}

/// Parses and validates run records from in-memory bytes.
pub fn parse_runs(bytes: &[u8], format: SourceFormat, origin: &Path, opts: &LoadOptions) -> Result<LoadReport> {
    let rows = match format {
        SourceFormat::Csv => read_csv(bytes, origin)?,
        SourceFormat::JsonLines => read_jsonl(bytes, origin)?,
    };
    let n_rows = rows.len();
    let mut records = Vec::with_capacity(n_rows);
    let mut rejected = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();

    for row in rows {
        let line = row.line;
        match normalise_row(row, opts) {
            Ok((rec, warn)) => {
                if let Some(w) = warn {
                    warnings.push(RowDiagnostic { line, message: w });
                }
                if !seen.insert(rec.key()) {
                    rejected.push(RowDiagnostic {
                        line,
                        message: format!(
                            "duplicate of an earlier run ({}, {}, flop {:e}); add a distinct `replicate` index to keep both",
                            rec.model_name, rec.method, rec.flop
                        ),
                    });
                    continue;
                }
                records.push(rec);
            }
            Err(message) => rejected.push(RowDiagnostic { line, message }),
        }
    }

    if records.is_empty() {
        let detail: Vec<String> = rejected.iter().take(3).map(ToString::to_string).collect();
        return Err(Error::EmptyRunSet(format!(
            "{}: {} of {n_rows} rows rejected{}{}",
            origin.display(),
            rejected.len(),
            if detail.is_empty() { "" } else { "; " },
            detail.join("; ")
        )));
    }

    let provenance = Provenance {
        source_digest: sha256_hex(bytes),
        schema_version: SCHEMA_VERSION,
        origin: origin.display().to_string(),
    };
    Ok(LoadReport {
        runs: RunSet::new(records, provenance)?,
        rejected,
        warnings,
    })
}

fn format_error(origin: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: PathBuf::from(origin),
        offset,
        message: message.into(),
    }
}

fn read_csv(bytes: &[u8], origin: &Path) -> Result<Vec<RawRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| csv_format_error(origin, &e))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(format_error(origin, 0, "missing CSV header row"));
    }
    let mut rows = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                let line = rec.position().map_or(0, |p| p.line());
                let cells = headers
                    .iter()
                    .zip(rec.iter())
                    .map(|(h, v)| {
                        let cell = if v.is_empty() { Cell::Null } else { Cell::Text(v.to_string()) };
                        (h.to_string(), cell)
                    })
                    .collect();
                rows.push(RawRow { line, cells });
            }
            Err(e) => return Err(csv_format_error(origin, &e)),
        }
    }
    Ok(rows)
}

fn csv_format_error(origin: &Path, e: &csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    format_error(origin, offset, e.to_string())
}

fn read_jsonl(bytes: &[u8], origin: &Path) -> Result<Vec<RawRow>> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        format_error(origin, e.valid_up_to() as u64, "input is not valid UTF-8")
    })?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (idx, raw_line) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += raw_line.len() as u64;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| {
            let lead = (raw_line.len() - raw_line.trim_start().len()) as u64;
            format_error(origin, line_start + lead + e.column().saturating_sub(1) as u64, e.to_string())
        })?;
        let obj = match value {
            serde_json::Value::Object(m) => m,
            _ => return Err(format_error(origin, line_start, "each line must be a JSON object")),
        };
        let cells = obj
            .into_iter()
            .map(|(k, v)| {
                let cell = match v {
                    serde_json::Value::Null => Cell::Null,
                    serde_json::Value::Number(n) => Cell::Num(n.as_f64().unwrap_or(f64::NAN)),
                    serde_json::Value::String(s) => Cell::Text(s),
                    other => Cell::Text(other.to_string()),
                };
                (k, cell)
            })
            .collect();
        rows.push(RawRow {
            line: idx as u64 + 1,
            cells,
        });
    }
    Ok(rows)
}

struct Fields {
    cells: BTreeMap<String, Cell>,
}

impl Fields {
    fn new(cells: BTreeMap<String, Cell>, map: &BTreeMap<String, String>) -> Self {
        let cells = cells
            .into_iter()
            .map(|(k, v)| (map.get(&k).cloned().unwrap_or(k), v))
            .collect();
        Fields { cells }
    }

    fn text(&self, name: &str) -> Option<String> {
        match self.cells.get(name)? {
            Cell::Null => None,
            Cell::Text(s) => Some(s.clone()),
            Cell::Num(n) => Some(n.to_string()),
        }
    }

    fn num(&self, name: &str) -> std::result::Result<Option<f64>, String> {
        match self.cells.get(name) {
            None | Some(Cell::Null) => Ok(None),
            Some(Cell::Num(n)) => Ok(Some(*n)),
            Some(Cell::Text(s)) => s
                .trim()
                .parse::<f64>()
                .map(Some)
                .map_err(|_| format!("{name} must be numeric, got `{s}`")),
        }
    }

    fn count(&self, name: &str) -> std::result::Result<Option<u64>, String> {
        match self.num(name)? {
            None => Ok(None),
            Some(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 1.8e19 => Ok(Some(v as u64)),
            Some(v) => Err(format!("{name} must be a non-negative integer, got {v}")),
        }
    }

    fn require_num(&self, name: &str) -> std::result::Result<f64, String> {
        self.num(name)?.ok_or_else(|| format!("missing required field {name}"))
    }
}

fn resolve_method(
    raw: &str,
    hyper: Option<f64>,
    arch: Option<&ModelArch>,
) -> std::result::Result<FineTuneMethod, String> {
    let bare = raw.trim().to_ascii_lowercase();
    let text = match (bare.as_str(), hyper) {
        ("lora", Some(r)) => format!("lora:{}", r.round() as i64),
        ("freeze", Some(active)) => {
            let arch = arch.ok_or("method `freeze` without a block count needs a registry architecture")?;
            if !(0.0..=1.0).contains(&active) || active == 0.0 {
                return Err(format!("active block fraction must lie in (0, 1], got {active}"));
            }
            let k = ((1.0 - active) * arch.n_layers as f64).round() as usize;
            format!("freeze:{k}")
        }
        _ => raw.to_string(),
    };
    text.parse::<FineTuneMethod>().map_err(|e| e.to_string())
}

fn normalise_row(
    row: RawRow,
    opts: &LoadOptions,
) -> std::result::Result<(RunRecord, Option<String>), String> {
    let f = Fields::new(row.cells, &opts.column_map);

    if let Some(v) = f.count("schema_version")? {
        if v as u32 > SCHEMA_VERSION {
            return Err(format!("schema_version {v} is newer than supported ({SCHEMA_VERSION})"));
        }
    }
    let model_name = f
        .text("model_name")
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or("missing required field model_name")?;
    let method_raw = f.text("method").ok_or("missing required field method")?;
    let final_loss = f.require_num("final_loss")?;
    if !(final_loss.is_finite() && final_loss > 0.0) {
        return Err(format!("final_loss must be positive, got {final_loss}"));
    }
    let tokens = f.require_num("tokens")?;
    if !(tokens.is_finite() && tokens >= 0.0) {
        return Err(format!("tokens must be non-negative, got {tokens}"));
    }
    let method_hyper = f.num("method_hyper")?;
    let data_measure = match opts.data_measure {
        Some(m) => m,
        None => match f.text("data_measure").as_deref().map(str::trim) {
            None | Some("tokens") => DataMeasure::Tokens,
            Some("steps") => DataMeasure::Steps,
            Some(other) => return Err(format!("data_measure must be tokens or steps, got `{other}`")),
        },
    };

    let arch = opts.registry.get(&model_name);
    let method = resolve_method(&method_raw, method_hyper, arch)?;

    let mut rec = RunRecord {
        schema_version: SCHEMA_VERSION,
        model_name,
        n_total: 0,
        n_nonembed: 0,
        method_hyper,
        trainable_fraction: f.num("trainable_fraction")?.unwrap_or(f64::NAN),
        tokens,
        steps: f.count("steps")?,
        batch_size: f.count("batch_size")?,
        context_len: f.count("context_len")?,
        flop: f.num("flop")?.unwrap_or(f64::NAN),
        final_loss,
        mteb_score: f.num("mteb_score")?,
        data_measure,
        replicate: f.count("replicate")?.map(|r| r as u32),
        method,
    };
    let given_total = f.count("n_total")?;
    let given_nonembed = f.count("n_nonembed")?;
    let mut warning = None;

    match arch {
        Some(arch) => {
            let inv = count_params(arch).map_err(|e| e.to_string())?;
            let counts = counts_from_inventory(arch, &inv, &rec.method).map_err(|e| e.to_string())?;
            rec.n_total = given_total.unwrap_or(counts.n_total);
            rec.n_nonembed = given_nonembed.unwrap_or(counts.n_nonembed);
            if rec.trainable_fraction.is_nan() {
                rec.trainable_fraction = counts.trainable_fraction;
            }
            if rec.method_hyper.is_none() {
                rec.method_hyper = match &rec.method {
                    FineTuneMethod::Lora { rank, .. } => Some(*rank as f64),
                    FineTuneMethod::BlockFreeze { frozen_blocks } => {
                        Some((arch.n_layers - frozen_blocks) as f64 / arch.n_layers as f64)
                    }
                    _ => None,
                };
            }
            let expected = flop_cost(&counts, tokens).map_err(|e| e.to_string())?;
            if rec.flop.is_nan() {
                rec.flop = expected;
            } else if opts.flop_check != FlopCheck::Off {
                let rel = (rec.flop - expected).abs() / rec.flop.abs();
                if !(rel < FLOP_REL_TOL) {
                    let msg = format!(
                        "flop {:e} disagrees with cost model {:e} (relative error {:.3e})",
                        rec.flop, expected, rel
                    );
                    if opts.flop_check == FlopCheck::Strict {
                        return Err(msg);
                    }
                    warning = Some(msg);
                }
            }
        }
        None => {
            rec.n_total = given_total
                .ok_or_else(|| format!("n_total missing and `{}` is not in the registry", rec.model_name))?;
            rec.n_nonembed = given_nonembed
                .ok_or_else(|| format!("n_nonembed missing and `{}` is not in the registry", rec.model_name))?;
            if rec.trainable_fraction.is_nan() {
                return Err(format!(
                    "trainable_fraction missing and `{}` is not in the registry",
                    rec.model_name
                ));
            }
            if rec.flop.is_nan() {
                return Err(format!(
                    "flop missing and cannot be recomputed: `{}` is not in the registry",
                    rec.model_name
                ));
            }
            if rec.method_hyper.is_none() {
                if let FineTuneMethod::Lora { rank, .. } = &rec.method {
                    rec.method_hyper = Some(*rank as f64);
                }
            }
            warning = Some(format!("flop unverified: `{}` is not in the registry", rec.model_name));
        }
    }

    rec.check()?;
    Ok((rec, warning))
}
