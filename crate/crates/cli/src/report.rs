//! Tabular command output in CSV and JSON.
//!
//! Both encodings carry the schema version, the command name and the full
//! config. CSV puts those in `#` comment lines above the header row; JSON
//! puts them in top-level fields. Floats are written in shortest round-trip
//! form and non-finite floats as the strings `NaN`, `inf`, `-inf`, so the two
//! encodings hold identical values.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Number};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Format, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
    Missing,
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(i) => Some(i as f64),
            Value::Float(x) => Some(x),
            Value::Text(ref s) => match s.as_str() {
                "NaN" => Some(f64::NAN),
                "inf" => Some(f64::INFINITY),
                "-inf" => Some(f64::NEG_INFINITY),
                _ => None,
            },
            Value::Missing => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    fn float(x: f64) -> Self {
        if x.is_finite() {
            Value::Float(x)
        } else if x.is_nan() {
            Value::Text("NaN".into())
        } else if x > 0.0 {
            Value::Text("inf".into())
        } else {
            Value::Text("-inf".into())
        }
    }

    fn to_csv(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Float(x) => format!("{x:?}"),
            Value::Text(s) => s.clone(),
            Value::Missing => String::new(),
        }
    }

    fn from_csv(s: &str) -> Self {
        if s.is_empty() {
            Value::Missing
        } else if let Ok(i) = s.parse::<i64>() {
            Value::Int(i)
        } else if s.contains(['.', 'e']) && s.parse::<f64>().is_ok_and(f64::is_finite) {
            Value::Float(s.parse().unwrap())
        } else {
            Value::Text(s.to_owned())
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Int(i) => json!(i),
            Value::Float(x) => Number::from_f64(*x).map_or(serde_json::Value::Null, serde_json::Value::Number),
            Value::Text(s) => json!(s),
            Value::Missing => serde_json::Value::Null,
        }
    }

    fn from_json(v: &serde_json::Value) -> Result<Self, ReportError> {
        Ok(match v {
            serde_json::Value::Null => Value::Missing,
            serde_json::Value::String(s) => Value::Text(s.clone()),
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(i) if !n.is_f64() => Value::Int(i),
                _ => Value::Float(n.as_f64().ok_or_else(|| ReportError::Malformed(format!("number {n}")))?),
            },
            other => return Err(ReportError::Malformed(format!("unexpected cell {other}"))),
        })
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::float(x)
    }
}

impl From<u64> for Value {
    fn from(x: u64) -> Self {
        Value::Int(x as i64)
    }
}

impl From<usize> for Value {
    fn from(x: usize) -> Self {
        Value::Int(x as i64)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Text(if b { "true" } else { "false" }.into())
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl<T: Into<Value>> From<Option<T>> for Value {
    fn from(v: Option<T>) -> Self {
        v.map_or(Value::Missing, Into::into)
    }
}

/// Column names plus rows of cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cells of column `name`, in row order.
    pub fn values(&self, name: &str) -> Vec<&Value> {
        match self.column(name) {
            Some(i) => self.rows.iter().map(|r| &r[i]).collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub command: String,
    pub config: ExperimentConfig,
    pub table: Table,
}

impl Report {
    pub fn new(command: &str, config: &ExperimentConfig, table: Table) -> Self {
        Self { command: command.into(), config: config.clone(), table }
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut out = format!("# schema: {SCHEMA_VERSION}\n# command: {}\n", self.command);
        for line in self.config.to_toml()?.lines() {
            out.push_str(if line.is_empty() { "# config:" } else { "# config: " });
            out.push_str(line);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.table.columns)?;
        for row in &self.table.rows {
            w.write_record(row.iter().map(Value::to_csv))?;
        }
        let body = w.into_inner().map_err(|e| ReportError::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(body).map_err(|e| ReportError::Malformed(e.to_string()))?);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        let rows: Vec<serde_json::Value> = self
            .table
            .rows
            .iter()
            .map(|r| {
                let obj: Map<String, serde_json::Value> =
                    self.table.columns.iter().cloned().zip(r.iter().map(Value::to_json)).collect();
                serde_json::Value::Object(obj)
            })
            .collect();
        let doc = json!({
            "schema": SCHEMA_VERSION,
            "command": self.command,
            "config": serde_json::to_value(&self.config)?,
            "columns": self.table.columns,
            "rows": rows,
        });
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }

    pub fn render(&self, format: Format) -> Result<String, ReportError> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    /// Writes to `path`, or to stdout when `path` is `None`.
    pub fn write(&self, format: Format, path: Option<&Path>) -> Result<(), ReportError> {
        let text = self.render(format)?;
        match path {
            Some(p) => std::fs::write(p, text)?,
            None => std::io::stdout().lock().write_all(text.as_bytes())?,
        }
        Ok(())
    }
}

/// Header fields of a parsed report.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub schema: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub table: Table,
}

pub fn parse_csv(text: &str) -> Result<Parsed, ReportError> {
    let mut schema = None;
    let mut command = None;
    let mut config = String::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(v) = line.strip_prefix("# schema: ") {
            schema = v.trim().parse().ok();
        } else if let Some(v) = line.strip_prefix("# command: ") {
            command = Some(v.trim().to_owned());
        } else if let Some(v) = line.strip_prefix("# config: ") {
            config.push_str(v);
            config.push('\n');
        } else if line == "# config:" {
            config.push('\n');
        }
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let columns: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let mut table = Table { columns, rows: Vec::new() };
    for rec in r.records() {
        table.rows.push(rec?.iter().map(Value::from_csv).collect());
    }
    Ok(Parsed {
        schema: schema.ok_or_else(|| ReportError::Malformed("missing schema line".into()))?,
        command: command.ok_or_else(|| ReportError::Malformed("missing command line".into()))?,
        config: ExperimentConfig::parse(&config)?,
        table,
    })
}

pub fn parse_json(text: &str) -> Result<Parsed, ReportError> {
    let doc: serde_json::Value = serde_json::from_str(text)?;
    let field = |k: &str| doc.get(k).ok_or_else(|| ReportError::Malformed(format!("missing field {k}")));
    let schema = field("schema")?.as_u64().ok_or_else(|| ReportError::Malformed("schema".into()))? as u32;
    let command = field("command")?.as_str().ok_or_else(|| ReportError::Malformed("command".into()))?.to_owned();
    let config: ExperimentConfig = serde_json::from_value(field("config")?.clone())?;
    let columns: Vec<String> = serde_json::from_value(field("columns")?.clone())?;
    let mut table = Table { columns, rows: Vec::new() };
    for row in field("rows")?.as_array().ok_or_else(|| ReportError::Malformed("rows".into()))? {
        let mut cells = Vec::with_capacity(table.columns.len());
        for c in &table.columns {
            cells.push(Value::from_json(row.get(c).unwrap_or(&serde_json::Value::Null))?);
        }
        table.rows.push(cells);
    }
    Ok(Parsed { schema, command, config, table })
}
