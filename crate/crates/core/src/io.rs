//! CSV ingestion and table emission (CSV or JSON, 6 significant digits).

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::multiplicity::{adjust, Correction, MetricSummary};
use crate::report::InferenceReport;
use crate::sim::ScenarioResult;

/// How to read a long-format table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadOptions {
    /// Covariates to use, in order; all remaining columns when `None`.
    pub covariates: Option<Vec<String>>,
    /// Divide the response by this value.
    pub scale: Option<f64>,
    /// Subtract the response mean (after scaling).
    pub center: bool,
}

pub fn load_csv(path: impl AsRef<Path>, response: &str, cluster: &str, options: &LoadOptions) -> Result<ClusteredDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, response, cluster, options)
}

/// Group rows by cluster id in first-appearance order, keeping file order within a cluster.
pub fn read_csv<R: Read>(reader: R, response: &str, cluster: &str, options: &LoadOptions) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let response_idx = find(response)?;
    let cluster_idx = find(cluster)?;
    let covariate_idx: Vec<usize> = match &options.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != response_idx && i != cluster_idx).collect(),
    };
    if covariate_idx.contains(&response_idx) || covariate_idx.contains(&cluster_idx) {
        return Err(Error::Parse { row: 1, message: "covariates overlap the response or cluster column".into() });
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(f64, Vec<f64>)>> = HashMap::new();
    for (k, record) in rdr.records().enumerate() {
        let row = k + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let number = |i: usize| -> Result<f64> {
            let cell = &record[i];
            cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                message: format!("column '{}': '{cell}' is not a finite number", headers[i]),
            })
        };
        let id = record[cluster_idx].to_string();
        if id.is_empty() {
            return Err(Error::Parse { row, message: "empty cluster id".into() });
        }
        let y = number(response_idx)?;
        let xs = covariate_idx.iter().map(|&i| number(i)).collect::<Result<Vec<_>>>()?;
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((y, xs));
    }
    if order.is_empty() {
        return Err(Error::Parse { row: 2, message: "no data rows".into() });
    }

    let p = covariate_idx.len();
    let n: usize = groups.values().map(Vec::len).sum();
    let mut y = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, p);
    let mut sizes = Vec::with_capacity(order.len());
    let mut r = 0;
    for id in &order {
        let rows = &groups[id];
        sizes.push(rows.len());
        for (yv, xs) in rows {
            y[r] = *yv;
            for (j, v) in xs.iter().enumerate() {
                x[(r, j)] = *v;
            }
            r += 1;
        }
    }
    if let Some(scale) = options.scale {
        if !(scale.is_finite() && scale != 0.0) {
            return Err(Error::Validation(format!("response scale must be finite and nonzero, got {scale}")));
        }
        y /= scale;
    }
    if options.center {
        let m = y.mean();
        y.add_scalar_mut(-m);
    }
    let names = covariate_idx.iter().map(|&i| headers[i].clone()).collect();
    ClusteredDataset::random_intercept(sizes, y, x, names)?.with_cluster_labels(order)
}

/// Write a dataset in long format with columns `cluster, y, <covariates>`.
pub fn dataset_to_csv(dataset: &ClusteredDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cluster".to_string(), "y".to_string()];
    header.extend(dataset.column_names().iter().cloned());
    w.write_record(&header)?;
    let labels = dataset.cluster_labels();
    let mut r = 0;
    for (c, &size) in dataset.cluster_sizes().iter().enumerate() {
        for _ in 0..size {
            let mut rec = vec![labels[c].clone(), format!("{:e}", dataset.y()[r])];
            rec.extend((0..dataset.p()).map(|j| format!("{:e}", dataset.x()[(r, j)])));
            w.write_record(&rec)?;
            r += 1;
        }
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Validation(e.to_string()))
}

/// Round to 6 significant digits and render; non-finite values become `inf`, `-inf`, `NaN`.
pub fn format_number(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round_sig(x);
    let a = r.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

/// The value `format_number` denotes.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Validation(format!("unknown format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Num(f64),
    Int(i64),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(x) => format_number(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Num(x) if x.is_finite() => serde_json::Number::from_f64(round_sig(*x)).map_or(Value::Null, Value::Number),
            Cell::Num(x) => Value::String(format_number(*x)),
            Cell::Int(i) => Value::from(*i),
            Cell::Bool(b) => Value::Bool(*b),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        Cell::Num(x.unwrap_or(f64::NAN))
    }
}

/// A rectangular table emitted one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        finish(w)
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let mut m = Map::new();
                for (c, v) in self.columns.iter().zip(row) {
                    m.insert(c.clone(), v.to_json());
                }
                Value::Object(m)
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&Value::Array(rows))?;
        s.push('\n');
        Ok(s)
    }

    pub fn emit(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

/// A table read back as strings keyed by column name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParsedTable {
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let columns = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { columns, rows })
    }

    /// JSON tables carry no header; `columns` gives the expected keys.
    pub fn from_json(text: &str, columns: &[&str]) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let items = value
            .as_array()
            .ok_or_else(|| Error::Parse { row: 0, message: "expected a JSON array of rows".into() })?;
        let rows = items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                columns
                    .iter()
                    .map(|c| match item.get(*c) {
                        Some(Value::String(s)) => Ok(s.clone()),
                        Some(Value::Number(n)) => Ok(n.to_string()),
                        Some(Value::Bool(b)) => Ok(b.to_string()),
                        Some(Value::Null) => Ok("NaN".to_string()),
                        _ => Err(Error::Parse { row: i + 1, message: format!("missing key '{c}'") }),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows,
        })
    }

    pub fn parse(text: &str, format: Format, columns: &[&str]) -> Result<Self> {
        match format {
            Format::Csv => Self::from_csv(text),
            Format::Json => Self::from_json(text, columns),
        }
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Parse { row: 1, message: format!("missing column '{name}'") })
    }

    fn get<T: FromStr>(&self, row: usize, name: &str) -> Result<T> {
        let cell = &self.rows[row][self.index(name)?];
        cell.parse().map_err(|_| Error::Parse {
            row: row + 2,
            message: format!("column '{name}': cannot parse '{cell}'"),
        })
    }
}

pub const REPORT_COLUMNS: [&str; 9] = ["method", "column", "estimate", "p_raw", "p_adjusted", "ci_lo", "ci_hi", "selected", "failed"];

/// One emitted coefficient row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub column: String,
    pub estimate: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub selected: bool,
    pub failed: bool,
}

impl ReportRow {
    pub fn from_report(report: &InferenceReport, correction: Correction) -> Vec<ReportRow> {
        let adjusted = adjust(&report.p_values(), correction);
        report
            .entries
            .iter()
            .zip(adjusted)
            .map(|(e, p_adj)| ReportRow {
                method: report.method.to_string(),
                column: e.name.clone(),
                estimate: e.estimate,
                p_raw: e.p_value,
                p_adjusted: p_adj,
                ci_lo: e.ci_lower,
                ci_hi: e.ci_upper,
                selected: e.selected,
                failed: e.failed,
            })
            .collect()
    }

    /// Copy with every number rounded as emitted.
    pub fn rounded(&self) -> ReportRow {
        ReportRow {
            estimate: round_sig(self.estimate),
            p_raw: round_sig(self.p_raw),
            p_adjusted: round_sig(self.p_adjusted),
            ci_lo: round_sig(self.ci_lo),
            ci_hi: round_sig(self.ci_hi),
            ..self.clone()
        }
    }
}

pub fn report_table(rows: &[ReportRow]) -> Table {
    let mut t = Table::new(&REPORT_COLUMNS);
    for r in rows {
        t.push(vec![
            r.method.as_str().into(),
            r.column.as_str().into(),
            r.estimate.into(),
            r.p_raw.into(),
            r.p_adjusted.into(),
            r.ci_lo.into(),
            r.ci_hi.into(),
            r.selected.into(),
            r.failed.into(),
        ]);
    }
    t
}

pub fn emit_report(report: &InferenceReport, correction: Correction, format: Format) -> Result<String> {
    report_table(&ReportRow::from_report(report, correction)).emit(format)
}

pub fn parse_report(text: &str, format: Format) -> Result<Vec<ReportRow>> {
    let t = ParsedTable::parse(text, format, &REPORT_COLUMNS)?;
    (0..t.rows.len())
        .map(|i| {
            Ok(ReportRow {
                method: t.get(i, "method")?,
                column: t.get(i, "column")?,
                estimate: t.get(i, "estimate")?,
                p_raw: t.get(i, "p_raw")?,
                p_adjusted: t.get(i, "p_adjusted")?,
                ci_lo: t.get(i, "ci_lo")?,
                ci_hi: t.get(i, "ci_hi")?,
                selected: t.get(i, "selected")?,
                failed: t.get(i, "failed")?,
            })
        })
        .collect()
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "scenario",
    "method",
    "status",
    "TPR",
    "FWER",
    "FDR",
    "coverage_signal",
    "coverage_noise",
    "ci_mean",
    "ci_sd",
    "failure_rate",
    "acceptance_rate",
    "replications",
];

/// One scenario-method row of a metric table. `status` is `ok`, `infeasible` or `failed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub status: String,
    pub tpr: f64,
    pub fwer: f64,
    pub fdr: f64,
    pub coverage_signal: f64,
    pub coverage_noise: f64,
    pub ci_mean: f64,
    pub ci_sd: f64,
    pub failure_rate: f64,
    pub acceptance_rate: f64,
    pub replications: usize,
}

impl SummaryRow {
    pub fn from_summary(scenario: &str, method: &str, s: &MetricSummary) -> Self {
        Self {
            scenario: scenario.into(),
            method: method.into(),
            status: "ok".into(),
            tpr: s.tpr,
            fwer: s.fwer,
            fdr: s.fdr,
            coverage_signal: s.coverage_signal,
            coverage_noise: s.coverage_noise,
            ci_mean: s.ci_mean_length,
            ci_sd: s.ci_length_sd,
            failure_rate: s.failure_rate,
            acceptance_rate: s.acceptance_rate,
            replications: s.replication_count,
        }
    }

    fn unavailable(scenario: &str, method: &str, status: &str) -> Self {
        Self {
            scenario: scenario.into(),
            method: method.into(),
            status: status.into(),
            tpr: f64::NAN,
            fwer: f64::NAN,
            fdr: f64::NAN,
            coverage_signal: f64::NAN,
            coverage_noise: f64::NAN,
            ci_mean: f64::NAN,
            ci_sd: f64::NAN,
            failure_rate: f64::NAN,
            acceptance_rate: f64::NAN,
            replications: 0,
        }
    }

    pub fn from_result(result: &ScenarioResult) -> Vec<SummaryRow> {
        result
            .methods
            .iter()
            .map(|m| match (&m.summary, &m.infeasible) {
                (Some(s), _) => SummaryRow::from_summary(&result.scenario, &m.label, s),
                (None, Some(_)) => SummaryRow::unavailable(&result.scenario, &m.label, "infeasible"),
                (None, None) => SummaryRow::unavailable(&result.scenario, &m.label, "failed"),
            })
            .collect()
    }

    pub fn rounded(&self) -> Self {
        Self {
            tpr: round_sig(self.tpr),
            fwer: round_sig(self.fwer),
            fdr: round_sig(self.fdr),
            coverage_signal: round_sig(self.coverage_signal),
            coverage_noise: round_sig(self.coverage_noise),
            ci_mean: round_sig(self.ci_mean),
            ci_sd: round_sig(self.ci_sd),
            failure_rate: round_sig(self.failure_rate),
            acceptance_rate: round_sig(self.acceptance_rate),
            ..self.clone()
        }
    }

    /// Field-wise equality treating NaN as equal to NaN.
    pub fn same_as(&self, other: &Self) -> bool {
        let eq = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        self.scenario == other.scenario
            && self.method == other.method
            && self.status == other.status
            && self.replications == other.replications
            && eq(self.tpr, other.tpr)
            && eq(self.fwer, other.fwer)
            && eq(self.fdr, other.fdr)
            && eq(self.coverage_signal, other.coverage_signal)
            && eq(self.coverage_noise, other.coverage_noise)
            && eq(self.ci_mean, other.ci_mean)
            && eq(self.ci_sd, other.ci_sd)
            && eq(self.failure_rate, other.failure_rate)
            && eq(self.acceptance_rate, other.acceptance_rate)
    }
}

pub fn summary_table(rows: &[SummaryRow]) -> Table {
    let mut t = Table::new(&SUMMARY_COLUMNS);
    for r in rows {
        t.push(vec![
            r.scenario.as_str().into(),
            r.method.as_str().into(),
            r.status.as_str().into(),
            r.tpr.into(),
            r.fwer.into(),
            r.fdr.into(),
            r.coverage_signal.into(),
            r.coverage_noise.into(),
            r.ci_mean.into(),
            r.ci_sd.into(),
            r.failure_rate.into(),
            r.acceptance_rate.into(),
            r.replications.into(),
        ]);
    }
    t
}

pub fn emit_summaries(rows: &[SummaryRow], format: Format) -> Result<String> {
    summary_table(rows).emit(format)
}

pub fn parse_summaries(text: &str, format: Format) -> Result<Vec<SummaryRow>> {
    let t = ParsedTable::parse(text, format, &SUMMARY_COLUMNS)?;
    (0..t.rows.len())
        .map(|i| {
            Ok(SummaryRow {
                scenario: t.get(i, "scenario")?,
                method: t.get(i, "method")?,
                status: t.get(i, "status")?,
                tpr: t.get(i, "TPR")?,
                fwer: t.get(i, "FWER")?,
                fdr: t.get(i, "FDR")?,
                coverage_signal: t.get(i, "coverage_signal")?,
                coverage_noise: t.get(i, "coverage_noise")?,
                ci_mean: t.get(i, "ci_mean")?,
                ci_sd: t.get(i, "ci_sd")?,
                failure_rate: t.get(i, "failure_rate")?,
                acceptance_rate: t.get(i, "acceptance_rate")?,
                replications: t.get(i, "replications")?,
            })
        })
        .collect()
}
