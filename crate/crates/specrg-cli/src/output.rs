//! Tables, their CSV and JSON renderings, and atomic file writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use specrg::report::CheckResult;

use crate::error::CliError;

/// Column orders, kept in step with `schema/columns.json`.
pub mod columns {
    pub const FLOW: [&str; 9] = ["n", "z_n", "dE0", "dHf", "a_n", "eta_n", "eps_proxy", "sigma_n", "lognormsq"];
    /// Appended to [`FLOW`] in `both` mode: iterated minus direct.
    pub const FLOW_AGREEMENT: [&str; 3] = ["diff_z_n", "diff_a_n", "diff_dHf"];
    pub const TOY: [&str; 4] = ["sigma0", "e_lin", "log_norm_sq", "slope_fit"];
    pub const SCALARFLOW: [&str; 4] = ["n", "eps_n", "lambda_n", "floor_active"];
    pub const FESHBACH: [&str; 5] = ["identity", "max_residual", "threshold", "upper_bound", "pass"];
    pub const WT: [&str; 11] = [
        "shells",
        "k_abs",
        "residual_norm",
        "kinematic_norm",
        "coefficient_residual",
        "gap",
        "gap_bound",
        "bound_excess",
        "kernel_extracted",
        "kernel_predicted",
        "kernel_band",
    ];
    pub const SWEEP: [&str; 12] =
        ["axis", "value", "g", "p", "sigma0", "e0", "de0_dp", "dHf", "a_final", "slope_fit", "a_band_ok", "error"];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    F(f64),
    U(usize),
    B(bool),
    S(String),
    Empty,
}

impl Cell {
    pub fn opt(v: Option<f64>) -> Cell {
        v.map_or(Cell::Empty, Cell::F)
    }

    fn text(&self) -> String {
        match self {
            // shortest round-trip form, exponent for very small or large values
            Cell::F(x) if x.is_finite() => json!(x).to_string(),
            Cell::F(x) => x.to_string(),
            Cell::U(n) => n.to_string(),
            Cell::B(b) => b.to_string(),
            Cell::S(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn value(&self) -> Value {
        match self {
            Cell::F(x) => json!(x),
            Cell::U(n) => json!(n),
            Cell::B(b) => json!(b),
            Cell::S(s) => json!(s),
            Cell::Empty => Value::Null,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(|e| CliError::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::text)).map_err(|e| CliError::Io(e.to_string()))?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "columns": self.columns,
            "rows": self.rows.iter().map(|r| r.iter().map(Cell::value).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// What one subcommand produced.
#[derive(Debug)]
pub struct Outcome {
    pub command: &'static str,
    pub table: Table,
    /// JSON rendering; defaults to the table.
    pub json: Option<Value>,
    pub checks: Vec<CheckResult>,
}

impl Outcome {
    pub fn render(&self, format: Format) -> Result<Vec<u8>, CliError> {
        match format {
            Format::Csv => self.table.to_csv(),
            Format::Json => pretty(self.json.as_ref().unwrap_or(&self.table.to_json())),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub command: &'a str,
    pub pass: bool,
    pub checks: Vec<&'a CheckResult>,
}

impl<'a> Summary<'a> {
    pub fn of(command: &'a str, outcomes: &'a [Outcome]) -> Self {
        let checks: Vec<&CheckResult> = outcomes.iter().flat_map(|o| &o.checks).collect();
        Summary { command, pass: checks.iter().all(|c| c.pass), checks }
    }
}

pub fn pretty<T: Serialize + ?Sized>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Write through a temporary file in the target directory and rename it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

/// `dir/trace.csv` -> `dir/trace.summary.json`.
pub fn summary_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "specrg".into());
    data.with_file_name(format!("{stem}.summary.json"))
}
