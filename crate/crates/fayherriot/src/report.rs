//! Report emission: versioned JSON and CSV files carrying identical values.
//!
//! Every report embeds the schema version, the command, the fully resolved
//! run configuration and the seed. CSV files carry the same metadata as
//! leading `#`-comment lines before the header row. Numeric output uses the
//! shortest representation that parses back to the same value (the default
//! behavior of both the JSON serializer and `f64`'s `Display`).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A complete report: metadata plus homogeneous rows.
#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub rows: Vec<T>,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, rows: Vec<T>) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config,
            seed,
            rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutputFormat {
    Json,
    Csv,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(Error::Config(format!(
                "unknown output format `{other}` (expected json or csv)"
            ))),
        }
    }
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    if path.as_os_str() == "-" {
        Ok(Box::new(std::io::stdout().lock()))
    } else {
        let file =
            File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Box::new(BufWriter::new(file)))
    }
}

pub fn write_report<T: Serialize>(
    report: &Report<T>,
    format: OutputFormat,
    path: &Path,
) -> Result<()> {
    match format {
        OutputFormat::Json => write_json(report, path),
        OutputFormat::Csv => write_csv(report, path),
    }
}

fn write_json<T: Serialize>(report: &Report<T>, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    serde_json::to_writer_pretty(&mut w, report)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_csv<T: Serialize>(report: &Report<T>, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let meta = format!(
        "# schema_version={}\n# command={}\n# seed={}\n# config={}\n",
        report.schema_version,
        report.command,
        report
            .seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into()),
        serde_json::to_string(&report.config)
            .map_err(|e| Error::Config(format!("serialization failed: {e}")))?,
    );
    w.write_all(meta.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut csv_writer = csv::Writer::from_writer(w);
    for row in &report.rows {
        csv_writer
            .serialize(row)
            .map_err(|e| Error::Config(format!("CSV serialization failed: {e}")))?;
    }
    csv_writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Per-area output of the `fit` command. The MSE components are omitted at
/// a boundary estimate `A = 0`, where the second-order decomposition is not
/// defined.
#[derive(Debug, Clone, Serialize)]
pub struct FitRow {
    pub area_id: String,
    pub a_hat: f64,
    pub b_hat: f64,
    pub theta_hat: f64,
    pub g1: Option<f64>,
    pub g2: Option<f64>,
    pub g3: Option<f64>,
    pub mse_taylor: Option<f64>,
    pub boundary_solution: bool,
}

/// Per-area, per-prior output of the `bayes` command.
#[derive(Debug, Clone, Serialize)]
pub struct BayesRow {
    pub area_id: String,
    pub prior: String,
    pub e_b: f64,
    pub v_b: f64,
    pub e_theta: f64,
    pub v_theta: f64,
    pub nodes: usize,
    pub a_lo: f64,
    pub a_hi: f64,
    pub normalization_log: f64,
    pub heavy_tail: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapRow {
    pub area_id: String,
    pub mse_boot: f64,
    pub mc_stderr: Option<f64>,
}

/// Shrinkage-comparison table sorted by the classical multi-goal estimate,
/// descending: classical (MGF), multi-goal-prior posterior mean (MGP),
/// superharmonic/flat posterior mean (SHP).
#[derive(Debug, Clone, Serialize)]
pub struct Table1Row {
    pub area_id: String,
    pub mgf: f64,
    pub mgp: f64,
    pub shp: f64,
}

/// MSE-comparison table in the same order: parametric bootstrap (PB.MG),
/// Taylor (MGF), multi-goal-prior posterior variance, flat posterior
/// variance.
#[derive(Debug, Clone, Serialize)]
pub struct Table2Row {
    pub area_id: String,
    pub pb_mg: f64,
    pub mgf: f64,
    pub mg_prior: f64,
    pub shp: f64,
}

/// Pointwise nested-error-regression evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct NermRow {
    pub area: usize,
    pub n_i: u64,
    pub sigma_v2: f64,
    pub sigma_e2: f64,
    pub fisher_inv_vv: f64,
    pub fisher_inv_ve: f64,
    pub fisher_inv_ee: f64,
    pub grad_b_v: f64,
    pub grad_b_e: f64,
    pub hess_b_vv: f64,
    pub hess_b_ve: f64,
    pub hess_b_ee: f64,
    pub curvature_h: f64,
    pub k_v: f64,
    pub k_e: f64,
    pub adj_grad_v: f64,
    pub adj_grad_e: f64,
    /// `(d log h)' I_F^-1 (dB) - H`, relative to `|H|`; zero up to roundoff.
    pub defining_residual: f64,
}
