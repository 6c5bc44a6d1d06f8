//! Data ingestion, run configuration, command orchestration and report
//! emission: the layer that turns the library into a tool.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::{posterior_summaries_shared, posterior_summary, BayesOptions, PosteriorSummary};
use crate::error::{Error, Result};
use crate::estimators::{fit, FitMethod, FitResult};
use crate::likelihood::{check_propriety, AdjustmentSpec, PriorSpec};
use crate::model::AreaLevelDataset;
use crate::mse::{bootstrap_mse, g_components, BootstrapConfig, RecenteringBeta};
use crate::nerm::{
    adjustment_gradient, curvature_h, fisher_inverse, shrinkage_gradient, shrinkage_hessian,
    NermDesign, Psi,
};
use crate::report::{
    write_report, BayesRow, BootstrapRow, FitRow, NermRow, OutputFormat, Report, Table1Row,
    Table2Row,
};
use crate::verify::{
    bias_study, agreement_study, DPattern, SimulationConfig, StudyOptions, StudyReport,
    StudyKind, XDesign,
};

/// Estimation method selected on the command line.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum MethodChoice {
    Ml,
    Reml,
    AdjPower { s: f64 },
    Mg,
}

impl MethodChoice {
    pub fn parse(name: &str, power_s: Option<f64>) -> Result<Self> {
        match name {
            "ml" => Ok(MethodChoice::Ml),
            "reml" => Ok(MethodChoice::Reml),
            "mg" => Ok(MethodChoice::Mg),
            "adj-power" => {
                let s = power_s.ok_or_else(|| {
                    Error::Config("--method adj-power requires --power-s".into())
                })?;
                if !(s > 0.0) {
                    return Err(Error::Config("--power-s must be positive".into()));
                }
                Ok(MethodChoice::AdjPower { s })
            }
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected ml, reml, adj-power or mg)"
            ))),
        }
    }

    pub fn to_fit_method(self) -> FitMethod {
        match self {
            MethodChoice::Ml => FitMethod::ml(),
            MethodChoice::Reml => FitMethod::reml(),
            MethodChoice::AdjPower { s } => FitMethod::power(s),
            MethodChoice::Mg => FitMethod::multi_goal(),
        }
    }
}

/// Prior selected on the command line.
#[derive(Debug, Clone, Serialize)]
pub enum PriorChoice {
    Flat,
    Mg,
    GeneralMg { s: f64 },
    GaneshLahiri { weights: Option<PathBuf> },
}

impl PriorChoice {
    pub fn parse(name: &str, prior_s: Option<f64>, weights: Option<PathBuf>) -> Result<Self> {
        match name {
            "flat" => Ok(PriorChoice::Flat),
            "mg" => Ok(PriorChoice::Mg),
            "general-mg" => {
                let s = prior_s.ok_or_else(|| {
                    Error::Config("--prior general-mg requires --prior-s".into())
                })?;
                Ok(PriorChoice::GeneralMg { s })
            }
            "ganesh-lahiri" => Ok(PriorChoice::GaneshLahiri { weights }),
            other => Err(Error::Config(format!(
                "unknown prior `{other}` (expected flat, mg, general-mg or ganesh-lahiri)"
            ))),
        }
    }

    pub fn to_prior_spec(&self, data: &AreaLevelDataset) -> Result<PriorSpec> {
        Ok(match self {
            PriorChoice::Flat => PriorSpec::Flat,
            PriorChoice::Mg => PriorSpec::MultiGoal { area: 0 },
            PriorChoice::GeneralMg { s } => {
                // Refuse configurations that are provably improper; milder
                // tail problems are caught by the quadrature detector.
                let flags = check_propriety(*s, data.m(), data.p());
                if !flags.proper_as_general_mg_prior {
                    return Err(Error::Config(format!(
                        "general-mg prior with s = {s} is improper for m = {}, p = {} (needs s < (m-p)/2)",
                        data.m(),
                        data.p()
                    )));
                }
                PriorSpec::GeneralMg {
                    adjustment: AdjustmentSpec::Power { s: *s, area: 0 },
                    area: 0,
                }
            }
            PriorChoice::GaneshLahiri { weights } => {
                let w = match weights {
                    Some(path) => Some(read_weights(path, data.m())?),
                    None => None,
                };
                PriorSpec::GaneshLahiri { weights: w }
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            PriorChoice::Flat => "flat".into(),
            PriorChoice::Mg => "mg".into(),
            PriorChoice::GeneralMg { s } => format!("general-mg({s})"),
            PriorChoice::GaneshLahiri { .. } => "ganesh-lahiri".into(),
        }
    }
}

fn read_weights(path: &Path, m: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut weights = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let w: f64 = line.parse().map_err(|_| Error::CsvFormat {
            path: path.display().to_string(),
            line: idx as u64 + 1,
            message: format!("bad weight `{line}`"),
        })?;
        weights.push(w);
    }
    if weights.len() != m {
        return Err(Error::Config(format!(
            "weights file has {} entries, expected m = {m}",
            weights.len()
        )));
    }
    Ok(weights)
}

/// Reads an area-level dataset from CSV with the header
/// `area_id,y,D,x1,...,xp`.
pub fn ingest_csv(path: &Path) -> Result<AreaLevelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Config(format!("cannot read header of {}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "area_id" || cols[1] != "y" || cols[2] != "D" {
        return Err(Error::CsvFormat {
            path: path.display().to_string(),
            line: 1,
            message: format!(
                "header must start with `area_id,y,D` followed by x1..xp, got `{}`",
                cols.join(",")
            ),
        });
    }
    let p = cols.len() - 3;
    if p == 0 {
        return Err(Error::CsvFormat {
            path: path.display().to_string(),
            line: 1,
            message: "at least one auxiliary column x1 is required".into(),
        });
    }
    for (k, name) in cols[3..].iter().enumerate() {
        let expected = format!("x{}", k + 1);
        if *name != expected {
            return Err(Error::CsvFormat {
                path: path.display().to_string(),
                line: 1,
                message: format!("expected column `{expected}`, got `{name}`"),
            });
        }
    }

    let mut area_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut x = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|pos| pos.line())
                .unwrap_or(0);
            Error::CsvFormat {
                path: path.display().to_string(),
                line,
                message: format!("malformed row: {e}"),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fail = |message: String| Error::CsvFormat {
            path: path.display().to_string(),
            line,
            message,
        };
        if record.len() != cols.len() {
            return Err(fail(format!(
                "expected {} fields, got {}",
                cols.len(),
                record.len()
            )));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(fail("empty area_id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(fail(format!("duplicate area_id `{id}`")));
        }
        let parse = |field: &str, name: &str| -> Result<f64> {
            if field.is_empty() {
                return Err(fail(format!("blank `{name}` field")));
            }
            field
                .parse::<f64>()
                .map_err(|_| fail(format!("bad `{name}` value `{field}`")))
        };
        let yi = parse(&record[1], "y")?;
        let di = parse(&record[2], "D")?;
        if !(di > 0.0) {
            return Err(fail(format!("sampling variance D must be positive, got {di}")));
        }
        y.push(yi);
        d.push(di);
        area_ids.push(id);
        for k in 0..p {
            x.push(parse(&record[3 + k], &format!("x{}", k + 1))?);
        }
    }
    if y.is_empty() {
        return Err(Error::InvalidDataset("no data rows".into()));
    }
    AreaLevelDataset::new(area_ids, y, d, x, p)
}

/// Fully resolved run configuration embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub method: Option<String>,
    pub priors: Vec<String>,
    pub bootstrap_replicates: Option<usize>,
    pub seed: Option<u64>,
    pub format: String,
    pub output: PathBuf,
    pub quad_tol: Option<f64>,
}

impl RunConfig {
    fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn quad_options(quad_tol: Option<f64>) -> Result<BayesOptions> {
    let mut opts = BayesOptions::default();
    if let Some(tol) = quad_tol {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(Error::Config(format!(
                "quadrature tolerance must be in (0, 1), got {tol}"
            )));
        }
        opts.rel_tol = tol;
    }
    Ok(opts)
}

fn fit_rows(data: &AreaLevelDataset, result: &FitResult) -> Result<Vec<FitRow>> {
    result
        .areas
        .iter()
        .enumerate()
        .map(|(i, area)| {
            let comps = if area.a_hat > 0.0 {
                Some(g_components(data, area.a_hat, i)?)
            } else {
                None
            };
            Ok(FitRow {
                area_id: area.area_id.clone(),
                a_hat: area.a_hat,
                b_hat: area.b_hat,
                theta_hat: area.theta_hat,
                g1: comps.map(|c| c.g1),
                g2: comps.map(|c| c.g2),
                g3: comps.map(|c| c.g3),
                mse_taylor: comps.map(|c| c.taylor_total),
                boundary_solution: area.diagnostics.boundary_solution,
            })
        })
        .collect()
}

/// `fit`: per-area variance component, shrinkage, EBLUP and MSE components.
pub fn cmd_fit(cfg: &RunConfig, method: MethodChoice, format: OutputFormat) -> Result<()> {
    let data = ingest_csv(cfg.input.as_ref().expect("fit needs input"))?;
    warn_if_mg_unsupported(&data, method);
    let result = fit(&data, &method.to_fit_method())?;
    let rows = fit_rows(&data, &result)?;
    let report = Report::new("fit", cfg.to_value(), cfg.seed, rows);
    write_report(&report, format, &cfg.output)
}

fn warn_if_mg_unsupported(data: &AreaLevelDataset, method: MethodChoice) {
    if matches!(method, MethodChoice::Mg) && !data.supports_multi_goal() {
        eprintln!(
            "warning: multi-goal estimation needs m > p + 2 (m = {}, p = {})",
            data.m(),
            data.p()
        );
    }
}

fn summaries_for_prior(
    data: &AreaLevelDataset,
    choice: &PriorChoice,
    opts: &BayesOptions,
) -> Result<Vec<PosteriorSummary>> {
    let prior = choice.to_prior_spec(data)?;
    if prior.is_area_independent() {
        posterior_summaries_shared(data, &prior, opts)
    } else {
        (0..data.m())
            .into_par_iter()
            .map(|i| posterior_summary(data, &prior, i, opts))
            .collect()
    }
}

/// `bayes`: posterior summaries per area, per requested prior.
pub fn cmd_bayes(cfg: &RunConfig, priors: &[PriorChoice], format: OutputFormat) -> Result<()> {
    let data = ingest_csv(cfg.input.as_ref().expect("bayes needs input"))?;
    let opts = quad_options(cfg.quad_tol)?;
    let mut rows = Vec::new();
    for choice in priors {
        let summaries = summaries_for_prior(&data, choice, &opts)?;
        for s in summaries {
            rows.push(BayesRow {
                area_id: s.area_id.clone(),
                prior: choice.label(),
                e_b: s.e_b,
                v_b: s.v_b,
                e_theta: s.e_theta,
                v_theta: s.v_theta,
                nodes: s.diagnostics.node_count,
                a_lo: s.diagnostics.truncation_points.0,
                a_hi: s.diagnostics.truncation_points.1,
                normalization_log: s.diagnostics.normalization_log,
                heavy_tail: s.diagnostics.divergence_flag,
            });
        }
    }
    let report = Report::new("bayes", cfg.to_value(), cfg.seed, rows);
    write_report(&report, format, &cfg.output)
}

/// `bootstrap`: the single parametric bootstrap MSE of the multi-goal EBLUP.
pub fn cmd_bootstrap(
    cfg: &RunConfig,
    recentering: RecenteringBeta,
    format: OutputFormat,
) -> Result<()> {
    let data = ingest_csv(cfg.input.as_ref().expect("bootstrap needs input"))?;
    let seed = cfg
        .seed
        .ok_or_else(|| Error::Config("bootstrap requires --seed".into()))?;
    let replicates = cfg.bootstrap_replicates.unwrap_or(10_000);
    let mut boot_cfg = BootstrapConfig::new(seed).with_replicates(replicates);
    boot_cfg.recentering = recentering;
    let mg = fit(&data, &FitMethod::multi_goal())?;
    let boot = bootstrap_mse(&data, &mg, &boot_cfg)?;
    let rows: Vec<BootstrapRow> = boot
        .per_area
        .iter()
        .zip(&mg.areas)
        .map(|(est, area)| BootstrapRow {
            area_id: area.area_id.clone(),
            mse_boot: est.estimate,
            mc_stderr: est.mc_stderr,
        })
        .collect();
    if boot.excluded_replicates > 0 {
        eprintln!(
            "note: {} of {} bootstrap replicates were excluded after refit failures",
            boot.excluded_replicates, boot.replicates
        );
    }
    let report = Report::new("bootstrap", cfg.to_value(), cfg.seed, rows);
    write_report(&report, format, &cfg.output)
}

/// `figures`: the two comparison tables, sorted by the classical multi-goal
/// shrinkage estimate descending. Table 1 compares shrinkage estimates
/// (classical, multi-goal-prior posterior, flat/superharmonic posterior);
/// table 2 compares MSE estimates (parametric bootstrap, Taylor, and the
/// two posterior variances).
pub fn cmd_figures(
    cfg: &RunConfig,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<(PathBuf, PathBuf)> {
    let data = ingest_csv(cfg.input.as_ref().expect("figures needs input"))?;
    let seed = cfg
        .seed
        .ok_or_else(|| Error::Config("figures runs the bootstrap and requires --seed".into()))?;
    let opts = quad_options(cfg.quad_tol)?;
    let m = data.m();

    let mg_fit = fit(&data, &FitMethod::multi_goal())?;
    let mg_posts: Vec<PosteriorSummary> = (0..m)
        .into_par_iter()
        .map(|i| posterior_summary(&data, &PriorSpec::MultiGoal { area: i }, i, &opts))
        .collect::<Result<Vec<_>>>()?;
    let flat_posts = posterior_summaries_shared(&data, &PriorSpec::Flat, &opts)?;
    let replicates = cfg.bootstrap_replicates.unwrap_or(10_000);
    let boot = bootstrap_mse(
        &data,
        &mg_fit,
        &BootstrapConfig::new(seed).with_replicates(replicates),
    )?;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        mg_fit.areas[b]
            .b_hat
            .partial_cmp(&mg_fit.areas[a].b_hat)
            .unwrap()
            .then(a.cmp(&b))
    });

    let table1: Vec<Table1Row> = order
        .iter()
        .map(|&i| Table1Row {
            area_id: mg_fit.areas[i].area_id.clone(),
            mgf: mg_fit.areas[i].b_hat,
            mgp: mg_posts[i].e_b,
            shp: flat_posts[i].e_b,
        })
        .collect();
    let table2: Vec<Table2Row> = order
        .iter()
        .map(|&i| {
            Ok(Table2Row {
                area_id: mg_fit.areas[i].area_id.clone(),
                pb_mg: boot.per_area[i].estimate,
                mgf: crate::mse::taylor_mse(&data, &mg_fit, i)?,
                mg_prior: mg_posts[i].v_theta,
                shp: flat_posts[i].v_theta,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ext = match format {
        OutputFormat::Json => "json",
        OutputFormat::Csv => "csv",
    };
    let path1 = out_dir.join(format!("table1.{ext}"));
    let path2 = out_dir.join(format!("table2.{ext}"));
    write_report(
        &Report::new("figures/table1", cfg.to_value(), cfg.seed, table1),
        format,
        &path1,
    )?;
    write_report(
        &Report::new("figures/table2", cfg.to_value(), cfg.seed, table2),
        format,
        &path2,
    )?;
    Ok((path1, path2))
}

/// Parsed `simulate` configuration file: `key = value` lines.
#[derive(Debug, Clone)]
pub struct SimulateSpec {
    pub study: String,
    pub config: SimulationConfig,
    pub m_ladder: Vec<usize>,
    pub power_s: f64,
    pub bootstrap_replicates: usize,
    pub keep_records: bool,
}

pub fn parse_simulate_config(path: &Path) -> Result<SimulateSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut kv = std::collections::BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::CsvFormat {
            path: path.display().to_string(),
            line: idx as u64 + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::Config(format!("simulate config is missing `{key}`")))
    };
    let parse_f64 = |key: &str, raw: &str| -> Result<f64> {
        raw.parse()
            .map_err(|_| Error::Config(format!("bad `{key}` value `{raw}`")))
    };

    let study = get("study")?.clone();
    let m: usize = get("m")?
        .parse()
        .map_err(|_| Error::Config("bad `m`".into()))?;
    let p: usize = kv.get("p").map_or(Ok(1), |v| {
        v.parse().map_err(|_| Error::Config("bad `p`".into()))
    })?;
    let true_a = parse_f64("true_a", get("true_a")?)?;
    let true_beta: Vec<f64> = match kv.get("true_beta") {
        Some(raw) => raw
            .split(',')
            .map(|v| parse_f64("true_beta", v.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => vec![0.0; p],
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::Config("bad `seed`".into()))?;
    let replications: usize = get("replications")?
        .parse()
        .map_err(|_| Error::Config("bad `replications`".into()))?;

    let d_raw = get("d_pattern")?;
    let d_pattern = parse_pattern(d_raw)?;
    let x_design = match kv.get("x_design").map(|s| s.as_str()) {
        None | Some("intercept_only") => XDesign::InterceptOnly,
        Some(raw) => {
            let inner = raw
                .strip_prefix("random_uniform(")
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(|| Error::Config(format!("bad `x_design` value `{raw}`")))?;
            XDesign::RandomUniform {
                seed: inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config("bad x_design seed".into()))?,
            }
        }
    };

    let m_ladder: Vec<usize> = match kv.get("m_ladder") {
        Some(raw) => raw
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config("bad `m_ladder`".into()))
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![m],
    };
    let power_s = match kv.get("power_s") {
        Some(raw) => parse_f64("power_s", raw)?,
        None => 1.0,
    };
    let bootstrap_replicates: usize = match kv.get("bootstrap_replicates") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config("bad `bootstrap_replicates`".into()))?,
        None => 10_000,
    };
    let keep_records = matches!(kv.get("keep_records").map(|s| s.as_str()), Some("true"));

    Ok(SimulateSpec {
        study,
        config: SimulationConfig {
            m,
            p,
            true_beta,
            true_a,
            d_pattern,
            x_design,
            replications,
            seed,
        },
        m_ladder,
        power_s,
        bootstrap_replicates,
        keep_records,
    })
}

fn parse_pattern(raw: &str) -> Result<DPattern> {
    if let Some(inner) = raw.strip_prefix("balanced(").and_then(|s| s.strip_suffix(')')) {
        return Ok(DPattern::Balanced(inner.trim().parse().map_err(|_| {
            Error::Config(format!("bad balanced D `{inner}`"))
        })?));
    }
    if let Some(inner) = raw
        .strip_prefix("geometric(")
        .and_then(|s| s.strip_suffix(')'))
    {
        let parts: Vec<&str> = inner.split(',').map(|s| s.trim()).collect();
        if parts.len() != 2 {
            return Err(Error::Config(format!("bad geometric pattern `{raw}`")));
        }
        return Ok(DPattern::Geometric {
            min: parts[0]
                .parse()
                .map_err(|_| Error::Config("bad geometric min".into()))?,
            max: parts[1]
                .parse()
                .map_err(|_| Error::Config("bad geometric max".into()))?,
        });
    }
    if let Some(inner) = raw
        .strip_prefix("explicit(")
        .and_then(|s| s.strip_suffix(')'))
    {
        let values: Vec<f64> = inner
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad explicit D `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(DPattern::Explicit(values));
    }
    Err(Error::Config(format!(
        "unknown d_pattern `{raw}` (expected balanced(D), geometric(min,max) or explicit(...))"
    )))
}

/// `simulate`: runs a verification study described by a config file and
/// writes its report (plus a records file when requested).
pub fn cmd_simulate(cfg: &RunConfig, spec_path: &Path, format: OutputFormat) -> Result<StudyReport> {
    let spec = parse_simulate_config(spec_path)?;
    let opts = StudyOptions {
        keep_records: spec.keep_records,
        quadrature: quad_options(cfg.quad_tol)?,
    };
    let study = match spec.study.as_str() {
        "bias" => bias_study(&spec.config, &opts)?,
        "adjustment-gap" => agreement_study(
            &spec.config,
            StudyKind::AdjustmentGap { power_s: spec.power_s },
            &spec.m_ladder,
            &opts,
        )?,
        "posterior-match" => agreement_study(
            &spec.config,
            StudyKind::PosteriorMatch { power_s: spec.power_s },
            &spec.m_ladder,
            &opts,
        )?,
        "estimate-gap" => agreement_study(
            &spec.config,
            StudyKind::EstimateGap,
            &spec.m_ladder,
            &opts,
        )?,
        "mse-match" => agreement_study(
            &spec.config,
            StudyKind::MseMatch {
                bootstrap_replicates: spec.bootstrap_replicates,
            },
            &spec.m_ladder,
            &opts,
        )?,
        other => {
            return Err(Error::Config(format!(
                "unknown study `{other}` (expected bias, adjustment-gap, posterior-match, estimate-gap or mse-match)"
            )))
        }
    };

    match format {
        OutputFormat::Json => {
            let report = Report::new(
                "simulate",
                cfg.to_value(),
                Some(spec.config.seed),
                vec![study.clone()],
            );
            write_report(&report, OutputFormat::Json, &cfg.output)?;
        }
        OutputFormat::Csv => {
            let report = Report::new(
                "simulate",
                cfg.to_value(),
                Some(spec.config.seed),
                study.rows.clone(),
            );
            write_report(&report, OutputFormat::Csv, &cfg.output)?;
        }
    }
    if let Some(records) = &study.records {
        if cfg.output.as_os_str() != "-" {
            let records_path = cfg.output.with_extension("records.csv");
            let report = Report::new(
                "simulate/records",
                cfg.to_value(),
                Some(spec.config.seed),
                records.clone(),
            );
            write_report(&report, OutputFormat::Csv, &records_path)?;
        }
    }
    Ok(study)
}

/// `nerm-grad`: pointwise evaluation of the nested-error-regression
/// formulas.
#[allow(clippy::too_many_arguments)]
pub fn cmd_nerm_grad(
    cfg: &RunConfig,
    n: &[u64],
    sigma_v2: f64,
    sigma_e2: f64,
    area: usize,
    k: [f64; 2],
    format: OutputFormat,
) -> Result<()> {
    let design = NermDesign::new(n.to_vec())?;
    let psi = Psi::new(sigma_v2, sigma_e2)?;
    let inv = fisher_inverse(&design, &psi)?;
    let n_i = *design.n().get(area).ok_or_else(|| {
        Error::Domain(format!("area index {area} out of range for m = {}", design.m()))
    })?;
    let grad = shrinkage_gradient(&psi, n_i);
    let hess = shrinkage_hessian(&psi, n_i);
    let h = curvature_h(&design, &psi, area)?;
    let adj = adjustment_gradient(&design, &psi, area, k)?;
    let ig = [
        inv[0][0] * grad[0] + inv[0][1] * grad[1],
        inv[1][0] * grad[0] + inv[1][1] * grad[1],
    ];
    let residual = (adj[0] * ig[0] + adj[1] * ig[1] - h) / h.abs().max(f64::MIN_POSITIVE);
    let row = NermRow {
        area,
        n_i,
        sigma_v2,
        sigma_e2,
        fisher_inv_vv: inv[0][0],
        fisher_inv_ve: inv[0][1],
        fisher_inv_ee: inv[1][1],
        grad_b_v: grad[0],
        grad_b_e: grad[1],
        hess_b_vv: hess[0][0],
        hess_b_ve: hess[0][1],
        hess_b_ee: hess[1][1],
        curvature_h: h,
        k_v: k[0],
        k_e: k[1],
        adj_grad_v: adj[0],
        adj_grad_e: adj[1],
        defining_residual: residual,
    };
    let report = Report::new("nerm-grad", cfg.to_value(), cfg.seed, vec![row]);
    write_report(&report, format, &cfg.output)
}

/// Options of the bundled synthetic-data generator.
#[derive(Debug, Clone, Serialize)]
pub struct SynthOptions {
    pub m: usize,
    pub p: usize,
    pub seed: u64,
    pub true_a: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub beta: Vec<f64>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        // A dataset shaped like the state-level poverty application: 51
        // areas, an intercept plus three covariates, sampling variances
        // log-spaced over roughly a decade.
        SynthOptions {
            m: 51,
            p: 4,
            seed: 0,
            true_a: 1.0,
            d_min: 0.5,
            d_max: 8.0,
            beta: vec![2.0, 1.0, 0.5, -0.5],
        }
    }
}

/// Generates a synthetic dataset and writes it in the ingestion CSV format.
pub fn cmd_synth(opts: &SynthOptions, out: &Path) -> Result<AreaLevelDataset> {
    let data = synthetic_dataset(opts)?;
    let mut w: Box<dyn std::io::Write> = if out.as_os_str() == "-" {
        Box::new(std::io::stdout().lock())
    } else {
        Box::new(std::io::BufWriter::new(
            std::fs::File::create(out).map_err(|e| Error::io(out.display().to_string(), e))?,
        ))
    };
    let mut header = String::from("area_id,y,D");
    for k in 1..=data.p() {
        header.push_str(&format!(",x{k}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    for i in 0..data.m() {
        let mut line = format!("{},{},{}", data.area_ids()[i], data.y()[i], data.d()[i]);
        for v in data.x_row(i) {
            line.push_str(&format!(",{v}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(data)
}

/// The dataset the generator writes, exposed for in-process use.
pub fn synthetic_dataset(opts: &SynthOptions) -> Result<AreaLevelDataset> {
    if opts.beta.len() != opts.p {
        return Err(Error::Config(format!(
            "beta has {} entries, expected p = {}",
            opts.beta.len(),
            opts.p
        )));
    }
    let cfg = SimulationConfig {
        m: opts.m,
        p: opts.p,
        true_beta: opts.beta.clone(),
        true_a: opts.true_a,
        d_pattern: DPattern::Geometric {
            min: opts.d_min,
            max: opts.d_max,
        },
        x_design: if opts.p == 1 {
            XDesign::InterceptOnly
        } else {
            XDesign::RandomUniform { seed: opts.seed }
        },
        replications: 1,
        seed: opts.seed,
    };
    Ok(crate::verify::simulate_dataset(&cfg, 0)?.dataset)
}
