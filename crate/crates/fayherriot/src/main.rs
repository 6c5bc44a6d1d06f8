use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fayherriot::cli::{
    cmd_bayes, cmd_bootstrap, cmd_figures, cmd_fit, cmd_nerm_grad, cmd_simulate, cmd_synth,
    MethodChoice, PriorChoice, RunConfig, SynthOptions,
};
use fayherriot::report::OutputFormat;

/// Fay-Herriot area-level model toolkit: adjusted maximum likelihood,
/// EBLUP with second-order MSE estimators, and quadrature-based posterior
/// summaries under multi-goal priors.
#[derive(Parser)]
#[command(name = "fayherriot", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the variance component and EBLUPs under a chosen method.
    Fit {
        /// Input CSV with header area_id,y,D,x1,...,xp
        #[arg(long)]
        input: PathBuf,
        /// ml | reml | adj-power | mg
        #[arg(long, default_value = "mg")]
        method: String,
        /// Exponent for --method adj-power
        #[arg(long)]
        power_s: Option<f64>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
        /// json | csv
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Posterior summaries of B_i and theta_i per area, per prior.
    Bayes {
        #[arg(long)]
        input: PathBuf,
        /// flat | mg | general-mg | ganesh-lahiri (repeatable)
        #[arg(long = "prior", required = true)]
        priors: Vec<String>,
        /// Exponent for --prior general-mg
        #[arg(long)]
        prior_s: Option<f64>,
        /// Weights file for --prior ganesh-lahiri (one weight per line;
        /// uniform when omitted)
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Relative tolerance of the posterior quadrature
        #[arg(long)]
        quad_tol: Option<f64>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Single parametric bootstrap MSE of the multi-goal EBLUP.
    Bootstrap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        replicates: usize,
        #[arg(long)]
        seed: u64,
        /// Recentering coefficients: `hetero` (GLS under diag(A_i + D_i))
        /// or `per-area` (each area's own homogeneous GLS fit)
        #[arg(long, default_value = "hetero")]
        recentering: String,
        #[arg(long, default_value = "-")]
        out: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Emit the two comparison tables (shrinkage and MSE estimates).
    Figures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        replicates: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        quad_tol: Option<f64>,
        #[arg(long, default_value = "figures")]
        out_dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Run a Monte Carlo verification study from a config file.
    Simulate {
        /// key = value config (study, m, true_a, d_pattern, replications, seed, ...)
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "-")]
        out: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        #[arg(long)]
        quad_tol: Option<f64>,
    },
    /// Evaluate the nested-error-regression adjustment formulas pointwise.
    NermGrad {
        /// Units per area, comma separated (e.g. 2,3,5)
        #[arg(long)]
        n: String,
        #[arg(long)]
        sigma_v2: f64,
        #[arg(long)]
        sigma_e2: f64,
        #[arg(long, default_value_t = 0)]
        area: usize,
        /// Direction vector k, comma separated (e.g. 1,0)
        #[arg(long, default_value = "1,0")]
        k: String,
        #[arg(long, default_value = "-")]
        out: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Generate a synthetic dataset in the ingestion CSV format.
    Synth {
        #[arg(long, default_value_t = 51)]
        m: usize,
        /// Number of design columns (intercept plus p-1 uniform covariates)
        #[arg(long, default_value_t = 4)]
        p: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        true_a: f64,
        #[arg(long, default_value_t = 0.5)]
        d_min: f64,
        #[arg(long, default_value_t = 8.0)]
        d_max: f64,
        /// Coefficients, comma separated; defaults to 2,1,0.5,-0.5 truncated
        /// or padded to p entries
        #[arg(long)]
        beta: Option<String>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, fayherriot::Error> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| fayherriot::Error::Config(format!("bad {what} entry `{v}`")))
        })
        .collect()
}

fn run(args: Args) -> Result<(), fayherriot::Error> {
    match args.command {
        Command::Fit {
            input,
            method,
            power_s,
            out,
            format,
        } => {
            let format: OutputFormat = format.parse()?;
            let choice = MethodChoice::parse(&method, power_s)?;
            let cfg = RunConfig {
                input: Some(input),
                method: Some(method),
                priors: vec![],
                bootstrap_replicates: None,
                seed: None,
                format: format_label(format),
                output: out,
                quad_tol: None,
            };
            cmd_fit(&cfg, choice, format)
        }
        Command::Bayes {
            input,
            priors,
            prior_s,
            weights,
            quad_tol,
            out,
            format,
        } => {
            let format: OutputFormat = format.parse()?;
            let choices: Vec<PriorChoice> = priors
                .iter()
                .map(|p| PriorChoice::parse(p, prior_s, weights.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            let cfg = RunConfig {
                input: Some(input),
                method: None,
                priors: choices.iter().map(|c| c.label()).collect(),
                bootstrap_replicates: None,
                seed: None,
                format: format_label(format),
                output: out,
                quad_tol,
            };
            cmd_bayes(&cfg, &choices, format)
        }
        Command::Bootstrap {
            input,
            replicates,
            seed,
            recentering,
            out,
            format,
        } => {
            let format: OutputFormat = format.parse()?;
            let recentering = match recentering.as_str() {
                "hetero" => fayherriot::mse::RecenteringBeta::HeterogeneousGls,
                "per-area" => fayherriot::mse::RecenteringBeta::PerAreaGls,
                other => {
                    return Err(fayherriot::Error::Config(format!(
                        "unknown recentering `{other}` (expected hetero or per-area)"
                    )))
                }
            };
            let cfg = RunConfig {
                input: Some(input),
                method: Some("mg".into()),
                priors: vec![],
                bootstrap_replicates: Some(replicates),
                seed: Some(seed),
                format: format_label(format),
                output: out,
                quad_tol: None,
            };
            cmd_bootstrap(&cfg, recentering, format)
        }
        Command::Figures {
            input,
            replicates,
            seed,
            quad_tol,
            out_dir,
            format,
        } => {
            let format: OutputFormat = format.parse()?;
            let cfg = RunConfig {
                input: Some(input),
                method: Some("mg".into()),
                priors: vec!["mg".into(), "flat".into()],
                bootstrap_replicates: Some(replicates),
                seed: Some(seed),
                format: format_label(format),
                output: out_dir.clone(),
                quad_tol,
            };
            let (t1, t2) = cmd_figures(&cfg, &out_dir, format)?;
            eprintln!("wrote {} and {}", t1.display(), t2.display());
            Ok(())
        }
        Command::Simulate {
            config,
            out,
            format,
            quad_tol,
        } => {
            let format: OutputFormat = format.parse()?;
            let cfg = RunConfig {
                input: None,
                method: None,
                priors: vec![],
                bootstrap_replicates: None,
                seed: None,
                format: format_label(format),
                output: out,
                quad_tol,
            };
            let study = cmd_simulate(&cfg, &config, format)?;
            match study.passed {
                Some(true) => eprintln!("study `{}`: PASS", study.study),
                Some(false) => eprintln!("study `{}`: FAIL", study.study),
                None => eprintln!("study `{}`: INCONCLUSIVE (exclusion rate)", study.study),
            }
            Ok(())
        }
        Command::NermGrad {
            n,
            sigma_v2,
            sigma_e2,
            area,
            k,
            out,
            format,
        } => {
            let format: OutputFormat = format.parse()?;
            let n: Vec<u64> = parse_list(&n, "--n")?;
            let k: Vec<f64> = parse_list(&k, "--k")?;
            if k.len() != 2 {
                return Err(fayherriot::Error::Config(
                    "--k needs exactly two entries".into(),
                ));
            }
            let cfg = RunConfig {
                input: None,
                method: None,
                priors: vec![],
                bootstrap_replicates: None,
                seed: None,
                format: format_label(format),
                output: out,
                quad_tol: None,
            };
            cmd_nerm_grad(&cfg, &n, sigma_v2, sigma_e2, area, [k[0], k[1]], format)
        }
        Command::Synth {
            m,
            p,
            seed,
            true_a,
            d_min,
            d_max,
            beta,
            out,
        } => {
            let defaults = [2.0, 1.0, 0.5, -0.5];
            let beta = match beta {
                Some(raw) => parse_list(&raw, "--beta")?,
                None => (0..p).map(|i| defaults.get(i).copied().unwrap_or(0.0)).collect(),
            };
            let opts = SynthOptions {
                m,
                p,
                seed,
                true_a,
                d_min,
                d_max,
                beta,
            };
            cmd_synth(&opts, &out).map(|_| ())
        }
    }
}

fn format_label(format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => "json".into(),
        OutputFormat::Csv => "csv".into(),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable error record on stderr.
            let record = serde_json::json!({
                "error": err.to_string(),
                "kind": error_kind(&err),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(err: &fayherriot::Error) -> &'static str {
    use fayherriot::Error::*;
    match err {
        InvalidDataset(_) => "invalid_dataset",
        Domain(_) => "domain",
        Singular { .. } => "singular",
        NonFinite(_) => "non_finite",
        ImproperPosterior { .. } => "improper_posterior",
        QuadratureNoConvergence { .. } => "quadrature_no_convergence",
        BoundaryReml(_) => "boundary_reml",
        BootstrapFailure { .. } => "bootstrap_failure",
        Config(_) => "config",
        CsvFormat { .. } => "csv_format",
        Io { .. } => "io",
    }
}
