//! Command-line front end.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 invalid or missing input,
//! 3 numerical failure, 4 simulation study unreliable (more than 10% of
//! replicates failed; the partial report is still written).

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::data::{load_csv, ModelConfig, SCHEMA_VERSION};
use crate::error::{MamError, Result};
use crate::glmm::{fit_conditional, ConditionalFit};
use crate::mam::{fit_mam, term_grid, MamFit, MamOptions};
use crate::sim::{run_study, Scenario};
use crate::summary::{write_curves, FitSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_UNRELIABLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mam", version, about = "Marginal additive models for clustered data")]
pub struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "MAM_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the conditional model and its marginal projection.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the reporting grid size per term.
        #[arg(long)]
        grid_points: Option<usize>,
    },
    /// Run a simulation study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Evaluate a saved fit on a covariate grid.
    Marginalize {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Output CSV (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &MamError) -> i32 {
    if e.is_numerical() {
        return EXIT_NUMERICAL;
    }
    match e {
        MamError::Io(io) if io.kind() != std::io::ErrorKind::NotFound => EXIT_FAILURE,
        _ => EXIT_INPUT,
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Fit {
            data,
            config,
            out,
            grid_points,
        } => cmd_fit(data, config, out, *grid_points),
        Command::Simulate {
            config,
            out,
            seed,
            replications,
        } => cmd_simulate(config, out, *seed, *replications),
        Command::Marginalize { fit, grid, out } => cmd_marginalize(fit, grid, out.as_deref()),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MamError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} file not found: {}", path.display()),
        )))
    }
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| {
        MamError::Io(std::io::Error::new(
            e.kind(),
            format!("cannot create output directory {}: {e}", out.display()),
        ))
    })
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn cmd_fit(data: &Path, config: &Path, out: &Path, grid_points: Option<usize>) -> Result<i32> {
    require_file(data, "data")?;
    require_file(config, "config")?;
    let cfg = ModelConfig::from_json_file(config)?;
    let spec = cfg.model_spec()?;
    let dataset = load_csv(data, &cfg.csv_schema())?;
    create_dir(out)?;
    log::info!(
        "fitting {} observations in {} clusters",
        dataset.n_total,
        dataset.n_clusters()
    );
    let fit = fit_conditional(&dataset, &spec)?;
    let mam = fit_mam(&fit, &MamOptions::default())?;
    let n_grid = grid_points.unwrap_or(cfg.grid_points).max(2);
    let summary = FitSummary::new(&fit, &mam, Some(cfg), timestamp());
    let grids: Vec<Vec<f64>> = (0..summary.term_names.len())
        .map(|t| term_grid(&fit, t, n_grid))
        .collect();

    let mut w = writer(&out.join("fit_summary.json"))?;
    w.write_all(summary.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    write_curves(writer(&out.join("marginal_curves.csv"))?, &summary.marginal_curves(&grids))?;
    write_curves(writer(&out.join("conditional_curves.csv"))?, &summary.conditional_curves(&grids))?;
    let mut w = writer(&out.join("diagnostics.txt"))?;
    w.write_all(diagnostics_text(&fit, &mam, &summary).as_bytes())?;
    w.flush()?;
    log::info!("wrote fit artifacts to {}", out.display());
    Ok(EXIT_OK)
}

fn diagnostics_text(fit: &ConditionalFit, mam: &MamFit, summary: &FitSummary) -> String {
    let d = &fit.diagnostics;
    let mut s = String::new();
    let _ = writeln!(s, "schema_version: {SCHEMA_VERSION}");
    let _ = writeln!(s, "observations: {}", fit.design.n);
    let _ = writeln!(s, "clusters: {}", fit.design.n_clusters());
    let _ = writeln!(s, "joint dimension: {}", fit.design.joint_dim());
    let _ = writeln!(s, "joint Hessian nonzeros: {}", fit.joint_nnz());
    let _ = writeln!(s, "cholesky nonzeros: {}", fit.chol.nnz());
    let _ = writeln!(s, "laml: {:?}", fit.laml);
    for (n, v) in summary.conditional.psi_names.iter().zip(&fit.psi) {
        let _ = writeln!(s, "{n}: {v:?}");
    }
    let _ = writeln!(s, "random-effect sd: {:?}", summary.conditional.re_sd);
    if let Some(r) = summary.conditional.re_corr {
        let _ = writeln!(s, "random-effect correlation: {r:?}");
    }
    for (t, e) in summary.term_names.iter().skip(fit.structure.linear_terms.len()).zip(&fit.edf) {
        let _ = writeln!(s, "edf {t}: {e:.4}");
    }
    let _ = writeln!(s, "inner iterations (final): {}", d.inner_iterations);
    let _ = writeln!(s, "inner gradient max-norm: {:e}", d.inner_gradient_norm);
    let _ = writeln!(s, "outer evaluations: {}", d.outer_evaluations);
    let _ = writeln!(s, "outer iterations: {}", d.outer_iterations);
    let _ = writeln!(s, "outer projected gradient: {:e}", d.outer_projected_gradient);
    let _ = writeln!(
        s,
        "boundary parameters: {}",
        if d.boundary.is_empty() { "none".to_string() } else { d.boundary.join(", ") }
    );
    let _ = writeln!(s, "correction available: {}", d.correction_available);
    if let Some(n) = &d.correction_note {
        let _ = writeln!(s, "note: {n}");
    }
    let _ = writeln!(s, "marginal Gram condition number: {:e}", mam.projection.gram_condition);
    let _ = writeln!(s, "clamped pseudo-outcomes: {}", mam.clamped);
    let _ = writeln!(s, "mean conditional variance: {:e}", summary.marginal.mean_var_conditional);
    let _ = writeln!(s, "mean correction variance: {:e}", summary.marginal.mean_var_correction);
    s
}

pub fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>, replications: Option<usize>) -> Result<i32> {
    require_file(config, "scenario")?;
    let mut scenario = Scenario::from_json_file(config)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    if let Some(r) = replications {
        scenario.replications = r;
    }
    scenario.validate()?;
    create_dir(out)?;
    log::info!("running {} replications of '{}'", scenario.replications, scenario.name);
    let report = run_study(&scenario)?;
    report.write_csv(writer(&out.join("study_report.csv"))?)?;
    report.write_replicates_csv(writer(&out.join("replicates.csv"))?)?;
    if report.unreliable {
        eprintln!(
            "study unreliable: {} of {} replicates failed",
            report.failed.len(),
            report.replications
        );
        return Ok(EXIT_UNRELIABLE);
    }
    Ok(EXIT_OK)
}

/// Grid file: `{"points": [{"x1": 0.1, "x2": -0.3}, ...]}` keyed by
/// covariate name.
#[derive(Debug, Deserialize)]
struct GridFile {
    points: Vec<std::collections::BTreeMap<String, f64>>,
}

pub fn cmd_marginalize(fit: &Path, grid: &Path, out: Option<&Path>) -> Result<i32> {
    require_file(fit, "fit artifact")?;
    require_file(grid, "grid")?;
    let summary = FitSummary::from_json_file(fit)?;
    let text = fs::read_to_string(grid)?;
    let g: GridFile = serde_json::from_str(&text)?;
    let names = &summary.structure.covariate_names;
    let rows: Vec<Vec<f64>> = g
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            names
                .iter()
                .map(|n| {
                    p.get(n).copied().ok_or_else(|| {
                        MamError::InvalidInput(format!("grid point {i} lacks covariate '{n}'"))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let pred = summary.marginalize(&rows)?;

    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(writer(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut wr = csv::Writer::from_writer(sink);
    let mut header = vec!["schema_version".to_string()];
    header.extend(names.iter().cloned());
    header.extend(
        ["lambda_hat", "estimate", "se", "lower", "upper"]
            .iter()
            .map(|s| s.to_string()),
    );
    wr.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![SCHEMA_VERSION.to_string()];
        rec.extend(r.iter().map(|v| format!("{v:?}")));
        let se = (pred.var_conditional[i] + pred.var_correction[i]).max(0.0).sqrt();
        rec.push(format!("{:?}", pred.lambda_hat[i]));
        rec.push(format!("{:?}", pred.estimate[i]));
        rec.push(format!("{se:?}"));
        rec.push(format!("{:?}", pred.lower[i]));
        rec.push(format!("{:?}", pred.upper[i]));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(EXIT_OK)
}
