//! Command-line surface for the penalized full-likelihood Cox solver.
//!
//! Exit codes: 0 success, 1 unreadable input, 2 schema/model mismatch,
//! 3 fit failure or non-convergence. Thread count follows RAYON_NUM_THREADS.

use clap::{Args, Parser, Subcommand, ValueEnum};
use coxfull::artifact::ModelArtifact;
use coxfull::data::{load_dataset, validate, Dataset, Schema};
use coxfull::error::Error as CoxError;
use coxfull::fit::{fit, FitSettings};
use coxfull::model::{ModelSpec, PenaltyConfig};
use coxfull::selection::{adaptive_weights, cross_validate, make_grid, path};
use coxfull::sim::{run_replication, PipelineConfig, Protocol, RepOutcome, ScenarioSpec};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "coxfull",
    version,
    about = "Full-likelihood Cox models: smooth baseline hazards, adaptive (group) lasso selection, time-varying effects, and log-normal frailties",
    after_help = "Input CSV must be in long counting-process format with columns \
                  `id, cluster, start, stop, event`; remaining columns are covariates. \
                  Set RAYON_NUM_THREADS to bound parallelism."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model at a fixed lasso strength and write fit.json,
    /// baseline.tsv, and tv_effects.tsv
    Fit(FitArgs),
    /// Cross-validate the lasso strength and write cv.tsv and cv.json
    Cv(CvArgs),
    /// Trace coefficient paths over a penalty grid into paths.tsv
    Path(PathArgs),
    /// Run simulation scenarios and write metrics.tsv and summary.json
    Simulate(SimArgs),
    /// Predict survival curves for new covariate rows into survival.tsv
    Predict(PredictArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Input CSV in long counting-process format
    #[arg(long)]
    input: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Penalized covariates, '+'-separated (default: every unclaimed column)
    #[arg(long)]
    pen: Option<String>,
    /// Unpenalized covariates, '+'-separated
    #[arg(long)]
    unpen: Option<String>,
    /// Covariates with time-varying effects, '+'-separated
    #[arg(long)]
    tv: Option<String>,
    /// Frailty grouping column; enables the random intercept
    #[arg(long)]
    frailty: Option<String>,
    /// Categorical column, dummy-coded against its first observed level (repeatable)
    #[arg(long)]
    factor: Vec<String>,
    /// Number of B-spline basis functions per smooth term
    #[arg(long, default_value_t = 6)]
    basis_size: usize,
    /// B-spline degree
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Local approximation constant c in sqrt(beta^2 + c)
    #[arg(long, default_value_t = 1e-5)]
    c: f64,
    /// Penalty weights: adaptive (from an unpenalized fit) or uniform
    #[arg(long, value_enum, default_value_t = WeightMode::Adaptive)]
    weights: WeightMode,
    /// Relative parameter-change tolerance
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Score infinity-norm tolerance
    #[arg(long, default_value_t = 1e-6)]
    tol_grad: f64,
    #[arg(long, default_value_t = 200)]
    max_outer: usize,
    #[arg(long, default_value_t = 50)]
    max_newton: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightMode {
    Adaptive,
    Uniform,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Lasso strength
    #[arg(long)]
    xi: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 30)]
    grid_length: usize,
    /// Upper grid end; found by a doubling search when omitted
    #[arg(long)]
    grid_max: Option<f64>,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 30)]
    grid_length: usize,
    /// Upper grid end; found by a doubling search when omitted
    #[arg(long)]
    grid_max: Option<f64>,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario 1 (plain), 2 (frailty), 3 (changing covariates), 4 (both)
    #[arg(long)]
    scenario: u8,
    #[arg(long, default_value_t = 20)]
    replications: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Subjects per replication (scenarios 2 and 4 need a multiple of 10)
    #[arg(long, default_value_t = 500)]
    subjects: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 30)]
    grid_length: usize,
    /// cv: adaptive lasso at the CV-chosen strength; unpenalized: plain fit
    #[arg(long, value_enum, default_value_t = ProtocolMode::Cv)]
    protocol: ProtocolMode,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolMode {
    Cv,
    Unpenalized,
}

#[derive(Args)]
struct PredictArgs {
    /// fit.json written by the fit command
    #[arg(long)]
    model: PathBuf,
    /// CSV with one row per subject to predict
    #[arg(long)]
    newdata: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<CoxError> for CliError {
    fn from(e: CoxError) -> Self {
        let code = match &e {
            CoxError::Io(_) | CoxError::Csv(_) => 1,
            CoxError::Data(_) | CoxError::Config(_) => 2,
            CoxError::Numeric(_) => 3,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Path(args) => cmd_path(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn parse_terms(arg: &Option<String>) -> Vec<String> {
    arg.as_deref()
        .map(|s| {
            s.split('+')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

fn load_model_inputs(args: &ModelArgs) -> Result<(Dataset, ModelSpec, FitSettings), CliError> {
    let schema = Schema {
        cluster: args.frailty.clone().unwrap_or_else(|| "cluster".into()),
        factors: args.factor.clone(),
        ..Schema::default()
    };
    let data = load_dataset(&args.input, &schema)?;
    let spec = ModelSpec {
        basis_size: args.basis_size,
        degree: args.degree,
        penalized: parse_terms(&args.pen),
        unpenalized: parse_terms(&args.unpen),
        tv: parse_terms(&args.tv),
        frailty: args.frailty.is_some(),
        ..Default::default()
    };
    let settings = FitSettings {
        max_outer: args.max_outer,
        max_newton: args.max_newton,
        tol_params: args.tol,
        tol_grad: args.tol_grad,
        ..Default::default()
    };
    Ok((data, spec, settings))
}

fn resolve_weights(
    mode: WeightMode,
    design: &coxfull::model::Design,
    settings: &FitSettings,
) -> Result<Vec<f64>, CliError> {
    match mode {
        WeightMode::Adaptive => Ok(adaptive_weights(design, settings)?),
        WeightMode::Uniform => Ok(design
            .groups
            .iter()
            .map(|g| if g.penalized { 1.0 } else { 0.0 })
            .collect()),
    }
}

fn write_tsv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<u8, CliError> {
    let (data, spec, settings) = load_model_inputs(&args.model)?;
    let design = spec.resolve(&data)?;
    let report = validate(&data);
    for flag in &report.flags {
        eprintln!("warning: {flag}");
    }

    let weights = resolve_weights(args.model.weights, &design, &settings)?;
    let mut pen = PenaltyConfig::with_weights(&design, args.xi, weights);
    pen.c = args.model.c;
    let fitted = fit(&design, &pen, &settings)?;

    fs::create_dir_all(&args.model.out)?;
    let artifact = ModelArtifact::from_fit(
        &design,
        &data,
        &fitted,
        args.xi,
        matches!(args.model.weights, WeightMode::Adaptive),
        args.seed,
    );
    let json = serde_json::to_string_pretty(&artifact)
        .map_err(|e| CliError::new(3, e.to_string()))?;
    fs::write(args.model.out.join("fit.json"), json)?;

    let rows: Vec<String> = fitted
        .baseline_curve
        .iter()
        .map(|(t, l)| format!("{t}\t{l}"))
        .collect();
    write_tsv(&args.model.out.join("baseline.tsv"), "t\tlambda0", &rows)?;

    let mut header = String::from("t");
    for label in &design.tv_labels {
        header.push('\t');
        header.push_str(label);
    }
    let n_grid = fitted.baseline_curve.len();
    let rows: Vec<String> = (0..n_grid)
        .map(|i| {
            let mut row = format!("{}", fitted.baseline_curve[i].0);
            for curve in &fitted.tv_curves {
                row.push_str(&format!("\t{}", curve[i].1));
            }
            row
        })
        .collect();
    write_tsv(&args.model.out.join("tv_effects.tsv"), &header, &rows)?;

    println!(
        "fit: {} subjects, {} events, objective {:.6}, {} selected of {} penalized groups, converged: {}",
        data.subjects.len(),
        data.n_events(),
        fitted.objective,
        fitted.selected.len(),
        design.penalized_group_indices().count(),
        fitted.converged
    );
    Ok(if fitted.converged { 0 } else { 3 })
}

fn explicit_grid(xi_max: f64, length: usize) -> Vec<f64> {
    let lo = xi_max * 1e-3;
    let ratio = (lo / xi_max).ln() / (length - 1) as f64;
    (0..length)
        .map(|i| xi_max * (ratio * i as f64).exp())
        .collect()
}

fn cmd_cv(args: CvArgs) -> Result<u8, CliError> {
    let (data, spec, settings) = load_model_inputs(&args.model)?;
    let design = spec.resolve(&data)?;
    let weights = resolve_weights(args.model.weights, &design, &settings)?;
    let grid = match args.grid_max {
        Some(x) => explicit_grid(x, args.grid_length),
        None => make_grid(&design, &weights, &settings, args.grid_length)?,
    };
    let cv = cross_validate(&data, &spec, &weights, &grid, args.folds, args.seed, &settings)?;

    fs::create_dir_all(&args.model.out)?;
    let rows: Vec<String> = (0..grid.len())
        .map(|i| format!("{}\t{}\t{}", cv.grid[i], cv.cv_error[i], cv.cv_se[i]))
        .collect();
    write_tsv(&args.model.out.join("cv.tsv"), "xi\tcv_error\tcv_se", &rows)?;

    let summary = serde_json::json!({
        "xi_opt": cv.xi_opt,
        "xi_1se": cv.xi_1se,
        "folds": args.folds,
        "seed": args.seed,
        "grid": cv.grid,
        "cv_error": cv.cv_error,
        "cv_se": cv.cv_se,
    });
    fs::write(
        args.model.out.join("cv.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::new(3, e.to_string()))?,
    )?;
    println!("cv: xi_opt = {}, xi_1se = {}", cv.xi_opt, cv.xi_1se);
    Ok(0)
}

fn cmd_path(args: PathArgs) -> Result<u8, CliError> {
    let (data, spec, settings) = load_model_inputs(&args.model)?;
    let design = spec.resolve(&data)?;
    let weights = resolve_weights(args.model.weights, &design, &settings)?;
    let grid = match args.grid_max {
        Some(x) => explicit_grid(x, args.grid_length),
        None => make_grid(&design, &weights, &settings, args.grid_length)?,
    };
    let result = path(&design, &weights, &grid, &settings)?;

    fs::create_dir_all(&args.model.out)?;
    let mut rows = Vec::new();
    for (gi, &xi) in result.grid.iter().enumerate() {
        if let Some(coef) = &result.coef[gi] {
            for (j, label) in result.labels.iter().enumerate() {
                rows.push(format!("{xi}\t{label}\t{}", coef[j]));
            }
        }
    }
    write_tsv(
        &args.model.out.join("paths.tsv"),
        "xi\tgroup\tcoefficient",
        &rows,
    )?;
    let skipped = result.coef.iter().filter(|c| c.is_none()).count();
    println!(
        "path: {} grid points, {} skipped (non-converged)",
        result.grid.len(),
        skipped
    );
    Ok(0)
}

fn push_metric(rows: &mut Vec<String>, rep: usize, name: &str, value: f64) {
    rows.push(format!("{rep}\t{name}\t{value}"));
}

fn cmd_simulate(args: SimArgs) -> Result<u8, CliError> {
    if !(1..=4).contains(&args.scenario) {
        return Err(CliError::new(2, "scenario must be 1..=4"));
    }
    let frailty_scenario = matches!(args.scenario, 2 | 4);
    if frailty_scenario && args.subjects % 10 != 0 {
        return Err(CliError::new(
            2,
            "frailty scenarios need subjects divisible by the cluster size 10",
        ));
    }
    let cfg = PipelineConfig {
        protocol: match args.protocol {
            ProtocolMode::Cv => Protocol::CrossValidated {
                folds: args.folds,
                grid_len: args.grid_length,
            },
            ProtocolMode::Unpenalized => Protocol::Unpenalized,
        },
        ..Default::default()
    };

    let outcomes: Vec<Result<RepOutcome, CoxError>> = (0..args.replications)
        .into_par_iter()
        .map(|rep| {
            let mut scen = ScenarioSpec::new(args.scenario, args.seed + rep as u64);
            scen.n_subjects = args.subjects;
            scen.n_clusters = args.subjects / scen.cluster_size;
            run_replication(&scen, &cfg)
        })
        .collect();

    let mut reps = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        reps.push(o?);
    }

    fs::create_dir_all(&args.out)?;
    let mut rows = Vec::new();
    for (i, r) in reps.iter().enumerate() {
        push_metric(&mut rows, i, "mse_baseline", r.smooth.mse_baseline);
        push_metric(&mut rows, i, "mse_beta", r.smooth.mse_beta);
        if let Some(v) = r.smooth.mse_sigma_b {
            push_metric(&mut rows, i, "mse_sigma_b", v);
        }
        push_metric(&mut rows, i, "tpr", r.smooth.tpr);
        push_metric(&mut rows, i, "fdr", r.smooth.fdr);
        push_metric(&mut rows, i, "mse_baseline_oracle", r.oracle.mse_baseline);
        push_metric(&mut rows, i, "mse_beta_oracle", r.oracle.mse_beta);
        if let Some(x) = r.xi_opt {
            push_metric(&mut rows, i, "xi_opt", x);
        }
        if let Some(x) = r.sigma_b_sq {
            push_metric(&mut rows, i, "sigma_b_sq", x);
        }
        push_metric(&mut rows, i, "censor_fraction", r.censor_fraction);
        push_metric(&mut rows, i, "converged", r.converged as u8 as f64);
    }
    write_tsv(
        &args.out.join("metrics.tsv"),
        "replication\tmetric\tvalue",
        &rows,
    )?;

    let n = reps.len() as f64;
    let mean = |f: &dyn Fn(&RepOutcome) -> f64| reps.iter().map(|r| f(r)).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&RepOutcome) -> Option<f64>| {
        let vals: Vec<f64> = reps.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let summary = serde_json::json!({
        "scenario": args.scenario,
        "replications": args.replications,
        "subjects": args.subjects,
        "seed": args.seed,
        "protocol": match args.protocol { ProtocolMode::Cv => "cv", ProtocolMode::Unpenalized => "unpenalized" },
        "mean_tpr": mean(&|r| r.smooth.tpr),
        "mean_fdr": mean(&|r| r.smooth.fdr),
        "mean_mse_baseline": mean(&|r| r.smooth.mse_baseline),
        "mean_mse_beta": mean(&|r| r.smooth.mse_beta),
        "mean_mse_sigma_b": mean_opt(&|r| r.smooth.mse_sigma_b),
        "mean_mse_baseline_oracle": mean(&|r| r.oracle.mse_baseline),
        "mean_mse_beta_oracle": mean(&|r| r.oracle.mse_beta),
        "mean_sigma_b_sq": mean_opt(&|r| r.sigma_b_sq),
        "mean_censor_fraction": mean(&|r| r.censor_fraction),
        "n_converged": reps.iter().filter(|r| r.converged).count(),
    });
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::new(3, e.to_string()))?,
    )?;
    println!(
        "simulate: scenario {}, {} replications, mean TPR {:.3}, mean FDR {:.3}",
        args.scenario,
        args.replications,
        mean(&|r| r.smooth.tpr),
        mean(&|r| r.smooth.fdr)
    );
    Ok(0)
}

fn cmd_predict(args: PredictArgs) -> Result<u8, CliError> {
    let json = fs::read_to_string(&args.model)?;
    let artifact: ModelArtifact =
        serde_json::from_str(&json).map_err(|e| CliError::new(2, format!("fit.json: {e}")))?;
    if args.grid_points < 2 {
        return Err(CliError::new(2, "grid_points must be at least 2"));
    }

    let mut reader = csv::Reader::from_path(&args.newdata)
        .map_err(|e| CliError::new(1, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::new(1, e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let id_col = headers.iter().position(|h| h == "id");

    let mut rows = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::new(1, e.to_string()))?;
        let mut row = HashMap::new();
        for (h, v) in headers.iter().zip(record.iter()) {
            row.insert(h.clone(), v.trim().to_string());
        }
        let subject = id_col
            .and_then(|c| record.get(c))
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("{}", ri + 1));
        let (xbeta, z) = artifact.encode_row(&row)?;
        let curve = artifact.survival_curve(xbeta, &z, args.grid_points)?;
        for (t, s) in curve {
            rows.push(format!("{subject}\t{t}\t{s}"));
        }
    }
    fs::create_dir_all(&args.out)?;
    write_tsv(
        &args.out.join("survival.tsv"),
        "subject\tt\tsurvival",
        &rows,
    )?;
    println!("predict: wrote survival curves to {}", args.out.join("survival.tsv").display());
    Ok(0)
}
