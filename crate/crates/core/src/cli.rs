//! Command-line front end.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_engine, RunConfig};
use crate::data::ingest;
use crate::error::Error;
use crate::fiem::em_fit;
use crate::identify::{check_model, IdentifyOptions, Status, ValueMode};
use crate::report::{mc_table, residual_data, write_fit, write_mc, FitReport};
use crate::respondent::{fit_grouped, select_aic};
use crate::sim::{run_mc, McSettings, Scenario};

#[derive(Debug, Parser)]
#[command(name = "fracimp", version, about = "Fractional imputation under nonignorable nonresponse")]
pub struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, env = "FRACIMP_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check identifiability of the declared model in a config file.
    Identify(IdentifyArgs),
    /// Fit the respondent and response models to a data file.
    Fit(FitArgs),
    /// Run a Monte Carlo study on a built-in or config-defined scenario.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Ignore declared coefficient values and inspect basis sets only.
    #[arg(long)]
    pub structural: bool,
    #[arg(long)]
    pub sign_beta_known: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Data file; overrides `data.path` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// `donor` or `parametric:M`.
    #[arg(long)]
    pub engine: Option<String>,
    /// Continuous covariates to z-score before fitting.
    #[arg(long, value_delimiter = ',')]
    pub standardize: Vec<String>,
    /// Proceed when identifiability cannot be established.
    #[arg(long)]
    pub force: bool,
    /// Directory for the report files.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario (`s1`, `s2`, `s3`).
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    pub scenario: Option<String>,
    /// Config file defining a custom scenario.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Quadratic mean coefficient of the `s1` outcome model.
    #[arg(long, default_value_t = 1.0)]
    pub kappa2: f64,
    #[arg(long, default_value_t = 200)]
    pub b: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 20240601)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub engine: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Run a parsed command and return the process exit code.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Identify(a) => identify(a),
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn identify(a: IdentifyArgs) -> anyhow::Result<i32> {
    let cfg = RunConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let schema = cfg.schema()?;
    let model = cfg.declared_model(&schema)?;
    let h = cfg.response_template(&schema)?;
    let opts = IdentifyOptions {
        sign_beta_known: a.sign_beta_known || cfg.estimator.sign_beta_known,
        values: if a.structural { ValueMode::Structural } else { ValueMode::Declared },
        beta: cfg.response.beta,
    };
    let v = check_model(&model, h.h(), &opts)?;
    println!("verdict: {}", v.status);
    println!("rule: {}", v.rule);
    println!("certificate: {}", v.certificate);
    for n in &v.notes {
        println!("note: {n}");
    }
    for (lvl, lv) in &v.levels {
        println!("level {lvl}: {} [{}]: {}", lv.status, lv.rule, lv.certificate);
    }
    Ok(v.status.exit_code())
}

fn fit(a: FitArgs) -> anyhow::Result<i32> {
    let mut cfg = RunConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    if let Some(t) = a.tol {
        cfg.estimator.tol = t;
    }
    if let Some(m) = a.max_iter {
        cfg.estimator.max_iter = m;
    }
    if let Some(e) = a.engine {
        cfg.estimator.engine = e;
    }
    cfg.estimator.force |= a.force;
    let path = a
        .data
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| Error::Config("no data file given (use --data or data.path)".into()))?;
    let mut data = ingest(&path, &cfg.column_spec()?).with_context(|| format!("reading {}", path.display()))?;
    let mut cols = cfg.data.standardize.clone();
    cols.extend(a.standardize.iter().filter(|c| !cols.contains(c)).cloned().collect::<Vec<_>>());
    data.standardize(&cols)?;
    let schema = data.schema().clone();

    let template = cfg.response_template(&schema)?;
    let init = cfg.response_init(&schema)?;
    let mut em = cfg.em_controls()?;
    let fc = cfg.fit_controls();
    let cands = cfg.candidates(&schema)?;
    let gamma = match &cfg.outcome.group {
        Some(var) => fit_grouped(&data, var, &cands, &fc)?,
        None => select_aic(&data, &cands[0], &fc)?,
    };

    let opts = IdentifyOptions { sign_beta_known: em.sign_beta_known, values: ValueMode::Structural, beta: None };
    let verdict = check_model(&gamma.model, template.h(), &opts)?;
    if verdict.status != Status::ProvablyIdentifiable {
        eprintln!("identifiability: {verdict}");
        if !cfg.estimator.force {
            eprintln!("refusing to fit without --force");
            return Ok(verdict.status.exit_code());
        }
    }
    em.force = cfg.estimator.force;

    let result = em_fit(&data, &gamma, &template, init.as_ref(), &em)?;
    let report = FitReport::build(&result, &data, cfg.estimator.level);
    let residuals = residual_data(&result.gamma.model, &data)?;
    write_fit(&a.out, &report, &residuals).with_context(|| format!("writing reports to {}", a.out.display()))?;
    print!("{}", report.table());
    Ok(0)
}

fn simulate(a: SimulateArgs) -> anyhow::Result<i32> {
    let scn = match (&a.scenario, &a.config) {
        (Some(name), _) => Scenario::builtin(name, a.kappa2)?,
        (None, Some(path)) => {
            let cfg = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
            let name = path.file_stem().map_or_else(|| "custom".into(), |s| s.to_string_lossy().into_owned());
            cfg.scenario(&name)?
        }
        (None, None) => unreachable!("clap requires one of --scenario and --config"),
    };
    let mut settings = McSettings { n: a.n, b: a.b, seed: a.seed, level: a.level, ..McSettings::default() };
    if let Some(e) = &a.engine {
        settings.em.engine = parse_engine(e)?;
    }
    let summary = run_mc(&scn, &settings)?;
    write_mc(&a.out, &summary).with_context(|| format!("writing results to {}", a.out.display()))?;
    print!("{}", mc_table(&summary));
    summary.check_failures()?;
    Ok(0)
}

/// Exit code for an error raised by [`run`].
pub fn error_code(e: &anyhow::Error) -> i32 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(1, Error::exit_code)
}
