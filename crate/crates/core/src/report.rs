//! Fixed-width tables and delimited output for fits and simulation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{Dataset, Standardization};
use crate::error::Result;
use crate::expfam::OutcomeModel;
use crate::fiem::{estimate_mu_y, FitResult};
use crate::sim::McSummary;
use crate::variance::{mu_y_interval, wald};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateRow {
    pub parameter: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub rows: Vec<EstimateRow>,
    pub verdict: String,
    pub fitted_verdict: Option<String>,
    pub outcome: String,
    pub outcome_aic: f64,
    pub em_iterations: usize,
    pub mean_score_norm: f64,
    pub converged: bool,
    pub n: usize,
    pub respondents: usize,
    pub standardizations: Vec<Standardization>,
    pub notes: Vec<String>,
}

/// Describe an outcome model as `family: pi * [formula](coefficients), ...`.
pub fn describe_model(model: &OutcomeModel) -> String {
    let spec_str = |s: &crate::expfam::OutcomeSpec| {
        s.components()
            .iter()
            .map(|c| {
                let coef: Vec<String> = c.coefficients.iter().map(|v| format!("{v:.4}")).collect();
                let disp = if s.family().has_dispersion() { format!(", disp {:.4}", c.dispersion) } else { String::new() };
                format!("{:.3} x [{}]({}){disp}", c.weight, c.basis().render(), coef.join(", "))
            })
            .collect::<Vec<_>>()
            .join(" + ")
    };
    match model {
        OutcomeModel::Single(s) => format!("{}: {}", s.family().name(), spec_str(s)),
        OutcomeModel::Grouped { var, specs, .. } => {
            let levels = specs.first().and_then(|s| s.schema().kind(var)).and_then(|k| k.levels()).unwrap_or_default();
            let parts: Vec<String> = specs
                .iter()
                .zip(levels)
                .map(|(s, l)| format!("{var}={l}: {}", spec_str(s)))
                .collect();
            format!("{} by {var}; {}", model.family().name(), parts.join("; "))
        }
    }
}

impl FitReport {
    pub fn build(fit: &FitResult, data: &Dataset, level: f64) -> FitReport {
        let mut notes = Vec::new();
        let se = fit.std_errors();
        if let Some(e) = &fit.variance_error {
            notes.push(format!("covariance unavailable: {e}"));
        }
        let names = fit
            .response
            .h()
            .terms()
            .iter()
            .map(|t| format!("alpha[{t}]"))
            .chain(std::iter::once("beta".to_string()));
        let mut rows: Vec<EstimateRow> = names
            .zip(fit.phi())
            .enumerate()
            .map(|(k, (parameter, estimate))| match &se {
                Some(se) => {
                    let iv = wald(estimate, se[k], level);
                    EstimateRow { parameter, estimate, se: Some(se[k]), lower: Some(iv.lower), upper: Some(iv.upper) }
                }
                None => EstimateRow { parameter, estimate, se: None, lower: None, upper: None },
            })
            .collect();
        let mu_row = match mu_y_interval(fit, data, level) {
            Ok(iv) => EstimateRow {
                parameter: "E[Y]".into(),
                estimate: iv.estimate,
                se: Some(iv.se),
                lower: Some(iv.lower),
                upper: Some(iv.upper),
            },
            Err(e) => {
                notes.push(format!("E[Y] interval unavailable: {e}"));
                EstimateRow { parameter: "E[Y]".into(), estimate: estimate_mu_y(fit, data), se: None, lower: None, upper: None }
            }
        };
        rows.push(mu_row);
        FitReport {
            rows,
            verdict: fit.verdict.to_string(),
            fitted_verdict: fit.fitted_verdict.as_ref().map(ToString::to_string),
            outcome: describe_model(&fit.gamma.model),
            outcome_aic: fit.gamma.aic,
            em_iterations: fit.em_iterations,
            mean_score_norm: fit.mean_score_norm,
            converged: fit.converged,
            n: data.n(),
            respondents: data.n_respondents(),
            standardizations: data.transforms().to_vec(),
            notes,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(s, "{:<24} {:>10} {:>10} {:>10} {:>10}", "parameter", "estimate", "se", "lower", "upper").ok();
        for r in &self.rows {
            writeln!(s, "{:<24} {:>10.4} {:>10} {:>10} {:>10}", r.parameter, r.estimate, opt(r.se), opt(r.lower), opt(r.upper)).ok();
        }
        writeln!(s).ok();
        writeln!(s, "units {} (respondents {})", self.n, self.respondents).ok();
        writeln!(s, "outcome model (AIC {:.3}): {}", self.outcome_aic, self.outcome).ok();
        writeln!(s, "identifiability: {}", self.verdict).ok();
        if let Some(v) = &self.fitted_verdict {
            writeln!(s, "identifiability at fitted values: {v}").ok();
        }
        writeln!(s, "EM evaluations {}, max |mean score|/n {:.3e}", self.em_iterations, self.mean_score_norm).ok();
        for t in &self.standardizations {
            writeln!(s, "standardized {}: mean {:.6}, sd {:.6}", t.column, t.mean, t.sd).ok();
        }
        for n in &self.notes {
            writeln!(s, "note: {n}").ok();
        }
        s
    }

    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["parameter", "estimate", "se", "lower", "upper"])?;
        let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:?}"));
        for r in &self.rows {
            w.write_record([r.parameter.clone(), format!("{:?}", r.estimate), f(r.se), f(r.lower), f(r.upper)])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
    }
}

/// `(level, fitted mean, residual)` for every respondent under the fitted
/// outcome model. The level column names the group level or `all`.
pub fn residual_data(model: &OutcomeModel, data: &Dataset) -> Result<Vec<(String, f64, f64)>> {
    let (col, levels) = match model {
        OutcomeModel::Grouped { var, col, .. } => {
            (Some(*col), data.schema().kind(var).and_then(|k| k.levels()).unwrap_or_default())
        }
        OutcomeModel::Single(_) => (None, Vec::new()),
    };
    let mut out = Vec::with_capacity(data.n_respondents());
    for i in data.respondents() {
        let x = data.x(i);
        let fitted = model.spec_at(x).mean_at(x)?;
        let level = col.map_or_else(|| "all".to_string(), |c| levels[x[c] as usize].clone());
        out.push((level, fitted, data.y(i).expect("respondent") - fitted));
    }
    Ok(out)
}

fn residual_csv(rows: &[(String, f64, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["level", "fitted", "residual"])?;
    for (l, f, r) in rows {
        w.write_record([l.clone(), format!("{f:?}"), format!("{r:?}")])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
}

/// Write `fit_report.txt`, `fit_estimates.csv` and `residuals.csv`.
pub fn write_fit(dir: &Path, report: &FitReport, residuals: &[(String, f64, f64)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = vec![
        (dir.join("fit_report.txt"), report.table()),
        (dir.join("fit_estimates.csv"), report.csv()?),
        (dir.join("residuals.csv"), residual_csv(residuals)?),
    ];
    for (p, body) in &files {
        fs::write(p, body)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn mc_table(s: &McSummary) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<18} {:<10} {:<7} {:>8} {:>8} {:>7} {:>6} {:>8} {:>6}",
        "Scenario", "Parameter", "Method", "Bias", "RMSE", "CR", "B", "Failures", "Rate"
    )
    .ok();
    for r in &s.rows {
        writeln!(
            out,
            "{:<18} {:<10} {:<7} {:>8.3} {:>8.3} {:>7.1} {:>6} {:>8} {:>6.3}",
            r.scenario,
            r.parameter,
            r.method,
            r.bias,
            r.rmse,
            100.0 * r.coverage,
            r.replicates,
            r.failures,
            r.response_rate
        )
        .ok();
    }
    writeln!(out, "true E[Y] {:.6}, true beta {}", s.truth_mu_y, s.truth_beta).ok();
    out
}

pub fn mc_csv(s: &McSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["Scenario", "Parameter", "Method", "Truth", "Bias", "RMSE", "CR", "Replicates", "Failures", "ResponseRate"])?;
    for r in &s.rows {
        w.write_record([
            r.scenario.clone(),
            r.parameter.clone(),
            r.method.clone(),
            format!("{:?}", r.truth),
            format!("{:?}", r.bias),
            format!("{:?}", r.rmse),
            format!("{:?}", 100.0 * r.coverage),
            r.replicates.to_string(),
            r.failures.to_string(),
            format!("{:?}", r.response_rate),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
}

pub fn replicate_csv(s: &McSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "replicate", "response_rate", "cc_mu", "cc_lower", "cc_upper", "fi_mu", "fi_lower", "fi_upper", "beta", "beta_lower",
        "beta_upper", "em_evaluations", "error",
    ])?;
    let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:?}"));
    for r in &s.replicates {
        let iv = |i: Option<crate::variance::Interval>| [f(i.map(|i| i.estimate)), f(i.map(|i| i.lower)), f(i.map(|i| i.upper))];
        let mut rec = vec![r.index.to_string(), format!("{:?}", r.response_rate)];
        rec.extend(iv(r.cc_mu));
        rec.extend(iv(r.fi_mu));
        rec.extend(iv(r.beta));
        rec.push(r.em_iterations.to_string());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
}

/// Write `mc_summary.txt`, `mc_summary.csv` and `replicates.csv`.
pub fn write_mc(dir: &Path, s: &McSummary) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = vec![
        (dir.join("mc_summary.txt"), mc_table(s)),
        (dir.join("mc_summary.csv"), mc_csv(s)?),
        (dir.join("replicates.csv"), replicate_csv(s)?),
    ];
    for (p, body) in &files {
        fs::write(p, body)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
