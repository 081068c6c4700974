//! Built-in simulation scenarios and the Monte Carlo driver.
//!
//! A scenario fixes the respondent outcome law `f(y | x, delta=1)` and the
//! logistic response model. Data are generated through the marginal response
//! probability `p1(x) = expit(h(x) - log E_1[exp(-beta y) | x])`, then `y`
//! from the respondent law when `delta=1` and from its tilt otherwise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::{BasisSet, CovariateKind, Schema};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{Component, FamilyKind, OutcomeModel, OutcomeSpec};
use crate::fiem::{em_fit, estimate_mu_y, EmControls};
use crate::numeric::expit;
use crate::respondent::{select_aic, Candidate, FitControls};
use crate::response::ResponseSpec;
use crate::variance::{complete_case_interval, mu_y_interval, wald, Interval};

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub schema: Arc<Schema>,
    pub outcome: OutcomeSpec,
    pub response: ResponseSpec,
    /// Respondent model fitted in each replicate.
    pub candidate: Candidate,
}

fn x_schema() -> Arc<Schema> {
    Arc::new(Schema::new([("x", CovariateKind::Continuous)]))
}

fn basis(f: &str, s: &Arc<Schema>) -> BasisSet {
    BasisSet::parse(f, s.clone()).expect("built-in formula")
}

impl Scenario {
    /// Normal outcome with quadratic mean `0.4 x + kappa2 x^2`, variance 1/2.
    pub fn s1(kappa2: f64) -> Scenario {
        let s = x_schema();
        let b = basis("1 + x + x^2", &s);
        let outcome = OutcomeSpec::single(FamilyKind::Normal, b.clone(), vec![0.0, 0.4, kappa2], 0.5).expect("valid");
        let response = ResponseSpec::new(basis("1 + x", &s), vec![0.68, 0.19], 0.24).expect("valid");
        Scenario {
            name: format!("s1(kappa2={kappa2})"),
            schema: s,
            outcome,
            response,
            candidate: Candidate::Glm { family: FamilyKind::Normal, basis: b },
        }
    }

    /// Bernoulli outcome with logit `-0.21 + 5.9 x`.
    pub fn s2() -> Scenario {
        let s = x_schema();
        let b = basis("1 + x", &s);
        let outcome = OutcomeSpec::single(FamilyKind::Bernoulli, b.clone(), vec![-0.21, 5.9], 1.0).expect("valid");
        let response = ResponseSpec::new(basis("1 + x", &s), vec![0.7, 0.39], 0.39).expect("valid");
        Scenario {
            name: "s2".into(),
            schema: s,
            outcome,
            response,
            candidate: Candidate::Glm { family: FamilyKind::Bernoulli, basis: b },
        }
    }

    /// Two-component normal mixture, linear and quadratic means.
    pub fn s3() -> Scenario {
        let s = x_schema();
        let b1 = basis("1 + x", &s);
        let b2 = basis("1 + x + x^2", &s);
        let outcome = OutcomeSpec::new(
            FamilyKind::Normal,
            vec![
                Component::new(0.35, b1.clone(), vec![1.0, -1.4], 0.5),
                Component::new(0.65, b2.clone(), vec![-1.5, -0.5, 1.0], 0.5),
            ],
        )
        .expect("valid");
        let response = ResponseSpec::new(basis("1 + x", &s), vec![0.9, -0.26], 0.2).expect("valid");
        Scenario {
            name: "s3".into(),
            schema: s,
            outcome,
            response,
            candidate: Candidate::Mixture { bases: vec![b1, b2] },
        }
    }

    /// Look up a built-in scenario by name (`s1`, `s2`, `s3`).
    pub fn builtin(name: &str, kappa2: f64) -> Result<Scenario> {
        match name {
            "s1" => Ok(Scenario::s1(kappa2)),
            "s2" => Ok(Scenario::s2()),
            "s3" => Ok(Scenario::s3()),
            _ => Err(Error::Config(format!("unknown scenario `{name}` (expected s1, s2 or s3)"))),
        }
    }

    /// Same scenario with a different `beta`.
    pub fn with_beta(&self, beta: f64) -> Scenario {
        let mut phi = self.response.phi();
        *phi.last_mut().expect("beta") = beta;
        Scenario { response: self.response.with_phi(&phi), ..self.clone() }
    }

    /// `P(delta = 1 | x)`.
    pub fn p1(&self, x: &[f64]) -> Result<f64> {
        let lnorm = self.outcome.log_odds_normalizer(self.response.beta(), x)?;
        Ok(expit(self.response.h_value(x) - lnorm))
    }

    /// `(p1(x), E[y | x, delta=1], E[y | x, delta=0])`.
    pub fn conditional_means(&self, x: &[f64]) -> Result<(f64, f64, f64)> {
        let beta = self.response.beta();
        let m1 = self.outcome.mean_at(x)?;
        let m0 = self.outcome.tilt(beta).mean_at(x)?;
        Ok((self.p1(x)?, m1, m0))
    }

    /// The normalizer must be finite over a wide covariate grid.
    pub fn check_proper(&self) -> Result<()> {
        for k in -400..=400 {
            let x = [k as f64 * 0.025];
            let v = self.outcome.log_odds_normalizer(self.response.beta(), &x)?;
            if !v.is_finite() {
                return Err(Error::spec(format!("odds normalizer diverges at x = {}", x[0])));
            }
        }
        Ok(())
    }
}

/// Draw `n` units from the scenario with a reproducible stream.
pub fn generate_stream(scn: &Scenario, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
    Ok(generate_full(scn, n, seed, stream)?.0)
}

pub fn generate(scn: &Scenario, n: usize, seed: u64) -> Result<Dataset> {
    generate_stream(scn, n, seed, 0)
}

/// Like [`generate_stream`] but also returns the outcomes of nonrespondents.
pub fn generate_full(scn: &Scenario, n: usize, seed: u64, stream: u64) -> Result<(Dataset, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let beta = scn.response.beta();
    let tilted = scn.outcome.tilt(beta);
    let (mut xs, mut ys, mut full) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let xv = [x];
        let p1 = scn.p1(&xv)?;
        let u: f64 = rng.gen();
        if u < p1 {
            let y = scn.outcome.sample(&xv, &mut rng)?;
            ys.push(Some(y));
            full.push(y);
        } else {
            let y = tilted.sample(&xv, &mut rng)?;
            ys.push(None);
            full.push(y);
        }
        xs.push(x);
    }
    Ok((Dataset::new(scn.schema.clone(), xs, ys)?, full))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Integrate `g(x) phi(x)` over the standard normal covariate, summing
/// double-exponential quadrature over unit subintervals of `[-12, 12]`.
fn integrate_over_x(g: impl Fn(f64) -> Result<f64>, tol: f64) -> Result<f64> {
    let err = std::cell::RefCell::new(None);
    let f = |x: f64| match g(x) {
        Ok(v) => v * std_normal_pdf(x),
        Err(e) => {
            err.borrow_mut().get_or_insert(e);
            0.0
        }
    };
    let pieces = 24;
    let (mut total, mut est) = (0.0, 0.0);
    for k in 0..pieces {
        let a = -12.0 + k as f64;
        let out = quadrature::double_exponential::integrate(f, a, a + 1.0, tol / pieces as f64);
        total += out.integral;
        est += out.error_estimate;
    }
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    if !(est <= tol) || !total.is_finite() {
        return Err(Error::Quadrature { tol, err: est });
    }
    Ok(total)
}

/// `E[y] = E_x[p1 m1 + (1 - p1) m0]`.
pub fn true_mu_y(scn: &Scenario) -> Result<f64> {
    integrate_over_x(
        |x| {
            let (p, m1, m0) = scn.conditional_means(&[x])?;
            Ok(p * m1 + (1.0 - p) * m0)
        },
        1e-9,
    )
}

/// `E[p1(x)]`, the population response rate.
pub fn true_response_rate(scn: &Scenario) -> Result<f64> {
    integrate_over_x(|x| scn.p1(&[x]), 1e-9)
}

#[derive(Clone, Debug)]
pub struct McSettings {
    pub n: usize,
    pub b: usize,
    pub seed: u64,
    pub level: f64,
    pub em: EmControls,
    pub fit: FitControls,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings { n: 500, b: 200, seed: 20240601, level: 0.95, em: EmControls::default(), fit: FitControls::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Replicate {
    pub index: usize,
    pub response_rate: f64,
    pub cc_mu: Option<Interval>,
    pub fi_mu: Option<Interval>,
    pub beta: Option<Interval>,
    pub em_iterations: usize,
    pub error: Option<String>,
}

impl Replicate {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub parameter: String,
    pub method: String,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Fraction of intervals covering the truth.
    pub coverage: f64,
    pub replicates: usize,
    pub failures: usize,
    pub response_rate: f64,
}

#[derive(Clone, Debug)]
pub struct McSummary {
    pub scenario: String,
    pub truth_mu_y: f64,
    pub truth_beta: f64,
    pub rows: Vec<SummaryRow>,
    pub replicates: Vec<Replicate>,
    pub failures: usize,
    pub mean_response_rate: f64,
}

/// Replicates may fail at most this fraction before a run is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.05;

impl McSummary {
    pub fn row(&self, parameter: &str, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.parameter == parameter && r.method == method)
    }

    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.replicates.len().max(1) as f64
    }

    pub fn check_failures(&self) -> Result<()> {
        if self.failure_rate() > MAX_FAILURE_RATE {
            return Err(Error::ReplicateFailures { failed: self.failures, total: self.replicates.len() });
        }
        Ok(())
    }
}

fn one_replicate(scn: &Scenario, s: &McSettings, index: usize) -> Replicate {
    let mut rep = Replicate {
        index,
        response_rate: f64::NAN,
        cc_mu: None,
        fi_mu: None,
        beta: None,
        em_iterations: 0,
        error: None,
    };
    let run = |rep: &mut Replicate| -> Result<()> {
        let data = generate_stream(scn, s.n, s.seed, index as u64)?;
        rep.response_rate = data.response_rate();
        rep.cc_mu = Some(complete_case_interval(&data, s.level)?);
        let fit_ctrl = FitControls { seed: s.fit.seed ^ (index as u64), ..s.fit.clone() };
        let gamma = select_aic(&data, std::slice::from_ref(&scn.candidate), &fit_ctrl)?;
        let em = EmControls { seed: s.em.seed ^ (index as u64), ..s.em.clone() };
        let fit = em_fit(&data, &gamma, &scn.response, None, &em)?;
        rep.em_iterations = fit.em_iterations;
        let cov = fit
            .covariance
            .as_ref()
            .ok_or_else(|| Error::spec(fit.variance_error.clone().unwrap_or_else(|| "no covariance".into())))?;
        let k = fit.response.dim() - 1;
        rep.beta = Some(wald(fit.response.beta(), cov[(k, k)].max(0.0).sqrt(), s.level));
        let iv = mu_y_interval(&fit, &data, s.level)?;
        debug_assert!((iv.estimate - estimate_mu_y(&fit, &data)).abs() < 1e-12);
        rep.fi_mu = Some(iv);
        Ok(())
    };
    if let Err(e) = run(&mut rep) {
        rep.error = Some(e.to_string());
    }
    rep
}

fn summarize(scenario: &str, parameter: &str, method: &str, truth: f64, ivs: &[Interval], failures: usize, rate: f64) -> SummaryRow {
    let b = ivs.len() as f64;
    let bias = ivs.iter().map(|i| i.estimate - truth).sum::<f64>() / b;
    let mse = ivs.iter().map(|i| (i.estimate - truth).powi(2)).sum::<f64>() / b;
    let cov = ivs.iter().filter(|i| i.covers(truth)).count() as f64 / b;
    SummaryRow {
        scenario: scenario.into(),
        parameter: parameter.into(),
        method: method.into(),
        truth,
        bias,
        rmse: mse.sqrt(),
        coverage: cov,
        replicates: ivs.len(),
        failures,
        response_rate: rate,
    }
}

/// Run `b` replicates in parallel. Failed replicates are recorded and
/// excluded from the FI rows; call [`McSummary::check_failures`] to enforce
/// the failure-rate limit.
pub fn run_mc(scn: &Scenario, settings: &McSettings) -> Result<McSummary> {
    if settings.b == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    scn.check_proper()?;
    let truth_mu = true_mu_y(scn)?;
    let truth_beta = scn.response.beta();
    let replicates: Vec<Replicate> = (0..settings.b).into_par_iter().map(|i| one_replicate(scn, settings, i)).collect();
    let ok: Vec<&Replicate> = replicates.iter().filter(|r| !r.failed()).collect();
    let failures = replicates.len() - ok.len();
    let rates: Vec<f64> = replicates.iter().map(|r| r.response_rate).filter(|r| r.is_finite()).collect();
    let rate = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
    let cc: Vec<Interval> = replicates.iter().filter_map(|r| r.cc_mu).collect();
    let fi: Vec<Interval> = ok.iter().filter_map(|r| r.fi_mu).collect();
    let beta: Vec<Interval> = ok.iter().filter_map(|r| r.beta).collect();
    let mut rows = vec![summarize(&scn.name, "mu_y", "CC", truth_mu, &cc, replicates.len() - cc.len(), rate)];
    if !fi.is_empty() {
        rows.push(summarize(&scn.name, "mu_y", "FI", truth_mu, &fi, failures, rate));
        rows.push(summarize(&scn.name, "beta", "FI", truth_beta, &beta, failures, rate));
    }
    Ok(McSummary {
        scenario: scn.name.clone(),
        truth_mu_y: truth_mu,
        truth_beta,
        rows,
        replicates,
        failures,
        mean_response_rate: rate,
    })
}

/// The outcome model of a scenario, as a fitted-model stand-in.
pub fn true_model(scn: &Scenario) -> OutcomeModel {
    OutcomeModel::Single(scn.outcome.clone())
}
