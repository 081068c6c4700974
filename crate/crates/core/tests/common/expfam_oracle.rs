//! Quadrature oracles for exponential-family densities and their tilts.

use std::sync::Arc;

use fracimp::basis::{BasisSet, CovariateKind, Schema};
use fracimp::expfam::{Component, FamilyKind, OutcomeSpec};
use gauss_quad::GaussLegendre;
use proptest::prelude::*;
use statrs::function::gamma::ln_gamma;

pub fn schema() -> Arc<Schema> {
    Arc::new(Schema::new([("x", CovariateKind::Continuous)]))
}

/// Oracle parameterisation of one component at a fixed `x`.
#[derive(Clone, Copy, Debug)]
pub enum Oracle {
    Normal { mean: f64, var: f64 },
    Bernoulli { p: f64 },
    Poisson { rate: f64 },
    Gamma { shape: f64, mean: f64 },
}

impl Oracle {
    pub fn density(self, y: f64) -> f64 {
        match self {
            Oracle::Normal { mean, var } => (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt(),
            Oracle::Bernoulli { p } => {
                if y == 1.0 {
                    p
                } else {
                    1.0 - p
                }
            }
            Oracle::Poisson { rate } => (y * rate.ln() - rate - ln_gamma(y + 1.0)).exp(),
            Oracle::Gamma { shape, mean } => {
                let rate = shape / mean;
                (shape * rate.ln() + (shape - 1.0) * y.ln() - rate * y - ln_gamma(shape)).exp()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Case {
    pub spec: OutcomeSpec,
    pub x: f64,
    pub parts: Vec<(f64, Oracle)>,
    pub beta: f64,
}

impl Case {
    pub fn family(&self) -> FamilyKind {
        self.spec.family()
    }

    pub fn f1(&self, y: f64) -> f64 {
        self.parts.iter().map(|(w, o)| w * o.density(y)).sum()
    }
}

/// `int g` over the support, by composite Gauss-Legendre or exact summation.
pub fn integrate(case: &Case, g: impl Fn(f64) -> f64) -> f64 {
    match case.family() {
        FamilyKind::Bernoulli => g(0.0) + g(1.0),
        FamilyKind::Poisson => (0..2000).map(|k| g(k as f64)).sum(),
        FamilyKind::Normal => {
            let (lo, hi) = case.parts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, o)| match o {
                Oracle::Normal { mean, var } => {
                    let sd = var.sqrt();
                    let shift = case.beta.abs() * var;
                    (lo.min(mean - shift - 16.0 * sd), hi.max(mean + shift + 16.0 * sd))
                }
                _ => unreachable!(),
            });
            panels(&g, lo, hi, 400)
        }
        FamilyKind::Gamma => {
            let Oracle::Gamma { shape, mean } = case.parts[0].1 else { unreachable!() };
            let hi = 80.0 * mean * (1.0 + 1.0 / shape);
            let mut total = 0.0;
            let mut a = 0.0;
            for k in (-14..=0).map(|e| hi * 10f64.powi(e) / 10.0) {
                total += panels(&g, a, k, 4);
                a = k;
            }
            total + panels(&g, a, hi, 2000)
        }
    }
}

fn panels(g: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let rule = GaussLegendre::new(20).unwrap();
    let h = (b - a) / n as f64;
    (0..n).map(|i| rule.integrate(a + i as f64 * h, a + (i + 1) as f64 * h, g)).sum()
}

pub fn single(family: FamilyKind, coef: Vec<f64>, disp: f64) -> OutcomeSpec {
    let b = BasisSet::parse("1 + x", schema()).unwrap();
    OutcomeSpec::single(family, b, coef, disp).unwrap()
}

pub fn case_strategy() -> impl Strategy<Value = Case> {
    let x = -1.5..1.5f64;
    let beta = -2.0..2.0f64;
    let normal = (-2.0..2.0f64, -1.0..1.0f64, 0.2..3.0f64, x.clone(), beta.clone()).prop_map(|(a, b, v, x, beta)| {
        Case { spec: single(FamilyKind::Normal, vec![a, b], v), x, parts: vec![(1.0, Oracle::Normal { mean: a + b * x, var: v })], beta }
    });
    let bern = (-3.0..3.0f64, -2.0..2.0f64, x.clone(), beta.clone()).prop_map(|(a, b, x, beta)| {
        let p = 1.0 / (1.0 + (-(a + b * x)).exp());
        Case { spec: single(FamilyKind::Bernoulli, vec![a, b], 1.0), x, parts: vec![(1.0, Oracle::Bernoulli { p })], beta }
    });
    let pois = (-1.0..2.0f64, -0.5..0.5f64, x.clone(), beta.clone()).prop_map(|(a, b, x, beta)| {
        let rate = (a + b * x).exp();
        Case { spec: single(FamilyKind::Poisson, vec![a, b], 1.0), x, parts: vec![(1.0, Oracle::Poisson { rate })], beta }
    });
    let gamma = (-1.0..1.0f64, -0.5..0.5f64, 1.0..8.0f64, x.clone(), beta.clone()).prop_map(|(a, b, shape, x, beta)| {
        let mean = (a + b * x).exp();
        Case { spec: single(FamilyKind::Gamma, vec![a, b], shape), x, parts: vec![(1.0, Oracle::Gamma { shape, mean })], beta }
    });
    let mix = (0.1..0.9f64, -2.0..2.0f64, -1.0..1.0f64, 0.2..2.0f64, 0.2..2.0f64, x, beta).prop_map(
        |(w, m1, q, v1, v2, x, beta)| {
            let s = schema();
            let b1 = BasisSet::parse("1 + x", s.clone()).unwrap();
            let b2 = BasisSet::parse("1 + x^2", s).unwrap();
            let spec = OutcomeSpec::new(
                FamilyKind::Normal,
                vec![Component::new(w, b1, vec![m1, 0.5], v1), Component::new(1.0 - w, b2, vec![-m1, q], v2)],
            )
            .unwrap();
            let parts = vec![
                (w, Oracle::Normal { mean: m1 + 0.5 * x, var: v1 }),
                (1.0 - w, Oracle::Normal { mean: -m1 + q * x * x, var: v2 }),
            ];
            Case { spec, x, parts, beta }
        },
    );
    prop_oneof![normal, bern, pois, gamma, mix]
}

pub fn gamma_domain_ok(c: &Case) -> bool {
    match c.parts[0].1 {
        // Tilted natural parameter 1/mean + beta/shape must stay positive.
        Oracle::Gamma { shape, mean } => 1.0 / mean + c.beta / shape > 0.05,
        _ => true,
    }
}


/// Oracle integration of the respondent and tilted densities.
pub fn check_normalization(c: &Case) -> Result<(), String> {
    let x = [c.x];
    let total = integrate(c, |y| c.spec.density(y, &x).unwrap());
    if (total - 1.0).abs() >= 1e-6 {
        return Err(format!("respondent mass {total}"));
    }
    if !gamma_domain_ok(c) {
        return Ok(());
    }
    let t = c.spec.tilt(c.beta);
    let total = integrate(c, |y| t.density(y, &x).unwrap());
    if (total - 1.0).abs() >= 1e-6 {
        return Err(format!("tilted mass {total}"));
    }
    let oracle = integrate(c, |y| (c.f1(y).ln() - c.beta * y).exp()).ln();
    let got = c.spec.log_odds_normalizer(c.beta, &x).unwrap();
    if (got - oracle).abs() >= 1e-6 {
        return Err(format!("normalizer {got} vs {oracle}"));
    }
    Ok(())
}

/// Tilted density against `f1(y) exp(-beta y) / E[exp(-beta y)]` at
/// support points indexed by `u` in (0, 1).
pub fn check_proportional(c: &Case, us: &[f64]) -> Result<(), String> {
    if !gamma_domain_ok(c) {
        return Ok(());
    }
    let x = [c.x];
    let lnorm = c.spec.log_odds_normalizer(c.beta, &x).unwrap();
    let t = c.spec.tilt(c.beta);
    for &u in us {
        let y = match c.family() {
            FamilyKind::Bernoulli => (u > 0.5) as u8 as f64,
            FamilyKind::Poisson => (u * 12.0).floor(),
            FamilyKind::Gamma => u * 6.0,
            FamilyKind::Normal => (u - 0.5) * 8.0,
        };
        let want = c.f1(y) * (-c.beta * y - lnorm).exp();
        let got = t.density(y, &x).unwrap();
        if (got - want).abs() > 1e-8 * want.abs().max(1e-300) {
            return Err(format!("y {y}: {got} vs {want}"));
        }
    }
    Ok(())
}

/// Deterministic grid over families, parameters and `beta`.
pub fn case_grid() -> Vec<Case> {
    let mut out = Vec::new();
    let xs = [-1.2, 0.0, 0.9];
    let betas = [-1.5, -0.3, 0.0, 0.7, 1.8];
    for &x in &xs {
        for &beta in &betas {
            let (a, b) = (0.3 * beta - 0.2, 0.4 - 0.1 * x);
            let v = 0.5 + x * x;
            out.push(Case { spec: single(FamilyKind::Normal, vec![a, b], v), x, parts: vec![(1.0, Oracle::Normal { mean: a + b * x, var: v })], beta });
            let p = 1.0 / (1.0 + (-(a + 2.0 * b * x)).exp());
            out.push(Case { spec: single(FamilyKind::Bernoulli, vec![a, 2.0 * b], 1.0), x, parts: vec![(1.0, Oracle::Bernoulli { p })], beta });
            let rate = (0.5 * a + b * x).exp();
            out.push(Case { spec: single(FamilyKind::Poisson, vec![0.5 * a, b], 1.0), x, parts: vec![(1.0, Oracle::Poisson { rate })], beta });
            let shape = 2.0 + x * x;
            let mean = (0.5 * a + 0.5 * b * x).exp();
            out.push(Case { spec: single(FamilyKind::Gamma, vec![0.5 * a, 0.5 * b], shape), x, parts: vec![(1.0, Oracle::Gamma { shape, mean })], beta });
            let s = schema();
            let spec = OutcomeSpec::new(
                FamilyKind::Normal,
                vec![
                    Component::new(0.35, BasisSet::parse("1 + x", s.clone()).unwrap(), vec![1.0, 0.5], 0.5),
                    Component::new(0.65, BasisSet::parse("1 + x^2", s).unwrap(), vec![-1.0, b], 1.2),
                ],
            )
            .unwrap();
            let parts = vec![
                (0.35, Oracle::Normal { mean: 1.0 + 0.5 * x, var: 0.5 }),
                (0.65, Oracle::Normal { mean: -1.0 + b * x * x, var: 1.2 }),
            ];
            out.push(Case { spec, x, parts, beta });
        }
    }
    out.extend(extra_grid());
    out
}

fn extra_grid() -> Vec<Case> {
    (0..25)
        .map(|k| {
            let beta = -2.0 + 4.0 * k as f64 / 24.0;
            let v = 0.3 + 0.1 * k as f64;
            Case { spec: single(FamilyKind::Normal, vec![0.1, -0.6], v), x: 0.4, parts: vec![(1.0, Oracle::Normal { mean: 0.1 - 0.24, var: v })], beta }
        })
        .collect()
}
