//! Exponential-family respondent densities, exponential tilting and normal
//! mixtures.
//!
//! Every family is written in the canonical form
//! `log f(y) = tau * (y * theta - b(theta)) + c(y; tau)` with unit weights.
//! Tilting by `exp(-beta * y)` maps `theta` to `theta - beta / tau`, so the
//! nonrespondent density stays in the same family.
//!
//! Mean bases are evaluated at a covariate vector to give a pointwise [`Law`].
//! An [`OutcomeSpec`] carries an accumulated tilt offset that is applied at
//! evaluation time: tilted mixture weights and the gamma natural parameter
//! depend on `x` in ways no finite coefficient vector can represent.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, Normal as NormalDist, Poisson as PoissonDist};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF};
use statrs::function::gamma::ln_gamma;

use crate::basis::{BasisSet, Schema};
use crate::error::{Error, Result};
use crate::numeric::{expit, logsumexp, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Normal,
    Bernoulli,
    Gamma,
    Poisson,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Normal => "normal",
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Gamma => "gamma",
            FamilyKind::Poisson => "poisson",
        }
    }

    /// Whether the family carries a free dispersion parameter
    /// (normal variance, gamma shape).
    pub fn has_dispersion(self) -> bool {
        matches!(self, FamilyKind::Normal | FamilyKind::Gamma)
    }

    /// Cumulant `b(theta)`; NaN outside the natural domain.
    pub fn cumulant(self, theta: f64) -> f64 {
        match self {
            FamilyKind::Normal => 0.5 * theta * theta,
            FamilyKind::Bernoulli => softplus(theta),
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Gamma => {
                if theta > 0.0 {
                    theta.ln()
                } else {
                    f64::NAN
                }
            }
        }
    }

    /// `b'(theta)`, the mean.
    pub fn mean_of(self, theta: f64) -> f64 {
        match self {
            FamilyKind::Normal => theta,
            FamilyKind::Bernoulli => expit(theta),
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Gamma => 1.0 / theta,
        }
    }

    pub fn in_domain(self, theta: f64) -> bool {
        match self {
            FamilyKind::Gamma => theta > 0.0 && theta.is_finite(),
            _ => theta.is_finite(),
        }
    }

    /// Natural parameter from the linear predictor.
    pub fn theta_of(self, eta: f64) -> f64 {
        match self {
            FamilyKind::Gamma => (-eta).exp(),
            _ => eta,
        }
    }

    /// `tau` from the dispersion slot: `1/sigma^2` for the normal,
    /// `-shape` for the gamma, 1 otherwise.
    pub fn tau_of(self, dispersion: f64) -> f64 {
        match self {
            FamilyKind::Normal => 1.0 / dispersion,
            FamilyKind::Gamma => -dispersion,
            _ => 1.0,
        }
    }

    pub fn check_support(self, y: f64) -> Result<()> {
        let ok = match self {
            FamilyKind::Normal => y.is_finite(),
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            FamilyKind::Gamma => y > 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutsideSupport { y, family: self.name() })
        }
    }

    /// `c(y; tau)`. Assumes `y` is in the support.
    pub fn log_base(self, y: f64, tau: f64) -> f64 {
        match self {
            FamilyKind::Normal => -0.5 * tau * y * y + 0.5 * (tau / std::f64::consts::TAU).ln(),
            FamilyKind::Bernoulli => 0.0,
            FamilyKind::Poisson => -ln_gamma(y + 1.0),
            FamilyKind::Gamma => {
                let s = -tau;
                s * s.ln() - ln_gamma(s) + (s - 1.0) * y.ln()
            }
        }
    }

    pub(crate) fn log_kernel(self, y: f64, theta: f64, tau: f64) -> f64 {
        tau * (y * theta - self.cumulant(theta)) + self.log_base(y, tau)
    }
}

/// One component of a pointwise law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LawComponent {
    pub log_weight: f64,
    pub theta: f64,
    pub tau: f64,
}

impl LawComponent {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// The distribution of `y` at one covariate value.
#[derive(Clone, Debug, PartialEq)]
pub struct Law {
    pub family: FamilyKind,
    pub components: Vec<LawComponent>,
}

impl Law {
    pub fn log_density(&self, y: f64) -> Result<f64> {
        self.family.check_support(y)?;
        Ok(self.log_density_unchecked(y))
    }

    pub(crate) fn log_density_unchecked(&self, y: f64) -> f64 {
        if self.components.len() == 1 {
            let c = &self.components[0];
            return c.log_weight + self.family.log_kernel(y, c.theta, c.tau);
        }
        logsumexp(
            self.components
                .iter()
                .map(|c| c.log_weight + self.family.log_kernel(y, c.theta, c.tau)),
        )
    }

    pub fn density(&self, y: f64) -> Result<f64> {
        Ok(self.log_density(y)?.exp())
    }

    pub fn mean(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight() * self.family.mean_of(c.theta))
            .sum()
    }

    fn tilted_theta(&self, c: &LawComponent, beta: f64) -> Result<f64> {
        let t = c.theta - beta / c.tau;
        if self.family.in_domain(t) {
            Ok(t)
        } else {
            Err(Error::TiltDomain { theta: t, family: self.family.name() })
        }
    }

    /// `log E[exp(-beta * y)]` under this law.
    pub fn log_odds_normalizer(&self, beta: f64) -> Result<f64> {
        if beta == 0.0 {
            return Ok(0.0);
        }
        let terms = self
            .components
            .iter()
            .map(|c| {
                let t = self.tilted_theta(c, beta)?;
                let b = self.family;
                Ok(c.log_weight + c.tau * (b.cumulant(t) - b.cumulant(c.theta)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(logsumexp(terms))
    }

    /// The law proportional to `f(y) * exp(-beta * y)`.
    pub fn tilt(&self, beta: f64) -> Result<Law> {
        if beta == 0.0 {
            return Ok(self.clone());
        }
        let mut raw = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let t = self.tilted_theta(c, beta)?;
            let lw = c.log_weight + c.tau * (self.family.cumulant(t) - self.family.cumulant(c.theta));
            raw.push(LawComponent { log_weight: lw, theta: t, tau: c.tau });
        }
        let norm = logsumexp(raw.iter().map(|c| c.log_weight));
        for c in &mut raw {
            c.log_weight -= norm;
        }
        Ok(Law { family: self.family, components: raw })
    }

    fn pick_component(&self, u: f64) -> &LawComponent {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight();
            if u < acc {
                return c;
            }
        }
        self.components.last().expect("law has at least one component")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let c = if self.components.len() == 1 {
            &self.components[0]
        } else {
            self.pick_component(rng.gen::<f64>())
        };
        match self.family {
            FamilyKind::Normal => {
                let sd = (1.0 / c.tau).sqrt();
                NormalDist::new(c.theta, sd).expect("finite sd").sample(rng)
            }
            FamilyKind::Bernoulli => {
                if rng.gen::<f64>() < expit(c.theta) {
                    1.0
                } else {
                    0.0
                }
            }
            FamilyKind::Poisson => {
                let lambda = c.theta.exp();
                if lambda <= 0.0 {
                    0.0
                } else {
                    PoissonDist::new(lambda).expect("positive rate").sample(rng)
                }
            }
            FamilyKind::Gamma => {
                let shape = -c.tau;
                let mean = 1.0 / c.theta;
                GammaDist::new(shape, mean / shape).expect("positive shape").sample(rng)
            }
        }
    }

    /// Deterministic draw from two uniforms: `u_comp` selects the component,
    /// `u` is pushed through its quantile function. Used for common random
    /// numbers across parameter values.
    pub fn quantile_draw(&self, u_comp: f64, u: f64) -> f64 {
        let c = if self.components.len() == 1 {
            &self.components[0]
        } else {
            self.pick_component(u_comp)
        };
        let u = u.clamp(1e-15, 1.0 - 1e-15);
        match self.family {
            FamilyKind::Normal => {
                let sd = (1.0 / c.tau).sqrt();
                c.theta + sd * statrs::distribution::Normal::standard().inverse_cdf(u)
            }
            FamilyKind::Bernoulli => {
                if u < expit(c.theta) {
                    1.0
                } else {
                    0.0
                }
            }
            FamilyKind::Poisson => {
                let lambda = c.theta.exp().max(1e-300);
                let d = statrs::distribution::Poisson::new(lambda).expect("positive rate");
                d.inverse_cdf(u) as f64
            }
            FamilyKind::Gamma => {
                let shape = -c.tau;
                let rate = shape * c.theta;
                let d = statrs::distribution::Gamma::new(shape, rate).expect("positive shape");
                d.inverse_cdf(u)
            }
        }
    }
}

/// A mixture component: weight, mean basis with coefficients, dispersion.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub basis: BasisSet,
    pub coefficients: Vec<f64>,
    /// Normal: variance. Gamma: shape. Ignored otherwise.
    pub dispersion: f64,
}

impl Component {
    pub fn new(weight: f64, basis: BasisSet, coefficients: Vec<f64>, dispersion: f64) -> Self {
        Component { weight, basis, coefficients, dispersion }
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.basis().linear(x, &self.coefficients)
    }
}

/// Respondent outcome model `f(y | x, delta = 1)` with an optional tilt.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeSpec {
    family: FamilyKind,
    components: Vec<Component>,
    tilt: f64,
}

impl OutcomeSpec {
    pub fn new(family: FamilyKind, components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::spec("outcome model needs at least one component"));
        }
        if components.len() > 1 && family != FamilyKind::Normal {
            return Err(Error::spec(format!(
                "mixtures are only supported for the normal family, got {}",
                family.name()
            )));
        }
        let schema = components[0].basis().schema().clone();
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.basis().schema() != &schema {
                return Err(Error::MismatchedKinds);
            }
            if c.coefficients.len() != c.basis().len() {
                return Err(Error::spec(format!(
                    "component {}: {} coefficients for {} basis terms",
                    k + 1,
                    c.coefficients.len(),
                    c.basis().len()
                )));
            }
            if c.coefficients.iter().any(|v| !v.is_finite()) {
                return Err(Error::spec(format!("component {}: non-finite coefficient", k + 1)));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::spec(format!("component {}: invalid weight {}", k + 1, c.weight)));
            }
            if family.has_dispersion() && !(c.dispersion > 0.0 && c.dispersion.is_finite()) {
                return Err(Error::spec(format!(
                    "component {}: dispersion must be positive, got {}",
                    k + 1,
                    c.dispersion
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::spec(format!("mixing weights sum to {total}, not 1")));
        }
        Ok(OutcomeSpec { family, components, tilt: 0.0 })
    }

    pub fn single(family: FamilyKind, basis: BasisSet, coefficients: Vec<f64>, dispersion: f64) -> Result<Self> {
        let dispersion = if family.has_dispersion() { dispersion } else { 1.0 };
        Self::new(family, vec![Component::new(1.0, basis, coefficients, dispersion)])
    }

    pub fn family(&self) -> FamilyKind {
        self.family
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn schema(&self) -> &std::sync::Arc<Schema> {
        self.components[0].basis().schema()
    }

    /// Accumulated tilt; zero for a respondent model.
    pub fn tilt_offset(&self) -> f64 {
        self.tilt
    }

    /// Nonrespondent model `f(y | x, delta = 0)` under a logistic response
    /// with coefficient `beta` on `y`. Domain violations surface when the
    /// tilted law is evaluated at a particular `x`.
    pub fn tilt(&self, beta: f64) -> OutcomeSpec {
        let mut out = self.clone();
        out.tilt += beta;
        out
    }

    /// Respondent law at `x`, before any tilt.
    pub fn base_law_at(&self, x: &[f64]) -> Law {
        let components = self
            .components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| LawComponent {
                log_weight: c.weight.ln(),
                theta: self.family.theta_of(c.linear_predictor(x)),
                tau: self.family.tau_of(c.dispersion),
            })
            .collect();
        Law { family: self.family, components }
    }

    pub fn law_at(&self, x: &[f64]) -> Result<Law> {
        let law = self.base_law_at(x);
        if self.tilt == 0.0 {
            for c in &law.components {
                if !self.family.in_domain(c.theta) {
                    return Err(Error::TiltDomain { theta: c.theta, family: self.family.name() });
                }
            }
            Ok(law)
        } else {
            law.tilt(self.tilt)
        }
    }

    pub fn density(&self, y: f64, x: &[f64]) -> Result<f64> {
        self.law_at(x)?.density(y)
    }

    pub fn log_density(&self, y: f64, x: &[f64]) -> Result<f64> {
        self.law_at(x)?.log_density(y)
    }

    pub fn mean_at(&self, x: &[f64]) -> Result<f64> {
        Ok(self.law_at(x)?.mean())
    }

    pub fn log_odds_normalizer(&self, beta: f64, x: &[f64]) -> Result<f64> {
        self.law_at(x)?.log_odds_normalizer(beta)
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<f64> {
        Ok(self.law_at(x)?.sample(rng))
    }

    /// Number of free parameters: coefficients, dispersions and `K - 1`
    /// mixing weights.
    pub fn n_free_params(&self) -> usize {
        let coef: usize = self.components.iter().map(|c| c.coefficients.len()).sum();
        let disp = if self.family.has_dispersion() { self.k() } else { 0 };
        coef + disp + self.k() - 1
    }

    /// Flat unconstrained parameter vector: per component coefficients and
    /// log-dispersion, then `log(pi_k / pi_1)` for `k >= 2`.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_free_params());
        for c in &self.components {
            v.extend_from_slice(&c.coefficients);
            if self.family.has_dispersion() {
                v.push(c.dispersion.ln());
            }
        }
        let w0 = self.components[0].weight.ln();
        for c in &self.components[1..] {
            v.push(c.weight.ln() - w0);
        }
        v
    }

    /// Inverse of [`OutcomeSpec::params`].
    pub fn with_params(&self, p: &[f64]) -> Result<OutcomeSpec> {
        if p.len() != self.n_free_params() {
            return Err(Error::spec(format!(
                "expected {} parameters, got {}",
                self.n_free_params(),
                p.len()
            )));
        }
        let mut it = p.iter().copied();
        let mut comps = self.components.clone();
        for c in &mut comps {
            for slot in c.coefficients.iter_mut() {
                *slot = it.next().expect("length checked");
            }
            if self.family.has_dispersion() {
                c.dispersion = it.next().expect("length checked").exp();
            }
        }
        if comps.len() > 1 {
            let logits: Vec<f64> = std::iter::once(0.0).chain(it).collect();
            let norm = logsumexp(logits.iter().copied());
            for (c, l) in comps.iter_mut().zip(logits) {
                c.weight = (l - norm).exp();
            }
        }
        Ok(OutcomeSpec { family: self.family, components: comps, tilt: self.tilt })
    }
}

/// Outcome model shared across all units, or one sub-model per level of a
/// categorical grouping covariate.
#[derive(Clone, Debug, PartialEq)]
pub enum OutcomeModel {
    Single(OutcomeSpec),
    Grouped { var: String, col: usize, specs: Vec<OutcomeSpec> },
}

impl OutcomeModel {
    pub fn grouped(var: &str, specs: Vec<OutcomeSpec>) -> Result<Self> {
        let first = specs.first().ok_or_else(|| Error::spec("grouped model needs at least one level"))?;
        let schema = first.schema().clone();
        let col = schema
            .index_of(var)
            .ok_or_else(|| Error::UnknownCovariate(var.to_string()))?;
        let levels = schema.kind(var).and_then(|k| k.level_count()).unwrap_or(0);
        if levels != specs.len() {
            return Err(Error::spec(format!(
                "grouping variable `{var}` has {levels} levels but {} sub-models were given",
                specs.len()
            )));
        }
        for s in &specs {
            if s.schema() != &schema {
                return Err(Error::MismatchedKinds);
            }
            if s.family() != first.family() {
                return Err(Error::spec("all grouped sub-models must share a family"));
            }
        }
        Ok(OutcomeModel::Grouped { var: var.to_string(), col, specs })
    }

    pub fn family(&self) -> FamilyKind {
        match self {
            OutcomeModel::Single(s) => s.family(),
            OutcomeModel::Grouped { specs, .. } => specs[0].family(),
        }
    }

    pub fn specs(&self) -> &[OutcomeSpec] {
        match self {
            OutcomeModel::Single(s) => std::slice::from_ref(s),
            OutcomeModel::Grouped { specs, .. } => specs,
        }
    }

    pub fn spec_at(&self, x: &[f64]) -> &OutcomeSpec {
        match self {
            OutcomeModel::Single(s) => s,
            OutcomeModel::Grouped { col, specs, .. } => &specs[x[*col] as usize],
        }
    }

    pub fn law_at(&self, x: &[f64]) -> Result<Law> {
        self.spec_at(x).law_at(x)
    }

    pub fn log_density(&self, y: f64, x: &[f64]) -> Result<f64> {
        self.spec_at(x).log_density(y, x)
    }

    pub fn tilt(&self, beta: f64) -> OutcomeModel {
        match self {
            OutcomeModel::Single(s) => OutcomeModel::Single(s.tilt(beta)),
            OutcomeModel::Grouped { var, col, specs } => OutcomeModel::Grouped {
                var: var.clone(),
                col: *col,
                specs: specs.iter().map(|s| s.tilt(beta)).collect(),
            },
        }
    }

    pub fn n_free_params(&self) -> usize {
        self.specs().iter().map(|s| s.n_free_params()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.specs().iter().flat_map(|s| s.params()).collect()
    }

    pub fn with_params(&self, p: &[f64]) -> Result<OutcomeModel> {
        if p.len() != self.n_free_params() {
            return Err(Error::spec("parameter length mismatch"));
        }
        let mut off = 0;
        let mut out = Vec::with_capacity(self.specs().len());
        for s in self.specs() {
            let m = s.n_free_params();
            out.push(s.with_params(&p[off..off + m])?);
            off += m;
        }
        Ok(match self {
            OutcomeModel::Single(_) => OutcomeModel::Single(out.pop().expect("one spec")),
            OutcomeModel::Grouped { var, col, .. } => OutcomeModel::Grouped { var: var.clone(), col: *col, specs: out },
        })
    }
}
