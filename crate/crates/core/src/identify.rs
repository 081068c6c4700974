//! Symbolic identifiability checks for the logistic response model combined
//! with an exponential-family (or normal-mixture) respondent model.
//!
//! The rules are sufficient conditions, so the verdict is three-valued: a
//! failed condition normally yields [`Status::NotProvable`], and
//! [`Status::ProvablyUnidentifiable`] is reserved for the explicit
//! counterexample patterns (symmetric extra terms and two-component linear
//! mixtures whose tilted weights can be swapped).
//!
//! Two evaluation modes exist. In [`ValueMode::Structural`] only the basis
//! sets are inspected, which is what a pre-fit check can rely on; conditions
//! that depend on parameter values are reported as notes. In
//! [`ValueMode::Declared`] coefficients, weights and variances are taken at
//! face value with tolerance `1e-9`.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::basis::{set_difference_m, BasisSet, BasisTerm, CovariateKind, Schema};
use crate::error::{Error, Result};
use crate::expfam::{FamilyKind, OutcomeModel, OutcomeSpec};

const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Status {
    ProvablyIdentifiable,
    NotProvable,
    ProvablyUnidentifiable,
}

impl Status {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(self) -> i32 {
        match self {
            Status::ProvablyIdentifiable => 0,
            Status::NotProvable => 2,
            Status::ProvablyUnidentifiable => 3,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::ProvablyIdentifiable => "provably identifiable",
            Status::NotProvable => "not provable",
            Status::ProvablyUnidentifiable => "provably unidentifiable",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Rule {
    /// Normal outcome whose mean has a continuous term outside the response basis.
    NormalExtraTerm,
    /// Non-normal family with a continuous covariate in the linear predictor.
    NonlinearCumulant,
    /// All covariates discrete: attainable cells against unknowns.
    DiscreteCount,
    /// Normal mixture with a nonempty extra-term class plus a sign or
    /// asymmetry condition.
    MixtureExtraTerm,
    /// Simple-linear mixture with three or more components.
    LinearMixturePermutation,
    /// Simple-linear mixture with two components.
    TwoComponentLinear,
    /// Two components with opposite extra terms and swappable tilted weights.
    SymmetricPairCounterexample,
    /// Two simple-linear components with swappable tilted weights.
    LinearPairCounterexample,
    /// The mean has no term outside the response basis.
    NoExtraTerm,
    /// Continuous covariates required but some are discrete.
    ContinuityRequired,
    /// No sufficient condition applies.
    NoRuleApplies,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::NormalExtraTerm => "normal-extra-term",
            Rule::NonlinearCumulant => "nonlinear-cumulant",
            Rule::DiscreteCount => "discrete-count",
            Rule::MixtureExtraTerm => "mixture-extra-term",
            Rule::LinearMixturePermutation => "linear-mixture-permutation",
            Rule::TwoComponentLinear => "two-component-linear",
            Rule::SymmetricPairCounterexample => "symmetric-pair-counterexample",
            Rule::LinearPairCounterexample => "linear-pair-counterexample",
            Rule::NoExtraTerm => "no-extra-term",
            Rule::ContinuityRequired => "continuity-required",
            Rule::NoRuleApplies => "no-rule-applies",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentifyVerdict {
    pub status: Status,
    pub rule: Rule,
    pub certificate: String,
    pub notes: Vec<String>,
    /// Per-level verdicts when the model is gated on a categorical covariate.
    pub levels: Vec<(String, IdentifyVerdict)>,
}

impl IdentifyVerdict {
    fn new(status: Status, rule: Rule, certificate: impl Into<String>) -> Self {
        IdentifyVerdict {
            status,
            rule,
            certificate: certificate.into(),
            notes: Vec::new(),
            levels: Vec::new(),
        }
    }

    fn note(mut self, n: impl Into<String>) -> Self {
        self.notes.push(n.into());
        self
    }

    pub fn is_identifiable(&self) -> bool {
        self.status == Status::ProvablyIdentifiable
    }
}

impl fmt::Display for IdentifyVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.status, self.rule, self.certificate)?;
        for n in &self.notes {
            write!(f, "\n  note: {n}")?;
        }
        for (lvl, v) in &self.levels {
            write!(f, "\n  level {lvl}: {} [{}]: {}", v.status, v.rule, v.certificate)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValueMode {
    /// Inspect basis sets only.
    #[default]
    Structural,
    /// Use declared coefficient, weight and variance values.
    Declared,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentifyOptions {
    pub sign_beta_known: bool,
    pub values: ValueMode,
    /// Declared response coefficient on `y`, used by the counterexample
    /// relations.
    pub beta: Option<f64>,
}

/// One component as seen by the checker.
#[derive(Clone, Debug)]
struct CompView {
    basis: BasisSet,
    coef: Vec<f64>,
    weight: f64,
    dispersion: f64,
}

impl CompView {
    /// Terms with nonzero coefficients (all terms in structural mode).
    fn effective(&self, mode: ValueMode) -> BasisSet {
        match mode {
            ValueMode::Structural => self.basis.clone(),
            ValueMode::Declared => {
                let keep: Vec<usize> = (0..self.coef.len()).filter(|&i| self.coef[i].abs() > TOL).collect();
                self.basis.select(&keep)
            }
        }
    }

    fn coef_of(&self, t: &BasisTerm) -> f64 {
        self.basis
            .terms()
            .iter()
            .position(|u| u == t)
            .map_or(0.0, |i| self.coef[i])
    }

    fn restrict(&self, var: &str, level: &str) -> CompView {
        let mut acc: BTreeMap<BasisTerm, f64> = BTreeMap::new();
        for (t, c) in self.basis.terms().iter().zip(&self.coef) {
            let key = match t.gate() {
                None => t.clone(),
                Some(g) if g.var == var && g.level == level => t.ungated(),
                Some(_) => continue,
            };
            *acc.entry(key).or_insert(0.0) += c;
        }
        let basis = BasisSet::from_terms(acc.keys().cloned(), self.basis.schema().clone())
            .expect("restricted terms stay valid");
        let coef = basis.terms().iter().map(|t| acc[t]).collect();
        CompView { basis, coef, weight: self.weight, dispersion: self.dispersion }
    }
}

fn views(spec: &OutcomeSpec) -> Vec<CompView> {
    spec.components()
        .iter()
        .map(|c| CompView {
            basis: c.basis().clone(),
            coef: c.coefficients.clone(),
            weight: c.weight,
            dispersion: c.dispersion,
        })
        .collect()
}

/// Check a single-component respondent model.
pub fn check_single(outcome: &OutcomeSpec, h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    if outcome.k() != 1 {
        return Err(Error::spec("check_single needs a one-component outcome model"));
    }
    check_gated(outcome.family(), &views(outcome), h, opts)
}

/// Check a normal-mixture respondent model; `K = 1` reduces to
/// [`check_single`].
pub fn check_mixture(outcome: &OutcomeSpec, h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    if outcome.family() != FamilyKind::Normal {
        return Err(Error::spec(format!(
            "mixture identifiability is only available for normal components, got {}",
            outcome.family().name()
        )));
    }
    check_gated(outcome.family(), &views(outcome), h, opts)
}

/// Dispatch on the shape of the outcome model.
pub fn check(outcome: &OutcomeSpec, h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    if outcome.k() == 1 {
        check_single(outcome, h, opts)
    } else {
        check_mixture(outcome, h, opts)
    }
}

/// Check a possibly grouped outcome model: with one sub-model per level of a
/// grouping covariate, the model is identifiable when any level is.
pub fn check_model(model: &OutcomeModel, h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    match model {
        OutcomeModel::Single(s) => check(s, h, opts),
        OutcomeModel::Grouped { var, specs, .. } => {
            let levels = h
                .schema()
                .kind(var)
                .and_then(CovariateKind::levels)
                .ok_or_else(|| Error::UnknownCovariate(var.clone()))?;
            let mut per = Vec::with_capacity(specs.len());
            for (spec, lvl) in specs.iter().zip(&levels) {
                let hl = h.restrict_to_level(var, lvl);
                per.push((format!("{var}={lvl}"), check(spec, &hl, opts)?));
            }
            Ok(combine_levels(per))
        }
    }
}

fn combine_levels(per: Vec<(String, IdentifyVerdict)>) -> IdentifyVerdict {
    let mut out = if let Some((lvl, v)) = per.iter().find(|(_, v)| v.is_identifiable()) {
        IdentifyVerdict::new(Status::ProvablyIdentifiable, v.rule, format!("on level {lvl}: {}", v.certificate))
    } else if !per.is_empty() && per.iter().all(|(_, v)| v.status == Status::ProvablyUnidentifiable) {
        IdentifyVerdict::new(
            Status::ProvablyUnidentifiable,
            per[0].1.rule,
            "every level is unidentifiable",
        )
    } else {
        IdentifyVerdict::new(Status::NotProvable, Rule::NoRuleApplies, "no level satisfies a sufficient condition")
    };
    out.levels = per;
    out
}

fn check_gated(family: FamilyKind, comps: &[CompView], h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    for c in comps {
        if c.basis.schema() != h.schema() {
            return Err(Error::MismatchedKinds);
        }
    }
    let mut gates: Vec<&str> = h.gate_vars().into_iter().collect();
    for c in comps {
        gates.extend(c.basis.gate_vars());
    }
    gates.sort_unstable();
    gates.dedup();
    match gates.as_slice() {
        [] => check_ungated(family, comps, h, opts),
        [var] => {
            let levels = h
                .schema()
                .kind(var)
                .and_then(CovariateKind::levels)
                .ok_or_else(|| Error::UnknownCovariate(var.to_string()))?;
            let mut per = Vec::with_capacity(levels.len());
            for lvl in &levels {
                let hl = h.restrict_to_level(var, lvl);
                let cl: Vec<CompView> = comps.iter().map(|c| c.restrict(var, lvl)).collect();
                per.push((format!("{var}={lvl}"), check_ungated(family, &cl, &hl, opts)?));
            }
            Ok(combine_levels(per))
        }
        _ => Err(Error::spec(format!(
            "gates on more than one variable ({}) are not supported",
            gates.join(", ")
        ))),
    }
}

fn used_covariates<'a>(schema: &'a Schema, sets: &[&BasisSet]) -> Vec<(&'a str, &'a CovariateKind)> {
    schema
        .iter()
        .filter(|(n, _)| sets.iter().any(|s| s.covariates().contains(n)))
        .collect()
}

fn term_is_continuous(t: &BasisTerm, schema: &Schema) -> bool {
    t.covariates()
        .any(|n| schema.kind(n).is_some_and(CovariateKind::is_continuous))
}

fn discrete_count(h: &BasisSet, used: &[(&str, &CovariateKind)]) -> IdentifyVerdict {
    let cells: usize = used.iter().map(|(_, k)| k.level_count().unwrap_or(1)).product();
    let unknowns = h.len() + 1;
    let names: Vec<&str> = used.iter().map(|(n, _)| *n).collect();
    let cert = format!(
        "{unknowns} unknowns (response basis of size {} plus beta) vs {cells} attainable covariate cells over {{{}}}",
        h.len(),
        names.join(", ")
    );
    if cells >= unknowns {
        IdentifyVerdict::new(Status::ProvablyIdentifiable, Rule::DiscreteCount, cert)
    } else {
        IdentifyVerdict::new(Status::NotProvable, Rule::DiscreteCount, cert)
    }
}

fn render_terms(terms: &[BasisTerm]) -> String {
    let s: Vec<String> = terms.iter().map(ToString::to_string).collect();
    format!("{{{}}}", s.join(", "))
}

fn check_ungated(family: FamilyKind, comps: &[CompView], h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    if comps.len() == 1 {
        return check_single_ungated(family, &comps[0], h, opts);
    }
    check_mixture_ungated(comps, h, opts)
}

fn check_single_ungated(family: FamilyKind, comp: &CompView, h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    let schema = h.schema().clone();
    let eff = comp.effective(opts.values);
    let used = used_covariates(&schema, &[&eff, h]);
    let all_discrete = used.iter().all(|(_, k)| !k.is_continuous());

    match family {
        FamilyKind::Normal => {
            let m = set_difference_m(&eff, h)?;
            let cont: Vec<BasisTerm> = m.terms().iter().filter(|t| term_is_continuous(t, &schema)).cloned().collect();
            if !cont.is_empty() {
                return Ok(IdentifyVerdict::new(
                    Status::ProvablyIdentifiable,
                    Rule::NormalExtraTerm,
                    format!("continuous mean terms outside the response basis: {}", render_terms(&cont)),
                ));
            }
            if all_discrete {
                return Ok(discrete_count(h, &used));
            }
            if m.is_empty() {
                return Ok(IdentifyVerdict::new(
                    Status::NotProvable,
                    Rule::NoExtraTerm,
                    "every mean term is represented by the response basis",
                ));
            }
            Ok(IdentifyVerdict::new(
                Status::NotProvable,
                Rule::NoRuleApplies,
                format!("extra mean terms {} involve no continuous covariate", render_terms(m.terms())),
            ))
        }
        FamilyKind::Bernoulli | FamilyKind::Gamma | FamilyKind::Poisson => {
            let cont: Vec<BasisTerm> = eff.terms().iter().filter(|t| term_is_continuous(t, &schema)).cloned().collect();
            if !cont.is_empty() {
                return Ok(IdentifyVerdict::new(
                    Status::ProvablyIdentifiable,
                    Rule::NonlinearCumulant,
                    format!(
                        "{} cumulant is nonlinear and the linear predictor varies with continuous terms {}",
                        family.name(),
                        render_terms(&cont)
                    ),
                ));
            }
            if all_discrete {
                return Ok(discrete_count(h, &used));
            }
            Ok(IdentifyVerdict::new(
                Status::NotProvable,
                Rule::NoRuleApplies,
                "the linear predictor has no continuous term",
            ))
        }
    }
}

/// Extra-term part of each component mean, as coefficient vectors over the
/// union of extra terms.
fn extra_parts(comps: &[CompView], m: &[BasisTerm]) -> Vec<Vec<f64>> {
    comps
        .iter()
        .map(|c| m.iter().map(|t| c.coef_of(t)).collect())
        .collect()
}

fn supports(comps: &[CompView], m: &[BasisTerm]) -> Vec<Vec<bool>> {
    comps
        .iter()
        .map(|c| m.iter().map(|t| c.basis.contains(t)).collect())
        .collect()
}

/// Whether the multiset of vectors equals the multiset of their negations.
fn multiset_symmetric(parts: &[Vec<f64>]) -> bool {
    let neg: Vec<Vec<f64>> = parts.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    let mut used = vec![false; parts.len()];
    'outer: for p in parts {
        for (j, q) in neg.iter().enumerate() {
            if !used[j] && p.iter().zip(q).all(|(a, b)| (a - b).abs() <= TOL) {
                used[j] = true;
                continue 'outer;
            }
        }
        return false;
    }
    true
}

fn check_mixture_ungated(comps: &[CompView], h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    let schema = h.schema().clone();
    let effs: Vec<BasisSet> = comps.iter().map(|c| c.effective(opts.values)).collect();
    let mut sets: Vec<&BasisSet> = effs.iter().collect();
    sets.push(h);
    let used = used_covariates(&schema, &sets);

    if !used.iter().all(|(_, k)| k.is_continuous()) {
        if used.iter().all(|(_, k)| !k.is_continuous()) {
            return Ok(discrete_count(h, &used));
        }
        let disc: Vec<&str> = used.iter().filter(|(_, k)| !k.is_continuous()).map(|(n, _)| *n).collect();
        return Ok(IdentifyVerdict::new(
            Status::NotProvable,
            Rule::ContinuityRequired,
            format!("mixture rules need continuous covariates; discrete: {}", disc.join(", ")),
        ));
    }

    let mut m_terms: Vec<BasisTerm> = Vec::new();
    for e in &effs {
        for t in set_difference_m(e, h)?.terms() {
            if !m_terms.contains(t) {
                m_terms.push(t.clone());
            }
        }
    }
    m_terms.sort();

    if !m_terms.is_empty() {
        let cert_m = format!("extra-term class {} is nonempty", render_terms(&m_terms));
        if opts.sign_beta_known {
            return Ok(IdentifyVerdict::new(
                Status::ProvablyIdentifiable,
                Rule::MixtureExtraTerm,
                format!("{cert_m} and the sign of beta is known"),
            ));
        }
        return Ok(match opts.values {
            ValueMode::Structural => {
                let sup = supports(comps, &m_terms);
                let mut counts: BTreeMap<&Vec<bool>, usize> = BTreeMap::new();
                for s in sup.iter().filter(|s| s.iter().any(|&b| b)) {
                    *counts.entry(s).or_insert(0) += 1;
                }
                if counts.values().any(|&c| c % 2 == 1) {
                    IdentifyVerdict::new(
                        Status::ProvablyIdentifiable,
                        Rule::MixtureExtraTerm,
                        format!("{cert_m}; an extra-term pattern occurs in an odd number of components, so the extra parts cannot be a sign-symmetric multiset"),
                    )
                } else {
                    IdentifyVerdict::new(
                        Status::NotProvable,
                        Rule::MixtureExtraTerm,
                        format!("{cert_m}; asymmetry of the extra parts depends on coefficient values"),
                    )
                    .note("re-evaluate with fitted values")
                }
            }
            ValueMode::Declared => {
                let parts = extra_parts(comps, &m_terms);
                if !multiset_symmetric(&parts) {
                    IdentifyVerdict::new(
                        Status::ProvablyIdentifiable,
                        Rule::MixtureExtraTerm,
                        format!("{cert_m} and the extra parts {} differ from their negation", fmt_parts(&parts)),
                    )
                } else {
                    symmetric_pair(comps, h, &parts, &cert_m, opts)
                }
            }
        });
    }

    linear_branch(comps, h, opts)
}

fn fmt_parts(parts: &[Vec<f64>]) -> String {
    let s: Vec<String> = parts
        .iter()
        .map(|v| format!("({})", v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("{{{}}}", s.join(", "))
}

/// Sign-swap relation for two components: the tilted weights
/// `pi_k exp(beta^2 sigma_k^2 / 2)` coincide.
fn swap_relation(comps: &[CompView], beta: f64) -> (f64, f64) {
    let a = 0.5 * beta * beta * comps[0].dispersion + comps[0].weight.ln();
    let b = 0.5 * beta * beta * comps[1].dispersion + comps[1].weight.ln();
    (a, b)
}

fn symmetric_pair(comps: &[CompView], h: &BasisSet, parts: &[Vec<f64>], cert_m: &str, opts: &IdentifyOptions) -> IdentifyVerdict {
    let not_provable = || {
        IdentifyVerdict::new(
            Status::NotProvable,
            Rule::MixtureExtraTerm,
            format!("{cert_m} but the extra parts {} are symmetric under negation and the sign of beta is unknown", fmt_parts(parts)),
        )
    };
    let pair = comps.len() == 2 && parts[0].iter().any(|v| v.abs() > TOL) && h.has_constant();
    if !pair {
        return not_provable();
    }
    relation_verdict(comps, opts, Rule::SymmetricPairCounterexample, not_provable)
}

fn relation_verdict(
    comps: &[CompView],
    opts: &IdentifyOptions,
    rule: Rule,
    fallback: impl Fn() -> IdentifyVerdict,
) -> IdentifyVerdict {
    let (s1, s2) = (comps[0].dispersion, comps[1].dispersion);
    let (p1, p2) = (comps[0].weight, comps[1].weight);
    match opts.beta {
        Some(beta) if beta != 0.0 => {
            let (a, b) = swap_relation(comps, beta);
            if (a - b).abs() <= TOL {
                IdentifyVerdict::new(
                    Status::ProvablyUnidentifiable,
                    rule,
                    format!(
                        "beta^2 sigma_1^2/2 + log pi_1 = beta^2 sigma_2^2/2 + log pi_2 = {a:.6} at beta = {beta}: responses with beta and -beta give the same observed law"
                    ),
                )
            } else {
                fallback().note(format!(
                    "swap relation fails at beta = {beta}: {a:.6} vs {b:.6}"
                ))
            }
        }
        _ => {
            if (s1 - s2).abs() <= TOL && (p1 - p2).abs() <= TOL {
                IdentifyVerdict::new(
                    Status::ProvablyUnidentifiable,
                    rule,
                    "equal variances and equal weights: beta and -beta give the same observed law for every beta",
                )
            } else if (s1 - s2).abs() > TOL {
                let b2 = 2.0 * (p2.ln() - p1.ln()) / (s1 - s2);
                let v = fallback();
                if b2 > 0.0 {
                    v.note(format!("unidentifiable if |beta| = {:.6}", b2.sqrt()))
                } else {
                    v
                }
            } else {
                fallback()
            }
        }
    }
}

fn is_simple_linear(b: &BasisSet) -> Option<String> {
    let ts = b.terms();
    if ts.len() != 2 || !ts[0].is_constant() || ts[1].degree() != 1 || ts[1].gate().is_some() {
        return None;
    }
    ts[1].covariates().next().map(str::to_string)
}

fn linear_branch(comps: &[CompView], h: &BasisSet, opts: &IdentifyOptions) -> Result<IdentifyVerdict> {
    let no_extra = || {
        IdentifyVerdict::new(
            Status::NotProvable,
            Rule::NoExtraTerm,
            "extra-term class is empty and the simple-linear conditions do not apply",
        )
    };
    let Some(var) = is_simple_linear(h) else { return Ok(no_extra()) };
    let linear = comps
        .iter()
        .all(|c| is_simple_linear(&c.basis).as_deref() == Some(var.as_str()));
    if !linear {
        return Ok(no_extra());
    }
    let slopes: Vec<f64> = comps.iter().map(|c| c.coef[1]).collect();
    let k = comps.len();
    let premise = format!("assumes nonzero slope on {var} in the response model and in every component");

    if opts.values == ValueMode::Structural {
        let rule = if k >= 3 { Rule::LinearMixturePermutation } else { Rule::TwoComponentLinear };
        return Ok(IdentifyVerdict::new(
            Status::NotProvable,
            rule,
            "extra-term class is empty; the simple-linear conditions depend on coefficient values",
        )
        .note("re-evaluate with fitted values")
        .note(premise));
    }

    let distinct = (0..k).all(|i| (0..i).all(|j| (slopes[i] - slopes[j]).abs() > TOL));
    if !distinct {
        return Ok(IdentifyVerdict::new(
            Status::NotProvable,
            if k >= 3 { Rule::LinearMixturePermutation } else { Rule::TwoComponentLinear },
            format!("component slopes {slopes:?} are not distinct"),
        ));
    }

    if k >= 3 {
        if opts.sign_beta_known {
            return Ok(IdentifyVerdict::new(
                Status::ProvablyIdentifiable,
                Rule::LinearMixturePermutation,
                "distinct slopes and the sign of beta is known",
            )
            .note(premise));
        }
        return Ok(match permutation_certificate(&slopes)? {
            None => IdentifyVerdict::new(
                Status::ProvablyIdentifiable,
                Rule::LinearMixturePermutation,
                format!("no permutation P and scalar r satisfy (P + I) slopes = r 1 for slopes {slopes:?}"),
            )
            .note(premise),
            Some(c) => IdentifyVerdict::new(
                Status::NotProvable,
                Rule::LinearMixturePermutation,
                format!("(P + I) slopes = {} 1 with P = {}", c.r, c.render()),
            ),
        });
    }

    // Two components.
    let (s1, s2) = (comps[0].dispersion, comps[1].dispersion);
    let (p1, p2) = (comps[0].weight, comps[1].weight);
    let cond2 = (s1 - s2).abs() > TOL || (p1 - p2).abs() > TOL;
    let cond3 = (s1 - s2).abs() <= TOL || (p2.ln() - p1.ln()) / (s1 - s2) <= 0.0;
    if cond2 && cond3 {
        return Ok(IdentifyVerdict::new(
            Status::ProvablyIdentifiable,
            Rule::TwoComponentLinear,
            format!("distinct slopes {slopes:?}; weights {p1}, {p2} and variances {s1}, {s2} admit no sign swap"),
        )
        .note(premise));
    }
    let failed = if !cond2 { "equal variances with equal weights" } else { "(log pi_2 - log pi_1)/(sigma_1^2 - sigma_2^2) > 0" };
    let fallback = || {
        IdentifyVerdict::new(
            Status::NotProvable,
            Rule::TwoComponentLinear,
            format!("extra-term class is empty and {failed}"),
        )
    };
    let v = relation_verdict(comps, opts, Rule::LinearPairCounterexample, fallback);
    Ok(v.note("extra-term class is empty"))
}

/// A permutation `p` (as `i -> p[i]`) and scalar `r` with
/// `slopes[i] + slopes[p[i]] = r` for every `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationCertificate {
    pub perm: Vec<usize>,
    pub r: f64,
}

impl PermutationCertificate {
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        let k = self.perm.len();
        (0..k)
            .map(|i| (0..k).map(|j| u8::from(self.perm[i] == j)).collect())
            .collect()
    }

    pub fn render(&self) -> String {
        let rows: Vec<String> = self
            .matrix()
            .iter()
            .map(|r| r.iter().map(u8::to_string).collect::<Vec<_>>().join(" "))
            .collect();
        format!("[{}]", rows.join("; "))
    }
}

/// Exhaustive search over all `K!` permutation matrices for
/// `(P + I) slopes = r 1`.
pub fn permutation_certificate(slopes: &[f64]) -> Result<Option<PermutationCertificate>> {
    let k = slopes.len();
    if k < 2 {
        return Err(Error::spec("permutation search needs at least two slopes"));
    }
    let scale = slopes.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 0..k {
        for j in 0..i {
            if (slopes[i] - slopes[j]).abs() <= TOL * scale {
                return Err(Error::spec(format!("slopes {i} and {j} coincide")));
            }
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        let r = slopes[0] + slopes[perm[0]];
        if (1..k).all(|i| (slopes[i] + slopes[perm[i]] - r).abs() <= TOL * scale) {
            return Ok(Some(PermutationCertificate { perm, r }));
        }
        if !next_permutation(&mut perm) {
            return Ok(None);
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else { return false };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::Component;
    use std::sync::Arc;

    fn schema(kind: CovariateKind) -> Arc<Schema> {
        Arc::new(Schema::new([("x", kind)]))
    }

    #[test]
    fn next_permutation_enumerates_all() {
        let mut p = vec![0, 1, 2, 3];
        let mut n = 1;
        while next_permutation(&mut p) {
            n += 1;
        }
        assert_eq!(n, 24);
    }

    #[test]
    fn reversal_certificate() {
        let c = permutation_certificate(&[3.0, 2.0, 1.0]).unwrap().unwrap();
        assert_eq!(c.r, 4.0);
        assert!(permutation_certificate(&[5.0, 2.0, 1.0]).unwrap().is_none());
        let c = permutation_certificate(&[1.0, 2.0]).unwrap().unwrap();
        assert_eq!(c.perm, vec![1, 0]);
        assert_eq!(c.r, 3.0);
        assert!(permutation_certificate(&[1.0]).is_err());
        assert!(permutation_certificate(&[1.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn single_normal_quadratic() {
        let s = schema(CovariateKind::Continuous);
        let mean = BasisSet::parse("1 + x + x^2", s.clone()).unwrap();
        let h = BasisSet::parse("1 + x", s).unwrap();
        let spec = OutcomeSpec::single(FamilyKind::Normal, mean, vec![0.0, 0.4, 1.0], 0.5).unwrap();
        let v = check_single(&spec, &h, &IdentifyOptions::default()).unwrap();
        assert_eq!(v.status, Status::ProvablyIdentifiable);
        assert_eq!(v.rule, Rule::NormalExtraTerm);
        assert!(v.certificate.contains("x^2"));
    }

    #[test]
    fn gated_single_identifiable_on_one_level() {
        let s = Arc::new(Schema::new([
            ("x", CovariateKind::Continuous),
            ("z", CovariateKind::Categorical(vec!["1".into(), "2".into()])),
        ]));
        let mean = BasisSet::parse("[z=1](1 + x) + [z=2](1 + x + x^2)", s.clone()).unwrap();
        let h = BasisSet::parse("[z=1](1 + x) + [z=2](1 + x)", s).unwrap();
        let spec = OutcomeSpec::single(FamilyKind::Normal, mean, vec![1.0; 5], 1.0).unwrap();
        let v = check_single(&spec, &h, &IdentifyOptions::default()).unwrap();
        assert_eq!(v.status, Status::ProvablyIdentifiable);
        assert_eq!(v.levels.len(), 2);
        assert_eq!(v.levels[0].1.status, Status::NotProvable);
    }

    #[test]
    fn poisson_mixture_rejected() {
        let s = schema(CovariateKind::Continuous);
        let b = BasisSet::parse("1 + x", s.clone()).unwrap();
        let spec = OutcomeSpec::single(FamilyKind::Poisson, b.clone(), vec![0.0, 1.0], 1.0).unwrap();
        assert!(check_mixture(&spec, &b, &IdentifyOptions::default()).is_err());
        let two = OutcomeSpec::new(
            FamilyKind::Normal,
            vec![
                Component::new(0.5, b.clone(), vec![0.0, 1.0], 1.0),
                Component::new(0.5, b.clone(), vec![0.0, 2.0], 1.0),
            ],
        )
        .unwrap();
        assert!(check_single(&two, &b, &IdentifyOptions::default()).is_err());
    }
}
