//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! path = "survey.csv"
//! y = "y"
//! standardize = ["age"]
//! covariates = [
//!   { name = "age", kind = "continuous" },
//!   { name = "z", kind = "categorical", levels = ["a", "b"] },
//! ]
//!
//! [response]
//! h = "1 + age"
//!
//! [outcome]
//! family = "bernoulli"
//! group = "z"
//! formulas = ["1 + age + age^2"]
//!
//! [estimator]
//! engine = "donor"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, CovariateKind, Schema};
use crate::data::ColumnSpec;
use crate::error::{Error, Result};
use crate::expfam::{Component, FamilyKind, OutcomeModel, OutcomeSpec};
use crate::fiem::{EmControls, Engine};
use crate::respondent::{Candidate, FitControls};
use crate::response::ResponseSpec;
use crate::sim::Scenario;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub response: ResponseConfig,
    pub outcome: OutcomeConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindName {
    #[default]
    Continuous,
    Binary,
    Categorical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateConfig {
    pub name: String,
    #[serde(default)]
    pub kind: KindName,
    #[serde(default)]
    pub levels: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_y")]
    pub y: String,
    #[serde(default)]
    pub delta: Option<String>,
    pub covariates: Vec<CovariateConfig>,
    #[serde(default)]
    pub standardize: Vec<String>,
}

fn default_y() -> String {
    "y".into()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseConfig {
    pub h: String,
    /// Starting (or declared) coefficients of `h`.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub formula: String,
    /// Declared values; every coefficient defaults to 1 when omitted.
    #[serde(default)]
    pub coefficients: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default = "one")]
    pub dispersion: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    #[serde(default)]
    pub formulas: Vec<String>,
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub components: Vec<ComponentConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeConfig {
    pub family: FamilyKind,
    /// Categorical covariate with one outcome model per level.
    #[serde(default)]
    pub group: Option<String>,
    /// Candidate mean formulas compared by AIC.
    #[serde(default)]
    pub formulas: Vec<String>,
    /// Mixture sizes tried for every formula (normal family only above 1).
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
    /// Search sub-bases of each formula.
    #[serde(default)]
    pub stepwise: bool,
    /// Per-level overrides, keyed by level name.
    #[serde(default)]
    pub levels: BTreeMap<String, LevelConfig>,
    /// Declared model for `identify`.
    #[serde(default)]
    pub components: Vec<ComponentConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// `donor` or `parametric:M`.
    pub engine: String,
    pub donor_cap: Option<usize>,
    pub accelerate: bool,
    pub force: bool,
    pub sign_beta_known: bool,
    pub restarts: usize,
    pub level: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let em = EmControls::default();
        EstimatorConfig {
            tol: em.tol,
            max_iter: em.max_iter,
            engine: "donor".into(),
            donor_cap: None,
            accelerate: em.accelerate,
            force: false,
            sign_beta_known: false,
            restarts: FitControls::default().restarts,
            level: 0.95,
        }
    }
}

pub fn parse_engine(s: &str) -> Result<Engine> {
    let s = s.trim();
    if s == "donor" {
        return Ok(Engine::Donor);
    }
    if let Some(m) = s.strip_prefix("parametric") {
        let m = match m.strip_prefix(':') {
            None if m.is_empty() => 500,
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad draw count in engine `{s}`")))?,
            None => return Err(Error::Config(format!("unknown engine `{s}`"))),
        };
        if m == 0 {
            return Err(Error::Config("parametric engine needs at least one draw".into()));
        }
        return Ok(Engine::Parametric { m });
    }
    Err(Error::Config(format!("unknown engine `{s}` (expected donor or parametric:M)")))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn column_spec(&self) -> Result<ColumnSpec> {
        let covariates = self
            .data
            .covariates
            .iter()
            .map(|c| {
                let kind = match c.kind {
                    KindName::Continuous => CovariateKind::Continuous,
                    KindName::Binary => CovariateKind::Binary,
                    KindName::Categorical if c.levels.len() >= 2 => CovariateKind::Categorical(c.levels.clone()),
                    KindName::Categorical => {
                        return Err(Error::Config(format!("categorical covariate `{}` needs at least two levels", c.name)))
                    }
                };
                Ok((c.name.clone(), kind))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnSpec { covariates, y: self.data.y.clone(), delta: self.data.delta.clone() })
    }

    pub fn schema(&self) -> Result<Arc<Schema>> {
        Ok(Arc::new(self.column_spec()?.schema()))
    }

    fn basis(&self, f: &str, schema: &Arc<Schema>) -> Result<BasisSet> {
        BasisSet::parse(f, schema.clone())
    }

    pub fn response_template(&self, schema: &Arc<Schema>) -> Result<ResponseSpec> {
        let h = self.basis(&self.response.h, schema)?;
        let alpha = self.response.alpha.clone().unwrap_or_else(|| vec![0.0; h.len()]);
        ResponseSpec::new(h, alpha, self.response.beta.unwrap_or(0.0))
    }

    /// The response model when `alpha` is given; used as the EM start.
    pub fn response_init(&self, schema: &Arc<Schema>) -> Result<Option<ResponseSpec>> {
        match self.response.alpha {
            Some(_) => Ok(Some(self.response_template(schema)?)),
            None => Ok(None),
        }
    }

    fn group_levels(&self, schema: &Schema) -> Result<Option<(String, Vec<String>)>> {
        let Some(var) = &self.outcome.group else { return Ok(None) };
        let kind = schema.kind(var).ok_or_else(|| Error::UnknownCovariate(var.clone()))?;
        let levels = kind
            .levels()
            .ok_or_else(|| Error::Config(format!("group covariate `{var}` must be discrete")))?;
        if let Some(bad) = self.outcome.levels.keys().find(|l| !levels.contains(l)) {
            return Err(Error::Config(format!("`{bad}` is not a level of `{var}`")));
        }
        Ok(Some((var.clone(), levels)))
    }

    fn candidates_from(&self, formulas: &[String], k_grid: &[usize], schema: &Arc<Schema>) -> Result<Vec<Candidate>> {
        let family = self.outcome.family;
        if formulas.is_empty() {
            return Err(Error::Config("no outcome formulas given".into()));
        }
        let mut out = Vec::new();
        for f in formulas {
            let basis = self.basis(f, schema)?;
            for &k in k_grid {
                match k {
                    0 => return Err(Error::Config("mixture size must be at least 1".into())),
                    1 if self.outcome.stepwise => out.push(Candidate::Stepwise { family, full: basis.clone() }),
                    1 => out.push(Candidate::Glm { family, basis: basis.clone() }),
                    _ if family != FamilyKind::Normal => {
                        return Err(Error::Config("mixtures are fitted for the normal family only".into()))
                    }
                    _ => out.push(Candidate::Mixture { bases: vec![basis.clone(); k] }),
                }
            }
        }
        Ok(out)
    }

    /// Candidate respondent models, one list per group level (a single list
    /// when the outcome is not grouped).
    pub fn candidates(&self, schema: &Arc<Schema>) -> Result<Vec<Vec<Candidate>>> {
        let k_default = self.outcome.k_grid.clone().unwrap_or_else(|| vec![1]);
        match self.group_levels(schema)? {
            None => Ok(vec![self.candidates_from(&self.outcome.formulas, &k_default, schema)?]),
            Some((_, levels)) => levels
                .iter()
                .map(|l| {
                    let lc = self.outcome.levels.get(l);
                    let formulas = lc.filter(|c| !c.formulas.is_empty()).map_or(&self.outcome.formulas, |c| &c.formulas);
                    let k = lc.and_then(|c| c.k_grid.clone()).unwrap_or_else(|| k_default.clone());
                    self.candidates_from(formulas, &k, schema)
                })
                .collect(),
        }
    }

    fn spec_from(&self, comps: &[ComponentConfig], schema: &Arc<Schema>) -> Result<OutcomeSpec> {
        if comps.is_empty() {
            return Err(Error::Config("no declared outcome components".into()));
        }
        let comps = comps
            .iter()
            .map(|c| {
                let basis = self.basis(&c.formula, schema)?;
                let coef = c.coefficients.clone().unwrap_or_else(|| vec![1.0; basis.len()]);
                if coef.len() != basis.len() {
                    return Err(Error::Config(format!(
                        "formula `{}` has {} terms but {} coefficients",
                        c.formula,
                        basis.len(),
                        coef.len()
                    )));
                }
                Ok(Component::new(c.weight, basis, coef, c.dispersion))
            })
            .collect::<Result<Vec<_>>>()?;
        OutcomeSpec::new(self.outcome.family, comps)
    }

    /// The declared outcome model used by `identify`.
    pub fn declared_model(&self, schema: &Arc<Schema>) -> Result<OutcomeModel> {
        match self.group_levels(schema)? {
            None => Ok(OutcomeModel::Single(self.spec_from(&self.outcome.components, schema)?)),
            Some((var, levels)) => {
                let specs = levels
                    .iter()
                    .map(|l| {
                        let comps = self
                            .outcome
                            .levels
                            .get(l)
                            .filter(|c| !c.components.is_empty())
                            .map_or(&self.outcome.components, |c| &c.components);
                        self.spec_from(comps, schema)
                    })
                    .collect::<Result<Vec<_>>>()?;
                OutcomeModel::grouped(&var, specs)
            }
        }
    }

    pub fn em_controls(&self) -> Result<EmControls> {
        let e = &self.estimator;
        if !(e.tol > 0.0) || e.max_iter == 0 {
            return Err(Error::Config("tolerance and iteration cap must be positive".into()));
        }
        Ok(EmControls {
            tol: e.tol,
            max_iter: e.max_iter,
            engine: parse_engine(&e.engine)?,
            accelerate: e.accelerate,
            donor_cap: e.donor_cap,
            seed: self.seed,
            force: e.force,
            sign_beta_known: e.sign_beta_known,
            ..EmControls::default()
        })
    }

    /// A simulation scenario with a single standard-normal covariate. The
    /// declared components and response coefficients are the truth; the
    /// first outcome formula is the fitted respondent model.
    pub fn scenario(&self, name: &str) -> Result<Scenario> {
        let schema = self.schema()?;
        if schema.len() != 1 || !schema.iter().all(|(_, k)| k.is_continuous()) {
            return Err(Error::Config("a simulation scenario needs exactly one continuous covariate".into()));
        }
        if self.outcome.group.is_some() {
            return Err(Error::Config("grouped outcome models cannot be simulated".into()));
        }
        if self.response.alpha.is_none() || self.response.beta.is_none() {
            return Err(Error::Config("a simulation scenario needs response.alpha and response.beta".into()));
        }
        let OutcomeModel::Single(outcome) = self.declared_model(&schema)? else { unreachable!("ungrouped") };
        let candidate = self.candidates(&schema)?.remove(0).remove(0);
        Ok(Scenario { name: name.to_string(), response: self.response_template(&schema)?, schema, outcome, candidate })
    }

    pub fn fit_controls(&self) -> FitControls {
        FitControls { restarts: self.estimator.restarts, seed: self.seed, ..FitControls::default() }
    }
}
