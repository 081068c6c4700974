//! Monomial basis functions with optional categorical gates.
//!
//! A [`BasisSet`] is the structural description shared by the response
//! predictor `h(x; alpha)` and every outcome mean `mu_k(x; kappa_k)`. Terms are
//! products of integer powers of covariates, optionally switched on only for
//! one level of a categorical covariate (`[z=2]x^2`).
//!
//! Formulas use a small grammar:
//!
//! ```text
//! expr    := item ("+" item)*
//! item    := gate? (product | "(" expr ")")
//! product := factor ("*" factor)*
//! factor  := "1" | name | name "^" int
//! gate    := "[" name "=" level "]"
//! ```
//!
//! Covariate values are passed as `&[f64]` aligned with the [`Schema`]
//! column order (sorted by name). Categorical covariates carry the level
//! index, binary covariates carry 0 or 1.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Binary,
    Categorical(Vec<String>),
}

impl CovariateKind {
    pub fn is_continuous(&self) -> bool {
        matches!(self, CovariateKind::Continuous)
    }

    /// Level names for discrete kinds; `None` for continuous covariates.
    pub fn levels(&self) -> Option<Vec<String>> {
        match self {
            CovariateKind::Continuous => None,
            CovariateKind::Binary => Some(vec!["0".into(), "1".into()]),
            CovariateKind::Categorical(levels) => Some(levels.clone()),
        }
    }

    pub fn level_count(&self) -> Option<usize> {
        match self {
            CovariateKind::Continuous => None,
            CovariateKind::Binary => Some(2),
            CovariateKind::Categorical(levels) => Some(levels.len()),
        }
    }
}

/// Named covariates in canonical (sorted) order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    columns: BTreeMap<String, CovariateKind>,
}

impl Schema {
    pub fn new<I, S>(columns: I) -> Self
    where
        I: IntoIterator<Item = (S, CovariateKind)>,
        S: Into<String>,
    {
        Schema {
            columns: columns.into_iter().map(|(n, k)| (n.into(), k)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CovariateKind)> {
        self.columns.iter().map(|(n, k)| (n.as_str(), k))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.keys().position(|n| n == name)
    }

    pub fn kind(&self, name: &str) -> Option<&CovariateKind> {
        self.columns.get(name)
    }

    pub fn level_index(&self, name: &str, level: &str) -> Option<usize> {
        self.kind(name)?.levels()?.iter().position(|l| l == level)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Gate {
    pub var: String,
    pub level: String,
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}={}]", self.var, self.level)
    }
}

/// One monomial `prod x_i^{s_i}`, optionally gated on `z = d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct BasisTerm {
    exponents: BTreeMap<String, u32>,
    gate: Option<Gate>,
}

impl BasisTerm {
    pub fn constant() -> Self {
        BasisTerm::default()
    }

    pub fn new<I, S>(exponents: I, gate: Option<Gate>) -> Self
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (name, power) in exponents {
            if power > 0 {
                *map.entry(name.into()).or_insert(0) += power;
            }
        }
        BasisTerm { exponents: map, gate }
    }

    pub fn monomial(name: &str, power: u32) -> Self {
        BasisTerm::new([(name, power)], None)
    }

    pub fn exponents(&self) -> &BTreeMap<String, u32> {
        &self.exponents
    }

    pub fn gate(&self) -> Option<&Gate> {
        self.gate.as_ref()
    }

    pub fn degree(&self) -> u32 {
        self.exponents.values().sum()
    }

    /// Constant term "1" (no exponents). Gated constants are not constant.
    pub fn is_constant(&self) -> bool {
        self.exponents.is_empty() && self.gate.is_none()
    }

    /// The same monomial with the gate removed.
    pub fn ungated(&self) -> BasisTerm {
        BasisTerm {
            exponents: self.exponents.clone(),
            gate: None,
        }
    }

    pub fn with_gate(&self, gate: Option<Gate>) -> BasisTerm {
        BasisTerm {
            exponents: self.exponents.clone(),
            gate,
        }
    }

    pub fn covariates(&self) -> impl Iterator<Item = &str> {
        self.exponents.keys().map(String::as_str)
    }

    fn sort_key(&self) -> (Option<&Gate>, Vec<&str>, u32, Vec<(&str, u32)>) {
        (
            self.gate.as_ref(),
            self.exponents.keys().map(String::as_str).collect(),
            self.degree(),
            self.exponents.iter().map(|(n, p)| (n.as_str(), *p)).collect(),
        )
    }
}

impl Ord for BasisTerm {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for BasisTerm {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(g) = &self.gate {
            write!(f, "{g}")?;
        }
        if self.exponents.is_empty() {
            return f.write_str("1");
        }
        let mut first = true;
        for (name, power) in &self.exponents {
            if !first {
                f.write_str("*")?;
            }
            first = false;
            if *power == 1 {
                write!(f, "{name}")?;
            } else {
                write!(f, "{name}^{power}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct CompiledTerm {
    factors: Vec<(usize, i32)>,
    gate: Option<(usize, f64)>,
}

impl CompiledTerm {
    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        if let Some((col, level)) = self.gate {
            if x[col] != level {
                return 0.0;
            }
        }
        self.factors
            .iter()
            .fold(1.0, |acc, &(col, p)| acc * x[col].powi(p))
    }
}

/// Canonically ordered, duplicate-free set of basis terms over a schema.
#[derive(Clone, Debug)]
pub struct BasisSet {
    terms: Vec<BasisTerm>,
    schema: Arc<Schema>,
    compiled: Vec<CompiledTerm>,
}

impl PartialEq for BasisSet {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms && *self.schema == *other.schema
    }
}

impl BasisSet {
    pub fn from_terms(terms: impl IntoIterator<Item = BasisTerm>, schema: Arc<Schema>) -> Result<Self> {
        let mut set: BTreeSet<BasisTerm> = BTreeSet::new();
        for term in terms {
            validate_term(&term, &schema)?;
            set.insert(term);
        }
        let terms: Vec<BasisTerm> = set.into_iter().collect();
        let compiled = terms.iter().map(|t| compile(t, &schema)).collect();
        Ok(BasisSet {
            terms,
            schema,
            compiled,
        })
    }

    pub fn empty(schema: Arc<Schema>) -> Self {
        BasisSet {
            terms: Vec::new(),
            schema,
            compiled: Vec::new(),
        }
    }

    pub fn parse(formula: &str, schema: Arc<Schema>) -> Result<Self> {
        let terms = Parser::new(formula).parse()?;
        BasisSet::from_terms(terms, schema)
    }

    pub fn render(&self) -> String {
        self.terms
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" + ")
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn contains(&self, term: &BasisTerm) -> bool {
        self.terms.binary_search(term).is_ok()
    }

    pub fn has_constant(&self) -> bool {
        self.terms.first().is_some_and(BasisTerm::is_constant)
    }

    /// Evaluate every term at `x`, writing into `out` (length `self.len()`).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.compiled) {
            *o = t.eval(x);
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    /// Linear combination `sum_l b_l(x) coef_l`.
    pub fn linear(&self, x: &[f64], coef: &[f64]) -> f64 {
        self.compiled
            .iter()
            .zip(coef)
            .map(|(t, c)| t.eval(x) * c)
            .sum()
    }

    pub fn covariates(&self) -> BTreeSet<&str> {
        self.terms.iter().flat_map(BasisTerm::covariates).collect()
    }

    pub fn gate_vars(&self) -> BTreeSet<&str> {
        self.terms
            .iter()
            .filter_map(|t| t.gate().map(|g| g.var.as_str()))
            .collect()
    }

    /// Terms that are active on gate level `level` of `var`, with the gate
    /// stripped: ungated terms plus terms gated on exactly that level.
    pub fn restrict_to_level(&self, var: &str, level: &str) -> BasisSet {
        let terms = self.terms.iter().filter_map(|t| match t.gate() {
            None => Some(t.clone()),
            Some(g) if g.var == var && g.level == level => Some(t.ungated()),
            Some(_) => None,
        });
        BasisSet::from_terms(terms, self.schema.clone()).expect("restriction of a valid set is valid")
    }

    /// Union of two sets over the same schema.
    pub fn union(&self, other: &BasisSet) -> Result<BasisSet> {
        if *self.schema != *other.schema {
            return Err(Error::MismatchedKinds);
        }
        BasisSet::from_terms(
            self.terms.iter().chain(&other.terms).cloned(),
            self.schema.clone(),
        )
    }

    /// Subset keeping the terms at the given positions.
    pub fn select(&self, keep: &[usize]) -> BasisSet {
        BasisSet::from_terms(
            keep.iter().map(|&i| self.terms[i].clone()),
            self.schema.clone(),
        )
        .expect("subset of a valid set is valid")
    }
}

impl fmt::Display for BasisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Outcome terms that are neither in the response basis nor the constant:
/// the class of "extra" mean terms that carry information about `beta`.
pub fn set_difference_m(outcome: &BasisSet, h: &BasisSet) -> Result<BasisSet> {
    if *outcome.schema != *h.schema {
        return Err(Error::MismatchedKinds);
    }
    let terms = outcome
        .terms
        .iter()
        .filter(|t| !t.is_constant() && !h.contains(t))
        .cloned();
    BasisSet::from_terms(terms, outcome.schema.clone())
}

fn validate_term(term: &BasisTerm, schema: &Schema) -> Result<()> {
    for name in term.covariates() {
        match schema.kind(name) {
            None => return Err(Error::UnknownCovariate(name.to_string())),
            Some(CovariateKind::Categorical(_)) => {
                return Err(Error::spec(format!(
                    "categorical covariate `{name}` can only appear in a gate"
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(g) = term.gate() {
        match schema.kind(&g.var) {
            None => return Err(Error::UnknownCovariate(g.var.clone())),
            Some(CovariateKind::Continuous) => {
                return Err(Error::spec(format!("cannot gate on continuous covariate `{}`", g.var)))
            }
            Some(_) => {
                if schema.level_index(&g.var, &g.level).is_none() {
                    return Err(Error::spec(format!(
                        "`{}` has no level `{}`",
                        g.var, g.level
                    )));
                }
            }
        }
    }
    Ok(())
}

fn compile(term: &BasisTerm, schema: &Schema) -> CompiledTerm {
    let factors = term
        .exponents
        .iter()
        .map(|(n, p)| (schema.index_of(n).expect("validated"), *p as i32))
        .collect();
    let gate = term.gate().map(|g| {
        (
            schema.index_of(&g.var).expect("validated"),
            schema.level_index(&g.var, &g.level).expect("validated") as f64,
        )
    });
    CompiledTerm { factors, gate }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Formula {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if f(c) {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        &self.src[start..self.pos]
    }

    fn parse(mut self) -> Result<Vec<BasisTerm>> {
        self.skip_ws();
        if self.pos == self.src.len() {
            return Ok(Vec::new());
        }
        let terms = self.expr(None)?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.err("unexpected trailing input");
        }
        Ok(terms)
    }

    fn expr(&mut self, gate: Option<&Gate>) -> Result<Vec<BasisTerm>> {
        let mut terms = self.item(gate)?;
        while self.eat('+') {
            terms.extend(self.item(gate)?);
        }
        Ok(terms)
    }

    fn item(&mut self, outer: Option<&Gate>) -> Result<Vec<BasisTerm>> {
        self.skip_ws();
        let gate = if self.peek() == Some('[') {
            let g = self.gate()?;
            if let Some(o) = outer {
                if *o != g {
                    return self.err("conflicting nested gates");
                }
            }
            Some(g)
        } else {
            outer.cloned()
        };
        if self.eat('(') {
            let inner = self.expr(gate.as_ref())?;
            if !self.eat(')') {
                return self.err("expected `)`");
            }
            Ok(inner)
        } else {
            let mut term = self.product()?;
            term.gate = gate;
            Ok(vec![term])
        }
    }

    fn gate(&mut self) -> Result<Gate> {
        self.pos += 1; // '['
        self.skip_ws();
        let var = self.ident();
        if var.is_empty() {
            return self.err("malformed gate: expected covariate name");
        }
        if !self.eat('=') {
            return self.err("malformed gate: expected `=`");
        }
        self.skip_ws();
        let level = self.take_while(|c| c.is_alphanumeric() || matches!(c, '_' | '.' | '-'));
        if level.is_empty() {
            return self.err("malformed gate: expected level");
        }
        let level = level.to_string();
        if !self.eat(']') {
            return self.err("malformed gate: expected `]`");
        }
        Ok(Gate {
            var: var.to_string(),
            level,
        })
    }

    fn ident(&mut self) -> &'a str {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_alphabetic() || c == '_' => {}
            _ => return &self.src[start..start],
        }
        self.take_while(|c| c.is_alphanumeric() || c == '_' || c == '.')
    }

    fn product(&mut self) -> Result<BasisTerm> {
        let mut exps: Vec<(String, u32)> = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(c) if c.is_ascii_digit() => {
                    let num = self.take_while(|c| c.is_ascii_digit() || c == '.');
                    if num != "1" {
                        return self.err(format!("only the constant `1` is allowed, found `{num}`"));
                    }
                }
                Some(c) if c.is_alphabetic() || c == '_' => {
                    let name = self.ident().to_string();
                    let power = if self.eat('^') {
                        self.skip_ws();
                        if self.peek() == Some('-') {
                            return self.err("negative exponent");
                        }
                        let digits = self.take_while(|c| c.is_ascii_digit());
                        if digits.is_empty() {
                            return self.err("expected integer exponent");
                        }
                        if self.peek() == Some('.') {
                            return self.err("non-integer exponent");
                        }
                        match digits.parse::<u32>() {
                            Ok(p) => p,
                            Err(_) => return self.err("exponent out of range"),
                        }
                    } else {
                        1
                    };
                    exps.push((name, power));
                }
                _ => return self.err("expected a term"),
            }
            if !self.eat('*') {
                break;
            }
        }
        Ok(BasisTerm::new(exps, None))
    }
}
