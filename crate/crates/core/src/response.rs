//! Logistic response mechanism `logit P(delta = 1 | x, y) = h(x; alpha) + beta * y`.

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::numeric::expit;

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseSpec {
    h: BasisSet,
    alpha: Vec<f64>,
    beta: f64,
}

impl ResponseSpec {
    pub fn new(h: BasisSet, alpha: Vec<f64>, beta: f64) -> Result<Self> {
        if alpha.len() != h.len() {
            return Err(Error::spec(format!(
                "{} response coefficients for {} basis terms",
                alpha.len(),
                h.len()
            )));
        }
        Ok(ResponseSpec { h, alpha, beta })
    }

    pub fn h(&self) -> &BasisSet {
        &self.h
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Length of `phi = (alpha, beta)`.
    pub fn dim(&self) -> usize {
        self.alpha.len() + 1
    }

    pub fn phi(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.push(self.beta);
        v
    }

    pub fn with_phi(&self, phi: &[f64]) -> ResponseSpec {
        assert_eq!(phi.len(), self.dim(), "phi length");
        let (a, b) = phi.split_at(self.alpha.len());
        ResponseSpec { h: self.h.clone(), alpha: a.to_vec(), beta: b[0] }
    }

    pub fn h_value(&self, x: &[f64]) -> f64 {
        self.h.linear(x, &self.alpha)
    }

    pub fn linear_predictor(&self, x: &[f64], y: f64) -> f64 {
        self.h_value(x) + self.beta * y
    }

    pub fn propensity(&self, x: &[f64], y: f64) -> f64 {
        expit(self.linear_predictor(x, y))
    }

    /// `P(delta = 0 | x, y) / P(delta = 1 | x, y) = exp(-h - beta * y)`.
    pub fn odds(&self, x: &[f64], y: f64) -> f64 {
        self.log_odds(x, y).exp()
    }

    pub fn log_odds(&self, x: &[f64], y: f64) -> f64 {
        -self.linear_predictor(x, y)
    }

    /// Design vector `(b_1(x), ..., b_L(x), y)`.
    pub fn design(&self, x: &[f64], y: f64) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        self.design_into(x, y, &mut d);
        d
    }

    pub fn design_into(&self, x: &[f64], y: f64, out: &mut [f64]) {
        let l = self.alpha.len();
        self.h.eval_into(x, &mut out[..l]);
        out[l] = y;
    }

    /// Bernoulli score `(delta - pi) * design`.
    pub fn score_vector(&self, x: &[f64], y: f64, delta: bool) -> Vec<f64> {
        let r = f64::from(u8::from(delta)) - self.propensity(x, y);
        let mut d = self.design(x, y);
        for v in &mut d {
            *v *= r;
        }
        d
    }
}
