//! Checks on fractional weights, mean scores and the M-step.

use fracimp::data::Dataset;
use fracimp::expfam::OutcomeModel;
use fracimp::fiem::{m_step, mean_score, mean_score_jacobian_fixed, mu_y_from, DonorSetup, EmControls, FractionalWeights};
use fracimp::response::ResponseSpec;
use fracimp::sim::{generate_stream, true_model, Scenario};

pub fn scenario(k: usize) -> Scenario {
    match k {
        0 => Scenario::s1(1.0),
        1 => Scenario::s2(),
        _ => Scenario::s3(),
    }
}

#[derive(Debug)]
pub struct Setup {
    pub data: Dataset,
    pub gamma: OutcomeModel,
    pub phi: ResponseSpec,
}

impl Setup {
    pub fn new(k: usize, n: usize, seed: u64, alpha: [f64; 2], beta: f64) -> Setup {
        let scn = scenario(k);
        let data = generate_stream(&scn, n, seed, 0).unwrap();
        let phi = scn.response.with_phi(&[alpha[0], alpha[1], beta]);
        Setup { data, gamma: true_model(&scn), phi }
    }

    pub fn usable(&self) -> bool {
        self.data.n_respondents() >= 2 && self.data.n_respondents() < self.data.n()
    }

    pub fn weights(&self) -> FractionalWeights {
        DonorSetup::new(&self.gamma, &self.data, None).unwrap().weights(self.phi.beta()).unwrap()
    }
}

/// Deterministic grid of setups over scenarios, seeds and `phi`.
pub fn setup_grid() -> Vec<Setup> {
    let mut out = Vec::new();
    for k in 0..3 {
        for seed in 0..4u64 {
            for (a0, a1, beta) in [(0.7, 0.2, 0.3), (-0.5, 0.6, -0.9), (1.2, -0.4, 0.8)] {
                let s = Setup::new(k, 80 + 20 * seed as usize, seed, [a0, a1], beta);
                if s.usable() {
                    out.push(s);
                }
            }
        }
    }
    out
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn perturbed(phi: &ResponseSpec, k: usize, h: f64) -> (ResponseSpec, ResponseSpec) {
    let p0 = phi.phi();
    let mut up = p0.clone();
    up[k] += h;
    let mut dn = p0;
    dn[k] -= h;
    (phi.with_phi(&up), phi.with_phi(&dn))
}

pub fn check_row_sums(s: &Setup) -> Result<(), String> {
    let w = s.weights();
    for r in 0..w.n_missing() {
        let total: f64 = w.weights(r).iter().sum();
        if (total - 1.0).abs() > 1e-12 || w.weights(r).iter().any(|v| *v < 0.0) {
            return Err(format!("row {r}: sum {total}"));
        }
    }
    Ok(())
}

/// Recomputing the E-step, or renormalizing its rows, changes nothing.
pub fn check_idempotent(s: &Setup) -> Result<(), String> {
    let setup = DonorSetup::new(&s.gamma, &s.data, None).unwrap();
    let a = setup.weights(s.phi.beta()).unwrap();
    let b = setup.weights(s.phi.beta()).unwrap();
    if a != b {
        return Err("repeated E-step differs".into());
    }
    for r in 0..a.n_missing() {
        let row = a.weights(r);
        let total: f64 = row.iter().sum();
        if let Some(v) = row.iter().find(|v| (*v / total - *v).abs() > 1e-15) {
            return Err(format!("row {r}: renormalized {v} moves"));
        }
    }
    Ok(())
}

pub fn check_donor_order(s: &Setup) -> Result<(), String> {
    let a = s.weights();
    let mut rev = s.data.respondents();
    rev.reverse();
    let b = DonorSetup::with_donors(&s.gamma, &s.data, rev).unwrap().weights(s.phi.beta()).unwrap();
    for r in 0..a.n_missing() {
        if (a.imputed_mean(r) - b.imputed_mean(r)).abs() > 1e-12 {
            return Err(format!("row {r}: {} vs {}", a.imputed_mean(r), b.imputed_mean(r)));
        }
    }
    let (ma, mb) = (mu_y_from(&a, &s.data), mu_y_from(&b, &s.data));
    if (ma - mb).abs() > 1e-12 {
        return Err(format!("mu_y {ma} vs {mb}"));
    }
    Ok(())
}

/// Bernoulli log-likelihood of one unit under the response model.
fn unit_loglik(phi: &ResponseSpec, x: &[f64], y: f64, delta: bool) -> f64 {
    let t = phi.h().linear(x, phi.alpha()) + phi.beta() * y;
    let p = 1.0 / (1.0 + (-t).exp());
    if delta {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

pub fn check_response_score(phi: &ResponseSpec, x: &[f64], y: f64, delta: bool) -> Result<(), String> {
    let got = phi.score_vector(x, y, delta);
    for k in 0..phi.dim() {
        let h = 1e-5;
        let (up, dn) = perturbed(phi, k, h);
        let fd = (unit_loglik(&up, x, y, delta) - unit_loglik(&dn, x, y, delta)) / (2.0 * h);
        if (fd - got[k]).abs() > 1e-6 {
            return Err(format!("k {k}: {fd} vs {}", got[k]));
        }
    }
    Ok(())
}

pub fn check_jacobian(s: &Setup) -> Result<(), String> {
    let w = s.weights();
    let jac = mean_score_jacobian_fixed(&s.phi, &w, &s.data);
    let scale = jac.amax().max(1e-12);
    let p0 = s.phi.phi();
    for k in 0..p0.len() {
        let h = 1e-6 * (1.0 + p0[k].abs());
        let (up, dn) = perturbed(&s.phi, k, h);
        let (su, sd) = (mean_score(&up, &w, &s.data), mean_score(&dn, &w, &s.data));
        for a in 0..p0.len() {
            let fd = (su[a] - sd[a]) / (2.0 * h);
            if (fd - jac[(a, k)]).abs() > 1e-4 * scale {
                return Err(format!("({a},{k}): {fd} vs {}", jac[(a, k)]));
            }
        }
    }
    Ok(())
}

pub fn check_m_step(s: &Setup) -> Result<(), String> {
    let w = s.weights();
    let start = s.phi.with_phi(&vec![0.0; s.phi.dim()]);
    let next = m_step(&start, &w, &s.data, &EmControls::default()).map_err(|e| e.to_string())?;
    let score = mean_score(&next, &w, &s.data);
    if max_abs(&score) > 1e-8 {
        return Err(format!("score {score:?}"));
    }
    Ok(())
}
