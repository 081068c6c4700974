//! Complete-data and positivity checks on the sandwich covariance.

use fracimp::data::Dataset;
use fracimp::fiem::{m_step, DonorSetup, EmControls, FractionalWeights};
use fracimp::respondent::{select_aic, FitControls, RespondentFit};
use fracimp::response::ResponseSpec;
use fracimp::sim::{generate_full, generate_stream, Scenario};
use fracimp::variance::{covariance_from, sandwich_parts, VarianceOptions};
use nalgebra::{DMatrix, DVector};

pub fn respondent_fit(scn: &Scenario, data: &Dataset) -> RespondentFit {
    select_aic(data, std::slice::from_ref(&scn.candidate), &FitControls::default()).unwrap()
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax()
}

/// Textbook logistic sandwich `B^{-1} M B^{-1}` for full data.
pub fn logistic_sandwich(phi: &ResponseSpec, xs: &[&[f64]], ys: &[f64], delta: &[bool]) -> DMatrix<f64> {
    let dim = phi.dim();
    let mut bread = DMatrix::zeros(dim, dim);
    let mut meat = DMatrix::zeros(dim, dim);
    for ((x, &y), &d) in xs.iter().zip(ys).zip(delta) {
        let mut v: Vec<f64> = phi.h().eval(x);
        v.push(y);
        let v = DVector::from_vec(v);
        let t = phi.h().linear(x, phi.alpha()) + phi.beta() * y;
        let p = 1.0 / (1.0 + (-t).exp());
        let r = if d { 1.0 - p } else { -p };
        bread += &v * v.transpose() * (p * (1.0 - p));
        meat += &v * v.transpose() * (r * r);
    }
    let bi = bread.try_inverse().unwrap();
    &bi * meat * &bi
}

/// Point-mass imputations at the true outcomes of the nonrespondents.
pub fn oracle_imputation(scn: &Scenario, n: usize, seed: u64) -> (Dataset, Vec<f64>, FractionalWeights) {
    let (data, full) = generate_full(scn, n, seed, 0).unwrap();
    let missing = data.nonrespondents();
    let values = missing.iter().map(|&i| vec![full[i]]).collect();
    let weights = vec![vec![1.0]; missing.len()];
    let w = FractionalWeights::fixed(missing, values, weights).unwrap();
    (data, full, w)
}

/// With every outcome known the sandwich is the full-data logistic one.
pub fn check_complete_data(scn: &Scenario, n: usize, seed: u64) -> Result<(), String> {
    let (data, full, w) = oracle_imputation(scn, n, seed);
    let phi = m_step(&scn.response, &w, &data, &EmControls::default()).map_err(|e| e.to_string())?;
    let xs: Vec<&[f64]> = (0..data.n()).map(|i| data.x(i)).collect();
    let delta: Vec<bool> = (0..data.n()).map(|i| data.delta(i)).collect();
    let oracle = logistic_sandwich(&phi, &xs, &full, &delta);
    let gamma = respondent_fit(scn, &data).model;
    for gamma_correction in [false, true] {
        let opts = VarianceOptions { gamma_correction, ..VarianceOptions::default() };
        let parts = sandwich_parts(&phi, &gamma, &w, &data, &opts).map_err(|e| e.to_string())?;
        if gamma_correction && parts.a_gamma.amax() > 1e-12 {
            return Err(format!("gamma term {}", parts.a_gamma.amax()));
        }
        let v = covariance_from(&parts).map_err(|e| e.to_string())?;
        let d = rel_diff(&v, &oracle);
        if d > 1e-8 {
            return Err(format!("relative difference {d:.2e}"));
        }
    }
    Ok(())
}

/// Covariance at an arbitrary `phi` is symmetric and positive semidefinite.
/// Returns `Ok(false)` when the draw is unusable.
pub fn check_psd(scn: &Scenario, n: usize, seed: u64, a0: f64, b: f64) -> Result<bool, String> {
    let data = generate_stream(scn, n, seed, 0).unwrap();
    if data.n_respondents() <= 10 || data.n_respondents() == data.n() {
        return Ok(false);
    }
    let Ok(gamma) = select_aic(&data, std::slice::from_ref(&scn.candidate), &FitControls::default()) else {
        return Ok(false);
    };
    let mut phi = scn.response.phi();
    phi[0] = a0;
    phi[2] = b;
    let phi = scn.response.with_phi(&phi);
    let w = DonorSetup::new(&gamma.model, &data, None).unwrap().weights(b).unwrap();
    let parts = sandwich_parts(&phi, &gamma.model, &w, &data, &VarianceOptions::default()).map_err(|e| e.to_string())?;
    let v = covariance_from(&parts).map_err(|e| e.to_string())?;
    if v != v.transpose() {
        return Err("asymmetric".into());
    }
    let eig = v.symmetric_eigen().eigenvalues;
    if eig.iter().any(|e| *e < 0.0) {
        return Err(format!("eigenvalues {eig}"));
    }
    Ok(true)
}
