//! Sandwich variance for `phi_hat` and the imputed mean of `y`.
//!
//! Per-unit estimating functions are
//! `psi_i = S_i + A_gamma I11^{-1} s1_i` for respondents and the
//! weighted mean score `sbar0_i` for nonrespondents, where
//! `s1` is the respondent-model score,
//! `I11 = (1/n) sum_{resp} s1 s1^T` and
//! `A_gamma = (1/n) sum_{miss} sum_j w_ij (S_ij - sbar0_i) s1(x_i, y_j)^T`.
//! The covariance is `J^{-1} (sum psi psi^T) J^{-T}` with `J` the Jacobian of
//! the summed mean score.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::OutcomeModel;
use crate::fiem::{mu_y_from, DonorSetup, FitResult, FractionalWeights, HDesign, WeightKind};
use crate::numeric::{checked_inverse, expit, logsumexp, symmetrize_psd};
use crate::respondent::{model_score, ScoreAt};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Bread {
    /// Observed Jacobian of the mean score, including the dependence of the
    /// donor weights on `phi`.
    #[default]
    Observed,
    /// `sum_{miss} sbar0_i dbar_i^T`, the expected-information form.
    Expected,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceOptions {
    pub bread: Bread,
    /// Account for estimation of the respondent model.
    pub gamma_correction: bool,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions { bread: Bread::Observed, gamma_correction: true }
    }
}

/// Ingredients of the sandwich, kept for diagnostics and for the
/// variance of derived quantities.
#[derive(Clone, Debug)]
pub struct SandwichParts {
    /// `(1/n) sum_{resp} s1 s1^T`.
    pub i11: DMatrix<f64>,
    /// `A_gamma`, `dim(phi) x dim(gamma)`.
    pub a_gamma: DMatrix<f64>,
    /// Jacobian of the summed mean score.
    pub jacobian: DMatrix<f64>,
    /// `psi_i` for every unit.
    pub psi: Vec<DVector<f64>>,
    /// `s1_i` for respondents, zero for nonrespondents.
    pub s1: Vec<DVector<f64>>,
}

fn design(hb: &[f64], y: f64) -> DVector<f64> {
    let mut d = DVector::zeros(hb.len() + 1);
    d.rows_mut(0, hb.len()).copy_from_slice(hb);
    d[hb.len()] = y;
    d
}

/// `jac += [c0 h h^T, c1 h; c1 h^T, c2]`, the weighted sum of `d d^T`
/// over `d = (h, y)` with moments `c0 = sum c`, `c1 = sum c y`,
/// `c2 = sum c y^2`.
fn add_moment_block(jac: &mut DMatrix<f64>, h: &[f64], c0: f64, c1: f64, c2: f64) {
    let p = h.len();
    for a in 0..p {
        for b in 0..p {
            jac[(a, b)] += c0 * h[a] * h[b];
        }
        jac[(a, p)] += c1 * h[a];
        jac[(p, a)] += c1 * h[a];
    }
    jac[(p, p)] += c2;
}

pub fn sandwich_parts(
    phi: &crate::response::ResponseSpec,
    gamma: &OutcomeModel,
    weights: &FractionalWeights,
    data: &Dataset,
    opts: &VarianceOptions,
) -> Result<SandwichParts> {
    if weights.kind == WeightKind::Parametric {
        return Err(Error::Config("sandwich variance needs donor or fixed imputations".into()));
    }
    let n = data.n();
    let dim = phi.dim();
    let q = if opts.gamma_correction { gamma.n_free_params() } else { 0 };
    let hd = HDesign::new(phi, data);
    let (alpha, beta) = (phi.alpha(), phi.beta());
    let lin_h = |i: usize| -> f64 { hd.row(i).iter().zip(alpha).map(|(b, a)| b * a).sum::<f64>() };
    let observed = opts.bread == Bread::Observed;

    let mut s1 = vec![DVector::zeros(q); n];
    let mut i11 = DMatrix::zeros(q, q);
    let mut jac = DMatrix::zeros(dim, dim);
    let mut psi = vec![DVector::zeros(dim); n];
    for i in data.respondents() {
        let y = data.y(i).expect("respondent");
        let d = design(hd.row(i), y);
        let p = expit(lin_h(i) + beta * y);
        if observed {
            jac.ger(-p * (1.0 - p), &d, &d, 1.0);
        }
        psi[i] = d * (1.0 - p);
        if q > 0 {
            let g = DVector::from_vec(model_score(gamma, data.x(i), y)?);
            i11.ger(1.0, &g, &g, 1.0);
            s1[i] = g;
        }
    }
    i11 /= n as f64;

    let weight_moves = weights.kind == WeightKind::Donor;
    let mut a_gamma = DMatrix::zeros(dim, q);
    let mut g = vec![0.0; q];
    let mut u = DVector::zeros(q);
    let mut v = DVector::zeros(q);
    let mut probs = vec![0.0; weights.m()];
    for (r, &i) in weights.missing.iter().enumerate() {
        let (ys, ws) = (weights.values(r), weights.weights(r));
        let h = hd.row(i);
        let t0 = lin_h(i);
        // Weighted moments of p, p * y and the Jacobian coefficients.
        let (mut w0, mut wy, mut p0, mut py) = (0.0, 0.0, 0.0, 0.0);
        let (mut c0, mut c1, mut c2) = (0.0, 0.0, 0.0);
        for ((&y, &w), pr) in ys.iter().zip(ws).zip(probs.iter_mut()) {
            if w == 0.0 {
                continue;
            }
            let p = expit(t0 + beta * y);
            *pr = p;
            w0 += w;
            wy += w * y;
            p0 += w * p;
            py += w * p * y;
            let c = if weight_moves { w * p * p } else { -w * p * (1.0 - p) };
            c0 += c;
            c1 += c * y;
            c2 += c * y * y;
        }
        let mut sbar = design(h, 0.0) * -p0;
        sbar[dim - 1] = -py;
        let mut dbar = design(h, 0.0) * w0;
        dbar[dim - 1] = wy;
        if observed {
            add_moment_block(&mut jac, h, c0, c1, c2);
            if weight_moves {
                let mut pd = design(h, 0.0) * p0;
                pd[dim - 1] = py;
                jac.ger(-1.0, &pd, &dbar, 1.0);
            }
        } else {
            jac.ger(1.0, &sbar, &dbar, 1.0);
        }
        if q > 0 {
            // S_ij - sbar_i is (p0 - p_ij) h_i on the alpha block and
            // py - p_ij y_j on beta.
            let score = ScoreAt::new(gamma, data.x(i));
            u.fill(0.0);
            v.fill(0.0);
            for ((&y, &w), &p) in ys.iter().zip(ws).zip(&probs) {
                if w == 0.0 {
                    continue;
                }
                score.eval_into(y, &mut g)?;
                let (cu, cv) = (w * (p0 - p), w * (py - p * y));
                for k in 0..q {
                    u[k] += cu * g[k];
                    v[k] += cv * g[k];
                }
            }
            for k in 0..q {
                for (a, hv) in h.iter().enumerate() {
                    a_gamma[(a, k)] += hv * u[k];
                }
                a_gamma[(dim - 1, k)] += v[k];
            }
        }
        psi[i] = sbar;
    }
    a_gamma /= n as f64;

    if q > 0 {
        let i11_inv = checked_inverse(&i11, "respondent-model information")?;
        let corr = &a_gamma * i11_inv;
        for i in data.respondents() {
            psi[i] += &corr * &s1[i];
        }
    }
    Ok(SandwichParts { i11, a_gamma, jacobian: jac, psi, s1 })
}

/// Covariance of `phi_hat` from its parts.
pub fn covariance_from(parts: &SandwichParts) -> Result<DMatrix<f64>> {
    let jinv = checked_inverse(&parts.jacobian, "mean-score Jacobian")?;
    let dim = parts.jacobian.nrows();
    let mut meat = DMatrix::zeros(dim, dim);
    for p in &parts.psi {
        meat += p * p.transpose();
    }
    let v = &jinv * meat * jinv.transpose();
    symmetrize_psd(&v, 1e-8)
}

/// Sandwich covariance of `phi_hat` with the default options.
pub fn variance_estimate(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>> {
    variance_with(fit, data, &VarianceOptions::default())
}

pub fn variance_with(fit: &FitResult, data: &Dataset, opts: &VarianceOptions) -> Result<DMatrix<f64>> {
    if opts == &VarianceOptions::default() {
        if let Some(parts) = &fit.sandwich {
            return covariance_from(parts);
        }
    }
    let parts = sandwich_parts(&fit.response, &fit.gamma.model, &fit.weights, data, opts)?;
    covariance_from(&parts)
}

/// Influence-function variance of the imputed mean of `y`.
///
/// `IF_i = (u_i - mu)/n - g_phi^T J^{-1} psi_i + g_gamma^T (n I11)^{-1} s1_i`
/// where `u_i` is the observed or imputed outcome and the `g` are gradients
/// of the mean estimate. Reuses the sandwich parts stored on the fit.
pub fn mu_y_variance(fit: &FitResult, data: &Dataset) -> Result<f64> {
    match &fit.sandwich {
        Some(parts) => mu_y_variance_from(fit, data, parts),
        None => mu_y_variance_with(fit, data, &VarianceOptions::default()),
    }
}

pub fn mu_y_variance_with(fit: &FitResult, data: &Dataset, opts: &VarianceOptions) -> Result<f64> {
    let parts = sandwich_parts(&fit.response, &fit.gamma.model, &fit.weights, data, opts)?;
    mu_y_variance_from(fit, data, &parts)
}

pub fn mu_y_variance_from(fit: &FitResult, data: &Dataset, parts: &SandwichParts) -> Result<f64> {
    let w = &fit.weights;
    let n = data.n() as f64;
    let mu = mu_y_from(w, data);
    let dim = fit.response.dim();

    // Donor weights depend on phi only through beta: d mu / d beta is minus
    // the average within-unit weighted variance of the donor values.
    let mut g_phi = DVector::zeros(dim);
    if w.kind == WeightKind::Donor {
        let mut acc = 0.0;
        for r in 0..w.n_missing() {
            let m = w.imputed_mean(r);
            acc += w.values(r).iter().zip(w.weights(r)).map(|(y, wt)| wt * (y - m) * (y - m)).sum::<f64>();
        }
        g_phi[dim - 1] = -acc / n;
    }

    let q = parts.i11.nrows();
    let g_gamma = if q > 0 && w.kind == WeightKind::Donor {
        mu_y_gamma_gradient(&fit.gamma.model, w, data)?
    } else {
        DVector::zeros(q)
    };

    let jinv = checked_inverse(&parts.jacobian, "mean-score Jacobian")?;
    let lhs_phi = jinv.transpose() * g_phi;
    let lhs_gamma = if q > 0 {
        checked_inverse(&(&parts.i11 * n), "respondent-model information")?.transpose() * g_gamma
    } else {
        DVector::zeros(0)
    };

    let mut imputed = vec![None; data.n()];
    for (r, &i) in w.missing.iter().enumerate() {
        imputed[i] = Some(w.imputed_mean(r));
    }
    let mut var = 0.0;
    for i in 0..data.n() {
        let u = data.y(i).or(imputed[i]).expect("every unit observed or imputed");
        let mut inf = (u - mu) / n - lhs_phi.dot(&parts.psi[i]);
        if q > 0 {
            inf += lhs_gamma.dot(&parts.s1[i]);
        }
        var += inf * inf;
    }
    Ok(var)
}

/// Gradient of the imputed mean in the respondent-model parameters with
/// donor weights `w_ij ~ f(y_j | x_i) / C(y_j) * exp(-beta y_j)`:
/// `(1/n) sum_i sum_j w_ij (y_j - ybar_i) (s1(x_i, y_j) - D_j)` with
/// `D_j = sum_l f(y_j | x_l) s1(x_l, y_j) / C(y_j)` over respondents `l`.
pub fn mu_y_gamma_gradient(gamma: &OutcomeModel, w: &FractionalWeights, data: &Dataset) -> Result<DVector<f64>> {
    let q = gamma.n_free_params();
    let n = data.n() as f64;
    let donor_y = w.values(0);
    let mut grad = DVector::zeros(q);
    let mut g = vec![0.0; q];
    let mut a = vec![0.0; donor_y.len()];
    for (r, &i) in w.missing.iter().enumerate() {
        let m = w.imputed_mean(r);
        let score = ScoreAt::new(gamma, data.x(i));
        for ((&y, &wt), aj) in donor_y.iter().zip(w.weights(r)).zip(a.iter_mut()) {
            if wt == 0.0 {
                continue;
            }
            let c = wt * (y - m);
            *aj += c;
            score.eval_into(y, &mut g)?;
            for k in 0..q {
                grad[k] += c * g[k];
            }
        }
    }

    let resp = data.respondents();
    let laws = resp.iter().map(|&l| gamma.law_at(data.x(l))).collect::<Result<Vec<_>>>()?;
    let scores: Vec<ScoreAt> = resp.iter().map(|&l| ScoreAt::new(gamma, data.x(l))).collect();
    let terms = donor_y
        .par_iter()
        .zip(a.par_iter())
        .map(|(&y, &aj)| -> Result<Vec<f64>> {
            let mut d = vec![0.0; q];
            if aj == 0.0 {
                return Ok(d);
            }
            let lf: Vec<f64> = laws.iter().map(|law| law.log_density_unchecked(y)).collect();
            let lc = logsumexp(lf.iter().copied());
            let mut g = vec![0.0; q];
            for (s, l) in scores.iter().zip(&lf) {
                let pi = (l - lc).exp();
                s.eval_into(y, &mut g)?;
                for k in 0..q {
                    d[k] += aj * pi * g[k];
                }
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    for d in &terms {
        for k in 0..q {
            grad[k] -= d[k];
        }
    }
    Ok(grad / n)
}

/// Central-difference version of [`mu_y_gamma_gradient`], rebuilding the
/// donor weights at perturbed respondent-model parameters.
pub fn mu_y_gamma_gradient_fd(gamma: &OutcomeModel, w: &FractionalWeights, beta: f64, data: &Dataset) -> Result<DVector<f64>> {
    let p = gamma.params();
    let mut qv = p.clone();
    let mut grad = DVector::zeros(p.len());
    for k in 0..p.len() {
        let h = 1e-5 * (1.0 + p[k].abs());
        let mut eval = |v: f64| -> Result<f64> {
            qv[k] = v;
            let model = gamma.with_params(&qv)?;
            let setup = DonorSetup::with_donors(&model, data, w.donors.clone())?;
            Ok(mu_y_from(&setup.weights(beta)?, data))
        };
        let up = eval(p[k] + h)?;
        let dn = eval(p[k] - h)?;
        qv[k] = p[k];
        grad[k] = (up - dn) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Two-sided normal interval.
pub fn wald(estimate: f64, se: f64, level: f64) -> Interval {
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0);
    Interval { estimate, se, lower: estimate - z * se, upper: estimate + z * se }
}

/// Complete-case mean with a Student-t interval.
pub fn complete_case_interval(data: &Dataset, level: f64) -> Result<Interval> {
    let ys: Vec<f64> = data.ys().iter().flatten().copied().collect();
    if ys.len() < 2 {
        return Err(Error::NoRespondents);
    }
    let m = crate::numeric::mean(&ys);
    let se = crate::numeric::sd(&ys) / (ys.len() as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (ys.len() - 1) as f64)
        .map_err(|e| Error::spec(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    Ok(Interval { estimate: m, se, lower: m - t * se, upper: m + t * se })
}

/// Wald interval for the imputed mean of `y`.
pub fn mu_y_interval(fit: &FitResult, data: &Dataset, level: f64) -> Result<Interval> {
    let v = mu_y_variance(fit, data)?;
    Ok(wald(mu_y_from(&fit.weights, data), v.max(0.0).sqrt(), level))
}
