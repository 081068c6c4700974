//! Fractional-imputation EM for the response parameters `phi = (alpha, beta)`.
//!
//! Each nonrespondent `i` is represented by every respondent outcome `y_j`
//! with weight
//! `w_ij ∝ O(x_i, y_j) f(y_j | x_i) / C(y_j)`, `C(y) = sum_l f(y | x_l)` over
//! respondents `l`. Because the odds are `exp(-h(x_i) - beta y_j)`, the
//! normalized weights depend on `phi` only through `beta`, so the density
//! part is computed once per fit.
//!
//! The M-step is a weighted logistic regression (a concave problem) solved by
//! Newton with step-halving. The outer fixed-point iteration can be
//! accelerated with SQUAREM; every map evaluation counts toward the
//! iteration cap.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::OutcomeModel;
use crate::identify::{check_model, IdentifyOptions, IdentifyVerdict, Status, ValueMode};
use crate::numeric::{expit, log_expit, logsumexp, solve_with_ridge};
use crate::respondent::RespondentFit;
use crate::response::ResponseSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    /// Fractional weights over respondent donors.
    Donor,
    /// `m` draws per nonrespondent from the tilted respondent model, with
    /// common random numbers across iterations.
    Parametric { m: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Donor,
    Parametric,
    /// Externally supplied imputations held fixed.
    Fixed,
}

/// Imputed values and weights for every nonrespondent.
#[derive(Clone, Debug, PartialEq)]
pub struct FractionalWeights {
    pub kind: WeightKind,
    /// Dataset indices of nonrespondents, in row order.
    pub missing: Vec<usize>,
    /// Dataset indices of donors (donor engine only).
    pub donors: Vec<usize>,
    m: usize,
    shared_values: bool,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl FractionalWeights {
    /// Point-mass or user-supplied imputations: `values[r]` and
    /// `weights[r]` belong to `missing[r]`, each row of equal length.
    pub fn fixed(missing: Vec<usize>, values: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let m = values.first().map_or(0, Vec::len);
        if values.len() != missing.len() || weights.len() != missing.len() {
            return Err(Error::spec("one imputation row per missing unit"));
        }
        if values.iter().chain(&weights).any(|r| r.len() != m) {
            return Err(Error::spec("imputation rows must have equal length"));
        }
        Ok(FractionalWeights {
            kind: WeightKind::Fixed,
            missing,
            donors: Vec::new(),
            m,
            shared_values: false,
            values: values.concat(),
            weights: weights.concat(),
        })
    }

    pub fn n_missing(&self) -> usize {
        self.missing.len()
    }

    /// Imputations per missing unit.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self, r: usize) -> &[f64] {
        if self.shared_values {
            &self.values
        } else {
            &self.values[r * self.m..(r + 1) * self.m]
        }
    }

    pub fn weights(&self, r: usize) -> &[f64] {
        &self.weights[r * self.m..(r + 1) * self.m]
    }

    /// Weighted mean of the imputed values for missing row `r`.
    pub fn imputed_mean(&self, r: usize) -> f64 {
        self.values(r).iter().zip(self.weights(r)).map(|(y, w)| y * w).sum()
    }
}

/// The `phi`-independent part of the donor weights:
/// `log f(y_j | x_i) - log C(y_j)`.
#[derive(Clone, Debug)]
pub struct DonorSetup {
    missing: Vec<usize>,
    donors: Vec<usize>,
    donor_y: Vec<f64>,
    base: Vec<f64>,
}

impl DonorSetup {
    /// `donor_cap` limits the donor pool to a seeded random subset of
    /// respondents; `C(y)` always sums over every respondent.
    pub fn new(gamma: &OutcomeModel, data: &Dataset, donor_cap: Option<(usize, u64)>) -> Result<Self> {
        let resp = data.respondents();
        if resp.is_empty() {
            return Err(Error::NoRespondents);
        }
        let donors: Vec<usize> = match donor_cap {
            Some((cap, seed)) if cap < resp.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut idx = sample_indices(&mut rng, resp.len(), cap).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|k| resp[k]).collect()
            }
            _ => resp.clone(),
        };
        Self::with_donors(gamma, data, donors)
    }

    /// Weights over an explicit donor list of respondent indices.
    pub fn with_donors(gamma: &OutcomeModel, data: &Dataset, donors: Vec<usize>) -> Result<Self> {
        let resp = data.respondents();
        if resp.is_empty() {
            return Err(Error::NoRespondents);
        }
        let missing = data.nonrespondents();
        let donor_y: Vec<f64> = donors.iter().map(|&j| data.y(j).expect("respondent")).collect();
        let laws_resp = resp.iter().map(|&l| gamma.law_at(data.x(l))).collect::<Result<Vec<_>>>()?;
        let log_c: Vec<f64> = donor_y
            .par_iter()
            .map(|&y| logsumexp(laws_resp.iter().map(|law| law.log_density_unchecked(y))))
            .collect();
        let nd = donors.len();
        let mut base = vec![0.0; missing.len() * nd];
        base.par_chunks_mut(nd.max(1))
            .zip(missing.par_iter())
            .try_for_each(|(row, &i)| -> Result<()> {
                let law = gamma.law_at(data.x(i))?;
                for (b, (&y, &lc)) in row.iter_mut().zip(donor_y.iter().zip(&log_c)) {
                    *b = law.log_density_unchecked(y) - lc;
                }
                Ok(())
            })?;
        Ok(DonorSetup { missing, donors, donor_y, base })
    }

    /// Normalized weights at the given `beta`.
    pub fn weights(&self, beta: f64) -> Result<FractionalWeights> {
        let nd = self.donors.len();
        let mut weights = vec![0.0; self.base.len()];
        for (r, (row, out)) in self.base.chunks(nd.max(1)).zip(weights.chunks_mut(nd.max(1))).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (o, (&b, &y)) in out.iter_mut().zip(row.iter().zip(&self.donor_y)) {
                *o = b - beta * y;
                mx = mx.max(*o);
            }
            if !mx.is_finite() {
                return Err(Error::ZeroWeightRow { unit: self.missing[r] });
            }
            let mut s = 0.0;
            for o in out.iter_mut() {
                *o = (*o - mx).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        Ok(FractionalWeights {
            kind: WeightKind::Donor,
            missing: self.missing.clone(),
            donors: self.donors.clone(),
            m: nd,
            shared_values: true,
            values: self.donor_y.clone(),
            weights,
        })
    }
}

/// Donor weights `w_ij` at `phi` for respondent model `gamma`.
pub fn fractional_weights(phi: &ResponseSpec, gamma: &OutcomeModel, data: &Dataset) -> Result<FractionalWeights> {
    DonorSetup::new(gamma, data, None)?.weights(phi.beta())
}

/// Parametric imputation: fixed uniforms pushed through the tilted
/// respondent law's quantile function.
#[derive(Clone, Debug)]
pub struct ParametricSetup {
    missing: Vec<usize>,
    m: usize,
    u_comp: Vec<f64>,
    u: Vec<f64>,
}

impl ParametricSetup {
    pub fn new(data: &Dataset, m: usize, seed: u64) -> Self {
        let missing = data.nonrespondents();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = missing.len() * m;
        let u_comp = (0..total).map(|_| rng.gen::<f64>()).collect();
        let u = (0..total).map(|_| rng.gen::<f64>()).collect();
        ParametricSetup { missing, m, u_comp, u }
    }

    pub fn draws(&self, gamma: &OutcomeModel, beta: f64, data: &Dataset) -> Result<FractionalWeights> {
        let tilted = gamma.tilt(beta);
        let mut values = vec![0.0; self.u.len()];
        for (r, &i) in self.missing.iter().enumerate() {
            let law = tilted.law_at(data.x(i))?;
            for k in r * self.m..(r + 1) * self.m {
                values[k] = law.quantile_draw(self.u_comp[k], self.u[k]);
            }
        }
        Ok(FractionalWeights {
            kind: WeightKind::Parametric,
            missing: self.missing.clone(),
            donors: Vec::new(),
            m: self.m,
            shared_values: false,
            values,
            weights: vec![1.0 / self.m as f64; self.u.len()],
        })
    }
}

/// Response-basis values for every unit, flattened `n x L`.
#[derive(Clone, Debug)]
pub(crate) struct HDesign {
    l: usize,
    vals: Vec<f64>,
}

impl HDesign {
    pub(crate) fn new(resp: &ResponseSpec, data: &Dataset) -> Self {
        let l = resp.h().len();
        let mut vals = vec![0.0; data.n() * l];
        for i in 0..data.n() {
            resp.h().eval_into(data.x(i), &mut vals[i * l..(i + 1) * l]);
        }
        HDesign { l, vals }
    }

    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.vals[i * self.l..(i + 1) * self.l]
    }
}

fn h_of(hd: &HDesign, i: usize, alpha: &[f64]) -> f64 {
    hd.row(i).iter().zip(alpha).map(|(b, a)| b * a).sum()
}

fn add_design(acc: &mut [f64], hb: &[f64], y: f64, scale: f64) {
    let l = hb.len();
    for (a, b) in acc[..l].iter_mut().zip(hb) {
        *a += scale * b;
    }
    acc[l] += scale * y;
}

fn add_outer(acc: &mut DMatrix<f64>, hb: &[f64], y: f64, scale: f64) {
    let l = hb.len();
    let d = |k: usize| if k < l { hb[k] } else { y };
    for a in 0..=l {
        let da = d(a) * scale;
        for b in 0..=l {
            acc[(a, b)] += da * d(b);
        }
    }
}

/// Mean score `sum_{resp} S + sum_{miss} sum_j w_ij S(x_i, y_j, 0)`.
pub fn mean_score(phi: &ResponseSpec, weights: &FractionalWeights, data: &Dataset) -> Vec<f64> {
    let hd = HDesign::new(phi, data);
    mean_score_with(phi, weights, data, &hd)
}

pub(crate) fn mean_score_with(phi: &ResponseSpec, weights: &FractionalWeights, data: &Dataset, hd: &HDesign) -> Vec<f64> {
    let dim = phi.dim();
    let (alpha, beta) = (phi.alpha(), phi.beta());
    let mut s = vec![0.0; dim];
    for i in 0..data.n() {
        if let Some(y) = data.y(i) {
            let p = expit(h_of(hd, i, alpha) + beta * y);
            add_design(&mut s, hd.row(i), y, 1.0 - p);
        }
    }
    for (r, &i) in weights.missing.iter().enumerate() {
        let h = h_of(hd, i, alpha);
        for (&y, &w) in weights.values(r).iter().zip(weights.weights(r)) {
            if w == 0.0 {
                continue;
            }
            let p = expit(h + beta * y);
            add_design(&mut s, hd.row(i), y, -w * p);
        }
    }
    s
}

/// Jacobian of the mean score in `phi` with the weights held fixed.
pub fn mean_score_jacobian_fixed(phi: &ResponseSpec, weights: &FractionalWeights, data: &Dataset) -> DMatrix<f64> {
    let hd = HDesign::new(phi, data);
    jacobian_fixed_with(phi, weights, data, &hd)
}

pub(crate) fn jacobian_fixed_with(phi: &ResponseSpec, weights: &FractionalWeights, data: &Dataset, hd: &HDesign) -> DMatrix<f64> {
    let dim = phi.dim();
    let (alpha, beta) = (phi.alpha(), phi.beta());
    let mut j = DMatrix::zeros(dim, dim);
    for i in 0..data.n() {
        if let Some(y) = data.y(i) {
            let p = expit(h_of(hd, i, alpha) + beta * y);
            add_outer(&mut j, hd.row(i), y, -p * (1.0 - p));
        }
    }
    for (r, &i) in weights.missing.iter().enumerate() {
        let h = h_of(hd, i, alpha);
        for (&y, &w) in weights.values(r).iter().zip(weights.weights(r)) {
            if w == 0.0 {
                continue;
            }
            let p = expit(h + beta * y);
            add_outer(&mut j, hd.row(i), y, -w * p * (1.0 - p));
        }
    }
    j
}

/// Objective, mean score and fixed-weight Jacobian in one sweep. Missing
/// rows are reduced to weighted moments of `p` and `p (1 - p)` in `y` before
/// the outer products are formed.
struct NewtonPass {
    obj: f64,
    score: DVector<f64>,
    jac: DMatrix<f64>,
}

fn newton_pass(phi: &ResponseSpec, weights: &FractionalWeights, data: &Dataset, hd: &HDesign) -> NewtonPass {
    let dim = phi.dim();
    let l = dim - 1;
    let (alpha, beta) = (phi.alpha(), phi.beta());
    let mut obj = 0.0;
    let mut score = DVector::zeros(dim);
    let mut jac = DMatrix::zeros(dim, dim);
    let mut block = |hb: &[f64], m0: f64, m1: f64, c0: f64, c1: f64, c2: f64| {
        for a in 0..l {
            score[a] += m0 * hb[a];
            for b in 0..l {
                jac[(a, b)] -= c0 * hb[a] * hb[b];
            }
            jac[(a, l)] -= c1 * hb[a];
            jac[(l, a)] -= c1 * hb[a];
        }
        score[l] += m1;
        jac[(l, l)] -= c2;
    };
    for i in 0..data.n() {
        if let Some(y) = data.y(i) {
            let t = h_of(hd, i, alpha) + beta * y;
            let p = expit(t);
            obj += log_expit(t);
            let v = p * (1.0 - p);
            block(hd.row(i), 1.0 - p, (1.0 - p) * y, v, v * y, v * y * y);
        }
    }
    for (r, &i) in weights.missing.iter().enumerate() {
        let h = h_of(hd, i, alpha);
        let (mut m0, mut m1, mut c0, mut c1, mut c2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&y, &w) in weights.values(r).iter().zip(weights.weights(r)) {
            if w == 0.0 {
                continue;
            }
            let t = h + beta * y;
            let e = (-t.abs()).exp();
            let p = if t >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            obj -= w * (t.max(0.0) + e.ln_1p());
            let wp = w * p;
            m0 += wp;
            m1 += wp * y;
            let v = wp * (1.0 - p);
            c0 += v;
            c1 += v * y;
            c2 += v * y * y;
        }
        block(hd.row(i), -m0, -m1, c0, c1, c2);
    }
    NewtonPass { obj, score, jac }
}

#[derive(Clone, Debug)]
pub struct EmControls {
    /// Stop when `max |phi_{t+1} - phi_t| <= tol`.
    pub tol: f64,
    /// Cap on EM map evaluations.
    pub max_iter: usize,
    pub newton_max_iter: usize,
    /// M-step stops when `max |S| <= newton_tol`.
    pub newton_tol: f64,
    /// Bound on the converged `max |S| / n`.
    pub score_tol: f64,
    pub engine: Engine,
    pub accelerate: bool,
    pub donor_cap: Option<usize>,
    pub seed: u64,
    /// Proceed even when the model is provably unidentifiable.
    pub force: bool,
    pub sign_beta_known: bool,
    pub compute_variance: bool,
}

impl Default for EmControls {
    fn default() -> Self {
        EmControls {
            tol: 1e-8,
            max_iter: 500,
            newton_max_iter: 50,
            newton_tol: 1e-10,
            score_tol: 1e-6,
            engine: Engine::Donor,
            accelerate: true,
            donor_cap: None,
            seed: 0,
            force: false,
            sign_beta_known: false,
            compute_variance: true,
        }
    }
}

/// Newton solve of the mean score with the imputations held fixed.
pub fn m_step(start: &ResponseSpec, weights: &FractionalWeights, data: &Dataset, ctrl: &EmControls) -> Result<ResponseSpec> {
    let hd = HDesign::new(start, data);
    m_step_with(start, weights, data, &hd, ctrl)
}

fn m_step_with(start: &ResponseSpec, weights: &FractionalWeights, data: &Dataset, hd: &HDesign, ctrl: &EmControls) -> Result<ResponseSpec> {
    let mut cur = start.clone();
    let mut pass = newton_pass(&cur, weights, data, hd);
    for _ in 0..ctrl.newton_max_iter {
        if pass.score.amax() <= ctrl.newton_tol {
            return Ok(cur);
        }
        let step = solve_with_ridge(&(-&pass.jac), &pass.score).ok_or(Error::NewtonDivergence)?;
        let phi = cur.phi();
        let obj = pass.obj;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let cand_phi: Vec<f64> = phi.iter().zip(step.iter()).map(|(p, d)| p + t * d).collect();
            let cand = cur.with_phi(&cand_phi);
            let next = newton_pass(&cand, weights, data, hd);
            if next.obj.is_finite() && next.obj >= obj - 1e-12 * obj.abs().max(1.0) {
                let tiny = step.amax() * t <= 1e-15 * (1.0 + phi.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
                cur = cand;
                pass = next;
                accepted = true;
                if tiny {
                    return Ok(cur);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDivergence);
        }
    }
    Ok(cur)
}

/// Imputation state for one fit.
enum Imputer {
    Donor(DonorSetup),
    Parametric(ParametricSetup),
}

impl Imputer {
    fn weights(&self, gamma: &OutcomeModel, phi: &ResponseSpec, data: &Dataset) -> Result<FractionalWeights> {
        match self {
            Imputer::Donor(d) => d.weights(phi.beta()),
            Imputer::Parametric(p) => p.draws(gamma, phi.beta(), data),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub response: ResponseSpec,
    pub gamma: RespondentFit,
    pub weights: FractionalWeights,
    pub covariance: Option<DMatrix<f64>>,
    /// Sandwich ingredients behind `covariance`, with default options.
    pub sandwich: Option<crate::variance::SandwichParts>,
    pub variance_error: Option<String>,
    pub em_iterations: usize,
    /// `max |S(phi_hat)| / n` with weights at `phi_hat`.
    pub mean_score_norm: f64,
    pub converged: bool,
    /// `phi` after each EM map evaluation.
    pub trace: Vec<Vec<f64>>,
    /// Pre-fit structural verdict.
    pub verdict: IdentifyVerdict,
    /// Verdict re-evaluated with the fitted values.
    pub fitted_verdict: Option<IdentifyVerdict>,
}

impl FitResult {
    pub fn phi(&self) -> Vec<f64> {
        self.response.phi()
    }

    /// Standard errors of `phi_hat` when a covariance is available.
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.nrows()).map(|k| c[(k, k)].max(0.0).sqrt()).collect())
    }
}

/// Complete-case-free starting value: logistic regression of `delta` on the
/// response basis with `beta = 0`.
pub fn initial_phi(template: &ResponseSpec, data: &Dataset) -> Result<ResponseSpec> {
    let l = template.h().len();
    let n = data.n();
    let mut x = DMatrix::zeros(n, l);
    for i in 0..n {
        let row = template.h().eval(data.x(i));
        for (k, v) in row.into_iter().enumerate() {
            x[(i, k)] = v;
        }
    }
    let d = DVector::from_iterator(n, (0..n).map(|i| f64::from(u8::from(data.delta(i)))));
    let mut a = DVector::zeros(l);
    for _ in 0..100 {
        let p = (&x * &a).map(expit);
        let g = x.transpose() * (&d - &p);
        if g.amax() <= 1e-10 {
            break;
        }
        let mut xw = x.clone();
        for (mut row, pi) in xw.row_iter_mut().zip(p.iter()) {
            row *= pi * (1.0 - pi);
        }
        let h = x.transpose() * xw;
        let step = solve_with_ridge(&h, &g).ok_or(Error::NewtonDivergence)?;
        a += step;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NewtonDivergence);
        }
    }
    let mut phi: Vec<f64> = a.iter().copied().collect();
    phi.push(0.0);
    Ok(template.with_phi(&phi))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Run the fractional-imputation EM.
///
/// `template` supplies the response basis; its coefficients are ignored when
/// `init` is `None`, in which case [`initial_phi`] is used.
pub fn em_fit(data: &Dataset, gamma: &RespondentFit, template: &ResponseSpec, init: Option<&ResponseSpec>, ctrl: &EmControls) -> Result<FitResult> {
    if data.n_respondents() == 0 {
        return Err(Error::NoRespondents);
    }
    let opts = IdentifyOptions { sign_beta_known: ctrl.sign_beta_known, values: ValueMode::Structural, beta: None };
    let verdict = check_model(&gamma.model, template.h(), &opts)?;
    match verdict.status {
        Status::ProvablyUnidentifiable if !ctrl.force => return Err(Error::Unidentifiable(Box::new(verdict))),
        Status::ProvablyIdentifiable => {}
        _ => log::warn!("identifiability: {verdict}"),
    }

    let phi0 = match init {
        Some(p) => p.clone(),
        None => initial_phi(template, data)?,
    };
    let imputer = match ctrl.engine {
        Engine::Donor => Imputer::Donor(DonorSetup::new(&gamma.model, data, ctrl.donor_cap.map(|c| (c, ctrl.seed)))?),
        Engine::Parametric { m } => Imputer::Parametric(ParametricSetup::new(data, m.max(1), ctrl.seed)),
    };
    let hd = HDesign::new(template, data);
    let em_map = |phi: &ResponseSpec| -> Result<ResponseSpec> {
        let w = imputer.weights(&gamma.model, phi, data)?;
        m_step_with(phi, &w, data, &hd, ctrl)
    };
    let finite = |p: &ResponseSpec| p.phi().iter().all(|v| v.is_finite());

    let mut trace: Vec<Vec<f64>> = Vec::new();
    let mut evals = 0usize;
    let mut cur = phi0;
    let mut converged = false;
    'outer: while evals < ctrl.max_iter {
        let p1 = em_map(&cur)?;
        evals += 1;
        trace.push(p1.phi());
        if max_abs_diff(&p1.phi(), &cur.phi()) <= ctrl.tol {
            cur = p1;
            converged = true;
            break;
        }
        if !ctrl.accelerate || evals >= ctrl.max_iter {
            cur = p1;
            continue;
        }
        let p2 = em_map(&p1)?;
        evals += 1;
        trace.push(p2.phi());
        if max_abs_diff(&p2.phi(), &p1.phi()) <= ctrl.tol {
            cur = p2;
            converged = true;
            break;
        }
        let (f0, f1, f2) = (cur.phi(), p1.phi(), p2.phi());
        let r: Vec<f64> = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = f2.iter().zip(&f1).zip(&f0).map(|((c, b), a)| c - 2.0 * b + a).collect();
        let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let step = if nv > 0.0 { (-nr / nv).min(-1.0) } else { -1.0 };
        let extrap: Vec<f64> = f0
            .iter()
            .zip(&r)
            .zip(&v)
            .map(|((p, r), v)| p - 2.0 * step * r + step * step * v)
            .collect();
        let cand = cur.with_phi(&extrap);
        cur = p2;
        if finite(&cand) && evals < ctrl.max_iter {
            if let Ok(stab) = em_map(&cand) {
                evals += 1;
                if finite(&stab) {
                    trace.push(stab.phi());
                    cur = stab;
                    continue 'outer;
                }
            }
        }
    }

    let weights = imputer.weights(&gamma.model, &cur, data)?;
    let s = mean_score_with(&cur, &weights, data, &hd);
    let msn = s.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / data.n() as f64;
    let converged = converged && msn <= ctrl.score_tol;
    if !converged {
        return Err(Error::NonConvergence { what: "fractional-imputation EM", iterations: evals });
    }

    let fitted_opts = IdentifyOptions { values: ValueMode::Declared, beta: Some(cur.beta()), ..opts };
    let fitted_verdict = check_model(&gamma.model, template.h(), &fitted_opts).ok();
    if let Some(v) = &fitted_verdict {
        if v.status == Status::ProvablyUnidentifiable {
            log::warn!("fitted model meets an unidentifiability pattern: {v}");
        }
    }

    let mut fit = FitResult {
        response: cur,
        gamma: gamma.clone(),
        weights,
        covariance: None,
        sandwich: None,
        variance_error: None,
        em_iterations: evals,
        mean_score_norm: msn,
        converged,
        trace,
        verdict,
        fitted_verdict,
    };
    if ctrl.compute_variance && fit.weights.kind != WeightKind::Parametric {
        let opts = crate::variance::VarianceOptions::default();
        let parts = crate::variance::sandwich_parts(&fit.response, &fit.gamma.model, &fit.weights, data, &opts);
        match parts.and_then(|p| Ok((crate::variance::covariance_from(&p)?, p))) {
            Ok((c, p)) => {
                fit.covariance = Some(c);
                fit.sandwich = Some(p);
            }
            Err(e) => fit.variance_error = Some(e.to_string()),
        }
    }
    Ok(fit)
}

/// `(sum_{resp} y_i + sum_{miss} sum_j w_ij y_j) / n`.
pub fn estimate_mu_y(fit: &FitResult, data: &Dataset) -> f64 {
    mu_y_from(&fit.weights, data)
}

pub fn mu_y_from(weights: &FractionalWeights, data: &Dataset) -> f64 {
    let obs: f64 = data.ys().iter().flatten().sum();
    let imp: f64 = (0..weights.n_missing()).map(|r| weights.imputed_mean(r)).sum();
    (obs + imp) / data.n() as f64
}
