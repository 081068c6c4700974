//! Maximum-likelihood fitting of the respondent outcome model from complete
//! cases: Newton for single-component families, EM with restarts for normal
//! mixtures, and AIC selection over candidate models.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::gamma::digamma;

use crate::basis::BasisSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{Component, FamilyKind, OutcomeModel, OutcomeSpec};
use crate::numeric::{logsumexp, sd, solve_with_ridge};

#[derive(Clone, Debug)]
pub struct FitControls {
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub mixture_max_iter: usize,
    /// Relative log-likelihood change that stops mixture EM.
    pub mixture_tol: f64,
    pub seed: u64,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            max_iter: 100,
            tol: 1e-8,
            restarts: 10,
            mixture_max_iter: 2000,
            mixture_tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RespondentFit {
    pub model: OutcomeModel,
    pub loglik: f64,
    pub aic: f64,
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
    /// A normal variance (or gamma fit) collapsed to zero.
    pub degenerate: bool,
    pub gradient_norm: f64,
    /// Mixture EM log-likelihood per iteration (empty for Newton fits).
    pub trace: Vec<f64>,
}

impl RespondentFit {
    fn finish(model: OutcomeModel, loglik: f64, iterations: usize, converged: bool, degenerate: bool, gradient_norm: f64, trace: Vec<f64>) -> Self {
        let n_params = model.n_free_params();
        RespondentFit {
            model,
            loglik,
            aic: -2.0 * loglik + 2.0 * n_params as f64,
            n_params,
            iterations,
            converged,
            degenerate,
            gradient_norm,
            trace,
        }
    }

    /// The single outcome spec, when the model is not grouped.
    pub fn spec(&self) -> Option<&OutcomeSpec> {
        match &self.model {
            OutcomeModel::Single(s) => Some(s),
            OutcomeModel::Grouped { .. } => None,
        }
    }
}

/// A set of respondent rows.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub data: &'a Dataset,
    pub rows: Vec<usize>,
}

impl<'a> Sample<'a> {
    pub fn respondents(data: &'a Dataset) -> Self {
        Sample { data, rows: data.respondents() }
    }

    /// Respondents on one level of a discrete covariate.
    pub fn level(data: &'a Dataset, col: usize, level: usize) -> Self {
        let rows = data
            .respondents()
            .into_iter()
            .filter(|&i| data.x(i)[col] as usize == level)
            .collect();
        Sample { data, rows }
    }

    fn y(&self, r: usize) -> f64 {
        self.data.y(self.rows[r]).expect("respondent rows only")
    }

    fn x(&self, r: usize) -> &[f64] {
        self.data.x(self.rows[r])
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn design(&self, basis: &BasisSet) -> DMatrix<f64> {
        let m = basis.len();
        let mut x = DMatrix::zeros(self.len(), m);
        let mut buf = vec![0.0; m];
        for r in 0..self.len() {
            basis.eval_into(self.x(r), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                x[(r, j)] = *v;
            }
        }
        x
    }

    fn ys(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|r| self.y(r)))
    }
}

/// Log-likelihood of a model over the given rows.
pub fn loglik(model: &OutcomeModel, sample: &Sample) -> Result<f64> {
    let mut s = 0.0;
    for r in 0..sample.len() {
        s += model.log_density(sample.y(r), sample.x(r))?;
    }
    Ok(s)
}

/// Derivatives of one component's log kernel in its linear predictor and
/// log-dispersion (zero for families without dispersion).
fn kernel_grad(fam: FamilyKind, eta: f64, dispersion: f64, y: f64) -> (f64, f64) {
    match fam {
        FamilyKind::Normal => {
            let r = y - eta;
            (r / dispersion, -0.5 + r * r / (2.0 * dispersion))
        }
        FamilyKind::Bernoulli => (y - crate::numeric::expit(eta), 0.0),
        FamilyKind::Poisson => (y - eta.exp(), 0.0),
        FamilyKind::Gamma => {
            let s = dispersion;
            let mu = eta.exp();
            (s * (y / mu - 1.0), s * (s.ln() + 1.0 - digamma(s) + y.ln() - eta - y / mu))
        }
    }
}

struct ComponentAt {
    basis: Vec<f64>,
    eta: f64,
    dispersion: f64,
    log_weight: f64,
    theta: f64,
    tau: f64,
}

/// Score of `log f(y | x)` in the flat model parameters at a fixed `x`,
/// for repeated evaluation over many `y`.
pub struct ScoreAt<'a> {
    spec: &'a OutcomeSpec,
    x: &'a [f64],
    offset: usize,
    dim: usize,
    comps: Vec<ComponentAt>,
    numeric: bool,
}

impl<'a> ScoreAt<'a> {
    pub fn new(model: &'a OutcomeModel, x: &'a [f64]) -> Self {
        let spec = model.spec_at(x);
        let offset = match model {
            OutcomeModel::Single(_) => 0,
            OutcomeModel::Grouped { col, specs, .. } => {
                specs[..x[*col] as usize].iter().map(|s| s.n_free_params()).sum()
            }
        };
        Self::build(spec, x, offset, model.n_free_params())
    }

    pub fn for_spec(spec: &'a OutcomeSpec, x: &'a [f64]) -> Self {
        Self::build(spec, x, 0, spec.n_free_params())
    }

    fn build(spec: &'a OutcomeSpec, x: &'a [f64], offset: usize, dim: usize) -> Self {
        let fam = spec.family();
        let comps = spec
            .components()
            .iter()
            .map(|c| {
                let eta = c.linear_predictor(x);
                ComponentAt {
                    basis: c.basis().eval(x),
                    eta,
                    dispersion: c.dispersion,
                    log_weight: c.weight.ln(),
                    theta: fam.theta_of(eta),
                    tau: fam.tau_of(c.dispersion),
                }
            })
            .collect();
        ScoreAt { spec, x, offset, dim, comps, numeric: spec.tilt_offset() != 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Write the score at `y` into `out`; entries outside the unit's block
    /// are zero.
    pub fn eval_into(&self, y: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.dim);
        out.fill(0.0);
        let block = &mut out[self.offset..self.offset + self.spec.n_free_params()];
        if self.numeric {
            block.copy_from_slice(&param_score_numeric(self.spec, self.x, y)?);
            return Ok(());
        }
        let fam = self.spec.family();
        fam.check_support(y)?;
        let lk = |c: &ComponentAt| c.log_weight + fam.log_kernel(y, c.theta, c.tau);
        let norm = if self.comps.len() == 1 { 0.0 } else { logsumexp(self.comps.iter().map(lk)) };
        let mut k = 0;
        for c in &self.comps {
            let r = if self.comps.len() == 1 { 1.0 } else { (lk(c) - norm).exp() };
            let (de, dd) = kernel_grad(fam, c.eta, c.dispersion, y);
            for b in &c.basis {
                block[k] = b * de * r;
                k += 1;
            }
            if fam.has_dispersion() {
                block[k] = dd * r;
                k += 1;
            }
        }
        for c in self.comps.iter().skip(1) {
            let r = (lk(c) - norm).exp();
            block[k] = r - c.log_weight.exp();
            k += 1;
        }
        Ok(())
    }

    pub fn eval(&self, y: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        self.eval_into(y, &mut g)?;
        Ok(g)
    }
}

/// Gradient of `log f(y | x)` with respect to [`OutcomeSpec::params`].
/// Closed form for untilted specs (mixtures through the component
/// responsibilities), central differences otherwise.
pub fn param_score(spec: &OutcomeSpec, x: &[f64], y: f64) -> Result<Vec<f64>> {
    ScoreAt::for_spec(spec, x).eval(y)
}

/// Central-difference gradient of `log f(y | x)` in the flat parameters.
pub fn param_score_numeric(spec: &OutcomeSpec, x: &[f64], y: f64) -> Result<Vec<f64>> {
    let p = spec.params();
    let mut g = vec![0.0; p.len()];
    let mut q = p.clone();
    for j in 0..p.len() {
        let h = 1e-6 * (1.0 + p[j].abs());
        q[j] = p[j] + h;
        let up = spec.with_params(&q)?.log_density(y, x)?;
        q[j] = p[j] - h;
        let dn = spec.with_params(&q)?.log_density(y, x)?;
        q[j] = p[j];
        g[j] = (up - dn) / (2.0 * h);
    }
    Ok(g)
}

/// Score of a possibly grouped model: the unit's level block is filled and
/// the rest is zero.
pub fn model_score(model: &OutcomeModel, x: &[f64], y: f64) -> Result<Vec<f64>> {
    ScoreAt::new(model, x).eval(y)
}

fn check_rank(x: &DMatrix<f64>, what: &str) -> Result<()> {
    let m = x.ncols();
    if x.nrows() < m + 1 {
        return Err(Error::RankDeficient(format!(
            "{what}: {} complete cases for {m} coefficients",
            x.nrows()
        )));
    }
    let sv = x.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if m > 0 && !(sv.min() > 1e-10 * smax) {
        return Err(Error::RankDeficient(format!("{what}: design columns are collinear")));
    }
    Ok(())
}

pub fn fit_glm(data: &Dataset, family: FamilyKind, basis: &BasisSet, ctrl: &FitControls) -> Result<RespondentFit> {
    fit_glm_on(&Sample::respondents(data), family, basis, ctrl)
}

pub fn fit_glm_on(sample: &Sample, family: FamilyKind, basis: &BasisSet, ctrl: &FitControls) -> Result<RespondentFit> {
    let x = sample.design(basis);
    check_rank(&x, "respondent model")?;
    let y = sample.ys();
    for &v in y.iter() {
        family.check_support(v)?;
    }
    let n = y.len() as f64;
    let (coef, dispersion, iters, degenerate) = match family {
        FamilyKind::Normal => {
            let svd = x.clone().svd(true, true);
            let b = svd.solve(&y, 1e-14).map_err(|e| Error::RankDeficient(e.to_string()))?;
            let rss = (&y - &x * &b).norm_squared();
            let var = rss / n;
            let degenerate = var.sqrt() <= 1e-6 * sd(y.as_slice());
            (b, var.max(f64::MIN_POSITIVE), 1, degenerate)
        }
        FamilyKind::Bernoulli | FamilyKind::Poisson => {
            let (b, it) = newton_canonical(&x, &y, family, basis, ctrl)?;
            (b, 1.0, it, false)
        }
        FamilyKind::Gamma => {
            let (b, it) = fisher_gamma(&x, &y, basis, ctrl)?;
            let eta = &x * &b;
            let c = y.iter().zip(eta.iter()).map(|(&yi, &e)| (yi.ln() - e) - yi * (-e).exp()).sum::<f64>() / n + 1.0;
            let (shape, degenerate) = gamma_shape(-c);
            (b, shape, it, degenerate)
        }
    };
    let spec = OutcomeSpec::single(family, basis.clone(), coef.iter().copied().collect(), dispersion)?;
    let model = OutcomeModel::Single(spec.clone());
    let ll = loglik(&model, sample)?;
    let mut grad = vec![0.0; spec.n_free_params()];
    for r in 0..sample.len() {
        for (g, v) in grad.iter_mut().zip(param_score(&spec, sample.x(r), sample.y(r))?) {
            *g += v;
        }
    }
    let gnorm = grad.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let converged = !degenerate && gnorm <= ctrl.tol.max(1e-10 * n);
    Ok(RespondentFit::finish(model, ll, iters, converged || family == FamilyKind::Normal && !degenerate, degenerate, gnorm, Vec::new()))
}

fn family_loglik_eta(family: FamilyKind, y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    y.iter()
        .zip(eta.iter())
        .map(|(&yi, &e)| yi * e - family.cumulant(e))
        .sum()
}

fn initial_coef(basis: &BasisSet, y: &DVector<f64>, link: impl Fn(f64) -> f64) -> DVector<f64> {
    let mut b = DVector::zeros(basis.len());
    if basis.has_constant() {
        b[0] = link(y.mean());
    }
    b
}

/// Newton-Raphson with step-halving for canonical-link families.
fn newton_canonical(x: &DMatrix<f64>, y: &DVector<f64>, family: FamilyKind, basis: &BasisSet, ctrl: &FitControls) -> Result<(DVector<f64>, usize)> {
    let mut b = match family {
        FamilyKind::Poisson => initial_coef(basis, y, |m| m.max(1e-3).ln()),
        _ => initial_coef(basis, y, |m| {
            let m = m.clamp(1e-3, 1.0 - 1e-3);
            (m / (1.0 - m)).ln()
        }),
    };
    let mut eta = x * &b;
    let mut ll = family_loglik_eta(family, y, &eta);
    for it in 1..=ctrl.max_iter {
        let mu = eta.map(|e| family.mean_of(e));
        let w = match family {
            FamilyKind::Poisson => mu.clone(),
            _ => mu.map(|p| p * (1.0 - p)),
        };
        let g = x.transpose() * (y - &mu);
        if g.amax() <= ctrl.tol {
            return Ok((b, it - 1));
        }
        let mut xw = x.clone();
        for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let h = x.transpose() * xw;
        let step = solve_with_ridge(&h, &g).ok_or(Error::NewtonDivergence)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &b + &step * t;
            let ce = x * &cand;
            let cl = family_loglik_eta(family, y, &ce);
            if cl.is_finite() && cl >= ll - 1e-12 * ll.abs().max(1.0) {
                b = cand;
                eta = ce;
                ll = cl;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDivergence);
        }
    }
    let mu = eta.map(|e| family.mean_of(e));
    let g = x.transpose() * (y - &mu);
    if g.amax() <= ctrl.tol * 100.0 {
        Ok((b, ctrl.max_iter))
    } else {
        Err(Error::NonConvergence { what: "respondent Newton fit", iterations: ctrl.max_iter })
    }
}

/// Fisher scoring for the gamma mean coefficients (log mean link); the
/// shape does not enter the coefficient equations.
fn fisher_gamma(x: &DMatrix<f64>, y: &DVector<f64>, basis: &BasisSet, ctrl: &FitControls) -> Result<(DVector<f64>, usize)> {
    let obj = |eta: &DVector<f64>| -> f64 { y.iter().zip(eta.iter()).map(|(&yi, &e)| -yi * (-e).exp() - e).sum() };
    let mut b = initial_coef(basis, y, f64::ln);
    let xtx = x.transpose() * x;
    let mut eta = x * &b;
    let mut ll = obj(&eta);
    for it in 1..=ctrl.max_iter {
        let r = DVector::from_iterator(y.len(), y.iter().zip(eta.iter()).map(|(&yi, &e)| yi * (-e).exp() - 1.0));
        let g = x.transpose() * r;
        if g.amax() <= ctrl.tol {
            return Ok((b, it - 1));
        }
        let step = solve_with_ridge(&xtx, &g).ok_or(Error::NewtonDivergence)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &b + &step * t;
            let ce = x * &cand;
            let cl = obj(&ce);
            if cl.is_finite() && cl >= ll - 1e-12 * ll.abs().max(1.0) {
                b = cand;
                eta = ce;
                ll = cl;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDivergence);
        }
    }
    Err(Error::NonConvergence { what: "gamma respondent fit", iterations: ctrl.max_iter })
}

/// Solve `log s - digamma(s) = d` for the gamma shape by bisection in `log s`.
fn gamma_shape(d: f64) -> (f64, bool) {
    if !(d > 1e-14) {
        return (1e12, true);
    }
    let f = |ls: f64| {
        let s = ls.exp();
        s.ln() - digamma(s) - d
    };
    let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ((0.5 * (lo + hi)).exp(), false)
}

/// Result of one EM run.
struct EmRun {
    spec: OutcomeSpec,
    loglik: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Normal mixture by EM with `ctrl.restarts` starts: one deterministic
/// residual-quantile start plus random hard assignments. Returns the start
/// with the largest log-likelihood.
pub fn fit_normal_mixture(data: &Dataset, bases: &[BasisSet], ctrl: &FitControls) -> Result<RespondentFit> {
    fit_normal_mixture_on(&Sample::respondents(data), bases, ctrl)
}

pub fn fit_normal_mixture_on(sample: &Sample, bases: &[BasisSet], ctrl: &FitControls) -> Result<RespondentFit> {
    let k = bases.len();
    if k == 0 {
        return Err(Error::spec("mixture needs at least one component"));
    }
    if k == 1 {
        return fit_glm_on(sample, FamilyKind::Normal, &bases[0], ctrl);
    }
    let n = sample.len();
    let y = sample.ys();
    let designs: Vec<DMatrix<f64>> = bases.iter().map(|b| sample.design(b)).collect();
    for d in &designs {
        check_rank(d, "mixture component")?;
    }
    let sd_y = sd(y.as_slice());
    let floor = 1e-6 * sd_y;

    // Deterministic start: sort pooled residuals and slice into K groups.
    let mut pooled = bases[0].clone();
    for b in &bases[1..] {
        pooled = pooled.union(b)?;
    }
    let px = sample.design(&pooled);
    let fit = px
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let resid = &y - &px * fit;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| resid[a].total_cmp(&resid[b]));
    let mut starts: Vec<Vec<usize>> = Vec::with_capacity(ctrl.restarts.max(1));
    let mut base = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        base[i] = rank * k / n;
    }
    starts.push(base);
    for r in 1..ctrl.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(ctrl.seed);
        rng.set_stream(r as u64);
        starts.push((0..n).map(|_| rng.gen_range(0..k)).collect());
    }

    let runs: Vec<Result<EmRun>> = starts
        .par_iter()
        .map(|assign| run_mixture_em(sample, bases, &designs, &y, assign, floor, ctrl))
        .collect();
    let mut best: Option<EmRun> = None;
    for run in runs.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| run.loglik > b.loglik) {
            best = Some(run);
        }
    }
    let best = best.ok_or(Error::AllRestartsDegenerate(starts.len()))?;
    let gnorm = {
        let mut grad = vec![0.0; best.spec.n_free_params()];
        for r in 0..n {
            for (g, v) in grad.iter_mut().zip(param_score(&best.spec, sample.x(r), sample.y(r))?) {
                *g += v;
            }
        }
        grad.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    };
    Ok(RespondentFit::finish(
        OutcomeModel::Single(best.spec),
        best.loglik,
        best.iterations,
        best.converged,
        false,
        gnorm,
        best.trace,
    ))
}

fn run_mixture_em(
    sample: &Sample,
    bases: &[BasisSet],
    designs: &[DMatrix<f64>],
    y: &DVector<f64>,
    assign: &[usize],
    floor: f64,
    ctrl: &FitControls,
) -> Result<EmRun> {
    let k = bases.len();
    let n = y.len();
    let mut resp = DMatrix::<f64>::zeros(n, k);
    for (i, &a) in assign.iter().enumerate() {
        resp[(i, a)] = 1.0;
    }
    let mut comps: Vec<(f64, DVector<f64>, f64)> = Vec::with_capacity(k);
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..ctrl.mixture_max_iter {
        iterations = it + 1;
        // M-step.
        comps.clear();
        for c in 0..k {
            let w = resp.column(c);
            let nk: f64 = w.sum();
            if nk <= 1e-12 * n as f64 {
                return Err(Error::DegenerateComponent);
            }
            let x = &designs[c];
            let mut xw = x.clone();
            for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
                row *= *wi;
            }
            let xtwx = x.transpose() * &xw;
            let xtwy = xw.transpose() * y;
            let coef = xtwx.clone().lu().solve(&xtwy).ok_or(Error::DegenerateComponent)?;
            let res = y - x * &coef;
            let var = res.iter().zip(w.iter()).map(|(r, wi)| wi * r * r).sum::<f64>() / nk;
            if !(var.sqrt() > floor) {
                return Err(Error::DegenerateComponent);
            }
            comps.push((nk / n as f64, coef, var));
        }
        // E-step and log-likelihood.
        let means: Vec<DVector<f64>> = (0..k).map(|c| &designs[c] * &comps[c].1).collect();
        let mut ll = 0.0;
        let mut lp = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                let (pi, _, var) = &comps[c];
                let r = y[i] - means[c][i];
                lp[c] = pi.ln() - 0.5 * (std::f64::consts::TAU * var).ln() - r * r / (2.0 * var);
            }
            let lse = logsumexp(lp.iter().copied());
            ll += lse;
            for c in 0..k {
                resp[(i, c)] = (lp[c] - lse).exp();
            }
        }
        trace.push(ll);
        if (ll - prev).abs() <= ctrl.mixture_tol * (1.0 + ll.abs()) {
            converged = true;
            break;
        }
        prev = ll;
    }
    let components = comps
        .iter()
        .zip(bases)
        .map(|((pi, coef, var), b)| Component::new(*pi, b.clone(), coef.iter().copied().collect(), *var))
        .collect();
    // Renormalize weights against rounding.
    let mut spec_comps: Vec<Component> = components;
    let tot: f64 = spec_comps.iter().map(|c| c.weight).sum();
    for c in &mut spec_comps {
        c.weight /= tot;
    }
    let spec = OutcomeSpec::new(FamilyKind::Normal, spec_comps)?;
    let loglik = loglik(&OutcomeModel::Single(spec.clone()), sample)?;
    Ok(EmRun { spec, loglik, iterations, converged, trace })
}

/// One respondent model to compare by AIC.
#[derive(Clone, Debug)]
pub enum Candidate {
    Glm { family: FamilyKind, basis: BasisSet },
    Mixture { bases: Vec<BasisSet> },
    /// AIC search over sub-bases of `full`.
    Stepwise { family: FamilyKind, full: BasisSet },
}

impl Candidate {
    fn fit(&self, sample: &Sample, ctrl: &FitControls) -> Result<RespondentFit> {
        match self {
            Candidate::Glm { family, basis } => fit_glm_on(sample, *family, basis, ctrl),
            Candidate::Mixture { bases } => fit_normal_mixture_on(sample, bases, ctrl),
            Candidate::Stepwise { family, full } => stepwise_aic_on(sample, *family, full, ctrl),
        }
    }
}

/// Minimum-AIC fit among the candidates. Degenerate fits are excluded; ties
/// go to fewer parameters, then to the earlier candidate.
pub fn select_aic(data: &Dataset, candidates: &[Candidate], ctrl: &FitControls) -> Result<RespondentFit> {
    select_aic_on(&Sample::respondents(data), candidates, ctrl)
}

pub fn select_aic_on(sample: &Sample, candidates: &[Candidate], ctrl: &FitControls) -> Result<RespondentFit> {
    if candidates.is_empty() {
        return Err(Error::spec("no candidate models"));
    }
    let fits: Vec<Result<RespondentFit>> = candidates.par_iter().map(|c| c.fit(sample, ctrl)).collect();
    let mut best: Option<RespondentFit> = None;
    for (i, f) in fits.into_iter().enumerate() {
        match f {
            Ok(f) if !f.degenerate && f.aic.is_finite() => {
                let better = best.as_ref().is_none_or(|b| {
                    if (f.aic - b.aic).abs() <= 1e-9 * (1.0 + b.aic.abs()) {
                        f.n_params < b.n_params
                    } else {
                        f.aic < b.aic
                    }
                });
                if better {
                    best = Some(f);
                }
            }
            Ok(_) => log::debug!("candidate {i} degenerate; excluded"),
            Err(e) => log::debug!("candidate {i} failed: {e}"),
        }
    }
    best.ok_or(Error::AllCandidatesFailed)
}

/// Candidate bases formed by every subset of `full` that keeps the constant
/// (when present). Exhaustive only when there are at most 64 subsets.
pub fn subset_bases(full: &BasisSet) -> Option<Vec<BasisSet>> {
    let optional: Vec<usize> = (0..full.len()).filter(|&i| !full.terms()[i].is_constant()).collect();
    if optional.len() > 6 {
        return None;
    }
    let keep_const: Vec<usize> = (0..full.len()).filter(|&i| full.terms()[i].is_constant()).collect();
    let mut out = Vec::with_capacity(1 << optional.len());
    for mask in 0u32..(1 << optional.len()) {
        let mut idx = keep_const.clone();
        idx.extend(optional.iter().enumerate().filter(|(b, _)| mask & (1 << b) != 0).map(|(_, &i)| i));
        if idx.is_empty() {
            continue;
        }
        idx.sort_unstable();
        out.push(full.select(&idx));
    }
    Some(out)
}

/// AIC model search over sub-bases of `full` for a single-component family:
/// exhaustive when at most 64 subsets exist, greedy forward-backward
/// otherwise.
pub fn stepwise_aic_on(sample: &Sample, family: FamilyKind, full: &BasisSet, ctrl: &FitControls) -> Result<RespondentFit> {
    if let Some(bases) = subset_bases(full) {
        let cands: Vec<Candidate> = bases.into_iter().map(|basis| Candidate::Glm { family, basis }).collect();
        return select_aic_on(sample, &cands, ctrl);
    }
    let n = full.len();
    let mut in_set: Vec<bool> = full.terms().iter().map(|t| t.is_constant()).collect();
    let fit_of = |mask: &[bool]| -> Option<RespondentFit> {
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if idx.is_empty() {
            return None;
        }
        fit_glm_on(sample, family, &full.select(&idx), ctrl).ok().filter(|f| !f.degenerate)
    };
    let mut current = fit_of(&in_set);
    loop {
        let moves: Vec<Vec<bool>> = (0..n)
            .filter(|&i| !full.terms()[i].is_constant())
            .map(|i| {
                let mut m = in_set.clone();
                m[i] = !m[i];
                m
            })
            .collect();
        let results: Vec<(Vec<bool>, Option<RespondentFit>)> = moves.into_par_iter().map(|m| {
            let f = fit_of(&m);
            (m, f)
        }).collect();
        let mut improved = false;
        for (m, f) in results {
            if let Some(f) = f {
                if current.as_ref().is_none_or(|c| f.aic < c.aic - 1e-9) {
                    current = Some(f);
                    in_set = m;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    current.ok_or(Error::AllCandidatesFailed)
}

/// Fit one sub-model per level of a discrete covariate, selecting by AIC
/// among that level's candidates.
pub fn fit_grouped(data: &Dataset, var: &str, per_level: &[Vec<Candidate>], ctrl: &FitControls) -> Result<RespondentFit> {
    let col = data.schema().index_of(var).ok_or_else(|| Error::UnknownCovariate(var.to_string()))?;
    let mut specs = Vec::with_capacity(per_level.len());
    let (mut ll, mut iters, mut conv, mut gmax) = (0.0, 0, true, 0.0_f64);
    for (lvl, cands) in per_level.iter().enumerate() {
        let sample = Sample::level(data, col, lvl);
        let f = select_aic_on(&sample, cands, ctrl)?;
        ll += f.loglik;
        iters = iters.max(f.iterations);
        conv &= f.converged;
        gmax = gmax.max(f.gradient_norm);
        specs.push(f.spec().expect("per-level fits are single").clone());
    }
    let model = OutcomeModel::grouped(var, specs)?;
    Ok(RespondentFit::finish(model, ll, iters, conv, false, gmax, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{CovariateKind, Schema};
    use std::sync::Arc;

    fn dataset(x: &[f64], y: &[f64]) -> Dataset {
        let schema = Arc::new(Schema::new([("x", CovariateKind::Continuous)]));
        Dataset::new(schema, x.to_vec(), y.iter().map(|&v| Some(v)).collect()).unwrap()
    }

    #[test]
    fn exact_line_is_degenerate() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let d = dataset(&x, &y);
        let b = BasisSet::parse("1 + x", d.schema().clone()).unwrap();
        let f = fit_glm(&d, FamilyKind::Normal, &b, &FitControls::default()).unwrap();
        let s = f.spec().unwrap();
        assert!((s.components()[0].coefficients[0] - 2.0).abs() < 1e-10);
        assert!((s.components()[0].coefficients[1] - 3.0).abs() < 1e-10);
        assert!(s.components()[0].dispersion < 1e-20);
        assert!(f.degenerate);
    }

    #[test]
    fn balanced_bernoulli_is_flat() {
        let x = [-1.0, -1.0, 1.0, 1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let d = dataset(&x, &y);
        let b = BasisSet::parse("1 + x", d.schema().clone()).unwrap();
        let f = fit_glm(&d, FamilyKind::Bernoulli, &b, &FitControls::default()).unwrap();
        for c in &f.spec().unwrap().components()[0].coefficients {
            assert!(c.abs() < 1e-10);
        }
        assert!(f.converged);
    }

    #[test]
    fn rank_deficiency_reported() {
        let d = dataset(&[1.0, 1.0, 1.0, 1.0], &[0.0, 1.0, 2.0, 3.0]);
        let b = BasisSet::parse("1 + x", d.schema().clone()).unwrap();
        assert!(matches!(
            fit_glm(&d, FamilyKind::Normal, &b, &FitControls::default()),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn gamma_shape_solver() {
        for s in [0.5_f64, 2.0, 30.0] {
            let d = s.ln() - digamma(s);
            let (got, deg) = gamma_shape(d);
            assert!(!deg);
            assert!((got - s).abs() < 1e-9 * s, "{got} vs {s}");
        }
    }

    #[test]
    fn subsets_keep_constant() {
        let schema = Arc::new(Schema::new([("x", CovariateKind::Continuous), ("w", CovariateKind::Continuous)]));
        let full = BasisSet::parse("1 + x + w", schema).unwrap();
        let subs = subset_bases(&full).unwrap();
        assert_eq!(subs.len(), 4);
        assert!(subs.iter().all(BasisSet::has_constant));
    }

    #[test]
    fn analytic_scores_match_differences() {
        let schema = Arc::new(Schema::new([("x", CovariateKind::Continuous)]));
        let b1 = BasisSet::parse("1 + x", schema.clone()).unwrap();
        let b2 = BasisSet::parse("1 + x + x^2", schema.clone()).unwrap();
        let mix = OutcomeSpec::new(
            FamilyKind::Normal,
            vec![
                Component::new(0.35, b1.clone(), vec![1.0, -1.4], 0.5),
                Component::new(0.65, b2.clone(), vec![-1.5, -0.5, 1.0], 0.7),
            ],
        )
        .unwrap();
        let gam = OutcomeSpec::single(FamilyKind::Gamma, b1.clone(), vec![0.2, 0.3], 2.5).unwrap();
        let poi = OutcomeSpec::single(FamilyKind::Poisson, b2, vec![0.2, 0.3, -0.1], 1.0).unwrap();
        for (spec, y) in [(&mix, 0.3), (&mix, -2.0), (&gam, 1.7), (&poi, 3.0)] {
            for x in [-1.2, 0.0, 0.8] {
                let a = param_score(spec, &[x], y).unwrap();
                let n = param_score_numeric(spec, &[x], y).unwrap();
                for (u, v) in a.iter().zip(&n) {
                    assert!((u - v).abs() <= 1e-6 * (1.0 + v.abs()), "{u} vs {v}");
                }
            }
        }
    }
}
