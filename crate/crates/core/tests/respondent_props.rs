mod common;

use common::respondent_checks::*;
use fracimp::data::Dataset;
use fracimp::expfam::{FamilyKind, OutcomeModel, OutcomeSpec};
use fracimp::respondent::{fit_glm, fit_normal_mixture, loglik, param_score, select_aic, Candidate, FitControls, Sample};
use fracimp::sim::{true_model, Scenario};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Inverse outer-product-of-scores covariance of the flat parameters.
fn opg_covariance(model: &OutcomeModel, data: &Dataset) -> DMatrix<f64> {
    let spec = &model.specs()[0];
    let q = spec.n_free_params();
    let mut m = DMatrix::zeros(q, q);
    for i in 0..data.n() {
        let g = DVector::from_vec(param_score(spec, data.x(i), data.y(i).unwrap()).unwrap());
        m += &g * g.transpose();
    }
    m.try_inverse().unwrap()
}

#[test]
fn s2_logistic_within_three_se() {
    let d = respondents(&Scenario::s2(), 10_000, 17);
    let f = fit_glm(&d, FamilyKind::Bernoulli, &basis("1 + x"), &FitControls::default()).unwrap();
    let coef = &f.spec().unwrap().components()[0].coefficients;
    // Expected information X^T W X at the estimate.
    let mut info = DMatrix::zeros(2, 2);
    for i in 0..d.n() {
        let x = d.x(i)[0];
        let p = 1.0 / (1.0 + (-(coef[0] + coef[1] * x)).exp());
        let v = DVector::from_vec(vec![1.0, x]);
        info += &v * v.transpose() * (p * (1.0 - p));
    }
    let cov = info.try_inverse().unwrap();
    for (k, truth) in [-0.21, 5.9].iter().enumerate() {
        let z = (coef[k] - truth) / cov[(k, k)].sqrt();
        assert!(z.abs() <= 3.0, "coefficient {k}: {} (z {z})", coef[k]);
    }
}

#[test]
fn s3_mixture_within_three_se() {
    let scn = Scenario::s3();
    let d = respondents(&scn, 10_000, 17);
    let f = fit_normal_mixture(&d, &[basis("1 + x"), basis("1 + x + x^2")], &FitControls::default()).unwrap();
    let cov = opg_covariance(&f.model, &d);
    let got = f.model.params();
    let truth = true_model(&scn).params();
    for k in 0..got.len() {
        let z = (got[k] - truth[k]) / cov[(k, k)].sqrt();
        assert!(z.abs() <= 3.0, "parameter {k}: {} vs {} (z {z})", got[k], truth[k]);
    }
}

#[test]
fn separated_components_match_labeled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let (mut xs, mut ys, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let upper = rng.gen::<f64>() < 0.5;
        let e: f64 = rng.sample(StandardNormal);
        xs.push(rng.sample::<f64, _>(StandardNormal));
        ys.push(if upper { 10.0 + e } else { -10.0 + e });
        labels.push(upper);
    }
    let d = Dataset::new(schema(), xs, ys.iter().map(|&y| Some(y)).collect()).unwrap();
    let f = fit_normal_mixture(&d, &[basis("1"), basis("1")], &FitControls::default()).unwrap();
    let comps = f.spec().unwrap().components();

    // Oracle: fit each labeled half on its own.
    let half = |up: bool| {
        let v: Vec<f64> = ys.iter().zip(&labels).filter(|(_, l)| **l == up).map(|(y, _)| *y).collect();
        (v.len() as f64 / n as f64, v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut fitted: Vec<(f64, f64)> = comps.iter().map(|c| (c.weight, c.coefficients[0])).collect();
    fitted.sort_by(|a, b| a.1.total_cmp(&b.1));
    for ((w, m), (ow, om)) in fitted.iter().zip([half(false), half(true)]) {
        assert!((w - ow).abs() <= 0.03, "weight {w} vs {ow}");
        assert!((m - om).abs() <= 0.2, "mean {m} vs {om}");
    }
}

#[test]
fn single_component_mixture_is_the_glm() {
    let d = respondents(&Scenario::s1(1.0), 500, 5);
    let b = basis("1 + x + x^2");
    let a = fit_normal_mixture(&d, std::slice::from_ref(&b), &FitControls::default()).unwrap();
    let g = fit_glm(&d, FamilyKind::Normal, &b, &FitControls::default()).unwrap();
    assert_eq!(a.model, g.model);
    assert_eq!(a.aic, g.aic);
}

#[test]
fn quadratic_beats_linear_by_aic() {
    let d = respondents(&Scenario::s1(1.0), 2000, 9);
    // Oracle AIC of a normal linear model from least squares.
    let ols_aic = |cols: usize| {
        let x = DMatrix::from_fn(d.n(), cols, |i, j| d.x(i)[0].powi(j as i32));
        let y = DVector::from_fn(d.n(), |i, _| d.y(i).unwrap());
        let coef = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        let rss = (&y - &x * coef).norm_squared();
        let n = d.n() as f64;
        let ll = -0.5 * n * ((std::f64::consts::TAU * rss / n).ln() + 1.0);
        -2.0 * ll + 2.0 * (cols + 1) as f64
    };
    let (lin, quad) = (ols_aic(2), ols_aic(3));
    assert!(quad < lin);
    let cands = [
        Candidate::Glm { family: FamilyKind::Normal, basis: basis("1 + x") },
        Candidate::Glm { family: FamilyKind::Normal, basis: basis("1 + x + x^2") },
    ];
    let best = select_aic(&d, &cands, &FitControls::default()).unwrap();
    assert_eq!(best.model.specs()[0].components()[0].basis().len(), 3);
    assert!((best.aic - quad).abs() <= 1e-6 * quad.abs(), "{} vs {quad}", best.aic);
}

#[test]
fn collapsed_candidate_is_excluded() {
    let xs: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
    let ys: Vec<Option<f64>> = xs.iter().map(|x| Some(2.0 + 3.0 * x)).collect();
    let d = Dataset::new(schema(), xs, ys).unwrap();
    let cands = [
        Candidate::Glm { family: FamilyKind::Normal, basis: basis("1 + x") },
        Candidate::Glm { family: FamilyKind::Normal, basis: basis("1") },
    ];
    let best = select_aic(&d, &cands, &FitControls::default()).unwrap();
    assert_eq!(best.model.specs()[0].components()[0].basis().len(), 1);
}

#[test]
fn glm_gradient_vanishes_at_optimum() {
    let cases = [
        (FamilyKind::Normal, Scenario::s1(1.0), "1 + x + x^2"),
        (FamilyKind::Bernoulli, Scenario::s2(), "1 + x"),
    ];
    for (fam, scn, f) in cases {
        let d = respondents(&scn, 800, 21);
        let fit = fit_glm(&d, fam, &basis(f), &FitControls::default()).unwrap();
        let sample = Sample::respondents(&d);
        let p = fit.model.params();
        for k in 0..p.len() {
            let h = 1e-6 * (1.0 + p[k].abs());
            let mut up = p.clone();
            up[k] += h;
            let mut dn = p.clone();
            dn[k] -= h;
            let lu = loglik(&fit.model.with_params(&up).unwrap(), &sample).unwrap();
            let ld = loglik(&fit.model.with_params(&dn).unwrap(), &sample).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            assert!(fd.abs() <= 1e-5, "{fam:?} parameter {k}: {fd}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mixture_em_is_monotone(n in 200usize..600, seed in any::<u64>()) {
        check_mixture_monotone(n, seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn relabeled_mixture_has_same_fit(n in 200usize..500, seed in any::<u64>()) {
        let d = respondents(&Scenario::s3(), n, seed);
        let ctrl = FitControls { seed, ..FitControls::default() };
        if let Ok(f) = fit_normal_mixture(&d, &[basis("1 + x"), basis("1 + x + x^2")], &ctrl) {
            let spec = f.spec().unwrap();
            let mut comps = spec.components().to_vec();
            comps.reverse();
            let swapped = OutcomeModel::Single(OutcomeSpec::new(FamilyKind::Normal, comps).unwrap());
            let sample = Sample::respondents(&d);
            let ls = loglik(&swapped, &sample).unwrap();
            prop_assert!((ls - f.loglik).abs() <= 1e-10 * f.loglik.abs(), "{ls} vs {}", f.loglik);
            prop_assert_eq!(swapped.n_free_params(), f.n_params);
        }
    }
}
