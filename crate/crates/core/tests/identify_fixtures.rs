use std::sync::Arc;

use fracimp::basis::{BasisSet, CovariateKind, Schema};
use fracimp::expfam::{Component, FamilyKind, OutcomeSpec};
use fracimp::identify::{
    check, check_mixture, check_single, permutation_certificate, IdentifyOptions, Rule, Status, ValueMode,
};
use itertools::Itertools;
use num_rational::Ratio;
use proptest::prelude::*;

fn schema(kind: CovariateKind) -> Arc<Schema> {
    Arc::new(Schema::new([("x", kind)]))
}

fn basis(f: &str, s: &Arc<Schema>) -> BasisSet {
    BasisSet::parse(f, s.clone()).unwrap()
}

fn declared() -> IdentifyOptions {
    IdentifyOptions { values: ValueMode::Declared, ..IdentifyOptions::default() }
}

fn normal(f: &str, coef: Vec<f64>, s: &Arc<Schema>) -> OutcomeSpec {
    OutcomeSpec::single(FamilyKind::Normal, basis(f, s), coef, 0.5).unwrap()
}

fn mixture(parts: &[(f64, &str, Vec<f64>, f64)], s: &Arc<Schema>) -> OutcomeSpec {
    let comps = parts
        .iter()
        .map(|(w, f, c, v)| Component::new(*w, basis(f, s), c.clone(), *v))
        .collect();
    OutcomeSpec::new(FamilyKind::Normal, comps).unwrap()
}

#[test]
fn quadratic_mean_is_identifiable() {
    let s = schema(CovariateKind::Continuous);
    let v = check_single(&normal("1 + x + x^2", vec![0.0, 0.4, 1.0], &s), &basis("1 + x", &s), &declared()).unwrap();
    assert_eq!(v.status, Status::ProvablyIdentifiable);
    assert_eq!(v.rule, Rule::NormalExtraTerm);
    assert!(v.certificate.contains("x^2"), "{}", v.certificate);
}

#[test]
fn linear_mean_is_not_provable() {
    let s = schema(CovariateKind::Continuous);
    let h = basis("1 + x", &s);
    let v = check_single(&normal("1 + x", vec![0.0, 0.4], &s), &h, &declared()).unwrap();
    assert_eq!(v.status, Status::NotProvable);
    // A zero quadratic coefficient drops the term when values are declared.
    let v = check_single(&normal("1 + x + x^2", vec![0.0, 0.4, 0.0], &s), &h, &declared()).unwrap();
    assert_eq!(v.status, Status::NotProvable);
}

#[test]
fn binary_covariate_counts_cells() {
    let s = schema(CovariateKind::Binary);
    let v = check_single(&normal("1 + x", vec![0.0, 0.4], &s), &basis("1 + x", &s), &declared()).unwrap();
    assert_eq!(v.status, Status::NotProvable);
    assert_eq!(v.rule, Rule::DiscreteCount);
    assert!(v.certificate.contains('3') && v.certificate.contains('2'), "{}", v.certificate);
}

#[test]
fn quadratic_mixture_is_identifiable() {
    let s = schema(CovariateKind::Continuous);
    let spec = mixture(&[(0.35, "1 + x", vec![1.0, -1.4], 0.5), (0.65, "1 + x + x^2", vec![-1.5, -0.5, 1.0], 0.5)], &s);
    let v = check_mixture(&spec, &basis("1 + x", &s), &declared()).unwrap();
    assert_eq!(v.status, Status::ProvablyIdentifiable);
    assert_eq!(v.rule, Rule::MixtureExtraTerm);
}

/// Weights and variances with `0.5 v1 + log p1 = 0.5 v2 + log p2`.
fn swap_pair() -> ((f64, f64), (f64, f64)) {
    let (v1, p1) = (1.0_f64, 0.4_f64);
    let p2 = 1.0 - p1;
    ((p1, v1), (p2, v1 + 2.0 * (p1 / p2).ln()))
}

#[test]
fn symmetric_pair_is_unidentifiable() {
    let s = schema(CovariateKind::Continuous);
    let h = basis("1 + x", &s);
    let ((p1, v1), (p2, v2)) = swap_pair();
    let spec = mixture(&[(p1, "x^2", vec![1.0], v1), (p2, "x^2", vec![-1.0], v2)], &s);
    // Responses x + y and x - y.
    let at_one = IdentifyOptions { beta: Some(1.0), ..declared() };
    let v = check_mixture(&spec, &h, &at_one).unwrap();
    assert_eq!(v.status, Status::ProvablyUnidentifiable, "{v}");
    assert_eq!(v.rule, Rule::SymmetricPairCounterexample);

    let v = check_mixture(&spec, &h, &declared()).unwrap();
    assert_eq!(v.status, Status::NotProvable);
    assert!(v.notes.iter().any(|n| n.contains("|beta| = 1.000000")), "{v}");

    let v = check_mixture(&spec, &h, &IdentifyOptions { beta: Some(0.5), ..declared() }).unwrap();
    assert_eq!(v.status, Status::NotProvable);

    let known = IdentifyOptions { sign_beta_known: true, ..at_one };
    assert_eq!(check_mixture(&spec, &h, &known).unwrap().status, Status::ProvablyIdentifiable);
}

#[test]
fn linear_pair_without_extra_terms() {
    let s = schema(CovariateKind::Continuous);
    let h = basis("1 + x", &s);
    let ((p1, v1), (p2, v2)) = swap_pair();
    let spec = mixture(&[(p1, "1 + x", vec![0.0, 1.0], v1), (p2, "1 + x", vec![0.0, 2.0], v2)], &s);
    // Responses x + y and 4x - y.
    let v = check_mixture(&spec, &h, &IdentifyOptions { beta: Some(1.0), ..declared() }).unwrap();
    assert_eq!(v.status, Status::ProvablyUnidentifiable, "{v}");
    assert_eq!(v.rule, Rule::LinearPairCounterexample);
    assert!(v.notes.iter().any(|n| n.contains("extra-term class is empty")), "{v}");

    let equal = mixture(&[(0.5, "1 + x", vec![0.0, 1.0], 1.0), (0.5, "1 + x", vec![0.0, 2.0], 1.0)], &s);
    let v = check_mixture(&equal, &h, &declared()).unwrap();
    assert_eq!(v.status, Status::ProvablyUnidentifiable, "{v}");
    assert_eq!(v.rule, Rule::LinearPairCounterexample);

    // Unequal weights with equal variances satisfy every two-component condition.
    let ok = mixture(&[(0.3, "1 + x", vec![0.0, 1.0], 1.0), (0.7, "1 + x", vec![0.0, 2.0], 1.0)], &s);
    let v = check_mixture(&ok, &h, &declared()).unwrap();
    assert_eq!(v.status, Status::ProvablyIdentifiable, "{v}");
    assert_eq!(v.rule, Rule::TwoComponentLinear);
}

#[test]
fn single_component_mixture_agrees_with_single() {
    let cont = schema(CovariateKind::Continuous);
    let bin = schema(CovariateKind::Binary);
    let cases = [
        (normal("1 + x + x^2", vec![0.0, 0.4, 1.0], &cont), basis("1 + x", &cont)),
        (normal("1 + x", vec![0.0, 0.4], &cont), basis("1 + x", &cont)),
        (normal("1 + x", vec![0.0, 0.4], &bin), basis("1 + x", &bin)),
        (normal("1 + x^3", vec![0.0, 0.4], &cont), basis("1 + x + x^2", &cont)),
    ];
    for (spec, h) in &cases {
        for mode in [ValueMode::Structural, ValueMode::Declared] {
            let o = IdentifyOptions { values: mode, ..IdentifyOptions::default() };
            let a = check_single(spec, h, &o).unwrap();
            let b = check_mixture(spec, h, &o).unwrap();
            assert_eq!(a.status, b.status);
            assert_eq!(check(spec, h, &o).unwrap().status, a.status);
        }
    }
}

#[test]
fn certificates_for_reference_slopes() {
    assert!(permutation_certificate(&[3.0, 2.0, 1.0]).unwrap().is_some());
    assert!(permutation_certificate(&[5.0, 2.0, 1.0]).unwrap().is_none());
    let c = permutation_certificate(&[1.0, 2.0]).unwrap().unwrap();
    assert_eq!(c.r, 3.0);
}

/// Exact search over permutations in rational arithmetic.
fn rational_oracle(slopes: &[Ratio<i64>]) -> bool {
    let k = slopes.len();
    (0..k).permutations(k).any(|p| {
        let r = slopes[0] + slopes[p[0]];
        (1..k).all(|i| slopes[i] + slopes[p[i]] == r)
    })
}

fn distinct_slopes() -> impl Strategy<Value = Vec<Ratio<i64>>> {
    (2usize..=6).prop_flat_map(|k| {
        prop::collection::btree_set((-12i64..=12, 1i64..=4), k).prop_filter_map("distinct values", |set| {
            let v: Vec<Ratio<i64>> = set.into_iter().map(|(n, d)| Ratio::new(n, d)).collect();
            let uniq: std::collections::BTreeSet<_> = v.iter().cloned().collect();
            (uniq.len() == v.len()).then_some(v)
        })
    })
}

fn to_f64(r: &Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn certificate_matches_rational_oracle(slopes in distinct_slopes()) {
        let f: Vec<f64> = slopes.iter().map(to_f64).collect();
        let got = permutation_certificate(&f).unwrap();
        prop_assert_eq!(got.is_some(), rational_oracle(&slopes));
        if let Some(c) = got {
            for i in 0..f.len() {
                prop_assert!((f[i] + f[c.perm[i]] - c.r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn certificate_is_scale_invariant(slopes in distinct_slopes(), c in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64]) {
        let f: Vec<f64> = slopes.iter().map(to_f64).collect();
        let g: Vec<f64> = f.iter().map(|v| c * v).collect();
        prop_assert_eq!(
            permutation_certificate(&f).unwrap().is_some(),
            permutation_certificate(&g).unwrap().is_some()
        );
    }
}

#[test]
fn certificate_search_covers_k6_exhaustively() {
    // Evenly spaced slopes pair up under reversal.
    let ok: Vec<f64> = (0..6).map(f64::from).collect();
    assert!(permutation_certificate(&ok).unwrap().is_some());
    let mut bad = ok.clone();
    bad[5] = 5.5;
    let exact: Vec<Ratio<i64>> = [0, 2, 4, 6, 8, 11].iter().map(|&n| Ratio::new(n, 2)).collect();
    assert_eq!(permutation_certificate(&bad).unwrap().is_some(), rational_oracle(&exact));
}
