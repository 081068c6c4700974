//! Respondent-sample generation and mixture EM checks.

use std::sync::Arc;

use fracimp::basis::{BasisSet, CovariateKind, Schema};
use fracimp::data::Dataset;
use fracimp::respondent::{fit_normal_mixture, FitControls};
use fracimp::sim::{true_model, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn schema() -> Arc<Schema> {
    Arc::new(Schema::new([("x", CovariateKind::Continuous)]))
}

pub fn basis(f: &str) -> BasisSet {
    BasisSet::parse(f, schema()).unwrap()
}

/// Complete cases drawn from a scenario's respondent model.
pub fn respondents(scn: &Scenario, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = true_model(scn);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        ys.push(Some(model.law_at(&[x]).unwrap().sample(&mut rng)));
        xs.push(x);
    }
    Dataset::new(schema(), xs, ys).unwrap()
}

/// The mixture EM log-likelihood trace never decreases.
/// Returns `Ok(false)` when the fit itself fails.
pub fn check_mixture_monotone(n: usize, seed: u64) -> Result<bool, String> {
    let d = respondents(&Scenario::s3(), n, seed);
    let ctrl = FitControls { seed, ..FitControls::default() };
    let Ok(f) = fit_normal_mixture(&d, &[basis("1 + x"), basis("1 + x + x^2")], &ctrl) else {
        return Ok(false);
    };
    for w in f.trace.windows(2) {
        if w[1] < w[0] - 1e-9 {
            return Err(format!("{} -> {}", w[0], w[1]));
        }
    }
    Ok(true)
}
