use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// Coordinates skipped because the loss has a kink within one step.
    pub coordinates_excluded: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Checked coordinates per parameter; `None` checks every coordinate.
    pub coordinates_per_param: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// One-sided slopes differing by more than this (relative to
    /// `max(1, |central|)`) mark a kink.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coordinates_per_param: None,
            seed: 0,
            floor: 1e-6,
            kink_tolerance: 1e-3,
        }
    }
}

/// Compares `backward()` with `(f(t+h) - f(t-h)) / 2h` over trainable
/// parameters and returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_check<F>(
    store: &ParameterStore,
    build_loss: F,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = build_loss(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let loss = build_loss(&mut g)?;
        Ok(g.scalar(loss))
    };
    let base = eval(store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work = store.clone();
    let h = options.step;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates_checked: 0,
        coordinates_excluded: 0,
    };
    let params: Vec<(String, usize, bool)> = store
        .iter()
        .map(|p| (p.name.clone(), p.value.len(), p.trainable))
        .collect();
    for (name, len, trainable) in params {
        if !trainable {
            continue;
        }
        let coords: Vec<usize> = match options.coordinates_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let original = work.get(&name).expect("known parameter").data()[c];
            work.get_mut(&name).unwrap().data_mut()[c] = original + h;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[c] = original - h;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let forward = (plus - base) / h;
            let backward = (base - minus) / h;
            if (forward - backward).abs() > options.kink_tolerance * numeric.abs().max(1.0) {
                report.coordinates_excluded += 1;
                continue;
            }
            let exact = analytic.get(&name).map_or(0.0, |g| g.data()[c]);
            let denom = exact.abs().max(numeric.abs()).max(options.floor);
            let err = (exact - numeric).abs() / denom;
            report.max_relative_error = report.max_relative_error.max(err);
            report.coordinates_checked += 1;
        }
    }
    Ok(report)
}
