//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string.
//! The `*_json` functions hold the logic so they can be tested natively.

use nalgebra::{DMatrix, DVector};
use plnfit::viz::{self, FactorMap};
use plnfit::{
    fit_rank, fit_rank_scan, model, sample, Criterion, Family, OptimConfig, PlnError, SimSpec,
};
use plnfit::simulate::LoadingsSpec;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Sizes above this keep the page responsive enough on one thread.
const MAX_CELLS: usize = 40_000;

#[derive(Debug, Serialize)]
struct FitView {
    n: usize,
    p: usize,
    rank: usize,
    elbo: f64,
    iterations: usize,
    status: &'static str,
    bic: f64,
    icl: f64,
    r2: Option<f64>,
    axis_labels: Vec<String>,
    scores: Vec<[f64; 2]>,
    correlations: Vec<[f64; 2]>,
    variables: Vec<String>,
    sigma_rel_error: f64,
    trace: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ScanView {
    ranks: Vec<usize>,
    elbo: Vec<Option<f64>>,
    bic: Vec<Option<f64>>,
    icl: Vec<Option<f64>>,
    best_bic: Option<usize>,
    best_icl: Option<usize>,
}

#[derive(Debug, Serialize)]
struct MomentsView {
    mu: Vec<f64>,
    mean: Vec<f64>,
    variance: Vec<f64>,
    poisson_variance: Vec<f64>,
}

fn spec(n: usize, p: usize, q: usize, scale: f64, missing: f64, seed: u64) -> Result<SimSpec, PlnError> {
    if n * p > MAX_CELLS {
        return Err(PlnError::Config(format!("n·p = {} exceeds the demo limit {MAX_CELLS}", n * p)));
    }
    Ok(SimSpec {
        loadings: LoadingsSpec::Random { scale },
        missing_fraction: missing,
        ..SimSpec::standard(n, p, q, 2, seed)
    })
}

fn first_two(m: &DMatrix<f64>) -> Vec<[f64; 2]> {
    m.row_iter()
        .map(|r| [r.get(0).copied().unwrap_or(0.0), r.get(1).copied().unwrap_or(0.0)])
        .collect()
}

/// Simulates data, fits rank `rank` and returns the first factor plane.
pub fn simulate_and_fit_json(
    n: usize,
    p: usize,
    q_true: usize,
    rank: usize,
    scale: f64,
    missing: f64,
    seed: u64,
) -> Result<String, PlnError> {
    let spec = spec(n, p, q_true, scale, missing, seed)?;
    let (counts, design, truth) = sample(&spec)?;
    let fit = fit_rank(&counts, &design, &Family::Poisson, rank, &OptimConfig::default())?;
    let map = FactorMap::orthogonalize(&fit.latent.p_tilde)?;
    let correlations = viz::correlation_circle(&fit.latent.p_tilde.dense(), &map.scores)?;
    let percents = viz::axis_percentages(&map, fit.criteria.r2);
    let err = (&fit.sigma_hat - &truth.sigma).norm() / truth.sigma.norm().max(f64::MIN_POSITIVE);
    let view = FitView {
        n,
        p,
        rank,
        elbo: fit.elbo,
        iterations: fit.iterations,
        status: fit.status.as_str(),
        bic: fit.criteria.bic,
        icl: fit.criteria.icl,
        r2: fit.criteria.r2,
        axis_labels: percents.iter().enumerate().map(|(k, &v)| viz::axis_label(k + 1, v)).collect(),
        scores: first_two(&map.scores),
        correlations: first_two(&correlations),
        variables: (1..=p).map(|j| format!("V{j}")).collect(),
        sigma_rel_error: err,
        trace: fit.trace,
    };
    serde_json::to_string(&view).map_err(|e| PlnError::Io(e.to_string()))
}

/// Fits ranks `1..=max_rank` on one simulated data set.
pub fn rank_scan_json(n: usize, p: usize, q_true: usize, max_rank: usize, scale: f64, seed: u64) -> Result<String, PlnError> {
    let spec = spec(n, p, q_true, scale, 0.0, seed)?;
    let (counts, design, _) = sample(&spec)?;
    let ranks: Vec<usize> = (1..=max_rank.min(p)).collect();
    let scan = fit_rank_scan(&counts, &design, &Family::Poisson, &ranks, &OptimConfig::default())?;
    let pick = |f: fn(&plnfit::FitResult) -> f64| -> Vec<Option<f64>> {
        scan.fits.iter().map(|r| r.fit.as_ref().ok().map(f)).collect()
    };
    let view = ScanView {
        ranks: scan.fits.iter().map(|r| r.rank).collect(),
        elbo: pick(|f| f.elbo),
        bic: pick(|f| f.criteria.bic),
        icl: pick(|f| f.criteria.icl),
        best_bic: scan.best(Criterion::Bic),
        best_icl: scan.best(Criterion::Icl),
    };
    serde_json::to_string(&view).map_err(|e| PlnError::Io(e.to_string()))
}

/// Marginal mean and variance of one Poisson-lognormal count along a grid of `μ`.
pub fn moments_curve_json(sigma2: f64, mu_min: f64, mu_max: f64, steps: usize) -> Result<String, PlnError> {
    if !(sigma2 >= 0.0) || !mu_min.is_finite() || !(mu_max > mu_min) || steps < 2 {
        return Err(PlnError::Config("need σ² ≥ 0, μ_min < μ_max and at least 2 steps".into()));
    }
    let sigma = DMatrix::from_element(1, 1, sigma2);
    let mut view = MomentsView {
        mu: Vec::with_capacity(steps),
        mean: Vec::with_capacity(steps),
        variance: Vec::with_capacity(steps),
        poisson_variance: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let mu = mu_min + (mu_max - mu_min) * k as f64 / (steps - 1) as f64;
        let m = model::pln_moments(&DVector::from_element(1, mu), &sigma)?;
        view.mu.push(mu);
        view.mean.push(m.mean[0]);
        view.variance.push(m.variance[0]);
        view.poisson_variance.push(m.mean[0]);
    }
    serde_json::to_string(&view).map_err(|e| PlnError::Io(e.to_string()))
}

fn js(r: Result<String, PlnError>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate_and_fit(
    n: usize,
    p: usize,
    q_true: usize,
    rank: usize,
    scale: f64,
    missing: f64,
    seed: u32,
) -> Result<String, JsValue> {
    js(simulate_and_fit_json(n, p, q_true, rank, scale, missing, seed.into()))
}

#[wasm_bindgen]
pub fn rank_scan(n: usize, p: usize, q_true: usize, max_rank: usize, scale: f64, seed: u32) -> Result<String, JsValue> {
    js(rank_scan_json(n, p, q_true, max_rank, scale, seed.into()))
}

#[wasm_bindgen]
pub fn moments_curve(sigma2: f64, mu_min: f64, mu_max: f64, steps: usize) -> Result<String, JsValue> {
    js(moments_curve_json(sigma2, mu_min, mu_max, steps))
}
