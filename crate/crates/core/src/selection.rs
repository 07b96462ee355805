//! Approximate BIC/ICL, variational entropy, pseudo-R² and rank choice.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::elbo::pairwise_sum;
use crate::error::{PlnError, Result};
use crate::model::{CountTable, Design, FitResult};

pub const GLM_MAX_ITERATIONS: usize = 50;
pub const GLM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criteria {
    pub elbo: f64,
    pub bic: f64,
    pub icl: f64,
    pub entropy: f64,
    /// `None` when the denominator vanishes or the null GLM failed.
    pub r2: Option<f64>,
    pub loglik_model: Option<f64>,
    pub loglik_null: Option<f64>,
    pub loglik_saturated: Option<f64>,
}

/// Log-likelihoods entering the pseudo-R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logliks {
    pub model: f64,
    pub null: f64,
    pub saturated: f64,
}

impl Criteria {
    pub fn new(
        elbo: f64,
        sds: &DMatrix<f64>,
        n: usize,
        p: usize,
        d: usize,
        logliks: Option<Logliks>,
    ) -> Self {
        let q = sds.ncols();
        let (bic, icl, entropy) = bic_icl(elbo, sds, n, p, d, q);
        Self {
            elbo,
            bic,
            icl,
            entropy,
            r2: logliks.and_then(|l| pseudo_r2_from_logliks(l.model, l.null, l.saturated)),
            loglik_model: logliks.map(|l| l.model),
            loglik_null: logliks.map(|l| l.null),
            loglik_saturated: logliks.map(|l| l.saturated),
        }
    }

    /// Pseudo-R² against an externally supplied null log-likelihood, e.g.
    /// the offsets-only null when comparing nested covariate models.
    pub fn corrected_r2(&self, external_null: f64) -> Option<f64> {
        pseudo_r2_from_logliks(self.loglik_model?, external_null, self.loglik_saturated?)
    }
}

/// Entropy of `⊗ N(m_i, diag(s_i²))`: `nq/2·log(2πe) + Σ log S_ik`.
pub fn entropy(sds: &DMatrix<f64>) -> f64 {
    let (n, q) = sds.shape();
    let logs: Vec<f64> = sds.iter().map(|s| s.ln()).collect();
    0.5 * (n * q) as f64 * (2.0 * PI * E).ln() + pairwise_sum(&logs)
}

/// `(BIC, ICL, entropy)` with `BIC = J − ½p(d+q)log n` and `ICL = BIC − entropy`.
pub fn bic_icl(elbo: f64, sds: &DMatrix<f64>, n: usize, p: usize, d: usize, q: usize) -> (f64, f64, f64) {
    let bic = elbo - 0.5 * (p * (d + q)) as f64 * (n as f64).ln();
    let h = entropy(sds);
    (bic, bic - h, h)
}

/// `Σ_{Ω} [Y λ − exp λ − log Y!]`.
pub fn poisson_loglik(counts: &CountTable, lambda: &DMatrix<f64>) -> f64 {
    masked_column_sums(counts, |y, i, j| {
        let l = lambda[(i, j)];
        y * l - l.exp() - crate::nef::ln_factorial(y)
    })
}

/// Saturated model `λ = log Y` with `0·log 0 = 0`.
pub fn saturated_loglik(counts: &CountTable) -> f64 {
    masked_column_sums(counts, |y, _, _| {
        let core = if y > 0.0 { y * y.ln() - y } else { 0.0 };
        core - crate::nef::ln_factorial(y)
    })
}

fn masked_column_sums<F: Fn(f64, usize, usize) -> f64>(counts: &CountTable, term: F) -> f64 {
    let (n, p) = counts.counts().shape();
    let columns: Vec<f64> = (0..p)
        .map(|j| {
            (0..n)
                .filter(|&i| counts.is_observed(i, j))
                .map(|i| term(counts.counts()[(i, j)], i, j))
                .sum()
        })
        .collect();
    pairwise_sum(&columns)
}

/// `(ℓ_q − ℓ_min) / (ℓ_max − ℓ_min)`; `None` on a vanishing denominator.
pub fn pseudo_r2_from_logliks(model: f64, null: f64, saturated: f64) -> Option<f64> {
    let denom = saturated - null;
    if !denom.is_finite() || denom.abs() <= 1e-12 * saturated.abs().max(1.0) {
        return None;
    }
    Some((model - null) / denom)
}

/// Per-column Poisson GLM with offsets and covariates, no latent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NullModel {
    /// p×d coefficients.
    pub theta: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: Vec<usize>,
}

impl NullModel {
    pub fn fit(counts: &CountTable, design: &Design) -> Result<Self> {
        let (p, d) = (counts.ncols(), design.ncovariates());
        let fits: Vec<Result<(DVector<f64>, usize)>> = map_columns(p, |j| fit_column(counts, design, j));
        let mut theta = DMatrix::zeros(p, d);
        let mut iterations = Vec::with_capacity(p);
        for (j, fit) in fits.into_iter().enumerate() {
            let (beta, iters) = fit?;
            theta.row_mut(j).copy_from(&beta.transpose());
            iterations.push(iters);
        }
        let loglik = poisson_loglik(counts, &design.linear_predictor(&theta));
        Ok(Self {
            theta,
            loglik,
            iterations,
        })
    }
}

#[cfg(feature = "parallel")]
fn map_columns<T: Send, F: Fn(usize) -> T + Sync + Send>(p: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..p).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_columns<T, F: Fn(usize) -> T>(p: usize, f: F) -> Vec<T> {
    (0..p).map(f).collect()
}

/// Iteratively reweighted least squares for one column.
fn fit_column(counts: &CountTable, design: &Design, j: usize) -> Result<(DVector<f64>, usize)> {
    let rows: Vec<usize> = (0..counts.nrows()).filter(|&i| counts.is_observed(i, j)).collect();
    let d = design.ncovariates();
    let x = DMatrix::from_fn(rows.len(), d, |r, k| design.covariates()[(rows[r], k)]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| counts.counts()[(i, j)]));
    let off = DVector::from_iterator(rows.len(), rows.iter().map(|&i| design.offsets()[(i, j)]));

    let mut mu = y.map(|v| v + 0.1);
    let mut eta = mu.map(f64::ln);
    let mut deviance = f64::INFINITY;
    for iter in 1..=GLM_MAX_ITERATIONS {
        let z = DVector::from_fn(rows.len(), |r, _| eta[r] - off[r] + (y[r] - mu[r]) / mu[r]);
        let mut xtwx = DMatrix::zeros(d, d);
        let mut xtwz = DVector::zeros(d);
        for r in 0..rows.len() {
            let xr = x.row(r).transpose();
            xtwx.ger(mu[r], &xr, &xr, 1.0);
            xtwz.axpy(mu[r] * z[r], &xr, 1.0);
        }
        let chol = xtwx.cholesky().ok_or(PlnError::GlmNonConvergence {
            column: j,
            iterations: iter,
        })?;
        let beta = chol.solve(&xtwz);
        eta = &x * &beta + &off;
        mu = eta.map(f64::exp);
        let new_deviance: f64 = 2.0
            * y.iter()
                .zip(mu.iter())
                .map(|(&yv, &m)| {
                    let log_term = if yv > 0.0 { yv * (yv / m).ln() } else { 0.0 };
                    log_term - (yv - m)
                })
                .sum::<f64>();
        if !new_deviance.is_finite() {
            break;
        }
        if (new_deviance - deviance).abs() / (new_deviance.abs() + 0.1) < GLM_TOLERANCE {
            return Ok((beta, iter));
        }
        deviance = new_deviance;
    }
    Err(PlnError::GlmNonConvergence {
        column: j,
        iterations: GLM_MAX_ITERATIONS,
    })
}

/// `ℓ_q`, `ℓ_min`, `ℓ_max` for a fit, `λ⁽q⁾ = Z̃`.
pub fn logliks(fit: &FitResult, counts: &CountTable, null: &NullModel) -> Logliks {
    Logliks {
        model: poisson_loglik(counts, &fit.latent.z_tilde),
        null: null.loglik,
        saturated: saturated_loglik(counts),
    }
}

/// Pseudo-R² of a Poisson fit; the null GLM is fitted here.
pub fn pseudo_r2(fit: &FitResult, counts: &CountTable, design: &Design) -> Result<Option<f64>> {
    let null = NullModel::fit(counts, design)?;
    let l = logliks(fit, counts, &null);
    Ok(pseudo_r2_from_logliks(l.model, l.null, l.saturated))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Icl,
    Bic,
}

impl Criterion {
    pub fn value(self, c: &Criteria) -> f64 {
        match self {
            Criterion::Icl => c.icl,
            Criterion::Bic => c.bic,
        }
    }
}

/// Rank maximizing `criterion`; ties go to the smaller rank.
pub fn select_rank<'a, I>(fits: I, criterion: Criterion) -> Option<usize>
where
    I: IntoIterator<Item = (usize, &'a Criteria)>,
{
    let mut ranked: Vec<(usize, f64)> = fits
        .into_iter()
        .map(|(q, c)| (q, criterion.value(c)))
        .filter(|(_, v)| !v.is_nan())
        .collect();
    ranked.sort_by_key(|&(q, _)| q);
    let mut best: Option<(usize, f64)> = None;
    for (q, v) in ranked {
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((q, v));
        }
    }
    best.map(|(q, _)| q)
}
