//! Seeded Poisson-lognormal data and a quadrature marginal likelihood for
//! small instances.
//!
//! All randomness comes from one `xoshiro256++` stream seeded with
//! `seed_from_u64(seed)`. Normals are inverse-CDF transforms of
//! `u = (⌊x / 2¹¹⌋ + ½)·2⁻⁵³`. Draw order: random Θ (row-major), random B
//! (row-major), covariates (row-major), offsets, W (row-major), Y
//! (row-major), missingness (row-major).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Poisson};
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PlnError, Result};
use crate::model::{symmetrize, CountTable, Design};
use crate::quadrature::GaussHermite;

pub const RNG_ALGORITHM: &str = "xoshiro256++";

/// Largest Poisson rate accepted; counts stay exactly representable.
pub const MAX_RATE: f64 = 1e15;

pub const ORACLE_NODES: usize = 100;

/// Source of `Θ` (p×d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ThetaSpec {
    /// Rows are variables.
    Explicit { rows: Vec<Vec<f64>> },
    /// Intercepts `N(intercept_mean, intercept_sd²)`, other coefficients `N(0, coef_sd²)`.
    Random {
        intercept_mean: f64,
        intercept_sd: f64,
        coef_sd: f64,
    },
}

/// Source of `B` (p×q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LoadingsSpec {
    Explicit { rows: Vec<Vec<f64>> },
    /// `B = U_q Λ_q^{1/2}` of a given covariance (rank q approximation).
    Covariance { rows: Vec<Vec<f64>> },
    /// Entries `N(0, scale²)`.
    Random { scale: f64 },
}

/// Covariates besides the intercept column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CovariateSpec {
    /// `d − 1` columns of `N(0, sd²)` draws.
    Gaussian { sd: f64 },
    /// Rows are samples; an intercept column is prepended.
    Explicit { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OffsetSpec {
    None,
    Constant { value: f64 },
    /// One `N(mean, sd²)` draw per sample, shared by all variables.
    PerSample { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Columns of X, intercept included.
    pub d: usize,
    pub theta: ThetaSpec,
    pub loadings: LoadingsSpec,
    pub covariates: CovariateSpec,
    pub offsets: OffsetSpec,
    #[serde(default)]
    pub missing_fraction: f64,
    pub seed: u64,
}

impl SimSpec {
    /// Intercept plus `d − 1` standard normal covariates, random Θ and B.
    pub fn standard(n: usize, p: usize, q: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            q,
            d,
            theta: ThetaSpec::Random {
                intercept_mean: 1.5,
                intercept_sd: 0.5,
                coef_sd: 0.5,
            },
            loadings: LoadingsSpec::Random { scale: 0.5 },
            covariates: CovariateSpec::Gaussian { sd: 1.0 },
            offsets: OffsetSpec::None,
            missing_fraction: 0.0,
            seed,
        }
    }

    /// The recovery/selection benchmark: n = 500, p = 10, q = 2, an
    /// intercept and one standard normal covariate.
    pub fn recovery(seed: u64) -> Self {
        Self {
            theta: ThetaSpec::Random {
                intercept_mean: 1.5,
                intercept_sd: 0.5,
                coef_sd: 0.5,
            },
            loadings: LoadingsSpec::Random { scale: 0.5 },
            ..Self::standard(500, 10, 2, 2, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PlnError::Config(msg));
        if self.n == 0 || self.p == 0 || self.d == 0 {
            return bad("n, p and d must be positive (d counts the intercept)".into());
        }
        if self.q > self.p {
            return bad(format!("q = {} exceeds p = {}", self.q, self.p));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return bad(format!("missing fraction {} outside [0, 1)", self.missing_fraction));
        }
        let shape = |rows: &[Vec<f64>], r: usize, c: usize, what: &str| {
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                bad(format!("{what} must be {r}×{c}"))
            } else {
                Ok(())
            }
        };
        if let ThetaSpec::Explicit { rows } = &self.theta {
            shape(rows, self.p, self.d, "Θ")?;
        }
        match &self.loadings {
            LoadingsSpec::Explicit { rows } => shape(rows, self.p, self.q, "B")?,
            LoadingsSpec::Covariance { rows } => shape(rows, self.p, self.p, "Σ")?,
            LoadingsSpec::Random { .. } => {}
        }
        if let CovariateSpec::Explicit { rows } = &self.covariates {
            shape(rows, self.n, self.d - 1, "covariates")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub latent: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Counts before masking.
    pub full_counts: DMatrix<f64>,
}

/// Standard-normal and unit-interval draws from the seeded stream.
pub struct SimRng {
    rng: Xoshiro256PlusPlus,
    normal: Normal,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            normal: Normal::new(0.0, 1.0).expect("standard normal"),
        }
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u = self.uniform();
        self.normal.inverse_cdf(u)
    }

    pub fn poisson(&mut self, rate: f64) -> Result<f64> {
        if rate == 0.0 {
            return Ok(0.0);
        }
        let dist = Poisson::new(rate).map_err(|_| PlnError::Domain {
            what: "Poisson rate",
            value: rate,
        })?;
        Ok(dist.sample(&mut self.rng))
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

/// Draws `(counts, design, truth)` from the spec.
pub fn sample(spec: &SimSpec) -> Result<(CountTable, Design, GroundTruth)> {
    spec.validate()?;
    let SimSpec { n, p, q, d, .. } = *spec;
    let mut rng = SimRng::new(spec.seed);

    let theta = match &spec.theta {
        ThetaSpec::Explicit { rows } => matrix_from_rows(rows, p, d),
        ThetaSpec::Random {
            intercept_mean,
            intercept_sd,
            coef_sd,
        } => {
            let mut t = DMatrix::zeros(p, d);
            for j in 0..p {
                for k in 0..d {
                    let z = rng.normal();
                    t[(j, k)] = if k == 0 {
                        intercept_mean + intercept_sd * z
                    } else {
                        coef_sd * z
                    };
                }
            }
            t
        }
    };
    let loadings = match &spec.loadings {
        LoadingsSpec::Explicit { rows } => matrix_from_rows(rows, p, q),
        LoadingsSpec::Covariance { rows } => {
            let sigma = matrix_from_rows(rows, p, p);
            crate::optim::loadings_from_covariance(&sigma, q)
        }
        LoadingsSpec::Random { scale } => {
            let mut b = DMatrix::zeros(p, q);
            for j in 0..p {
                for k in 0..q {
                    b[(j, k)] = scale * rng.normal();
                }
            }
            b
        }
    };

    let mut x = DMatrix::from_element(n, d, 1.0);
    match &spec.covariates {
        CovariateSpec::Gaussian { sd } => {
            for i in 0..n {
                for k in 1..d {
                    x[(i, k)] = sd * rng.normal();
                }
            }
        }
        CovariateSpec::Explicit { rows } => {
            for i in 0..n {
                for k in 1..d {
                    x[(i, k)] = rows[i][k - 1];
                }
            }
        }
    }
    let offsets = match &spec.offsets {
        OffsetSpec::None => DMatrix::zeros(n, p),
        OffsetSpec::Constant { value } => DMatrix::from_element(n, p, *value),
        OffsetSpec::PerSample { mean, sd } => {
            let per: Vec<f64> = (0..n).map(|_| mean + sd * rng.normal()).collect();
            DMatrix::from_fn(n, p, |i, _| per[i])
        }
    };

    let mut w = DMatrix::zeros(n, q);
    for i in 0..n {
        for k in 0..q {
            w[(i, k)] = rng.normal();
        }
    }
    let z = &offsets + &x * theta.transpose() + &w * loadings.transpose();
    let mut y = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let rate = z[(i, j)].exp();
            if !(rate <= MAX_RATE) {
                return Err(PlnError::Config(format!(
                    "simulated rate exp({:.3}) at ({i}, {j}) overflows; shrink Θ, B or the offsets",
                    z[(i, j)]
                )));
            }
            y[(i, j)] = rng.poisson(rate)?;
        }
    }
    let mut mask = DMatrix::from_element(n, p, 1.0);
    if spec.missing_fraction > 0.0 {
        for i in 0..n {
            for j in 0..p {
                if rng.uniform() < spec.missing_fraction {
                    mask[(i, j)] = 0.0;
                }
            }
        }
    }

    let counts = CountTable::with_mask(y.clone(), mask)?;
    let design = Design::new(x, offsets)?;
    let sigma = &loadings * loadings.transpose();
    Ok((
        counts,
        design,
        GroundTruth {
            theta,
            loadings,
            sigma,
            latent: w,
            z,
            full_counts: y,
        },
    ))
}

/// `log p(Y; Θ, Σ)` by adaptive Gauss–Hermite quadrature.
///
/// Eligible when `Σ` is diagonal (one 1-D integral per entry) or `p ≤ 2`
/// (a tensor grid over the at most two latent factors of `Σ`). Each row's
/// integrand is re-centred at its mode and scaled by the Cholesky factor
/// of the inverse negative Hessian there.
pub fn marginal_loglik_oracle(
    counts: &CountTable,
    design: &Design,
    theta: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    nodes: usize,
) -> Result<f64> {
    let (n, p) = (counts.nrows(), counts.ncols());
    crate::error::check_dims("design", (n, p), (design.nrows(), design.nvariables()))?;
    crate::error::check_dims("Σ", (p, p), sigma.shape())?;
    if nodes < 2 {
        return Err(PlnError::Config("oracle needs at least two nodes".into()));
    }
    let mu = design.linear_predictor(theta);
    let rule = GaussHermite::new(nodes);
    let scale = sigma.amax().max(f64::MIN_POSITIVE);
    let diagonal = (0..p).all(|j| (0..p).all(|k| j == k || sigma[(j, k)].abs() <= 1e-14 * scale));

    let mut rows = Vec::with_capacity(n);
    if diagonal {
        for i in 0..n {
            let mut total = 0.0;
            for j in (0..p).filter(|&j| counts.is_observed(i, j)) {
                let y = counts.counts()[(i, j)];
                let var = sigma[(j, j)];
                if var < 0.0 {
                    return Err(PlnError::NotPsd(var));
                }
                let factor = DMatrix::from_element(1, 1, var.sqrt());
                total += row_integral(&rule, &[y], &[mu[(i, j)]], &factor)?;
            }
            rows.push(total);
        }
    } else if p <= 2 {
        let factor = latent_factor(sigma)?;
        for i in 0..n {
            let obs: Vec<usize> = (0..p).filter(|&j| counts.is_observed(i, j)).collect();
            let y: Vec<f64> = obs.iter().map(|&j| counts.counts()[(i, j)]).collect();
            let m: Vec<f64> = obs.iter().map(|&j| mu[(i, j)]).collect();
            let l = factor.select_rows(&obs);
            rows.push(row_integral(&rule, &y, &m, &l)?);
        }
    } else {
        return Err(PlnError::OracleIneligible);
    }
    Ok(crate::elbo::pairwise_sum(&rows))
}

/// `L` (p×r) with `LLᵀ = Σ`, r the number of positive eigenvalues.
fn latent_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(sigma.clone()));
    let top = eig.eigenvalues.amax();
    let cols: Vec<usize> = (0..sigma.nrows())
        .filter(|&k| eig.eigenvalues[k] > 1e-12 * top)
        .collect();
    if let Some(&k) = (0..sigma.nrows())
        .collect::<Vec<_>>()
        .iter()
        .find(|&&k| eig.eigenvalues[k] < -1e-10 * top.max(1e-300))
    {
        return Err(PlnError::NotPsd(eig.eigenvalues[k]));
    }
    let mut l = DMatrix::zeros(sigma.nrows(), cols.len());
    for (c, &k) in cols.iter().enumerate() {
        l.set_column(c, &(eig.eigenvectors.column(k) * eig.eigenvalues[k].sqrt()));
    }
    Ok(l)
}

/// `log ∫ Π_j Poisson(y_j; exp(m_j + (Lw)_j)) φ_r(w) dw` for r ≤ 2.
fn row_integral(rule: &GaussHermite, y: &[f64], m: &[f64], l: &DMatrix<f64>) -> Result<f64> {
    let r = l.ncols();
    let log_fact: f64 = y.iter().map(|&v| crate::nef::ln_factorial(v)).sum();
    if y.is_empty() {
        return Ok(0.0);
    }
    if r == 0 || l.amax() == 0.0 {
        return Ok(y.iter().zip(m).map(|(&v, &mm)| v * mm - mm.exp()).sum::<f64>() - log_fact);
    }
    if r > 2 {
        return Err(PlnError::OracleIneligible);
    }

    // g(w) = Σ_j [y_j η_j − exp η_j] − |w|²/2, η = m + Lw.
    let log_integrand = |w: &DVector<f64>| -> f64 {
        let eta = l * w;
        let mut s = -0.5 * w.norm_squared();
        for j in 0..y.len() {
            let e = m[j] + eta[j];
            s += y[j] * e - e.exp();
        }
        s
    };
    let (mode, hessian) = newton_mode(y, m, l, &log_integrand)?;
    let cov = hessian
        .clone()
        .cholesky()
        .ok_or(PlnError::NotPsd(0.0))?
        .inverse();
    let chol = cov.cholesky().ok_or(PlnError::NotPsd(0.0))?.l();
    let log_det = chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let nodes = rule.nodes();
    let log_weights = rule.log_weights();
    let mut terms = Vec::with_capacity(nodes.len().pow(r as u32));
    let mut t = DVector::zeros(r);
    let mut idx = vec![0usize; r];
    loop {
        let mut log_w = 0.0;
        for k in 0..r {
            t[k] = nodes[idx[k]];
            log_w += log_weights[idx[k]];
        }
        if log_w.is_finite() {
            let w = &mode + &chol * &t;
            terms.push(log_w + log_integrand(&w) + 0.5 * t.norm_squared() + log_det);
        }
        // Odometer over the tensor grid.
        let mut k = 0;
        while k < r {
            idx[k] += 1;
            if idx[k] < nodes.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == r {
            break;
        }
    }
    Ok(log_sum_exp(&terms) - log_fact)
}

fn newton_mode<G: Fn(&DVector<f64>) -> f64>(
    y: &[f64],
    m: &[f64],
    l: &DMatrix<f64>,
    g: &G,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = l.ncols();
    let mut w = DVector::zeros(r);
    let derivatives = |w: &DVector<f64>| {
        let eta = l * w;
        let mut grad = -w.clone();
        let mut hess = DMatrix::identity(r, r);
        for j in 0..y.len() {
            let rate = (m[j] + eta[j]).exp();
            let row = l.row(j).transpose();
            grad += &row * (y[j] - rate);
            hess += &row * row.transpose() * rate;
        }
        (grad, hess)
    };
    let mut value = g(&w);
    for _ in 0..200 {
        let (grad, hess) = derivatives(&w);
        if grad.amax() <= 1e-12 * (1.0 + value.abs()) {
            return Ok((w, hess));
        }
        let step = hess
            .clone()
            .cholesky()
            .ok_or(PlnError::NotPsd(0.0))?
            .solve(&grad);
        let mut t = 1.0;
        loop {
            let trial = &w + &step * t;
            let v = g(&trial);
            if v.is_finite() && v >= value {
                w = trial;
                value = v;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                let (_, hess) = derivatives(&w);
                return Ok((w, hess));
            }
        }
    }
    let (_, hess) = derivatives(&w);
    Ok((w, hess))
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    let mut sorted: Vec<f64> = terms.iter().map(|t| (t - top).exp()).collect();
    sorted.sort_by(f64::total_cmp);
    top + sorted.iter().sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pln_moments;

    fn zero_spec(n: usize, p: usize, seed: u64) -> SimSpec {
        SimSpec {
            n,
            p,
            q: 1,
            d: 1,
            theta: ThetaSpec::Explicit {
                rows: vec![vec![0.0]; p],
            },
            loadings: LoadingsSpec::Explicit {
                rows: vec![vec![0.0]; p],
            },
            covariates: CovariateSpec::Gaussian { sd: 1.0 },
            offsets: OffsetSpec::None,
            missing_fraction: 0.0,
            seed,
        }
    }

    #[test]
    fn unit_rate_counts() {
        let (counts, design, _) = sample(&zero_spec(10_000, 10, 3)).unwrap();
        let mean = counts.counts().mean();
        assert!((0.97..=1.03).contains(&mean), "{mean}");
        assert!(counts.fully_observed());
        assert_eq!(design.offsets().amax(), 0.0);
    }

    #[test]
    fn same_seed_same_draws() {
        let spec = SimSpec {
            missing_fraction: 0.2,
            ..SimSpec::standard(20, 5, 2, 2, 11)
        };
        let a = sample(&spec).unwrap();
        let b = sample(&spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
        let c = sample(&SimSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn uniform_stays_open() {
        let mut rng = SimRng::new(0);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
        assert!(rng.normal().is_finite());
    }

    #[test]
    fn covariance_matches_moment_formula() {
        let rows = vec![vec![0.5, 0.2], vec![-0.3, 0.4], vec![0.1, -0.5]];
        let spec = SimSpec {
            n: 100_000,
            p: 3,
            q: 2,
            d: 1,
            theta: ThetaSpec::Explicit {
                rows: vec![vec![0.5], vec![0.0], vec![1.0]],
            },
            loadings: LoadingsSpec::Explicit { rows },
            covariates: CovariateSpec::Gaussian { sd: 1.0 },
            offsets: OffsetSpec::None,
            missing_fraction: 0.0,
            seed: 7,
        };
        let (counts, _, truth) = sample(&spec).unwrap();
        let mu = truth.theta.column(0).into_owned();
        let moments = pln_moments(&mu, &truth.sigma).unwrap();
        let y = counts.counts();
        let n = y.nrows() as f64;
        let means: Vec<f64> = (0..3).map(|j| y.column(j).mean()).collect();
        for j in 0..3 {
            for k in 0..3 {
                let prods: Vec<f64> = (0..y.nrows())
                    .map(|i| (y[(i, j)] - means[j]) * (y[(i, k)] - means[k]))
                    .collect();
                let cov = prods.iter().sum::<f64>() / n;
                let sd = (prods.iter().map(|v| (v - cov).powi(2)).sum::<f64>() / n).sqrt();
                let se = sd / n.sqrt();
                let err = (cov - moments.covariance[(j, k)]).abs();
                assert!(err < 3.0 * se, "({j},{k}): {cov} vs {} (se {se})", moments.covariance[(j, k)]);
            }
        }
    }

    #[test]
    fn overflow_is_rejected() {
        let mut spec = zero_spec(2, 1, 0);
        spec.theta = ThetaSpec::Explicit { rows: vec![vec![800.0]] };
        assert!(matches!(sample(&spec), Err(PlnError::Config(_))));
    }

    #[test]
    fn invalid_specs() {
        assert!(SimSpec { missing_fraction: 1.0, ..SimSpec::standard(5, 3, 1, 1, 0) }.validate().is_err());
        assert!(SimSpec::standard(5, 3, 4, 1, 0).validate().is_err());
    }

    #[test]
    fn degenerate_sigma_is_plain_poisson() {
        let counts = CountTable::new(DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 2.0, 1.0]));
        let design = Design::intercept_only(2, 2);
        let theta = DMatrix::from_column_slice(2, 1, &[0.3, -0.2]);
        let got = marginal_loglik_oracle(&counts, &design, &theta, &DMatrix::zeros(2, 2), 100).unwrap();
        let want = crate::selection::poisson_loglik(&counts, &design.linear_predictor(&theta));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn nodes_converge() {
        let counts = CountTable::new(DMatrix::from_row_slice(3, 2, &[0.0, 4.0, 7.0, 1.0, 2.0, 2.0]));
        let design = Design::intercept_only(3, 2);
        let theta = DMatrix::from_column_slice(2, 1, &[0.5, 0.2]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.8]);
        let a = marginal_loglik_oracle(&counts, &design, &theta, &sigma, 100).unwrap();
        let b = marginal_loglik_oracle(&counts, &design, &theta, &sigma, 200).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn ineligible_shape_is_refused() {
        let counts = CountTable::new(DMatrix::from_element(2, 3, 1.0));
        let design = Design::intercept_only(2, 3);
        let sigma = DMatrix::from_element(3, 3, 0.5) + DMatrix::identity(3, 3);
        assert_eq!(
            marginal_loglik_oracle(&counts, &design, &DMatrix::zeros(3, 1), &sigma, 100),
            Err(PlnError::OracleIneligible)
        );
    }
}
