//! Observations, designs, parameters and the quantities derived from a fit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{check_dims, PlnError, Result};
use crate::nef::Family;
use crate::selection::Criteria;

/// Response matrix `Y` (n×p) with its observation mask `Ω`.
///
/// Masked entries are stored as zero so they never leak into products.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    counts: DMatrix<f64>,
    mask: DMatrix<f64>,
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
}

impl CountTable {
    /// Fully observed table with default names.
    pub fn new(counts: DMatrix<f64>) -> Self {
        let mask = DMatrix::from_element(counts.nrows(), counts.ncols(), 1.0);
        Self::assemble(counts, mask)
    }

    /// Table whose `NaN` entries are treated as missing.
    pub fn from_observations(values: DMatrix<f64>) -> Self {
        let mask = values.map(|v| if v.is_nan() { 0.0 } else { 1.0 });
        Self::assemble(values, mask)
    }

    /// `mask` entries must be 0 (missing) or 1 (observed).
    pub fn with_mask(counts: DMatrix<f64>, mask: DMatrix<f64>) -> Result<Self> {
        check_dims("mask", counts.shape(), mask.shape())?;
        if let Some(bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(PlnError::Input(format!("mask entries must be 0 or 1, found {bad}")));
        }
        Ok(Self::assemble(counts, mask))
    }

    fn assemble(mut counts: DMatrix<f64>, mask: DMatrix<f64>) -> Self {
        counts.zip_apply(&mask, |y, m| {
            if m == 0.0 {
                *y = 0.0;
            }
        });
        let (n, p) = counts.shape();
        Self {
            counts,
            mask,
            row_names: (1..=n).map(|i| format!("S{i}")).collect(),
            col_names: (1..=p).map(|j| format!("V{j}")).collect(),
        }
    }

    pub fn with_names(mut self, row_names: Vec<String>, col_names: Vec<String>) -> Result<Self> {
        if row_names.len() != self.nrows() || col_names.len() != self.ncols() {
            return Err(PlnError::Dimension {
                context: "table names",
                expected: format!("{} rows, {} columns", self.nrows(), self.ncols()),
                found: format!("{} rows, {} columns", row_names.len(), col_names.len()),
            });
        }
        self.row_names = row_names;
        self.col_names = col_names;
        Ok(self)
    }

    pub fn counts(&self) -> &DMatrix<f64> {
        &self.counts
    }

    pub fn mask(&self) -> &DMatrix<f64> {
        &self.mask
    }

    pub fn nrows(&self) -> usize {
        self.counts.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.counts.ncols()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)] == 1.0
    }

    pub fn fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m == 1.0)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }

    /// Checks every observed entry against `family` and, unless
    /// `allow_zero_columns`, rejects count columns with no positive entry.
    pub fn validate(&self, family: &Family, allow_zero_columns: bool) -> Result<()> {
        for j in 0..self.ncols() {
            let mut any_positive = false;
            for i in 0..self.nrows() {
                if !self.is_observed(i, j) {
                    continue;
                }
                let y = self.counts[(i, j)];
                family
                    .validate_observation(y)
                    .map_err(|reason| PlnError::InvalidObservation {
                        row: i,
                        col: j,
                        value: y,
                        reason,
                    })?;
                any_positive |= y != 0.0;
            }
            if family.is_count() && !any_positive && !allow_zero_columns {
                return Err(PlnError::AllZeroColumn(self.col_names[j].clone()));
            }
        }
        Ok(())
    }

    /// Same table with observed entries replaced column by column.
    pub fn with_counts(&self, counts: DMatrix<f64>) -> Result<Self> {
        check_dims("counts", self.counts.shape(), counts.shape())?;
        let mut out = Self::assemble(counts, self.mask.clone());
        out.row_names = self.row_names.clone();
        out.col_names = self.col_names.clone();
        Ok(out)
    }
}

/// Covariates `X` (n×d) and known offsets `O` (n×p).
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    covariates: DMatrix<f64>,
    offsets: DMatrix<f64>,
    pub covariate_names: Vec<String>,
}

impl Design {
    /// Validates full column rank of `X` and finiteness of `O`.
    pub fn new(covariates: DMatrix<f64>, offsets: DMatrix<f64>) -> Result<Self> {
        if covariates.nrows() != offsets.nrows() {
            return Err(PlnError::Dimension {
                context: "design rows",
                expected: format!("{} rows", covariates.nrows()),
                found: format!("{} rows", offsets.nrows()),
            });
        }
        if let Some(bad) = offsets.iter().find(|v| !v.is_finite()) {
            return Err(PlnError::Input(format!("offsets must be finite, found {bad}")));
        }
        if let Some(bad) = covariates.iter().find(|v| !v.is_finite()) {
            return Err(PlnError::Input(format!("covariates must be finite, found {bad}")));
        }
        let d = covariates.ncols();
        let rank = numerical_rank(&covariates);
        if rank < d {
            return Err(PlnError::RankDeficient { rank, cols: d });
        }
        let covariate_names = (1..=d).map(|k| format!("X{k}")).collect();
        Ok(Self {
            covariates,
            offsets,
            covariate_names,
        })
    }

    /// Intercept column only, zero offsets.
    pub fn intercept_only(n: usize, p: usize) -> Self {
        Self {
            covariates: DMatrix::from_element(n, 1, 1.0),
            offsets: DMatrix::zeros(n, p),
            covariate_names: vec!["(Intercept)".to_string()],
        }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.ncovariates() {
            return Err(PlnError::Dimension {
                context: "covariate names",
                expected: self.ncovariates().to_string(),
                found: names.len().to_string(),
            });
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn offsets(&self) -> &DMatrix<f64> {
        &self.offsets
    }

    pub fn nrows(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn ncovariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn nvariables(&self) -> usize {
        self.offsets.ncols()
    }

    /// `O + XΘᵀ` (n×p).
    pub fn linear_predictor(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut eta = &self.covariates * theta.transpose();
        eta += &self.offsets;
        eta
    }

    /// Same design with `shift` added to every offset.
    pub fn shifted_offsets(&self, shift: f64) -> Self {
        let mut out = self.clone();
        out.offsets.add_scalar_mut(shift);
        out
    }
}

pub(crate) fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let tol = max * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON * 16.0;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Regression coefficients `Θ` (p×d) and loadings `B` (p×q).
///
/// Only `Θ` and `Σ = BBᵀ` are identifiable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelParams {
    pub theta: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(theta: DMatrix<f64>, loadings: DMatrix<f64>) -> Result<Self> {
        if theta.nrows() != loadings.nrows() {
            return Err(PlnError::Dimension {
                context: "parameter rows",
                expected: theta.nrows().to_string(),
                found: loadings.nrows().to_string(),
            });
        }
        Ok(Self { theta, loadings })
    }

    pub fn nvariables(&self) -> usize {
        self.theta.nrows()
    }

    pub fn ncovariates(&self) -> usize {
        self.theta.ncols()
    }

    pub fn rank(&self) -> usize {
        self.loadings.ncols()
    }

    /// `BBᵀ`.
    pub fn sigma(&self) -> DMatrix<f64> {
        &self.loadings * self.loadings.transpose()
    }
}

/// Variational means `M` and standard deviations `S` (both n×q).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalState {
    pub means: DMatrix<f64>,
    pub sds: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(means: DMatrix<f64>, sds: DMatrix<f64>) -> Result<Self> {
        check_dims("variational state", means.shape(), sds.shape())?;
        let state = Self { means, sds };
        state.check_positive()?;
        Ok(state)
    }

    pub fn check_positive(&self) -> Result<()> {
        match self.sds.iter().find(|&&s| !(s > 0.0)) {
            Some(&s) => Err(PlnError::NonPositiveScale(s)),
            None => Ok(()),
        }
    }

    pub fn nrows(&self) -> usize {
        self.means.nrows()
    }

    pub fn rank(&self) -> usize {
        self.means.ncols()
    }
}

/// `P̃ = M̃B̂ᵀ` kept as its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredPositions {
    pub scores: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
}

impl FactoredPositions {
    pub fn dense(&self) -> DMatrix<f64> {
        &self.scores * self.loadings.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPositions {
    /// `Z̃ = O + XΘᵀ + MBᵀ`.
    pub z_tilde: DMatrix<f64>,
    pub p_tilde: FactoredPositions,
}

pub fn latent_positions(
    params: &ModelParams,
    vstate: &VariationalState,
    design: &Design,
) -> Result<LatentPositions> {
    check_consistent(params, vstate, design)?;
    let mut z_tilde = design.linear_predictor(&params.theta);
    z_tilde.gemm(1.0, &vstate.means, &params.loadings.transpose(), 1.0);
    Ok(LatentPositions {
        z_tilde,
        p_tilde: FactoredPositions {
            scores: vstate.means.clone(),
            loadings: params.loadings.clone(),
        },
    })
}

pub(crate) fn check_consistent(
    params: &ModelParams,
    vstate: &VariationalState,
    design: &Design,
) -> Result<()> {
    let (n, p) = (design.nrows(), design.nvariables());
    let (d, q) = (design.ncovariates(), vstate.rank());
    check_dims("Θ", (p, d), params.theta.shape())?;
    check_dims("B", (p, q), params.loadings.shape())?;
    check_dims("M", (n, q), vstate.means.shape())?;
    check_dims("S", (n, q), vstate.sds.shape())?;
    Ok(())
}

/// `Σ̂ = B(n⁻¹MᵀM + S̄)Bᵀ` with `S̄ = n⁻¹ diag(1ᵀ(S⊙S))`.
pub fn sigma_hat(params: &ModelParams, vstate: &VariationalState) -> Result<DMatrix<f64>> {
    let (n, q) = vstate.means.shape();
    check_dims("S", (n, q), vstate.sds.shape())?;
    check_dims("B", (params.nvariables(), q), params.loadings.shape())?;
    vstate.check_positive()?;
    let inv_n = 1.0 / n as f64;
    let mut inner = vstate.means.transpose() * &vstate.means * inv_n;
    for k in 0..q {
        inner[(k, k)] += vstate.sds.column(k).norm_squared() * inv_n;
    }
    let b = &params.loadings;
    let sigma = b * inner * b.transpose();
    Ok(clean_psd(symmetrize(sigma)))
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Clamps eigenvalues in `[−1e-10·trace, 0)` to zero.
fn clean_psd(sigma: DMatrix<f64>) -> DMatrix<f64> {
    let trace = sigma.trace().abs();
    let eig = SymmetricEigen::new(sigma.clone());
    let tol = 1e-10 * trace;
    if eig.eigenvalues.iter().all(|&l| l >= 0.0 || l < -tol) {
        return sigma;
    }
    let clamped = eig.eigenvalues.map(|l| if l < 0.0 && l >= -tol { 0.0 } else { l });
    let v = &eig.eigenvectors;
    symmetrize(v * DMatrix::from_diagonal(&clamped) * v.transpose())
}

/// Marginal moments of a Poisson-lognormal vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PlnMoments {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

pub fn pln_moments(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<PlnMoments> {
    let p = mu.len();
    check_dims("Σ", (p, p), sigma.shape())?;
    let asym = (sigma - sigma.transpose()).amax();
    if asym > 1e-12 * sigma.amax().max(1.0) {
        return Err(PlnError::Input("Σ must be symmetric".into()));
    }
    if p > 0 {
        let min_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if min_eig < -1e-10 * sigma.trace().abs().max(f64::MIN_POSITIVE) {
            return Err(PlnError::NotPsd(min_eig));
        }
    }
    let mean = DVector::from_fn(p, |j, _| (mu[j] + 0.5 * sigma[(j, j)]).exp());
    let covariance = DMatrix::from_fn(p, p, |j, k| {
        let c = sigma[(j, k)].exp_m1() * mean[j] * mean[k];
        if j == k {
            c + mean[j]
        } else {
            c
        }
    });
    let variance = covariance.diagonal();
    Ok(PlnMoments {
        mean,
        variance,
        covariance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    ObjectiveTolerance,
    ParameterTolerance,
    GradientTolerance,
    MaxIterations,
    /// No step with a conservative approximation could be found.
    Stalled,
}

impl FitStatus {
    pub fn converged(self) -> bool {
        !matches!(self, FitStatus::MaxIterations | FitStatus::Stalled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FitStatus::ObjectiveTolerance => "converged-objective",
            FitStatus::ParameterTolerance => "converged-parameters",
            FitStatus::GradientTolerance => "converged-gradient",
            FitStatus::MaxIterations => "max-iterations",
            FitStatus::Stalled => "stalled",
        }
    }
}

/// Everything produced by fitting one rank.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub rank: usize,
    pub params: ModelParams,
    pub vstate: VariationalState,
    pub elbo: f64,
    pub criteria: Criteria,
    pub sigma_hat: DMatrix<f64>,
    pub latent: LatentPositions,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub status: FitStatus,
    /// `J_q` at every accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn state(m: DMatrix<f64>, s: DMatrix<f64>) -> VariationalState {
        VariationalState::new(m, s).unwrap()
    }

    #[test]
    fn latent_positions_examples() {
        let design = Design::new(DMatrix::zeros(2, 0), DMatrix::zeros(2, 2)).unwrap();
        let params = ModelParams::new(DMatrix::zeros(2, 0), dmatrix![1.0; 2.0]).unwrap();
        let vs = state(dmatrix![1.0; -1.0], dmatrix![1.0; 1.0]);
        let lp = latent_positions(&params, &vs, &design).unwrap();
        assert_eq!(lp.z_tilde, dmatrix![1.0, 2.0; -1.0, -2.0]);
        assert_eq!(lp.p_tilde.dense(), lp.z_tilde);

        // Zero scores leave only O + XΘᵀ.
        let design = Design::new(
            DMatrix::from_element(3, 1, 1.0),
            dmatrix![0.5, 0.0; 0.0, 1.0; 1.0, 1.0],
        )
        .unwrap();
        let params = ModelParams::new(dmatrix![2.0; -1.0], dmatrix![3.0; 4.0]).unwrap();
        let vs = state(DMatrix::zeros(3, 1), DMatrix::from_element(3, 1, 0.5));
        let lp = latent_positions(&params, &vs, &design).unwrap();
        assert_eq!(lp.p_tilde.dense(), DMatrix::zeros(3, 2));
        assert_eq!(lp.z_tilde, dmatrix![2.5, -1.0; 2.0, 0.0; 3.0, 0.0]);
    }

    #[test]
    fn latent_positions_rejects_mismatch() {
        let design = Design::intercept_only(3, 2);
        let params = ModelParams::new(DMatrix::zeros(2, 1), DMatrix::zeros(2, 2)).unwrap();
        let vs = state(DMatrix::zeros(3, 1), DMatrix::from_element(3, 1, 1.0));
        assert!(matches!(
            latent_positions(&params, &vs, &design),
            Err(PlnError::Dimension { .. })
        ));
    }

    #[test]
    fn sigma_hat_examples() {
        let params = ModelParams::new(DMatrix::zeros(3, 1), DMatrix::identity(3, 3)).unwrap();
        let vs = state(DMatrix::zeros(4, 3), DMatrix::from_element(4, 3, 1.0));
        assert_eq!(sigma_hat(&params, &vs).unwrap(), DMatrix::identity(3, 3));

        let params = ModelParams::new(DMatrix::zeros(3, 1), DMatrix::zeros(3, 2)).unwrap();
        let vs = state(DMatrix::from_element(4, 2, 0.3), DMatrix::from_element(4, 2, 1.0));
        assert_eq!(sigma_hat(&params, &vs).unwrap(), DMatrix::zeros(3, 3));

        let params = ModelParams::new(DMatrix::zeros(2, 1), dmatrix![1.0; 0.0]).unwrap();
        let vs = state(dmatrix![1.0; 1.0], dmatrix![1.0; 1.0]);
        assert_eq!(sigma_hat(&params, &vs).unwrap(), dmatrix![2.0, 0.0; 0.0, 0.0]);
    }

    #[test]
    fn pln_moments_examples() {
        let m = pln_moments(&DVector::from_vec(vec![0.0, 0.0]), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(m.mean[0], 1.0);
        assert_eq!(m.variance[0], 1.0);
        assert_eq!(m.covariance[(0, 1)], 0.0);

        let m = pln_moments(&DVector::from_vec(vec![0.0]), &dmatrix![1.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((m.mean[0] - 0.5f64.exp()).abs() < 1e-15);
        assert!((m.variance[0] - (0.5f64.exp() + (e - 1.0) * e)).abs() < 1e-12);

        assert!(matches!(
            pln_moments(&DVector::from_vec(vec![0.0, 0.0]), &dmatrix![1.0, 2.0; 2.0, 1.0]),
            Err(PlnError::NotPsd(_))
        ));
    }

    #[test]
    fn pln_moments_match_simulation() {
        use rand_distr::{Distribution, Poisson, StandardNormal};
        use rand_xoshiro::rand_core::SeedableRng;
        use rand_xoshiro::Xoshiro256PlusPlus;

        let m = pln_moments(&DVector::from_vec(vec![0.0]), &dmatrix![1.0]).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let draws = 400_000;
        let mut ys = Vec::with_capacity(draws);
        for _ in 0..draws {
            let z: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = Poisson::new(z.exp()).unwrap().sample(&mut rng);
            ys.push(y);
        }
        let mean = ys.iter().sum::<f64>() / draws as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se_mean = (m.variance[0] / draws as f64).sqrt();
        assert!((mean - m.mean[0]).abs() < 4.0 * se_mean);
        // Heavy tails: compare the variance loosely.
        assert!((var - m.variance[0]).abs() / m.variance[0] < 0.05, "{var}");
    }

    #[test]
    fn table_masks_and_validation() {
        let t = CountTable::from_observations(dmatrix![1.0, f64::NAN; 0.0, 3.0]);
        assert!(!t.is_observed(0, 1));
        assert_eq!(t.counts()[(0, 1)], 0.0);
        assert_eq!(t.observed_count(), 3);
        assert!(t.validate(&Family::Poisson, false).is_ok());

        let t = CountTable::new(dmatrix![1.0, 0.0; 2.0, 0.0]);
        assert!(matches!(
            t.validate(&Family::Poisson, false),
            Err(PlnError::AllZeroColumn(_))
        ));
        assert!(t.validate(&Family::Poisson, true).is_ok());

        let t = CountTable::new(dmatrix![1.5]);
        assert!(t.validate(&Family::Poisson, false).is_err());
        assert!(t.validate(&Family::GaussianUnitVariance, false).is_ok());
        assert!(CountTable::with_mask(dmatrix![1.0], dmatrix![0.5]).is_err());
    }

    #[test]
    fn design_rejects_rank_deficiency() {
        let x = dmatrix![1.0, 2.0; 1.0, 2.0; 1.0, 2.0];
        assert!(matches!(
            Design::new(x, DMatrix::zeros(3, 2)),
            Err(PlnError::RankDeficient { rank: 1, cols: 2 })
        ));
        let x = dmatrix![1.0; 1.0];
        assert!(Design::new(x, dmatrix![f64::INFINITY; 0.0]).is_err());
    }
}
