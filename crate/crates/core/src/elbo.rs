//! Variational lower bound `J_q(Θ, B, M, S)` and its blockwise gradients.
//!
//! With `V = O + XΘᵀ + (M + S⊙U)Bᵀ` the bound is
//!
//! ```text
//! J = 1ᵀ[(Y⊙(O + XΘᵀ + MBᵀ) − A) ⊙ Ω]1 − ½ 1ᵀ[M⊙M + S⊙S − 2 log S − 1]1 − K(Y)
//! ```
//!
//! where `A = E[b(V)]`. Every entry of `A` only depends on the location
//! `O + XΘᵀ + MBᵀ` and the scale `√((S⊙S)(B⊙B)ᵀ)`, so all expectations are
//! one dimensional. The cross moments needed by the `B` and `S` gradients
//! reduce to `A″ = E[b″(V)]` through Stein's identity
//! `E[h(V)U_ik] = B_jk S_ik E[h′(V)]`.

use nalgebra::DMatrix;

use crate::error::{PlnError, Result};
use crate::model::{check_consistent, CountTable, Design, ModelParams, VariationalState};
use crate::nef::Family;

/// Blockwise gradient of `J_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub theta: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub means: DMatrix<f64>,
    pub sds: DMatrix<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        (self.theta.norm_squared()
            + self.loadings.norm_squared()
            + self.means.norm_squared()
            + self.sds.norm_squared())
        .sqrt()
    }
}

/// Per-iterate buffers: `A`, `A′`, `A″` (n×p), `A′₁` (p×q), `A′₂` (n×q).
#[derive(Debug, Clone)]
pub struct ElboWorkspace {
    /// `O + XΘᵀ + MBᵀ`.
    pub location: DMatrix<f64>,
    /// `(S⊙S)(B⊙B)ᵀ`, the variance of `V`.
    pub variance: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub a_prime: DMatrix<f64>,
    pub a_second: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
}

impl ElboWorkspace {
    pub fn new(n: usize, p: usize, q: usize) -> Self {
        Self {
            location: DMatrix::zeros(n, p),
            variance: DMatrix::zeros(n, p),
            a: DMatrix::zeros(n, p),
            a_prime: DMatrix::zeros(n, p),
            a_second: DMatrix::zeros(n, p),
            a1: DMatrix::zeros(p, q),
            a2: DMatrix::zeros(n, q),
        }
    }

    fn ensure_shape(&mut self, n: usize, p: usize, q: usize) {
        if self.a.shape() != (n, p) || self.a1.shape() != (p, q) {
            *self = Self::new(n, p, q);
        }
    }

    /// Fills `location`, `variance`, `A`, `A′` and `A″` at the given point.
    pub fn compute_a(
        &mut self,
        family: &Family,
        params: &ModelParams,
        vstate: &VariationalState,
        design: &Design,
    ) -> Result<()> {
        check_consistent(params, vstate, design)?;
        vstate.check_positive()?;
        let (n, p, q) = (design.nrows(), design.nvariables(), vstate.rank());
        self.ensure_shape(n, p, q);

        self.location.copy_from(design.offsets());
        self.location
            .gemm(1.0, design.covariates(), &params.theta.transpose(), 1.0);
        self.location
            .gemm(1.0, &vstate.means, &params.loadings.transpose(), 1.0);

        let s2 = vstate.sds.component_mul(&vstate.sds);
        let b2 = params.loadings.component_mul(&params.loadings);
        self.variance.gemm(1.0, &s2, &b2.transpose(), 0.0);

        let location = self.location.as_slice();
        let variance = self.variance.as_slice();
        let fill = |j: usize, a: &mut [f64], a1: &mut [f64], a2: &mut [f64]| -> Result<()> {
            let col = j * n..(j + 1) * n;
            for (i, ((va, v1), v2)) in a.iter_mut().zip(a1.iter_mut()).zip(a2.iter_mut()).enumerate() {
                let loc = location[col.start + i];
                let var = variance[col.start + i];
                match family {
                    Family::Poisson => {
                        let v = (loc + 0.5 * var).exp();
                        *va = v;
                        *v1 = v;
                        *v2 = v;
                    }
                    Family::GaussianUnitVariance => {
                        *va = 0.5 * (loc * loc + var);
                        *v1 = loc;
                        *v2 = 1.0;
                    }
                    Family::Generic(_) => {
                        let e = family.gauss_expectations(loc, var.max(0.0).sqrt())?;
                        *va = e.value;
                        *v1 = e.first;
                        *v2 = e.second;
                    }
                }
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(PlnError::Overflow("instrumental matrix A"));
            }
            Ok(())
        };
        for_each_column(
            n,
            self.a.as_mut_slice(),
            self.a_prime.as_mut_slice(),
            self.a_second.as_mut_slice(),
            fill,
        )
    }
}

#[cfg(feature = "parallel")]
fn for_each_column<F>(n: usize, a: &mut [f64], b: &mut [f64], c: &mut [f64], f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [f64]) -> Result<()> + Sync,
{
    use rayon::prelude::*;
    if n == 0 {
        return Ok(());
    }
    a.par_chunks_mut(n)
        .zip(b.par_chunks_mut(n))
        .zip(c.par_chunks_mut(n))
        .enumerate()
        .try_for_each(|(j, ((x, y), z))| f(j, x, y, z))
}

#[cfg(not(feature = "parallel"))]
fn for_each_column<F>(n: usize, a: &mut [f64], b: &mut [f64], c: &mut [f64], f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [f64]) -> Result<()>,
{
    if n == 0 {
        return Ok(());
    }
    a.chunks_mut(n)
        .zip(b.chunks_mut(n))
        .zip(c.chunks_mut(n))
        .enumerate()
        .try_for_each(|(j, ((x, y), z))| f(j, x, y, z))
}

/// Fixed-order pairwise summation, so totals do not depend on scheduling.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1..=16 => values.iter().sum(),
        len => {
            let (lo, hi) = values.split_at(len / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// `K(Y) = Σ_{(i,j) ∈ Ω} a(Y_ij)`.
pub fn base_measure_total(family: &Family, counts: &CountTable) -> Result<f64> {
    let (n, p) = counts.counts().shape();
    let mut column_totals = Vec::with_capacity(p);
    for j in 0..p {
        let mut total = 0.0;
        for i in 0..n {
            if counts.is_observed(i, j) {
                total += family
                    .base_measure(counts.counts()[(i, j)])
                    .map_err(|err| match err {
                        PlnError::InvalidObservation { value, reason, .. } => {
                            PlnError::InvalidObservation {
                                row: i,
                                col: j,
                                value,
                                reason,
                            }
                        }
                        other => other,
                    })?;
            }
        }
        column_totals.push(total);
    }
    Ok(pairwise_sum(&column_totals))
}

/// Reusable evaluator of `J_q` and its gradient on one data set.
///
/// `K(Y)` is computed once; one `A` computation serves both the value and
/// the gradient of an iterate.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    family: &'a Family,
    counts: &'a CountTable,
    design: &'a Design,
    base_total: f64,
    workspace: ElboWorkspace,
}

impl<'a> Objective<'a> {
    pub fn new(
        family: &'a Family,
        counts: &'a CountTable,
        design: &'a Design,
        rank: usize,
    ) -> Result<Self> {
        let (n, p) = (counts.nrows(), counts.ncols());
        if design.nrows() != n || design.nvariables() != p {
            return Err(PlnError::Dimension {
                context: "design versus counts",
                expected: format!("{n}x{p}"),
                found: format!("{}x{}", design.nrows(), design.nvariables()),
            });
        }
        let base_total = base_measure_total(family, counts)?;
        Ok(Self {
            family,
            counts,
            design,
            base_total,
            workspace: ElboWorkspace::new(n, p, rank),
        })
    }

    pub fn family(&self) -> &Family {
        self.family
    }

    pub fn counts(&self) -> &CountTable {
        self.counts
    }

    pub fn design(&self) -> &Design {
        self.design
    }

    pub fn base_total(&self) -> f64 {
        self.base_total
    }

    pub fn workspace(&self) -> &ElboWorkspace {
        &self.workspace
    }

    pub fn value(&mut self, params: &ModelParams, vstate: &VariationalState) -> Result<f64> {
        self.workspace
            .compute_a(self.family, params, vstate, self.design)?;
        self.assemble_value(vstate)
    }

    pub fn value_and_gradients(
        &mut self,
        params: &ModelParams,
        vstate: &VariationalState,
    ) -> Result<(f64, Gradients)> {
        let value = self.value(params, vstate)?;
        let grads = self.assemble_gradients(params, vstate, self.counts.counts(), true);
        Ok((value, grads))
    }

    fn assemble_value(&self, vstate: &VariationalState) -> Result<f64> {
        let ws = &self.workspace;
        let (n, p) = ws.a.shape();
        let y = self.counts.counts().as_slice();
        let mask = self.counts.mask().as_slice();
        let loc = ws.location.as_slice();
        let a = ws.a.as_slice();
        let column_terms: Vec<f64> = (0..p)
            .map(|j| {
                (j * n..(j + 1) * n)
                    .filter(|&idx| mask[idx] == 1.0)
                    .map(|idx| y[idx] * loc[idx] - a[idx])
                    .sum()
            })
            .collect();
        let data_term = pairwise_sum(&column_terms);

        let latent_terms: Vec<f64> = vstate
            .means
            .iter()
            .zip(vstate.sds.iter())
            .map(|(&m, &s)| m * m + s * s - 2.0 * s.ln() - 1.0)
            .collect();
        let value = data_term - 0.5 * pairwise_sum(&latent_terms) - self.base_total;
        if !value.is_finite() {
            return Err(PlnError::Overflow("variational lower bound"));
        }
        Ok(value)
    }

    /// Blockwise gradient using the current workspace. When
    /// `mask_residual` is false the residual `Y − A′` is used unmasked,
    /// which is how imputed data enter the gradient.
    fn assemble_gradients(
        &mut self,
        params: &ModelParams,
        vstate: &VariationalState,
        y: &DMatrix<f64>,
        mask_residual: bool,
    ) -> Gradients {
        let mask = self.counts.mask();
        let ws = &mut self.workspace;
        let mut residual = y - &ws.a_prime;
        if mask_residual {
            residual.component_mul_assign(mask);
        }
        let curvature = ws.a_second.component_mul(mask);

        let s2 = vstate.sds.component_mul(&vstate.sds);
        let b2 = params.loadings.component_mul(&params.loadings);

        ws.a1 = (curvature.transpose() * &s2).component_mul(&params.loadings);
        ws.a2 = (&curvature * &b2).component_mul(&vstate.sds);

        let theta = residual.transpose() * self.design.covariates();
        let loadings = residual.transpose() * &vstate.means - &ws.a1;
        let means = &residual * &params.loadings - &vstate.means;
        let sds = vstate.sds.map(|s| 1.0 / s) - &ws.a2 - &vstate.sds;
        Gradients {
            theta,
            loadings,
            means,
            sds,
        }
    }

    /// Gradient after substituting `imputed` for `Y` with an unmasked
    /// residual. Must follow a call to `value` at the same point.
    pub fn gradients_with_imputed(
        &mut self,
        params: &ModelParams,
        vstate: &VariationalState,
        imputed: &DMatrix<f64>,
    ) -> Gradients {
        self.assemble_gradients(params, vstate, imputed, false)
    }
}

/// Fills a fresh workspace with `A`, `A′`, `A″` at the given point.
pub fn compute_a(
    family: &Family,
    params: &ModelParams,
    vstate: &VariationalState,
    design: &Design,
) -> Result<ElboWorkspace> {
    let mut ws = ElboWorkspace::new(design.nrows(), design.nvariables(), vstate.rank());
    ws.compute_a(family, params, vstate, design)?;
    Ok(ws)
}

pub fn elbo(
    family: &Family,
    params: &ModelParams,
    vstate: &VariationalState,
    counts: &CountTable,
    design: &Design,
) -> Result<f64> {
    Objective::new(family, counts, design, vstate.rank())?.value(params, vstate)
}

pub fn gradients(
    family: &Family,
    params: &ModelParams,
    vstate: &VariationalState,
    counts: &CountTable,
    design: &Design,
) -> Result<Gradients> {
    Ok(Objective::new(family, counts, design, vstate.rank())?
        .value_and_gradients(params, vstate)?
        .1)
}

/// `Y` with every unobserved entry replaced by `A′_ij`.
pub fn impute(counts: &CountTable, workspace: &ElboWorkspace) -> DMatrix<f64> {
    let mut out = counts.counts().clone();
    for (idx, value) in out.iter_mut().enumerate() {
        if counts.mask().as_slice()[idx] == 0.0 {
            *value = workspace.a_prime.as_slice()[idx];
        }
    }
    out
}
