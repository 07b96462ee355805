//! Fitting: initialization, box-constrained ascent on `J_q`, rank scans.

mod mma;
mod pgd;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::elbo::{Gradients, Objective};
use crate::error::{PlnError, Result};
use crate::model::{
    latent_positions, sigma_hat, symmetrize, CountTable, Design, FitResult, FitStatus,
    ModelParams, VariationalState,
};
use crate::nef::{Family, DEFAULT_QUADRATURE_NODES};
use crate::selection::{self, Criteria, Criterion, NullModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Conservative separable approximations with moving asymptotes.
    Mma,
    /// Projected gradient ascent with Armijo backtracking.
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub method: Method,
    pub max_iterations: usize,
    /// Relative change of `J_q` below which an iterate counts as quiet.
    pub objective_tol: f64,
    /// Consecutive quiet iterates required to stop.
    pub patience: usize,
    /// Largest relative coordinate move below which the fit stops.
    pub parameter_tol: f64,
    /// Projected-gradient sup-norm below which the fit stops.
    pub gradient_tol: f64,
    /// Lower bound on every entry of `S`.
    pub s_floor: f64,
    /// Starting value of every entry of `S`.
    pub s_init: f64,
    /// Initial trust width relative to `max(|x|, 1)`.
    pub initial_step: f64,
    /// Nodes for quadrature-based families built by the CLI.
    pub quadrature_nodes: usize,
    /// Keep count columns with no positive observation.
    pub allow_zero_columns: bool,
    /// After each MMA step, move the part of `M` spanned by the covariates
    /// into `Θ` (an exact ascent move; see [`fit_from`]).
    pub covariate_shift: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: Method::Mma,
            max_iterations: 5000,
            objective_tol: 1e-6,
            patience: 5,
            parameter_tol: 1e-10,
            gradient_tol: 1e-8,
            s_floor: 1e-4,
            s_init: 0.1,
            initial_step: 0.1,
            quadrature_nodes: DEFAULT_QUADRATURE_NODES,
            allow_zero_columns: false,
            covariate_shift: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("objective tolerance", self.objective_tol),
            ("parameter tolerance", self.parameter_tol),
            ("gradient tolerance", self.gradient_tol),
            ("S floor", self.s_floor),
            ("initial step", self.initial_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(PlnError::Config(format!("{name} must be positive (got {v})")));
            }
        }
        if self.s_init < self.s_floor {
            return Err(PlnError::Config("initial S is below the S floor".into()));
        }
        if self.patience == 0 {
            return Err(PlnError::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    fn stop_rule(&self) -> StopRule {
        StopRule {
            max_iterations: self.max_iterations,
            objective_tol: self.objective_tol,
            patience: self.patience,
            parameter_tol: self.parameter_tol,
            gradient_tol: self.gradient_tol,
            initial_step: self.initial_step,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StopRule {
    pub max_iterations: usize,
    pub objective_tol: f64,
    pub patience: usize,
    pub parameter_tol: f64,
    pub gradient_tol: f64,
    pub initial_step: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: FitStatus,
    pub trace: Vec<f64>,
}

/// Sup-norm of the gradient after zeroing components that push into an
/// active bound.
pub(crate) fn projected_gradient_inf_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    projected(x, g, lo, hi).fold(0.0, |m, v| m.max(v.abs()))
}

fn projected<'a>(
    x: &'a [f64],
    g: &'a [f64],
    lo: &'a [f64],
    hi: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    (0..x.len()).map(move |j| {
        let at_lo = x[j] <= lo[j] && g[j] < 0.0;
        let at_hi = x[j] >= hi[j] && g[j] > 0.0;
        if at_lo || at_hi {
            0.0
        } else {
            g[j]
        }
    })
}

/// Flat layout `[Θ | B | M | S]`, each block column-major.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    p: usize,
    d: usize,
    q: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.p * (self.d + self.q) + 2 * self.n * self.q
    }

    fn offsets(&self) -> [usize; 4] {
        let b = self.p * self.d;
        let m = b + self.p * self.q;
        let s = m + self.n * self.q;
        [0, b, m, s]
    }

    fn pack(&self, params: &ModelParams, vstate: &VariationalState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend_from_slice(params.theta.as_slice());
        x.extend_from_slice(params.loadings.as_slice());
        x.extend_from_slice(vstate.means.as_slice());
        x.extend_from_slice(vstate.sds.as_slice());
        x
    }

    fn unpack(&self, x: &[f64]) -> (ModelParams, VariationalState) {
        let [b, m, s] = [self.offsets()[1], self.offsets()[2], self.offsets()[3]];
        let params = ModelParams {
            theta: DMatrix::from_column_slice(self.p, self.d, &x[..b]),
            loadings: DMatrix::from_column_slice(self.p, self.q, &x[b..m]),
        };
        let vstate = VariationalState {
            means: DMatrix::from_column_slice(self.n, self.q, &x[m..s]),
            sds: DMatrix::from_column_slice(self.n, self.q, &x[s..]),
        };
        (params, vstate)
    }

    fn pack_gradients(&self, g: &Gradients, out: &mut [f64]) {
        let [t, b, m, s] = self.offsets();
        out[t..b].copy_from_slice(g.theta.as_slice());
        out[b..m].copy_from_slice(g.loadings.as_slice());
        out[m..s].copy_from_slice(g.means.as_slice());
        out[s..].copy_from_slice(g.sds.as_slice());
    }

    fn bounds(&self, s_floor: f64) -> (Vec<f64>, Vec<f64>) {
        let s = self.offsets()[3];
        let mut lower = vec![f64::NEG_INFINITY; self.len()];
        lower[s..].iter_mut().for_each(|v| *v = s_floor);
        (lower, vec![f64::INFINITY; self.len()])
    }
}

/// Moves the part of `M` lying in the column span of `X` into `Θ`:
/// `C = (XᵀX)⁻¹XᵀM`, `M ← M − XC`, `Θ ← Θ + BCᵀ`. `Z̃` and the variance
/// terms are unchanged and `‖M‖` can only shrink, so `J` never decreases.
struct CovariateProjector {
    x: DMatrix<f64>,
    /// `(XᵀX)⁻¹Xᵀ`, d×n.
    pinv: DMatrix<f64>,
    layout: Layout,
}

impl CovariateProjector {
    fn new(design: &Design, layout: Layout) -> Option<Self> {
        let x = design.covariates();
        if x.ncols() == 0 {
            return None;
        }
        let gram = x.transpose() * x;
        let chol = gram.cholesky()?;
        let pinv = chol.solve(&x.transpose());
        Some(Self {
            x: x.clone(),
            pinv,
            layout,
        })
    }

    fn apply(&self, flat: &mut [f64]) -> bool {
        let Layout { n, p, d, q } = self.layout;
        let [_, b_at, m_at, s_at] = self.layout.offsets();
        let m = DMatrix::from_column_slice(n, q, &flat[m_at..s_at]);
        let c = &self.pinv * &m;
        if c.amax() <= 1e-12 * m.amax().max(1e-300) {
            return false;
        }
        let b = DMatrix::from_column_slice(p, q, &flat[b_at..m_at]);
        let m_new = m - &self.x * &c;
        let theta_shift = b * c.transpose();
        for (dst, v) in flat[..p * d].iter_mut().zip(theta_shift.iter()) {
            *dst += v;
        }
        flat[m_at..s_at].copy_from_slice(m_new.as_slice());
        true
    }
}

/// `B₀ = U_q Λ_q^{1/2}` from the top-`q` eigenpairs of a covariance, so that
/// `B₀B₀ᵀ` is its best rank-`q` approximation. Columns are signed so their
/// largest-magnitude entry is positive.
pub fn loadings_from_covariance(sigma: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let p = sigma.nrows();
    let eig = SymmetricEigen::new(symmetrize(sigma.clone()));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut loadings = DMatrix::zeros(p, q);
    for (k, &idx) in order.iter().take(q).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        let v = eig.eigenvectors.column(idx);
        let pivot = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        loadings.set_column(k, &(v * (scale * sign)));
    }
    loadings
}

/// Starting point: least squares of the link-transformed counts minus
/// offsets on `X` gives `Θ₀`; the covariance of the residuals gives `B₀`;
/// `M₀ = 0` and `S₀ = config.s_init`.
///
/// Unobserved entries are replaced by the column mean of the observed
/// transformed values before the regression.
pub fn initialize(
    counts: &CountTable,
    design: &Design,
    family: &Family,
    q: usize,
    config: &OptimConfig,
) -> Result<(ModelParams, VariationalState)> {
    let (n, p) = (counts.nrows(), counts.ncols());
    if q == 0 || q > n.min(p) {
        return Err(PlnError::Config(format!(
            "rank must satisfy 1 <= q <= min(n, p) = {} (got {q})",
            n.min(p)
        )));
    }
    let d = design.ncovariates();
    let rank = crate::model::numerical_rank(design.covariates());
    if rank < d {
        return Err(PlnError::RankDeficient { rank, cols: d });
    }

    let mut target = DMatrix::from_fn(n, p, |i, j| {
        family.init_transform(counts.counts()[(i, j)]) - design.offsets()[(i, j)]
    });
    for j in 0..p {
        let observed: Vec<f64> = (0..n)
            .filter(|&i| counts.is_observed(i, j))
            .map(|i| target[(i, j)])
            .collect();
        let fill = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for i in 0..n {
            if !counts.is_observed(i, j) {
                target[(i, j)] = fill;
            }
        }
    }

    let theta = if d == 0 {
        DMatrix::zeros(p, 0)
    } else {
        let svd = design.covariates().clone().svd(true, true);
        svd.solve(&target, 1e-12)
            .map_err(|e| PlnError::Optimization(e.to_string()))?
            .transpose()
    };
    let mut residuals = &target - design.covariates() * theta.transpose();
    for mut col in residuals.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let sigma_lm = residuals.transpose() * &residuals / n as f64;
    let loadings = loadings_from_covariance(&sigma_lm, q);

    let params = ModelParams::new(theta, loadings)?;
    let vstate = VariationalState::new(
        DMatrix::zeros(n, q),
        DMatrix::from_element(n, q, config.s_init.max(config.s_floor)),
    )?;
    Ok((params, vstate))
}

/// Fits rank `q` from the default initialization.
pub fn fit_rank(
    counts: &CountTable,
    design: &Design,
    family: &Family,
    q: usize,
    config: &OptimConfig,
) -> Result<FitResult> {
    let null = null_model_for(counts, design, family);
    fit_rank_with_null(counts, design, family, q, config, null.as_ref())
}

fn null_model_for(counts: &CountTable, design: &Design, family: &Family) -> Option<NullModel> {
    if !matches!(family, Family::Poisson) {
        return None;
    }
    match NullModel::fit(counts, design) {
        Ok(null) => Some(null),
        Err(err) => {
            log::warn!("null GLM failed, pseudo-R² unavailable: {err}");
            None
        }
    }
}

fn fit_rank_with_null(
    counts: &CountTable,
    design: &Design,
    family: &Family,
    q: usize,
    config: &OptimConfig,
    null: Option<&NullModel>,
) -> Result<FitResult> {
    config.validate()?;
    counts.validate(family, config.allow_zero_columns)?;
    let start = initialize(counts, design, family, q, config)?;
    fit_from_with_null(counts, design, family, start, config, null)
}

/// Fits from an explicit starting point.
///
/// With [`Method::Mma`] and `covariate_shift`, every accepted step is
/// followed by `C = (XᵀX)⁻¹XᵀM`, `M ← M − XC`, `Θ ← Θ + BCᵀ`. This keeps
/// `Z̃` and the variance terms fixed and shrinks `‖M‖`, so `J` cannot
/// decrease, and it removes the slow Θ/M coupling that a separable method
/// otherwise resolves over thousands of iterations.
pub fn fit_from(
    counts: &CountTable,
    design: &Design,
    family: &Family,
    start: (ModelParams, VariationalState),
    config: &OptimConfig,
) -> Result<FitResult> {
    let null = null_model_for(counts, design, family);
    fit_from_with_null(counts, design, family, start, config, null.as_ref())
}

fn fit_from_with_null(
    counts: &CountTable,
    design: &Design,
    family: &Family,
    start: (ModelParams, VariationalState),
    config: &OptimConfig,
    null: Option<&NullModel>,
) -> Result<FitResult> {
    config.validate()?;
    let (params0, mut vstate0) = start;
    crate::model::check_consistent(&params0, &vstate0, design)?;
    let q = vstate0.rank();
    vstate0.sds.apply(|s| *s = s.max(config.s_floor));

    let layout = Layout {
        n: counts.nrows(),
        p: counts.ncols(),
        d: design.ncovariates(),
        q,
    };
    let mut objective = Objective::new(family, counts, design, q)?;
    let x0 = layout.pack(&params0, &vstate0);
    let (lower, upper) = layout.bounds(config.s_floor);

    let eval = |x: &[f64], grad: &mut [f64]| -> Result<f64> {
        let (params, vstate) = layout.unpack(x);
        let (value, g) = objective.value_and_gradients(&params, &vstate)?;
        layout.pack_gradients(&g, grad);
        Ok(value)
    };
    let rule = config.stop_rule();
    let projector = config
        .covariate_shift
        .then(|| CovariateProjector::new(design, layout))
        .flatten();
    let shift = |x: &mut [f64]| projector.as_ref().is_some_and(|p| p.apply(x));
    let outcome = match config.method {
        Method::Mma => mma::maximize_with(eval, shift, x0, &lower, &upper, &rule)?,
        Method::ProjectedGradient => pgd::maximize(eval, x0, &lower, &upper, &rule)?,
    };

    let (params, vstate) = layout.unpack(&outcome.x);
    let gradient_norm = projected(&outcome.x, &outcome.gradient, &lower, &upper)
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    assemble_fit(counts, design, params, vstate, outcome, gradient_norm, null)
}

fn assemble_fit(
    counts: &CountTable,
    design: &Design,
    params: ModelParams,
    vstate: VariationalState,
    outcome: Outcome,
    gradient_norm: f64,
    null: Option<&NullModel>,
) -> Result<FitResult> {
    let (n, p, d, q) = (
        counts.nrows(),
        counts.ncols(),
        design.ncovariates(),
        vstate.rank(),
    );
    let sigma = sigma_hat(&params, &vstate)?;
    let latent = latent_positions(&params, &vstate, design)?;
    let logliks = null.map(|null| selection::Logliks {
        model: selection::poisson_loglik(counts, &latent.z_tilde),
        null: null.loglik,
        saturated: selection::saturated_loglik(counts),
    });
    let criteria = Criteria::new(outcome.value, &vstate.sds, n, p, d, logliks);
    Ok(FitResult {
        rank: q,
        params,
        vstate,
        elbo: outcome.value,
        criteria,
        sigma_hat: sigma,
        latent,
        iterations: outcome.iterations,
        evaluations: outcome.evaluations,
        gradient_norm,
        status: outcome.status,
        trace: outcome.trace,
    })
}

/// One entry of a rank scan.
#[derive(Debug, Clone)]
pub struct RankFit {
    pub rank: usize,
    pub fit: std::result::Result<FitResult, PlnError>,
}

#[derive(Debug, Clone)]
pub struct RankScanResult {
    /// Strictly increasing in rank.
    pub fits: Vec<RankFit>,
    pub best_icl: Option<usize>,
    pub best_bic: Option<usize>,
}

impl RankScanResult {
    pub fn best(&self, criterion: Criterion) -> Option<usize> {
        match criterion {
            Criterion::Icl => self.best_icl,
            Criterion::Bic => self.best_bic,
        }
    }

    pub fn get(&self, rank: usize) -> Option<&FitResult> {
        self.fits
            .iter()
            .find(|f| f.rank == rank)
            .and_then(|f| f.fit.as_ref().ok())
    }

    pub fn successful(&self) -> impl Iterator<Item = &FitResult> {
        self.fits.iter().filter_map(|f| f.fit.as_ref().ok())
    }
}

/// Independent fit per rank, each from its own initialization. Ranks run
/// in parallel; results do not depend on scheduling.
pub fn fit_rank_scan(
    counts: &CountTable,
    design: &Design,
    family: &Family,
    ranks: &[usize],
    config: &OptimConfig,
) -> Result<RankScanResult> {
    if ranks.is_empty() {
        return Err(PlnError::Config("rank list is empty".into()));
    }
    config.validate()?;
    counts.validate(family, config.allow_zero_columns)?;
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    let limit = counts.nrows().min(counts.ncols());
    if let Some(&bad) = ranks.iter().find(|&&q| q == 0 || q > limit) {
        return Err(PlnError::Config(format!(
            "rank {bad} outside 1..={limit}"
        )));
    }
    let null = null_model_for(counts, design, family);
    let run = |q: usize| RankFit {
        rank: q,
        fit: fit_rank_with_null(counts, design, family, q, config, null.as_ref()),
    };
    let fits: Vec<RankFit> = map_ranks(&ranks, run);
    for f in &fits {
        if let Err(err) = &f.fit {
            log::warn!("rank {} failed: {err}", f.rank);
        }
    }
    let pick = |criterion| {
        selection::select_rank(
            fits.iter()
                .filter_map(|f| f.fit.as_ref().ok().map(|r| (f.rank, &r.criteria))),
            criterion,
        )
    };
    Ok(RankScanResult {
        best_icl: pick(Criterion::Icl),
        best_bic: pick(Criterion::Bic),
        fits,
    })
}

#[cfg(feature = "parallel")]
fn map_ranks<F: Fn(usize) -> RankFit + Sync>(ranks: &[usize], f: F) -> Vec<RankFit> {
    use rayon::prelude::*;
    ranks.par_iter().map(|&q| f(q)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ranks<F: Fn(usize) -> RankFit>(ranks: &[usize], f: F) -> Vec<RankFit> {
    ranks.iter().map(|&q| f(q)).collect()
}
