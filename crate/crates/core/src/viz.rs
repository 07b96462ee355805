//! Factor maps: an orthogonal, variance-ordered re-expression of the latent
//! positions `P̃ = M̃B̂ᵀ`, variable/axis correlations, and CSV export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dims, PlnError, Result};
use crate::model::{FactoredPositions, FitResult, FitStatus};
use crate::selection::Criteria;

/// Relative size below which a singular value of `P̃` counts as zero.
const ZERO_VARIANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorMap {
    /// n×r scores, column variances nonincreasing.
    pub scores: DMatrix<f64>,
    /// p×r loadings with orthonormal columns.
    pub loadings: DMatrix<f64>,
    /// Row added back to `scores·loadingsᵀ` to recover `P̃` (zero when uncentered).
    pub center: DVector<f64>,
    /// Per-axis variance of the scores (divisor n).
    pub axis_variance: Vec<f64>,
    /// `d_j`, summing to one.
    pub fractions: Vec<f64>,
    pub centered: bool,
}

impl FactorMap {
    /// Centered PCA of `P̃`, truncated at the latent rank.
    pub fn orthogonalize(positions: &FactoredPositions) -> Result<Self> {
        Self::build(positions, true)
    }

    /// Same decomposition without column centering. `scores·loadingsᵀ`
    /// reproduces `P̃` with no offset, and `loadings·scoresᵀ·scores·loadingsᵀ`
    /// equals `B̂M̃ᵀM̃B̂ᵀ`.
    pub fn orthogonalize_uncentered(positions: &FactoredPositions) -> Result<Self> {
        Self::build(positions, false)
    }

    fn build(positions: &FactoredPositions, centered: bool) -> Result<Self> {
        let m = &positions.scores;
        let b = &positions.loadings;
        let (n, q) = m.shape();
        let p = b.nrows();
        if q == 0 {
            return Err(PlnError::Config("factor map needs at least one latent axis".into()));
        }
        check_dims("loadings", (p, q), b.shape())?;

        let means = if centered {
            DVector::from_iterator(q, m.column_iter().map(|c| c.mean()))
        } else {
            DVector::zeros(q)
        };
        let mut mc = m.clone();
        for (k, mut col) in mc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-means[k]);
        }
        let center = b * &means;

        // P̃c = Q₁(R₁R₂ᵀ)Q₂ᵀ, so only the small core needs an SVD.
        let qr_m = mc.qr();
        let qr_b = b.clone().qr();
        let (q1, r1) = (qr_m.q(), qr_m.r());
        let (q2, r2) = (qr_b.q(), qr_b.r());
        let core = &r1 * r2.transpose();
        let svd = core.svd(true, true);
        let (uc, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(v)) => (u, v),
            _ => return Err(PlnError::Optimization("SVD of the factor core failed".into())),
        };
        let sv = svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &c| sv[c].total_cmp(&sv[a]).then(a.cmp(&c)));

        let top = sv.iter().cloned().fold(0.0, f64::max);
        let scale = m.amax() * b.amax();
        if top <= ZERO_VARIANCE * scale || top == 0.0 {
            log::warn!("latent positions have zero variance; factor map has no axes");
            return Ok(Self {
                scores: DMatrix::zeros(n, 0),
                loadings: DMatrix::zeros(p, 0),
                center,
                axis_variance: Vec::new(),
                fractions: Vec::new(),
                centered,
            });
        }

        let r = order.len();
        let left = &q1 * &uc;
        let right = &q2 * vt.transpose();
        let mut scores = DMatrix::zeros(n, r);
        let mut loadings = DMatrix::zeros(p, r);
        for (k, &idx) in order.iter().enumerate() {
            let mut v = right.column(idx).into_owned();
            let mut u = left.column(idx) * sv[idx];
            let pivot = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.neg_mut();
                u.neg_mut();
            }
            loadings.set_column(k, &v);
            scores.set_column(k, &u);
        }
        let axis_variance: Vec<f64> = order.iter().map(|&i| sv[i] * sv[i] / n as f64).collect();
        let total: f64 = axis_variance.iter().sum();
        let fractions = axis_variance.iter().map(|v| v / total).collect();
        Ok(Self {
            scores,
            loadings,
            center,
            axis_variance,
            fractions,
            centered,
        })
    }

    pub fn naxes(&self) -> usize {
        self.fractions.len()
    }

    /// `scores·loadingsᵀ + 1·centerᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut p = &self.scores * self.loadings.transpose();
        for mut row in p.row_iter_mut() {
            row += self.center.transpose();
        }
        p
    }

    /// `d_j·R²`, the share of the model's explained deviance carried by each axis.
    pub fn contributions(&self, r2: f64) -> Vec<f64> {
        self.fractions.iter().map(|d| d * r2).collect()
    }

    /// `n⁻¹ B_viz M_vizᵀ M_viz B_vizᵀ`; on the uncentered map this equals
    /// `n⁻¹ B̂M̃ᵀM̃B̂ᵀ`, the score part of `Σ̂`. On the centered map it falls
    /// short of that by exactly [`FactorMap::mean_term`].
    pub fn score_covariance(&self) -> DMatrix<f64> {
        let n = self.scores.nrows() as f64;
        let inner = self.scores.transpose() * &self.scores / n;
        &self.loadings * inner * self.loadings.transpose()
    }

    /// `c cᵀ`, with `c = B̂m̄` the centering offset.
    pub fn mean_term(&self) -> DMatrix<f64> {
        &self.center * self.center.transpose()
    }

    /// `Σ̂` rebuilt from the map and the variational spread
    /// `n⁻¹diag(1ᵀ(S⊙S))` carried through `B̂`.
    pub fn sigma_hat(&self, fit: &FitResult) -> DMatrix<f64> {
        let n = fit.vstate.nrows() as f64;
        let b = &fit.params.loadings;
        let sbar = DMatrix::from_diagonal(&DVector::from_iterator(
            fit.vstate.rank(),
            fit.vstate.sds.column_iter().map(|c| c.norm_squared() / n),
        ));
        let spread = b * sbar * b.transpose();
        let mut sigma = self.score_covariance() + spread;
        if self.centered {
            sigma += self.mean_term();
        }
        sigma
    }
}

/// Pearson correlation of every column of `positions` with every column of
/// `components`. A zero-variance column yields zeros.
pub fn correlation_circle(positions: &DMatrix<f64>, components: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = positions.nrows();
    check_dims("components", (n, components.ncols()), components.shape())?;
    let standardize = |m: &DMatrix<f64>, what: &str| {
        let mut z = m.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let norm = col.norm();
            if norm <= f64::EPSILON * mean.abs().max(1.0) * (n as f64).sqrt() {
                log::warn!("{what} column {j} has zero variance; correlations set to 0");
                col.fill(0.0);
            } else {
                col /= norm;
            }
        }
        z
    };
    let a = standardize(positions, "latent position");
    let c = standardize(components, "component");
    let mut r = a.transpose() * c;
    r.apply(|v| *v = v.clamp(-1.0, 1.0));
    Ok(r)
}

/// One row of `criteria.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct CriteriaRow {
    pub rank: usize,
    pub criteria: Option<Criteria>,
    pub status: Option<FitStatus>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

impl CriteriaRow {
    pub fn from_fit(fit: &FitResult) -> Self {
        Self {
            rank: fit.rank,
            criteria: Some(fit.criteria.clone()),
            status: Some(fit.status),
            iterations: Some(fit.iterations),
            error: None,
        }
    }
}

/// Names written in CSV headers and first columns.
#[derive(Debug, Clone)]
pub struct Labels<'a> {
    pub samples: &'a [String],
    pub variables: &'a [String],
}

/// Everything `export` writes.
pub struct ExportInput<'a> {
    pub fit: &'a FitResult,
    pub map: &'a FactorMap,
    pub correlations: &'a DMatrix<f64>,
    pub criteria: &'a [CriteriaRow],
    pub chosen_rank: Option<usize>,
    pub labels: Labels<'a>,
}

pub const SCRIPT_NAME: &str = "factor_maps.py";

/// Writes scores, loadings, criteria, `Σ̂`, correlations and a plotting
/// script into `out_dir`. Returns the paths written.
pub fn export(input: &ExportInput<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let axes: Vec<String> = (1..=input.map.naxes()).map(|k| format!("Axis{k}")).collect();
    let vars: Vec<String> = input.labels.variables.to_vec();
    check_dims("sample labels", (input.labels.samples.len(), 1), (input.map.scores.nrows(), 1))?;
    check_dims("variable labels", (input.labels.variables.len(), 1), (input.map.loadings.nrows(), 1))?;

    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put(
        "scores.csv",
        matrix_csv("sample", &axes, input.labels.samples, &input.map.scores),
    )?;
    put(
        "loadings.csv",
        matrix_csv("variable", &axes, input.labels.variables, &input.map.loadings),
    )?;
    put(
        "sigma_hat.csv",
        matrix_csv("variable", &vars, input.labels.variables, &input.fit.sigma_hat),
    )?;
    put(
        "correlations.csv",
        matrix_csv("variable", &axes, input.labels.variables, input.correlations),
    )?;
    put("criteria.csv", criteria_csv(input.criteria, input.chosen_rank))?;
    let percents = axis_percentages(input.map, input.fit.criteria.r2);
    put(SCRIPT_NAME, plot_script(&percents))?;
    Ok(written)
}

/// Axis label percentages `d_j·R²·100`, or `d_j·100` when R² is unavailable.
pub fn axis_percentages(map: &FactorMap, r2: Option<f64>) -> Vec<f64> {
    map.contributions(r2.unwrap_or(1.0)).iter().map(|c| 100.0 * c).collect()
}

pub fn axis_label(axis: usize, percent: f64) -> String {
    format!("Axis {axis} ({percent:.1}%)")
}

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_optional(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_else(|| "NA".into())
}

/// Quotes a field per RFC 4180 when it needs it.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn matrix_csv(corner: &str, header: &[String], rows: &[String], m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    out.push_str(corner);
    for h in header {
        out.push(',');
        out.push_str(&csv_field(h));
    }
    out.push('\n');
    for (i, name) in rows.iter().enumerate() {
        out.push_str(&csv_field(name));
        for j in 0..m.ncols() {
            out.push(',');
            out.push_str(&format_value(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn criteria_csv(rows: &[CriteriaRow], chosen: Option<usize>) -> String {
    let mut out = String::from(
        "rank,elbo,bic,icl,entropy,r2,loglik_model,loglik_null,loglik_saturated,status,iterations,chosen\n",
    );
    for row in rows {
        let c = row.criteria.as_ref();
        let status = match (&row.status, &row.error) {
            (Some(s), _) => s.as_str().to_string(),
            (None, Some(e)) => csv_field(&format!("error: {e}")),
            (None, None) => "NA".into(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            row.rank,
            format_optional(c.map(|c| c.elbo)),
            format_optional(c.map(|c| c.bic)),
            format_optional(c.map(|c| c.icl)),
            format_optional(c.map(|c| c.entropy)),
            format_optional(c.and_then(|c| c.r2)),
            format_optional(c.and_then(|c| c.loglik_model)),
            format_optional(c.and_then(|c| c.loglik_null)),
            format_optional(c.and_then(|c| c.loglik_saturated)),
            status,
            row.iterations.map(|i| i.to_string()).unwrap_or_else(|| "NA".into()),
            u8::from(chosen == Some(row.rank)),
        );
    }
    out
}

fn plot_script(percents: &[f64]) -> String {
    let labels: Vec<String> = percents
        .iter()
        .enumerate()
        .map(|(k, &pct)| format!("    {:?},", axis_label(k + 1, pct)))
        .collect();
    format!(
        r#"#!/usr/bin/env python3
# Individual and variable factor maps for the first two axes.
# Run from this directory: python3 {SCRIPT_NAME}
import csv
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

AXIS_LABELS = [
{labels}
]


def read(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:]]
    values = [[float(v) for v in r[1:]] for r in rows[1:]]
    return names, values


def pair(values):
    xs = [v[0] if len(v) > 0 else 0.0 for v in values]
    ys = [v[1] if len(v) > 1 else 0.0 for v in values]
    return xs, ys


def label(k):
    return AXIS_LABELS[k] if k < len(AXIS_LABELS) else "Axis %d" % (k + 1)


samples, scores = read("scores.csv")
variables, corr = read("correlations.csv")

fig, ax = plt.subplots(figsize=(6, 6))
xs, ys = pair(scores)
ax.scatter(xs, ys, s=12)
ax.axhline(0, color="grey", lw=0.5)
ax.axvline(0, color="grey", lw=0.5)
ax.set_xlabel(label(0))
ax.set_ylabel(label(1))
ax.set_title("Individual factor map")
fig.tight_layout()
fig.savefig("individual_factor_map.png", dpi=150)

fig, ax = plt.subplots(figsize=(6, 6))
t = [2 * math.pi * i / 200 for i in range(201)]
ax.plot([math.cos(a) for a in t], [math.sin(a) for a in t], color="grey", lw=0.5)
xs, ys = pair(corr)
for name, x, y in zip(variables, xs, ys):
    ax.arrow(0, 0, x, y, head_width=0.02, length_includes_head=True)
    ax.annotate(name, (x, y), fontsize=7)
ax.set_xlim(-1.1, 1.1)
ax.set_ylim(-1.1, 1.1)
ax.set_aspect("equal")
ax.set_xlabel(label(0))
ax.set_ylabel(label(1))
ax.set_title("Variable factor map")
fig.tight_layout()
fig.savefig("variable_factor_map.png", dpi=150)
"#,
        labels = labels.join("\n")
    )
}

/// Parses a matrix written by [`matrix_csv`], returning row names, header and values.
pub fn read_matrix_csv(text: &str) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| PlnError::Input("empty matrix file".into()))?
        .split(',')
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (r, line) in lines.enumerate() {
        let mut fields = line.split(',');
        names.push(fields.next().unwrap_or_default().to_string());
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| PlnError::Input(format!("row {}: bad number {f:?}", r + 2)))
            })
            .collect::<Result<_>>()?;
        if row.len() != header.len() {
            return Err(PlnError::Input(format!("row {} has {} values", r + 2, row.len())));
        }
        values.extend(row);
    }
    let m = DMatrix::from_row_slice(names.len(), header.len(), &values);
    Ok((names, header, m))
}
