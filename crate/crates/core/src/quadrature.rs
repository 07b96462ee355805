//! Gauss–Hermite rules for expectations under a standard normal.

use nalgebra::{DMatrix, SymmetricEigen};

/// Probabilists' Gauss–Hermite rule: `E[f(U)] ≈ Σ weights[k] · f(nodes[k])`
/// for `U ~ N(0, 1)`. Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `n`-point rule. Nodes start from the Golub–Welsch
    /// eigenvalues and are polished by Newton steps on the orthonormal
    /// Hermite polynomial; weights come from `1 / (n·h_{n−1}(x)²)`, which
    /// keeps full relative accuracy in the tails where eigenvector-based
    /// weights underflow to noise.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature rule needs at least one node");
        if n == 1 {
            return Self {
                nodes: vec![0.0],
                weights: vec![1.0],
                log_weights: vec![0.0],
            };
        }
        // Jacobi matrix of the monic probabilists' Hermite recurrence:
        // He_{k+1}(x) = x He_k(x) - k He_{k-1}(x).
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().cloned().collect();
        nodes.sort_by(f64::total_cmp);
        // Symmetrize: the exact rule is symmetric about zero.
        for k in 0..n / 2 {
            let x = 0.5 * (nodes[n - 1 - k] - nodes[k]);
            nodes[k] = -x;
            nodes[n - 1 - k] = x;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let mut log_weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (h, h_prev) = orthonormal_hermite(n, *x);
                let step = h / ((n as f64).sqrt() * h_prev);
                if step.is_finite() {
                    *x -= step;
                }
            }
            let (_, h_prev) = orthonormal_hermite(n, *x);
            log_weights.push(-(n as f64).ln() - 2.0 * h_prev.abs().ln());
        }
        let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_total = top + log_weights.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        log_weights.iter_mut().for_each(|l| *l -= log_total);
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        Self {
            nodes,
            weights,
            log_weights,
        }
    }

    /// Natural logarithms of the weights, accurate even where the weights
    /// themselves underflow.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(U)]` for `U ~ N(0, 1)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// `(h_n(x), h_{n−1}(x))` with `h_k = He_k / √k!`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}
