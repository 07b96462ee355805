//! Natural exponential families `f(y | λ) = exp(yλ − b(λ) − a(y))`.
//!
//! Each family exposes the log-partition `b` with its first two
//! derivatives, the base measure `a`, the canonical link, and Gaussian
//! expectations `E[b^{(k)}(a + cU)]` with `U ~ N(0, 1)`. Poisson and the
//! unit-variance Gaussian have closed forms; any other family goes
//! through Gauss–Hermite quadrature.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use statrs::function::gamma::ln_gamma;

use crate::error::{PlnError, Result};
use crate::quadrature::GaussHermite;

pub const DEFAULT_QUADRATURE_NODES: usize = 40;

/// Which derivative of `b` to average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Value,
    First,
    Second,
}

impl TryFrom<u8> for Order {
    type Error = PlnError;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            0 => Ok(Order::Value),
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            _ => Err(PlnError::Config(format!(
                "expectation order must be 0, 1 or 2 (got {order})"
            ))),
        }
    }
}

/// `(E[b(V)], E[b′(V)], E[b″(V)])` for one entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectations {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

type ScalarFn = fn(f64) -> f64;

/// A family described only by its kernels; expectations use quadrature.
#[derive(Clone)]
pub struct GenericFamily {
    pub name: &'static str,
    pub b: ScalarFn,
    pub b_prime: ScalarFn,
    pub b_second: ScalarFn,
    pub base_measure: ScalarFn,
    pub link: ScalarFn,
    /// Open interval of admissible canonical parameters.
    pub domain: (f64, f64),
    /// Maps an observation to a starting value on the canonical scale.
    pub init_transform: ScalarFn,
    /// Observations must be nonnegative integers.
    pub count_valued: bool,
    rule: Arc<GaussHermite>,
}

impl GenericFamily {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &'static str,
        b: ScalarFn,
        b_prime: ScalarFn,
        b_second: ScalarFn,
        base_measure: ScalarFn,
        link: ScalarFn,
        init_transform: ScalarFn,
        nodes: usize,
    ) -> Self {
        Self {
            name,
            b,
            b_prime,
            b_second,
            base_measure,
            link,
            domain: (f64::NEG_INFINITY, f64::INFINITY),
            init_transform,
            count_valued: false,
            rule: Arc::new(GaussHermite::new(nodes.max(1))),
        }
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.domain = (lo, hi);
        self
    }

    pub fn count_valued(mut self) -> Self {
        self.count_valued = true;
        self
    }

    pub fn node_count(&self) -> usize {
        self.rule.len()
    }

    pub fn rule(&self) -> &GaussHermite {
        &self.rule
    }
}

impl fmt::Debug for GenericFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericFamily")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("nodes", &self.rule.len())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    Poisson,
    /// `b(x) = x²/2`; the normalizing constant lives in `a(y)`.
    GaussianUnitVariance,
    Generic(GenericFamily),
}

fn poisson_base(y: f64) -> f64 {
    ln_factorial(y)
}

/// `log y!`, exact table lookup for small integers, `log Γ(y + 1)` otherwise.
pub fn ln_factorial(y: f64) -> f64 {
    if y >= 0.0 && y.fract() == 0.0 && y <= 170.0 {
        statrs::function::factorial::ln_factorial(y as u64)
    } else {
        ln_gamma(y + 1.0)
    }
}

fn gaussian_base(y: f64) -> f64 {
    0.5 * y * y + 0.5 * (2.0 * PI).ln()
}

fn log1p_init(y: f64) -> f64 {
    y.ln_1p()
}

fn identity(x: f64) -> f64 {
    x
}

impl Family {
    /// Poisson kernels evaluated through quadrature instead of closed forms.
    pub fn poisson_quadrature(nodes: usize) -> Self {
        Family::Generic(GenericFamily::new(
            "poisson-quadrature",
            f64::exp,
            f64::exp,
            f64::exp,
            poisson_base,
            f64::ln,
            log1p_init,
            nodes,
        )
        .count_valued())
    }

    /// Unit-variance Gaussian kernels evaluated through quadrature.
    pub fn gaussian_quadrature(nodes: usize) -> Self {
        Family::Generic(GenericFamily::new(
            "gaussian-quadrature",
            |x| 0.5 * x * x,
            identity,
            |_| 1.0,
            gaussian_base,
            identity,
            identity,
            nodes,
        ))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::GaussianUnitVariance => "gaussian",
            Family::Generic(g) => g.name,
        }
    }

    /// True when observations must be nonnegative integers.
    pub fn is_count(&self) -> bool {
        match self {
            Family::Poisson => true,
            Family::GaussianUnitVariance => false,
            Family::Generic(g) => g.count_valued,
        }
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        let (lo, hi) = match self {
            Family::Generic(g) => g.domain,
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };
        if x.is_nan() || x <= lo || x >= hi {
            return Err(PlnError::Domain {
                what: "canonical parameter",
                value: x,
            });
        }
        Ok(())
    }

    pub fn b_value(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        let v = match self {
            Family::Poisson => x.exp(),
            Family::GaussianUnitVariance => 0.5 * x * x,
            Family::Generic(g) => (g.b)(x),
        };
        finite(v, "log-partition")
    }

    pub fn b_prime(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        let v = match self {
            Family::Poisson => x.exp(),
            Family::GaussianUnitVariance => x,
            Family::Generic(g) => (g.b_prime)(x),
        };
        finite(v, "mean map")
    }

    pub fn b_second(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        let v = match self {
            Family::Poisson => x.exp(),
            Family::GaussianUnitVariance => 1.0,
            Family::Generic(g) => (g.b_second)(x),
        };
        finite(v, "variance function")
    }

    /// Canonical link `g` with `g(b′(λ)) = λ`.
    pub fn link(&self, mean: f64) -> f64 {
        match self {
            Family::Poisson => mean.ln(),
            Family::GaussianUnitVariance => mean,
            Family::Generic(g) => (g.link)(mean),
        }
    }

    /// Starting value on the canonical scale for an observation.
    pub fn init_transform(&self, y: f64) -> f64 {
        match self {
            Family::Poisson => y.ln_1p(),
            Family::GaussianUnitVariance => y,
            Family::Generic(g) => (g.init_transform)(y),
        }
    }

    pub fn validate_observation(&self, y: f64) -> std::result::Result<(), &'static str> {
        if !y.is_finite() {
            return Err("observation is not finite");
        }
        if self.is_count() {
            if y < 0.0 {
                return Err("count is negative");
            }
            if y.fract() != 0.0 {
                return Err("count is not an integer");
            }
        }
        Ok(())
    }

    /// Base measure `a(y)`; `log y!` for Poisson.
    pub fn base_measure(&self, y: f64) -> Result<f64> {
        self.validate_observation(y)
            .map_err(|reason| PlnError::InvalidObservation {
                row: 0,
                col: 0,
                value: y,
                reason,
            })?;
        Ok(match self {
            Family::Poisson => poisson_base(y),
            Family::GaussianUnitVariance => gaussian_base(y),
            Family::Generic(g) => (g.base_measure)(y),
        })
    }

    /// `E[b^{(order)}(a + cU)]` for `U ~ N(0, 1)`.
    pub fn gauss_expectation(&self, a: f64, c: f64, order: Order) -> Result<f64> {
        let e = self.gauss_expectations(a, c)?;
        Ok(match order {
            Order::Value => e.value,
            Order::First => e.first,
            Order::Second => e.second,
        })
    }

    /// All three expectations in one pass.
    pub fn gauss_expectations(&self, a: f64, c: f64) -> Result<Expectations> {
        if c.is_nan() || c < 0.0 {
            return Err(PlnError::Domain {
                what: "quadrature scale",
                value: c,
            });
        }
        let e = match self {
            Family::Poisson => {
                let v = (a + 0.5 * c * c).exp();
                Expectations {
                    value: v,
                    first: v,
                    second: v,
                }
            }
            Family::GaussianUnitVariance => Expectations {
                value: 0.5 * (a * a + c * c),
                first: a,
                second: 1.0,
            },
            Family::Generic(g) => {
                let (mut value, mut first, mut second) = (0.0, 0.0, 0.0);
                for (&x, &w) in g.rule.nodes().iter().zip(g.rule.weights()) {
                    let v = a + c * x;
                    self.check_domain(v)?;
                    value += w * (g.b)(v);
                    first += w * (g.b_prime)(v);
                    second += w * (g.b_second)(v);
                }
                Expectations {
                    value,
                    first,
                    second,
                }
            }
        };
        if !(e.value.is_finite() && e.first.is_finite() && e.second.is_finite()) {
            return Err(PlnError::Overflow("Gaussian expectation of the log-partition"));
        }
        Ok(e)
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PlnError::Overflow(what))
    }
}
