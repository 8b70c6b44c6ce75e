//! Likelihood models and their loss-function counterparts.
//!
//! Every likelihood here is log-concave in the latent value, so `-2 ln P` is a
//! convex loss:
//!
//! | domain  | loss                | `-2 ln P(y|u)`                  | likelihood |
//! |---------|---------------------|---------------------------------|------------|
//! | {-1,+1} | log loss            | `2 ln(1 + exp(-tau y u))`       | logistic   |
//! | {-1,+1} | hinge loss          | none (no normalisable density)  | —          |
//! | R       | quadratic loss      | `(y-u)^2/s2 + ln(2 pi s2)`      | Gaussian   |
//! | R       | linear loss         | `2 tau |y-u| - 2 ln(tau/2)`     | Laplace    |
//! | R       | eps-insensitive     | none (no normalisable density)  | —          |
//!
//! The two loss-only rows are documentation entries: likelihood-based
//! objectives reject them at fit time ([`crate::Error::LossWithoutLikelihood`]).
//!
//! Each model also exposes its super-Gaussian site-bound data: a family of
//! scaled Gaussians of width `gamma` that lower-bound the likelihood pointwise
//! and touch it, with convex intercept `h(gamma)`. Classification sites bound
//! in `u` with a linear coefficient `beta`; regression sites bound in the
//! residual `u - y` with `beta = 0`.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Huber smoothing half-width for the Laplace loss on Newton (MAP) paths.
/// The variational path needs no smoothing; the site width does it.
pub const HUBER_DELTA: f64 = 1e-6;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodModel {
    /// `N(y | u, sigma2)`
    Gaussian { sigma2: f64 },
    /// `(tau/2) exp(-tau |y - u|)`
    Laplace { tau: f64 },
    /// `1 / (1 + exp(-tau y u))`, labels in {-1, +1}
    Logistic { tau: f64 },
}

impl LikelihoodModel {
    pub fn gaussian(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Gaussian noise variance must be positive, got {sigma2}"
            )));
        }
        Ok(Self::Gaussian { sigma2 })
    }

    pub fn laplace(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Laplace inverse scale must be positive, got {tau}"
            )));
        }
        Ok(Self::Laplace { tau })
    }

    pub fn logistic(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "logistic steepness must be positive, got {tau}"
            )));
        }
        Ok(Self::Logistic { tau })
    }

    /// Classification models bound sites in `u`; regression models in `u - y`.
    pub fn is_classification(&self) -> bool {
        matches!(self, Self::Logistic { .. })
    }

    pub fn validate_labels(&self, y: &DVector<f64>) -> Result<()> {
        match self {
            Self::Logistic { .. } => {
                for (i, &v) in y.iter().enumerate() {
                    if v != 1.0 && v != -1.0 {
                        return Err(Error::InvalidLabel { index: i, value: v, domain: "{-1,+1}" });
                    }
                }
            }
            _ => {
                for (i, &v) in y.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::InvalidLabel { index: i, value: v, domain: "R" });
                    }
                }
            }
        }
        Ok(())
    }

    fn site_neg_log2(&self, y: f64, u: f64) -> f64 {
        match *self {
            Self::Gaussian { sigma2 } => {
                let r = u - y;
                r * r / sigma2 + (sigma2).ln() + LN_2PI
            }
            Self::Laplace { tau } => 2.0 * tau * (u - y).abs() - 2.0 * (tau / 2.0).ln(),
            Self::Logistic { tau } => 2.0 * softplus(-tau * y * u),
        }
    }

    /// `-2 ln P(y|u) = -2 sum_i ln P(y_i|u_i)`, all normalising constants
    /// included (cross-objective identities rely on them).
    pub fn neg_log2_lik(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.validate_labels(y)?;
        if y.len() != u.len() {
            return Err(Error::DimensionMismatch {
                context: "neg_log2_lik",
                expected: y.len(),
                got: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent values u"));
        }
        Ok(y.iter().zip(u.iter()).map(|(&yi, &ui)| self.site_neg_log2(yi, ui)).sum())
    }

    /// Loss used on Newton (MAP) paths: identical to [`Self::neg_log2_lik`]
    /// except that the Laplace kink is Huber-smoothed with [`HUBER_DELTA`].
    pub fn map_loss(&self, y: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        match *self {
            Self::Laplace { tau } => {
                self.validate_labels(y)?;
                let mut acc = 0.0;
                for (&yi, &ui) in y.iter().zip(u.iter()) {
                    acc += 2.0 * tau * huber(ui - yi) - 2.0 * (tau / 2.0).ln();
                }
                Ok(acc)
            }
            _ => self.neg_log2_lik(y, u),
        }
    }

    /// Elementwise first and second derivatives in `u` of the (Laplace:
    /// Huber-smoothed) `-2 ln P`. Curvatures are nonnegative by log-concavity.
    pub fn lik_derivatives(
        &self,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.validate_labels(y)?;
        if y.len() != u.len() {
            return Err(Error::DimensionMismatch {
                context: "lik_derivatives",
                expected: y.len(),
                got: u.len(),
            });
        }
        let n = y.len();
        let mut grad = DVector::zeros(n);
        let mut curv = DVector::zeros(n);
        match *self {
            Self::Gaussian { sigma2 } => {
                for i in 0..n {
                    grad[i] = 2.0 * (u[i] - y[i]) / sigma2;
                    curv[i] = 2.0 / sigma2;
                }
            }
            Self::Laplace { tau } => {
                for i in 0..n {
                    let r = u[i] - y[i];
                    if r.abs() <= HUBER_DELTA {
                        grad[i] = 2.0 * tau * r / HUBER_DELTA;
                        curv[i] = 2.0 * tau / HUBER_DELTA;
                    } else {
                        grad[i] = 2.0 * tau * r.signum();
                        curv[i] = 0.0;
                    }
                }
            }
            Self::Logistic { tau } => {
                for i in 0..n {
                    let s = sigmoid(-tau * y[i] * u[i]);
                    grad[i] = -2.0 * tau * y[i] * s;
                    curv[i] = 2.0 * tau * tau * s * (1.0 - s);
                }
            }
        }
        Ok((grad, curv))
    }

    /// Linear site coefficients of the classification bound; zero for the
    /// regression (residual-site) models, whose site location is `y_i`.
    pub fn beta_vector(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.validate_labels(y)?;
        match *self {
            Self::Logistic { tau } => Ok(y * (tau / 2.0)),
            _ => Ok(DVector::zeros(y.len())),
        }
    }

    /// Site intercept `h_i(gamma)` and its first derivative such that
    ///
    /// * classification: `u^2/gamma - 2 beta u + h(gamma) >= -2 ln P(y|u)`,
    /// * regression: `(u-y)^2/gamma + h(gamma) >= -2 ln P(y|u)`,
    ///
    /// for all `u`, with equality at the touching point of that width.
    pub fn site_bound_h(&self, gamma: f64) -> Result<(f64, f64)> {
        let (h, dh, _) = self.site_bound_h2(gamma)?;
        Ok((h, dh))
    }

    /// [`Self::site_bound_h`] plus the second derivative, which the joint
    /// Newton system over `(theta, gamma)` needs.
    pub fn site_bound_h2(&self, gamma: f64) -> Result<(f64, f64, f64)> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "site width gamma must be positive, got {gamma}"
            )));
        }
        match *self {
            Self::Gaussian { sigma2 } => {
                // The Gaussian is its own (only) Gaussian bound: widths above
                // sigma2 cannot stay below the density, widths at or below it
                // share the intercept ln(2 pi sigma2).
                if gamma > sigma2 * (1.0 + 1e-12) {
                    return Err(Error::InvalidParameter(format!(
                        "Gaussian site width {gamma} exceeds the noise variance {sigma2}; \
                         no valid Gaussian lower bound of that width exists"
                    )));
                }
                Ok((sigma2.ln() + LN_2PI, 0.0, 0.0))
            }
            Self::Laplace { tau } => {
                // r^2/gamma + tau^2 gamma >= 2 tau |r|, tight at gamma = |r|/tau.
                Ok((tau * tau * gamma - 2.0 * (tau / 2.0).ln(), tau * tau, 0.0))
            }
            Self::Logistic { tau } => {
                let gamma_min = 4.0 / (tau * tau);
                if gamma <= gamma_min {
                    // Tangent bound at u = 0; constant intercept 2 ln 2.
                    return Ok((2.0 * std::f64::consts::LN_2, 0.0, 0.0));
                }
                // Width gamma pairs with the tangency parameter xi through
                // 1/(2 gamma) = lambda(xi) tau^2, lambda(xi) = tanh(xi/2)/(4 xi).
                let c = 1.0 / (2.0 * tau * tau * gamma);
                let xi = solve_xi(c);
                let h = 2.0 * softplus(-xi) + xi - xi * xi / (tau * tau * gamma);
                let dh = xi * xi / (tau * tau * gamma * gamma);
                let dxi2 = -xi / (tau * tau * gamma * gamma * lambda_jj_prime(xi));
                let ddh = dxi2 / (tau * tau * gamma * gamma)
                    - 2.0 * xi * xi / (tau * tau * gamma * gamma * gamma);
                Ok((h, dh, ddh))
            }
        }
    }

    /// `-2 ln` of the site bound at `(u, gamma)`; always `>= -2 ln P(y|u)`.
    pub fn site_bound_value(&self, y: f64, u: f64, gamma: f64) -> Result<f64> {
        let (h, _, _) = self.site_bound_h2(gamma)?;
        if self.is_classification() {
            let beta = match *self {
                Self::Logistic { tau } => tau * y / 2.0,
                _ => unreachable!(),
            };
            Ok(u * u / gamma - 2.0 * beta * u + h)
        } else {
            let r = u - y;
            Ok(r * r / gamma + h)
        }
    }

    /// Natural initial site widths for variational optimisation.
    pub fn default_gamma(&self, y: &DVector<f64>) -> DVector<f64> {
        match *self {
            Self::Gaussian { sigma2 } => DVector::from_element(y.len(), sigma2),
            Self::Laplace { tau } => DVector::from_fn(y.len(), |i, _| (1.0 + y[i].abs()) / tau),
            Self::Logistic { tau } => DVector::from_element(y.len(), 8.0 / (tau * tau)),
        }
    }
}

/// Bundled site-bound data for a whole data vector.
#[derive(Debug, Clone)]
pub struct SiteBound {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    /// `sum_i h_i(gamma_i)`
    pub h_value: f64,
}

impl SiteBound {
    pub fn new(model: &LikelihoodModel, y: &DVector<f64>, gamma: DVector<f64>) -> Result<Self> {
        if gamma.len() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "SiteBound gamma",
                expected: y.len(),
                got: gamma.len(),
            });
        }
        let beta = model.beta_vector(y)?;
        let mut h_value = 0.0;
        for &g in gamma.iter() {
            h_value += model.site_bound_h(g)?.0;
        }
        Ok(Self { beta, gamma, h_value })
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn huber(r: f64) -> f64 {
    if r.abs() <= HUBER_DELTA {
        r * r / (2.0 * HUBER_DELTA)
    } else {
        r.abs() - HUBER_DELTA / 2.0
    }
}

/// `lambda(xi) = tanh(xi/2) / (4 xi)`, continuously extended to 1/8 at 0.
fn lambda_jj(xi: f64) -> f64 {
    if xi < 1e-4 {
        0.125 - xi * xi / 96.0 + xi.powi(4) / 960.0
    } else {
        (xi / 2.0).tanh() / (4.0 * xi)
    }
}

fn lambda_jj_prime(xi: f64) -> f64 {
    if xi < 1e-3 {
        -xi / 48.0 + xi.powi(3) / 240.0
    } else {
        let t = (xi / 2.0).tanh();
        (xi * (1.0 - t * t) / 2.0 - t) / (4.0 * xi * xi)
    }
}

/// Inverts the strictly decreasing `lambda_jj` on `[0, inf)` by bisection.
fn solve_xi(c: f64) -> f64 {
    debug_assert!(c > 0.0 && c <= 0.125);
    if c >= 0.125 {
        return 0.0;
    }
    let mut lo = 0.0_f64;
    let mut hi = (0.3 / c).max(1.0);
    while lambda_jj(hi) > c {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if lambda_jj(mid) > c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
