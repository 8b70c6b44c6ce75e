//! The objective family over kernel weights `theta`:
//!
//! * `phi_MKL(theta) = min_u u'K^{-1}u + loss(y,u) + lambda * sum theta^p`
//! * `phi_MAP(theta) = min_u u'K^{-1}u + loss(y,u) + ln|K|`
//! * `phi_GAU(theta) = y'(K+s2 I)^{-1}y + ln|K+s2 I| + n ln(2 pi)`
//! * `phi_MAP/GAU(theta) = y'(K+s2 I)^{-1}y + ln|K|`
//! * `phi_RR(theta) = y'(K+s2 I)^{-1}y + lambda * sum theta^p`
//! * `psi_VB(theta,gamma)` — the variational upper bound on the negative log
//!   evidence, evaluated through the Cholesky factor of `C = K + dg(gamma)`,
//!   with the site-width vector `gamma` as inner variable and an equivalent
//!   `z`-parametrisation through the marginal variances `z = dg(V)`.
//!
//! Constants (`n ln 2pi` and friends) are tracked explicitly everywhere so
//! that cross-objective identities hold as equalities, not merely up to
//! constants.
//!
//! Every evaluation is a pure function of `(theta, inner state)`; distinct
//! evaluations may run concurrently.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::DEFAULT_JITTER;
use crate::kernel::{assemble_gram, trace_products, BaseKernelSet, GramFactor, ThetaVector};
use crate::likelihood::LikelihoodModel;

const LN_2PI: f64 = 1.8378770664093453;

/// Inner Newton solves stop at this gradient norm times n.
pub const INNER_TOL_PER_SITE: f64 = 1e-8;
/// Site-width optimisation stops at this gamma-gradient norm times n.
pub const GAMMA_TOL_PER_SITE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    /// Regularised risk with `lambda * ||theta||_p^p`, `p >= 1`.
    Mkl { p: f64, lambda: f64 },
    /// Joint posterior maximisation with the `ln|K_theta|` term.
    Map,
    /// Exact Gaussian-noise negative log marginal likelihood.
    Gau,
    /// Gaussian-case joint MAP: quadratic term of GAU with `ln|K_theta|`.
    MapGau,
    /// Ridge approximation: quadratic term of GAU with a p-norm penalty.
    Rr { p: f64, lambda: f64 },
    /// Variational bound minimised over site widths.
    Vb,
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mkl { .. } => "mkl",
            Self::Map => "map",
            Self::Gau => "gau",
            Self::MapGau => "mapgau",
            Self::Rr { .. } => "rr",
            Self::Vb => "vb",
        }
    }
}

/// A fully specified learning problem: objective kind, likelihood and labels.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub likelihood: LikelihoodModel,
    pub y: DVector<f64>,
    /// Diagonal jitter for every assembled Gram matrix.
    pub jitter: f64,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, likelihood: LikelihoodModel, y: DVector<f64>) -> Result<Self> {
        likelihood.validate_labels(&y)?;
        match kind {
            ObjectiveKind::Mkl { p, lambda } | ObjectiveKind::Rr { p, lambda } => {
                if !(p >= 1.0) || !p.is_finite() {
                    return Err(Error::InvalidParameter(format!("p must be >= 1, got {p}")));
                }
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "lambda must be positive, got {lambda}"
                    )));
                }
            }
            _ => {}
        }
        match kind {
            ObjectiveKind::Gau | ObjectiveKind::MapGau | ObjectiveKind::Rr { .. }
                if !matches!(likelihood, LikelihoodModel::Gaussian { .. }) =>
            {
                return Err(Error::InvalidParameter(format!(
                    "the {} objective is the Gaussian-likelihood closed form; \
                     it cannot be used with {likelihood:?}",
                    kind.name()
                )));
            }
            _ => {}
        }
        Ok(Self { kind, likelihood, y, jitter: DEFAULT_JITTER })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(jitter > 0.0) {
            return Err(Error::InvalidParameter(format!("jitter must be positive, got {jitter}")));
        }
        self.jitter = jitter;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub(crate) fn sigma2(&self) -> f64 {
        match self.likelihood {
            LikelihoodModel::Gaussian { sigma2 } => sigma2,
            _ => unreachable!("sigma2 queried on a non-Gaussian spec"),
        }
    }

    /// Regulariser `lambda * sum theta_m^p` for MKL / RR kinds, else 0.
    pub fn regulariser(&self, theta: &ThetaVector) -> f64 {
        match self.kind {
            ObjectiveKind::Mkl { p, lambda } | ObjectiveKind::Rr { p, lambda } => {
                lambda * theta.as_slice().iter().map(|t| t.powf(p)).sum::<f64>()
            }
            _ => 0.0,
        }
    }
}

/// Inner variables attached to an objective value.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerState {
    /// Latent values for MKL / MAP.
    U(DVector<f64>),
    /// Site widths for VB.
    Gamma(DVector<f64>),
    /// Closed-form objectives carry no inner variable.
    None,
}

impl InnerState {
    pub fn u(&self) -> Option<&DVector<f64>> {
        match self {
            Self::U(u) => Some(u),
            _ => None,
        }
    }

    pub fn gamma(&self) -> Option<&DVector<f64>> {
        match self {
            Self::Gamma(g) => Some(g),
            _ => None,
        }
    }
}

/// Inner variables of one variational evaluation: latent mean `u`, site
/// widths `gamma`, marginal variances `z = dg(V)` and the smoothed latent
/// `v = sign(u) .* sqrt(u^2 + z)` (classification form; regression smooths
/// the residual instead).
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub u: DVector<f64>,
    pub gamma: DVector<f64>,
    pub z: DVector<f64>,
    pub v: DVector<f64>,
}

impl VariationalState {
    /// Assembles the full state at given site widths.
    pub fn at_gamma(
        theta: &ThetaVector,
        bases: &BaseKernelSet,
        model: &LikelihoodModel,
        y: &DVector<f64>,
        gamma: &DVector<f64>,
    ) -> Result<Self> {
        let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
        let parts = vb_parts(&gram, model, y, gamma)?;
        let z = optimal_z_from_parts(&parts);
        let u = parts.u_star.clone();
        let v = smoothed_latent(model, y, &u, &z);
        Ok(Self { u, gamma: gamma.clone(), z, v })
    }
}

fn sign0(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `v` entering the z-parametrised loss: classification smooths `u` itself,
/// regression smooths the residual `u - y` around the site location.
fn smoothed_latent(
    model: &LikelihoodModel,
    y: &DVector<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
) -> DVector<f64> {
    if model.is_classification() {
        DVector::from_fn(u.len(), |i, _| sign0(u[i]) * (u[i] * u[i] + z[i]).sqrt())
    } else {
        DVector::from_fn(u.len(), |i, _| {
            let r = u[i] - y[i];
            y[i] + sign0(r) * (r * r + z[i]).sqrt()
        })
    }
}

/// Solves `H d = rhs` for symmetric `H`, adding `rho I` with `rho` doubling
/// from 1e-10 until the factorisation succeeds.
pub(crate) fn solve_pd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    if let Some(ch) = Cholesky::new(h.clone()) {
        return Ok(ch.solve(rhs));
    }
    let mut rho = 1e-10;
    // scale-aware floor keeps the shift meaningful for badly scaled systems
    let scale = h.diagonal().amax().max(1.0);
    while rho <= 1e6 {
        let trial = h + DMatrix::identity(n, n) * (rho * scale);
        if let Some(ch) = Cholesky::new(trial) {
            return Ok(ch.solve(rhs));
        }
        rho *= 2.0;
    }
    Err(Error::NotConverged {
        what: "positive-definite regularisation of a Newton system",
        iterations: 0,
        residual: rho,
    })
}

/// Newton iterations on `u' K^{-1} u + loss(y, u)` (Laplace Huber-smoothed).
/// Strict mode errors when the iteration cap is hit before the gradient norm
/// drops below `tol`; otherwise the best iterate so far is returned.
pub(crate) fn u_newton_iterations(
    gram: &GramFactor,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    u0: &DVector<f64>,
    max_iter: usize,
    tol: f64,
    strict: bool,
) -> Result<(DVector<f64>, f64)> {
    let n = gram.dim();
    if y.len() != n || u0.len() != n {
        return Err(Error::DimensionMismatch {
            context: "inner Newton solve",
            expected: n,
            got: y.len().max(u0.len()),
        });
    }
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inner solve start u0"));
    }
    let kinv = gram.inverse();
    let mut u = u0.clone();
    let mut value = {
        let alpha = &kinv * &u;
        alpha.dot(&u) + model.map_loss(y, &u)?
    };
    for _ in 0..max_iter {
        let alpha = &kinv * &u;
        let (lg, lc) = model.lik_derivatives(y, &u)?;
        let grad = &alpha * 2.0 + &lg;
        if grad.norm() <= tol {
            return Ok((u, value));
        }
        let mut hess = &kinv * 2.0;
        for i in 0..n {
            hess[(i, i)] += lc[i];
        }
        let dir = solve_pd(&hess, &(-&grad))?;
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &u + &dir * step;
            let alpha_t = &kinv * &trial;
            let f_t = alpha_t.dot(&trial) + model.map_loss(y, &trial)?;
            if f_t <= value + 1e-4 * step * slope {
                u = trial;
                value = f_t;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // flat to numerical precision along a descent direction
            return Ok((u, value));
        }
    }
    if strict {
        let alpha = &kinv * &u;
        let (lg, _) = model.lik_derivatives(y, &u)?;
        let res = (&alpha * 2.0 + lg).norm();
        if res > tol {
            return Err(Error::NotConverged {
                what: "inner Newton solve over u",
                iterations: max_iter,
                residual: res,
            });
        }
    }
    Ok((u, value))
}

/// Newton minimisation of `u' K^{-1} u + loss(y, u)` for a fixed Gram factor.
///
/// Returns the minimiser and the objective value with the exact (unsmoothed)
/// loss evaluated at it; the Laplace loss is Huber-smoothed inside the solve.
pub fn inner_map_solve(
    gram: &GramFactor,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    u0: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let tol = INNER_TOL_PER_SITE * gram.dim() as f64;
    let (u, _) = u_newton_iterations(gram, model, y, u0, 200, tol, true)?;
    let exact = gram.inv_quad(&u) + model.neg_log2_lik(y, &u)?;
    Ok((u, exact))
}

fn inner_solve_fresh(
    spec: &ObjectiveSpec,
    gram: &GramFactor,
    warm: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, f64)> {
    let zero = DVector::zeros(spec.n());
    let u0 = warm.unwrap_or(&zero);
    inner_map_solve(gram, &spec.likelihood, &spec.y, u0)
}

/// `phi_MKL`: inner solve plus the p-norm regulariser.
pub fn eval_phi_mkl(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    spec: &ObjectiveSpec,
) -> Result<f64> {
    let ObjectiveKind::Mkl { .. } = spec.kind else {
        return Err(Error::InvalidParameter("eval_phi_mkl needs an MKL spec".into()));
    };
    let gram = assemble_gram(theta, bases, spec.jitter)?;
    let (_, inner_value) = inner_solve_fresh(spec, &gram, None)?;
    Ok(inner_value + spec.regulariser(theta))
}

/// `phi_MAP`: inner solve plus `ln|K_theta|`.
pub fn eval_phi_map(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    spec: &ObjectiveSpec,
) -> Result<f64> {
    let gram = assemble_gram(theta, bases, spec.jitter)?;
    let (_, inner_value) = inner_solve_fresh(spec, &gram, None)?;
    Ok(inner_value + gram.logdet())
}

fn shifted_gram(gram: &GramFactor, sigma2: f64) -> Result<GramFactor> {
    let n = gram.dim();
    let c = gram.matrix() + DMatrix::identity(n, n) * sigma2;
    GramFactor::from_matrix(c, gram.jitter())
}

/// `phi_GAU`: exact Gaussian negative log marginal, `n ln(2 pi)` included.
pub fn eval_phi_gau(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    sigma2: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    let c = shifted_gram(&gram, sigma2)?;
    Ok(c.inv_quad(y) + c.logdet() + y.len() as f64 * LN_2PI)
}

/// `phi_MAP/GAU`: the GAU quadratic term with `ln|K_theta|` instead of
/// `ln|K_theta + s2 I|` (no `2 pi` constants).
pub fn eval_phi_map_gau(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    sigma2: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    let c = shifted_gram(&gram, sigma2)?;
    Ok(c.inv_quad(y) + gram.logdet())
}

/// `phi_RR`: the GAU quadratic term with a p-norm penalty.
pub fn eval_phi_rr(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    sigma2: f64,
    y: &DVector<f64>,
    p: f64,
    lambda: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) || !(p >= 1.0) || !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "phi_RR needs sigma2 > 0, p >= 1, lambda > 0; got ({sigma2}, {p}, {lambda})"
        )));
    }
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    let c = shifted_gram(&gram, sigma2)?;
    let reg: f64 = lambda * theta.as_slice().iter().map(|t| t.powf(p)).sum::<f64>();
    Ok(c.inv_quad(y) + reg)
}

/// Everything one variational evaluation at `(theta, gamma)` produces.
pub(crate) struct VbParts {
    /// Factor of `C = K_theta + dg(gamma)`.
    pub c: GramFactor,
    /// `C^{-1} b` with `b = dg(gamma) beta` (classification) or `y` (regression).
    pub a: DVector<f64>,
    /// Site coefficient: `beta_i - a_i` (classification) or `-a_i` (regression).
    pub coef: DVector<f64>,
    pub gamma: DVector<f64>,
    pub dh: DVector<f64>,
    pub ddh: DVector<f64>,
    /// `psi_VB(theta, gamma)`.
    pub value: f64,
    /// Posterior mean of the bounding Gaussian.
    pub u_star: DVector<f64>,
}

pub(crate) fn vb_parts(
    gram: &GramFactor,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<VbParts> {
    let n = gram.dim();
    if y.len() != n || gamma.len() != n {
        return Err(Error::DimensionMismatch {
            context: "vb_parts",
            expected: n,
            got: y.len().max(gamma.len()),
        });
    }
    for &g in gamma.iter() {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::InvalidParameter(format!("site widths must be positive, got {g}")));
        }
    }
    model.validate_labels(y)?;
    let mut c_mat = gram.matrix().clone();
    for i in 0..n {
        c_mat[(i, i)] += gamma[i];
    }
    let c = GramFactor::from_matrix(c_mat, gram.jitter())?;
    let mut h_sum = 0.0;
    let mut dh = DVector::zeros(n);
    let mut ddh = DVector::zeros(n);
    for i in 0..n {
        let (h, d1, d2) = model.site_bound_h2(gamma[i])?;
        h_sum += h;
        dh[i] = d1;
        ddh[i] = d2;
    }
    let ln_gamma_sum: f64 = gamma.iter().map(|g| g.ln()).sum();
    if model.is_classification() {
        let beta = model.beta_vector(y)?;
        let b = gamma.component_mul(&beta);
        let a = c.solve(&b);
        let quad = b.dot(&a);
        let beta_gamma_beta: f64 =
            beta.iter().zip(gamma.iter()).map(|(&bi, &gi)| bi * bi * gi).sum();
        let value = c.logdet() - ln_gamma_sum + quad - beta_gamma_beta + h_sum;
        let coef = &beta - &a;
        let u_star = gamma.component_mul(&coef);
        Ok(VbParts { c, a, coef, gamma: gamma.clone(), dh, ddh, value, u_star })
    } else {
        let a = c.solve(y);
        let quad = y.dot(&a);
        let value = c.logdet() - ln_gamma_sum + quad + h_sum;
        let coef = -&a;
        let u_star = y + gamma.component_mul(&coef);
        Ok(VbParts { c, a, coef, gamma: gamma.clone(), dh, ddh, value, u_star })
    }
}

/// Gradient of `psi_VB` in `gamma`:
/// `(C^{-1})_ii - 1/gamma_i - coef_i^2 + h_i'(gamma_i)`.
pub(crate) fn vb_gamma_gradient(parts: &VbParts, c_inv_diag: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(parts.gamma.len(), |i, _| {
        c_inv_diag[i] - 1.0 / parts.gamma[i] - parts.coef[i] * parts.coef[i] + parts.dh[i]
    })
}

/// `psi_VB(theta, gamma)` via the Cholesky factor of `C = K_theta + dg(gamma)`.
pub fn eval_psi_vb_gamma(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<f64> {
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    Ok(vb_parts(&gram, model, y, gamma)?.value)
}

/// The same bound evaluated through the precision form
/// `ln|K^{-1} + dg(gamma)^{-1}| + h + min_u R + ln|K|`; an independent route
/// used to cross-check [`eval_psi_vb_gamma`].
pub fn eval_psi_vb_gamma_via_precision(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<f64> {
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    let n = gram.dim();
    let kinv = gram.inverse();
    let mut a_mat = kinv.clone();
    for i in 0..n {
        if !(gamma[i] > 0.0) {
            return Err(Error::InvalidParameter("gamma must be positive".into()));
        }
        a_mat[(i, i)] += 1.0 / gamma[i];
    }
    let a = GramFactor::from_matrix(a_mat, gram.jitter())?;
    let mut h_sum = 0.0;
    for i in 0..n {
        h_sum += model.site_bound_h(gamma[i])?.0;
    }
    let min_r = if model.is_classification() {
        let beta = model.beta_vector(y)?;
        -a.inv_quad(&beta)
    } else {
        let rhs = DVector::from_fn(n, |i, _| y[i] / gamma[i]);
        let u_star = a.solve(&rhs);
        let quad_k = (&kinv * &u_star).dot(&u_star);
        let quad_gamma: f64 = (0..n)
            .map(|i| {
                let r = u_star[i] - y[i];
                r * r / gamma[i]
            })
            .sum();
        quad_k + quad_gamma
    };
    Ok(a.logdet() + h_sum + min_r + gram.logdet())
}

fn optimal_z_from_parts(parts: &VbParts) -> DVector<f64> {
    let c_inv_diag = parts.c.inverse().diagonal();
    DVector::from_fn(parts.gamma.len(), |i, _| {
        parts.gamma[i] - parts.gamma[i] * parts.gamma[i] * c_inv_diag[i]
    })
}

/// Marginal variances `z = dg(V)`, `V = (K^{-1} + dg(gamma)^{-1})^{-1}`,
/// computed stably as `gamma_i - gamma_i^2 (C^{-1})_ii`; entries lie in
/// `(0, gamma_i)`.
pub fn optimal_z(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    gamma: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    let n = gram.dim();
    if gamma.len() != n {
        return Err(Error::DimensionMismatch {
            context: "optimal_z",
            expected: n,
            got: gamma.len(),
        });
    }
    let mut c_mat = gram.matrix().clone();
    for i in 0..n {
        if !(gamma[i] > 0.0) {
            return Err(Error::InvalidParameter("optimal_z needs gamma > 0".into()));
        }
        c_mat[(i, i)] += gamma[i];
    }
    let c = GramFactor::from_matrix(c_mat, gram.jitter())?;
    let c_inv_diag = c.inverse().diagonal();
    Ok(DVector::from_fn(n, |i, _| gamma[i] - gamma[i] * gamma[i] * c_inv_diag[i]))
}

/// Minimises `psi_VB` over the site widths by Newton on `ln gamma` with
/// backtracking; the Gaussian likelihood has fixed widths `sigma2`.
pub fn optimize_gamma(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    gamma0: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    optimize_gamma_gram(&gram, model, y, gamma0, 200)
}

pub(crate) fn optimize_gamma_gram(
    gram: &GramFactor,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    gamma0: &DVector<f64>,
    max_iter: usize,
) -> Result<(DVector<f64>, f64)> {
    let tol = GAMMA_TOL_PER_SITE * gram.dim() as f64;
    gamma_newton_iterations(gram, model, y, gamma0, max_iter, tol, true)
}

/// Newton iterations on `ln gamma`; strict mode errors at the cap, best-effort
/// mode returns the current iterate (used for the few inner sweeps of the
/// outer solver loop).
pub(crate) fn gamma_newton_iterations(
    gram: &GramFactor,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    gamma0: &DVector<f64>,
    max_iter: usize,
    tol: f64,
    strict: bool,
) -> Result<(DVector<f64>, f64)> {
    let n = gram.dim();
    if let LikelihoodModel::Gaussian { sigma2 } = model {
        let gamma = DVector::from_element(n, *sigma2);
        let value = vb_parts(gram, model, y, &gamma)?.value;
        return Ok((gamma, value));
    }
    for &g in gamma0.iter() {
        if !(g > 0.0) {
            return Err(Error::InvalidParameter("optimize_gamma needs gamma0 > 0".into()));
        }
    }
    let mut gamma = gamma0.clone();
    let mut parts = vb_parts(gram, model, y, &gamma)?;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let p_full = parts.c.inverse();
        let grad_gamma = vb_gamma_gradient(&parts, &p_full.diagonal());
        if grad_gamma.norm() <= tol {
            return Ok((gamma, parts.value));
        }
        // Hessian in gamma, then chain rule to x = ln gamma.
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let pij = p_full[(i, j)];
                h[(i, j)] = 2.0 * parts.coef[i] * parts.coef[j] * pij - pij * pij;
            }
            h[(i, i)] += 1.0 / (gamma[i] * gamma[i]) + parts.ddh[i];
        }
        let mut hx = DMatrix::zeros(n, n);
        let mut gx = DVector::zeros(n);
        for i in 0..n {
            gx[i] = gamma[i] * grad_gamma[i];
            for j in 0..n {
                hx[(i, j)] = gamma[i] * gamma[j] * h[(i, j)];
            }
            hx[(i, i)] += gamma[i] * grad_gamma[i];
        }
        let dir = solve_pd(&hx, &(-&gx))?;
        let slope = gx.dot(&dir);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = DVector::from_fn(n, |i, _| gamma[i] * (step * dir[i]).exp());
            if let Ok(trial_parts) = vb_parts(gram, model, y, &trial) {
                if trial_parts.value <= parts.value + 1e-4 * step * slope {
                    gamma = trial;
                    parts = trial_parts;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // numerically flat; in strict mode accept only near-stationarity
            if !strict || grad_gamma.norm() <= tol * 100.0 {
                return Ok((gamma, parts.value));
            }
            return Err(Error::NotConverged {
                what: "site-width line search",
                iterations: iter,
                residual: grad_gamma.norm(),
            });
        }
    }
    if strict {
        let g = vb_gamma_gradient(&parts, &parts.c.inverse().diagonal());
        if g.norm() > tol {
            return Err(Error::NotConverged {
                what: "site-width Newton",
                iterations: max_iter,
                residual: g.norm(),
            });
        }
    }
    Ok((gamma, parts.value))
}

/// Recovers the site widths whose marginal variances equal `z` by the
/// precision fixed point `s <- s + (1/z - 1/dg(V))`.
fn match_gamma_to_z(gram: &GramFactor, z: &DVector<f64>) -> Result<DVector<f64>> {
    let n = gram.dim();
    let kinv = gram.inverse();
    let mut s = DVector::from_fn(n, |i, _| {
        (1.0 / z[i] - 1.0 / gram.matrix()[(i, i)]).max(1e-12)
    });
    let mut worst = f64::INFINITY;
    for _iter in 0..500 {
        let mut a_mat = kinv.clone();
        for i in 0..n {
            a_mat[(i, i)] += s[i];
        }
        let a = GramFactor::from_matrix(a_mat, gram.jitter())?;
        let v = a.inverse().diagonal();
        worst = (0..n).map(|i| ((v[i] - z[i]).abs() / z[i]).abs()).fold(0.0, f64::max);
        if worst <= 1e-12 {
            return Ok(DVector::from_fn(n, |i, _| 1.0 / s[i]));
        }
        let mut step = 1.0;
        loop {
            let trial = DVector::from_fn(n, |i, _| s[i] + step * (1.0 / z[i] - 1.0 / v[i]));
            if trial.iter().all(|&si| si > 0.0) {
                s = trial;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(Error::NotConverged {
                    what: "site-width recovery from marginal variances",
                    iterations: _iter,
                    residual: worst,
                });
            }
        }
    }
    Err(Error::NotConverged {
        what: "site-width recovery from marginal variances",
        iterations: 500,
        residual: worst,
    })
}

/// The z-parametrised bound
/// `u'K^{-1}u + 2 beta'(v-u) - 2 ln P(y|v) - g*(z) + ln|K_theta|`
/// evaluated at a given `(u, z)`.
///
/// `g*(z)` is the tangent dual value `z'gamma^{-1} - ln|K^{-1} + Gamma^{-1}|`
/// at the site widths matched to `z`; at `z = 0` the dual term vanishes and
/// the expression is exactly the joint-MAP integrand.
pub fn eval_psi_vb_z(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    let gram = assemble_gram(theta, bases, DEFAULT_JITTER)?;
    let n = gram.dim();
    if u.len() != n || z.len() != n || y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "eval_psi_vb_z",
            expected: n,
            got: u.len().max(z.len()).max(y.len()),
        });
    }
    if z.iter().any(|&zi| zi < 0.0) {
        return Err(Error::InvalidParameter("z must be nonnegative".into()));
    }
    let quad = gram.inv_quad(u);
    if z.iter().all(|&zi| zi == 0.0) {
        return Ok(quad + model.neg_log2_lik(y, u)? + gram.logdet());
    }
    if z.iter().any(|&zi| zi == 0.0) {
        return Err(Error::InvalidParameter(
            "z must be all-zero or strictly positive; mixed patterns have no matched site widths"
                .into(),
        ));
    }
    let gamma = match_gamma_to_z(&gram, z)?;
    let v = smoothed_latent(model, y, u, z);
    let beta = model.beta_vector(y)?;
    let ell_tilde = 2.0 * beta.dot(&(&v - u)) + model.neg_log2_lik(y, &v)?;
    // ln|K^{-1} + Gamma^{-1}| = ln|C| - ln|K| - ln|Gamma|
    let mut c_mat = gram.matrix().clone();
    for i in 0..n {
        c_mat[(i, i)] += gamma[i];
    }
    let c = GramFactor::from_matrix(c_mat, gram.jitter())?;
    let ln_a = c.logdet() - gram.logdet() - gamma.iter().map(|g| g.ln()).sum::<f64>();
    let g_star: f64 = z.iter().zip(gamma.iter()).map(|(&zi, &gi)| zi / gi).sum::<f64>() - ln_a;
    Ok(quad + ell_tilde - g_star + gram.logdet())
}

/// Analytic gradient of the outer objective in `theta`, using the envelope
/// theorem at converged inner variables:
/// `d/dtheta_m u'K^{-1}u = -alpha'K_m alpha` with `alpha = K^{-1}u`, and
/// `d/dtheta_m ln|K| = tr(K^{-1}K_m)`.
pub fn theta_gradient(
    spec: &ObjectiveSpec,
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    inner: &InnerState,
) -> Result<Vec<f64>> {
    let gram = assemble_gram(theta, bases, spec.jitter)?;
    let m = bases.num_kernels();
    let n = spec.n();
    match spec.kind {
        ObjectiveKind::Mkl { .. } | ObjectiveKind::Map => {
            let u = inner.u().ok_or_else(|| {
                Error::InvalidParameter("this objective needs InnerState::U".into())
            })?;
            let alpha = gram.solve(u);
            let (lg, _) = spec.likelihood.lik_derivatives(&spec.y, u)?;
            let inner_grad = (&alpha * 2.0 + lg).norm();
            if inner_grad > 1e-6 * n as f64 {
                return Err(Error::NotConverged {
                    what: "inner state passed to theta_gradient",
                    iterations: 0,
                    residual: inner_grad,
                });
            }
            let mut g = Vec::with_capacity(m);
            for mm in 0..m {
                let km_alpha = bases.base(mm) * &alpha;
                g.push(-alpha.dot(&km_alpha));
            }
            match spec.kind {
                ObjectiveKind::Mkl { p, lambda } => {
                    for (gm, t) in g.iter_mut().zip(theta.as_slice()) {
                        *gm += lambda * p * t.powf(p - 1.0);
                    }
                }
                _ => {
                    let tp = trace_products(&gram, bases)?;
                    for (gm, t) in g.iter_mut().zip(tp) {
                        *gm += t;
                    }
                }
            }
            Ok(g)
        }
        ObjectiveKind::Gau | ObjectiveKind::MapGau | ObjectiveKind::Rr { .. } => {
            let c = shifted_gram(&gram, spec.sigma2())?;
            let a = c.solve(&spec.y);
            let mut g = Vec::with_capacity(m);
            for mm in 0..m {
                let km_a = bases.base(mm) * &a;
                g.push(-a.dot(&km_a));
            }
            match spec.kind {
                ObjectiveKind::Gau => {
                    let tp = trace_products(&c, bases)?;
                    for (gm, t) in g.iter_mut().zip(tp) {
                        *gm += t;
                    }
                }
                ObjectiveKind::MapGau => {
                    let tp = trace_products(&gram, bases)?;
                    for (gm, t) in g.iter_mut().zip(tp) {
                        *gm += t;
                    }
                }
                ObjectiveKind::Rr { p, lambda } => {
                    for (gm, t) in g.iter_mut().zip(theta.as_slice()) {
                        *gm += lambda * p * t.powf(p - 1.0);
                    }
                }
                _ => unreachable!(),
            }
            Ok(g)
        }
        ObjectiveKind::Vb => {
            let gamma = inner.gamma().ok_or_else(|| {
                Error::InvalidParameter("the VB objective needs InnerState::Gamma".into())
            })?;
            let parts = vb_parts(&gram, &spec.likelihood, &spec.y, gamma)?;
            if !matches!(spec.likelihood, LikelihoodModel::Gaussian { .. }) {
                let c_inv_diag = parts.c.inverse().diagonal();
                let res = vb_gamma_gradient(&parts, &c_inv_diag).norm();
                if res > 1e-5 * n as f64 {
                    return Err(Error::NotConverged {
                        what: "site widths passed to theta_gradient",
                        iterations: 0,
                        residual: res,
                    });
                }
            }
            let tp = trace_products(&parts.c, bases)?;
            let g = tp
                .into_iter()
                .enumerate()
                .map(|(mm, t)| {
                    let km_a = bases.base(mm) * &parts.a;
                    t - parts.a.dot(&km_a)
                })
                .collect();
            Ok(g)
        }
    }
}

/// An objective value together with the inner state it was attained at.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub inner: InnerState,
}

/// Evaluates any objective kind with its inner problem solved to tolerance.
pub fn eval_objective(
    spec: &ObjectiveSpec,
    theta: &ThetaVector,
    bases: &BaseKernelSet,
) -> Result<Evaluation> {
    let gram = assemble_gram(theta, bases, spec.jitter)?;
    match spec.kind {
        ObjectiveKind::Mkl { .. } => {
            let (u, inner_value) = inner_solve_fresh(spec, &gram, None)?;
            Ok(Evaluation { value: inner_value + spec.regulariser(theta), inner: InnerState::U(u) })
        }
        ObjectiveKind::Map => {
            let (u, inner_value) = inner_solve_fresh(spec, &gram, None)?;
            Ok(Evaluation { value: inner_value + gram.logdet(), inner: InnerState::U(u) })
        }
        ObjectiveKind::Gau => Ok(Evaluation {
            value: eval_phi_gau(theta, bases, spec.sigma2(), &spec.y)?,
            inner: InnerState::None,
        }),
        ObjectiveKind::MapGau => Ok(Evaluation {
            value: eval_phi_map_gau(theta, bases, spec.sigma2(), &spec.y)?,
            inner: InnerState::None,
        }),
        ObjectiveKind::Rr { p, lambda } => Ok(Evaluation {
            value: eval_phi_rr(theta, bases, spec.sigma2(), &spec.y, p, lambda)?,
            inner: InnerState::None,
        }),
        ObjectiveKind::Vb => {
            let gamma0 = spec.likelihood.default_gamma(&spec.y);
            let (gamma, value) =
                optimize_gamma_gram(&gram, &spec.likelihood, &spec.y, &gamma0, 200)?;
            Ok(Evaluation { value, inner: InnerState::Gamma(gamma) })
        }
    }
}
