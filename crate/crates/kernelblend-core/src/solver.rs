//! The double-loop solver: alternate tangent refits of the concave
//! log-determinant term with joint Newton steps on the convexified criterion,
//! inside a log-barrier continuation that keeps the kernel weights positive.
//!
//! Writing the objective as `psi_#(theta, inner) = psi~(theta, inner) + f(theta)`
//! with `f` the concave log-determinant part, each outer iteration:
//!
//! 1. runs a few Newton steps on the inner block at fixed `theta` (optional),
//! 2. refits the tangent bound `lambda <- grad f(theta)`, giving the jointly
//!    convex majorant `psi_lambda = psi~ + lambda' theta - f*(lambda)` that
//!    touches `psi_#` at the current point,
//! 3. solves the joint Newton system of `t * psi_lambda` plus the barrier,
//! 4. backtracks on the true barrier objective `t * psi_# - sum ln theta`.
//!
//! MKL and RR have no concave part and get exact Newton directions. For VB
//! the inner block is the site-width vector (positivity handled by the same
//! fraction-to-boundary cap as `theta`); other likelihood objectives use the
//! latent vector `u`. VB with a Gaussian likelihood has fixed site widths and
//! collapses to the GAU objective, so it is solved as such.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{assemble_gram, trace_products, BaseKernelSet, GramFactor, ThetaVector};
use crate::likelihood::LikelihoodModel;
use crate::objective::{
    gamma_newton_iterations, solve_pd, u_newton_iterations, vb_gamma_gradient, vb_parts,
    InnerState, ObjectiveKind, ObjectiveSpec,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Weights at or below `SPARSITY_RTOL * max(theta)` are reported as pruned.
pub const SPARSITY_RTOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Projected-gradient (max-norm) threshold for convergence.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Newton steps on the inner block per outer iteration ("optional; few").
    pub inner_newton_steps: usize,
    pub barrier_t0: f64,
    pub barrier_mult: f64,
    /// Grow t every this many outer iterations.
    pub barrier_every: usize,
    pub barrier_t_max: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_linesearch: usize,
    pub jitter: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-5,
            max_outer: 200,
            inner_newton_steps: 3,
            barrier_t0: 10.0,
            barrier_mult: 10.0,
            barrier_every: 5,
            barrier_t_max: 1e8,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_linesearch: 50,
            jitter: crate::kernel::DEFAULT_JITTER,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("outer_tol", self.outer_tol),
            ("barrier_t0", self.barrier_t0),
            ("barrier_t_max", self.barrier_t_max),
            ("armijo_c", self.armijo_c),
            ("jitter", self.jitter),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.barrier_mult > 1.0) {
            return Err(Error::InvalidParameter("barrier_mult must exceed 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidParameter("backtrack factor must lie in (0,1)".into()));
        }
        if self.max_outer == 0 || self.max_linesearch == 0 || self.barrier_every == 0 {
            return Err(Error::InvalidParameter("iteration counts must be positive".into()));
        }
        Ok(())
    }
}

/// One accepted outer iteration.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub phase_t: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub alpha: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    /// CSV with header `iter,phase_t,objective,grad_norm,alpha,theta_0..`.
    pub fn to_csv(&self) -> String {
        let m = self.rows.first().map_or(0, |r| r.theta.len());
        let mut out = String::from("iter,phase_t,objective,grad_norm,alpha");
        for i in 0..m {
            out.push_str(&format!(",theta_{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.iter, r.phase_t, r.objective, r.grad_norm, r.alpha
            ));
            for t in &r.theta {
                out.push_str(&format!(",{t}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

impl FitStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIterations => "max-iter",
            Self::LineSearchFailed => "line-search-failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ThetaVector,
    pub inner: InnerState,
    /// Posterior mean latent values at `theta_hat` (for prediction).
    pub u_hat: DVector<f64>,
    /// Final objective value (exact losses, no Huber smoothing).
    pub value: f64,
    pub status: FitStatus,
    pub trace: ConvergenceTrace,
    pub projected_grad_norm: f64,
    pub iterations: usize,
}

impl FitResult {
    /// True where the weight is pruned (`theta_m <= 1e-6 * max theta`).
    pub fn sparsity_pattern(&self) -> Vec<bool> {
        let max = self.theta_hat.as_slice().iter().cloned().fold(0.0, f64::max);
        self.theta_hat.as_slice().iter().map(|&t| t <= SPARSITY_RTOL * max).collect()
    }
}

/// Tangent majorant of a concave log-determinant: `lambda' theta - dual_value`
/// dominates the log-determinant everywhere and touches it at the anchor.
#[derive(Debug, Clone)]
pub struct TangentBound {
    pub lambda: Vec<f64>,
    /// `f*(lambda) = lambda' theta_0 - ln|K_{theta_0}|`.
    pub dual_value: f64,
}

impl TangentBound {
    pub fn value_at(&self, theta: &ThetaVector) -> f64 {
        self.lambda.iter().zip(theta.as_slice()).map(|(l, t)| l * t).sum::<f64>() - self.dual_value
    }
}

/// Refit of the tangent bound at the current weights:
/// `lambda = [tr(K^{-1}K_1), .., tr(K^{-1}K_M)]`.
pub fn refit_lambda(
    gram: &GramFactor,
    bases: &BaseKernelSet,
    theta: &ThetaVector,
) -> Result<TangentBound> {
    let lambda = trace_products(gram, bases)?;
    let dual_value =
        lambda.iter().zip(theta.as_slice()).map(|(l, t)| l * t).sum::<f64>() - gram.logdet();
    Ok(TangentBound { lambda, dual_value })
}

/// Which Gram matrix carries the concave log-determinant of this objective.
enum ConcavePart {
    None,
    /// `ln|K_theta|`
    Kernel,
    /// `ln|K_theta + sigma2 I|`
    Shifted,
}

fn concave_part(kind: &ObjectiveKind) -> ConcavePart {
    match kind {
        ObjectiveKind::Mkl { .. } | ObjectiveKind::Rr { .. } => ConcavePart::None,
        ObjectiveKind::Gau => ConcavePart::Shifted,
        _ => ConcavePart::Kernel,
    }
}

/// VB with Gaussian likelihood has fixed site widths `sigma2` and is exactly
/// the GAU objective; solve it as such.
fn effective_spec(spec: &ObjectiveSpec) -> ObjectiveSpec {
    if matches!(spec.kind, ObjectiveKind::Vb)
        && matches!(spec.likelihood, LikelihoodModel::Gaussian { .. })
    {
        let mut s = spec.clone();
        s.kind = ObjectiveKind::Gau;
        return s;
    }
    spec.clone()
}

fn inner_dim(spec: &ObjectiveSpec) -> usize {
    match spec.kind {
        ObjectiveKind::Mkl { .. } | ObjectiveKind::Map | ObjectiveKind::Vb => spec.n(),
        _ => 0,
    }
}

fn inner_is_positive(spec: &ObjectiveSpec) -> bool {
    matches!(spec.kind, ObjectiveKind::Vb)
}

/// The joint system at one point: true objective/gradient of `psi_#` and the
/// Newton data of the convexified `psi_lambda`.
struct SystemOut {
    value: f64,
    grad_true: DVector<f64>,
    grad_lambda: DVector<f64>,
    hess: DMatrix<f64>,
}

struct Problem<'a> {
    spec: &'a ObjectiveSpec,
    bases: &'a BaseKernelSet,
}

fn need_lambda(lambda: Option<&[f64]>) -> Result<&[f64]> {
    lambda.ok_or_else(|| {
        Error::InvalidParameter(
            "this objective's convexified Newton system needs a tangent bound".into(),
        )
    })
}

impl<'a> Problem<'a> {
    fn m(&self) -> usize {
        self.bases.num_kernels()
    }

    fn gram(&self, theta: &ThetaVector) -> Result<GramFactor> {
        assemble_gram(theta, self.bases, self.spec.jitter)
    }

    fn shifted(&self, gram: &GramFactor) -> Result<GramFactor> {
        let n = gram.dim();
        let c = gram.matrix() + DMatrix::identity(n, n) * self.spec.sigma2();
        GramFactor::from_matrix(c, gram.jitter())
    }

    fn regulariser_derivs(&self, theta: &ThetaVector) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        match self.spec.kind {
            ObjectiveKind::Mkl { p, lambda } | ObjectiveKind::Rr { p, lambda } => {
                let val = lambda * theta.as_slice().iter().map(|t| t.powf(p)).sum::<f64>();
                let d1 = theta.as_slice().iter().map(|t| lambda * p * t.powf(p - 1.0)).collect();
                let d2 = theta
                    .as_slice()
                    .iter()
                    .map(|t| {
                        if p == 1.0 {
                            0.0
                        } else {
                            lambda * p * (p - 1.0) * t.powf(p - 2.0)
                        }
                    })
                    .collect();
                Some((val, d1, d2))
            }
            _ => None,
        }
    }

    fn tangent_bound(&self, theta: &ThetaVector) -> Result<Option<TangentBound>> {
        match concave_part(&self.spec.kind) {
            ConcavePart::None => Ok(None),
            ConcavePart::Kernel => {
                let gram = self.gram(theta)?;
                Ok(Some(refit_lambda(&gram, self.bases, theta)?))
            }
            ConcavePart::Shifted => {
                let gram = self.gram(theta)?;
                let c = self.shifted(&gram)?;
                Ok(Some(refit_lambda(&c, self.bases, theta)?))
            }
        }
    }

    /// The true objective `psi_#` at fixed inner variables (Laplace losses
    /// Huber-smoothed, matching the derivatives the solver uses).
    fn psi_sharp(&self, theta: &ThetaVector, inner: &DVector<f64>) -> Result<f64> {
        let gram = self.gram(theta)?;
        let spec = self.spec;
        match spec.kind {
            ObjectiveKind::Mkl { .. } => {
                let quad = gram.inv_quad(inner);
                let loss = spec.likelihood.map_loss(&spec.y, inner)?;
                Ok(quad + loss + self.regulariser_derivs(theta).unwrap().0)
            }
            ObjectiveKind::Map => {
                let quad = gram.inv_quad(inner);
                let loss = spec.likelihood.map_loss(&spec.y, inner)?;
                Ok(quad + loss + gram.logdet())
            }
            ObjectiveKind::Gau => {
                let c = self.shifted(&gram)?;
                Ok(c.inv_quad(&spec.y) + c.logdet() + spec.n() as f64 * LN_2PI)
            }
            ObjectiveKind::MapGau => {
                let c = self.shifted(&gram)?;
                Ok(c.inv_quad(&spec.y) + gram.logdet())
            }
            ObjectiveKind::Rr { .. } => {
                let c = self.shifted(&gram)?;
                Ok(c.inv_quad(&spec.y) + self.regulariser_derivs(theta).unwrap().0)
            }
            ObjectiveKind::Vb => Ok(vb_parts(&gram, &spec.likelihood, &spec.y, inner)?.value),
        }
    }

    /// Value, true gradient of `psi_#`, gradient of `psi_lambda`, and the
    /// Hessian of `psi_lambda` (the concave part replaced by its tangent).
    fn system(
        &self,
        theta: &ThetaVector,
        inner: &DVector<f64>,
        bound: Option<&TangentBound>,
    ) -> Result<SystemOut> {
        let m = self.m();
        let n = self.spec.n();
        let spec = self.spec;
        let gram = self.gram(theta)?;
        let lambda = bound.map(|b| b.lambda.as_slice());
        match spec.kind {
            ObjectiveKind::Mkl { .. } | ObjectiveKind::Map => {
                let kinv = gram.inverse();
                let u = inner;
                let alpha = &kinv * u;
                let (lg, lc) = spec.likelihood.lik_derivatives(&spec.y, u)?;
                let quad = alpha.dot(u);
                let loss = spec.likelihood.map_loss(&spec.y, u)?;
                let v_ms: Vec<DVector<f64>> =
                    (0..m).map(|mm| self.bases.base(mm) * &alpha).collect();
                let w_ms: Vec<DVector<f64>> = v_ms.iter().map(|v| &kinv * v).collect();
                let mut grad_true = DVector::zeros(m + n);
                let mut grad_lambda = DVector::zeros(m + n);
                let mut hess = DMatrix::zeros(m + n, m + n);
                let quad_grad: Vec<f64> = v_ms.iter().map(|v| -alpha.dot(v)).collect();
                let value;
                match spec.kind {
                    ObjectiveKind::Mkl { .. } => {
                        let (reg, reg1, reg2) = self.regulariser_derivs(theta).unwrap();
                        value = quad + loss + reg;
                        for mm in 0..m {
                            grad_true[mm] = quad_grad[mm] + reg1[mm];
                            grad_lambda[mm] = grad_true[mm];
                            hess[(mm, mm)] += reg2[mm];
                        }
                    }
                    _ => {
                        value = quad + loss + gram.logdet();
                        let tp = trace_products(&gram, self.bases)?;
                        let lam = need_lambda(lambda)?;
                        for mm in 0..m {
                            grad_true[mm] = quad_grad[mm] + tp[mm];
                            grad_lambda[mm] = quad_grad[mm] + lam[mm];
                        }
                    }
                }
                for i in 0..n {
                    let g = 2.0 * alpha[i] + lg[i];
                    grad_true[m + i] = g;
                    grad_lambda[m + i] = g;
                }
                for mm in 0..m {
                    for ll in 0..m {
                        hess[(mm, ll)] += 2.0 * v_ms[mm].dot(&w_ms[ll]);
                    }
                    for i in 0..n {
                        hess[(mm, m + i)] = -2.0 * w_ms[mm][i];
                        hess[(m + i, mm)] = -2.0 * w_ms[mm][i];
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        hess[(m + i, m + j)] += 2.0 * kinv[(i, j)];
                    }
                    hess[(m + i, m + i)] += lc[i];
                }
                Ok(SystemOut { value, grad_true, grad_lambda, hess })
            }
            ObjectiveKind::Gau | ObjectiveKind::MapGau | ObjectiveKind::Rr { .. } => {
                let c = self.shifted(&gram)?;
                let a = c.solve(&spec.y);
                let v_ms: Vec<DVector<f64>> = (0..m).map(|mm| self.bases.base(mm) * &a).collect();
                let w_ms: Vec<DVector<f64>> = v_ms.iter().map(|v| c.solve(v)).collect();
                let quad = spec.y.dot(&a);
                let quad_grad: Vec<f64> = v_ms.iter().map(|v| -a.dot(v)).collect();
                let mut grad_true = DVector::zeros(m);
                let mut grad_lambda = DVector::zeros(m);
                let mut hess = DMatrix::zeros(m, m);
                for mm in 0..m {
                    for ll in 0..m {
                        hess[(mm, ll)] = 2.0 * v_ms[mm].dot(&w_ms[ll]);
                    }
                }
                let value = match spec.kind {
                    ObjectiveKind::Gau => {
                        let tp = trace_products(&c, self.bases)?;
                        let lam = need_lambda(lambda)?;
                        for mm in 0..m {
                            grad_true[mm] = quad_grad[mm] + tp[mm];
                            grad_lambda[mm] = quad_grad[mm] + lam[mm];
                        }
                        quad + c.logdet() + spec.n() as f64 * LN_2PI
                    }
                    ObjectiveKind::MapGau => {
                        let tp = trace_products(&gram, self.bases)?;
                        let lam = need_lambda(lambda)?;
                        for mm in 0..m {
                            grad_true[mm] = quad_grad[mm] + tp[mm];
                            grad_lambda[mm] = quad_grad[mm] + lam[mm];
                        }
                        quad + gram.logdet()
                    }
                    _ => {
                        let (reg, reg1, reg2) = self.regulariser_derivs(theta).unwrap();
                        for mm in 0..m {
                            grad_true[mm] = quad_grad[mm] + reg1[mm];
                            grad_lambda[mm] = grad_true[mm];
                            hess[(mm, mm)] += reg2[mm];
                        }
                        quad + reg
                    }
                };
                Ok(SystemOut { value, grad_true, grad_lambda, hess })
            }
            ObjectiveKind::Vb => {
                let parts = vb_parts(&gram, &spec.likelihood, &spec.y, inner)?;
                let p_full = parts.c.inverse();
                let kinv = gram.inverse();
                let x_ms: Vec<DMatrix<f64>> =
                    (0..m).map(|mm| &p_full * self.bases.base(mm)).collect();
                let y_ms: Vec<DMatrix<f64>> =
                    (0..m).map(|mm| &kinv * self.bases.base(mm)).collect();
                let v_ms: Vec<DVector<f64>> =
                    (0..m).map(|mm| self.bases.base(mm) * &parts.a).collect();
                let w_ms: Vec<DVector<f64>> = v_ms.iter().map(|v| &p_full * v).collect();
                let tp_c: Vec<f64> = x_ms.iter().map(|x| x.trace()).collect();
                let tp_k: Vec<f64> = y_ms.iter().map(|y| y.trace()).collect();
                let lam = need_lambda(lambda)?;
                let gamma = inner;
                let mut grad_true = DVector::zeros(m + n);
                let mut grad_lambda = DVector::zeros(m + n);
                let mut hess = DMatrix::zeros(m + n, m + n);
                for mm in 0..m {
                    let quad_grad = -parts.a.dot(&v_ms[mm]);
                    grad_true[mm] = tp_c[mm] + quad_grad;
                    grad_lambda[mm] = tp_c[mm] + quad_grad - tp_k[mm] + lam[mm];
                }
                let g_gamma = vb_gamma_gradient(&parts, &p_full.diagonal());
                for i in 0..n {
                    grad_true[m + i] = g_gamma[i];
                    grad_lambda[m + i] = g_gamma[i];
                }
                for mm in 0..m {
                    for ll in 0..m {
                        let mut tr_xx = 0.0;
                        let mut tr_yy = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                tr_xx += x_ms[mm][(i, j)] * x_ms[ll][(j, i)];
                                tr_yy += y_ms[mm][(i, j)] * y_ms[ll][(j, i)];
                            }
                        }
                        hess[(mm, ll)] = 2.0 * v_ms[mm].dot(&w_ms[ll]) - tr_xx + tr_yy;
                    }
                    for i in 0..n {
                        let mut xp_ii = 0.0;
                        for j in 0..n {
                            xp_ii += x_ms[mm][(i, j)] * p_full[(j, i)];
                        }
                        let v = -2.0 * parts.coef[i] * w_ms[mm][i] - xp_ii;
                        hess[(mm, m + i)] = v;
                        hess[(m + i, mm)] = v;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let pij = p_full[(i, j)];
                        hess[(m + i, m + j)] +=
                            2.0 * parts.coef[i] * parts.coef[j] * pij - pij * pij;
                    }
                    hess[(m + i, m + i)] += 1.0 / (gamma[i] * gamma[i]) + parts.ddh[i];
                }
                Ok(SystemOut { value: parts.value, grad_true, grad_lambda, hess })
            }
        }
    }

    /// Final value with exact (unsmoothed) losses.
    fn exact_value(&self, theta: &ThetaVector, inner: &DVector<f64>) -> Result<f64> {
        let spec = self.spec;
        match spec.kind {
            ObjectiveKind::Mkl { .. } | ObjectiveKind::Map => {
                let gram = self.gram(theta)?;
                let quad = gram.inv_quad(inner);
                let loss = spec.likelihood.neg_log2_lik(&spec.y, inner)?;
                let tail = match spec.kind {
                    ObjectiveKind::Mkl { .. } => self.regulariser_derivs(theta).unwrap().0,
                    _ => gram.logdet(),
                };
                Ok(quad + loss + tail)
            }
            _ => self.psi_sharp(theta, inner),
        }
    }
}

/// The assembled direction data at one point.
pub struct NewtonSystem {
    pub direction: DVector<f64>,
    pub grad_psi_lambda: DVector<f64>,
    pub hess_psi_lambda: DMatrix<f64>,
    pub grad_psi_sharp: DVector<f64>,
    pub value: f64,
}

/// Gradient and Hessian of `psi_lambda` at an arbitrary point with the bound
/// held fixed (for derivative checks; direction computations refit the bound
/// at their anchor so that the gradients of `psi_lambda` and `psi_#` agree).
pub fn newton_system_at(
    spec: &ObjectiveSpec,
    bases: &BaseKernelSet,
    theta: &ThetaVector,
    inner: &InnerState,
    bound: Option<&TangentBound>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let spec = effective_spec(spec);
    let problem = Problem { spec: &spec, bases };
    let inner_v = inner_vector(&spec, inner)?;
    let sys = problem.system(theta, &inner_v, bound)?;
    Ok((sys.grad_lambda, sys.hess))
}

fn inner_vector(spec: &ObjectiveSpec, inner: &InnerState) -> Result<DVector<f64>> {
    match (spec.kind, inner) {
        (ObjectiveKind::Mkl { .. } | ObjectiveKind::Map, InnerState::U(u)) => Ok(u.clone()),
        (ObjectiveKind::Vb, InnerState::Gamma(g)) => Ok(g.clone()),
        (ObjectiveKind::Gau | ObjectiveKind::MapGau | ObjectiveKind::Rr { .. }, _) => {
            Ok(DVector::zeros(0))
        }
        _ => Err(Error::InvalidParameter(
            "inner state kind does not match the objective kind".into(),
        )),
    }
}

/// Computes the joint Newton direction for the convexified criterion at the
/// current point, refitting the tangent bound there. The direction descends
/// `psi_#` because the bound is tangent at its anchor.
pub fn joint_newton_direction(
    spec: &ObjectiveSpec,
    bases: &BaseKernelSet,
    theta: &ThetaVector,
    inner: &InnerState,
) -> Result<NewtonSystem> {
    let spec = effective_spec(spec);
    let problem = Problem { spec: &spec, bases };
    let inner_v = inner_vector(&spec, inner)?;
    let bound = problem.tangent_bound(theta)?;
    let sys = problem.system(theta, &inner_v, bound.as_ref())?;
    let direction = solve_pd(&sys.hess, &(-&sys.grad_lambda))?;
    Ok(NewtonSystem {
        direction,
        grad_psi_lambda: sys.grad_lambda,
        hess_psi_lambda: sys.hess,
        grad_psi_sharp: sys.grad_true,
        value: sys.value,
    })
}

/// Largest step keeping the positive blocks strictly feasible
/// (fraction-to-boundary 0.99), capped at 1.
fn boundary_cap(
    theta: &[f64],
    inner: &DVector<f64>,
    inner_positive: bool,
    d: &DVector<f64>,
) -> f64 {
    let m = theta.len();
    let mut cap = 1.0_f64;
    for (i, &t) in theta.iter().enumerate() {
        if d[i] < 0.0 {
            cap = cap.min(0.99 * t / (-d[i]));
        }
    }
    if inner_positive {
        for (i, &g) in inner.iter().enumerate() {
            if d[m + i] < 0.0 {
                cap = cap.min(0.99 * g / (-d[m + i]));
            }
        }
    }
    cap
}

/// Backtracking Armijo line search on the true objective `psi_#` along `d`,
/// with the fraction-to-boundary cap on positive blocks.
pub fn linesearch(
    spec: &ObjectiveSpec,
    bases: &BaseKernelSet,
    theta: &ThetaVector,
    inner: &InnerState,
    direction: &DVector<f64>,
) -> Result<(f64, ThetaVector, InnerState)> {
    let eff = effective_spec(spec);
    let problem = Problem { spec: &eff, bases };
    let inner_v = inner_vector(&eff, inner)?;
    let bound = problem.tangent_bound(theta)?;
    let sys = problem.system(theta, &inner_v, bound.as_ref())?;
    let slope = sys.grad_true.dot(direction);
    if slope >= 0.0 {
        return Err(Error::InvalidParameter(
            "linesearch needs a descent direction for psi_#".into(),
        ));
    }
    let cap = boundary_cap(theta.as_slice(), &inner_v, inner_is_positive(&eff), direction);
    let mut alpha = cap.min(1.0);
    for _ in 0..60 {
        if let Ok((t_new, i_new)) = stepped(theta, &inner_v, direction, alpha) {
            if let Ok(val) = problem.psi_sharp(&t_new, &i_new) {
                if val <= sys.value + 1e-4 * alpha * slope {
                    let inner_state = rewrap_inner(spec, i_new, &t_new, bases)?;
                    return Ok((alpha, t_new, inner_state));
                }
            }
        }
        alpha *= 0.5;
    }
    Err(Error::NotConverged { what: "line search on psi_#", iterations: 60, residual: slope })
}

fn stepped(
    theta: &ThetaVector,
    inner: &DVector<f64>,
    d: &DVector<f64>,
    alpha: f64,
) -> Result<(ThetaVector, DVector<f64>)> {
    let m = theta.len();
    let mut t = theta.as_slice().to_vec();
    for (i, ti) in t.iter_mut().enumerate() {
        *ti += alpha * d[i];
        if *ti <= 0.0 {
            return Err(Error::InvalidParameter("step leaves the positive orthant".into()));
        }
    }
    let new_inner = DVector::from_fn(inner.len(), |i, _| inner[i] + alpha * d[m + i]);
    Ok((ThetaVector::new(t)?, new_inner))
}

fn rewrap_inner(
    spec: &ObjectiveSpec,
    inner: DVector<f64>,
    theta: &ThetaVector,
    bases: &BaseKernelSet,
) -> Result<InnerState> {
    match spec.kind {
        ObjectiveKind::Mkl { .. } | ObjectiveKind::Map => Ok(InnerState::U(inner)),
        ObjectiveKind::Vb => {
            if let LikelihoodModel::Gaussian { sigma2 } = spec.likelihood {
                // fixed-width sites; the solve ran in the collapsed GAU form
                let _ = (theta, bases);
                Ok(InnerState::Gamma(DVector::from_element(spec.n(), sigma2)))
            } else {
                Ok(InnerState::Gamma(inner))
            }
        }
        _ => Ok(InnerState::None),
    }
}

/// `t * psi_#(theta, inner) - sum ln theta_m` (log-barrier composite).
pub fn barrier_objective(
    spec: &ObjectiveSpec,
    bases: &BaseKernelSet,
    theta: &ThetaVector,
    inner: &InnerState,
    t: f64,
) -> Result<f64> {
    if theta.as_slice().iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter(
            "barrier objective needs strictly positive theta".into(),
        ));
    }
    let eff = effective_spec(spec);
    let problem = Problem { spec: &eff, bases };
    let inner_v = inner_vector(&eff, inner)?;
    let psi = problem.psi_sharp(theta, &inner_v)?;
    Ok(t * psi - theta.as_slice().iter().map(|v| v.ln()).sum::<f64>())
}

/// Projected gradient for the nonnegativity constraint. A weight counts as
/// bound-active (contributing zero) when its gradient points into the bound
/// and either it is negligible against the largest weight or its
/// complementarity product `theta_m * grad_m` is below tolerance, which caps
/// the attainable objective improvement from moving it to zero.
fn projected_grad_norm(theta: &[f64], grad: &DVector<f64>, tol: f64) -> f64 {
    let m = theta.len();
    let max_theta = theta.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut worst = 0.0_f64;
    for (i, g) in grad.iter().enumerate() {
        let active = i < m
            && *g > 0.0
            && (theta[i] <= SPARSITY_RTOL * max_theta || theta[i] * *g <= tol);
        if !active {
            worst = worst.max(g.abs());
        }
    }
    worst
}

/// Runs the double-loop fit from `theta = 1`.
pub fn fit(spec: &ObjectiveSpec, bases: &BaseKernelSet, config: &SolverConfig) -> Result<FitResult> {
    let theta0 = ThetaVector::uniform(bases.num_kernels(), 1.0)?;
    fit_from(spec, bases, config, theta0)
}

/// Runs the double-loop fit from an explicit starting point.
pub fn fit_from(
    orig_spec: &ObjectiveSpec,
    bases: &BaseKernelSet,
    config: &SolverConfig,
    theta0: ThetaVector,
) -> Result<FitResult> {
    config.validate()?;
    if theta0.len() != bases.num_kernels() {
        return Err(Error::DimensionMismatch {
            context: "fit theta0",
            expected: bases.num_kernels(),
            got: theta0.len(),
        });
    }
    if theta0.as_slice().iter().any(|&t| t <= 0.0) {
        return Err(Error::InvalidParameter(
            "the barrier method needs a strictly positive start".into(),
        ));
    }
    let mut spec_local = effective_spec(orig_spec);
    spec_local.jitter = config.jitter;
    let spec = &spec_local;
    let problem = Problem { spec, bases };
    let n = spec.n();
    let m = bases.num_kernels();
    let dim_inner = inner_dim(spec);

    let mut theta = theta0;
    let mut inner: DVector<f64> = match spec.kind {
        ObjectiveKind::Mkl { .. } | ObjectiveKind::Map => DVector::zeros(n),
        ObjectiveKind::Vb => spec.likelihood.default_gamma(&spec.y),
        _ => DVector::zeros(0),
    };

    let mut t = config.barrier_t0;
    let mut trace = ConvergenceTrace::default();
    let mut status = FitStatus::MaxIterations;
    let mut pg_norm = f64::INFINITY;
    let mut iterations = 0;

    for outer in 0..config.max_outer {
        iterations = outer + 1;
        if outer > 0 && outer % config.barrier_every == 0 {
            t = (t * config.barrier_mult).min(config.barrier_t_max);
        }

        // a few Newton steps on the inner block at fixed theta
        if dim_inner > 0 && config.inner_newton_steps > 0 {
            let gram = problem.gram(&theta)?;
            inner = match spec.kind {
                ObjectiveKind::Vb => {
                    gamma_newton_iterations(
                        &gram,
                        &spec.likelihood,
                        &spec.y,
                        &inner,
                        config.inner_newton_steps,
                        crate::objective::GAMMA_TOL_PER_SITE * n as f64,
                        false,
                    )?
                    .0
                }
                _ => {
                    u_newton_iterations(
                        &gram,
                        &spec.likelihood,
                        &spec.y,
                        &inner,
                        config.inner_newton_steps,
                        crate::objective::INNER_TOL_PER_SITE * n as f64,
                        false,
                    )?
                    .0
                }
            };
        }

        // refit the tangent bound, assemble the barrier Newton system, search
        let mut attempt = 0;
        let accepted = loop {
            attempt += 1;
            let bound = problem.tangent_bound(&theta)?;
            if let Some(b) = &bound {
                // tangential-equality certificate at the anchor
                let gram = problem.gram(&theta)?;
                let anchor_gap = match concave_part(&spec.kind) {
                    ConcavePart::Shifted => b.value_at(&theta) - problem.shifted(&gram)?.logdet(),
                    _ => b.value_at(&theta) - gram.logdet(),
                };
                debug_assert!(anchor_gap.abs() <= 1e-10, "tangency violated: {anchor_gap}");
            }
            let sys = problem.system(&theta, &inner, bound.as_ref())?;

            let dim = m + dim_inner;
            let mut grad_b = DVector::zeros(dim);
            let mut hess_b = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                grad_b[i] = t * sys.grad_lambda[i];
                for j in 0..dim {
                    hess_b[(i, j)] = t * sys.hess[(i, j)];
                }
            }
            for i in 0..m {
                grad_b[i] -= 1.0 / theta.as_slice()[i];
                hess_b[(i, i)] += 1.0 / (theta.as_slice()[i] * theta.as_slice()[i]);
            }
            let dir = solve_pd(&hess_b, &(-&grad_b))?;
            let slope_b = grad_b.dot(&dir);

            // Armijo on t * psi_# - sum ln theta; psi_# must not rise
            let psi0 = sys.value;
            let b0 = t * psi0 - theta.as_slice().iter().map(|v| v.ln()).sum::<f64>();
            let cap = boundary_cap(theta.as_slice(), &inner, inner_is_positive(spec), &dir);
            let mut alpha = cap.min(1.0);
            // Armijo on the barrier composite; psi_# itself may rise only by
            // the barrier-trade budget ~ M/t (a weight rebounding to its
            // central value after an overshoot), which keeps the trace
            // monotone per phase at the resolution the barrier permits.
            let psi_slack = 1e-12 + 8.0 * m as f64 / t;
            let mut found = None;
            for _ in 0..config.max_linesearch {
                if let Ok((t_new, i_new)) = stepped(&theta, &inner, &dir, alpha) {
                    if let Ok(psi_new) = problem.psi_sharp(&t_new, &i_new) {
                        let b_new =
                            t * psi_new - t_new.as_slice().iter().map(|v| v.ln()).sum::<f64>();
                        if b_new <= b0 + config.armijo_c * alpha * slope_b
                            && psi_new <= psi0 + psi_slack
                        {
                            found = Some((alpha, t_new, i_new, psi_new));
                            break;
                        }
                    }
                }
                alpha *= config.backtrack;
            }
            match found {
                Some(hit) => break Some(hit),
                // stale-bound retry: refit once more and recompute
                None if attempt == 1 => continue,
                None => break None,
            }
        };

        let Some((alpha, theta_new, inner_new, psi_new)) = accepted else {
            status = FitStatus::LineSearchFailed;
            break;
        };
        theta = theta_new;
        inner = inner_new;

        // convergence measured on the true objective at the new point
        let bound = problem.tangent_bound(&theta)?;
        let sys = problem.system(&theta, &inner, bound.as_ref())?;
        pg_norm = projected_grad_norm(theta.as_slice(), &sys.grad_true, config.outer_tol);
        trace.rows.push(TraceRow {
            iter: outer,
            phase_t: t,
            objective: psi_new,
            grad_norm: pg_norm,
            alpha,
            theta: theta.as_slice().to_vec(),
        });
        if pg_norm <= config.outer_tol {
            status = FitStatus::Converged;
            break;
        }
    }

    let value = problem.exact_value(&theta, &inner)?;
    let u_hat = posterior_mean(spec, bases, &theta, &inner)?;
    Ok(FitResult {
        inner: rewrap_inner(orig_spec, inner, &theta, bases)?,
        theta_hat: theta,
        u_hat,
        value,
        status,
        trace,
        projected_grad_norm: pg_norm,
        iterations,
    })
}

/// Posterior mean latent vector at the fitted weights, for prediction.
fn posterior_mean(
    spec: &ObjectiveSpec,
    bases: &BaseKernelSet,
    theta: &ThetaVector,
    inner: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gram = assemble_gram(theta, bases, spec.jitter)?;
    match spec.kind {
        ObjectiveKind::Mkl { .. } | ObjectiveKind::Map => Ok(inner.clone()),
        ObjectiveKind::Vb => Ok(vb_parts(&gram, &spec.likelihood, &spec.y, inner)?.u_star),
        _ => {
            let n = gram.dim();
            let c = gram.matrix() + DMatrix::identity(n, n) * spec.sigma2();
            let a = GramFactor::from_matrix(c, gram.jitter())?.solve(&spec.y);
            Ok(gram.matrix() * a)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn v(parts: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(parts)
    }

    fn random_set(m: usize, n: usize, seed: u64) -> BaseKernelSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases: Vec<_> = (0..m)
            .map(|_| {
                let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                &g * g.transpose() / n as f64
            })
            .collect();
        let names = (0..m).map(|i| format!("k{i}")).collect();
        BaseKernelSet::from_matrices(bases, names).unwrap()
    }

    fn identity_set(n: usize) -> BaseKernelSet {
        BaseKernelSet::from_matrices(vec![DMatrix::identity(n, n)], vec!["id".into()]).unwrap()
    }

    #[test]
    fn refit_lambda_scalar_algebra() {
        let set = identity_set(3);
        let theta = ThetaVector::new(vec![2.0]).unwrap();
        let gram = assemble_gram(&theta, &set, 1e-12).unwrap();
        let bound = refit_lambda(&gram, &set, &theta).unwrap();
        assert_relative_eq!(bound.lambda[0], 1.5, epsilon = 1e-9);
        assert_relative_eq!(bound.dual_value, 3.0 - 3.0 * 2.0_f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn tangent_bound_tangency_and_domination() {
        let set = random_set(3, 5, 600);
        let theta0 = ThetaVector::new(vec![0.7, 1.3, 0.4]).unwrap();
        let gram = assemble_gram(&theta0, &set, 1e-8).unwrap();
        let bound = refit_lambda(&gram, &set, &theta0).unwrap();
        assert!((bound.value_at(&theta0) - gram.logdet()).abs() <= 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(601);
        for _ in 0..100 {
            let theta = ThetaVector::new(
                (0..3).map(|_| 10f64.powf(rng.random::<f64>() * 2.6 - 1.3)).collect(),
            )
            .unwrap();
            let ld = assemble_gram(&theta, &set, 1e-8).unwrap().logdet();
            assert!(
                bound.value_at(&theta) + 1e-12 >= ld,
                "domination violated at {:?}",
                theta.as_slice()
            );
        }
    }

    #[test]
    fn newton_direction_descends_psi_sharp() {
        let mut rng = ChaCha8Rng::seed_from_u64(602);
        for trial in 0..100 {
            let n = 2 + trial % 3;
            let mkind = trial % 4;
            let set = random_set(2, n, 700 + trial as u64);
            let theta =
                ThetaVector::new((0..2).map(|_| rng.random::<f64>() * 2.0 + 0.05).collect())
                    .unwrap();
            let (kind, model, y): (ObjectiveKind, LikelihoodModel, DVector<f64>) = match mkind {
                0 => (
                    ObjectiveKind::Map,
                    LikelihoodModel::gaussian(0.4).unwrap(),
                    DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                ),
                1 => (
                    ObjectiveKind::Mkl { p: 2.0, lambda: 0.3 },
                    LikelihoodModel::logistic(1.0).unwrap(),
                    DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }),
                ),
                2 => (
                    ObjectiveKind::Gau,
                    LikelihoodModel::gaussian(0.6).unwrap(),
                    DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                ),
                _ => (
                    ObjectiveKind::Vb,
                    LikelihoodModel::logistic(1.2).unwrap(),
                    DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }),
                ),
            };
            let spec = ObjectiveSpec::new(kind, model, y).unwrap();
            let inner = match kind {
                ObjectiveKind::Map | ObjectiveKind::Mkl { .. } => {
                    InnerState::U(DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5))
                }
                ObjectiveKind::Vb => {
                    InnerState::Gamma(DVector::from_fn(n, |_, _| 4.0 + rng.random::<f64>() * 3.0))
                }
                _ => InnerState::None,
            };
            let sys = joint_newton_direction(&spec, &set, &theta, &inner).unwrap();
            let slope = sys.grad_psi_sharp.dot(&sys.direction);
            assert!(slope < 0.0, "trial {trial}: slope {slope}");
        }
    }

    #[test]
    fn linesearch_satisfies_armijo_and_cap() {
        let set = random_set(2, 3, 603);
        let model = LikelihoodModel::gaussian(0.5).unwrap();
        let y = v(&[0.4, -0.2, 0.9]);
        let spec = ObjectiveSpec::new(ObjectiveKind::Map, model, y.clone()).unwrap();
        let theta = ThetaVector::new(vec![1.0, 0.8]).unwrap();
        let gram = assemble_gram(&theta, &set, spec.jitter).unwrap();
        let (u, _) =
            crate::objective::inner_map_solve(&gram, &model, &y, &DVector::zeros(3)).unwrap();
        let inner = InnerState::U(u);
        let sys = joint_newton_direction(&spec, &set, &theta, &inner).unwrap();
        let before = sys.value;
        let slope = sys.grad_psi_sharp.dot(&sys.direction);
        let (alpha, theta_new, inner_new) =
            linesearch(&spec, &set, &theta, &inner, &sys.direction).unwrap();
        let problem = Problem { spec: &spec, bases: &set };
        let after =
            problem.psi_sharp(&theta_new, &inner_vector(&spec, &inner_new).unwrap()).unwrap();
        assert!(after <= before + 1e-4 * alpha * slope + 1e-12);
        // boundary cap: a direction pushing straight at the boundary is capped
        let mut d = DVector::zeros(2 + 3);
        d[0] = -10.0 * theta_new.as_slice()[0];
        let cap = boundary_cap(theta_new.as_slice(), &DVector::zeros(3), false, &d);
        let remaining = theta_new.as_slice()[0] + cap * d[0];
        assert!(remaining >= 0.0099 * theta_new.as_slice()[0]);
    }

    #[test]
    fn linesearch_accepts_full_step_near_optimum() {
        let set = identity_set(2);
        let model = LikelihoodModel::gaussian(0.5).unwrap();
        let y = v(&[1.0, -1.0]);
        let spec = ObjectiveSpec::new(ObjectiveKind::Rr { p: 2.0, lambda: 0.5 }, model, y).unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        let theta = fitted.theta_hat.clone();
        let theta_off =
            ThetaVector::new(theta.as_slice().iter().map(|t| t * 1.001).collect()).unwrap();
        let sys = joint_newton_direction(&spec, &set, &theta_off, &InnerState::None).unwrap();
        let (alpha, _, _) =
            linesearch(&spec, &set, &theta_off, &InnerState::None, &sys.direction).unwrap();
        assert_relative_eq!(alpha, 1.0);
    }

    #[test]
    fn linesearch_rejects_ascent_directions() {
        let set = identity_set(2);
        let model = LikelihoodModel::gaussian(0.5).unwrap();
        let spec =
            ObjectiveSpec::new(ObjectiveKind::Gau, model, v(&[1.0, -1.0])).unwrap();
        let theta = ThetaVector::new(vec![0.5]).unwrap();
        let sys = joint_newton_direction(&spec, &set, &theta, &InnerState::None).unwrap();
        let ascent = -&sys.direction;
        assert!(linesearch(&spec, &set, &theta, &InnerState::None, &ascent).is_err());
    }

    #[test]
    fn barrier_objective_diverges_at_boundary() {
        let set = identity_set(2);
        let model = LikelihoodModel::gaussian(1.0).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::Gau, model, v(&[0.5, -0.5])).unwrap();
        let f = |th: f64| {
            barrier_objective(
                &spec,
                &set,
                &ThetaVector::new(vec![th]).unwrap(),
                &InnerState::None,
                1.0,
            )
            .unwrap()
        };
        assert!(f(1e-12) > f(1e-6));
        assert!(f(1e-6) > f(1e-2));
        // composite structure: t * psi - sum ln theta
        let theta = ThetaVector::new(vec![0.7]).unwrap();
        let problem = Problem { spec: &spec, bases: &set };
        let psi = problem.psi_sharp(&theta, &DVector::zeros(0)).unwrap();
        let b = barrier_objective(&spec, &set, &theta, &InnerState::None, 3.0).unwrap();
        assert_relative_eq!(b, 3.0 * psi - 0.7_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn fit_gau_scalar_recovers_shifted_outer_product() {
        // d/dtheta [y^2/(theta+s2) + ln(theta+s2)] = 0 at theta = y^2 - s2
        let set = identity_set(1);
        let s2 = 0.01;
        let model = LikelihoodModel::gaussian(s2).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::Gau, model, v(&[2.0])).unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        assert_eq!(fitted.status, FitStatus::Converged);
        assert!(
            (fitted.theta_hat.as_slice()[0] - 3.99).abs() <= 1e-3,
            "theta {}",
            fitted.theta_hat.as_slice()[0]
        );
    }

    #[test]
    fn fit_mapgau_scalar_stationary_point() {
        // exact stationary point of y^2/(theta+s2) + ln theta at y=2, s2=0.01:
        // the larger root of theta^2 - 3.98 theta + 0.0001
        let set = identity_set(1);
        let s2 = 0.01;
        let model = LikelihoodModel::gaussian(s2).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::MapGau, model, v(&[2.0])).unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        assert_eq!(fitted.status, FitStatus::Converged);
        let expect = (3.98 + (3.98_f64 * 3.98 - 4.0 * 0.0001).sqrt()) / 2.0;
        assert!(
            (fitted.theta_hat.as_slice()[0] - expect).abs() <= 1e-3,
            "theta {} vs {expect}",
            fitted.theta_hat.as_slice()[0]
        );
        let (grid_theta, _) = crate::oracle::grid_min(
            |th| {
                let theta = ThetaVector::new(vec![th]).unwrap();
                crate::objective::eval_phi_map_gau(&theta, &set, s2, &v(&[2.0])).unwrap()
            },
            1e-3,
            100.0,
            400,
        )
        .unwrap();
        assert!((grid_theta - expect).abs() <= 1e-2);
    }

    #[test]
    fn fit_rr_scalar_recovers_inverse_sqrt_lambda() {
        // minimiser of y^2/(theta+s2) + lambda*theta is theta = y/sqrt(lambda) - s2
        let set = identity_set(1);
        let s2 = 1e-6;
        let model = LikelihoodModel::gaussian(s2).unwrap();
        let lambda = 1.7;
        let spec =
            ObjectiveSpec::new(ObjectiveKind::Rr { p: 1.0, lambda }, model, v(&[2.0])).unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        assert_eq!(fitted.status, FitStatus::Converged);
        let expect = 2.0 / lambda.sqrt();
        assert!(
            (fitted.theta_hat.as_slice()[0] - expect).abs() <= 1e-3,
            "theta {} vs {expect}",
            fitted.theta_hat.as_slice()[0]
        );
    }

    #[test]
    fn barrier_continuation_sharpens_theta() {
        // the barrier bias in theta shrinks like 1/t
        let set = identity_set(1);
        let model = LikelihoodModel::gaussian(0.25).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::Gau, model, v(&[2.0])).unwrap();
        let run = |t_max: f64| {
            let config = SolverConfig {
                barrier_t0: t_max,
                barrier_t_max: t_max,
                outer_tol: 1e-12,
                max_outer: 400,
                ..SolverConfig::default()
            };
            let fitted = fit(&spec, &set, &config).unwrap();
            fitted.theta_hat.as_slice()[0]
        };
        let coarse = run(1e5);
        let fine = run(1e8);
        assert!((coarse - fine).abs() <= 1e-4, "{coarse} vs {fine}");
    }

    #[test]
    fn fit_is_invariant_under_kernel_permutation() {
        let set = random_set(3, 6, 604);
        let mut rng = ChaCha8Rng::seed_from_u64(605);
        let y = DVector::from_fn(6, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let model = LikelihoodModel::gaussian(0.3).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::Gau, model, y.clone()).unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        let perm = [2usize, 0, 1];
        let permuted = BaseKernelSet::from_matrices(
            perm.iter().map(|&i| set.base(i).clone()).collect(),
            perm.iter().map(|&i| set.names()[i].clone()).collect(),
        )
        .unwrap();
        let fitted_p = fit(&spec, &permuted, &SolverConfig::default()).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert!(
                (fitted_p.theta_hat.as_slice()[slot] - fitted.theta_hat.as_slice()[src]).abs()
                    <= 1e-8
            );
        }
    }

    /// Draws `y ~ N(0, K_{theta*} + s2 I)` so the data carry enough signal
    /// for an interior optimum to exist.
    fn gp_draw(set: &BaseKernelSet, theta_star: &[f64], s2: f64, seed: u64) -> DVector<f64> {
        let theta = ThetaVector::new(theta_star.to_vec()).unwrap();
        let gram = assemble_gram(&theta, set, 1e-10).unwrap();
        let n = gram.dim();
        let cov = gram.matrix() + DMatrix::identity(n, n) * s2;
        let chol = crate::kernel::cholesky_lower(&cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(n, |_, _| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        chol * z
    }

    #[test]
    fn trace_monotone_within_phases() {
        let set = random_set(3, 8, 606);
        let s2 = 0.01;
        let y = gp_draw(&set, &[1.0, 0.5, 1.5], s2, 607);
        let model = LikelihoodModel::gaussian(s2).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::Map, model, y).unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        assert_eq!(fitted.status, FitStatus::Converged);
        for w in fitted.trace.rows.windows(2) {
            if w[0].phase_t == w[1].phase_t {
                let slack = 1e-12 + 8.0 * 3.0 / w[1].phase_t;
                assert!(
                    w[1].objective <= w[0].objective + slack,
                    "objective rose within a phase: {} -> {}",
                    w[0].objective,
                    w[1].objective
                );
            }
        }
        let csv = fitted.trace.to_csv();
        assert!(csv.starts_with("iter,phase_t,objective,grad_norm,alpha,theta_0,theta_1,theta_2"));
    }

    #[test]
    fn fit_mkl_reaches_kkt_with_sparsity() {
        let set = random_set(4, 10, 608);
        let mut rng = ChaCha8Rng::seed_from_u64(609);
        let y = DVector::from_fn(10, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let model = LikelihoodModel::gaussian(0.5).unwrap();
        let spec =
            ObjectiveSpec::new(ObjectiveKind::Mkl { p: 1.0, lambda: 2.0 }, model, y.clone())
                .unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        assert_eq!(fitted.status, FitStatus::Converged);
        // re-solve the inner problem to full tolerance at theta_hat before
        // taking envelope gradients
        let gram = assemble_gram(&fitted.theta_hat, &set, spec.jitter).unwrap();
        let (u_hat, _) =
            crate::objective::inner_map_solve(&gram, &model, &y, fitted.inner.u().unwrap())
                .unwrap();
        let g = crate::objective::theta_gradient(
            &spec,
            &fitted.theta_hat,
            &set,
            &InnerState::U(u_hat),
        )
        .unwrap();
        // first-order KKT: dual feasibility and complementary slackness on
        // every coordinate, stationarity on clearly interior ones
        let max_theta = fitted.theta_hat.as_slice().iter().cloned().fold(0.0_f64, f64::max);
        for (i, (&t, &gm)) in fitted.theta_hat.as_slice().iter().zip(g.iter()).enumerate() {
            assert!(gm >= -1e-4, "dual infeasibility at {i}: {gm}");
            assert!(t * gm.abs() <= 1e-4, "complementarity violated at {i}: {}", t * gm);
            if t >= 0.01 * max_theta {
                assert!(gm.abs() <= 1e-4, "interior coordinate {i} not stationary: {gm}");
            }
        }
        // the p = 1 penalty drives at least one kernel weight to the bound
        // (three decades below the leading weight at this tolerance)
        assert!(fitted
            .theta_hat
            .as_slice()
            .iter()
            .any(|&t| t <= 1e-3 * max_theta));
    }

    #[test]
    fn map_with_weak_signal_collapses_to_origin() {
        // With noise comparable to the signal, the jittered joint-MAP
        // objective is genuinely minimised by theta -> 0 (the log-determinant
        // reward at the jitter floor beats the data-fit penalty); the solver
        // must land on that corner and report it as a converged, fully pruned
        // solution.
        let set = random_set(3, 8, 612);
        let mut rng = ChaCha8Rng::seed_from_u64(613);
        let y = DVector::from_fn(8, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let model = LikelihoodModel::gaussian(0.4).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::Map, model, y.clone()).unwrap();
        let fitted = fit(&spec, &set, &SolverConfig::default()).unwrap();
        assert_eq!(fitted.status, FitStatus::Converged);
        assert!(fitted.theta_hat.as_slice().iter().all(|&t| t < 1e-10));
        // value sits at the collapse level: loss(y, 0) + n ln(jitter)
        let collapse = model.neg_log2_lik(&y, &DVector::zeros(8)).unwrap()
            + 8.0 * (1e-8_f64).ln();
        assert!((fitted.value - collapse).abs() <= 0.2, "{} vs {collapse}", fitted.value);
    }

    #[test]
    fn vb_fit_matches_gau_fit_for_gaussian_likelihood() {
        let set = random_set(2, 5, 610);
        let mut rng = ChaCha8Rng::seed_from_u64(611);
        let y = DVector::from_fn(5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let model = LikelihoodModel::gaussian(0.5).unwrap();
        let spec_vb = ObjectiveSpec::new(ObjectiveKind::Vb, model, y.clone()).unwrap();
        let spec_gau = ObjectiveSpec::new(ObjectiveKind::Gau, model, y).unwrap();
        let f_vb = fit(&spec_vb, &set, &SolverConfig::default()).unwrap();
        let f_gau = fit(&spec_gau, &set, &SolverConfig::default()).unwrap();
        assert_eq!(f_vb.status, FitStatus::Converged);
        assert_eq!(f_gau.status, FitStatus::Converged);
        let diff: f64 = f_vb
            .theta_hat
            .as_slice()
            .iter()
            .zip(f_gau.theta_hat.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-5, "theta gap {diff}");
        assert!(matches!(f_vb.inner, InnerState::Gamma(_)));
    }
}
