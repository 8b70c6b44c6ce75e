//! Base kernels, the mixed Gram matrix `K_theta = sum_m theta_m K_m + eps*I`,
//! and the Cholesky-backed primitives (log-determinant, linear solves, trace
//! products) that every objective and solver step consumes.
//!
//! Base kernel matrices are validated once at ingestion (symmetry, approximate
//! positive semidefiniteness) and are immutable afterwards, so a
//! [`BaseKernelSet`] can be shared freely across concurrent fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default diagonal jitter added to every mixed Gram matrix.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Relative symmetry tolerance for ingested base kernels.
const SYMMETRY_RTOL: f64 = 1e-12;
/// A base kernel passes the PSD check when its smallest eigenvalue is at
/// least `-PSD_RTOL * largest`.
const PSD_RTOL: f64 = 1e-8;
/// Above this dimension the eigenvalue check is replaced by a cheaper
/// Cholesky-with-jitter probe.
const EIG_CHECK_MAX_DIM: usize = 2000;

/// A kernel function evaluated on training inputs to produce one base matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelFunctionSpec {
    /// `k(x, x') = x^T x'`
    Linear,
    /// `k(x, x') = s^2 * exp(-||x - x'||^2 / (2 l^2))`
    SquaredExponential { lengthscale: f64, signal_variance: f64 },
}

impl KernelFunctionSpec {
    pub fn squared_exponential(lengthscale: f64, signal_variance: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "squared-exponential lengthscale must be positive, got {lengthscale}"
            )));
        }
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "squared-exponential signal variance must be positive, got {signal_variance}"
            )));
        }
        Ok(Self::SquaredExponential { lengthscale, signal_variance })
    }

    /// Evaluates the kernel on a pair of points given as slices of length d.
    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        match self {
            Self::Linear => x.iter().zip(z).map(|(a, b)| a * b).sum(),
            Self::SquaredExponential { lengthscale, signal_variance } => {
                let sq: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                signal_variance * (-sq / (2.0 * lengthscale * lengthscale)).exp()
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Linear => "linear".to_string(),
            Self::SquaredExponential { lengthscale, signal_variance } => {
                format!("sqexp(l={lengthscale},s2={signal_variance})")
            }
        }
    }
}

/// The M fixed positive semidefinite base kernels plus (when function-built)
/// the training inputs and kernel functions needed for cross-kernel columns.
#[derive(Debug, Clone)]
pub struct BaseKernelSet {
    bases: Vec<DMatrix<f64>>,
    names: Vec<String>,
    inputs: Option<DMatrix<f64>>,
    specs: Option<Vec<KernelFunctionSpec>>,
}

impl BaseKernelSet {
    /// Ingests precomputed base matrices, validating symmetry and approximate
    /// positive semidefiniteness of each.
    pub fn from_matrices(bases: Vec<DMatrix<f64>>, names: Vec<String>) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::InvalidParameter("base kernel set must not be empty".into()));
        }
        if names.len() != bases.len() {
            return Err(Error::DimensionMismatch {
                context: "base kernel names",
                expected: bases.len(),
                got: names.len(),
            });
        }
        let n = bases[0].nrows();
        if n == 0 {
            return Err(Error::InvalidParameter("base kernels must have n >= 1".into()));
        }
        for (m, k) in bases.iter().enumerate() {
            validate_base(m, k, n)?;
        }
        Ok(Self { bases, names, inputs: None, specs: None })
    }

    /// Rescales every base so that `tr(K_m) = n`, i.e. unit average diagonal.
    /// Optional at ingestion; weights learned on normalised bases live on a
    /// comparable scale.
    pub fn with_unit_trace(mut self) -> Result<Self> {
        let n = self.dim() as f64;
        for (m, k) in self.bases.iter_mut().enumerate() {
            let tr = k.trace();
            if !(tr > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "cannot trace-normalise base kernel {m}: trace {tr} is not positive"
                )));
            }
            *k *= n / tr;
        }
        Ok(self)
    }

    pub fn num_kernels(&self) -> usize {
        self.bases.len()
    }

    pub fn dim(&self) -> usize {
        self.bases[0].nrows()
    }

    pub fn base(&self, m: usize) -> &DMatrix<f64> {
        &self.bases[m]
    }

    pub fn bases(&self) -> &[DMatrix<f64>] {
        &self.bases
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn inputs(&self) -> Option<&DMatrix<f64>> {
        self.inputs.as_ref()
    }

    /// True when the set was built from kernel functions, so cross-kernel
    /// columns for unseen points can be evaluated.
    pub fn supports_prediction(&self) -> bool {
        self.specs.is_some() && self.inputs.is_some()
    }

    /// Mixed cross-kernel column `[k_theta(x_i, x_star)]_i` for one test point.
    pub fn cross_column(&self, theta: &ThetaVector, x_star: &[f64]) -> Result<DVector<f64>> {
        let (specs, inputs) = match (&self.specs, &self.inputs) {
            (Some(s), Some(x)) => (s, x),
            _ => {
                return Err(Error::InvalidParameter(
                    "cross-kernel columns need function-built kernels; \
                     precomputed base matrices carry no kernel function"
                        .into(),
                ))
            }
        };
        if theta.len() != specs.len() {
            return Err(Error::DimensionMismatch {
                context: "cross_column theta",
                expected: specs.len(),
                got: theta.len(),
            });
        }
        if x_star.len() != inputs.ncols() {
            return Err(Error::DimensionMismatch {
                context: "cross_column test point",
                expected: inputs.ncols(),
                got: x_star.len(),
            });
        }
        let n = self.dim();
        let mut col = DVector::zeros(n);
        for i in 0..n {
            let xi: Vec<f64> = inputs.row(i).iter().copied().collect();
            let mut acc = 0.0;
            for (spec, &t) in specs.iter().zip(theta.as_slice()) {
                acc += t * spec.eval(&xi, x_star);
            }
            col[i] = acc;
        }
        Ok(col)
    }
}

fn validate_base(index: usize, k: &DMatrix<f64>, n: usize) -> Result<()> {
    if k.nrows() != n || k.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "base kernel dimension",
            expected: n,
            got: k.nrows().max(k.ncols()),
        });
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("base kernel entries"));
    }
    let scale = k.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut max_asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_RTOL * scale {
        return Err(Error::NotSymmetric { index, max_asym: max_asym / scale });
    }
    if n <= EIG_CHECK_MAX_DIM {
        let eig = k.clone().symmetric_eigenvalues();
        let min_eig = eig.min();
        let max_eig = eig.max().max(0.0);
        if min_eig < -PSD_RTOL * max_eig.max(1e-300) {
            return Err(Error::NotPsd { index, min_eig, max_eig });
        }
    } else {
        // Large matrices: a Cholesky probe at a jitter proportional to the
        // diagonal scale stands in for the eigenvalue check.
        let probe = k + DMatrix::identity(n, n) * (PSD_RTOL * scale);
        if cholesky_lower(&probe).is_err() {
            return Err(Error::NotPsd { index, min_eig: f64::NAN, max_eig: scale });
        }
    }
    Ok(())
}

/// Evaluates each kernel function on the training inputs (rows of `inputs`)
/// and returns the validated base kernel set.
pub fn build_base_kernels(
    specs: &[KernelFunctionSpec],
    inputs: DMatrix<f64>,
) -> Result<BaseKernelSet> {
    if specs.is_empty() {
        return Err(Error::InvalidParameter("kernel spec list must not be empty".into()));
    }
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one training input".into()));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training input coordinates"));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| inputs.row(i).iter().copied().collect()).collect();
    let mut bases = Vec::with_capacity(specs.len());
    let mut names = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = spec.eval(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        bases.push(k);
        names.push(spec.name());
    }
    for (m, k) in bases.iter().enumerate() {
        validate_base(m, k, n)?;
    }
    Ok(BaseKernelSet {
        bases,
        names,
        inputs: Some(inputs),
        specs: Some(specs.to_vec()),
    })
}

/// Nonnegative mixing weights for the linear kernel combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector(DVector<f64>);

impl ThetaVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidParameter("theta must have at least one entry".into()));
        }
        for (m, &t) in theta.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::NonFinite("theta"));
            }
            if t < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "theta[{m}] = {t} violates nonnegativity"
                )));
            }
        }
        Ok(Self(DVector::from_vec(theta)))
    }

    pub fn uniform(m: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Lower-triangular Cholesky factorisation with the failing pivot reported.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::CholeskyBreakdown { pivot: j });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// The mixed Gram matrix together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct GramFactor {
    k: DMatrix<f64>,
    chol: DMatrix<f64>,
    jitter: f64,
}

impl GramFactor {
    /// Factorises an explicit symmetric positive definite matrix (already
    /// including whatever diagonal shift it needs).
    pub fn from_matrix(k: DMatrix<f64>, jitter: f64) -> Result<Self> {
        let chol = cholesky_lower(&k)?;
        Ok(Self { k, chol, jitter })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `logdet(K) = 2 * sum ln diag(L)`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `K x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal");
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Solves `K X = B` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal");
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Explicit `K^{-1}` via triangular inversion of the factor.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.solve_mat(&DMatrix::identity(n, n))
    }

    /// Quadratic form `b^T K^{-1} b` through one triangular solve.
    pub fn inv_quad(&self, b: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal");
        y.dot(&y)
    }
}

/// Builds and factorises `K_theta = sum_m theta_m K_m + jitter * I`.
pub fn assemble_gram(
    theta: &ThetaVector,
    bases: &BaseKernelSet,
    jitter: f64,
) -> Result<GramFactor> {
    if theta.len() != bases.num_kernels() {
        return Err(Error::DimensionMismatch {
            context: "assemble_gram theta",
            expected: bases.num_kernels(),
            got: theta.len(),
        });
    }
    if !(jitter > 0.0) {
        return Err(Error::InvalidParameter(format!("jitter must be positive, got {jitter}")));
    }
    let n = bases.dim();
    let mut k = DMatrix::from_diagonal_element(n, n, jitter);
    for (m, base) in bases.bases().iter().enumerate() {
        let t = theta.as_slice()[m];
        if t != 0.0 {
            k += base * t;
        }
    }
    GramFactor::from_matrix(k, jitter)
}

/// `[tr(K^{-1} K_m)]_m`, the gradient of `theta -> logdet K_theta`.
///
/// Computed from the explicit inverse obtained by triangular inversion of the
/// Cholesky factor; with PSD bases every entry is nonnegative.
pub fn trace_products(gram: &GramFactor, bases: &BaseKernelSet) -> Result<Vec<f64>> {
    if gram.dim() != bases.dim() {
        return Err(Error::DimensionMismatch {
            context: "trace_products",
            expected: bases.dim(),
            got: gram.dim(),
        });
    }
    let kinv = gram.inverse();
    Ok(bases
        .bases()
        .iter()
        .map(|km| kinv.iter().zip(km.iter()).map(|(a, b)| a * b).sum())
        .collect())
}

/// Posterior mean prediction `u(x_star) = u_hat^T K^{-1} k_star` for each
/// cross-kernel column.
pub fn posterior_mean_predict(
    u_hat: &DVector<f64>,
    gram: &GramFactor,
    cross: &[DVector<f64>],
) -> Result<Vec<f64>> {
    if u_hat.len() != gram.dim() {
        return Err(Error::DimensionMismatch {
            context: "posterior_mean_predict u_hat",
            expected: gram.dim(),
            got: u_hat.len(),
        });
    }
    let w = gram.solve(u_hat);
    cross
        .iter()
        .map(|k_star| {
            if k_star.len() != gram.dim() {
                return Err(Error::DimensionMismatch {
                    context: "posterior_mean_predict cross column",
                    expected: gram.dim(),
                    got: k_star.len(),
                });
            }
            Ok(w.dot(k_star))
        })
        .collect()
}
