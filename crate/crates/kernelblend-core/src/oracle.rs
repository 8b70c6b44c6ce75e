//! Brute-force validators: quadrature and importance-sampling estimates of the
//! marginal likelihood `-2 ln \int N(u|0,K) P(y|u) du`, grid minimisers and
//! finite-difference derivatives.
//!
//! These exist for tests and the taxonomy checker only; the production solver
//! never calls them. Stochastic oracles take explicit seeds and draw their
//! randomness in fixed-size batches with one counter-derived stream per batch,
//! so results are identical regardless of how batches would be scheduled.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::{cholesky_lower, GramFactor, ThetaVector};
use crate::likelihood::LikelihoodModel;
use crate::objective::{optimize_gamma_gram, vb_parts};

const LN_2PI: f64 = 1.8378770664093453;
const LN_PI: f64 = 1.1447298858494002;
const MC_BATCH: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    GaussHermite,
    MonteCarlo,
    Grid,
    FiniteDifference,
}

/// A validated estimate with its uncertainty (zero for deterministic oracles).
#[derive(Debug, Clone, Copy)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: OracleMethod,
    pub samples_or_nodes: usize,
}

/// Physicists' Gauss-Hermite nodes and weights (weight function `exp(-x^2)`)
/// via the symmetric tridiagonal Jacobi matrix.
fn gauss_hermite_rule(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(nodes, nodes);
    for i in 1..nodes {
        let b = (i as f64 / 2.0).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut xs = Vec::with_capacity(nodes);
    let mut ws = Vec::with_capacity(nodes);
    for k in 0..nodes {
        xs.push(eig.eigenvalues[k]);
        let q0 = eig.eigenvectors.column(k)[0];
        ws.push(std::f64::consts::PI.sqrt() * q0 * q0);
    }
    (xs, ws)
}

/// `-2 ln \int N(u|0,k) P(y|u) du` for a single data point by Gauss-Hermite
/// quadrature with the substitution `u = sqrt(2k) x`.
pub fn mlm_gauss_hermite(
    k: f64,
    model: &LikelihoodModel,
    y: f64,
    nodes: usize,
) -> Result<OracleEstimate> {
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("kernel value must be positive, got {k}")));
    }
    if nodes < 20 {
        return Err(Error::InvalidParameter(format!("need at least 20 nodes, got {nodes}")));
    }
    let (xs, ws) = gauss_hermite_rule(nodes);
    let yv = DVector::from_element(1, y);
    let scale = (2.0 * k).sqrt();
    let mut terms = Vec::with_capacity(nodes);
    for (x, w) in xs.iter().zip(ws.iter()) {
        let u = DVector::from_element(1, scale * x);
        let ln_p = -0.5 * model.neg_log2_lik(&yv, &u)?;
        terms.push(w.ln() - 0.5 * LN_PI + ln_p);
    }
    let value = -2.0 * log_sum_exp(&terms);
    Ok(OracleEstimate { value, std_error: 0.0, method: OracleMethod::GaussHermite, samples_or_nodes: nodes })
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

struct BatchMoments {
    shift: f64,
    sum: f64,
    sum_sq: f64,
    count: usize,
}

/// Importance-sampling estimate of `-2 ln \int N(u|0,K) P(y|u) du` with the
/// variational Gaussian `Q(u) = N(m, V)` as proposal (posterior-matched, so
/// weights stay bounded where a prior proposal would degenerate).
pub fn mlm_monte_carlo(
    gram: &GramFactor,
    model: &LikelihoodModel,
    y: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    let n = gram.dim();
    if n > 6 {
        return Err(Error::InvalidParameter(format!(
            "the Monte-Carlo marginal oracle is desk-scale only (n <= 6), got n = {n}"
        )));
    }
    if samples < 100_000 {
        return Err(Error::InvalidParameter(format!(
            "need at least 1e5 samples for a usable estimate, got {samples}"
        )));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "mlm_monte_carlo", expected: n, got: y.len() });
    }
    // Proposal: fit the variational Gaussian at this gram.
    let gamma0 = model.default_gamma(y);
    let (gamma, _) = optimize_gamma_gram(gram, model, y, &gamma0, 200)?;
    let parts = vb_parts(gram, model, y, &gamma)?;
    let mean = parts.u_star.clone();
    let kinv = gram.inverse();
    let mut a_mat = kinv.clone();
    for i in 0..n {
        a_mat[(i, i)] += 1.0 / gamma[i];
    }
    let v_mat = GramFactor::from_matrix(a_mat, gram.jitter())?.inverse();
    let v_chol = cholesky_lower(&v_mat)?;
    let ln_det_v = 2.0 * v_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ln_det_k = gram.logdet();
    let v_factor = GramFactor::from_matrix(v_mat, 0.0)?;

    let batches = samples.div_ceil(MC_BATCH);
    let mut moments: Vec<BatchMoments> = Vec::with_capacity(batches);
    for b in 0..batches {
        let count = if b + 1 == batches { samples - b * MC_BATCH } else { MC_BATCH };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        let mut lws = Vec::with_capacity(count);
        for _ in 0..count {
            let zeta = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let u = &mean + &v_chol * zeta;
            let quad_k = gram.inv_quad(&u);
            let ln_prior = -0.5 * (n as f64 * LN_2PI + ln_det_k + quad_k);
            let ln_lik = -0.5 * model.neg_log2_lik(y, &u)?;
            let diff = &u - &mean;
            let quad_v = v_factor.inv_quad(&diff);
            let ln_q = -0.5 * (n as f64 * LN_2PI + ln_det_v + quad_v);
            let lw = ln_prior + ln_lik - ln_q;
            if !lw.is_finite() {
                return Err(Error::NonFinite("importance weight"));
            }
            lws.push(lw);
        }
        let shift = lws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for lw in &lws {
            let g = (lw - shift).exp();
            sum += g;
            sum_sq += g * g;
        }
        moments.push(BatchMoments { shift, sum, sum_sq, count });
    }

    // Combine batches under a common shift; order-independent.
    let global_shift = moments.iter().map(|m| m.shift).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut total_sq = 0.0;
    let mut count = 0usize;
    for m in &moments {
        let r = (m.shift - global_shift).exp();
        total += m.sum * r;
        total_sq += m.sum_sq * r * r;
        count += m.count;
    }
    let nf = count as f64;
    let g_bar = total / nf;
    let var_g = (total_sq / nf - g_bar * g_bar).max(0.0) * nf / (nf - 1.0);
    let se_mean = (var_g / nf).sqrt();
    let value = -2.0 * (global_shift + g_bar.ln());
    // delta method: d(-2 ln z)/dz = -2/z
    let std_error = 2.0 * se_mean / g_bar;
    Ok(OracleEstimate { value, std_error, method: OracleMethod::MonteCarlo, samples_or_nodes: count })
}

/// Central finite differences of an objective over the positive orthant,
/// step `1e-5 * (1 + |theta_m|)`, shrunk where the orthant is close.
pub fn finite_diff_gradient<F>(f: F, theta: &ThetaVector) -> Result<Vec<f64>>
where
    F: Fn(&ThetaVector) -> Result<f64>,
{
    let t = theta.as_slice();
    let mut grad = Vec::with_capacity(t.len());
    for m in 0..t.len() {
        let mut step = 1e-5 * (1.0 + t[m].abs());
        if t[m] - step < 0.0 {
            step = t[m] / 2.0;
        }
        if step < 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "cannot take a central difference at theta[{m}] = {} without leaving \
                 the positive orthant",
                t[m]
            )));
        }
        let mut plus = t.to_vec();
        plus[m] += step;
        let mut minus = t.to_vec();
        minus[m] -= step;
        let fp = f(&ThetaVector::new(plus)?)?;
        let fm = f(&ThetaVector::new(minus)?)?;
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

/// Log-spaced scan over `[lo, hi]` followed by one golden-section refinement
/// around the best cell.
pub fn grid_min<F>(f: F, lo: f64, hi: f64, points: usize) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    if !(lo > 0.0) || !(hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "grid_min needs 0 < lo < hi, got ({lo}, {hi})"
        )));
    }
    if points < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 grid points, got {points}")));
    }
    let ln_lo = lo.ln();
    let ln_hi = hi.ln();
    let mut best: Option<(usize, f64)> = None;
    let xs: Vec<f64> = (0..points)
        .map(|i| (ln_lo + (ln_hi - ln_lo) * i as f64 / (points - 1) as f64).exp())
        .collect();
    for (i, &x) in xs.iter().enumerate() {
        let fx = f(x);
        if fx.is_finite() && best.is_none_or(|(_, fb)| fx < fb) {
            best = Some((i, fx));
        }
    }
    let Some((i_best, _)) = best else {
        return Err(Error::NonFinite("objective on the whole grid"));
    };
    let mut a = xs[i_best.saturating_sub(1)];
    let mut b = xs[(i_best + 1).min(points - 1)];
    if a >= b {
        return Ok((xs[i_best], f(xs[i_best])));
    }
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-12 * (1.0 + a.abs()) {
            break;
        }
    }
    let x_star = 0.5 * (a + b);
    Ok((x_star, f(x_star)))
}
