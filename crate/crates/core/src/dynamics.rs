//! Closed-form gradient-descent dynamics of linear least squares and of the
//! linearized generator, plus the constants that control the nonlinear fit.
//!
//! With `J = sum_i sigma_i w_i v_i^T`, gradient descent from zero leaves the
//! residual `r_tau = sum_i (1 - eta sigma_i^2)^tau <w_i, y> w_i`: components
//! with large `sigma_i` are fitted first.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::spectral::{norm2, DualKernel, TrigBasis};
use crate::trace::FitTrace;

/// `(1 - eta sigma^2)^tau`, evaluated as `exp(tau log1p(-eta sigma^2))`.
pub fn decay(eta: f64, sigma: f64, tau: usize) -> f64 {
    let a = eta * sigma * sigma;
    if tau == 0 {
        return 1.0;
    }
    if a < 1.0 {
        (tau as f64 * (-a).ln_1p()).exp()
    } else {
        (1.0 - a).powi(tau.min(i32::MAX as usize) as i32)
    }
}

/// Orthonormal directions with their singular values.
#[derive(Debug, Clone)]
pub enum Basis {
    Trig(TrigBasis),
    /// Columns are orthonormal; may span a proper subspace.
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct SpectralSystem {
    basis: Basis,
    sigma: Vec<f64>,
    eta: f64,
}

impl SpectralSystem {
    /// Trig basis paired with a dual kernel.
    pub fn trig(dual: &DualKernel, eta: f64) -> Result<Self> {
        let basis = TrigBasis::new(dual.sigma().len())?;
        Self::new(Basis::Trig(basis), dual.sigma().to_vec(), eta)
    }

    pub fn new(basis: Basis, sigma: Vec<f64>, eta: f64) -> Result<Self> {
        let dim = match &basis {
            Basis::Trig(b) => b.n(),
            Basis::Dense(w) => {
                let gram = w.transpose() * w;
                let eye = DMatrix::<f64>::identity(w.ncols(), w.ncols());
                if (gram - eye).amax() > 1e-10 {
                    return Err(Error::param("basis", "columns are not orthonormal"));
                }
                w.ncols()
            }
        };
        check_len(dim, sigma.len())?;
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::param("sigma", "entries must be finite and nonnegative"));
        }
        if !eta.is_finite() || eta <= 0.0 {
            return Err(Error::param("eta", format!("must be finite and > 0, got {eta}")));
        }
        Ok(Self { basis, sigma, eta })
    }

    /// Left singular vectors and singular values of `J`.
    pub fn from_matrix(j: &DMatrix<f64>, eta: f64) -> Result<Self> {
        let svd = j.clone().svd(true, false);
        let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
        Self::new(Basis::Dense(u), svd.singular_values.iter().copied().collect(), eta)
    }

    pub fn n(&self) -> usize {
        match &self.basis {
            Basis::Trig(b) => b.n(),
            Basis::Dense(w) => w.nrows(),
        }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// `(<w_1, y>, ..., <w_r, y>)`.
    pub fn coefficients(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), y.len())?;
        match &self.basis {
            Basis::Trig(b) => b.analyze(y),
            Basis::Dense(w) => Ok((w.transpose() * DVector::from_column_slice(y)).iter().copied().collect()),
        }
    }

    /// `sum_i coeffs_i w_i`.
    pub fn combine(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rank(), coeffs.len())?;
        match &self.basis {
            Basis::Trig(b) => b.synthesize(coeffs),
            Basis::Dense(w) => Ok((w * DVector::from_column_slice(coeffs)).iter().copied().collect()),
        }
    }

    /// Per-direction contraction factors after `tau` steps.
    pub fn decays(&self, tau: usize) -> Vec<f64> {
        self.sigma.iter().map(|&s| decay(self.eta, s, tau)).collect()
    }
}

/// Residual of gradient descent from zero after `tau` steps:
/// `y - sum_i (1 - (1 - eta sigma_i^2)^tau) <w_i, y> w_i`.
pub fn linear_residual(sys: &SpectralSystem, y: &[f64], tau: usize) -> Result<Vec<f64>> {
    let coeffs = sys.coefficients(y)?;
    let fitted: Vec<f64> = coeffs
        .iter()
        .zip(sys.decays(tau))
        .map(|(c, d)| c * (1.0 - d))
        .collect();
    let fit = sys.combine(&fitted)?;
    Ok(y.iter().zip(&fit).map(|(a, b)| a - b).collect())
}

/// Literal iteration `c <- c - eta J^T (J c - y)` from `c = 0`; returns `y - J c`.
///
/// Test-scale oracle for [`linear_residual`].
pub fn linear_gd_iterate_oracle(j: &DMatrix<f64>, y: &[f64], eta: f64, tau: usize) -> Result<Vec<f64>> {
    const MAX_DIM: usize = 64;
    if j.nrows() > MAX_DIM || j.ncols() > MAX_DIM {
        return Err(Error::BudgetExceeded {
            what: "linear GD oracle",
            needed: j.nrows().max(j.ncols()),
            budget: MAX_DIM,
        });
    }
    check_len(j.nrows(), y.len())?;
    let (c, _) = linear_gd_params(j, y, eta, tau);
    let r = DVector::from_column_slice(y) - j * c;
    Ok(r.iter().copied().collect())
}

/// Parameters of the literal linear iteration after `tau` steps, and their drift from zero.
fn linear_gd_params(j: &DMatrix<f64>, y: &[f64], eta: f64, tau: usize) -> (DVector<f64>, f64) {
    let yv = DVector::from_column_slice(y);
    let mut c = DVector::zeros(j.ncols());
    for _ in 0..tau {
        let r = j * &c - &yv;
        c -= j.transpose() * r * eta;
    }
    let drift = c.norm();
    (c, drift)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDecomposition {
    pub signal_term: f64,
    pub noise_term: f64,
    pub total_bound: f64,
}

/// Upper bound on `||x - J c_tau||` for `y = x + z` with `x` in the span of the
/// first `p` basis vectors.
pub fn error_decomposition(
    sys: &SpectralSystem,
    x: &[f64],
    z: &[f64],
    p: usize,
    tau: usize,
) -> Result<ErrorDecomposition> {
    if p == 0 || p >= sys.rank() {
        return Err(Error::param("p", format!("need 0 < p < {}, got {p}", sys.rank())));
    }
    let cx = sys.coefficients(x)?;
    let x_norm = norm2(x);
    let mut head = vec![0.0; cx.len()];
    head[..p].copy_from_slice(&cx[..p]);
    let proj = sys.combine(&head)?;
    let outside = norm2(&x.iter().zip(&proj).map(|(a, b)| a - b).collect::<Vec<_>>());
    if outside > 1e-8 * x_norm.max(f64::MIN_POSITIVE) {
        return Err(Error::OutsideSpan { p, residual: outside });
    }
    let cz = sys.coefficients(z)?;
    let signal_term = decay(sys.eta, sys.sigma[p - 1], tau) * x_norm;
    let noise_term = cz
        .iter()
        .zip(sys.decays(tau))
        .map(|(c, d)| ((d - 1.0) * c).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(ErrorDecomposition {
        signal_term,
        noise_term,
        total_bound: signal_term + noise_term,
    })
}

/// `floor(log(1 - sqrt(p/n)) / log(1 - eta sigma_{p+1}^2))`, at least 1.
pub fn stopping_time(p: usize, n: usize, eta: f64, sigma_next: f64) -> Result<usize> {
    if p == 0 || p >= n {
        return Err(Error::param("p", format!("need 0 < p < n = {n}, got {p}")));
    }
    let a = eta * sigma_next * sigma_next;
    if !a.is_finite() || a >= 1.0 {
        return Err(Error::param(
            "eta",
            format!("eta sigma_(p+1)^2 = {a} must lie in (0, 1)"),
        ));
    }
    if a < 1e-15 {
        return Err(Error::param(
            "sigma",
            format!("eta sigma_(p+1)^2 = {a:e} is too small; stopping time diverges"),
        ));
    }
    let ratio = (p as f64 / n as f64).sqrt();
    let tau = (-ratio).ln_1p() / (-a).ln_1p();
    Ok((tau.floor() as usize).max(1))
}

/// `(1 - eta sigma_p^2)^tau ||x|| + varsigma sqrt(2p/n) + epsilon ||y||`.
#[allow(clippy::too_many_arguments)]
pub fn denoising_bound(
    x_norm: f64,
    p: usize,
    n: usize,
    varsigma: f64,
    eta: f64,
    sigma_p: f64,
    tau: usize,
    epsilon: f64,
    y_norm: f64,
) -> Result<f64> {
    if p >= n {
        return Err(Error::param("p", format!("need p < n = {n}, got {p}")));
    }
    Ok(decay(eta, sigma_p, tau) * x_norm
        + varsigma * (2.0 * p as f64 / n as f64).sqrt()
        + epsilon * y_norm)
}

/// `||theta_tau - theta_0||` of the linearized iterates started from residual `r_0`.
pub fn param_drift(sys: &SpectralSystem, r0_coeffs: &[f64], tau: usize) -> Result<f64> {
    check_len(sys.rank(), r0_coeffs.len())?;
    let mut total = 0.0;
    for ((&c, &s), d) in r0_coeffs.iter().zip(&sys.sigma).zip(sys.decays(tau)) {
        if c == 0.0 || tau == 0 {
            continue;
        }
        if s <= 1e-14 {
            return Err(Error::Numerical(format!(
                "singular value {s:e} too small for a nonzero residual component"
            )));
        }
        total += (c * (1.0 - d) / s).powi(2);
    }
    Ok(total.sqrt())
}

/// Constants of the nonlinear-vs-linear comparison for the two-layer generator.
///
/// Only the inputs are stored; derived quantities are recomputed on access.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryParams {
    pub n: usize,
    pub k: usize,
    pub xi: f64,
    pub delta: f64,
    /// Smallest singular value of the reference Jacobian (smallest dual-kernel entry).
    pub alpha: f64,
    /// `||U||`.
    pub beta: f64,
    pub eta: f64,
    pub max_iters: usize,
    pub y_norm: f64,
    pub r0_norm: f64,
}

impl TheoryParams {
    fn log_term(&self) -> f64 {
        (2.0 * self.n as f64 / self.delta).ln()
    }

    /// `beta (4 log(2n/delta) / k)^(1/4)`.
    pub fn epsilon0(&self) -> f64 {
        self.beta * (4.0 * self.log_term() / self.k as f64).powf(0.25)
    }

    /// `(xi/8) beta alpha^2 / beta^2`.
    pub fn epsilon(&self) -> f64 {
        self.xi * self.alpha * self.alpha / (8.0 * self.beta)
    }

    /// `||y|| / (sqrt(n) beta) * xi alpha^2 / beta^2`.
    pub fn omega(&self) -> f64 {
        self.y_norm / ((self.n as f64).sqrt() * self.beta) * self.xi * (self.alpha / self.beta).powi(2)
    }

    /// Channel requirement with the unspecified absolute constant set to 1.
    pub fn required_k(&self) -> f64 {
        let ratio = self.alpha / self.beta;
        let growth = 1.0 + self.xi / 4.0 * ratio * self.eta * self.max_iters as f64 * self.beta * self.beta;
        self.n as f64 * self.xi.powi(-8) * growth * growth * ratio.powi(-18)
    }

    /// The channel requirement carries an unspecified absolute constant.
    pub fn required_k_has_unspecified_constant(&self) -> bool {
        true
    }

    /// `R = 2 (||r0||/alpha + (eps0 + eps)(1 + 2 eta T beta^2) ||r0|| / alpha^2)`,
    /// using `||r0|| / alpha` in place of `||J^+ r0||`.
    pub fn radius(&self) -> f64 {
        let a2 = self.alpha * self.alpha;
        let growth = 1.0 + 2.0 * self.eta * self.max_iters as f64 * self.beta * self.beta;
        2.0 * (self.r0_norm / self.alpha + (self.epsilon0() + self.epsilon()) * growth * self.r0_norm / a2)
    }

    /// `2 (beta / alpha^2)(eps0 + eps) ||r0||`.
    pub fn residual_gap_bound(&self) -> f64 {
        2.0 * self.beta / (self.alpha * self.alpha) * (self.epsilon0() + self.epsilon()) * self.r0_norm
    }

    /// Largest admissible iteration budget `2^5 beta^2 / (eta xi^2 alpha^4)`.
    pub fn max_admissible_iters(&self) -> f64 {
        32.0 * self.beta * self.beta / (self.eta * self.xi * self.xi * self.alpha.powi(4))
    }

    pub fn iteration_budget_in_range(&self) -> bool {
        self.max_iters >= 1 && (self.max_iters as f64) <= self.max_admissible_iters()
    }

    /// Largest admissible `xi`: `1 / sqrt(32 log(2n/delta))`.
    pub fn max_xi(n: usize, delta: f64) -> f64 {
        1.0 / (32.0 * (2.0 * n as f64 / delta).ln()).sqrt()
    }
}

/// Validates inputs and assembles [`TheoryParams`].
///
/// `r0_norm` defaults to `1.5 ||y||`, the initial-residual bound that holds
/// with the theory's choice of `omega`.
#[allow(clippy::too_many_arguments)]
pub fn theory_params(
    n: usize,
    k: usize,
    xi: f64,
    delta: f64,
    alpha: f64,
    beta: f64,
    eta: f64,
    max_iters: usize,
    y_norm: f64,
    r0_norm: Option<f64>,
) -> Result<TheoryParams> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", format!("must lie in (0, 1), got {delta}")));
    }
    let xi_max = TheoryParams::max_xi(n, delta);
    if !(xi > 0.0 && xi <= xi_max * (1.0 + 1e-12)) {
        return Err(Error::param("xi", format!("must lie in (0, {xi_max}], got {xi}")));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha <= beta) {
        return Err(Error::param("alpha", format!("need 0 < alpha <= beta, got {alpha}, {beta}")));
    }
    if !(eta > 0.0 && eta <= 1.0 / (beta * beta) * (1.0 + 1e-12)) {
        return Err(Error::param("eta", format!("need 0 < eta <= 1/beta^2, got {eta}")));
    }
    if k == 0 || n == 0 {
        return Err(Error::param("k", "n and k must be positive"));
    }
    Ok(TheoryParams {
        n,
        k,
        xi,
        delta,
        alpha,
        beta,
        eta,
        max_iters,
        y_norm,
        r0_norm: r0_norm.unwrap_or(1.5 * y_norm),
    })
}

/// Observed residual of a nonlinear fit next to its linearized prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct GapPoint {
    pub iter: usize,
    pub predicted_residual: f64,
    pub observed_residual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationGap {
    pub points: Vec<GapPoint>,
    pub bound: f64,
}

impl LinearizationGap {
    pub fn max_gap(&self) -> f64 {
        self.points.iter().map(|p| p.gap).fold(0.0, f64::max)
    }

    /// CSV `iter,predicted_residual,observed_residual,gap,bound`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,predicted_residual,observed_residual,gap,bound\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                p.iter, p.predicted_residual, p.observed_residual, p.gap, self.bound
            );
        }
        out
    }
}

/// Compares recorded residual coefficients with `(I - eta J J^T)^tau r_0`.
///
/// `r0` is the residual at the start of the trace, in the trace's sign
/// convention (`y - G(C_0)`).
pub fn linearization_gap(
    trace: &FitTrace,
    sys: &SpectralSystem,
    params: &TheoryParams,
    r0: &[f64],
) -> Result<LinearizationGap> {
    if !matches!(sys.basis, Basis::Trig(_)) {
        return Err(Error::param("sys", "linearization gap needs the trigonometric basis"));
    }
    let c0 = sys.coefficients(r0)?;
    let mut points = Vec::with_capacity(trace.records.len());
    for rec in &trace.records {
        let coeffs = rec
            .coefficients
            .as_ref()
            .ok_or_else(|| Error::param("trace", "trace was recorded without residual coefficients"))?;
        check_len(c0.len(), coeffs.len())?;
        let predicted: Vec<f64> = c0.iter().zip(sys.decays(rec.iter)).map(|(c, d)| c * d).collect();
        let gap = coeffs
            .iter()
            .zip(&predicted)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        points.push(GapPoint {
            iter: rec.iter,
            predicted_residual: norm2(&predicted),
            observed_residual: norm2(coeffs),
            gap,
        });
    }
    Ok(LinearizationGap {
        points,
        bound: params.residual_gap_bound(),
    })
}
