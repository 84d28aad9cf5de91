//! Circulant operators, the trigonometric eigenbasis and the dual kernel.
//!
//! A filter `u` of length `n` is stored as the first column of the circulant
//! matrix `U`, so `(U c)_i = sum_j u_{(i - j) mod n} c_j`. Every symmetric
//! circulant matrix is diagonalised by the real trigonometric basis
//! `w_1..w_n`; trig index `i + 1` is paired with DFT bin `i`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Tolerance used when deciding whether a normalized correlation left [-1, 1].
pub const CORRELATION_TOL: f64 = 1e-12;

/// Kernels with at most this many nonzero taps are applied by direct summation.
const SPARSE_TAP_LIMIT: usize = 64;

pub(crate) fn require_even(n: usize, min: usize) -> Result<()> {
    if n % 2 != 0 || n < min {
        return Err(Error::OddOrSmallDimension { n, min });
    }
    Ok(())
}

pub(crate) fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How a [`Kernel`] was constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelPreset {
    Delta,
    Triangular { width: usize },
    Gaussian { std: f64 },
    Custom,
}

/// A convolution filter of even length `n`, centered at index 0 with circular wrap.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    u: Vec<f64>,
    preset: KernelPreset,
}

impl Kernel {
    /// Builds one of the preset filters.
    ///
    /// Triangular kernels are unnormalized hats with peak 1, so width 3 gives
    /// the linear-interpolation filter `(0.5, 1, 0.5)`.
    pub fn from_preset(preset: &KernelPreset, n: usize) -> Result<Self> {
        require_even(n, 4)?;
        let mut u = vec![0.0; n];
        match *preset {
            KernelPreset::Delta => u[0] = 1.0,
            KernelPreset::Triangular { width } => {
                if width % 2 == 0 || width >= n {
                    return Err(Error::param(
                        "width",
                        format!("triangular width must be odd and < n, got {width} (n = {n})"),
                    ));
                }
                let half = (width - 1) / 2;
                for d in 0..=half {
                    let value = 1.0 - d as f64 / (half + 1) as f64;
                    u[d] = value;
                    u[(n - d) % n] = value;
                }
            }
            KernelPreset::Gaussian { std } => {
                if !std.is_finite() || std <= 0.0 {
                    return Err(Error::param("std", format!("must be finite and > 0, got {std}")));
                }
                for (j, slot) in u.iter_mut().enumerate() {
                    let d = j.min(n - j) as f64;
                    *slot = (-d * d / (2.0 * std * std)).exp();
                }
            }
            KernelPreset::Custom => {
                return Err(Error::param("preset", "custom kernels are built with Kernel::custom"))
            }
        }
        Ok(Self {
            u,
            preset: preset.clone(),
        })
    }

    /// Wraps an arbitrary filter given as the first column of its circulant.
    pub fn custom(u: Vec<f64>) -> Result<Self> {
        require_even(u.len(), 4)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel taps"));
        }
        if u.iter().all(|&v| v == 0.0) {
            return Err(Error::param("u", "kernel must not be the zero vector"));
        }
        Ok(Self {
            u,
            preset: KernelPreset::Custom,
        })
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn taps(&self) -> &[f64] {
        &self.u
    }

    pub fn preset(&self) -> &KernelPreset {
        &self.preset
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.u)
    }

    /// `u_j == u_{n-j}` for all `j`, i.e. the circulant is symmetric.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.n();
        (1..n).all(|j| (self.u[j] - self.u[n - j]).abs() <= tol)
    }

    /// CSV rows `index,frequency,value`; the middle column holds the signed
    /// circular offset of each tap.
    pub fn to_csv(&self) -> String {
        let n = self.n() as i64;
        let mut out = String::from("index,frequency,value\n");
        for (j, v) in self.u.iter().enumerate() {
            let j = j as i64;
            let offset = if j > n / 2 { j - n } else { j };
            let _ = writeln!(out, "{j},{offset},{v:.17e}");
        }
        out
    }
}

/// Forward DFT `X_f = sum_j x_j e^{-2 pi i j f / n}` of a real vector.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf
}

/// Inverse DFT returning the real part, scaled by `1/n`.
pub fn idft_real(spectrum: &[Complex64]) -> Vec<f64> {
    let n = spectrum.len();
    let mut buf = spectrum.to_vec();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Circular convolution `(a * b)_l = sum_k a_k b_{(l - k) mod n}` via FFT.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("convolution input"));
    }
    let fa = dft(a);
    let fb = dft(b);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    Ok(idft_real(&prod))
}

/// The circulant matrix `U` induced by a kernel, with its cached spectrum.
#[derive(Clone)]
pub struct CirculantOperator {
    kernel: Kernel,
    spectrum: Vec<Complex64>,
    sparse_taps: Option<Vec<(usize, f64)>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CirculantOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CirculantOperator")
            .field("kernel", &self.kernel)
            .field("spectrum", &self.spectrum)
            .finish()
    }
}

impl CirculantOperator {
    pub fn new(kernel: Kernel) -> Self {
        let n = kernel.n();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let spectrum = dft(kernel.taps());
        let nonzero: Vec<(usize, f64)> = kernel
            .taps()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, v)| (j, *v))
            .collect();
        let sparse_taps = (nonzero.len() <= SPARSE_TAP_LIMIT).then_some(nonzero);
        Self {
            kernel,
            spectrum,
            sparse_taps,
            fwd,
            inv,
        }
    }

    pub fn n(&self) -> usize {
        self.kernel.n()
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    /// `||U||_op = max_f |(F u)_f|`.
    pub fn operator_norm(&self) -> f64 {
        self.spectrum.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// `||U||_F = sqrt(n) ||u||_2`.
    pub fn frobenius_norm(&self) -> f64 {
        (self.n() as f64).sqrt() * self.kernel.norm()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64], transpose: bool) {
        let n = self.n();
        match &self.sparse_taps {
            Some(taps) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for &(t, w) in taps {
                    if transpose {
                        // (U^T x)_j = sum_t u_t x_{(j + t) mod n}
                        for j in 0..n {
                            let src = if j + t >= n { j + t - n } else { j + t };
                            out[j] += w * x[src];
                        }
                    } else {
                        // (U x)_i = sum_t u_t x_{(i - t) mod n}
                        for i in 0..n {
                            let src = if i >= t { i - t } else { i + n - t };
                            out[i] += w * x[src];
                        }
                    }
                }
            }
            None => {
                let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                self.fwd.process(&mut buf);
                for (b, s) in buf.iter_mut().zip(&self.spectrum) {
                    *b *= if transpose { s.conj() } else { *s };
                }
                self.inv.process(&mut buf);
                for (o, b) in out.iter_mut().zip(&buf) {
                    *o = b.re / n as f64;
                }
            }
        }
    }

    /// `U x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.apply_into(x, &mut out, false);
        out
    }

    /// `U^T x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.apply_into(x, &mut out, true);
        out
    }

    /// Applies `U` (or `U^T`) to every column of `m`.
    pub fn apply_columns(&self, m: &DMatrix<f64>, transpose: bool) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.n(), "row count must match operator size");
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (src, mut dst) in m.column_iter().zip(out.column_iter_mut()) {
            self.apply_into(src.as_slice(), dst.as_mut_slice(), transpose);
        }
        out
    }

    /// Materializes `U` with `U[i, j] = u_{(i - j) mod n}`.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let u = self.kernel.taps();
        DMatrix::from_fn(n, n, |i, j| u[(i + n - j) % n])
    }
}

/// `g(t) = (1 - arccos(t)/pi) t / 2`, the arc-cosine kernel profile.
///
/// Arguments within [`CORRELATION_TOL`] of the unit interval are clamped.
pub fn g_scalar(t: f64) -> Result<f64> {
    if !t.is_finite() || t.abs() > 1.0 + CORRELATION_TOL {
        return Err(Error::CorrelationOutOfRange { value: t });
    }
    let t = t.clamp(-1.0, 1.0);
    Ok(0.5 * (1.0 - t.acos() / PI) * t)
}

/// The real orthonormal trigonometric basis of even dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrigBasis {
    n: usize,
}

impl TrigBasis {
    pub fn new(n: usize) -> Result<Self> {
        require_even(n, 2)?;
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Frequency of trig index `i` (1-based): 0 for the constant, `i - 1`
    /// for cosines and Nyquist, `n - i + 1` for sines.
    pub fn frequency(&self, i: usize) -> usize {
        let bin = i - 1;
        bin.min(self.n - bin)
    }

    /// Basis vector `w_i` for `i` in `1..=n`.
    pub fn vector(&self, i: usize) -> Result<Vec<f64>> {
        let n = self.n;
        if i == 0 || i > n {
            return Err(Error::param("i", format!("trig index must be in 1..={n}, got {i}")));
        }
        let m = i - 1;
        let scale = 1.0 / (n as f64).sqrt();
        let s2 = std::f64::consts::SQRT_2 * scale;
        let w = (0..n)
            .map(|j| {
                let phase = 2.0 * PI * ((j * m) % n) as f64 / n as f64;
                if m == 0 {
                    scale
                } else if m < n / 2 {
                    s2 * phase.cos()
                } else if m == n / 2 {
                    if j % 2 == 0 {
                        scale
                    } else {
                        -scale
                    }
                } else {
                    s2 * phase.sin()
                }
            })
            .collect();
        Ok(w)
    }

    /// Dense `n x n` matrix whose column `i - 1` is `w_i`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for i in 1..=self.n {
            let col = self.vector(i).expect("index in range");
            w.set_column(i - 1, &DVector::from_vec(col));
        }
        w
    }

    /// Coefficients `(<w_1, y>, ..., <w_n, y>)`, computed with one FFT.
    pub fn analyze(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, y.len())?;
        let n = self.n;
        let spec = dft(y);
        let rn = (n as f64).sqrt();
        let c = (2.0 / n as f64).sqrt();
        let mut coeffs = vec![0.0; n];
        coeffs[0] = spec[0].re / rn;
        coeffs[n / 2] = spec[n / 2].re / rn;
        for m in 1..n / 2 {
            coeffs[m] = c * spec[m].re;
        }
        for m in n / 2 + 1..n {
            // sum_j y_j sin(2 pi j m / n) = -Im Y_m
            coeffs[m] = -c * spec[m].im;
        }
        Ok(coeffs)
    }

    /// Inverse of [`TrigBasis::analyze`]: `sum_i coeffs_i w_i`.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, coeffs.len())?;
        let n = self.n;
        let rn = (n as f64).sqrt();
        let h = (n as f64 / 2.0).sqrt();
        let mut spec = vec![Complex64::new(0.0, 0.0); n];
        spec[0] = Complex64::new(rn * coeffs[0], 0.0);
        spec[n / 2] = Complex64::new(rn * coeffs[n / 2], 0.0);
        for m in 1..n / 2 {
            // sine at frequency m equals minus the sine stored at index n - m
            let cos_part = coeffs[m];
            let sin_part = -coeffs[n - m];
            spec[m] = Complex64::new(h * cos_part, -h * sin_part);
            spec[n - m] = spec[m].conj();
        }
        Ok(idft_real(&spec))
    }
}

/// Nonnegative per-frequency weights `sigma_i`, stored in trig-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct DualKernel {
    sigma: Vec<f64>,
    symmetric_kernel: bool,
}

impl DualKernel {
    /// Wraps externally computed weights (e.g. singular values of a dense system).
    pub fn from_sigma(sigma: Vec<f64>) -> Result<Self> {
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::param("sigma", "entries must be finite and nonnegative"));
        }
        Ok(Self {
            sigma,
            symmetric_kernel: true,
        })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `sigma_i` for 1-based trig index `i`.
    pub fn get(&self, i: usize) -> f64 {
        self.sigma[i - 1]
    }

    /// False when the source kernel was asymmetric; then the circular
    /// self-convolution differs from the row autocorrelation that generates
    /// the expected Jacobian, and the eigen-oracle should be preferred.
    pub fn symmetric_kernel(&self) -> bool {
        self.symmetric_kernel
    }

    /// Fraction of `sum sigma_i^2` carried by the `count` lowest frequencies.
    pub fn low_frequency_mass(&self, count: usize) -> f64 {
        let n = self.sigma.len();
        let basis = TrigBasis { n };
        let mut idx: Vec<usize> = (1..=n).collect();
        idx.sort_by_key(|&i| (basis.frequency(i), i));
        let total: f64 = self.sigma.iter().map(|s| s * s).sum();
        let low: f64 = idx.iter().take(count).map(|&i| self.get(i).powi(2)).sum();
        low / total
    }

    pub fn to_csv(&self) -> String {
        let basis = TrigBasis {
            n: self.sigma.len(),
        };
        let mut out = String::from("index,frequency,value\n");
        for (k, s) in self.sigma.iter().enumerate() {
            let _ = writeln!(out, "{},{},{s:.17e}", k + 1, basis.frequency(k + 1));
        }
        out
    }
}

/// `sigma = ||u|| sqrt(|F g(u * u / ||u||^2)|)` with trig index `i + 1` read
/// from DFT bin `i`.
pub fn dual_kernel(kernel: &Kernel) -> Result<DualKernel> {
    let norm = kernel.norm();
    if norm == 0.0 {
        return Err(Error::param("u", "kernel must be nonzero"));
    }
    let u = kernel.taps();
    let n = u.len();
    let mut auto = circular_convolve(u, u)?;
    // acos is ill-conditioned near 1, so lag 0 is summed directly; for a
    // symmetric kernel it then normalizes to exactly 1
    auto[0] = (0..n).map(|j| u[j] * u[(n - j) % n]).sum();
    let norm_sq: f64 = u.iter().map(|v| v * v).sum();
    let profile = auto
        .iter()
        .map(|a| g_scalar(a / norm_sq))
        .collect::<Result<Vec<_>>>()?;
    let sigma = dft(&profile)
        .iter()
        .map(|c| norm * c.norm().sqrt())
        .collect();
    Ok(DualKernel {
        sigma,
        symmetric_kernel: kernel.is_symmetric(1e-12 * norm),
    })
}

/// `max_f |(F u)_f|`, the spectral norm of the circulant.
pub fn operator_norm(op: &CirculantOperator) -> f64 {
    op.operator_norm()
}
