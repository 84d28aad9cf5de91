//! A d-layer one-dimensional deep decoder.
//!
//! Layer `i` maps `B_{i-1}` (`n_{i-1} x k`) to `B_i = cn(act(M(B_{i-1})))`, where
//! `M` is one of four operators:
//!
//! * bilinear upsample: `T(u) S (B C)` with zero-insertion upsampling `S`
//! * fixed kernel: `T(u) (B C)`
//! * learned conv: channel `l` is `sum_j T(c_jl) b_j`
//! * learned deconv: channel `l` is `sum_j T(c_jl) S b_j`
//!
//! with `u = (0.5, 1, 0.5)`. The output is `B_d c_out`, with no squashing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::generator::StoppingRule;
use crate::jacobian::{Differentiable, JACOBIAN_ENTRY_BUDGET};
use crate::rng::{gaussian_vec, seeded};
use crate::spectral::norm2;
use crate::trace::{FitRecord, FitTrace, GdConfig};

/// Added to the channel standard deviation before dividing.
pub const CN_EPS: f64 = 1e-6;
/// Budget on `n_out * num_params` for [`decoder_jacobian`].
pub const DECODER_JACOBIAN_BUDGET: usize = 100_000_000;

const INTERP: [f64; 3] = [0.5, 1.0, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BilinearUpsample,
    FixedKernelNoUpsample,
    LearnedConv,
    LearnedDeconv,
}

impl Variant {
    pub fn upsamples(self) -> bool {
        matches!(self, Variant::BilinearUpsample | Variant::LearnedDeconv)
    }

    pub fn learned(self) -> bool {
        matches!(self, Variant::LearnedConv | Variant::LearnedDeconv)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Linear test mode.
    Identity,
}

fn default_filter_width() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub d: usize,
    pub k: usize,
    pub n_out: usize,
    pub variant: Variant,
    #[serde(default = "default_filter_width")]
    pub filter_width: usize,
    #[serde(default)]
    pub seed: u64,
    /// Std of the coefficient initialization; `1/sqrt(k)` when absent.
    #[serde(default)]
    pub init_std: Option<f64>,
    #[serde(default)]
    pub activation: Activation,
    /// Channel normalization after each activation.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl DecoderConfig {
    pub fn new(d: usize, k: usize, n_out: usize, variant: Variant, seed: u64) -> Self {
        Self {
            d,
            k,
            n_out,
            variant,
            filter_width: default_filter_width(),
            seed,
            init_std: None,
            activation: Activation::Relu,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::param("d", "need at least one layer"));
        }
        if self.k == 0 {
            return Err(Error::param("k", "need at least one channel"));
        }
        if self.n_out < 2 || self.n_out % 2 != 0 {
            return Err(Error::OddOrSmallDimension { n: self.n_out, min: 2 });
        }
        if self.variant.upsamples() {
            let factor = 1usize.checked_shl(self.d as u32).unwrap_or(0);
            if factor == 0 || self.n_out % factor != 0 || self.n_out / factor < 1 {
                return Err(Error::param(
                    "n_out",
                    format!("{} is not divisible by 2^{}", self.n_out, self.d),
                ));
            }
        }
        if self.variant.learned() && (self.filter_width % 2 == 0 || self.filter_width > self.width(0)) {
            return Err(Error::param(
                "filter_width",
                format!("must be odd and at most the input length, got {}", self.filter_width),
            ));
        }
        if let Some(s) = self.init_std {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::param("init_std", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Length of `B_i`; `width(0)` is the input length `n_0`.
    pub fn width(&self, i: usize) -> usize {
        if self.variant.upsamples() {
            self.n_out >> (self.d - i)
        } else {
            self.n_out
        }
    }

    pub fn init_std(&self) -> f64 {
        self.init_std.unwrap_or(1.0 / (self.k as f64).sqrt())
    }

    /// Trainable scalars in one hidden layer.
    pub fn params_per_layer(&self) -> usize {
        if self.variant.learned() {
            self.k * self.k * self.filter_width
        } else {
            self.k * self.k
        }
    }

    /// Trainable scalars in the hidden layers (`d k^2` for fixed kernels).
    pub fn layer_param_count(&self) -> usize {
        self.d * self.params_per_layer()
    }

    /// All trainable scalars, including the output combination.
    pub fn num_params(&self) -> usize {
        self.layer_param_count() + self.k
    }

    /// Parameters per output coordinate.
    pub fn overparameterization(&self) -> f64 {
        self.num_params() as f64 / self.n_out as f64
    }

    fn layer_shape(&self) -> (usize, usize) {
        if self.variant.learned() {
            (self.k * self.filter_width, self.k)
        } else {
            (self.k, self.k)
        }
    }
}

/// Fixed input `B_0`, hidden-layer parameters and output combination.
///
/// Hidden layer parameters are `k x k` mixing matrices for the fixed
/// variants and `kf x k` filter banks (entry `(j f + m, l)` is tap `m` of
/// `c_jl`) for the learned ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    cfg: DecoderConfig,
    b0: DMatrix<f64>,
    layers: Vec<DMatrix<f64>>,
    c_out: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGrad {
    Full,
    /// Treats the channel std as a constant. Incorrect; kept for comparison.
    Frozen,
}

struct LayerCache {
    /// Input for the mixing (fixed) or the im2col matrix (learned).
    input: DMatrix<f64>,
    pre: DMatrix<f64>,
    out: DMatrix<f64>,
    std: Vec<f64>,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-activations of every layer.
    pub fn pre_activations(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.layers.iter().map(|l| &l.pre)
    }

    /// Post-normalization activations `B_i`, `i = 1..d`.
    pub fn activations(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.layers.iter().map(|l| &l.out)
    }
}

fn upsample(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(2 * m.nrows(), m.ncols());
    for c in 0..m.ncols() {
        for t in 0..m.nrows() {
            out[(2 * t, c)] = m[(t, c)];
        }
    }
    out
}

fn upsample_adjoint(g: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(g.nrows() / 2, g.ncols(), |t, c| g[(2 * t, c)])
}

/// Circular convolution of every column with `(0.5, 1, 0.5)`; self-adjoint.
fn interp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, m.ncols(), |t, c| {
        INTERP[0] * m[((t + n - 1) % n, c)] + INTERP[1] * m[(t, c)] + INTERP[2] * m[((t + 1) % n, c)]
    })
}

/// `X[t, j f + m] = x_j[(t - m + h) mod n]`, so `X W` applies `T(c_jl)` and sums over `j`.
fn im2col(x: &DMatrix<f64>, f: usize) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let h = f / 2;
    DMatrix::from_fn(n, k * f, |t, col| {
        let (j, m) = (col / f, col % f);
        x[((t + n + h - m) % n, j)]
    })
}

fn col2im(g: &DMatrix<f64>, k: usize, f: usize) -> DMatrix<f64> {
    let n = g.nrows();
    let h = f / 2;
    let mut out = DMatrix::zeros(n, k);
    for col in 0..k * f {
        let (j, m) = (col / f, col % f);
        for t in 0..n {
            out[((t + n + h - m) % n, j)] += g[(t, col)];
        }
    }
    out
}

/// Per-channel `(x - mean) / (std + eps)`; returns the output and the stds.
pub fn channel_normalize(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    let mut stds = Vec::with_capacity(x.ncols());
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let std = (col.norm_squared() / n).sqrt();
        col /= std + CN_EPS;
        stds.push(std);
    }
    (out, stds)
}

fn channel_normalize_backward(g: &DMatrix<f64>, out: &DMatrix<f64>, stds: &[f64], mode: NormGrad) -> DMatrix<f64> {
    let n = g.nrows() as f64;
    let mut gx = g.clone();
    for (c, mut col) in gx.column_iter_mut().enumerate() {
        let std = stds[c];
        let denom = std + CN_EPS;
        let mean = col.sum() / n;
        let proj = if mode == NormGrad::Full && std > 0.0 {
            col.dot(&out.column(c)) / (n * std)
        } else {
            0.0
        };
        for t in 0..col.len() {
            col[t] = (col[t] - mean) / denom - out[(t, c)] * proj;
        }
    }
    gx
}

impl DecoderState {
    /// `B_0 ~ N(0, 1)`, coefficients `~ N(0, init_std^2)`, learned filters `~ N(0, 1/(k f))`.
    pub fn init(cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(cfg.seed);
        let n0 = cfg.width(0);
        let b0 = DMatrix::from_vec(n0, cfg.k, gaussian_vec(&mut rng, n0 * cfg.k, 1.0));
        let (rows, cols) = cfg.layer_shape();
        let layer_std = if cfg.variant.learned() {
            1.0 / ((cfg.k * cfg.filter_width) as f64).sqrt()
        } else {
            cfg.init_std()
        };
        let layers = (0..cfg.d)
            .map(|_| DMatrix::from_vec(rows, cols, gaussian_vec(&mut rng, rows * cols, layer_std)))
            .collect();
        let c_out = DVector::from_vec(gaussian_vec(&mut rng, cfg.k, cfg.init_std()));
        Ok(Self { cfg: cfg.clone(), b0, layers, c_out })
    }

    pub fn from_parts(cfg: &DecoderConfig, b0: DMatrix<f64>, layers: Vec<DMatrix<f64>>, c_out: DVector<f64>) -> Result<Self> {
        cfg.validate()?;
        check_len(cfg.width(0), b0.nrows())?;
        check_len(cfg.k, b0.ncols())?;
        check_len(cfg.d, layers.len())?;
        let (rows, cols) = cfg.layer_shape();
        for l in &layers {
            check_len(rows, l.nrows())?;
            check_len(cols, l.ncols())?;
        }
        check_len(cfg.k, c_out.len())?;
        let s = Self { cfg: cfg.clone(), b0, layers, c_out };
        if s.b0.iter().chain(s.params().iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder state"));
        }
        Ok(s)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.b0
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub fn output_weights(&self) -> &DVector<f64> {
        &self.c_out
    }

    pub fn num_params(&self) -> usize {
        self.cfg.num_params()
    }

    /// Layers in order (each column major), then the output combination.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.as_slice());
        }
        out.extend_from_slice(self.c_out.as_slice());
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        check_len(self.num_params(), theta.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let len = l.len();
            l.as_mut_slice().copy_from_slice(&theta[off..off + len]);
            off += len;
        }
        self.c_out.as_mut_slice().copy_from_slice(&theta[off..]);
        Ok(())
    }

    fn layer_forward(&self, i: usize, b_in: &DMatrix<f64>) -> LayerCache {
        let w = &self.layers[i];
        let (input, lin) = match self.cfg.variant {
            Variant::BilinearUpsample => {
                let z = b_in * w;
                let lin = interp(&upsample(&z));
                (b_in.clone(), lin)
            }
            Variant::FixedKernelNoUpsample => (b_in.clone(), interp(&(b_in * w))),
            Variant::LearnedConv => {
                let x = im2col(b_in, self.cfg.filter_width);
                let lin = &x * w;
                (x, lin)
            }
            Variant::LearnedDeconv => {
                let x = im2col(&upsample(b_in), self.cfg.filter_width);
                let lin = &x * w;
                (x, lin)
            }
        };
        let act = match self.cfg.activation {
            Activation::Relu => lin.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Identity => lin.clone(),
        };
        let (out, std) = if self.cfg.normalize {
            channel_normalize(&act)
        } else {
            let k = act.ncols();
            (act, vec![0.0; k])
        };
        LayerCache { input, pre: lin, out, std }
    }

    pub fn forward_cached(&self) -> ForwardCache {
        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.cfg.d);
        for i in 0..self.cfg.d {
            let cache = {
                let b_in = layers.last().map_or(&self.b0, |c| &c.out);
                self.layer_forward(i, b_in)
            };
            layers.push(cache);
        }
        let b_d = &layers.last().expect("d >= 1").out;
        let output = (b_d * &self.c_out).as_slice().to_vec();
        ForwardCache { layers, output }
    }

    pub fn forward(&self) -> Vec<f64> {
        self.forward_cached().output
    }

    /// `0.5 ||x - y||^2`.
    pub fn loss(&self, y: &[f64]) -> Result<f64> {
        check_len(self.cfg.n_out, y.len())?;
        let x = self.forward();
        Ok(0.5 * x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    /// Flat gradient of `<g_out, x(theta)>`, i.e. `J^T g_out`.
    pub fn backward(&self, cache: &ForwardCache, g_out: &[f64], mode: NormGrad) -> Result<Vec<f64>> {
        check_len(self.cfg.n_out, g_out.len())?;
        let d = self.cfg.d;
        let g = DVector::from_column_slice(g_out);
        let b_d = &cache.layers[d - 1].out;
        let g_cout = b_d.transpose() * &g;
        let mut g_b = &g * self.c_out.transpose();
        let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(d);
        for i in (0..d).rev() {
            let lc = &cache.layers[i];
            let mut g_act = if self.cfg.normalize {
                channel_normalize_backward(&g_b, &lc.out, &lc.std, mode)
            } else {
                g_b
            };
            if self.cfg.activation == Activation::Relu {
                g_act.zip_apply(&lc.pre, |gv, p| {
                    if p <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            let w = &self.layers[i];
            let f = self.cfg.filter_width;
            let (g_w, g_in) = match self.cfg.variant {
                Variant::BilinearUpsample | Variant::FixedKernelNoUpsample => {
                    let g_lin = interp(&g_act);
                    let g_z = if self.cfg.variant.upsamples() {
                        upsample_adjoint(&g_lin)
                    } else {
                        g_lin
                    };
                    let g_w = lc.input.transpose() * &g_z;
                    let g_in = (i > 0).then(|| g_z * w.transpose());
                    (g_w, g_in)
                }
                Variant::LearnedConv | Variant::LearnedDeconv => {
                    let g_w = lc.input.transpose() * &g_act;
                    let g_in = (i > 0).then(|| {
                        let g_x = col2im(&(&g_act * w.transpose()), self.cfg.k, f);
                        if self.cfg.variant.upsamples() {
                            upsample_adjoint(&g_x)
                        } else {
                            g_x
                        }
                    });
                    (g_w, g_in)
                }
            };
            grads.push(g_w);
            match g_in {
                Some(next) => g_b = next,
                None => break,
            }
        }
        let mut flat = Vec::with_capacity(self.num_params());
        for gw in grads.iter().rev() {
            flat.extend_from_slice(gw.as_slice());
        }
        flat.extend_from_slice(g_cout.as_slice());
        Ok(flat)
    }

    /// Gradient of `0.5 ||x - y||^2` in [`params`](Self::params) order.
    pub fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.gradient_with(y, NormGrad::Full)
    }

    pub fn gradient_with(&self, y: &[f64], mode: NormGrad) -> Result<Vec<f64>> {
        check_len(self.cfg.n_out, y.len())?;
        let cache = self.forward_cached();
        let r: Vec<f64> = cache.output.iter().zip(y).map(|(a, b)| a - b).collect();
        self.backward(&cache, &r, mode)
    }

    /// Smallest pre-activation magnitude; finite-difference checks need it away from 0.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.forward_cached()
            .pre_activations()
            .flat_map(|p| p.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

impl Differentiable for DecoderState {
    fn output_len(&self) -> usize {
        self.cfg.n_out
    }

    fn num_params(&self) -> usize {
        self.cfg.num_params()
    }

    fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached();
        self.backward(&cache, cotangent, NormGrad::Full)
    }

    fn gram(&self) -> Result<DMatrix<f64>> {
        let j = decoder_jacobian(self)?;
        Ok(&j * j.transpose())
    }
}

/// Dense `n_out x num_params` Jacobian, one reverse pass per row.
pub fn decoder_jacobian(state: &DecoderState) -> Result<DMatrix<f64>> {
    let n = state.cfg.n_out;
    let p = state.num_params();
    let needed = n.saturating_mul(p);
    if needed > DECODER_JACOBIAN_BUDGET || needed > JACOBIAN_ENTRY_BUDGET {
        return Err(Error::BudgetExceeded {
            what: "decoder Jacobian",
            needed,
            budget: DECODER_JACOBIAN_BUDGET.min(JACOBIAN_ENTRY_BUDGET),
        });
    }
    let cache = state.forward_cached();
    let mut j = DMatrix::zeros(n, p);
    let mut e = vec![0.0; n];
    for r in 0..n {
        e[r] = 1.0;
        let row = state.backward(&cache, &e, NormGrad::Full)?;
        e[r] = 0.0;
        for (c, v) in row.into_iter().enumerate() {
            j[(r, c)] = v;
        }
    }
    Ok(j)
}

pub struct DecoderFitOutcome {
    pub trace: FitTrace,
    pub state: DecoderState,
}

fn relative_drift(cur: &DMatrix<f64>, init: &DMatrix<f64>) -> f64 {
    let base = init.norm();
    let diff = (cur - init).norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// Plain gradient descent on `0.5 ||x(theta) - y||^2`.
///
/// Supports fixed-length, loss-threshold and oracle-best stopping; every
/// record carries the relative drift of each hidden layer.
pub fn decoder_fit(
    state: &DecoderState,
    y: &[f64],
    gd: &GdConfig,
    stop: &StoppingRule,
    truth: Option<&[f64]>,
) -> Result<DecoderFitOutcome> {
    let n = state.cfg.n_out;
    check_len(n, y.len())?;
    if let Some(x) = truth {
        check_len(n, x.len())?;
    }
    if !gd.eta.is_finite() || gd.eta < 0.0 {
        return Err(Error::param("eta", format!("must be finite and >= 0, got {}", gd.eta)));
    }
    match stop {
        StoppingRule::Theory { .. } => {
            return Err(Error::param("stop", "theory stopping is defined for the two-layer generator only"))
        }
        StoppingRule::OracleBest if truth.is_none() => {
            return Err(Error::param("stop", "oracle-best stopping requires the ground truth"))
        }
        _ => {}
    }
    let iters = match stop {
        StoppingRule::Fixed(t) => *t,
        _ => gd.max_iters,
    };

    let mut trace = FitTrace::default();
    let theta0 = state.params();
    let mut cur = state.clone();
    let mut best: Option<(f64, DecoderState)> = None;

    for tau in 0..=iters {
        let cache = cur.forward_cached();
        let r: Vec<f64> = cache.output.iter().zip(y).map(|(a, b)| a - b).collect();
        let residual_norm = norm2(&r);
        let loss = 0.5 * residual_norm * residual_norm;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("decoder loss diverged at iteration {tau}")));
        }
        let error_to_truth = truth.map(|x| {
            cache.output.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        });
        let theta = cur.params();
        let weight_drift = theta.iter().zip(&theta0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        // cn keeps the output bounded even when the weights blow up, so the
        // loss alone does not reveal divergence
        if !weight_drift.is_finite() {
            return Err(Error::Numerical(format!("decoder parameters diverged at iteration {tau}")));
        }
        let layer_drift = cur.layers.iter().zip(&state.layers).map(|(c, i)| relative_drift(c, i)).collect();
        trace.records.push(FitRecord {
            iter: tau,
            loss,
            residual_norm,
            error_to_truth,
            weight_drift,
            coefficients: None,
            layer_drift: Some(layer_drift),
        });
        if let (StoppingRule::OracleBest, Some(e)) = (stop, error_to_truth) {
            if best.as_ref().is_none_or(|(b, _)| e < *b) {
                best = Some((e, cur.clone()));
            }
        }
        if let StoppingRule::LossThreshold(level) = *stop {
            if loss <= level {
                trace.stop_iter = tau;
                return Ok(DecoderFitOutcome { trace, state: cur });
            }
        }
        if tau == iters {
            break;
        }
        let grad = cur.backward(&cache, &r, NormGrad::Full)?;
        let next: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - gd.eta * g).collect();
        cur.set_params(&next)?;
    }

    match best {
        Some((_, s)) => {
            trace.stop_iter = trace.best_error_iter().unwrap_or(0);
            Ok(DecoderFitOutcome { trace, state: s })
        }
        None => {
            trace.stop_iter = iters;
            Ok(DecoderFitOutcome { trace, state: cur })
        }
    }
}
