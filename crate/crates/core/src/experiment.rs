//! Seeded experiments: denoising with early stopping, structure-vs-noise fit
//! curves, per-frequency fitting speed and spectral summaries of kernels.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decoder_fit, DecoderConfig, DecoderState};
use crate::dynamics::{denoising_bound, stopping_time};
use crate::error::{check_len, Error, Result};
use crate::generator::{fit, GeneratorConfig, GeneratorState, StoppingRule};
use crate::jacobian::{circulant_eigenvalues_by_index, sigma_closed_form};
use crate::rng::{derive_seed, gaussian_vec, seeded, Rng};
use crate::spectral::{dot, dual_kernel, norm2, CirculantOperator, Kernel, KernelPreset, TrigBasis};
use crate::trace::{FitTrace, GdConfig};

pub const SCHEMA_VERSION: u32 = 1;
/// Relative loss level (`loss <= tol ||y||^2`) treated as convergence.
pub const CONVERGENCE_TOL: f64 = 1e-6;

/// How the clean signal is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalLaw {
    /// Gaussian coefficients on `w_1..w_p`, rescaled to unit norm.
    UnitNormInSpan,
    /// Exactly these coefficients on `w_1..w_p`.
    Explicit { coefficients: Vec<f64> },
    /// `low` on the first half of the samples, `high` on the second.
    StepFunction { low: f64, high: f64 },
    /// A fixed vector; not required to be band limited.
    Custom { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalModel {
    pub n: usize,
    pub p: usize,
    pub law: SignalLaw,
}

impl SignalModel {
    fn in_span(&self) -> bool {
        matches!(self.law, SignalLaw::UnitNormInSpan | SignalLaw::Explicit { .. })
    }
}

/// `z ~ N(0, varsigma^2 / n I)`, so `E ||z||^2 = varsigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub varsigma: f64,
}

/// Draws the clean signal; in-span laws are checked against the projection onto `w_1..w_p`.
pub fn gen_signal(model: &SignalModel, rng: &mut Rng) -> Result<Vec<f64>> {
    let n = model.n;
    let basis = TrigBasis::new(n)?;
    if model.in_span() && (model.p == 0 || model.p >= n) {
        return Err(Error::param("p", format!("need 0 < p < n = {n}, got {}", model.p)));
    }
    let x = match &model.law {
        SignalLaw::UnitNormInSpan => {
            let mut coeffs = vec![0.0; n];
            let g = gaussian_vec(rng, model.p, 1.0);
            let norm = norm2(&g);
            for (c, v) in coeffs.iter_mut().zip(&g) {
                *c = v / norm;
            }
            basis.synthesize(&coeffs)?
        }
        SignalLaw::Explicit { coefficients } => {
            check_len(model.p, coefficients.len())?;
            let mut coeffs = vec![0.0; n];
            coeffs[..model.p].copy_from_slice(coefficients);
            basis.synthesize(&coeffs)?
        }
        SignalLaw::StepFunction { low, high } => (0..n).map(|t| if t < n / 2 { *low } else { *high }).collect(),
        SignalLaw::Custom { values } => {
            check_len(n, values.len())?;
            values.clone()
        }
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signal"));
    }
    if model.in_span() {
        let residual = band_residual(&basis, &x, model.p)?;
        if residual > 1e-10 * norm2(&x) {
            return Err(Error::OutsideSpan { p: model.p, residual });
        }
    }
    Ok(x)
}

/// `||x - Pi_p x||` for the projection onto `w_1..w_p`.
pub fn band_residual(basis: &TrigBasis, x: &[f64], p: usize) -> Result<f64> {
    let coeffs = basis.analyze(x)?;
    Ok(coeffs[p.min(coeffs.len())..].iter().map(|c| c * c).sum::<f64>().sqrt())
}

pub fn gen_noise(model: &NoiseModel, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if !model.varsigma.is_finite() || model.varsigma < 0.0 {
        return Err(Error::param("varsigma", "must be finite and >= 0"));
    }
    if n == 0 {
        return Err(Error::param("n", "must be positive"));
    }
    Ok(gaussian_vec(rng, n, model.varsigma / (n as f64).sqrt()))
}

/// `10 log10(peak^2 / mse)` with `peak = max |x|`.
pub fn psnr(peak: f64, mse: f64) -> f64 {
    10.0 * (peak * peak / mse).log10()
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseConfig {
    pub signal: SignalModel,
    pub noise: NoiseModel,
    pub kernel: KernelPreset,
    pub k: usize,
    /// Step size; `1/beta^2` when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    pub max_iters: usize,
    /// Initialization std of `C`; `init_scale ||y|| / (sqrt(n) beta)` when absent.
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCurvesConfig {
    pub target: SignalModel,
    pub model: ModelSpec,
    pub eta: f64,
    pub max_iters: usize,
    /// Per-coordinate MSE that counts as fitted.
    #[serde(default = "default_mse_threshold")]
    pub mse_threshold: f64,
}

fn default_mse_threshold() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Generator {
        kernel: KernelPreset,
        k: usize,
        omega: f64,
    },
    /// The decoder seed is replaced by the repetition seed.
    Decoder { config: DecoderConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralReportConfig {
    pub n: usize,
    pub kernels: Vec<KernelPreset>,
    /// Number of lowest frequencies for the mass fraction; `n / 8` when absent.
    #[serde(default)]
    pub low_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    Denoise(DenoiseConfig),
    FitCurves(FitCurvesConfig),
    SpectralReport(SpectralReportConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub experiment: Experiment,
}

fn default_repetitions() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::param("config", e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::param(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", cfg.schema_version),
            ));
        }
        if cfg.repetitions == 0 {
            return Err(Error::param("repetitions", "must be at least 1"));
        }
        Ok(cfg)
    }

    /// Pretty JSON with every default written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Seed of repetition `rep`.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, rep as u64)
    }
}

/// Seed for the network weights of a repetition, decorrelated from the data seed.
fn weight_seed(rep_seed: u64) -> u64 {
    rep_seed.rotate_left(32) ^ 0x5eed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSeed {
    pub seed: u64,
    pub stop_iter: usize,
    pub oracle_iter: usize,
    pub converged_iter: usize,
    /// `||G(C_tau) - x||^2` at the theory stopping time.
    pub mse_stop: f64,
    pub mse_oracle: f64,
    pub mse_converged: f64,
    /// `mse_stop / n`, the per-sample error that enters the PSNR.
    pub mean_sq_error_stop: f64,
    pub psnr_stop: f64,
    pub bound_value: f64,
    /// `(||G(C_tau) - x|| - bound) / ||y||`, the slack left to the unspecified constant.
    pub measured_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCurvesSeed {
    pub seed: u64,
    pub iters_structured: usize,
    pub iters_noise: usize,
    pub structured_reached: bool,
    pub noise_reached: bool,
    pub ratio: f64,
    /// Mean relative layer drift at the end of each fit (decoder only).
    pub drift_structured: Option<Vec<f64>>,
    pub drift_noise: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub kernel: KernelPreset,
    pub low_frequency_mass: f64,
    pub sigma: Vec<f64>,
    pub sigma_eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSeed {
    Denoise(Vec<DenoiseSeed>),
    FitCurves(Vec<FitCurvesSeed>),
    SpectralReport(Vec<KernelSummary>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub per_seed: PerSeed,
    pub median_mse_stop: Option<f64>,
    pub median_mse_converged: Option<f64>,
    pub bound_value: Option<f64>,
    pub median_ratio: Option<f64>,
    pub runtime_seconds: f64,
    /// Traces keyed by a short label, written as separate CSV files.
    #[serde(skip)]
    pub traces: Vec<(String, FitTrace)>,
}

impl ExperimentResult {
    /// Summary JSON without the wall-clock field, so reruns compare equal.
    pub fn to_json(&self, include_runtime: bool) -> String {
        let mut value = serde_json::to_value(self).expect("result serializes");
        if !include_runtime {
            if let Some(obj) = value.as_object_mut() {
                obj.remove("runtime_seconds");
            }
        }
        serde_json::to_string_pretty(&value).expect("json")
    }

    pub fn per_seed_csv(&self) -> String {
        let mut out = String::new();
        match &self.per_seed {
            PerSeed::Denoise(rows) => {
                out.push_str("seed,stop_iter,oracle_iter,converged_iter,mse_stop,mse_oracle,mse_converged,mean_sq_error_stop,psnr_stop,bound_value,measured_slack\n");
                for r in rows {
                    out.push_str(&format!(
                        "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                        r.seed,
                        r.stop_iter,
                        r.oracle_iter,
                        r.converged_iter,
                        r.mse_stop,
                        r.mse_oracle,
                        r.mse_converged,
                        r.mean_sq_error_stop,
                        r.psnr_stop,
                        r.bound_value,
                        r.measured_slack
                    ));
                }
            }
            PerSeed::FitCurves(rows) => {
                out.push_str("seed,iters_structured,iters_noise,structured_reached,noise_reached,ratio\n");
                for r in rows {
                    out.push_str(&format!(
                        "{},{},{},{},{},{:.17e}\n",
                        r.seed, r.iters_structured, r.iters_noise, r.structured_reached, r.noise_reached, r.ratio
                    ));
                }
            }
            PerSeed::SpectralReport(rows) => {
                out.push_str("kernel,index,sigma,sigma_squared,sigma_eigenvalue\n");
                for r in rows {
                    let name = kernel_label(&r.kernel);
                    for (i, (s, e)) in r.sigma.iter().zip(&r.sigma_eigenvalues).enumerate() {
                        out.push_str(&format!("{},{},{:.17e},{:.17e},{:.17e}\n", name, i + 1, s, s * s, e));
                    }
                }
            }
        }
        out
    }
}

pub fn kernel_label(k: &KernelPreset) -> String {
    match k {
        KernelPreset::Delta => "delta".into(),
        KernelPreset::Triangular { width } => format!("triangular_{width}"),
        KernelPreset::Gaussian { std } => format!("gaussian_{std}"),
        KernelPreset::Custom => "custom".into(),
    }
}

/// Fills in every default that does not depend on the drawn data.
///
/// The denoise `omega` stays rule-based (`init_scale`) because it scales with
/// each repetition's `||y||`.
pub fn resolve(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match &mut out.experiment {
        Experiment::Denoise(d) => {
            if d.eta.is_none() {
                let op = CirculantOperator::new(Kernel::from_preset(&d.kernel, d.signal.n)?);
                let beta = op.operator_norm();
                d.eta = Some(1.0 / (beta * beta));
            }
        }
        Experiment::SpectralReport(s) => {
            s.low_count.get_or_insert((s.n / 8).max(1));
        }
        Experiment::FitCurves(_) => {}
    }
    Ok(out)
}

/// Runs the experiment on its resolved configuration, which the result records.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let cfg = resolve(cfg)?;
    match &cfg.experiment {
        Experiment::Denoise(d) => run_denoise(&cfg, d),
        Experiment::FitCurves(f) => run_fit_curves(&cfg, f),
        Experiment::SpectralReport(s) => run_spectral_report(&cfg, s),
    }
}

fn denoise_one(d: &DenoiseConfig, seed: u64) -> Result<(DenoiseSeed, FitTrace)> {
    let n = d.signal.n;
    let mut rng = seeded(seed);
    let x = gen_signal(&d.signal, &mut rng)?;
    let z = gen_noise(&d.noise, n, &mut rng)?;
    let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
    let y_norm = norm2(&y);

    let kernel = Kernel::from_preset(&d.kernel, n)?;
    let op = CirculantOperator::new(kernel.clone());
    let beta = op.operator_norm();
    let eta = d.eta.unwrap_or(1.0 / (beta * beta));
    let omega = d.omega.unwrap_or(d.init_scale * GeneratorConfig::default_omega(y_norm, n, beta));
    let gcfg = GeneratorConfig {
        k: d.k,
        kernel: kernel.clone(),
        omega,
        seed: weight_seed(seed),
    };
    let state = GeneratorState::init(&gcfg)?;
    let gd = GdConfig {
        eta,
        max_iters: d.max_iters,
        record_spectrum: false,
    };
    let threshold = CONVERGENCE_TOL * y_norm * y_norm;
    let out = fit(&state, &y, &gd, &StoppingRule::LossThreshold(threshold), Some(&x))?;
    let trace = out.trace;

    let dual = dual_kernel(&kernel)?;
    let p = d.signal.p;
    let tau = stopping_time(p, n, eta, dual.get(p + 1))?;
    let last = trace.last().expect("at least one record");
    let at_stop = trace.record_at(tau).unwrap_or(last);
    let err = |r: &crate::trace::FitRecord| r.error_to_truth.expect("truth supplied").powi(2);
    let oracle_iter = trace.best_error_iter().expect("truth supplied");
    let mse_stop = err(at_stop);
    let mean_sq = mse_stop / n as f64;
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = denoising_bound(norm2(&x), p, n, d.noise.varsigma, eta, dual.get(p), tau, 0.0, y_norm)?;
    Ok((
        DenoiseSeed {
            seed,
            stop_iter: at_stop.iter,
            oracle_iter,
            converged_iter: last.iter,
            mse_stop,
            mse_oracle: err(trace.record_at(oracle_iter).expect("recorded")),
            mse_converged: err(last),
            mean_sq_error_stop: mean_sq,
            psnr_stop: psnr(peak, mean_sq),
            bound_value: bound,
            measured_slack: (mse_stop.sqrt() - bound) / y_norm,
        },
        trace,
    ))
}

pub fn run_denoise(cfg: &ExperimentConfig, d: &DenoiseConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let rows = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| denoise_one(d, cfg.rep_seed(rep)))
        .collect::<Result<Vec<_>>>()?;
    let stop: Vec<f64> = rows.iter().map(|(r, _)| r.mse_stop).collect();
    let conv: Vec<f64> = rows.iter().map(|(r, _)| r.mse_converged).collect();
    let bounds: Vec<f64> = rows.iter().map(|(r, _)| r.bound_value).collect();
    let (per_seed, traces): (Vec<_>, Vec<_>) = rows
        .into_iter()
        .map(|(r, t)| {
            let label = format!("seed_{}", r.seed);
            (r, (label, t))
        })
        .unzip();
    Ok(ExperimentResult {
        config: cfg.clone(),
        per_seed: PerSeed::Denoise(per_seed),
        median_mse_stop: Some(median(&stop)),
        median_mse_converged: Some(median(&conv)),
        bound_value: Some(median(&bounds)),
        median_ratio: None,
        runtime_seconds: start.elapsed().as_secs_f64(),
        traces,
    })
}

/// Outcome of fitting one target until the per-sample MSE reaches a threshold.
#[derive(Debug, Clone)]
pub struct ThresholdFit {
    pub iters: usize,
    pub reached: bool,
    pub trace: FitTrace,
}

/// Gradient descent on `target` until `||r||^2 / n <= mse_threshold` or `max_iters`.
pub fn iterations_to_threshold(model: &ModelSpec, target: &[f64], eta: f64, max_iters: usize, mse_threshold: f64, seed: u64) -> Result<ThresholdFit> {
    let n = target.len();
    let gd = GdConfig {
        eta,
        max_iters,
        record_spectrum: false,
    };
    let level = 0.5 * mse_threshold * n as f64;
    let stop = StoppingRule::LossThreshold(level);
    let trace = match model {
        ModelSpec::Generator { kernel, k, omega } => {
            let gcfg = GeneratorConfig {
                k: *k,
                kernel: Kernel::from_preset(kernel, n)?,
                omega: *omega,
                seed,
            };
            fit(&GeneratorState::init(&gcfg)?, target, &gd, &stop, None)?.trace
        }
        ModelSpec::Decoder { config } => {
            let mut c = config.clone();
            c.seed = seed;
            check_len(c.n_out, n)?;
            decoder_fit(&DecoderState::init(&c)?, target, &gd, &stop, None)?.trace
        }
    };
    let last = trace.last().expect("at least one record");
    Ok(ThresholdFit {
        iters: last.iter,
        reached: last.loss <= level,
        trace,
    })
}

fn mean_layer_drift(trace: &FitTrace) -> Option<Vec<f64>> {
    trace.last().and_then(|r| r.layer_drift.clone())
}

pub fn run_fit_curves(cfg: &ExperimentConfig, f: &FitCurvesConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let rows = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = cfg.rep_seed(rep);
            let mut rng = seeded(seed);
            let structured = gen_signal(&f.target, &mut rng)?;
            let noise = equal_norm_noise(&structured, &mut rng);
            let ws = weight_seed(seed);
            let a = iterations_to_threshold(&f.model, &structured, f.eta, f.max_iters, f.mse_threshold, ws)?;
            let b = iterations_to_threshold(&f.model, &noise, f.eta, f.max_iters, f.mse_threshold, ws)?;
            let row = FitCurvesSeed {
                seed,
                iters_structured: a.iters,
                iters_noise: b.iters,
                structured_reached: a.reached,
                noise_reached: b.reached,
                ratio: b.iters.max(1) as f64 / a.iters.max(1) as f64,
                drift_structured: mean_layer_drift(&a.trace),
                drift_noise: mean_layer_drift(&b.trace),
            };
            Ok((row, a.trace, b.trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = rows.iter().map(|(r, _, _)| r.ratio).collect();
    let mut traces = Vec::new();
    let mut per_seed = Vec::new();
    for (r, a, b) in rows {
        traces.push((format!("seed_{}_structured", r.seed), a));
        traces.push((format!("seed_{}_noise", r.seed), b));
        per_seed.push(r);
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        per_seed: PerSeed::FitCurves(per_seed),
        median_mse_stop: None,
        median_mse_converged: None,
        bound_value: None,
        median_ratio: Some(median(&ratios)),
        runtime_seconds: start.elapsed().as_secs_f64(),
        traces,
    })
}

/// Standard Gaussian vector rescaled to the norm of `target`.
pub fn equal_norm_noise(target: &[f64], rng: &mut Rng) -> Vec<f64> {
    let z = gaussian_vec(rng, target.len(), 1.0);
    let scale = norm2(target) / norm2(&z);
    z.iter().map(|v| v * scale).collect()
}

pub fn run_spectral_report(cfg: &ExperimentConfig, s: &SpectralReportConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let low = s.low_count.unwrap_or((s.n / 8).max(1));
    let per_seed = s
        .kernels
        .iter()
        .map(|preset| kernel_summary(preset, s.n, low))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        per_seed: PerSeed::SpectralReport(per_seed),
        median_mse_stop: None,
        median_mse_converged: None,
        bound_value: None,
        median_ratio: None,
        runtime_seconds: start.elapsed().as_secs_f64(),
        traces: Vec::new(),
    })
}

pub fn kernel_summary(preset: &KernelPreset, n: usize, low_count: usize) -> Result<KernelSummary> {
    let kernel = Kernel::from_preset(preset, n)?;
    let dual = dual_kernel(&kernel)?;
    let sigma = sigma_closed_form(&CirculantOperator::new(kernel))?;
    Ok(KernelSummary {
        kernel: preset.clone(),
        low_frequency_mass: dual.low_frequency_mass(low_count),
        sigma: dual.sigma().to_vec(),
        sigma_eigenvalues: circulant_eigenvalues_by_index(&sigma),
    })
}

/// Iterations until `|<w_i, r_tau>|` first drops to half its initial value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalvingPoint {
    pub index: usize,
    pub sigma: f64,
    pub iters: Option<usize>,
}

/// Fits `y = w_i` for each trig index and reports when its residual coefficient halves.
pub fn halving_iterations(
    kernel: &KernelPreset,
    n: usize,
    k: usize,
    omega: f64,
    eta: f64,
    indices: &[usize],
    max_iters: usize,
    seed: u64,
) -> Result<Vec<HalvingPoint>> {
    let kern = Kernel::from_preset(kernel, n)?;
    let dual = dual_kernel(&kern)?;
    let basis = TrigBasis::new(n)?;
    indices
        .par_iter()
        .map(|&i| {
            if i == 0 || i > n {
                return Err(Error::param("index", format!("trig index {i} outside 1..={n}")));
            }
            let y = basis.vector(i)?;
            let gcfg = GeneratorConfig {
                k,
                kernel: kern.clone(),
                omega,
                seed,
            };
            let mut state = GeneratorState::init(&gcfg)?;
            let r0 = coefficient(&basis, &state, &y, i)?;
            let mut iters = None;
            for tau in 1..=max_iters {
                let g = state.gradient(&y)?;
                *state.weights_mut() -= g * eta;
                if coefficient(&basis, &state, &y, i)?.abs() <= 0.5 * r0.abs() {
                    iters = Some(tau);
                    break;
                }
            }
            Ok(HalvingPoint {
                index: i,
                sigma: dual.get(i),
                iters,
            })
        })
        .collect()
}

fn coefficient(basis: &TrigBasis, state: &GeneratorState, y: &[f64], i: usize) -> Result<f64> {
    let g = state.forward()?;
    let r: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b).collect();
    let w = basis.vector(i)?;
    Ok(dot(&r, &w))
}
