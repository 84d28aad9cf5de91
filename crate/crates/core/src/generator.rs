//! The two-layer convolutional generator `G(C) = relu(U C) v`.
//!
//! `C` is `n x k`, `U` is the circulant of a fixed filter and `v` holds
//! `+1/sqrt(k)` on the first half of the channels and `-1/sqrt(k)` on the rest.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dynamics;
use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::spectral::{dual_kernel, norm2, CirculantOperator, Kernel, TrigBasis};
use crate::trace::{FitRecord, FitTrace, GdConfig};

/// Column work is split across threads above this many entries of `C`.
const PARALLEL_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub k: usize,
    pub kernel: Kernel,
    /// Standard deviation of the iid Gaussian initialization of `C`.
    pub omega: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn n(&self) -> usize {
        self.kernel.n()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k % 2 != 0 {
            return Err(Error::param("k", format!("channel count must be even and >= 2, got {}", self.k)));
        }
        if !self.omega.is_finite() || self.omega <= 0.0 {
            return Err(Error::param("omega", format!("must be finite and > 0, got {}", self.omega)));
        }
        Ok(())
    }

    /// `||y|| / (sqrt(n) beta)`, the initialization scale used when the
    /// caller does not supply one.
    pub fn default_omega(y_norm: f64, n: usize, beta: f64) -> f64 {
        y_norm / ((n as f64).sqrt() * beta)
    }
}

/// Fixed output weights `(1, .., 1, -1, .., -1) / sqrt(k)`.
pub fn balanced_signs(k: usize) -> Vec<f64> {
    let s = 1.0 / (k as f64).sqrt();
    (0..k).map(|l| if l < k / 2 { s } else { -s }).collect()
}

#[derive(Debug, Clone)]
pub struct GeneratorState {
    c: DMatrix<f64>,
    v: Vec<f64>,
    op: Arc<CirculantOperator>,
}

/// Stopping rules for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub enum StoppingRule {
    /// Run exactly this many iterations.
    Fixed(usize),
    /// Stop at `floor(log(1 - sqrt(p/n)) / log(1 - eta sigma_{p+1}^2))`, at least 1.
    Theory { p: usize },
    /// Run `max_iters` and select the iterate closest to the ground truth.
    OracleBest,
    /// Stop once the loss drops to the threshold, or at `max_iters`.
    LossThreshold(f64),
}

/// Result of [`fit`]: the trace and the state at the selected stop.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub trace: FitTrace,
    pub state: GeneratorState,
}

/// `relu(P) v` for pre-activations `P`.
fn output_from_preacts(p: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let n = p.nrows();
    let mut out = vec![0.0; n];
    for (col, &vl) in p.column_iter().zip(v) {
        for (o, &a) in out.iter_mut().zip(col.iter()) {
            if a > 0.0 {
                *o += vl * a;
            }
        }
    }
    out
}

impl GeneratorState {
    /// Draws `C_0` with iid `N(0, omega^2)` entries from the configured seed.
    pub fn init(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n();
        let mut rng = rng::seeded(cfg.seed);
        let data = rng::gaussian_vec(&mut rng, n * cfg.k, cfg.omega);
        Ok(Self {
            c: DMatrix::from_vec(n, cfg.k, data),
            v: balanced_signs(cfg.k),
            op: Arc::new(CirculantOperator::new(cfg.kernel.clone())),
        })
    }

    /// Builds a state around explicit weights.
    pub fn from_weights(c: DMatrix<f64>, op: Arc<CirculantOperator>) -> Result<Self> {
        check_len(op.n(), c.nrows())?;
        let k = c.ncols();
        if k < 2 || k % 2 != 0 {
            return Err(Error::param("k", format!("channel count must be even and >= 2, got {k}")));
        }
        Ok(Self {
            v: balanced_signs(k),
            c,
            op,
        })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn k(&self) -> usize {
        self.c.ncols()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.c
    }

    pub fn signs(&self) -> &[f64] {
        &self.v
    }

    pub fn op(&self) -> &CirculantOperator {
        &self.op
    }

    pub fn op_arc(&self) -> Arc<CirculantOperator> {
        Arc::clone(&self.op)
    }

    fn check_finite(&self) -> Result<()> {
        if self.c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generator weights"));
        }
        Ok(())
    }

    /// `U C`.
    pub fn pre_activations(&self) -> DMatrix<f64> {
        let n = self.n();
        let k = self.k();
        if n * k < PARALLEL_THRESHOLD {
            return self.op.apply_columns(&self.c, false);
        }
        let cols: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|l| self.op.apply(self.c.column(l).as_slice()))
            .collect();
        DMatrix::from_vec(n, k, cols.concat())
    }

    /// `G(C) = relu(U C) v`.
    pub fn forward(&self) -> Result<Vec<f64>> {
        self.check_finite()?;
        Ok(output_from_preacts(&self.pre_activations(), &self.v))
    }

    /// `0.5 ||y - G(C)||^2`.
    pub fn loss(&self, y: &[f64]) -> Result<f64> {
        check_len(self.n(), y.len())?;
        let g = self.forward()?;
        Ok(0.5 * g.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    /// `J^T(C) r` reshaped to `n x k`: column `l` is `v_l U^T (r . 1{(U c_l) > 0})`.
    pub fn vjp_with_preacts(&self, preacts: &DMatrix<f64>, r: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let k = self.k();
        let column = |l: usize| -> Vec<f64> {
            let vl = self.v[l];
            let masked: Vec<f64> = preacts
                .column(l)
                .iter()
                .zip(r)
                .map(|(&a, &ri)| if a > 0.0 { ri } else { 0.0 })
                .collect();
            let mut g = self.op.apply_transpose(&masked);
            g.iter_mut().for_each(|x| *x *= vl);
            g
        };
        let cols: Vec<Vec<f64>> = if n * k < PARALLEL_THRESHOLD {
            (0..k).map(column).collect()
        } else {
            (0..k).into_par_iter().map(column).collect()
        };
        DMatrix::from_vec(n, k, cols.concat())
    }

    /// Gradient of `0.5 ||y - G(C)||^2` with respect to `C`.
    pub fn gradient(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        check_len(self.n(), y.len())?;
        self.check_finite()?;
        let p = self.pre_activations();
        let g = output_from_preacts(&p, &self.v);
        let r: Vec<f64> = g.iter().zip(y).map(|(a, b)| a - b).collect();
        Ok(self.vjp_with_preacts(&p, &r))
    }
}

/// Number of iterations selected by the stopping rule, before running.
fn planned_iters(state: &GeneratorState, gd: &GdConfig, stop: &StoppingRule) -> Result<usize> {
    match *stop {
        StoppingRule::Fixed(t) => Ok(t),
        StoppingRule::Theory { p } => {
            let n = state.n();
            if p == 0 || p >= n {
                return Err(Error::param("p", format!("theory stopping needs 0 < p < n, got p = {p}")));
            }
            let sigma = dual_kernel(state.op.kernel())?;
            dynamics::stopping_time(p, n, gd.eta, sigma.get(p + 1))
        }
        StoppingRule::OracleBest | StoppingRule::LossThreshold(_) => Ok(gd.max_iters),
    }
}

/// Plain gradient descent `C <- C - eta grad L(C)` on `0.5 ||y - G(C)||^2`.
///
/// Every iterate from 0 to the stop is recorded. `truth` enables the
/// error-to-truth column and is required by [`StoppingRule::OracleBest`].
pub fn fit(
    state: &GeneratorState,
    y: &[f64],
    gd: &GdConfig,
    stop: &StoppingRule,
    truth: Option<&[f64]>,
) -> Result<FitOutcome> {
    let n = state.n();
    check_len(n, y.len())?;
    if let Some(x) = truth {
        check_len(n, x.len())?;
    }
    if !gd.eta.is_finite() || gd.eta < 0.0 {
        return Err(Error::param("eta", format!("must be finite and >= 0, got {}", gd.eta)));
    }
    if matches!(stop, StoppingRule::OracleBest) && truth.is_none() {
        return Err(Error::param("stop", "oracle-best stopping requires the ground truth"));
    }
    let iters = planned_iters(state, gd, stop)?;
    let basis = if gd.record_spectrum {
        Some(TrigBasis::new(n)?)
    } else {
        None
    };

    let mut trace = FitTrace::default();
    let beta = state.op.operator_norm();
    if gd.eta > 1.0 / (beta * beta) {
        trace.diagnostics.push(format!(
            "step size {} exceeds 1/beta^2 = {}",
            gd.eta,
            1.0 / (beta * beta)
        ));
    }

    let c0 = state.c.clone();
    let mut cur = state.clone();
    let mut best: Option<(f64, GeneratorState)> = None;

    for tau in 0..=iters {
        cur.check_finite()?;
        let p = cur.pre_activations();
        let g = output_from_preacts(&p, &cur.v);
        let r: Vec<f64> = g.iter().zip(y).map(|(a, b)| a - b).collect();
        let residual_norm = norm2(&r);
        let loss = 0.5 * residual_norm * residual_norm;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at iteration {tau}")));
        }
        let error_to_truth = truth.map(|x| {
            g.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        });
        let coefficients = match &basis {
            Some(b) => {
                let neg: Vec<f64> = r.iter().map(|v| -v).collect();
                Some(b.analyze(&neg)?)
            }
            None => None,
        };
        trace.records.push(FitRecord {
            iter: tau,
            loss,
            residual_norm,
            error_to_truth,
            weight_drift: (&cur.c - &c0).norm(),
            coefficients,
            layer_drift: None,
        });
        if matches!(stop, StoppingRule::OracleBest) {
            let e = error_to_truth.expect("checked above");
            if best.as_ref().is_none_or(|(b, _)| e < *b) {
                best = Some((e, cur.clone()));
            }
        }
        if let StoppingRule::LossThreshold(level) = *stop {
            if loss <= level {
                trace.stop_iter = tau;
                return Ok(FitOutcome { trace, state: cur });
            }
        }
        if tau == iters {
            break;
        }
        let grad = cur.vjp_with_preacts(&p, &r);
        cur.c -= grad * gd.eta;
    }

    match best {
        Some((_, best_state)) => {
            trace.stop_iter = trace.best_error_iter().unwrap_or(0);
            Ok(FitOutcome {
                trace,
                state: best_state,
            })
        }
        None => {
            trace.stop_iter = iters;
            Ok(FitOutcome { trace, state: cur })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::KernelPreset;

    fn cfg(n: usize, k: usize, preset: KernelPreset, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            k,
            kernel: Kernel::from_preset(&preset, n).unwrap(),
            omega: 1.0,
            seed,
        }
    }

    #[test]
    fn init_contract() {
        let c = cfg(8, 4, KernelPreset::Delta, 3);
        let s = GeneratorState::init(&c).unwrap();
        assert_eq!(s.signs(), &[0.5, 0.5, -0.5, -0.5]);
        let again = GeneratorState::init(&c).unwrap();
        assert_eq!(s.weights(), again.weights());
        let sum: f64 = s.signs().iter().sum();
        assert_eq!(sum, 0.0);
        let mut bad = c.clone();
        bad.omega = 0.0;
        assert!(GeneratorState::init(&bad).is_err());
        bad = c.clone();
        bad.k = 3;
        assert!(GeneratorState::init(&bad).is_err());
    }

    #[test]
    fn forward_examples() {
        let op = Arc::new(CirculantOperator::new(Kernel::from_preset(&KernelPreset::Delta, 8).unwrap()));
        let s = GeneratorState::from_weights(DMatrix::from_element(8, 4, 0.7), op.clone()).unwrap();
        assert!(s.forward().unwrap().iter().all(|v| v.abs() < 1e-15));

        let mut c = DMatrix::zeros(8, 2);
        let c1: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        c.set_column(0, &nalgebra::DVector::from_vec(c1.clone()));
        let s = GeneratorState::from_weights(c, op).unwrap();
        for (o, e) in s.forward().unwrap().iter().zip(&c1) {
            assert!((o - e / 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_per_entry_oracle() {
        let s = GeneratorState::init(&cfg(8, 4, KernelPreset::Triangular { width: 3 }, 11)).unwrap();
        let u = s.op().dense();
        let uc = &u * s.weights();
        let out = s.forward().unwrap();
        for i in 0..8 {
            let expect: f64 = (0..4).map(|l| s.signs()[l] * uc[(i, l)].max(0.0)).sum();
            assert!((out[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let s = GeneratorState::init(&cfg(8, 4, KernelPreset::Triangular { width: 3 }, 5)).unwrap();
        let g = s.forward().unwrap();
        assert_eq!(s.loss(&g).unwrap(), 0.0);
        let op = s.op_arc();
        let dead = GeneratorState::from_weights(DMatrix::from_element(8, 4, -1.0), op).unwrap();
        let w1 = TrigBasis::new(8).unwrap().vector(1).unwrap();
        assert!((dead.loss(&w1).unwrap() - 0.5).abs() < 1e-15);
        assert!(s.loss(&[0.0; 7]).is_err());
    }

    #[test]
    fn gradient_edge_cases() {
        let s = GeneratorState::init(&cfg(8, 4, KernelPreset::Triangular { width: 3 }, 9)).unwrap();
        let g = s.forward().unwrap();
        assert!(s.gradient(&g).unwrap().iter().all(|v| *v == 0.0));
        let dead = GeneratorState::from_weights(DMatrix::from_element(8, 4, -1.0), s.op_arc()).unwrap();
        assert!(dead.gradient(&[1.0; 8]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_step_keeps_weights() {
        let s = GeneratorState::init(&cfg(8, 4, KernelPreset::Triangular { width: 3 }, 1)).unwrap();
        let y = vec![0.3; 8];
        let gd = GdConfig {
            eta: 0.0,
            max_iters: 5,
            record_spectrum: false,
        };
        let out = fit(&s, &y, &gd, &StoppingRule::Fixed(5), None).unwrap();
        assert_eq!(out.trace.records.len(), 6);
        assert_eq!(out.state.weights(), s.weights());
        let l0 = out.trace.records[0].loss;
        assert!(out.trace.records.iter().all(|r| r.loss == l0));
    }

    #[test]
    fn fit_errors() {
        let s = GeneratorState::init(&cfg(8, 4, KernelPreset::Triangular { width: 3 }, 1)).unwrap();
        let gd = GdConfig {
            eta: 0.01,
            max_iters: 5,
            record_spectrum: false,
        };
        let y = vec![0.1; 8];
        assert!(fit(&s, &y, &gd, &StoppingRule::OracleBest, None).is_err());
        assert!(fit(&s, &y, &gd, &StoppingRule::Theory { p: 8 }, None).is_err());
        let big = GdConfig { eta: 10.0, ..gd };
        let out = fit(&s, &y, &big, &StoppingRule::Fixed(1), None).unwrap();
        assert_eq!(out.trace.diagnostics.len(), 1);
    }

    #[test]
    fn oracle_best_is_minimum() {
        let s = GeneratorState::init(&cfg(16, 8, KernelPreset::Triangular { width: 5 }, 2)).unwrap();
        let x: Vec<f64> = TrigBasis::new(16).unwrap().vector(2).unwrap();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + 0.05 * ((i * 7) as f64).sin()).collect();
        let beta = s.op().operator_norm();
        let gd = GdConfig {
            eta: 1.0 / (beta * beta),
            max_iters: 60,
            record_spectrum: true,
        };
        let out = fit(&s, &y, &gd, &StoppingRule::OracleBest, Some(&x)).unwrap();
        let best = out.trace.record_at(out.trace.stop_iter).unwrap().error_to_truth.unwrap();
        assert!(out.trace.records.iter().all(|r| r.error_to_truth.unwrap() >= best));
        let g = out.state.forward().unwrap();
        let e = g.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((e - best).abs() < 1e-12);
    }
}
