//! Per-iteration records of a gradient-descent fit, shared by both generators.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Step size, iteration budget and recording options for plain gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdConfig {
    pub eta: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub record_spectrum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub iter: usize,
    pub loss: f64,
    pub residual_norm: f64,
    pub error_to_truth: Option<f64>,
    pub weight_drift: f64,
    /// `<w_i, y - G(C_tau)>` in trig-index order, when requested.
    pub coefficients: Option<Vec<f64>>,
    /// Relative per-layer drift (decoder fits only).
    pub layer_drift: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub records: Vec<FitRecord>,
    /// Iteration selected by the stopping rule.
    pub stop_iter: usize,
    /// Non-fatal warnings, e.g. a step size above `1/beta^2`.
    pub diagnostics: Vec<String>,
}

fn fmt_f(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.17e}");
}

impl FitTrace {
    pub fn record_at(&self, iter: usize) -> Option<&FitRecord> {
        self.records.iter().find(|r| r.iter == iter)
    }

    pub fn last(&self) -> Option<&FitRecord> {
        self.records.last()
    }

    /// Iteration with the smallest distance to the ground truth.
    pub fn best_error_iter(&self) -> Option<usize> {
        self.records
            .iter()
            .filter_map(|r| r.error_to_truth.map(|e| (r.iter, e)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// First iteration whose loss is at most `threshold`.
    pub fn first_loss_below(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.loss <= threshold).map(|r| r.iter)
    }

    /// CSV with columns `iter,loss,residual_norm,error_to_truth,weight_drift`,
    /// then `coef_1..coef_n` and `drift_layer_1..drift_layer_d` when recorded.
    pub fn to_csv(&self) -> String {
        let n_coef = self
            .records
            .iter()
            .find_map(|r| r.coefficients.as_ref().map(Vec::len))
            .unwrap_or(0);
        let n_layer = self
            .records
            .iter()
            .find_map(|r| r.layer_drift.as_ref().map(Vec::len))
            .unwrap_or(0);
        let mut out = String::from("iter,loss,residual_norm,error_to_truth,weight_drift");
        for i in 1..=n_coef {
            let _ = write!(out, ",coef_{i}");
        }
        for i in 1..=n_layer {
            let _ = write!(out, ",drift_layer_{i}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},", r.iter);
            fmt_f(&mut out, r.loss);
            out.push(',');
            fmt_f(&mut out, r.residual_norm);
            out.push(',');
            if let Some(e) = r.error_to_truth {
                fmt_f(&mut out, e);
            }
            out.push(',');
            fmt_f(&mut out, r.weight_drift);
            for extra in [&r.coefficients, &r.layer_drift] {
                if let Some(values) = extra {
                    for v in values {
                        out.push(',');
                        fmt_f(&mut out, *v);
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
