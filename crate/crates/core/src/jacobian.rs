//! Dense Jacobians of the generators and the expected Jacobian Gram `Sigma(U)`.
//!
//! For `G(C) = relu(U C) v` the Jacobian with respect to `vec(C)` (column
//! major) is `n x nk`, with block `l` equal to `v_l diag(1{U c_l > 0}) U`.
//! Its Gram is `(A diag(v^2) A^T) . (U U^T)` where `A` is the activation
//! pattern; its expectation over Gaussian `C` is the arc-cosine kernel of the
//! rows of `U`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::generator::{GeneratorConfig, GeneratorState};
use crate::linalg::{spectral_norm, symmetric_eigen_desc, symmetric_operator_norm};
use crate::rng::derive_seed;
use crate::spectral::{dft, norm2, CirculantOperator, TrigBasis, CORRELATION_TOL};

/// Largest parameter count (`n k`) for a dense Jacobian.
pub const JACOBIAN_PARAM_BUDGET: usize = 1_000_000;
/// Largest number of stored entries for any dense Jacobian.
pub const JACOBIAN_ENTRY_BUDGET: usize = 1 << 27;
/// Confidence level used by every high-probability check.
pub const DEFAULT_DELTA: f64 = 0.05;

/// A model whose output Jacobian can be probed by vector-Jacobian products.
pub trait Differentiable {
    fn output_len(&self) -> usize;
    fn num_params(&self) -> usize;
    /// `J^T y`, flattened in the model's parameter order.
    fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>>;

    /// `J J^T`, assembled from one reverse pass per output coordinate.
    fn gram(&self) -> Result<DMatrix<f64>> {
        let j = jacobian_by_rows(self)?;
        Ok(&j * j.transpose())
    }
}

/// Dense `n_out x P` Jacobian built from reverse passes seeded with `e_r`.
pub fn jacobian_by_rows<M: Differentiable + ?Sized>(model: &M) -> Result<DMatrix<f64>> {
    let n = model.output_len();
    let p = model.num_params();
    if n.saturating_mul(p) > JACOBIAN_ENTRY_BUDGET {
        return Err(Error::BudgetExceeded {
            what: "dense Jacobian",
            needed: n * p,
            budget: JACOBIAN_ENTRY_BUDGET,
        });
    }
    let mut j = DMatrix::zeros(n, p);
    for r in 0..n {
        let mut e = vec![0.0; n];
        e[r] = 1.0;
        let row = model.vjp(&e)?;
        for (c, v) in row.into_iter().enumerate() {
            j[(r, c)] = v;
        }
    }
    Ok(j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ClosedForm,
    MonteCarlo { trials: usize, seed: u64 },
}

/// An `n x n` symmetric positive-semidefinite Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMatrix {
    matrix: DMatrix<f64>,
    provenance: Provenance,
}

impl SigmaMatrix {
    pub fn new(matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        Ok(Self { matrix, provenance })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (&self.matrix - self.matrix.transpose()).amax() <= tol
    }

    /// Entry `(i, j)` depends only on `(i - j) mod n`.
    pub fn is_circulant(&self, tol: f64) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..n).all(|j| (self.matrix[(i, j)] - self.matrix[((i + n - j) % n, 0)]).abs() <= tol))
    }

    /// Dense dump, one matrix row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.matrix.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// Arc-cosine kernel of the rows `u_i` of `U`:
/// `0.5 (1 - arccos(<u_i,u_j> / (|u_i||u_j|)) / pi) <u_i, u_j>`.
pub fn sigma_closed_form(op: &CirculantOperator) -> Result<SigmaMatrix> {
    let u = op.dense();
    let rows_gram = &u * u.transpose();
    let n = op.n();
    let norms: Vec<f64> = (0..n).map(|i| rows_gram[(i, i)].sqrt()).collect();
    if norms.iter().any(|&v| v == 0.0) {
        return Err(Error::param("U", "circulant has a zero row"));
    }
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let ip = rows_gram[(i, j)];
            let rho = ip / (norms[i] * norms[j]);
            if rho.abs() > 1.0 + CORRELATION_TOL {
                return Err(Error::CorrelationOutOfRange { value: rho });
            }
            // acos is ill-conditioned at 1; the diagonal is exactly correlated
            let rho = if i == j { 1.0 } else { rho.clamp(-1.0, 1.0) };
            s[(i, j)] = 0.5 * (1.0 - rho.acos() / PI) * ip;
        }
    }
    SigmaMatrix::new(s, Provenance::ClosedForm)
}

/// Eigenvalues in descending order and their eigenvectors (as columns).
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    /// Trig index of each eigenvector when produced by the circulant fast path.
    pub trig_index: Option<Vec<usize>>,
}

/// Circulant fast path when applicable, dense decomposition otherwise.
pub fn sigma_eigensystem(s: &SigmaMatrix) -> Result<EigenSystem> {
    let scale = s.matrix.amax().max(f64::MIN_POSITIVE);
    if s.n() % 2 == 0 && s.is_symmetric(1e-12 * scale) && s.is_circulant(1e-10 * scale) {
        return circulant_eigensystem(s);
    }
    dense_eigensystem(s)
}

/// Dense symmetric eigendecomposition; the slow oracle.
pub fn dense_eigensystem(s: &SigmaMatrix) -> Result<EigenSystem> {
    let scale = s.matrix.amax().max(f64::MIN_POSITIVE);
    if !s.is_symmetric(1e-12 * scale) {
        return Err(Error::param("S", "matrix is not symmetric"));
    }
    let (values, vectors) = symmetric_eigen_desc(&s.matrix);
    Ok(EigenSystem {
        values,
        vectors,
        trig_index: None,
    })
}

/// Eigenvalues from the DFT of the first column; eigenvectors are trig vectors.
pub fn circulant_eigensystem(s: &SigmaMatrix) -> Result<EigenSystem> {
    let n = s.n();
    let basis = TrigBasis::new(n)?;
    let first: Vec<f64> = s.matrix.column(0).iter().copied().collect();
    let spectrum = dft(&first);
    let mut order: Vec<usize> = (1..=n).collect();
    order.sort_by(|&a, &b| spectrum[b - 1].re.total_cmp(&spectrum[a - 1].re).then(a.cmp(&b)));
    let values = order.iter().map(|&i| spectrum[i - 1].re).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &DVector::from_vec(basis.vector(i)?));
    }
    Ok(EigenSystem {
        values,
        vectors,
        trig_index: Some(order),
    })
}

/// Eigenvalue of the circulant Gram paired with each trig index (index order).
pub fn circulant_eigenvalues_by_index(s: &SigmaMatrix) -> Vec<f64> {
    let first: Vec<f64> = s.matrix.column(0).iter().copied().collect();
    dft(&first).iter().map(|c| c.re).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    matrix: DMatrix<f64>,
}

impl JacobianMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn operator_norm(&self) -> f64 {
        spectral_norm(&self.matrix)
    }
}

fn check_budget(n: usize, k: usize) -> Result<()> {
    if n * k > JACOBIAN_PARAM_BUDGET || n * n * k > JACOBIAN_ENTRY_BUDGET {
        return Err(Error::BudgetExceeded {
            what: "generator Jacobian",
            needed: n * n * k,
            budget: JACOBIAN_ENTRY_BUDGET,
        });
    }
    Ok(())
}

/// Assembles `J(C)` block by block.
pub fn dense_jacobian(state: &GeneratorState) -> Result<JacobianMatrix> {
    let (n, k) = (state.n(), state.k());
    check_budget(n, k)?;
    let u = state.op().dense();
    let p = state.pre_activations();
    let mut j = DMatrix::zeros(n, n * k);
    for l in 0..k {
        let vl = state.signs()[l];
        for i in 0..n {
            if p[(i, l)] > 0.0 {
                for a in 0..n {
                    j[(i, l * n + a)] = vl * u[(i, a)];
                }
            }
        }
    }
    Ok(JacobianMatrix { matrix: j })
}

/// `J(C) J(C)^T = (A diag(v^2) A^T) . (U U^T)` without materializing `J`.
pub fn generator_gram(state: &GeneratorState) -> DMatrix<f64> {
    let (n, k) = (state.n(), state.k());
    let p = state.pre_activations();
    let mut weighted = DMatrix::zeros(n, k);
    let mut pattern = DMatrix::zeros(n, k);
    for l in 0..k {
        let w = state.signs()[l].powi(2);
        for i in 0..n {
            if p[(i, l)] > 0.0 {
                pattern[(i, l)] = 1.0;
                weighted[(i, l)] = w;
            }
        }
    }
    let u = state.op().dense();
    let uut = &u * u.transpose();
    (weighted * pattern.transpose()).component_mul(&uut)
}

impl Differentiable for GeneratorState {
    fn output_len(&self) -> usize {
        self.n()
    }

    fn num_params(&self) -> usize {
        self.n() * self.k()
    }

    fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), cotangent.len())?;
        let p = self.pre_activations();
        Ok(self.vjp_with_preacts(&p, cotangent).as_slice().to_vec())
    }

    fn gram(&self) -> Result<DMatrix<f64>> {
        Ok(generator_gram(self))
    }
}

/// Average of `J(C) J(C)^T` over `trials` draws seeded `seed + t`.
pub fn mc_expected_jjt(cfg: &GeneratorConfig, trials: usize) -> Result<SigmaMatrix> {
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    let grams = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut c = cfg.clone();
            c.seed = derive_seed(cfg.seed, t as u64);
            GeneratorState::init(&c).map(|s| generator_gram(&s))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.n();
    let mut mean = DMatrix::zeros(n, n);
    for g in &grams {
        mean += g;
    }
    mean /= trials as f64;
    SigmaMatrix::new(
        mean,
        Provenance::MonteCarlo {
            trials,
            seed: cfg.seed,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationGap {
    /// `||J(C) J(C)^T - Sigma(U)||_op`.
    pub gap: f64,
    /// `||U||^2 sqrt(log(2n/delta) sum_l v_l^4)`.
    pub bound: f64,
}

pub fn concentration_gap(state: &GeneratorState, delta: f64) -> Result<ConcentrationGap> {
    let sigma = sigma_closed_form(state.op())?;
    concentration_gap_with(state, &sigma, delta)
}

/// As [`concentration_gap`], reusing a precomputed `Sigma(U)`.
pub fn concentration_gap_with(state: &GeneratorState, sigma: &SigmaMatrix, delta: f64) -> Result<ConcentrationGap> {
    let (n, k) = (state.n(), state.k());
    check_budget(n, k)?;
    check_len(n, sigma.n())?;
    let diff = generator_gram(state) - sigma.matrix();
    let gap = symmetric_operator_norm(&diff);
    let v4: f64 = state.signs().iter().map(|v| v.powi(4)).sum();
    let beta = state.op().operator_norm();
    let bound = beta * beta * ((2.0 * n as f64 / delta).ln() * v4).sqrt();
    Ok(ConcentrationGap { gap, bound })
}

/// `omega sqrt(8 log(2n/delta)) ||U||_F`.
pub fn initial_output_bound(cfg: &GeneratorConfig, delta: f64) -> f64 {
    let op = CirculantOperator::new(cfg.kernel.clone());
    cfg.omega * (8.0 * (2.0 * cfg.n() as f64 / delta).ln()).sqrt() * op.frobenius_norm()
}

/// Fraction of draws (seeds `seed + t`) with `||G(C_0)||` within [`initial_output_bound`].
pub fn initial_output_check(cfg: &GeneratorConfig, trials: usize, delta: f64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    let bound = initial_output_bound(cfg, delta);
    let hits = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut c = cfg.clone();
            c.seed = derive_seed(cfg.seed, t as u64);
            let g = GeneratorState::init(&c)?.forward()?;
            Ok(norm2(&g) <= bound)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / trials as f64)
}

/// `||J(C_a) - J(C_b)||_op` via the Gram of the difference.
pub fn perturbation_gap(a: &GeneratorState, b: &GeneratorState) -> Result<f64> {
    check_len(a.n(), b.n())?;
    check_len(a.k(), b.k())?;
    if a.op().kernel() != b.op().kernel() {
        return Err(Error::param("state_b", "states use different kernels"));
    }
    let (n, k) = (a.n(), a.k());
    check_budget(n, k)?;
    let pa = a.pre_activations();
    let pb = b.pre_activations();
    let mut diff = DMatrix::zeros(n, k);
    for l in 0..k {
        for i in 0..n {
            let da = if pa[(i, l)] > 0.0 { 1.0 } else { 0.0 };
            let db = if pb[(i, l)] > 0.0 { 1.0 } else { 0.0 };
            diff[(i, l)] = da - db;
        }
    }
    let mut weighted = diff.clone();
    for l in 0..k {
        let w = a.signs()[l].powi(2);
        weighted.column_mut(l).iter_mut().for_each(|x| *x *= w);
    }
    let u = a.op().dense();
    let gram = (weighted * diff.transpose()).component_mul(&(&u * u.transpose()));
    Ok(symmetric_operator_norm(&gram).max(0.0).sqrt())
}

/// `||J^T y||`, computed with a single reverse pass.
pub fn alignment<M: Differentiable + ?Sized>(model: &M, y: &[f64]) -> Result<f64> {
    check_len(model.output_len(), y.len())?;
    Ok(norm2(&model.vjp(y)?))
}

/// Largest `|<vec, w_j>|` over trig indices, with its index.
pub fn best_trig_match(basis: &TrigBasis, vec: &[f64]) -> Result<(usize, f64)> {
    let coeffs = basis.analyze(vec)?;
    let norm = norm2(vec).max(f64::MIN_POSITIVE);
    let (idx, val) = coeffs
        .iter()
        .enumerate()
        .map(|(i, c)| (i + 1, c.abs() / norm))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("nonempty basis");
    Ok((idx, val))
}

/// Singular spectrum of a Jacobian at one checkpoint.
#[derive(Debug, Clone)]
pub struct SpectrumCheckpoint {
    pub iter: usize,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    /// Top left singular vectors as columns.
    pub vectors: DMatrix<f64>,
    /// `(trig index, |correlation|)` of the best match for each top vector.
    pub best_trig: Vec<(usize, f64)>,
}

impl SpectrumCheckpoint {
    /// CSV `rank,singular_value,best_trig_index,correlation`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,singular_value,best_trig_index,correlation\n");
        for (s, (idx, corr)) in self.best_trig.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{:.17e},{},{:.17e}",
                s + 1,
                self.singular_values[s],
                idx,
                corr
            );
        }
        out
    }

    /// `|<a_s, b_s>|` for matching ranks of two checkpoints.
    pub fn correlations_with(&self, other: &SpectrumCheckpoint) -> Vec<f64> {
        let s = self.vectors.ncols().min(other.vectors.ncols());
        (0..s).map(|i| self.vectors.column(i).dot(&other.vectors.column(i)).abs()).collect()
    }
}

/// Left singular structure of the Jacobian at each checkpoint.
pub fn svd_track<M: Differentiable + Sync>(checkpoints: &[(usize, &M)], top_s: usize) -> Result<Vec<SpectrumCheckpoint>> {
    checkpoints
        .iter()
        .map(|(iter, model)| {
            let n = model.output_len();
            let basis = TrigBasis::new(n)?;
            let gram = model.gram()?;
            let (values, vectors) = symmetric_eigen_desc(&gram);
            let s = top_s.min(n);
            let top = vectors.columns(0, s).into_owned();
            let best_trig = (0..s)
                .map(|c| best_trig_match(&basis, top.column(c).as_slice()))
                .collect::<Result<Vec<_>>>()?;
            Ok(SpectrumCheckpoint {
                iter: *iter,
                singular_values: values.iter().map(|v| v.max(0.0).sqrt()).collect(),
                vectors: top,
                best_trig,
            })
        })
        .collect()
}
