//! Closed-form degradation estimation learned by Gaussian-process
//! regression with a degree-two polynomial kernel, together with the exact
//! quadratic expansion consumed by the portfolio optimizer.
//!
//! The learned function is `g(d) = sum_i rho_i * tau^2 (beta + a_i.d /
//! l^2)^2`, which expands exactly into `c0 + q.d + d'Qd`. `Q` inherits the
//! sign of the weights, so it is not positive semidefinite in general;
//! [`psd_project`] repairs it for the optimizer while accuracy work keeps
//! the raw model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::degradation::{DatasetMeta, DegradationDataset};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("target {index} is not finite")]
    NonFiniteTarget { index: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("Gram matrix not positive definite after max jitter (n = {size}, trace = {trace:.3e}, jitter tried = {jitter_tried:.3e}, condition estimate = {condition_estimate:.3e})")]
    GramNotPositiveDefinite { size: usize, trace: f64, jitter_tried: f64, condition_estimate: f64 },
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model serialization: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("unsupported model format version {found} (supported: {supported})")]
    UnsupportedFormatVersion { found: u32, supported: u32 },
}

/// Kernel and noise hyperparameters of the degradation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefHyperParams {
    /// Output scale tau (> 0).
    pub tau: f64,
    /// Kernel offset beta (>= 0).
    pub beta: f64,
    /// Input lengthscale (> 0), same unit as the dispatch (kW).
    pub lengthscale: f64,
    /// Observation noise standard deviation (>= 0).
    pub noise_sd: f64,
}

impl DefHyperParams {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(GpError::InvalidHyperParams(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(GpError::InvalidHyperParams(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(GpError::InvalidHyperParams(format!(
                "lengthscale must be > 0, got {}",
                self.lengthscale
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(GpError::InvalidHyperParams(format!(
                "noise_sd must be >= 0, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }
}

impl Default for DefHyperParams {
    fn default() -> Self {
        Self { tau: 1.0, beta: 0.1, lengthscale: 100.0, noise_sd: 1e-3 }
    }
}

/// Options for [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Local searches started from random points in the hyperparameter box
    /// (the provided init is always one of the candidates).
    pub multistarts: usize,
    /// Likelihood evaluations allowed per local search; 0 keeps the init.
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { multistarts: 8, max_evals: 200, seed: 0 }
    }
}

/// Degree-two polynomial kernel Gram matrix:
/// `k(x, y) = tau^2 (beta + x.y / l^2)^2` entrywise.
pub fn kernel(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    hp: &DefHyperParams,
) -> Result<DMatrix<f64>, GpError> {
    if x1.ncols() != x2.ncols() {
        return Err(GpError::DimensionMismatch { expected: x1.ncols(), got: x2.ncols() });
    }
    let tau2 = hp.tau * hp.tau;
    let inv_l2 = 1.0 / (hp.lengthscale * hp.lengthscale);
    let mut gram = DMatrix::zeros(x1.nrows(), x2.nrows());
    for i in 0..x1.nrows() {
        for j in 0..x2.nrows() {
            let dot = x1.row(i).dot(&x2.row(j));
            let base = hp.beta + dot * inv_l2;
            gram[(i, j)] = tau2 * base * base;
        }
    }
    Ok(gram)
}

/// Trained degradation estimation function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefModel {
    pub hyper: DefHyperParams,
    /// Design matrix A, one aggregated dispatch per row (N x H, kW).
    pub design: DMatrix<f64>,
    /// Weights rho = (K + noise^2 I)^-1 psi.
    pub weights: DVector<f64>,
    /// Training targets psi (kWh).
    pub targets: DVector<f64>,
    pub meta: DatasetMeta,
    pub log_marginal: f64,
    /// Diagonal jitter added to make the Gram factorization succeed.
    pub jitter: f64,
}

impl DefModel {
    pub fn horizon(&self) -> usize {
        self.design.ncols()
    }

    /// Mean prediction `g(d) = k(A, d)' rho` in kWh.
    pub fn predict(&self, dispatch_kw: &[f64]) -> Result<f64, GpError> {
        if dispatch_kw.len() != self.horizon() {
            return Err(GpError::DimensionMismatch {
                expected: self.horizon(),
                got: dispatch_kw.len(),
            });
        }
        let tau2 = self.hyper.tau * self.hyper.tau;
        let inv_l2 = 1.0 / (self.hyper.lengthscale * self.hyper.lengthscale);
        let mut acc = 0.0;
        for i in 0..self.design.nrows() {
            let mut dot = 0.0;
            for (h, &d) in dispatch_kw.iter().enumerate() {
                dot += self.design[(i, h)] * d;
            }
            let base = self.hyper.beta + dot * inv_l2;
            acc += tau2 * base * base * self.weights[i];
        }
        Ok(acc)
    }

    /// Exact expansion of the prediction into `c0 + q.d + d'Qd`.
    pub fn to_quadratic(&self) -> QuadraticForm {
        let tau2 = self.hyper.tau * self.hyper.tau;
        let l2 = self.hyper.lengthscale * self.hyper.lengthscale;
        let mut scaled = self.design.clone();
        for i in 0..scaled.nrows() {
            let w = self.weights[i];
            scaled.row_mut(i).scale_mut(w);
        }
        let mut quadratic = (self.design.transpose() * &scaled) * (tau2 / (l2 * l2));
        // Symmetrize: a'b and b'a accumulate in different rounding order.
        let sym = (&quadratic + quadratic.transpose()) * 0.5;
        quadratic = sym;
        let linear = (self.design.transpose() * &self.weights) * (2.0 * tau2 * self.hyper.beta / l2);
        let constant = tau2 * self.hyper.beta * self.hyper.beta * self.weights.sum();
        QuadraticForm {
            quadratic,
            linear,
            constant,
            psd_projected: false,
            max_clipped_eigenvalue: 0.0,
        }
    }
}

/// The exact quadratic expansion of a trained model: kWh as a function of
/// the signed dispatch vector in kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticForm {
    /// Symmetric H x H matrix (kWh / kW^2).
    pub quadratic: DMatrix<f64>,
    /// Linear coefficients (kWh / kW).
    pub linear: DVector<f64>,
    /// Constant offset (kWh).
    pub constant: f64,
    /// Set once the matrix has been projected to the PSD cone.
    pub psd_projected: bool,
    /// Largest eigenvalue shift applied by the projection (0 if none).
    pub max_clipped_eigenvalue: f64,
}

impl QuadraticForm {
    pub fn zero(horizon: usize) -> Self {
        Self {
            quadratic: DMatrix::zeros(horizon, horizon),
            linear: DVector::zeros(horizon),
            constant: 0.0,
            psd_projected: true,
            max_clipped_eigenvalue: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.linear.len()
    }

    pub fn evaluate(&self, dispatch_kw: &[f64]) -> f64 {
        let h = self.horizon();
        assert_eq!(dispatch_kw.len(), h, "dispatch length must match the form");
        let mut acc = self.constant;
        for a in 0..h {
            acc += self.linear[a] * dispatch_kw[a];
            for b in 0..h {
                acc += dispatch_kw[a] * self.quadratic[(a, b)] * dispatch_kw[b];
            }
        }
        acc
    }

    /// Restriction to the leading `horizon` intervals: the value of the
    /// form on dispatches whose remaining entries are zero.
    pub fn truncated(&self, horizon: usize) -> Self {
        assert!(horizon <= self.horizon());
        Self {
            quadratic: self.quadratic.view((0, 0), (horizon, horizon)).into_owned(),
            linear: self.linear.rows(0, horizon).into_owned(),
            constant: self.constant,
            psd_projected: self.psd_projected,
            max_clipped_eigenvalue: self.max_clipped_eigenvalue,
        }
    }

    pub fn symmetry_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.horizon() {
            for b in 0..a {
                worst = worst.max((self.quadratic[(a, b)] - self.quadratic[(b, a)]).abs());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.horizon() == 0 {
            return 0.0;
        }
        let eig = self.quadratic.clone().symmetric_eigenvalues();
        eig.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Clips eigenvalues of the quadratic term below `eps` up to `eps` and
/// rebuilds the form, recording the largest shift applied. Forms that are
/// already PSD at the tolerance are returned unchanged, which makes the
/// projection idempotent.
pub fn psd_project(form: &QuadraticForm, eps: f64) -> QuadraticForm {
    assert!(eps >= 0.0, "eps must be non-negative");
    let h = form.horizon();
    if h == 0 {
        let mut out = form.clone();
        out.psd_projected = true;
        return out;
    }
    let eig = nalgebra::SymmetricEigen::new(form.quadratic.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
    let clip_tol = 1e-14 * scale;
    let mut max_shift = 0.0f64;
    for &v in eig.eigenvalues.iter() {
        if v < eps - clip_tol {
            max_shift = max_shift.max(eps - v);
        }
    }
    if max_shift == 0.0 {
        let mut out = form.clone();
        out.psd_projected = true;
        return out;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(eps));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let symmetric = (&rebuilt + rebuilt.transpose()) * 0.5;
    QuadraticForm {
        quadratic: symmetric,
        linear: form.linear.clone(),
        constant: form.constant,
        psd_projected: true,
        max_clipped_eigenvalue: max_shift,
    }
}

/// Explicit feature map of the degree-two polynomial kernel, used for an
/// exact low-rank marginal likelihood at large N. The feature dimension is
/// r = 1 + H + H(H+1)/2 and `phi(x).phi(y) = k(x, y)` exactly.
fn feature_matrix(design: &DMatrix<f64>, hp: &DefHyperParams) -> DMatrix<f64> {
    let n = design.nrows();
    let h = design.ncols();
    let r = 1 + h + h * (h + 1) / 2;
    let sqrt2 = 2.0f64.sqrt();
    let sqrt_2beta = (2.0 * hp.beta).sqrt();
    let inv_l = 1.0 / hp.lengthscale;
    let mut phi = DMatrix::zeros(n, r);
    for i in 0..n {
        let u: Vec<f64> = (0..h).map(|a| design[(i, a)] * inv_l).collect();
        let mut col = 0;
        phi[(i, col)] = hp.tau * hp.beta;
        col += 1;
        for a in 0..h {
            phi[(i, col)] = hp.tau * sqrt_2beta * u[a];
            col += 1;
        }
        for a in 0..h {
            phi[(i, col)] = hp.tau * u[a] * u[a];
            col += 1;
            for b in (a + 1)..h {
                phi[(i, col)] = hp.tau * sqrt2 * u[a] * u[b];
                col += 1;
            }
        }
        debug_assert_eq!(col, r);
    }
    phi
}

/// Log marginal likelihood of the targets under the kernel and noise.
///
/// Uses the exact low-rank identity through the feature map when N exceeds
/// the feature dimension, and the direct N x N route otherwise. Returns
/// negative infinity when the factorization fails, so the search simply
/// avoids that region.
fn log_marginal_likelihood(
    design: &DMatrix<f64>,
    targets: &DVector<f64>,
    hp: &DefHyperParams,
) -> f64 {
    let n = design.nrows();
    let h = design.ncols();
    let r = 1 + h + h * (h + 1) / 2;
    let sigma2 = (hp.noise_sd * hp.noise_sd).max(f64::MIN_POSITIVE);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    if n <= 3 * r {
        let gram = match kernel(design, design, hp) {
            Ok(g) => g,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut k = gram;
        for i in 0..n {
            k[(i, i)] += sigma2;
        }
        let trace: f64 = (0..n).map(|i| k[(i, i)]).sum();
        let mut jitter = 0.0;
        for attempt in 0..=6 {
            let mut kj = k.clone();
            if attempt > 0 {
                for i in 0..n {
                    kj[(i, i)] += jitter;
                }
            }
            if let Some(chol) = kj.cholesky() {
                let alpha = chol.solve(targets);
                let data_fit = targets.dot(&alpha);
                let logdet = 2.0 * (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
                return -0.5 * (data_fit + logdet + n as f64 * ln_2pi);
            }
            jitter = if attempt == 0 { 1e-10 * trace / n as f64 } else { jitter * 2.0 };
        }
        return f64::NEG_INFINITY;
    }

    let phi = feature_matrix(design, hp);
    let mut m = phi.transpose() * &phi;
    for i in 0..r {
        m[(i, i)] += sigma2;
    }
    let trace_m: f64 = (0..r).map(|i| m[(i, i)]).sum();
    let c = phi.transpose() * targets;
    let mut jitter = 0.0;
    for attempt in 0..=6 {
        let mut mj = m.clone();
        if attempt > 0 {
            for i in 0..r {
                mj[(i, i)] += jitter;
            }
        }
        if let Some(chol) = mj.cholesky() {
            let solved = chol.solve(&c);
            let data_fit = ((targets.dot(targets) - c.dot(&solved)) / sigma2).max(0.0);
            let logdet_m = 2.0 * (0..r).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
            let logdet = (n - r) as f64 * sigma2.ln() + logdet_m;
            return -0.5 * (data_fit + logdet + n as f64 * ln_2pi);
        }
        jitter = if attempt == 0 { 1e-12 * trace_m / r as f64 } else { jitter * 2.0 };
    }
    f64::NEG_INFINITY
}

/// Box constraints of the hyperparameter search, in the transformed
/// coordinates `[ln tau, beta, ln lengthscale, ln noise_sd]`.
struct SearchBox {
    lo: [f64; 4],
    hi: [f64; 4],
}

impl SearchBox {
    fn from_data(design: &DMatrix<f64>, targets: &DVector<f64>) -> Self {
        let p_scale = design.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
        let n = targets.len().max(1) as f64;
        let mean = targets.sum() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let sigma_hi = (0.1 * sd).max(2e-8);
        Self {
            lo: [1e-4f64.ln(), 0.0, (0.1 * p_scale).ln(), 1e-8f64.ln()],
            hi: [1e2f64.ln(), 10.0, (100.0 * p_scale).ln(), sigma_hi.ln()],
        }
    }

    fn clamp(&self, x: &mut [f64; 4]) {
        for i in 0..4 {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 4] {
        let mut x = [0.0; 4];
        for i in 0..4 {
            x[i] = rng.gen_range(self.lo[i]..=self.hi[i]);
        }
        x
    }
}

fn decode(x: &[f64; 4]) -> DefHyperParams {
    DefHyperParams { tau: x[0].exp(), beta: x[1], lengthscale: x[2].exp(), noise_sd: x[3].exp() }
}

fn encode(hp: &DefHyperParams) -> [f64; 4] {
    [hp.tau.ln(), hp.beta, hp.lengthscale.ln(), hp.noise_sd.max(1e-300).ln()]
}

/// Nelder-Mead minimization of `f` inside the box, returning the best
/// point found and its value.
fn nelder_mead(
    f: &dyn Fn(&[f64; 4]) -> f64,
    start: [f64; 4],
    bx: &SearchBox,
    max_evals: usize,
) -> ([f64; 4], f64) {
    const DIM: usize = 4;
    let mut evals = 0usize;
    let eval = |x: &[f64; 4], evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(DIM + 1);
    let mut p0 = start;
    bx.clamp(&mut p0);
    let v0 = eval(&p0, &mut evals);
    simplex.push((p0, v0));
    for i in 0..DIM {
        let mut p = p0;
        let width = bx.hi[i] - bx.lo[i];
        p[i] += 0.15 * width;
        bx.clamp(&mut p);
        if p[i] == p0[i] {
            p[i] -= 0.15 * width;
            bx.clamp(&mut p);
        }
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[DIM].1;
        if (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = [0.0; 4];
        for p in simplex.iter().take(DIM) {
            for i in 0..DIM {
                centroid[i] += p.0[i] / DIM as f64;
            }
        }
        let combine = |a: &[f64; 4], b: &[f64; 4], t: f64| {
            let mut out = [0.0; 4];
            for i in 0..DIM {
                out[i] = a[i] + t * (a[i] - b[i]);
            }
            let mut o = out;
            bx.clamp(&mut o);
            o
        };
        let reflected = combine(&centroid, &simplex[DIM].0, 1.0);
        let fr = eval(&reflected, &mut evals);
        if fr < simplex[0].1 {
            let expanded = combine(&centroid, &simplex[DIM].0, 2.0);
            let fe = eval(&expanded, &mut evals);
            simplex[DIM] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[DIM - 1].1 {
            simplex[DIM] = (reflected, fr);
        } else {
            let contracted = combine(&centroid, &simplex[DIM].0, -0.5);
            let fc = eval(&contracted, &mut evals);
            if fc < simplex[DIM].1 {
                simplex[DIM] = (contracted, fc);
            } else {
                let best_point = simplex[0].0;
                for p in simplex.iter_mut().skip(1) {
                    for i in 0..DIM {
                        p.0[i] = best_point[i] + 0.5 * (p.0[i] - best_point[i]);
                    }
                    bx.clamp(&mut p.0);
                    p.1 = eval(&p.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex[0]
}

/// Fits the degradation model: maximizes the log marginal likelihood by
/// multi-start local search over `{tau, beta, lengthscale, noise_sd}`, then
/// computes the weights through a Cholesky factorization of the Gram matrix
/// with a doubling jitter schedule.
///
/// The returned model's likelihood is never below the likelihood at `init`.
pub fn fit(
    dataset: &DegradationDataset,
    init: &DefHyperParams,
    opts: &FitOptions,
) -> Result<DefModel, GpError> {
    let n = dataset.len();
    if n == 0 {
        return Err(GpError::EmptyDataset);
    }
    let h = dataset.horizon();
    if h == 0 {
        return Err(GpError::DimensionMismatch { expected: 1, got: 0 });
    }
    for (i, t) in dataset.targets_kwh.iter().enumerate() {
        if !t.is_finite() {
            return Err(GpError::NonFiniteTarget { index: i });
        }
    }
    init.validate()?;

    let design = DMatrix::from_fn(n, h, |i, j| dataset.rows[i][j]);
    let targets = DVector::from_column_slice(&dataset.targets_kwh);
    let bx = SearchBox::from_data(&design, &targets);
    let objective = |x: &[f64; 4]| -log_marginal_likelihood(&design, &targets, &decode(x));

    // The init counts as a candidate even if it lies outside the search box.
    let init_ll = log_marginal_likelihood(&design, &targets, init);
    let mut best: (DefHyperParams, f64) = (*init, init_ll);

    if opts.max_evals > 0 {
        let mut starts: Vec<[f64; 4]> = vec![encode(init)];
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 1..opts.multistarts.max(1) {
            starts.push(bx.sample(&mut rng));
        }
        use rayon::prelude::*;
        let results: Vec<([f64; 4], f64)> = starts
            .par_iter()
            .map(|s| nelder_mead(&objective, *s, &bx, opts.max_evals))
            .collect();
        for (x, neg_ll) in results {
            let ll = -neg_ll;
            if ll > best.1 {
                best = (decode(&x), ll);
            }
        }
    }
    let (hyper, log_marginal) = best;

    // Weights through the direct SPD factorization, so that
    // (K + noise^2 I + jitter I) rho = psi is re-verifiable.
    let gram = kernel(&design, &design, &hyper)?;
    let sigma2 = hyper.noise_sd * hyper.noise_sd;
    let mut k = gram;
    for i in 0..n {
        k[(i, i)] += sigma2;
    }
    let trace: f64 = (0..n).map(|i| k[(i, i)]).sum();
    let base_jitter = 1e-10 * trace / n as f64;
    let mut jitter_applied = 0.0;
    let mut weights = None;
    for attempt in 0..=6 {
        let jitter = if attempt == 0 { 0.0 } else { base_jitter * (1 << (attempt - 1)) as f64 };
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = kj.cholesky() {
            weights = Some(chol.solve(&targets));
            jitter_applied = jitter;
            break;
        }
    }
    let weights = weights.ok_or_else(|| {
        let lambda_max = power_iteration_max_eig(&k);
        GpError::GramNotPositiveDefinite {
            size: n,
            trace,
            jitter_tried: base_jitter * 32.0,
            condition_estimate: lambda_max / (base_jitter * 32.0).max(f64::MIN_POSITIVE),
        }
    })?;

    Ok(DefModel {
        hyper,
        design,
        weights,
        targets,
        meta: dataset.meta.clone(),
        log_marginal,
        jitter: jitter_applied,
    })
}

fn power_iteration_max_eig(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..30 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w / norm;
    }
    lambda
}

/// On-disk document: the model plus its exact quadratic expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefModelFile {
    pub format_version: u32,
    pub model: DefModel,
    pub quadratic: QuadraticForm,
}

pub const DEF_MODEL_FORMAT_VERSION: u32 = 1;

impl DefModelFile {
    pub fn new(model: DefModel) -> Self {
        let quadratic = model.to_quadratic();
        Self { format_version: DEF_MODEL_FORMAT_VERSION, model, quadratic }
    }

    pub fn save(&self, path: &Path) -> Result<(), GpError> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GpError> {
        let file: DefModelFile = serde_json::from_reader(std::fs::File::open(path)?)?;
        if file.format_version != DEF_MODEL_FORMAT_VERSION {
            return Err(GpError::UnsupportedFormatVersion {
                found: file.format_version,
                supported: DEF_MODEL_FORMAT_VERSION,
            });
        }
        Ok(file)
    }
}
