//! One-step conditional-expectation estimators `E[V_{k+1} | X_k]`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::meanshift::normal_quadrature;
use crate::model::ModelSpec;
use crate::paths::{substream, PathEnsemble};

/// Pivot tolerance for the rank decision of the regression design.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// Which state variables feed the regression of the common component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// `W` for linear loss, `(W, psi)` otherwise.
    #[default]
    Auto,
    CommonMean,
    CommonMeanAndObstacle,
}

fn default_grid_nodes() -> usize {
    513
}
fn default_grid_width() -> f64 {
    8.0
}
fn default_quad_order() -> usize {
    32
}
fn default_degree() -> usize {
    3
}
fn default_inner() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CeBackend {
    ExactAffine,
    MarkovQuadrature {
        #[serde(default = "default_grid_nodes")]
        grid_nodes: usize,
        /// Half-width of the value grid in standard deviations.
        #[serde(default = "default_grid_width")]
        grid_width: f64,
        #[serde(default = "default_quad_order")]
        quad_order: usize,
    },
    Regression {
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default)]
        features: FeatureSet,
    },
    NestedMc {
        #[serde(default = "default_inner")]
        inner_samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl CeBackend {
    pub fn markov_default() -> Self {
        CeBackend::MarkovQuadrature {
            grid_nodes: default_grid_nodes(),
            grid_width: default_grid_width(),
            quad_order: default_quad_order(),
        }
    }

    pub fn regression_default() -> Self {
        CeBackend::Regression {
            degree: default_degree(),
            features: FeatureSet::Auto,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CeBackend::ExactAffine => "exact_affine",
            CeBackend::MarkovQuadrature { .. } => "markov_quadrature",
            CeBackend::Regression { .. } => "regression",
            CeBackend::NestedMc { .. } => "nested_mc",
        }
    }
}

/// Samples for one estimation step.
///
/// `current` and `next` are row-major `M x dim` state matrices. Grid-based
/// backends use `value_fn` with the Gaussian transition standard deviation
/// `step_sd` of a one-dimensional state instead of `values`.
#[derive(Clone, Copy)]
pub struct CeProblem<'a> {
    pub dim: usize,
    pub current: &'a [f64],
    pub next: Option<&'a [f64]>,
    pub values: Option<&'a [f64]>,
    pub value_fn: Option<&'a (dyn Fn(f64) -> f64 + Sync)>,
    pub step_sd: f64,
    pub step: usize,
}

impl<'a> CeProblem<'a> {
    pub fn samples(&self) -> usize {
        self.current.len().checked_div(self.dim).unwrap_or(0)
    }

    fn values(&self) -> Result<&'a [f64]> {
        self.values.ok_or_else(|| invalid("backend needs sampled values"))
    }

    fn value_fn(&self) -> Result<&'a (dyn Fn(f64) -> f64 + Sync)> {
        if self.dim != 1 {
            return Err(invalid("grid-based backends need a one-dimensional state"));
        }
        self.value_fn.ok_or_else(|| invalid("backend needs a value function"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CeEstimate {
    pub values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub basis: String,
    pub samples: usize,
    pub columns: usize,
    pub rank: usize,
    pub condition_number: f64,
    pub residual_norm: f64,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coefficients: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

/// Least squares of `targets` on the columns of a row-major `M x p`
/// feature matrix, by column-pivoted Householder QR on unit-norm columns.
pub fn fit_regression(features: &[f64], columns: usize, targets: &[f64]) -> Result<Fit> {
    fit_least_squares(features, columns, targets, false)
}

fn fit_least_squares(features: &[f64], columns: usize, targets: &[f64], square_ok: bool) -> Result<Fit> {
    let m = targets.len();
    if columns == 0 || features.len() != m * columns {
        return Err(invalid(format!(
            "feature matrix of {} values does not match {m} x {columns}",
            features.len()
        )));
    }
    if m < columns || (m == columns && !square_ok) {
        return Err(invalid(format!("{m} samples cannot fit {columns} basis functions")));
    }
    let mut x = DMatrix::from_row_slice(m, columns, features);
    let mut norms = Vec::with_capacity(columns);
    for j in 0..columns {
        let norm = x.column(j).norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateBasis(format!("column {j} is zero or non-finite")));
        }
        x.column_mut(j).unscale_mut(norm);
        norms.push(norm);
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..columns).map(|i| r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    let rank = diag.iter().filter(|d| **d > PIVOT_TOLERANCE * top).count();
    if rank < columns {
        return Err(Error::DegenerateBasis(format!(
            "design has rank {rank} < {columns} columns at pivot tolerance {PIVOT_TOLERANCE:e}"
        )));
    }
    let y = DVector::from_column_slice(targets);
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let head = qty.rows(0, columns).into_owned();
    let mut beta = r
        .solve_upper_triangular(&head)
        .ok_or_else(|| Error::DegenerateBasis("singular triangular factor".into()))?;
    qr.p().inv_permute_rows(&mut beta);
    let residual = &y - &x * &beta;
    let residual_norm = residual.norm();
    let y_norm = y.norm();
    let min_diag = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let coefficients = (0..columns).map(|j| beta[j] / norms[j]).collect();
    Ok(Fit {
        coefficients,
        diagnostics: FitDiagnostics {
            basis: format!("{columns} columns"),
            samples: m,
            columns,
            rank,
            condition_number: top / min_diag,
            residual_norm,
            relative_residual: if y_norm > 0.0 { residual_norm / y_norm } else { 0.0 },
        },
    })
}

/// Standardised total-degree polynomial basis on a `dim`-dimensional state.
///
/// State coordinates with no spread across the samples are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    centers: Vec<f64>,
    scales: Vec<f64>,
    active: Vec<usize>,
    exponents: Vec<Vec<usize>>,
    dim: usize,
}

impl PolynomialBasis {
    pub fn fit(states: &[f64], dim: usize, degree: usize) -> Result<Self> {
        if dim == 0 || !states.len().is_multiple_of(dim) || states.is_empty() {
            return Err(invalid("state matrix shape is inconsistent"));
        }
        let m = states.len() / dim;
        let mut centers = vec![0.0; dim];
        let mut scales = vec![1.0; dim];
        let mut active = Vec::new();
        for d in 0..dim {
            let mean = (0..m).map(|i| states[i * dim + d]).sum::<f64>() / m as f64;
            let var = (0..m).map(|i| (states[i * dim + d] - mean).powi(2)).sum::<f64>() / m as f64;
            let sd = var.sqrt();
            centers[d] = mean;
            if sd > 1e-14 * (1.0 + mean.abs()) {
                scales[d] = sd;
                active.push(d);
            }
        }
        let mut exponents = vec![vec![0; active.len()]];
        for total in 1..=degree {
            push_exponents(active.len(), total, &mut Vec::new(), &mut exponents);
        }
        if active.is_empty() {
            exponents.truncate(1);
        }
        Ok(Self {
            centers,
            scales,
            active,
            exponents,
            dim,
        })
    }

    pub fn columns(&self) -> usize {
        self.exponents.len()
    }

    pub fn describe(&self) -> String {
        format!(
            "polynomial degree<={} on state coordinates {:?} ({} columns)",
            self.exponents.iter().map(|e| e.iter().sum::<usize>()).max().unwrap_or(0),
            self.active,
            self.columns()
        )
    }

    pub fn row(&self, state: &[f64], out: &mut Vec<f64>) {
        let z: Vec<f64> = self
            .active
            .iter()
            .map(|&d| (state[d] - self.centers[d]) / self.scales[d])
            .collect();
        for e in &self.exponents {
            out.push(e.iter().zip(&z).map(|(&p, &v)| v.powi(p as i32)).product());
        }
    }

    pub fn design(&self, states: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(states.len() / self.dim * self.columns());
        for s in states.chunks(self.dim) {
            self.row(s, &mut out);
        }
        out
    }
}

fn push_exponents(vars: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if vars == 0 {
        return;
    }
    if prefix.len() == vars - 1 {
        let used: usize = prefix.iter().sum();
        let mut e = prefix.clone();
        e.push(total - used);
        out.push(e);
        return;
    }
    let used: usize = prefix.iter().sum();
    for p in (0..=total - used).rev() {
        prefix.push(p);
        push_exponents(vars, total, prefix, out);
        prefix.pop();
    }
}

/// A fitted regression that can be evaluated at new states.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub basis: PolynomialBasis,
    pub coefficients: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl RegressionModel {
    pub fn fit(states: &[f64], dim: usize, values: &[f64], degree: usize) -> Result<Self> {
        let basis = PolynomialBasis::fit(states, dim, degree)?;
        let design = basis.design(states);
        let fit = fit_regression(&design, basis.columns(), values)?;
        let mut diagnostics = fit.diagnostics;
        diagnostics.basis = basis.describe();
        Ok(Self {
            basis,
            coefficients: fit.coefficients,
            diagnostics,
        })
    }

    pub fn predict(&self, state: &[f64]) -> f64 {
        let mut row = Vec::with_capacity(self.coefficients.len());
        self.basis.row(state, &mut row);
        row.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }

    pub fn predict_all(&self, states: &[f64]) -> Vec<f64> {
        states
            .par_chunks(self.basis.dim)
            .map(|s| self.predict(s))
            .collect()
    }
}

/// Exact fit of `values` as an affine function of the next state; the
/// estimate applies it at the current state (the state is a martingale).
fn exact_affine(problem: &CeProblem) -> Result<CeEstimate> {
    let values = problem.values()?;
    let next = problem
        .next
        .ok_or_else(|| invalid("exact affine backend needs next-step states"))?;
    let m = problem.samples();
    let d = problem.dim;
    let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = values.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    if spread <= 1e-14 * scale {
        return Ok(CeEstimate {
            values: vec![values[0]; m],
            std_errors: None,
            diagnostics: None,
        });
    }
    // Drop coordinates that do not move; keep the first of any duplicates.
    let mut cols: Vec<usize> = Vec::new();
    for j in 0..d {
        let c0 = next[j];
        if (0..m).all(|i| next[i * d + j] == c0) {
            continue;
        }
        if cols.iter().any(|&k| (0..m).all(|i| next[i * d + k] == next[i * d + j])) {
            continue;
        }
        cols.push(j);
    }
    let p = cols.len() + 1;
    let mut design = Vec::with_capacity(m * p);
    for i in 0..m {
        design.push(1.0);
        for &j in &cols {
            design.push(next[i * d + j]);
        }
    }
    let fit = fit_least_squares(&design, p, values, true)?;
    if fit.diagnostics.residual_norm > 1e-9 * scale * (m as f64).sqrt() {
        return Err(Error::UnsupportedModel(format!(
            "target is not affine in the conditioning state (relative residual {:e})",
            fit.diagnostics.relative_residual
        )));
    }
    let c = &fit.coefficients;
    let out = (0..m)
        .map(|i| c[0] + cols.iter().enumerate().map(|(q, &j)| c[q + 1] * problem.current[i * d + j]).sum::<f64>())
        .collect();
    Ok(CeEstimate {
        values: out,
        std_errors: None,
        diagnostics: Some(fit.diagnostics),
    })
}

fn markov_quadrature(problem: &CeProblem, quad_order: usize) -> Result<CeEstimate> {
    let f = problem.value_fn()?;
    let rule = normal_quadrature(quad_order)?;
    let sd = problem.step_sd;
    let values = problem
        .current
        .par_iter()
        .map(|&w| rule.iter().map(|(z, p)| p * f(w + sd * z)).sum())
        .collect();
    Ok(CeEstimate {
        values,
        std_errors: None,
        diagnostics: None,
    })
}

/// Common-random-number inner draws for step `step`.
pub fn inner_normals(seed: u64, step: usize, count: usize) -> Vec<f64> {
    let mut rng = substream(seed, &[0x6E65_7374, step as u64]);
    (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn nested_mc(problem: &CeProblem, inner_samples: usize, seed: u64) -> Result<CeEstimate> {
    if inner_samples < 2 {
        return Err(invalid("nested Monte Carlo needs at least two inner samples"));
    }
    let f = problem.value_fn()?;
    let z = inner_normals(seed, problem.step, inner_samples);
    let sd = problem.step_sd;
    let k = inner_samples as f64;
    let pairs: Vec<(f64, f64)> = problem
        .current
        .par_iter()
        .map(|&w| {
            let draws: Vec<f64> = z.iter().map(|z| f(w + sd * z)).collect();
            let mean = draws.iter().sum::<f64>() / k;
            let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (mean, (var / k).sqrt())
        })
        .collect();
    Ok(CeEstimate {
        values: pairs.iter().map(|p| p.0).collect(),
        std_errors: Some(pairs.iter().map(|p| p.1).collect()),
        diagnostics: None,
    })
}

fn regression(problem: &CeProblem, degree: usize) -> Result<CeEstimate> {
    let values = problem.values()?;
    let model = RegressionModel::fit(problem.current, problem.dim, values, degree)?;
    Ok(CeEstimate {
        values: model.predict_all(problem.current),
        std_errors: None,
        diagnostics: Some(model.diagnostics),
    })
}

pub fn estimate(backend: &CeBackend, problem: &CeProblem) -> Result<CeEstimate> {
    if problem.dim == 0 || !problem.current.len().is_multiple_of(problem.dim) {
        return Err(invalid("state matrix shape is inconsistent"));
    }
    if problem.current.iter().any(|s| !s.is_finite()) {
        return Err(invalid("states must be finite"));
    }
    if let Some(v) = problem.values {
        if v.len() != problem.samples() {
            return Err(invalid("values and states differ in sample count"));
        }
    }
    match backend {
        CeBackend::ExactAffine => exact_affine(problem),
        CeBackend::MarkovQuadrature { quad_order, .. } => markov_quadrature(problem, *quad_order),
        CeBackend::Regression { degree, .. } => regression(problem, *degree),
        CeBackend::NestedMc { inner_samples, seed } => nested_mc(problem, *inner_samples, *seed),
    }
}

/// Cubic (Catmull-Rom) interpolant on a uniform grid, linear outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub lo: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 || !(hi > lo) {
            return Err(invalid("grid function needs two nodes on a nonempty interval"));
        }
        let step = (hi - lo) / (values.len() - 1) as f64;
        Ok(Self { lo, step, values })
    }

    pub fn node(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.step
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.values.len()).map(|j| self.node(j)).collect()
    }

    fn at(&self, j: isize) -> f64 {
        let n = self.values.len() as isize;
        if j < 0 {
            2.0 * self.values[0] - self.values[1]
        } else if j >= n {
            2.0 * self.values[(n - 1) as usize] - self.values[(n - 2) as usize]
        } else {
            self.values[j as usize]
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let s = (x - self.lo) / self.step;
        if s <= 0.0 {
            let slope = (self.values[1] - self.values[0]) / self.step;
            return self.values[0] + slope * (x - self.lo);
        }
        if s >= (n - 1) as f64 {
            let slope = (self.values[n - 1] - self.values[n - 2]) / self.step;
            return self.values[n - 1] + slope * (x - self.node(n - 1));
        }
        let j = (s.floor() as usize).min(n - 2);
        let u = s - j as f64;
        let j = j as isize;
        let (p0, p1, p2, p3) = (self.at(j - 1), self.at(j), self.at(j + 1), self.at(j + 2));
        let u2 = u * u;
        let u3 = u2 * u;
        0.5 * (2.0 * p1 + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub inner_samples: usize,
}

/// Brute-force `E[G(B) | F_k]` by resimulating every particle from node `k`.
///
/// The continuation paths keep `state` up to node `k` and draw fresh
/// increments afterwards; cost is `O(inner_samples * (n - k) * N)`.
pub fn nested_oracle(
    model: &ModelSpec,
    state: &PathEnsemble,
    k: usize,
    functional: &(dyn Fn(&PathEnsemble) -> f64 + Sync),
    inner_samples: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    let grid = model.grid;
    if state.grid() != &grid {
        return Err(invalid("state ensemble lives on a different grid"));
    }
    if k > grid.steps() {
        return Err(invalid(format!("node {k} beyond the grid")));
    }
    if inner_samples < 2 {
        return Err(invalid("oracle needs at least two inner samples"));
    }
    let n_particles = state.particles();
    let width = grid.nodes();
    let sd = grid.dt().sqrt();
    let draws: Vec<f64> = (0..inner_samples)
        .into_par_iter()
        .map(|m| {
            let mut values = state.values().to_vec();
            for i in 0..n_particles {
                let mut rng = substream(seed, &[m as u64, i as u64]);
                for j in k..grid.steps() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    values[i * width + j + 1] = values[i * width + j] + sd * z;
                }
            }
            let path = PathEnsemble::from_values(&grid, values, state.seed())?;
            Ok(functional(&path))
        })
        .collect::<Result<_>>()?;
    let n = inner_samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(OracleEstimate {
        mean,
        std_error: (var / n).sqrt(),
        inner_samples,
    })
}
