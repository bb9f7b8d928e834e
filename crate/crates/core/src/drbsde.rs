//! Discrete doubly reflected backward recursions and the Dynkin-game oracle.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::condexp::{estimate, CeBackend, CeProblem, GridFunction, RegressionModel};
use crate::error::{invalid, Error, Result};
use crate::meanshift::ObstaclePaths;
use crate::model::TimeGrid;

/// Largest grid the exhaustive Dynkin enumeration accepts by default.
pub const ORACLE_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectedBackwardResult {
    #[serde(rename = "D")]
    pub d: Vec<f64>,
    #[serde(rename = "dKplus")]
    pub dk_plus: Vec<f64>,
    #[serde(rename = "dKminus")]
    pub dk_minus: Vec<f64>,
    pub flat_off_residual: f64,
}

impl ReflectedBackwardResult {
    fn zeros(nodes: usize) -> Self {
        Self {
            d: vec![0.0; nodes],
            dk_plus: vec![0.0; nodes - 1],
            dk_minus: vec![0.0; nodes - 1],
            flat_off_residual: 0.0,
        }
    }

    /// Cumulative `K^+ - K^-` per node, starting from zero at node 0.
    pub fn cumulative_k(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d.len());
        let mut acc = 0.0;
        out.push(0.0);
        for (p, m) in self.dk_plus.iter().zip(&self.dk_minus) {
            acc += p - m;
            out.push(acc);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,t,D,dKplus,dKminus")?;
        for k in 0..self.d.len() {
            let (p, m) = if k < self.dk_plus.len() {
                (self.dk_plus[k], self.dk_minus[k])
            } else {
                (0.0, 0.0)
            };
            writeln!(out, "{k},{},{},{p},{m}", grid.time(k), self.d[k])?;
        }
        Ok(())
    }
}

/// One clamping step; returns `(value, dK+, dK-)`.
#[inline]
pub fn clamp_step(candidate: f64, psi: f64, phi: f64) -> (f64, f64, f64) {
    debug_assert!(psi <= phi);
    let value = phi.min(psi.max(candidate));
    (value, (psi - candidate).max(0.0), (candidate - phi).max(0.0))
}

fn flat_off(result: &ReflectedBackwardResult, psi: &[f64], phi: &[f64], range: std::ops::Range<usize>) -> f64 {
    range
        .map(|k| ((result.d[k] - psi[k]) * result.dk_plus[k]).abs() + ((phi[k] - result.d[k]) * result.dk_minus[k]).abs())
        .sum()
}

fn check_band(psi: &[f64], phi: &[f64]) -> Result<()> {
    if psi.len() != phi.len() || psi.len() < 2 {
        return Err(invalid("obstacle paths need matching lengths of at least two nodes"));
    }
    if let Some(k) = (0..psi.len()).find(|&k| !(psi[k] <= phi[k])) {
        return Err(invalid(format!("psi exceeds phi at node {k}")));
    }
    Ok(())
}

/// `D_n = terminal`, `D_k = clamp(D_{k+1} + increment_k, psi_k, phi_k)`.
pub fn deterministic_backward(
    obstacles: &ObstaclePaths,
    terminal: f64,
    driver_increments: Option<&[f64]>,
) -> Result<ReflectedBackwardResult> {
    let (psi, phi) = (&obstacles.psi, &obstacles.phi);
    check_band(psi, phi)?;
    let n = psi.len() - 1;
    if let Some(inc) = driver_increments {
        if inc.len() != n {
            return Err(invalid(format!("expected {n} driver increments, got {}", inc.len())));
        }
    }
    if !(psi[n] <= terminal && terminal <= phi[n]) {
        return Err(Error::InconsistentTerminal {
            terminal,
            lower: psi[n],
            upper: phi[n],
        });
    }
    let mut out = ReflectedBackwardResult::zeros(n + 1);
    out.d[n] = terminal;
    for k in (0..n).rev() {
        let candidate = out.d[k + 1] + driver_increments.map_or(0.0, |inc| inc[k]);
        let (v, p, m) = clamp_step(candidate, psi[k], phi[k]);
        out.d[k] = v;
        out.dk_plus[k] = p;
        out.dk_minus[k] = m;
    }
    out.flat_off_residual = flat_off(&out, psi, phi, 0..n);
    Ok(out)
}

/// Exhaustive min-max over deterministic stopping indices.
pub fn dynkin_oracle(obstacles: &ObstaclePaths, terminal: f64) -> Result<Vec<f64>> {
    dynkin_oracle_with_limit(obstacles, terminal, ORACLE_LIMIT)
}

pub fn dynkin_oracle_with_limit(obstacles: &ObstaclePaths, terminal: f64, limit: usize) -> Result<Vec<f64>> {
    let (psi, phi) = (&obstacles.psi, &obstacles.phi);
    check_band(psi, phi)?;
    let n = psi.len() - 1;
    if n > limit {
        return Err(Error::OracleTooLarge { steps: n, limit });
    }
    let payoff = |s: usize, q: usize| {
        if s.min(q) == n {
            terminal
        } else if q <= s {
            psi[q]
        } else {
            phi[s]
        }
    };
    Ok((0..=n)
        .map(|k| {
            (k..=n)
                .map(|s| (k..=n).map(|q| payoff(s, q)).fold(f64::NEG_INFINITY, f64::max))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Affine dependence of the obstacles on a Gaussian scalar state `W`,
/// used by the grid-based backends.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovModel {
    /// Standard deviation of `W_k` per node.
    pub state_sd: Vec<f64>,
    /// Standard deviation of `W_{k+1} - W_k` per step.
    pub step_sd: Vec<f64>,
    pub psi_intercept: Vec<f64>,
    pub psi_slope: Vec<f64>,
    pub phi_intercept: Vec<f64>,
    pub phi_slope: Vec<f64>,
}

impl MarkovModel {
    fn psi(&self, k: usize, w: f64) -> f64 {
        self.psi_intercept[k] + self.psi_slope[k] * w
    }

    fn phi(&self, k: usize, w: f64) -> f64 {
        self.phi_intercept[k] + self.phi_slope[k] * w
    }
}

/// Replicated backward problem for a common component over nodes
/// `first..=last`. The terminal value sits at `last`.
pub struct StochasticProblem<'a> {
    pub psi: &'a [Vec<f64>],
    pub phi: &'a [Vec<f64>],
    pub terminal: &'a [f64],
    /// Common state `W` per replication and node.
    pub state: &'a [Vec<f64>],
    pub first: usize,
    pub last: usize,
    /// Add `psi_k` as a second regression feature.
    pub obstacle_feature: bool,
    pub markov: Option<&'a MarkovModel>,
}

#[derive(Debug, Clone)]
pub struct StochasticBackwardResult {
    pub reps: Vec<ReflectedBackwardResult>,
    /// Continuation fit used at each step (regression backend).
    pub fits: Vec<Option<RegressionModel>>,
    /// Value function per node (grid backends).
    pub value_functions: Vec<Option<GridFunction>>,
    /// Accumulated inner Monte Carlo standard error per replication and node.
    pub nested_se: Option<Vec<Vec<f64>>>,
}

pub fn stochastic_backward(problem: &StochasticProblem, backend: &CeBackend) -> Result<StochasticBackwardResult> {
    let m = problem.terminal.len();
    if m == 0 || problem.psi.len() != m || problem.phi.len() != m || problem.state.len() != m {
        return Err(invalid("replicated inputs must share the replication count"));
    }
    let nodes = problem.psi[0].len();
    if problem.last >= nodes || problem.first > problem.last {
        return Err(invalid("block range outside the grid"));
    }
    for r in 0..m {
        if problem.psi[r].len() != nodes || problem.phi[r].len() != nodes || problem.state[r].len() != nodes {
            return Err(invalid(format!("replication {r} has misaligned paths")));
        }
        check_band(&problem.psi[r], &problem.phi[r])?;
    }
    let grid_based = matches!(backend, CeBackend::MarkovQuadrature { .. } | CeBackend::NestedMc { .. });
    let markov = if grid_based {
        Some(problem.markov.ok_or_else(|| {
            Error::UnsupportedModel(format!("{} backend needs obstacles affine in the common state", backend.name()))
        })?)
    } else {
        None
    };

    let last = problem.last;
    let mut reps: Vec<ReflectedBackwardResult> = (0..m).map(|_| ReflectedBackwardResult::zeros(nodes)).collect();
    for (r, res) in reps.iter_mut().enumerate() {
        let t = problem.terminal[r];
        let (lo, hi) = (problem.psi[r][last], problem.phi[r][last]);
        let tol = 1e-12 * t.abs().max(1.0);
        if !(lo - tol <= t && t <= hi + tol) {
            return Err(Error::InconsistentTerminal {
                terminal: t,
                lower: lo,
                upper: hi,
            });
        }
        res.d[last] = t;
    }
    let mut fits: Vec<Option<RegressionModel>> = vec![None; nodes];
    let mut value_functions: Vec<Option<GridFunction>> = vec![None; nodes];
    let mut nested_se: Option<Vec<Vec<f64>>> = if matches!(backend, CeBackend::NestedMc { .. }) {
        Some(vec![vec![0.0; nodes]; m])
    } else {
        None
    };

    let grid_spec = match backend {
        CeBackend::MarkovQuadrature { grid_nodes, grid_width, .. } => Some((*grid_nodes, *grid_width)),
        CeBackend::NestedMc { .. } => Some((513, 8.0)),
        _ => None,
    };
    if let (Some(mk), Some((grid_nodes, grid_width))) = (markov, grid_spec) {
        value_functions[last] = Some(terminal_value_function(mk, last, grid_nodes, grid_width)?);
    }

    for k in (problem.first..last).rev() {
        let current: Vec<f64> = (0..m).map(|r| problem.state[r][k]).collect();
        let (cont, se): (Vec<f64>, Option<Vec<f64>>) = match (backend, markov, grid_spec) {
            (_, Some(mk), Some((grid_nodes, grid_width))) => {
                let next_fn = value_functions[k + 1].clone().expect("value function set at k+1");
                let f = |w: f64| next_fn.eval(w);
                let ce = CeProblem {
                    dim: 1,
                    current: &current,
                    next: None,
                    values: None,
                    value_fn: Some(&f),
                    step_sd: mk.step_sd[k],
                    step: k,
                };
                let at_samples = estimate(backend, &ce)?;
                let spread = grid_width * mk.state_sd[k].max(mk.step_sd[k]);
                let lo = -spread;
                let hi = spread;
                let step = (hi - lo) / (grid_nodes - 1) as f64;
                let grid_pts: Vec<f64> = (0..grid_nodes).map(|j| lo + j as f64 * step).collect();
                let ce_grid = CeProblem {
                    current: &grid_pts,
                    ..ce
                };
                let on_grid = estimate(backend, &ce_grid)?;
                let vals = grid_pts
                    .iter()
                    .zip(&on_grid.values)
                    .map(|(&w, &c)| clamp_step(c, mk.psi(k, w), mk.phi(k, w).max(mk.psi(k, w))).0)
                    .collect();
                value_functions[k] = Some(GridFunction::new(lo, hi, vals)?);
                (at_samples.values, at_samples.std_errors)
            }
            (CeBackend::Regression { degree, .. }, _, _) => {
                let dim = if problem.obstacle_feature { 2 } else { 1 };
                let mut states = Vec::with_capacity(m * dim);
                for r in 0..m {
                    states.push(problem.state[r][k]);
                    if problem.obstacle_feature {
                        states.push(problem.psi[r][k]);
                    }
                }
                let values: Vec<f64> = reps.iter().map(|res| res.d[k + 1]).collect();
                let model = RegressionModel::fit(&states, dim, &values, *degree)?;
                let pred = model.predict_all(&states);
                fits[k] = Some(model);
                (pred, None)
            }
            (CeBackend::ExactAffine, _, _) => {
                let next: Vec<f64> = (0..m).map(|r| problem.state[r][k + 1]).collect();
                let values: Vec<f64> = reps.iter().map(|res| res.d[k + 1]).collect();
                let ce = CeProblem {
                    dim: 1,
                    current: &current,
                    next: Some(&next),
                    values: Some(&values),
                    value_fn: None,
                    step_sd: 0.0,
                    step: k,
                };
                (estimate(backend, &ce)?.values, None)
            }
            _ => unreachable!("grid backends carry a Markov model"),
        };
        reps.par_iter_mut().enumerate().for_each(|(r, res)| {
            let (v, p, q) = clamp_step(cont[r], problem.psi[r][k], problem.phi[r][k]);
            res.d[k] = v;
            res.dk_plus[k] = p;
            res.dk_minus[k] = q;
        });
        if let (Some(acc), Some(se)) = (nested_se.as_mut(), se) {
            for r in 0..m {
                acc[r][k] = (acc[r][k + 1].powi(2) + se[r].powi(2)).sqrt();
            }
        }
    }
    for (r, res) in reps.iter_mut().enumerate() {
        if problem.first < last {
            res.flat_off_residual = flat_off(res, &problem.psi[r], &problem.phi[r], problem.first..last);
        }
    }
    Ok(StochasticBackwardResult {
        reps,
        fits,
        value_functions,
        nested_se,
    })
}

/// `w -> clamp(0, psi_last(w), phi_last(w))` on the terminal grid.
fn terminal_value_function(mk: &MarkovModel, last: usize, grid_nodes: usize, grid_width: f64) -> Result<GridFunction> {
    let spread_sd = if last > 0 {
        mk.state_sd[last].max(mk.step_sd[last - 1])
    } else {
        mk.state_sd[last]
    };
    let spread = grid_width * spread_sd.max(1e-300);
    let step = 2.0 * spread / (grid_nodes - 1) as f64;
    let vals = (0..grid_nodes)
        .map(|j| {
            let w = -spread + j as f64 * step;
            clamp_step(0.0, mk.psi(last, w), mk.phi(last, w)).0
        })
        .collect();
    GridFunction::new(-spread, spread, vals)
}
