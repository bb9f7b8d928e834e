//! Interacting particle solvers for the mean-reflected system.
//!
//! The construction variant writes every particle as `Y^i = U^i + S`: `U^i`
//! is the conditional expectation of the terminal value plus the driver,
//! and the common component `S` solves a doubly reflected recursion between
//! the empirical obstacles of the `U` cloud. The direct variant projects
//! per-step conditional-expectation candidates onto the constraint with a
//! common shift. Both run inside a Picard time-splitting loop when the
//! driver depends on `y`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condexp::{
    estimate, CeBackend, CeProblem, FeatureSet, FitDiagnostics, GridFunction, OracleEstimate, RegressionModel,
};
use crate::drbsde::{stochastic_backward, MarkovModel, StochasticProblem};
use crate::error::{invalid, Error, Result};
use crate::meanshift::{
    normal_quadrature, node_obstacles, solve_shift, terminal_adjustments, ObstacleKind, ObstaclePaths,
    TerminalAdjustment,
};
use crate::model::{Driver, LossFunction, ModelSpec, TerminalFunctional, TimeGrid};
use crate::paths::PathEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardSchedule {
    /// Maximal sub-interval length for a contraction (infinite when `L = 0`).
    pub epsilon: f64,
    pub sub_intervals: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

pub const DEFAULT_MAX_ITERATIONS: usize = 50;
pub const DEFAULT_PICARD_TOLERANCE: f64 = 1e-8;

pub fn picard_schedule(driver: &Driver, loss: &LossFunction, grid: &TimeGrid) -> PicardSchedule {
    let l = driver.lipschitz;
    let ratio = match loss {
        LossFunction::Linear { a, .. } => a * a,
        LossFunction::General(_) => (loss.gamma_u() / loss.gamma_l()).powi(2),
    };
    let epsilon = if l == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (24.0 * l * l * (1.0 + 8.0 * ratio)).sqrt()
    };
    let sub_intervals = if epsilon.is_infinite() {
        1
    } else {
        (grid.horizon() / epsilon).ceil() as usize
    };
    PicardSchedule {
        epsilon,
        sub_intervals: sub_intervals.max(1),
        max_iterations: DEFAULT_MAX_ITERATIONS,
        tolerance: DEFAULT_PICARD_TOLERANCE,
    }
}

impl PicardSchedule {
    /// Node ranges `(first, last)` of the sub-intervals, latest first.
    pub fn blocks(&self, grid: &TimeGrid) -> Vec<(usize, usize)> {
        let n = grid.steps();
        let per = if self.epsilon.is_infinite() || self.sub_intervals <= 1 {
            n
        } else {
            ((self.epsilon / grid.dt()).floor() as usize).clamp(1, n)
        };
        let mut blocks = Vec::new();
        let mut last = n;
        while last > 0 {
            let first = last.saturating_sub(per);
            blocks.push((first, last));
            last = first;
        }
        blocks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectStep {
    pub values: Vec<f64>,
    pub dk_plus: f64,
    pub dk_minus: f64,
}

/// Projects candidates onto `l <= mean h(Y) <= u` with a common shift.
pub fn reflect_step(candidates: &[f64], loss: &LossFunction, lower: f64, upper: f64) -> Result<ReflectStep> {
    if candidates.is_empty() || candidates.iter().any(|c| !c.is_finite()) {
        return Err(invalid("candidates must be nonempty and finite"));
    }
    if !(lower < upper) {
        return Err(invalid(format!("empty band [{lower}, {upper}]")));
    }
    let m = mean_loss(candidates, loss);
    let (dk_plus, dk_minus) = if m < lower {
        (solve_shift(candidates, loss, lower)?.x.max(0.0), 0.0)
    } else if m > upper {
        (0.0, (-solve_shift(candidates, loss, upper)?.x).max(0.0))
    } else {
        (0.0, 0.0)
    };
    let shift = dk_plus - dk_minus;
    Ok(ReflectStep {
        values: candidates.iter().map(|c| c + shift).collect(),
        dk_plus,
        dk_minus,
    })
}

#[inline]
fn mean_loss(values: &[f64], loss: &LossFunction) -> f64 {
    values.iter().map(|v| loss.eval(*v)).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Construction,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolverConfig {
    pub mode: Mode,
    pub variant: Variant,
    /// Estimator for the common component (construction) or for the
    /// candidates (direct). `None` selects automatically.
    pub backend: Option<CeBackend>,
    /// Estimator for the particle-level `U` paths. `None` selects automatically.
    pub particle_backend: Option<CeBackend>,
    pub schedule: Option<PicardSchedule>,
    pub constraint_tol: Option<f64>,
}

impl SolverConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }

    pub fn with_backend(mut self, backend: CeBackend) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn with_particle_backend(mut self, backend: CeBackend) -> Self {
        self.particle_backend = Some(backend);
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_schedule(mut self, schedule: PicardSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn tolerance(&self) -> f64 {
        self.constraint_tol.unwrap_or(match self.mode {
            Mode::Linear => 1e-10,
            Mode::Nonlinear => 1e-9,
        })
    }
}

/// Backends a solve will use for a given model and configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedBackends {
    pub particle: CeBackend,
    pub common: CeBackend,
}

pub fn resolve_backends(model: &ModelSpec, config: &SolverConfig) -> ResolvedBackends {
    let exact_u = model.is_reference_class();
    let particle = config.particle_backend.clone().unwrap_or(if exact_u {
        CeBackend::ExactAffine
    } else {
        CeBackend::regression_default()
    });
    let common = config.backend.clone().unwrap_or(match config.variant {
        Variant::Direct => CeBackend::regression_default(),
        Variant::Construction => {
            if exact_u && model.loss.is_linear() && particle == CeBackend::ExactAffine {
                CeBackend::markov_default()
            } else {
                CeBackend::regression_default()
            }
        }
    });
    ResolvedBackends { particle, common }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionDiagnostics {
    /// Largest excursion of the empirical h-mean outside `[l, u]`.
    pub constraint_violation: f64,
    pub flat_off_lower: f64,
    pub flat_off_upper: f64,
    /// Largest node-wise |mean over particles of the martingale increment|.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub martingale_residual: Option<f64>,
    pub terminal_identity_error: f64,
}

/// One replication of the particle system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectedSolution {
    pub particles: usize,
    /// Row-major `N x (n+1)`.
    #[serde(rename = "Y")]
    pub y: Vec<f64>,
    #[serde(skip)]
    pub u: Option<Vec<f64>>,
    /// Common component per node (construction variant).
    #[serde(skip)]
    pub s: Option<Vec<f64>>,
    #[serde(rename = "dKplus")]
    pub dk_plus: Vec<f64>,
    #[serde(rename = "dKminus")]
    pub dk_minus: Vec<f64>,
    pub adjustment: TerminalAdjustment,
    /// Empirical obstacles in state units (construction) or shift bounds
    /// relative to the candidates (direct).
    #[serde(skip)]
    pub obstacles: ObstaclePaths,
    #[serde(skip)]
    pub xi: Vec<f64>,
    pub diagnostics: SolutionDiagnostics,
}

impl ReflectedSolution {
    pub fn nodes(&self) -> usize {
        self.y.len() / self.particles
    }

    #[inline]
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.y[i * self.nodes() + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.nodes();
        &self.y[i * w..(i + 1) * w]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.particles).map(|i| self.value(i, k)).collect()
    }

    /// Cumulative `K^+ - K^-` per node.
    pub fn cumulative_k(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        let mut acc = 0.0;
        for (p, m) in self.dk_plus.iter().zip(&self.dk_minus) {
            acc += p - m;
            out.push(acc);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub first: usize,
    pub last: usize,
    pub iterations: usize,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchSolution {
    pub reps: Vec<ReflectedSolution>,
    pub backends: ResolvedBackends,
    pub schedule: PicardSchedule,
    pub blocks: Vec<BlockReport>,
    /// Continuation fits of the common component per step (last sweep).
    pub continuation_fits: Vec<Option<RegressionModel>>,
    pub value_functions: Vec<Option<GridFunction>>,
    pub nested_se: Option<Vec<Vec<f64>>>,
    pub fit_diagnostics: Vec<FitDiagnostics>,
    pub obstacle_feature: bool,
}

struct Layout {
    reps: usize,
    particles: usize,
    nodes: usize,
}

impl Layout {
    #[inline]
    fn at(&self, r: usize, i: usize, k: usize) -> usize {
        (r * self.particles + i) * self.nodes + k
    }
}

fn check_batch(model: &ModelSpec, batch: &[PathEnsemble]) -> Result<Layout> {
    let first = batch.first().ok_or_else(|| invalid("empty replication batch"))?;
    let particles = first.particles();
    for e in batch {
        if e.grid() != &model.grid {
            return Err(invalid("ensemble grid differs from the model grid"));
        }
        if e.particles() != particles {
            return Err(invalid("replications must share the particle count"));
        }
    }
    Ok(Layout {
        reps: batch.len(),
        particles,
        nodes: model.grid.nodes(),
    })
}

/// Per-sample conditional expectation of a particle-level quantity at step
/// `k`; `values` and the result are laid out like the flat Y tensor.
fn particle_ce(
    backend: &CeBackend,
    batch: &[PathEnsemble],
    means: &[Vec<f64>],
    lay: &Layout,
    k: usize,
    next_values: &[f64],
    diags: &mut Vec<FitDiagnostics>,
) -> Result<Vec<f64>> {
    let samples = lay.reps * lay.particles;
    let dim = 2;
    let mut current = Vec::with_capacity(samples * dim);
    let mut next = Vec::with_capacity(samples * dim);
    for (r, e) in batch.iter().enumerate() {
        for i in 0..lay.particles {
            current.push(e.value(i, k));
            current.push(means[r][k]);
            next.push(e.value(i, k + 1));
            next.push(means[r][k + 1]);
        }
    }
    let problem = CeProblem {
        dim,
        current: &current,
        next: Some(&next),
        values: Some(next_values),
        value_fn: None,
        step_sd: 0.0,
        step: k,
    };
    let est = match backend {
        CeBackend::ExactAffine | CeBackend::Regression { .. } => estimate(backend, &problem)?,
        other => {
            return Err(Error::UnsupportedModel(format!(
                "{} cannot estimate particle-level conditional expectations",
                other.name()
            )))
        }
    };
    if let Some(d) = est.diagnostics {
        diags.push(d);
    }
    Ok(est.values)
}

/// Fits `psi_k = alpha + beta W_k` across replications, if exact.
fn affine_in_mean(psi: &[Vec<f64>], means: &[Vec<f64>], k: usize) -> Option<(f64, f64)> {
    let m = psi.len();
    let w: Vec<f64> = means.iter().map(|p| p[k]).collect();
    let y: Vec<f64> = psi.iter().map(|p| p[k]).collect();
    let wm = w.iter().sum::<f64>() / m as f64;
    let ym = y.iter().sum::<f64>() / m as f64;
    let sww: f64 = w.iter().map(|v| (v - wm).powi(2)).sum();
    let beta = if sww > 0.0 {
        w.iter().zip(&y).map(|(a, b)| (a - wm) * (b - ym)).sum::<f64>() / sww
    } else {
        0.0
    };
    let alpha = ym - beta * wm;
    let scale = y.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let ok = w.iter().zip(&y).all(|(a, b)| (alpha + beta * a - b).abs() <= 1e-9 * scale);
    ok.then_some((alpha, beta))
}

fn markov_model(
    psi: &[Vec<f64>],
    phi: &[Vec<f64>],
    means: &[Vec<f64>],
    grid: &TimeGrid,
    particles: usize,
    first: usize,
    last: usize,
) -> Option<MarkovModel> {
    let nodes = grid.nodes();
    let n = particles as f64;
    let mut mk = MarkovModel {
        state_sd: (0..nodes).map(|k| (grid.time(k) / n).sqrt()).collect(),
        step_sd: vec![(grid.dt() / n).sqrt(); nodes - 1],
        psi_intercept: vec![0.0; nodes],
        psi_slope: vec![0.0; nodes],
        phi_intercept: vec![0.0; nodes],
        phi_slope: vec![0.0; nodes],
    };
    for k in first..=last {
        let (a, b) = affine_in_mean(psi, means, k)?;
        let (c, d) = affine_in_mean(phi, means, k)?;
        mk.psi_intercept[k] = a;
        mk.psi_slope[k] = b;
        mk.phi_intercept[k] = c;
        mk.phi_slope[k] = d;
    }
    Some(mk)
}

struct Sweep {
    y: Vec<f64>,
    u: Option<Vec<f64>>,
    s: Option<Vec<Vec<f64>>>,
    dk_plus: Vec<Vec<f64>>,
    dk_minus: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    fits: Vec<Option<RegressionModel>>,
    value_functions: Vec<Option<GridFunction>>,
    nested_se: Option<Vec<Vec<f64>>>,
}

struct Context<'a> {
    model: &'a ModelSpec,
    batch: &'a [PathEnsemble],
    means: Vec<Vec<f64>>,
    lay: Layout,
    backends: ResolvedBackends,
    obstacle_feature: bool,
    adjustments: Vec<TerminalAdjustment>,
    xi: Vec<Vec<f64>>,
}

impl Context<'_> {
    fn increments(&self, k: usize, y_prev: &[f64]) -> Vec<f64> {
        let d = &self.model.driver;
        let g = &self.model.grid;
        let lay = &self.lay;
        if d.y_independent {
            let inc = d.increment(g, k, 0.0);
            vec![inc; lay.reps * lay.particles]
        } else {
            (0..lay.reps * lay.particles)
                .into_par_iter()
                .map(|s| d.increment(g, k, y_prev[s * lay.nodes + k]))
                .collect()
        }
    }

    /// Gathers node `k` of a flat `(rep, particle, node)` tensor.
    fn gather(&self, data: &[f64], k: usize) -> Vec<f64> {
        let lay = &self.lay;
        (0..lay.reps * lay.particles).map(|s| data[s * lay.nodes + k]).collect()
    }

    fn scatter(&self, data: &mut [f64], k: usize, values: &[f64]) {
        let nodes = self.lay.nodes;
        for (s, v) in values.iter().enumerate() {
            data[s * nodes + k] = *v;
        }
    }

    /// Obstacles per replication at nodes `first..=last` from a flat tensor.
    fn obstacles(&self, data: &[f64], first: usize, last: usize, psi: &mut [Vec<f64>], phi: &mut [Vec<f64>]) -> Result<()> {
        let lay = &self.lay;
        let obs = &self.model.obstacles;
        let loss = &self.model.loss;
        let rows: Vec<Vec<(f64, f64)>> = (0..lay.reps)
            .into_par_iter()
            .map(|r| {
                (first..=last)
                    .map(|k| {
                        let col: Vec<f64> = (0..lay.particles).map(|i| data[lay.at(r, i, k)]).collect();
                        let (a, b) = node_obstacles(&col, loss, obs.lower[k], obs.upper[k])?;
                        Ok((a.x, b.x))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (r, row) in rows.into_iter().enumerate() {
            for (j, (a, b)) in row.into_iter().enumerate() {
                psi[r][first + j] = a;
                phi[r][first + j] = b;
            }
        }
        Ok(())
    }

    /// Terminal values at `last` for a block: `xi + Psi + Phi` at the end of
    /// the horizon, the previously solved `Y` otherwise.
    fn block_terminal(&self, y: &[f64], last: usize) -> Vec<f64> {
        if last == self.lay.nodes - 1 {
            let lay = &self.lay;
            let mut out = Vec::with_capacity(lay.reps * lay.particles);
            for r in 0..lay.reps {
                for i in 0..lay.particles {
                    out.push(self.xi[r][i]);
                }
            }
            out
        } else {
            self.gather(y, last)
        }
    }

    fn construction_sweep(
        &self,
        first: usize,
        last: usize,
        y_prev: &[f64],
        state: &mut Sweep,
        diags: &mut Vec<FitDiagnostics>,
    ) -> Result<()> {
        let lay = &self.lay;
        let end = last == lay.nodes - 1;
        let mut u = state.u.take().unwrap_or_else(|| vec![0.0; y_prev.len()]);
        let terminal = self.block_terminal(y_prev, last);
        self.scatter(&mut u, last, &terminal);
        for k in (first..last).rev() {
            let next = self.gather(&u, k + 1);
            let cont = particle_ce(&self.backends.particle, self.batch, &self.means, lay, k, &next, diags)?;
            let inc = self.increments(k, y_prev);
            let vals: Vec<f64> = cont.iter().zip(&inc).map(|(c, d)| c + d).collect();
            self.scatter(&mut u, k, &vals);
        }
        self.obstacles(&u, first, last, &mut state.psi, &mut state.phi)?;
        let s_terminal: Vec<f64> = if end {
            self.adjustments.iter().map(|a| a.total()).collect()
        } else {
            vec![0.0; lay.reps]
        };
        let markov = match self.backends.common {
            CeBackend::MarkovQuadrature { .. } | CeBackend::NestedMc { .. } => Some(
                markov_model(&state.psi, &state.phi, &self.means, &self.model.grid, lay.particles, first, last)
                    .ok_or_else(|| {
                        Error::UnsupportedModel(
                            "grid-based common-component backends need obstacles affine in the particle mean".into(),
                        )
                    })?,
            ),
            _ => None,
        };
        let problem = StochasticProblem {
            psi: &state.psi,
            phi: &state.phi,
            terminal: &s_terminal,
            state: &self.means,
            first,
            last,
            obstacle_feature: self.obstacle_feature,
            markov: markov.as_ref(),
        };
        let out = stochastic_backward(&problem, &self.backends.common)?;
        let s = state.s.get_or_insert_with(|| vec![vec![0.0; lay.nodes]; lay.reps]);
        for (r, res) in out.reps.iter().enumerate() {
            for k in first..=last {
                s[r][k] = res.d[k];
            }
            for k in first..last {
                state.dk_plus[r][k] = res.dk_plus[k];
                state.dk_minus[r][k] = res.dk_minus[k];
            }
        }
        for k in first..last {
            state.fits[k] = out.fits[k].clone();
        }
        for k in first..=last {
            if out.value_functions[k].is_some() {
                state.value_functions[k] = out.value_functions[k].clone();
            }
        }
        if let Some(se) = out.nested_se {
            state.nested_se = Some(se);
        }
        for f in out.fits.iter().flatten() {
            diags.push(f.diagnostics.clone());
        }
        let s = state.s.as_ref().expect("common component set");
        let y = &mut state.y;
        y.par_chunks_mut(lay.nodes).enumerate().for_each(|(sample, row)| {
            let r = sample / lay.particles;
            for k in first..=last {
                row[k] = u[sample * lay.nodes + k] + s[r][k];
            }
        });
        if end {
            // The terminal node is ξ + Ψ + Φ by definition.
            for r in 0..lay.reps {
                let x = self.adjustments[r].total();
                for i in 0..lay.particles {
                    y[lay.at(r, i, last)] = self.xi[r][i] + x;
                }
            }
        }
        state.u = Some(u);
        Ok(())
    }

    fn direct_sweep(
        &self,
        first: usize,
        last: usize,
        y_prev: &[f64],
        state: &mut Sweep,
        diags: &mut Vec<FitDiagnostics>,
    ) -> Result<()> {
        let lay = &self.lay;
        let loss = &self.model.loss;
        let obs = &self.model.obstacles;
        if last == lay.nodes - 1 {
            let lay_nodes = lay.nodes;
            for r in 0..lay.reps {
                let x = self.adjustments[r].total();
                for i in 0..lay.particles {
                    state.y[lay.at(r, i, last)] = self.xi[r][i] + x;
                }
                let (a, b) = node_obstacles(&self.xi[r], loss, obs.lower[lay_nodes - 1], obs.upper[lay_nodes - 1])?;
                state.psi[r][last] = a.x;
                state.phi[r][last] = b.x;
            }
        }
        for k in (first..last).rev() {
            let next = self.gather(&state.y, k + 1);
            let cont = particle_ce(&self.backends.common, self.batch, &self.means, lay, k, &next, diags)?;
            let inc = self.increments(k, y_prev);
            let cand: Vec<f64> = cont.iter().zip(&inc).map(|(c, d)| c + d).collect();
            let steps: Vec<(ReflectStep, f64, f64)> = (0..lay.reps)
                .into_par_iter()
                .map(|r| {
                    let c = &cand[r * lay.particles..(r + 1) * lay.particles];
                    let (a, b) = node_obstacles(c, loss, obs.lower[k], obs.upper[k])?;
                    Ok((reflect_step(c, loss, obs.lower[k], obs.upper[k])?, a.x, b.x))
                })
                .collect::<Result<_>>()?;
            for (r, (step, a, b)) in steps.into_iter().enumerate() {
                for i in 0..lay.particles {
                    state.y[lay.at(r, i, k)] = step.values[i];
                }
                state.dk_plus[r][k] = step.dk_plus;
                state.dk_minus[r][k] = step.dk_minus;
                state.psi[r][k] = a;
                state.phi[r][k] = b;
            }
        }
        Ok(())
    }
}

fn sup_distance(a: &[f64], b: &[f64], lay: &Layout, first: usize, last: usize) -> f64 {
    (0..lay.reps * lay.particles)
        .map(|s| {
            (first..=last)
                .map(|k| (a[s * lay.nodes + k] - b[s * lay.nodes + k]).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Solves the particle system for every replication of the batch.
pub fn solve_ips(model: &ModelSpec, batch: &[PathEnsemble], config: &SolverConfig) -> Result<BatchSolution> {
    let lay = check_batch(model, batch)?;
    if config.mode == Mode::Linear && !model.loss.is_linear() {
        return Err(Error::UnsupportedModel("linear mode requires a linear loss".into()));
    }
    if model.obstacles.len() != lay.nodes {
        return Err(invalid("obstacle arrays do not match the grid"));
    }
    let backends = resolve_backends(model, config);
    let schedule = config
        .schedule
        .unwrap_or_else(|| picard_schedule(&model.driver, &model.loss, &model.grid));
    let obstacle_feature = match backends.common {
        CeBackend::Regression { features, .. } => match features {
            FeatureSet::Auto => !model.loss.is_linear(),
            FeatureSet::CommonMean => false,
            FeatureSet::CommonMeanAndObstacle => true,
        },
        _ => false,
    };
    let n = model.grid.steps();
    let xi: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|e| (0..e.particles()).map(|i| model.terminal.eval(e.row(i))).collect())
        .collect();
    let adjustments: Vec<TerminalAdjustment> = xi
        .iter()
        .map(|x| terminal_adjustments(x, &model.loss, model.obstacles.lower[n], model.obstacles.upper[n]))
        .collect::<Result<_>>()?;
    let ctx = Context {
        model,
        batch,
        means: batch.iter().map(|e| e.mean_path()).collect(),
        lay,
        backends: backends.clone(),
        obstacle_feature,
        adjustments,
        xi,
    };
    let lay = &ctx.lay;
    let total = lay.reps * lay.particles * lay.nodes;
    let mut state = Sweep {
        y: vec![0.0; total],
        u: None,
        s: None,
        dk_plus: vec![vec![0.0; n]; lay.reps],
        dk_minus: vec![vec![0.0; n]; lay.reps],
        psi: vec![vec![0.0; lay.nodes]; lay.reps],
        phi: vec![vec![0.0; lay.nodes]; lay.reps],
        fits: vec![None; lay.nodes],
        value_functions: vec![None; lay.nodes],
        nested_se: None,
    };
    let mut diags = Vec::new();
    let blocks = if model.driver.y_independent {
        vec![(0, n)]
    } else {
        schedule.blocks(&model.grid)
    };
    let mut reports = Vec::new();
    for &(first, last) in &blocks {
        let mut distances = Vec::new();
        let mut iterations = 0;
        loop {
            let y_prev = state.y.clone();
            match config.variant {
                Variant::Construction => ctx.construction_sweep(first, last, &y_prev, &mut state, &mut diags)?,
                Variant::Direct => ctx.direct_sweep(first, last, &y_prev, &mut state, &mut diags)?,
            }
            iterations += 1;
            if model.driver.y_independent {
                break;
            }
            let d = sup_distance(&state.y, &y_prev, lay, first, last.saturating_sub(1).max(first));
            distances.push(d);
            if d <= schedule.tolerance {
                break;
            }
            if iterations >= schedule.max_iterations {
                return Err(Error::NoConvergence {
                    iterations,
                    distance: d,
                });
            }
        }
        reports.push(BlockReport {
            first,
            last,
            iterations,
            distances,
        });
    }

    let reps = (0..lay.reps)
        .map(|r| assemble(&ctx, &state, r, config))
        .collect::<Vec<_>>();
    Ok(BatchSolution {
        reps,
        backends,
        schedule,
        blocks: reports,
        continuation_fits: state.fits,
        value_functions: state.value_functions,
        nested_se: state.nested_se,
        fit_diagnostics: diags,
        obstacle_feature,
    })
}

fn assemble(ctx: &Context, state: &Sweep, r: usize, config: &SolverConfig) -> ReflectedSolution {
    let lay = &ctx.lay;
    let model = ctx.model;
    let width = lay.particles * lay.nodes;
    let y = state.y[r * width..(r + 1) * width].to_vec();
    let u = state.u.as_ref().map(|u| u[r * width..(r + 1) * width].to_vec());
    let s = state.s.as_ref().map(|s| s[r].clone());
    let obstacles = ObstaclePaths::new(state.psi[r].clone(), state.phi[r].clone(), ObstacleKind::Empirical);
    let sol = ReflectedSolution {
        particles: lay.particles,
        y,
        u,
        s,
        dk_plus: state.dk_plus[r].clone(),
        dk_minus: state.dk_minus[r].clone(),
        adjustment: ctx.adjustments[r],
        obstacles,
        xi: ctx.xi[r].clone(),
        diagnostics: SolutionDiagnostics {
            constraint_violation: 0.0,
            flat_off_lower: 0.0,
            flat_off_upper: 0.0,
            martingale_residual: None,
            terminal_identity_error: 0.0,
        },
    };
    let mut sol = sol;
    sol.diagnostics = diagnostics(model, &sol, config.mode == Mode::Nonlinear);
    sol
}

fn diagnostics(model: &ModelSpec, sol: &ReflectedSolution, martingale: bool) -> SolutionDiagnostics {
    let n = model.grid.steps();
    let obs = &model.obstacles;
    let mut violation: f64 = 0.0;
    let mut flat_lo = 0.0;
    let mut flat_hi = 0.0;
    for k in 0..=n {
        let m = mean_loss(&sol.column(k), &model.loss);
        violation = violation.max(obs.lower[k] - m).max(m - obs.upper[k]);
        if k < n {
            flat_lo += (m - obs.lower[k]) * sol.dk_plus[k];
            flat_hi += (obs.upper[k] - m) * sol.dk_minus[k];
        }
    }
    let x = sol.adjustment.total();
    let terminal_identity_error = (0..sol.particles)
        .map(|i| (sol.value(i, n) - sol.xi[i] - x).abs())
        .fold(0.0, f64::max);
    let martingale_residual = martingale.then(|| {
        (0..n)
            .map(|k| {
                let mean: f64 = (0..sol.particles)
                    .map(|i| martingale_increment(model, sol, i, k))
                    .sum::<f64>()
                    / sol.particles as f64;
                mean.abs()
            })
            .fold(0.0, f64::max)
    });
    SolutionDiagnostics {
        constraint_violation: violation.max(0.0),
        flat_off_lower: flat_lo,
        flat_off_upper: flat_hi,
        martingale_residual,
        terminal_identity_error,
    }
}

/// `Y_{k+1} - Y_k + f increment + dK+ - dK-`.
pub fn martingale_increment(model: &ModelSpec, sol: &ReflectedSolution, i: usize, k: usize) -> f64 {
    let y0 = sol.value(i, k);
    sol.value(i, k + 1) - y0 + model.driver.increment(&model.grid, k, y0) + sol.dk_plus[k] - sol.dk_minus[k]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralCheck {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralReport {
    pub checks: Vec<StructuralCheck>,
}

impl StructuralReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// The invariants every solve must satisfy, worst case over replications.
pub fn structural_checks(model: &ModelSpec, solution: &BatchSolution, tol: f64) -> StructuralReport {
    let n = model.grid.steps();
    let obs = &model.obstacles;
    let gamma_u = model.loss.gamma_u();
    let band = (0..=n).map(|k| obs.upper[k] - obs.lower[k]).fold(0.0, f64::max);
    let mut product: f64 = 0.0;
    let mut ordering: f64 = f64::NEG_INFINITY;
    let mut separation: f64 = f64::INFINITY;
    let mut violation: f64 = 0.0;
    let mut flat: f64 = 0.0;
    let mut k_negative: f64 = 0.0;
    let mut k_double: f64 = 0.0;
    let mut identity: f64 = 0.0;
    let mut identity_scale: f64 = 1.0;
    for sol in &solution.reps {
        let a = sol.adjustment;
        product = product.max((a.psi * a.phi).abs());
        let x = a.total();
        let p = &sol.obstacles;
        ordering = ordering.max(p.psi[n] - x).max(x - p.phi[n]);
        separation = separation.min(p.separation_margin(obs, gamma_u));
        violation = violation.max(sol.diagnostics.constraint_violation);
        flat = flat
            .max(sol.diagnostics.flat_off_lower.abs())
            .max(sol.diagnostics.flat_off_upper.abs());
        for k in 0..n {
            k_negative = k_negative.max(-sol.dk_plus[k]).max(-sol.dk_minus[k]);
            k_double = k_double.max(sol.dk_plus[k] * sol.dk_minus[k]);
        }
        identity = identity.max(sol.diagnostics.terminal_identity_error);
        identity_scale = sol.xi.iter().fold(identity_scale, |s, v| s.max(v.abs()));
    }
    let check = |name: &str, value: f64, bound: f64| StructuralCheck {
        name: name.to_string(),
        passed: value <= bound,
        value,
        bound,
    };
    StructuralReport {
        checks: vec![
            check("terminal_adjustment_product", product, 0.0),
            check("terminal_ordering", ordering, 1e-12),
            check("separation", -separation, 1e-9),
            check("constraint_band", violation, tol),
            check("flat_off", flat, n as f64 * tol * band.max(1.0)),
            check("k_nonnegative", k_negative, 0.0),
            check("k_no_double_reflection", k_double, 0.0),
            check("terminal_identity", identity, 4.0 * f64::EPSILON * identity_scale),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZEstimate {
    /// Mean fitted own-coordinate `Z^{i,i}` per step.
    pub diagonal: Vec<f64>,
    /// Mean fitted off-diagonal norm `(sum_{j != i} |Z^{i,j}|^2)^{1/2}` per step.
    pub off_diagonal: Vec<f64>,
    /// `sum_k dt [(Z^{1,1}_k - z_k)^2 + off_k^2]` per replication for particle 1.
    pub z_l2: Vec<f64>,
}

/// Regression estimates of `Z^{i,j}_k = E[dM^i_k dB^j_k | F_k] / dt`, using
/// exchangeability to aggregate the off-diagonal coordinates. `limit_z`
/// gives the reference integrand of particle 1 per step.
pub fn estimate_z(
    model: &ModelSpec,
    batch: &[PathEnsemble],
    solution: &BatchSolution,
    degree: usize,
    limit_z: &[f64],
) -> Result<ZEstimate> {
    let lay = check_batch(model, batch)?;
    let n = model.grid.steps();
    if limit_z.len() != n {
        return Err(invalid("limit Z needs one value per step"));
    }
    let dt = model.grid.dt();
    let np = lay.particles;
    let samples = lay.reps * np;
    let mut diagonal = Vec::with_capacity(n);
    let mut off_diagonal = Vec::with_capacity(n);
    let mut z_l2 = vec![0.0; lay.reps];
    for k in 0..n {
        let mut states = Vec::with_capacity(samples * 2);
        let mut own = Vec::with_capacity(samples);
        let mut cross = Vec::with_capacity(samples);
        for (r, e) in batch.iter().enumerate() {
            let sol = &solution.reps[r];
            let db = e.increments_of(k)?;
            let total: f64 = db.iter().sum();
            let w = e.mean_path()[k];
            for i in 0..np {
                let dm = martingale_increment(model, sol, i, k);
                states.push(e.value(i, k));
                states.push(w);
                own.push(dm * db[i] / dt);
                cross.push(dm * (total - db[i]) / dt);
            }
        }
        let fit_d = RegressionModel::fit(&states, 2, &own, degree)?;
        let pd = fit_d.predict_all(&states);
        let norm = if np > 1 { ((np - 1) as f64).sqrt() } else { 1.0 };
        let po: Vec<f64> = if np > 1 {
            let fit_o = RegressionModel::fit(&states, 2, &cross, degree)?;
            fit_o.predict_all(&states).iter().map(|z| z.abs() / norm).collect()
        } else {
            vec![0.0; samples]
        };
        diagonal.push(pd.iter().sum::<f64>() / samples as f64);
        off_diagonal.push(po.iter().sum::<f64>() / samples as f64);
        for r in 0..lay.reps {
            let s = r * np;
            z_l2[r] += dt * ((pd[s] - limit_z[k]).powi(2) + po[s].powi(2));
        }
    }
    Ok(ZEstimate {
        diagonal,
        off_diagonal,
        z_l2,
    })
}

/// Monte Carlo value of the Dynkin stopping rules implied by the fitted
/// continuations, on fresh independent systems of `particles` particles.
///
/// The maximiser stops at the first step where the continuation falls to
/// `psi`, the minimiser where it reaches `phi`. Requires the closed-form
/// particle paths of the affine class.
pub fn dynkin_policy_value(
    model: &ModelSpec,
    solution: &BatchSolution,
    particles: usize,
    inner_samples: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    let (c, d) = match model.terminal {
        TerminalFunctional::Affine { c, d } if model.is_reference_class() => (c, d),
        _ => {
            return Err(Error::UnsupportedModel(
                "policy evaluation needs an affine terminal and a deterministic driver".into(),
            ))
        }
    };
    let grid = model.grid;
    let n = grid.steps();
    let tails = model.driver.tail_integrals(&grid);
    let rule = normal_quadrature(32)?;
    let step_sd = (grid.dt() / particles as f64).sqrt();
    let continuation = |k: usize, w: f64, psi: f64| -> Option<f64> {
        if let Some(fit) = &solution.continuation_fits[k] {
            let state = if solution.obstacle_feature { vec![w, psi] } else { vec![w] };
            Some(fit.predict(&state))
        } else {
            solution.value_functions[k + 1]
                .as_ref()
                .map(|g| rule.iter().map(|(z, p)| p * g.eval(w + step_sd * z)).sum())
        }
    };
    if (0..n).any(|k| continuation(k, 0.0, 0.0).is_none()) {
        return Err(invalid("solution carries no continuation estimates"));
    }
    let loss = &model.loss;
    let obs = &model.obstacles;
    let payoff = |paths: &PathEnsemble| -> f64 {
        let w = paths.mean_path();
        let mut value = None;
        for k in 0..n {
            let u: Vec<f64> = (0..particles).map(|i| c * paths.value(i, k) + d + tails[k]).collect();
            let Ok((lo, hi)) = node_obstacles(&u, loss, obs.lower[k], obs.upper[k]) else {
                return f64::NAN;
            };
            let cont = continuation(k, w[k], lo.x).unwrap_or(f64::NAN);
            if cont <= lo.x {
                value = Some(lo.x);
                break;
            }
            if cont >= hi.x {
                value = Some(hi.x);
                break;
            }
        }
        value.unwrap_or_else(|| {
            let xi: Vec<f64> = (0..particles).map(|i| c * paths.value(i, n) + d).collect();
            terminal_adjustments(&xi, loss, obs.lower[n], obs.upper[n])
                .map(|a| a.total())
                .unwrap_or(f64::NAN)
        })
    };
    let start = PathEnsemble::from_values(&grid, vec![0.0; particles * grid.nodes()], seed)?;
    let est = crate::condexp::nested_oracle(model, &start, 0, &payoff, inner_samples, seed)?;
    if !est.mean.is_finite() {
        return Err(Error::NoRoot("policy payoff could not be evaluated".into()));
    }
    Ok(est)
}
