//! Problem instances: time grid, obstacles, loss function, driver and
//! terminal functional, plus the spot-check validator.

mod schema;

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Result};

pub use schema::{DriverConfig, LossConfig, ModelConfig, ObstacleConfig, TerminalConfig};

/// Uniform grid `t_k = k T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `n + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Lower/upper obstacles sampled on the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObstaclePair {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ObstaclePair {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn constant(grid: &TimeGrid, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; grid.nodes()],
            upper: vec![upper; grid.nodes()],
        }
    }

    /// Samples the obstacle callables once onto the grid.
    pub fn from_fns(grid: &TimeGrid, lower: impl Fn(f64) -> f64, upper: impl Fn(f64) -> f64) -> Self {
        let times = grid.times();
        Self {
            lower: times.iter().map(|&t| lower(t)).collect(),
            upper: times.iter().map(|&t| upper(t)).collect(),
        }
    }

    /// `min_k (u_k - l_k)`.
    pub fn separation(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A non-linear, strictly increasing loss with declared bi-Lipschitz bounds.
#[derive(Clone)]
pub struct GeneralLoss {
    pub name: String,
    h: ScalarFn,
    pub gamma_l: f64,
    pub gamma_u: f64,
    first: Option<ScalarFn>,
    second: Option<ScalarFn>,
}

/// The function `h` inside the mean constraint `l <= E[h(Y)] <= u`.
#[derive(Clone)]
pub enum LossFunction {
    Linear { a: f64, b: f64 },
    General(GeneralLoss),
}

impl LossFunction {
    pub fn linear(a: f64, b: f64) -> Self {
        LossFunction::Linear { a, b }
    }

    /// `h(x) = x + A sin x`, bi-Lipschitz with constants `1 - |A|`, `1 + |A|`.
    pub fn sin_perturbed(amplitude: f64) -> Self {
        let first = move |x: f64| 1.0 + amplitude * x.cos();
        let second = move |x: f64| -amplitude * x.sin();
        LossFunction::General(GeneralLoss {
            name: format!("x + {amplitude} sin x"),
            h: Arc::new(move |x| x + amplitude * x.sin()),
            gamma_l: 1.0 - amplitude.abs(),
            gamma_u: 1.0 + amplitude.abs(),
            first: Some(Arc::new(first)),
            second: Some(Arc::new(second)),
        })
    }

    pub fn general(
        name: impl Into<String>,
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        gamma_l: f64,
        gamma_u: f64,
    ) -> Self {
        LossFunction::General(GeneralLoss {
            name: name.into(),
            h: Arc::new(h),
            gamma_l,
            gamma_u,
            first: None,
            second: None,
        })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            LossFunction::Linear { a, b } => a * x + b,
            LossFunction::General(g) => (g.h)(x),
        }
    }

    pub fn gamma_l(&self) -> f64 {
        match self {
            LossFunction::Linear { a, .. } => *a,
            LossFunction::General(g) => g.gamma_l,
        }
    }

    pub fn gamma_u(&self) -> f64 {
        match self {
            LossFunction::Linear { a, .. } => *a,
            LossFunction::General(g) => g.gamma_u,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LossFunction::Linear { .. })
    }

    pub fn derivative(&self, x: f64) -> Option<f64> {
        match self {
            LossFunction::Linear { a, .. } => Some(*a),
            LossFunction::General(g) => g.first.as_ref().map(|d| d(x)),
        }
    }

    pub fn second_derivative(&self, x: f64) -> Option<f64> {
        match self {
            LossFunction::Linear { .. } => Some(0.0),
            LossFunction::General(g) => g.second.as_ref().map(|d| d(x)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            LossFunction::Linear { a, b } => format!("{a} x + {b}"),
            LossFunction::General(g) => g.name.clone(),
        }
    }
}

impl fmt::Debug for LossFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossFunction::Linear { a, b } => f.debug_struct("Linear").field("a", a).field("b", b).finish(),
            LossFunction::General(g) => f
                .debug_struct("General")
                .field("name", &g.name)
                .field("gamma_l", &g.gamma_l)
                .field("gamma_u", &g.gamma_u)
                .finish(),
        }
    }
}

type DriverFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Generator `f(t, y)` of the backward dynamics.
#[derive(Clone)]
pub struct Driver {
    pub name: String,
    f: DriverFn,
    pub lipschitz: f64,
    pub y_independent: bool,
    pub deterministic: bool,
}

impl Driver {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        lipschitz: f64,
        y_independent: bool,
        deterministic: bool,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            lipschitz,
            y_independent,
            deterministic,
        }
    }

    pub fn zero() -> Self {
        Self::new("0", |_, _| 0.0, 0.0, true, true)
    }

    pub fn constant(value: f64) -> Self {
        Self::new(format!("{value}"), move |_, _| value, 0.0, true, true)
    }

    /// `f(t) = scale cos t`.
    pub fn cosine(scale: f64) -> Self {
        Self::new(format!("{scale} cos t"), move |t, _| scale * t.cos(), 0.0, true, true)
    }

    /// `f(t, y) = slope y + cos_scale cos t + constant`.
    pub fn affine_y(slope: f64, cos_scale: f64, constant: f64) -> Self {
        Self::new(
            format!("{slope} y + {cos_scale} cos t + {constant}"),
            move |t, y| slope * y + cos_scale * t.cos() + constant,
            slope.abs(),
            slope == 0.0,
            slope == 0.0,
        )
    }

    /// `f(t, y) = scale sin y + cos_scale cos t`.
    pub fn sin_y(scale: f64, cos_scale: f64) -> Self {
        Self::new(
            format!("{scale} sin y + {cos_scale} cos t"),
            move |t, y| scale * y.sin() + cos_scale * t.cos(),
            scale.abs(),
            scale == 0.0,
            scale == 0.0,
        )
    }

    #[inline]
    pub fn eval(&self, t: f64, y: f64) -> f64 {
        (self.f)(t, y)
    }

    /// Driver contribution over `[t_k, t_{k+1}]`.
    ///
    /// A y-independent driver is integrated with the trapezoid rule (the
    /// same rule the reference solution uses), a y-dependent one is
    /// evaluated explicitly at the left node.
    #[inline]
    pub fn increment(&self, grid: &TimeGrid, k: usize, y: f64) -> f64 {
        let dt = grid.dt();
        if self.y_independent {
            0.5 * (self.eval(grid.time(k), 0.0) + self.eval(grid.time(k + 1), 0.0)) * dt
        } else {
            self.eval(grid.time(k), y) * dt
        }
    }

    /// `sum_{j >= k} increment(j)` for a y-independent driver, per node.
    pub fn tail_integrals(&self, grid: &TimeGrid) -> Vec<f64> {
        let n = grid.steps();
        let mut tails = vec![0.0; n + 1];
        for k in (0..n).rev() {
            tails[k] = tails[k + 1] + self.increment(grid, k, 0.0);
        }
        tails
    }
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .field("y_independent", &self.y_independent)
            .finish()
    }
}

type PathFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Terminal datum `xi = G(B)`.
#[derive(Clone)]
pub enum TerminalFunctional {
    /// `xi = c B_T + d`.
    Affine { c: f64, d: f64 },
    PathDependent { name: String, g: PathFn },
}

impl TerminalFunctional {
    pub fn affine(c: f64, d: f64) -> Self {
        TerminalFunctional::Affine { c, d }
    }

    pub fn path_dependent(name: impl Into<String>, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        TerminalFunctional::PathDependent {
            name: name.into(),
            g: Arc::new(g),
        }
    }

    /// Evaluates the functional on one Brownian path sampled on the grid.
    pub fn eval(&self, path: &[f64]) -> f64 {
        match self {
            TerminalFunctional::Affine { c, d } => c * path[path.len() - 1] + d,
            TerminalFunctional::PathDependent { g, .. } => g(path),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, TerminalFunctional::Affine { .. })
    }

    pub fn describe(&self) -> String {
        match self {
            TerminalFunctional::Affine { c, d } => format!("{c} B_T + {d}"),
            TerminalFunctional::PathDependent { name, .. } => name.clone(),
        }
    }
}

impl fmt::Debug for TerminalFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalFunctional::Affine { c, d } => f.debug_struct("Affine").field("c", c).field("d", d).finish(),
            TerminalFunctional::PathDependent { name, .. } => f.debug_tuple("PathDependent").field(name).finish(),
        }
    }
}

/// A full problem instance.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub grid: TimeGrid,
    pub obstacles: ObstaclePair,
    pub loss: LossFunction,
    pub driver: Driver,
    pub terminal: TerminalFunctional,
}

impl ModelSpec {
    pub fn new(
        grid: TimeGrid,
        obstacles: ObstaclePair,
        loss: LossFunction,
        driver: Driver,
        terminal: TerminalFunctional,
    ) -> Self {
        Self {
            grid,
            obstacles,
            loss,
            driver,
            terminal,
        }
    }

    /// Affine terminal and a deterministic, y-independent driver: the class
    /// with a closed-form limit solution.
    pub fn is_reference_class(&self) -> bool {
        self.terminal.is_affine() && self.driver.y_independent && self.driver.deterministic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ObstacleLength,
    NonFinite,
    Separation,
    LossParameters,
    BiLipschitz,
    DriverLipschitz,
    DriverFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<[f64; 2]>,
}

/// Every violated invariant of a [`ModelSpec`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, message: String, node: Option<usize>, sample: Option<[f64; 2]>) {
        self.violations.push(Violation {
            kind,
            message,
            node,
            sample,
        });
    }
}

/// Sampling parameters for the bi-Lipschitz and driver spot-checks.
#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    pub interval: (f64, f64),
    pub pairs: usize,
    pub rel_tol: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            interval: (-10.0, 10.0),
            pairs: 256,
            rel_tol: 1e-9,
        }
    }
}

// R2 low-discrepancy sequence (additive recurrence on the plastic number).
const R2_A1: f64 = 0.754_877_666_246_692_7;
const R2_A2: f64 = 0.569_840_290_998_053_2;

/// Quasi-random sample pairs on the interval. Even indices are wide pairs,
/// odd indices are close pairs that probe the local slope.
pub fn sample_pairs(opts: &ValidationOptions) -> Vec<(f64, f64)> {
    let (lo, hi) = opts.interval;
    let width = hi - lo;
    (0..opts.pairs)
        .map(|i| {
            let s = (i / 2 + 1) as f64;
            let u = (0.5 + s * R2_A1).fract();
            let v = (0.5 + s * R2_A2).fract();
            let x = lo + width * u;
            if i % 2 == 0 {
                (x, lo + width * v)
            } else {
                (x, (x + width * 1e-3 * (0.5 + v)).min(hi))
            }
        })
        .filter(|(x, y)| x != y)
        .map(|(x, y)| if x < y { (x, y) } else { (y, x) })
        .collect()
}

pub fn validate_model(spec: &ModelSpec) -> ValidationReport {
    validate_model_with(spec, &ValidationOptions::default())
}

pub fn validate_model_with(spec: &ModelSpec, opts: &ValidationOptions) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nodes = spec.grid.nodes();
    let obs = &spec.obstacles;

    if obs.lower.len() != nodes || obs.upper.len() != nodes {
        report.push(
            ViolationKind::ObstacleLength,
            format!(
                "obstacle arrays have lengths ({}, {}), grid has {nodes} nodes",
                obs.lower.len(),
                obs.upper.len()
            ),
            None,
            None,
        );
    }
    for (k, (l, u)) in obs.lower.iter().zip(&obs.upper).enumerate() {
        if !(l.is_finite() && u.is_finite()) {
            report.push(
                ViolationKind::NonFinite,
                format!("non-finite obstacle value at node {k}"),
                Some(k),
                None,
            );
        }
    }

    let gaps: Vec<f64> = obs.lower.iter().zip(&obs.upper).map(|(l, u)| u - l).collect();
    let bad: Vec<usize> = gaps.iter().enumerate().filter(|(_, g)| !(**g > 0.0)).map(|(k, _)| k).collect();
    if !bad.is_empty() && bad.len() == gaps.len() {
        let delta = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        report.push(
            ViolationKind::Separation,
            format!("separation δ={delta} at every node"),
            None,
            None,
        );
    } else {
        for k in bad {
            report.push(
                ViolationKind::Separation,
                format!("separation δ={} at node {k}", gaps[k]),
                Some(k),
                None,
            );
        }
    }

    check_loss(&spec.loss, opts, &mut report);
    check_driver(spec, opts, &mut report);
    report
}

fn check_loss(loss: &LossFunction, opts: &ValidationOptions, report: &mut ValidationReport) {
    match loss {
        LossFunction::Linear { a, b } => {
            if !(a.is_finite() && *a > 0.0 && b.is_finite()) {
                report.push(
                    ViolationKind::LossParameters,
                    format!("linear loss needs a > 0 and finite b, got a={a}, b={b}"),
                    None,
                    None,
                );
            }
        }
        LossFunction::General(g) => {
            if !(g.gamma_l > 0.0 && g.gamma_u >= g.gamma_l && g.gamma_u.is_finite()) {
                report.push(
                    ViolationKind::LossParameters,
                    format!("need 0 < gamma_l <= gamma_u, got ({}, {})", g.gamma_l, g.gamma_u),
                    None,
                    None,
                );
                return;
            }
            for (x, y) in sample_pairs(opts) {
                let dh = loss.eval(y) - loss.eval(x);
                let dx = y - x;
                let lower = g.gamma_l * dx;
                let upper = g.gamma_u * dx;
                let slack = opts.rel_tol * upper.abs();
                if !dh.is_finite() || dh < lower - slack || dh > upper + slack {
                    report.push(
                        ViolationKind::BiLipschitz,
                        format!(
                            "h({y}) - h({x}) = {dh} outside [{lower}, {upper}] for gamma bounds ({}, {})",
                            g.gamma_l, g.gamma_u
                        ),
                        None,
                        Some([x, y]),
                    );
                }
            }
        }
    }
}

fn check_driver(spec: &ModelSpec, opts: &ValidationOptions, report: &mut ValidationReport) {
    let driver = &spec.driver;
    if !(driver.lipschitz.is_finite() && driver.lipschitz >= 0.0) {
        report.push(
            ViolationKind::DriverLipschitz,
            format!("Lipschitz constant must be nonnegative, got {}", driver.lipschitz),
            None,
            None,
        );
        return;
    }
    let times = spec.grid.times();
    for (i, (y1, y2)) in sample_pairs(opts).into_iter().enumerate().step_by(4) {
        let t = times[i % times.len()];
        let df = (driver.eval(t, y1) - driver.eval(t, y2)).abs();
        let bound = driver.lipschitz * (y2 - y1).abs();
        if !df.is_finite() || df > bound * (1.0 + opts.rel_tol) + 1e-12 {
            let kind = if driver.y_independent {
                ViolationKind::DriverFlags
            } else {
                ViolationKind::DriverLipschitz
            };
            report.push(
                kind,
                format!("|f({t},{y1}) - f({t},{y2})| = {df} exceeds L|y-y'| = {bound}"),
                None,
                Some([y1, y2]),
            );
        }
    }
}
