//! Monotone root equations `(1/N) sum_i h(v_i + x) = target` and the
//! shift quantities built on them.

use std::io::Write;
use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{LossFunction, ObstaclePair, TimeGrid};

/// Bracket growth limit relative to the problem scale.
pub const BRACKET_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftResult {
    pub x: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Root tolerance used by the general-loss solver.
pub fn root_tolerance(target: f64) -> f64 {
    1e-12 * target.abs().max(1.0)
}

#[inline]
fn mean_h(values: &[f64], loss: &LossFunction, x: f64) -> f64 {
    values.iter().map(|v| loss.eval(v + x)).sum::<f64>() / values.len() as f64
}

/// Bracketing bisection for an increasing scalar map `g` with root `g(x) = 0`.
fn bisect(g: impl Fn(f64) -> f64, x0: f64, step0: f64, scale: f64, tol: f64) -> Result<ShiftResult> {
    let mut iterations = 1;
    let g0 = g(x0);
    if !g0.is_finite() {
        return Err(Error::NoRoot(format!("non-finite mean loss at x={x0}")));
    }
    if g0.abs() <= tol {
        return Ok(ShiftResult {
            x: x0,
            residual: g0,
            iterations,
        });
    }
    let limit = BRACKET_LIMIT * scale;
    let dir = if g0 < 0.0 { 1.0 } else { -1.0 };
    let mut step = step0.max(f64::EPSILON * scale);
    let (mut lo, mut hi, mut g_lo, mut g_hi);
    let mut inner = (x0, g0);
    loop {
        let x1 = x0 + dir * step;
        let g1 = g(x1);
        iterations += 1;
        if !g1.is_finite() {
            return Err(Error::NoRoot(format!("non-finite mean loss at x={x1}")));
        }
        if g1.abs() <= tol {
            return Ok(ShiftResult {
                x: x1,
                residual: g1,
                iterations,
            });
        }
        if (g1 > 0.0) == (dir > 0.0) {
            if dir > 0.0 {
                (lo, g_lo, hi, g_hi) = (inner.0, inner.1, x1, g1);
            } else {
                (lo, g_lo, hi, g_hi) = (x1, g1, inner.0, inner.1);
            }
            break;
        }
        if (g1 - inner.1) * dir <= 0.0 && step > 1.0 {
            // The map stopped increasing along the search direction.
            return Err(Error::NoRoot(format!(
                "mean loss is not increasing between x={} and x={x1}",
                inner.0
            )));
        }
        inner = (x1, g1);
        step *= 2.0;
        if step > limit {
            return Err(Error::NoRoot(format!(
                "bracket exceeded width {limit:e} without a sign change"
            )));
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            let (x, r) = if g_lo.abs() <= g_hi.abs() { (lo, g_lo) } else { (hi, g_hi) };
            return Ok(ShiftResult {
                x,
                residual: r,
                iterations,
            });
        }
        let gm = g(mid);
        iterations += 1;
        if gm.abs() <= tol {
            return Ok(ShiftResult {
                x: mid,
                residual: gm,
                iterations,
            });
        }
        if gm < 0.0 {
            lo = mid;
            g_lo = gm;
        } else {
            hi = mid;
            g_hi = gm;
        }
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(invalid("shift equation needs at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("shift equation values must be finite"));
    }
    Ok(())
}

/// Solves `(1/N) sum_i h(v_i + x) = target`.
pub fn solve_shift(values: &[f64], loss: &LossFunction, target: f64) -> Result<ShiftResult> {
    check_values(values)?;
    match loss {
        LossFunction::Linear { a, b } => {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            Ok(ShiftResult {
                x: (target - b) / a - mean,
                residual: 0.0,
                iterations: 0,
            })
        }
        LossFunction::General(_) => {
            let m0 = mean_h(values, loss, 0.0);
            let scale = values.iter().fold(target.abs().max(1.0), |s, v| s.max(v.abs()));
            let x0 = (target - m0) / loss.gamma_u();
            let step0 = (target - mean_h(values, loss, x0)).abs() / loss.gamma_l() + 1e-3 * scale;
            bisect(
                |x| mean_h(values, loss, x) - target,
                x0,
                step0,
                scale,
                root_tolerance(target),
            )
        }
    }
}

/// Solves `sum_j w_j h(v_j + x) = target` for probability weights `w`.
pub fn solve_shift_weighted(nodes: &[f64], weights: &[f64], loss: &LossFunction, target: f64) -> Result<ShiftResult> {
    check_values(nodes)?;
    if nodes.len() != weights.len() {
        return Err(invalid("nodes and weights differ in length"));
    }
    let total: f64 = weights.iter().sum();
    let wmean = |x: f64| nodes.iter().zip(weights).map(|(v, w)| w * loss.eval(v + x)).sum::<f64>() / total;
    match loss {
        LossFunction::Linear { a, b } => {
            let mean = nodes.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
            Ok(ShiftResult {
                x: (target - b) / a - mean,
                residual: 0.0,
                iterations: 0,
            })
        }
        LossFunction::General(_) => {
            let scale = nodes.iter().fold(target.abs().max(1.0), |s, v| s.max(v.abs()));
            let x0 = (target - wmean(0.0)) / loss.gamma_u();
            let step0 = (target - wmean(x0)).abs() / loss.gamma_l() + 1e-3 * scale;
            bisect(|x| wmean(x) - target, x0, step0, scale, root_tolerance(target))
        }
    }
}

/// Minimal upward/downward terminal shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalAdjustment {
    #[serde(rename = "Psi")]
    pub psi: f64,
    #[serde(rename = "Phi")]
    pub phi: f64,
}

impl TerminalAdjustment {
    pub fn total(&self) -> f64 {
        self.psi + self.phi
    }
}

pub fn terminal_adjustments(xi: &[f64], loss: &LossFunction, l_t: f64, u_t: f64) -> Result<TerminalAdjustment> {
    check_values(xi)?;
    if !(u_t > l_t) {
        return Err(invalid(format!("terminal band [{l_t}, {u_t}] is empty")));
    }
    let m = mean_h(xi, loss, 0.0);
    if m < l_t {
        let x = solve_shift(xi, loss, l_t)?.x;
        Ok(TerminalAdjustment {
            psi: x.max(0.0),
            phi: 0.0,
        })
    } else if m > u_t {
        let x = solve_shift(xi, loss, u_t)?.x;
        Ok(TerminalAdjustment {
            psi: 0.0,
            phi: x.min(0.0),
        })
    } else {
        Ok(TerminalAdjustment { psi: 0.0, phi: 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Empirical,
    Limit,
}

/// Obstacle processes in state units, one value per grid node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObstaclePaths {
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub kind: ObstacleKind,
    pub max_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrature_order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrature_error: Option<f64>,
}

impl ObstaclePaths {
    /// Wraps given obstacle arrays (for tests and the deterministic solvers).
    pub fn new(psi: Vec<f64>, phi: Vec<f64>, kind: ObstacleKind) -> Self {
        Self {
            psi,
            phi,
            kind,
            max_residual: 0.0,
            quadrature_order: None,
            quadrature_error: None,
        }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// `min_k [(phi_k - psi_k) - (u_k - l_k)/gamma_u]`; nonnegative when the
    /// separation bound holds.
    pub fn separation_margin(&self, obstacles: &ObstaclePair, gamma_u: f64) -> f64 {
        (0..self.len())
            .map(|k| (self.phi[k] - self.psi[k]) - (obstacles.upper[k] - obstacles.lower[k]) / gamma_u)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,t,psi,phi")?;
        for k in 0..self.len() {
            writeln!(out, "{k},{},{},{}", grid.time(k), self.psi[k], self.phi[k])?;
        }
        Ok(())
    }
}

/// `(psi_k, phi_k)` at one node from the particle values there.
pub fn node_obstacles(values: &[f64], loss: &LossFunction, lower: f64, upper: f64) -> Result<(ShiftResult, ShiftResult)> {
    Ok((solve_shift(values, loss, lower)?, solve_shift(values, loss, upper)?))
}

/// Empirical obstacles from an `N x (n+1)` row-major matrix of `U` paths.
pub fn empirical_obstacles(u_paths: &[f64], particles: usize, loss: &LossFunction, obstacles: &ObstaclePair) -> Result<ObstaclePaths> {
    let nodes = obstacles.len();
    if particles == 0 || u_paths.len() != particles * nodes {
        return Err(invalid(format!(
            "U matrix of {} values does not match {particles} x {nodes}",
            u_paths.len()
        )));
    }
    let per_node: Vec<(ShiftResult, ShiftResult)> = (0..nodes)
        .into_par_iter()
        .map(|k| {
            let column: Vec<f64> = (0..particles).map(|i| u_paths[i * nodes + k]).collect();
            node_obstacles(&column, loss, obstacles.lower[k], obstacles.upper[k])
        })
        .collect::<Result<_>>()?;
    let max_residual = per_node
        .iter()
        .map(|(a, b)| a.residual.abs().max(b.residual.abs()))
        .fold(0.0, f64::max);
    Ok(ObstaclePaths {
        psi: per_node.iter().map(|p| p.0.x).collect(),
        phi: per_node.iter().map(|p| p.1.x).collect(),
        kind: ObstacleKind::Empirical,
        max_residual,
        quadrature_order: None,
        quadrature_error: None,
    })
}

/// Gauss-Hermite rule for the standard normal: `(z_j, p_j)` with `sum p_j = 1`.
pub fn normal_quadrature(order: usize) -> Result<Vec<(f64, f64)>> {
    let order = NonZeroUsize::new(order).ok_or_else(|| invalid("quadrature order must be positive"))?;
    let rule = GaussHermite::new(order);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    Ok(rule
        .as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (std::f64::consts::SQRT_2 * x, w / sqrt_pi))
        .collect())
}

fn limit_node(mu: f64, sd: f64, rule: &[(f64, f64)], loss: &LossFunction, target: f64) -> Result<ShiftResult> {
    if sd == 0.0 {
        return solve_shift(&[mu], loss, target);
    }
    let nodes: Vec<f64> = rule.iter().map(|(z, _)| mu + sd * z).collect();
    let weights: Vec<f64> = rule.iter().map(|(_, p)| *p).collect();
    solve_shift_weighted(&nodes, &weights, loss, target)
}

/// Deterministic obstacles for `U_t ~ N(mu_t, sd_t^2)`.
pub fn limit_obstacles(
    mean_path: &[f64],
    sd_path: &[f64],
    loss: &LossFunction,
    obstacles: &ObstaclePair,
    quad_order: usize,
) -> Result<ObstaclePaths> {
    let nodes = obstacles.len();
    if mean_path.len() != nodes || sd_path.len() != nodes {
        return Err(invalid("mean and sd paths must have one value per node"));
    }
    if sd_path.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(invalid("standard deviations must be finite and nonnegative"));
    }
    if let LossFunction::Linear { a, b } = loss {
        return Ok(ObstaclePaths {
            psi: (0..nodes).map(|k| (obstacles.lower[k] - b) / a - mean_path[k]).collect(),
            phi: (0..nodes).map(|k| (obstacles.upper[k] - b) / a - mean_path[k]).collect(),
            kind: ObstacleKind::Limit,
            max_residual: 0.0,
            quadrature_order: Some(quad_order),
            quadrature_error: Some(0.0),
        });
    }
    let rule = normal_quadrature(quad_order)?;
    let check = normal_quadrature(2 * quad_order)?;
    let per_node: Vec<[f64; 4]> = (0..nodes)
        .into_par_iter()
        .map(|k| {
            let (mu, sd) = (mean_path[k], sd_path[k]);
            let lo = limit_node(mu, sd, &rule, loss, obstacles.lower[k])?;
            let hi = limit_node(mu, sd, &rule, loss, obstacles.upper[k])?;
            let lo2 = limit_node(mu, sd, &check, loss, obstacles.lower[k])?;
            let hi2 = limit_node(mu, sd, &check, loss, obstacles.upper[k])?;
            let err = (lo.x - lo2.x).abs().max((hi.x - hi2.x).abs());
            Ok([lo.x, hi.x, lo.residual.abs().max(hi.residual.abs()), err])
        })
        .collect::<Result<_>>()?;
    Ok(ObstaclePaths {
        psi: per_node.iter().map(|r| r[0]).collect(),
        phi: per_node.iter().map(|r| r[1]).collect(),
        kind: ObstacleKind::Limit,
        max_residual: per_node.iter().map(|r| r[2]).fold(0.0, f64::max),
        quadrature_order: Some(quad_order),
        quadrature_error: Some(per_node.iter().map(|r| r[3]).fold(0.0, f64::max)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sinp() -> LossFunction {
        LossFunction::sin_perturbed(0.3)
    }

    /// Plain bisection on a wide fixed bracket, run to adjacent floats.
    fn oracle_root(values: &[f64], amp: f64, target: f64) -> f64 {
        let g = |x: f64| values.iter().map(|v| (v + x) + amp * (v + x).sin()).sum::<f64>() / values.len() as f64 - target;
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn linear_examples() {
        let r = solve_shift(&[-1.0, 1.0], &LossFunction::linear(1.0, 0.0), 2.0).unwrap();
        assert_eq!(r.x, 2.0);
        assert_eq!(r.residual, 0.0);
        let r = solve_shift(&[0.0, 1.0], &LossFunction::linear(2.0, 1.0), 5.0).unwrap();
        assert_eq!(r.x, 1.5);
    }

    #[test]
    fn sin_perturbed_root() {
        let r = solve_shift(&[0.0], &sinp(), 0.5).unwrap();
        assert!(r.residual.abs() <= 1e-12);
        assert!((r.x - oracle_root(&[0.0], 0.3, 0.5)).abs() < 1e-11);
        assert!((r.x - 0.3868).abs() < 5e-5, "{}", r.x);
    }

    #[test]
    fn empty_values_rejected() {
        assert!(matches!(
            solve_shift(&[], &LossFunction::linear(1.0, 0.0), 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_monotone_loss_has_no_root() {
        let h = LossFunction::general("sin", f64::sin, 0.5, 1.0);
        assert!(matches!(solve_shift(&[0.0], &h, 2.0), Err(Error::NoRoot(_))));
    }

    #[test]
    fn terminal_trichotomy_examples() {
        let h = LossFunction::linear(1.0, 0.0);
        let adj = |m: f64| terminal_adjustments(&[m - 1.0, m + 1.0], &h, -1.0, 1.0).unwrap();
        assert_eq!(adj(0.0), TerminalAdjustment { psi: 0.0, phi: 0.0 });
        assert_eq!(adj(-3.0), TerminalAdjustment { psi: 2.0, phi: 0.0 });
        assert_eq!(adj(3.0), TerminalAdjustment { psi: 0.0, phi: -2.0 });
    }

    #[test]
    fn empirical_linear_examples() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let obs = ObstaclePair::constant(&grid, -1.0, 1.0);
        let h = LossFunction::linear(1.0, 0.0);
        let zero = vec![0.0; 2 * 4];
        let p = empirical_obstacles(&zero, 2, &h, &obs).unwrap();
        assert_eq!(p.psi, vec![-1.0; 4]);
        assert_eq!(p.phi, vec![1.0; 4]);
        let shifted: Vec<f64> = (0..8).map(|i| i as f64 * 0.01 + 0.1).collect();
        let base: Vec<f64> = (0..8).map(|i| i as f64 * 0.01).collect();
        let a = empirical_obstacles(&base, 2, &h, &obs).unwrap();
        let b = empirical_obstacles(&shifted, 2, &h, &obs).unwrap();
        for k in 0..4 {
            assert!((a.psi[k] - b.psi[k] - 0.1).abs() < 1e-15);
            assert!((a.phi[k] - b.phi[k] - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn empirical_nonlinear_cross_check() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let obs = ObstaclePair::constant(&grid, -0.4, 0.7);
        let u: Vec<f64> = (0..15).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let p = empirical_obstacles(&u, 5, &sinp(), &obs).unwrap();
        assert!(p.max_residual <= 1e-12);
        for k in 0..3 {
            let col: Vec<f64> = (0..5).map(|i| u[i * 3 + k]).collect();
            assert!((p.psi[k] - oracle_root(&col, 0.3, -0.4)).abs() < 1e-10);
            assert!((p.phi[k] - oracle_root(&col, 0.3, 0.7)).abs() < 1e-10);
        }
        assert!(p.separation_margin(&obs, 1.3) >= -1e-9);
    }

    #[test]
    fn limit_linear_example() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let obs = ObstaclePair::constant(&grid, -1.0, 3.0);
        let p = limit_obstacles(&[0.0, 0.0], &[0.0, 1.0], &LossFunction::linear(2.0, 1.0), &obs, 64).unwrap();
        assert_eq!(p.psi, vec![-1.0, -1.0]);
        assert_eq!(p.phi, vec![1.0, 1.0]);
    }

    #[test]
    fn limit_degenerate_sd_matches_empirical() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let obs = ObstaclePair::constant(&grid, 0.2, 0.9);
        let lim = limit_obstacles(&[0.3, -0.2], &[0.0, 0.0], &sinp(), &obs, 64).unwrap();
        let emp = empirical_obstacles(&[0.3, -0.2], 1, &sinp(), &obs).unwrap();
        assert_eq!(lim.psi, emp.psi);
        assert_eq!(lim.phi, emp.phi);
    }

    #[test]
    fn limit_nonlinear_matches_monte_carlo() {
        use rand_distr::{Distribution, StandardNormal};
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let obs = ObstaclePair::constant(&grid, 0.2, 0.9);
        let p = limit_obstacles(&[0.0, 0.0], &[1.0, 1.0], &sinp(), &obs, 64).unwrap();
        assert!(p.quadrature_error.unwrap() <= 1e-10);
        let mut rng = crate::paths::substream(17, &[1]);
        let z: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mc = solve_shift(&z, &sinp(), 0.2).unwrap().x;
        // The Monte Carlo root has standard error about 1.3e-3.
        assert!((p.psi[0] - mc).abs() < 6e-3, "{} vs {mc}", p.psi[0]);
        // Closed form: E sin(psi + Z) = e^{-1/2} sin psi.
        let g = |x: f64| x + 0.3 * (-0.5f64).exp() * x.sin() - 0.2;
        assert!(g(p.psi[0]).abs() < 1e-11);
    }

    #[test]
    fn quadrature_rule_is_normalised() {
        let rule = normal_quadrature(64).unwrap();
        let mass: f64 = rule.iter().map(|r| r.1).sum();
        let var: f64 = rule.iter().map(|r| r.1 * r.0 * r.0).sum();
        assert!((mass - 1.0).abs() < 1e-13);
        assert!((var - 1.0).abs() < 1e-12);
    }

    fn vals() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 1..40)
    }

    proptest! {
        #[test]
        fn residual_within_tolerance(v in vals(), target in -5.0f64..5.0) {
            let r = solve_shift(&v, &sinp(), target).unwrap();
            prop_assert!(r.residual.abs() <= root_tolerance(target));
        }

        #[test]
        fn monotone_and_lipschitz_in_target(v in vals(), c1 in -5.0f64..5.0, d in 1e-3f64..3.0) {
            let h = sinp();
            let x1 = solve_shift(&v, &h, c1).unwrap().x;
            let x2 = solve_shift(&v, &h, c1 + d).unwrap().x;
            prop_assert!(x2 > x1);
            prop_assert!(x2 - x1 <= d / h.gamma_l() + 1e-10);
        }

        #[test]
        fn terminal_adjustment_invariants(v in vals(), l in -3.0f64..3.0, w in 0.05f64..3.0) {
            let h = sinp();
            let adj = terminal_adjustments(&v, &h, l, l + w).unwrap();
            prop_assert!(adj.psi >= 0.0 && adj.phi <= 0.0);
            prop_assert_eq!(adj.psi * adj.phi, 0.0);
            let m = v.iter().map(|x| h.eval(x + adj.total())).sum::<f64>() / v.len() as f64;
            let tol = 1e-9;
            prop_assert!(m >= l - tol && m <= l + w + tol);
        }

        #[test]
        fn stability_bound(u in prop::collection::vec(-3.0f64..3.0, 2..30), seed in 0u64..1000, l in -1.0f64..1.0) {
            let h = sinp();
            let du: Vec<f64> = u.iter().enumerate().map(|(i, _)| (((i as u64 * 7919 + seed) % 101) as f64 / 50.0 - 1.0) * 0.5).collect();
            let u2: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + b).collect();
            let x1 = solve_shift(&u, &h, l).unwrap().x;
            let x2 = solve_shift(&u2, &h, l).unwrap().x;
            let bound = h.gamma_u() / h.gamma_l() * du.iter().map(|d| d.abs()).sum::<f64>() / du.len() as f64;
            prop_assert!((x1 - x2).abs() <= bound + 1e-9);
        }
    }
}
