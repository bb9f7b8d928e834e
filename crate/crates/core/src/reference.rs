//! Exact limit solution for affine terminals and deterministic drivers.
//!
//! Here `U_t = c B_t + d + ∫_t^T f` is Gaussian with mean `d + ∫_t^T f` and
//! variance `c² t`, so the limit obstacles are deterministic and the game
//! value `D` follows from the deterministic clamp recursion.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::drbsde::{deterministic_backward, ReflectedBackwardResult};
use crate::error::{invalid, Error, Result};
use crate::meanshift::{limit_obstacles, ObstaclePaths};
use crate::model::{ModelSpec, TerminalFunctional, TimeGrid};
use crate::paths::PathEnsemble;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSolution {
    pub grid: TimeGrid,
    pub c: f64,
    pub d: f64,
    /// `∫_{t_k}^T f` per node.
    pub tails: Vec<f64>,
    pub mean_path: Vec<f64>,
    pub sd_path: Vec<f64>,
    pub obstacles: ObstaclePaths,
    pub backward: ReflectedBackwardResult,
}

impl LimitSolution {
    pub fn value(&self) -> &[f64] {
        &self.backward.d
    }

    /// Cumulative `K^+ - K^-` per node, excluding the terminal jump.
    pub fn cumulative_k(&self) -> Vec<f64> {
        self.backward.cumulative_k()
    }

    /// The limit integrand of each particle against its own Brownian motion.
    pub fn z(&self) -> Vec<f64> {
        vec![self.c; self.grid.steps()]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,t,psi,phi,D,dKplus,dKminus")?;
        let n = self.grid.steps();
        for k in 0..=n {
            let (p, m) = if k < n {
                (self.backward.dk_plus[k], self.backward.dk_minus[k])
            } else {
                (0.0, 0.0)
            };
            writeln!(
                out,
                "{k},{},{},{},{},{p},{m}",
                self.grid.time(k),
                self.obstacles.psi[k],
                self.obstacles.phi[k],
                self.backward.d[k]
            )?;
        }
        Ok(())
    }
}

pub fn limit_solution(model: &ModelSpec, quad_order: usize) -> Result<LimitSolution> {
    let (c, d) = match model.terminal {
        TerminalFunctional::Affine { c, d } => (c, d),
        TerminalFunctional::PathDependent { .. } => {
            return Err(Error::UnsupportedModel("the limit solution needs an affine terminal".into()))
        }
    };
    if !model.driver.y_independent || !model.driver.deterministic {
        return Err(Error::UnsupportedModel(
            "the limit solution needs a deterministic y-independent driver".into(),
        ));
    }
    let grid = model.grid;
    let tails = model.driver.tail_integrals(&grid);
    let mean_path: Vec<f64> = tails.iter().map(|f| d + f).collect();
    let sd_path: Vec<f64> = (0..grid.nodes()).map(|k| c.abs() * grid.time(k).sqrt()).collect();
    let obstacles = limit_obstacles(&mean_path, &sd_path, &model.loss, &model.obstacles, quad_order)?;
    let n = grid.steps();
    let terminal = obstacles.psi[n].max(0.0) + obstacles.phi[n].min(0.0);
    let backward = deterministic_backward(&obstacles, terminal, None)?;
    Ok(LimitSolution {
        grid,
        c,
        d,
        tails,
        mean_path,
        sd_path,
        obstacles,
        backward,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledReference {
    pub particles: usize,
    /// Row-major `N x (n+1)`.
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl CoupledReference {
    #[inline]
    pub fn value(&self, i: usize, k: usize) -> f64 {
        let w = self.y.len() / self.particles;
        self.y[i * w + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.y.len() / self.particles;
        &self.y[i * w..(i + 1) * w]
    }
}

/// Limit particles driven by the same Brownian paths as the particle system.
pub fn coupled_reference_paths(
    limit: &LimitSolution,
    ensemble: &PathEnsemble,
    model: &ModelSpec,
) -> Result<CoupledReference> {
    if ensemble.grid() != &model.grid || limit.grid != model.grid {
        return Err(invalid("ensemble, limit and model grids differ"));
    }
    let w = model.grid.nodes();
    let mut u = vec![0.0; ensemble.values().len()];
    u.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        for (k, v) in row.iter_mut().enumerate() {
            *v = limit.c * ensemble.value(i, k) + limit.d + limit.tails[k];
        }
    });
    let dv = limit.value();
    let y = u.chunks(w).flat_map(|row| row.iter().zip(dv).map(|(a, b)| a + b)).collect();
    Ok(CoupledReference {
        particles: ensemble.particles(),
        u,
        y,
    })
}
