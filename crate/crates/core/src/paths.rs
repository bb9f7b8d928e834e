//! Reproducible Brownian particle ensembles.
//!
//! Particle `i` of an ensemble with seed `s` draws its increments from the
//! ChaCha8 stream `(s, i)`, step after step, so its path depends only on
//! `(s, i, grid)`. Enlarging `N` keeps the first rows, and generation is
//! bit-identical whatever the thread count.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::model::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    particles: usize,
    seed: u64,
    /// Row-major `N x (n+1)`.
    values: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a key tuple.
pub fn replication_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// An independent generator for the key tuple.
pub fn substream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(replication_seed(seed, keys))
}

fn particle_path(grid: &TimeGrid, seed: u64, index: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let sd = grid.dt().sqrt();
    out[0] = 0.0;
    for k in 0..grid.steps() {
        let z: f64 = StandardNormal.sample(&mut rng);
        out[k + 1] = out[k] + sd * z;
    }
}

impl PathEnsemble {
    pub fn generate(grid: &TimeGrid, particles: usize, seed: u64) -> Result<Self> {
        if particles == 0 {
            return Err(invalid("ensemble needs at least one particle"));
        }
        let width = grid.nodes();
        let mut values = vec![0.0; particles * width];
        values
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| particle_path(grid, seed, i, row));
        Ok(Self {
            grid: *grid,
            particles,
            seed,
            values,
        })
    }

    /// Wraps explicit paths (row-major `N x (n+1)`).
    pub fn from_values(grid: &TimeGrid, values: Vec<f64>, seed: u64) -> Result<Self> {
        let width = grid.nodes();
        if values.is_empty() || !values.len().is_multiple_of(width) {
            return Err(invalid(format!(
                "{} values do not form rows of length {width}",
                values.len()
            )));
        }
        Ok(Self {
            grid: *grid,
            particles: values.len() / width,
            seed,
            values,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.grid.nodes() + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.grid.nodes();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.particles).map(|i| self.value(i, k)).collect()
    }

    /// `B_{k+1} - B_k` per particle.
    pub fn increments_of(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.grid.steps() {
            return Err(invalid(format!(
                "increment index {k} out of range 0..{}",
                self.grid.steps()
            )));
        }
        Ok((0..self.particles)
            .map(|i| self.value(i, k + 1) - self.value(i, k))
            .collect())
    }

    /// Empirical mean `W_k = (1/N) sum_j B^j_k`, summed in particle order.
    pub fn mean_path(&self) -> Vec<f64> {
        let n = self.particles as f64;
        (0..self.grid.nodes())
            .map(|k| (0..self.particles).map(|i| self.value(i, k)).sum::<f64>() / n)
            .collect()
    }

    /// The first `n` particles.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.particles {
            return Err(invalid(format!("cannot keep {n} of {} particles", self.particles)));
        }
        Ok(Self {
            grid: self.grid,
            particles: n,
            seed: self.seed,
            values: self.values[..n * self.grid.nodes()].to_vec(),
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "particle,k,t,B")?;
        for i in 0..self.particles {
            for k in 0..self.grid.nodes() {
                writeln!(out, "{i},{k},{},{}", self.grid.time(k), self.value(i, k))?;
            }
        }
        Ok(())
    }
}

/// `M` independent ensembles; replication `r` uses seed `(seed, N, r)`.
pub fn generate_batch(grid: &TimeGrid, particles: usize, replications: usize, seed: u64) -> Result<Vec<PathEnsemble>> {
    if replications == 0 {
        return Err(invalid("batch needs at least one replication"));
    }
    (0..replications)
        .into_par_iter()
        .map(|r| PathEnsemble::generate(grid, particles, replication_seed(seed, &[particles as u64, r as u64])))
        .collect()
}
