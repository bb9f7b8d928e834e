use mrbsde::condexp::{CeBackend, FeatureSet};
use mrbsde::model::{Driver, LossFunction, ModelSpec, ObstaclePair, TerminalFunctional, TimeGrid};
use mrbsde::particle::{solve_ips, BatchSolution, Mode, SolverConfig, Variant};
use mrbsde::paths::generate_batch;

/// Per-replication particle mean of `Y` at node `k`.
fn node_means(sol: &BatchSolution, k: usize) -> Vec<f64> {
    sol.reps
        .iter()
        .map(|r| (0..r.particles).map(|i| r.value(i, k)).sum::<f64>() / r.particles as f64)
        .collect()
}

/// Paired mean and standard error of `a - b`.
fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = d.len() as f64;
    let mean = d.iter().sum::<f64>() / m;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

#[test]
fn direct_variant_agrees_with_construction() {
    // The lower barrier binds at every node. The direct variant regresses
    // each particle's own Brownian increment as well, so its pooled fit
    // carries noise of order sqrt(p dt / (M N)) shared by all replications.
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let model = ModelSpec::new(
        grid,
        ObstaclePair::constant(&grid, 0.5, 2.0),
        LossFunction::linear(1.0, 0.0),
        Driver::zero(),
        TerminalFunctional::affine(1.0, 0.0),
    );
    let (particles, reps) = (16, 400);
    let batch = generate_batch(&grid, particles, reps, 808).unwrap();
    let construction =
        solve_ips(&model, &batch, &SolverConfig::new(Mode::Linear).with_backend(CeBackend::markov_default())).unwrap();
    let direct = solve_ips(
        &model,
        &batch,
        &SolverConfig::new(Mode::Linear)
            .with_variant(Variant::Direct)
            .with_backend(CeBackend::Regression {
                degree: 3,
                features: FeatureSet::Auto,
            }),
    )
    .unwrap();
    let pushed: f64 = direct.reps.iter().flat_map(|r| &r.dk_plus).sum();
    assert!(pushed > 0.0);
    let fit_noise = (10.0 * grid.dt() / (particles * reps) as f64).sqrt();
    for k in 0..8 {
        let (mean, se) = paired(&node_means(&construction, k), &node_means(&direct, k));
        assert!(mean.abs() <= 4.0 * (fit_noise + se), "node {k}: {mean:e} vs fit noise {fit_noise:e}");
    }
}

/// Backward recursion for `S` as a function of the common mean on a fine
/// grid. Independent of the solver's Markov backend.
fn dp_value(particles: usize, steps: usize, lower: f64, upper: f64) -> f64 {
    let dt = 1.0 / steps as f64;
    let sd = (dt / particles as f64).sqrt();
    let w: Vec<f64> = (0..=6000).map(|j| -3.0 + j as f64 * 1e-3).collect();
    let interp = |s: &[f64], x: f64| {
        let u = ((x + 3.0) / 1e-3).clamp(0.0, 5_999.999_999);
        let j = u.floor() as usize;
        s[j] + (u - j as f64) * (s[j + 1] - s[j])
    };
    // Simpson on [-8, 8] standard deviations.
    let nodes = 400;
    let h = 16.0 / nodes as f64;
    let rule: Vec<(f64, f64)> = (0..=nodes)
        .map(|j| {
            let z = -8.0 + j as f64 * h;
            let c = if j == 0 || j == nodes { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
            (z, c * h / 3.0 * (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let mut s: Vec<f64> = w.iter().map(|x| (lower - x).max(0.0) + (upper - x).min(0.0)).collect();
    for _ in 0..steps {
        s = w
            .iter()
            .map(|x| {
                let c: f64 = rule.iter().map(|(z, p)| p * interp(&s, x + sd * z)).sum();
                c.clamp(lower - x, upper - x)
            })
            .collect();
    }
    interp(&s, 0.0)
}

#[test]
fn construction_matches_dynamic_programming() {
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let model = ModelSpec::new(
        grid,
        ObstaclePair::constant(&grid, 0.5, 2.0),
        LossFunction::linear(1.0, 0.0),
        Driver::zero(),
        TerminalFunctional::affine(1.0, 0.0),
    );
    let batch = generate_batch(&grid, 16, 4, 5).unwrap();
    let sol = solve_ips(&model, &batch, &SolverConfig::new(Mode::Linear).with_backend(CeBackend::markov_default())).unwrap();
    let oracle = dp_value(16, 8, 0.5, 2.0);
    let s0 = sol.reps[0].value(0, 0);
    assert!(oracle > 0.5 + 1e-3);
    assert!((s0 - oracle).abs() < 1e-4, "{s0} vs {oracle}");
}
