//! Propagation-of-chaos experiments: coupled error metrics, sweeps over the
//! particle count and log-log rate fits.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::meanshift::empirical_obstacles;
use crate::model::ModelSpec;
use crate::particle::{estimate_z, solve_ips, Mode, SolverConfig};
use crate::paths::{generate_batch, PathEnsemble};
use crate::reference::{coupled_reference_paths, limit_solution, CoupledReference, LimitSolution};

/// Means at or below this are treated as identically zero; a sweep with
/// any such mean reports the metric as degenerate instead of fitting.
pub const DEGENERATE_FLOOR: f64 = 1e-18;

/// Index of the designated error particle.
pub const DESIGNATED_PARTICLE: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "Y_sup_sq")]
    YSupSq,
    #[serde(rename = "K_sup_sq")]
    KSupSq,
    #[serde(rename = "Z_l2")]
    ZL2,
    #[serde(rename = "psi_sup_sq")]
    PsiSupSq,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::YSupSq, Metric::KSupSq, Metric::ZL2, Metric::PsiSupSq];

    pub fn id(&self) -> &'static str {
        match self {
            Metric::YSupSq => "Y_sup_sq",
            Metric::KSupSq => "K_sup_sq",
            Metric::ZL2 => "Z_l2",
            Metric::PsiSupSq => "psi_sup_sq",
        }
    }

    /// Default verdict rule; the nonlinear Y band is wider.
    pub fn default_rule(&self, mode: Mode) -> RateRule {
        match (self, mode) {
            (Metric::YSupSq, Mode::Linear) => RateRule::two_sided(-1.0, 0.3),
            (Metric::YSupSq, Mode::Nonlinear) => RateRule::two_sided(-1.0, 0.35),
            (Metric::PsiSupSq, _) => RateRule::two_sided(-1.0, 0.15),
            (Metric::KSupSq, _) | (Metric::ZL2, _) => RateRule::upper_bound(-0.5, 0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateRule {
    pub target: f64,
    pub band: f64,
    #[serde(default)]
    pub upper_bound: bool,
}

impl RateRule {
    pub fn two_sided(target: f64, band: f64) -> Self {
        Self {
            target,
            band,
            upper_bound: false,
        }
    }

    pub fn upper_bound(target: f64, band: f64) -> Self {
        Self {
            target,
            band,
            upper_bound: true,
        }
    }

    pub fn accepts(&self, slope: f64) -> bool {
        if self.upper_bound {
            slope <= self.target + self.band
        } else {
            (self.target - self.band..=self.target + self.band).contains(&slope)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEstimate {
    #[serde(rename = "N")]
    pub n: usize,
    pub metric: Metric,
    pub mean: f64,
    pub std_error: f64,
    #[serde(rename = "M")]
    pub replications: usize,
}

impl ErrorEstimate {
    pub fn from_values(n: usize, metric: Metric, values: &[f64]) -> Result<Self> {
        let (mean, std_error) = mean_and_se(values)?;
        Ok(Self {
            n,
            metric,
            mean,
            std_error,
            replications: values.len(),
        })
    }
}

fn mean_and_se(values: &[f64]) -> Result<(f64, f64)> {
    let m = values.len();
    if m == 0 {
        return Err(invalid("no replications"));
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok((mean, (var / m as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupError {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

/// Per replication `max_k |a_k - b_k|²` over paths of the designated particle.
pub fn sup_error_metric<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<SupError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(format!("{} paths against {} paths", a.len(), b.len())));
    }
    let values = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let (x, y) = (x.as_ref(), y.as_ref());
            if x.len() != y.len() {
                return Err(invalid(format!("path lengths {} and {} differ", x.len(), y.len())));
            }
            Ok(x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std_error) = mean_and_se(&values)?;
    Ok(SupError {
        values,
        mean,
        std_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    DegenerateMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub metric: Metric,
    pub estimates: Vec<ErrorEstimate>,
    pub slope: Option<f64>,
    pub slope_ci: Option<(f64, f64)>,
    pub target_slope: f64,
    pub band: f64,
    pub upper_bound: bool,
    pub ci_covers_target: Option<bool>,
    pub verdict: Verdict,
}

impl RateReport {
    pub fn failed(&self) -> bool {
        self.verdict == Verdict::Fail
    }

    fn degenerate(metric: Metric, estimates: Vec<ErrorEstimate>, rule: RateRule) -> Self {
        Self {
            metric,
            estimates,
            slope: None,
            slope_ci: None,
            target_slope: rule.target,
            band: rule.band,
            upper_bound: rule.upper_bound,
            ci_covers_target: None,
            verdict: Verdict::DegenerateMetric,
        }
    }
}

/// OLS of `ln mean` on `ln N` with a Student-t 95% interval for the slope.
pub fn fit_rate(estimates: &[ErrorEstimate], rule: RateRule) -> Result<RateReport> {
    let first = estimates.first().ok_or_else(|| invalid("no estimates"))?;
    let mut ns: Vec<usize> = estimates.iter().map(|e| e.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        return Err(invalid(format!("rate fit needs at least 3 distinct N, got {}", ns.len())));
    }
    if let Some(e) = estimates.iter().find(|e| !(e.mean > 0.0 && e.mean.is_finite())) {
        return Err(invalid(format!("mean {} at N={} is not positive", e.mean, e.n)));
    }
    let x: Vec<f64> = estimates.iter().map(|e| (e.n as f64).ln()).collect();
    let y: Vec<f64> = estimates.iter().map(|e| e.mean.ln()).collect();
    let k = x.len() as f64;
    let xm = x.iter().sum::<f64>() / k;
    let ym = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let dof = k - 2.0;
    let se = if dof > 0.0 { (sse / dof / sxx).sqrt() } else { 0.0 };
    let t = StudentsT::new(0.0, 1.0, dof.max(1.0))
        .map_err(|e| invalid(e.to_string()))?
        .inverse_cdf(0.975);
    let ci = (slope - t * se, slope + t * se);
    Ok(RateReport {
        metric: first.metric,
        estimates: estimates.to_vec(),
        slope: Some(slope),
        slope_ci: Some(ci),
        target_slope: rule.target,
        band: rule.band,
        upper_bound: rule.upper_bound,
        ci_covers_target: Some(ci.0 <= rule.target && rule.target <= ci.1),
        verdict: if rule.accepts(slope) { Verdict::Pass } else { Verdict::Fail },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub n_list: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub metrics: Vec<Metric>,
    pub quad_order: usize,
    pub z_degree: usize,
    pub rules: BTreeMap<Metric, RateRule>,
}

impl SweepConfig {
    pub fn new(n_list: Vec<usize>, replications: usize, seed: u64, solver: SolverConfig, metrics: Vec<Metric>) -> Self {
        Self {
            n_list,
            replications,
            seed,
            solver,
            metrics,
            quad_order: 64,
            z_degree: 3,
            rules: BTreeMap::new(),
        }
    }

    pub fn rule(&self, metric: Metric) -> RateRule {
        self.rules
            .get(&metric)
            .copied()
            .unwrap_or_else(|| metric.default_rule(self.solver.mode))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    /// `coupled` against the exact limit, `self_convergence` for N against 2N.
    pub coupling: &'static str,
    pub reports: Vec<RateReport>,
}

impl SweepReport {
    pub fn any_failed(&self) -> bool {
        self.reports.iter().any(|r| r.failed())
    }
}

/// Per-replication values of every requested metric at one N.
pub fn coupled_metrics(
    model: &ModelSpec,
    limit: &LimitSolution,
    batch: &[PathEnsemble],
    config: &SweepConfig,
) -> Result<BTreeMap<Metric, Vec<f64>>> {
    let references: Vec<CoupledReference> = batch
        .iter()
        .map(|e| coupled_reference_paths(limit, e, model))
        .collect::<Result<_>>()?;
    let needs_solve = config.metrics.iter().any(|m| *m != Metric::PsiSupSq);
    let solution = if needs_solve {
        Some(solve_ips(model, batch, &config.solver)?)
    } else {
        None
    };
    let mut out = BTreeMap::new();
    for metric in &config.metrics {
        let values = match metric {
            Metric::PsiSupSq => psi_errors(model, limit, &references)?,
            Metric::YSupSq => {
                let sol = solution.as_ref().expect("solved");
                let a: Vec<&[f64]> = sol.reps.iter().map(|r| r.row(DESIGNATED_PARTICLE)).collect();
                let b: Vec<&[f64]> = references.iter().map(|r| r.row(DESIGNATED_PARTICLE)).collect();
                sup_error_metric(&a, &b)?.values
            }
            Metric::KSupSq => {
                let sol = solution.as_ref().expect("solved");
                let a: Vec<Vec<f64>> = sol.reps.iter().map(|r| r.cumulative_k()).collect();
                let b = vec![limit.cumulative_k(); a.len()];
                sup_error_metric(&a, &b)?.values
            }
            Metric::ZL2 => {
                let sol = solution.as_ref().expect("solved");
                estimate_z(model, batch, sol, config.z_degree, &limit.z())?.z_l2
            }
        };
        out.insert(*metric, values);
    }
    Ok(out)
}

/// `max_k |psi_k - psi^N_k|²` with `psi^N` computed from the limit particles.
fn psi_errors(model: &ModelSpec, limit: &LimitSolution, references: &[CoupledReference]) -> Result<Vec<f64>> {
    references
        .iter()
        .map(|r| {
            let emp = empirical_obstacles(&r.u, r.particles, &model.loss, &model.obstacles)?;
            Ok(emp
                .psi
                .iter()
                .zip(&limit.obstacles.psi)
                .map(|(a, b)| (a - b).powi(2))
                .fold(0.0, f64::max))
        })
        .collect()
}

fn truncate_batch(batch: &[PathEnsemble], particles: usize) -> Result<Vec<PathEnsemble>> {
    batch
        .iter()
        .map(|e| {
            let w = e.grid().nodes();
            PathEnsemble::from_values(e.grid(), e.values()[..particles * w].to_vec(), e.seed())
        })
        .collect()
}

/// Metrics between the systems of N and 2N particles sharing their first N paths.
pub fn self_convergence_metrics(
    model: &ModelSpec,
    n: usize,
    config: &SweepConfig,
) -> Result<BTreeMap<Metric, Vec<f64>>> {
    let big = generate_batch(&model.grid, 2 * n, config.replications, config.seed)?;
    let small = truncate_batch(&big, n)?;
    let a = solve_ips(model, &small, &config.solver)?;
    let b = solve_ips(model, &big, &config.solver)?;
    let mut out = BTreeMap::new();
    for metric in &config.metrics {
        let values = match metric {
            Metric::YSupSq => {
                let pa: Vec<&[f64]> = a.reps.iter().map(|r| r.row(DESIGNATED_PARTICLE)).collect();
                let pb: Vec<&[f64]> = b.reps.iter().map(|r| r.row(DESIGNATED_PARTICLE)).collect();
                sup_error_metric(&pa, &pb)?.values
            }
            Metric::KSupSq => {
                let ka: Vec<Vec<f64>> = a.reps.iter().map(|r| r.cumulative_k()).collect();
                let kb: Vec<Vec<f64>> = b.reps.iter().map(|r| r.cumulative_k()).collect();
                sup_error_metric(&ka, &kb)?.values
            }
            Metric::PsiSupSq => {
                let pa: Vec<&[f64]> = a.reps.iter().map(|r| r.obstacles.psi.as_slice()).collect();
                let pb: Vec<&[f64]> = b.reps.iter().map(|r| r.obstacles.psi.as_slice()).collect();
                sup_error_metric(&pa, &pb)?.values
            }
            Metric::ZL2 => {
                return Err(Error::UnsupportedModel(
                    "Z_l2 needs the exact limit and is unavailable under self-convergence".into(),
                ))
            }
        };
        out.insert(*metric, values);
    }
    Ok(out)
}

/// Runs the sweep, streaming raw `metric,N,rep,value` rows to `raw`.
pub fn run_sweep<W: Write>(model: &ModelSpec, config: &SweepConfig, raw: &mut W) -> Result<SweepReport> {
    if config.metrics.is_empty() {
        return Err(invalid("no metrics requested"));
    }
    if config.replications == 0 {
        return Err(invalid("replications must be positive"));
    }
    let coupled = model.is_reference_class();
    if !coupled && config.metrics.contains(&Metric::ZL2) {
        return Err(Error::UnsupportedModel(
            "Z_l2 needs the exact limit and is unavailable under self-convergence".into(),
        ));
    }
    let limit = if coupled {
        Some(limit_solution(model, config.quad_order)?)
    } else {
        None
    };
    writeln!(raw, "metric,N,rep,value")?;
    let mut per_metric: BTreeMap<Metric, Vec<ErrorEstimate>> = BTreeMap::new();
    for &n in &config.n_list {
        let values = match &limit {
            Some(limit) => {
                let batch = generate_batch(&model.grid, n, config.replications, config.seed)?;
                coupled_metrics(model, limit, &batch, config)?
            }
            None => self_convergence_metrics(model, n, config)?,
        };
        for metric in &config.metrics {
            let v = &values[metric];
            for (r, x) in v.iter().enumerate() {
                writeln!(raw, "{},{n},{r},{x}", metric.id())?;
            }
            per_metric
                .entry(*metric)
                .or_default()
                .push(ErrorEstimate::from_values(n, *metric, v)?);
        }
        raw.flush()?;
    }
    let mut reports = Vec::new();
    for metric in &config.metrics {
        let estimates = per_metric.remove(metric).unwrap_or_default();
        let rule = config.rule(*metric);
        if estimates.iter().any(|e| e.mean <= DEGENERATE_FLOOR) {
            let mut ns: Vec<usize> = estimates.iter().map(|e| e.n).collect();
            ns.dedup();
            if ns.len() < 3 {
                return Err(invalid(format!("rate fit needs at least 3 distinct N, got {}", ns.len())));
            }
            reports.push(RateReport::degenerate(*metric, estimates, rule));
        } else {
            reports.push(fit_rate(&estimates, rule)?);
        }
    }
    Ok(SweepReport {
        coupling: if coupled { "coupled" } else { "self_convergence" },
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Driver, LossFunction, ObstaclePair, TerminalFunctional, TimeGrid};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn est(n: usize, mean: f64) -> ErrorEstimate {
        ErrorEstimate {
            n,
            metric: Metric::YSupSq,
            mean,
            std_error: 0.0,
            replications: 1,
        }
    }

    #[test]
    fn sup_error_examples() {
        let a = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(sup_error_metric(&a, &a).unwrap().mean, 0.0);
        let b = vec![vec![1.1, 2.1, 3.1]];
        assert!((sup_error_metric(&a, &b).unwrap().mean - 0.01).abs() < 1e-15);
        let a = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let b = vec![vec![0.1, 0.0], vec![0.0, -0.3]];
        let s = sup_error_metric(&a, &b).unwrap();
        assert!((s.mean - 0.05).abs() < 1e-15);
        let sd = ((0.01f64 - 0.05).powi(2) + (0.09f64 - 0.05).powi(2)).sqrt();
        assert!((s.std_error - sd / 2f64.sqrt()).abs() < 1e-15);
        assert!(sup_error_metric(&a, &b[..1]).is_err());
        assert!(sup_error_metric(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn exact_lines() {
        let r = fit_rate(&[est(100, 1e-2), est(1000, 1e-3), est(10000, 1e-4)], RateRule::two_sided(-1.0, 0.1)).unwrap();
        assert!((r.slope.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::Pass);
        let e: Vec<_> = [16, 64, 256, 1024].iter().map(|&n| est(n, 4.0 / (n as f64).sqrt())).collect();
        let r = fit_rate(&e, RateRule::two_sided(-1.0, 0.3)).unwrap();
        assert!((r.slope.unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::Fail);
        assert_eq!(fit_rate(&e, RateRule::upper_bound(-0.5, 0.1)).unwrap().verdict, Verdict::Pass);
    }

    #[test]
    fn fit_preconditions() {
        assert!(matches!(fit_rate(&[est(10, 1.0), est(20, 0.5)], RateRule::two_sided(-1.0, 0.1)), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            fit_rate(&[est(10, 1.0), est(20, 0.0), est(40, 0.1)], RateRule::two_sided(-1.0, 0.1)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(fit_rate(&[est(10, 1.0), est(10, 0.9), est(20, 0.5)], RateRule::two_sided(-1.0, 0.1)).is_err());
    }

    #[test]
    fn synthetic_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e: Vec<_> = (6..=12)
            .map(|p| {
                let n = 1usize << p;
                let z: f64 = StandardNormal.sample(&mut rng);
                est(n, (1.0 + 0.05 * z) / n as f64)
            })
            .collect();
        let r = fit_rate(&e, RateRule::two_sided(-1.0, 0.1)).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert_eq!(r.ci_covers_target, Some(true));
    }

    proptest! {
        #[test]
        fn slope_recovers_power_laws(p in -2.0f64..0.0, c in 0.01f64..100.0) {
            let e: Vec<_> = [8usize, 32, 128, 512].iter().map(|&n| est(n, c * (n as f64).powf(p))).collect();
            let r = fit_rate(&e, RateRule::two_sided(p, 1e-9)).unwrap();
            prop_assert!((r.slope.unwrap() - p).abs() < 1e-9);
            prop_assert_eq!(r.verdict, Verdict::Pass);
        }
    }

    fn linear_model(n: usize, lower: f64, upper: f64, driver: Driver) -> ModelSpec {
        let grid = TimeGrid::new(1.0, n).unwrap();
        ModelSpec::new(
            grid,
            ObstaclePair::constant(&grid, lower, upper),
            LossFunction::linear(1.0, 0.0),
            driver,
            TerminalFunctional::affine(1.0, 0.0),
        )
    }

    #[test]
    fn unconstrained_sweep_is_degenerate() {
        let model = linear_model(8, -1e6, 1e6, Driver::zero());
        let cfg = SweepConfig::new(vec![4, 8, 16], 5, 3, SolverConfig::new(Mode::Linear), vec![Metric::YSupSq, Metric::KSupSq]);
        let mut raw = Vec::new();
        let rep = run_sweep(&model, &cfg, &mut raw).unwrap();
        assert!(rep.reports.iter().all(|r| r.verdict == Verdict::DegenerateMetric));
        assert!(!rep.any_failed());
        let text = String::from_utf8(raw).unwrap();
        assert!(text.starts_with("metric,N,rep,value\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 5);
    }

    #[test]
    fn sweep_is_deterministic_and_needs_three_points() {
        let model = linear_model(6, -0.2, 0.5, Driver::cosine(1.0));
        let cfg = SweepConfig::new(vec![8, 16, 32], 20, 9, SolverConfig::new(Mode::Linear), vec![Metric::PsiSupSq, Metric::YSupSq]);
        let (mut r1, mut r2) = (Vec::new(), Vec::new());
        let a = run_sweep(&model, &cfg, &mut r1).unwrap();
        let b = run_sweep(&model, &cfg, &mut r2).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let short = SweepConfig { n_list: vec![8, 16], ..cfg };
        assert!(matches!(run_sweep(&model, &short, &mut Vec::new()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn doubling_replications_scales_std_error() {
        let model = linear_model(6, -0.2, 0.5, Driver::cosine(1.0));
        let grid = model.grid;
        let limit = limit_solution(&model, 32).unwrap();
        let se = |m: usize| {
            let batch = generate_batch(&grid, 32, m, 11).unwrap();
            let cfg = SweepConfig::new(vec![32], m, 11, SolverConfig::new(Mode::Linear), vec![Metric::PsiSupSq]);
            let v = coupled_metrics(&model, &limit, &batch, &cfg).unwrap();
            ErrorEstimate::from_values(32, Metric::PsiSupSq, &v[&Metric::PsiSupSq]).unwrap().std_error
        };
        // Quadrupling M halves the standard error; doubling divides it by √2.
        let ratio = se(1600) / se(400);
        assert!((ratio - 0.5).abs() <= 0.125, "ratio {ratio}");
        let ratio = se(800) / se(400);
        assert!((ratio - 0.5f64.sqrt()).abs() <= 0.25 * 0.5f64.sqrt(), "ratio {ratio}");
    }

    #[test]
    fn self_convergence_for_y_dependent_driver() {
        let model = linear_model(6, -1e6, 1e6, Driver::affine_y(0.5, 1.0, 0.0));
        assert!(!model.is_reference_class());
        let cfg = SweepConfig::new(vec![4, 8, 16], 10, 2, SolverConfig::new(Mode::Linear), vec![Metric::KSupSq]);
        let rep = run_sweep(&model, &cfg, &mut Vec::new()).unwrap();
        assert_eq!(rep.coupling, "self_convergence");
        assert_eq!(rep.reports[0].verdict, Verdict::DegenerateMetric);
        let z = SweepConfig::new(vec![4, 8, 16], 4, 2, SolverConfig::new(Mode::Linear), vec![Metric::ZL2]);
        assert!(matches!(run_sweep(&model, &z, &mut Vec::new()), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn y_error_is_nonincreasing_in_n() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let model = ModelSpec::new(
            grid,
            ObstaclePair::from_fns(&grid, |t| 0.5 - t, |_| 2.0),
            LossFunction::linear(1.0, 0.0),
            Driver::zero(),
            TerminalFunctional::affine(1.0, 0.0),
        );
        let cfg = SweepConfig::new(vec![8, 16, 32, 64, 128], 200, 21, SolverConfig::new(Mode::Linear), vec![Metric::YSupSq]);
        let rep = run_sweep(&model, &cfg, &mut Vec::new()).unwrap();
        let e = &rep.reports[0].estimates;
        let violations = e
            .windows(2)
            .filter(|w| {
                let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
                w[1].mean - w[0].mean > 1.96 * se
            })
            .count();
        assert!(violations <= 1);
    }
}
