//! Command-line driver: `simulate`, `rates` and `validate`.
//!
//! Exit codes: 0 success, 1 verdict or structural failure, 2 numerical
//! non-convergence, 3 configuration error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::condexp::CeBackend;
use crate::drbsde::{deterministic_backward, dynkin_oracle_with_limit, ORACLE_LIMIT};
use crate::error::{Error, Result};
use crate::meanshift::{node_obstacles, root_tolerance, terminal_adjustments, ObstacleKind, ObstaclePaths};
use crate::model::{validate_model, ModelConfig, ModelSpec};
use crate::particle::{solve_ips, structural_checks, BatchSolution, Mode, PicardSchedule, SolverConfig, Variant};
use crate::paths::{generate_batch, substream};
use crate::poc::{run_sweep, Metric, RateRule, SweepConfig};
use crate::reference::limit_solution;
use crate::VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Environment variable for the default worker count.
pub const THREADS_ENV: &str = "MRBSDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mrbsde", version, about = "Particle solvers for mean-reflected BSDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the particle system and dump paths and diagnostics.
    Simulate(CommandArgs),
    /// Sweep the particle count and fit convergence rates.
    Rates(CommandArgs),
    /// Run the property suites.
    Validate(CommandArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommandArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub enum AutoName {
    #[serde(rename = "auto")]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum BackendChoice {
    Named(AutoName),
    Explicit(CeBackend),
}

impl Default for BackendChoice {
    fn default() -> Self {
        BackendChoice::Named(AutoName::Auto)
    }
}

impl BackendChoice {
    pub fn explicit(&self) -> Option<CeBackend> {
        match self {
            BackendChoice::Named(_) => None,
            BackendChoice::Explicit(b) => Some(b.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardOverrides {
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateOptions {
    pub oracle_steps: usize,
    pub oracle_instances: usize,
    pub stability_pairs: usize,
    pub shift_particles: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            oracle_steps: 8,
            oracle_instances: 500,
            stability_pairs: 100,
            shift_particles: 16,
        }
    }
}

fn default_replications() -> usize {
    200
}
fn default_seed() -> u64 {
    42
}
fn default_quad_order() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    #[serde(default)]
    pub n_particles: Option<usize>,
    #[serde(default)]
    pub n_list: Option<Vec<usize>>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendChoice,
    #[serde(default)]
    pub particle_backend: BackendChoice,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub picard: PicardOverrides,
    #[serde(default = "default_quad_order")]
    pub quad_order: usize,
    #[serde(default)]
    pub metrics: Option<Vec<Metric>>,
    #[serde(default)]
    pub targets: BTreeMap<Metric, RateRule>,
    #[serde(default)]
    pub validate: ValidateOptions,
    /// Particles written per replication in `solution_Y.csv` (all by default).
    #[serde(default)]
    pub output_particles: Option<usize>,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

/// The model used by `validate` when the config names none.
pub const BUILTIN_MODEL: &str = r#"{
    "horizon": 1.0, "steps": 16,
    "obstacles": {"kind": "ramp", "lower_start": -0.5, "lower_end": 0.2, "upper_start": 1.0, "upper_end": 1.5},
    "loss": {"kind": "linear", "a": 1.0},
    "driver": {"kind": "cosine"}
}"#;

/// Parses and schema-checks a run configuration. Relative `model_path`
/// entries resolve against `base_dir`.
pub fn parse_config(bytes: &[u8], base_dir: &Path) -> Result<RunConfig> {
    let text = std::str::from_utf8(bytes).map_err(|e| config_error("", format!("config is not UTF-8: {e}")))?;
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| config_error(&e.path().to_string(), e.into_inner().to_string()))?;
    if cfg.model.is_some() && cfg.model_path.is_some() {
        return Err(config_error("model_path", "give either `model` or `model_path`, not both"));
    }
    if let Some(p) = &cfg.model_path {
        let full = base_dir.join(p);
        let body = fs::read_to_string(&full)
            .map_err(|e| config_error("model_path", format!("cannot read {}: {e}", full.display())))?;
        let model = ModelConfig::from_json(&body).map_err(|e| match e {
            Error::Config { path, message } => config_error(&format!("model_path:{path}"), message),
            other => other,
        })?;
        cfg.model = Some(model);
    }
    if let Some(m) = &cfg.model {
        m.build_at("model")?;
    }
    if cfg.replications == 0 {
        return Err(config_error("replications", "must be at least 1"));
    }
    if cfg.n_particles == Some(0) {
        return Err(config_error("n_particles", "must be at least 1"));
    }
    if let Some(list) = &cfg.n_list {
        if let Some(i) = list.iter().position(|n| *n == 0) {
            return Err(config_error(&format!("n_list[{i}]"), "must be at least 1"));
        }
    }
    if cfg.quad_order == 0 {
        return Err(config_error("quad_order", "must be at least 1"));
    }
    if cfg.output_particles == Some(0) {
        return Err(config_error("output_particles", "must be at least 1"));
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        match &self.model {
            Some(m) => m.build_at("model"),
            None => Err(config_error("model", "a model is required")),
        }
    }

    fn mode_for(&self, model: &ModelSpec) -> Result<Mode> {
        let mode = self.mode.unwrap_or(if model.loss.is_linear() {
            Mode::Linear
        } else {
            Mode::Nonlinear
        });
        if mode == Mode::Linear && !model.loss.is_linear() {
            return Err(config_error("mode", "linear mode requires a linear loss"));
        }
        Ok(mode)
    }

    pub fn solver_config(&self, model: &ModelSpec) -> Result<SolverConfig> {
        let mut schedule = crate::particle::picard_schedule(&model.driver, &model.loss, &model.grid);
        apply_picard(&mut schedule, &self.picard, model)?;
        Ok(SolverConfig {
            mode: self.mode_for(model)?,
            variant: self.variant,
            backend: self.backend.explicit(),
            particle_backend: self.particle_backend.explicit(),
            schedule: Some(schedule),
            constraint_tol: None,
        })
    }
}

fn apply_picard(schedule: &mut PicardSchedule, o: &PicardOverrides, model: &ModelSpec) -> Result<()> {
    if let Some(m) = o.max_iterations {
        if m == 0 {
            return Err(config_error("picard.max_iterations", "must be at least 1"));
        }
        schedule.max_iterations = m;
    }
    if let Some(t) = o.tolerance {
        if !(t > 0.0) {
            return Err(config_error("picard.tolerance", "must be positive"));
        }
        schedule.tolerance = t;
    }
    if let Some(e) = o.epsilon {
        if !(e > 0.0) {
            return Err(config_error("picard.epsilon", "must be positive"));
        }
        schedule.epsilon = e;
        schedule.sub_intervals = ((model.grid.horizon() / e).ceil() as usize).max(1);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Header {
    pub artifact: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
}

impl Header {
    pub fn new(config: &[u8], seed: u64) -> Self {
        Self {
            artifact: "mrbsde",
            version: VERSION,
            config_sha256: hex::encode(Sha256::digest(config)),
            seed,
        }
    }

    pub fn csv_line(&self) -> String {
        format!("# mrbsde {} config_sha256={} seed={}", self.version, self.config_sha256, self.seed)
    }
}

/// Maps an error to its documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NoConvergence { .. } | Error::NoRoot(_) | Error::DegenerateBasis(_) | Error::InconsistentTerminal { .. } => {
            EXIT_NO_CONVERGENCE
        }
        Error::Config { .. }
        | Error::OracleTooLarge { .. }
        | Error::UnsupportedModel(_)
        | Error::InvalidArgument(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_CONFIG,
    }
}

/// Parses arguments, sizes the worker pool and runs the command.
pub fn main_with(cli: Cli) -> i32 {
    let (name, args) = match &cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::Rates(a) => ("rates", a),
        Command::Validate(a) => ("validate", a),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = args.threads {
        builder = builder.num_threads(k);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("mrbsde: cannot start worker pool: {e}");
            return EXIT_CONFIG;
        }
    };
    pool.install(|| run_command(name, args))
}

/// Runs one command and reports errors on standard error.
pub fn run_command(name: &str, args: &CommandArgs) -> i32 {
    match execute(name, args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mrbsde {name}: {e}");
            exit_code(&e)
        }
    }
}

fn execute(name: &str, args: &CommandArgs) -> Result<i32> {
    let bytes = fs::read(&args.config)
        .map_err(|e| config_error("", format!("cannot read {}: {e}", args.config.display())))?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let mut cfg = parse_config(&bytes, base)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&args.out)
        .map_err(|e| config_error("--out", format!("cannot create {}: {e}", args.out.display())))?;
    let header = Header::new(&bytes, cfg.seed);
    match name {
        "simulate" => cmd_simulate(&cfg, &header, &args.out),
        "rates" => cmd_rates(&cfg, &header, &args.out),
        "validate" => cmd_validate(&cfg, &header, &args.out),
        other => Err(config_error("command", format!("unknown command {other}"))),
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_json(out: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn require_valid(model: &ModelSpec) -> Result<()> {
    let report = validate_model(model);
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(config_error("model", format!("invalid model: {}", v.message))),
    }
}

pub fn cmd_simulate(cfg: &RunConfig, header: &Header, out: &Path) -> Result<i32> {
    let model = cfg.model_spec()?;
    require_valid(&model)?;
    let n = cfg
        .n_particles
        .ok_or_else(|| config_error("n_particles", "simulate needs a particle count"))?;
    let solver = cfg.solver_config(&model)?;
    let batch = generate_batch(&model.grid, n, cfg.replications, cfg.seed)?;
    let solution = match solve_ips(&model, &batch, &solver) {
        Ok(s) => s,
        Err(Error::NoConvergence { iterations, distance }) => {
            write_json(
                out,
                "diagnostics.json",
                &json!({
                    "header": header,
                    "command": "simulate",
                    "status": "no_convergence",
                    "iterations": iterations,
                    "last_distance": distance,
                }),
            )?;
            eprintln!("mrbsde simulate: Picard iteration stopped after {iterations} iterations at distance {distance:e}");
            return Ok(EXIT_NO_CONVERGENCE);
        }
        Err(e) => return Err(e),
    };
    let tol = solver.tolerance();
    let structural = structural_checks(&model, &solution, tol);
    write_solution(&model, &solution, header, out, cfg.output_particles)?;
    if model.is_reference_class() {
        let limit = limit_solution(&model, cfg.quad_order)?;
        let mut w = create(out, "reference.csv")?;
        writeln!(w, "{}", header.csv_line())?;
        limit.write_csv(&mut w)?;
        w.flush()?;
    }
    write_json(out, "diagnostics.json", &simulate_diagnostics(&model, &solution, header, &structural, n, cfg))?;
    if structural.passed() {
        Ok(EXIT_OK)
    } else {
        for c in structural.checks.iter().filter(|c| !c.passed) {
            eprintln!("mrbsde simulate: structural check {} failed: {:e} > {:e}", c.name, c.value, c.bound);
        }
        Ok(EXIT_FAILED)
    }
}

fn write_solution(
    model: &ModelSpec,
    solution: &BatchSolution,
    header: &Header,
    out: &Path,
    limit: Option<usize>,
) -> Result<()> {
    let grid = &model.grid;
    let mut y = create(out, "solution_Y.csv")?;
    writeln!(y, "{}", header.csv_line())?;
    writeln!(y, "rep,particle,k,t,Y")?;
    for (r, sol) in solution.reps.iter().enumerate() {
        let shown = limit.map_or(sol.particles, |l| l.min(sol.particles));
        for i in 0..shown {
            for (k, v) in sol.row(i).iter().enumerate() {
                writeln!(y, "{r},{i},{k},{},{v}", grid.time(k))?;
            }
        }
    }
    y.flush()?;
    let mut kf = create(out, "solution_K.csv")?;
    writeln!(kf, "{}", header.csv_line())?;
    writeln!(kf, "rep,k,t,dKplus,dKminus")?;
    for (r, sol) in solution.reps.iter().enumerate() {
        for k in 0..grid.steps() {
            writeln!(kf, "{r},{k},{},{},{}", grid.time(k), sol.dk_plus[k], sol.dk_minus[k])?;
        }
    }
    kf.flush()?;
    Ok(())
}

fn simulate_diagnostics(
    model: &ModelSpec,
    solution: &BatchSolution,
    header: &Header,
    structural: &crate::particle::StructuralReport,
    particles: usize,
    cfg: &RunConfig,
) -> serde_json::Value {
    let worst = |f: &dyn Fn(&crate::particle::SolutionDiagnostics) -> f64| {
        solution.reps.iter().map(|r| f(&r.diagnostics)).fold(0.0, f64::max)
    };
    let martingale = solution
        .reps
        .iter()
        .filter_map(|r| r.diagnostics.martingale_residual)
        .reduce(f64::max);
    let fits = &solution.fit_diagnostics;
    json!({
        "header": header,
        "command": "simulate",
        "status": "ok",
        "model": {
            "loss": model.loss.describe(),
            "driver": model.driver.name,
            "terminal": model.terminal.describe(),
            "horizon": model.grid.horizon(),
            "steps": model.grid.steps(),
        },
        "particles": particles,
        "replications": cfg.replications,
        "variant": cfg.variant,
        "backends": solution.backends,
        "schedule": solution.schedule,
        "picard": solution.blocks,
        "structural": structural,
        "worst": {
            "constraint_violation": worst(&|d| d.constraint_violation),
            "flat_off_lower": worst(&|d| d.flat_off_lower.abs()),
            "flat_off_upper": worst(&|d| d.flat_off_upper.abs()),
            "terminal_identity_error": worst(&|d| d.terminal_identity_error),
            "martingale_residual": martingale,
        },
        "regression": {
            "fits": fits.len(),
            "max_condition_number": fits.iter().map(|f| f.condition_number).fold(0.0, f64::max),
            "max_relative_residual": fits.iter().map(|f| f.relative_residual).fold(0.0, f64::max),
        },
        "terminal_adjustments": solution.reps.iter().map(|r| r.adjustment).collect::<Vec<_>>(),
    })
}

pub fn cmd_rates(cfg: &RunConfig, header: &Header, out: &Path) -> Result<i32> {
    let model = cfg.model_spec()?;
    require_valid(&model)?;
    let n_list = cfg
        .n_list
        .clone()
        .ok_or_else(|| config_error("n_list", "rates needs a list of particle counts"))?;
    let mut distinct = n_list.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(config_error("n_list", format!("rate fits need at least 3 distinct N, got {}", distinct.len())));
    }
    let metrics = cfg.metrics.clone().unwrap_or_else(|| {
        if model.is_reference_class() {
            vec![Metric::YSupSq, Metric::KSupSq, Metric::PsiSupSq]
        } else {
            vec![Metric::YSupSq, Metric::KSupSq]
        }
    });
    let mut sweep = SweepConfig::new(n_list, cfg.replications, cfg.seed, cfg.solver_config(&model)?, metrics);
    sweep.quad_order = cfg.quad_order;
    sweep.rules = cfg.targets.clone();
    let mut raw = create(out, "rates_raw.csv")?;
    writeln!(raw, "{}", header.csv_line())?;
    let result = run_sweep(&model, &sweep, &mut raw);
    raw.flush()?;
    let report = match result {
        Ok(r) => r,
        Err(Error::NoConvergence { iterations, distance }) => {
            eprintln!("mrbsde rates: Picard iteration stopped after {iterations} iterations at distance {distance:e}");
            return Ok(EXIT_NO_CONVERGENCE);
        }
        Err(e) => return Err(e),
    };
    write_json(
        out,
        "rates_report.json",
        &json!({
            "header": header,
            "command": "rates",
            "coupling": report.coupling,
            "replications": cfg.replications,
            "reports": report.reports,
        }),
    )?;
    Ok(if report.any_failed() { EXIT_FAILED } else { EXIT_OK })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub checked: usize,
    pub worst: f64,
    pub detail: String,
}

pub fn cmd_validate(cfg: &RunConfig, header: &Header, out: &Path) -> Result<i32> {
    let model = match &cfg.model {
        Some(m) => m.build_at("model")?,
        None => ModelConfig::from_json(BUILTIN_MODEL)?.build()?,
    };
    let opts = &cfg.validate;
    if opts.oracle_steps > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            steps: opts.oracle_steps,
            limit: ORACLE_LIMIT,
        });
    }
    if opts.oracle_steps == 0 {
        return Err(config_error("validate.oracle_steps", "must be at least 1"));
    }
    if opts.shift_particles == 0 {
        return Err(config_error("validate.shift_particles", "must be at least 1"));
    }
    let report = validate_model(&model);
    let mut props = vec![PropertyResult {
        name: "model_validation".into(),
        passed: report.is_valid(),
        checked: 1,
        worst: report.violations.len() as f64,
        detail: report
            .violations
            .iter()
            .map(|v| v.message.clone())
            .collect::<Vec<_>>()
            .join("; "),
    }];
    props.push(oracle_property(opts.oracle_steps, opts.oracle_instances, cfg.seed)?);
    if report.is_valid() {
        props.extend(shift_properties(&model, opts, cfg.seed)?);
    } else {
        props.push(PropertyResult {
            name: "shift_properties".into(),
            passed: false,
            checked: 0,
            worst: f64::NAN,
            detail: "skipped: the loss failed model validation".into(),
        });
    }
    let passed = props.iter().all(|p| p.passed);
    write_json(
        out,
        "validate_report.json",
        &json!({
            "header": header,
            "command": "validate",
            "passed": passed,
            "properties": props,
            "violations": report.violations,
        }),
    )?;
    Ok(if passed { EXIT_OK } else { EXIT_FAILED })
}

/// Random obstacle pair with separation at least 0.1 and a consistent terminal.
pub fn random_obstacle_instance<R: rand::Rng>(rng: &mut R, steps: usize) -> (ObstaclePaths, f64) {
    let psi: Vec<f64> = (0..=steps).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phi: Vec<f64> = psi.iter().map(|p| p + 0.1 + rng.random_range(0.0..1.0)).collect();
    let terminal = psi[steps].max(0.0) + phi[steps].min(0.0);
    (ObstaclePaths::new(psi, phi, ObstacleKind::Limit), terminal)
}

fn oracle_property(steps: usize, instances: usize, seed: u64) -> Result<PropertyResult> {
    let mut rng = substream(seed, &[0x6F72_6163, steps as u64]);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (obs, terminal) = random_obstacle_instance(&mut rng, steps);
        let a = deterministic_backward(&obs, terminal, None)?;
        let b = dynkin_oracle_with_limit(&obs, terminal, ORACLE_LIMIT)?;
        worst = a.d.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Ok(PropertyResult {
        name: "dynkin_oracle_equivalence".into(),
        passed: worst <= 1e-12,
        checked: instances,
        worst,
        detail: format!("{instances} instances with {steps} steps, tolerance 1e-12"),
    })
}

fn shift_properties(model: &ModelSpec, opts: &ValidateOptions, seed: u64) -> Result<Vec<PropertyResult>> {
    let loss = &model.loss;
    let ratio = loss.gamma_u() / loss.gamma_l();
    let mut rng = substream(seed, &[0x7368_6966]);
    let np = opts.shift_particles;
    let mut stability: f64 = f64::NEG_INFINITY;
    let mut residual: f64 = 0.0;
    let mut uniform: f64 = 0.0;
    let mut terminal: f64 = 0.0;
    for _ in 0..opts.stability_pairs {
        let u: Vec<f64> = (0..np).map(|_| rng.random_range(-2.0..2.0)).collect();
        let du: Vec<f64> = (0..np).map(|_| rng.random_range(-0.5..0.5)).collect();
        let v: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + b).collect();
        let target = rng.random_range(-1.0..1.0);
        let a = crate::meanshift::solve_shift(&u, loss, target)?;
        let b = crate::meanshift::solve_shift(&v, loss, target)?;
        let mean_abs = du.iter().map(|d| d.abs()).sum::<f64>() / np as f64;
        stability = stability.max((a.x - b.x).abs() - ratio * mean_abs);
        residual = residual.max(a.residual.abs() / root_tolerance(target));
        let c = rng.random_range(-0.5..0.5);
        let w: Vec<f64> = u.iter().map(|x| x + c).collect();
        let s = crate::meanshift::solve_shift(&w, loss, target)?;
        if loss.is_linear() {
            uniform = uniform.max((a.x - s.x - c).abs());
        }
        let (lo, hi) = (target - 0.5, target + 0.5);
        let adj = terminal_adjustments(&u, loss, lo, hi)?;
        let (p, q) = node_obstacles(&u, loss, lo, hi)?;
        let x = adj.total();
        let ordered = p.x - 1e-12 <= x && x <= q.x + 1e-12;
        terminal = terminal.max(if adj.psi * adj.phi == 0.0 && adj.psi >= 0.0 && adj.phi <= 0.0 && ordered {
            0.0
        } else {
            1.0
        });
    }
    let pairs = opts.stability_pairs;
    let mut out = vec![
        PropertyResult {
            name: "shift_stability".into(),
            passed: stability <= 1e-9,
            checked: pairs,
            worst: stability,
            detail: format!("|dpsi| - (gamma_u/gamma_l) mean|dU| over {pairs} pairs, bound 1e-9"),
        },
        PropertyResult {
            name: "shift_residual".into(),
            passed: residual <= 1.0,
            checked: pairs,
            worst: residual,
            detail: "root residual in units of the root tolerance".into(),
        },
        PropertyResult {
            name: "terminal_adjustments".into(),
            passed: terminal == 0.0,
            checked: pairs,
            worst: terminal,
            detail: "Psi >= 0 >= Phi, Psi Phi = 0, psi_n <= Psi + Phi <= phi_n".into(),
        },
    ];
    if loss.is_linear() {
        out.push(PropertyResult {
            name: "uniform_shift_equality".into(),
            passed: uniform <= 1e-12,
            checked: pairs,
            worst: uniform,
            detail: "linear loss: a uniform shift of U moves the obstacle by exactly the same amount".into(),
        });
    }
    Ok(out)
}
