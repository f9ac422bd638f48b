//! Argument and config handling for the `ddbrink` binary.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ddbrink_core::cavity::{run_cavity, CavityConfig, CavityError, WallData};
use ddbrink_core::mms::{spatial_sweep, temporal_sweep, unit_params, MmsError, RateTable, TrigSolution};
use ddbrink_core::norms::{verify_identities, IdentityReport};
use ddbrink_core::timestep::{SchemeError, Startup};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

pub const DEFAULT_SEED: u64 = 42;
pub const IDENTITY_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Parser)]
#[command(name = "ddbrink", version, about = "Double-diffusive Darcy-Brinkman convection solver")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed of randomized checks.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mesh refinement study on the manufactured solution.
    MmsSpatial(MmsSpatialArgs),
    /// Time-step refinement study on the manufactured solution.
    MmsTemporal(MmsTemporalArgs),
    /// Buoyancy-driven cavity run.
    Cavity(CavityArgs),
    /// Randomized verification of the G/F-norm identities and skew-symmetry.
    CheckIdentities(IdentityArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MmsSpatial(_) => "mms-spatial",
            Self::MmsTemporal(_) => "mms-temporal",
            Self::Cavity(_) => "cavity",
            Self::CheckIdentities(_) => "check-identities",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StartupKind {
    /// Level `−1` from the exact solution.
    Exact,
    /// Level `−1` equal to level `0`.
    Repeat,
}

#[derive(Debug, Default, Args)]
pub struct SchemeFlags {
    #[arg(long)]
    pub theta: Option<f64>,
    /// Stabilization `ε = ε1 = ε2`.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, value_enum)]
    pub startup: Option<StartupKind>,
    #[arg(long)]
    pub t_end: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct MmsSpatialArgs {
    /// Number of refinement levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Cells per side on the coarsest level.
    #[arg(long)]
    pub coarsest: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[command(flatten)]
    pub scheme: SchemeFlags,
}

#[derive(Debug, Default, Args)]
pub struct MmsTemporalArgs {
    #[arg(long)]
    pub levels: Option<usize>,
    /// Largest time step.
    #[arg(long)]
    pub dt_coarsest: Option<f64>,
    /// Cells per side of the fixed mesh.
    #[arg(long)]
    pub cells: Option<usize>,
    #[command(flatten)]
    pub scheme: SchemeFlags,
}

#[derive(Debug, Default, Args)]
pub struct CavityArgs {
    #[arg(long)]
    pub ra: Option<f64>,
    #[arg(long)]
    pub pr: Option<f64>,
    #[arg(long)]
    pub le: Option<f64>,
    /// Buoyancy ratio.
    #[arg(long = "n-ratio", alias = "n")]
    pub n_ratio: Option<f64>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub ny: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub eps_scale: Option<f64>,
    #[arg(long)]
    pub steady_window: Option<usize>,
    #[arg(long)]
    pub steady_tol: Option<f64>,
    #[arg(long)]
    pub sample_every: Option<usize>,
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    /// Record the energy ledger in `stability.csv`.
    #[arg(long)]
    pub ledger: bool,
    #[arg(long, value_enum)]
    pub walls: Option<WallsFlag>,
    #[arg(long)]
    pub watchdog_limit: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WallsFlag {
    Benchmark,
    Homogeneous,
}

#[derive(Debug, Default, Args)]
pub struct IdentityArgs {
    #[arg(long)]
    pub draws: Option<usize>,
}

/// Mesh refinement study settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmsSpatialConfig {
    pub levels: usize,
    pub coarsest: usize,
    pub t_end: f64,
    /// Defaults to `t_end / 16`.
    pub dt: Option<f64>,
    pub theta: f64,
    pub eps: f64,
    pub startup: StartupKind,
}

impl Default for MmsSpatialConfig {
    fn default() -> Self {
        Self { levels: 4, coarsest: 4, t_end: 0.1, dt: None, theta: 1.0, eps: 0.0, startup: StartupKind::Exact }
    }
}

impl MmsSpatialConfig {
    pub fn cells(&self) -> Vec<usize> {
        (0..self.levels).map(|k| self.coarsest << k).collect()
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(self.t_end / 16.0)
    }
}

/// Time-step refinement study settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmsTemporalConfig {
    pub levels: usize,
    pub dt_coarsest: f64,
    pub cells: usize,
    pub t_end: f64,
    pub theta: f64,
    pub eps: f64,
    pub startup: StartupKind,
}

impl Default for MmsTemporalConfig {
    fn default() -> Self {
        Self { levels: 5, dt_coarsest: 1.0, cells: 64, t_end: 1.0, theta: 1.0, eps: 0.0, startup: StartupKind::Exact }
    }
}

impl MmsTemporalConfig {
    pub fn dts(&self) -> Vec<f64> {
        (0..self.levels).map(|k| self.dt_coarsest / (1u64 << k) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityConfig {
    pub draws: usize,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self { draws: 100 }
    }
}

/// Contents of a config file: shared keys plus one optional section per subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub mms_spatial: Option<MmsSpatialConfig>,
    pub mms_temporal: Option<MmsTemporalConfig>,
    pub cavity: Option<CavityConfig>,
    pub check_identities: Option<IdentityConfig>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("theta must lie in [1/2, 1] (got {0})")]
    Theta(f64),
    #[error("{0}")]
    Invalid(String),
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_config(&text).map_err(|e| match e {
        ConfigError::Schema { message, .. } => ConfigError::Schema { path: path.to_path_buf(), message },
        other => other,
    })
}

/// Parses a JSON config. Errors name the offending key path.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
        path: PathBuf::from("<config>"),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

fn check_theta(theta: f64) -> Result<(), ConfigError> {
    if (0.5..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(ConfigError::Theta(theta))
    }
}

fn scheme_error(e: SchemeError) -> ConfigError {
    match e {
        SchemeError::Theta(t) => ConfigError::Theta(t),
        other => ConfigError::Invalid(other.to_string()),
    }
}

fn apply_scheme(flags: &SchemeFlags, theta: &mut f64, eps: &mut f64, startup: &mut StartupKind, t_end: &mut f64) {
    if let Some(v) = flags.theta {
        *theta = v;
    }
    if let Some(v) = flags.eps {
        *eps = v;
    }
    if let Some(v) = flags.startup {
        *startup = v;
    }
    if let Some(v) = flags.t_end {
        *t_end = v;
    }
}

pub fn resolve_spatial(file: Option<MmsSpatialConfig>, args: &MmsSpatialArgs) -> Result<MmsSpatialConfig, ConfigError> {
    let mut c = file.unwrap_or_default();
    if let Some(v) = args.levels {
        c.levels = v;
    }
    if let Some(v) = args.coarsest {
        c.coarsest = v;
    }
    if let Some(v) = args.dt {
        c.dt = Some(v);
    }
    apply_scheme(&args.scheme, &mut c.theta, &mut c.eps, &mut c.startup, &mut c.t_end);
    check_theta(c.theta)?;
    if c.levels < 1 || c.coarsest < 1 {
        return Err(ConfigError::Invalid("levels and coarsest must be at least 1".into()));
    }
    if !(c.t_end > 0.0) {
        return Err(ConfigError::Invalid(format!("t_end must be positive (got {})", c.t_end)));
    }
    unit_params(c.theta, c.eps, c.dt()).validate().map_err(scheme_error)?;
    Ok(c)
}

pub fn resolve_temporal(
    file: Option<MmsTemporalConfig>,
    args: &MmsTemporalArgs,
) -> Result<MmsTemporalConfig, ConfigError> {
    let mut c = file.unwrap_or_default();
    if let Some(v) = args.levels {
        c.levels = v;
    }
    if let Some(v) = args.dt_coarsest {
        c.dt_coarsest = v;
    }
    if let Some(v) = args.cells {
        c.cells = v;
    }
    apply_scheme(&args.scheme, &mut c.theta, &mut c.eps, &mut c.startup, &mut c.t_end);
    check_theta(c.theta)?;
    if c.levels < 1 || c.cells < 1 {
        return Err(ConfigError::Invalid("levels and cells must be at least 1".into()));
    }
    if !(c.t_end > 0.0) {
        return Err(ConfigError::Invalid(format!("t_end must be positive (got {})", c.t_end)));
    }
    unit_params(c.theta, c.eps, c.dt_coarsest).validate().map_err(scheme_error)?;
    Ok(c)
}

pub fn resolve_cavity(file: Option<CavityConfig>, a: &CavityArgs) -> Result<CavityConfig, ConfigError> {
    let mut c = file.unwrap_or_default();
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { c.$field = v; } )* };
    }
    set!(
        ra,
        pr,
        le,
        n_ratio,
        nx,
        ny,
        dt,
        t_end,
        theta,
        eps_scale,
        steady_window,
        steady_tol,
        sample_every,
        watchdog_limit
    );
    if a.snapshot_every.is_some() {
        c.snapshot_every = a.snapshot_every;
    }
    if a.ledger {
        c.ledger = true;
    }
    if let Some(w) = a.walls {
        c.walls = match w {
            WallsFlag::Benchmark => WallData::Benchmark,
            WallsFlag::Homogeneous => WallData::Homogeneous,
        };
    }
    check_theta(c.theta)?;
    c.validate().map_err(|e| match e {
        CavityError::Scheme(s) => scheme_error(s),
        other => ConfigError::Invalid(other.to_string()),
    })?;
    Ok(c)
}

pub fn resolve_identities(file: Option<IdentityConfig>, a: &IdentityArgs) -> IdentityConfig {
    let mut c = file.unwrap_or_default();
    if let Some(v) = a.draws {
        c.draws = v;
    }
    c
}

type Job = Box<dyn FnOnce(&Path) -> anyhow::Result<Outcome>>;

/// Record written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

struct Outcome {
    code: i32,
    message: Option<String>,
    outputs: Vec<PathBuf>,
}

fn startup_for(kind: StartupKind, dt: f64) -> Startup {
    match kind {
        StartupKind::Exact => Startup::TwoLevel { dt },
        StartupKind::Repeat => Startup::Repeat,
    }
}

fn write_table(dir: &Path, name: &str, table: &RateTable) -> anyhow::Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    let path = dir.join(name);
    table.write_csv(&path).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(path);
    // one directory per refinement level
    for row in &table.rows {
        let level_dir = dir.join(format!("level_{}", row.level));
        fs::create_dir_all(&level_dir)?;
        let path = level_dir.join("errors.json");
        fs::write(&path, serde_json::to_string_pretty(row)?)?;
        outputs.push(path);
    }
    Ok(outputs)
}

fn mms_outcome(result: Result<RateTable, MmsError>, dir: &Path, name: &str) -> anyhow::Result<Outcome> {
    match result {
        Ok(table) => {
            for r in &table.rows {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
                println!(
                    "level {} h_or_dt {:.6} u {:.4e} ({}) T {:.4e} ({}) S {:.4e} ({})",
                    r.level,
                    r.h_or_dt,
                    r.errors.l2h1.u_h1,
                    fmt(r.rate_u),
                    r.errors.l2h1.t_h1,
                    fmt(r.rate_t),
                    r.errors.l2h1.s_h1,
                    fmt(r.rate_s)
                );
            }
            Ok(Outcome { code: EXIT_OK, message: None, outputs: write_table(dir, name, &table)? })
        }
        Err(MmsError::Step(e)) if e.is_divergence() => {
            Ok(Outcome { code: EXIT_DIVERGED, message: Some(e.to_string()), outputs: Vec::new() })
        }
        Err(e) => Err(e.into()),
    }
}

fn output_dir(cli: &Cli, file: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("ddbrink-out").join(cli.command.name()))
}

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let started = Instant::now();
    let file = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        },
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    if let Some(jobs) = cli.jobs.or(file.jobs) {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_CONFIG;
        }
        // only fails if a pool already exists, in which case it is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let dir = output_dir(&cli, &file);

    let resolved: Result<(serde_json::Value, Job), ConfigError> = match &cli.command {
        Command::MmsSpatial(a) => resolve_spatial(file.mms_spatial, a).map(|c| {
            let run: Job = Box::new(move |dir| {
                let params = unit_params(c.theta, c.eps, c.dt());
                let result =
                    spatial_sweep(&c.cells(), c.t_end, params, startup_for(c.startup, c.dt()), Arc::new(TrigSolution));
                mms_outcome(result, dir, "rates_spatial.csv")
            });
            (serde_json::to_value(c).expect("serializable"), run)
        }),
        Command::MmsTemporal(a) => resolve_temporal(file.mms_temporal, a).map(|c| {
            let run: Job = Box::new(move |dir| {
                let params = unit_params(c.theta, c.eps, c.dt_coarsest);
                let exact = c.startup == StartupKind::Exact;
                let result = temporal_sweep(&c.dts(), c.cells, c.t_end, params, exact, Arc::new(TrigSolution));
                mms_outcome(result, dir, "rates_temporal.csv")
            });
            (serde_json::to_value(c).expect("serializable"), run)
        }),
        Command::Cavity(a) => resolve_cavity(file.cavity, a).map(|c| {
            let run: Job = Box::new(move |dir| cavity_outcome(&c, dir));
            (serde_json::to_value(c).expect("serializable"), run)
        }),
        Command::CheckIdentities(a) => {
            let c = resolve_identities(file.check_identities, a);
            let run: Job = Box::new(move |dir| identity_outcome(verify_identities(c.draws, seed), dir));
            Ok((serde_json::to_value(c).expect("serializable"), run))
        }
    };
    let (params, run) = match resolved {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("error: creating {}: {e}", dir.display());
        return EXIT_FAILURE;
    }
    let outcome = run(&dir).unwrap_or_else(|e| Outcome {
        code: EXIT_FAILURE,
        message: Some(format!("{e:#}")),
        outputs: Vec::new(),
    });
    if let Some(m) = &outcome.message {
        eprintln!("{}: {m}", if outcome.code == EXIT_DIVERGED { "diverged" } else { "error" });
    }
    let mut outputs = outcome.outputs;
    let manifest_path = dir.join("manifest.json");
    outputs.push(manifest_path.clone());
    let manifest = Manifest {
        command: cli.command.name().to_string(),
        params,
        seed,
        outputs,
        wall_time_s: started.elapsed().as_secs_f64(),
        exit_code: outcome.code,
        message: outcome.message,
    };
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(anyhow::Error::from)
        .and_then(|text| fs::write(&manifest_path, text).map_err(anyhow::Error::from));
    if let Err(e) = written {
        eprintln!("error: writing manifest: {e}");
        return EXIT_FAILURE;
    }
    outcome.code
}

fn cavity_outcome(c: &CavityConfig, dir: &Path) -> anyhow::Result<Outcome> {
    match run_cavity(c, Some(dir)) {
        Ok(r) => {
            if let Some(s) = r.history.last() {
                println!(
                    "t {:.4} steps {} steady {} nu_hot {:.4} nu_cold {:.4} sh_hot {:.4} sh_cold {:.4}",
                    s.time, r.steps, r.steady, s.nu_hot, s.nu_cold, s.sh_hot, s.sh_cold
                );
            }
            if c.ledger {
                println!("ledger violations {}", r.ledger.iter().filter(|x| x.violated).count());
            }
            Ok(Outcome { code: EXIT_OK, message: None, outputs: r.outputs })
        }
        Err(e) if e.is_divergence() => {
            // partial outputs were flushed by the run
            let outputs = ["nu_sh.csv", "stability.csv"].iter().map(|f| dir.join(f)).filter(|p| p.exists()).collect();
            Ok(Outcome { code: EXIT_DIVERGED, message: Some(e.to_string()), outputs })
        }
        Err(e) => Err(anyhow!(e)),
    }
}

fn identity_outcome(report: IdentityReport, dir: &Path) -> anyhow::Result<Outcome> {
    let path = dir.join("identities.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "cases {} max identity residual {:.3e} min bound slack {:.3e} / {:.3e} / {:.3e} skew {:.3e} / {:.3e}",
        report.cases,
        report.max_identity_residual,
        report.min_lower_slack,
        report.min_upper_slack,
        report.min_upper_split_slack,
        report.max_skew_defect,
        report.max_skew_quadratic
    );
    let passed = report.passed(IDENTITY_TOLERANCE);
    Ok(Outcome {
        code: if passed { EXIT_OK } else { EXIT_FAILURE },
        message: (!passed).then(|| "identity checks exceeded tolerance".to_string()),
        outputs: vec![path],
    })
}

/// Parses `args` and runs; clap usage errors map to the config exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
