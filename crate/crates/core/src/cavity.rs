//! Double-diffusive natural convection in a 1 x 2 cavity heated and salted
//! from the left wall.

use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fespace::{gauss_legendre, FiniteElementSpace};
use crate::mesh::{build_structured_rect, BoundaryTag, MeshError, TriangleMesh};
use crate::norms::{EnergyMonitor, LedgerRow, LEDGER_COLUMNS};
use crate::output::{write_csv_file, write_vtk_file, PointData};
use crate::timestep::{
    run, BoundaryConditions, Flow, Forcing, Operators, ScalarDirichlet, SchemeError, SchemeParams, SimState, Spaces,
    StepError, Stepper, VectorDirichlet, DEFAULT_WATCHDOG_LIMIT,
};

pub const CAVITY_WIDTH: f64 = 1.0;
pub const CAVITY_HEIGHT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CavityError {
    #[error("{name} must be positive (got {value})")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be finite and nonnegative (got {value})")]
    Negative { name: &'static str, value: f64 },
    #[error("wall {0} carries no Dirichlet scalar data")]
    NotDirichletWall(BoundaryTag),
    #[error("mesh has no {0} wall")]
    UntaggedMesh(BoundaryTag),
    #[error("diverged at step {step} (t = {time}): {reason}")]
    Diverged { step: usize, time: f64, reason: String },
    #[error(transparent)]
    Step(StepError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("output: {0}")]
    Io(#[from] io::Error),
}

impl From<StepError> for CavityError {
    fn from(e: StepError) -> Self {
        match e {
            StepError::Diverged { step, time, reason } => Self::Diverged { step, time, reason },
            other => Self::Step(other),
        }
    }
}

impl CavityError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::Diverged { .. }) || matches!(self, Self::Step(e) if e.is_divergence())
    }
}

/// Scalar wall data of a cavity run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WallData {
    /// `T = S = 1` on the left wall, `0` on the right, impulsive start.
    #[default]
    Benchmark,
    /// `T = S = 0` on both vertical walls, starting from `T = S = 4x(1 − x)`.
    Homogeneous,
}

/// Benchmark configuration in nondimensional groups. Missing keys take the [`Default`] values when deserialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavityConfig {
    pub ra: f64,
    pub pr: f64,
    pub le: f64,
    /// Buoyancy ratio `N`.
    pub n_ratio: f64,
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub t_end: f64,
    pub theta: f64,
    /// `ε = scale·ν`, `ε1 = scale·γ`, `ε2 = scale·D_c`.
    pub eps_scale: f64,
    /// Window (in steps) of the steady-state test on the hot-wall Nusselt and
    /// Sherwood numbers.
    pub steady_window: usize,
    /// Relative change over the window below which the run stops; 0 disables.
    pub steady_tol: f64,
    pub sample_every: usize,
    /// VTK cadence in steps. The final state is always written when an
    /// output directory is given.
    pub snapshot_every: Option<usize>,
    /// Record the energy ledger.
    pub ledger: bool,
    pub walls: WallData,
    pub watchdog_limit: f64,
}

impl Default for CavityConfig {
    fn default() -> Self {
        Self {
            ra: 1e4,
            pr: 1.0,
            le: 2.0,
            n_ratio: 0.8,
            nx: 25,
            ny: 40,
            dt: 1e-3,
            t_end: 1.0,
            theta: 1.0,
            eps_scale: 1.0,
            steady_window: 1000,
            steady_tol: 1e-4,
            sample_every: 1,
            snapshot_every: None,
            ledger: false,
            walls: WallData::Benchmark,
            watchdog_limit: DEFAULT_WATCHDOG_LIMIT,
        }
    }
}

impl CavityConfig {
    pub fn validate(&self) -> Result<(), CavityError> {
        let positive = [
            ("ra", self.ra),
            ("pr", self.pr),
            ("le", self.le),
            ("dt", self.dt),
            ("t_end", self.t_end),
            ("watchdog_limit", self.watchdog_limit),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CavityError::NonPositive { name, value });
            }
        }
        for (name, value) in [("n_ratio", self.n_ratio), ("eps_scale", self.eps_scale), ("steady_tol", self.steady_tol)]
        {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(CavityError::Negative { name, value });
            }
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(MeshError::CellCount { nx: self.nx, ny: self.ny }.into());
        }
        map_dimensionless(self)?.validate()?;
        Ok(())
    }
}

/// Coefficients of the nondimensional system: `ν = Pr`, `γ = 1`,
/// `D_c = 1/Le`, `β_T|g| = Ra·Pr`, `β_S = N·β_T`, `g = (0, 1)`, no Darcy drag.
pub fn map_dimensionless(c: &CavityConfig) -> Result<SchemeParams, CavityError> {
    for (name, value) in [("ra", c.ra), ("pr", c.pr), ("le", c.le)] {
        if !(value > 0.0) {
            return Err(CavityError::NonPositive { name, value });
        }
    }
    let (nu, gamma, dc) = (c.pr, 1.0, 1.0 / c.le);
    let beta_t = c.ra * c.pr;
    Ok(SchemeParams {
        theta: c.theta,
        eps: c.eps_scale * nu,
        eps1: c.eps_scale * gamma,
        eps2: c.eps_scale * dc,
        dt: c.dt,
        nu,
        gamma,
        dc,
        da_inv: 0.0,
        beta_t,
        beta_s: c.n_ratio * beta_t,
        g: [0.0, 1.0],
    })
}

/// No slip everywhere; `T = S = 1` on the left wall and `0` on the right.
/// The horizontal walls are insulated.
pub fn cavity_bc(mesh: &TriangleMesh) -> Result<BoundaryConditions, CavityError> {
    for tag in BoundaryTag::ALL {
        if !mesh.boundary_edges().iter().any(|e| e.tag == tag) {
            return Err(CavityError::UntaggedMesh(tag));
        }
    }
    let walls = [BoundaryTag::Left, BoundaryTag::Right];
    let scalar = ScalarDirichlet {
        tags: walls.to_vec(),
        value: Arc::new(|x, _, _| if x < 0.5 * CAVITY_WIDTH { 1.0 } else { 0.0 }),
    };
    Ok(BoundaryConditions {
        velocity: VectorDirichlet::no_slip(&BoundaryTag::ALL),
        temperature: scalar.clone(),
        concentration: scalar,
    })
}

/// No slip everywhere and `T = S = 0` on both vertical walls.
pub fn homogeneous_cavity_bc(mesh: &TriangleMesh) -> Result<BoundaryConditions, CavityError> {
    let mut bc = cavity_bc(mesh)?;
    bc.temperature = ScalarDirichlet::homogeneous(&[BoundaryTag::Left, BoundaryTag::Right]);
    bc.concentration = bc.temperature.clone();
    Ok(bc)
}

/// Fluid at rest with `T = S = 4x(1 − x)`.
pub fn bump_start(spaces: &Spaces) -> SimState {
    let mut state = SimState::zeros(spaces);
    let bump = spaces
        .scalar
        .interpolate_scalar(|x, _| 4.0 * x * (CAVITY_WIDTH - x) / (CAVITY_WIDTH * CAVITY_WIDTH))
        .expect("scalar space");
    state.t_n = bump.clone();
    state.t_nm1 = bump.clone();
    state.s_n = bump.clone();
    state.s_nm1 = bump;
    state
}

/// Fluid at rest, `T = S = 0` except on the hot wall.
pub fn impulsive_start(spaces: &Spaces) -> SimState {
    let mut state = SimState::zeros(spaces);
    for n in spaces.scalar.boundary_nodes(&[BoundaryTag::Left]) {
        for v in [&mut state.t_n, &mut state.t_nm1, &mut state.s_n, &mut state.s_nm1] {
            v[n] = 1.0;
        }
    }
    state
}

/// `−∂w/∂x` along a vertical wall and its averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WallProfile {
    pub y: Vec<f64>,
    pub local: Vec<f64>,
    /// `∫ local dy`.
    pub integral: f64,
    /// `integral / H`.
    pub average: f64,
}

/// Quadrature points along a vertical wall, located in the adjacent triangles.
#[derive(Debug, Clone)]
pub struct WallSampler {
    tag: BoundaryTag,
    /// `(triangle, barycentric point, y, weight)`.
    points: Vec<(usize, [f64; 3], f64, f64)>,
    height: f64,
}

const WALL_GAUSS_POINTS: usize = 3;

impl WallSampler {
    pub fn new(space: &FiniteElementSpace, tag: BoundaryTag) -> Result<Self, CavityError> {
        if !tag.is_vertical() {
            return Err(CavityError::NotDirichletWall(tag));
        }
        let mesh = space.mesh();
        let verts = mesh.vertices();
        let (xg, wg) = gauss_legendre(WALL_GAUSS_POINTS);
        let mut points = Vec::new();
        for edge in mesh.boundary_edges().iter().filter(|e| e.tag == tag) {
            let [a, b] = edge.vertices;
            let (t, tri) = mesh
                .triangles()
                .iter()
                .enumerate()
                .find(|(_, tri)| tri.contains(&a) && tri.contains(&b))
                .ok_or(CavityError::UntaggedMesh(tag))?;
            let ia = tri.iter().position(|&v| v == a).unwrap();
            let ib = tri.iter().position(|&v| v == b).unwrap();
            let (pa, pb) = (verts[a], verts[b]);
            let half = 0.5 * (pb[1] - pa[1]).abs();
            for (&xi, &w) in xg.iter().zip(&wg) {
                let s = 0.5 * (1.0 + xi);
                let mut bary = [0.0; 3];
                bary[ia] = 1.0 - s;
                bary[ib] = s;
                let y = pa[1] + s * (pb[1] - pa[1]);
                points.push((t, bary, y, w * half));
            }
        }
        if points.is_empty() {
            return Err(CavityError::UntaggedMesh(tag));
        }
        points.sort_by(|p, q| p.2.total_cmp(&q.2));
        Ok(Self { tag, points, height: mesh.height() })
    }

    pub fn tag(&self) -> BoundaryTag {
        self.tag
    }

    pub fn profile(&self, space: &FiniteElementSpace, coeffs: &[f64]) -> WallProfile {
        let mut y = Vec::with_capacity(self.points.len());
        let mut local = Vec::with_capacity(self.points.len());
        let mut integral = 0.0;
        for &(t, bary, py, w) in &self.points {
            let (_, grad) = space.eval(coeffs, 0, t, bary);
            let q = -grad[0];
            y.push(py);
            local.push(q);
            integral += w * q;
        }
        WallProfile { y, local, integral, average: integral / self.height }
    }
}

/// Local and averaged Nusselt number of a temperature field on a vertical wall.
pub fn nusselt(space: &FiniteElementSpace, temperature: &[f64], wall: BoundaryTag) -> Result<WallProfile, CavityError> {
    Ok(WallSampler::new(space, wall)?.profile(space, temperature))
}

/// Local and averaged Sherwood number of a concentration field on a vertical wall.
pub fn sherwood(
    space: &FiniteElementSpace,
    concentration: &[f64],
    wall: BoundaryTag,
) -> Result<WallProfile, CavityError> {
    Ok(WallSampler::new(space, wall)?.profile(space, concentration))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NuShSample {
    pub time: f64,
    pub nu_hot: f64,
    pub nu_cold: f64,
    pub sh_hot: f64,
    pub sh_cold: f64,
    pub nu_hot_raw: f64,
    pub sh_hot_raw: f64,
}

pub const NU_SH_COLUMNS: [&str; 7] = ["time", "nu_hot", "nu_cold", "sh_hot", "sh_cold", "nu_hot_raw", "sh_hot_raw"];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NuShHistory {
    pub samples: Vec<NuShSample>,
}

impl NuShHistory {
    pub fn last(&self) -> Option<&NuShSample> {
        self.samples.last()
    }

    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| vec![s.time, s.nu_hot, s.nu_cold, s.sh_hot, s.sh_cold, s.nu_hot_raw, s.sh_hot_raw])
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        write_csv_file(path, &NU_SH_COLUMNS, &self.csv_rows())
    }

    /// `|dNu/dt|` of the hot wall from the last two samples.
    pub fn final_nu_rate(&self) -> Option<f64> {
        let n = self.samples.len();
        if n < 2 {
            return None;
        }
        let (a, b) = (&self.samples[n - 2], &self.samples[n - 1]);
        Some(((b.nu_hot - a.nu_hot) / (b.time - a.time)).abs())
    }
}

/// Everything a cavity run reports.
#[derive(Debug, Clone)]
pub struct CavityRun {
    pub params: SchemeParams,
    pub history: NuShHistory,
    pub final_state: SimState,
    pub steps: usize,
    pub steady: bool,
    /// `max_n ‖T_n − S_n‖_∞` over all levels.
    pub max_ts_difference: f64,
    pub t_range: (f64, f64),
    pub s_range: (f64, f64),
    pub ledger: Vec<LedgerRow>,
    pub outputs: Vec<PathBuf>,
}

impl CavityRun {
    /// Relative mismatch between hot- and cold-wall Nusselt numbers at the end.
    pub fn flux_imbalance(&self) -> Option<f64> {
        self.history.last().map(|s| (s.nu_hot - s.nu_cold).abs() / s.nu_hot.abs().max(f64::MIN_POSITIVE))
    }
}

struct Samplers {
    hot: WallSampler,
    cold: WallSampler,
}

impl Samplers {
    fn sample(&self, space: &FiniteElementSpace, s: &SimState) -> NuShSample {
        let nh = self.hot.profile(space, &s.t_n);
        let nc = self.cold.profile(space, &s.t_n);
        let sh = self.hot.profile(space, &s.s_n);
        let sc = self.cold.profile(space, &s.s_n);
        NuShSample {
            time: s.time,
            nu_hot: nh.average,
            nu_cold: nc.average,
            sh_hot: sh.average,
            sh_cold: sc.average,
            nu_hot_raw: nh.integral,
            sh_hot_raw: sh.integral,
        }
    }
}

fn range(v: &[f64], r: (f64, f64)) -> (f64, f64) {
    v.iter().fold(r, |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

pub fn write_snapshot(dir: &Path, spaces: &Spaces, state: &SimState) -> io::Result<PathBuf> {
    let path = dir.join(format!("fields_{}.vtk", state.step));
    let fields = [
        PointData::Vector { name: "velocity", values: &state.u_n },
        PointData::Scalar { name: "temperature", values: &state.t_n },
        PointData::Scalar { name: "concentration", values: &state.s_n },
        PointData::Scalar { name: "pressure", values: &state.p_n },
    ];
    write_vtk_file(&path, &spaces.mesh, &format!("cavity t={}", state.time), &fields)?;
    Ok(path)
}

/// Time loop from rest. With `out_dir`, writes `nu_sh.csv`, VTK snapshots and
/// (if enabled) `stability.csv`; these are also flushed when the run diverges.
pub fn run_cavity(config: &CavityConfig, out_dir: Option<&Path>) -> Result<CavityRun, CavityError> {
    config.validate()?;
    let params = map_dimensionless(config)?;
    let mesh = Arc::new(build_structured_rect(config.nx, config.ny, CAVITY_WIDTH, CAVITY_HEIGHT)?);
    let bc = match config.walls {
        WallData::Benchmark => cavity_bc(&mesh)?,
        WallData::Homogeneous => homogeneous_cavity_bc(&mesh)?,
    };
    let spaces = Arc::new(Spaces::new(mesh).map_err(StepError::from)?);
    let ops = Arc::new(Operators::assemble(&spaces).map_err(StepError::from)?);
    let samplers = Samplers {
        hot: WallSampler::new(&spaces.scalar, BoundaryTag::Left)?,
        cold: WallSampler::new(&spaces.scalar, BoundaryTag::Right)?,
    };
    let mut stepper = Stepper::new(params, spaces.clone(), ops.clone(), bc, Forcing::default())?
        .with_watchdog_limit(config.watchdog_limit);
    let initial = match config.walls {
        WallData::Benchmark => impulsive_start(&spaces),
        WallData::Homogeneous => bump_start(&spaces),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut monitor = config.ledger.then(|| EnergyMonitor::new(params, ops, (CAVITY_WIDTH, CAVITY_HEIGHT)));
    let mut history = NuShHistory::default();
    let mut recent: VecDeque<(f64, f64)> = VecDeque::with_capacity(config.steady_window + 1);
    let mut steady = false;
    let mut max_diff = 0.0f64;
    let (mut t_range, mut s_range) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    let mut outputs = Vec::new();
    let mut io_error: Option<io::Error> = None;
    let every = config.sample_every.max(1);

    let result = run(&mut stepper, initial, config.t_end, None, |s| {
        let sample = samplers.sample(&spaces.scalar, s);
        if s.step % every == 0 {
            history.samples.push(sample);
        }
        if let Some(m) = monitor.as_mut() {
            m.observe(s);
        }
        let diff = s.t_n.iter().zip(&s.s_n).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        max_diff = max_diff.max(diff);
        t_range = range(&s.t_n, t_range);
        s_range = range(&s.s_n, s_range);
        if let (Some(dir), Some(k)) = (out_dir, config.snapshot_every) {
            if k > 0 && s.step % k == 0 {
                match write_snapshot(dir, &spaces, s) {
                    Ok(p) => outputs.push(p),
                    Err(e) => io_error = Some(e),
                }
            }
        }
        if io_error.is_some() {
            return Flow::Stop;
        }
        // the impulsive start is not part of the steady-state window
        if s.step > 0 && config.steady_tol > 0.0 && config.steady_window > 0 {
            recent.push_back((sample.nu_hot, sample.sh_hot));
            if recent.len() > config.steady_window + 1 {
                recent.pop_front();
            }
            if recent.len() == config.steady_window + 1 {
                let (nu0, sh0) = recent[0];
                let settled = |now: f64, then: f64| (now - then).abs() <= config.steady_tol * now.abs();
                if settled(sample.nu_hot, nu0) && settled(sample.sh_hot, sh0) {
                    steady = true;
                    return Flow::Stop;
                }
            }
        }
        Flow::Continue
    });

    let ledger = monitor.map(|m| m.rows().to_vec()).unwrap_or_default();
    if let Some(dir) = out_dir {
        let path = dir.join("nu_sh.csv");
        history.write_csv(&path)?;
        outputs.push(path);
        if config.ledger {
            let path = dir.join("stability.csv");
            write_ledger_csv(&path, &ledger)?;
            outputs.push(path);
        }
    }
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = result?;
    if let Some(dir) = out_dir {
        let last_written = outputs.iter().any(|p| p.ends_with(format!("fields_{}.vtk", outcome.final_state.step)));
        if !last_written {
            outputs.push(write_snapshot(dir, &spaces, &outcome.final_state)?);
        }
    }
    // a sample for the final state even when it falls between samples
    if history.last().map(|s| s.time) != Some(outcome.final_state.time) {
        history.samples.push(samplers.sample(&spaces.scalar, &outcome.final_state));
    }
    Ok(CavityRun {
        params,
        history,
        final_state: outcome.final_state,
        steps: outcome.steps,
        steady,
        max_ts_difference: max_diff,
        t_range,
        s_range,
        ledger,
        outputs,
    })
}

pub fn write_ledger_csv(path: &Path, rows: &[LedgerRow]) -> io::Result<()> {
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.step as f64,
                r.time,
                r.uu,
                r.tt,
                r.ss,
                r.curv_u,
                r.curv_t,
                r.curv_s,
                r.bound_u,
                r.bound_t,
                r.bound_s,
                if r.violated { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    write_csv_file(path, &LEDGER_COLUMNS, &data)
}

/// Independent runs over a parameter set, each in `out_root/run_<k>` if given.
pub fn parameter_study(configs: &[CavityConfig], out_root: Option<&Path>) -> Vec<Result<CavityRun, CavityError>> {
    configs
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let dir = out_root.map(|r| r.join(format!("run_{k}")));
            run_cavity(c, dir.as_deref())
        })
        .collect()
}
