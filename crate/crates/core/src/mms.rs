//! Manufactured solutions, their forcing, error measurement and refinement sweeps.

use std::io;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fespace::{FiniteElementSpace, QuadratureRule};
use crate::mesh::{build_structured_rect, BoundaryTag, MeshError};
use crate::norms::{discrete_norm, NormError};
use crate::output::write_csv_file;
use crate::timestep::{
    initialize, run, BoundaryConditions, Flow, Forcing, InitialFields, Operators, ScalarDirichlet, SchemeParams,
    SimState, Spaces, Startup, StepError, Stepper, VectorDirichlet,
};

#[derive(Debug, Error)]
pub enum MmsError {
    #[error("error values must be positive (got {0:e} and {1:e})")]
    NonPositiveError(f64, f64),
    #[error("refinement ratio must exceed 1 (got {0})")]
    Ratio(f64),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error("sweep needs at least one level")]
    NoLevels,
}

/// Exact fields with the derivatives needed to build consistent forcing.
///
/// Velocity gradients are indexed `[component][direction]`.
pub trait ExactSolution: Send + Sync {
    fn velocity(&self, x: f64, y: f64, t: f64) -> [f64; 2];
    fn velocity_grad(&self, x: f64, y: f64, t: f64) -> [[f64; 2]; 2];
    fn velocity_laplacian(&self, x: f64, y: f64, t: f64) -> [f64; 2];
    fn velocity_dt(&self, x: f64, y: f64, t: f64) -> [f64; 2];
    fn pressure(&self, x: f64, y: f64, t: f64) -> f64;
    fn pressure_grad(&self, x: f64, y: f64, t: f64) -> [f64; 2];
    fn temperature(&self, x: f64, y: f64, t: f64) -> f64;
    fn temperature_grad(&self, x: f64, y: f64, t: f64) -> [f64; 2];
    fn temperature_laplacian(&self, x: f64, y: f64, t: f64) -> f64;
    fn temperature_dt(&self, x: f64, y: f64, t: f64) -> f64;
    fn concentration(&self, x: f64, y: f64, t: f64) -> f64;
    fn concentration_grad(&self, x: f64, y: f64, t: f64) -> [f64; 2];
    fn concentration_laplacian(&self, x: f64, y: f64, t: f64) -> f64;
    fn concentration_dt(&self, x: f64, y: f64, t: f64) -> f64;
}

/// `u = (cos y, sin x)eᵗ`, `p = (x − y)(1 + t)`, `T = sin(x + y)e^{1−t}`, `S = cos(x + y)e^{1−t}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigSolution;

impl ExactSolution for TrigSolution {
    fn velocity(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        [y.cos() * t.exp(), x.sin() * t.exp()]
    }
    fn velocity_grad(&self, x: f64, y: f64, t: f64) -> [[f64; 2]; 2] {
        let e = t.exp();
        [[0.0, -y.sin() * e], [x.cos() * e, 0.0]]
    }
    fn velocity_laplacian(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        [-y.cos() * t.exp(), -x.sin() * t.exp()]
    }
    fn velocity_dt(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        self.velocity(x, y, t)
    }
    fn pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        (x - y) * (1.0 + t)
    }
    fn pressure_grad(&self, _x: f64, _y: f64, t: f64) -> [f64; 2] {
        [1.0 + t, -(1.0 + t)]
    }
    fn temperature(&self, x: f64, y: f64, t: f64) -> f64 {
        (x + y).sin() * (1.0 - t).exp()
    }
    fn temperature_grad(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let d = (x + y).cos() * (1.0 - t).exp();
        [d, d]
    }
    fn temperature_laplacian(&self, x: f64, y: f64, t: f64) -> f64 {
        -2.0 * self.temperature(x, y, t)
    }
    fn temperature_dt(&self, x: f64, y: f64, t: f64) -> f64 {
        -self.temperature(x, y, t)
    }
    fn concentration(&self, x: f64, y: f64, t: f64) -> f64 {
        (x + y).cos() * (1.0 - t).exp()
    }
    fn concentration_grad(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let d = -(x + y).sin() * (1.0 - t).exp();
        [d, d]
    }
    fn concentration_laplacian(&self, x: f64, y: f64, t: f64) -> f64 {
        -2.0 * self.concentration(x, y, t)
    }
    fn concentration_dt(&self, x: f64, y: f64, t: f64) -> f64 {
        -self.concentration(x, y, t)
    }
}

/// Fields inside the discrete spaces (linear in time):
/// `u = (y², x²)(1 + t)`, `p = (x − y)(1 + t)`, `T = (x² + y²)(1 + t)`, `S = (x − 2xy)(1 + t)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PolynomialSolution;

impl ExactSolution for PolynomialSolution {
    fn velocity(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        [y * y * (1.0 + t), x * x * (1.0 + t)]
    }
    fn velocity_grad(&self, x: f64, y: f64, t: f64) -> [[f64; 2]; 2] {
        [[0.0, 2.0 * y * (1.0 + t)], [2.0 * x * (1.0 + t), 0.0]]
    }
    fn velocity_laplacian(&self, _x: f64, _y: f64, t: f64) -> [f64; 2] {
        [2.0 * (1.0 + t), 2.0 * (1.0 + t)]
    }
    fn velocity_dt(&self, x: f64, y: f64, _t: f64) -> [f64; 2] {
        [y * y, x * x]
    }
    fn pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        (x - y) * (1.0 + t)
    }
    fn pressure_grad(&self, _x: f64, _y: f64, t: f64) -> [f64; 2] {
        [1.0 + t, -(1.0 + t)]
    }
    fn temperature(&self, x: f64, y: f64, t: f64) -> f64 {
        (x * x + y * y) * (1.0 + t)
    }
    fn temperature_grad(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        [2.0 * x * (1.0 + t), 2.0 * y * (1.0 + t)]
    }
    fn temperature_laplacian(&self, _x: f64, _y: f64, t: f64) -> f64 {
        4.0 * (1.0 + t)
    }
    fn temperature_dt(&self, x: f64, y: f64, _t: f64) -> f64 {
        x * x + y * y
    }
    fn concentration(&self, x: f64, y: f64, t: f64) -> f64 {
        (x - 2.0 * x * y) * (1.0 + t)
    }
    fn concentration_grad(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        [(1.0 - 2.0 * y) * (1.0 + t), -2.0 * x * (1.0 + t)]
    }
    fn concentration_laplacian(&self, _x: f64, _y: f64, _t: f64) -> f64 {
        0.0
    }
    fn concentration_dt(&self, x: f64, y: f64, _t: f64) -> f64 {
        x - 2.0 * x * y
    }
}

/// Momentum source `f`: `u_t − νΔu + (u·∇)u + Da⁻¹u + ∇p − (β_T T + β_S S)g`.
pub fn momentum_source(ms: &dyn ExactSolution, p: &SchemeParams, x: f64, y: f64, t: f64) -> [f64; 2] {
    let u = ms.velocity(x, y, t);
    let gu = ms.velocity_grad(x, y, t);
    let lu = ms.velocity_laplacian(x, y, t);
    let ut = ms.velocity_dt(x, y, t);
    let gp = ms.pressure_grad(x, y, t);
    let b = p.beta_t * ms.temperature(x, y, t) + p.beta_s * ms.concentration(x, y, t);
    let mut f = [0.0; 2];
    for c in 0..2 {
        let adv = u[0] * gu[c][0] + u[1] * gu[c][1];
        f[c] = ut[c] - p.nu * lu[c] + adv + p.da_inv * u[c] + gp[c] - b * p.g[c];
    }
    f
}

/// Heat source `φ = T_t − γΔT + u·∇T`.
pub fn heat_source(ms: &dyn ExactSolution, p: &SchemeParams, x: f64, y: f64, t: f64) -> f64 {
    let u = ms.velocity(x, y, t);
    let g = ms.temperature_grad(x, y, t);
    ms.temperature_dt(x, y, t) - p.gamma * ms.temperature_laplacian(x, y, t) + u[0] * g[0] + u[1] * g[1]
}

/// Solute source `ψ = S_t − D_cΔS + u·∇S`.
pub fn solute_source(ms: &dyn ExactSolution, p: &SchemeParams, x: f64, y: f64, t: f64) -> f64 {
    let u = ms.velocity(x, y, t);
    let g = ms.concentration_grad(x, y, t);
    ms.concentration_dt(x, y, t) - p.dc * ms.concentration_laplacian(x, y, t) + u[0] * g[0] + u[1] * g[1]
}

/// Forcing closures `(f, φ, ψ)` for the time stepper.
pub fn forcing(ms: Arc<dyn ExactSolution>, params: SchemeParams) -> Forcing {
    let (a, b, c) = (ms.clone(), ms.clone(), ms);
    Forcing {
        momentum: Some(Arc::new(move |x, y, t| momentum_source(a.as_ref(), &params, x, y, t))),
        heat: Some(Arc::new(move |x, y, t| heat_source(b.as_ref(), &params, x, y, t))),
        solute: Some(Arc::new(move |x, y, t| solute_source(c.as_ref(), &params, x, y, t))),
    }
}

/// Dirichlet data on every wall taken from the exact solution.
pub fn exact_boundary(ms: Arc<dyn ExactSolution>) -> BoundaryConditions {
    let (a, b, c) = (ms.clone(), ms.clone(), ms);
    BoundaryConditions {
        velocity: VectorDirichlet {
            tags: BoundaryTag::ALL.to_vec(),
            value: Arc::new(move |x, y, t| a.velocity(x, y, t)),
        },
        temperature: ScalarDirichlet {
            tags: BoundaryTag::ALL.to_vec(),
            value: Arc::new(move |x, y, t| b.temperature(x, y, t)),
        },
        concentration: ScalarDirichlet {
            tags: BoundaryTag::ALL.to_vec(),
            value: Arc::new(move |x, y, t| c.concentration(x, y, t)),
        },
    }
}

pub fn initial_fields(ms: Arc<dyn ExactSolution>) -> InitialFields {
    let (a, b, c, d) = (ms.clone(), ms.clone(), ms.clone(), ms);
    InitialFields {
        velocity: Arc::new(move |x, y, t| a.velocity(x, y, t)),
        pressure: Some(Arc::new(move |x, y, t| b.pressure(x, y, t))),
        temperature: Arc::new(move |x, y, t| c.temperature(x, y, t)),
        concentration: Arc::new(move |x, y, t| d.concentration(x, y, t)),
    }
}

/// Quadrature used for errors against analytic fields (exact to degree 8).
pub fn error_rule() -> QuadratureRule {
    QuadratureRule::collapsed_gauss(5)
}

/// L2 norm and full H1 norm of `w_h − w` for one component of a finite element function.
pub fn field_error(
    space: &FiniteElementSpace,
    coeffs: &[f64],
    comp: usize,
    exact: impl Fn(f64, f64) -> (f64, [f64; 2]),
    rule: &QuadratureRule,
) -> (f64, f64) {
    let (mut l2, mut semi) = (0.0, 0.0);
    for t in 0..space.num_elements() {
        let jac = 2.0 * space.geometry(t).area;
        for (b, w) in rule.points.iter().zip(&rule.weights) {
            let [x, y] = space.map_point(t, *b);
            let (vh, gh) = space.eval(coeffs, comp, t, *b);
            let (v, g) = exact(x, y);
            l2 += w * jac * (vh - v).powi(2);
            semi += w * jac * ((gh[0] - g[0]).powi(2) + (gh[1] - g[1]).powi(2));
        }
    }
    (l2.sqrt(), (l2 + semi).sqrt())
}

/// Errors of one time level.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LevelErrors {
    pub u_l2: f64,
    pub u_h1: f64,
    pub t_l2: f64,
    pub t_h1: f64,
    pub s_l2: f64,
    pub s_h1: f64,
}

pub fn state_errors(spaces: &Spaces, state: &SimState, ms: &dyn ExactSolution, rule: &QuadratureRule) -> LevelErrors {
    let t = state.time;
    let mut u_l2 = 0.0;
    let mut u_h1 = 0.0;
    for c in 0..2 {
        let (l2, h1) = field_error(
            &spaces.velocity,
            &state.u_n,
            c,
            |x, y| (ms.velocity(x, y, t)[c], ms.velocity_grad(x, y, t)[c]),
            rule,
        );
        u_l2 += l2 * l2;
        u_h1 += h1 * h1;
    }
    let (t_l2, t_h1) = field_error(
        &spaces.scalar,
        &state.t_n,
        0,
        |x, y| (ms.temperature(x, y, t), ms.temperature_grad(x, y, t)),
        rule,
    );
    let (s_l2, s_h1) = field_error(
        &spaces.scalar,
        &state.s_n,
        0,
        |x, y| (ms.concentration(x, y, t), ms.concentration_grad(x, y, t)),
        rule,
    );
    LevelErrors { u_l2: u_l2.sqrt(), u_h1: u_h1.sqrt(), t_l2, t_h1, s_l2, s_h1 }
}

/// Space-time errors of one refinement level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepErrors {
    /// `(Δt Σ_{n=0}^{N} ‖eⁿ‖²)^{1/2}` in L2 and H1.
    pub l2h1: LevelErrors,
    /// `max_n ‖eⁿ‖` in L2 and H1.
    pub linf: LevelErrors,
    pub steps: usize,
}

/// Configuration of one manufactured-solution run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MmsRun {
    /// Cells per side of the unit square.
    pub cells: usize,
    pub t_end: f64,
    pub params: SchemeParams,
    pub startup: Startup,
}

/// Runs one manufactured problem and measures errors at every level `0..=N`.
pub fn run_mms(cfg: &MmsRun, ms: Arc<dyn ExactSolution>) -> Result<SweepErrors, MmsError> {
    let mesh = Arc::new(build_structured_rect(cfg.cells, cfg.cells, 1.0, 1.0)?);
    let spaces = Arc::new(Spaces::new(mesh).map_err(StepError::from)?);
    let ops = Arc::new(Operators::assemble(&spaces).map_err(StepError::from)?);
    let mut stepper =
        Stepper::new(cfg.params, spaces.clone(), ops, exact_boundary(ms.clone()), forcing(ms.clone(), cfg.params))?;
    let state = initialize(&spaces, &initial_fields(ms.clone()), cfg.startup);
    let rule = error_rule();
    let mut history: Vec<LevelErrors> = Vec::new();
    run(&mut stepper, state, cfg.t_end, None, |s| {
        history.push(state_errors(&spaces, s, ms.as_ref(), &rule));
        Flow::Continue
    })?;
    let dt = cfg.params.dt;
    let pick = |f: fn(&LevelErrors) -> f64| -> Result<(f64, f64), NormError> {
        let series: Vec<f64> = history.iter().map(f).collect();
        Ok((discrete_norm(&series, dt, Some(2))?, discrete_norm(&series, dt, None)?))
    };
    let mut l2h1 = LevelErrors::default();
    let mut linf = LevelErrors::default();
    type Accessor = (fn(&LevelErrors) -> f64, fn(&mut LevelErrors) -> &mut f64);
    let fields: [Accessor; 6] = [
        (|e| e.u_l2, |e| &mut e.u_l2),
        (|e| e.u_h1, |e| &mut e.u_h1),
        (|e| e.t_l2, |e| &mut e.t_l2),
        (|e| e.t_h1, |e| &mut e.t_h1),
        (|e| e.s_l2, |e| &mut e.s_l2),
        (|e| e.s_h1, |e| &mut e.s_h1),
    ];
    for (get, set) in fields {
        let (two, inf) = pick(get)?;
        *set(&mut l2h1) = two;
        *set(&mut linf) = inf;
    }
    Ok(SweepErrors { l2h1, linf, steps: history.len() - 1 })
}

/// `log(e_coarse / e_fine) / log(ratio)`.
pub fn compute_rate(e_coarse: f64, e_fine: f64, ratio: f64) -> Result<f64, MmsError> {
    if !(e_coarse > 0.0 && e_fine > 0.0) {
        return Err(MmsError::NonPositiveError(e_coarse, e_fine));
    }
    if !(ratio > 1.0) {
        return Err(MmsError::Ratio(ratio));
    }
    Ok((e_coarse / e_fine).ln() / ratio.ln())
}

/// One row of a rate table. Rates compare against the previous row and are
/// `None` on the first row or when an error vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateRow {
    pub level: usize,
    pub h_or_dt: f64,
    pub errors: SweepErrors,
    pub rate_u: Option<f64>,
    pub rate_t: Option<f64>,
    pub rate_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

pub const RATE_COLUMNS: [&str; 11] = [
    "level", "h_or_dt", "err_u_h1", "rate_u", "err_T_h1", "rate_T", "err_S_h1", "rate_S", "err_u_l2", "err_T_l2",
    "err_S_l2",
];

impl RateTable {
    /// Builds rows from `(h_or_dt, errors)` ordered coarse to fine.
    pub fn from_levels(levels: Vec<(f64, SweepErrors)>) -> Self {
        let mut rows: Vec<RateRow> = Vec::with_capacity(levels.len());
        for (k, (h, errors)) in levels.into_iter().enumerate() {
            let rate = |f: fn(&LevelErrors) -> f64| {
                rows.last().and_then(|prev: &RateRow| {
                    compute_rate(f(&prev.errors.l2h1), f(&errors.l2h1), prev.h_or_dt / h).ok()
                })
            };
            let (rate_u, rate_t, rate_s) = (rate(|e| e.u_h1), rate(|e| e.t_h1), rate(|e| e.s_h1));
            rows.push(RateRow { level: k, h_or_dt: h, errors, rate_u, rate_t, rate_s });
        }
        Self { rows }
    }

    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let e = &r.errors.l2h1;
                vec![
                    r.level as f64,
                    r.h_or_dt,
                    e.u_h1,
                    r.rate_u.unwrap_or(f64::NAN),
                    e.t_h1,
                    r.rate_t.unwrap_or(f64::NAN),
                    e.s_h1,
                    r.rate_s.unwrap_or(f64::NAN),
                    e.u_l2,
                    e.t_l2,
                    e.s_l2,
                ]
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        write_csv_file(path, &RATE_COLUMNS, &self.csv_rows())
    }

    /// Rates of the last pair of levels `(u, T, S)`.
    pub fn final_rates(&self) -> Option<(f64, f64, f64)> {
        let r = self.rows.last()?;
        Some((r.rate_u?, r.rate_t?, r.rate_s?))
    }
}

/// Mesh refinement at fixed `Δt`. `cells` lists cells per side, coarse to fine.
pub fn spatial_sweep(
    cells: &[usize],
    t_end: f64,
    params: SchemeParams,
    startup: Startup,
    ms: Arc<dyn ExactSolution>,
) -> Result<RateTable, MmsError> {
    if cells.is_empty() {
        return Err(MmsError::NoLevels);
    }
    let results: Result<Vec<_>, MmsError> = cells
        .par_iter()
        .map(|&n| {
            let cfg = MmsRun { cells: n, t_end, params, startup };
            Ok((1.0 / n as f64, run_mms(&cfg, ms.clone())?))
        })
        .collect();
    Ok(RateTable::from_levels(results?))
}

/// Time-step refinement on a fixed mesh. `dts` is ordered coarse to fine.
pub fn temporal_sweep(
    dts: &[f64],
    cells: usize,
    t_end: f64,
    params: SchemeParams,
    two_level_start: bool,
    ms: Arc<dyn ExactSolution>,
) -> Result<RateTable, MmsError> {
    if dts.is_empty() {
        return Err(MmsError::NoLevels);
    }
    let results: Result<Vec<_>, MmsError> = dts
        .par_iter()
        .map(|&dt| {
            let startup = if two_level_start { Startup::TwoLevel { dt } } else { Startup::Repeat };
            let cfg = MmsRun { cells, t_end, params: SchemeParams { dt, ..params }, startup };
            Ok((dt, run_mms(&cfg, ms.clone())?))
        })
        .collect();
    Ok(RateTable::from_levels(results?))
}

/// The manufactured-solution parameter set: unit coefficients, no Darcy drag.
pub fn unit_params(theta: f64, eps_all: f64, dt: f64) -> SchemeParams {
    SchemeParams {
        theta,
        eps: eps_all,
        eps1: eps_all,
        eps2: eps_all,
        dt,
        nu: 1.0,
        gamma: 1.0,
        dc: 1.0,
        da_inv: 0.0,
        beta_t: 1.0,
        beta_s: 1.0,
        g: [0.0, 1.0],
    }
}
