//! The θ/ε family of two-step IMEX schemes with curvature stabilization.
//!
//! With `D`, `F` and `H` the three-level combinations returned by
//! [`d_coeffs`], [`f_coeffs`] and [`h_coeffs`], each step solves
//!
//! ```text
//! (D(T), χ) + γ(∇F(T), ∇χ) + c*(H(u), F(T), χ) = (φ, χ)
//! (D(S), ζ) + D_c(∇F(S), ∇ζ) + d*(H(u), F(S), ζ) = (ψ, ζ)
//! (D(u), v) + ν(∇F(u), ∇v) + b*(H(u), F(u), v) + Da⁻¹(F(u), v) − (F(p), ∇·v)
//!     = β_T(g H(T), v) + β_S(g H(S), v) + (f, v)
//! (∇·u_{n+1}, q) = 0
//! ```
//!
//! Sources are evaluated at `t_n + θΔt`, Dirichlet data at `t_{n+1}`. Only old
//! levels enter the wind and the buoyancy, so the three systems are independent.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    assemble_buoyancy, assemble_convection_skew_with, assemble_divergence, assemble_load_scalar, assemble_load_vector,
    assemble_mass_with, assemble_stiffness_with, merge_constraints, space_pattern, AssemblyError, Pattern,
    SparseMatrix,
};
use crate::fespace::{build_space, FiniteElementSpace, SpaceError, ValueRank};
use crate::mesh::{BoundaryTag, TriangleMesh};
use crate::solver::{BlockSystem, LuSolver, PressureGauge, SaddlePointSolver, SolverError};

#[derive(Debug, Error, PartialEq)]
pub enum SchemeError {
    #[error("theta = {0} is outside the admissible range [1/2, 1]")]
    Theta(f64),
    #[error("{name} = {value} must be nonnegative")]
    Negative { name: &'static str, value: f64 },
    #[error("{name} = {value} must be positive")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} = {value} is not finite")]
    NonFinite { name: &'static str, value: f64 },
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("solution diverged at step {step} (t = {time}): {reason}")]
    Diverged { step: usize, time: f64, reason: String },
    #[error("linear solve failed at step {step}: {source}")]
    Solver { step: usize, source: SolverError },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("state vector {name} has length {got}, expected {expected}")]
    StateLength { name: &'static str, expected: usize, got: usize },
}

impl StepError {
    /// True for blow-up detected by the watchdog or a solve broken by non-finite data.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Self::Diverged { .. } | Self::Solver { source: SolverError::NonFinite | SolverError::Residual { .. }, .. }
        )
    }

    pub fn step(&self) -> Option<usize> {
        match self {
            Self::Diverged { step, .. } | Self::Solver { step, .. } => Some(*step),
            _ => None,
        }
    }
}

/// Scheme and physics constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeParams {
    pub theta: f64,
    pub eps: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub dt: f64,
    pub nu: f64,
    pub gamma: f64,
    pub dc: f64,
    pub da_inv: f64,
    pub beta_t: f64,
    pub beta_s: f64,
    pub g: [f64; 2],
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            eps: 0.0,
            eps1: 0.0,
            eps2: 0.0,
            dt: 0.01,
            nu: 1.0,
            gamma: 1.0,
            dc: 1.0,
            da_inv: 0.0,
            beta_t: 1.0,
            beta_s: 1.0,
            g: [0.0, 1.0],
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<(), SchemeError> {
        let all = [
            ("theta", self.theta),
            ("eps", self.eps),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("dt", self.dt),
            ("nu", self.nu),
            ("gamma", self.gamma),
            ("dc", self.dc),
            ("da_inv", self.da_inv),
            ("beta_t", self.beta_t),
            ("beta_s", self.beta_s),
            ("g[0]", self.g[0]),
            ("g[1]", self.g[1]),
        ];
        if let Some(&(name, value)) = all.iter().find(|(_, v)| !v.is_finite()) {
            return Err(SchemeError::NonFinite { name, value });
        }
        check_theta(self.theta)?;
        for (name, value) in [("eps", self.eps), ("eps1", self.eps1), ("eps2", self.eps2), ("da_inv", self.da_inv)] {
            if value < 0.0 {
                return Err(SchemeError::Negative { name, value });
            }
        }
        for (name, value) in [("dt", self.dt), ("nu", self.nu), ("gamma", self.gamma), ("dc", self.dc)] {
            if value <= 0.0 {
                return Err(SchemeError::NonPositive { name, value });
            }
        }
        Ok(())
    }

    /// The unstabilized two-step BDF scheme with linear extrapolation.
    pub fn bdf2le(self) -> Self {
        Self { theta: 1.0, eps: 0.0, eps1: 0.0, eps2: 0.0, ..self }
    }

    /// The unstabilized Crank-Nicolson scheme with linear extrapolation.
    pub fn cnle(self) -> Self {
        Self { theta: 0.5, eps: 0.0, eps1: 0.0, eps2: 0.0, ..self }
    }
}

fn check_theta(theta: f64) -> Result<(), SchemeError> {
    if (0.5..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(SchemeError::Theta(theta))
    }
}

/// Coefficients of `Δt·D(w)` on `(w_{n+1}, w_n, w_{n-1})`.
pub fn d_coeffs(theta: f64) -> Result<(f64, f64, f64), SchemeError> {
    check_theta(theta)?;
    Ok((theta + 0.5, -2.0 * theta, theta - 0.5))
}

/// Coefficients of `F^{δ,μ}(w)` on `(w_{n+1}, w_n, w_{n-1})`.
pub fn f_coeffs(theta: f64, delta: f64, mu: f64) -> Result<(f64, f64, f64), SchemeError> {
    if !(mu > 0.0) {
        return Err(SchemeError::NonPositive { name: "mu", value: mu });
    }
    if delta < 0.0 {
        return Err(SchemeError::Negative { name: "delta", value: delta });
    }
    Ok((theta * (mu + delta) / mu, 1.0 - theta * (mu + 2.0 * delta) / mu, theta * delta / mu))
}

/// Coefficients of the extrapolation `H(w)` on `(w_n, w_{n-1})`.
pub fn h_coeffs(theta: f64) -> (f64, f64) {
    (theta + 1.0, -theta)
}

/// Field of `(x, y, t)`.
pub type ScalarField = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
/// Two-component field of `(x, y, t)`.
pub type VectorField = Arc<dyn Fn(f64, f64, f64) -> [f64; 2] + Send + Sync>;

/// Taylor-Hood velocity/pressure pair plus the P2 space shared by T and S.
#[derive(Debug, Clone)]
pub struct Spaces {
    pub mesh: Arc<TriangleMesh>,
    pub velocity: FiniteElementSpace,
    pub pressure: FiniteElementSpace,
    pub scalar: FiniteElementSpace,
}

impl Spaces {
    pub fn new(mesh: Arc<TriangleMesh>) -> Result<Self, SpaceError> {
        Ok(Self {
            velocity: build_space(mesh.clone(), 2, ValueRank::Vector2)?,
            pressure: build_space(mesh.clone(), 1, ValueRank::Scalar)?,
            scalar: build_space(mesh.clone(), 2, ValueRank::Scalar)?,
            mesh,
        })
    }
}

/// Time-independent operators.
#[derive(Debug, Clone)]
pub struct Operators {
    pub velocity_pattern: Arc<Pattern>,
    pub scalar_pattern: Arc<Pattern>,
    pub velocity_mass: SparseMatrix,
    pub velocity_stiffness: SparseMatrix,
    pub scalar_mass: SparseMatrix,
    pub scalar_stiffness: SparseMatrix,
    pub divergence: SparseMatrix,
    pub pressure_mass: SparseMatrix,
}

impl Operators {
    pub fn assemble(spaces: &Spaces) -> Result<Self, AssemblyError> {
        let velocity_pattern = space_pattern(&spaces.velocity);
        let scalar_pattern = space_pattern(&spaces.scalar);
        Ok(Self {
            velocity_mass: assemble_mass_with(&spaces.velocity, velocity_pattern.clone())?,
            velocity_stiffness: assemble_stiffness_with(&spaces.velocity, velocity_pattern.clone())?,
            scalar_mass: assemble_mass_with(&spaces.scalar, scalar_pattern.clone())?,
            scalar_stiffness: assemble_stiffness_with(&spaces.scalar, scalar_pattern.clone())?,
            divergence: assemble_divergence(&spaces.velocity, &spaces.pressure)?,
            pressure_mass: assemble_mass_with(&spaces.pressure, space_pattern(&spaces.pressure))?,
            velocity_pattern,
            scalar_pattern,
        })
    }
}

/// Dirichlet data for a scalar field on a set of walls.
#[derive(Clone)]
pub struct ScalarDirichlet {
    pub tags: Vec<BoundaryTag>,
    pub value: ScalarField,
}

/// Dirichlet data for the velocity on a set of walls.
#[derive(Clone)]
pub struct VectorDirichlet {
    pub tags: Vec<BoundaryTag>,
    pub value: VectorField,
}

impl ScalarDirichlet {
    pub fn homogeneous(tags: &[BoundaryTag]) -> Self {
        Self { tags: tags.to_vec(), value: Arc::new(|_, _, _| 0.0) }
    }
}

impl VectorDirichlet {
    pub fn no_slip(tags: &[BoundaryTag]) -> Self {
        Self { tags: tags.to_vec(), value: Arc::new(|_, _, _| [0.0, 0.0]) }
    }
}

#[derive(Clone)]
pub struct BoundaryConditions {
    pub velocity: VectorDirichlet,
    pub temperature: ScalarDirichlet,
    pub concentration: ScalarDirichlet,
}

impl BoundaryConditions {
    /// No slip and zero scalar values on every wall.
    pub fn homogeneous() -> Self {
        Self {
            velocity: VectorDirichlet::no_slip(&BoundaryTag::ALL),
            temperature: ScalarDirichlet::homogeneous(&BoundaryTag::ALL),
            concentration: ScalarDirichlet::homogeneous(&BoundaryTag::ALL),
        }
    }
}

/// Body force `f` and scalar sources `φ`, `ψ`.
#[derive(Clone, Default)]
pub struct Forcing {
    pub momentum: Option<VectorField>,
    pub heat: Option<ScalarField>,
    pub solute: Option<ScalarField>,
}

/// Two consecutive time levels of every unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u_n: Vec<f64>,
    pub u_nm1: Vec<f64>,
    pub p_n: Vec<f64>,
    pub p_nm1: Vec<f64>,
    pub t_n: Vec<f64>,
    pub t_nm1: Vec<f64>,
    pub s_n: Vec<f64>,
    pub s_nm1: Vec<f64>,
    pub time: f64,
    pub step: usize,
}

impl SimState {
    pub fn zeros(spaces: &Spaces) -> Self {
        let (nu, np, ns) = (spaces.velocity.dof_count(), spaces.pressure.dof_count(), spaces.scalar.dof_count());
        Self {
            u_n: vec![0.0; nu],
            u_nm1: vec![0.0; nu],
            p_n: vec![0.0; np],
            p_nm1: vec![0.0; np],
            t_n: vec![0.0; ns],
            t_nm1: vec![0.0; ns],
            s_n: vec![0.0; ns],
            s_nm1: vec![0.0; ns],
            time: 0.0,
            step: 0,
        }
    }

    fn check(&self, spaces: &Spaces) -> Result<(), StepError> {
        let (nu, np, ns) = (spaces.velocity.dof_count(), spaces.pressure.dof_count(), spaces.scalar.dof_count());
        for (name, v, expected) in [
            ("u_n", &self.u_n, nu),
            ("u_nm1", &self.u_nm1, nu),
            ("p_n", &self.p_n, np),
            ("p_nm1", &self.p_nm1, np),
            ("t_n", &self.t_n, ns),
            ("t_nm1", &self.t_nm1, ns),
            ("s_n", &self.s_n, ns),
            ("s_nm1", &self.s_nm1, ns),
        ] {
            if v.len() != expected {
                return Err(StepError::StateLength { name, expected, got: v.len() });
            }
        }
        Ok(())
    }
}

/// Analytic initial data. The pressure is optional and defaults to zero.
#[derive(Clone)]
pub struct InitialFields {
    pub velocity: VectorField,
    pub pressure: Option<ScalarField>,
    pub temperature: ScalarField,
    pub concentration: ScalarField,
}

/// How the level `n − 1` is supplied at the first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Startup {
    /// Both levels are the interpolant of the data at `t = 0`.
    Repeat,
    /// Level `n − 1` is the interpolant of the data at `t = −Δt`.
    TwoLevel { dt: f64 },
}

pub fn initialize(spaces: &Spaces, fields: &InitialFields, startup: Startup) -> SimState {
    let level = |t: f64| {
        let u = spaces.velocity.interpolate_vector(|x, y| (fields.velocity)(x, y, t)).expect("vector space");
        let p = match &fields.pressure {
            Some(f) => {
                let mut p = spaces.pressure.interpolate_scalar(|x, y| f(x, y, t)).expect("scalar space");
                let weights = pressure_weights(spaces);
                crate::solver::shift_to_zero_mean(&mut p, &weights);
                p
            }
            None => vec![0.0; spaces.pressure.dof_count()],
        };
        let temp = spaces.scalar.interpolate_scalar(|x, y| (fields.temperature)(x, y, t)).expect("scalar space");
        let conc = spaces.scalar.interpolate_scalar(|x, y| (fields.concentration)(x, y, t)).expect("scalar space");
        (u, p, temp, conc)
    };
    let (u_n, p_n, t_n, s_n) = level(0.0);
    let (u_nm1, p_nm1, t_nm1, s_nm1) = match startup {
        Startup::Repeat => (u_n.clone(), p_n.clone(), t_n.clone(), s_n.clone()),
        Startup::TwoLevel { dt } => level(-dt),
    };
    SimState { u_n, u_nm1, p_n, p_nm1, t_n, t_nm1, s_n, s_nm1, time: 0.0, step: 0 }
}

fn pressure_weights(spaces: &Spaces) -> Vec<f64> {
    let pattern = space_pattern(&spaces.pressure);
    assemble_mass_with(&spaces.pressure, pattern).expect("own pattern").row_sums()
}

/// Magnitude above which the watchdog declares divergence.
pub const DEFAULT_WATCHDOG_LIMIT: f64 = 1e10;

fn combine(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect()
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}

/// Advances [`SimState`] one step at a time, reusing factorization analyses.
pub struct Stepper {
    params: SchemeParams,
    spaces: Arc<Spaces>,
    ops: Arc<Operators>,
    bc: BoundaryConditions,
    forcing: Forcing,
    watchdog_limit: f64,
    velocity_nodes: Vec<usize>,
    temperature_nodes: Vec<usize>,
    concentration_nodes: Vec<usize>,
    pressure_weights: Vec<f64>,
    lu_temperature: LuSolver,
    lu_concentration: LuSolver,
    saddle: SaddlePointSolver,
}

impl Stepper {
    pub fn new(
        params: SchemeParams,
        spaces: Arc<Spaces>,
        ops: Arc<Operators>,
        bc: BoundaryConditions,
        forcing: Forcing,
    ) -> Result<Self, StepError> {
        params.validate()?;
        let velocity_nodes = spaces.velocity.boundary_nodes(&bc.velocity.tags);
        let temperature_nodes = spaces.scalar.boundary_nodes(&bc.temperature.tags);
        let concentration_nodes = spaces.scalar.boundary_nodes(&bc.concentration.tags);
        let pressure_weights = ops.pressure_mass.row_sums();
        Ok(Self {
            params,
            spaces,
            ops,
            bc,
            forcing,
            watchdog_limit: DEFAULT_WATCHDOG_LIMIT,
            velocity_nodes,
            temperature_nodes,
            concentration_nodes,
            pressure_weights,
            lu_temperature: LuSolver::new(),
            lu_concentration: LuSolver::new(),
            saddle: SaddlePointSolver::new(),
        })
    }

    pub fn with_watchdog_limit(mut self, limit: f64) -> Self {
        self.watchdog_limit = limit;
        self
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn spaces(&self) -> &Arc<Spaces> {
        &self.spaces
    }

    pub fn operators(&self) -> &Arc<Operators> {
        &self.ops
    }

    /// Computes level `n + 1` and returns the shifted state.
    pub fn advance(&mut self, state: &SimState) -> Result<SimState, StepError> {
        state.check(&self.spaces)?;
        let p = self.params;
        let step = state.step + 1;
        let t_new = state.time + p.dt;
        let t_mid = state.time + p.theta * p.dt;
        let (bn, bnm1) = h_coeffs(p.theta);
        let wind = combine(bn, &state.u_n, bnm1, &state.u_nm1);

        let spaces = &self.spaces;
        let scalar_conv =
            assemble_convection_skew_with(&spaces.scalar, self.ops.scalar_pattern.clone(), &spaces.velocity, &wind)?;
        let vector_conv = assemble_convection_skew_with(
            &spaces.velocity,
            self.ops.velocity_pattern.clone(),
            &spaces.velocity,
            &wind,
        )?;

        let temperature = ScalarProblem {
            diffusivity: p.gamma,
            delta: p.eps1,
            source: self.forcing.heat.clone(),
            bc: &self.bc.temperature,
            nodes: &self.temperature_nodes,
            w_n: &state.t_n,
            w_nm1: &state.t_nm1,
        };
        let concentration = ScalarProblem {
            diffusivity: p.dc,
            delta: p.eps2,
            source: self.forcing.solute.clone(),
            bc: &self.bc.concentration,
            nodes: &self.concentration_nodes,
            w_n: &state.s_n,
            w_nm1: &state.s_nm1,
        };
        let ops = &self.ops;
        let (lu_t, lu_s, saddle) = (&mut self.lu_temperature, &mut self.lu_concentration, &mut self.saddle);
        let momentum = MomentumProblem {
            params: &p,
            spaces,
            ops,
            conv: &vector_conv,
            state,
            forcing: self.forcing.momentum.clone(),
            bc: &self.bc.velocity,
            nodes: &self.velocity_nodes,
            weights: &self.pressure_weights,
        };
        let ((t_res, s_res), up_res) = rayon::join(
            || {
                rayon::join(
                    || temperature.solve(&p, spaces, ops, &scalar_conv, lu_t, t_mid, t_new),
                    || concentration.solve(&p, spaces, ops, &scalar_conv, lu_s, t_mid, t_new),
                )
            },
            || momentum.solve(saddle, t_mid, t_new),
        );
        let wrap = |e: SolverError| StepError::Solver { step, source: e };
        let t_next = t_res.map_err(wrap)?;
        let s_next = s_res.map_err(wrap)?;
        let (u_next, p_next) = up_res.map_err(wrap)?;

        let next = SimState {
            u_nm1: state.u_n.clone(),
            u_n: u_next,
            p_nm1: state.p_n.clone(),
            p_n: p_next,
            t_nm1: state.t_n.clone(),
            t_n: t_next,
            s_nm1: state.s_n.clone(),
            s_n: s_next,
            time: t_new,
            step,
        };
        self.watchdog(&next)?;
        Ok(next)
    }

    fn watchdog(&self, s: &SimState) -> Result<(), StepError> {
        for (name, v) in
            [("velocity", &s.u_n), ("pressure", &s.p_n), ("temperature", &s.t_n), ("concentration", &s.s_n)]
        {
            if let Some(bad) = v.iter().find(|x| !x.is_finite() || x.abs() > self.watchdog_limit) {
                return Err(StepError::Diverged {
                    step: s.step,
                    time: s.time,
                    reason: format!("{name} value {bad:e} exceeds limit {:e}", self.watchdog_limit),
                });
            }
        }
        Ok(())
    }
}

struct ScalarProblem<'a> {
    diffusivity: f64,
    delta: f64,
    source: Option<ScalarField>,
    bc: &'a ScalarDirichlet,
    nodes: &'a [usize],
    w_n: &'a [f64],
    w_nm1: &'a [f64],
}

impl ScalarProblem<'_> {
    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        p: &SchemeParams,
        spaces: &Spaces,
        ops: &Operators,
        conv: &SparseMatrix,
        lu: &mut LuSolver,
        t_mid: f64,
        t_new: f64,
    ) -> Result<Vec<f64>, SolverError> {
        let (cp, c0, cm) = d_coeffs(p.theta).expect("validated");
        let (ap, a0, am) = f_coeffs(p.theta, self.delta, self.diffusivity).expect("validated");
        let transport = SparseMatrix::linear_combination(&[(self.diffusivity, &ops.scalar_stiffness), (1.0, conv)])?;
        let mut a = SparseMatrix::linear_combination(&[(cp / p.dt, &ops.scalar_mass), (ap, &transport)])?;

        let mut rhs = match &self.source {
            Some(f) => assemble_load_scalar(&spaces.scalar, |x, y| f(x, y, t_mid))?,
            None => vec![0.0; spaces.scalar.dof_count()],
        };
        let history_d = combine(c0 / p.dt, self.w_n, cm / p.dt, self.w_nm1);
        axpy(&mut rhs, -1.0, &ops.scalar_mass.mul_vec(&history_d));
        let history_f = combine(a0, self.w_n, am, self.w_nm1);
        axpy(&mut rhs, -1.0, &transport.mul_vec(&history_f));

        let coords = spaces.scalar.node_coordinates();
        let values: Vec<f64> = self.nodes.iter().map(|&n| (self.bc.value)(coords[n][0], coords[n][1], t_new)).collect();
        let fixed = merge_constraints(self.nodes, &values, rhs.len())?;
        crate::assembly::apply_constraints(&mut a, &mut rhs, &fixed)?;
        lu.solve(&a, &rhs)
    }
}

struct MomentumProblem<'a> {
    params: &'a SchemeParams,
    spaces: &'a Spaces,
    ops: &'a Operators,
    conv: &'a SparseMatrix,
    state: &'a SimState,
    forcing: Option<VectorField>,
    bc: &'a VectorDirichlet,
    nodes: &'a [usize],
    weights: &'a [f64],
}

impl MomentumProblem<'_> {
    fn solve(
        &self,
        saddle: &mut SaddlePointSolver,
        t_mid: f64,
        t_new: f64,
    ) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
        let p = self.params;
        let (ops, spaces, state) = (self.ops, self.spaces, self.state);
        let (cp, c0, cm) = d_coeffs(p.theta).expect("validated");
        let (ap, a0, am) = f_coeffs(p.theta, p.eps, p.nu).expect("validated");
        let (bn, bnm1) = h_coeffs(p.theta);

        let transport = SparseMatrix::linear_combination(&[
            (p.nu, &ops.velocity_stiffness),
            (1.0, self.conv),
            (p.da_inv, &ops.velocity_mass),
        ])?;
        let k = SparseMatrix::linear_combination(&[(cp / p.dt, &ops.velocity_mass), (ap, &transport)])?;

        let mut rhs = match &self.forcing {
            Some(f) => assemble_load_vector(&spaces.velocity, |x, y| f(x, y, t_mid))?,
            None => vec![0.0; spaces.velocity.dof_count()],
        };
        if p.beta_t != 0.0 || p.beta_s != 0.0 {
            // β_T H(T) + β_S H(S) as one scalar field
            let mut field = combine(p.beta_t * bn, &state.t_n, p.beta_t * bnm1, &state.t_nm1);
            axpy(&mut field, p.beta_s * bn, &state.s_n);
            axpy(&mut field, p.beta_s * bnm1, &state.s_nm1);
            let buoy = assemble_buoyancy(&spaces.velocity, &spaces.scalar, p.g, 1.0, &field)?;
            axpy(&mut rhs, 1.0, &buoy);
        }
        let history_d = combine(c0 / p.dt, &state.u_n, cm / p.dt, &state.u_nm1);
        axpy(&mut rhs, -1.0, &ops.velocity_mass.mul_vec(&history_d));
        let history_f = combine(a0, &state.u_n, am, &state.u_nm1);
        axpy(&mut rhs, -1.0, &transport.mul_vec(&history_f));

        let coords = spaces.velocity.node_coordinates();
        let mut dofs = Vec::with_capacity(2 * self.nodes.len());
        let mut values = Vec::with_capacity(2 * self.nodes.len());
        for &n in self.nodes {
            let v = (self.bc.value)(coords[n][0], coords[n][1], t_new);
            dofs.extend([2 * n, 2 * n + 1]);
            values.extend(v);
        }
        let system = BlockSystem {
            velocity_block: &k,
            divergence: &ops.divergence,
            rhs_velocity: rhs,
            rhs_pressure: vec![0.0; spaces.pressure.dof_count()],
            constrained_dofs: &dofs,
            constrained_values: &values,
        };
        // the unknown is F(p); recover p_{n+1} from it
        let (u, big_p) = saddle.solve(&system, &PressureGauge::ZeroMean { weights: self.weights.to_vec() })?;
        let pressure = big_p
            .iter()
            .zip(state.p_n.iter().zip(&state.p_nm1))
            .map(|(bp, (pn, pm))| (bp - a0 * pn - am * pm) / ap)
            .collect();
        Ok((u, pressure))
    }
}

/// One step with freshly built solvers.
pub fn advance(
    state: &SimState,
    params: SchemeParams,
    spaces: Arc<Spaces>,
    ops: Arc<Operators>,
    forcing: Forcing,
    bc: BoundaryConditions,
) -> Result<SimState, StepError> {
    Stepper::new(params, spaces, ops, bc, forcing)?.advance(state)
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_state: SimState,
    pub snapshots: Vec<SimState>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Whether the time loop continues after an observed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Number of fixed steps needed to reach `t_end` from `t_start`.
pub fn step_count(t_start: f64, t_end: f64, dt: f64) -> usize {
    ((t_end - t_start) / dt - 1e-9).ceil().max(0.0) as usize
}

/// Fixed-step loop to `t_end`. `observe` sees every new state (including the
/// initial one) and may stop the loop; every `snapshot_every`-th state is kept.
pub fn run(
    stepper: &mut Stepper,
    initial: SimState,
    t_end: f64,
    snapshot_every: Option<usize>,
    mut observe: impl FnMut(&SimState) -> Flow,
) -> Result<RunOutcome, StepError> {
    let steps = step_count(initial.time, t_end, stepper.params.dt);
    let mut snapshots = Vec::new();
    let keep = |s: &SimState, snaps: &mut Vec<SimState>| {
        if let Some(every) = snapshot_every {
            if every > 0 && s.step.is_multiple_of(every) {
                snaps.push(s.clone());
            }
        }
    };
    keep(&initial, &mut snapshots);
    let mut stopped_early = observe(&initial) == Flow::Stop;
    let mut state = initial;
    let mut taken = 0;
    while !stopped_early && taken < steps {
        state = stepper.advance(&state)?;
        taken += 1;
        keep(&state, &mut snapshots);
        if observe(&state) == Flow::Stop && taken < steps {
            stopped_early = true;
        }
    }
    Ok(RunOutcome { final_state: state, snapshots, steps: taken, stopped_early })
}
