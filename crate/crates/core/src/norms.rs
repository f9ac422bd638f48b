//! G- and F-norms of the two-step scheme, their algebraic identities as
//! executable checks, discrete space-time norms and the energy ledger.
//!
//! All quadratic forms act on coefficient vectors through an L2 mass matrix.

use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::assembly::{assemble_convection_skew, assemble_mass, SparseMatrix};
use crate::fespace::{build_space, ValueRank};
use crate::mesh::build_structured_rect;
use crate::output::write_csv_file;
use crate::timestep::{d_coeffs, f_coeffs, Operators, SchemeParams, SimState};

#[derive(Debug, Error, PartialEq)]
pub enum NormError {
    #[error("empty trajectory")]
    Empty,
    #[error("exponent must be at least 1")]
    Exponent,
}

/// Parameters of the G/F matrices for one field: `(θ, δ, μ)` is `(θ, ε, ν)`,
/// `(θ, ε1, γ)` or `(θ, ε2, D_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GNormParams {
    pub theta: f64,
    pub eps: f64,
    pub mu: f64,
}

impl GNormParams {
    pub fn velocity(p: &SchemeParams) -> Self {
        Self { theta: p.theta, eps: p.eps, mu: p.nu }
    }

    pub fn temperature(p: &SchemeParams) -> Self {
        Self { theta: p.theta, eps: p.eps1, mu: p.gamma }
    }

    pub fn concentration(p: &SchemeParams) -> Self {
        Self { theta: p.theta, eps: p.eps2, mu: p.dc }
    }

    fn ratio(&self) -> f64 {
        self.eps / self.mu
    }

    /// Scalar blocks `(g11, g12, g22)` of the symmetric G matrix.
    ///
    /// These are the blocks whose quadratic form equals
    /// `(2θ+1)/4‖u‖² + (1−2θ)/4‖v‖² + c‖u−v‖²` with
    /// `c = (θ+1)(2θ−1)/4 + θε/(2μ)`.
    pub fn g_blocks(&self) -> (f64, f64, f64) {
        let (t, r) = (self.theta, self.ratio());
        let g11 = t * (2.0 * t + 3.0) / 4.0 + t * r / 2.0;
        let g12 = -((t + 1.0) * (2.0 * t - 1.0) / 4.0 + t * r / 2.0);
        let g22 = t * (2.0 * t - 1.0) / 4.0 + t * r / 2.0;
        (g11, g12, g22)
    }

    /// Weight of `‖u − v‖²` in the G quadratic form.
    pub fn difference_weight(&self) -> f64 {
        let t = self.theta;
        (t + 1.0) * (2.0 * t - 1.0) / 4.0 + t * self.ratio() / 2.0
    }

    /// The F matrix multiplier `θ(2θ−1) + 4θ²ε/μ`.
    pub fn f_factor(&self) -> f64 {
        let t = self.theta;
        t * (2.0 * t - 1.0) + 4.0 * t * t * self.ratio()
    }
}

fn inner(mass: &SparseMatrix, a: &[f64], b: &[f64]) -> f64 {
    mass.bilinear(a, b)
}

/// `([a; b], G [a; b])` in the mass inner product. May be negative.
pub fn g_norm_sq(w_a: &[f64], w_b: &[f64], mass: &SparseMatrix, p: &GNormParams) -> f64 {
    let (g11, g12, g22) = p.g_blocks();
    g11 * inner(mass, w_a, w_a) + 2.0 * g12 * inner(mass, w_a, w_b) + g22 * inner(mass, w_b, w_b)
}

/// `(θ(2θ−1) + 4θ²ε/μ)‖w‖²`.
pub fn f_norm_sq(w: &[f64], mass: &SparseMatrix, p: &GNormParams) -> f64 {
    p.f_factor() * inner(mass, w, w)
}

fn curvature(w_np1: &[f64], w_n: &[f64], w_nm1: &[f64]) -> Vec<f64> {
    w_np1.iter().zip(w_n).zip(w_nm1).map(|((a, b), c)| a - 2.0 * b + c).collect()
}

fn three_level(c: (f64, f64, f64), w_np1: &[f64], w_n: &[f64], w_nm1: &[f64]) -> Vec<f64> {
    w_np1.iter().zip(w_n).zip(w_nm1).map(|((a, b), d)| c.0 * a + c.1 * b + c.2 * d).collect()
}

/// Both sides of the step identity
/// `(D(w), F(w)) = [G(w_{n+1}, w_n) − G(w_n, w_{n−1})]/Δt + F-norm(curvature)/(4Δt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentitySides {
    pub lhs: f64,
    pub rhs: f64,
    /// `(‖w_{n+1}‖ + ‖w_n‖ + ‖w_{n−1}‖)² / Δt`.
    pub scale: f64,
}

pub fn identity_sides(
    w_np1: &[f64],
    w_n: &[f64],
    w_nm1: &[f64],
    dt: f64,
    p: &GNormParams,
    mass: &SparseMatrix,
) -> IdentitySides {
    let (cp, c0, cm) = d_coeffs(p.theta).expect("theta checked by caller");
    let d: Vec<f64> = three_level((cp / dt, c0 / dt, cm / dt), w_np1, w_n, w_nm1);
    let f = three_level(f_coeffs(p.theta, p.eps, p.mu).expect("mu > 0"), w_np1, w_n, w_nm1);
    let lhs = inner(mass, &d, &f);
    let curv = curvature(w_np1, w_n, w_nm1);
    let rhs =
        (g_norm_sq(w_np1, w_n, mass, p) - g_norm_sq(w_n, w_nm1, mass, p)) / dt + f_norm_sq(&curv, mass, p) / (4.0 * dt);
    let norm = |w: &[f64]| inner(mass, w, w).max(0.0).sqrt();
    let scale = (norm(w_np1) + norm(w_n) + norm(w_nm1)).powi(2) / dt;
    IdentitySides { lhs, rhs, scale }
}

/// `|LHS − RHS|` of the step identity.
pub fn check_gf_identity(
    w_np1: &[f64],
    w_n: &[f64],
    w_nm1: &[f64],
    dt: f64,
    p: &GNormParams,
    mass: &SparseMatrix,
) -> f64 {
    let s = identity_sides(w_np1, w_n, w_nm1, dt, p, mass);
    (s.lhs - s.rhs).abs()
}

/// Slack of each G-norm bound (nonnegative means the bound holds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GBoundSlack {
    /// `G − [(2θ+1)/4‖u‖² − (2θ−1)/4‖v‖²]`.
    pub lower: f64,
    /// `(2θ+1)/4‖u‖² + c‖u−v‖² − G`.
    pub upper: f64,
    /// `[(2θ+1)/4 + 2c]‖u‖² + 2c‖v‖² − G`.
    pub upper_split: f64,
}

pub fn g_bound_slack(u: &[f64], v: &[f64], mass: &SparseMatrix, p: &GNormParams) -> GBoundSlack {
    let t = p.theta;
    let uu = inner(mass, u, u);
    let vv = inner(mass, v, v);
    let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    let dd = inner(mass, &diff, &diff);
    let c = p.difference_weight();
    let g = g_norm_sq(u, v, mass, p);
    GBoundSlack {
        lower: g - ((2.0 * t + 1.0) / 4.0 * uu - (2.0 * t - 1.0) / 4.0 * vv),
        upper: (2.0 * t + 1.0) / 4.0 * uu + c * dd - g,
        upper_split: ((2.0 * t + 1.0) / 4.0 + 2.0 * c) * uu + 2.0 * c * vv - g,
    }
}

/// `(Δt Σ ‖vⁿ‖^m)^{1/m}` over the given per-level norms, or their maximum when `m` is `None`.
pub fn discrete_norm(level_norms: &[f64], dt: f64, m: Option<u32>) -> Result<f64, NormError> {
    if level_norms.is_empty() {
        return Err(NormError::Empty);
    }
    match m {
        None => Ok(level_norms.iter().fold(0.0, |a, &b| a.max(b))),
        Some(0) => Err(NormError::Exponent),
        Some(m) => {
            let s: f64 = level_norms.iter().map(|v| v.abs().powi(m as i32)).sum();
            Ok((dt * s).powf(1.0 / m as f64))
        }
    }
}

/// Outcome of the randomized algebra checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityReport {
    pub draws: usize,
    pub cases: usize,
    /// Largest `|LHS − RHS| / scale` of the step identity.
    pub max_identity_residual: f64,
    pub min_lower_slack: f64,
    pub min_upper_slack: f64,
    pub min_upper_split_slack: f64,
    /// Largest `|G(w, w) − ½‖w‖²| / ‖w‖²`.
    pub max_diagonal_defect: f64,
    /// Largest `max|N + Nᵀ|` over random winds.
    pub max_skew_defect: f64,
    /// Largest `|vᵀNv| / (‖v‖²‖w‖)` over random winds and vectors.
    pub max_skew_quadratic: f64,
}

impl IdentityReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_identity_residual <= tol
            && self.min_lower_slack >= -tol
            && self.min_upper_slack >= -tol
            && self.min_upper_split_slack >= -tol
            && self.max_diagonal_defect <= tol
            && self.max_skew_defect <= 1e-13
            && self.max_skew_quadratic <= 1e-12
    }
}

pub const THETA_GRID: [f64; 3] = [0.5, 0.75, 1.0];
pub const RATIO_GRID: [f64; 3] = [0.0, 0.5, 1.0];

/// Randomized verification of the step identity, the G-norm bounds and
/// skew-symmetry of assembled convection, reproducible from `seed`.
pub fn verify_identities(draws: usize, seed: u64) -> IdentityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = Arc::new(build_structured_rect(4, 4, 1.0, 1.0).expect("valid mesh"));
    let scalar = build_space(mesh.clone(), 2, ValueRank::Scalar).expect("P2");
    let velocity = build_space(mesh, 2, ValueRank::Vector2).expect("P2 vector");
    let mass = assemble_mass(&scalar);
    let n = scalar.dof_count();
    let mut report = IdentityReport {
        draws,
        cases: 0,
        max_identity_residual: 0.0,
        min_lower_slack: f64::INFINITY,
        min_upper_slack: f64::INFINITY,
        min_upper_split_slack: f64::INFINITY,
        max_diagonal_defect: 0.0,
        max_skew_defect: 0.0,
        max_skew_quadratic: 0.0,
    };
    for _ in 0..draws {
        let mut vector = |scale: f64| -> Vec<f64> { (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect() };
        let w = [vector(1.0), vector(1.0), vector(1.0)];
        let dt = 10f64.powf(rng.gen_range(-3.0..0.0));
        for theta in THETA_GRID {
            for ratio in RATIO_GRID {
                let mu = 1.0;
                let p = GNormParams { theta, eps: ratio * mu, mu };
                let s = identity_sides(&w[0], &w[1], &w[2], dt, &p, &mass);
                report.max_identity_residual = report.max_identity_residual.max((s.lhs - s.rhs).abs() / s.scale);
                let b = g_bound_slack(&w[0], &w[1], &mass, &p);
                let ww = inner(&mass, &w[0], &w[0]);
                report.min_lower_slack = report.min_lower_slack.min(b.lower / ww);
                report.min_upper_slack = report.min_upper_slack.min(b.upper / ww);
                report.min_upper_split_slack = report.min_upper_split_slack.min(b.upper_split / ww);
                let diag = (g_norm_sq(&w[0], &w[0], &mass, &p) - 0.5 * ww).abs() / ww;
                report.max_diagonal_defect = report.max_diagonal_defect.max(diag);
                report.cases += 1;
            }
        }
    }
    let nv = velocity.dof_count();
    for _ in 0..draws.clamp(1, 10) {
        let wind: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wnorm = wind.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (space, dim) in [(&scalar, n), (&velocity, nv)] {
            let conv = assemble_convection_skew(space, &velocity, &wind).expect("matching spaces");
            report.max_skew_defect = report.max_skew_defect.max(conv.max_abs_symmetric_part());
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vv: f64 = v.iter().map(|x| x * x).sum();
            report.max_skew_quadratic = report.max_skew_quadratic.max(conv.bilinear(&v, &v).abs() / (vv * wnorm));
        }
    }
    report
}

/// One ledger row of the discrete energy bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerRow {
    pub step: usize,
    pub time: f64,
    pub uu: f64,
    pub tt: f64,
    pub ss: f64,
    /// `1/(2θ+1) Σ F-norm²(w_{n+1} − 2w_n + w_{n−1})` up to the current step.
    pub curv_u: f64,
    pub curv_t: f64,
    pub curv_s: f64,
    /// Accumulated dissipation terms of each left-hand side.
    pub diss_u: f64,
    pub diss_t: f64,
    pub diss_s: f64,
    pub bound_u: f64,
    pub bound_t: f64,
    pub bound_s: f64,
    pub violated: bool,
}

impl LedgerRow {
    pub fn lhs_u(&self) -> f64 {
        self.uu + self.curv_u + self.diss_u
    }

    pub fn lhs_t(&self) -> f64 {
        self.tt + self.curv_t + self.diss_t
    }

    pub fn lhs_s(&self) -> f64 {
        self.ss + self.curv_s + self.diss_s
    }
}

pub const LEDGER_COLUMNS: [&str; 12] =
    ["step", "time", "uu", "TT", "SS", "curv_u", "curv_T", "curv_S", "bound_u", "bound_T", "bound_S", "violated"];

/// Relative slack allowed before a bound counts as violated (roundoff only).
pub const LEDGER_TOLERANCE: f64 = 1e-10;

#[derive(Clone)]
struct Start {
    u0: Vec<f64>,
    t0: Vec<f64>,
    s0: Vec<f64>,
}

/// Accumulates the unconditional stability ledger step by step.
///
/// The velocity bound needs the unspecified constant `C` of the buoyancy
/// estimate; [`EnergyMonitor::buoyancy_constant`] gives the value used by default.
pub struct EnergyMonitor {
    params: SchemeParams,
    ops: Arc<Operators>,
    c_buoyancy: f64,
    start: Option<Start>,
    g1: Option<(f64, f64, f64)>,
    level_nm2: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    sums: [f64; 6],
    rows: Vec<LedgerRow>,
}

impl EnergyMonitor {
    pub fn new(params: SchemeParams, ops: Arc<Operators>, domain: (f64, f64)) -> Self {
        let c = Self::buoyancy_constant(&params, domain);
        Self::with_constant(params, ops, c)
    }

    pub fn with_constant(params: SchemeParams, ops: Arc<Operators>, c_buoyancy: f64) -> Self {
        Self { params, ops, c_buoyancy, start: None, g1: None, level_nm2: None, sums: [0.0; 6], rows: Vec::new() }
    }

    /// `C = 2 C_P² |g|² max(β_T, β_S)²` with `C_P² = 1/(π²(W⁻² + H⁻²))` the
    /// Poincaré constant of a `W × H` rectangle.
    pub fn buoyancy_constant(p: &SchemeParams, (w, h): (f64, f64)) -> f64 {
        let cp2 = 1.0 / (std::f64::consts::PI.powi(2) * (1.0 / (w * w) + 1.0 / (h * h)));
        let g2 = p.g[0] * p.g[0] + p.g[1] * p.g[1];
        2.0 * cp2 * g2 * p.beta_t.abs().max(p.beta_s.abs()).powi(2)
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }

    pub fn observe(&mut self, state: &SimState) {
        let p = self.params;
        let ops = self.ops.clone();
        let (mv, ms) = (&ops.velocity_mass, &ops.scalar_mass);
        let (gu, gt, gs) = (GNormParams::velocity(&p), GNormParams::temperature(&p), GNormParams::concentration(&p));
        let theta = p.theta;
        let w = 2.0 * theta + 1.0;
        let rho = (2.0 * theta - 1.0) / w;

        let start = self
            .start
            .get_or_insert_with(|| Start { u0: state.u_n.clone(), t0: state.t_n.clone(), s0: state.s_n.clone() })
            .clone();
        let n = state.step;
        if n == 1 && self.g1.is_none() {
            self.g1 = Some((
                g_norm_sq(&state.u_n, &start.u0, mv, &gu),
                g_norm_sq(&state.t_n, &start.t0, ms, &gt),
                g_norm_sq(&state.s_n, &start.s0, ms, &gs),
            ));
        }
        if n >= 2 {
            if let Some((u2, t2, s2)) = &self.level_nm2 {
                // the term with index N − 1 uses levels N, N − 1, N − 2
                let fu = f_coeffs(theta, p.eps, p.nu).expect("validated");
                let ft = f_coeffs(theta, p.eps1, p.gamma).expect("validated");
                let fs = f_coeffs(theta, p.eps2, p.dc).expect("validated");
                let cu = curvature(&state.u_n, &state.u_nm1, u2);
                let ct = curvature(&state.t_n, &state.t_nm1, t2);
                let cs = curvature(&state.s_n, &state.s_nm1, s2);
                self.sums[0] += f_norm_sq(&cu, mv, &gu) / w;
                self.sums[1] += f_norm_sq(&ct, ms, &gt) / w;
                self.sums[2] += f_norm_sq(&cs, ms, &gs) / w;
                let fu_v = three_level(fu, &state.u_n, &state.u_nm1, u2);
                let ft_v = three_level(ft, &state.t_n, &state.t_nm1, t2);
                let fs_v = three_level(fs, &state.s_n, &state.s_nm1, s2);
                self.sums[3] += 2.0 * p.dt * p.nu / w * ops.velocity_stiffness.bilinear(&fu_v, &fu_v)
                    + 4.0 * p.dt * p.da_inv / w * mv.bilinear(&fu_v, &fu_v);
                self.sums[4] += 4.0 * p.dt * p.gamma / w * ops.scalar_stiffness.bilinear(&ft_v, &ft_v);
                self.sums[5] += 4.0 * p.dt * p.dc / w * ops.scalar_stiffness.bilinear(&fs_v, &fs_v);
            }
        }
        self.level_nm2 = Some((state.u_nm1.clone(), state.t_nm1.clone(), state.s_nm1.clone()));

        let uu = mv.bilinear(&state.u_n, &state.u_n);
        let tt = ms.bilinear(&state.t_n, &state.t_n);
        let ss = ms.bilinear(&state.s_n, &state.s_n);
        let rho_n = rho.powi(n as i32);
        let t00 = ms.bilinear(&start.t0, &start.t0);
        let s00 = ms.bilinear(&start.s0, &start.s0);
        let u00 = mv.bilinear(&start.u0, &start.u0);
        let (bound_u, bound_t, bound_s) = match (n, self.g1) {
            (0, _) | (_, None) => (uu, tt, ss),
            (_, Some((g_u, g_t, g_s))) => {
                let nn = n as f64;
                let bound_t = rho_n * t00 + 4.0 * nn / w * g_t;
                let bound_s = rho_n * s00 + 4.0 * nn / w * g_s;
                // ‖T_1‖² is read from level 1 via G(T1, T0) and the stored start
                let t11 = self.rows.get(1).map_or(tt, |r| r.tt);
                let s11 = self.rows.get(1).map_or(ss, |r| r.ss);
                let c = self.c_buoyancy;
                let geo = 1.0 - rho_n;
                let bound_u = c * p.dt * w / p.nu * geo * (t11 + t00)
                    + c * p.dt / w * g_t
                    + c * p.dt * w / p.nu * geo * (s11 + s00)
                    + c * p.dt / w * g_s
                    + 4.0 * nn / w * g_u
                    + rho_n * u00;
                (bound_u, bound_t, bound_s)
            }
        };
        let mut row = LedgerRow {
            step: n,
            time: state.time,
            uu,
            tt,
            ss,
            curv_u: self.sums[0],
            curv_t: self.sums[1],
            curv_s: self.sums[2],
            diss_u: self.sums[3],
            diss_t: self.sums[4],
            diss_s: self.sums[5],
            bound_u,
            bound_t,
            bound_s,
            violated: false,
        };
        let exceeds = |lhs: f64, rhs: f64| lhs > rhs + LEDGER_TOLERANCE * rhs.abs().max(lhs.abs()) + 1e-300;
        row.violated = exceeds(row.lhs_u(), bound_u) || exceeds(row.lhs_t(), bound_t) || exceeds(row.lhs_s(), bound_s);
        self.rows.push(row);
    }

    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        self.rows
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
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        write_csv_file(path, &LEDGER_COLUMNS, &self.csv_rows())
    }
}

/// Builds the ledger for a recorded history (states in step order).
pub fn stability_energy_report(
    history: &[SimState],
    params: SchemeParams,
    ops: Arc<Operators>,
    domain: (f64, f64),
) -> Vec<LedgerRow> {
    let mut monitor = EnergyMonitor::new(params, ops, domain);
    for s in history {
        monitor.observe(s);
    }
    monitor.rows
}
