//! Sparse direct solves: general square systems and the velocity-pressure saddle point.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, NumericLu, SymbolicLu};
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par};
use thiserror::Error;

use crate::assembly::{apply_constraints, merge_constraints, AssemblyError, Pattern, SparseMatrix};

/// Relative residual accepted from a direct solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("matrix is singular (no pivot at elimination step {pivot})")]
    Singular { pivot: usize },
    #[error("factorization produced non-finite values (numerically singular matrix)")]
    NonFinite,
    #[error("relative residual {residual:e} exceeds tolerance")]
    Residual { residual: f64 },
    #[error("dimension mismatch: {what} has {got}, expected {expected}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("sparse factorization failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

struct Factorization {
    pattern: Arc<Pattern>,
    symbolic: SymbolicLu<usize>,
    numeric: NumericLu<usize, f64>,
}

/// Sparse LU with partial pivoting. The symbolic analysis is reused while
/// successive matrices share a sparsity pattern.
#[derive(Default)]
pub struct LuSolver {
    cache: Option<Factorization>,
}

impl std::fmt::Debug for LuSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuSolver").field("cached", &self.cache.is_some()).finish()
    }
}

impl LuSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves `A x = b`, checking the residual against [`RESIDUAL_TOLERANCE`].
    pub fn solve(&mut self, a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, SolverError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(SolverError::DimensionMismatch { what: "matrix columns", expected: n, got: a.ncols() });
        }
        if b.len() != n {
            return Err(SolverError::DimensionMismatch { what: "rhs", expected: n, got: b.len() });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let pattern = a.pattern().clone();
        // CSR arrays of A are the CSC arrays of Aᵀ: factor Aᵀ, then solve transposed.
        let reuse = self.cache.as_ref().is_some_and(|c| Arc::ptr_eq(&c.pattern, &pattern) || *c.pattern == *pattern);
        if !reuse {
            let sym = SymbolicSparseColMatRef::new_checked(n, n, pattern.row_ptr(), None, pattern.col_idx());
            let symbolic =
                factorize_symbolic_lu(sym, Default::default()).map_err(|e| SolverError::Backend(format!("{e:?}")))?;
            self.cache = Some(Factorization { pattern: pattern.clone(), symbolic, numeric: NumericLu::new() });
        }
        let cache = self.cache.as_mut().expect("set above");
        let sym = SymbolicSparseColMatRef::new_checked(n, n, pattern.row_ptr(), None, pattern.col_idx());
        let at = SparseColMatRef::new(sym, a.values());
        let mut mem = MemBuffer::new(cache.symbolic.factorize_numeric_lu_scratch::<f64>(Par::Seq, Default::default()));
        let lu = cache
            .symbolic
            .factorize_numeric_lu(&mut cache.numeric, at, Par::Seq, MemStack::new(&mut mem), Default::default())
            .map_err(|e| match e {
                LuError::SymbolicSingular { index } => SolverError::Singular { pivot: index },
                LuError::Generic(g) => SolverError::Backend(format!("{g:?}")),
            })?;
        let mut mem = MemBuffer::new(cache.symbolic.solve_transpose_in_place_scratch::<f64>(1, Par::Seq));
        let mut apply = |v: &mut [f64]| {
            lu.solve_transpose_in_place_with_conj(
                Conj::No,
                MatMut::from_column_major_slice_mut(v, n, 1),
                Par::Seq,
                MemStack::new(&mut mem),
            )
        };
        let mut x = b.to_vec();
        apply(&mut x);
        // one step of iterative refinement
        let mut r: Vec<f64> = b.iter().zip(a.mul_vec(&x)).map(|(bi, ax)| bi - ax).collect();
        apply(&mut r);
        for (xi, d) in x.iter_mut().zip(&r) {
            *xi += d;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        let residual = relative_residual(a, &x, b);
        if residual > RESIDUAL_TOLERANCE {
            return Err(SolverError::Residual { residual });
        }
        Ok(x)
    }
}

/// `‖Ax − b‖∞ / (‖A‖∞‖x‖∞ + ‖b‖∞)`, zero for a zero system.
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let r = a.mul_vec(x);
    let num = r.iter().zip(b).fold(0.0f64, |m, (ri, bi)| m.max((ri - bi).abs()));
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let den = a.norm_inf() * inf(x) + inf(b);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One-shot sparse solve.
pub fn solve_sparse(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, SolverError> {
    LuSolver::new().solve(a, b)
}

/// How the pressure constant is fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum PressureGauge {
    /// Pin one pressure dof during the solve, then shift to `Σ w_i p_i = 0`
    /// (with `w` the pressure mass row sums this is the zero-mean condition).
    ZeroMean { weights: Vec<f64> },
    /// Pressure is determined by the boundary conditions.
    Free,
}

/// Velocity-pressure system
/// `[[K, −Bᵀ], [−B, 0]] [u; p] = [f; −g]` with velocity constraints.
#[derive(Debug, Clone)]
pub struct BlockSystem<'a> {
    pub velocity_block: &'a SparseMatrix,
    pub divergence: &'a SparseMatrix,
    pub rhs_velocity: Vec<f64>,
    pub rhs_pressure: Vec<f64>,
    pub constrained_dofs: &'a [usize],
    pub constrained_values: &'a [f64],
}

/// Monolithic pattern and the positions of each block entry inside it.
struct SaddleLayout {
    k_pattern: Arc<Pattern>,
    b_pattern: Arc<Pattern>,
    pattern: Arc<Pattern>,
    k_pos: Vec<usize>,
    bt_pos: Vec<usize>,
    b_pos: Vec<usize>,
}

impl SaddleLayout {
    fn new(k: &SparseMatrix, b: &SparseMatrix) -> Self {
        let (nu, np) = (k.nrows(), b.nrows());
        let kp = k.pattern();
        let bp = b.pattern();
        let mut rows: Vec<Vec<usize>> = Vec::with_capacity(nu + np);
        for i in 0..nu {
            rows.push(kp.row(i).to_vec());
        }
        for i in 0..np {
            let mut r: Vec<usize> = bp.row(i).to_vec();
            // pressure diagonal kept for pinning
            r.push(nu + i);
            rows.push(r);
        }
        for q in 0..np {
            for &j in bp.row(q) {
                rows[j].push(nu + q);
            }
        }
        let pattern = Arc::new(Pattern::from_rows(nu + np, rows));
        let mut k_pos = Vec::with_capacity(kp.nnz());
        for i in 0..nu {
            k_pos.extend(kp.row(i).iter().map(|&j| pattern.find(i, j).expect("block entry")));
        }
        let mut bt_pos = Vec::with_capacity(bp.nnz());
        let mut b_pos = Vec::with_capacity(bp.nnz());
        for q in 0..np {
            for &j in bp.row(q) {
                bt_pos.push(pattern.find(j, nu + q).expect("block entry"));
                b_pos.push(pattern.find(nu + q, j).expect("block entry"));
            }
        }
        Self { k_pattern: kp.clone(), b_pattern: bp.clone(), pattern, k_pos, bt_pos, b_pos }
    }

    fn matches(&self, k: &SparseMatrix, b: &SparseMatrix) -> bool {
        (Arc::ptr_eq(&self.k_pattern, k.pattern()) || *self.k_pattern == **k.pattern())
            && (Arc::ptr_eq(&self.b_pattern, b.pattern()) || *self.b_pattern == **b.pattern())
    }

    fn fill(&self, k: &SparseMatrix, b: &SparseMatrix) -> SparseMatrix {
        let mut m = SparseMatrix::zeros(self.pattern.clone());
        let v = m.values_mut();
        for (&p, &a) in self.k_pos.iter().zip(k.values()) {
            v[p] = a;
        }
        for ((&pt, &p), &a) in self.bt_pos.iter().zip(&self.b_pos).zip(b.values()) {
            v[pt] = -a;
            v[p] = -a;
        }
        m
    }
}

/// Reusable monolithic saddle-point solver.
#[derive(Default)]
pub struct SaddlePointSolver {
    layout: Option<SaddleLayout>,
    lu: LuSolver,
}

impl std::fmt::Debug for SaddlePointSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SaddlePointSolver").field("lu", &self.lu).finish()
    }
}

impl SaddlePointSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(
        &mut self,
        system: &BlockSystem<'_>,
        gauge: &PressureGauge,
    ) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
        let (k, b) = (system.velocity_block, system.divergence);
        let (nu, np) = (k.nrows(), b.nrows());
        if k.ncols() != nu || b.ncols() != nu {
            return Err(SolverError::DimensionMismatch { what: "divergence columns", expected: nu, got: b.ncols() });
        }
        if system.rhs_velocity.len() != nu {
            return Err(SolverError::DimensionMismatch {
                what: "velocity rhs",
                expected: nu,
                got: system.rhs_velocity.len(),
            });
        }
        if system.rhs_pressure.len() != np {
            return Err(SolverError::DimensionMismatch {
                what: "pressure rhs",
                expected: np,
                got: system.rhs_pressure.len(),
            });
        }
        if !self.layout.as_ref().is_some_and(|l| l.matches(k, b)) {
            self.layout = Some(SaddleLayout::new(k, b));
        }
        let layout = self.layout.as_ref().expect("set above");
        let mut a = layout.fill(k, b);
        let mut rhs: Vec<f64> =
            system.rhs_velocity.iter().copied().chain(system.rhs_pressure.iter().map(|g| -g)).collect();

        let mut fixed = merge_constraints(system.constrained_dofs, system.constrained_values, nu)?;
        fixed.resize(nu + np, None);
        if let PressureGauge::ZeroMean { weights } = gauge {
            if weights.len() != np {
                return Err(SolverError::DimensionMismatch { what: "gauge weights", expected: np, got: weights.len() });
            }
            if np > 0 {
                fixed[nu] = Some(0.0);
            }
        }
        apply_constraints(&mut a, &mut rhs, &fixed)?;
        let x = self.lu.solve(&a, &rhs)?;
        let u = x[..nu].to_vec();
        let mut p = x[nu..].to_vec();
        if let PressureGauge::ZeroMean { weights } = gauge {
            shift_to_zero_mean(&mut p, weights);
        }
        Ok((u, p))
    }
}

/// Shifts `p` by a constant so that `Σ w_i p_i = 0`.
pub fn shift_to_zero_mean(p: &mut [f64], weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return;
    }
    let mean = p.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / total;
    for v in p.iter_mut() {
        *v -= mean;
    }
}

/// One-shot saddle-point solve.
pub fn solve_saddle_point(
    system: &BlockSystem<'_>,
    gauge: &PressureGauge,
) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    SaddlePointSolver::new().solve(system, gauge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let i = SparseMatrix::identity(3);
        assert_eq!(solve_sparse(&i, &[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        let d = SparseMatrix::from_dense(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(solve_sparse(&d, &[2.0, 8.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn requires_pivoting() {
        let a = SparseMatrix::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(solve_sparse(&a, &[3.0, 4.0]).unwrap(), vec![4.0, 3.0]);
    }

    #[test]
    fn nonsymmetric_system() {
        let a = SparseMatrix::from_dense(&[vec![4.0, 1.0, 0.0], vec![2.0, 5.0, 1.0], vec![0.0, 3.0, 6.0]]);
        let x_true = [1.0, -1.0, 2.0];
        let b = a.mul_vec(&x_true);
        let x = solve_sparse(&a, &b).unwrap();
        for (xi, ti) in x.iter().zip(x_true) {
            assert!((xi - ti).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_and_mismatched() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 1.0)]).unwrap();
        let err = solve_sparse(&a, &[1.0, 1.0]).unwrap_err();
        assert!(
            matches!(err, SolverError::Singular { .. } | SolverError::NonFinite | SolverError::Residual { .. }),
            "{err:?}"
        );
        let i = SparseMatrix::identity(2);
        assert!(matches!(solve_sparse(&i, &[1.0]), Err(SolverError::DimensionMismatch { .. })));
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let a = SparseMatrix::from_dense(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.0], vec![0.5, 0.0, 2.0]]);
        let b = [0.1, 0.2, 0.3];
        let mut solver = LuSolver::new();
        let x1 = solver.solve(&a, &b).unwrap();
        let x2 = solver.solve(&a, &b).unwrap();
        let x3 = solve_sparse(&a, &b).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(x1, x3);
    }

    #[test]
    fn zero_mean_shift() {
        let mut p = vec![1.0, 2.0, 3.0];
        shift_to_zero_mean(&mut p, &[1.0, 1.0, 2.0]);
        let mean: f64 = p[0] + p[1] + 2.0 * p[2];
        assert!(mean.abs() < 1e-15);
    }
}
