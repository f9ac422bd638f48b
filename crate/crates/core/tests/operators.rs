#![allow(clippy::needless_range_loop)]

mod common;

use std::sync::Arc;

use ddbrink_core::assembly::{
    assemble_convection_skew, assemble_divergence, assemble_load_vector, assemble_mass, assemble_stiffness,
    SparseMatrix,
};
use ddbrink_core::fespace::{build_space, ValueRank};
use ddbrink_core::mesh::{build_structured_rect, BoundaryTag};
use ddbrink_core::solver::{shift_to_zero_mean, solve_saddle_point, BlockSystem, LuSolver, PressureGauge};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dense_solve, max_diff, DenseTaylorHood};

fn dense_max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| max_diff(x, y)).fold(0.0, f64::max)
}

#[test]
fn matrices_match_hand_coded_assembly() {
    let mesh = Arc::new(build_structured_rect(3, 5, 1.0, 2.0).unwrap());
    let scalar = build_space(mesh.clone(), 2, ValueRank::Scalar).unwrap();
    let velocity = build_space(mesh.clone(), 2, ValueRank::Vector2).unwrap();
    let pressure = build_space(mesh.clone(), 1, ValueRank::Scalar).unwrap();
    let oracle = DenseTaylorHood::new(&mesh, &scalar, &pressure);

    assert!(dense_max_diff(&assemble_mass(&scalar).to_dense(), &oracle.mass) < 1e-14);
    assert!(dense_max_diff(&assemble_stiffness(&scalar).to_dense(), &oracle.stiffness) < 1e-13);

    let b = assemble_divergence(&velocity, &pressure).unwrap().to_dense();
    for q in 0..oracle.n1 {
        for j in 0..oracle.n2 {
            for c in 0..2 {
                assert!((b[q][2 * j + c] - oracle.div[c][q][j]).abs() < 1e-14);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wind: Vec<f64> = (0..velocity.dof_count()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let n = assemble_convection_skew(&scalar, &velocity, &wind).unwrap().to_dense();
    assert!(dense_max_diff(&n, &oracle.convection(&wind)) < 1e-13);
}

#[test]
fn sparse_lu_matches_dense_elimination() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 50;
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        for _ in 0..5 {
            row[rng.gen_range(0..n)] = rng.gen_range(-1.0..1.0);
        }
        row[i] += 4.0;
    }
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = LuSolver::new().solve(&SparseMatrix::from_dense(&a), &b).unwrap();
    assert!(max_diff(&x, &dense_solve(&a, &b)) < 1e-13);
}

/// Cholesky succeeds iff the matrix is symmetric positive definite.
fn cholesky_ok(a: &[Vec<f64>]) -> bool {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d <= 0.0 {
            return false;
        }
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            l[i][j] = (a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>()) / l[j][j];
        }
    }
    true
}

#[test]
fn stiffness_is_semidefinite_with_constant_kernel() {
    let mesh = Arc::new(build_structured_rect(4, 6, 1.0, 2.0).unwrap());
    let scalar = build_space(mesh, 2, ValueRank::Scalar).unwrap();
    let a = assemble_stiffness(&scalar);
    assert!(a.max_abs_antisymmetric_part() < 1e-14);
    assert!(a.row_sums().iter().all(|r| r.abs() < 1e-12));
    let dense = a.to_dense();
    let boundary = scalar.boundary_nodes(&BoundaryTag::ALL);
    let interior: Vec<usize> = (0..scalar.num_nodes()).filter(|n| !boundary.contains(n)).collect();
    let reduced: Vec<Vec<f64>> = interior.iter().map(|&i| interior.iter().map(|&j| dense[i][j]).collect()).collect();
    assert!(cholesky_ok(&reduced));
    // one boundary node removed already makes it definite
    let keep: Vec<usize> = (1..scalar.num_nodes()).collect();
    let one_pin: Vec<Vec<f64>> = keep.iter().map(|&i| keep.iter().map(|&j| dense[i][j]).collect()).collect();
    assert!(cholesky_ok(&one_pin));
}

struct Stokes {
    k: SparseMatrix,
    b: SparseMatrix,
    dofs: Vec<usize>,
    values: Vec<f64>,
    weights: Vec<f64>,
    rhs: Vec<f64>,
    exact_u: Vec<f64>,
    exact_p: Vec<f64>,
}

/// `−Δu + ∇p = f` with `u = (y², x²)`, `p = x − y` on the unit square.
fn polynomial_stokes(cells: usize) -> Stokes {
    let mesh = Arc::new(build_structured_rect(cells, cells, 1.0, 1.0).unwrap());
    let velocity = build_space(mesh.clone(), 2, ValueRank::Vector2).unwrap();
    let pressure = build_space(mesh, 1, ValueRank::Scalar).unwrap();
    let k = assemble_stiffness(&velocity);
    let b = assemble_divergence(&velocity, &pressure).unwrap();
    let exact_u = velocity.interpolate_vector(|x, y| [y * y, x * x]).unwrap();
    let weights = assemble_mass(&pressure).row_sums();
    let mut exact_p = pressure.interpolate_scalar(|x, y| x - y).unwrap();
    shift_to_zero_mean(&mut exact_p, &weights);
    let dofs = velocity.boundary_dofs(&BoundaryTag::ALL);
    let values = dofs.iter().map(|&d| exact_u[d]).collect();
    let rhs = assemble_load_vector(&velocity, |_, _| [-1.0, -3.0]).unwrap();
    Stokes { k, b, dofs, values, weights, rhs, exact_u, exact_p }
}

fn solve(s: &Stokes, rhs: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let system = BlockSystem {
        velocity_block: &s.k,
        divergence: &s.b,
        rhs_velocity: rhs,
        rhs_pressure: vec![0.0; s.b.nrows()],
        constrained_dofs: &s.dofs,
        constrained_values: &s.values,
    };
    solve_saddle_point(&system, &PressureGauge::ZeroMean { weights: s.weights.clone() }).unwrap()
}

#[test]
fn taylor_hood_reproduces_polynomial_stokes() {
    for cells in [2, 5] {
        let s = polynomial_stokes(cells);
        let (u, p) = solve(&s, s.rhs.clone());
        assert!(max_diff(&u, &s.exact_u) < 1e-11, "cells {cells}");
        assert!(max_diff(&p, &s.exact_p) < 1e-10, "cells {cells}");
    }
}

#[test]
fn pressure_constant_does_not_move_velocity() {
    let s = polynomial_stokes(4);
    let (u0, p0) = solve(&s, s.rhs.clone());
    let ones = vec![1.0; s.b.nrows()];
    let bt1 = s.b.transpose().mul_vec(&ones);
    for c in [1.0, -250.0] {
        // K u − Bᵀ(p + c) = f − cBᵀ1
        let rhs: Vec<f64> = s.rhs.iter().zip(&bt1).map(|(f, g)| f - c * g).collect();
        let (u, p) = solve(&s, rhs);
        assert!(max_diff(&u, &u0) < 1e-11);
        assert!(max_diff(&p, &p0) < 1e-9);
    }
}
