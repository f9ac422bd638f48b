//! Sparse matrices and finite element assembly of the weak-form operators.

use std::sync::Arc;

use thiserror::Error;

use crate::fespace::{FiniteElementSpace, QuadratureRule, ValueRank};

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("spaces are defined on different meshes")]
    MeshMismatch,
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("dof {dof} constrained to both {first} and {second}")]
    ConflictingConstraint { dof: usize, first: f64, second: f64 },
    #[error("row {0} has no diagonal entry in the sparsity pattern")]
    MissingDiagonal(usize),
    #[error("matrices do not share a sparsity pattern")]
    PatternMismatch,
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("expected a {0} space")]
    WrongSpace(&'static str),
}

/// Compressed sparse row structure. Column indices are sorted and unique in each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Pattern {
    /// Builds a pattern from per-row column lists (sorted and deduplicated here).
    pub fn from_rows(ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            debug_assert!(row.last().is_none_or(|&c| c < ncols));
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        Self { nrows: rows.len(), ncols, row_ptr, col_idx }
    }

    /// Coupling pattern between two spaces on the same mesh.
    ///
    /// Two vector spaces couple component-wise only (`u_x` with `v_x`, `u_y`
    /// with `v_y`), which covers every vector operator of the momentum block.
    pub fn for_spaces(row: &FiniteElementSpace, col: &FiniteElementSpace) -> Result<Self, AssemblyError> {
        same_mesh(row, col)?;
        let (rc, cc) = (row.components(), col.components());
        let diagonal_blocks = rc == 2 && cc == 2;
        let mut node_rows: Vec<Vec<usize>> = vec![Vec::new(); row.num_nodes()];
        for t in 0..row.num_elements() {
            let cn = col.element_nodes(t);
            for &rn in row.element_nodes(t) {
                node_rows[rn].extend_from_slice(cn);
            }
        }
        let mut rows = Vec::with_capacity(row.dof_count());
        for mut nodes in node_rows {
            nodes.sort_unstable();
            nodes.dedup();
            for r in 0..rc {
                let cols = if diagonal_blocks {
                    nodes.iter().map(|&n| cc * n + r).collect()
                } else {
                    nodes.iter().flat_map(|&n| (0..cc).map(move |c| cc * n + c)).collect()
                };
                rows.push(cols);
            }
        }
        Ok(Self::from_rows(col.dof_count(), rows))
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Position of entry `(i, j)` in the value array.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.row(i).binary_search(&j).ok().map(|k| start + k)
    }
}

fn same_mesh(a: &FiniteElementSpace, b: &FiniteElementSpace) -> Result<(), AssemblyError> {
    let (ma, mb) = (a.mesh(), b.mesh());
    if Arc::ptr_eq(ma, mb) || (ma.vertices() == mb.vertices() && ma.triangles() == mb.triangles()) {
        Ok(())
    } else {
        Err(AssemblyError::MeshMismatch)
    }
}

/// Real sparse matrix in CSR form with a shareable pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values }
    }

    pub fn identity(n: usize) -> Self {
        let rows = (0..n).map(|i| vec![i]).collect();
        let mut m = Self::zeros(Arc::new(Pattern::from_rows(n, rows)));
        m.values.fill(1.0);
        m
    }

    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, AssemblyError> {
        let mut rows = vec![Vec::new(); nrows];
        for &(i, j, _) in triplets {
            if i >= nrows {
                return Err(AssemblyError::IndexOutOfRange { index: i, dim: nrows });
            }
            if j >= ncols {
                return Err(AssemblyError::IndexOutOfRange { index: j, dim: ncols });
            }
            rows[i].push(j);
        }
        let mut m = Self::zeros(Arc::new(Pattern::from_rows(ncols, rows)));
        for &(i, j, v) in triplets {
            m.add(i, j, v);
        }
        Ok(m)
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let ncols = a.first().map_or(0, Vec::len);
        let triplets: Vec<_> = a
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(j, &v)| (i, j, v)))
            .collect();
        Self::from_triplets(a.len(), ncols, &triplets).expect("indices in range by construction")
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn ncols(&self) -> usize {
        self.pattern.ncols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.find(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds `v` to entry `(i, j)`, which must be in the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.pattern.find(i, j).unwrap_or_else(|| panic!("entry ({i}, {j}) not in pattern"));
        self.values[k] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols(), "vector length");
        (0..self.nrows())
            .map(|i| {
                let r = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
                self.pattern.col_idx[r.clone()].iter().zip(&self.values[r]).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.ncols()];
        for i in 0..self.nrows() {
            for &j in self.pattern.row(i) {
                rows[j].push(i);
            }
        }
        let mut t = Self::zeros(Arc::new(Pattern::from_rows(self.nrows(), rows)));
        for i in 0..self.nrows() {
            let start = self.pattern.row_ptr[i];
            for (k, &j) in self.pattern.row(i).iter().enumerate() {
                t.add(j, i, self.values[start + k]);
            }
        }
        t
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.ncols()]; self.nrows()];
        for (i, row) in a.iter_mut().enumerate() {
            let start = self.pattern.row_ptr[i];
            for (k, &j) in self.pattern.row(i).iter().enumerate() {
                row[j] += self.values[start + k];
            }
        }
        a
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows())
            .map(|i| {
                self.values[self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1]].iter().map(|v| v.abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// `max |A_ij + A_ji|`.
    pub fn max_abs_symmetric_part(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.nrows() {
            let start = self.pattern.row_ptr[i];
            for (k, &j) in self.pattern.row(i).iter().enumerate() {
                m = m.max((self.values[start + k] + self.get(j, i)).abs());
            }
        }
        m
    }

    /// `max |A_ij - A_ji|`.
    pub fn max_abs_antisymmetric_part(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.nrows() {
            let start = self.pattern.row_ptr[i];
            for (k, &j) in self.pattern.row(i).iter().enumerate() {
                m = m.max((self.values[start + k] - self.get(j, i)).abs());
            }
        }
        m
    }

    /// `Σ c_k A_k` for matrices sharing one pattern.
    pub fn linear_combination(terms: &[(f64, &SparseMatrix)]) -> Result<Self, AssemblyError> {
        let (_, first) = terms.first().ok_or(AssemblyError::PatternMismatch)?;
        let mut out = Self::zeros(first.pattern.clone());
        for (c, m) in terms {
            if !Arc::ptr_eq(&m.pattern, &first.pattern) && *m.pattern != *first.pattern {
                return Err(AssemblyError::PatternMismatch);
            }
            for (o, v) in out.values.iter_mut().zip(&m.values) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// Row sums.
    pub fn row_sums(&self) -> Vec<f64> {
        self.mul_vec(&vec![1.0; self.ncols()])
    }
}

/// Scatters a local scalar-by-scalar block into all matching component pairs.
fn scatter_componentwise(m: &mut SparseMatrix, comps: usize, nodes: &[usize], local: &[[f64; 6]; 6]) {
    for c in 0..comps {
        for (i, &ni) in nodes.iter().enumerate() {
            for (j, &nj) in nodes.iter().enumerate() {
                m.add(comps * ni + c, comps * nj + c, local[i][j]);
            }
        }
    }
}

fn scalar_form(
    space: &FiniteElementSpace,
    pattern: Arc<Pattern>,
    mut kernel: impl FnMut(usize, &mut [[f64; 6]; 6]),
) -> SparseMatrix {
    let mut m = SparseMatrix::zeros(pattern);
    for t in 0..space.num_elements() {
        let mut local = [[0.0; 6]; 6];
        kernel(t, &mut local);
        scatter_componentwise(&mut m, space.components(), space.element_nodes(t), &local);
    }
    m
}

fn check_pattern(space: &FiniteElementSpace, pattern: &Pattern) -> Result<(), AssemblyError> {
    if pattern.nrows != space.dof_count() || pattern.ncols != space.dof_count() {
        return Err(AssemblyError::DimensionMismatch {
            what: "pattern",
            expected: space.dof_count(),
            got: pattern.nrows,
        });
    }
    Ok(())
}

pub fn space_pattern(space: &FiniteElementSpace) -> Arc<Pattern> {
    Arc::new(Pattern::for_spaces(space, space).expect("a space shares its own mesh"))
}

/// `M_ij = ∫ φ_j φ_i` (component-wise for vector spaces).
pub fn assemble_mass(space: &FiniteElementSpace) -> SparseMatrix {
    assemble_mass_with(space, space_pattern(space)).expect("pattern built from the space")
}

pub fn assemble_mass_with(space: &FiniteElementSpace, pattern: Arc<Pattern>) -> Result<SparseMatrix, AssemblyError> {
    check_pattern(space, &pattern)?;
    let rule = QuadratureRule::degree5();
    Ok(scalar_form(space, pattern, |t, local| {
        let jac = 2.0 * space.geometry(t).area;
        for (bary, w) in rule.points.iter().zip(&rule.weights) {
            let s = space.shapes(t, *bary);
            let wq = w * jac;
            for i in 0..s.len {
                for j in 0..s.len {
                    local[i][j] += wq * s.values[i] * s.values[j];
                }
            }
        }
    }))
}

/// `A_ij = ∫ ∇φ_j · ∇φ_i` (component-wise for vector spaces).
pub fn assemble_stiffness(space: &FiniteElementSpace) -> SparseMatrix {
    assemble_stiffness_with(space, space_pattern(space)).expect("pattern built from the space")
}

pub fn assemble_stiffness_with(
    space: &FiniteElementSpace,
    pattern: Arc<Pattern>,
) -> Result<SparseMatrix, AssemblyError> {
    check_pattern(space, &pattern)?;
    let rule = QuadratureRule::degree5();
    Ok(scalar_form(space, pattern, |t, local| {
        let jac = 2.0 * space.geometry(t).area;
        for (bary, w) in rule.points.iter().zip(&rule.weights) {
            let s = space.shapes(t, *bary);
            let wq = w * jac;
            for i in 0..s.len {
                let gi = s.gradients[i];
                for j in 0..s.len {
                    let gj = s.gradients[j];
                    local[i][j] += wq * (gi[0] * gj[0] + gi[1] * gj[1]);
                }
            }
        }
    }))
}

/// `B_qj = ∫ q_i ∇·φ_j`, shape (pressure dofs × velocity dofs).
pub fn assemble_divergence(vel: &FiniteElementSpace, pres: &FiniteElementSpace) -> Result<SparseMatrix, AssemblyError> {
    same_mesh(vel, pres)?;
    if vel.rank() != ValueRank::Vector2 {
        return Err(AssemblyError::WrongSpace("vector velocity"));
    }
    if pres.rank() != ValueRank::Scalar {
        return Err(AssemblyError::WrongSpace("scalar pressure"));
    }
    let pattern = Arc::new(Pattern::for_spaces(pres, vel)?);
    let mut m = SparseMatrix::zeros(pattern);
    let rule = QuadratureRule::degree5();
    for t in 0..vel.num_elements() {
        let jac = 2.0 * vel.geometry(t).area;
        let (vn, pn) = (vel.element_nodes(t), pres.element_nodes(t));
        let mut local = [[[0.0; 2]; 6]; 6];
        for (bary, w) in rule.points.iter().zip(&rule.weights) {
            let sv = vel.shapes(t, *bary);
            let sp = pres.shapes(t, *bary);
            for i in 0..sp.len {
                for j in 0..sv.len {
                    for c in 0..2 {
                        local[i][j][c] += w * jac * sp.values[i] * sv.gradients[j][c];
                    }
                }
            }
        }
        for (i, &qi) in pn.iter().enumerate() {
            for (j, &nj) in vn.iter().enumerate() {
                for c in 0..2 {
                    m.add(qi, 2 * nj + c, local[i][j][c]);
                }
            }
        }
    }
    Ok(m)
}

fn wind_at(wind_space: &FiniteElementSpace, wind: &[f64], t: usize, bary: [f64; 3]) -> [f64; 2] {
    let s = wind_space.shapes(t, bary);
    let mut w = [0.0; 2];
    for (i, &n) in wind_space.element_nodes(t).iter().enumerate() {
        w[0] += wind[2 * n] * s.values[i];
        w[1] += wind[2 * n + 1] * s.values[i];
    }
    w
}

/// Skew-symmetrized convection
/// `N(w)_ij = ½∫(w·∇φ_j)φ_i − ½∫(w·∇φ_i)φ_j`, acting on each component of `space`.
pub fn assemble_convection_skew(
    space: &FiniteElementSpace,
    wind_space: &FiniteElementSpace,
    wind: &[f64],
) -> Result<SparseMatrix, AssemblyError> {
    assemble_convection_skew_with(space, space_pattern(space), wind_space, wind)
}

pub fn assemble_convection_skew_with(
    space: &FiniteElementSpace,
    pattern: Arc<Pattern>,
    wind_space: &FiniteElementSpace,
    wind: &[f64],
) -> Result<SparseMatrix, AssemblyError> {
    check_pattern(space, &pattern)?;
    same_mesh(space, wind_space)?;
    if wind_space.rank() != ValueRank::Vector2 {
        return Err(AssemblyError::WrongSpace("vector wind"));
    }
    if wind.len() != wind_space.dof_count() {
        return Err(AssemblyError::DimensionMismatch {
            what: "wind",
            expected: wind_space.dof_count(),
            got: wind.len(),
        });
    }
    let rule = QuadratureRule::degree5();
    Ok(scalar_form(space, pattern, |t, local| {
        let jac = 2.0 * space.geometry(t).area;
        for (bary, w) in rule.points.iter().zip(&rule.weights) {
            let s = space.shapes(t, *bary);
            let wv = wind_at(wind_space, wind, t, *bary);
            let half = 0.5 * w * jac;
            let mut adv = [0.0; 6];
            for i in 0..s.len {
                adv[i] = wv[0] * s.gradients[i][0] + wv[1] * s.gradients[i][1];
            }
            for i in 0..s.len {
                for j in 0..s.len {
                    let a = adv[j] * s.values[i];
                    let b = adv[i] * s.values[j];
                    local[i][j] += half * (a - b);
                }
            }
        }
    }))
}

/// `r_i = coefficient · ∫ (g·φ_i) field` for a scalar field in `scalar_space`.
pub fn assemble_buoyancy(
    vel: &FiniteElementSpace,
    scalar_space: &FiniteElementSpace,
    g: [f64; 2],
    coefficient: f64,
    field: &[f64],
) -> Result<Vec<f64>, AssemblyError> {
    same_mesh(vel, scalar_space)?;
    if vel.rank() != ValueRank::Vector2 || scalar_space.rank() != ValueRank::Scalar {
        return Err(AssemblyError::WrongSpace("vector velocity and scalar field"));
    }
    if field.len() != scalar_space.dof_count() {
        return Err(AssemblyError::DimensionMismatch {
            what: "field",
            expected: scalar_space.dof_count(),
            got: field.len(),
        });
    }
    let mut r = vec![0.0; vel.dof_count()];
    let rule = QuadratureRule::degree5();
    for t in 0..vel.num_elements() {
        let jac = 2.0 * vel.geometry(t).area;
        for (bary, w) in rule.points.iter().zip(&rule.weights) {
            let sv = vel.shapes(t, *bary);
            let (f, _) = scalar_space.eval(field, 0, t, *bary);
            let wf = coefficient * w * jac * f;
            for (i, &n) in vel.element_nodes(t).iter().enumerate() {
                r[2 * n] += wf * g[0] * sv.values[i];
                r[2 * n + 1] += wf * g[1] * sv.values[i];
            }
        }
    }
    Ok(r)
}

/// `r_i = ∫ f φ_i` for an analytic scalar source.
pub fn assemble_load_scalar(
    space: &FiniteElementSpace,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>, AssemblyError> {
    if space.rank() != ValueRank::Scalar {
        return Err(AssemblyError::WrongSpace("scalar"));
    }
    let mut r = vec![0.0; space.dof_count()];
    let rule = QuadratureRule::collapsed_gauss(4);
    for t in 0..space.num_elements() {
        let jac = 2.0 * space.geometry(t).area;
        for (bary, w) in rule.points.iter().zip(&rule.weights) {
            let s = space.shapes(t, *bary);
            let [x, y] = space.map_point(t, *bary);
            let wf = w * jac * f(x, y);
            for (i, &n) in space.element_nodes(t).iter().enumerate() {
                r[n] += wf * s.values[i];
            }
        }
    }
    Ok(r)
}

/// `r_i = ∫ f · φ_i` for an analytic vector source.
pub fn assemble_load_vector(
    space: &FiniteElementSpace,
    f: impl Fn(f64, f64) -> [f64; 2],
) -> Result<Vec<f64>, AssemblyError> {
    if space.rank() != ValueRank::Vector2 {
        return Err(AssemblyError::WrongSpace("vector"));
    }
    let mut r = vec![0.0; space.dof_count()];
    let rule = QuadratureRule::collapsed_gauss(4);
    for t in 0..space.num_elements() {
        let jac = 2.0 * space.geometry(t).area;
        for (bary, w) in rule.points.iter().zip(&rule.weights) {
            let s = space.shapes(t, *bary);
            let [x, y] = space.map_point(t, *bary);
            let fv = f(x, y);
            for (i, &n) in space.element_nodes(t).iter().enumerate() {
                r[2 * n] += w * jac * fv[0] * s.values[i];
                r[2 * n + 1] += w * jac * fv[1] * s.values[i];
            }
        }
    }
    Ok(r)
}

/// Merges constraint lists, rejecting a dof pinned to two different values.
pub fn merge_constraints(dofs: &[usize], values: &[f64], n: usize) -> Result<Vec<Option<f64>>, AssemblyError> {
    if dofs.len() != values.len() {
        return Err(AssemblyError::DimensionMismatch {
            what: "constraint values",
            expected: dofs.len(),
            got: values.len(),
        });
    }
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for (&d, &v) in dofs.iter().zip(values) {
        if d >= n {
            return Err(AssemblyError::IndexOutOfRange { index: d, dim: n });
        }
        match fixed[d] {
            Some(prev) if prev != v => {
                return Err(AssemblyError::ConflictingConstraint { dof: d, first: prev, second: v })
            }
            _ => fixed[d] = Some(v),
        }
    }
    Ok(fixed)
}

/// Symmetric elimination: constrained rows become identity rows with the
/// prescribed value on the right, constrained columns move into the rhs.
pub fn apply_dirichlet(
    matrix: &mut SparseMatrix,
    rhs: &mut [f64],
    dofs: &[usize],
    values: &[f64],
) -> Result<(), AssemblyError> {
    let n = matrix.nrows();
    if matrix.ncols() != n || rhs.len() != n {
        return Err(AssemblyError::DimensionMismatch { what: "square system", expected: n, got: rhs.len() });
    }
    let fixed = merge_constraints(dofs, values, n)?;
    apply_constraints(matrix, rhs, &fixed)
}

pub fn apply_constraints(
    matrix: &mut SparseMatrix,
    rhs: &mut [f64],
    fixed: &[Option<f64>],
) -> Result<(), AssemblyError> {
    let pattern = matrix.pattern.clone();
    for (i, fi) in fixed.iter().enumerate() {
        if fi.is_some() && pattern.find(i, i).is_none() {
            return Err(AssemblyError::MissingDiagonal(i));
        }
    }
    for i in 0..pattern.nrows {
        let range = pattern.row_ptr[i]..pattern.row_ptr[i + 1];
        if let Some(v) = fixed[i] {
            for k in range {
                matrix.values[k] = if pattern.col_idx[k] == i { 1.0 } else { 0.0 };
            }
            rhs[i] = v;
        } else {
            for k in range {
                if let Some(v) = fixed[pattern.col_idx[k]] {
                    rhs[i] -= matrix.values[k] * v;
                    matrix.values[k] = 0.0;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::build_space;
    use crate::mesh::build_structured_rect;

    fn space(nx: usize, ny: usize, degree: usize, rank: ValueRank) -> FiniteElementSpace {
        let mesh = Arc::new(build_structured_rect(nx, ny, 1.0, 2.0).unwrap());
        build_space(mesh, degree, rank).unwrap()
    }

    #[test]
    fn single_triangle_mass() {
        // one P1 element: the reference triangle scaled by 2, area 2
        let mesh = build_structured_rect(1, 1, 2.0, 2.0).unwrap();
        let s = build_space(Arc::new(mesh), 1, ValueRank::Scalar).unwrap();
        let m = assemble_mass(&s);
        let area = s.geometry(0).area;
        assert_eq!(area, 2.0);
        // vertex 1 = (2,0) lies only in triangle 0
        assert!((m.get(1, 1) - area / 6.0).abs() < 1e-15);
        assert!((m.get(1, 3) - area / 12.0).abs() < 1e-15);
        assert!((m.get(1, 0) - area / 12.0).abs() < 1e-15);
        assert_eq!(m.get(1, 2), 0.0);
    }

    #[test]
    fn mass_and_stiffness_basics() {
        for degree in [1, 2] {
            let s = space(3, 4, degree, ValueRank::Scalar);
            let m = assemble_mass(&s);
            assert!((m.values().iter().sum::<f64>() - 2.0).abs() < 1e-13);
            assert!(m.max_abs_antisymmetric_part() <= 1e-14);
            let a = assemble_stiffness(&s);
            assert!(a.max_abs_antisymmetric_part() <= 1e-14);
            assert!(a.row_sums().iter().all(|v| v.abs() < 1e-12));
            let x = s.interpolate_scalar(|x, _| x).unwrap();
            assert!((a.bilinear(&x, &x) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_blocks_do_not_couple_components() {
        let s = space(2, 2, 2, ValueRank::Vector2);
        let m = assemble_mass(&s);
        assert!((m.values().iter().sum::<f64>() - 4.0).abs() < 1e-13);
        for i in 0..s.dof_count() {
            for &j in m.pattern().row(i) {
                assert_eq!(i % 2, j % 2);
            }
        }
    }

    #[test]
    fn divergence_examples() {
        let v = space(3, 3, 2, ValueRank::Vector2);
        let p = space(3, 3, 1, ValueRank::Scalar);
        let b = assemble_divergence(&v, &p).unwrap();
        assert_eq!((b.nrows(), b.ncols()), (p.dof_count(), v.dof_count()));
        let u = v.interpolate_vector(|x, y| [x, -y]).unwrap();
        assert!(b.mul_vec(&u).iter().all(|r| r.abs() < 1e-12));
        let u = v.interpolate_vector(|x, _| [x, 0.0]).unwrap();
        let rows = assemble_mass(&p).row_sums();
        for (bu, r) in b.mul_vec(&u).iter().zip(&rows) {
            assert!((bu - r).abs() < 1e-13);
        }
        assert!(b.mul_vec(&vec![0.0; v.dof_count()]).iter().all(|&r| r == 0.0));

        let other = space(2, 3, 1, ValueRank::Scalar);
        assert_eq!(assemble_divergence(&v, &other).unwrap_err(), AssemblyError::MeshMismatch);
    }

    #[test]
    fn convection_is_antisymmetric() {
        let v = space(4, 6, 2, ValueRank::Vector2);
        let t = space(4, 6, 2, ValueRank::Scalar);
        let wind = v.interpolate_vector(|x, y| [(3.0 * y).sin() + x * x, x.cos() * y]).unwrap();
        for target in [&v, &t] {
            let n = assemble_convection_skew(target, &v, &wind).unwrap();
            assert!(n.max_abs_symmetric_part() == 0.0);
            let z = assemble_convection_skew(target, &v, &vec![0.0; v.dof_count()]).unwrap();
            assert_eq!(z.max_abs(), 0.0);
        }
        assert!(matches!(assemble_convection_skew(&t, &v, &[1.0]), Err(AssemblyError::DimensionMismatch { .. })));
    }

    #[test]
    fn convection_matches_two_term_definition() {
        // wind, trial and test functions all lie in P2, so the quadrature is exact
        let s = space(4, 4, 2, ValueRank::Scalar);
        let v = space(4, 4, 2, ValueRank::Vector2);
        let wind = v.interpolate_vector(|x, y| [y * y, -x]).unwrap();
        let n = assemble_convection_skew(&s, &v, &wind).unwrap();
        let f = s.interpolate_scalar(|x, y| x * y + y * y).unwrap();
        let chi = s.interpolate_scalar(|x, y| x * x - y).unwrap();
        let got = n.bilinear(&chi, &f);
        let rule = QuadratureRule::collapsed_gauss(6);
        let mut exact = 0.0;
        for t in 0..s.num_elements() {
            for (b, w) in rule.points.iter().zip(&rule.weights) {
                let [x, y] = s.map_point(t, *b);
                let (wx, wy) = (y * y, -x);
                let (fv, fx, fy) = (x * y + y * y, y, x + 2.0 * y);
                let (cv, cx, cy) = (x * x - y, 2.0 * x, -1.0);
                let integrand = 0.5 * (wx * fx + wy * fy) * cv - 0.5 * (wx * cx + wy * cy) * fv;
                exact += w * 2.0 * s.geometry(t).area * integrand;
            }
        }
        assert!((got - exact).abs() < 1e-12, "{got} vs {exact}");
    }

    #[test]
    fn buoyancy_examples() {
        let v = space(2, 3, 2, ValueRank::Vector2);
        let t = space(2, 3, 2, ValueRank::Scalar);
        let zero = assemble_buoyancy(&v, &t, [0.0, 1.0], 3.0, &vec![0.0; t.dof_count()]).unwrap();
        assert!(zero.iter().all(|&r| r == 0.0));
        let ones = vec![1.0; t.dof_count()];
        let r = assemble_buoyancy(&v, &t, [0.0, 1.0], 2.5, &ones).unwrap();
        let rows = assemble_mass(&t).row_sums();
        for n in 0..t.dof_count() {
            assert_eq!(r[2 * n], 0.0);
            assert!((r[2 * n + 1] - 2.5 * rows[n]).abs() < 1e-14);
        }
        let r2 = assemble_buoyancy(&v, &t, [0.0, 1.0], 5.0, &ones).unwrap();
        for (a, b) in r.iter().zip(&r2) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn dirichlet_two_point_laplace() {
        // -u'' = 0 on four nodes, ends pinned to 0 and 1
        let a = SparseMatrix::from_dense(&[
            vec![1.0, -1.0, 0.0, 0.0],
            vec![-1.0, 2.0, -1.0, 0.0],
            vec![0.0, -1.0, 2.0, -1.0],
            vec![0.0, 0.0, -1.0, 1.0],
        ]);
        let mut m = a.clone();
        let mut rhs = vec![0.0; 4];
        apply_dirichlet(&mut m, &mut rhs, &[0, 3, 3], &[0.0, 1.0, 1.0]).unwrap();
        assert!(m.max_abs_antisymmetric_part() == 0.0);
        // interior block is [[2,-1],[-1,2]] with rhs (0, 1)
        let x1 = (2.0 * rhs[1] + rhs[2]) / 3.0;
        let x2 = (rhs[1] + 2.0 * rhs[2]) / 3.0;
        assert!((x1 - 1.0 / 3.0).abs() < 1e-15 && (x2 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((rhs[0], rhs[3]), (0.0, 1.0));

        let mut m = a.clone();
        let mut rhs = vec![0.0; 4];
        assert!(matches!(
            apply_dirichlet(&mut m, &mut rhs, &[1, 1], &[0.0, 2.0]),
            Err(AssemblyError::ConflictingConstraint { dof: 1, .. })
        ));
    }

    #[test]
    fn linear_combination_requires_shared_pattern() {
        let s = space(2, 2, 2, ValueRank::Scalar);
        let m = assemble_mass(&s);
        let a = assemble_stiffness(&s);
        let k = SparseMatrix::linear_combination(&[(2.0, &m), (0.5, &a)]).unwrap();
        assert!((k.get(0, 0) - (2.0 * m.get(0, 0) + 0.5 * a.get(0, 0))).abs() < 1e-15);
        let other = SparseMatrix::identity(s.dof_count());
        assert_eq!(
            SparseMatrix::linear_combination(&[(1.0, &m), (1.0, &other)]).unwrap_err(),
            AssemblyError::PatternMismatch
        );
    }

    #[test]
    fn transpose_round_trip() {
        let v = space(2, 2, 2, ValueRank::Vector2);
        let p = space(2, 2, 1, ValueRank::Scalar);
        let b = assemble_divergence(&v, &p).unwrap();
        let bt = b.transpose();
        assert_eq!(bt.transpose().to_dense(), b.to_dense());
        assert_eq!(bt.get(5, 2), b.get(2, 5));
    }
}
