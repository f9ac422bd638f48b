//! Lagrange P1/P2 spaces on triangle meshes, quadrature rules, and basis evaluation.
//!
//! Degrees of freedom of a P2 space are numbered vertices first (in mesh
//! vertex order), then edge midpoints (in [`TriangleMesh::edges`] order).
//! Vector-valued spaces interleave components: dof `2 * node + c`.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::mesh::{BoundaryTag, TriangleMesh};

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("unsupported polynomial degree {0} (only 1 and 2 are available)")]
    UnsupportedDegree(usize),
    #[error("triangle {0} is degenerate (zero area)")]
    DegenerateTriangle(usize),
    #[error("triangle index {index} out of range ({count} triangles)")]
    TriangleOutOfRange { index: usize, count: usize },
    #[error("expected a {expected:?} space, got {actual:?}")]
    RankMismatch { expected: ValueRank, actual: ValueRank },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRank {
    Scalar,
    Vector2,
}

impl ValueRank {
    pub fn components(self) -> usize {
        match self {
            Self::Scalar => 1,
            Self::Vector2 => 2,
        }
    }
}

/// Quadrature on the reference triangle `{(x, y): x, y >= 0, x + y <= 1}`.
///
/// Points are stored in barycentric coordinates and the weights sum to the
/// reference area 1/2.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub strength: usize,
}

impl QuadratureRule {
    /// Seven point rule exact for polynomials of total degree 5.
    pub fn degree5() -> Self {
        let s15 = 15f64.sqrt();
        let a1 = (6.0 - s15) / 21.0;
        let a2 = (6.0 + s15) / 21.0;
        let w0 = 9.0 / 40.0;
        let w1 = (155.0 - s15) / 1200.0;
        let w2 = (155.0 + s15) / 1200.0;
        let mut points = vec![[1.0 / 3.0; 3]];
        let mut weights = vec![w0];
        for (a, w) in [(a1, w1), (a2, w2)] {
            let b = 1.0 - 2.0 * a;
            points.extend([[a, a, b], [a, b, a], [b, a, a]]);
            weights.extend([w; 3]);
        }
        let weights = weights.into_iter().map(|w| 0.5 * w).collect();
        Self { points, weights, strength: 5 }
    }

    /// Collapsed tensor-product Gauss rule with `n * n` points, exact for
    /// total degree `2n - 2`.
    pub fn collapsed_gauss(n: usize) -> Self {
        let (nodes, gw) = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for (s, ws) in nodes.iter().zip(&gw) {
            // map [-1, 1] to [0, 1]
            let s01 = 0.5 * (s + 1.0);
            for (t, wt) in nodes.iter().zip(&gw) {
                let t01 = 0.5 * (t + 1.0);
                let x = s01;
                let y = t01 * (1.0 - s01);
                points.push([1.0 - x - y, x, y]);
                weights.push(0.25 * ws * wt * (1.0 - s01));
            }
        }
        Self { points, weights, strength: 2 * n - 2 }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = if n == 0 { 0.0 } else { n as f64 * (x * p1 - p0) / (x * x - 1.0) };
    (p, d)
}

/// Affine geometry of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementGeometry {
    pub area: f64,
    /// Physical gradients of the three barycentric coordinates.
    pub grad_lambda: [[f64; 2]; 3],
}

impl ElementGeometry {
    fn new(p: [[f64; 2]; 3]) -> Self {
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let area = 0.5 * det;
        let mut grad_lambda = [[0.0; 2]; 3];
        for i in 0..3 {
            let (j, k) = ((i + 1) % 3, (i + 2) % 3);
            grad_lambda[i] = [(p[j][1] - p[k][1]) / det, (p[k][0] - p[j][0]) / det];
        }
        Self { area, grad_lambda }
    }
}

/// Shape function values and physical gradients at one point of one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeValues {
    pub len: usize,
    pub values: [f64; 6],
    pub gradients: [[f64; 2]; 6],
}

impl ShapeValues {
    pub fn values(&self) -> &[f64] {
        &self.values[..self.len]
    }

    pub fn gradients(&self) -> &[[f64; 2]] {
        &self.gradients[..self.len]
    }
}

const LOCAL_EDGES: [[usize; 2]; 3] = [[0, 1], [1, 2], [2, 0]];

fn reference_shapes(degree: usize, bary: [f64; 3]) -> (usize, [f64; 6], [[f64; 3]; 6]) {
    let mut values = [0.0; 6];
    let mut dlambda = [[0.0; 3]; 6];
    match degree {
        1 => {
            for i in 0..3 {
                values[i] = bary[i];
                dlambda[i][i] = 1.0;
            }
            (3, values, dlambda)
        }
        _ => {
            for i in 0..3 {
                let l = bary[i];
                values[i] = l * (2.0 * l - 1.0);
                dlambda[i][i] = 4.0 * l - 1.0;
            }
            for (e, [a, b]) in LOCAL_EDGES.iter().copied().enumerate() {
                values[3 + e] = 4.0 * bary[a] * bary[b];
                dlambda[3 + e][a] = 4.0 * bary[b];
                dlambda[3 + e][b] = 4.0 * bary[a];
            }
            (6, values, dlambda)
        }
    }
}

/// Lagrange finite element space of degree 1 or 2.
#[derive(Debug, Clone)]
pub struct FiniteElementSpace {
    mesh: Arc<TriangleMesh>,
    degree: usize,
    rank: ValueRank,
    nodes: Vec<[f64; 2]>,
    node_tags: Vec<Option<BoundaryTag>>,
    element_nodes: Vec<[usize; 6]>,
    geometry: Vec<ElementGeometry>,
}

impl FiniteElementSpace {
    pub fn new(mesh: Arc<TriangleMesh>, degree: usize, rank: ValueRank) -> Result<Self, SpaceError> {
        if degree != 1 && degree != 2 {
            return Err(SpaceError::UnsupportedDegree(degree));
        }
        let mut nodes: Vec<[f64; 2]> = mesh.vertices().to_vec();
        let mut node_tags: Vec<Option<BoundaryTag>> = (0..mesh.num_vertices()).map(|v| mesh.vertex_tag(v)).collect();
        let mut element_nodes = Vec::with_capacity(mesh.num_triangles());

        let mut edge_ids: HashMap<[usize; 2], usize> = HashMap::new();
        if degree == 2 {
            let boundary: HashMap<[usize; 2], BoundaryTag> = mesh
                .boundary_edges()
                .iter()
                .map(|be| {
                    let [a, b] = be.vertices;
                    ([a.min(b), a.max(b)], be.tag)
                })
                .collect();
            for (k, edge) in mesh.edges().into_iter().enumerate() {
                let [a, b] = edge.map(|v| mesh.vertices()[v]);
                nodes.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
                node_tags.push(boundary.get(&edge).copied());
                edge_ids.insert(edge, mesh.num_vertices() + k);
            }
        }
        for tri in mesh.triangles() {
            let mut local = [usize::MAX; 6];
            local[..3].copy_from_slice(tri);
            if degree == 2 {
                for (e, [a, b]) in LOCAL_EDGES.iter().copied().enumerate() {
                    let (va, vb) = (tri[a], tri[b]);
                    local[3 + e] = edge_ids[&[va.min(vb), va.max(vb)]];
                }
            }
            element_nodes.push(local);
        }
        let geometry =
            mesh.triangles().iter().map(|tri| ElementGeometry::new(tri.map(|v| mesh.vertices()[v]))).collect();

        Ok(Self { mesh, degree, rank, nodes, node_tags, element_nodes, geometry })
    }

    pub fn mesh(&self) -> &Arc<TriangleMesh> {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn rank(&self) -> ValueRank {
        self.rank
    }

    pub fn components(&self) -> usize {
        self.rank.components()
    }

    /// Number of scalar nodes (geometric dof locations).
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn dof_count(&self) -> usize {
        self.nodes.len() * self.components()
    }

    pub fn node_coordinates(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    /// Coordinates of every dof (repeated per component for vector spaces).
    pub fn dof_coordinates(&self) -> Vec<[f64; 2]> {
        self.nodes.iter().flat_map(|&p| std::iter::repeat_n(p, self.components())).collect()
    }

    pub fn node_tag(&self, node: usize) -> Option<BoundaryTag> {
        self.node_tags[node]
    }

    pub fn local_size(&self) -> usize {
        if self.degree == 1 {
            3
        } else {
            6
        }
    }

    /// Scalar node indices of one element in local basis order.
    pub fn element_nodes(&self, triangle: usize) -> &[usize] {
        &self.element_nodes[triangle][..self.local_size()]
    }

    pub fn geometry(&self, triangle: usize) -> &ElementGeometry {
        &self.geometry[triangle]
    }

    pub fn num_elements(&self) -> usize {
        self.element_nodes.len()
    }

    /// Nodes lying on any of the given walls.
    pub fn boundary_nodes(&self, tags: &[BoundaryTag]) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&n| self.node_tags[n].is_some_and(|t| tags.contains(&t))).collect()
    }

    /// Dofs lying on any of the given walls (all components for vector spaces).
    pub fn boundary_dofs(&self, tags: &[BoundaryTag]) -> Vec<usize> {
        let c = self.components();
        self.boundary_nodes(tags).into_iter().flat_map(|n| (0..c).map(move |k| c * n + k)).collect()
    }

    /// Shape functions on the reference element mapped to the physical triangle.
    pub fn shapes(&self, triangle: usize, bary: [f64; 3]) -> ShapeValues {
        let (len, values, dlambda) = reference_shapes(self.degree, bary);
        let gl = &self.geometry[triangle].grad_lambda;
        let mut gradients = [[0.0; 2]; 6];
        for i in 0..len {
            for k in 0..3 {
                gradients[i][0] += dlambda[i][k] * gl[k][0];
                gradients[i][1] += dlambda[i][k] * gl[k][1];
            }
        }
        ShapeValues { len, values, gradients }
    }

    /// Basis values and gradients on a triangle, checking the geometry first.
    pub fn evaluate_basis(&self, triangle: usize, bary: [f64; 3]) -> Result<ShapeValues, SpaceError> {
        if triangle >= self.num_elements() {
            return Err(SpaceError::TriangleOutOfRange { index: triangle, count: self.num_elements() });
        }
        if !(self.geometry[triangle].area > 0.0) {
            return Err(SpaceError::DegenerateTriangle(triangle));
        }
        Ok(self.shapes(triangle, bary))
    }

    pub fn interpolate_scalar(&self, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>, SpaceError> {
        self.expect_rank(ValueRank::Scalar)?;
        Ok(self.nodes.iter().map(|p| f(p[0], p[1])).collect())
    }

    pub fn interpolate_vector(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> Result<Vec<f64>, SpaceError> {
        self.expect_rank(ValueRank::Vector2)?;
        Ok(self.nodes.iter().flat_map(|p| f(p[0], p[1])).collect())
    }

    fn expect_rank(&self, expected: ValueRank) -> Result<(), SpaceError> {
        if self.rank == expected {
            Ok(())
        } else {
            Err(SpaceError::RankMismatch { expected, actual: self.rank })
        }
    }

    /// Physical coordinates of a barycentric point.
    pub fn map_point(&self, triangle: usize, bary: [f64; 3]) -> [f64; 2] {
        let tri = self.mesh.triangles()[triangle];
        let v = self.mesh.vertices();
        let mut p = [0.0; 2];
        for k in 0..3 {
            p[0] += bary[k] * v[tri[k]][0];
            p[1] += bary[k] * v[tri[k]][1];
        }
        p
    }

    /// Value and gradient of component `comp` of a finite element function.
    pub fn eval(&self, coeffs: &[f64], comp: usize, triangle: usize, bary: [f64; 3]) -> (f64, [f64; 2]) {
        let shapes = self.shapes(triangle, bary);
        let c = self.components();
        let mut value = 0.0;
        let mut grad = [0.0; 2];
        for (i, &node) in self.element_nodes(triangle).iter().enumerate() {
            let w = coeffs[c * node + comp];
            value += w * shapes.values[i];
            grad[0] += w * shapes.gradients[i][0];
            grad[1] += w * shapes.gradients[i][1];
        }
        (value, grad)
    }

    /// Finds a triangle containing `(x, y)` and the barycentric coordinates there.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, [f64; 3])> {
        (0..self.num_elements()).find_map(|t| {
            let gl = &self.geometry[t].grad_lambda;
            let tri = self.mesh.triangles()[t];
            let v = self.mesh.vertices();
            let mut bary = [0.0; 3];
            for k in 0..3 {
                // lambda_k is affine and vanishes on the opposite edge
                let o = v[tri[(k + 1) % 3]];
                bary[k] = gl[k][0] * (x - o[0]) + gl[k][1] * (y - o[1]);
            }
            bary.iter().all(|&l| l >= -1e-12).then_some((t, bary))
        })
    }
}

/// Convenience wrapper matching the space constructor.
pub fn build_space(mesh: Arc<TriangleMesh>, degree: usize, rank: ValueRank) -> Result<FiniteElementSpace, SpaceError> {
    FiniteElementSpace::new(mesh, degree, rank)
}
