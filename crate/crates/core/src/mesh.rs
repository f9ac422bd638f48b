//! Structured triangulations of axis-aligned rectangles.
//!
//! Every rectangle cell is split along its lower-left to upper-right diagonal,
//! so the mesh family is fully determined by `(nx, ny, width, height)`.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("cell counts must be at least 1 (got nx = {nx}, ny = {ny})")]
    CellCount { nx: usize, ny: usize },
    #[error("rectangle dimensions must be positive and finite (got {width} x {height})")]
    Dimensions { width: f64, height: f64 },
}

/// Side of the rectangle a boundary entity lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Left,
    Right,
    Bottom,
    Top,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 4] = [Self::Left, Self::Right, Self::Bottom, Self::Top];

    pub fn is_vertical(self) -> bool {
        matches!(self, Self::Left | Self::Right)
    }
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Bottom => "bottom",
            Self::Top => "top",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

/// Conforming triangulation of a rectangle `[0, width] x [0, height]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    vertex_tags: Vec<Option<BoundaryTag>>,
    width: f64,
    height: f64,
}

impl TriangleMesh {
    /// Builds an `nx` by `ny` cell triangulation with two counterclockwise
    /// triangles per cell.
    pub fn structured_rect(nx: usize, ny: usize, width: f64, height: f64) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::CellCount { nx, ny });
        }
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(MeshError::Dimensions { width, height });
        }

        let index = |i: usize, j: usize| j * (nx + 1) + i;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        let mut vertex_tags = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            // Exact endpoints so that wall detection by coordinate is robust.
            let y = if j == ny { height } else { height * j as f64 / ny as f64 };
            for i in 0..=nx {
                let x = if i == nx { width } else { width * i as f64 / nx as f64 };
                vertices.push([x, y]);
                // Corners go to the vertical walls.
                let tag = if i == 0 {
                    Some(BoundaryTag::Left)
                } else if i == nx {
                    Some(BoundaryTag::Right)
                } else if j == 0 {
                    Some(BoundaryTag::Bottom)
                } else if j == ny {
                    Some(BoundaryTag::Top)
                } else {
                    None
                };
                vertex_tags.push(tag);
            }
        }

        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let v00 = index(i, j);
                let v10 = index(i + 1, j);
                let v01 = index(i, j + 1);
                let v11 = index(i + 1, j + 1);
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }

        let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
        for i in 0..nx {
            boundary_edges.push(BoundaryEdge { vertices: [index(i, 0), index(i + 1, 0)], tag: BoundaryTag::Bottom });
        }
        for j in 0..ny {
            boundary_edges.push(BoundaryEdge { vertices: [index(nx, j), index(nx, j + 1)], tag: BoundaryTag::Right });
        }
        for i in (0..nx).rev() {
            boundary_edges.push(BoundaryEdge { vertices: [index(i + 1, ny), index(i, ny)], tag: BoundaryTag::Top });
        }
        for j in (0..ny).rev() {
            boundary_edges.push(BoundaryEdge { vertices: [index(0, j + 1), index(0, j)], tag: BoundaryTag::Left });
        }

        Ok(Self { vertices, triangles, boundary_edges, vertex_tags, width, height })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    /// Wall a vertex lies on; corners report the vertical wall.
    pub fn vertex_tag(&self, vertex: usize) -> Option<BoundaryTag> {
        self.vertex_tags[vertex]
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Signed area of a triangle (positive for counterclockwise orientation).
    pub fn signed_area(&self, triangle: usize) -> f64 {
        let [a, b, c] = self.triangles[triangle].map(|v| self.vertices[v]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    /// Unique undirected edges as sorted vertex pairs, in order of first
    /// appearance while walking the triangles.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut seen = HashMap::new();
        let mut edges = Vec::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                seen.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edges.len() - 1
                });
            }
        }
        edges
    }

    /// Maximum edge length over all triangles.
    pub fn mesh_size(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|tri| (0..3).map(move |k| (tri[k], tri[(k + 1) % 3])))
            .map(|(a, b)| {
                let (p, q) = (self.vertices[a], self.vertices[b]);
                (p[0] - q[0]).hypot(p[1] - q[1])
            })
            .fold(0.0, f64::max)
    }

    /// Writes the bare triangulation as a legacy ASCII VTK unstructured grid.
    pub fn write_vtk<W: Write>(&self, out: &mut W) -> io::Result<()> {
        crate::output::write_vtk_grid(out, self, "mesh")
    }
}

/// Convenience wrapper matching the mesh constructor.
pub fn build_structured_rect(nx: usize, ny: usize, width: f64, height: f64) -> Result<TriangleMesh, MeshError> {
    TriangleMesh::structured_rect(nx, ny, width, height)
}

pub fn mesh_size(mesh: &TriangleMesh) -> f64 {
    mesh.mesh_size()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn smallest_mesh() {
        let mesh = build_structured_rect(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(mesh.num_vertices(), 4);
        assert_eq!(mesh.num_triangles(), 2);
        assert_eq!(mesh.boundary_edges().len(), 4);
    }

    #[test]
    fn cavity_mesh_triangle_count() {
        let mesh = build_structured_rect(25, 40, 1.0, 2.0).unwrap();
        assert_eq!(mesh.num_triangles(), 2000);
        assert_eq!(mesh.num_vertices(), 26 * 41);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(build_structured_rect(0, 3, 1.0, 1.0), Err(MeshError::CellCount { nx: 0, ny: 3 }));
        assert!(matches!(build_structured_rect(2, 2, -1.0, 1.0), Err(MeshError::Dimensions { .. })));
        assert!(matches!(build_structured_rect(2, 2, 1.0, 0.0), Err(MeshError::Dimensions { .. })));
        assert!(matches!(build_structured_rect(2, 2, f64::NAN, 1.0), Err(MeshError::Dimensions { .. })));
    }

    #[test]
    fn areas_partition_domain() {
        for &(nx, ny, w, h) in &[(1, 1, 1.0, 1.0), (3, 7, 0.3, 2.5), (25, 40, 1.0, 2.0), (16, 16, 1.0, 1.0)] {
            let mesh = build_structured_rect(nx, ny, w, h).unwrap();
            let total: f64 = (0..mesh.num_triangles()).map(|t| mesh.signed_area(t)).sum();
            assert!(((total - w * h) / (w * h)).abs() < 1e-12);
            assert!((0..mesh.num_triangles()).all(|t| mesh.signed_area(t) > 0.0));
        }
    }

    #[test]
    fn mesh_size_examples() {
        let unit = build_structured_rect(1, 1, 1.0, 1.0).unwrap();
        assert!((mesh_size(&unit) - 2f64.sqrt()).abs() < 1e-15);
        let fine = build_structured_rect(4, 4, 1.0, 1.0).unwrap();
        assert!((mesh_size(&fine) - 2f64.sqrt() / 4.0).abs() < 1e-15);
        let coarse = build_structured_rect(2, 2, 1.0, 1.0).unwrap();
        assert!((mesh_size(&coarse) - 2.0 * mesh_size(&fine)).abs() < 1e-15);
    }

    #[test]
    fn euler_and_edge_sharing() {
        let mesh = build_structured_rect(5, 3, 2.0, 1.0).unwrap();
        let edges = mesh.edges();
        let (v, e, f) = (mesh.num_vertices() as i64, edges.len() as i64, mesh.num_triangles() as i64);
        assert_eq!(v - e + f, 1);

        let mut count: HashMap<[usize; 2], usize> = HashMap::new();
        for tri in mesh.triangles() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        let boundary: Vec<[usize; 2]> = mesh
            .boundary_edges()
            .iter()
            .map(|be| [be.vertices[0].min(be.vertices[1]), be.vertices[0].max(be.vertices[1])])
            .collect();
        for (edge, n) in &count {
            let expected = if boundary.contains(edge) { 1 } else { 2 };
            assert_eq!(*n, expected, "edge {edge:?}");
        }
    }

    #[test]
    fn boundary_covers_perimeter_with_disjoint_tags() {
        let (w, h) = (1.0, 2.0);
        let mesh = build_structured_rect(4, 6, w, h).unwrap();
        let mut per_tag: HashMap<BoundaryTag, f64> = HashMap::new();
        for be in mesh.boundary_edges() {
            let [a, b] = be.vertices.map(|v| mesh.vertices()[v]);
            *per_tag.entry(be.tag).or_default() += (a[0] - b[0]).hypot(a[1] - b[1]);
            // edge lies on its tagged side
            let on_side = |p: [f64; 2]| match be.tag {
                BoundaryTag::Left => p[0] == 0.0,
                BoundaryTag::Right => p[0] == w,
                BoundaryTag::Bottom => p[1] == 0.0,
                BoundaryTag::Top => p[1] == h,
            };
            assert!(on_side(a) && on_side(b));
        }
        assert!((per_tag[&BoundaryTag::Left] - h).abs() < 1e-14);
        assert!((per_tag[&BoundaryTag::Right] - h).abs() < 1e-14);
        assert!((per_tag[&BoundaryTag::Bottom] - w).abs() < 1e-14);
        assert!((per_tag[&BoundaryTag::Top] - w).abs() < 1e-14);

        // corners belong to vertical walls
        let corners = [0, 4, 7 * 5 - 5, 7 * 5 - 1];
        for c in corners {
            assert!(mesh.vertex_tag(c).unwrap().is_vertical());
        }
        let tagged = (0..mesh.num_vertices()).filter(|&v| mesh.vertex_tag(v).is_some()).count();
        assert_eq!(tagged, 2 * (4 + 6));
    }
}
