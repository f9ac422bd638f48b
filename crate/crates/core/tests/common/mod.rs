#![allow(dead_code, clippy::needless_range_loop)]
//! Test oracles that share nothing with the library beyond mesh topology and
//! the global node numbering.

use ddbrink_core::fespace::FiniteElementSpace;
use ddbrink_core::mesh::TriangleMesh;

/// Gaussian elimination with partial pivoting on a dense copy.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &bi)| row.iter().copied().chain([bi]).collect()).collect();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        assert!(m[piv][k] != 0.0, "singular at column {k}");
        m.swap(k, piv);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            if f == 0.0 {
                continue;
            }
            for j in k..=n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (m[k][n] - s) / m[k][k];
    }
    x
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const GL4_X: [f64; 4] =
    [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
const GL4_W: [f64; 4] =
    [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];

/// Collapsed 4×4 Gauss rule on the reference triangle: barycentric points and
/// weights summing to 1 (multiply by the area).
pub fn duffy_rule() -> Vec<([f64; 3], f64)> {
    let mut out = Vec::new();
    for (xa, wa) in GL4_X.iter().zip(GL4_W) {
        for (xb, wb) in GL4_X.iter().zip(GL4_W) {
            let s = 0.5 * (xa + 1.0);
            let r = 0.5 * (xb + 1.0);
            let l1 = s;
            let l2 = r * (1.0 - s);
            // 1/4 from the interval maps, 2 from normalizing by the area
            out.push(([1.0 - l1 - l2, l1, l2], wa * wb * (1.0 - s) * 0.5));
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Basis {
    Vertex(usize),
    Edge(usize, usize),
}

struct Element {
    area: f64,
    grad: [[f64; 2]; 3],
    p2: Vec<(usize, Basis)>,
    p1: Vec<(usize, Basis)>,
}

fn classify(verts: &[[f64; 2]; 3], grad: &[[f64; 2]; 3], p: [f64; 2]) -> Basis {
    let l: Vec<f64> = (0..3)
        .map(|i| {
            let j = (i + 1) % 3;
            // λ_i vanishes on the opposite edge, which contains vertex j
            grad[i][0] * (p[0] - verts[j][0]) + grad[i][1] * (p[1] - verts[j][1])
        })
        .collect();
    let near = |a: f64, b: f64| (a - b).abs() < 1e-9;
    if let Some(i) = (0..3).find(|&i| near(l[i], 1.0)) {
        return Basis::Vertex(i);
    }
    let halves: Vec<usize> = (0..3).filter(|&i| near(l[i], 0.5)).collect();
    assert_eq!(halves.len(), 2, "node is not a P2 node of its element");
    Basis::Edge(halves[0], halves[1])
}

fn eval(b: Basis, l: [f64; 3], grad: &[[f64; 2]; 3]) -> (f64, [f64; 2]) {
    match b {
        Basis::Vertex(i) => {
            let d = 4.0 * l[i] - 1.0;
            (l[i] * (2.0 * l[i] - 1.0), [d * grad[i][0], d * grad[i][1]])
        }
        Basis::Edge(i, j) => (
            4.0 * l[i] * l[j],
            [4.0 * (l[i] * grad[j][0] + l[j] * grad[i][0]), 4.0 * (l[i] * grad[j][1] + l[j] * grad[i][1])],
        ),
    }
}

/// Dense Taylor-Hood matrices assembled from hand-coded basis functions.
pub struct DenseTaylorHood {
    elements: Vec<Element>,
    pub n2: usize,
    pub n1: usize,
    pub coords: Vec<[f64; 2]>,
    pub mass: Vec<Vec<f64>>,
    pub stiffness: Vec<Vec<f64>>,
    /// `∫ q ∂φ/∂x` and `∫ q ∂φ/∂y`, pressure rows.
    pub div: [Vec<Vec<f64>>; 2],
    pub p1_weights: Vec<f64>,
}

impl DenseTaylorHood {
    pub fn new(mesh: &TriangleMesh, p2: &FiniteElementSpace, p1: &FiniteElementSpace) -> Self {
        let rule = duffy_rule();
        let (n2, n1) = (p2.num_nodes(), p1.num_nodes());
        let c2 = p2.node_coordinates();
        let c1 = p1.node_coordinates();
        let mut elements = Vec::new();
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let v = [mesh.vertices()[tri[0]], mesh.vertices()[tri[1]], mesh.vertices()[tri[2]]];
            let two_a = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
            let grad = [
                [(v[1][1] - v[2][1]) / two_a, (v[2][0] - v[1][0]) / two_a],
                [(v[2][1] - v[0][1]) / two_a, (v[0][0] - v[2][0]) / two_a],
                [(v[0][1] - v[1][1]) / two_a, (v[1][0] - v[0][0]) / two_a],
            ];
            let p2n = p2.element_nodes(t).iter().map(|&n| (n, classify(&v, &grad, c2[n]))).collect();
            let p1n = p1.element_nodes(t).iter().map(|&n| (n, classify(&v, &grad, c1[n]))).collect();
            elements.push(Element { area: 0.5 * two_a.abs(), grad, p2: p2n, p1: p1n });
        }
        let mut mass = vec![vec![0.0; n2]; n2];
        let mut stiffness = vec![vec![0.0; n2]; n2];
        let mut div = [vec![vec![0.0; n2]; n1], vec![vec![0.0; n2]; n1]];
        let mut p1_weights = vec![0.0; n1];
        for e in &elements {
            for &(l, w) in &rule {
                let w = w * e.area;
                let s2: Vec<(usize, f64, [f64; 2])> =
                    e.p2.iter()
                        .map(|&(n, b)| {
                            let (v, g) = eval(b, l, &e.grad);
                            (n, v, g)
                        })
                        .collect();
                for &(i, vi, gi) in &s2 {
                    for &(j, vj, gj) in &s2 {
                        mass[i][j] += w * vi * vj;
                        stiffness[i][j] += w * (gi[0] * gj[0] + gi[1] * gj[1]);
                    }
                }
                for &(q, b) in &e.p1 {
                    let (qv, _) = match b {
                        Basis::Vertex(i) => (l[i], ()),
                        Basis::Edge(..) => unreachable!("P1 node on an edge"),
                    };
                    p1_weights[q] += w * qv;
                    for &(j, _, gj) in &s2 {
                        div[0][q][j] += w * qv * gj[0];
                        div[1][q][j] += w * qv * gj[1];
                    }
                }
            }
        }
        Self { elements, n2, n1, coords: c2.to_vec(), mass, stiffness, div, p1_weights }
    }

    /// `½∫(w·∇φ_j)φ_i − ½∫(w·∇φ_i)φ_j` for an interleaved P2 wind.
    pub fn convection(&self, wind: &[f64]) -> Vec<Vec<f64>> {
        let rule = duffy_rule();
        let mut n = vec![vec![0.0; self.n2]; self.n2];
        for e in &self.elements {
            for &(l, w) in &rule {
                let w = w * e.area;
                let s2: Vec<(usize, f64, [f64; 2])> =
                    e.p2.iter()
                        .map(|&(k, b)| {
                            let (v, g) = eval(b, l, &e.grad);
                            (k, v, g)
                        })
                        .collect();
                let mut wv = [0.0; 2];
                for &(k, v, _) in &s2 {
                    wv[0] += wind[2 * k] * v;
                    wv[1] += wind[2 * k + 1] * v;
                }
                for &(i, vi, gi) in &s2 {
                    for &(j, vj, gj) in &s2 {
                        let aj = wv[0] * gj[0] + wv[1] * gj[1];
                        let ai = wv[0] * gi[0] + wv[1] * gi[1];
                        n[i][j] += 0.5 * w * (aj * vi - ai * vj);
                    }
                }
            }
        }
        n
    }
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Coefficients of the two-step backward scheme with extrapolated wind.
#[derive(Clone, Copy)]
pub struct Bdf2Coefficients {
    pub dt: f64,
    pub nu: f64,
    pub gamma: f64,
    pub dc: f64,
    pub da_inv: f64,
    pub beta_t: f64,
    pub beta_s: f64,
    pub g: [f64; 2],
}

#[derive(Clone)]
pub struct Levels {
    pub u: [Vec<f64>; 2],
    pub p: Vec<f64>,
    pub t: [Vec<f64>; 2],
    pub s: [Vec<f64>; 2],
}

/// Rectangle `[0, w] × [0, h]`: no slip on all walls, scalars `1` at `x = 0` and `0` at `x = w`.
pub struct CavityOracle {
    pub th: DenseTaylorHood,
    pub c: Bdf2Coefficients,
    width: f64,
    height: f64,
}

impl CavityOracle {
    pub fn new(th: DenseTaylorHood, c: Bdf2Coefficients, width: f64, height: f64) -> Self {
        Self { th, c, width, height }
    }

    fn on_wall(&self, p: [f64; 2]) -> bool {
        p[0].abs() < 1e-12
            || (p[0] - self.width).abs() < 1e-12
            || p[1].abs() < 1e-12
            || (p[1] - self.height).abs() < 1e-12
    }

    fn scalar_wall(&self, p: [f64; 2]) -> Option<f64> {
        if p[0].abs() < 1e-12 {
            Some(1.0)
        } else if (p[0] - self.width).abs() < 1e-12 {
            Some(0.0)
        } else {
            None
        }
    }

    fn scalar_step(&self, conv: &[Vec<f64>], kappa: f64, w: &[Vec<f64>; 2]) -> Vec<f64> {
        let (th, dt) = (&self.th, self.c.dt);
        let n = th.n2;
        let hist: Vec<f64> = (0..n).map(|i| (4.0 * w[0][i] - w[1][i]) / (2.0 * dt)).collect();
        let mut rhs = matvec(&th.mass, &hist);
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| 1.5 / dt * th.mass[i][j] + kappa * th.stiffness[i][j] + conv[i][j]).collect())
            .collect();
        for i in 0..n {
            if let Some(v) = self.scalar_wall(th.coords[i]) {
                a[i] = vec![0.0; n];
                a[i][i] = 1.0;
                rhs[i] = v;
            }
        }
        dense_solve(&a, &rhs)
    }

    /// One step from levels `(n, n − 1)`; returns the new levels `(n + 1, n)`.
    pub fn step(&self, lv: &Levels) -> Levels {
        let (th, c) = (&self.th, self.c);
        let (n2, n1) = (th.n2, th.n1);
        let wind: Vec<f64> = lv.u[0].iter().zip(&lv.u[1]).map(|(a, b)| 2.0 * a - b).collect();
        let conv = th.convection(&wind);
        let t_new = self.scalar_step(&conv, c.gamma, &lv.t);
        let s_new = self.scalar_step(&conv, c.dc, &lv.s);

        let size = 2 * n2 + n1;
        let mut a = vec![vec![0.0; size]; size];
        let mut rhs = vec![0.0; size];
        let buoy: Vec<f64> = (0..n2)
            .map(|i| c.beta_t * (2.0 * lv.t[0][i] - lv.t[1][i]) + c.beta_s * (2.0 * lv.s[0][i] - lv.s[1][i]))
            .collect();
        let mb = matvec(&th.mass, &buoy);
        for comp in 0..2 {
            let hist: Vec<f64> =
                (0..n2).map(|i| (4.0 * lv.u[0][2 * i + comp] - lv.u[1][2 * i + comp]) / (2.0 * c.dt)).collect();
            let mh = matvec(&th.mass, &hist);
            for i in 0..n2 {
                let r = 2 * i + comp;
                rhs[r] = mh[i] + c.g[comp] * mb[i];
                for j in 0..n2 {
                    a[r][2 * j + comp] =
                        (1.5 / c.dt + c.da_inv) * th.mass[i][j] + c.nu * th.stiffness[i][j] + conv[i][j];
                }
                for q in 0..n1 {
                    a[r][2 * n2 + q] = -th.div[comp][q][i];
                    a[2 * n2 + q][r] = -th.div[comp][q][i];
                }
            }
        }
        for i in 0..n2 {
            if self.on_wall(th.coords[i]) {
                for comp in 0..2 {
                    let r = 2 * i + comp;
                    a[r] = vec![0.0; size];
                    a[r][r] = 1.0;
                    rhs[r] = 0.0;
                }
            }
        }
        // pin one pressure value, then fix the zero-mean gauge
        let pin = 2 * n2;
        a[pin] = vec![0.0; size];
        a[pin][pin] = 1.0;
        rhs[pin] = 0.0;
        let mut x = dense_solve(&a, &rhs);
        let r: Vec<f64> = rhs.iter().zip(matvec(&a, &x)).map(|(b, ax)| b - ax).collect();
        let dx = dense_solve(&a, &r);
        x.iter_mut().zip(dx).for_each(|(xi, d)| *xi += d);
        let u_new = x[..2 * n2].to_vec();
        let mut p = x[2 * n2..].to_vec();
        let total: f64 = th.p1_weights.iter().sum();
        let mean = p.iter().zip(&th.p1_weights).map(|(a, w)| a * w).sum::<f64>() / total;
        p.iter_mut().for_each(|v| *v -= mean);

        Levels { u: [u_new, lv.u[0].clone()], p, t: [t_new, lv.t[0].clone()], s: [s_new, lv.s[0].clone()] }
    }
}
