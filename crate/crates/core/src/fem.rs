//! Quadrature rules, Lagrange bases and the quadratic/linear degree-of-freedom
//! maps used by the mixed velocity/elevation discretization.

use std::collections::HashMap;

use crate::mesh::Mesh;

/// Degree-6 symmetric rule on the reference triangle (Dunavant, 12 points).
/// Points are barycentric coordinates; weights sum to one.
pub const TRIANGLE_RULE: [([f64; 3], f64); 12] = {
    const A1: f64 = 0.249286745170910;
    const B1: f64 = 0.501426509658179;
    const W1: f64 = 0.116786275726379;
    const A2: f64 = 0.063089014491502;
    const B2: f64 = 0.873821971016996;
    const W2: f64 = 0.050844906370207;
    const C1: f64 = 0.053145049844817;
    const C2: f64 = 0.310352451033784;
    const C3: f64 = 0.636502499121399;
    const W3: f64 = 0.082851075618374;
    [
        ([B1, A1, A1], W1),
        ([A1, B1, A1], W1),
        ([A1, A1, B1], W1),
        ([B2, A2, A2], W2),
        ([A2, B2, A2], W2),
        ([A2, A2, B2], W2),
        ([C1, C2, C3], W3),
        ([C1, C3, C2], W3),
        ([C2, C1, C3], W3),
        ([C2, C3, C1], W3),
        ([C3, C1, C2], W3),
        ([C3, C2, C1], W3),
    ]
};

/// Three-point Gauss-Legendre rule on `[0, 1]`, exact to degree 5.
pub const LINE_RULE: [(f64, f64); 3] = {
    const S: f64 = 0.387_298_334_620_741_7; // sqrt(3/5) / 2
    [(0.5 - S, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + S, 5.0 / 18.0)]
};

/// Quadratic Lagrange basis at barycentric point `l`: vertices first, then the
/// midpoints of edges (1,2), (2,0), (0,1).
#[inline]
pub fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
        4.0 * l[0] * l[1],
    ]
}

/// Physical gradients of the quadratic basis given the barycentric gradients.
#[inline]
pub fn p2_gradients(l: [f64; 3], gl: &[[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let mut g = [[0.0; 2]; 6];
    for i in 0..3 {
        let f = 4.0 * l[i] - 1.0;
        g[i] = [f * gl[i][0], f * gl[i][1]];
    }
    for (k, (a, b)) in [(1, 2), (2, 0), (0, 1)].into_iter().enumerate() {
        g[3 + k] = [
            4.0 * (l[a] * gl[b][0] + l[b] * gl[a][0]),
            4.0 * (l[a] * gl[b][1] + l[b] * gl[a][1]),
        ];
    }
    g
}

/// Area and barycentric-coordinate gradients of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub area: f64,
    pub grad_lambda: [[f64; 2]; 3],
}

impl ElementGeometry {
    pub fn new(p: [[f64; 2]; 3]) -> Self {
        let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let g1 = [(p[2][1] - p[0][1]) / two_a, -(p[2][0] - p[0][0]) / two_a];
        let g2 = [-(p[1][1] - p[0][1]) / two_a, (p[1][0] - p[0][0]) / two_a];
        let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
        Self {
            area: 0.5 * two_a,
            grad_lambda: [g0, g1, g2],
        }
    }
}

/// Continuous quadratic (velocity) and linear (elevation, density) spaces on
/// a mesh.
///
/// Linear nodes are the mesh vertices. Quadratic nodes are the vertices
/// followed by one node per edge, numbered in order of first appearance.
#[derive(Debug, Clone)]
pub struct Spaces {
    p2_cells: Vec<[usize; 6]>,
    p2_coords: Vec<[f64; 2]>,
    geometry: Vec<ElementGeometry>,
    edge_nodes: HashMap<(usize, usize), usize>,
    num_p1: usize,
}

impl Spaces {
    pub fn new(mesh: &Mesh) -> Self {
        let nv = mesh.num_vertices();
        let mut edge_nodes = HashMap::new();
        let mut p2_coords: Vec<[f64; 2]> = mesh.vertices().to_vec();
        let mut p2_cells = Vec::with_capacity(mesh.num_triangles());
        for tri in mesh.triangles() {
            let mut cell = [tri[0], tri[1], tri[2], 0, 0, 0];
            for (k, (a, b)) in [(1, 2), (2, 0), (0, 1)].into_iter().enumerate() {
                let (va, vb) = (tri[a], tri[b]);
                let key = (va.min(vb), va.max(vb));
                let next = p2_coords.len();
                let node = *edge_nodes.entry(key).or_insert(next);
                if node == next {
                    let (pa, pb) = (mesh.vertices()[va], mesh.vertices()[vb]);
                    p2_coords.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                }
                cell[3 + k] = node;
            }
            p2_cells.push(cell);
        }
        let geometry = (0..mesh.num_triangles())
            .map(|t| ElementGeometry::new(mesh.triangle_points(t)))
            .collect();
        Self {
            p2_cells,
            p2_coords,
            geometry,
            edge_nodes,
            num_p1: nv,
        }
    }

    pub fn num_p1(&self) -> usize {
        self.num_p1
    }

    pub fn num_p2(&self) -> usize {
        self.p2_coords.len()
    }

    pub fn num_cells(&self) -> usize {
        self.p2_cells.len()
    }

    pub fn p2_cell(&self, t: usize) -> &[usize; 6] {
        &self.p2_cells[t]
    }

    /// Linear nodes of cell `t` (the first three quadratic nodes).
    pub fn p1_cell(&self, t: usize) -> [usize; 3] {
        let c = &self.p2_cells[t];
        [c[0], c[1], c[2]]
    }

    pub fn p2_coords(&self) -> &[[f64; 2]] {
        &self.p2_coords
    }

    pub fn geometry(&self, t: usize) -> &ElementGeometry {
        &self.geometry[t]
    }

    /// Quadratic node at the midpoint of the mesh edge `(a, b)`.
    pub fn edge_node(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_nodes.get(&(a.min(b), a.max(b))).copied()
    }

    /// Integral of each linear basis function over the cells selected by
    /// `mask` (all cells when `None`).
    pub fn p1_weights(&self, mask: Option<&[bool]>) -> Vec<f64> {
        let mut w = vec![0.0; self.num_p1];
        for t in 0..self.num_cells() {
            if mask.is_some_and(|m| !m[t]) {
                continue;
            }
            let a = self.geometry[t].area / 3.0;
            for v in self.p1_cell(t) {
                w[v] += a;
            }
        }
        w
    }

    /// Integral of a linear nodal field over the cells selected by `mask`.
    pub fn integrate_p1(&self, field: &[f64], mask: Option<&[bool]>) -> f64 {
        self.p1_weights(mask)
            .iter()
            .zip(field)
            .map(|(w, f)| w * f)
            .sum()
    }
}
