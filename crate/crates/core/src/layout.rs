//! Conversion of a turbine density into discrete turbine positions, and
//! evaluation of such layouts with resolved per-turbine friction bumps.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::farm::{farm_power, turbine_count, DensityField, TurbineSpec};
use crate::mesh::{Mesh, Rect};
use crate::shallow_water::{FlowState, FrictionField, ShallowWater, SolverError};

/// Proposals allowed before giving up on placing the turbines.
pub const DEFAULT_PROPOSAL_BUDGET: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("{0}")]
    Invalid(String),
    #[error("packing infeasible: placed {placed} of {target} turbines after {proposals} proposals")]
    PackingInfeasible {
        placed: usize,
        target: usize,
        proposals: usize,
    },
    #[error("mesh does not resolve the turbine near ({x}, {y}): cell size {cell_size} exceeds {limit}")]
    UnderResolved {
        x: f64,
        y: f64,
        cell_size: f64,
        limit: f64,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("layout file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurbineLayout {
    pub positions: Vec<[f64; 2]>,
    pub spec: TurbineSpec,
    pub seed: u64,
}

impl TurbineLayout {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Smallest pairwise distance, infinite for fewer than two turbines.
    pub fn min_pairwise_distance(&self) -> f64 {
        let p = &self.positions;
        let mut m = f64::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                m = m.min(distance(p[i], p[j]));
            }
        }
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# seed = {}", self.seed);
        let _ = writeln!(s, "# turbines = {}", self.positions.len());
        let _ = writeln!(s, "# min_distance = {}", self.spec.min_distance);
        let _ = writeln!(s, "# x y");
        for p in &self.positions {
            let _ = writeln!(s, "{} {}", p[0], p[1]);
        }
        s
    }

    /// Parses positions written by [`Self::to_text`]. The seed header is
    /// read back when present.
    pub fn from_text(text: &str, spec: TurbineSpec) -> Result<Self, LayoutError> {
        let mut positions = Vec::new();
        let mut seed = 0;
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| LayoutError::Parse {
                line: i + 1,
                message,
            };
            let line = raw.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed =") {
                    seed = v.trim().parse().map_err(|e| err(format!("seed: {e}")))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("`{t}`: {e}"))))
                .collect::<Result<_, _>>()?;
            if f.len() != 2 {
                return Err(err(format!("expected 2 columns, found {}", f.len())));
            }
            positions.push([f[0], f[1]]);
        }
        Ok(Self {
            positions,
            spec,
            seed,
        })
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    distance(p, [a[0] + s * ab[0], a[1] + s * ab[1]])
}

/// Distance from `p` to the closed triangle.
fn triangle_distance(tri: [[f64; 2]; 3], p: [f64; 2]) -> f64 {
    if crate::mesh::barycentric(tri, p).iter().all(|l| *l >= 0.0) {
        return 0.0;
    }
    (0..3)
        .map(|k| segment_distance(tri[k], tri[(k + 1) % 3], p))
        .fold(f64::INFINITY, f64::min)
}

/// Buckets of accepted positions on a grid of spacing `D_min`.
struct SpacingGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<[f64; 2]>>,
}

impl SpacingGrid {
    fn key(&self, p: [f64; 2]) -> (i64, i64) {
        ((p[0] / self.cell).floor() as i64, (p[1] / self.cell).floor() as i64)
    }

    fn clear_of_others(&self, p: [f64; 2]) -> bool {
        let (i, j) = self.key(p);
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(b) = self.buckets.get(&(i + di, j + dj)) {
                    if b.iter().any(|q| distance(p, *q) < self.cell) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, p: [f64; 2]) {
        let k = self.key(p);
        self.buckets.entry(k).or_default().push(p);
    }
}

/// Places `round(integral of d)` turbines by rejection sampling: a uniform
/// proposal over the bounding box of the farm is accepted with probability
/// `d(x) / max dbar` if it keeps `D_min` to every placed turbine.
pub fn convert_density(
    mesh: &Mesh,
    d: &DensityField,
    spec: &TurbineSpec,
    seed: u64,
    budget: usize,
) -> Result<TurbineLayout, LayoutError> {
    spec.validate().map_err(|e| LayoutError::Invalid(e.to_string()))?;
    let spaces = crate::fem::Spaces::new(mesh);
    let count = turbine_count(d, &spaces);
    let target = count.round().max(0.0) as usize;
    let mut layout = TurbineLayout {
        positions: Vec::with_capacity(target),
        spec: *spec,
        seed,
    };
    if target == 0 {
        return Ok(layout);
    }
    let dmax = d.upper().iter().copied().fold(0.0, f64::max);
    let support = d.support();
    let mut bbox = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if !support[t] {
            continue;
        }
        for &v in tri {
            let p = mesh.vertices()[v];
            bbox.x0 = bbox.x0.min(p[0]);
            bbox.y0 = bbox.y0.min(p[1]);
            bbox.x1 = bbox.x1.max(p[0]);
            bbox.y1 = bbox.y1.max(p[1]);
        }
    }
    let locator = mesh.locator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = SpacingGrid {
        cell: spec.min_distance,
        buckets: HashMap::new(),
    };
    let mut proposals = 0;
    while layout.positions.len() < target {
        if proposals == budget {
            return Err(LayoutError::PackingInfeasible {
                placed: layout.positions.len(),
                target,
                proposals,
            });
        }
        proposals += 1;
        let p = [
            rng.gen_range(bbox.x0..=bbox.x1),
            rng.gen_range(bbox.y0..=bbox.y1),
        ];
        let u: f64 = rng.gen();
        let Some((t, l)) = locator.locate(p) else {
            continue;
        };
        if !support[t] {
            continue;
        }
        let tri = mesh.triangles()[t];
        let dv = d.values();
        let dens = l[0] * dv[tri[0]] + l[1] * dv[tri[1]] + l[2] * dv[tri[2]];
        if u * dmax < dens && grid.clear_of_others(p) {
            grid.insert(p);
            layout.positions.push(p);
        }
    }
    Ok(layout)
}

/// Smooth compactly supported bump, one at the center and zero for
/// `s >= 1`.
pub fn bump_profile(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Discrete farm friction: one bump per turbine with the turbine diameter
/// as support diameter, sharing a single amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpFarm {
    pub centers: Vec<[f64; 2]>,
    pub radius: f64,
    pub amplitude: f64,
}

impl BumpFarm {
    /// Bumps whose nodal friction on `mesh` integrates to `total_friction`.
    pub fn new(layout: &TurbineLayout, mesh: &Mesh, total_friction: f64) -> Result<Self, LayoutError> {
        let mut farm = Self {
            centers: layout.positions.clone(),
            radius: 0.5 * layout.spec.diameter(),
            amplitude: 1.0,
        };
        if farm.centers.is_empty() {
            farm.amplitude = 0.0;
            return Ok(farm);
        }
        let unit = farm.integrated_friction(mesh);
        if !(unit > 0.0) {
            return Err(LayoutError::Invalid("bumps do not touch any mesh vertex".into()));
        }
        farm.amplitude = total_friction / unit;
        Ok(farm)
    }

    /// Nodal friction coefficients on the vertices of `mesh`.
    pub fn nodal(&self, mesh: &Mesh) -> Vec<f64> {
        let mut c = vec![0.0; mesh.num_vertices()];
        if self.amplitude == 0.0 {
            return c;
        }
        let r = self.radius;
        let grid = SpacingGrid {
            cell: 2.0 * r,
            buckets: HashMap::new(),
        };
        let mut index: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in self.centers.iter().enumerate() {
            index.entry(grid.key(*p)).or_default().push(i);
        }
        for (v, p) in mesh.vertices().iter().enumerate() {
            let (i, j) = grid.key(*p);
            for di in -1..=1 {
                for dj in -1..=1 {
                    for &b in index.get(&(i + di, j + dj)).into_iter().flatten() {
                        c[v] += self.amplitude * bump_profile(distance(*p, self.centers[b]) / r);
                    }
                }
            }
        }
        c
    }

    pub fn friction(&self, mesh: &Mesh) -> FrictionField {
        FrictionField {
            nodal: self.nodal(mesh),
            support: None,
        }
    }

    /// Integral of the nodal friction over the mesh.
    pub fn integrated_friction(&self, mesh: &Mesh) -> f64 {
        let c = self.nodal(mesh);
        mesh.triangles()
            .iter()
            .enumerate()
            .map(|(t, tri)| mesh.area(t) / 3.0 * (c[tri[0]] + c[tri[1]] + c[tri[2]]))
            .sum()
    }

    /// A bump center whose support overlaps triangle `t`.
    fn near(&self, mesh: &Mesh, t: usize) -> Option<[f64; 2]> {
        let tri = mesh.triangle_points(t);
        let c = mesh.centroid(t);
        let reach = self.radius + mesh.diameter(t);
        self.centers
            .iter()
            .copied()
            .filter(|p| distance(*p, c) < reach)
            .find(|p| triangle_distance(tri, *p) < self.radius)
    }

    /// Largest cell size that still puts four cells across a bump.
    pub fn resolution_limit(&self) -> f64 {
        2.0 * self.radius / 4.0
    }

    /// Checks that every cell touching a bump is at most a quarter of the
    /// bump diameter in size.
    pub fn check_resolution(&self, mesh: &Mesh) -> Result<(), LayoutError> {
        let limit = self.resolution_limit();
        for t in 0..mesh.num_triangles() {
            let h = mesh.equivalent_size(t);
            if h <= limit * (1.0 + 1e-9) {
                continue;
            }
            if let Some(p) = self.near(mesh, t) {
                return Err(LayoutError::UnderResolved {
                    x: p[0],
                    y: p[1],
                    cell_size: h,
                    limit,
                });
            }
        }
        Ok(())
    }

    /// `mesh` bisected locally until [`Self::check_resolution`] holds.
    pub fn refine_mesh(&self, mesh: &Mesh) -> Result<Mesh, LayoutError> {
        let limit = self.resolution_limit() * (1.0 + 1e-9);
        mesh.refine(
            |m, t| m.equivalent_size(t) > limit && self.near(m, t).is_some(),
            64,
        )
        .map_err(|e| LayoutError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteEvaluation {
    pub power: f64,
    pub state: FlowState,
    pub bumps: BumpFarm,
}

/// Solves the steady flow with the bump friction of `layout` on the mesh of
/// `sw` and returns its farm power. `total_friction` is the integral of the
/// continuous friction field the layout came from.
pub fn evaluate_discrete_layout(
    layout: &TurbineLayout,
    sw: &ShallowWater,
    total_friction: f64,
    guess: Option<&FlowState>,
) -> Result<DiscreteEvaluation, LayoutError> {
    let bumps = BumpFarm::new(layout, sw.mesh(), total_friction)?;
    bumps.check_resolution(sw.mesh())?;
    let friction = bumps.friction(sw.mesh());
    let state = sw.solve_steady(&friction, guess)?;
    let power = if layout.is_empty() {
        0.0
    } else {
        farm_power(sw, &state, &friction)
    };
    Ok(DiscreteEvaluation {
        power,
        state,
        bumps,
    })
}
