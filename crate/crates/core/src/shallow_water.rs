//! Nonlinear shallow water equations on the quadratic-velocity /
//! linear-elevation mixed space.
//!
//! The discrete residual is
//!
//! ```text
//! momentum:   <(u - u_old)/dt, Psi> + <u.grad u, Psi> + nu <grad u, grad Psi>
//!             + g <grad eta, Psi> + <(c_b + c_t)/H |u| u, Psi>
//! continuity: <(eta - eta_old)/dt, Phi> - <H u, grad Phi> + <H u.n, Phi>_(non free-slip)
//! ```
//!
//! with `H = h + eta` and `|u|` replaced by `sqrt(u.u + eps^2)`. Steady
//! problems drop the time-derivative terms. Dirichlet degrees of freedom are
//! carried in the system as identity rows `x_i - g_i(t) = 0`, so the assembled
//! Jacobian is the exact derivative of the full residual vector and its
//! transpose is the discrete adjoint operator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{p2_gradients, p2_values, Spaces, LINE_RULE, TRIANGLE_RULE};
use crate::mesh::{BoundaryKind, BoundaryTag, Mesh};
use crate::sparse::{Factorization, LinearSolveError, LuSolver, SparseMatrix, SparsePattern};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Newton iteration did not converge{} after {iterations} iterations (residual {residual:e})", step_suffix(*step))]
    Divergence {
        step: Option<usize>,
        iterations: usize,
        residual: f64,
    },
    #[error("linear solve failed{}: {source}", step_suffix(*step))]
    Linear {
        step: Option<usize>,
        source: LinearSolveError,
    },
    #[error("trajectory of {needed} states exceeds the in-memory cap of {cap}; use a coarser time step")]
    TrajectoryTooLong { needed: usize, cap: usize },
}

fn step_suffix(step: Option<usize>) -> String {
    step.map(|s| format!(" at time step {s}")).unwrap_or_default()
}

impl SolverError {
    fn at_step(self, step: usize) -> Self {
        match self {
            Self::Divergence {
                iterations,
                residual,
                ..
            } => Self::Divergence {
                step: Some(step),
                iterations,
                residual,
            },
            Self::Linear { source, .. } => Self::Linear {
                step: Some(step),
                source,
            },
            other => other,
        }
    }
}

/// Whether the friction and continuity terms use `h + eta` or `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthMode {
    #[default]
    Total,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalParams {
    pub gravity: f64,
    pub density: f64,
    pub viscosity: f64,
    pub background_friction: f64,
    /// Depth at rest per mesh vertex.
    pub depth: Vec<f64>,
    pub depth_floor: f64,
    pub depth_mode: DepthMode,
}

impl PhysicalParams {
    /// Uniform depth on every vertex of `mesh`.
    pub fn uniform(mesh: &Mesh, depth: f64) -> Self {
        Self {
            gravity: 9.81,
            density: 1000.0,
            viscosity: 0.5,
            background_friction: 0.0025,
            depth: vec![depth; mesh.num_vertices()],
            depth_floor: 1e-3,
            depth_mode: DepthMode::Total,
        }
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::Invalid(m.to_string()));
        if !(self.gravity > 0.0 && self.gravity.is_finite()) {
            return bad("gravity must be positive");
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad("density must be positive");
        }
        if !(self.viscosity >= 0.0 && self.viscosity.is_finite()) {
            return bad("viscosity must be non-negative");
        }
        if !(self.background_friction >= 0.0 && self.background_friction.is_finite()) {
            return bad("background_friction must be non-negative");
        }
        if !(self.depth_floor > 0.0) {
            return bad("depth floor must be positive");
        }
        if self.depth.len() != mesh.num_vertices() {
            return bad("depth field length does not match the mesh");
        }
        if self
            .depth
            .iter()
            .any(|&h| !h.is_finite() || h < self.depth_floor)
        {
            return bad("depth must be at least the depth floor everywhere");
        }
        Ok(())
    }
}

/// Scalar boundary data as a function of time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeSeries {
    Constant(f64),
    /// `mean + amplitude * sin(2 pi t / period + phase)`
    Sine {
        mean: f64,
        amplitude: f64,
        period: f64,
        phase: f64,
    },
}

impl TimeSeries {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Self::Constant(v) => v,
            Self::Sine {
                mean,
                amplitude,
                period,
                phase,
            } => mean + amplitude * (2.0 * std::f64::consts::PI * t / period + phase).sin(),
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Self::Constant(v) => v.is_finite(),
            Self::Sine {
                mean,
                amplitude,
                period,
                phase,
            } => [mean, amplitude, phase].iter().all(|v| v.is_finite())
                && period.is_finite()
                && period > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prescription {
    Velocity([TimeSeries; 2]),
    Elevation(TimeSeries),
    FreeSlip,
}

impl Prescription {
    pub fn kind(&self) -> BoundaryKind {
        match self {
            Self::Velocity(_) => BoundaryKind::VelocityDirichlet,
            Self::Elevation(_) => BoundaryKind::EtaDirichlet,
            Self::FreeSlip => BoundaryKind::FreeSlip,
        }
    }
}

/// One prescription per boundary tag.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundaryConditionSet {
    prescriptions: BTreeMap<String, Prescription>,
}

impl BoundaryConditionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, tag: &str, p: Prescription) -> Self {
        self.prescriptions.insert(tag.to_string(), p);
        self
    }

    pub fn insert(&mut self, tag: &str, p: Prescription) {
        self.prescriptions.insert(tag.to_string(), p);
    }

    pub fn get(&self, tag: &str) -> Option<&Prescription> {
        self.prescriptions.get(tag)
    }

    pub fn tags(&self) -> Vec<BoundaryTag> {
        self.prescriptions
            .iter()
            .map(|(name, p)| BoundaryTag {
                name: name.clone(),
                kind: p.kind(),
            })
            .collect()
    }

    /// Every mesh tag must have a prescription and vice versa.
    pub fn validate(&self, mesh: &Mesh) -> Result<(), SolverError> {
        let names = mesh.tag_names();
        for n in &names {
            if !self.prescriptions.contains_key(n) {
                return Err(SolverError::Invalid(format!(
                    "boundary tag `{n}` has no prescription"
                )));
            }
        }
        for (n, p) in &self.prescriptions {
            if !names.contains(n) {
                return Err(SolverError::Invalid(format!(
                    "prescription for unknown boundary tag `{n}`"
                )));
            }
            let ok = match p {
                Prescription::Velocity(v) => v.iter().all(TimeSeries::is_finite),
                Prescription::Elevation(e) => e.is_finite(),
                Prescription::FreeSlip => true,
            };
            if !ok {
                return Err(SolverError::Invalid(format!(
                    "boundary data for `{n}` is not finite"
                )));
            }
        }
        Ok(())
    }
}

/// Newton and regularization settings shared by steady and transient solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub newton_rel_tol: f64,
    pub newton_abs_tol: f64,
    pub newton_max_iter: usize,
    /// Multiplier on each Newton update; 1 is plain Newton.
    pub damping: f64,
    /// Halve the update until the residual norm decreases.
    pub line_search: bool,
    /// `eps` in `sqrt(u.u + eps^2)`, m/s.
    pub velocity_smoothing: f64,
    /// Maximum number of states kept in a transient trajectory.
    pub max_states: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            newton_rel_tol: 1e-10,
            newton_abs_tol: 1e-10,
            newton_max_iter: 30,
            damping: 1.0,
            line_search: false,
            velocity_smoothing: 1e-6,
            max_states: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeStepping {
    pub dt: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl TimeStepping {
    pub fn num_steps(&self) -> usize {
        ((self.t_end - self.t_start) / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn time(&self, n: usize) -> f64 {
        (self.t_start + n as f64 * self.dt).min(self.t_end)
    }
}

/// Velocity and elevation coefficients at one time level.
///
/// Layout: `[u_x (quadratic nodes), u_y (quadratic nodes), eta (vertices)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub values: Vec<f64>,
    pub n_velocity: usize,
    pub n_elevation: usize,
    pub time: f64,
}

impl FlowState {
    pub fn zeros(spaces: &Spaces, time: f64) -> Self {
        Self {
            values: vec![0.0; 2 * spaces.num_p2() + spaces.num_p1()],
            n_velocity: spaces.num_p2(),
            n_elevation: spaces.num_p1(),
            time,
        }
    }

    pub fn ux(&self) -> &[f64] {
        &self.values[..self.n_velocity]
    }

    pub fn uy(&self) -> &[f64] {
        &self.values[self.n_velocity..2 * self.n_velocity]
    }

    pub fn eta(&self) -> &[f64] {
        &self.values[2 * self.n_velocity..]
    }

    pub fn eta_mut(&mut self) -> &mut [f64] {
        &mut self.values[2 * self.n_velocity..]
    }

    pub fn velocity(&self, node: usize) -> [f64; 2] {
        [self.values[node], self.values[self.n_velocity + node]]
    }

    pub fn set_velocity(&mut self, node: usize, v: [f64; 2]) {
        self.values[node] = v[0];
        self.values[self.n_velocity + node] = v[1];
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Additional (farm) friction coefficient as a linear nodal field, applied
/// only on the cells flagged in `support` (every cell when `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionField {
    pub nodal: Vec<f64>,
    pub support: Option<Arc<Vec<bool>>>,
}

impl FrictionField {
    pub fn zero(n: usize) -> Self {
        Self {
            nodal: vec![0.0; n],
            support: None,
        }
    }

    pub fn active(&self, cell: usize) -> bool {
        self.support.as_ref().is_none_or(|s| s[cell])
    }

    /// Nodal values of `cell`, zero where the field is inactive.
    pub fn cell_values(&self, cell: usize, nodes: [usize; 3]) -> [f64; 3] {
        if self.active(cell) {
            nodes.map(|v| self.nodal[v])
        } else {
            [0.0; 3]
        }
    }
}

#[derive(Debug, Clone)]
struct BoundaryFace {
    p1: [usize; 2],
    p2: [usize; 3],
    normal: [f64; 2],
    length: f64,
    kind: BoundaryKind,
    tag: String,
}

const NLOC: usize = 15;

/// Per-quadrature-point data shared by residual, functional and adjoint
/// evaluations on one cell.
pub struct PointData {
    pub weight: f64,
    pub phi: [f64; 6],
    pub grad_phi: [[f64; 2]; 6],
    pub psi: [f64; 3],
    pub u: [f64; 2],
    pub grad_u: [[f64; 2]; 2],
    pub eta: f64,
    pub grad_eta: [f64; 2],
    pub depth: f64,
    pub total_depth: f64,
    pub speed: f64,
}

/// Assembled shallow water discretization on one mesh; reused for every
/// solve with the same mesh, physics and boundary conditions.
#[derive(Debug)]
pub struct ShallowWater {
    mesh: Arc<Mesh>,
    spaces: Spaces,
    physical: PhysicalParams,
    bcs: BoundaryConditionSet,
    params: SolverParams,
    faces: Vec<BoundaryFace>,
    /// Dirichlet dofs with the tag supplying their data.
    dirichlet: Vec<(usize, DirichletSource)>,
    is_dirichlet: Vec<bool>,
    pattern: Arc<SparsePattern>,
    cell_positions: Vec<[u32; NLOC * NLOC]>,
    face_positions: Vec<[u32; 16]>,
    diag_positions: Vec<u32>,
    solver: LuSolver,
    mass: SparseMatrix,
}

#[derive(Debug, Clone, Copy)]
enum DirichletSource {
    Velocity(TimeSeries),
    Elevation(TimeSeries),
}

impl DirichletSource {
    fn at(&self, t: f64) -> f64 {
        match self {
            Self::Velocity(s) | Self::Elevation(s) => s.at(t),
        }
    }
}

impl ShallowWater {
    pub fn new(
        mesh: Arc<Mesh>,
        physical: PhysicalParams,
        bcs: BoundaryConditionSet,
        params: SolverParams,
    ) -> Result<Self, SolverError> {
        physical.validate(&mesh)?;
        bcs.validate(&mesh)?;
        if !(params.velocity_smoothing > 0.0) {
            return Err(SolverError::Invalid("velocity smoothing must be positive".into()));
        }
        if !(params.damping > 0.0 && params.damping <= 1.0) {
            return Err(SolverError::Invalid("damping must lie in (0, 1]".into()));
        }
        let spaces = Spaces::new(&mesh);
        let (n2, n1) = (spaces.num_p2(), spaces.num_p1());
        let ndof = 2 * n2 + n1;

        let mut owner = std::collections::HashMap::new();
        for tri in mesh.triangles() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                owner.insert((a.min(b), a.max(b)), tri[(k + 2) % 3]);
            }
        }
        let verts = mesh.vertices();
        let mut faces = Vec::new();
        let mut dirichlet_map: BTreeMap<usize, DirichletSource> = BTreeMap::new();
        for edge in mesh.boundary_edges() {
            let [a, b] = edge.vertices;
            let m = spaces.edge_node(a, b).expect("boundary edge has a midpoint node");
            let (pa, pb) = (verts[a], verts[b]);
            let length = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            let mut normal = [(pb[1] - pa[1]) / length, -(pb[0] - pa[0]) / length];
            let opp = verts[owner[&(a.min(b), a.max(b))]];
            if normal[0] * (opp[0] - pa[0]) + normal[1] * (opp[1] - pa[1]) > 0.0 {
                normal = [-normal[0], -normal[1]];
            }
            let prescription = bcs.get(&edge.tag).expect("validated");
            match prescription {
                Prescription::Velocity(series) => {
                    for node in [a, b, m] {
                        for (c, s) in series.iter().enumerate() {
                            dirichlet_map.insert(c * n2 + node, DirichletSource::Velocity(*s));
                        }
                    }
                }
                Prescription::Elevation(series) => {
                    for v in [a, b] {
                        dirichlet_map.insert(2 * n2 + v, DirichletSource::Elevation(*series));
                    }
                }
                Prescription::FreeSlip => {}
            }
            faces.push(BoundaryFace {
                p1: [a, b],
                p2: [a, b, m],
                normal,
                length,
                kind: prescription.kind(),
                tag: edge.tag.clone(),
            });
        }
        let dirichlet: Vec<_> = dirichlet_map.into_iter().collect();
        let mut is_dirichlet = vec![false; ndof];
        for (d, _) in &dirichlet {
            is_dirichlet[*d] = true;
        }

        let cell_dofs = |t: usize| -> [usize; NLOC] {
            let c = spaces.p2_cell(t);
            let mut d = [0; NLOC];
            for i in 0..6 {
                d[i] = c[i];
                d[6 + i] = n2 + c[i];
            }
            for k in 0..3 {
                d[12 + k] = 2 * n2 + c[k];
            }
            d
        };
        let pattern = Arc::new(SparsePattern::from_entries(
            ndof,
            (0..spaces.num_cells()).flat_map(|t| {
                let d = cell_dofs(t);
                (0..NLOC).flat_map(move |i| (0..NLOC).map(move |j| (d[i], d[j])))
            }),
        ));
        if pattern.nnz() > u32::MAX as usize {
            return Err(SolverError::Invalid("system too large".into()));
        }
        let pos = |r: usize, c: usize| pattern.position(r, c).expect("entry in pattern") as u32;
        let cell_positions = (0..spaces.num_cells())
            .into_par_iter()
            .map(|t| {
                let d = cell_dofs(t);
                let mut p = [0u32; NLOC * NLOC];
                for i in 0..NLOC {
                    for j in 0..NLOC {
                        p[i * NLOC + j] = pos(d[i], d[j]);
                    }
                }
                p
            })
            .collect();
        let face_positions = faces
            .iter()
            .map(|f| {
                let mut p = [0u32; 16];
                for (r, &row) in f.p1.iter().enumerate() {
                    let row = 2 * n2 + row;
                    let cols = [
                        f.p2[0],
                        f.p2[1],
                        f.p2[2],
                        n2 + f.p2[0],
                        n2 + f.p2[1],
                        n2 + f.p2[2],
                        2 * n2 + f.p1[0],
                        2 * n2 + f.p1[1],
                    ];
                    for (c, &col) in cols.iter().enumerate() {
                        p[r * 8 + c] = pos(row, col);
                    }
                }
                p
            })
            .collect();
        let diag_positions = (0..ndof).map(|i| pos(i, i)).collect();
        let solver = LuSolver::new(pattern.clone()).map_err(|source| SolverError::Linear {
            step: None,
            source,
        })?;

        let mut sw = Self {
            mesh,
            spaces,
            physical,
            bcs,
            params,
            faces,
            dirichlet,
            is_dirichlet,
            mass: SparseMatrix::zeros(pattern.clone()),
            pattern,
            cell_positions,
            face_positions,
            diag_positions,
            solver,
        };
        sw.mass = sw.assemble_mass();
        Ok(sw)
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn spaces(&self) -> &Spaces {
        &self.spaces
    }

    pub fn physical(&self) -> &PhysicalParams {
        &self.physical
    }

    pub fn boundary_conditions(&self) -> &BoundaryConditionSet {
        &self.bcs
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    pub fn set_params(&mut self, params: SolverParams) {
        self.params = params;
    }

    pub fn num_dofs(&self) -> usize {
        self.pattern.dim()
    }

    pub fn is_dirichlet(&self, dof: usize) -> bool {
        self.is_dirichlet[dof]
    }

    pub fn zero_state(&self, time: f64) -> FlowState {
        FlowState::zeros(&self.spaces, time)
    }

    fn n2(&self) -> usize {
        self.spaces.num_p2()
    }

    /// Writes the Dirichlet data at time `t` into `state`.
    pub fn apply_dirichlet(&self, state: &mut FlowState, t: f64) {
        for (dof, src) in &self.dirichlet {
            state.values[*dof] = src.at(t);
        }
    }

    /// Zeroes the Dirichlet entries of a vector in state layout.
    pub fn zero_dirichlet(&self, v: &mut [f64]) {
        for (dof, _) in &self.dirichlet {
            v[*dof] = 0.0;
        }
    }

    /// Evaluates fields and basis functions at every quadrature point of
    /// `cell` and passes them to `f`.
    pub fn for_each_point(&self, cell: usize, state: &FlowState, mut f: impl FnMut(&PointData)) {
        let n2 = self.n2();
        let nodes = self.spaces.p2_cell(cell);
        let p1 = self.spaces.p1_cell(cell);
        let geo = self.spaces.geometry(cell);
        let x = &state.values;
        let fixed = self.physical.depth_mode == DepthMode::Fixed;
        let eps2 = self.params.velocity_smoothing.powi(2);
        for (l, w) in TRIANGLE_RULE {
            let phi = p2_values(l);
            let grad_phi = p2_gradients(l, &geo.grad_lambda);
            let mut u = [0.0; 2];
            let mut grad_u = [[0.0; 2]; 2];
            for i in 0..6 {
                for c in 0..2 {
                    let v = x[c * n2 + nodes[i]];
                    u[c] += v * phi[i];
                    grad_u[c][0] += v * grad_phi[i][0];
                    grad_u[c][1] += v * grad_phi[i][1];
                }
            }
            let mut eta = 0.0;
            let mut grad_eta = [0.0; 2];
            let mut depth = 0.0;
            for k in 0..3 {
                let e = x[2 * n2 + p1[k]];
                eta += e * l[k];
                grad_eta[0] += e * geo.grad_lambda[k][0];
                grad_eta[1] += e * geo.grad_lambda[k][1];
                depth += self.physical.depth[p1[k]] * l[k];
            }
            let total_depth = if fixed { depth } else { depth + eta };
            let speed = (u[0] * u[0] + u[1] * u[1] + eps2).sqrt();
            f(&PointData {
                weight: w * geo.area,
                phi,
                grad_phi,
                psi: l,
                u,
                grad_u,
                eta,
                grad_eta,
                depth,
                total_depth,
                speed,
            });
        }
    }

    /// Local residual and (optionally) Jacobian of one cell.
    fn cell_contribution(
        &self,
        cell: usize,
        state: &FlowState,
        previous: Option<(&FlowState, f64)>,
        friction: &FrictionField,
        res: &mut [f64; NLOC],
        jac: Option<&mut [f64; NLOC * NLOC]>,
    ) {
        let n2 = self.n2();
        let nodes = self.spaces.p2_cell(cell);
        let p1 = self.spaces.p1_cell(cell);
        let geo = *self.spaces.geometry(cell);
        let ct = friction.cell_values(cell, p1);
        let g = self.physical.gravity;
        let nu = self.physical.viscosity;
        let cb = self.physical.background_friction;
        let fixed = self.physical.depth_mode == DepthMode::Fixed;
        let (inv_dt, prev) = match previous {
            Some((p, dt)) => (1.0 / dt, Some(p)),
            None => (0.0, None),
        };
        res.fill(0.0);
        let mut jac = jac;
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
        }
        self.for_each_point(cell, state, |q| {
            let w = q.weight;
            let c = cb + ct[0] * q.psi[0] + ct[1] * q.psi[1] + ct[2] * q.psi[2];
            let hh = q.total_depth;
            let f = c / hh;
            let s = q.speed;
            let (mut du, mut deta) = ([0.0; 2], 0.0);
            if let Some(p) = prev {
                let x = &p.values;
                let mut uo = [0.0; 2];
                for i in 0..6 {
                    uo[0] += x[nodes[i]] * q.phi[i];
                    uo[1] += x[n2 + nodes[i]] * q.phi[i];
                }
                let mut eo = 0.0;
                for k in 0..3 {
                    eo += x[2 * n2 + p1[k]] * q.psi[k];
                }
                du = [(q.u[0] - uo[0]) * inv_dt, (q.u[1] - uo[1]) * inv_dt];
                deta = (q.eta - eo) * inv_dt;
            }
            let adv = [
                q.u[0] * q.grad_u[0][0] + q.u[1] * q.grad_u[0][1],
                q.u[0] * q.grad_u[1][0] + q.u[1] * q.grad_u[1][1],
            ];
            for i in 0..6 {
                for cc in 0..2 {
                    let visc = nu
                        * (q.grad_u[cc][0] * q.grad_phi[i][0] + q.grad_u[cc][1] * q.grad_phi[i][1]);
                    res[6 * cc + i] += w
                        * ((du[cc] + adv[cc] + g * q.grad_eta[cc] + f * s * q.u[cc]) * q.phi[i]
                            + visc);
                }
            }
            for k in 0..3 {
                let gpsi = geo.grad_lambda[k];
                res[12 + k] += w
                    * (deta * q.psi[k] - hh * (q.u[0] * gpsi[0] + q.u[1] * gpsi[1]));
            }

            let Some(jm) = jac.as_deref_mut() else {
                return;
            };
            // d(f s u_c)/d u_d = f (u_c u_d / s + s delta_cd)
            let fr = [
                [f * (q.u[0] * q.u[0] / s + s), f * q.u[0] * q.u[1] / s],
                [f * q.u[1] * q.u[0] / s, f * (q.u[1] * q.u[1] / s + s)],
            ];
            let fric_eta = if fixed { 0.0 } else { -c / (hh * hh) * s };
            for i in 0..6 {
                let wpi = w * q.phi[i];
                for j in 0..6 {
                    let pj = q.phi[j];
                    let u_grad_pj = q.u[0] * q.grad_phi[j][0] + q.u[1] * q.grad_phi[j][1];
                    let visc = nu
                        * (q.grad_phi[j][0] * q.grad_phi[i][0]
                            + q.grad_phi[j][1] * q.grad_phi[i][1]);
                    let diag = wpi * (inv_dt * pj + u_grad_pj) + w * visc;
                    for cc in 0..2 {
                        for d in 0..2 {
                            let mut v = wpi * pj * (q.grad_u[cc][d] + fr[cc][d]);
                            if cc == d {
                                v += diag;
                            }
                            jm[(6 * cc + i) * NLOC + 6 * d + j] += v;
                        }
                    }
                }
                for k in 0..3 {
                    for cc in 0..2 {
                        jm[(6 * cc + i) * NLOC + 12 + k] += wpi
                            * (g * geo.grad_lambda[k][cc] + fric_eta * q.psi[k] * q.u[cc]);
                    }
                }
            }
            for k in 0..3 {
                let gpsi = geo.grad_lambda[k];
                let u_gpsi = q.u[0] * gpsi[0] + q.u[1] * gpsi[1];
                for j in 0..6 {
                    for d in 0..2 {
                        jm[(12 + k) * NLOC + 6 * d + j] -= w * hh * q.phi[j] * gpsi[d];
                    }
                }
                for m in 0..3 {
                    let mut v = w * inv_dt * q.psi[m] * q.psi[k];
                    if !fixed {
                        v -= w * q.psi[m] * u_gpsi;
                    }
                    jm[(12 + k) * NLOC + 12 + m] += v;
                }
            }
        });
    }

    /// Boundary flux term `<H u.n, Phi>` on one face: residual for the two
    /// elevation rows and the 2 x 8 Jacobian block.
    fn face_contribution(
        &self,
        face: &BoundaryFace,
        state: &FlowState,
        res: &mut [f64; 2],
        jac: &mut [f64; 16],
    ) {
        let n2 = self.n2();
        let x = &state.values;
        let fixed = self.physical.depth_mode == DepthMode::Fixed;
        res.fill(0.0);
        jac.fill(0.0);
        for (s, w) in LINE_RULE {
            let w = w * face.length;
            let psi = [1.0 - s, s];
            let phi = [(1.0 - s) * (1.0 - 2.0 * s), s * (2.0 * s - 1.0), 4.0 * s * (1.0 - s)];
            let mut u = [0.0; 2];
            for i in 0..3 {
                u[0] += x[face.p2[i]] * phi[i];
                u[1] += x[n2 + face.p2[i]] * phi[i];
            }
            let mut eta = 0.0;
            let mut h = 0.0;
            for k in 0..2 {
                eta += x[2 * n2 + face.p1[k]] * psi[k];
                h += self.physical.depth[face.p1[k]] * psi[k];
            }
            let hh = if fixed { h } else { h + eta };
            let un = u[0] * face.normal[0] + u[1] * face.normal[1];
            for r in 0..2 {
                res[r] += w * hh * un * psi[r];
                for j in 0..3 {
                    jac[r * 8 + j] += w * hh * phi[j] * face.normal[0] * psi[r];
                    jac[r * 8 + 3 + j] += w * hh * phi[j] * face.normal[1] * psi[r];
                }
                if !fixed {
                    for m in 0..2 {
                        jac[r * 8 + 6 + m] += w * psi[m] * un * psi[r];
                    }
                }
            }
        }
    }

    /// Residual of the steady (`previous = None`) or backward Euler system and
    /// optionally its Jacobian with respect to `state`.
    pub fn assemble(
        &self,
        state: &FlowState,
        previous: Option<(&FlowState, f64)>,
        friction: &FrictionField,
        with_jacobian: bool,
    ) -> (Vec<f64>, Option<SparseMatrix>) {
        let ndof = self.num_dofs();
        let mut residual = vec![0.0; ndof];
        let mut jac = with_jacobian.then(|| SparseMatrix::zeros(self.pattern.clone()));
        let ncell = self.spaces.num_cells();
        const BATCH: usize = 4096;
        let mut locals: Vec<([f64; NLOC], [f64; NLOC * NLOC])> = Vec::new();
        for start in (0..ncell).step_by(BATCH) {
            let end = (start + BATCH).min(ncell);
            (start..end)
                .into_par_iter()
                .map(|t| {
                    let mut r = [0.0; NLOC];
                    let mut j = [0.0; NLOC * NLOC];
                    self.cell_contribution(
                        t,
                        state,
                        previous,
                        friction,
                        &mut r,
                        with_jacobian.then_some(&mut j),
                    );
                    (r, j)
                })
                .collect_into_vec(&mut locals);
            for (offset, (r, j)) in locals.iter().enumerate() {
                let t = start + offset;
                let dofs = self.cell_dofs(t);
                for i in 0..NLOC {
                    if self.is_dirichlet[dofs[i]] {
                        continue;
                    }
                    residual[dofs[i]] += r[i];
                    if let Some(m) = jac.as_mut() {
                        let vals = m.values_mut();
                        let pos = &self.cell_positions[t];
                        for k in 0..NLOC {
                            vals[pos[i * NLOC + k] as usize] += j[i * NLOC + k];
                        }
                    }
                }
            }
        }
        let n2 = self.n2();
        let mut fr = [0.0; 2];
        let mut fj = [0.0; 16];
        for (face, pos) in self.faces.iter().zip(&self.face_positions) {
            if face.kind == BoundaryKind::FreeSlip {
                continue;
            }
            self.face_contribution(face, state, &mut fr, &mut fj);
            for r in 0..2 {
                let row = 2 * n2 + face.p1[r];
                if self.is_dirichlet[row] {
                    continue;
                }
                residual[row] += fr[r];
                if let Some(m) = jac.as_mut() {
                    for c in 0..8 {
                        m.values_mut()[pos[r * 8 + c] as usize] += fj[r * 8 + c];
                    }
                }
            }
        }
        let t = state.time;
        for (dof, src) in &self.dirichlet {
            residual[*dof] = state.values[*dof] - src.at(t);
            if let Some(m) = jac.as_mut() {
                m.values_mut()[self.diag_positions[*dof] as usize] = 1.0;
            }
        }
        (residual, jac)
    }

    fn cell_dofs(&self, t: usize) -> [usize; NLOC] {
        let n2 = self.n2();
        let c = self.spaces.p2_cell(t);
        let mut d = [0; NLOC];
        for i in 0..6 {
            d[i] = c[i];
            d[6 + i] = n2 + c[i];
        }
        for k in 0..3 {
            d[12 + k] = 2 * n2 + c[k];
        }
        d
    }

    /// Block mass matrix with Dirichlet rows zeroed; `-mass / dt` is the
    /// derivative of a backward Euler residual with respect to the previous
    /// state.
    fn assemble_mass(&self) -> SparseMatrix {
        let mut m = SparseMatrix::zeros(self.pattern.clone());
        for t in 0..self.spaces.num_cells() {
            let geo = self.spaces.geometry(t);
            let dofs = self.cell_dofs(t);
            let pos = &self.cell_positions[t];
            let mut local = [0.0; NLOC * NLOC];
            for (l, w) in TRIANGLE_RULE {
                let w = w * geo.area;
                let phi = p2_values(l);
                for i in 0..6 {
                    for j in 0..6 {
                        let v = w * phi[i] * phi[j];
                        local[i * NLOC + j] += v;
                        local[(6 + i) * NLOC + 6 + j] += v;
                    }
                }
                for k in 0..3 {
                    for m in 0..3 {
                        local[(12 + k) * NLOC + 12 + m] += w * l[k] * l[m];
                    }
                }
            }
            for i in 0..NLOC {
                if self.is_dirichlet[dofs[i]] {
                    continue;
                }
                for k in 0..NLOC {
                    m.values_mut()[pos[i * NLOC + k] as usize] += local[i * NLOC + k];
                }
            }
        }
        m
    }

    /// `(d R^{n+1} / d x^n)^T lambda` for a backward Euler step of size `dt`.
    pub fn previous_state_transpose_product(&self, lambda: &[f64], dt: f64) -> Vec<f64> {
        self.mass
            .mul_transpose_vec(lambda)
            .into_iter()
            .map(|v| -v / dt)
            .collect()
    }

    pub fn factorize(&self, jac: &SparseMatrix) -> Result<Factorization, SolverError> {
        self.solver
            .factorize(jac)
            .map_err(|source| SolverError::Linear { step: None, source })
    }

    /// Newton iteration from `state` for the steady or backward Euler system.
    /// Returns the number of iterations taken.
    pub fn newton(
        &self,
        state: &mut FlowState,
        previous: Option<(&FlowState, f64)>,
        friction: &FrictionField,
    ) -> Result<usize, SolverError> {
        self.newton_keep_lu(state, previous, friction).map(|(it, _)| it)
    }

    /// As [`Self::newton`], also returning the factorization of the last
    /// Jacobian assembled (at the previous iterate), if any.
    fn newton_keep_lu(
        &self,
        state: &mut FlowState,
        previous: Option<(&FlowState, f64)>,
        friction: &FrictionField,
    ) -> Result<(usize, Option<Factorization>), SolverError> {
        let t = state.time;
        self.apply_dirichlet(state, t);
        let p = self.params;
        let (mut r, _) = self.assemble(state, previous, friction, false);
        let r0 = norm(&r);
        let tol = (p.newton_rel_tol * r0).max(p.newton_abs_tol);
        let mut rnorm = r0;
        let mut last_lu = None;
        let mut iterations = 0;
        while iterations <= p.newton_max_iter {
            // Give up early on a blow-up rather than iterating to the cap.
            if !rnorm.is_finite() || rnorm > 1e4 * r0.max(p.newton_abs_tol) {
                break;
            }
            if rnorm <= tol {
                return Ok((iterations, last_lu));
            }
            if iterations == p.newton_max_iter {
                break;
            }
            let (_, jac) = self.assemble(state, previous, friction, true);
            // Release the previous factors before building new ones.
            drop(last_lu.take());
            let lu = self.factorize(&jac.expect("requested"))?;
            lu.solve_in_place(&mut r)
                .map_err(|source| SolverError::Linear { step: None, source })?;
            last_lu = Some(lu);
            iterations += 1;
            let magnitude = state.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let step = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let dx = std::mem::take(&mut r);
            let base = state.values.clone();
            let mut alpha = p.damping;
            let mut halvings = 0;
            loop {
                for ((x, x0), d) in state.values.iter_mut().zip(&base).zip(&dx) {
                    *x = x0 - alpha * d;
                }
                (r, _) = self.assemble(state, previous, friction, false);
                let trial = norm(&r);
                let decreased = trial.is_finite() && trial < rnorm;
                if !p.line_search || decreased || halvings == 20 {
                    rnorm = trial;
                    break;
                }
                alpha *= 0.5;
                halvings += 1;
            }
            // A full Newton update at rounding level means the residual has
            // stagnated at its floating point floor.
            if alpha == 1.0 && step <= 1e-14 * magnitude.max(1.0) && rnorm.is_finite() {
                return Ok((iterations, last_lu));
            }
        }
        Err(SolverError::Divergence {
            step: None,
            iterations,
            residual: rnorm,
        })
    }

    /// Steady solve. Starts from `guess` when given, otherwise from zero with
    /// the Dirichlet data lifted in.
    ///
    /// If Newton fails from that start, the solve falls back to
    /// pseudo-transient continuation: backward Euler steps whose size grows
    /// as the steady residual falls, finished by plain Newton.
    pub fn solve_steady(
        &self,
        friction: &FrictionField,
        guess: Option<&FlowState>,
    ) -> Result<FlowState, SolverError> {
        self.solve_steady_with_lu(friction, guess).map(|(s, _)| s)
    }

    /// Steady solve that also returns the last Newton factorization, which
    /// is a close approximation of the Jacobian at the solution.
    pub fn solve_steady_with_lu(
        &self,
        friction: &FrictionField,
        guess: Option<&FlowState>,
    ) -> Result<(FlowState, Option<Factorization>), SolverError> {
        self.check_friction(friction)?;
        let mut state = match guess {
            Some(g) => {
                self.check_state(g)?;
                g.clone()
            }
            None => self.zero_state(0.0),
        };
        let start = state.clone();
        let first = match self.newton_keep_lu(&mut state, None, friction) {
            Ok((_, lu)) => return Ok((state, lu)),
            Err(e @ (SolverError::Divergence { .. } | SolverError::Linear { .. })) => e,
            Err(e) => return Err(e),
        };
        self.pseudo_transient(start, friction).map_err(|_| first)
    }

    fn pseudo_transient(
        &self,
        mut state: FlowState,
        friction: &FrictionField,
    ) -> Result<(FlowState, Option<Factorization>), SolverError> {
        let t = state.time;
        self.apply_dirichlet(&mut state, t);
        let steady_norm =
            |s: &FlowState| norm(&self.assemble(s, None, friction, false).0);
        let mut rnorm = steady_norm(&state);
        // Start from the advective time scale of one typical cell.
        let speed = state.values[..2 * state.n_velocity]
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
            .max(1e-3);
        let cell = (self.mesh.total_area() / self.mesh.num_triangles() as f64).sqrt();
        let mut dt = cell / speed;
        let r_start = rnorm;
        for _ in 0..200 {
            if rnorm < 1e-4 * r_start || dt > 1e7 {
                let mut trial = state.clone();
                if let Ok((_, lu)) = self.newton_keep_lu(&mut trial, None, friction) {
                    return Ok((trial, lu));
                }
            }
            let mut next = state.clone();
            match self.newton(&mut next, Some((&state, dt)), friction) {
                Ok(_) => {
                    let r = steady_norm(&next);
                    let growth = if r > 0.0 { (rnorm / r).clamp(0.5, 4.0) } else { 4.0 };
                    dt *= growth;
                    rnorm = r;
                    state = next;
                }
                Err(SolverError::Divergence { .. } | SolverError::Linear { .. }) => dt *= 0.25,
                Err(e) => return Err(e),
            }
            if !(dt > 1e-6) {
                break;
            }
        }
        Err(SolverError::Divergence {
            step: None,
            iterations: self.params.newton_max_iter,
            residual: rnorm,
        })
    }

    /// Backward Euler integration from `initial`; the returned trajectory
    /// holds every time level including the initial one.
    pub fn solve_transient(
        &self,
        friction: &FrictionField,
        stepping: &TimeStepping,
        initial: &FlowState,
    ) -> Result<Vec<FlowState>, SolverError> {
        self.check_friction(friction)?;
        self.check_state(initial)?;
        if !(stepping.dt > 0.0) || !(stepping.t_end > stepping.t_start) {
            return Err(SolverError::Invalid(
                "time stepping needs dt > 0 and t_end > t_start".into(),
            ));
        }
        let steps = stepping.num_steps();
        if steps + 1 > self.params.max_states {
            return Err(SolverError::TrajectoryTooLong {
                needed: steps + 1,
                cap: self.params.max_states,
            });
        }
        let mut traj = Vec::with_capacity(steps + 1);
        let mut first = initial.clone();
        first.time = stepping.t_start;
        traj.push(first);
        for n in 1..=steps {
            let prev = traj.last().expect("nonempty");
            let dt = stepping.time(n) - prev.time;
            let mut next = prev.clone();
            next.time = stepping.time(n);
            self.newton(&mut next, Some((prev, dt)), friction)
                .map_err(|e| e.at_step(n))?;
            traj.push(next);
        }
        Ok(traj)
    }

    fn check_friction(&self, friction: &FrictionField) -> Result<(), SolverError> {
        if friction.nodal.len() != self.spaces.num_p1() {
            return Err(SolverError::Invalid("friction field length mismatch".into()));
        }
        if friction
            .support
            .as_ref()
            .is_some_and(|s| s.len() != self.spaces.num_cells())
        {
            return Err(SolverError::Invalid("friction support length mismatch".into()));
        }
        if friction.nodal.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(SolverError::Invalid(
                "friction must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn check_state(&self, state: &FlowState) -> Result<(), SolverError> {
        if state.values.len() != self.num_dofs()
            || state.n_velocity != self.spaces.num_p2()
            || state.n_elevation != self.spaces.num_p1()
        {
            return Err(SolverError::Invalid("state does not match the mesh".into()));
        }
        if !state.is_finite() {
            return Err(SolverError::Invalid("state contains non-finite values".into()));
        }
        Ok(())
    }

    /// `-(d R / d c_t)^T lambda` per vertex: the sensitivity of
    /// `-lambda . R` to the nodal friction coefficients.
    pub fn friction_adjoint_action(
        &self,
        state: &FlowState,
        lambda: &[f64],
        friction: &FrictionField,
    ) -> Vec<f64> {
        let n2 = self.n2();
        let mut out = vec![0.0; self.spaces.num_p1()];
        for t in 0..self.spaces.num_cells() {
            if !friction.active(t) {
                continue;
            }
            let nodes = self.spaces.p2_cell(t);
            let p1 = self.spaces.p1_cell(t);
            // Dirichlet rows of R do not depend on the friction.
            let lam = |c: usize, i: usize| {
                let d = c * n2 + nodes[i];
                if self.is_dirichlet[d] {
                    0.0
                } else {
                    lambda[d]
                }
            };
            let mut local = [0.0; 3];
            self.for_each_point(t, state, |q| {
                let mut lu = [0.0; 2];
                for i in 0..6 {
                    lu[0] += lam(0, i) * q.phi[i];
                    lu[1] += lam(1, i) * q.phi[i];
                }
                let v = q.weight * q.speed * (q.u[0] * lu[0] + q.u[1] * lu[1]) / q.total_depth;
                for k in 0..3 {
                    local[k] -= v * q.psi[k];
                }
            });
            for k in 0..3 {
                out[p1[k]] += local[k];
            }
        }
        out
    }

    /// Interpolates `state`, given on the mesh of `source`, onto this
    /// solver's spaces and applies this solver's Dirichlet data. Nodes
    /// outside the source mesh get zero.
    pub fn interpolate_from(&self, source: &ShallowWater, state: &FlowState) -> FlowState {
        let locator = source.mesh.locator();
        let mut out = self.zero_state(state.time);
        let n2 = out.n_velocity;
        for (node, p) in self.spaces.p2_coords().iter().enumerate() {
            if let Some((t, l)) = locator.locate(*p) {
                let phi = p2_values(l);
                let nodes = source.spaces.p2_cell(t);
                let mut u = [0.0; 2];
                for i in 0..6 {
                    let v = state.velocity(nodes[i]);
                    u[0] += phi[i] * v[0];
                    u[1] += phi[i] * v[1];
                }
                out.values[node] = u[0];
                out.values[n2 + node] = u[1];
            }
        }
        let eta = state.eta();
        for (v, p) in self.mesh.vertices().iter().enumerate() {
            if let Some((t, l)) = locator.locate(*p) {
                let c = source.spaces.p1_cell(t);
                out.eta_mut()[v] = l[0] * eta[c[0]] + l[1] * eta[c[1]] + l[2] * eta[c[2]];
            }
        }
        let t = out.time;
        self.apply_dirichlet(&mut out, t);
        out
    }

    /// Net volume flux `H u.n` through each boundary tag, outward positive.
    ///
    /// Velocity-Dirichlet tags are integrated directly. Free-slip tags carry
    /// no flux in the weak form. Elevation-Dirichlet tags use the discretely
    /// consistent flux recovered from the continuity rows that the Dirichlet
    /// condition removed, so the total equals the sum of the free continuity
    /// residuals.
    pub fn boundary_fluxes(&self, state: &FlowState, friction: &FrictionField) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> =
            self.mesh.tag_names().into_iter().map(|t| (t, 0.0)).collect();
        let mut fr = [0.0; 2];
        let mut fj = [0.0; 16];
        for face in &self.faces {
            if face.kind == BoundaryKind::VelocityDirichlet {
                self.face_contribution(face, state, &mut fr, &mut fj);
                *out.get_mut(&face.tag).expect("tag") += fr[0] + fr[1];
            }
        }
        // Continuity residual without Dirichlet replacement, restricted to
        // elevation-Dirichlet vertices.
        let mut eta_tag: BTreeMap<usize, &str> = BTreeMap::new();
        for face in &self.faces {
            if face.kind == BoundaryKind::EtaDirichlet {
                for v in face.p1 {
                    eta_tag.entry(v).or_insert(face.tag.as_str());
                }
            }
        }
        if eta_tag.is_empty() {
            return out;
        }
        let mut raw = vec![0.0; self.spaces.num_p1()];
        let mut r = [0.0; NLOC];
        for t in 0..self.spaces.num_cells() {
            self.cell_contribution(t, state, None, friction, &mut r, None);
            for (k, v) in self.spaces.p1_cell(t).into_iter().enumerate() {
                raw[v] += r[12 + k];
            }
        }
        for face in &self.faces {
            if face.kind == BoundaryKind::VelocityDirichlet {
                self.face_contribution(face, state, &mut fr, &mut fj);
                for k in 0..2 {
                    raw[face.p1[k]] += fr[k];
                }
            }
        }
        for (v, tag) in eta_tag {
            *out.get_mut(tag).expect("tag") -= raw[v];
        }
        out
    }

    /// Per-vertex table `x y u_x u_y eta`.
    pub fn field_table(&self, state: &FlowState) -> String {
        let mut s = String::from("# x y u_x u_y eta\n");
        for (v, p) in self.mesh.vertices().iter().enumerate() {
            let u = state.velocity(v);
            let _ = writeln!(s, "{} {} {} {} {}", p[0], p[1], u[0], u[1], state.eta()[v]);
        }
        s
    }

    /// Legacy VTK unstructured grid with vertex velocity and elevation.
    pub fn field_vtk(&self, state: &FlowState) -> String {
        let mesh = &self.mesh;
        let mut s = String::from("# vtk DataFile Version 3.0\nshallow water state\nASCII\nDATASET UNSTRUCTURED_GRID\n");
        let _ = writeln!(s, "POINTS {} double", mesh.num_vertices());
        for p in mesh.vertices() {
            let _ = writeln!(s, "{} {} 0", p[0], p[1]);
        }
        let nt = mesh.num_triangles();
        let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
        for t in mesh.triangles() {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "CELL_TYPES {nt}");
        for _ in 0..nt {
            s.push_str("5\n");
        }
        let _ = writeln!(s, "POINT_DATA {}", mesh.num_vertices());
        s.push_str("VECTORS velocity double\n");
        for v in 0..mesh.num_vertices() {
            let u = state.velocity(v);
            let _ = writeln!(s, "{} {} 0", u[0], u[1]);
        }
        s.push_str("SCALARS eta double 1\nLOOKUP_TABLE default\n");
        for e in state.eta() {
            let _ = writeln!(s, "{e}");
        }
        s
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One-shot steady solve on `mesh`.
pub fn solve_steady(
    mesh: Arc<Mesh>,
    physical: PhysicalParams,
    bcs: BoundaryConditionSet,
    friction: &FrictionField,
) -> Result<FlowState, SolverError> {
    ShallowWater::new(mesh, physical, bcs, SolverParams::default())?.solve_steady(friction, None)
}
