//! Turbine density control, its friction representation and the power, cost
//! and profit functionals.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::fem::Spaces;
use crate::mesh::Mesh;
use crate::shallow_water::{FlowState, FrictionField, ShallowWater};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FarmError {
    #[error("{0}")]
    Invalid(String),
    #[error("density file line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, FarmError> {
    Err(FarmError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurbineSpec {
    pub thrust_coefficient: f64,
    /// Rotor swept area, m^2.
    pub cross_section: f64,
    pub min_distance: f64,
}

impl TurbineSpec {
    pub fn validate(&self) -> Result<(), FarmError> {
        if !(self.thrust_coefficient > 0.0 && self.thrust_coefficient < 1.0) {
            return invalid("thrust_coefficient must lie in (0, 1)");
        }
        if !(self.cross_section > 0.0 && self.cross_section.is_finite()) {
            return invalid("cross_section must be positive");
        }
        if !(self.min_distance > 0.0 && self.min_distance.is_finite()) {
            return invalid("min_distance must be positive");
        }
        Ok(())
    }

    /// Rotor diameter implied by the swept area.
    pub fn diameter(&self) -> f64 {
        2.0 * (self.cross_section / std::f64::consts::PI).sqrt()
    }

    /// Friction per unit density, `C_T A_T / 2`.
    pub fn friction_per_density(&self) -> f64 {
        0.5 * self.thrust_coefficient * self.cross_section
    }

    /// Densest admissible packing, `1 / D_min^2`.
    pub fn max_density(&self) -> f64 {
        1.0 / (self.min_distance * self.min_distance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EconomicParams {
    /// Break-even power per turbine in W; derived from the other fields when
    /// `None`.
    pub cost_coefficient: Option<f64>,
    pub profit_margin: f64,
    pub peak_speed: f64,
    /// 0.42 for a sinusoidal tide, 1.0 for constant flow.
    pub tidal_factor: f64,
}

impl EconomicParams {
    pub fn validate(&self) -> Result<(), FarmError> {
        if let Some(c) = self.cost_coefficient {
            if !(c >= 0.0 && c.is_finite()) {
                return invalid("cost_coefficient must be non-negative");
            }
        }
        if !(self.profit_margin >= 0.0 && self.profit_margin < 1.0) {
            return invalid("profit_margin must lie in [0, 1)");
        }
        if !(self.peak_speed > 0.0 && self.peak_speed.is_finite()) {
            return invalid("peak_speed must be positive");
        }
        if self.tidal_factor != 0.42 && self.tidal_factor != 1.0 {
            return invalid("tidal_factor must be 0.42 or 1.0");
        }
        Ok(())
    }
}

/// Break-even power per turbine, W:
/// `(factor / 2) C_T A_T (1 - m) rho u_peak^3` unless given directly.
pub fn cost_coefficient(spec: &TurbineSpec, econ: &EconomicParams, density: f64) -> f64 {
    econ.cost_coefficient.unwrap_or_else(|| {
        0.5 * econ.tidal_factor
            * spec.thrust_coefficient
            * spec.cross_section
            * (1.0 - econ.profit_margin)
            * density
            * econ.peak_speed.powi(3)
    })
}

/// Cells where turbines may be installed and the per-vertex density bound.
#[derive(Debug, Clone, PartialEq)]
pub struct FarmDomain {
    /// Farm cells not excluded by a mask.
    pub cells: Arc<Vec<bool>>,
    pub upper: Vec<f64>,
}

/// Exclusion rules applied inside the farm regions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskRules {
    /// Region labels where installation is forbidden.
    pub excluded_regions: Vec<i32>,
    /// Cells whose bathymetry slope `|grad h|` reaches this value are masked.
    pub max_slope: Option<f64>,
}

impl FarmDomain {
    /// Builds the bound from region labels: `max_density` on vertices of
    /// farm cells, zero elsewhere and on every vertex touching a masked cell.
    pub fn from_regions(
        mesh: &Mesh,
        farm_regions: &[i32],
        max_density: f64,
        depth: &[f64],
        rules: &MaskRules,
    ) -> Result<Self, FarmError> {
        if !(max_density > 0.0 && max_density.is_finite()) {
            return invalid("maximum density must be positive");
        }
        if depth.len() != mesh.num_vertices() {
            return invalid("depth field length does not match the mesh");
        }
        let nt = mesh.num_triangles();
        let mut masked = vec![false; nt];
        let mut allowed = vec![false; nt];
        for t in 0..nt {
            let region = mesh.regions()[t];
            if !farm_regions.contains(&region) {
                continue;
            }
            let slope_bad = rules.max_slope.is_some_and(|limit| {
                let geo = crate::fem::ElementGeometry::new(mesh.triangle_points(t));
                let tri = mesh.triangles()[t];
                let mut g = [0.0; 2];
                for k in 0..3 {
                    g[0] += depth[tri[k]] * geo.grad_lambda[k][0];
                    g[1] += depth[tri[k]] * geo.grad_lambda[k][1];
                }
                (g[0] * g[0] + g[1] * g[1]).sqrt() >= limit
            });
            if slope_bad || rules.excluded_regions.contains(&region) {
                masked[t] = true;
            } else {
                allowed[t] = true;
            }
        }
        let mut upper = vec![0.0; mesh.num_vertices()];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            if allowed[t] {
                for &v in tri {
                    upper[v] = max_density;
                }
            }
        }
        for (t, tri) in mesh.triangles().iter().enumerate() {
            if masked[t] {
                for &v in tri {
                    upper[v] = 0.0;
                }
            }
        }
        // A cell is only useful if some vertex can carry turbines.
        let cells: Vec<bool> = mesh
            .triangles()
            .iter()
            .enumerate()
            .map(|(t, tri)| allowed[t] && tri.iter().any(|&v| upper[v] > 0.0))
            .collect();
        if !cells.iter().any(|&c| c) {
            return invalid("farm regions contain no admissible cell");
        }
        Ok(Self {
            cells: Arc::new(cells),
            upper,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.upper.len()
    }

    /// Area of the admissible farm.
    pub fn area(&self, spaces: &Spaces) -> f64 {
        (0..spaces.num_cells())
            .filter(|&t| self.cells[t])
            .map(|t| spaces.geometry(t).area)
            .sum()
    }
}

/// Nodal turbine density with its box bound.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    values: Vec<f64>,
    domain: Arc<FarmDomain>,
}

impl DensityField {
    pub fn new(values: Vec<f64>, domain: Arc<FarmDomain>) -> Result<Self, FarmError> {
        if values.len() != domain.num_nodes() {
            return invalid("density length does not match the mesh");
        }
        for (i, (&d, &u)) in values.iter().zip(&domain.upper).enumerate() {
            if !(d >= 0.0 && d <= u) {
                return invalid(format!(
                    "density {d} at vertex {i} violates the bounds [0, {u}]"
                ));
            }
        }
        Ok(Self { values, domain })
    }

    pub fn zeros(domain: Arc<FarmDomain>) -> Self {
        Self {
            values: vec![0.0; domain.num_nodes()],
            domain,
        }
    }

    /// `fraction * upper` everywhere.
    pub fn scaled_upper(domain: Arc<FarmDomain>, fraction: f64) -> Self {
        let values = domain.upper.iter().map(|u| u * fraction.clamp(0.0, 1.0)).collect();
        Self { values, domain }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn upper(&self) -> &[f64] {
        &self.domain.upper
    }

    pub fn domain(&self) -> &Arc<FarmDomain> {
        &self.domain
    }

    pub fn support(&self) -> &Arc<Vec<bool>> {
        &self.domain.cells
    }
}

/// `c_t = C_T A_T d / 2`, applied on the farm cells.
pub fn density_to_friction(d: &DensityField, spec: &TurbineSpec) -> FrictionField {
    let k = spec.friction_per_density();
    FrictionField {
        nodal: d.values.iter().map(|v| k * v).collect(),
        support: Some(d.domain.cells.clone()),
    }
}

/// `N = integral of d` over the farm.
pub fn turbine_count(d: &DensityField, spaces: &Spaces) -> f64 {
    spaces.integrate_p1(&d.values, Some(&d.domain.cells))
}

/// Integral of `|d|`; equals [`turbine_count`] for feasible densities.
pub fn density_l1_norm(d: &DensityField, spaces: &Spaces) -> f64 {
    let abs: Vec<f64> = d.values.iter().map(|v| v.abs()).collect();
    spaces.integrate_p1(&abs, Some(&d.domain.cells))
}

/// `P = rho * integral of c_t |u|^3`.
pub fn farm_power(sw: &ShallowWater, state: &FlowState, friction: &FrictionField) -> f64 {
    let rho = sw.physical().density;
    let mut total = 0.0;
    for t in 0..sw.spaces().num_cells() {
        if !friction.active(t) {
            continue;
        }
        let ct = friction.cell_values(t, sw.spaces().p1_cell(t));
        if ct == [0.0; 3] {
            continue;
        }
        sw.for_each_point(t, state, |q| {
            let c = ct[0] * q.psi[0] + ct[1] * q.psi[1] + ct[2] * q.psi[2];
            total += q.weight * c * q.speed.powi(3);
        });
    }
    rho * total
}

/// `F = rho * integral of c_t |u| u`.
pub fn farm_force(sw: &ShallowWater, state: &FlowState, friction: &FrictionField) -> [f64; 2] {
    let rho = sw.physical().density;
    let mut f = [0.0; 2];
    for t in 0..sw.spaces().num_cells() {
        if !friction.active(t) {
            continue;
        }
        let ct = friction.cell_values(t, sw.spaces().p1_cell(t));
        sw.for_each_point(t, state, |q| {
            let c = ct[0] * q.psi[0] + ct[1] * q.psi[1] + ct[2] * q.psi[2];
            f[0] += q.weight * c * q.speed * q.u[0];
            f[1] += q.weight * c * q.speed * q.u[1];
        });
    }
    [rho * f[0], rho * f[1]]
}

/// Derivative of [`farm_power`] with respect to the nodal friction values.
pub fn power_friction_gradient(
    sw: &ShallowWater,
    state: &FlowState,
    friction: &FrictionField,
) -> Vec<f64> {
    let rho = sw.physical().density;
    let mut g = vec![0.0; sw.spaces().num_p1()];
    for t in 0..sw.spaces().num_cells() {
        if !friction.active(t) {
            continue;
        }
        let p1 = sw.spaces().p1_cell(t);
        sw.for_each_point(t, state, |q| {
            let s3 = q.weight * q.speed.powi(3);
            for k in 0..3 {
                g[p1[k]] += rho * s3 * q.psi[k];
            }
        });
    }
    g
}

/// Derivative of [`farm_power`] with respect to the state coefficients.
pub fn power_state_gradient(
    sw: &ShallowWater,
    state: &FlowState,
    friction: &FrictionField,
) -> Vec<f64> {
    let rho = sw.physical().density;
    let n2 = state.n_velocity;
    let mut g = vec![0.0; state.values.len()];
    for t in 0..sw.spaces().num_cells() {
        if !friction.active(t) {
            continue;
        }
        let ct = friction.cell_values(t, sw.spaces().p1_cell(t));
        if ct == [0.0; 3] {
            continue;
        }
        let nodes = *sw.spaces().p2_cell(t);
        sw.for_each_point(t, state, |q| {
            let c = ct[0] * q.psi[0] + ct[1] * q.psi[1] + ct[2] * q.psi[2];
            // d |u|^3 / du = 3 |u| u
            let w = rho * q.weight * c * 3.0 * q.speed;
            for i in 0..6 {
                g[nodes[i]] += w * q.u[0] * q.phi[i];
                g[n2 + nodes[i]] += w * q.u[1] * q.phi[i];
            }
        });
    }
    g
}

/// Quadrature weights of the time-averaged power: the left-endpoint rule
/// over the whole trajectory. A single state (steady) has weight one.
pub fn time_weights(trajectory: &[FlowState]) -> Vec<f64> {
    let n = trajectory.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let span = trajectory[n - 1].time - trajectory[0].time;
    let mut w: Vec<f64> = trajectory
        .windows(2)
        .map(|p| (p[1].time - p[0].time) / span)
        .collect();
    w.push(0.0);
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfitBreakdown {
    /// Time-averaged farm power, W.
    pub power: f64,
    /// Cost coefficient times turbine count, W.
    pub cost: f64,
    pub profit: f64,
    pub turbines: f64,
    pub cost_coefficient: f64,
}

impl ProfitBreakdown {
    pub fn rounded_turbines(&self) -> i64 {
        self.turbines.round() as i64
    }
}

/// Time-averaged power minus cost for a steady state or a trajectory.
pub fn profit_objective(
    sw: &ShallowWater,
    trajectory: &[FlowState],
    d: &DensityField,
    spec: &TurbineSpec,
    econ: &EconomicParams,
) -> ProfitBreakdown {
    let friction = density_to_friction(d, spec);
    let power = time_weights(trajectory)
        .iter()
        .zip(trajectory)
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, s)| w * farm_power(sw, s, &friction))
        .sum();
    let turbines = turbine_count(d, sw.spaces());
    let cc = cost_coefficient(spec, econ, sw.physical().density);
    let cost = cc * turbines;
    ProfitBreakdown {
        power,
        cost,
        profit: power - cost,
        turbines,
        cost_coefficient: cc,
    }
}

/// Per-vertex table `x y d dbar`.
pub fn export_density(mesh: &Mesh, d: &DensityField) -> String {
    let mut s = String::from("# x y d dbar\n");
    for (p, (v, u)) in mesh.vertices().iter().zip(d.values.iter().zip(d.upper())) {
        let _ = writeln!(s, "{} {} {} {}", p[0], p[1], v, u);
    }
    s
}

/// Reads a density table written by [`export_density`] for the same mesh.
/// Values are clamped into the bound of `domain` only if they exceed it by
/// rounding; genuine violations are errors.
pub fn import_density(
    text: &str,
    mesh: &Mesh,
    domain: Arc<FarmDomain>,
) -> Result<DensityField, FarmError> {
    let mut values = Vec::with_capacity(mesh.num_vertices());
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| FarmError::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("`{f}`: {e}"))))
            .collect::<Result<_, _>>()?;
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 columns, found {}", fields.len())));
        }
        let v = values.len();
        let Some(p) = mesh.vertices().get(v) else {
            return Err(parse_err("more rows than mesh vertices".into()));
        };
        let tol = 1e-9 * (1.0 + p[0].abs().max(p[1].abs()));
        if (fields[0] - p[0]).abs() > tol || (fields[1] - p[1]).abs() > tol {
            return Err(parse_err(format!("coordinates do not match vertex {v}")));
        }
        values.push(fields[2]);
    }
    if values.len() != mesh.num_vertices() {
        return invalid(format!(
            "density file has {} rows, mesh has {} vertices",
            values.len(),
            mesh.num_vertices()
        ));
    }
    DensityField::new(values, domain)
}

/// Plain-text summary block of the functionals.
pub fn summary_report(b: &ProfitBreakdown) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "power_W = {}", b.power);
    let _ = writeln!(s, "power_MW = {:.6}", b.power / 1e6);
    let _ = writeln!(s, "cost_W = {}", b.cost);
    let _ = writeln!(s, "cost_MW = {:.6}", b.cost / 1e6);
    let _ = writeln!(s, "profit_W = {}", b.profit);
    let _ = writeln!(s, "profit_MW = {:.6}", b.profit / 1e6);
    let _ = writeln!(s, "turbines_real = {}", b.turbines);
    let _ = writeln!(s, "turbines_rounded = {}", b.rounded_turbines());
    let _ = writeln!(s, "cost_coefficient_W = {}", b.cost_coefficient);
    s
}
