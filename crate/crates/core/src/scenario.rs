//! Declarative scenario files (TOML) and their conversion into solver,
//! farm and optimizer objects.
//!
//! A scenario starts with `format_version = 1`; unknown keys are rejected.
//! See `scenarios/idealized_channel.toml` for the full schema with comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::adjoint::{DesignProblem, FlowMode, ProfitFunctional};
use crate::farm::{EconomicParams, FarmDomain, MaskRules, TurbineSpec};
use crate::mesh::{generate_rectangle, Mesh, Rect, RectangleSpec};
use crate::optimizer::{InnerProduct, OptimizerSettings};
use crate::shallow_water::{
    BoundaryConditionSet, DepthMode, PhysicalParams, Prescription, ShallowWater, SolverParams,
    TimeSeries, TimeStepping,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    /// A rule violation, prefixed by the offending section or field.
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid<T>(field: &str, message: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid {
        field: field.to_string(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub mesh: MeshSection,
    #[serde(default)]
    pub physics: PhysicsSection,
    pub boundary: BTreeMap<String, BoundarySection>,
    pub turbine: TurbineSection,
    pub economics: EconomicsSection,
    pub farm: FarmSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub layout: LayoutSection,
    #[serde(default)]
    pub taylor: TaylorSection,
    /// Directory of the scenario file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub id: i32,
    /// `[x0, y0, x1, y1]`
    #[serde(rename = "box")]
    pub rect: [f64; 4],
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    /// Mesh file in the native text format; excludes the generator keys.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default)]
    pub height: Option<f64>,
    #[serde(default)]
    pub coarse_size: Option<f64>,
    #[serde(default)]
    pub fine_box: Option<[f64; 4]>,
    #[serde(default)]
    pub fine_size: Option<f64>,
    #[serde(default)]
    pub grading: Option<f64>,
    #[serde(default)]
    pub regions: Vec<RegionSection>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    pub gravity: f64,
    pub density: f64,
    pub viscosity: f64,
    pub background_friction: f64,
    /// Depth at rest at the origin, m.
    pub depth: f64,
    /// Depth gradient `[dh/dx, dh/dy]`.
    pub depth_gradient: [f64; 2],
    pub depth_floor: f64,
    pub fixed_depth: bool,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            density: 1000.0,
            viscosity: 0.5,
            background_friction: 0.0025,
            depth: 50.0,
            depth_gradient: [0.0, 0.0],
            depth_floor: 1e-3,
            fixed_depth: false,
        }
    }
}

/// A constant or a sinusoid in a scenario file.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum SeriesSection {
    Constant(f64),
    Sine {
        mean: f64,
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl SeriesSection {
    fn build(&self) -> TimeSeries {
        match *self {
            Self::Constant(v) => TimeSeries::Constant(v),
            Self::Sine {
                mean,
                amplitude,
                period,
                phase,
            } => TimeSeries::Sine {
                mean,
                amplitude,
                period,
                phase,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySection {
    Velocity { u: SeriesSection, v: SeriesSection },
    Elevation { eta: SeriesSection },
    FreeSlip,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TurbineSection {
    pub thrust_coefficient: f64,
    pub cross_section: f64,
    pub min_distance: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EconomicsSection {
    #[serde(default)]
    pub cost_coefficient: Option<f64>,
    pub profit_margin: f64,
    pub peak_speed: f64,
    pub tidal_factor: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FarmSection {
    pub regions: Vec<i32>,
    #[serde(default)]
    pub excluded_regions: Vec<i32>,
    #[serde(default)]
    pub max_slope: Option<f64>,
    /// Overrides `1 / min_distance^2`.
    #[serde(default)]
    pub max_density: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeSection {
    #[default]
    Steady,
    Transient,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialSection {
    /// Zero velocity and elevation with the boundary data applied.
    #[default]
    Rest,
    /// Steady solution for the boundary data at `t_start`.
    Steady,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default)]
    pub mode: ModeSection,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t_start: Option<f64>,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub initial: InitialSection,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub newton_rel_tol: f64,
    pub newton_abs_tol: f64,
    pub newton_max_iter: usize,
    pub damping: f64,
    pub line_search: bool,
    pub velocity_smoothing: f64,
    pub max_states: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let p = SolverParams::default();
        Self {
            newton_rel_tol: p.newton_rel_tol,
            newton_abs_tol: p.newton_abs_tol,
            newton_max_iter: p.newton_max_iter,
            damping: p.damping,
            line_search: p.line_search,
            velocity_smoothing: p.velocity_smoothing,
            max_states: p.max_states,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerProductSection {
    #[default]
    Euclidean,
    LumpedMass,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub memory: usize,
    pub ftol: f64,
    pub pgtol: f64,
    pub max_iter: usize,
    pub inner_product: InnerProductSection,
    /// Start at this fraction of the upper bound.
    pub initial_fraction: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let s = OptimizerSettings::default();
        Self {
            memory: s.memory,
            ftol: s.ftol,
            pgtol: s.pgtol,
            max_iter: s.max_iter,
            inner_product: InnerProductSection::Euclidean,
            initial_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub seed: u64,
    pub proposal_budget: usize,
    /// Solve the flow with bump friction for the converted layout.
    pub evaluate: bool,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self {
            seed: 1,
            proposal_budget: crate::layout::DEFAULT_PROPOSAL_BUDGET,
            evaluate: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaylorSection {
    pub steps: Vec<f64>,
    pub seed: u64,
    /// Base point as a fraction of the upper bound.
    pub base_fraction: f64,
}

impl Default for TaylorSection {
    fn default() -> Self {
        Self {
            steps: vec![0.1, 0.05, 0.025, 0.0125],
            seed: 1,
            base_fraction: 0.5,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(field, format!("must be positive, got {v}"))
    }
}

fn rect_of(b: [f64; 4]) -> Rect {
    Rect::new(b[0], b[1], b[2], b[3])
}

impl Scenario {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.base_dir = base_dir.to_path_buf();
        if s.format_version != FORMAT_VERSION {
            return invalid(
                "format_version",
                format!("unsupported version {}, expected {FORMAT_VERSION}", s.format_version),
            );
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_toml(&text, &base)
    }

    /// Parses and fully validates a scenario file.
    pub fn validate_file(path: &Path) -> Result<Built, ScenarioError> {
        Self::load(path)?.build()
    }

    pub fn turbine_spec(&self) -> TurbineSpec {
        TurbineSpec {
            thrust_coefficient: self.turbine.thrust_coefficient,
            cross_section: self.turbine.cross_section,
            min_distance: self.turbine.min_distance,
        }
    }

    pub fn economic_params(&self) -> EconomicParams {
        EconomicParams {
            cost_coefficient: self.economics.cost_coefficient,
            profit_margin: self.economics.profit_margin,
            peak_speed: self.economics.peak_speed,
            tidal_factor: self.economics.tidal_factor,
        }
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            memory: self.optimizer.memory,
            ftol: self.optimizer.ftol,
            pgtol: self.optimizer.pgtol,
            max_iter: self.optimizer.max_iter,
            ..OptimizerSettings::default()
        }
    }

    pub fn inner_product(&self) -> InnerProduct {
        match self.optimizer.inner_product {
            InnerProductSection::Euclidean => InnerProduct::Euclidean,
            InnerProductSection::LumpedMass => InnerProduct::LumpedMass,
        }
    }

    pub fn solver_params(&self) -> SolverParams {
        let s = &self.solver;
        SolverParams {
            newton_rel_tol: s.newton_rel_tol,
            newton_abs_tol: s.newton_abs_tol,
            newton_max_iter: s.newton_max_iter,
            damping: s.damping,
            line_search: s.line_search,
            velocity_smoothing: s.velocity_smoothing,
            max_states: s.max_states,
        }
    }

    pub fn build_mesh(&self) -> Result<Mesh, ScenarioError> {
        let m = &self.mesh;
        if let Some(file) = &m.file {
            let generator_keys = m.width.is_some()
                || m.height.is_some()
                || m.coarse_size.is_some()
                || m.fine_box.is_some()
                || m.fine_size.is_some()
                || m.grading.is_some();
            if generator_keys {
                return invalid("mesh", "`file` excludes the generator keys");
            }
            let path = self.base_dir.join(file);
            let text = std::fs::read_to_string(&path).map_err(|e| ScenarioError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let mesh = Mesh::import(&text).map_err(|e| ScenarioError::Invalid {
                field: "mesh.file".into(),
                message: e.to_string(),
            })?;
            if m.regions.is_empty() {
                return Ok(mesh);
            }
            // Region boxes relabel imported triangles by centroid.
            let labels = (0..mesh.num_triangles())
                .map(|t| {
                    let c = mesh.centroid(t);
                    m.regions
                        .iter()
                        .find(|r| rect_of(r.rect).contains(c))
                        .map_or(mesh.regions()[t], |r| r.id)
                })
                .collect();
            return mesh.with_regions(labels).map_err(|e| ScenarioError::Invalid {
                field: "mesh.regions".into(),
                message: e.to_string(),
            });
        }
        let (Some(w), Some(h), Some(coarse)) = (m.width, m.height, m.coarse_size) else {
            return invalid("mesh", "needs `file` or `width`, `height` and `coarse_size`");
        };
        positive("mesh.width", w)?;
        positive("mesh.height", h)?;
        positive("mesh.coarse_size", coarse)?;
        let domain = Rect::new(0.0, 0.0, w, h);
        let inside = |r: &Rect| r.x0 >= domain.x0 && r.y0 >= domain.y0 && r.x1 <= domain.x1 && r.y1 <= domain.y1;
        let mut spec = RectangleSpec::new(w, h, coarse);
        if let Some(g) = m.grading {
            spec.grading = g;
        }
        match (m.fine_box, m.fine_size) {
            (Some(b), Some(size)) => {
                let r = rect_of(b);
                if !(r.x1 > r.x0 && r.y1 > r.y0) || !inside(&r) {
                    return invalid("mesh.fine_box", "must be a proper rectangle inside the domain");
                }
                positive("mesh.fine_size", size)?;
                spec = spec.refined(r, size);
            }
            (None, None) => {}
            _ => return invalid("mesh", "`fine_box` and `fine_size` go together"),
        }
        for (i, region) in m.regions.iter().enumerate() {
            let r = rect_of(region.rect);
            if !(r.x1 > r.x0 && r.y1 > r.y0) || !inside(&r) {
                return invalid(
                    &format!("mesh.regions[{i}]"),
                    "box must be a proper rectangle inside the domain",
                );
            }
            spec = spec.with_region(r, region.id);
        }
        generate_rectangle(&spec).map_err(|e| ScenarioError::Invalid {
            field: "mesh".into(),
            message: e.to_string(),
        })
    }

    /// Depth at rest at `p`.
    pub fn depth_at(&self, p: [f64; 2]) -> f64 {
        let ph = &self.physics;
        ph.depth + ph.depth_gradient[0] * p[0] + ph.depth_gradient[1] * p[1]
    }

    pub fn physical_params(&self, mesh: &Mesh) -> PhysicalParams {
        let ph = &self.physics;
        PhysicalParams {
            gravity: ph.gravity,
            density: ph.density,
            viscosity: ph.viscosity,
            background_friction: ph.background_friction,
            depth: mesh.vertices().iter().map(|p| self.depth_at(*p)).collect(),
            depth_floor: ph.depth_floor,
            depth_mode: if ph.fixed_depth {
                DepthMode::Fixed
            } else {
                DepthMode::Total
            },
        }
    }

    pub fn boundary_conditions(&self) -> BoundaryConditionSet {
        let mut b = BoundaryConditionSet::new();
        for (tag, section) in &self.boundary {
            let p = match section {
                BoundarySection::Velocity { u, v } => Prescription::Velocity([u.build(), v.build()]),
                BoundarySection::Elevation { eta } => Prescription::Elevation(eta.build()),
                BoundarySection::FreeSlip => Prescription::FreeSlip,
            };
            b.insert(tag, p);
        }
        b
    }

    pub fn time_stepping(&self) -> Result<TimeStepping, ScenarioError> {
        let f = &self.flow;
        let (Some(dt), Some(t_end)) = (f.dt, f.t_end) else {
            return invalid("flow", "transient mode needs `dt` and `t_end`");
        };
        let t_start = f.t_start.unwrap_or(0.0);
        positive("flow.dt", dt)?;
        if !(t_end > t_start) {
            return invalid("flow.t_end", "must exceed t_start");
        }
        Ok(TimeStepping {
            dt,
            t_start,
            t_end,
        })
    }

    /// Checks every rule and builds the solver objects.
    pub fn build(&self) -> Result<Built, ScenarioError> {
        let spec = self.turbine_spec();
        spec.validate().map_err(|e| ScenarioError::Invalid {
            field: "turbine".into(),
            message: e.to_string(),
        })?;
        let econ = self.economic_params();
        econ.validate().map_err(|e| ScenarioError::Invalid {
            field: "economics".into(),
            message: e.to_string(),
        })?;
        let o = &self.optimizer;
        if o.memory == 0 {
            return invalid("optimizer.memory", "must be at least 1");
        }
        if !(o.ftol >= 0.0 && o.pgtol >= 0.0) {
            return invalid("optimizer", "tolerances must be non-negative");
        }
        if !(0.0..=1.0).contains(&o.initial_fraction) {
            return invalid("optimizer.initial_fraction", "must lie in [0, 1]");
        }
        let t = &self.taylor;
        if t.steps.is_empty() || t.steps[0] <= 0.0 || t.steps.windows(2).any(|w| !(w[1] < w[0])) {
            return invalid("taylor.steps", "must be positive and strictly decreasing");
        }
        if !(0.0..=1.0).contains(&t.base_fraction) {
            return invalid("taylor.base_fraction", "must lie in [0, 1]");
        }
        let sv = &self.solver;
        if !(sv.newton_rel_tol > 0.0 && sv.newton_abs_tol > 0.0 && sv.newton_max_iter > 0) {
            return invalid("solver", "Newton tolerances and iteration cap must be positive");
        }
        if !(sv.damping > 0.0 && sv.damping <= 1.0) {
            return invalid("solver.damping", "must lie in (0, 1]");
        }
        positive("solver.velocity_smoothing", sv.velocity_smoothing)?;
        let mesh = Arc::new(self.build_mesh()?);
        for r in &self.farm.regions {
            if !mesh.regions().contains(r) {
                return invalid("farm.regions", format!("region {r} has no triangles"));
            }
        }
        let physical = self.physical_params(&mesh);
        physical.validate(&mesh).map_err(|e| ScenarioError::Invalid {
            field: "physics".into(),
            message: e.to_string(),
        })?;
        let bcs = self.boundary_conditions();
        bcs.validate(&mesh).map_err(|e| ScenarioError::Invalid {
            field: "boundary".into(),
            message: e.to_string(),
        })?;
        let max_density = self.farm.max_density.unwrap_or(spec.max_density());
        let rules = MaskRules {
            excluded_regions: self.farm.excluded_regions.clone(),
            max_slope: self.farm.max_slope,
        };
        let domain = if self.farm.regions.is_empty() {
            None
        } else {
            let d = FarmDomain::from_regions(&mesh, &self.farm.regions, max_density, &physical.depth, &rules)
                .map_err(|e| ScenarioError::Invalid {
                    field: "farm".into(),
                    message: e.to_string(),
                })?;
            Some(Arc::new(d))
        };
        let stepping = match self.flow.mode {
            ModeSection::Steady => None,
            ModeSection::Transient => Some(self.time_stepping()?),
        };
        let sw = ShallowWater::new(mesh.clone(), physical, bcs, self.solver_params()).map_err(|e| {
            ScenarioError::Invalid {
                field: "solver".into(),
                message: e.to_string(),
            }
        })?;
        Ok(Built {
            mesh,
            sw: Arc::new(sw),
            domain,
            functional: ProfitFunctional::new(spec, econ),
            stepping,
        })
    }

    /// Switches between steady and transient flow.
    pub fn set_mode(&mut self, mode: ModeSection) {
        self.flow.mode = mode;
    }
}

/// Solver objects for a validated scenario.
pub struct Built {
    pub mesh: Arc<Mesh>,
    pub sw: Arc<ShallowWater>,
    /// `None` when the scenario has no farm regions.
    pub domain: Option<Arc<FarmDomain>>,
    pub functional: ProfitFunctional,
    pub stepping: Option<TimeStepping>,
}

impl Built {
    pub fn require_domain(&self) -> Result<Arc<FarmDomain>, ScenarioError> {
        match &self.domain {
            Some(d) => Ok(d.clone()),
            None => invalid("farm.regions", "at least one farm region is required"),
        }
    }

    /// Initial state of a transient run.
    pub fn initial_state(
        &self,
        stepping: &TimeStepping,
        initial: InitialSection,
    ) -> Result<crate::shallow_water::FlowState, crate::shallow_water::SolverError> {
        let t = stepping.t_start;
        let mut start = self.sw.zero_state(t);
        self.sw.apply_dirichlet(&mut start, t);
        if initial == InitialSection::Steady {
            let zero = crate::shallow_water::FrictionField::zero(self.sw.spaces().num_p1());
            // Steady boundary data are evaluated at the start time.
            start = self.sw.solve_steady(&zero, Some(&start))?;
            start.time = t;
        }
        Ok(start)
    }

    /// The design problem; transient runs start from `initial`.
    pub fn design_problem(&self, initial: InitialSection) -> Result<DesignProblem, crate::Error> {
        let domain = self.require_domain()?;
        let mode = match &self.stepping {
            None => FlowMode::Steady,
            Some(stepping) => FlowMode::Transient {
                stepping: *stepping,
                initial: self.initial_state(stepping, initial)?,
            },
        };
        Ok(DesignProblem::new(
            self.sw.clone(),
            domain,
            self.functional,
            mode,
        ))
    }
}
