//! Discrete adjoint of the shallow water solver and the resulting profit
//! gradient with respect to the nodal turbine density.
//!
//! The adjoint operator at every time level is the transpose of the
//! assembled forward Jacobian, so the gradient is the exact derivative of
//! the discrete objective.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::farm::{
    cost_coefficient, density_to_friction, farm_power, power_friction_gradient,
    power_state_gradient, time_weights, turbine_count, DensityField, EconomicParams, FarmDomain,
    FarmError, ProfitBreakdown, TurbineSpec,
};
use crate::mesh::Mesh;
use crate::shallow_water::{
    norm, FlowState, FrictionField, ShallowWater, SolverError, TimeStepping,
};
use crate::sparse::{Factorization, LinearSolveError, SparseMatrix};

/// Relative residual every adjoint linear solve must reach.
pub const ADJOINT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjointError {
    #[error(transparent)]
    Forward(#[from] SolverError),
    #[error(transparent)]
    Farm(#[from] FarmError),
    #[error("adjoint system at time level {level} is singular: {source}")]
    Singular {
        level: usize,
        source: LinearSolveError,
    },
    #[error("adjoint solve at time level {level} stalled at relative residual {residual:e}")]
    Residual { level: usize, residual: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Adjoint coefficients at one time level, laid out like [`FlowState`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub values: Vec<f64>,
    pub n_velocity: usize,
    pub n_elevation: usize,
    pub level: usize,
}

impl AdjointState {
    pub fn lambda_u(&self) -> (&[f64], &[f64]) {
        let n = self.n_velocity;
        (&self.values[..n], &self.values[n..2 * n])
    }

    pub fn lambda_eta(&self) -> &[f64] {
        &self.values[2 * self.n_velocity..]
    }
}

/// Profit functional `power_weight * P - cost_weight * C * N`. Both weights
/// are one for the design problem; other values serve verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfitFunctional {
    pub spec: TurbineSpec,
    pub econ: EconomicParams,
    pub power_weight: f64,
    pub cost_weight: f64,
}

impl ProfitFunctional {
    pub fn new(spec: TurbineSpec, econ: EconomicParams) -> Self {
        Self {
            spec,
            econ,
            power_weight: 1.0,
            cost_weight: 1.0,
        }
    }

    pub fn evaluate(
        &self,
        sw: &ShallowWater,
        trajectory: &[FlowState],
        d: &DensityField,
    ) -> ProfitBreakdown {
        let friction = density_to_friction(d, &self.spec);
        let power = time_weights(trajectory)
            .iter()
            .zip(trajectory)
            .filter(|(w, _)| **w != 0.0)
            .map(|(w, s)| w * farm_power(sw, s, &friction))
            .sum::<f64>();
        let turbines = turbine_count(d, sw.spaces());
        let cc = cost_coefficient(&self.spec, &self.econ, sw.physical().density);
        let cost = cc * turbines;
        ProfitBreakdown {
            power,
            cost,
            profit: self.power_weight * power - self.cost_weight * cost,
            turbines,
            cost_coefficient: cc,
        }
    }
}

/// Jacobian of the residual at `level` of a trajectory; level 0 of a
/// single-state trajectory is the steady system.
fn level_jacobian(
    sw: &ShallowWater,
    trajectory: &[FlowState],
    level: usize,
    friction: &FrictionField,
) -> SparseMatrix {
    let previous = (trajectory.len() > 1).then(|| {
        let prev = &trajectory[level - 1];
        (prev, trajectory[level].time - prev.time)
    });
    sw.assemble(&trajectory[level], previous, friction, true)
        .1
        .expect("requested")
}

/// Solves `J^T x = b` to [`ADJOINT_TOLERANCE`] by iterative refinement with
/// the exact transpose product. `lu` may factor a nearby matrix; if the
/// refinement does not contract fast enough it is replaced by a fresh
/// factorization of `jac`.
fn solve_transposed(
    sw: &ShallowWater,
    jac: &SparseMatrix,
    lu: &mut Option<Factorization>,
    b: &[f64],
    level: usize,
) -> Result<Vec<f64>, AdjointError> {
    let bnorm = norm(b);
    let mut x = vec![0.0; b.len()];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let singular = |source| AdjointError::Singular { level, source };
    let mut fresh = false;
    if lu.is_none() {
        *lu = Some(sw.factorize(jac).map_err(|e| lu_error(e, level))?);
        fresh = true;
    }
    let mut r = b.to_vec();
    let mut rel = 1.0;
    let mut sweeps = 0;
    loop {
        let mut dx = r.clone();
        lu.as_ref()
            .expect("present")
            .solve_transpose_in_place(&mut dx)
            .map_err(singular)?;
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        let jt = jac.mul_transpose_vec(&x);
        for ((ri, bi), ji) in r.iter_mut().zip(b).zip(&jt) {
            *ri = bi - ji;
        }
        let next = norm(&r) / bnorm;
        sweeps += 1;
        if next <= ADJOINT_TOLERANCE {
            return Ok(x);
        }
        let slow = !(next < 0.1 * rel) || sweeps >= 12;
        rel = next;
        if slow {
            if fresh {
                return Err(AdjointError::Residual {
                    level,
                    residual: next,
                });
            }
            *lu = Some(sw.factorize(jac).map_err(|e| lu_error(e, level))?);
            fresh = true;
            sweeps = 0;
            rel = 1.0;
            x.iter_mut().for_each(|v| *v = 0.0);
            r.copy_from_slice(b);
        }
    }
}

fn lu_error(e: SolverError, level: usize) -> AdjointError {
    match e {
        SolverError::Linear { source, .. } => AdjointError::Singular { level, source },
        other => AdjointError::Forward(other),
    }
}

/// Solves the adjoint equations backward in time with a zero final
/// condition. A single-state trajectory is treated as steady.
///
/// Returns one adjoint state per trajectory level. For a transient
/// trajectory the initial level is fixed data and its adjoint is zero.
/// `hint` may hold a factorization of a Jacobian close to the one at the
/// last level; it is used as a preconditioner.
pub fn solve_adjoint(
    sw: &ShallowWater,
    trajectory: &[FlowState],
    d: &DensityField,
    functional: &ProfitFunctional,
    hint: Option<Factorization>,
) -> Result<Vec<AdjointState>, AdjointError> {
    if trajectory.is_empty() {
        return Err(AdjointError::Invalid("empty trajectory".into()));
    }
    let friction = density_to_friction(d, &functional.spec);
    let weights = time_weights(trajectory);
    let n2 = trajectory[0].n_velocity;
    let n1 = trajectory[0].n_elevation;
    let make = |values, level| AdjointState {
        values,
        n_velocity: n2,
        n_elevation: n1,
        level,
    };
    let mut lu = hint;
    let last = trajectory.len() - 1;
    let first = if last == 0 { 0 } else { 1 };
    let mut out: Vec<AdjointState> = Vec::with_capacity(trajectory.len());
    let mut next: Option<Vec<f64>> = None;
    for level in (first..=last).rev() {
        let state = &trajectory[level];
        let w = functional.power_weight * weights[level];
        let mut rhs = if w != 0.0 {
            let mut g = power_state_gradient(sw, state, &friction);
            g.iter_mut().for_each(|v| *v *= w);
            g
        } else {
            vec![0.0; state.values.len()]
        };
        if let Some(lam) = &next {
            let dt = trajectory[level + 1].time - state.time;
            for (r, c) in rhs.iter_mut().zip(sw.previous_state_transpose_product(lam, dt)) {
                *r -= c;
            }
        }
        let lambda = if rhs.iter().all(|v| *v == 0.0) {
            rhs
        } else {
            let jac = level_jacobian(sw, trajectory, level, &friction);
            solve_transposed(sw, &jac, &mut lu, &rhs, level)?
        };
        next = Some(lambda.clone());
        out.push(make(lambda, level));
    }
    if first == 1 {
        out.push(make(vec![0.0; n2 * 2 + n1], 0));
    }
    out.reverse();
    Ok(out)
}

/// Derivative of the functional with respect to the nodal density.
pub fn gradient(
    sw: &ShallowWater,
    trajectory: &[FlowState],
    adjoint: &[AdjointState],
    d: &DensityField,
    functional: &ProfitFunctional,
) -> Vec<f64> {
    assert_eq!(trajectory.len(), adjoint.len(), "trajectories are not aligned");
    let friction = density_to_friction(d, &functional.spec);
    let weights = time_weights(trajectory);
    let mut gc = vec![0.0; sw.spaces().num_p1()];
    for ((state, lam), w) in trajectory.iter().zip(adjoint).zip(&weights) {
        let w = functional.power_weight * w;
        if w != 0.0 {
            for (g, p) in gc.iter_mut().zip(power_friction_gradient(sw, state, &friction)) {
                *g += w * p;
            }
        }
        if lam.values.iter().any(|v| *v != 0.0) {
            for (g, a) in gc
                .iter_mut()
                .zip(sw.friction_adjoint_action(state, &lam.values, &friction))
            {
                *g += a;
            }
        }
    }
    let k = functional.spec.friction_per_density();
    let cc = functional.cost_weight
        * cost_coefficient(&functional.spec, &functional.econ, sw.physical().density);
    let weights = sw.spaces().p1_weights(Some(d.support()));
    gc.iter()
        .zip(&weights)
        .map(|(g, w)| k * g - cc * w)
        .collect()
}

/// Per-vertex gradient table `x y g`.
pub fn export_gradient(mesh: &Mesh, g: &[f64]) -> String {
    let mut s = String::from("# x y g\n");
    for (p, v) in mesh.vertices().iter().zip(g) {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], v);
    }
    s
}

/// How the forward model advances the flow.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowMode {
    Steady,
    Transient {
        stepping: TimeStepping,
        initial: FlowState,
    },
}

/// Objective value with its breakdown and optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: ProfitBreakdown,
    pub gradient: Option<Vec<f64>>,
}

/// The reduced design problem `d -> profit(d, x(d))`.
///
/// Steady solves are warm-started from the last converged state, which
/// typically cuts the Newton iterations to two or three.
pub struct DesignProblem {
    pub sw: Arc<ShallowWater>,
    pub domain: Arc<FarmDomain>,
    pub functional: ProfitFunctional,
    pub mode: FlowMode,
    warm: Mutex<Option<FlowState>>,
    counts: Mutex<(usize, usize)>,
}

impl DesignProblem {
    pub fn new(
        sw: Arc<ShallowWater>,
        domain: Arc<FarmDomain>,
        functional: ProfitFunctional,
        mode: FlowMode,
    ) -> Self {
        Self {
            sw,
            domain,
            functional,
            mode,
            warm: Mutex::new(None),
            counts: Mutex::new((0, 0)),
        }
    }

    pub fn density(&self, values: &[f64]) -> Result<DensityField, AdjointError> {
        Ok(DensityField::new(values.to_vec(), self.domain.clone())?)
    }

    /// Number of forward and adjoint solves performed so far.
    pub fn solve_counts(&self) -> (usize, usize) {
        *self.counts.lock().expect("poisoned")
    }

    /// Forward trajectory for `d`, with the last Newton factorization of a
    /// steady solve.
    pub fn forward(
        &self,
        d: &DensityField,
    ) -> Result<(Vec<FlowState>, Option<Factorization>), AdjointError> {
        let friction = density_to_friction(d, &self.functional.spec);
        self.counts.lock().expect("poisoned").0 += 1;
        match &self.mode {
            FlowMode::Steady => {
                let guess = self.warm.lock().expect("poisoned").clone();
                let solved = match self.sw.solve_steady_with_lu(&friction, guess.as_ref()) {
                    Err(_) if guess.is_some() => self.sw.solve_steady_with_lu(&friction, None),
                    other => other,
                };
                let (state, lu) = solved?;
                *self.warm.lock().expect("poisoned") = Some(state.clone());
                Ok((vec![state], lu))
            }
            FlowMode::Transient { stepping, initial } => {
                Ok((self.sw.solve_transient(&friction, stepping, initial)?, None))
            }
        }
    }

    /// Objective and, when requested, its gradient at `values`.
    pub fn evaluate(&self, values: &[f64], with_gradient: bool) -> Result<Evaluation, AdjointError> {
        let d = self.density(values)?;
        let (traj, lu) = self.forward(&d)?;
        let breakdown = self.functional.evaluate(&self.sw, &traj, &d);
        let gradient = if with_gradient {
            let adj = solve_adjoint(&self.sw, &traj, &d, &self.functional, lu)?;
            self.counts.lock().expect("poisoned").1 += 1;
            Some(gradient(&self.sw, &traj, &adj, &d, &self.functional))
        } else {
            None
        };
        Ok(Evaluation {
            breakdown,
            gradient,
        })
    }
}

/// Result of a Taylor remainder test.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub steps: Vec<f64>,
    /// `|J(x + h dx) - J(x)|`
    pub first: Vec<f64>,
    /// `|J(x + h dx) - J(x) - h <g, dx>|`
    pub second: Vec<f64>,
    pub first_orders: Vec<f64>,
    pub second_orders: Vec<f64>,
}

impl TaylorReport {
    /// Smallest observed second-order rate, or infinity when every
    /// remainder vanishes.
    pub fn min_second_order(&self) -> f64 {
        if self.second.iter().all(|r| *r == 0.0) {
            return f64::INFINITY;
        }
        self.second_orders
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(if b.is_nan() { f64::NEG_INFINITY } else { b }))
    }

    pub fn passed(&self, required: f64) -> bool {
        self.min_second_order() >= required
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# h first_remainder second_remainder first_order second_order\n");
        for i in 0..self.steps.len() {
            let order = |v: &[f64]| {
                if i == 0 {
                    "-".to_string()
                } else {
                    format!("{:.4}", v[i - 1])
                }
            };
            let _ = writeln!(
                s,
                "{:e} {:e} {:e} {} {}",
                self.steps[i],
                self.first[i],
                self.second[i],
                order(&self.first_orders),
                order(&self.second_orders)
            );
        }
        let _ = writeln!(s, "min_second_order = {}", self.min_second_order());
        s
    }
}

/// Taylor remainder test of `f` at `x` along `dx`. `f` returns the value and
/// gradient; only values are used at the perturbed points.
pub fn taylor_test<F>(
    mut f: F,
    x: &[f64],
    dx: &[f64],
    steps: &[f64],
) -> Result<TaylorReport, AdjointError>
where
    F: FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>), AdjointError>,
{
    if steps.is_empty() || steps.windows(2).any(|w| !(w[1] < w[0])) || !(steps[0] > 0.0) {
        return Err(AdjointError::Invalid(
            "Taylor steps must be positive and strictly decreasing".into(),
        ));
    }
    if x.len() != dx.len() {
        return Err(AdjointError::Invalid("direction length mismatch".into()));
    }
    let (j0, g) = f(x, true)?;
    let g = g.ok_or_else(|| AdjointError::Invalid("gradient not provided".into()))?;
    let slope: f64 = g.iter().zip(dx).map(|(a, b)| a * b).sum();
    let mut first = Vec::with_capacity(steps.len());
    let mut second = Vec::with_capacity(steps.len());
    for &h in steps {
        let xp: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + h * b).collect();
        let (jh, _) = f(&xp, false)?;
        first.push((jh - j0).abs());
        second.push((jh - j0 - h * slope).abs());
    }
    let orders = |r: &[f64]| -> Vec<f64> {
        (1..steps.len())
            .map(|i| (r[i - 1] / r[i]).ln() / (steps[i - 1] / steps[i]).ln())
            .collect()
    };
    Ok(TaylorReport {
        steps: steps.to_vec(),
        first_orders: orders(&first),
        second_orders: orders(&second),
        first,
        second,
    })
}
