//! Box-constrained limited-memory BFGS (L-BFGS-B) for maximization.
//!
//! Each iteration finds the generalized Cauchy point of the quadratic model
//! along the projected steepest descent path, minimizes the model over the
//! variables left free there, and runs a strong Wolfe line search on the
//! feasible segment towards that point. The model Hessian uses the compact
//! representation `B = theta I - W M W^T` with `W = [Y, theta S]`.

use std::fmt;
use std::fmt::Write as _;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::Mat;
use thiserror::Error;

use crate::adjoint::{AdjointError, DesignProblem};
use crate::farm::{cost_coefficient, turbine_count, DensityField, ProfitBreakdown};

/// Per-node box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, String> {
        if lower.len() != upper.len() {
            return Err("bound vectors differ in length".into());
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(format!("bounds at index {i} are invalid: [{l}, {u}]"));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[0, upper]`.
    pub fn nonnegative(upper: Vec<f64>) -> Result<Self, String> {
        Self::new(vec![0.0; upper.len()], upper)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), u)| l <= v && v <= u)
    }

    /// Infinity norm of the projected ascent step `P(x + g) - x`.
    pub fn projected_gradient_norm(&self, x: &[f64], ascent: &[f64]) -> f64 {
        x.iter()
            .zip(ascent)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((v, g), (l, u))| ((v + g).clamp(*l, *u) - v).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub memory: usize,
    /// Relative objective change between accepted iterates.
    pub ftol: f64,
    /// Projected gradient infinity norm.
    pub pgtol: f64,
    pub max_iter: usize,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
    /// Sufficient increase parameter.
    pub c1: f64,
    /// Curvature parameter.
    pub c2: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            memory: 10,
            ftol: 2.2e-6,
            pgtol: 1e-9,
            max_iter: 200,
            max_line_search: 20,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

/// One objective evaluation supplied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Reporting only; copied into the trace.
    pub power: f64,
    pub cost: f64,
}

impl Sample {
    /// A sample without a power/cost split.
    pub fn plain(objective: f64, gradient: Vec<f64>) -> Self {
        Self {
            objective,
            gradient,
            power: objective,
            cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub power: f64,
    pub cost: f64,
    pub pg_norm: f64,
    pub step: f64,
    /// Cumulative function evaluations.
    pub fevals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Pgtol,
    Ftol,
    MaxIter,
    LineSearchFailed,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pgtol => "pgtol",
            Self::Ftol => "ftol",
            Self::MaxIter => "max_iter",
            Self::LineSearchFailed => "line search failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub records: Vec<TraceRecord>,
    pub stop_reason: Option<StopReason>,
    /// Iterates after each accepted step, when requested.
    pub snapshots: Vec<Vec<f64>>,
}

impl OptimizationTrace {
    /// CSV with a trailing comment line holding the stop reason.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,objective_W,power_W,cost_W,pg_norm,step,fevals\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration, r.objective, r.power, r.cost, r.pg_norm, r.step, r.fevals
            );
        }
        if let Some(reason) = self.stop_reason {
            let _ = writeln!(s, "# stop_reason: {reason}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub trace: OptimizationTrace,
    pub stop_reason: StopReason,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError<E> {
    #[error("{0}")]
    Invalid(String),
    #[error("objective or gradient is not finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("evaluation failed at iteration {iteration}: {source}")]
    Evaluation { iteration: usize, source: E },
}

/// Limited-memory pairs and the middle matrix of the compact form.
struct Memory {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    theta: f64,
    /// `M` as a dense `2k x 2k` row-major matrix.
    m: Vec<Vec<f64>>,
    cap: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dense(a: &[Vec<f64>]) -> Mat<f64> {
    Mat::from_fn(a.len(), a.len(), |i, j| a[i][j])
}

fn finite_all(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl Memory {
    fn new(cap: usize) -> Self {
        Self {
            s: Vec::new(),
            y: Vec::new(),
            theta: 1.0,
            m: Vec::new(),
            cap,
        }
    }

    fn len(&self) -> usize {
        self.s.len()
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.theta = 1.0;
        self.m.clear();
    }

    /// Adds a pair if it satisfies the curvature condition; returns whether
    /// it was stored.
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if !(sy > f64::EPSILON * yy) || !(yy > 0.0) {
            return false;
        }
        if self.s.len() == self.cap {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.theta = yy / sy;
        if !self.rebuild() {
            self.clear();
            return false;
        }
        true
    }

    fn rebuild(&mut self) -> bool {
        let k = self.len();
        let th = self.theta;
        let mut a = vec![vec![0.0; 2 * k]; 2 * k];
        for i in 0..k {
            for j in 0..k {
                let sy = dot(&self.s[i], &self.y[j]);
                if i == j {
                    a[i][i] = -sy;
                }
                if i > j {
                    // L block (lower left) and its transpose.
                    a[k + i][j] = sy;
                    a[j][k + i] = sy;
                }
                a[k + i][k + j] = th * dot(&self.s[i], &self.s[j]);
            }
        }
        let inv = dense(&a).partial_piv_lu().inverse();
        let m: Vec<Vec<f64>> = (0..2 * k)
            .map(|i| (0..2 * k).map(|j| inv[(i, j)]).collect())
            .collect();
        let ok = m.iter().all(|r| finite_all(r));
        self.m = m;
        ok
    }

    /// Row `i` of `W = [Y, theta S]`.
    fn w_row(&self, i: usize) -> Vec<f64> {
        let k = self.len();
        let mut w = Vec::with_capacity(2 * k);
        w.extend(self.y.iter().map(|y| y[i]));
        w.extend(self.s.iter().map(|s| self.theta * s[i]));
        w
    }

    /// `W^T v`.
    fn wt(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.y.iter().map(|y| dot(y, v)).collect();
        out.extend(self.s.iter().map(|s| self.theta * dot(s, v)));
        out
    }
}

/// Generalized Cauchy point of the model `g^T d + d^T B d / 2` along the
/// projected steepest descent path. Returns the point and `c = W^T (xc - x)`.
fn cauchy_point(x: &[f64], g: &[f64], b: &BoxBounds, mem: &Memory) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let k2 = 2 * mem.len();
    let th = mem.theta;
    let mut xc = x.to_vec();
    let mut d = vec![0.0; n];
    let mut breaks: Vec<(f64, usize)> = Vec::new();
    for i in 0..n {
        let t = if g[i] < 0.0 {
            (x[i] - b.upper[i]) / g[i]
        } else if g[i] > 0.0 {
            (x[i] - b.lower[i]) / g[i]
        } else {
            f64::INFINITY
        };
        if t > 0.0 {
            d[i] = -g[i];
            if t.is_finite() {
                breaks.push((t, i));
            }
        }
    }
    breaks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut p = mem.wt(&d);
    let mut c = vec![0.0; k2];
    let dd = dot(&d, &d);
    let mut fp = -dd;
    let mp = mat_vec(&mem.m, &p);
    let mut fpp = th * dd - dot(&p, &mp);
    let fpp0 = fpp;
    let mut t_old = 0.0;
    let mut dt_min = if fpp > 0.0 { -fp / fpp } else { f64::INFINITY };
    let mut next = 0;
    while next < breaks.len() {
        let (t, bi) = breaks[next];
        let dt = t - t_old;
        if dt_min < dt {
            break;
        }
        // Move to the breakpoint and fix variable `bi` at its bound.
        let xb = if d[bi] > 0.0 { b.upper[bi] } else { b.lower[bi] };
        let zb = xb - x[bi];
        xc[bi] = xb;
        for (ci, pi) in c.iter_mut().zip(&p) {
            *ci += dt * pi;
        }
        let gb = g[bi];
        let wb = mem.w_row(bi);
        let mc = mat_vec(&mem.m, &c);
        let mp = mat_vec(&mem.m, &p);
        let mw = mat_vec(&mem.m, &wb);
        fp += dt * fpp + gb * gb + th * gb * zb - gb * dot(&wb, &mc);
        fpp += -th * gb * gb - 2.0 * gb * dot(&wb, &mp) - gb * gb * dot(&wb, &mw);
        fpp = fpp.max(f64::EPSILON * fpp0.abs());
        for (pi, wi) in p.iter_mut().zip(&wb) {
            *pi += gb * wi;
        }
        d[bi] = 0.0;
        dt_min = if fpp > 0.0 { -fp / fpp } else { f64::INFINITY };
        t_old = t;
        next += 1;
    }
    let dt_min = if dt_min.is_finite() { dt_min.max(0.0) } else { 0.0 };
    let t_final = t_old + dt_min;
    for i in 0..n {
        if d[i] != 0.0 {
            xc[i] = (x[i] + t_final * d[i]).clamp(b.lower[i], b.upper[i]);
        }
    }
    for (ci, pi) in c.iter_mut().zip(&p) {
        *ci += dt_min * pi;
    }
    (xc, c)
}

/// Minimizes the model over the variables free at the Cauchy point and
/// projects the result back into the box.
fn subspace_min(
    x: &[f64],
    g: &[f64],
    b: &BoxBounds,
    mem: &Memory,
    xc: &[f64],
    c: &[f64],
) -> Vec<f64> {
    let k = mem.len();
    if k == 0 {
        return xc.to_vec();
    }
    let th = mem.theta;
    let free: Vec<usize> = (0..x.len())
        .filter(|&i| b.lower[i] < xc[i] && xc[i] < b.upper[i])
        .collect();
    if free.is_empty() {
        return xc.to_vec();
    }
    let mc = mat_vec(&mem.m, c);
    let rows: Vec<Vec<f64>> = free.iter().map(|&i| mem.w_row(i)).collect();
    let r: Vec<f64> = free
        .iter()
        .zip(&rows)
        .map(|(&i, w)| g[i] + th * (xc[i] - x[i]) - dot(w, &mc))
        .collect();
    let mut wzr = vec![0.0; 2 * k];
    let mut wzzw = vec![vec![0.0; 2 * k]; 2 * k];
    for (w, ri) in rows.iter().zip(&r) {
        for a in 0..2 * k {
            wzr[a] += w[a] * ri;
            for bb in 0..2 * k {
                wzzw[a][bb] += w[a] * w[bb];
            }
        }
    }
    let v = mat_vec(&mem.m, &wzr);
    let mw = mem.m.iter().map(|row| {
        (0..2 * k)
            .map(|j| (0..2 * k).map(|l| row[l] * wzzw[l][j]).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    let nmat: Vec<Vec<f64>> = mw
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, val)| f64::from(u8::from(i == j)) - val / th)
                .collect()
        })
        .collect();
    let rhs = Mat::from_fn(2 * k, 1, |i, _| v[i]);
    let sol = dense(&nmat).partial_piv_lu().solve(&rhs);
    let vp: Vec<f64> = (0..2 * k).map(|i| sol[(i, 0)]).collect();
    if !finite_all(&vp) {
        return xc.to_vec();
    }
    let mut xbar = xc.to_vec();
    for ((&i, w), ri) in free.iter().zip(&rows).zip(&r) {
        let du = -ri / th - dot(w, &vp) / (th * th);
        xbar[i] = (xc[i] + du).clamp(b.lower[i], b.upper[i]);
    }
    xbar
}

/// Largest `a` with `x + a d` inside the box.
fn max_step(x: &[f64], d: &[f64], b: &BoxBounds) -> f64 {
    let mut a = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 {
            a = a.min((b.upper[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            a = a.min((b.lower[i] - x[i]) / d[i]);
        }
    }
    a.max(0.0)
}

/// Minimizer of the cubic interpolating `(a, fa, ga)` and `(b, fb, gb)`,
/// safeguarded into the interior of the bracket.
fn cubic_step(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (lo, hi) = (a.min(b), a.max(b));
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    let t = if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    } else {
        f64::NAN
    };
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        0.5 * (lo + hi)
    }
}

struct Point {
    x: Vec<f64>,
    sample: Sample,
}

/// Maximizes `evaluate` over the box starting from the projection of `x0`.
///
/// `evaluate` receives feasible points only. Internally the negated
/// objective is minimized.
pub fn lbfgsb_maximize<E, F>(
    mut evaluate: F,
    x0: &[f64],
    bounds: &BoxBounds,
    settings: &OptimizerSettings,
    keep_snapshots: bool,
) -> Result<OptimizationResult, OptimizeError<E>>
where
    F: FnMut(&[f64]) -> Result<Sample, E>,
{
    if x0.len() != bounds.len() {
        return Err(OptimizeError::Invalid("initial point length mismatch".into()));
    }
    if settings.memory == 0 {
        return Err(OptimizeError::Invalid("memory must be at least 1".into()));
    }
    let fevals = std::cell::Cell::new(0);
    let mut call = |x: &[f64], iteration: usize| -> Result<Sample, OptimizeError<E>> {
        fevals.set(fevals.get() + 1);
        let s = evaluate(x).map_err(|source| OptimizeError::Evaluation { iteration, source })?;
        if !s.objective.is_finite() || s.gradient.len() != x.len() || !finite_all(&s.gradient) {
            return Err(OptimizeError::NonFinite { iteration });
        }
        Ok(s)
    };
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let sample = call(&x, 0)?;
    let mut cur = Point { x, sample };
    let mut mem = Memory::new(settings.memory);
    let mut trace = OptimizationTrace {
        records: Vec::new(),
        stop_reason: None,
        snapshots: Vec::new(),
    };
    let record = |trace: &mut OptimizationTrace, p: &Point, it: usize, step: f64, fe: usize| {
        trace.records.push(TraceRecord {
            iteration: it,
            objective: p.sample.objective,
            power: p.sample.power,
            cost: p.sample.cost,
            pg_norm: bounds.projected_gradient_norm(&p.x, &p.sample.gradient),
            step,
            fevals: fe,
        });
    };
    record(&mut trace, &cur, 0, 0.0, 1);
    if keep_snapshots {
        trace.snapshots.push(cur.x.clone());
    }
    let mut iteration = 0;
    let reason = loop {
        // Minimization variables: f = -objective, g = -gradient.
        let g: Vec<f64> = cur.sample.gradient.iter().map(|v| -v).collect();
        if bounds.projected_gradient_norm(&cur.x, &cur.sample.gradient) <= settings.pgtol {
            break StopReason::Pgtol;
        }
        if iteration >= settings.max_iter {
            break StopReason::MaxIter;
        }
        iteration += 1;
        let mut direction = None;
        for attempt in 0..2 {
            let (xc, c) = cauchy_point(&cur.x, &g, bounds, &mem);
            let xbar = subspace_min(&cur.x, &g, bounds, &mem, &xc, &c);
            let d: Vec<f64> = xbar.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
            if dot(&d, &g) < 0.0 {
                direction = Some(d);
                break;
            }
            // A non-descent model step means stale curvature pairs.
            if attempt == 0 {
                mem.clear();
            }
        }
        let Some(d) = direction else {
            break StopReason::Pgtol;
        };
        let stpmax = max_step(&cur.x, &d, bounds);
        let dnorm = dot(&d, &d).sqrt();
        let first = if mem.len() == 0 {
            (1.0 / dnorm).min(stpmax).min(1.0)
        } else {
            1.0f64.min(stpmax)
        };
        let f0 = -cur.sample.objective;
        let dg0 = dot(&g, &d);
        let outcome = line_search(&mut call, &cur.x, &d, bounds, f0, dg0, first, stpmax, settings, iteration)?;
        let Some((next, step)) = outcome else {
            break StopReason::LineSearchFailed;
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next
            .sample
            .gradient
            .iter()
            .zip(&cur.sample.gradient)
            .map(|(a, b)| b - a)
            .collect();
        mem.push(s, y);
        let (fa, fb) = (cur.sample.objective, next.sample.objective);
        cur = next;
        record(&mut trace, &cur, iteration, step, fevals.get());
        if keep_snapshots {
            trace.snapshots.push(cur.x.clone());
        }
        if settings.ftol > 0.0 && (fb - fa).abs() <= settings.ftol * fa.abs().max(fb.abs()).max(1.0) {
            break StopReason::Ftol;
        }
    };
    trace.stop_reason = Some(reason);
    Ok(OptimizationResult {
        objective: cur.sample.objective,
        gradient: cur.sample.gradient,
        x: cur.x,
        trace,
        stop_reason: reason,
    })
}

/// Strong Wolfe search for `phi(a) = f(x + a d)` on `(0, stpmax]`. Returns
/// `None` if no point with sufficient decrease was found.
#[allow(clippy::too_many_arguments)]
fn line_search<E, C>(
    call: &mut C,
    x: &[f64],
    d: &[f64],
    bounds: &BoxBounds,
    f0: f64,
    dg0: f64,
    first: f64,
    stpmax: f64,
    st: &OptimizerSettings,
    iteration: usize,
) -> Result<Option<(Point, f64)>, OptimizeError<E>>
where
    C: FnMut(&[f64], usize) -> Result<Sample, OptimizeError<E>>,
{
    let mut eval = |a: f64| -> Result<(Point, f64, f64), OptimizeError<E>> {
        let mut xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        bounds.project(&mut xa);
        let sample = call(&xa, iteration)?;
        let f = -sample.objective;
        let dg = -dot(&sample.gradient, d);
        Ok((Point { x: xa, sample }, f, dg))
    };
    // Once the required decrease is below the evaluation noise of `f0`, a
    // change within that noise is accepted (approximate Wolfe), so the
    // curvature condition can still drive the gradient down.
    let noise = 1e-14 * f0.abs();
    let armijo = |a: f64, f: f64| {
        let wanted = st.c1 * a * dg0;
        f <= f0 + wanted || (-wanted <= 10.0 * noise && f <= f0 + noise)
    };
    let curvature = |dg: f64| dg.abs() <= -st.c2 * dg0;
    let mut best: Option<(Point, f64, f64)> = None;
    let keep = |best: &mut Option<(Point, f64, f64)>, p: Point, a: f64, f: f64| {
        if armijo(a, f) && best.as_ref().is_none_or(|b| f < b.2) {
            *best = Some((p, a, f));
        }
    };
    let (mut a_prev, mut f_prev, mut g_prev) = (0.0, f0, dg0);
    let mut a = first;
    let mut evals = 0;
    // Bracketing phase.
    let (mut lo, mut hi) = loop {
        let (p, f, dg) = eval(a)?;
        evals += 1;
        if !armijo(a, f) || (evals > 1 && f >= f_prev) {
            keep(&mut best, p, a, f);
            break ((a_prev, f_prev, g_prev), (a, f, dg));
        }
        if curvature(dg) {
            return Ok(Some((p, a)));
        }
        if dg >= 0.0 {
            keep(&mut best, p, a, f);
            break ((a, f, dg), (a_prev, f_prev, g_prev));
        }
        if a >= stpmax || evals >= st.max_line_search {
            // Sufficient decrease holds and the segment ends here.
            return Ok(Some((p, a)));
        }
        keep(&mut best, p, a, f);
        (a_prev, f_prev, g_prev) = (a, f, dg);
        a = (4.0 * a).min(stpmax);
    };
    // Zoom phase: `lo` satisfies sufficient decrease and has the lower value.
    while evals < st.max_line_search {
        let a = cubic_step(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2);
        if (hi.0 - lo.0).abs() <= 1e-12 * lo.0.abs().max(hi.0.abs()) {
            break;
        }
        let (p, f, dg) = eval(a)?;
        evals += 1;
        if !armijo(a, f) || f >= lo.1 {
            keep(&mut best, p, a, f);
            hi = (a, f, dg);
        } else {
            if curvature(dg) {
                return Ok(Some((p, a)));
            }
            if dg * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            keep(&mut best, p, a, f);
            lo = (a, f, dg);
        }
    }
    Ok(best.map(|(p, a, _)| (p, a)))
}

/// Inner product used for projection, stopping and the quasi-Newton model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnerProduct {
    /// Raw coefficient vectors.
    #[default]
    Euclidean,
    /// Diagonal (lumped) mass matrix of the farm: the optimizer works on
    /// `z_i = sqrt(w_i) d_i` with `w_i` the integral of basis function `i`.
    LumpedMass,
}

/// Outcome of [`run_design_optimization`].
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRun {
    pub density: DensityField,
    pub breakdown: ProfitBreakdown,
    /// Full-length gradient at the final density.
    pub gradient: Vec<f64>,
    pub trace: OptimizationTrace,
    pub stop_reason: StopReason,
    pub forward_solves: usize,
    pub adjoint_solves: usize,
}

/// Maximizes the profit of `problem` over `0 <= d <= dbar`.
///
/// Only vertices with a positive bound are optimized. The start defaults to
/// `dbar / 2`.
pub fn run_design_optimization(
    problem: &DesignProblem,
    initial: Option<&DensityField>,
    settings: &OptimizerSettings,
    inner: InnerProduct,
) -> Result<DesignRun, OptimizeError<AdjointError>> {
    let all = vec![true; problem.domain.upper.len()];
    run_design_optimization_partial(problem, initial, settings, inner, &all)
}

/// Like [`run_design_optimization`], but only vertices flagged in `active`
/// are optimized; the others keep their initial density.
pub fn run_design_optimization_partial(
    problem: &DesignProblem,
    initial: Option<&DensityField>,
    settings: &OptimizerSettings,
    inner: InnerProduct,
    active: &[bool],
) -> Result<DesignRun, OptimizeError<AdjointError>> {
    let upper = &problem.domain.upper;
    if active.len() != upper.len() {
        return Err(OptimizeError::Invalid("active mask length mismatch".into()));
    }
    let controls: Vec<usize> = (0..upper.len()).filter(|&i| upper[i] > 0.0 && active[i]).collect();
    if controls.is_empty() {
        return Err(OptimizeError::Invalid("no free design variables".into()));
    }
    let scale: Vec<f64> = match inner {
        InnerProduct::Euclidean => vec![1.0; controls.len()],
        InnerProduct::LumpedMass => {
            let w = problem.sw.spaces().p1_weights(Some(problem.domain.cells.as_slice()));
            controls.iter().map(|&i| w[i].sqrt()).collect()
        }
    };
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(OptimizeError::Invalid("farm vertex with zero weight".into()));
    }
    let start: Vec<f64> = match initial {
        Some(d) => d.values().to_vec(),
        None => upper.iter().map(|u| 0.5 * u).collect(),
    };
    if start.len() != upper.len() {
        return Err(OptimizeError::Invalid("initial density length mismatch".into()));
    }
    let bounds = BoxBounds::nonnegative(
        controls.iter().zip(&scale).map(|(&i, s)| upper[i] * s).collect(),
    )
    .map_err(OptimizeError::Invalid)?;
    let expand = |z: &[f64]| {
        let mut d = start.clone();
        for ((&i, zi), s) in controls.iter().zip(z).zip(&scale) {
            // Clamp away the rounding of the scaling round trip.
            d[i] = (zi / s).clamp(0.0, upper[i]);
        }
        d
    };
    let z0: Vec<f64> = controls.iter().zip(&scale).map(|(&i, s)| start[i] * s).collect();
    let result = lbfgsb_maximize(
        |z: &[f64]| {
            let e = problem.evaluate(&expand(z), true)?;
            let g = e.gradient.expect("requested");
            Ok(Sample {
                objective: e.breakdown.profit,
                gradient: controls.iter().zip(&scale).map(|(&i, s)| g[i] / s).collect(),
                power: e.breakdown.power,
                cost: e.breakdown.cost,
            })
        },
        &z0,
        &bounds,
        settings,
        false,
    )?;
    let density = problem
        .density(&expand(&result.x))
        .map_err(|e| OptimizeError::Evaluation { iteration: 0, source: e })?;
    let mut gradient = vec![0.0; upper.len()];
    for ((&i, g), s) in controls.iter().zip(&result.gradient).zip(&scale) {
        gradient[i] = g * s;
    }
    let last = result.trace.records.last().expect("initial record");
    let turbines = turbine_count(&density, problem.sw.spaces());
    let breakdown = ProfitBreakdown {
        power: last.power,
        cost: last.cost,
        profit: last.objective,
        turbines,
        cost_coefficient: cost_coefficient(
            &problem.functional.spec,
            &problem.functional.econ,
            problem.sw.physical().density,
        ),
    };
    let (forward_solves, adjoint_solves) = problem.solve_counts();
    Ok(DesignRun {
        density,
        breakdown,
        gradient,
        trace: result.trace,
        stop_reason: result.stop_reason,
        forward_solves,
        adjoint_solves,
    })
}
