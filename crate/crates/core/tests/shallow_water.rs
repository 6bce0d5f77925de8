use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidalfarm::mesh::{generate_rectangle, BoundaryEdge, Mesh, Rect, RectangleSpec};
use tidalfarm::shallow_water::*;

const FARM: Rect = Rect {
    x0: 1500.0,
    y0: 1500.0,
    x1: 2500.0,
    y1: 2500.0,
};
/// Friction coefficient of the densest admissible farm: C_T A_T / 2 / 40^2.
const FULL_FARM_FRICTION: f64 = 0.6 * 314.159 / 2.0 / 1600.0;

fn inflow_bcs() -> BoundaryConditionSet {
    BoundaryConditionSet::new()
        .with("west", Prescription::Velocity([TimeSeries::Constant(2.0), TimeSeries::Constant(0.0)]))
        .with("east", Prescription::Elevation(TimeSeries::Constant(0.0)))
        .with("north", Prescription::FreeSlip)
        .with("south", Prescription::FreeSlip)
}

fn channel_mesh(coarse: f64, fine: f64) -> Arc<Mesh> {
    let spec = RectangleSpec::new(4000.0, 4000.0, coarse)
        .refined(FARM, fine)
        .with_region(FARM, 1);
    Arc::new(generate_rectangle(&spec).unwrap())
}

fn channel(coarse: f64, fine: f64) -> ShallowWater {
    let mesh = channel_mesh(coarse, fine);
    let phys = PhysicalParams::uniform(&mesh, 50.0);
    ShallowWater::new(mesh, phys, inflow_bcs(), SolverParams::default()).unwrap()
}

/// Constant friction `c` on the vertices of the farm region.
fn farm_friction(sw: &ShallowWater, c: f64) -> FrictionField {
    let mesh = sw.mesh();
    let mut f = FrictionField::zero(sw.spaces().num_p1());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if mesh.regions()[t] == 1 {
            for &v in tri {
                f.nodal[v] = c;
            }
        }
    }
    f
}

fn farm_vertices(sw: &ShallowWater) -> Vec<usize> {
    let mut on = vec![false; sw.mesh().num_vertices()];
    for (t, tri) in sw.mesh().triangles().iter().enumerate() {
        if sw.mesh().regions()[t] == 1 {
            for &v in tri {
                on[v] = true;
            }
        }
    }
    (0..on.len()).filter(|&v| on[v]).collect()
}

fn speed(s: &FlowState, v: usize) -> f64 {
    let u = s.velocity(v);
    (u[0] * u[0] + u[1] * u[1]).sqrt()
}

fn closed_basin(width: f64, height: f64, size: f64) -> ShallowWater {
    let mesh = Arc::new(generate_rectangle(&RectangleSpec::new(width, height, size)).unwrap());
    let mut phys = PhysicalParams::uniform(&mesh, 50.0);
    phys.background_friction = 0.0;
    let bcs = ["east", "west", "north", "south"]
        .iter()
        .fold(BoundaryConditionSet::new(), |b, t| b.with(t, Prescription::FreeSlip));
    ShallowWater::new(mesh, phys, bcs, SolverParams::default()).unwrap()
}

#[test]
fn jacobian_matches_finite_differences() {
    let sw = channel(1000.0, 500.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = sw.num_dofs();
    let mut x = sw.zero_state(0.0);
    let n2 = x.n_velocity;
    for i in 0..n {
        x.values[i] = if i < 2 * n2 { rng.gen_range(-2.0..2.0) } else { rng.gen_range(-0.5..0.5) };
    }
    let mut prev = x.clone();
    for v in prev.values.iter_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    let mut fr = FrictionField::zero(sw.spaces().num_p1());
    for c in fr.nodal.iter_mut() {
        *c = rng.gen_range(0.0..0.1);
    }
    let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for previous in [None, Some((&prev, 30.0))] {
        let (_, j) = sw.assemble(&x, previous, &fr, true);
        let jv = j.unwrap().mul_vec(&dir);
        let h = 1e-6;
        let shift = |s: f64| {
            let mut y = x.clone();
            for (a, d) in y.values.iter_mut().zip(&dir) {
                *a += s * d;
            }
            sw.assemble(&y, previous, &fr, false).0
        };
        let (rp, rm) = (shift(h), shift(-h));
        let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let err = norm(&jv.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>()) / norm(&fd);
        assert!(err <= 1e-6, "relative error {err}");
    }
}

#[test]
fn assembly_at_rest_is_finite() {
    let sw = channel(1000.0, 500.0);
    let x = sw.zero_state(0.0);
    let fr = farm_friction(&sw, FULL_FARM_FRICTION);
    let (r, j) = sw.assemble(&x, None, &fr, true);
    assert!(r.iter().all(|v| v.is_finite()));
    let j = j.unwrap();
    let ones = vec![1.0; sw.num_dofs()];
    assert!(j.mul_vec(&ones).iter().all(|v| v.is_finite()));
}

#[test]
fn closed_basin_at_rest_stays_at_rest() {
    let sw = closed_basin(1000.0, 500.0, 100.0);
    let fr = FrictionField::zero(sw.spaces().num_p1());
    let steady = sw.solve_steady(&fr, None).unwrap();
    assert!(steady.values.iter().all(|v| *v == 0.0));
    let stepping = TimeStepping {
        dt: 7.0,
        t_start: 0.0,
        t_end: 35.0,
    };
    let traj = sw.solve_transient(&fr, &stepping, &sw.zero_state(0.0)).unwrap();
    assert_eq!(traj.len(), 6);
    assert!(traj.iter().all(|s| s.values.iter().all(|v| *v == 0.0)));
}

/// Steady 1D momentum balance `u u' + g eta' = -c_b u^2 / H` with `u H = q`,
/// solved by RK4 shooting on the inlet elevation so that `eta(L) = 0`.
fn one_d_oracle(u_in: f64, depth: f64, cb: f64, g: f64, length: f64, xs: &[f64]) -> Vec<f64> {
    const STEPS: usize = 4000;
    let dx = length / STEPS as f64;
    // Speeds at the grid points and the outlet elevation.
    let profile = |eta0: f64| -> (Vec<f64>, f64) {
        let q = u_in * (depth + eta0);
        let slope = |eta: f64| {
            let h = depth + eta;
            let u = q / h;
            -cb * u * u / (h * (g - u * u / h))
        };
        let mut eta = eta0;
        let mut speeds = vec![u_in];
        for _ in 0..STEPS {
            let k1 = slope(eta);
            let k2 = slope(eta + 0.5 * dx * k1);
            let k3 = slope(eta + 0.5 * dx * k2);
            let k4 = slope(eta + dx * k3);
            eta += dx / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            speeds.push(q / (depth + eta));
        }
        (speeds, eta)
    };
    let (mut lo, mut hi) = (0.0, 5.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if profile(mid).1 > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let speeds = profile(0.5 * (lo + hi)).0;
    xs.iter().map(|x| speeds[(x / dx).round() as usize]).collect()
}

#[test]
fn centerline_speed_matches_one_dimensional_balance() {
    let sw = channel(250.0, 100.0);
    let s = sw.solve_steady(&FrictionField::zero(sw.spaces().num_p1()), None).unwrap();
    let mesh = sw.mesh();
    let xs = [250.0, 1000.0, 2000.0, 3000.0, 3750.0];
    let oracle = one_d_oracle(2.0, 50.0, 0.0025, 9.81, 4000.0, &xs);
    for (x, expected) in xs.iter().zip(&oracle) {
        // Closest vertex to the centerline point.
        let v = (0..mesh.num_vertices())
            .min_by(|&a, &b| {
                let d = |v: usize| (mesh.vertices()[v][0] - x).hypot(mesh.vertices()[v][1] - 2000.0);
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        let got = speed(&s, v);
        assert!(
            (got - expected).abs() <= 0.05 * expected,
            "x = {x}: speed {got}, oracle {expected}"
        );
    }
}

#[test]
fn farm_slows_the_flow_at_every_farm_vertex() {
    let sw = channel(250.0, 100.0);
    let free = sw.solve_steady(&FrictionField::zero(sw.spaces().num_p1()), None).unwrap();
    let farm = sw.solve_steady(&farm_friction(&sw, FULL_FARM_FRICTION), None).unwrap();
    for v in farm_vertices(&sw) {
        assert!(speed(&farm, v) < speed(&free, v), "vertex {v}");
    }
}

#[test]
fn steady_flux_balances() {
    let sw = channel(250.0, 100.0);
    for c in [0.0, FULL_FARM_FRICTION] {
        let fr = farm_friction(&sw, c);
        let s = sw.solve_steady(&fr, None).unwrap();
        let q = sw.boundary_fluxes(&s, &fr);
        let inflow = -q["west"];
        assert!(inflow > 0.0);
        let net: f64 = q.values().sum();
        assert!(net.abs() <= 1e-6 * inflow, "net {net}, inflow {inflow}");
    }
}

#[test]
fn converged_residual_is_below_tolerance() {
    let sw = channel(500.0, 200.0);
    let fr = farm_friction(&sw, FULL_FARM_FRICTION);
    let start = {
        let mut s = sw.zero_state(0.0);
        sw.apply_dirichlet(&mut s, 0.0);
        s
    };
    let r0 = norm(&sw.assemble(&start, None, &fr, false).0);
    let s = sw.solve_steady(&fr, None).unwrap();
    let r = norm(&sw.assemble(&s, None, &fr, false).0);
    assert!(r <= 1e-10 * r0, "residual {r:e} from {r0:e}");
}

/// Reflects a mesh about `y = h / 2`, flipping orientation and swapping the
/// north and south tags.
fn mirror(mesh: &Mesh, h: f64) -> Mesh {
    let vertices = mesh.vertices().iter().map(|p| [p[0], h - p[1]]).collect();
    let triangles = mesh.triangles().iter().map(|t| [t[0], t[2], t[1]]).collect();
    let boundary = mesh
        .boundary_edges()
        .iter()
        .map(|e| BoundaryEdge {
            vertices: [e.vertices[1], e.vertices[0]],
            tag: match e.tag.as_str() {
                "north" => "south".to_string(),
                "south" => "north".to_string(),
                other => other.to_string(),
            },
        })
        .collect();
    Mesh::new(vertices, triangles, mesh.regions().to_vec(), boundary).unwrap()
}

#[test]
fn mirrored_setup_gives_mirrored_flow() {
    let a = channel(250.0, 100.0);
    let mesh_b = Arc::new(mirror(a.mesh(), 4000.0));
    let b = ShallowWater::new(
        mesh_b.clone(),
        PhysicalParams::uniform(&mesh_b, 50.0),
        inflow_bcs(),
        SolverParams::default(),
    )
    .unwrap();
    let sa = a.solve_steady(&farm_friction(&a, FULL_FARM_FRICTION), None).unwrap();
    let sb = b.solve_steady(&farm_friction(&b, FULL_FARM_FRICTION), None).unwrap();
    let scale = sa.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in 0..a.mesh().num_vertices() {
        let (ua, ub) = (sa.velocity(v), sb.velocity(v));
        assert!((ua[0] - ub[0]).abs() <= 1e-8 * scale);
        assert!((ua[1] + ub[1]).abs() <= 1e-8 * scale);
        assert!((sa.eta()[v] - sb.eta()[v]).abs() <= 1e-8 * scale);
    }
}

#[test]
fn seiche_period_matches_linear_theory() {
    let (length, depth, g): (f64, f64, f64) = (1000.0, 50.0, 9.81);
    let sw = closed_basin(length, 200.0, 50.0);
    let period = 2.0 * length / (g * depth).sqrt();
    let mut init = sw.zero_state(0.0);
    for (v, p) in sw.mesh().vertices().iter().enumerate() {
        init.eta_mut()[v] = 0.01 * (std::f64::consts::PI * p[0] / length).cos();
    }
    let stepping = TimeStepping {
        dt: period / 100.0,
        t_start: 0.0,
        t_end: 2.6 * period,
    };
    let traj = sw
        .solve_transient(&FrictionField::zero(sw.spaces().num_p1()), &stepping, &init)
        .unwrap();
    let corner = (0..sw.mesh().num_vertices())
        .find(|&v| sw.mesh().vertices()[v] == [0.0, 0.0])
        .unwrap();
    let mut crossings = Vec::new();
    for w in traj.windows(2) {
        let (a, b) = (w[0].eta()[corner], w[1].eta()[corner]);
        if a.signum() != b.signum() && a != 0.0 {
            crossings.push(w[0].time + (w[1].time - w[0].time) * a / (a - b));
        }
    }
    assert!(crossings.len() >= 4, "{crossings:?}");
    let measured = 2.0 * (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
    assert!(
        (measured - period).abs() <= 0.05 * period,
        "measured {measured}, expected {period}"
    );
}

#[test]
fn steady_state_is_a_fixed_point_of_time_stepping() {
    let sw = channel(500.0, 200.0);
    let fr = farm_friction(&sw, FULL_FARM_FRICTION);
    let steady = sw.solve_steady(&fr, None).unwrap();
    let stepping = TimeStepping {
        dt: 300.0,
        t_start: 0.0,
        t_end: 900.0,
    };
    let traj = sw.solve_transient(&fr, &stepping, &steady).unwrap();
    let scale = steady.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for s in &traj[1..] {
        let diff = s.values.iter().zip(&steady.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-8 * scale, "time {}: deviation {diff:e}", s.time);
    }
}

fn kinetic_energy_on(sw: &ShallowWater, s: &FlowState, support: &FrictionField) -> f64 {
    let mut e = 0.0;
    for (t, tri) in sw.mesh().triangles().iter().enumerate() {
        if tri.iter().all(|&v| support.nodal[v] > 0.0) {
            sw.for_each_point(t, s, |p| {
                e += 0.5 * p.weight * p.total_depth * (p.u[0] * p.u[0] + p.u[1] * p.u[1]);
            });
        }
    }
    e
}

// Energy is measured where the friction acts. Over the whole channel it can
// grow: the fixed inflow is pushed into a faster bypass and the raised inlet
// elevation carries more flux.
#[test]
fn more_friction_never_adds_kinetic_energy() {
    let sw = channel(250.0, 100.0);
    let support = farm_friction(&sw, 1.0);
    let mut last = f64::INFINITY;
    for fraction in [0.0, 0.25, 0.5, 1.0] {
        let s = sw.solve_steady(&farm_friction(&sw, fraction * FULL_FARM_FRICTION), None).unwrap();
        let e = kinetic_energy_on(&sw, &s, &support);
        assert!(e <= last, "fraction {fraction}: {e} > {last}");
        last = e;
    }
}

#[test]
fn farm_power_converges_under_refinement() {
    let power = |fine: f64| {
        let sw = channel(250.0, fine);
        let fr = farm_friction(&sw, 0.5 * FULL_FARM_FRICTION);
        let s = sw.solve_steady(&fr, None).unwrap();
        let mut p = 0.0;
        for t in 0..sw.mesh().num_triangles() {
            if sw.mesh().regions()[t] != 1 {
                continue;
            }
            let c = fr.cell_values(t, sw.mesh().triangles()[t]);
            sw.for_each_point(t, &s, |q| {
                let ct: f64 = (0..3).map(|k| c[k] * q.psi[k]).sum();
                p += q.weight * 1000.0 * ct * q.speed.powi(3);
            });
        }
        p
    };
    let p: Vec<f64> = [100.0, 50.0, 25.0].iter().map(|&h| power(h)).collect();
    let (d1, d2) = ((p[1] - p[0]).abs(), (p[2] - p[1]).abs());
    assert!(d2 < d1, "powers {p:?}");
}

#[test]
fn trajectory_cap_is_enforced() {
    let mut sw = closed_basin(1000.0, 500.0, 250.0);
    sw.set_params(SolverParams {
        max_states: 3,
        ..SolverParams::default()
    });
    let stepping = TimeStepping {
        dt: 1.0,
        t_start: 0.0,
        t_end: 10.0,
    };
    let err = sw
        .solve_transient(&FrictionField::zero(sw.spaces().num_p1()), &stepping, &sw.zero_state(0.0))
        .unwrap_err();
    assert!(matches!(err, SolverError::TrajectoryTooLong { needed: 11, cap: 3 }));
}
