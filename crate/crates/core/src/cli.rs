//! Command-line driver: `validate`, `simulate`, `optimize`, `convert` and
//! `taylor-test` on a scenario file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{export_gradient, taylor_test, AdjointError};
use crate::farm::{
    density_to_friction, export_density, import_density, summary_report, DensityField, ProfitBreakdown,
};
use crate::layout::{convert_density, evaluate_discrete_layout, TurbineLayout};
use crate::optimizer::run_design_optimization;
use crate::scenario::{Built, ModeSection, Scenario, ScenarioError};
use crate::shallow_water::{FlowState, FrictionField, ShallowWater};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "tidalfarm", version, about = "Tidal farm density optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario file and report the first violated rule.
    Validate(Common),
    /// Solve the flow for a given density (zero by default).
    Simulate(Common),
    /// Optimize the turbine density.
    Optimize(Common),
    /// Turn a density field into turbine positions.
    Convert(Common),
    /// Check the adjoint gradient with a Taylor remainder test.
    TaylorTest(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory; defaults to the scenario's `output_dir` or `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the layout conversion.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for assembly.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, conflicts_with = "transient")]
    pub steady: bool,
    #[arg(long)]
    pub transient: bool,
    /// Density file for `simulate` and `convert`.
    #[arg(long)]
    pub density: Option<PathBuf>,
}

/// Writes artifacts and remembers their names for the manifest.
struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    fn new(dir: PathBuf) -> Result<Self, Error> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), Error> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn flow(&mut self, sw: &ShallowWater, stem: &str, state: &FlowState) -> Result<(), Error> {
        self.write(&format!("{stem}.txt"), &sw.field_table(state))?;
        self.write(&format!("{stem}.vtk"), &sw.field_vtk(state))
    }

    /// Writes `summary.txt` with the artifact manifest appended.
    fn finish(mut self, body: &str) -> Result<Vec<String>, Error> {
        self.written.push("summary.txt".into());
        let mut s = body.to_string();
        s.push_str("[artifacts]\n");
        for name in &self.written {
            let _ = writeln!(s, "{name}");
        }
        let path = self.dir.join("summary.txt");
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        Ok(self.written)
    }
}

fn header(command: &str, scenario: &Scenario, built: &Built) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "command = {command}");
    let mode = match built.stepping {
        None => "steady",
        Some(_) => "transient",
    };
    let _ = writeln!(s, "flow_mode = {mode}");
    let _ = writeln!(s, "vertices = {}", built.mesh.num_vertices());
    let _ = writeln!(s, "triangles = {}", built.mesh.num_triangles());
    let _ = writeln!(s, "dofs = {}", built.sw.num_dofs());
    if let Some(t) = &built.stepping {
        let _ = writeln!(s, "dt = {}", t.dt);
        let _ = writeln!(s, "steps = {}", t.num_steps());
    }
    let _ = writeln!(s, "layout_seed = {}", scenario.layout.seed);
    s
}

fn load(common: &Common) -> Result<(Scenario, Built, PathBuf), Error> {
    let mut scenario = Scenario::load(&common.scenario)?;
    if common.steady {
        scenario.set_mode(ModeSection::Steady);
    }
    if common.transient {
        scenario.set_mode(ModeSection::Transient);
    }
    if let Some(seed) = common.seed {
        scenario.layout.seed = seed;
    }
    let built = scenario.build()?;
    let out = common
        .out
        .clone()
        .or_else(|| scenario.output_dir.as_ref().map(|d| scenario.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((scenario, built, out))
}

fn read_density(path: &Path, built: &Built) -> Result<DensityField, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(import_density(&text, &built.mesh, built.require_domain()?)?)
}

fn trajectory(
    scenario: &Scenario,
    built: &Built,
    friction: &FrictionField,
) -> Result<Vec<FlowState>, Error> {
    Ok(match &built.stepping {
        None => vec![built.sw.solve_steady(friction, None)?],
        Some(stepping) => {
            let start = built.initial_state(stepping, scenario.flow.initial)?;
            built.sw.solve_transient(friction, stepping, &start)?
        }
    })
}

fn write_trajectory(out: &mut Output, sw: &ShallowWater, traj: &[FlowState], steady: bool) -> Result<(), Error> {
    if steady {
        return out.flow(sw, "flow_steady", &traj[0]);
    }
    for (n, state) in traj.iter().enumerate() {
        out.flow(sw, &format!("flow_{n:05}"), state)?;
    }
    Ok(())
}

fn flux_report(sw: &ShallowWater, state: &FlowState, friction: &FrictionField) -> String {
    let mut s = String::new();
    let fluxes = sw.boundary_fluxes(state, friction);
    for (tag, q) in &fluxes {
        let _ = writeln!(s, "flux_{tag}_m3s = {q}");
    }
    let _ = writeln!(s, "net_flux_m3s = {}", fluxes.values().sum::<f64>());
    s
}

fn simulate(common: &Common) -> Result<Vec<String>, Error> {
    let (scenario, built, dir) = load(common)?;
    let density = match (&common.density, &built.domain) {
        (Some(path), _) => Some(read_density(path, &built)?),
        (None, Some(domain)) => Some(DensityField::zeros(domain.clone())),
        (None, None) => None,
    };
    let friction = match &density {
        Some(d) => density_to_friction(d, &built.functional.spec),
        None => FrictionField::zero(built.sw.spaces().num_p1()),
    };
    let traj = trajectory(&scenario, &built, &friction)?;
    let breakdown = match &density {
        Some(d) => built.functional.evaluate(&built.sw, &traj, d),
        None => ProfitBreakdown {
            power: 0.0,
            cost: 0.0,
            profit: 0.0,
            turbines: 0.0,
            cost_coefficient: crate::farm::cost_coefficient(
                &built.functional.spec,
                &built.functional.econ,
                built.sw.physical().density,
            ),
        },
    };
    let mut out = Output::new(dir)?;
    write_trajectory(&mut out, &built.sw, &traj, built.stepping.is_none())?;
    let mut body = header("simulate", &scenario, &built);
    body.push_str(&summary_report(&breakdown));
    body.push_str(&flux_report(&built.sw, traj.last().expect("non-empty"), &friction));
    out.finish(&body)
}

fn optimize(common: &Common) -> Result<Vec<String>, Error> {
    let (scenario, built, dir) = load(common)?;
    let problem = built.design_problem(scenario.flow.initial)?;
    let initial = match &common.density {
        Some(path) => read_density(path, &built)?,
        None => DensityField::scaled_upper(problem.domain.clone(), scenario.optimizer.initial_fraction),
    };
    let run = run_design_optimization(
        &problem,
        Some(&initial),
        &scenario.optimizer_settings(),
        scenario.inner_product(),
    )?;
    let (traj, _) = problem.forward(&run.density)?;
    let friction = density_to_friction(&run.density, &built.functional.spec);
    let mut out = Output::new(dir)?;
    out.write("trace.csv", &run.trace.to_csv())?;
    out.write("density.txt", &export_density(&built.mesh, &run.density))?;
    out.write("gradient.txt", &export_gradient(&built.mesh, &run.gradient))?;
    write_trajectory(&mut out, &built.sw, &traj, built.stepping.is_none())?;
    let mut body = header("optimize", &scenario, &built);
    body.push_str(&summary_report(&run.breakdown));
    let _ = writeln!(body, "stop_reason = {}", run.stop_reason);
    let _ = writeln!(body, "iterations = {}", run.trace.records.last().map_or(0, |r| r.iteration));
    let _ = writeln!(body, "forward_solves = {}", run.forward_solves);
    let _ = writeln!(body, "adjoint_solves = {}", run.adjoint_solves);
    body.push_str(&flux_report(&built.sw, traj.last().expect("non-empty"), &friction));
    out.finish(&body)
}

fn convert(common: &Common) -> Result<Vec<String>, Error> {
    let (scenario, built, dir) = load(common)?;
    let path = common.density.clone().unwrap_or_else(|| dir.join("density.txt"));
    let density = read_density(&path, &built)?;
    let spec = built.functional.spec;
    let layout = convert_density(
        &built.mesh,
        &density,
        &spec,
        scenario.layout.seed,
        scenario.layout.proposal_budget,
    )?;
    let mut out = Output::new(dir)?;
    out.write("layout.txt", &layout.to_text())?;
    let mut body = header("convert", &scenario, &built);
    let _ = writeln!(body, "turbines_placed = {}", layout.len());
    if layout.len() > 1 {
        let _ = writeln!(body, "min_pairwise_distance_m = {}", layout.min_pairwise_distance());
    }
    if scenario.layout.evaluate {
        if built.stepping.is_some() {
            let _ = writeln!(body, "discrete_evaluation = skipped (steady flow only)");
        } else {
            body.push_str(&evaluate_layout(&scenario, &built, &density, &layout, &mut out)?);
        }
    }
    out.finish(&body)
}

/// Continuous and bump-friction power of a converted layout.
fn evaluate_layout(
    scenario: &Scenario,
    built: &Built,
    density: &DensityField,
    layout: &TurbineLayout,
    out: &mut Output,
) -> Result<String, Error> {
    let spec = built.functional.spec;
    let continuous_state = built
        .sw
        .solve_steady(&density_to_friction(density, &spec), None)?;
    let continuous = built
        .functional
        .evaluate(&built.sw, std::slice::from_ref(&continuous_state), density);
    let total = spec.friction_per_density() * continuous.turbines;
    let bumps = crate::layout::BumpFarm::new(layout, &built.mesh, total)?;
    let fine = Arc::new(bumps.refine_mesh(&built.mesh)?);
    let sw = ShallowWater::new(
        fine.clone(),
        scenario.physical_params(&fine),
        scenario.boundary_conditions(),
        scenario.solver_params(),
    )?;
    let guess = sw.interpolate_from(&built.sw, &continuous_state);
    let discrete = evaluate_discrete_layout(layout, &sw, total, Some(&guess))?;
    out.flow(&sw, "flow_discrete", &discrete.state)?;
    let mut s = String::new();
    let _ = writeln!(s, "continuous_power_W = {}", continuous.power);
    let _ = writeln!(s, "discrete_power_W = {}", discrete.power);
    let _ = writeln!(s, "discrete_power_MW = {:.6}", discrete.power / 1e6);
    if continuous.power > 0.0 {
        let _ = writeln!(s, "discrete_to_continuous = {}", discrete.power / continuous.power);
    }
    let _ = writeln!(s, "discrete_mesh_dofs = {}", sw.num_dofs());
    Ok(s)
}

fn taylor(common: &Common) -> Result<Vec<String>, Error> {
    let (scenario, built, dir) = load(common)?;
    let problem = built.design_problem(scenario.flow.initial)?;
    let upper = &problem.domain.upper;
    let t = &scenario.taylor;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let x: Vec<f64> = upper.iter().map(|u| u * t.base_fraction).collect();
    let dx: Vec<f64> = upper.iter().map(|u| u * rng.gen_range(-1.0..1.0)).collect();
    let eval = |v: &[f64], g: bool| -> Result<(f64, Option<Vec<f64>>), AdjointError> {
        let e = problem.evaluate(v, g)?;
        Ok((e.breakdown.profit, e.gradient))
    };
    let report = taylor_test(eval, &x, &dx, &t.steps)?;
    let mut out = Output::new(dir)?;
    out.write("taylor_report.txt", &report.to_text())?;
    let order = report.min_second_order();
    let mut body = header("taylor-test", &scenario, &built);
    let _ = writeln!(body, "min_second_order = {order}");
    let passed = report.passed(TAYLOR_REQUIRED_ORDER);
    let _ = writeln!(body, "passed = {passed}");
    let written = out.finish(&body)?;
    if !passed {
        return Err(Error::Check {
            code: "adjoint.taylor_failed",
            message: format!("second-order rate {order} is below {TAYLOR_REQUIRED_ORDER}"),
        });
    }
    Ok(written)
}

pub const TAYLOR_REQUIRED_ORDER: f64 = 1.9;

fn validate(common: &Common) -> Result<Vec<String>, Error> {
    let (_, built, _) = load(common)?;
    println!(
        "valid: {} vertices, {} triangles, {} dofs",
        built.mesh.num_vertices(),
        built.mesh.num_triangles(),
        built.sw.num_dofs()
    );
    Ok(Vec::new())
}

/// Runs one subcommand and returns the artifacts written.
pub fn run(cli: &Cli) -> Result<Vec<String>, Error> {
    let common = match &cli.command {
        Command::Validate(c)
        | Command::Simulate(c)
        | Command::Optimize(c)
        | Command::Convert(c)
        | Command::TaylorTest(c) => c,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(ScenarioError::Invalid {
                field: "--threads".into(),
                message: "must be at least 1".into(),
            }
            .into());
        }
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Validate(c) => validate(c),
        Command::Simulate(c) => simulate(c),
        Command::Optimize(c) => optimize(c),
        Command::Convert(c) => convert(c),
        Command::TaylorTest(c) => taylor(c),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match run(&cli) {
        Ok(written) => {
            for name in written {
                eprintln!("wrote {name}");
            }
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            1
        }
    }
}
