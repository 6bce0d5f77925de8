use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tidalfarm::farm::*;
use tidalfarm::fem::Spaces;
use tidalfarm::layout::*;
use tidalfarm::mesh::{generate_rectangle, Mesh, Rect, RectangleSpec};
use tidalfarm::shallow_water::*;

const TURBINE: TurbineSpec = TurbineSpec {
    thrust_coefficient: 0.6,
    cross_section: 314.159,
    min_distance: 40.0,
};

/// A mesh whose farm cells are the given labelled boxes.
fn farm_mesh(width: f64, height: f64, size: f64, boxes: &[(Rect, i32)]) -> Mesh {
    let mut spec = RectangleSpec::new(width, height, size);
    for (r, id) in boxes {
        spec = spec.with_region(*r, *id);
    }
    generate_rectangle(&spec).unwrap()
}

fn domain(mesh: &Mesh, regions: &[i32], max_density: f64) -> Arc<FarmDomain> {
    let depth = vec![50.0; mesh.num_vertices()];
    Arc::new(FarmDomain::from_regions(mesh, regions, max_density, &depth, &MaskRules::default()).unwrap())
}

fn uniform(dom: &Arc<FarmDomain>, fraction: f64) -> DensityField {
    DensityField::scaled_upper(dom.clone(), fraction)
}

/// Every turbine keeps `D_min` and sits in a farm cell.
fn check_layout(layout: &TurbineLayout, mesh: &Mesh, d: &DensityField) {
    let p = &layout.positions;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let dist = ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt();
            assert!(dist >= TURBINE.min_distance, "turbines {i} and {j} are {dist} apart");
        }
    }
    let locator = mesh.locator();
    for q in p {
        let (t, _) = locator.locate(*q).expect("inside the mesh");
        assert!(d.support()[t], "turbine at {q:?} outside the farm");
    }
}

#[test]
fn zero_density_gives_an_empty_layout() {
    let mesh = farm_mesh(200.0, 200.0, 20.0, &[(Rect::new(0.0, 0.0, 200.0, 200.0), 1)]);
    let dom = domain(&mesh, &[1], TURBINE.max_density());
    let layout = convert_density(&mesh, &DensityField::zeros(dom), &TURBINE, 1, DEFAULT_PROPOSAL_BUDGET).unwrap();
    assert!(layout.is_empty());
}

// Sequential random placement can jam: four turbines spread along the
// centreline leave no gap for a fifth. That shows up as a packing error.
#[test]
fn full_strip_holds_five_turbines() {
    let mesh = farm_mesh(200.0, 40.0, 10.0, &[(Rect::new(0.0, 0.0, 200.0, 40.0), 1)]);
    let dom = domain(&mesh, &[1], TURBINE.max_density());
    let d = uniform(&dom, 1.0);
    let mut jammed = 0;
    for seed in 0..200 {
        match convert_density(&mesh, &d, &TURBINE, seed, 50_000) {
            Ok(layout) => {
                assert_eq!(layout.len(), 5);
                check_layout(&layout, &mesh, &d);
            }
            Err(LayoutError::PackingInfeasible { placed: 4, target: 5, .. }) => jammed += 1,
            Err(e) => panic!("seed {seed}: {e}"),
        }
    }
    assert!(jammed <= 10, "{jammed} of 200 seeds jammed");
}

#[test]
fn two_equal_patches_share_the_turbines() {
    let left = Rect::new(0.0, 0.0, 100.0, 100.0);
    let right = Rect::new(300.0, 0.0, 400.0, 100.0);
    let mesh = farm_mesh(400.0, 100.0, 10.0, &[(left, 1), (right, 1)]);
    let dom = domain(&mesh, &[1], TURBINE.max_density());
    let d = uniform(&dom, 0.5);
    let n = turbine_count(&d, &Spaces::new(&mesh)).round();
    let (mut in_left, mut total) = (0usize, 0usize);
    for seed in 0..1000 {
        let layout = convert_density(&mesh, &d, &TURBINE, seed, DEFAULT_PROPOSAL_BUDGET).unwrap();
        assert_eq!(layout.len() as f64, n);
        in_left += layout.positions.iter().filter(|p| left.contains(**p)).count();
        total += layout.len();
    }
    let mean_left = in_left as f64 / 1000.0;
    let mean_right = (total - in_left) as f64 / 1000.0;
    for m in [mean_left, mean_right] {
        assert!((m - n / 2.0).abs() <= 0.05 * n / 2.0, "mean {m}, expected {}", n / 2.0);
    }
}

#[test]
fn sparse_placements_are_uniform_over_quadrants() {
    let mesh = farm_mesh(400.0, 400.0, 20.0, &[(Rect::new(0.0, 0.0, 400.0, 400.0), 1)]);
    let dom = domain(&mesh, &[1], TURBINE.max_density());
    // About ten turbines in a box that packs a hundred.
    let d = uniform(&dom, 0.1);
    let mut bins = [0.0f64; 4];
    for seed in 0..500 {
        let layout = convert_density(&mesh, &d, &TURBINE, seed, DEFAULT_PROPOSAL_BUDGET).unwrap();
        for p in &layout.positions {
            bins[usize::from(p[0] >= 200.0) + 2 * usize::from(p[1] >= 200.0)] += 1.0;
        }
    }
    let expected = bins.iter().sum::<f64>() / 4.0;
    let stat: f64 = bins.iter().map(|o| (o - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
    assert!(p_value > 0.01, "bins {bins:?}, p = {p_value}");
}

#[test]
fn conversion_is_deterministic_per_seed() {
    let mesh = farm_mesh(300.0, 300.0, 20.0, &[(Rect::new(50.0, 50.0, 250.0, 250.0), 1)]);
    let dom = domain(&mesh, &[1], TURBINE.max_density());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let values = dom.upper.iter().map(|u| u * rng.gen_range(0.0..1.0)).collect();
    let d = DensityField::new(values, dom).unwrap();
    let run = |seed| convert_density(&mesh, &d, &TURBINE, seed, DEFAULT_PROPOSAL_BUDGET).unwrap().to_text();
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn exhausted_budget_is_reported() {
    // Four turbines 40 m apart do not fit in a 40 m square.
    let mesh = farm_mesh(40.0, 40.0, 5.0, &[(Rect::new(0.0, 0.0, 40.0, 40.0), 1)]);
    let dom = domain(&mesh, &[1], 4.0 / 1600.0);
    let d = uniform(&dom, 1.0);
    match convert_density(&mesh, &d, &TURBINE, 1, 20_000) {
        Err(LayoutError::PackingInfeasible {
            placed,
            target,
            proposals,
        }) => {
            assert_eq!(target, 4);
            assert!(placed < 4);
            assert_eq!(proposals, 20_000);
        }
        other => panic!("expected a packing error, got {other:?}"),
    }
}

#[test]
fn bump_friction_integrates_to_the_continuous_total() {
    let mesh = farm_mesh(400.0, 400.0, 20.0, &[(Rect::new(100.0, 100.0, 300.0, 300.0), 1)]);
    let dom = domain(&mesh, &[1], TURBINE.max_density());
    let d = uniform(&dom, 0.7);
    let layout = convert_density(&mesh, &d, &TURBINE, 3, DEFAULT_PROPOSAL_BUDGET).unwrap();
    let total = TURBINE.friction_per_density() * turbine_count(&d, &Spaces::new(&mesh));
    let bumps = BumpFarm::new(&layout, &mesh, total).unwrap();
    let fine = bumps.refine_mesh(&mesh).unwrap();
    bumps.check_resolution(&fine).unwrap();
    for m in [&mesh, &fine] {
        let b = BumpFarm::new(&layout, m, total).unwrap();
        assert!((b.integrated_friction(m) - total).abs() <= 1e-10 * total);
    }
}

#[test]
fn coarse_mesh_is_rejected_for_bumps() {
    let mesh = farm_mesh(400.0, 400.0, 20.0, &[(Rect::new(100.0, 100.0, 300.0, 300.0), 1)]);
    let layout = TurbineLayout {
        positions: vec![[200.0, 200.0]],
        spec: TURBINE,
        seed: 0,
    };
    let bumps = BumpFarm::new(&layout, &mesh, 1.0).unwrap();
    assert!(matches!(
        bumps.check_resolution(&mesh),
        Err(LayoutError::UnderResolved { .. })
    ));
}

#[test]
fn empty_layout_extracts_no_power() {
    let mesh = Arc::new(farm_mesh(1000.0, 500.0, 100.0, &[]));
    let bcs = BoundaryConditionSet::new()
        .with("west", Prescription::Velocity([TimeSeries::Constant(1.0), TimeSeries::Constant(0.0)]))
        .with("east", Prescription::Elevation(TimeSeries::Constant(0.0)))
        .with("north", Prescription::FreeSlip)
        .with("south", Prescription::FreeSlip);
    let sw = ShallowWater::new(mesh.clone(), PhysicalParams::uniform(&mesh, 50.0), bcs, SolverParams::default())
        .unwrap();
    let layout = TurbineLayout {
        positions: vec![],
        spec: TURBINE,
        seed: 0,
    };
    let e = evaluate_discrete_layout(&layout, &sw, 0.0, None).unwrap();
    assert_eq!(e.power, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random densities on random farm boxes always give valid layouts of
    /// the rounded turbine count.
    #[test]
    fn layouts_keep_spacing_and_support(
        seed in 0u64..10_000,
        x0 in 0.0f64..200.0,
        y0 in 0.0f64..200.0,
        w in 80.0f64..200.0,
        h in 80.0f64..200.0,
        fill in 0.05f64..0.6,
    ) {
        let farm = Rect::new(x0, y0, x0 + w, y0 + h);
        let mesh = farm_mesh(400.0, 400.0, 20.0, &[(farm, 1)]);
        prop_assume!(mesh.regions().contains(&1));
        let dom = domain(&mesh, &[1], TURBINE.max_density());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = dom.upper.iter().map(|u| u * fill * rng.gen_range(0.5..1.0)).collect();
        let d = DensityField::new(values, dom).unwrap();
        let layout = convert_density(&mesh, &d, &TURBINE, seed, DEFAULT_PROPOSAL_BUDGET).unwrap();
        prop_assert_eq!(layout.len() as f64, turbine_count(&d, &Spaces::new(&mesh)).round());
        check_layout(&layout, &mesh, &d);
    }
}
