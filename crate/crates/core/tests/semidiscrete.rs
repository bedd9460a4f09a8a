use std::sync::OnceLock;

use latent_bridge::semidiscrete::{assign_cells, Backend};
use latent_bridge::wasserstein::solve_assignment;
use latent_bridge::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal_cloud(mean: &[f64], n: usize, seed: u64, stream: u64) -> PointCloud {
    GaussianMixture::gaussian(mean.to_vec(), 1.0).unwrap().sample(n, seed, stream)
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> PointCloud {
    PointCloud::uniform(dim, (0..n * dim).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn induced_cost(m: &SemiDiscreteOtMap, source: &PointCloud) -> f64 {
    source
        .points()
        .map(|x| {
            let y = apply_ot_map(m, x).unwrap();
            x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum()
}

fn hungarian_cost(a: &PointCloud, b: &PointCloud) -> f64 {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a.point(i).iter().zip(b.point(j)).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    solve_assignment(n, &cost).cost
}

#[test]
fn argmax_agrees_with_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets = uniform_points(&mut rng, 8, 3, 2.0);
    let heights: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bp = BrenierPotential::with_heights(&targets, heights).unwrap();
    for _ in 0..1000 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let planes: Vec<f64> = (0..8)
            .map(|i| targets.point(i).iter().zip(&x).map(|(y, x)| y * x).sum::<f64>() + bp.heights()[i])
            .collect();
        let mut arg = 0;
        for i in 1..8 {
            if planes[i] > planes[arg] {
                arg = i;
            }
        }
        let (value, idx) = brenier_eval(&bp, &x).unwrap();
        assert_eq!(idx, arg);
        assert!((value - planes[arg]).abs() < 1e-12);
    }
}

#[test]
fn symmetric_split_is_balanced() {
    let targets = PointCloud::uniform(2, vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
    let bp = BrenierPotential::new(&targets).unwrap();
    let n = 20_000;
    let w = estimate_cell_masses(&bp, &normal_cloud(&[0.0, 0.0], n, 5, 1)).unwrap();
    let sigma = (0.25 / n as f64).sqrt();
    assert!((w[0] - 0.5).abs() < 3.0 * sigma, "{w:?}");
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn cell_masses_match_grid_quadrature() {
    let targets = PointCloud::uniform(2, vec![1.0, 0.5, -1.0, 0.8, 0.2, -1.2, -0.4, -0.3]).unwrap();
    let bp = BrenierPotential::with_heights(&targets, vec![0.3, -0.1, 0.0, 0.4]).unwrap();
    let mc = estimate_cell_masses(&bp, &normal_cloud(&[0.0, 0.0], 10_000, 17, 1)).unwrap();

    // midpoint rule for the standard normal density on [-7, 7]^2
    let (lo, hi, steps) = (-7.0f64, 7.0f64, 1400usize);
    let h = (hi - lo) / steps as f64;
    let mut quad = [0.0f64; 4];
    for a in 0..steps {
        let x = lo + (a as f64 + 0.5) * h;
        for b in 0..steps {
            let y = lo + (b as f64 + 0.5) * h;
            let density = (-(x * x + y * y) / 2.0).exp() / (2.0 * std::f64::consts::PI);
            quad[brenier_eval(&bp, &[x, y]).unwrap().1] += density * h * h;
        }
    }
    for i in 0..4 {
        assert!((mc[i] - quad[i]).abs() < 0.01, "cell {i}: {} vs {}", mc[i], quad[i]);
    }
}

#[test]
fn gaussian_source_onto_eight_points_preserves_measure() {
    let source = normal_cloud(&[0.0, 0.0], 10_000, 1, 1);
    let targets = PointCloud::uniform(
        2,
        (0..8)
            .flat_map(|k| {
                let t = k as f64 * std::f64::consts::FRAC_PI_4;
                [1.5 * t.cos(), 1.5 * t.sin() + 0.2]
            })
            .collect(),
    )
    .unwrap();
    let opts = OtSolverOptions::default();
    let m = solve_semidiscrete_ot(&source, &targets, &opts, 7).unwrap();
    assert!(m.converged, "residual {}", m.residual);
    assert!(m.residual <= 8e-4);
    for w in &m.achieved_masses {
        assert!((w - 0.125).abs() <= 8e-4);
    }
    let sum: f64 = m.potential.heights().iter().sum();
    assert!(sum.abs() < 1e-12);
    // re-counting the mapped training cloud reproduces the recorded masses
    let mapped = m.apply_cloud(&source).unwrap();
    let mut recount = [0.0; 8];
    for (p, w) in mapped.points().zip(mapped.weights()) {
        let j = (0..8).find(|&j| targets.point(j) == p).unwrap();
        recount[j] += w;
    }
    for (a, b) in recount.iter().zip(&m.achieved_masses) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn self_transport_is_identity() {
    let coords: Vec<f64> = (0..16).flat_map(|k| [(k % 4) as f64 * 3.0, (k / 4) as f64 * 3.0]).collect();
    let cloud = PointCloud::uniform(2, coords).unwrap();
    let m = solve_semidiscrete_ot(&cloud, &cloud, &OtSolverOptions::default(), 0).unwrap();
    assert!(m.converged);
    for i in 0..16 {
        assert_eq!(m.cell(cloud.point(i)).unwrap(), i);
        assert_eq!(apply_ot_map(&m, cloud.point(i)).unwrap(), cloud.point(i));
    }
    let inv = invert_assignment(&m, &cloud).unwrap();
    assert_eq!(inv.index_map(), (0..16).collect::<Vec<_>>());
}

#[test]
fn single_target_map() {
    let target = PointCloud::uniform(2, vec![4.0, -1.0]).unwrap();
    let source = normal_cloud(&[0.0, 0.0], 50, 0, 1);
    let m = solve_semidiscrete_ot(&source, &target, &OtSolverOptions::default(), 0).unwrap();
    assert!(m.converged);
    assert_eq!(apply_ot_map(&m, &[100.0, 3.0]).unwrap(), vec![4.0, -1.0]);
}

#[test]
fn equal_size_maps_reach_the_assignment_optimum() {
    for seed in 0..5u64 {
        let a = normal_cloud(&[0.0, 0.0], 10, seed, 1);
        let b = normal_cloud(&[1.0, 0.5], 10, seed, 2);
        let m = solve_semidiscrete_ot(&a, &b, &OtSolverOptions::default(), seed).unwrap();
        assert!(m.converged, "seed {seed}: residual {}", m.residual);
        let optimum = hungarian_cost(&a, &b);
        let got = induced_cost(&m, &a);
        assert!((got - optimum).abs() <= 1e-6 * optimum, "seed {seed}: {got} vs {optimum}");
    }
}

#[test]
fn assignment_backend_matches_variational_solution() {
    let a = normal_cloud(&[0.0, 0.0], 64, 2, 1);
    let b = normal_cloud(&[2.0, 0.0], 64, 2, 2);
    let fast = OtSolverOptions {
        backend: Backend::Assignment,
        ..Default::default()
    };
    let m_fast = solve_semidiscrete_ot(&a, &b, &fast, 0).unwrap();
    let m_var = solve_semidiscrete_ot(&a, &b, &OtSolverOptions::default(), 0).unwrap();
    assert!(m_fast.converged && m_var.converged);
    assert_eq!(m_fast.residual, 0.0);
    assert_eq!(assign_cells(&m_fast.potential, &a).unwrap(), assign_cells(&m_var.potential, &a).unwrap());
    let unequal = normal_cloud(&[0.0, 0.0], 65, 2, 1);
    assert!(solve_semidiscrete_ot(&unequal, &b, &fast, 0).is_err());
}

#[test]
fn inverse_map_matches_reversed_assignment() {
    let a = normal_cloud(&[0.0, 0.0], 10, 9, 1);
    let b = normal_cloud(&[-1.0, 2.0], 10, 9, 2);
    let m = solve_semidiscrete_ot(&a, &b, &OtSolverOptions::default(), 0).unwrap();
    let inv = invert_assignment(&m, &a).unwrap();

    let n = 10;
    let mut cost = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            cost[j * n + i] = b.point(j).iter().zip(a.point(i)).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    let reversed = solve_assignment(n, &cost);
    assert_eq!(inv.index_map(), reversed.row_to_col.as_slice());
    for j in 0..n {
        assert_eq!(inv.apply(b.point(j)).unwrap(), a.point(reversed.row_to_col[j]));
    }
    // inverting twice restores the forward lookup
    let twice = inv.inverse().unwrap();
    for i in 0..n {
        assert_eq!(twice.apply(a.point(i)).unwrap(), apply_ot_map(&m, a.point(i)).unwrap());
    }
}

#[test]
fn non_bijective_assignment_is_rejected() {
    let targets = PointCloud::uniform(1, vec![-1.0, 1.0]).unwrap();
    let source = PointCloud::uniform(1, vec![2.0, 3.0]).unwrap();
    let bp = BrenierPotential::new(&targets).unwrap();
    let m = SemiDiscreteOtMap {
        achieved_masses: estimate_cell_masses(&bp, &source).unwrap(),
        potential: bp,
        residual: 0.5,
        iterations: 0,
        converged: false,
        seed: 0,
    };
    match invert_assignment(&m, &source) {
        Err(Error::NotBijective { target, first, second }) => assert_eq!((target, first, second), (1, 0, 1)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn artifact_survives_a_file_round_trip() {
    let source = normal_cloud(&[0.0, 0.0], 400, 4, 1);
    let targets = normal_cloud(&[1.0, 1.0], 40, 4, 2);
    let m = solve_semidiscrete_ot(&source, &targets, &OtSolverOptions::default(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.txt");
    m.save(&path).unwrap();
    let back = SemiDiscreteOtMap::load(&path).unwrap();
    assert_eq!(back, m);
    assert!(matches!(
        SemiDiscreteOtMap::load(dir.path().join("absent.txt")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn solver_is_deterministic_given_seed() {
    let source = normal_cloud(&[0.0, 0.0], 2000, 8, 1);
    let targets = normal_cloud(&[0.5, 0.0], 50, 8, 2);
    let opts = OtSolverOptions {
        mc_multiplier: 4,
        ..Default::default()
    };
    let a = solve_semidiscrete_ot(&source, &targets, &opts, 11).unwrap();
    let b = solve_semidiscrete_ot(&source, &targets, &opts, 11).unwrap();
    assert_eq!(a, b);
    assert!(a.converged, "residual {}", a.residual);
}

#[test]
fn input_validation() {
    let a = normal_cloud(&[0.0, 0.0], 10, 0, 1);
    let b = normal_cloud(&[0.0, 0.0, 0.0], 10, 0, 2);
    assert!(matches!(
        solve_semidiscrete_ot(&a, &b, &OtSolverOptions::default(), 0),
        Err(Error::Dimension { .. })
    ));
}

fn converged_bijection() -> &'static (PointCloud, SemiDiscreteOtMap) {
    static CELL: OnceLock<(PointCloud, SemiDiscreteOtMap)> = OnceLock::new();
    CELL.get_or_init(|| {
        let a = normal_cloud(&[0.0, 0.0], 32, 21, 1);
        let b = normal_cloud(&[1.5, -0.5], 32, 21, 2);
        let m = solve_semidiscrete_ot(&a, &b, &OtSolverOptions::default(), 0).unwrap();
        assert!(m.converged);
        (a, m)
    })
}

proptest! {
    #[test]
    fn potential_is_convex(
        x in prop::collection::vec(-5.0f64..5.0, 2),
        y in prop::collection::vec(-5.0f64..5.0, 2),
        lambda in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = uniform_points(&mut rng, 6, 2, 3.0);
        let heights = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bp = BrenierPotential::with_heights(&targets, heights).unwrap();
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
        let lhs = brenier_eval(&bp, &mid).unwrap().0;
        let rhs = lambda * brenier_eval(&bp, &x).unwrap().0 + (1.0 - lambda) * brenier_eval(&bp, &y).unwrap().0;
        prop_assert!(lhs <= rhs + 1e-9);
    }

    #[test]
    fn height_shift_leaves_cells_unchanged(
        c in -100.0f64..100.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = uniform_points(&mut rng, 5, 2, 3.0);
        let heights = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bp = BrenierPotential::with_heights(&targets, heights).unwrap();
        let shifted = bp.shifted(c);
        let probes = uniform_points(&mut rng, 200, 2, 5.0);
        prop_assert_eq!(assign_cells(&bp, &probes).unwrap(), assign_cells(&shifted, &probes).unwrap());
    }

    #[test]
    fn converged_assignment_is_cyclically_monotone(a in 0usize..32, b in 0usize..32) {
        let (source, m) = converged_bijection();
        let (xa, xb) = (source.point(a), source.point(b));
        let ya = apply_ot_map(m, xa).unwrap();
        let yb = apply_ot_map(m, xb).unwrap();
        let d = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        prop_assert!(d(xa, &ya) + d(xb, &yb) <= d(xa, &yb) + d(xb, &ya) + 1e-9);
    }
}
