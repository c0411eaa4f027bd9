use fibrae::autodiff::Tensor;
use fibrae::geodesic::{naive_transport, solve_geodesic, SolverConfig};
use fibrae::geometry::{
    discrete_energy, pullback_metric, segment_energies, IdentityDecoder, LatentPoint, LinearDecoder,
};
use fibrae::nn::{init_model, FaeArchitecture};
use fibrae::oracle::{grid_geodesic_oracle, linear_transport_oracle, LinearDecoderSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

fn quick() -> SolverConfig {
    SolverConfig {
        max_iterations: 400,
        ..SolverConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constraints_are_exact_and_energy_never_rises(
        seed in 0u64..1000,
        m in 1usize..3,
        n in 1usize..3,
        f in prop::collection::vec(-0.6f64..0.6, 2),
        b1 in prop::collection::vec(-1.0f64..1.0, 2),
        b2 in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let dec = LinearDecoder::new(random_matrix(seed, 6, m + n), m).unwrap();
        let start = LatentPoint::new(f[..m].to_vec(), b1[..n].to_vec());
        let r = solve_geodesic(&dec, &start, &b2[..n], &quick()).unwrap();
        prop_assert_eq!(&r.endpoint.b[..], &b2[..n]);
        prop_assert_eq!(r.trace.points.row(0), &start.to_vec()[..]);
        let last = r.trace.points.rows() - 1;
        prop_assert_eq!(&r.trace.points.row(last)[m..], &b2[..n]);
        prop_assert!(r.energy <= r.initial_energy);
        prop_assert_eq!(r.path.coefficient_count(), 65 * (m + n));
    }

    #[test]
    fn metric_is_symmetric_and_psd(seed in 0u64..1000, z in prop::collection::vec(-1.0f64..1.0, 4)) {
        let model = init_model(&FaeArchitecture::new(6, 2, 2, 3), seed).unwrap();
        let g = pullback_metric(&model, &LatentPoint::from_slice(&z, 2)).unwrap();
        prop_assert!(g.max_asymmetry() <= 1e-10);
        prop_assert!(g.eigenvalues().iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn segment_energies_sum_to_the_discrete_energy(seed in 0u64..1000, steps in 2usize..40) {
        let model = init_model(&FaeArchitecture::new(5, 1, 2, 2), seed).unwrap();
        let path = random_matrix(seed + 1, steps + 1, 3).map(|v| 0.5 * v.tanh());
        let dt = 1.0 / steps as f64;
        let total: f64 = segment_energies(&model, &path, dt).unwrap().iter().sum();
        let direct = discrete_energy(&model, &path, dt).unwrap();
        prop_assert!((total - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn encoder_lands_in_the_cube(seed in 0u64..1000, x in prop::collection::vec(-5.0f64..5.0, 7)) {
        let model = init_model(&FaeArchitecture::new(7, 3, 1, 2), seed).unwrap();
        prop_assert!(model.encode(&x).unwrap().iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn linear_solves_move_at_constant_speed() {
    let config = SolverConfig {
        tolerance: 1e-10,
        max_iterations: 20_000,
        ..SolverConfig::default()
    };
    for seed in 0..5 {
        let a = random_matrix(seed, 5, 3);
        let dec = LinearDecoder::new(a.clone(), 2).unwrap();
        let start = LatentPoint::new(vec![0.1, -0.2], vec![-0.3]);
        let r = solve_geodesic(&dec, &start, &[0.6], &config).unwrap();
        assert!(r.converged);
        assert!(r.residual < 1e-3, "residual {}", r.residual);
        assert!((r.length * r.length - r.energy).abs() < 1e-4 * r.energy);
        let spec = LinearDecoderSpec { a, fiber_dim: 2 };
        let (_, energy) = linear_transport_oracle(&spec, &start.f, &start.b, &[0.6]).unwrap();
        assert!((r.energy - energy).abs() < 1e-3 * energy);
    }
}

#[test]
fn identity_decoder_straight_energy_is_step_independent() {
    let z0 = [0.1, -0.4, 0.3];
    let z1 = [0.7, 0.2, -0.5];
    let exact: f64 = z0.iter().zip(&z1).map(|(a, b)| (b - a) * (b - a)).sum();
    let id = IdentityDecoder {
        fiber_dim: 1,
        base_dim: 2,
    };
    for steps in [16usize, 64, 256] {
        let data: Vec<f64> = (0..=steps)
            .flat_map(|k| {
                let t = k as f64 / steps as f64;
                z0.iter().zip(&z1).map(move |(a, b)| a + t * (b - a))
            })
            .collect();
        let path = Tensor::matrix(steps + 1, 3, data).unwrap();
        let e = discrete_energy(&id, &path, 1.0 / steps as f64).unwrap();
        assert!((e - exact).abs() < 1e-12, "{steps}: {e} vs {exact}");
    }
}

#[test]
fn same_fiber_is_a_fixed_point() {
    let dec = LinearDecoder::new(random_matrix(3, 4, 3), 2).unwrap();
    let start = LatentPoint::new(vec![0.3, -0.1], vec![0.25]);
    let r = solve_geodesic(&dec, &start, &[0.25], &quick()).unwrap();
    assert_eq!(r.endpoint, start);
    assert!(r.energy < 1e-20);
    assert_eq!(naive_transport(&start, &[0.25]), start);
}

#[test]
fn grid_endpoint_matches_a_diagonal_geodesic() {
    // Ψ(f, b) = (f + b, b): the optimal endpoint is unique and the geodesic
    // runs along a lattice diagonal, which an 8-neighbor grid can follow.
    let a = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    let dec = LinearDecoder::new(a.clone(), 1).unwrap();
    let start = LatentPoint::new(vec![0.3], vec![-0.4]);
    let g = grid_geodesic_oracle(&dec, &start, &[0.4], 48).unwrap();
    let (f2, energy) = linear_transport_oracle(&LinearDecoderSpec { a, fiber_dim: 1 }, &[0.3], &[-0.4], &[0.4]).unwrap();
    assert!((g.length - energy.sqrt()).abs() < 0.05 * energy.sqrt(), "{} vs {} at {:?} vs {f2:?}", g.length, energy.sqrt(), g.endpoint.f);
    assert!(g.runner_up_length > g.length);
    assert!((g.endpoint.f[0] - f2[0]).abs() < 0.05, "{:?} vs {f2:?}", g.endpoint.f);
}
