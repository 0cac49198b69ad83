use frustra::frustration_engine::SpinAssignment;
use frustra::model_ir::synthetic::{gauge_all_positive, generate_synthetic, Template};
use frustra::monotonicity::{
    class_stability, direction_consistency, lambda_from_samples, omega, perturb, run_protocol,
    synthetic_images, OrderMode, PartialOrderPair, ProtocolConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest `lambda` in `[0, 0.5]` with `G(lambda) >= 2 lambda`, found by
/// testing every breakpoint of the step function and every level crossing.
fn lambda_by_definition(omegas: &[f64]) -> f64 {
    let n = omegas.len();
    let dev: Vec<f64> = omegas.iter().map(|o| (o - 0.5).abs()).collect();
    let g = |l: f64| dev.iter().filter(|&&d| d >= l).count() as f64 / n as f64;
    let mut candidates: Vec<f64> = dev.clone();
    candidates.extend((0..=n).map(|j| j as f64 / (2 * n) as f64));
    candidates
        .into_iter()
        .filter(|&l| (0.0..=0.5).contains(&l) && g(l) >= 2.0 * l)
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn lambda_matches_its_definition(omegas in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
        let got = lambda_from_samples(&omegas).unwrap().lambda;
        prop_assert!((got - lambda_by_definition(&omegas)).abs() <= 1e-15);
    }

    #[test]
    fn lambda_on_quantized_samples(levels in proptest::collection::vec(0u32..=20, 1..80)) {
        let omegas: Vec<f64> = levels.iter().map(|&k| f64::from(k) / 20.0).collect();
        let got = lambda_from_samples(&omegas).unwrap().lambda;
        prop_assert!((got - lambda_by_definition(&omegas)).abs() <= 1e-15);
    }

    #[test]
    fn perturbation_moves_along_the_order_with_exact_norm(
        seed in any::<u64>(),
        signs in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..50),
        magnitude in 0.01f64..8.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..signs.len()).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x2 = perturb(&x1, &signs, magnitude, &mut rng).unwrap();
        let mut norm = 0.0;
        for ((a, b), &s) in x1.iter().zip(&x2).zip(&signs) {
            prop_assert!(f64::from(s) * (b - a) > 0.0);
            norm += (b - a) * (b - a);
        }
        prop_assert!((norm.sqrt() - magnitude).abs() <= 1e-12 * magnitude.max(1.0));
    }
}

#[test]
fn magnitude_four_has_norm_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x1 = vec![0.0; 300];
    let x2 = perturb(&x1, &[1; 300], 4.0, &mut rng).unwrap();
    let norm = x2.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((3.9..=4.1).contains(&norm));
    assert!(x2.iter().all(|&v| v > 0.0));
}

#[test]
fn omega_examples() {
    assert_eq!(omega(&[1.0, 2.0], &[1.0, 2.0], &[1, -1]).unwrap(), 1.0);
    assert_eq!(omega(&[0.0, 0.0], &[1.0, -1.0], &[1, 1]).unwrap(), 0.5);
    assert_eq!(omega(&[0.0, 0.0], &[-2.0, -3.0], &[-1, -1]).unwrap(), 1.0);
    assert!(omega(&[0.0], &[0.0, 1.0], &[1]).is_err());
}

fn gauged() -> (frustra::model_ir::Model, PartialOrderPair) {
    let model = generate_synthetic(5, Template::TinyCnn).unwrap();
    let (gauged, spins) = gauge_all_positive(&model, 2).unwrap();
    let pair = PartialOrderPair::from_spins(&gauged, &SpinAssignment::new(spins).unwrap()).unwrap();
    (gauged, pair)
}

#[test]
fn gauged_network_is_always_consistent_and_random_null_is_not() {
    let (model, pair) = gauged();
    let images = synthetic_images(model.manifest.input_shape().len(), 20, 3);
    let config = ProtocolConfig {
        per_image: 20,
        seed: 4,
        ..ProtocolConfig::default()
    };
    let fixed = run_protocol(&model, &OrderMode::Fixed(pair), &images, &config).unwrap();
    assert!(direction_consistency(&fixed).iter().all(|&(_, f)| f == 1.0));

    let null = run_protocol(&model, &OrderMode::RandomNull, &images, &config).unwrap();
    let fractions = direction_consistency(&null);
    let middle = fractions
        .iter()
        .filter(|&&(_, f)| f > 0.1 && f < 0.9)
        .count();
    assert!(
        middle as f64 / fractions.len() as f64 > 0.5,
        "{fractions:?}"
    );
}

#[test]
fn protocol_is_reproducible_and_stability_is_reported_per_magnitude() {
    let (model, pair) = gauged();
    let images = synthetic_images(model.manifest.input_shape().len(), 5, 8);
    let config = ProtocolConfig {
        per_image: 8,
        magnitudes: vec![0.5, 4.0],
        seed: 12,
    };
    let a = run_protocol(&model, &OrderMode::Fixed(pair.clone()), &images, &config).unwrap();
    let b = run_protocol(&model, &OrderMode::Fixed(pair), &images, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 40);
    let stability = class_stability(&a);
    assert_eq!(
        stability.iter().map(|s| s.0).collect::<Vec<_>>(),
        vec![0.5, 4.0]
    );
    assert!(stability.iter().all(|s| (0.0..=1.0).contains(&s.1)));
}
