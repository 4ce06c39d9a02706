use kamlattice::resonance_measure::{
    gaussian_sample, resonant_measure_exact_low_dim, resonant_measure_mc, union_bound, ResonantZoneSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_zones(seed: u64, count: usize) -> Vec<ResonantZoneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let dim = rng.gen_range(1..=2);
            let m = rng.gen_range(2..=6);
            let delta = rng.gen_range(0.01..0.5);
            ResonantZoneSpec::with_dim(dim, m, delta)
        })
        .collect()
}

#[test]
fn sample_moments() {
    let n = 1_000_000;
    let x = gaussian_sample(2, n, 2024);
    for c in 0..2 {
        let mean = x.iter().map(|v| v[c]).sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "variance {var}");
    }
}

#[test]
fn estimate_ignores_thread_count() {
    let zone = ResonantZoneSpec::with_dim(2, 5, 0.1);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| resonant_measure_mc(&zone, 50_000, 77).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(7));
    assert_eq!(
        gaussian_sample(3, 10_000, 5),
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| gaussian_sample(3, 10_000, 5))
    );
}

#[test]
fn monte_carlo_matches_exact_low_dimension() {
    for (i, zone) in random_zones(31, 20).into_iter().enumerate() {
        let est = resonant_measure_mc(&zone, 100_000, 1000 + i as u64).unwrap();
        let exact = resonant_measure_exact_low_dim(&zone).unwrap();
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.std_error,
            "{zone:?}: mc {} vs exact {exact} (se {})",
            est.mean,
            est.std_error
        );
    }
}

#[test]
fn union_bound_dominates() {
    for (i, zone) in random_zones(32, 20).into_iter().enumerate() {
        let est = resonant_measure_mc(&zone, 20_000, 500 + i as u64).unwrap();
        let ub = union_bound(&zone).unwrap();
        assert!(est.mean <= ub + 3.0 * est.std_error, "{zone:?}: {} > {ub}", est.mean);
        assert!(resonant_measure_exact_low_dim(&zone).unwrap() <= ub + 1e-9);
    }
}

#[test]
fn nested_zones_are_monotone() {
    for dim in 1..=3 {
        let mut prev = 0.0;
        for m in 1..=5 {
            let est = resonant_measure_mc(&ResonantZoneSpec::with_dim(dim, m, 0.05), 20_000, 9).unwrap();
            assert!(est.mean >= prev);
            prev = est.mean;
        }
    }
}
