use kamlattice::hamiltonian_model::{
    box_split, load_model, load_model_path, random_model, recenter_with, to_toml, Format, ModelSpec,
};
use kamlattice::lie_transform::sample_points;
use kamlattice::ActionVector;
use proptest::prelude::*;

const ALPHA: f64 = 1.0;

fn example() -> ModelSpec {
    load_model_path(concat!(env!("CARGO_MANIFEST_DIR"), "/models/single_site_quintic.toml").as_ref()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_round_trip(seed in any::<u64>()) {
        let spec = random_model(seed, 3, ALPHA, 1e-4);
        let back = load_model(&to_toml(&spec), Format::Toml).unwrap();
        prop_assert_eq!(&back, &spec);
        let json = serde_json::to_string(&spec.to_doc()).unwrap();
        prop_assert_eq!(&load_model(&json, Format::Json).unwrap(), &spec);
    }

    #[test]
    fn box_split_recomposes(seed in any::<u64>(), lp in 1i32..=4) {
        let spec = random_model(seed, 3, ALPHA, 1e-3);
        let h = recenter_with(&spec, 0.5, 0.5).unwrap();
        let split = box_split(&h, 1, lp).unwrap();
        let total = h.total();
        let diff = split.recompose().sub(&total);
        prop_assert!(diff.coefficient_majorant(0.5, 0.5) <= 1e-15 * total.norm());
        let sites: Vec<i32> = (-3..=3).collect();
        for z in sample_points(&sites, 0.5, ALPHA, 100, seed) {
            let a = split.recompose().eval(&z.rho, &z.theta);
            let b = total.eval(&z.rho, &z.theta);
            prop_assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0));
        }
    }

    #[test]
    fn frequencies_match_finite_differences(seed in any::<u64>()) {
        let spec = random_model(seed, 2, ALPHA, 1e-4);
        let h = recenter_with(&spec, 0.5, 0.5).unwrap();
        let f = |x: &ActionVector| spec.h0_value(x);
        let step = 1e-5;
        let shifted = |i: i32, di: f64, j: i32, dj: f64| {
            let mut x = spec.i0.clone();
            x.add_at(i, di);
            x.add_at(j, dj);
            f(&x)
        };
        for i in -2..=2 {
            let mut xp = spec.i0.clone();
            xp.add_at(i, step);
            let mut xm = spec.i0.clone();
            xm.add_at(i, -step);
            let fd = (f(&xp) - f(&xm)) / (2.0 * step);
            let w = h.normal.omega.get(i);
            prop_assert!((fd - w).abs() <= 1e-6 * w.abs().max(1.0), "omega[{}]: {} vs {}", i, fd, w);
            for j in -2..=2 {
                let hs = 1e-4;
                let fd2 = (shifted(i, hs, j, hs) - shifted(i, hs, j, -hs) - shifted(i, -hs, j, hs)
                    + shifted(i, -hs, j, -hs))
                    / (4.0 * hs * hs);
                let om = h.normal.hessian.get(i, j);
                prop_assert!((fd2 - om).abs() <= 1e-6 * om.abs().max(1.0), "Omega[{},{}]: {} vs {}", i, j, fd2, om);
            }
        }
    }

    #[test]
    fn q_low_order_decay(seed in any::<u64>()) {
        let spec = random_model(seed, 3, ALPHA, 1e-4);
        let h = recenter_with(&spec, 0.5, 0.5).unwrap();
        let split = box_split(&h, 1, 3).unwrap();
        for (nu, m, c) in split.q.iter() {
            let d = m.degree();
            if d > 2 {
                continue;
            }
            let outer = nu.iter().map(|(j, _)| j).chain(m.iter().map(|(j, _)| j))
                .max_by_key(|j| j.abs()).unwrap();
            let inner = outer - outer.signum();
            let bound = spec.i0.get(inner).abs().powi(5 - d as i32);
            prop_assert!(c.norm() <= bound, "degree {} at site {}: {} > {}", d, outer, c.norm(), bound);
        }
    }

    #[test]
    fn p_is_bounded_by_eps(seed in any::<u64>()) {
        let eps = 1e-4;
        let spec = random_model(seed, 3, ALPHA, eps);
        let h = recenter_with(&spec, 0.5, 0.5).unwrap();
        let split = box_split(&h, 1, 2).unwrap();
        prop_assert!(split.p.majorant_norm(0.5, 0.5).unwrap() <= eps);
    }

    #[test]
    fn produced_series_are_real(seed in any::<u64>()) {
        let spec = random_model(seed, 3, ALPHA, 1e-4);
        let h = recenter_with(&spec, 0.5, 0.5).unwrap();
        let split = box_split(&h, 1, 2).unwrap();
        for g in [&h.v, &h.pert, &h.fresh, &split.p, &split.q, &split.boundary, &split.far_fresh] {
            prop_assert!(g.reality_defect() <= 1e-18);
        }
    }
}

#[test]
fn example_model_satisfies_p_bound() {
    let spec = example();
    let h = recenter_with(&spec, 0.5, 0.5).unwrap();
    let split = box_split(&h, 1, 2).unwrap();
    assert!(split.p.majorant_norm(0.5, 0.5).unwrap() <= spec.eps);
    assert!(split.q.is_zero());
}

#[test]
fn example_model_values() {
    let spec = example();
    assert_eq!(spec.weights.lambda, 3);
    for j in -3i32..=3 {
        let expect = 0.3 * (-2.0 * (j * j) as f64).exp();
        assert!((spec.i0.get(j) - expect).abs() <= 1e-15);
    }
}
