use kamlattice::cli_io::{load_checkpoint, report_line, save_checkpoint, Checkpoint};
use kamlattice::hamiltonian_model::{load_model_path, ModelSpec};
use kamlattice::kam_driver::{
    build_schedule, decrement_sums, frequency_deviation, initial_state, kam_step, run, ScheduleParams,
    StepOptions,
};
use proptest::prelude::*;

fn example() -> ModelSpec {
    load_model_path(concat!(env!("CARGO_MANIFEST_DIR"), "/models/single_site_quintic.toml").as_ref()).unwrap()
}

proptest! {
    #[test]
    fn decrement_sums_approach_half_widths(s0 in 0.01f64..=1.0, r0 in 0.01f64..=1.0, n in 100usize..5000) {
        let d = decrement_sums(s0, r0, n);
        prop_assert!(d.s_partial < s0 / 2.0 && d.r_partial < r0 / 2.0);
        prop_assert!((d.s_corrected - s0 / 2.0).abs() <= 1e-12);
        prop_assert!((d.r_corrected - r0 / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn widths_stay_above_half(eps in 1e-8f64..1e-2, steps in 1usize..40) {
        let s = build_schedule(ScheduleParams::desk(eps, 1.0, steps)).unwrap();
        for w in s.rows.windows(2) {
            prop_assert!(w[1].s_k < w[0].s_k && w[1].s_k > 0.25);
            prop_assert!(w[1].r_k < w[0].r_k && w[1].r_k > 0.25);
            prop_assert!(w[1].eps_k < w[0].eps_k);
        }
    }
}

#[test]
fn zero_steps_keep_the_normal_form() {
    let spec = example();
    let sched = build_schedule(ScheduleParams::desk(spec.eps, 1.0, 0)).unwrap();
    let out = run(&spec, &sched, &StepOptions::default()).unwrap();
    assert!(out.reports.is_empty());
    let init = initial_state(&spec, &sched).unwrap();
    assert_eq!(out.final_state.h.normal, init.h.normal);
}

#[test]
fn checkpoint_resume_reproduces_the_next_step() {
    let spec = example();
    let sched = build_schedule(ScheduleParams::desk(spec.eps, 1.0, 3)).unwrap();
    let opts = StepOptions::default();
    let s0 = initial_state(&spec, &sched).unwrap();
    let (s1, _) = kam_step(&s0, &sched, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &Checkpoint::new(&sched, &s1)).unwrap();
    let (_, direct) = kam_step(&s1, &sched, &opts).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.state.h, s1.h);
    assert_eq!(back.params, sched.params);
    let (_, resumed) = kam_step(&back.state, &sched, &opts).unwrap();
    assert_eq!(report_line(&direct).unwrap(), report_line(&resumed).unwrap());
}

#[test]
fn bad_checkpoint_is_rejected() {
    let spec = example();
    let sched = build_schedule(ScheduleParams::desk(spec.eps, 1.0, 1)).unwrap();
    let s0 = initial_state(&spec, &sched).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut ck = Checkpoint::new(&sched, &s0);
    ck.sign_convention = "rho_dot = +F_theta".into();
    save_checkpoint(&path, &ck).unwrap();
    assert!(load_checkpoint(&path).is_err());
    ck = Checkpoint::new(&sched, &s0);
    ck.version += 1;
    save_checkpoint(&path, &ck).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn runs_are_deterministic_and_keep_frequencies() {
    let spec = example();
    let sched = build_schedule(ScheduleParams::desk(spec.eps, 1.0, 3)).unwrap();
    let a = run(&spec, &sched, &StepOptions::default()).unwrap();
    let b = run(&spec, &sched, &StepOptions::default()).unwrap();
    let lines = |o: &kamlattice::kam_driver::RunOutput| {
        o.reports.iter().map(|r| report_line(r).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(a.convergence, b.convergence);
    // the sum of step norms is monotone and dominates the norm of the sum
    let mut cumulative = 0.0;
    for r in &a.reports {
        assert!(r.omega_dev <= 1e-9);
        let next = cumulative + r.omega_hat_op;
        assert!(next >= cumulative);
        cumulative = next;
        assert!(r.correction_op <= cumulative * (1.0 + 1e-12));
    }
    assert!(frequency_deviation(&a.final_state.h) <= 1e-9);
    assert!(a.convergence.correction_op <= spec.eps.powf(0.2));
}
