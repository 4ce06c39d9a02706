//! Acceptance run: one PASS/FAIL line per criterion. Items marked `known`
//! are expected to fail and do not affect the exit status.

use std::time::{Duration, Instant};

use kamlattice::fourier_taylor::build;
use kamlattice::hamiltonian_model::{load_model_path, ModelSpec};
use kamlattice::homological::GeneratingFunction;
use kamlattice::kam_driver::{
    build_schedule, decrement_sums, initial_state, run, IterationSchedule, RunOutput, ScheduleParams,
    StepOptions,
};
use kamlattice::lattice_norms::{induced_operator_norm, sup_matrix_norm};
use kamlattice::lie_transform::{flow_oracle_check, jacobian, sample_points, symplectic_defect};
use kamlattice::resonance_measure::{
    measure_schedule, resonant_measure_mc, strip_measure, surviving_measure_bound, surviving_value,
    ResonantZoneSpec,
};
use kamlattice::{ActionMonomial, ActionVector, AngleMode, FTSeries, LatticeMatrix, WeightProfile};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const ALPHA: f64 = 1.0;
const STEPS: usize = 3;
const SLACK: f64 = 10.0;

// criterion tolerances
const RESIDUAL_REL: f64 = 1e-10;
const P_LOW_FACTOR: f64 = 10.0;
const LOG_RATIO_FACTOR: f64 = 0.9;
const OMEGA_DEV_TOL: f64 = 1e-9;
const ORACLE_EXAMPLE_TOL: f64 = 1e-6;
const ORACLE_LINEAR_TOL: f64 = 1e-12;
const ORACLE_POINTS: usize = 100;
const SYMPLECTIC_TOL: f64 = 1e-6;
const SYMPLECTIC_SUBSTEPS: usize = 64;
const SYMPLECTIC_POINTS: usize = 20;
const JACOBI_TOL: f64 = 1e-10;
const BRACKET_PAIRS: usize = 200;
const TRIDIAGONAL_TRIALS: usize = 1000;
const MC_SAMPLES: usize = 100_000;
const MC_SIGMAS: f64 = 3.0;
const SCHEDULE_TERMS: usize = 10_000;
const SCHEDULE_TOL: f64 = 1e-6;
const HIGH_PART_CAP: f64 = 2.0;

struct Tally {
    unexpected: usize,
}

impl Tally {
    fn line(&mut self, id: &str, pass: bool, known_red: bool, detail: String, took: Duration, budget: Duration) {
        let in_time = took <= budget;
        let ok = pass && in_time;
        let verdict = match (ok, known_red) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        if !ok && !known_red {
            self.unexpected += 1;
        }
        let time = format!("{:.3}s/{:.0}s", took.as_secs_f64(), budget.as_secs_f64());
        println!("criterion {id:<4} {verdict:<13} {detail} [{time}{}]", if in_time { "" } else { " over budget" });
    }
}

fn example() -> ModelSpec {
    load_model_path(concat!(env!("CARGO_MANIFEST_DIR"), "/models/single_site_quintic.toml").as_ref()).unwrap()
}

fn desk(eps: f64) -> IterationSchedule {
    build_schedule(ScheduleParams::desk(eps, ALPHA, STEPS)).unwrap()
}

fn opts() -> StepOptions {
    StepOptions {
        slack: SLACK,
        ..StepOptions::default()
    }
}

fn random_series(rng: &mut ChaCha8Rng, terms: usize) -> FTSeries {
    let mut g = FTSeries::zero(ALPHA, 0.5, 0.5);
    for _ in 0..terms {
        let nu = AngleMode::from_pairs((-1..=1).map(|j| (j, rng.gen_range(-1..=1))));
        let mut left = 2u32;
        let m = ActionMonomial::from_pairs((-1..=1).map(|j| {
            let e = rng.gen_range(0..=left);
            left -= e;
            (j, e)
        }));
        g.add_term(nu, m, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    }
    g
}

fn main() {
    let mut t = Tally { unexpected: 0 };
    let spec = example();
    let sched = desk(EPS);
    let secs = Duration::from_secs;

    // 1. homological residual
    let start = Instant::now();
    let state0 = initial_state(&spec, &sched).unwrap();
    let (state1, rep0) = kamlattice::kam_driver::kam_step(&state0, &sched, &opts()).unwrap();
    let ok = rep0.residual <= RESIDUAL_REL * rep0.forcing_norm;
    t.line(
        "1",
        ok,
        false,
        format!("residual {:.3e} <= {RESIDUAL_REL:e} x forcing {:.3e}", rep0.residual, rep0.forcing_norm),
        start.elapsed(),
        secs(5),
    );

    // 2, 3. contraction and frequency preservation
    let start = Instant::now();
    let out: RunOutput = run(&spec, &sched, &opts()).unwrap();
    let took = start.elapsed();
    let beta = sched.params.beta;
    let mut ok2 = true;
    let mut detail = Vec::new();
    for r in &out.reports {
        let size_ok = r.p_low <= P_LOW_FACTOR * r.eps_k;
        // ln 0 / ln p = +inf when the low part vanishes exactly
        let ratio = match r.contraction_ratio {
            Some(x) => x,
            None if r.p_low_next == 0.0 => f64::INFINITY,
            None => f64::NAN,
        };
        let ratio_ok = ratio >= LOG_RATIO_FACTOR * (1.0 + beta);
        ok2 &= size_ok && ratio_ok;
        detail.push(format!("k={} P={:.3e} ratio={:.3}", r.k, r.p_low, ratio));
    }
    t.line(
        "2",
        ok2,
        false,
        format!("{} (need P <= {P_LOW_FACTOR} eps_k, ratio >= {:.3})", detail.join("; "), LOG_RATIO_FACTOR * (1.0 + beta)),
        took,
        secs(120),
    );
    let worst_dev = out.reports.iter().map(|r| r.omega_dev).fold(0.0, f64::max);
    t.line(
        "3",
        worst_dev <= OMEGA_DEV_TOL,
        false,
        format!("max omega deviation {worst_dev:.3e} <= {OMEGA_DEV_TOL:e}"),
        took,
        secs(120),
    );

    // 4. Lie transform fidelity
    let start = Instant::now();
    let row0 = sched.rows[0];
    let h = state0.h.clone().with_widths(row0.s_k, row0.r_k).total();
    let f = &state1.history[0];
    let sites: Vec<i32> = (-spec.weights.lambda..=spec.weights.lambda).collect();
    let pts = sample_points(&sites, sched.rows[1].s_k, ALPHA, ORACLE_POINTS, 11);
    let example_dev = flow_oracle_check(&h, f, &pts, 16).unwrap();
    let b = FTSeries::zero(ALPHA, 0.5, 0.5);
    let omega = ActionVector::from_pairs([(0, 1.3), (1, 0.7)]);
    let lin = b.linear_form(&omega);
    let shift = GeneratingFunction::from_parts(
        b.empty_like(),
        b.empty_like(),
        b.empty_like(),
        ActionVector::from_pairs([(0, 0.01), (1, -0.02)]),
    );
    let sine = GeneratingFunction::from_parts(build::sin(&b, 0).scale_re(0.1), b.empty_like(), b.empty_like(), ActionVector::new());
    let lpts = sample_points(&[0, 1], 0.4, ALPHA, ORACLE_POINTS, 12);
    let linear_dev = flow_oracle_check(&lin, &shift, &lpts, 8)
        .unwrap()
        .max(flow_oracle_check(&build::rho_pow(&b, 0, 1), &sine, &lpts, 32).unwrap());
    t.line(
        "4",
        example_dev <= ORACLE_EXAMPLE_TOL && linear_dev <= ORACLE_LINEAR_TOL,
        false,
        format!("example {example_dev:.3e} <= {ORACLE_EXAMPLE_TOL:e}, linear fixtures {linear_dev:.3e} <= {ORACLE_LINEAR_TOL:e}"),
        start.elapsed(),
        secs(30),
    );

    // 5. symplecticity
    let start = Instant::now();
    let wide = FTSeries::zero(ALPHA, 1.0, 1.0);
    let fixture = GeneratingFunction::from_parts(
        build::cos(&wide, 0).scale_re(0.05),
        build::sin(&wide, 1).mul(&build::rho_pow(&wide, 0, 1)).scale_re(0.05),
        build::sin(&wide, 0).mul(&build::rho_pow(&wide, 0, 1)).mul(&build::rho_pow(&wide, 1, 1)).scale_re(0.1),
        ActionVector::from_pairs([(1, 0.01)]),
    );
    let box_sites: Vec<i32> = f.tilde().sites().into_iter().collect();
    let mut worst_ex: f64 = 0.0;
    for z in sample_points(&box_sites, sched.rows[1].s_k, ALPHA, SYMPLECTIC_POINTS, 13) {
        let j = jacobian(f, &z, &box_sites, SYMPLECTIC_SUBSTEPS, 1e-6).unwrap();
        worst_ex = worst_ex.max(symplectic_defect(&j));
    }
    let mut worst_fx: f64 = 0.0;
    for z in sample_points(&[0, 1], 0.3, ALPHA, SYMPLECTIC_POINTS, 14) {
        let j = jacobian(&fixture, &z, &[0, 1], SYMPLECTIC_SUBSTEPS, 1e-6).unwrap();
        worst_fx = worst_fx.max(symplectic_defect(&j));
    }
    t.line(
        "5",
        worst_ex <= SYMPLECTIC_TOL && worst_fx <= SYMPLECTIC_TOL,
        false,
        format!("max |J^T S J - S|: example step {worst_ex:.3e}, nonlinear fixture {worst_fx:.3e} <= {SYMPLECTIC_TOL:e}"),
        start.elapsed(),
        secs(30),
    );

    // 6. bracket algebra
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (st, sg, s, r) = (0.1, 0.1, 0.5, 0.5);
    let factor = 2.0 * EPS.powf(-(1.0 + beta) / 5.0) / (st * sg);
    let mut antisym = true;
    let mut jacobi: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..BRACKET_PAIRS {
        let fa = random_series(&mut rng, 6);
        let gb = random_series(&mut rng, 6);
        let hc = random_series(&mut rng, 4);
        let fg = fa.bracket(&gb);
        antisym &= fg.add(&gb.bracket(&fa)).is_zero() && fa.bracket(&fa).is_zero();
        let jac = fa.bracket(&gb.bracket(&hc)).add(&gb.bracket(&hc.bracket(&fa))).add(&hc.bracket(&fg));
        jacobi = jacobi.max(jac.coefficient_majorant(s, r) / (fa.norm() * gb.norm() * hc.norm()).max(1.0));
        let lhs = fg.majorant_norm(s - st, r - sg).unwrap();
        let rhs = factor * fa.majorant_norm(s, r).unwrap() * gb.majorant_norm(s, r).unwrap();
        worst_ratio = worst_ratio.max(lhs / rhs);
    }
    t.line(
        "6",
        antisym && jacobi <= JACOBI_TOL && worst_ratio <= 1.0,
        false,
        format!("antisymmetry exact: {antisym}, Jacobi {jacobi:.3e} <= {JACOBI_TOL:e}, worst bracket/bound {worst_ratio:.3e} <= 1"),
        start.elapsed(),
        secs(30),
    );

    // 7. sup norm of tridiagonal matrices
    let start = Instant::now();
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..TRIDIAGONAL_TRIALS {
        let radius = rng.gen_range(0..=8);
        let sites: Vec<i32> = (-radius..=radius).collect();
        let d: Vec<f64> = sites.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let o: Vec<f64> = sites.iter().skip(1).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bm = LatticeMatrix::tridiagonal(&sites, &d, &o);
        let kappa1 = induced_operator_norm(&bm, &WeightProfile::new(ALPHA, radius.max(1)).unwrap());
        let ratio = sup_matrix_norm(&bm) / kappa1;
        worst = worst.max(ratio);
        if ratio > 2.0 {
            violations += 1;
        }
    }
    t.line(
        "7",
        violations == 0,
        false,
        format!("{violations} violations in {TRIDIAGONAL_TRIALS}, worst |B| / |||B||| = {worst:.4} <= 2"),
        start.elapsed(),
        secs(5),
    );

    // 8. measure
    let start = Instant::now();
    let zone = ResonantZoneSpec::with_dim(1, 1, 0.1);
    let est = resonant_measure_mc(&zone, MC_SAMPLES, 8).unwrap();
    let exact = strip_measure(1.0, 0.1);
    let ok8a = (est.mean - exact).abs() <= MC_SIGMAS * est.std_error;
    t.line(
        "8a",
        ok8a,
        false,
        format!("1-D strip: mc {:.5} vs erf {exact:.5} (|diff| {:.2e} <= {MC_SIGMAS} se {:.2e})", est.mean, (est.mean - exact).abs(), est.std_error),
        start.elapsed(),
        secs(30),
    );
    let start = Instant::now();
    let zones = measure_schedule(&sched, MC_SAMPLES, 8).unwrap();
    let ok8b = zones.iter().all(|z| z.holds);
    let detail8b: Vec<String> = zones
        .iter()
        .map(|z| format!("k={} dim={} M={} mu={:.4} vs eps^kappa={:.4}", z.zone.k, z.zone.dim, z.zone.m_cap, z.estimate.mean, z.paper_bound))
        .collect();
    t.line("8b", ok8b, true, format!("zone bound: {}", detail8b.join("; ")), start.elapsed(), secs(30));

    // 9. schedule limits
    let start = Instant::now();
    let (s0, r0) = (sched.params.s0, sched.params.r0);
    let d = decrement_sums(s0, r0, SCHEDULE_TERMS);
    let (es, er) = ((d.s_partial - s0 / 2.0).abs(), (d.r_partial - r0 / 2.0).abs());
    t.line(
        "9a",
        es <= SCHEDULE_TOL && er <= SCHEDULE_TOL,
        true,
        format!("partial sums over k < {SCHEDULE_TERMS}: |sum 3 sigma~ - s0/2| = {es:.3e}, |sum 8 sigma - r0/2| = {er:.3e} <= {SCHEDULE_TOL:e}"),
        start.elapsed(),
        secs(1),
    );
    let (cs, cr) = ((d.s_corrected - s0 / 2.0).abs(), (d.r_corrected - r0 / 2.0).abs());
    t.line(
        "9b",
        cs <= SCHEDULE_TOL && cr <= SCHEDULE_TOL,
        false,
        format!("with tail correction: {cs:.3e}, {cr:.3e} <= {SCHEDULE_TOL:e}"),
        start.elapsed(),
        secs(1),
    );

    // 10. shape tracking in eps
    let start = Instant::now();
    let small = run(&spec, &desk(1e-5), &opts()).unwrap();
    let (a, b5) = (&out.convergence, &small.convergence);
    let ok10 = b5.displacement < a.displacement
        && b5.correction_op < a.correction_op
        && a.correction_op <= EPS.powf(0.2)
        && b5.correction_op <= 1e-5f64.powf(0.2);
    t.line(
        "10",
        ok10,
        false,
        format!(
            "displacement {:.3e} -> {:.3e}, |||sum Omega_hat||| {:.3e} -> {:.3e} (eps^0.2: {:.3e}, {:.3e})",
            a.displacement,
            b5.displacement,
            a.correction_op,
            b5.correction_op,
            EPS.powf(0.2),
            1e-5f64.powf(0.2)
        ),
        start.elapsed() + took,
        secs(300),
    );

    // tracked invariants
    let start = Instant::now();
    let seq: Vec<String> = out.reports.iter().map(|r| format!("{:.10e}", r.correction_op)).collect();
    let monotone = out.reports.windows(2).all(|w| w[1].correction_op >= w[0].correction_op);
    t.line("inv1", monotone, true, format!("|||sum Omega_hat||| nondecreasing: {}", seq.join(", ")), start.elapsed(), secs(1));
    let high = out.reports.iter().map(|r| r.p_high_next).fold(0.0, f64::max);
    t.line("inv2", high <= HIGH_PART_CAP, false, format!("max |P_high| {high:.3e} <= {HIGH_PART_CAP}"), start.elapsed(), secs(1));
    let value = surviving_value(&sched, STEPS);
    let bound = surviving_measure_bound(&sched, STEPS, 1.0);
    t.line(
        "inv3",
        bound.is_ok(),
        true,
        format!("1 - sum_(j<{STEPS}) eps_j^kappa = {value:.4} > 0"),
        start.elapsed(),
        secs(1),
    );

    println!("acceptance: {} unexpected failure(s)", t.unexpected);
    if t.unexpected > 0 {
        std::process::exit(1);
    }
}
