//! Iteration schedule, the KAM step and the multi-step run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::fourier_taylor::{ActionMonomial, AngleMode, FTSeries};
use crate::hamiltonian_model::{
    box_split, recenter_with, region, ModelSpec, NormalForm, RecenteredHamiltonian, Region,
};
use crate::homological::{
    solve_homological, step_residual, Diagnostics, GeneratingFunction, ShapeScales, StepProblem,
};
use crate::lattice_norms::{
    action_norm, induced_operator_norm, sup_matrix_norm, LatticeMatrix, Site, WeightProfile,
};
use crate::lie_transform::{
    displacement, lie_increment, sample_points, transform_point, DEFAULT_DEPTH_CAP,
};
use crate::linalg;

/// `sum_{k >= 1} k^-2`.
pub const ZETA2: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;
pub const DEFAULT_SLACK: f64 = 10.0;
/// Placeholder Fourier cap for row 0 (never used by a step).
pub const M0: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub eps: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub s0: f64,
    pub r0: f64,
    pub steps: usize,
}

impl ScheduleParams {
    /// Desk defaults: `beta = 0.05`, `gamma = 0.003`, `kappa = gamma / 2`,
    /// `s0 = r0 = 0.5`.
    pub fn desk(eps: f64, alpha: f64, steps: usize) -> Self {
        ScheduleParams {
            eps,
            beta: 0.05,
            gamma: 0.003,
            kappa: 0.0015,
            alpha,
            s0: 0.5,
            r0: 0.5,
            steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub k: usize,
    pub eps_k: f64,
    pub s_k: f64,
    pub r_k: f64,
    pub sigma_k: f64,
    pub sigma_t_k: f64,
    pub l_k: i32,
    pub m_k: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub params: ScheduleParams,
    /// Rows `k = 0..=K`.
    pub rows: Vec<ScheduleRow>,
    /// `L^K`, the largest box radius the run touches.
    pub lambda_needed: i32,
}

/// `3 sigma~_k`, the decrement of `s` at step `k`.
pub fn s_decrement(s0: f64, k: usize) -> f64 {
    s0 / (2.0 * ZETA2 * ((k + 1) as f64).powi(2))
}

/// `8 sigma_k`, the decrement of `r` at step `k`.
pub fn r_decrement(r0: f64, k: usize) -> f64 {
    r0 / (2.0 * ZETA2 * ((k + 1) as f64).powi(2))
}

/// `L^{k+1} = ceil(((1 + beta)/5 |ln eps_k|)^{1/(1+alpha)})`.
pub fn box_radius(eps_k: f64, beta: f64, alpha: f64) -> i32 {
    ((1.0 + beta) / 5.0 * eps_k.ln().abs()).powf(1.0 / (1.0 + alpha)).ceil() as i32
}

/// `M^{k+1} = ceil(2 |ln eps_k| / sigma_k)`.
pub fn mode_cap(eps_k: f64, sigma_k: f64) -> u32 {
    (2.0 * eps_k.ln().abs() / sigma_k).ceil() as u32
}

fn range_check(name: &str, x: f64, lo: f64, hi: f64, hi_inclusive: bool) -> Result<()> {
    let ok = x > lo && (x < hi || (hi_inclusive && x == hi));
    if ok {
        Ok(())
    } else {
        let close = if hi_inclusive { ']' } else { ')' };
        Err(KamError::Parameter(format!("{name} = {x} outside ({lo}, {hi}{close}")))
    }
}

pub fn build_schedule(p: ScheduleParams) -> Result<IterationSchedule> {
    range_check("eps", p.eps, 0.0, 1.0, false)?;
    range_check("beta", p.beta, 0.0, 0.1, false)?;
    range_check("gamma", p.gamma, 0.0, 1.0 / 301.0, false)?;
    range_check("kappa", p.kappa, 0.0, p.gamma, false)?;
    range_check("s0", p.s0, 0.0, 1.0, true)?;
    range_check("r0", p.r0, 0.0, 1.0, true)?;
    if !(p.alpha > 0.0) {
        return Err(KamError::Parameter(format!("alpha = {} must be positive", p.alpha)));
    }
    let mut rows = Vec::with_capacity(p.steps + 1);
    let (mut s, mut r) = (p.s0, p.r0);
    let (mut l, mut m) = (1, M0);
    for k in 0..=p.steps {
        let eps_k = p.eps.powf((1.0 + p.beta).powi(k as i32));
        let ds = s_decrement(p.s0, k);
        let dr = r_decrement(p.r0, k);
        let row = ScheduleRow {
            k,
            eps_k,
            s_k: s,
            r_k: r,
            sigma_k: dr / 8.0,
            sigma_t_k: ds / 3.0,
            l_k: l,
            m_k: m,
        };
        rows.push(row);
        l = box_radius(eps_k, p.beta, p.alpha);
        m = mode_cap(eps_k, row.sigma_k);
        s -= ds;
        r -= dr;
    }
    let lambda_needed = rows.last().map_or(1, |r| r.l_k);
    Ok(IterationSchedule {
        params: p,
        rows,
        lambda_needed,
    })
}

impl IterationSchedule {
    pub fn threshold(&self, k: usize) -> f64 {
        self.rows[k].eps_k.powf(self.params.gamma)
    }

    pub fn steps(&self) -> usize {
        self.rows.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecrementSums {
    /// `sum_{k<n} 3 sigma~_k`.
    pub s_partial: f64,
    /// `sum_{k<n} 8 sigma_k`.
    pub r_partial: f64,
    /// Partial sums plus the Euler-Maclaurin tail `sum_{m>n} m^-2`.
    pub s_corrected: f64,
    pub r_corrected: f64,
}

pub fn decrement_sums(s0: f64, r0: f64, n: usize) -> DecrementSums {
    // summed smallest first
    let s_partial = (0..n).rev().map(|k| s_decrement(s0, k)).fold(0.0, |a, x| a + x);
    let r_partial = (0..n).rev().map(|k| r_decrement(r0, k)).fold(0.0, |a, x| a + x);
    let x = n as f64;
    let tail = if n == 0 {
        ZETA2
    } else {
        1.0 / x - 0.5 / (x * x) + 1.0 / (6.0 * x.powi(3)) - 1.0 / (30.0 * x.powi(5))
    };
    let scale = 1.0 / (2.0 * ZETA2);
    DecrementSums {
        s_partial,
        r_partial,
        s_corrected: s_partial + s0 * scale * tail,
        r_corrected: r_partial + r0 * scale * tail,
    }
}

// ---------------------------------------------------------------------------
// normal form assembly

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OmegaBounds {
    pub sup: f64,
    pub inv_sup: f64,
    pub op: f64,
    pub inv_op: f64,
}

/// Adds the Hessian-convention correction and recomputes the box bounds.
pub fn assemble_normal_form_hessian(
    n: &NormalForm,
    omega_hat: &LatticeMatrix,
    radius: i32,
    w: &WeightProfile,
) -> Result<(NormalForm, OmegaBounds)> {
    let mut out = n.clone();
    out.correction = n.correction.add(omega_hat);
    out.correction.symmetric = n.correction.symmetric && omega_hat.symmetric;
    let om = out.omega_matrix().restrict(radius);
    let sites: Vec<Site> = (-radius..=radius).collect();
    let cond = linalg::condition_estimate(&om.to_dense(&sites));
    if !(cond <= linalg::COND_GATE) {
        return Err(KamError::SingularHessian { cond });
    }
    let inv = linalg::inverse_on(&om, &sites)?;
    let bounds = OmegaBounds {
        sup: sup_matrix_norm(&om),
        inv_sup: sup_matrix_norm(&inv),
        op: induced_operator_norm(&om, w),
        inv_op: induced_operator_norm(&inv, w),
    };
    Ok((out, bounds))
}

/// `Omega_hat = 2 sym(P2avg + eps Q2avg + Uavg)` from coefficient-convention
/// averages, then [`assemble_normal_form_hessian`].
pub fn assemble_normal_form(
    n: &NormalForm,
    p2avg: &LatticeMatrix,
    q2avg: &LatticeMatrix,
    uavg: &LatticeMatrix,
    eps: f64,
    radius: i32,
    w: &WeightProfile,
) -> Result<(NormalForm, OmegaBounds)> {
    let g = p2avg.add(&q2avg.scale(eps)).add(uavg);
    let mut hat = g.add(&g.transpose());
    hat.symmetric = true;
    assemble_normal_form_hessian(n, &hat, radius, w)
}

// ---------------------------------------------------------------------------
// step

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub k: usize,
    pub h: RecenteredHamiltonian,
    pub history: Vec<GeneratingFunction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub slack: f64,
    pub strict: bool,
    pub depth_cap: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            slack: DEFAULT_SLACK,
            strict: true,
            depth_cap: DEFAULT_DEPTH_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub k: usize,
    pub eps_k: f64,
    pub l_k: i32,
    pub l_next: i32,
    pub m_next: u32,
    pub threshold: f64,
    pub s_k: f64,
    pub r_k: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub p_low_next: f64,
    pub p_high_next: f64,
    pub contraction_bound: f64,
    /// `ln |P_{k+1}^low| / ln |P_k^low|`.
    pub contraction_ratio: Option<f64>,
    pub f_norm: f64,
    pub a_norm: f64,
    pub min_divisor: f64,
    pub omega_dev: f64,
    pub omega_bounds: OmegaBounds,
    pub omega_hat_op: f64,
    pub correction_op: f64,
    pub energy_shift: f64,
    pub residual: f64,
    pub forcing_norm: f64,
    pub lie_depth: usize,
    pub lie_remainder: f64,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// `|P_k^low|`: degree `<= 2` stored part of the perturbation (untouched
/// couplings included with their `eps`) on sites `|j| <= L`, at `(s, r)`.
pub fn p_low(h: &RecenteredHamiltonian, l: i32, s: f64, r: f64) -> f64 {
    let within = |nu: &AngleMode, m: &ActionMonomial| {
        nu.max_abs_site().unwrap_or(0).max(m.max_abs_site().unwrap_or(0)) <= l
    };
    h.pert.filter(|nu, m| m.degree() <= 2 && within(nu, m), false).coefficient_majorant(s, r)
        + h.eps
            * h.fresh
                .filter(|nu, m| m.degree() <= 2 && within(nu, m), false)
                .coefficient_majorant(s, r)
}

/// Degree `>= 3` part plus remainders at `(s, r)`.
pub fn p_high(h: &RecenteredHamiltonian, s: f64, r: f64) -> f64 {
    h.pert.high().coefficient_majorant(s, r)
        + h.pert.remainder
        + h.eps * (h.fresh.high().coefficient_majorant(s, r) + h.fresh.remainder)
}

pub fn initial_state(spec: &ModelSpec, sched: &IterationSchedule) -> Result<StepState> {
    if sched.lambda_needed > spec.weights.lambda + 1 {
        return Err(KamError::Parameter(format!(
            "schedule reaches box radius {} but the model is truncated at lambda = {}",
            sched.lambda_needed, spec.weights.lambda
        )));
    }
    if (sched.params.alpha - spec.weights.alpha).abs() > 0.0 {
        return Err(KamError::Parameter(format!(
            "schedule alpha {} differs from model alpha {}",
            sched.params.alpha, spec.weights.alpha
        )));
    }
    let mut spec = spec.clone();
    spec.eps = sched.params.eps;
    let h = recenter_with(&spec, sched.params.s0, sched.params.r0)?;
    Ok(StepState {
        k: 0,
        h,
        history: Vec::new(),
    })
}

pub fn kam_step(
    state: &StepState,
    sched: &IterationSchedule,
    opts: &StepOptions,
) -> Result<(StepState, StepReport)> {
    let k = state.k;
    if k + 1 >= sched.rows.len() {
        return Err(KamError::Parameter(format!("schedule has no row {}", k + 1)));
    }
    let started = Instant::now();
    let p = &sched.params;
    let row = sched.rows[k];
    let next = sched.rows[k + 1];
    let (l, lp, m_cap) = (row.l_k, next.l_k, next.m_k);
    let threshold = sched.threshold(k);
    let h = state.h.clone().with_widths(row.s_k, row.r_k);
    let w = h.weights;

    let split = box_split(&h, l, lp)?;
    let prob = StepProblem {
        split: &split,
        normal: &h.normal,
        weights: &w,
        m_cap,
        threshold,
        strict: opts.strict,
        scales: Some(ShapeScales {
            sigma: row.sigma_k,
            eps_k: row.eps_k,
            gamma: p.gamma,
            beta: p.beta,
        }),
    };
    let gf = solve_homological(&prob)?;
    let (residual, forcing_norm) = step_residual(&prob, &gf);

    // untouched couplings reached by the new box join the perturbation
    let moved = h.fresh.filter(|nu, m| region(nu, m, lp) != Region::Outside, false);
    let far_fresh = h.fresh.filter(|nu, m| region(nu, m, lp) == Region::Outside, false);
    let mut pert_all = h.pert.add(&moved.scale_re(h.eps));
    pert_all.remainder = h.pert.remainder + h.eps * h.fresh.remainder;

    let like = h.pert.empty_like();
    let n_dyn = h.normal.dynamic_series(&like);
    let dn = lie_increment(&n_dyn, &gf, opts.depth_cap, None)?;
    let dv = lie_increment(&h.v, &gf, opts.depth_cap, None)?;
    let dp = lie_increment(&pert_all, &gf, opts.depth_cap, None)?;

    let omega_hat = gf.omega_hat();
    let mut pert = pert_all
        .add(&dn.series)
        .add(&dv.series)
        .add(&dp.series)
        .sub(&like.quadratic_form(&omega_hat, 0.5));
    let zero = (AngleMode::zero(), ActionMonomial::one());
    let constant = pert.get(&zero.0, &zero.1);
    let mut stripped = pert.filter(|nu, m| !(nu.is_zero() && m.degree() == 0), true);
    stripped.remainder += constant.im.abs();
    pert = stripped;
    pert.canonicalize();

    let (mut normal, bounds) = assemble_normal_form_hessian(&h.normal, &omega_hat, lp - 1, &w)?;
    normal.e += constant.re;

    let new_h = RecenteredHamiltonian {
        normal,
        v: h.v.clone(),
        pert,
        fresh: far_fresh,
        eps: h.eps,
        weights: w,
    }
    .with_widths(next.s_k, next.r_k);

    let pk = p_low(&h, l, row.s_k, row.r_k);
    let pk1 = p_low(&new_h, lp, next.s_k, next.r_k);
    let bound = opts.slack * next.eps_k;
    let ratio = (pk > 0.0 && pk < 1.0 && pk1 > 0.0).then(|| pk1.ln() / pk.ln());
    if pk1 > bound {
        return Err(KamError::Contraction {
            k,
            measured: pk1,
            bound,
            ratio: ratio.unwrap_or(f64::NAN),
        });
    }

    let omega_dev = action_norm(&new_h.pert.zero_mode_linear(), &w);
    let report = StepReport {
        k,
        eps_k: row.eps_k,
        l_k: l,
        l_next: lp,
        m_next: m_cap,
        threshold,
        s_k: row.s_k,
        r_k: row.r_k,
        p_low: pk,
        p_high: p_high(&h, row.s_k, row.r_k),
        p_low_next: pk1,
        p_high_next: p_high(&new_h, next.s_k, next.r_k),
        contraction_bound: bound,
        contraction_ratio: ratio,
        f_norm: gf.tilde().norm(),
        a_norm: gf.diagnostics.a_norm,
        min_divisor: gf.diagnostics.min_divisor,
        omega_dev,
        omega_bounds: bounds,
        omega_hat_op: induced_operator_norm(&omega_hat, &w),
        correction_op: induced_operator_norm(&new_h.normal.correction, &w),
        energy_shift: constant.re,
        residual,
        forcing_norm,
        lie_depth: dn.bracket_depth_used.max(dv.bracket_depth_used).max(dp.bracket_depth_used),
        lie_remainder: dn.remainder_added + dv.remainder_added + dp.remainder_added,
        diagnostics: gf.diagnostics.clone(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    let mut history = state.history.clone();
    history.push(gf);
    Ok((
        StepState {
            k: k + 1,
            h: new_h,
            history,
        },
        report,
    ))
}

// ---------------------------------------------------------------------------
// run

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Largest displacement of the composed transform on sample points.
    pub displacement: f64,
    /// `|||sum Omega_hat|||`.
    pub correction_op: f64,
    pub p_low: Vec<f64>,
    pub eps_17_50: f64,
    pub eps_1_5: f64,
    pub displacement_ratio: f64,
    pub correction_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub reports: Vec<StepReport>,
    pub final_state: StepState,
    pub convergence: Convergence,
}

/// Number and seed of the sample points used for the displacement summary.
pub const DISPLACEMENT_POINTS: usize = 16;
pub const DISPLACEMENT_SEED: u64 = 7;

/// Largest displacement of `Phi_0 o ... o Phi_{K-1}` on sample points of
/// `D_{s0/2, r0/2}` over `sites`.
pub fn composed_displacement(
    history: &[GeneratingFunction],
    sites: &[Site],
    s: f64,
    alpha: f64,
) -> Result<f64> {
    let pts = sample_points(sites, s, alpha, DISPLACEMENT_POINTS, DISPLACEMENT_SEED);
    let mut worst: f64 = 0.0;
    for z in &pts {
        let mut y = z.clone();
        for f in history.iter().rev() {
            y = transform_point(f, &y, 16, None)?;
        }
        worst = worst.max(displacement(&y, z, alpha));
    }
    Ok(worst)
}

pub fn convergence_summary(
    state: &StepState,
    reports: &[StepReport],
    sched: &IterationSchedule,
) -> Result<Convergence> {
    let p = &sched.params;
    let r = sched.lambda_needed.max(1) - 1;
    let sites: Vec<Site> = (-r..=r).collect();
    let disp = composed_displacement(&state.history, &sites, p.s0 / 2.0, p.alpha)?;
    let corr = induced_operator_norm(&state.h.normal.correction, &state.h.weights);
    let mut p_low: Vec<f64> = reports.iter().map(|r| r.p_low).collect();
    if let Some(last) = reports.last() {
        p_low.push(last.p_low_next);
    }
    let e1750 = p.eps.powf(17.0 / 50.0);
    let e15 = p.eps.powf(0.2);
    Ok(Convergence {
        displacement: disp,
        correction_op: corr,
        p_low,
        eps_17_50: e1750,
        eps_1_5: e15,
        displacement_ratio: disp / e1750,
        correction_ratio: corr / e15,
    })
}

/// Runs the remaining steps of `state`, calling `on_step` after each one.
pub fn run_from<C>(
    mut state: StepState,
    sched: &IterationSchedule,
    opts: &StepOptions,
    mut on_step: C,
) -> Result<(StepState, Vec<StepReport>)>
where
    C: FnMut(&StepState, &StepReport) -> Result<()>,
{
    let mut reports = Vec::new();
    while state.k < sched.steps() {
        let k = state.k;
        let (next, rep) = kam_step(&state, sched, opts).map_err(|e| e.at_step(k))?;
        on_step(&next, &rep)?;
        reports.push(rep);
        state = next;
    }
    Ok((state, reports))
}

pub fn run(spec: &ModelSpec, sched: &IterationSchedule, opts: &StepOptions) -> Result<RunOutput> {
    let state = initial_state(spec, sched)?;
    let (final_state, reports) = run_from(state, sched, opts, |_, _| Ok(()))?;
    let convergence = convergence_summary(&final_state, &reports, sched)?;
    Ok(RunOutput {
        reports,
        final_state,
        convergence,
    })
}

/// Per-step residual of the normal form: largest weighted zero-mode linear
/// coefficient of the perturbation.
pub fn frequency_deviation(h: &RecenteredHamiltonian) -> f64 {
    action_norm(&h.pert.zero_mode_linear(), &h.weights)
}

/// The transformed Hamiltonian as a single series (for sampling checks).
pub fn total_series(h: &RecenteredHamiltonian) -> FTSeries {
    h.total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn schedule_examples() {
        let s = build_schedule(ScheduleParams::desk(1e-4, 1.0, 3)).unwrap();
        assert_relative_eq!(s.rows[1].eps_k, 10f64.powf(-4.2), max_relative = 1e-12);
        assert_relative_eq!(s.rows[1].eps_k, 6.3096e-5, max_relative = 1e-4);
        assert_eq!(s.rows[1].l_k, 2);
        assert_eq!(s.rows[0].l_k, 1);
        assert_eq!(mode_cap(1e-4, 1.0 / 16.0), 295);
        // sigma_0 = r0 / (16 zeta(2)) with r0 = 1
        let one = build_schedule(ScheduleParams { r0: 1.0, ..ScheduleParams::desk(1e-4, 1.0, 1) }).unwrap();
        assert_relative_eq!(one.rows[0].sigma_k, 1.0 / (16.0 * ZETA2), max_relative = 1e-14);
        assert_eq!(one.rows[1].m_k, 485);
        for w in s.rows.windows(2) {
            assert!(w[1].s_k < w[0].s_k && w[1].s_k > 0.25);
            assert!(w[1].r_k < w[0].r_k && w[1].r_k > 0.25);
        }
    }

    #[test]
    fn schedule_rejects_ranges() {
        let d = ScheduleParams::desk(1e-4, 1.0, 3);
        for bad in [
            ScheduleParams { beta: 0.1, ..d },
            ScheduleParams { gamma: 0.004, ..d },
            ScheduleParams { kappa: 0.003, ..d },
            ScheduleParams { s0: 1.5, ..d },
            ScheduleParams { r0: 0.0, ..d },
            ScheduleParams { eps: 1.0, ..d },
        ] {
            assert!(matches!(build_schedule(bad), Err(KamError::Parameter(_))));
        }
    }

    #[test]
    fn normal_form_examples() {
        let w = WeightProfile { alpha: 1.0, lambda: 1 };
        let n = NormalForm {
            e: 0.0,
            omega: crate::ActionVector::from_pairs([(0, 1.0)]),
            hessian: LatticeMatrix::identity(-1..=1),
            correction: LatticeMatrix::zero(),
            kappa1: 1.0,
            kappa2: 1.0,
        };
        let (same, _) = assemble_normal_form_hessian(&n, &LatticeMatrix::zero(), 1, &w).unwrap();
        assert_eq!(same.omega_matrix(), n.omega_matrix());

        let mut p2 = LatticeMatrix::zero();
        p2.set(0, 0, 0.05);
        let z = LatticeMatrix::zero();
        let (nf, b) = assemble_normal_form(&n, &p2, &z, &z, 0.0, 0, &w).unwrap();
        assert_relative_eq!(nf.omega_matrix().get(0, 0), 1.1, max_relative = 1e-15);
        assert_relative_eq!(b.inv_sup, 1.0 / 1.1, max_relative = 1e-14);

        let mut c = LatticeMatrix::zero();
        c.add_sym(0, 1, 0.01);
        c.symmetric = true;
        let (nf, _) = assemble_normal_form_hessian(&n, &c, 1, &w).unwrap();
        assert!(nf.omega_matrix().is_symmetric());
    }
}
