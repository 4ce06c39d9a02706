//! Order-by-order homological equations with small-divisor screening.
//!
//! With `{A, B} = A_theta B_rho - A_rho B_theta` the step solves
//! `{<omega, rho>, F} + G = [G]` degree by degree, so each nonzero mode is
//! `F_nu = G_nu / (i <omega, nu>)`.

use std::collections::BinaryHeap;
use std::ops::ControlFlow;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::fourier_taylor::{AngleMode, FTSeries};
use crate::hamiltonian_model::{BoxSplit, NormalForm};
use crate::lattice_norms::{action_norm, ActionVector, LatticeMatrix, Site, WeightProfile};
use crate::linalg;

/// Default number of modes a full-box screen may visit.
pub const MODE_BUDGET: u64 = 10_000_000;
/// Smallest divisors kept in a [`DivisorReport`].
pub const REPORT_ENTRIES: usize = 64;
/// Tolerance on the averaged degree-one forcing after frequency fixing.
pub const ZERO_MODE_TOL: f64 = 1e-10;
/// Relative residual accepted by the per-degree solvers.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// Visits every integer vector of the given dimension with `|v|_1 = n`.
pub fn for_each_shell<F>(dim: usize, n: u32, f: &mut F) -> ControlFlow<()>
where
    F: FnMut(&[i32]) -> ControlFlow<()>,
{
    fn rec<F: FnMut(&[i32]) -> ControlFlow<()>>(
        buf: &mut Vec<i32>,
        pos: usize,
        rem: i32,
        f: &mut F,
    ) -> ControlFlow<()> {
        let dim = buf.len();
        if pos + 1 == dim {
            buf[pos] = rem;
            f(buf)?;
            if rem != 0 {
                buf[pos] = -rem;
                f(buf)?;
            }
            return ControlFlow::Continue(());
        }
        for x in -rem..=rem {
            buf[pos] = x;
            rec(buf, pos + 1, rem - x.abs(), f)?;
        }
        ControlFlow::Continue(())
    }
    if dim == 0 {
        return if n == 0 { f(&[]) } else { ControlFlow::Continue(()) };
    }
    let mut buf = vec![0; dim];
    rec(&mut buf, 0, n as i32, f)
}

/// Number of integer vectors in `d` dimensions with `0 < |v|_1 < m`.
pub fn mode_count(dim: usize, m: u32) -> f64 {
    // shell sizes via the Delannoy-type recursion on dimension
    let m = m as usize;
    if m == 0 {
        return 0.0;
    }
    let mut shells = vec![0.0f64; m];
    shells[0] = 1.0;
    for _ in 0..dim {
        let mut next = vec![0.0f64; m];
        for n in 0..m {
            for (x, s) in shells.iter().enumerate().take(n + 1) {
                let k = n - x;
                let ways = if k == 0 { 1.0 } else { 2.0 };
                next[n] += ways * s;
            }
        }
        shells = next;
    }
    shells.iter().skip(1).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisorReport {
    /// Smallest divisors found, ascending by absolute value.
    pub entries: Vec<(String, f64)>,
    pub min_abs: f64,
    pub threshold: f64,
    pub visited: u64,
}

impl DivisorReport {
    pub fn passes(&self) -> bool {
        self.min_abs >= self.threshold
    }
}

#[derive(PartialEq)]
struct Ranked(f64, Vec<(Site, i32)>, f64);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then_with(|| self.1.cmp(&other.1))
    }
}

#[derive(Default)]
struct Collector {
    heap: BinaryHeap<Ranked>,
    min_abs: Option<f64>,
    visited: u64,
}

impl Collector {
    fn push(&mut self, nu: Vec<(Site, i32)>, value: f64) {
        self.visited += 1;
        let a = value.abs();
        self.min_abs = Some(self.min_abs.map_or(a, |m| m.min(a)));
        if self.heap.len() < REPORT_ENTRIES {
            self.heap.push(Ranked(a, nu, value));
        } else if a < self.heap.peek().unwrap().0 {
            self.heap.pop();
            self.heap.push(Ranked(a, nu, value));
        }
    }

    fn finish(self, threshold: f64) -> DivisorReport {
        let mut v = self.heap.into_vec();
        v.sort();
        DivisorReport {
            entries: v
                .into_iter()
                .map(|Ranked(_, nu, value)| (AngleMode::from_pairs(nu).to_string(), value))
                .collect(),
            min_abs: self.min_abs.unwrap_or(f64::INFINITY),
            threshold,
            visited: self.visited,
        }
    }
}

fn resonance(nu: &AngleMode, divisor: f64, threshold: f64) -> KamError {
    KamError::Resonance {
        mode: nu.to_string(),
        divisor: divisor.abs(),
        threshold,
    }
}

/// Screens every `nu` with `0 < |nu|_1 < M` supported on `|j| <= radius`.
/// Only one of `nu, -nu` is visited.
pub fn diophantine_screen(
    omega: &ActionVector,
    radius: i32,
    m_cap: u32,
    threshold: f64,
    strict: bool,
    budget: u64,
) -> Result<DivisorReport> {
    let sites: Vec<Site> = (-radius..=radius).collect();
    diophantine_screen_on(omega, &sites, m_cap, threshold, strict, budget)
}

/// [`diophantine_screen`] on an explicit site list.
pub fn diophantine_screen_on(
    omega: &ActionVector,
    sites: &[Site],
    m_cap: u32,
    threshold: f64,
    strict: bool,
    budget: u64,
) -> Result<DivisorReport> {
    if m_cap < 2 {
        return Err(KamError::Parameter(format!("mode cap must be at least 2, got {m_cap}")));
    }
    let count = mode_count(sites.len(), m_cap) / 2.0;
    if count > budget as f64 {
        return Err(KamError::ModeExplosion {
            count: count.min(u64::MAX as f64) as u64,
            budget,
        });
    }
    let w: Vec<f64> = sites.iter().map(|&j| omega.get(j)).collect();
    let mut col = Collector::default();
    let mut hit: Option<(Vec<(Site, i32)>, f64)> = None;
    for n in 1..m_cap {
        let flow = for_each_shell(sites.len(), n, &mut |v: &[i32]| {
            if v.iter().find(|&&x| x != 0).is_some_and(|&x| x < 0) {
                return ControlFlow::Continue(());
            }
            let d: f64 = v.iter().zip(&w).map(|(&k, &o)| k as f64 * o).sum();
            let nu: Vec<(Site, i32)> =
                sites.iter().zip(v).filter(|(_, &k)| k != 0).map(|(&j, &k)| (j, k)).collect();
            if strict && d.abs() < threshold {
                hit = Some((nu, d));
                return ControlFlow::Break(());
            }
            col.push(nu, d);
            ControlFlow::Continue(())
        });
        if flow.is_break() {
            break;
        }
    }
    if let Some((nu, d)) = hit {
        return Err(resonance(&AngleMode::from_pairs(nu), d, threshold));
    }
    Ok(col.finish(threshold))
}

/// Frequency data shared by the per-degree solvers.
#[derive(Clone, Debug)]
pub struct DivisorContext {
    pub omega: ActionVector,
    pub m_cap: u32,
    pub threshold: f64,
    pub strict: bool,
}

impl DivisorContext {
    pub fn new(omega: ActionVector, m_cap: u32, threshold: f64) -> Self {
        DivisorContext {
            omega,
            m_cap,
            threshold,
            strict: true,
        }
    }
}

/// Divides every nonzero mode of `g` (first truncated to orders `< M`) by
/// `i <omega, nu>`; the average is dropped.
fn divide(g: &FTSeries, ctx: &DivisorContext, col: &mut Collector) -> Result<FTSeries> {
    let mut out = g.empty_like();
    for (nu, m, c) in g.iter() {
        if nu.is_zero() || nu.order() >= ctx.m_cap {
            continue;
        }
        let d = nu.dot(&ctx.omega);
        if d == 0.0 || (ctx.strict && d.abs() < ctx.threshold) {
            return Err(resonance(nu, d, ctx.threshold));
        }
        col.push(nu.iter().collect(), d);
        out.add_term(nu.clone(), m.clone(), c / Complex64::new(0.0, d));
    }
    Ok(out)
}

/// `d_omega F = sum_j omega_j dF/d theta_j`.
pub fn d_omega(f: &FTSeries, omega: &ActionVector) -> FTSeries {
    let mut out = f.empty_like();
    for (nu, m, c) in f.iter() {
        let d = nu.dot(omega);
        if d != 0.0 {
            out.add_term(nu.clone(), m.clone(), c * Complex64::new(0.0, d));
        }
    }
    out.canonicalize();
    out
}

/// Majorant of `d_omega F - (G - [G])` on the truncated space.
pub fn homological_residual(f: &FTSeries, forcing: &FTSeries, ctx: &DivisorContext) -> f64 {
    let g = forcing.truncate_fourier(ctx.m_cap).oscillating();
    d_omega(f, &ctx.omega).sub(&g).coefficient_majorant(f.s.min(g.s), f.r.min(g.r))
}

fn checked(f: FTSeries, forcing: &FTSeries, ctx: &DivisorContext) -> Result<FTSeries> {
    let res = homological_residual(&f, forcing, ctx);
    let scale = forcing.coefficient_majorant(forcing.s, forcing.r).max(f64::MIN_POSITIVE);
    if res > RESIDUAL_TOL * scale {
        return Err(KamError::Parameter(format!(
            "homological residual {res:.3e} exceeds {RESIDUAL_TOL:e} x forcing {scale:.3e}"
        )));
    }
    Ok(f)
}

fn solve_degree(g: &FTSeries, ctx: &DivisorContext, col: &mut Collector) -> Result<FTSeries> {
    let f = divide(g, ctx, col)?;
    checked(f, g, ctx)
}

/// `{1/2 <Omega rho, rho>, F} = -sum_ij Omega_ij rho_i dF/d theta_j`.
pub fn quad_bracket(omega_t: &LatticeMatrix, f: &FTSeries) -> FTSeries {
    f.empty_like().quadratic_form(omega_t, 0.5).bracket(f)
}

/// `F0` from the degree-zero forcing `Gamma(P0 + eps Q0)`.
pub fn solve_f0(p0: &FTSeries, q0: &FTSeries, eps: f64, ctx: &DivisorContext) -> Result<FTSeries> {
    let g = p0.add(&q0.scale_re(eps)).degree_part(0);
    solve_degree(&g, ctx, &mut Collector::default())
}

/// `a = Omega_t^{-1} ([P1] + eps [Q1])` on the support of `Omega_t`.
pub fn fix_frequency_a(
    omega_t: &LatticeMatrix,
    p1avg: &ActionVector,
    q1avg: &ActionVector,
    eps: f64,
) -> Result<ActionVector> {
    let rhs = p1avg.add(&q1avg.scale(eps));
    if rhs.iter().all(|(_, x)| x == 0.0) {
        return Ok(ActionVector::new());
    }
    let mut sites = omega_t.sites();
    for (j, _) in rhs.iter() {
        if !sites.contains(&j) {
            sites.push(j);
        }
    }
    sites.sort_unstable();
    linalg::solve_on(omega_t, &sites, &rhs)
}

/// Degree-one forcing `Gamma(P1 + eps Q1) + {N_quad, F0 + <a, theta>}`.
pub fn degree_one_forcing(
    p1: &FTSeries,
    q1: &FTSeries,
    f0: &FTSeries,
    a: &ActionVector,
    omega_t: &LatticeMatrix,
    eps: f64,
) -> FTSeries {
    let quad = f0.empty_like().quadratic_form(omega_t, 0.5);
    p1.add(&q1.scale_re(eps))
        .degree_part(1)
        .add(&quad.bracket(f0))
        .add(&quad.bracket_theta_linear(a))
}

#[allow(clippy::too_many_arguments)]
pub fn solve_f1(
    p1: &FTSeries,
    q1: &FTSeries,
    f0: &FTSeries,
    a: &ActionVector,
    omega_t: &LatticeMatrix,
    eps: f64,
    ctx: &DivisorContext,
) -> Result<FTSeries> {
    solve_f1_collect(p1, q1, f0, a, omega_t, eps, ctx, &mut Collector::default())
}

#[allow(clippy::too_many_arguments)]
fn solve_f1_collect(
    p1: &FTSeries,
    q1: &FTSeries,
    f0: &FTSeries,
    a: &ActionVector,
    omega_t: &LatticeMatrix,
    eps: f64,
    ctx: &DivisorContext,
    col: &mut Collector,
) -> Result<FTSeries> {
    let g = degree_one_forcing(p1, q1, f0, a, omega_t, eps);
    let residual = g.average().coefficient_majorant(g.s, g.r);
    if residual > ZERO_MODE_TOL {
        return Err(KamError::ZeroMode { residual });
    }
    solve_degree(&g, ctx, col)
}

/// Quadratic part of `{cubic, F0 + <a, theta>}`.
pub fn compute_u(cubic: &FTSeries, f0: &FTSeries, a: &ActionVector) -> FTSeries {
    cubic
        .bracket(f0)
        .add(&cubic.bracket_theta_linear(a))
        .degree_part(2)
}

/// Solved degree-two part and the averaged forcing as the coefficient matrix
/// `G` of `<G rho, rho>`.
#[allow(clippy::too_many_arguments)]
pub fn solve_f2(
    p2: &FTSeries,
    q2: &FTSeries,
    f1: &FTSeries,
    u: &FTSeries,
    omega_t: &LatticeMatrix,
    eps: f64,
    ctx: &DivisorContext,
) -> Result<(FTSeries, LatticeMatrix)> {
    solve_f2_collect(p2, q2, f1, u, omega_t, eps, ctx, &mut Collector::default())
}

#[allow(clippy::too_many_arguments)]
fn solve_f2_collect(
    p2: &FTSeries,
    q2: &FTSeries,
    f1: &FTSeries,
    u: &FTSeries,
    omega_t: &LatticeMatrix,
    eps: f64,
    ctx: &DivisorContext,
    col: &mut Collector,
) -> Result<(FTSeries, LatticeMatrix)> {
    let g = p2
        .add(&q2.scale_re(eps))
        .add(u)
        .degree_part(2)
        .add(&quad_bracket(omega_t, f1).degree_part(2))
        .truncate_fourier(ctx.m_cap);
    let avg = g.average().zero_mode_quadratic();
    let f2 = solve_degree(&g, ctx, col)?;
    Ok((f2, avg))
}

/// Measured sizes of a solved step against the expected shapes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub f0_norm: f64,
    pub f1_norm: f64,
    pub f2_norm: f64,
    pub a_norm: f64,
    pub forcing_norm: f64,
    pub min_divisor: f64,
    pub zero_mode_residual: f64,
    /// `|F^d| / (sigma^{-(2(d+1) L+ - 1)} eps^{1 - (d+1) gamma})`, `d = 0, 1, 2`.
    pub shape_ratios: [f64; 3],
    /// `|a| / eps^{4/5 - gamma - beta/5}`.
    pub a_ratio: f64,
    pub divisors: Option<DivisorReport>,
}

/// `F = F0 + F1 + F2 + <a, theta>` with the data the step needs afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratingFunction {
    pub f0: FTSeries,
    pub f1: FTSeries,
    pub f2: FTSeries,
    pub a: ActionVector,
    /// `[G0]`, the averaged degree-zero forcing.
    pub avg0: f64,
    /// Averaged degree-two forcing, coefficient convention.
    pub avg2: LatticeMatrix,
    pub diagnostics: Diagnostics,
}

impl GeneratingFunction {
    pub fn zero(like: &FTSeries) -> Self {
        GeneratingFunction {
            f0: like.empty_like(),
            f1: like.empty_like(),
            f2: like.empty_like(),
            a: ActionVector::new(),
            avg0: 0.0,
            avg2: LatticeMatrix::zero(),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn from_parts(f0: FTSeries, f1: FTSeries, f2: FTSeries, a: ActionVector) -> Self {
        GeneratingFunction {
            f0,
            f1,
            f2,
            a,
            avg0: 0.0,
            avg2: LatticeMatrix::zero(),
            diagnostics: Diagnostics::default(),
        }
    }

    /// `F0 + F1 + F2`.
    pub fn tilde(&self) -> FTSeries {
        self.f0.add(&self.f1).add(&self.f2)
    }

    pub fn is_zero(&self) -> bool {
        self.f0.is_empty() && self.f1.is_empty() && self.f2.is_empty() && self.a.is_zero()
    }

    /// Hessian-convention correction `Omega_hat = G + G^T`.
    pub fn omega_hat(&self) -> LatticeMatrix {
        let mut h = self.avg2.add(&self.avg2.transpose());
        h.symmetric = true;
        h
    }
}

/// Scale data for the shape diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct ShapeScales {
    pub sigma: f64,
    pub eps_k: f64,
    pub gamma: f64,
    pub beta: f64,
}

/// Box-restricted data of one step.
pub struct StepProblem<'a> {
    pub split: &'a BoxSplit,
    pub normal: &'a NormalForm,
    pub weights: &'a WeightProfile,
    pub m_cap: u32,
    pub threshold: f64,
    pub strict: bool,
    pub scales: Option<ShapeScales>,
}

impl StepProblem<'_> {
    pub fn omega_t(&self) -> LatticeMatrix {
        self.normal.omega_matrix().restrict(self.split.lp - 1)
    }

    pub fn context(&self) -> DivisorContext {
        DivisorContext {
            omega: self.normal.omega_box(self.split.lp - 1),
            m_cap: self.m_cap,
            threshold: self.threshold,
            strict: self.strict,
        }
    }

    /// `Gamma_M (P + eps Q)`.
    pub fn forcing(&self) -> FTSeries {
        self.split.inside().truncate_fourier(self.m_cap)
    }

    /// `Gamma_M` of the cubic part of `V~ + forcing`.
    pub fn cubic(&self) -> FTSeries {
        self.split
            .v_inside
            .degree_part(3)
            .add(&self.forcing().degree_part(3))
    }
}

pub fn solve_homological(prob: &StepProblem) -> Result<GeneratingFunction> {
    let ctx = prob.context();
    let omega_t = prob.omega_t();
    let forcing = prob.forcing();
    let zero = forcing.empty_like();
    let mut col = Collector::default();

    let g0 = forcing.degree_part(0);
    let f0 = solve_degree(&g0, &ctx, &mut col)?;
    let avg0 = g0.average().get(&AngleMode::zero(), &crate::ActionMonomial::one()).re;

    let fl = forcing.degree_part(1).average().zero_mode_linear();
    let a = fix_frequency_a(&omega_t, &fl, &ActionVector::new(), 0.0)?;
    let f1 = solve_f1_collect(&forcing, &zero, &f0, &a, &omega_t, 0.0, &ctx, &mut col)?;
    let u = compute_u(&prob.cubic(), &f0, &a);
    let (f2, avg2) = solve_f2_collect(&forcing, &zero, &f1, &u, &omega_t, 0.0, &ctx, &mut col)?;

    let g1 = degree_one_forcing(&forcing, &zero, &f0, &a, &omega_t, 0.0);
    let (s, r) = (forcing.s, forcing.r);
    let mut d = Diagnostics {
        f0_norm: f0.norm(),
        f1_norm: f1.norm(),
        f2_norm: f2.norm(),
        a_norm: action_norm(&a, prob.weights),
        forcing_norm: forcing.low().coefficient_majorant(s, r),
        zero_mode_residual: g1.average().coefficient_majorant(s, r),
        ..Diagnostics::default()
    };
    let report = col.finish(ctx.threshold);
    d.min_divisor = report.min_abs;
    d.divisors = Some(report);
    if let Some(sc) = prob.scales {
        let lp = prob.split.lp as f64;
        let norms = [d.f0_norm, d.f1_norm, d.f2_norm];
        for (n, x) in norms.iter().enumerate() {
            let t = (n + 1) as f64;
            let shape = sc.sigma.powf(-(2.0 * t * lp - 1.0)) * sc.eps_k.powf(1.0 - t * sc.gamma);
            d.shape_ratios[n] = x / shape;
        }
        d.a_ratio = d.a_norm / sc.eps_k.powf(0.8 - sc.gamma - sc.beta / 5.0);
    }
    Ok(GeneratingFunction {
        f0,
        f1,
        f2,
        a,
        avg0,
        avg2,
        diagnostics: d,
    })
}

/// Low-degree truncated residual of the step equation, minus its average:
/// `Gamma_M low[{N0, F} + forcing_low + {V~ + forcing_high, F}] - [.]`.
pub fn step_residual(prob: &StepProblem, f: &GeneratingFunction) -> (f64, f64) {
    let forcing = prob.forcing();
    let like = forcing.empty_like();
    let omega_t = prob.omega_t();
    let n0 = like
        .linear_form(&prob.normal.omega_box(prob.split.lp - 1))
        .add(&like.quadratic_form(&omega_t, 0.5));
    let ft = f.tilde();
    let ad = |h: &FTSeries| h.bracket(&ft).add(&h.bracket_theta_linear(&f.a));
    let high = prob.split.v_inside.add(&forcing.high());
    let total = ad(&n0).add(&forcing.low()).add(&ad(&high));
    let low = total.low().truncate_fourier(prob.m_cap).oscillating();
    let (s, r) = (forcing.s, forcing.r);
    (low.coefficient_majorant(s, r), forcing.low().coefficient_majorant(s, r))
}
