//! Gaussian measure of resonant frequency zones.
//!
//! The zone of step `k` is the set of `omega` on the box `|j| <= L^k - 1` with
//! `|<omega, nu>| <= delta_k` for some `0 < |nu|_1 <= M^k`.

use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{KamError, Result};
use crate::homological::for_each_shell;
use crate::kam_driver::IterationSchedule;

/// Samples per independently seeded block.
pub const BLOCK: usize = 4096;
/// Modes a single sample may visit before giving up.
pub const VISIT_BUDGET: u64 = 10_000_000;
pub const DEFAULT_C: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonantZoneSpec {
    pub k: usize,
    pub box_radius: i32,
    pub dim: usize,
    pub m_cap: u32,
    pub delta: f64,
}

impl ResonantZoneSpec {
    /// Zone with an explicit dimension (no schedule attached).
    pub fn with_dim(dim: usize, m_cap: u32, delta: f64) -> Self {
        ResonantZoneSpec {
            k: 0,
            box_radius: dim.div_ceil(2) as i32,
            dim,
            m_cap,
            delta,
        }
    }

    /// Zone `k >= 1`: box `L^k`, cap `M^k`, threshold `eps_{k-1}^gamma`.
    pub fn from_schedule(sched: &IterationSchedule, k: usize) -> Result<Self> {
        if k == 0 || k >= sched.rows.len() {
            return Err(KamError::Parameter(format!(
                "zone index {k} outside 1..={}",
                sched.rows.len() - 1
            )));
        }
        let row = sched.rows[k];
        Ok(ResonantZoneSpec {
            k,
            box_radius: row.l_k,
            dim: (2 * row.l_k - 1) as usize,
            m_cap: row.m_k,
            delta: sched.threshold(k - 1),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: u64,
    pub seed: u64,
}

impl MeasureEstimate {
    fn from_hits(hits: u64, samples: u64, seed: u64) -> Self {
        let mean = hits as f64 / samples as f64;
        MeasureEstimate {
            mean,
            std_error: (mean * (1.0 - mean) / samples as f64).sqrt(),
            samples,
            seed,
        }
    }
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(block as u64))
}

fn block_samples(dim: usize, len: usize, seed: u64, block: usize) -> Vec<Vec<f64>> {
    let mut rng = block_rng(seed, block);
    (0..len)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// `count x n` standard normal draws; block `b` is seeded with `seed + b`.
pub fn gaussian_sample(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let blocks = count.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| block_samples(n, BLOCK.min(count - b * BLOCK), seed, b))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Whether some `0 < |nu|_1 <= M` has `|<omega, nu>| <= delta`; shells are
/// visited in increasing order so typical samples exit early.
fn resonant(omega: &[f64], m_cap: u32, delta: f64, budget: u64) -> Result<bool> {
    let mut visited = 0u64;
    let mut over = false;
    for n in 1..=m_cap {
        let flow = for_each_shell(omega.len(), n, &mut |v: &[i32]| {
            visited += 1;
            if visited > budget {
                over = true;
                return ControlFlow::Break(());
            }
            let d: f64 = v.iter().zip(omega).map(|(&k, &w)| k as f64 * w).sum();
            if d.abs() <= delta {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        });
        if over {
            return Err(KamError::ModeExplosion {
                count: visited,
                budget,
            });
        }
        if flow.is_break() {
            return Ok(true);
        }
    }
    Ok(false)
}

pub fn resonant_measure_mc(zone: &ResonantZoneSpec, count: usize, seed: u64) -> Result<MeasureEstimate> {
    resonant_measure_mc_budget(zone, count, seed, VISIT_BUDGET)
}

pub fn resonant_measure_mc_budget(
    zone: &ResonantZoneSpec,
    count: usize,
    seed: u64,
    budget: u64,
) -> Result<MeasureEstimate> {
    if count == 0 {
        return Err(KamError::Parameter("sample count must be positive".into()));
    }
    if zone.delta <= 0.0 || zone.dim == 0 || zone.m_cap == 0 {
        return Ok(MeasureEstimate::from_hits(0, count as u64, seed));
    }
    let blocks = count.div_ceil(BLOCK);
    let hits: Result<Vec<u64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let samples = block_samples(zone.dim, BLOCK.min(count - b * BLOCK), seed, b);
            let mut h = 0u64;
            for w in &samples {
                if resonant(w, zone.m_cap, zone.delta, budget)? {
                    h += 1;
                }
            }
            Ok(h)
        })
        .collect();
    let hits: u64 = hits?.into_iter().sum();
    Ok(MeasureEstimate::from_hits(hits, count as u64, seed))
}

/// Gaussian measure of a single strip `|<omega, nu>| <= delta`.
pub fn strip_measure(nu_euclid: f64, delta: f64) -> f64 {
    if delta.is_infinite() {
        return 1.0;
    }
    erf(delta / (nu_euclid * std::f64::consts::SQRT_2))
}

/// Primitive half-plane representatives of `0 < |nu|_1 <= M` in two dimensions.
fn plane_modes(m_cap: u32) -> Vec<(i32, i32)> {
    let m = m_cap as i32;
    let mut out = Vec::new();
    for p in 0..=m {
        for q in -m..=m {
            if p.abs() + q.abs() == 0 || p.abs() + q.abs() > m || (p == 0 && q < 0) {
                continue;
            }
            out.push((p, q));
        }
    }
    out
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// Exact zone measure in one or two dimensions.
///
/// One dimension: the strips are nested intervals `|omega| <= delta/|nu|`, so
/// the union is the `|nu| = 1` strip. Two dimensions: with `omega = R u(phi)`
/// and `R` Rayleigh distributed, the union is `R <= delta / min_nu |<nu, u>|`,
/// integrated over `phi` between the zero crossings of every `<nu, u>`.
pub fn resonant_measure_exact_low_dim(zone: &ResonantZoneSpec) -> Result<f64> {
    if zone.delta <= 0.0 || zone.m_cap == 0 {
        return Ok(0.0);
    }
    if zone.delta.is_infinite() {
        return Ok(1.0);
    }
    match zone.dim {
        1 => Ok(strip_measure(1.0, zone.delta)),
        2 => {
            let modes = plane_modes(zone.m_cap);
            let f = |phi: f64| {
                let (c, s) = (phi.cos(), phi.sin());
                let min = modes
                    .iter()
                    .map(|&(p, q)| (p as f64 * c + q as f64 * s).abs())
                    .fold(f64::INFINITY, f64::min);
                if min == 0.0 {
                    1.0
                } else {
                    let t = zone.delta / min;
                    1.0 - (-0.5 * t * t).exp()
                }
            };
            // zero crossings of <nu, u(phi)> on [0, pi)
            let mut cuts: Vec<f64> = modes
                .iter()
                .map(|&(p, q)| (-(p as f64)).atan2(q as f64).rem_euclid(std::f64::consts::PI))
                .collect();
            cuts.push(0.0);
            cuts.push(std::f64::consts::PI);
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
            let total: f64 = cuts
                .windows(2)
                .map(|w| adaptive_simpson(&f, w[0], w[1], 1e-10, 40))
                .sum();
            // the integrand has period pi
            Ok(total / std::f64::consts::PI)
        }
        d => Err(KamError::Parameter(format!(
            "exact measure needs dimension 1 or 2, got {d}"
        ))),
    }
}

/// Sum of single-strip measures over the half-space modes (union bound).
pub fn union_bound(zone: &ResonantZoneSpec) -> Result<f64> {
    match zone.dim {
        1 => Ok((1..=zone.m_cap).map(|n| strip_measure(n as f64, zone.delta)).sum()),
        2 => Ok(plane_modes(zone.m_cap)
            .iter()
            .map(|&(p, q)| strip_measure(((p * p + q * q) as f64).sqrt(), zone.delta))
            .sum()),
        d => Err(KamError::Parameter(format!("union bound implemented for dimension <= 2, got {d}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivingBound {
    /// `1 - sum_{j < K} eps_j^kappa`.
    pub value: f64,
    /// `C^{2 L^k} eps_{k-1}^gamma (2 M^k)^{2 L^k}` for `k = 1..=K`.
    pub per_step: Vec<f64>,
}

/// `1 - sum_{j < K} eps_j^kappa` without the positivity check.
pub fn surviving_value(sched: &IterationSchedule, steps: usize) -> f64 {
    let kappa = sched.params.kappa;
    1.0 - sched.rows.iter().take(steps).map(|r| r.eps_k.powf(kappa)).sum::<f64>()
}

pub fn surviving_measure_bound(sched: &IterationSchedule, steps: usize, c: f64) -> Result<SurvivingBound> {
    if steps > sched.steps() {
        return Err(KamError::Parameter(format!(
            "schedule has {} steps, asked for {steps}",
            sched.steps()
        )));
    }
    let value = surviving_value(sched, steps);
    if value <= 0.0 {
        return Err(KamError::Parameter(format!(
            "surviving measure bound {value:.6} is nonpositive for K = {steps}"
        )));
    }
    let per_step = (1..=steps)
        .map(|k| {
            let row = sched.rows[k];
            let l2 = 2 * row.l_k;
            c.powi(l2) * sched.threshold(k - 1) * (2.0 * row.m_k as f64).powi(l2)
        })
        .collect();
    Ok(SurvivingBound { value, per_step })
}

/// One zone of the measure report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneReport {
    pub zone: ResonantZoneSpec,
    pub estimate: MeasureEstimate,
    pub exact: Option<f64>,
    /// `eps_{k-1}^kappa`.
    pub paper_bound: f64,
    pub holds: bool,
}

pub fn measure_schedule(sched: &IterationSchedule, count: usize, seed: u64) -> Result<Vec<ZoneReport>> {
    (1..=sched.steps())
        .map(|k| {
            let zone = ResonantZoneSpec::from_schedule(sched, k)?;
            let estimate = resonant_measure_mc(&zone, count, seed)?;
            let exact = if zone.dim <= 2 {
                Some(resonant_measure_exact_low_dim(&zone)?)
            } else {
                None
            };
            let paper_bound = sched.rows[k - 1].eps_k.powf(sched.params.kappa);
            Ok(ZoneReport {
                zone,
                estimate,
                exact,
                paper_bound,
                holds: estimate.mean <= paper_bound,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kam_driver::{build_schedule, ScheduleParams};
    use approx::assert_relative_eq;

    #[test]
    fn sampling_is_deterministic() {
        let a = gaussian_sample(3, 10_000, 11);
        let b = gaussian_sample(3, 10_000, 11);
        assert_eq!(a, b);
        assert_ne!(a, gaussian_sample(3, 10_000, 12));
    }

    #[test]
    fn exact_one_dimensional() {
        let z = ResonantZoneSpec::with_dim(1, 1, 0.1);
        let v = resonant_measure_exact_low_dim(&z).unwrap();
        assert_relative_eq!(v, 0.0796557, epsilon = 1e-7);
        let z2 = ResonantZoneSpec::with_dim(1, 2, 0.1);
        assert_eq!(resonant_measure_exact_low_dim(&z2).unwrap(), v);
        let big = ResonantZoneSpec::with_dim(1, 1, f64::INFINITY);
        assert_eq!(resonant_measure_exact_low_dim(&big).unwrap(), 1.0);
    }

    #[test]
    fn exact_two_dimensional_single_mode() {
        // with M = 1 the union is the two axis strips |w1| <= d or |w2| <= d
        let d = 0.3;
        let z = ResonantZoneSpec::with_dim(2, 1, d);
        let p = strip_measure(1.0, d);
        let expect = 1.0 - (1.0 - p) * (1.0 - p);
        assert_relative_eq!(resonant_measure_exact_low_dim(&z).unwrap(), expect, epsilon = 1e-7);
    }

    #[test]
    fn mc_examples() {
        let z = ResonantZoneSpec::with_dim(1, 1, 0.0);
        assert_eq!(resonant_measure_mc(&z, 1000, 1).unwrap().mean, 0.0);
        let z = ResonantZoneSpec::with_dim(1, 1, 0.1);
        let est = resonant_measure_mc(&z, 100_000, 5).unwrap();
        assert!((est.mean - 0.0796557).abs() <= 3.0 * est.std_error);
        let small = resonant_measure_mc(&ResonantZoneSpec::with_dim(2, 2, 0.05), 20_000, 9).unwrap();
        let large = resonant_measure_mc(&ResonantZoneSpec::with_dim(2, 4, 0.05), 20_000, 9).unwrap();
        assert!(large.mean >= small.mean);
    }

    #[test]
    fn budget_is_enforced() {
        let z = ResonantZoneSpec::with_dim(6, 40, 1e-9);
        assert!(matches!(
            resonant_measure_mc_budget(&z, 10, 1, 1000),
            Err(KamError::ModeExplosion { .. })
        ));
    }

    #[test]
    fn surviving_bound_examples() {
        let s = build_schedule(ScheduleParams {
            kappa: 0.001,
            ..ScheduleParams::desk(1e-4, 1.0, 3)
        })
        .unwrap();
        assert_eq!(surviving_measure_bound(&s, 0, 1.0).unwrap().value, 1.0);
        let direct: f64 = 1.0
            - (0..3)
                .map(|j| (1e-4f64.powf(1.05f64.powi(j))).powf(0.001))
                .sum::<f64>();
        assert_relative_eq!(surviving_value(&s, 3), direct, max_relative = 1e-14);
        assert!(direct < 0.0);
        assert!(matches!(surviving_measure_bound(&s, 3, 1.0), Err(KamError::Parameter(_))));
        assert!(surviving_value(&s, 1) > surviving_value(&s, 2));
    }
}
