//! Time-one map of the Hamiltonian flow of a generating function, on series
//! (Lie series) and on phase points (numerical flow).
//!
//! Flow convention: `theta' = F_rho`, `rho' = -F_theta`, so that
//! `d/dt (G o X^t) = {G, F}` and `H o X^1 = sum_n ad_F^n H / n!`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::fourier_taylor::{FTSeries, PointMap};
use crate::homological::GeneratingFunction;
use crate::lattice_norms::{weight, Site};

pub const DEFAULT_DEPTH_CAP: usize = 8;
/// Terms below this fraction of the input norm end the series.
pub const STOP_REL: f64 = 1e-14;
pub const SIGN_CONVENTION: &str = "rho_dot = -F_theta";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformResult {
    pub series: FTSeries,
    pub bracket_depth_used: usize,
    pub remainder_added: f64,
}

/// `ad_F H = {H, F0 + F1 + F2} + {H, <a, theta>}`.
pub fn ad(h: &FTSeries, f: &GeneratingFunction) -> FTSeries {
    ad_with(h, &f.tilde(), f)
}

fn ad_with(h: &FTSeries, tilde: &FTSeries, f: &GeneratingFunction) -> FTSeries {
    let mut out = h.bracket(tilde);
    if !f.a.is_zero() {
        out = out.add(&h.bracket_theta_linear(&f.a));
    }
    out
}

/// `H o X^1 - H = sum_{n >= 1} ad_F^n H / n!`, stopping once a term falls
/// below `STOP_REL * reference` (default `|H|`). The geometric tail past the
/// last term joins the remainder.
pub fn lie_increment(
    h: &FTSeries,
    f: &GeneratingFunction,
    depth_cap: usize,
    reference: Option<f64>,
) -> Result<TransformResult> {
    let reference = reference.unwrap_or_else(|| h.norm());
    let mut acc = h.empty_like();
    if f.is_zero() || h.is_zero() {
        return Ok(TransformResult {
            series: acc,
            bracket_depth_used: 0,
            remainder_added: 0.0,
        });
    }
    let tilde = f.tilde();
    let mut term = h.clone();
    let mut prev_norm = h.norm();
    let mut depth = 0;
    let mut tail = 0.0;
    for n in 1..=depth_cap {
        term = ad_with(&term, &tilde, f).scale_re(1.0 / n as f64);
        let tn = term.norm();
        if tn == 0.0 {
            break;
        }
        depth = n;
        acc = acc.add(&term);
        let ratio = if prev_norm > 0.0 { tn / prev_norm } else { f64::INFINITY };
        if (2..=3).contains(&n) && ratio > 0.5 {
            return Err(KamError::Divergence { depth: n, ratio });
        }
        if tn < STOP_REL * reference || n == depth_cap {
            if ratio >= 1.0 {
                return Err(KamError::Divergence { depth: n, ratio });
            }
            tail = tn * ratio / (1.0 - ratio);
            break;
        }
        prev_norm = tn;
    }
    acc.remainder += tail;
    Ok(TransformResult {
        series: acc,
        bracket_depth_used: depth,
        remainder_added: tail,
    })
}

/// `H o X^1_F` on the narrower widths `(s_new, r_new)`.
pub fn lie_transform(
    h: &FTSeries,
    f: &GeneratingFunction,
    widths: (f64, f64),
    depth_cap: usize,
) -> Result<TransformResult> {
    let (s, r) = widths;
    if !(s > 0.0 && r > 0.0 && s <= h.s && r <= h.r) {
        return Err(KamError::Width(format!(
            "output widths ({s}, {r}) must be positive and inside ({}, {})",
            h.s, h.r
        )));
    }
    let inc = lie_increment(h, f, depth_cap, None)?;
    Ok(TransformResult {
        series: h.add(&inc.series).with_widths(s, r),
        bracket_depth_used: inc.bracket_depth_used,
        remainder_added: inc.remainder_added,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub rho: PointMap,
    pub theta: PointMap,
}

impl PhasePoint {
    pub fn real<I, J>(rho: I, theta: J) -> Self
    where
        I: IntoIterator<Item = (Site, f64)>,
        J: IntoIterator<Item = (Site, f64)>,
    {
        PhasePoint {
            rho: rho.into_iter().map(|(j, x)| (j, Complex64::new(x, 0.0))).collect(),
            theta: theta.into_iter().map(|(j, x)| (j, Complex64::new(x, 0.0))).collect(),
        }
    }

    fn sites(&self) -> BTreeSet<Site> {
        self.rho.keys().chain(self.theta.keys()).copied().collect()
    }
}

/// `|| rho ||_w < s`, `|Im theta|_inf < r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub s: f64,
    pub r: f64,
    pub alpha: f64,
}

impl Domain {
    pub fn contains(&self, z: &PhasePoint) -> bool {
        let rn: f64 = z.rho.iter().map(|(&j, x)| x.norm() * weight(self.alpha, j)).sum();
        let im = z.theta.values().map(|x| x.im.abs()).fold(0.0, f64::max);
        rn < self.s && im < self.r
    }
}

struct Flow<'a> {
    f: &'a FTSeries,
    a: BTreeMap<Site, f64>,
    sites: Vec<Site>,
}

impl Flow<'_> {
    /// State layout: `[theta_j for j in sites] ++ [rho_j for j in sites]`.
    fn field(&self, y: &[Complex64]) -> Vec<Complex64> {
        let n = self.sites.len();
        let theta: PointMap = self.sites.iter().zip(&y[..n]).map(|(&j, &x)| (j, x)).collect();
        let rho: PointMap = self.sites.iter().zip(&y[n..]).map(|(&j, &x)| (j, x)).collect();
        let (gt, gr) = self.f.gradient(&rho, &theta);
        let zero = Complex64::new(0.0, 0.0);
        let mut out = vec![zero; 2 * n];
        for (i, j) in self.sites.iter().enumerate() {
            out[i] = gr.get(j).copied().unwrap_or(zero);
            let aj = self.a.get(j).copied().unwrap_or(0.0);
            out[n + i] = -(gt.get(j).copied().unwrap_or(zero) + aj);
        }
        out
    }
}

const GL_SQ3: f64 = 0.288_675_134_594_812_9; // sqrt(3)/6
const GL_A: [[f64; 2]; 2] = [[0.25, 0.25 - GL_SQ3], [0.25 + GL_SQ3, 0.25]];

/// Flow to `t = 1` with `substeps` steps of the two-stage Gauss-Legendre
/// method (order four, symplectic); stages are solved by fixed-point
/// iteration.
pub fn transform_point(
    f: &GeneratingFunction,
    z: &PhasePoint,
    substeps: usize,
    domain: Option<&Domain>,
) -> Result<PhasePoint> {
    if substeps == 0 {
        return Err(KamError::Parameter("substeps must be positive".into()));
    }
    let tilde = f.tilde();
    let mut sites: BTreeSet<Site> = tilde.sites();
    sites.extend(f.a.iter().map(|(j, _)| j));
    sites.extend(z.sites());
    let sites: Vec<Site> = sites.into_iter().collect();
    let flow = Flow {
        f: &tilde,
        a: f.a.iter().collect(),
        sites: sites.clone(),
    };
    let n = sites.len();
    let zero = Complex64::new(0.0, 0.0);
    let mut y: Vec<Complex64> = sites
        .iter()
        .map(|j| z.theta.get(j).copied().unwrap_or(zero))
        .chain(sites.iter().map(|j| z.rho.get(j).copied().unwrap_or(zero)))
        .collect();
    let h = 1.0 / substeps as f64;
    let to_point = |y: &[Complex64]| PhasePoint {
        theta: sites.iter().zip(&y[..n]).map(|(&j, &x)| (j, x)).collect(),
        rho: sites.iter().zip(&y[n..]).map(|(&j, &x)| (j, x)).collect(),
    };
    for step in 0..substeps {
        let f0 = flow.field(&y);
        let mut k = [f0.clone(), f0];
        for _ in 0..100 {
            let mut next = [vec![zero; 2 * n], vec![zero; 2 * n]];
            for (i, row) in GL_A.iter().enumerate() {
                let yi: Vec<Complex64> = (0..2 * n)
                    .map(|c| y[c] + h * (row[0] * k[0][c] + row[1] * k[1][c]))
                    .collect();
                next[i] = flow.field(&yi);
            }
            let diff = (0..2)
                .flat_map(|i| (0..2 * n).map(move |c| (i, c)))
                .map(|(i, c)| (next[i][c] - k[i][c]).norm())
                .fold(0.0, f64::max);
            let scale = next
                .iter()
                .flat_map(|v| v.iter().map(|x| x.norm()))
                .fold(1e-300, f64::max);
            k = next;
            if diff <= 1e-15 * scale {
                break;
            }
        }
        for c in 0..2 * n {
            y[c] += h * 0.5 * (k[0][c] + k[1][c]);
        }
        if let Some(d) = domain {
            if !d.contains(&to_point(&y)) {
                return Err(KamError::Escape {
                    t: (step + 1) as f64 * h,
                });
            }
        }
    }
    Ok(to_point(&y))
}

/// Largest `|(H o X^1 as series)(z) - H(X^1(z))|` over the points.
pub fn flow_oracle_check(
    h: &FTSeries,
    f: &GeneratingFunction,
    points: &[PhasePoint],
    substeps: usize,
) -> Result<f64> {
    let lie = lie_transform(h, f, (h.s, h.r), DEFAULT_DEPTH_CAP)?.series;
    let mut worst: f64 = 0.0;
    for z in points {
        let moved = transform_point(f, z, substeps, None)?;
        let d = (lie.eval(&z.rho, &z.theta) - h.eval(&moved.rho, &moved.theta)).norm();
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Real points with `||rho||_w <= s` and angles in `[0, 2 pi)`.
pub fn sample_points(sites: &[Site], s: f64, alpha: f64, count: usize, seed: u64) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sites.len().max(1) as f64;
    (0..count)
        .map(|_| {
            let rho: Vec<(Site, f64)> = sites
                .iter()
                .map(|&j| (j, rng.gen_range(-1.0..1.0) * s / (n * weight(alpha, j))))
                .collect();
            let theta: Vec<(Site, f64)> = sites
                .iter()
                .map(|&j| (j, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            PhasePoint::real(rho, theta)
        })
        .collect()
}

/// `max_j |d theta_j| + sum_j w_j |d rho_j|`.
pub fn displacement(a: &PhasePoint, b: &PhasePoint, alpha: f64) -> f64 {
    let zero = Complex64::new(0.0, 0.0);
    let sites: BTreeSet<Site> = a.sites().union(&b.sites()).copied().collect();
    let mut dt: f64 = 0.0;
    let mut dr = 0.0;
    for j in sites {
        let ta = a.theta.get(&j).copied().unwrap_or(zero);
        let tb = b.theta.get(&j).copied().unwrap_or(zero);
        dt = dt.max((ta - tb).norm());
        let ra = a.rho.get(&j).copied().unwrap_or(zero);
        let rb = b.rho.get(&j).copied().unwrap_or(zero);
        dr += weight(alpha, j) * (ra - rb).norm();
    }
    dt + dr
}

/// Central-difference Jacobian of the time-one map at a real point, in the
/// variables `(theta_j, rho_j)` over `sites`.
pub fn jacobian(
    f: &GeneratingFunction,
    z: &PhasePoint,
    sites: &[Site],
    substeps: usize,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = sites.len();
    let read = |p: &PhasePoint| -> Vec<f64> {
        sites
            .iter()
            .map(|j| p.theta.get(j).map_or(0.0, |x| x.re))
            .chain(sites.iter().map(|j| p.rho.get(j).map_or(0.0, |x| x.re)))
            .collect()
    };
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for c in 0..2 * n {
        let mut plus = z.clone();
        let mut minus = z.clone();
        let (map_p, map_m) = if c < n {
            (&mut plus.theta, &mut minus.theta)
        } else {
            (&mut plus.rho, &mut minus.rho)
        };
        let j = sites[c % n];
        *map_p.entry(j).or_insert(Complex64::new(0.0, 0.0)) += step;
        *map_m.entry(j).or_insert(Complex64::new(0.0, 0.0)) -= step;
        let yp = read(&transform_point(f, &plus, substeps, None)?);
        let ym = read(&transform_point(f, &minus, substeps, None)?);
        for r in 0..2 * n {
            jac[(r, c)] = (yp[r] - ym[r]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Largest entry of `J^T S J - S` with `S = [[0, I], [-I, 0]]`.
pub fn symplectic_defect(jac: &DMatrix<f64>) -> f64 {
    let n = jac.nrows() / 2;
    let mut s = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        s[(i, n + i)] = 1.0;
        s[(n + i, i)] = -1.0;
    }
    (jac.transpose() * &s * jac - &s).amax()
}
