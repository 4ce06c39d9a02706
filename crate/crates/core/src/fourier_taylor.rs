//! Sparse Fourier–Taylor series in `(rho, theta)`.
//!
//! A series is a finite sum `sum c_{nu,m} e^{i<nu,theta>} prod_j rho_j^{m_j}`
//! plus a scalar `remainder` bounding discarded content on the polydisc
//! `D_{s,r}`: weighted norm of `rho` below `s`, `|Im theta|_inf` below `r`.
//! Storage is a `BTreeMap`, so every accumulation runs in sorted key order
//! and results are bit-reproducible.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::lattice_norms::{weight, ActionVector, LatticeMatrix, Site};

pub const DEFAULT_DMAX: u32 = 5;
pub const PRUNE_EPS: f64 = 1e-30;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn merge<T: Copy + std::ops::Add<Output = T> + PartialEq + Default>(
    a: &[(Site, T)],
    b: &[(Site, T)],
) -> Vec<(Site, T)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let take = if i == a.len() {
            1
        } else if j == b.len() {
            0
        } else if a[i].0 < b[j].0 {
            0
        } else if a[i].0 > b[j].0 {
            1
        } else {
            2
        };
        match take {
            0 => {
                out.push(a[i]);
                i += 1;
            }
            1 => {
                out.push(b[j]);
                j += 1;
            }
            _ => {
                let v = a[i].1 + b[j].1;
                if v != T::default() {
                    out.push((a[i].0, v));
                }
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Angle mode `nu`, stored sparse and sorted by site.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AngleMode(Vec<(Site, i32)>);

impl AngleMode {
    pub fn zero() -> Self {
        Self(Vec::new())
    }

    pub fn from_pairs<I: IntoIterator<Item = (Site, i32)>>(pairs: I) -> Self {
        let mut m: BTreeMap<Site, i32> = BTreeMap::new();
        for (j, k) in pairs {
            *m.entry(j).or_insert(0) += k;
        }
        Self(m.into_iter().filter(|&(_, k)| k != 0).collect())
    }

    pub fn single(j: Site, k: i32) -> Self {
        Self::from_pairs([(j, k)])
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    /// `|nu|_1`.
    pub fn order(&self) -> u32 {
        self.0.iter().map(|&(_, k)| k.unsigned_abs()).sum()
    }

    pub fn get(&self, j: Site) -> i32 {
        self.0.iter().find(|&&(s, _)| s == j).map(|&(_, k)| k).unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, i32)> + '_ {
        self.0.iter().copied()
    }

    pub fn add(&self, other: &AngleMode) -> AngleMode {
        AngleMode(merge(&self.0, &other.0))
    }

    pub fn neg(&self) -> AngleMode {
        AngleMode(self.0.iter().map(|&(j, k)| (j, -k)).collect())
    }

    /// `<omega, nu>`.
    pub fn dot(&self, omega: &ActionVector) -> f64 {
        self.0.iter().map(|&(j, k)| k as f64 * omega.get(j)).sum()
    }

    pub fn max_abs_site(&self) -> Option<i32> {
        self.0.iter().map(|&(j, _)| j.abs()).max()
    }
}

impl std::fmt::Display for AngleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (n, (j, k)) in self.iter().enumerate() {
            if n > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{j}:{k}")?;
        }
        write!(f, "}}")
    }
}

/// Action monomial `rho^m`, stored sparse and sorted by site.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionMonomial(Vec<(Site, u32)>);

impl ActionMonomial {
    pub fn one() -> Self {
        Self(Vec::new())
    }

    pub fn from_pairs<I: IntoIterator<Item = (Site, u32)>>(pairs: I) -> Self {
        let mut m: BTreeMap<Site, u32> = BTreeMap::new();
        for (j, k) in pairs {
            *m.entry(j).or_insert(0) += k;
        }
        Self(m.into_iter().filter(|&(_, k)| k != 0).collect())
    }

    pub fn var(j: Site) -> Self {
        Self(vec![(j, 1)])
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&(_, k)| k).sum()
    }

    pub fn get(&self, j: Site) -> u32 {
        self.0.iter().find(|&&(s, _)| s == j).map(|&(_, k)| k).unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, u32)> + '_ {
        self.0.iter().copied()
    }

    pub fn mul(&self, other: &ActionMonomial) -> ActionMonomial {
        ActionMonomial(merge(&self.0, &other.0))
    }

    /// `rho^m / rho_j`, or `None` when `m_j = 0`.
    pub fn lower(&self, j: Site) -> Option<ActionMonomial> {
        let mut v = self.0.clone();
        let pos = v.iter().position(|&(s, _)| s == j)?;
        if v[pos].1 == 1 {
            v.remove(pos);
        } else {
            v[pos].1 -= 1;
        }
        Some(ActionMonomial(v))
    }

    pub fn max_abs_site(&self) -> Option<i32> {
        self.0.iter().map(|&(j, _)| j.abs()).max()
    }
}

/// `e^{r'|nu|_1} prod_j (s' e^{-|j|^{1+alpha}})^{m_j}`.
pub fn majorant_weight(nu: &AngleMode, m: &ActionMonomial, s: f64, r: f64, alpha: f64) -> f64 {
    let mut x = (r * nu.order() as f64).exp();
    for (j, k) in m.iter() {
        x *= (s / weight(alpha, j)).powi(k as i32);
    }
    x
}

pub type Key = (AngleMode, ActionMonomial);

/// Correctly rounded sum (Shewchuk partials), independent of input order.
fn exact_sum(xs: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x0 in xs {
        let mut x = x0;
        let mut i = 0;
        for k in 0..partials.len() {
            let mut y = partials[k];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = 2.0 * lo;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Point values for `rho` or `theta`, keyed by site (absent sites are zero).
pub type PointMap = BTreeMap<Site, Complex64>;

#[derive(Clone, Debug, PartialEq)]
pub struct FTSeries {
    coeffs: BTreeMap<Key, Complex64>,
    pub s: f64,
    pub r: f64,
    pub remainder: f64,
    pub alpha: f64,
    pub dmax: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlgebraOp {
    Add,
    Sub,
    Scale(Complex64),
    Multiply,
}

impl FTSeries {
    pub fn zero(alpha: f64, s: f64, r: f64) -> Self {
        Self {
            coeffs: BTreeMap::new(),
            s,
            r,
            remainder: 0.0,
            alpha,
            dmax: DEFAULT_DMAX,
        }
    }

    pub fn with_dmax(mut self, dmax: u32) -> Self {
        self.dmax = dmax;
        self
    }

    /// Empty series sharing widths, weights and degree cap.
    pub fn empty_like(&self) -> Self {
        Self {
            coeffs: BTreeMap::new(),
            s: self.s,
            r: self.r,
            remainder: 0.0,
            alpha: self.alpha,
            dmax: self.dmax,
        }
    }

    pub fn with_term(mut self, nu: AngleMode, m: ActionMonomial, c: Complex64) -> Self {
        self.add_term(nu, m, c);
        self
    }

    pub fn constant_like(&self, c: f64) -> Self {
        self.empty_like()
            .with_term(AngleMode::zero(), ActionMonomial::one(), Complex64::new(c, 0.0))
    }

    /// `<v, rho>`.
    pub fn linear_form(&self, v: &ActionVector) -> Self {
        let mut out = self.empty_like();
        for (j, x) in v.iter() {
            out.add_term(AngleMode::zero(), ActionMonomial::var(j), Complex64::new(x, 0.0));
        }
        out
    }

    /// `c <B rho, rho>`; `c = 1/2` gives the Hessian convention.
    pub fn quadratic_form(&self, b: &LatticeMatrix, c: f64) -> Self {
        let mut out = self.empty_like();
        for ((i, j), x) in b.iter() {
            let m = ActionMonomial::from_pairs([(i, 1), (j, 1)]);
            out.add_term(AngleMode::zero(), m, Complex64::new(c * x, 0.0));
        }
        out
    }

    /// Adds `c` at `(nu, m)`; content above the degree cap goes to the remainder.
    pub fn add_term(&mut self, nu: AngleMode, m: ActionMonomial, c: Complex64) {
        if c == Complex64::new(0.0, 0.0) {
            return;
        }
        if m.degree() > self.dmax {
            self.remainder += c.norm() * majorant_weight(&nu, &m, self.s, self.r, self.alpha);
            return;
        }
        let e = self.coeffs.entry((nu, m)).or_insert(Complex64::new(0.0, 0.0));
        *e += c;
    }

    pub fn get(&self, nu: &AngleMode, m: &ActionMonomial) -> Complex64 {
        self.coeffs
            .get(&(nu.clone(), m.clone()))
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AngleMode, &ActionMonomial, Complex64)> + '_ {
        self.coeffs.iter().map(|((nu, m), &c)| (nu, m, c))
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// No stored coefficients and no remainder.
    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty() && self.remainder == 0.0
    }

    /// Drops exact zeros and prunes coefficients below [`PRUNE_EPS`] into the
    /// remainder.
    pub fn canonicalize(&mut self) {
        let (s, r, alpha) = (self.s, self.r, self.alpha);
        let mut pruned = 0.0;
        self.coeffs.retain(|(nu, m), c| {
            let a = c.norm();
            if a == 0.0 {
                false
            } else if a < PRUNE_EPS {
                pruned += a * majorant_weight(nu, m, s, r, alpha);
                false
            } else {
                true
            }
        });
        self.remainder += pruned;
    }

    fn check_compatible(&self, other: &FTSeries) -> Result<()> {
        if self.alpha != other.alpha {
            return Err(KamError::Width(format!(
                "weight exponents differ: {} vs {}",
                self.alpha, other.alpha
            )));
        }
        for (name, x) in [("s", self.s), ("r", self.r), ("s", other.s), ("r", other.r)] {
            if !(x > 0.0) {
                return Err(KamError::Width(format!("nonpositive width {name} = {x}")));
            }
        }
        Ok(())
    }

    fn joined(&self, other: &FTSeries) -> FTSeries {
        FTSeries {
            coeffs: BTreeMap::new(),
            s: self.s.min(other.s),
            r: self.r.min(other.r),
            remainder: 0.0,
            alpha: self.alpha,
            dmax: self.dmax.min(other.dmax),
        }
    }

    pub fn add(&self, other: &FTSeries) -> FTSeries {
        let mut out = self.joined(other);
        for (nu, m, c) in self.iter().chain(other.iter()) {
            out.add_term(nu.clone(), m.clone(), c);
        }
        out.remainder += self.remainder + other.remainder;
        out.canonicalize();
        out
    }

    pub fn sub(&self, other: &FTSeries) -> FTSeries {
        let mut out = self.joined(other);
        for (nu, m, c) in self.iter() {
            out.add_term(nu.clone(), m.clone(), c);
        }
        for (nu, m, c) in other.iter() {
            out.add_term(nu.clone(), m.clone(), -c);
        }
        out.remainder += self.remainder + other.remainder;
        out.canonicalize();
        out
    }

    pub fn scale(&self, c: Complex64) -> FTSeries {
        let mut out = self.empty_like();
        if c.norm() == 0.0 {
            return out;
        }
        for (nu, m, x) in self.iter() {
            out.add_term(nu.clone(), m.clone(), c * x);
        }
        out.remainder = c.norm() * self.remainder;
        out.canonicalize();
        out
    }

    pub fn scale_re(&self, c: f64) -> FTSeries {
        self.scale(Complex64::new(c, 0.0))
    }

    /// Cauchy product; degree overflow is routed to the remainder.
    pub fn mul(&self, other: &FTSeries) -> FTSeries {
        let mut out = self.joined(other);
        for (n1, m1, c1) in self.iter() {
            for (n2, m2, c2) in other.iter() {
                out.add_term(n1.add(n2), m1.mul(m2), c1 * c2);
            }
        }
        let (a, b) = (
            self.stored_majorant(out.s, out.r),
            other.stored_majorant(out.s, out.r),
        );
        out.remainder += a * other.remainder + self.remainder * b + self.remainder * other.remainder;
        out.canonicalize();
        out
    }

    /// Poisson bracket `<F_theta, G_rho> - <F_rho, G_theta>`.
    ///
    /// Input remainders are propagated by a Cauchy-type surrogate on the half
    /// widths; this is a bookkeeping estimate, not a certified bound.
    pub fn bracket(&self, other: &FTSeries) -> FTSeries {
        let mut out = self.joined(other);
        let mut parts: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (n1, m1, c1) in self.iter() {
            for (n2, m2, c2) in other.iter() {
                let sites: BTreeSet<Site> = n1
                    .iter()
                    .map(|(j, _)| j)
                    .chain(m1.iter().map(|(j, _)| j))
                    .chain(n2.iter().map(|(j, _)| j))
                    .chain(m2.iter().map(|(j, _)| j))
                    .collect();
                let nu = n1.add(n2);
                let prod = c1 * c2;
                for j in sites {
                    let f = n1.get(j) as i64 * m2.get(j) as i64 - m1.get(j) as i64 * n2.get(j) as i64;
                    if f == 0 {
                        continue;
                    }
                    let m = m1.mul(m2).lower(j).expect("degree in j is positive when f != 0");
                    let v = I * prod * f as f64;
                    let slot = parts.entry((nu.clone(), m)).or_default();
                    slot.0.push(v.re);
                    slot.1.push(v.im);
                }
            }
        }
        // correctly rounded sums make {F, G} = -{G, F} bit for bit
        for ((nu, m), (re, im)) in parts {
            out.add_term(nu, m, Complex64::new(exact_sum(&re), exact_sum(&im)));
        }
        if self.remainder > 0.0 || other.remainder > 0.0 {
            let wmax = self
                .sites()
                .union(&other.sites())
                .map(|&j| weight(self.alpha, j))
                .fold(1.0, f64::max);
            let k = 4.0 * wmax / (out.s * out.r);
            let (a, b) = (
                self.stored_majorant(out.s, out.r),
                other.stored_majorant(out.s, out.r),
            );
            out.remainder +=
                k * (self.remainder * (b + other.remainder) + other.remainder * a);
        }
        out.canonicalize();
        out
    }

    /// `{self, <a, theta>} = -sum_j a_j d(self)/d rho_j`.
    pub fn bracket_theta_linear(&self, a: &ActionVector) -> FTSeries {
        let mut out = self.empty_like();
        for (j, aj) in a.iter() {
            for (nu, m, c) in self.iter() {
                let mj = m.get(j);
                if mj == 0 {
                    continue;
                }
                out.add_term(nu.clone(), m.lower(j).unwrap(), -c * (aj * mj as f64));
            }
        }
        out.canonicalize();
        out
    }

    pub fn d_theta(&self, j: Site) -> FTSeries {
        let mut out = self.empty_like();
        for (nu, m, c) in self.iter() {
            let k = nu.get(j);
            if k != 0 {
                out.add_term(nu.clone(), m.clone(), I * c * k as f64);
            }
        }
        out.canonicalize();
        out
    }

    pub fn d_rho(&self, j: Site) -> FTSeries {
        let mut out = self.empty_like();
        for (nu, m, c) in self.iter() {
            let k = m.get(j);
            if k != 0 {
                out.add_term(nu.clone(), m.lower(j).unwrap(), c * k as f64);
            }
        }
        out.canonicalize();
        out
    }

    /// Keeps the stored terms satisfying `pred`; the remainder stays with the
    /// kept part only when `keep_remainder` is set.
    pub fn filter<P: Fn(&AngleMode, &ActionMonomial) -> bool>(
        &self,
        pred: P,
        keep_remainder: bool,
    ) -> FTSeries {
        let mut out = self.empty_like();
        for (nu, m, c) in self.iter() {
            if pred(nu, m) {
                out.coeffs.insert((nu.clone(), m.clone()), c);
            }
        }
        if keep_remainder {
            out.remainder = self.remainder;
        }
        out
    }

    /// Stored terms of exact degree `d`, no remainder.
    pub fn degree_part(&self, d: u32) -> FTSeries {
        self.filter(|_, m| m.degree() == d, false)
    }

    /// Stored terms of degree at most two.
    pub fn low(&self) -> FTSeries {
        self.filter(|_, m| m.degree() <= 2, false)
    }

    /// Degree at least three plus the remainder.
    pub fn high(&self) -> FTSeries {
        self.filter(|_, m| m.degree() >= 3, true)
    }

    /// The Fourier cut `Gamma_M`: modes with `|nu|_1 < M` survive; the dropped
    /// majorant mass joins the remainder.
    pub fn truncate_fourier(&self, m_cap: u32) -> FTSeries {
        let mut out = self.filter(|nu, _| nu.order() < m_cap, true);
        for (nu, m, c) in self.iter() {
            if nu.order() >= m_cap {
                out.remainder += c.norm() * majorant_weight(nu, m, self.s, self.r, self.alpha);
            }
        }
        out
    }

    /// Zero-mode part `[G]`.
    pub fn average(&self) -> FTSeries {
        self.filter(|nu, _| nu.is_zero(), false)
    }

    /// Complement of [`FTSeries::average`] on stored terms.
    pub fn oscillating(&self) -> FTSeries {
        self.filter(|nu, _| !nu.is_zero(), false)
    }

    /// `(G0, G1, G2, G_high)` by action degree; the remainder goes to `G_high`.
    pub fn split_by_degree(&self) -> (FTSeries, FTSeries, FTSeries, FTSeries) {
        (self.degree_part(0), self.degree_part(1), self.degree_part(2), self.high())
    }

    fn stored_majorant(&self, s: f64, r: f64) -> f64 {
        self.iter()
            .map(|(nu, m, c)| c.norm() * majorant_weight(nu, m, s, r, self.alpha))
            .fold(0.0, |a, x| a + x)
    }

    /// Coefficient majorant on `D_{s', r'}` including the remainder.
    pub fn majorant_norm(&self, s: f64, r: f64) -> Result<f64> {
        let tol = 1e-12;
        if !(s > 0.0 && r >= 0.0) || s > self.s * (1.0 + tol) || r > self.r * (1.0 + tol) {
            return Err(KamError::Width(format!(
                "norm requested on ({s}, {r}) outside series widths ({}, {})",
                self.s, self.r
            )));
        }
        Ok(self.stored_majorant(s, r) + self.remainder)
    }

    /// Majorant at the series' own widths.
    pub fn norm(&self) -> f64 {
        self.stored_majorant(self.s, self.r) + self.remainder
    }

    /// Majorant of stored terms at arbitrary widths, ignoring the remainder.
    pub fn coefficient_majorant(&self, s: f64, r: f64) -> f64 {
        self.stored_majorant(s, r)
    }

    pub fn eval(&self, rho: &PointMap, theta: &PointMap) -> Complex64 {
        let zero = Complex64::new(0.0, 0.0);
        let mut acc = zero;
        for (nu, m, c) in self.iter() {
            let mut phase = zero;
            for (j, k) in nu.iter() {
                phase += theta.get(&j).copied().unwrap_or(zero) * k as f64;
            }
            let mut v = c * (I * phase).exp();
            for (j, k) in m.iter() {
                v *= rho.get(&j).copied().unwrap_or(zero).powu(k);
            }
            acc += v;
        }
        acc
    }

    /// `(dF/dtheta, dF/drho)` at a point, on the given sites.
    pub fn gradient(&self, rho: &PointMap, theta: &PointMap) -> (PointMap, PointMap) {
        let zero = Complex64::new(0.0, 0.0);
        let mut gt: PointMap = BTreeMap::new();
        let mut gr: PointMap = BTreeMap::new();
        for (nu, m, c) in self.iter() {
            let mut phase = zero;
            for (j, k) in nu.iter() {
                phase += theta.get(&j).copied().unwrap_or(zero) * k as f64;
            }
            let e = c * (I * phase).exp();
            let powers: Vec<(Site, u32, Complex64)> = m
                .iter()
                .map(|(j, k)| (j, k, rho.get(&j).copied().unwrap_or(zero)))
                .collect();
            let full: Complex64 = powers.iter().fold(e, |acc, &(_, k, x)| acc * x.powu(k));
            for (j, k) in nu.iter() {
                *gt.entry(j).or_insert(zero) += I * full * k as f64;
            }
            for (a, &(j, k, _)) in powers.iter().enumerate() {
                let mut v = e * k as f64;
                for (b, &(_, kb, xb)) in powers.iter().enumerate() {
                    v *= if a == b { xb.powu(kb - 1) } else { xb.powu(kb) };
                }
                *gr.entry(j).or_insert(zero) += v;
            }
        }
        (gt, gr)
    }

    /// Largest `|c(-nu, m) - conj c(nu, m)|`; zero for a real-valued series.
    pub fn reality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (nu, m, c) in self.iter() {
            let d = (self.get(&nu.neg(), m) - c.conj()).norm();
            worst = worst.max(d);
        }
        worst
    }

    /// Union of sites appearing in modes or monomials.
    pub fn sites(&self) -> BTreeSet<Site> {
        let mut out = BTreeSet::new();
        for (nu, m, _) in self.iter() {
            out.extend(nu.iter().map(|(j, _)| j));
            out.extend(m.iter().map(|(j, _)| j));
        }
        out
    }

    pub fn max_order(&self) -> u32 {
        self.iter().map(|(nu, _, _)| nu.order()).max().unwrap_or(0)
    }

    pub fn max_degree(&self) -> u32 {
        self.iter().map(|(_, m, _)| m.degree()).max().unwrap_or(0)
    }

    /// Same coefficients on narrower widths (the remainder bound stays valid).
    pub fn with_widths(&self, s: f64, r: f64) -> FTSeries {
        let mut out = self.clone();
        out.s = s;
        out.r = r;
        out
    }

    /// Zero-mode degree-one coefficients as a real vector.
    pub fn zero_mode_linear(&self) -> ActionVector {
        ActionVector::from_pairs(
            self.iter()
                .filter(|(nu, m, _)| nu.is_zero() && m.degree() == 1)
                .map(|(_, m, c)| (m.iter().next().unwrap().0, c.re)),
        )
    }

    /// Zero-mode degree-two part as the symmetric matrix `G` of `<G rho, rho>`.
    pub fn zero_mode_quadratic(&self) -> LatticeMatrix {
        let mut g = LatticeMatrix::zero();
        for (nu, m, c) in self.iter() {
            if !nu.is_zero() || m.degree() != 2 {
                continue;
            }
            let v: Vec<(Site, u32)> = m.iter().collect();
            if v.len() == 1 {
                g.add_at(v[0].0, v[0].0, c.re);
            } else {
                g.add_sym(v[0].0, v[1].0, 0.5 * c.re);
            }
        }
        g.symmetric = g.is_symmetric();
        g
    }

    pub fn to_doc(&self) -> SeriesDoc {
        SeriesDoc {
            s: self.s,
            r: self.r,
            remainder: self.remainder,
            alpha: self.alpha,
            dmax: self.dmax,
            terms: self
                .iter()
                .map(|(nu, m, c)| TermRecord {
                    nu: nu.iter().collect(),
                    m: m.iter().collect(),
                    re: c.re,
                    im: c.im,
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &SeriesDoc) -> FTSeries {
        let mut out = FTSeries::zero(doc.alpha, doc.s, doc.r).with_dmax(doc.dmax);
        for t in &doc.terms {
            out.coeffs.insert(
                (
                    AngleMode::from_pairs(t.nu.iter().copied()),
                    ActionMonomial::from_pairs(t.m.iter().copied()),
                ),
                Complex64::new(t.re, t.im),
            );
        }
        out.remainder = doc.remainder;
        out
    }
}

/// Canonical serialized form used by checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDoc {
    pub s: f64,
    pub r: f64,
    pub remainder: f64,
    pub alpha: f64,
    pub dmax: u32,
    pub terms: Vec<TermRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub nu: Vec<(Site, i32)>,
    pub m: Vec<(Site, u32)>,
    pub re: f64,
    pub im: f64,
}

impl Serialize for FTSeries {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(ser)
    }
}

impl<'de> Deserialize<'de> for FTSeries {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        Ok(FTSeries::from_doc(&SeriesDoc::deserialize(de)?))
    }
}

/// Checked binary algebra. Widths of the result are the componentwise minimum.
pub fn algebra(a: &FTSeries, b: &FTSeries, op: AlgebraOp) -> Result<FTSeries> {
    a.check_compatible(b)?;
    Ok(match op {
        AlgebraOp::Add => a.add(b),
        AlgebraOp::Sub => a.sub(b),
        AlgebraOp::Scale(c) => a.scale(c),
        AlgebraOp::Multiply => a.mul(b),
    })
}

pub fn poisson_bracket(f: &FTSeries, g: &FTSeries) -> Result<FTSeries> {
    f.check_compatible(g)?;
    Ok(f.bracket(g))
}

pub fn truncate_fourier(g: &FTSeries, m_cap: u32) -> FTSeries {
    g.truncate_fourier(m_cap.max(1))
}

pub fn average(g: &FTSeries) -> FTSeries {
    g.average()
}

pub fn split_by_degree(g: &FTSeries) -> (FTSeries, FTSeries, FTSeries, FTSeries) {
    g.split_by_degree()
}

pub fn majorant_norm(g: &FTSeries, s: f64, r: f64) -> Result<f64> {
    g.majorant_norm(s, r)
}

/// Builders for hand-written fixtures.
pub mod build {
    use super::*;

    pub fn zero(alpha: f64, s: f64, r: f64) -> FTSeries {
        FTSeries::zero(alpha, s, r)
    }

    pub fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// `e^{i k theta_j}`.
    pub fn exp_i(base: &FTSeries, j: Site, k: i32) -> FTSeries {
        base.empty_like()
            .with_term(AngleMode::single(j, k), ActionMonomial::one(), c(1.0, 0.0))
    }

    pub fn cos(base: &FTSeries, j: Site) -> FTSeries {
        base.empty_like()
            .with_term(AngleMode::single(j, 1), ActionMonomial::one(), c(0.5, 0.0))
            .with_term(AngleMode::single(j, -1), ActionMonomial::one(), c(0.5, 0.0))
    }

    pub fn sin(base: &FTSeries, j: Site) -> FTSeries {
        base.empty_like()
            .with_term(AngleMode::single(j, 1), ActionMonomial::one(), c(0.0, -0.5))
            .with_term(AngleMode::single(j, -1), ActionMonomial::one(), c(0.0, 0.5))
    }

    /// `rho_j^k`.
    pub fn rho_pow(base: &FTSeries, j: Site, k: u32) -> FTSeries {
        base.empty_like()
            .with_term(AngleMode::zero(), ActionMonomial::from_pairs([(j, k)]), c(1.0, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::build::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_sum_is_order_free() {
        assert_eq!(exact_sum(&[1e16, 1.0, -1e16]), 1.0);
        assert_eq!(exact_sum(&[0.1, 0.2, 0.3]), exact_sum(&[0.3, 0.1, 0.2]));
        assert_eq!(exact_sum(&[]), 0.0);
    }

    fn base() -> FTSeries {
        zero(1.0, 0.5, 0.5)
    }

    fn same(a: &FTSeries, b: &FTSeries, tol: f64) -> bool {
        a.sub(b).coefficient_majorant(a.s, a.r) <= tol
    }

    #[test]
    fn algebra_examples() {
        let b = base();
        let g = cos(&b, 0).add(&rho_pow(&b, 1, 2));
        assert_eq!(algebra(&g, &b, AlgebraOp::Add).unwrap(), g);
        let z = g.scale_re(0.0);
        assert!(z.is_zero());
        let r0 = rho_pow(&b, 0, 1);
        assert_eq!(r0.mul(&r0), rho_pow(&b, 0, 2));
    }

    #[test]
    fn multiply_overflow_goes_to_remainder() {
        let b = base().with_dmax(2);
        let r0 = rho_pow(&b, 0, 2);
        let p = r0.mul(&r0);
        assert!(p.is_empty());
        assert_relative_eq!(p.remainder, 0.5f64.powi(4), max_relative = 1e-14);
    }

    #[test]
    fn bracket_examples() {
        let b = base();
        let f = cos(&b, 0).add(&rho_pow(&b, 0, 2));
        assert!(f.bracket(&f).is_empty());

        let e = exp_i(&b, 0, 1);
        let got = e.bracket(&rho_pow(&b, 0, 1));
        let want = e.scale(c(0.0, 1.0));
        assert_eq!(got, want);

        let got = cos(&b, 0).bracket(&rho_pow(&b, 0, 2));
        let r = ActionMonomial::var(0);
        assert_eq!(got.len(), 2);
        assert_eq!(got.get(&AngleMode::single(0, 1), &r), c(0.0, 1.0));
        assert_eq!(got.get(&AngleMode::single(0, -1), &r), c(0.0, -1.0));
        // -2 rho sin(theta) written out
        let want = sin(&b, 0).mul(&rho_pow(&b, 0, 1)).scale_re(-2.0);
        assert!(same(&got, &want, 1e-15));
    }

    #[test]
    fn bracket_matches_finite_differences() {
        let b = base();
        let f = cos(&b, 0).mul(&rho_pow(&b, 1, 2)).add(&sin(&b, 1).mul(&rho_pow(&b, 0, 1)));
        let g = rho_pow(&b, 0, 2).add(&cos(&b, 1).scale_re(0.3)).add(&sin(&b, 0).mul(&rho_pow(&b, 1, 1)));
        let fg = f.bracket(&g);
        let rho: PointMap = [(0, c(0.11, 0.0)), (1, c(-0.04, 0.0))].into_iter().collect();
        let th: PointMap = [(0, c(0.7, 0.0)), (1, c(2.1, 0.0))].into_iter().collect();
        let (ft, fr) = f.gradient(&rho, &th);
        let (gt, gr) = g.gradient(&rho, &th);
        let mut want = c(0.0, 0.0);
        for j in [0, 1] {
            let z = c(0.0, 0.0);
            want += ft.get(&j).copied().unwrap_or(z) * gr.get(&j).copied().unwrap_or(z)
                - fr.get(&j).copied().unwrap_or(z) * gt.get(&j).copied().unwrap_or(z);
        }
        let got = fg.eval(&rho, &th);
        assert!((got - want).norm() < 1e-14);
        // finite-difference check of one gradient entry
        let h = 1e-6;
        let mut rp = rho.clone();
        rp.insert(0, c(0.11 + h, 0.0));
        let mut rm = rho.clone();
        rm.insert(0, c(0.11 - h, 0.0));
        let fd = (f.eval(&rp, &th) - f.eval(&rm, &th)) / (2.0 * h);
        assert!((fd - fr[&0]).norm() < 1e-8);
    }

    #[test]
    fn truncate_examples() {
        let b = base();
        let g = b.constant_like(2.0);
        assert_eq!(truncate_fourier(&g, 3), g);
        let g = exp_i(&b, 0, 1).add(&exp_i(&b, 0, 3));
        let t = truncate_fourier(&g, 2);
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(&AngleMode::single(0, 1), &ActionMonomial::one()), c(1.0, 0.0));
        assert_relative_eq!(t.remainder, (1.5f64).exp(), max_relative = 1e-14);
        let t1 = truncate_fourier(&g.add(&b.constant_like(1.0)), 1);
        assert_eq!(t1.len(), 1);
        assert!(t1.get(&AngleMode::zero(), &ActionMonomial::one()) == c(1.0, 0.0));
    }

    #[test]
    fn average_examples() {
        let b = base();
        assert!(average(&exp_i(&b, 0, 1)).is_zero());
        let g = b.constant_like(3.0).add(&exp_i(&b, 0, 1).mul(&rho_pow(&b, 1, 1)));
        assert_eq!(average(&g), b.constant_like(3.0));
        let g = b.constant_like(2.0).add(&cos(&b, 0)).mul(&rho_pow(&b, 0, 2));
        assert_eq!(average(&g), rho_pow(&b, 0, 2).scale_re(2.0));
    }

    #[test]
    fn split_examples() {
        let b = base();
        let q = rho_pow(&b, 0, 2);
        let (g0, g1, g2, gh) = split_by_degree(&q);
        assert!(g0.is_zero() && g1.is_zero() && gh.is_zero());
        assert_eq!(g2, q);
        let g = b
            .constant_like(1.0)
            .add(&rho_pow(&b, 0, 1))
            .add(&rho_pow(&b, 0, 1).mul(&rho_pow(&b, 1, 1)))
            .add(&rho_pow(&b, 0, 3));
        let (g0, g1, g2, gh) = split_by_degree(&g);
        assert_eq!((g0.len(), g1.len(), g2.len(), gh.len()), (1, 1, 1, 1));
        assert_eq!(g0.add(&g1).add(&g2).add(&gh), g);
    }

    #[test]
    fn majorant_examples() {
        let b = zero(1.0, 1.0, 1.0);
        assert_relative_eq!(majorant_norm(&b.constant_like(-2.5), 0.3, 0.3).unwrap(), 2.5);
        assert_relative_eq!(majorant_norm(&rho_pow(&b, 0, 1), 0.1, 0.3).unwrap(), 0.1);
        assert_relative_eq!(
            majorant_norm(&exp_i(&b, 0, 1), 0.3, 0.5).unwrap(),
            0.5f64.exp(),
            max_relative = 1e-15
        );
        assert!(majorant_norm(&exp_i(&b, 0, 1), 1.5, 0.5).is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let a = zero(1.0, 0.5, 0.5);
        let b = zero(2.0, 0.5, 0.5);
        assert!(matches!(algebra(&a, &b, AlgebraOp::Add), Err(KamError::Width(_))));
    }

    #[test]
    fn doc_round_trip() {
        let b = base();
        let mut g = cos(&b, 0).mul(&rho_pow(&b, 2, 3)).add(&exp_i(&b, -1, 2));
        g.remainder = 1e-9;
        let text = serde_json::to_string(&g).unwrap();
        let back: FTSeries = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn zero_mode_extractors() {
        let b = base();
        let mut h = LatticeMatrix::zero();
        h.set(0, 0, 2.0);
        h.add_sym(0, 1, 0.5);
        let q = b.quadratic_form(&h, 0.5);
        let g = q.zero_mode_quadratic();
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(0, 1), 0.25);
        assert_eq!(g.get(1, 0), 0.25);
        let l = b.linear_form(&ActionVector::from_pairs([(0, 1.5), (2, -1.0)]));
        assert_eq!(l.zero_mode_linear(), ActionVector::from_pairs([(0, 1.5), (2, -1.0)]));
    }
}
