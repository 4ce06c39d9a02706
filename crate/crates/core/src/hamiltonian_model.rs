//! Model specification, validation, re-centering at `I0` and box splitting.
//!
//! A model is `H(I, theta) = sum h_{ij}(I_i, I_j) + eps sum f_{ij}(I_i, I_j, theta_i, theta_j)`
//! over nearest-neighbour pairs. After `I = I0 + rho` it becomes
//! `e + <omega, rho> + 1/2 <Omega rho, rho> + V(rho) + eps H1(rho, theta)`.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Assumption, KamError, Result};
use crate::fourier_taylor::{ActionMonomial, AngleMode, FTSeries, DEFAULT_DMAX};
use crate::lattice_norms::{
    action_norm, induced_operator_norm, sup_matrix_norm, ActionVector, LatticeMatrix, Site,
    WeightProfile,
};
use crate::linalg;

pub const H0_DEGREE_CAP: u32 = 6;
pub const DEFAULT_K: f64 = 1.0 / 64.0;
pub const MAX_LAMBDA: i32 = 32;

// ---------------------------------------------------------------------------
// document schema

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub weights: WeightsDoc,
    #[serde(default)]
    pub h0: H0Doc,
    #[serde(default)]
    pub coupling: Vec<CouplingDoc>,
    pub initial: InitialDoc,
    pub perturbation: PerturbationDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsDoc {
    pub alpha: f64,
    pub lambda: i32,
}

/// `onsite` and `neighbor` are broadcast over the box; `local` adds
/// site-specific terms. Keys are exponents: `"p"` for a single site and
/// `"p,q"` for the pair `(j, j+1)` or `(i, j)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H0Doc {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub onsite: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub neighbor: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub local: Vec<H0LocalDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H0LocalDoc {
    pub i: Site,
    pub j: Site,
    pub terms: BTreeMap<String, f64>,
}

/// `f = I_i^{exps[0]} I_j^{exps[1]} sum_k c_k e^{i(k_0 theta_i + k_1 theta_j)}`;
/// for `i == j` the vectors have length one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingDoc {
    pub i: Site,
    pub j: Site,
    pub exps: Vec<u32>,
    pub modes: Vec<ModeDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeDoc {
    pub k: Vec<i32>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialDoc {
    /// site -> I0_j
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationDoc {
    pub epsilon: f64,
    #[serde(rename = "K", default = "default_k")]
    pub k: f64,
    #[serde(default)]
    pub l: f64,
}

fn default_k() -> f64 {
    DEFAULT_K
}

// ---------------------------------------------------------------------------
// validated model

/// `c I_i^ei I_j^ej` with `i <= j`; single-site terms have `i == j`, `ej == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairPower {
    pub i: Site,
    pub j: Site,
    pub ei: u32,
    pub ej: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub i: Site,
    pub j: Site,
    pub ei: u32,
    pub ej: u32,
    /// `(k_i, k_j) -> c`; `k_j = 0` for single-site couplings.
    pub modes: BTreeMap<(i32, i32), Complex64>,
}

impl Coupling {
    pub fn dist(&self) -> i32 {
        self.i.abs().max(self.j.abs())
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.modes.values().map(|c| c.norm()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub weights: WeightProfile,
    pub i0: ActionVector,
    pub h0: BTreeMap<PairPower, f64>,
    pub couplings: Vec<Coupling>,
    pub eps: f64,
    pub k_decay: f64,
    pub l_decay: f64,
}

fn schema(path: impl Into<String>, msg: impl Into<String>) -> KamError {
    KamError::Schema {
        path: path.into(),
        msg: msg.into(),
    }
}

fn parse_exps(key: &str, path: &str) -> Result<Vec<u32>> {
    key.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| schema(path, format!("bad exponent key `{key}`")))
        })
        .collect()
}

fn finite(x: f64, path: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(schema(path, "value is not finite"))
    }
}

fn check_site(j: Site, lambda: i32, path: &str) -> Result<()> {
    if j.abs() > lambda {
        Err(schema(path, format!("site {j} outside truncation radius {lambda}")))
    } else {
        Ok(())
    }
}

fn push_h0(
    h0: &mut BTreeMap<PairPower, f64>,
    i: Site,
    j: Site,
    exps: &[u32],
    c: f64,
    path: &str,
) -> Result<()> {
    let (i, j, ei, ej) = match (exps.len(), i == j) {
        (1, true) => (i, i, exps[0], 0),
        (2, true) => (i, i, exps[0] + exps[1], 0),
        (2, false) if i < j => (i, j, exps[0], exps[1]),
        (2, false) => (j, i, exps[1], exps[0]),
        _ => return Err(schema(path, "exponent key length does not match the sites")),
    };
    if (i - j).abs() > 1 {
        return Err(schema(path, format!("pair ({i}, {j}) is not nearest-neighbour")));
    }
    if ei + ej > H0_DEGREE_CAP {
        return Err(schema(
            path,
            format!("H0 degree {} exceeds cap {H0_DEGREE_CAP}", ei + ej),
        ));
    }
    if ei + ej == 0 {
        return Ok(());
    }
    *h0.entry(PairPower { i, j, ei, ej }).or_insert(0.0) += c;
    Ok(())
}

impl ModelDoc {
    pub fn validate(&self) -> Result<ModelSpec> {
        let alpha = finite(self.weights.alpha, "weights.alpha")?;
        if alpha <= 0.0 {
            return Err(schema("weights.alpha", "must be positive"));
        }
        let lambda = self.weights.lambda;
        if !(0..=MAX_LAMBDA).contains(&lambda) {
            return Err(schema("weights.lambda", format!("must lie in [0, {MAX_LAMBDA}]")));
        }
        let weights = WeightProfile { alpha, lambda };

        let mut h0 = BTreeMap::new();
        for (key, &c) in &self.h0.onsite {
            let path = format!("h0.onsite.{key}");
            let e = parse_exps(key, &path)?;
            if e.len() != 1 {
                return Err(schema(&path, "onsite keys take one exponent"));
            }
            finite(c, &path)?;
            for j in -lambda..=lambda {
                push_h0(&mut h0, j, j, &e, c, &path)?;
            }
        }
        for (key, &c) in &self.h0.neighbor {
            let path = format!("h0.neighbor.{key}");
            let e = parse_exps(key, &path)?;
            if e.len() != 2 {
                return Err(schema(&path, "neighbor keys take two exponents"));
            }
            finite(c, &path)?;
            for j in -lambda..lambda {
                push_h0(&mut h0, j, j + 1, &e, c, &path)?;
            }
        }
        for (n, loc) in self.h0.local.iter().enumerate() {
            let base = format!("h0.local[{n}]");
            check_site(loc.i, lambda, &format!("{base}.i"))?;
            check_site(loc.j, lambda, &format!("{base}.j"))?;
            for (key, &c) in &loc.terms {
                let path = format!("{base}.terms.{key}");
                let e = parse_exps(key, &path)?;
                finite(c, &path)?;
                push_h0(&mut h0, loc.i, loc.j, &e, c, &path)?;
            }
        }
        h0.retain(|_, c| *c != 0.0);

        let eps = finite(self.perturbation.epsilon, "perturbation.epsilon")?;
        if eps < 0.0 {
            return Err(schema("perturbation.epsilon", "must be nonnegative"));
        }
        let k_decay = finite(self.perturbation.k, "perturbation.K")?;
        if k_decay <= 0.0 {
            return Err(schema("perturbation.K", "must be positive"));
        }
        let l_decay = finite(self.perturbation.l, "perturbation.l")?;
        if l_decay < 0.0 {
            return Err(schema("perturbation.l", "must be nonnegative"));
        }

        let mut merged: BTreeMap<(Site, Site, u32, u32), BTreeMap<(i32, i32), Complex64>> =
            BTreeMap::new();
        for (n, cd) in self.coupling.iter().enumerate() {
            let base = format!("coupling[{n}]");
            check_site(cd.i, lambda, &format!("{base}.i"))?;
            check_site(cd.j, lambda, &format!("{base}.j"))?;
            if (cd.i - cd.j).abs() > 1 {
                return Err(schema(&base, "pair is not nearest-neighbour"));
            }
            let single = cd.i == cd.j;
            let width = if single { 1 } else { 2 };
            if cd.exps.len() != width {
                return Err(schema(format!("{base}.exps"), format!("expected {width} exponents")));
            }
            let (mut i, mut j, mut ei, mut ej) = if single {
                (cd.i, cd.i, cd.exps[0], 0)
            } else {
                (cd.i, cd.j, cd.exps[0], cd.exps[1])
            };
            let swap = !single && i > j;
            if swap {
                std::mem::swap(&mut i, &mut j);
                std::mem::swap(&mut ei, &mut ej);
            }
            if ei + ej < 5 {
                return Err(KamError::Assumption {
                    which: Assumption::B1,
                    msg: format!("{base}: total action degree {} < 5", ei + ej),
                });
            }
            let modes = merged.entry((i, j, ei, ej)).or_default();
            for (m, md) in cd.modes.iter().enumerate() {
                let path = format!("{base}.modes[{m}]");
                if md.k.len() != width {
                    return Err(schema(format!("{path}.k"), format!("expected {width} entries")));
                }
                let c = Complex64::new(finite(md.re, &path)?, finite(md.im, &path)?);
                let key = if single {
                    (md.k[0], 0)
                } else if swap {
                    (md.k[1], md.k[0])
                } else {
                    (md.k[0], md.k[1])
                };
                *modes.entry(key).or_insert(Complex64::new(0.0, 0.0)) += c;
            }
        }
        let mut couplings = Vec::new();
        for ((i, j, ei, ej), mut modes) in merged {
            modes.retain(|_, c| c.norm() != 0.0);
            let path = format!("coupling({i},{j})");
            for (&(a, b), &c) in &modes {
                let partner = modes.get(&(-a, -b)).copied().unwrap_or(Complex64::new(0.0, 0.0));
                if (partner - c.conj()).norm() > 1e-15 * c.norm().max(1e-300) {
                    return Err(KamError::Assumption {
                        which: Assumption::A0,
                        msg: format!("{path}: mode ({a},{b}) lacks its conjugate partner"),
                    });
                }
            }
            let cp = Coupling { i, j, ei, ej, modes };
            let dist = cp.dist();
            let bound = k_decay * (-l_decay * ((dist - 1).max(0) as f64).powf(1.0 + alpha)).exp();
            let value = cp.coefficient_sum();
            if value > bound * (1.0 + 1e-12) {
                return Err(KamError::Decay { path, value, bound });
            }
            if !cp.modes.is_empty() {
                couplings.push(cp);
            }
        }

        let mut i0 = ActionVector::new();
        for (key, &x) in &self.initial.values {
            let path = format!("initial.values.{key}");
            let j: Site = key.trim().parse().map_err(|_| schema(&path, "site key must be an integer"))?;
            check_site(j, lambda, &path)?;
            i0.add_at(j, finite(x, &path)?);
        }
        let n = action_norm(&i0, &weights);
        if !(n > 0.0 && n < 1.0) {
            return Err(KamError::Assumption {
                which: Assumption::I0,
                msg: format!("weighted norm ||I0|| = {n:.6e} is not in (0, 1)"),
            });
        }

        Ok(ModelSpec {
            weights,
            i0,
            h0,
            couplings,
            eps,
            k_decay,
            l_decay,
        })
    }
}

impl ModelSpec {
    /// Canonical document: every H0 term listed under `local`.
    pub fn to_doc(&self) -> ModelDoc {
        let mut local: BTreeMap<(Site, Site), BTreeMap<String, f64>> = BTreeMap::new();
        for (p, &c) in &self.h0 {
            let key = if p.i == p.j {
                format!("{}", p.ei)
            } else {
                format!("{},{}", p.ei, p.ej)
            };
            local.entry((p.i, p.j)).or_default().insert(key, c);
        }
        ModelDoc {
            weights: WeightsDoc {
                alpha: self.weights.alpha,
                lambda: self.weights.lambda,
            },
            h0: H0Doc {
                onsite: BTreeMap::new(),
                neighbor: BTreeMap::new(),
                local: local
                    .into_iter()
                    .map(|((i, j), terms)| H0LocalDoc { i, j, terms })
                    .collect(),
            },
            coupling: self
                .couplings
                .iter()
                .map(|c| {
                    let single = c.i == c.j;
                    CouplingDoc {
                        i: c.i,
                        j: c.j,
                        exps: if single { vec![c.ei] } else { vec![c.ei, c.ej] },
                        modes: c
                            .modes
                            .iter()
                            .map(|(&(a, b), z)| ModeDoc {
                                k: if single { vec![a] } else { vec![a, b] },
                                re: z.re,
                                im: z.im,
                            })
                            .collect(),
                    }
                })
                .collect(),
            initial: InitialDoc {
                values: self.i0.iter().map(|(j, x)| (j.to_string(), x)).collect(),
            },
            perturbation: PerturbationDoc {
                epsilon: self.eps,
                k: self.k_decay,
                l: self.l_decay,
            },
        }
    }

    /// Value of `H0` at an action point (used by finite-difference checks).
    pub fn h0_value(&self, action: &ActionVector) -> f64 {
        self.h0
            .iter()
            .map(|(p, &c)| {
                c * action.get(p.i).powi(p.ei as i32)
                    * if p.i == p.j { 1.0 } else { action.get(p.j).powi(p.ej as i32) }
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

pub fn parse_doc(raw: &str, format: Format) -> Result<ModelDoc> {
    match format {
        Format::Toml => toml::from_str(raw).map_err(|e| schema("<document>", e.to_string())),
        Format::Json => serde_json::from_str(raw).map_err(|e| schema("<document>", e.to_string())),
    }
}

pub fn load_model(raw: &str, format: Format) -> Result<ModelSpec> {
    parse_doc(raw, format)?.validate()
}

pub fn load_model_path(path: &Path) -> Result<ModelSpec> {
    let raw = std::fs::read_to_string(path)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Format::Json,
        _ => Format::Toml,
    };
    load_model(&raw, format)
}

pub fn to_toml(spec: &ModelSpec) -> String {
    toml::to_string(&spec.to_doc()).expect("model documents always serialize")
}

// ---------------------------------------------------------------------------
// normal form and re-centering

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalForm {
    pub e: f64,
    /// Frequencies on every site of the truncation; entries beyond the
    /// current box form the tail.
    pub omega: ActionVector,
    /// Hessian `Omega(k)` of `H0` at `I0`.
    pub hessian: LatticeMatrix,
    /// Accumulated corrections `sum Omega_hat`.
    pub correction: LatticeMatrix,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl NormalForm {
    /// `Omega(k) + sum Omega_hat`.
    pub fn omega_matrix(&self) -> LatticeMatrix {
        self.hessian.add(&self.correction)
    }

    pub fn omega_box(&self, radius: i32) -> ActionVector {
        self.omega.restrict(radius)
    }

    /// `e + <omega, rho> + 1/2 <Omega rho, rho>` on all sites.
    pub fn series(&self, like: &FTSeries) -> FTSeries {
        like.constant_like(self.e)
            .add(&like.linear_form(&self.omega))
            .add(&like.quadratic_form(&self.omega_matrix(), 0.5))
    }

    /// Normal form without the energy constant.
    pub fn dynamic_series(&self, like: &FTSeries) -> FTSeries {
        like.linear_form(&self.omega)
            .add(&like.quadratic_form(&self.omega_matrix(), 0.5))
    }
}

/// Step state: normal form, integrable tail `V`, transformed perturbation
/// (with `eps` folded in) and untouched couplings (without `eps`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecenteredHamiltonian {
    pub normal: NormalForm,
    pub v: FTSeries,
    pub pert: FTSeries,
    pub fresh: FTSeries,
    pub eps: f64,
    pub weights: WeightProfile,
}

impl RecenteredHamiltonian {
    /// Everything except the normal form: `V + pert + eps fresh`.
    pub fn remainder_part(&self) -> FTSeries {
        self.v.add(&self.pert).add(&self.fresh.scale_re(self.eps))
    }

    pub fn total(&self) -> FTSeries {
        self.normal.series(&self.pert).add(&self.remainder_part())
    }

    pub fn with_widths(mut self, s: f64, r: f64) -> Self {
        self.v = self.v.with_widths(s, r);
        self.pert = self.pert.with_widths(s, r);
        self.fresh = self.fresh.with_widths(s, r);
        self
    }
}

fn binom(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, t| acc * (n - t) as f64 / (t + 1) as f64)
}

/// `c (a + rho_i)^p (b + rho_j)^q` expanded around `rho = 0`.
fn expand_pair(i: Site, j: Site, a: f64, b: f64, p: u32, q: u32) -> Vec<(ActionMonomial, f64)> {
    let mut out = Vec::new();
    for x in 0..=p {
        for y in 0..=q {
            let c = binom(p, x) * binom(q, y) * a.powi((p - x) as i32) * b.powi((q - y) as i32);
            if c != 0.0 {
                out.push((ActionMonomial::from_pairs([(i, x), (j, y)]), c));
            }
        }
    }
    out
}

/// Per-box inverse checks on `Omega`: returns `(kappa1, kappa2)`.
pub fn hessian_bounds(omega: &LatticeMatrix, w: &WeightProfile) -> Result<(f64, f64)> {
    let mut k1: f64 = 0.0;
    let mut k2: f64 = 0.0;
    let mut inverses = Vec::new();
    for radius in 0..=w.lambda {
        let sites: Vec<Site> = (-radius..=radius).collect();
        let block = omega.restrict(radius);
        let inv = linalg::inverse_on(&block, &sites).map_err(|e| KamError::Assumption {
            which: Assumption::A2,
            msg: format!("Hessian block of radius {radius} not invertible: {e}"),
        })?;
        k1 = k1.max(induced_operator_norm(&block, w));
        k2 = k2.max(induced_operator_norm(&inv, w));
        inverses.push((radius, inv));
    }
    for (radius, inv) in inverses {
        let sup = sup_matrix_norm(&inv);
        if sup > 2.0 * k2 * (1.0 + 1e-10) {
            return Err(KamError::Assumption {
                which: Assumption::A2,
                msg: format!("box {radius}: |Omega^-1| = {sup:.4e} exceeds 2 kappa2 = {:.4e}", 2.0 * k2),
            });
        }
    }
    Ok((k1, k2))
}

/// Re-centers at `I0` with series widths `(s, r)`.
pub fn recenter_with(spec: &ModelSpec, s: f64, r: f64) -> Result<RecenteredHamiltonian> {
    let alpha = spec.weights.alpha;
    let base = FTSeries::zero(alpha, s, r).with_dmax(DEFAULT_DMAX);
    let mut e = 0.0;
    let mut omega = ActionVector::new();
    let mut hess = LatticeMatrix::zero();
    let mut v = base.empty_like().with_dmax(H0_DEGREE_CAP.max(DEFAULT_DMAX));
    for (p, &c) in &spec.h0 {
        let (a, b) = (spec.i0.get(p.i), spec.i0.get(p.j));
        let terms = if p.i == p.j {
            expand_pair(p.i, p.i, a, 0.0, p.ei, 0)
        } else {
            expand_pair(p.i, p.j, a, b, p.ei, p.ej)
        };
        for (m, x) in terms {
            let x = c * x;
            match m.degree() {
                0 => e += x,
                1 => omega.add_at(m.iter().next().unwrap().0, x),
                2 => {
                    let pairs: Vec<(Site, u32)> = m.iter().collect();
                    if pairs.len() == 1 {
                        hess.add_at(pairs[0].0, pairs[0].0, 2.0 * x);
                    } else {
                        hess.add_sym(pairs[0].0, pairs[1].0, x);
                    }
                }
                _ => v.add_term(AngleMode::zero(), m, Complex64::new(x, 0.0)),
            }
        }
    }
    v.dmax = DEFAULT_DMAX;
    let v = {
        let mut out = base.empty_like();
        for (nu, m, c) in v.iter() {
            out.add_term(nu.clone(), m.clone(), c);
        }
        out.canonicalize();
        out
    };
    hess.symmetric = hess.is_symmetric();

    let mut h1 = base.empty_like();
    for cp in &spec.couplings {
        let (a, b) = (spec.i0.get(cp.i), spec.i0.get(cp.j));
        let powers = if cp.i == cp.j {
            expand_pair(cp.i, cp.i, a, 0.0, cp.ei, 0)
        } else {
            expand_pair(cp.i, cp.j, a, b, cp.ei, cp.ej)
        };
        for (&(ki, kj), &c) in &cp.modes {
            let nu = if cp.i == cp.j {
                AngleMode::single(cp.i, ki)
            } else {
                AngleMode::from_pairs([(cp.i, ki), (cp.j, kj)])
            };
            for (m, x) in &powers {
                h1.add_term(nu.clone(), m.clone(), c * *x);
            }
        }
    }
    h1.canonicalize();

    let (kappa1, kappa2) = hessian_bounds(&hess, &spec.weights)?;
    Ok(RecenteredHamiltonian {
        normal: NormalForm {
            e,
            omega,
            hessian: hess,
            correction: LatticeMatrix::zero(),
            kappa1,
            kappa2,
        },
        v,
        pert: base.empty_like(),
        fresh: h1,
        eps: spec.eps,
        weights: spec.weights,
    })
}

/// Re-centers with unit widths.
pub fn recenter(spec: &ModelSpec) -> Result<RecenteredHamiltonian> {
    recenter_with(spec, 1.0, 1.0)
}

// ---------------------------------------------------------------------------
// box split

/// Untouched content outside the step box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FarTail {
    pub inner_radius: i32,
    pub outer_radius: i32,
    pub norm_bound: f64,
}

#[derive(Clone, Debug)]
pub struct BoxSplit {
    pub l: i32,
    pub lp: i32,
    /// Folded perturbation inside the box, plus `eps` times couplings that
    /// touch `|j| <= L - 1`.
    pub p: FTSeries,
    /// Couplings inside the box with both sites in `[L, L+ - 1]`, without `eps`.
    pub q: FTSeries,
    pub eps: f64,
    /// Terms straddling `L+` (folded).
    pub boundary: FTSeries,
    /// Transformed content entirely outside (folded).
    pub far_pert: FTSeries,
    /// Untouched couplings entirely outside (without `eps`).
    pub far_fresh: FTSeries,
    pub far: FarTail,
    pub v_inside: FTSeries,
    pub v_touch: FTSeries,
    pub v_outside: FTSeries,
    pub n0: FTSeries,
    pub n1: FTSeries,
    pub n2: FTSeries,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Inside,
    Boundary,
    Outside,
}

fn support(nu: &AngleMode, m: &ActionMonomial) -> (Option<i32>, Option<i32>) {
    let abs = nu.iter().map(|(j, _)| j.abs()).chain(m.iter().map(|(j, _)| j.abs()));
    let mut lo = None;
    let mut hi = None;
    for a in abs {
        lo = Some(lo.map_or(a, |x: i32| x.min(a)));
        hi = Some(hi.map_or(a, |x: i32| x.max(a)));
    }
    (lo, hi)
}

/// Inside: every site below `L+`; outside: every site at least `L+`.
pub fn region(nu: &AngleMode, m: &ActionMonomial, lp: i32) -> Region {
    match support(nu, m) {
        (None, _) => Region::Inside,
        (Some(lo), Some(hi)) if hi < lp => {
            let _ = lo;
            Region::Inside
        }
        (Some(lo), _) if lo >= lp => Region::Outside,
        _ => Region::Boundary,
    }
}

fn min_site(nu: &AngleMode, m: &ActionMonomial) -> Option<i32> {
    support(nu, m).0
}

pub fn box_split(h: &RecenteredHamiltonian, l: i32, lp: i32) -> Result<BoxSplit> {
    let lambda = h.weights.lambda;
    if !(1 <= l && l <= lp && lp <= lambda + 1) {
        return Err(KamError::Parameter(format!(
            "box radii must satisfy 1 <= L <= L+ <= lambda + 1, got L = {l}, L+ = {lp}, lambda = {lambda}"
        )));
    }
    let eps = h.eps;
    let in_region = |g: &FTSeries, want: Region| g.filter(|nu, m| region(nu, m, lp) == want, false);

    let pert_in = in_region(&h.pert, Region::Inside);
    let fresh_in = in_region(&h.fresh, Region::Inside);
    let touches_core = |nu: &AngleMode, m: &ActionMonomial| min_site(nu, m).is_none_or(|x| x < l);
    let fresh_core = fresh_in.filter(touches_core, false);
    let q = fresh_in.filter(|nu, m| !touches_core(nu, m), false);
    let mut p = pert_in.add(&fresh_core.scale_re(eps));
    p.remainder = h.pert.remainder + eps * h.fresh.remainder;

    let boundary = in_region(&h.pert, Region::Boundary)
        .add(&in_region(&h.fresh, Region::Boundary).scale_re(eps));
    let far_pert = in_region(&h.pert, Region::Outside);
    let far_fresh = in_region(&h.fresh, Region::Outside);
    let far = FarTail {
        inner_radius: lp,
        outer_radius: lambda,
        norm_bound: far_pert.norm() + eps * far_fresh.norm(),
    };

    let v_inside = in_region(&h.v, Region::Inside);
    let v_touch = in_region(&h.v, Region::Boundary);
    let mut v_outside = in_region(&h.v, Region::Outside);
    v_outside.remainder = h.v.remainder;

    let nf = &h.normal;
    let om = nf.omega_matrix();
    let base = h.pert.empty_like();
    let mut n0 = base.constant_like(nf.e);
    let mut n1 = base.empty_like();
    let mut n2 = base.empty_like();
    for (j, x) in nf.omega.iter() {
        let t = base.linear_form(&ActionVector::unit(j)).scale_re(x);
        if j.abs() < lp {
            n0 = n0.add(&t);
        } else {
            n2 = n2.add(&t);
        }
    }
    for ((i, j), x) in om.iter() {
        let m = ActionMonomial::from_pairs([(i, 1), (j, 1)]);
        let c = Complex64::new(0.5 * x, 0.0);
        match (i.abs() < lp, j.abs() < lp) {
            (true, true) => n0.add_term(AngleMode::zero(), m, c),
            (false, false) => n2.add_term(AngleMode::zero(), m, c),
            _ => n1.add_term(AngleMode::zero(), m, c),
        }
    }
    for g in [&mut n0, &mut n1, &mut n2] {
        g.canonicalize();
    }

    Ok(BoxSplit {
        l,
        lp,
        p,
        q,
        eps,
        boundary,
        far_pert,
        far_fresh,
        far,
        v_inside,
        v_touch,
        v_outside,
        n0,
        n1,
        n2,
    })
}

impl BoxSplit {
    /// `N0 + N1 + N2 + V + P + eps Q + boundary + far`.
    pub fn recompose(&self) -> FTSeries {
        self.n0
            .add(&self.n1)
            .add(&self.n2)
            .add(&self.v_inside)
            .add(&self.v_touch)
            .add(&self.v_outside)
            .add(&self.p)
            .add(&self.q.scale_re(self.eps))
            .add(&self.boundary)
            .add(&self.far_pert)
            .add(&self.far_fresh.scale_re(self.eps))
    }

    /// `P + eps Q`.
    pub fn inside(&self) -> FTSeries {
        self.p.add(&self.q.scale_re(self.eps))
    }
}

// ---------------------------------------------------------------------------
// seeded generator for tests

/// Random nearest-neighbour model with decreasing `I0` and quintic couplings.
pub fn random_model(seed: u64, lambda: i32, alpha: f64, eps: f64) -> ModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = WeightProfile { alpha, lambda };
    let amp = 0.05 + 0.25 * rng.gen::<f64>();
    let mut i0 = ActionVector::new();
    for j in -lambda..=lambda {
        let rate = 1.5 + rng.gen::<f64>();
        i0.set(j, amp * (-rate * (j.abs() as f64).powf(1.0 + alpha)).exp());
    }
    let scale = 0.9 / action_norm(&i0, &weights);
    if scale < 1.0 {
        i0 = i0.scale(scale);
    }
    let mut h0 = BTreeMap::new();
    for j in -lambda..=lambda {
        h0.insert(PairPower { i: j, j, ei: 1, ej: 0 }, 1.0 + 0.5 * rng.gen::<f64>());
        h0.insert(PairPower { i: j, j, ei: 2, ej: 0 }, 0.5);
        if rng.gen::<f64>() < 0.5 {
            h0.insert(PairPower { i: j, j, ei: 3, ej: 0 }, 0.2 * (rng.gen::<f64>() - 0.5));
        }
    }
    let mut couplings = Vec::new();
    for i in -lambda..=lambda {
        for j in [i, i + 1] {
            if j > lambda {
                continue;
            }
            let (ei, ej) = if i == j {
                (5 + rng.gen_range(0..2), 0)
            } else {
                let a = rng.gen_range(1..5);
                (a, 5 - a)
            };
            let c0 = (rng.gen::<f64>() - 0.5) / 256.0;
            let c1 = Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) / 256.0;
            let mut modes = BTreeMap::new();
            modes.insert((0, 0), Complex64::new(c0, 0.0));
            let k = if i == j { (1, 0) } else { (1, -1) };
            modes.insert(k, c1);
            modes.insert((-k.0, -k.1), c1.conj());
            couplings.push(Coupling { i, j, ei, ej, modes });
        }
    }
    couplings.sort_by_key(|c| (c.i, c.j, c.ei, c.ej));
    ModelSpec {
        weights,
        i0,
        h0,
        couplings,
        eps,
        k_decay: DEFAULT_K,
        l_decay: 0.0,
    }
}
