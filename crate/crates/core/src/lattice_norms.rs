//! Weighted sequence and operator norms on the truncated lattice.
//!
//! Sites are signed integers `j` with `|j| <= lambda`. The action norm is the
//! weighted l1 norm `sum |I_j| exp(|j|^(1+alpha))`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};

pub type Site = i32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub alpha: f64,
    pub lambda: i32,
}

impl WeightProfile {
    pub fn new(alpha: f64, lambda: i32) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(KamError::Parameter(format!("alpha must be positive, got {alpha}")));
        }
        if lambda < 0 {
            return Err(KamError::Parameter(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self { alpha, lambda })
    }

    #[inline]
    pub fn weight(&self, j: Site) -> f64 {
        weight(self.alpha, j)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> {
        -self.lambda..=self.lambda
    }
}

/// `exp(|j|^(1+alpha))`.
#[inline]
pub fn weight(alpha: f64, j: Site) -> f64 {
    let a = j.unsigned_abs() as f64;
    if a == 0.0 {
        1.0
    } else {
        a.powf(1.0 + alpha).exp()
    }
}

/// Finitely supported real vector indexed by sites.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    entries: BTreeMap<Site, f64>,
}

impl ActionVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I: IntoIterator<Item = (Site, f64)>>(pairs: I) -> Self {
        let mut v = Self::new();
        for (j, x) in pairs {
            v.add_at(j, x);
        }
        v
    }

    pub fn unit(j: Site) -> Self {
        Self::from_pairs([(j, 1.0)])
    }

    pub fn get(&self, j: Site) -> f64 {
        self.entries.get(&j).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, j: Site, x: f64) {
        if x == 0.0 {
            self.entries.remove(&j);
        } else {
            self.entries.insert(j, x);
        }
    }

    pub fn add_at(&mut self, j: Site, x: f64) {
        let y = self.get(j) + x;
        self.set(j, y);
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.entries.iter().map(|(&j, &x)| (j, x))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest `|j|` in the support, `None` for the zero vector.
    pub fn radius(&self) -> Option<i32> {
        self.entries.keys().map(|j| j.abs()).max()
    }

    pub fn add(&self, other: &ActionVector) -> ActionVector {
        let mut out = self.clone();
        for (j, x) in other.iter() {
            out.add_at(j, x);
        }
        out
    }

    pub fn sub(&self, other: &ActionVector) -> ActionVector {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> ActionVector {
        ActionVector::from_pairs(self.iter().map(|(j, x)| (j, c * x)))
    }

    pub fn dot(&self, other: &ActionVector) -> f64 {
        self.iter().map(|(j, x)| x * other.get(j)).sum()
    }

    pub fn restrict(&self, radius: i32) -> ActionVector {
        ActionVector::from_pairs(self.iter().filter(|(j, _)| j.abs() <= radius))
    }
}

/// `sum_j |I_j| weight(j)`.
pub fn action_norm(v: &ActionVector, w: &WeightProfile) -> f64 {
    v.iter().map(|(j, x)| x.abs() * w.weight(j)).fold(0.0, |a, x| a + x)
}

pub fn sup_norm(v: &ActionVector) -> f64 {
    v.iter().map(|(_, x)| x.abs()).fold(0.0, f64::max)
}

/// Finitely supported real matrix indexed by pairs of sites.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatticeMatrix {
    #[serde(with = "triplets")]
    entries: BTreeMap<(Site, Site), f64>,
    /// Tag recorded by constructors that produce exactly symmetric matrices.
    pub symmetric: bool,
}

mod triplets {
    use super::Site;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<(Site, Site), f64>, ser: S) -> Result<S::Ok, S::Error> {
        let v: Vec<(Site, Site, f64)> = m.iter().map(|(&(i, j), &x)| (i, j, x)).collect();
        v.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<BTreeMap<(Site, Site), f64>, D::Error> {
        let v: Vec<(Site, Site, f64)> = Vec::deserialize(de)?;
        Ok(v.into_iter().map(|(i, j, x)| ((i, j), x)).collect())
    }
}

impl LatticeMatrix {
    pub fn zero() -> Self {
        Self {
            entries: BTreeMap::new(),
            symmetric: true,
        }
    }

    pub fn identity<I: IntoIterator<Item = Site>>(sites: I) -> Self {
        let mut m = Self::zero();
        for j in sites {
            m.set(j, j, 1.0);
        }
        m
    }

    pub fn diagonal(d: &ActionVector) -> Self {
        let mut m = Self::zero();
        for (j, x) in d.iter() {
            m.set(j, j, x);
        }
        m
    }

    /// Symmetric tridiagonal matrix with the given diagonal and off-diagonal
    /// `B_{j,j+1} = B_{j+1,j} = off(j)`.
    pub fn tridiagonal(sites: &[Site], diag: &[f64], off: &[f64]) -> Self {
        let mut m = Self::zero();
        for (k, &j) in sites.iter().enumerate() {
            m.set(j, j, diag[k]);
            if k + 1 < sites.len() {
                m.set(j, sites[k + 1], off[k]);
                m.set(sites[k + 1], j, off[k]);
            }
        }
        m.symmetric = true;
        m
    }

    pub fn get(&self, i: Site, j: Site) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, i: Site, j: Site, x: f64) {
        if x == 0.0 {
            self.entries.remove(&(i, j));
        } else {
            self.entries.insert((i, j), x);
        }
        if i != j {
            self.symmetric = self.symmetric && self.get(j, i) == x;
        }
    }

    pub fn add_at(&mut self, i: Site, j: Site, x: f64) {
        let y = self.get(i, j) + x;
        self.set(i, j, y);
    }

    /// Adds `x` to both `(i,j)` and `(j,i)` (once on the diagonal).
    pub fn add_sym(&mut self, i: Site, j: Site, x: f64) {
        self.add_at(i, j, x);
        if i != j {
            self.add_at(j, i, x);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ((Site, Site), f64)> + '_ {
        self.entries.iter().map(|(&k, &x)| (k, x))
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted union of row and column indices.
    pub fn sites(&self) -> Vec<Site> {
        let set: BTreeSet<Site> = self.entries.keys().flat_map(|&(i, j)| [i, j]).collect();
        set.into_iter().collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries.iter().all(|(&(i, j), &x)| self.get(j, i) == x)
    }

    pub fn add(&self, other: &LatticeMatrix) -> LatticeMatrix {
        let mut out = self.clone();
        for ((i, j), x) in other.iter() {
            out.add_at(i, j, x);
        }
        out.symmetric = out.is_symmetric();
        out
    }

    pub fn sub(&self, other: &LatticeMatrix) -> LatticeMatrix {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> LatticeMatrix {
        let mut out = LatticeMatrix::zero();
        for ((i, j), x) in self.iter() {
            out.entries.insert((i, j), c * x);
        }
        out.entries.retain(|_, x| *x != 0.0);
        out.symmetric = self.symmetric;
        out
    }

    pub fn transpose(&self) -> LatticeMatrix {
        let mut out = LatticeMatrix::zero();
        for ((i, j), x) in self.iter() {
            out.entries.insert((j, i), x);
        }
        out.symmetric = self.symmetric;
        out
    }

    /// Entries with both indices inside `|j| <= radius`.
    pub fn restrict(&self, radius: i32) -> LatticeMatrix {
        let mut out = LatticeMatrix::zero();
        for ((i, j), x) in self.iter() {
            if i.abs() <= radius && j.abs() <= radius {
                out.entries.insert((i, j), x);
            }
        }
        out.symmetric = out.is_symmetric();
        out
    }

    pub fn mul_vec(&self, v: &ActionVector) -> ActionVector {
        let mut out = ActionVector::new();
        for ((i, j), x) in self.iter() {
            let vj = v.get(j);
            if vj != 0.0 {
                out.add_at(i, x * vj);
            }
        }
        out
    }

    pub fn to_dense(&self, sites: &[Site]) -> DMatrix<f64> {
        let idx: BTreeMap<Site, usize> = sites.iter().enumerate().map(|(k, &j)| (j, k)).collect();
        let mut m = DMatrix::zeros(sites.len(), sites.len());
        for ((i, j), x) in self.iter() {
            if let (Some(&a), Some(&b)) = (idx.get(&i), idx.get(&j)) {
                m[(a, b)] = x;
            }
        }
        m
    }

    pub fn from_dense(sites: &[Site], m: &DMatrix<f64>) -> LatticeMatrix {
        let mut out = LatticeMatrix::zero();
        for (a, &i) in sites.iter().enumerate() {
            for (b, &j) in sites.iter().enumerate() {
                let x = m[(a, b)];
                if x != 0.0 {
                    out.entries.insert((i, j), x);
                }
            }
        }
        out.symmetric = out.is_symmetric();
        out
    }
}

/// Norm of `B` as an operator on the weighted l1 space: the maximum over
/// columns `j` of `sum_i |B_ij| w(i) / w(j)`.
pub fn induced_operator_norm(b: &LatticeMatrix, w: &WeightProfile) -> f64 {
    let mut cols: BTreeMap<Site, f64> = BTreeMap::new();
    for ((i, j), x) in b.iter() {
        *cols.entry(j).or_insert(0.0) += x.abs() * w.weight(i) / w.weight(j);
    }
    cols.values().copied().fold(0.0, f64::max)
}

/// Maximum absolute row sum. For a symmetric tridiagonal matrix this is
/// `max_j |B_{j-1,j}| + |B_{jj}| + |B_{j+1,j}|`.
pub fn sup_matrix_norm(b: &LatticeMatrix) -> f64 {
    let mut rows: BTreeMap<Site, f64> = BTreeMap::new();
    for ((i, _), x) in b.iter() {
        *rows.entry(i).or_insert(0.0) += x.abs();
    }
    rows.values().copied().fold(0.0, f64::max)
}
