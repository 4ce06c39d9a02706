//! Small dense solves on box-restricted lattice matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{KamError, Result};
use crate::lattice_norms::{ActionVector, LatticeMatrix, Site};

/// Largest condition estimate accepted by [`solve_refined`].
pub const COND_GATE: f64 = 1e6;

fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `||A||_1 ||A^-1||_1`, infinite when `A` is singular.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    match a.clone().lu().try_inverse() {
        Some(inv) => norm1(a) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Solves `A x = b` by LU with a few rounds of iterative refinement.
pub fn solve_refined(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let cond = condition_estimate(a);
    if !(cond <= COND_GATE) {
        return Err(KamError::SingularHessian { cond });
    }
    let lu = a.clone().lu();
    let mut x = lu.solve(b).ok_or(KamError::SingularHessian { cond })?;
    for _ in 0..3 {
        let r = b - a * &x;
        if r.amax() == 0.0 {
            break;
        }
        match lu.solve(&r) {
            Some(dx) => x += dx,
            None => break,
        }
    }
    Ok(x)
}

/// Inverse of the block of `m` on the given sites.
pub fn inverse_on(m: &LatticeMatrix, sites: &[Site]) -> Result<LatticeMatrix> {
    let d = m.to_dense(sites);
    let cond = condition_estimate(&d);
    if !cond.is_finite() {
        return Err(KamError::SingularHessian { cond });
    }
    let inv = d.lu().try_inverse().ok_or(KamError::SingularHessian { cond })?;
    Ok(LatticeMatrix::from_dense(sites, &inv))
}

/// Solves `m x = rhs` on the given sites.
pub fn solve_on(m: &LatticeMatrix, sites: &[Site], rhs: &ActionVector) -> Result<ActionVector> {
    let a = m.to_dense(sites);
    let b = DVector::from_iterator(sites.len(), sites.iter().map(|&j| rhs.get(j)));
    let x = solve_refined(&a, &b)?;
    Ok(ActionVector::from_pairs(sites.iter().copied().zip(x.iter().copied())))
}
