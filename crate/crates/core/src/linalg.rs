//! Small dense helpers shared by the state-space code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if all_finite(m) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Spectral radius via the complex eigenvalues of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Van Loan's construction: for `dx = A x dt + G dW` with unit-intensity
/// white noise, returns `(Phi, Qd)` with `Phi = exp(A T)` and
/// `Qd = int_0^T exp(A t) G G^T exp(A^T t) dt`.
pub fn van_loan(a: &DMatrix<f64>, g: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a * ts));
    m.view_mut((0, n), (n, n)).copy_from(&(g * g.transpose() * ts));
    m.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * ts));
    let e = m.exp();
    let phi = e.view((n, n), (n, n)).transpose();
    let mut q = &phi * e.view((0, n), (n, n));
    symmetrize(&mut q);
    (phi, q)
}
