//! Small dense helpers for the r×r algebra of the state-space recursions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Replaces `m` by `(m + m')/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Largest `|m - m'|` relative to the largest `|m|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite { pivot: 0 })
}

/// A factor `L` with `L L' = P` for a symmetric positive semidefinite `P`:
/// the Cholesky factor when it exists, otherwise the eigen square root
/// with negative eigenvalues clamped to zero.
pub fn psd_factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(p.clone()) {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrized(p.clone()));
    let mut l = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Raises the eigenvalues of a symmetric matrix to at least `rel` times the
/// largest one (or `rel` if that is not positive). Returns `None` when no
/// eigenvalue needed raising.
pub fn eigen_floor(m: &DMatrix<f64>, rel: f64) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrized(m.clone()));
    let top = eig.eigenvalues.max();
    let floor = if top > 0.0 { rel * top } else { rel };
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return None;
    }
    let lam = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    Some(symmetrized(v * DMatrix::from_diagonal(&lam) * v.transpose()))
}

/// `ln|M|` for symmetric positive definite `M`.
pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let c = cholesky(m)?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix. Falls back to a small
/// diagonal jitter when the matrix is numerically singular, logging it.
pub fn spd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return symmetrized(c.inverse());
    }
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * scale;
    loop {
        let shifted = m + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            log::warn!("regularized a singular {n}x{n} system with jitter {jitter:e}");
            return symmetrized(c.inverse());
        }
        jitter *= 10.0;
    }
}

/// Solves `X A = B` for symmetric positive definite `A` (so `X = B A⁻¹`).
pub fn right_solve_spd(b: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    match Cholesky::new(a.clone()) {
        Some(c) => c.solve(&b.transpose()).transpose(),
        None => b * spd_inverse(a),
    }
}

/// `x' M x`.
pub fn quad(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}
