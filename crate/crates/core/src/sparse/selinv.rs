//! Selected inversion: entries of `A^{-1}` on the pattern of the Cholesky
//! factor, computed by the backward Takahashi recurrence
//!
//! ```text
//! Z_ij = -(1/L_jj) sum_{k>j} L_kj Z_ik          (i > j, i in struct(L_:j))
//! Z_jj = 1/L_jj^2 - (1/L_jj) sum_{k>j} L_kj Z_kj
//! ```
//!
//! The pattern of `L` is closed under the pairs the recurrence touches, so
//! every stored entry of `A` (and every pair of rows sharing a column of
//! `L`) is available without forming `A^{-1}`.

use std::sync::Arc;

use super::{Cholesky, SymbolicCholesky};

#[derive(Debug, Clone)]
pub struct SelectedInverse {
    symbolic: Arc<SymbolicCholesky>,
    li: Vec<usize>,
    zx: Vec<f64>,
}

impl SelectedInverse {
    pub fn compute(factor: &Cholesky) -> Self {
        let (lp, li, lx) = factor.parts();
        let n = factor.n();
        let mut zx = vec![0.0f64; lx.len()];
        let mut pos = vec![usize::MAX; n];
        let mut u: Vec<f64> = Vec::new();
        let mut acc: Vec<f64> = Vec::new();

        for j in (0..n).rev() {
            let start = lp[j];
            let end = lp[j + 1];
            let ljj = lx[start];
            let rows = &li[start + 1..end];
            u.clear();
            acc.clear();
            for (t, &i) in rows.iter().enumerate() {
                pos[i] = t;
                u.push(lx[start + 1 + t] / ljj);
                acc.push(0.0);
            }
            for (t, &i) in rows.iter().enumerate() {
                acc[t] += zx[lp[i]] * u[t];
                for p in lp[i] + 1..lp[i + 1] {
                    let q = pos[li[p]];
                    if q != usize::MAX {
                        acc[t] += zx[p] * u[q];
                        acc[q] += zx[p] * u[t];
                    }
                }
            }
            let mut diag = 1.0 / (ljj * ljj);
            for t in 0..rows.len() {
                zx[start + 1 + t] = -acc[t];
                diag += u[t] * acc[t];
            }
            zx[start] = diag;
            for &i in rows {
                pos[i] = usize::MAX;
            }
        }

        Self { symbolic: factor.symbolic().clone(), li: li.to_vec(), zx }
    }

    /// Diagonal of `A^{-1}` in original ordering.
    pub fn diagonal(&self) -> Vec<f64> {
        let s = &*self.symbolic;
        let lp = self.lp();
        let mut d = vec![0.0; s.n()];
        for (k, &i) in s.perm().iter().enumerate() {
            d[i] = self.zx[lp[k]];
        }
        d
    }

    /// Entry `(a, b)` of `A^{-1}` if it lies on the factor's pattern.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        let pinv = self.symbolic.pinv();
        let (pa, pb) = (pinv[a], pinv[b]);
        let (r, c) = (pa.max(pb), pa.min(pb));
        let lp = self.lp();
        let rows = &self.li[lp[c]..lp[c + 1]];
        rows.binary_search(&r).ok().map(|k| self.zx[lp[c] + k])
    }

    fn lp(&self) -> &[usize] {
        self.symbolic.lp()
    }
}
