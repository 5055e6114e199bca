//! Sparse matrices and the symmetric factorization used by the CAR and
//! posterior-precision computations.
//!
//! Two storage types cover everything the engine needs:
//!
//! * [`SymCsc`] stores the lower triangle (diagonal included) of a symmetric
//!   matrix in compressed-column form with sorted row indices.
//! * [`RowSparse`] is a general compressed-row matrix, used for the
//!   footprint-averaging operator `B_t` and prediction selectors.

mod cholesky;
mod selinv;

pub use cholesky::{Cholesky, SymbolicCholesky};
pub use selinv::SelectedInverse;

use std::io::Write;

use nalgebra::DMatrix;

/// Symmetric sparse matrix, lower triangle in CSC form.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCsc {
    n: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl SymCsc {
    /// Builds a matrix from `(row, col, value)` triplets. Entries from either
    /// triangle are folded onto the lower one and duplicates are summed.
    pub fn from_triplets<I>(n: usize, triplets: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in triplets {
            assert!(i < n && j < n, "triplet ({i},{j}) outside {n}x{n}");
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            cols[c].push((r, v));
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowidx = Vec::new();
        let mut values = Vec::new();
        colptr.push(0);
        for mut col in cols {
            col.sort_unstable_by_key(|e| e.0);
            let mut last = usize::MAX;
            for (r, v) in col {
                if r == last {
                    *values.last_mut().unwrap() += v;
                } else {
                    rowidx.push(r);
                    values.push(v);
                    last = r;
                }
            }
            colptr.push(rowidx.len());
        }
        Self { n, colptr, rowidx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            colptr: (0..=n).collect(),
            rowidx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n,
            colptr: (0..=n).collect(),
            rowidx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored entries (lower triangle).
    pub fn nnz(&self) -> usize {
        self.rowidx.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowidx(&self) -> &[usize] {
        &self.rowidx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let rows = &self.rowidx[self.colptr[c]..self.colptr[c + 1]];
        match rows.binary_search(&r) {
            Ok(k) => self.values[self.colptr[c] + k],
            Err(_) => 0.0,
        }
    }

    /// Stored lower-triangle entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |j| {
            (self.colptr[j]..self.colptr[j + 1]).map(move |p| (self.rowidx[p], j, self.values[p]))
        })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, j)).collect()
    }

    /// `y = A x` using both triangles.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowidx[p];
                let v = self.values[p];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// Dense product `A X`.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n);
        let mut y = DMatrix::zeros(self.n, x.ncols());
        for k in 0..x.ncols() {
            let xc = x.column(k);
            let mut yc = y.column_mut(k);
            for j in 0..self.n {
                for p in self.colptr[j]..self.colptr[j + 1] {
                    let i = self.rowidx[p];
                    let v = self.values[p];
                    yc[i] += v * xc[j];
                    if i != j {
                        yc[j] += v * xc[i];
                    }
                }
            }
        }
        y
    }

    /// `Σ_ij A_ij B_ij` over both triangles, for matrices whose stored
    /// entries can be looked up in `other`.
    pub fn frobenius_with(&self, other: impl Fn(usize, usize) -> f64) -> f64 {
        self.iter()
            .map(|(i, j, v)| if i == j { v * other(i, j) } else { 2.0 * v * other(i, j) })
            .sum()
    }

    /// Quadratic form `x' A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.n {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowidx[p];
                let v = self.values[p];
                acc += if i == j { v * x[i] * x[i] } else { 2.0 * v * x[i] * x[j] };
            }
        }
        acc
    }

    /// `self + other`, with the union of both patterns.
    pub fn add(&self, other: &SymCsc) -> SymCsc {
        assert_eq!(self.n, other.n);
        SymCsc::from_triplets(self.n, self.iter().chain(other.iter()))
    }

    pub fn scaled(&self, alpha: f64) -> SymCsc {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Whether both matrices share exactly the same sparsity pattern.
    pub fn same_pattern(&self, other: &SymCsc) -> bool {
        self.n == other.n && self.colptr == other.colptr && self.rowidx == other.rowidx
    }

    /// Dense copy, both triangles. Intended for tests and tiny problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    /// Writes `row,col,value` triplets (lower triangle, 0-based indices).
    pub fn write_triplets<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,col,value")?;
        for (i, j, v) in self.iter() {
            writeln!(out, "{i},{j},{v:e}")?;
        }
        Ok(())
    }
}

/// General sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSparse {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl RowSparse {
    pub fn new(ncols: usize) -> Self {
        Self { ncols, indptr: vec![0], indices: Vec::new(), values: Vec::new() }
    }

    pub fn push_row(&mut self, cols: &[usize], vals: &[f64]) {
        debug_assert_eq!(cols.len(), vals.len());
        debug_assert!(cols.iter().all(|&c| c < self.ncols));
        self.indices.extend_from_slice(cols);
        self.values.extend_from_slice(vals);
        self.indptr.push(self.indices.len());
    }

    /// 0/1 selection matrix picking the given columns, one per row.
    pub fn selection(ncols: usize, picks: &[usize]) -> Self {
        let mut m = Self::new(ncols);
        for &c in picks {
            m.push_row(&[c], &[1.0]);
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).1.iter().sum()
    }

    /// `y = M x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &w)| w * x[j]).sum()
            })
            .collect()
    }

    /// `y = M' x`.
    pub fn tmul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows());
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (c, v) = self.row(i);
            for (&j, &w) in c.iter().zip(v) {
                y[j] += w * xi;
            }
        }
        y
    }

    /// Dense product `M X` for a dense `X` with `ncols` rows.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows(), x.ncols());
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for k in 0..x.ncols() {
                out[(i, k)] = c.iter().zip(v).map(|(&j, &w)| w * x[(j, k)]).sum();
            }
        }
        out
    }

    /// `M' diag(d) M` as a symmetric sparse matrix of order `ncols`.
    pub fn weighted_gram(&self, d: &[f64]) -> SymCsc {
        assert_eq!(d.len(), self.nrows());
        let mut trips = Vec::new();
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for a in 0..c.len() {
                for b in 0..=a {
                    let (ra, rb) = (c[a], c[b]);
                    trips.push((ra.max(rb), ra.min(rb), d[i] * v[a] * v[b]));
                }
            }
        }
        SymCsc::from_triplets(self.ncols, trips)
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> RowSparse {
        let mut out = RowSparse::new(self.ncols);
        for &i in rows {
            let (c, v) = self.row(i);
            out.push_row(c, v);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (&j, &w) in c.iter().zip(v) {
                m[(i, j)] += w;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_fold_and_sum() {
        let a = SymCsc::from_triplets(3, [(0, 1, 2.0), (1, 0, 1.0), (2, 2, 4.0), (0, 0, 1.0)]);
        assert_eq!(a.get(1, 0), 3.0);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(2, 2), 4.0);
        assert_eq!(a.get(2, 0), 0.0);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn mul_vec_matches_dense() {
        let a = SymCsc::from_triplets(3, [(0, 0, 2.0), (1, 0, -1.0), (1, 1, 2.0), (2, 1, -1.0), (2, 2, 2.0)]);
        let x = [1.0, 2.0, 3.0];
        let y = a.mul_vec(&x);
        let yd = a.to_dense() * nalgebra::DVector::from_column_slice(&x);
        for i in 0..3 {
            assert!((y[i] - yd[i]).abs() < 1e-14);
        }
        assert!((a.quad_form(&x) - x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn weighted_gram_of_averaging_rows() {
        let mut b = RowSparse::new(3);
        b.push_row(&[0, 1], &[0.5, 0.5]);
        b.push_row(&[2], &[1.0]);
        let g = b.weighted_gram(&[4.0, 2.0]);
        let dense = b.to_dense();
        let expect = dense.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 2.0])) * dense;
        assert!((g.to_dense() - expect).abs().max() < 1e-14);
    }
}
