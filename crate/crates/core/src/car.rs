//! Conditional autoregressive structure on the cell graph.
//!
//! With adjacency `E`, degrees `e_i = Σ_j e_ij` and `W = diag(1/e) E`, the
//! precision is `Q = diag(e)(I - γW)/τ² = (diag(e) - γE)/τ²`, which is
//! symmetric. `Q` is always stored on the full pattern `diag ∪ E` so one
//! symbolic analysis serves every `(γ, τ²)`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::BauGrid;
use crate::sparse::{Cholesky, SymCsc, SymbolicCholesky};

/// Gap kept between `γ` and 1 so that `Q` stays positive definite.
pub const GAMMA_EPS: f64 = 1e-6;

/// Largest graph for which `ln|I - γW|` goes through a one-off dense
/// eigendecomposition instead of a sparse factorization per evaluation.
pub const EIGEN_MAX_N: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// Edge-sharing cells.
    Rook,
    /// Edge- or corner-sharing cells.
    Queen,
}

/// What to do with a node that has no neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsolatedPolicy {
    Reject,
    /// Keep the node with its degree forced to 1.
    UnitDegree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    pub gamma: f64,
    pub tau2: f64,
}

impl CarParams {
    pub fn new(gamma: f64, tau2: f64) -> Self {
        Self { gamma, tau2 }
    }

    /// Checks `τ² > 0` and `γ ∈ [gamma_lo, 1 - GAMMA_EPS]`.
    pub fn validate(&self, gamma_lo: f64) -> Result<()> {
        if !(self.tau2 > 0.0) || !self.tau2.is_finite() {
            return Err(Error::InvalidParameter(format!("tau2 must be positive, got {}", self.tau2)));
        }
        if !(self.gamma >= gamma_lo && self.gamma <= 1.0 - GAMMA_EPS) {
            return Err(Error::InvalidParameter(format!(
                "gamma {} outside [{gamma_lo}, {}]",
                self.gamma,
                1.0 - GAMMA_EPS
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct CarStructure {
    n: usize,
    /// Strictly lower triangle of `E`.
    adjacency: SymCsc,
    degrees: Vec<f64>,
    gamma_lo: f64,
    pattern: SymCsc,
    symbolic: Arc<SymbolicCholesky>,
    w_eigen: OnceLock<Vec<f64>>,
}

impl CarStructure {
    /// Adjacency of the active cells of a grid.
    pub fn from_grid(grid: &BauGrid, neighborhood: Neighborhood) -> Result<Self> {
        let mut edges = Vec::new();
        let (nx, ny) = (grid.nx(), grid.ny());
        for row in 0..ny {
            for col in 0..nx {
                let Some(a) = grid.active_index(grid.index(row, col)) else { continue };
                let mut link = |r: usize, c: usize| {
                    if let Some(b) = grid.active_index(grid.index(r, c)) {
                        edges.push((a, b));
                    }
                };
                if col + 1 < nx {
                    link(row, col + 1);
                }
                if row + 1 < ny {
                    link(row + 1, col);
                    if neighborhood == Neighborhood::Queen {
                        if col + 1 < nx {
                            link(row + 1, col + 1);
                        }
                        if col > 0 {
                            link(row + 1, col - 1);
                        }
                    }
                }
            }
        }
        Self::from_edges(grid.n_active(), &edges, IsolatedPolicy::Reject).map_err(|e| match e {
            Error::IsolatedBau { index } => Error::IsolatedBau { index: grid.active()[index] },
            other => other,
        })
    }

    /// Graph from an undirected edge list over `0..n`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], policy: IsolatedPolicy) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty graph".into()));
        }
        let mut trips = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!("edge ({a},{b}) outside 0..{n}")));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self loop at {a}")));
            }
            trips.push((a.max(b), a.min(b), 1.0));
        }
        let mut adjacency = SymCsc::from_triplets(n, trips);
        // Repeated edges collapse to a single 0/1 entry.
        adjacency.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut degrees = vec![0.0; n];
        for (i, j, _) in adjacency.iter() {
            degrees[i] += 1.0;
            degrees[j] += 1.0;
        }
        for (i, d) in degrees.iter_mut().enumerate() {
            if *d == 0.0 {
                match policy {
                    IsolatedPolicy::Reject => return Err(Error::IsolatedBau { index: i }),
                    IsolatedPolicy::UnitDegree => *d = 1.0,
                }
            }
        }
        let pattern = SymCsc::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).chain(adjacency.iter()));
        let symbolic = Arc::new(SymbolicCholesky::analyse(&pattern)?);
        Ok(Self {
            n,
            adjacency,
            degrees,
            gamma_lo: 0.0,
            pattern,
            symbolic,
            w_eigen: OnceLock::new(),
        })
    }

    /// Lower bound admitted for `γ` (default 0).
    pub fn with_gamma_lower_bound(mut self, gamma_lo: f64) -> Result<Self> {
        if !(gamma_lo > -1.0 + GAMMA_EPS && gamma_lo < 1.0 - GAMMA_EPS) {
            return Err(Error::InvalidArgument(format!("gamma lower bound {gamma_lo} outside (-1, 1)")));
        }
        self.gamma_lo = gamma_lo;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma_lo(&self) -> f64 {
        self.gamma_lo
    }

    pub fn gamma_hi(&self) -> f64 {
        1.0 - GAMMA_EPS
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Strictly lower triangle of the adjacency matrix.
    pub fn adjacency(&self) -> &SymCsc {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .adjacency
            .iter()
            .filter_map(|(a, b, _)| if a == i { Some(b) } else if b == i { Some(a) } else { None })
            .collect();
        out.sort_unstable();
        out
    }

    /// Symbolic factorization of the `Q` pattern, shared by every `Q`.
    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// Stored pattern of `Q` (diagonal plus adjacency, lower triangle).
    pub fn pattern(&self) -> &SymCsc {
        &self.pattern
    }

    /// `diag(e) - γE` on the `Q` pattern.
    pub fn shifted_laplacian(&self, gamma: f64) -> SymCsc {
        let mut m = self.pattern.clone();
        let cp = m.colptr().to_vec();
        let ri = m.rowidx().to_vec();
        let vals = m.values_mut();
        for j in 0..self.n {
            for p in cp[j]..cp[j + 1] {
                vals[p] = if ri[p] == j { self.degrees[j] } else { -gamma };
            }
        }
        m
    }

    pub fn precision(&self, params: &CarParams) -> Result<SymCsc> {
        params.validate(self.gamma_lo)?;
        Ok(self.shifted_laplacian(params.gamma).scaled(1.0 / params.tau2))
    }

    pub fn factor_precision(&self, params: &CarParams) -> Result<Cholesky> {
        let q = self.precision(params)?;
        Cholesky::factor_with(self.symbolic.clone(), &q)
    }

    /// `Σ ln e_i`.
    pub fn log_degree_sum(&self) -> f64 {
        self.degrees.iter().map(|d| d.ln()).sum()
    }

    /// `(ξ' diag(e) ξ, ξ' E ξ)`, the two statistics the CAR likelihood needs.
    pub fn quad_stats(&self, xi: &[f64]) -> (f64, f64) {
        let a = xi.iter().zip(&self.degrees).map(|(x, d)| d * x * x).sum();
        let b = 2.0 * self.adjacency.iter().map(|(i, j, _)| xi[i] * xi[j]).sum::<f64>();
        (a, b)
    }

    /// Eigenvalues of `W`, via the symmetric similar matrix
    /// `diag(e)^{-1/2} E diag(e)^{-1/2}`. Computed once.
    pub fn w_eigenvalues(&self) -> &[f64] {
        self.w_eigen.get_or_init(|| {
            let mut m = DMatrix::zeros(self.n, self.n);
            for (i, j, _) in self.adjacency.iter() {
                let v = 1.0 / (self.degrees[i] * self.degrees[j]).sqrt();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
        })
    }

    /// `ln|I - γW|`.
    pub fn logdet_i_minus_gamma_w(&self, gamma: f64) -> Result<f64> {
        if self.n <= EIGEN_MAX_N {
            let s: f64 = self.w_eigenvalues().iter().map(|&l| (1.0 - gamma * l).ln()).sum();
            if s.is_finite() {
                return Ok(s);
            }
            return Err(Error::NotPositiveDefinite { pivot: 0 });
        }
        let f = Cholesky::factor_with(self.symbolic.clone(), &self.shifted_laplacian(gamma))?;
        Ok(f.logdet() - self.log_degree_sum())
    }

    /// `ln|Q| = -N ln τ² + Σ ln e_i + ln|I - γW|`.
    pub fn logdet_precision(&self, params: &CarParams) -> Result<f64> {
        Ok(-(self.n as f64) * params.tau2.ln() + self.log_degree_sum() + self.logdet_i_minus_gamma_w(params.gamma)?)
    }
}

/// One draw of `ξ ~ N(0, Q⁻¹)`.
pub fn sample_car<R: Rng + ?Sized>(structure: &CarStructure, params: &CarParams, rng: &mut R) -> Result<Vec<f64>> {
    let f = structure.factor_precision(params)?;
    Ok(sample_with_factor(&f, rng))
}

/// One draw of `N(0, A⁻¹)` from a factor of the precision `A`.
pub fn sample_with_factor<R: Rng + ?Sized>(f: &Cholesky, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..f.n()).map(|_| rng.sample(StandardNormal)).collect();
    f.sample_precision(&z)
}
