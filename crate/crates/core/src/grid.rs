//! Basic areal units, instrument footprints and change-of-support averaging.
//!
//! The domain is a regular `nx × ny` grid of equal-area cells indexed
//! row-major from the lower-left origin: cell `(row, col)` has index
//! `row * nx + col` and centroid `origin + ((col + ½)·h, (row + ½)·h)`.
//! An optional validity mask removes cells (land, say) from the model; the
//! remaining *active* cells get a compact index `0..n_active` used by every
//! vector and matrix the model builds.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::RowSparse;

/// Number of uniform points per cell used to lift point-level functions
/// to cell level.
pub const DEFAULT_MC_POINTS: usize = 30;

pub type Coord = [f64; 2];

/// A real function defined at point level.
pub type PointFn = dyn Fn(Coord) -> f64 + Send + Sync;

#[derive(Debug, Clone, PartialEq)]
pub struct BauGrid {
    nx: usize,
    ny: usize,
    cell_size: f64,
    origin: Coord,
    mask: Option<Vec<bool>>,
    active: Vec<usize>,
    active_pos: Vec<usize>,
}

impl BauGrid {
    pub fn new(nx: usize, ny: usize, cell_size: f64, origin: Coord) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument(format!("grid dimensions must be positive, got {nx}x{ny}")));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidArgument(format!("cell size must be positive, got {cell_size}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        let n = nx * ny;
        Ok(Self {
            nx,
            ny,
            cell_size,
            origin,
            mask: None,
            active: (0..n).collect(),
            active_pos: (0..n).collect(),
        })
    }

    /// Restricts the model to cells whose mask entry is `true`.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n_cells() {
            return Err(Error::Dimension(format!("mask has {} entries for {} cells", mask.len(), self.n_cells())));
        }
        self.active = (0..mask.len()).filter(|&i| mask[i]).collect();
        if self.active.is_empty() {
            return Err(Error::InvalidArgument("mask leaves no active cell".into()));
        }
        self.active_pos = vec![usize::MAX; mask.len()];
        for (k, &i) in self.active.iter().enumerate() {
            self.active_pos[i] = k;
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> Coord {
        self.origin
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Total number of cells, masked or not.
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Number of cells the model lives on.
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Grid indices of active cells, increasing.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, index: usize) -> bool {
        index < self.n_cells() && self.active_pos[index] != usize::MAX
    }

    /// Compact model index of a grid cell, `None` if masked or out of range.
    pub fn active_index(&self, index: usize) -> Option<usize> {
        self.active_pos.get(index).copied().filter(|&k| k != usize::MAX)
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.nx, index % self.nx)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.nx + col
    }

    pub fn centroid(&self, index: usize) -> Coord {
        let (row, col) = self.row_col(index);
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Centroids of all cells in grid order.
    pub fn centroids(&self) -> Vec<Coord> {
        (0..self.n_cells()).map(|i| self.centroid(i)).collect()
    }

    /// Lower-left and upper-right corners of a cell.
    pub fn cell_bounds(&self, index: usize) -> (Coord, Coord) {
        let (row, col) = self.row_col(index);
        let lo = [
            self.origin[0] + col as f64 * self.cell_size,
            self.origin[1] + row as f64 * self.cell_size,
        ];
        (lo, [lo[0] + self.cell_size, lo[1] + self.cell_size])
    }

    /// Bounding box of the whole grid.
    pub fn bbox(&self) -> (Coord, Coord) {
        (
            self.origin,
            [
                self.origin[0] + self.nx as f64 * self.cell_size,
                self.origin[1] + self.ny as f64 * self.cell_size,
            ],
        )
    }

    /// Active cells whose centroid falls inside the closed rectangle.
    pub fn cells_in_rect(&self, lo: Coord, hi: Coord) -> Vec<usize> {
        self.active
            .iter()
            .copied()
            .filter(|&i| {
                let c = self.centroid(i);
                c[0] >= lo[0] && c[0] <= hi[0] && c[1] >= lo[1] && c[1] <= hi[1]
            })
            .collect()
    }
}

/// The set of cells an observation integrates over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    baus: Vec<usize>,
    instrument: usize,
    time: usize,
}

impl Footprint {
    /// `instrument` is 1-based; `baus` are grid indices.
    pub fn new(mut baus: Vec<usize>, instrument: usize, time: usize) -> Result<Self> {
        if baus.is_empty() {
            return Err(Error::InvalidFootprint("footprint covers no cell".into()));
        }
        if instrument == 0 {
            return Err(Error::InvalidFootprint("instrument ids start at 1".into()));
        }
        baus.sort_unstable();
        if baus.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidFootprint("duplicate cell in footprint".into()));
        }
        Ok(Self { baus, instrument, time })
    }

    pub fn single(bau: usize, instrument: usize, time: usize) -> Self {
        Self { baus: vec![bau], instrument, time }
    }

    pub fn baus(&self) -> &[usize] {
        &self.baus
    }

    pub fn instrument(&self) -> usize {
        self.instrument
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// Mean of the centroids of the covered cells.
    pub fn centroid(&self, grid: &BauGrid) -> Coord {
        let m = self.baus.len() as f64;
        let s = self.baus.iter().fold([0.0, 0.0], |acc, &i| {
            let c = grid.centroid(i);
            [acc[0] + c[0], acc[1] + c[1]]
        });
        [s[0] / m, s[1] / m]
    }
}

/// Averaging weights of a footprint over active cells, in compact model
/// indexing. Masked cells inside the footprint are skipped.
pub fn footprint_row(fp: &Footprint, grid: &BauGrid) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut cols = Vec::with_capacity(fp.baus.len());
    for &i in &fp.baus {
        if i >= grid.n_cells() {
            return Err(Error::InvalidFootprint(format!("cell {i} outside a grid of {}", grid.n_cells())));
        }
        if let Some(k) = grid.active_index(i) {
            cols.push(k);
        }
    }
    if cols.is_empty() {
        return Err(Error::InvalidFootprint("footprint covers only masked cells".into()));
    }
    let w = 1.0 / cols.len() as f64;
    let weights = vec![w; cols.len()];
    Ok((cols, weights))
}

/// Stacks footprint rows into the sparse averaging operator `B`.
pub fn footprint_matrix<'a, I>(footprints: I, grid: &BauGrid) -> Result<RowSparse>
where
    I: IntoIterator<Item = &'a Footprint>,
{
    let mut b = RowSparse::new(grid.n_active());
    for fp in footprints {
        let (c, w) = footprint_row(fp, grid)?;
        b.push_row(&c, &w);
    }
    Ok(b)
}

/// One observed footprint value.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub id: usize,
    pub footprint: Footprint,
    pub value: f64,
    /// Known relative variance `v(A)` of the measurement error.
    pub var_factor: f64,
}

/// All observations at one time step, grouped by instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub time: usize,
    /// `instruments[k - 1]` holds instrument `k`.
    pub instruments: Vec<Vec<Observation>>,
}

impl ObservationBatch {
    pub fn new(time: usize, n_instruments: usize) -> Self {
        Self { time, instruments: vec![Vec::new(); n_instruments] }
    }

    pub fn n_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn len(&self) -> usize {
        self.instruments.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, obs: Observation) -> Result<()> {
        let k = obs.footprint.instrument();
        if k == 0 || k > self.instruments.len() {
            return Err(Error::InvalidFootprint(format!(
                "instrument {k} outside 1..={}",
                self.instruments.len()
            )));
        }
        if !(obs.var_factor > 0.0) || !obs.var_factor.is_finite() {
            return Err(Error::InvalidArgument(format!("variance factor must be positive, got {}", obs.var_factor)));
        }
        if !obs.value.is_finite() {
            return Err(Error::InvalidArgument("observation value must be finite".into()));
        }
        self.instruments[k - 1].push(obs);
        Ok(())
    }

    /// Observations in stacked order (instrument 1 first).
    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.instruments.iter().flatten()
    }

    pub fn validate(&self, grid: &BauGrid) -> Result<()> {
        for obs in self.iter() {
            footprint_row(&obs.footprint, grid)?;
        }
        Ok(())
    }
}

fn cell_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Monte Carlo average of a point function over one cell using
/// `n_points` uniform points. Reproducible for a fixed `(seed, index)`.
pub fn mc_average(f: &PointFn, grid: &BauGrid, index: usize, n_points: usize, seed: u64) -> Result<f64> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("need at least one Monte Carlo point".into()));
    }
    if index >= grid.n_cells() {
        return Err(Error::InvalidArgument(format!("cell {index} outside grid")));
    }
    Ok(mc_points(grid, index, n_points, seed).iter().map(|&p| f(p)).sum::<f64>() / n_points as f64)
}

/// The uniform sample points `mc_average` uses for a cell.
pub fn mc_points(grid: &BauGrid, index: usize, n_points: usize, seed: u64) -> Vec<Coord> {
    let (lo, _) = grid.cell_bounds(index);
    let h = grid.cell_size();
    let mut rng = cell_rng(seed, index);
    (0..n_points)
        .map(|_| [lo[0] + rng.gen::<f64>() * h, lo[1] + rng.gen::<f64>() * h])
        .collect()
}

/// Cell-level values (active cells × functions) of point-level functions.
pub fn bau_values(funcs: &[&PointFn], grid: &BauGrid, n_points: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("need at least one Monte Carlo point".into()));
    }
    let n = grid.n_active();
    let mut out = DMatrix::zeros(n, funcs.len());
    for (k, &i) in grid.active().iter().enumerate() {
        let pts = mc_points(grid, i, n_points, seed);
        for (c, f) in funcs.iter().enumerate() {
            out[(k, c)] = pts.iter().map(|&p| f(p)).sum::<f64>() / n_points as f64;
        }
    }
    Ok(out)
}

/// Footprint-level covariates: each function is lifted to cell level by
/// Monte Carlo averaging and then block-averaged over every footprint.
pub fn aggregate_covariates(
    funcs: &[&PointFn],
    footprints: &[Footprint],
    grid: &BauGrid,
    n_points: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let cells = bau_values(funcs, grid, n_points, seed)?;
    let b = footprint_matrix(footprints, grid)?;
    Ok(b.mul_dense(&cells))
}

/// `[1, lat, lat²]` with latitude taken as the vertical coordinate scaled to
/// `[-1, 1]` across the grid.
pub fn latitude_covariates(grid: &BauGrid) -> Vec<Box<PointFn>> {
    let (lo, hi) = grid.bbox();
    let mid = 0.5 * (lo[1] + hi[1]);
    let half = 0.5 * (hi[1] - lo[1]);
    vec![
        Box::new(|_| 1.0),
        Box::new(move |p: Coord| (p[1] - mid) / half),
        Box::new(move |p: Coord| ((p[1] - mid) / half).powi(2)),
    ]
}
