//! Bisquare basis functions on multi-resolution lattices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{mc_points, BauGrid, Coord, Footprint};
use crate::sparse::RowSparse;

/// Radius of each function as a multiple of its lattice spacing.
pub const DEFAULT_RADIUS_FACTOR: f64 = 1.5;

/// Per-resolution counts of the default 99-function layout.
pub const LAYOUT_99: [usize; 3] = [9, 30, 60];

/// The 99-function layout plus a fourth, finer resolution.
pub const LAYOUT_181: [usize; 4] = [9, 30, 60, 82];

/// `{1 - (d/ℓ)²}²` for `d = ‖u - c‖ ≤ ℓ`, zero outside.
pub fn bisquare_eval(u: Coord, c: Coord, radius: f64) -> f64 {
    let dx = u[0] - c[0];
    let dy = u[1] - c[1];
    let q = (dx * dx + dy * dy) / (radius * radius);
    if q >= 1.0 {
        0.0
    } else {
        let s = 1.0 - q;
        s * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BisquareBasis {
    centers: Vec<Coord>,
    radii: Vec<f64>,
    resolution: Vec<usize>,
}

impl BisquareBasis {
    pub fn new(centers: Vec<Coord>, radii: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidArgument("basis needs at least one function".into()));
        }
        if radii.len() != centers.len() || resolution.len() != centers.len() {
            return Err(Error::Dimension("centers, radii and resolution tags differ in length".into()));
        }
        if let Some(r) = radii.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument(format!("basis radius must be positive, got {r}")));
        }
        if centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("basis centers must be finite".into()));
        }
        Ok(Self { centers, radii, resolution })
    }

    pub fn r(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Coord] {
        &self.centers
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    /// All `r` function values at one point.
    pub fn eval(&self, u: Coord) -> Vec<f64> {
        self.centers.iter().zip(&self.radii).map(|(&c, &l)| bisquare_eval(u, c, l)).collect()
    }
}

/// Rows of a near-square lattice holding `count` points, as a list of
/// per-row counts. A factor pair with aspect ratio at most 2 gives a full
/// rectangle; otherwise points are spread over `round(sqrt(count))` rows
/// whose lengths differ by at most one.
fn lattice_rows(count: usize, wide: bool) -> Vec<usize> {
    let mut best: Option<(usize, usize)> = None;
    for a in 1..=count {
        if count % a != 0 {
            continue;
        }
        let b = count / a;
        if a < b || a > 2 * b {
            continue;
        }
        if best.map_or(true, |(ba, _)| a < ba) {
            best = Some((a, b));
        }
    }
    if let Some((long, short)) = best {
        // `long` points along the wider side of the domain.
        return if wide { vec![long; short] } else { vec![short; long] };
    }
    let rows = ((count as f64).sqrt().round() as usize).max(1);
    let base = count / rows;
    let extra = count % rows;
    (0..rows).map(|i| base + usize::from(i < extra)).collect()
}

/// Equally spaced centers per resolution over the box `[lo, hi]`, each
/// with radius `radius_factor` times that resolution's lattice spacing.
pub fn layout_multires(lo: Coord, hi: Coord, counts: &[usize], radius_factor: f64) -> Result<BisquareBasis> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no basis resolutions given".into()));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument("every resolution needs at least one function".into()));
    }
    if !(radius_factor > 0.0) {
        return Err(Error::InvalidArgument("radius factor must be positive".into()));
    }
    let w = hi[0] - lo[0];
    let h = hi[1] - lo[1];
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidArgument("empty domain box".into()));
    }
    let mut centers = Vec::new();
    let mut radii = Vec::new();
    let mut resolution = Vec::new();
    for (res, &count) in counts.iter().enumerate() {
        let rows = lattice_rows(count, w >= h);
        let ny = rows.len();
        let max_row = *rows.iter().max().unwrap();
        let dy = h / ny as f64;
        let spacing = (w / max_row as f64).max(dy);
        for (i, &nx) in rows.iter().enumerate() {
            let dx = w / nx as f64;
            for j in 0..nx {
                centers.push([lo[0] + (j as f64 + 0.5) * dx, lo[1] + (i as f64 + 0.5) * dy]);
                radii.push(radius_factor * spacing);
                resolution.push(res);
            }
        }
    }
    BisquareBasis::new(centers, radii, resolution)
}

/// Cell-level basis values (active cells × r) by Monte Carlo averaging
/// over `n_points` uniform points per cell.
pub fn bau_basis_matrix(basis: &BisquareBasis, grid: &BauGrid, n_points: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("need at least one Monte Carlo point".into()));
    }
    let n = grid.n_active();
    let mut out = DMatrix::zeros(n, basis.r());
    let half_diag = grid.cell_size() * std::f64::consts::FRAC_1_SQRT_2;
    for (k, &cell) in grid.active().iter().enumerate() {
        let c = grid.centroid(cell);
        let mut pts: Option<Vec<Coord>> = None;
        for (i, (&center, &radius)) in basis.centers.iter().zip(&basis.radii).enumerate() {
            let dx = c[0] - center[0];
            let dy = c[1] - center[1];
            let reach = radius + half_diag;
            if dx * dx + dy * dy >= reach * reach {
                continue;
            }
            let pts = pts.get_or_insert_with(|| mc_points(grid, cell, n_points, seed));
            let s: f64 = pts.iter().map(|&p| bisquare_eval(p, center, radius)).sum();
            out[(k, i)] = s / n_points as f64;
        }
    }
    Ok(out)
}

/// What a basis matrix is evaluated over.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Baus,
    Footprints(&'a [Footprint]),
}

/// Basis matrix over cells or footprints; footprint rows are averages of
/// the cell rows they cover.
pub fn basis_matrix(
    basis: &BisquareBasis,
    targets: Targets<'_>,
    grid: &BauGrid,
    n_points: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let cells = bau_basis_matrix(basis, grid, n_points, seed)?;
    match targets {
        Targets::Baus => Ok(cells),
        Targets::Footprints(fps) => Ok(crate::grid::footprint_matrix(fps, grid)?.mul_dense(&cells)),
    }
}

/// Footprint-level rows from cached cell-level rows.
pub fn aggregate_rows(b: &RowSparse, cells: &DMatrix<f64>) -> DMatrix<f64> {
    b.mul_dense(cells)
}
