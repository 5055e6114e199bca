//! Synthetic truth fields and two-instrument observation sets.
//!
//! The truth is a draw from the model itself on a regular grid. A fine
//! instrument sees single cells, a coarse one sees square blocks; both lose
//! vertical swath bands that drift with time, plus random drops.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{layout_multires, DEFAULT_RADIUS_FACTOR};
use crate::car::{CarParams, Neighborhood};
use crate::error::{Error, Result};
use crate::estimate::{prior_draw, StateDraw};
use crate::grid::{latitude_covariates, BauGrid, Footprint, Observation, ObservationBatch, DEFAULT_MC_POINTS};
use crate::model::{DfgpParams, Dataset, Design, DESIGN_SEED};

/// Time-constant true parameters; matrices are multiples of the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    pub beta: Vec<f64>,
    pub h: f64,
    pub u: f64,
    pub k0: f64,
    pub gamma: f64,
    pub tau2: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self { beta: vec![1.0, 0.5, -1.0], h: 0.8, u: 0.3, k0: 1.0, gamma: 0.9, tau2: 1.0 }
    }
}

/// Swath gaps: cells with `(col + shift·t) mod period < width` are not seen
/// at time `t`. A zero width or period disables them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Swath {
    pub width: usize,
    pub period: usize,
    pub shift: usize,
}

impl Swath {
    pub fn hides(&self, col: usize, t: usize) -> bool {
        self.width > 0 && self.period > 0 && (col + self.shift * t) % self.period < self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentSpec {
    /// Side of the square footprint, in cells.
    pub block: usize,
    pub sigma2: f64,
    /// Relative error variance `v`, the same for every footprint.
    #[serde(default = "one")]
    pub var_factor: f64,
    #[serde(default)]
    pub swath: Swath,
    #[serde(default)]
    pub drop_rate: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    pub t_len: usize,
    /// Basis functions per resolution.
    pub basis_counts: Vec<usize>,
    pub radius_factor: f64,
    pub neighborhood: Neighborhood,
    pub truth: TruthSpec,
    pub instruments: Vec<InstrumentSpec>,
    pub mc_points: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            nx: 40,
            ny: 40,
            cell_size: 1.0,
            t_len: 8,
            basis_counts: vec![9],
            radius_factor: DEFAULT_RADIUS_FACTOR,
            neighborhood: Neighborhood::Rook,
            truth: TruthSpec::default(),
            instruments: vec![
                InstrumentSpec {
                    block: 1,
                    sigma2: 0.1,
                    var_factor: 1.0,
                    swath: Swath { width: 8, period: 20, shift: 7 },
                    drop_rate: 0.3,
                },
                InstrumentSpec {
                    block: 4,
                    sigma2: 0.2,
                    var_factor: 1.0,
                    swath: Swath { width: 8, period: 40, shift: 13 },
                    drop_rate: 0.1,
                },
            ],
            mc_points: DEFAULT_MC_POINTS,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.nx == 0 || self.ny == 0 || !(self.cell_size > 0.0) {
            return bad("empty grid".into());
        }
        if self.t_len == 0 {
            return bad("need at least one time step".into());
        }
        if self.instruments.is_empty() {
            return bad("need at least one instrument".into());
        }
        if self.truth.beta.len() != 3 {
            return bad(format!("beta needs 3 entries for [1, lat, lat²], got {}", self.truth.beta.len()));
        }
        let t = &self.truth;
        if ![t.h, t.u, t.k0].iter().all(|v| v.is_finite()) || t.u < 0.0 || t.k0 < 0.0 {
            return bad("need finite h and nonnegative u, k0".into());
        }
        for (k, ins) in self.instruments.iter().enumerate() {
            if ins.block == 0 || self.nx % ins.block != 0 || self.ny % ins.block != 0 {
                return bad(format!("instrument {}: block {} does not tile {}×{}", k + 1, ins.block, self.nx, self.ny));
            }
            if !(0.0..1.0).contains(&ins.drop_rate) {
                return bad(format!("instrument {}: drop rate {} outside [0, 1)", k + 1, ins.drop_rate));
            }
            if !(ins.sigma2 >= 0.0) || !(ins.var_factor > 0.0) {
                return bad(format!("instrument {}: need sigma2 >= 0 and v > 0", k + 1));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BauGrid> {
        BauGrid::new(self.nx, self.ny, self.cell_size, [0.0, 0.0])
    }

    pub fn design(&self, grid: &BauGrid) -> Result<Design> {
        let (lo, hi) = grid.bbox();
        let basis = layout_multires(lo, hi, &self.basis_counts, self.radius_factor)?;
        Design::on_grid(
            grid,
            &basis,
            &latitude_covariates(grid),
            self.neighborhood,
            self.instruments.len(),
            self.mc_points,
            DESIGN_SEED,
        )
    }

    pub fn true_params(&self, r: usize) -> DfgpParams {
        let t = &self.truth;
        let eye = DMatrix::<f64>::identity(r, r);
        DfgpParams::constant(
            self.t_len,
            DVector::from_vec(t.beta.clone()),
            &eye * t.h,
            &eye * t.u,
            &eye * t.k0,
            CarParams::new(t.gamma, t.tau2),
            self.instruments.iter().map(|i| i.sigma2).collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Truth {
    pub grid: BauGrid,
    pub design: Arc<Design>,
    pub params: DfgpParams,
    /// Cell-level `Y_t`, `t = 1..T` at index `t - 1`.
    pub y: Vec<DVector<f64>>,
    pub latent: StateDraw,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn simulate_truth(config: &ScenarioConfig) -> Result<Truth> {
    config.validate()?;
    let grid = config.grid()?;
    let design = Arc::new(config.design(&grid)?);
    // Not `DfgpParams::validate`: degenerate truths (zero K0 or U) are fine
    // for simulation.
    let params = config.true_params(design.r());
    let latent = prior_draw(&design, &params, false, &mut rng_for(config.seed, 1))?;
    let y = (1..=config.t_len)
        .map(|t| {
            let mut y = &design.x_bau * &params.beta[t - 1] + &design.s_bau * &latent.eta[t];
            for (v, x) in y.iter_mut().zip(&latent.xi[t - 1]) {
                *v += x;
            }
            y
        })
        .collect();
    Ok(Truth { grid, design, params, y, latent })
}

/// Footprint observations of the truth. Blocks without an active cell are
/// skipped; the swath test uses the block's centre column.
pub fn observe(truth: &Truth, config: &ScenarioConfig) -> Result<Vec<ObservationBatch>> {
    let grid = &truth.grid;
    let mut rng = rng_for(config.seed, 2);
    let mut next_id = 0;
    let mut batches = Vec::with_capacity(config.t_len);
    for t in 1..=config.t_len {
        let y = &truth.y[t - 1];
        let mut batch = ObservationBatch::new(t, config.instruments.len());
        for (k, ins) in config.instruments.iter().enumerate() {
            let b = ins.block;
            for br in (0..grid.ny()).step_by(b) {
                for bc in (0..grid.nx()).step_by(b) {
                    let cells: Vec<usize> = (br..br + b)
                        .flat_map(|r| (bc..bc + b).map(move |c| (r, c)))
                        .map(|(r, c)| grid.index(r, c))
                        .filter(|&i| grid.is_active(i))
                        .collect();
                    if cells.is_empty() {
                        continue;
                    }
                    // Draw every random number whether or not the footprint
                    // survives, so instruments stay independent of each other.
                    let keep: f64 = rng.gen();
                    let z: f64 = rng.sample(StandardNormal);
                    if ins.swath.hides(bc + b / 2, t) || keep < ins.drop_rate {
                        continue;
                    }
                    let mean = cells.iter().map(|&i| y[grid.active_index(i).unwrap()]).sum::<f64>() / cells.len() as f64;
                    let value = mean + (ins.sigma2 * ins.var_factor).sqrt() * z;
                    batch.push(Observation {
                        id: next_id,
                        footprint: Footprint::new(cells, k + 1, t)?,
                        value,
                        var_factor: ins.var_factor,
                    })?;
                    next_id += 1;
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Truth, observations and the assembled data set in one go.
pub fn generate(config: &ScenarioConfig) -> Result<(Truth, Vec<ObservationBatch>, Dataset)> {
    let truth = simulate_truth(config)?;
    let batches = observe(&truth, config)?;
    let data = Dataset::assemble(truth.design.clone(), &truth.grid, &batches)?;
    Ok((truth, batches, data))
}
