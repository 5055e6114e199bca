//! The run configuration file (TOML). Relative paths are taken from the
//! directory holding the file.

use std::path::{Path, PathBuf};

use dfgp::car::Neighborhood;
use dfgp::estimate::EstimatorConfig;
use dfgp::eval::{HoldoutPlan, LocalKrigeConfig, Method, Protocol};
use dfgp::grid::DEFAULT_MC_POINTS;
use dfgp::basis::DEFAULT_RADIUS_FACTOR;
use dfgp::synth::ScenarioConfig;
use dfgp::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "unit")]
    pub cell_size: f64,
    #[serde(default)]
    pub origin: [f64; 2],
    /// CSV of active cells; all cells are active without it.
    pub mask: Option<PathBuf>,
    #[serde(default = "rook")]
    pub neighborhood: Neighborhood,
}

fn unit() -> f64 {
    1.0
}

fn rook() -> Neighborhood {
    Neighborhood::Rook
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    /// Functions per resolution, laid out over the grid's bounding box.
    pub counts: Vec<usize>,
    pub radius_factor: f64,
    /// Explicit `center_x,center_y,radius` CSV; overrides `counts`.
    pub centers: Option<PathBuf>,
    pub mc_points: usize,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self { counts: vec![9], radius_factor: DEFAULT_RADIUS_FACTOR, centers: None, mc_points: DEFAULT_MC_POINTS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub observations: PathBuf,
    pub footprints: PathBuf,
    pub t_len: usize,
    pub n_instruments: usize,
    /// Fixed parameters; when given, `filter` and `smooth` skip estimation.
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub methods: Vec<Method>,
    pub krige: LocalKrigeConfig,
    pub warm_start: bool,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { methods: vec![Method::Dfgp, Method::LowRank, Method::LocalKrige], krige: LocalKrigeConfig::default(), warm_start: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every seed below when set.
    pub seed: Option<u64>,
    pub protocol: Option<Protocol>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub lowrank_only: bool,
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub basis: BasisSection,
    pub data: Option<DataSection>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub holdout: Option<HoldoutPlan>,
    #[serde(default)]
    pub cv: CvSection,
    pub scenario: Option<ScenarioConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads the file and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(g) = &mut cfg.grid {
            g.mask.as_mut().map(fix);
        }
        cfg.basis.centers.as_mut().map(fix);
        if let Some(d) = &mut cfg.data {
            fix(&mut d.observations);
            fix(&mut d.footprints);
            d.params.as_mut().map(fix);
        }
        cfg.out.as_mut().map(fix);
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.estimator.seed = seed;
        self.cv.krige.seed = seed;
        if let Some(h) = &mut self.holdout {
            h.seed = seed;
        }
        if let Some(s) = &mut self.scenario {
            s.seed = seed;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.estimator.seed)
    }
}
