use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dfgp::basis::layout_multires;
use dfgp::dynamics::{Engine, EngineOptions, PredictionField, Retain, StatePosterior};
use dfgp::estimate::{fit_filtering_sequence, fit_smoothing, EstimationResult};
use dfgp::eval::{run_cv, CvConfig, CvReport, HoldoutPlan, Protocol};
use dfgp::grid::{latitude_covariates, BauGrid, ObservationBatch};
use dfgp::model::{Dataset, Design, DfgpParams, DESIGN_SEED};
use dfgp::synth::{generate, ScenarioConfig};
use dfgp::{io, Error, Result};

use crate::config::{BasisSection, DataSection, GridSection, RunConfig};
use crate::manifest;

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lowrank_only: bool,
}

struct Setup {
    cfg: RunConfig,
    /// Bytes hashed into the manifest.
    raw: Vec<u8>,
    out: PathBuf,
    lowrank_only: bool,
    written: Vec<String>,
}

impl Setup {
    fn load(path: Option<&Path>, opts: &Overrides) -> Result<Self> {
        let path = path.ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
        let raw = std::fs::read(path)?;
        Self::finish(RunConfig::load(path)?, raw, opts)
    }

    fn finish(mut cfg: RunConfig, raw: Vec<u8>, opts: &Overrides) -> Result<Self> {
        if let Some(s) = opts.seed.or(cfg.seed) {
            cfg.apply_seed(s);
        }
        let lowrank_only = opts.lowrank_only || cfg.lowrank_only || cfg.estimator.lowrank_only;
        cfg.estimator.lowrank_only = lowrank_only;
        let out = opts
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .ok_or_else(|| Error::InvalidArgument("no output directory: pass --out or set `out`".into()))?;
        std::fs::create_dir_all(&out)?;
        Ok(Self { cfg, raw, out, lowrank_only, written: Vec::new() })
    }

    fn path(&mut self, name: impl Into<String>) -> PathBuf {
        let name = name.into();
        let p = self.out.join(&name);
        self.written.push(name);
        p
    }

    fn close(self, command: &str) -> Result<()> {
        manifest::write(&self.out, command, self.cfg.seed(), &self.raw, &self.written)
    }
}

struct Problem {
    grid: BauGrid,
    batches: Vec<ObservationBatch>,
    data: Dataset,
    fixed: Option<DfgpParams>,
}

fn build_grid(g: &GridSection) -> Result<BauGrid> {
    let grid = BauGrid::new(g.nx, g.ny, g.cell_size, g.origin)?;
    match &g.mask {
        Some(m) => grid.with_mask(io::read_mask(m, g.nx * g.ny)?),
        None => Ok(grid),
    }
}

fn build_design(grid: &BauGrid, basis: &BasisSection, g: &GridSection, n_instruments: usize) -> Result<Design> {
    let b = match &basis.centers {
        Some(p) => io::read_basis(p)?,
        None => {
            let (lo, hi) = grid.bbox();
            layout_multires(lo, hi, &basis.counts, basis.radius_factor)?
        }
    };
    Design::on_grid(grid, &b, &latitude_covariates(grid), g.neighborhood, n_instruments, basis.mc_points, DESIGN_SEED)
}

fn require<'a, T>(v: &'a Option<T>, section: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::InvalidArgument(format!("the config has no [{section}] section")))
}

fn problem(cfg: &RunConfig) -> Result<Problem> {
    let g = require(&cfg.grid, "grid")?;
    let d: &DataSection = require(&cfg.data, "data")?;
    for p in [&d.observations, &d.footprints].into_iter().chain(&d.params) {
        if !p.exists() {
            return Err(Error::InvalidArgument(format!("{} does not exist", p.display())));
        }
    }
    let grid = build_grid(g)?;
    let design = Arc::new(build_design(&grid, &cfg.basis, g, d.n_instruments)?);
    let batches = io::read_observations(&d.observations, &d.footprints, &grid, d.t_len, d.n_instruments)?;
    let data = Dataset::assemble(design, &grid, &batches)?;
    let fixed = d.params.as_deref().map(io::read_params).transpose()?;
    if let Some(p) = &fixed {
        p.validate(&data.design, d.t_len)?;
    }
    log::info!("{} observations over {} steps, N={}, r={}", data.n_obs(), d.t_len, data.design.n(), data.design.r());
    Ok(Problem { grid, batches, data, fixed })
}

fn report_fit(entries: &mut Vec<(String, String)>, prefix: &str, fit: &EstimationResult) {
    entries.push((format!("{prefix}status"), format!("{:?}", fit.status).to_lowercase()));
    entries.push((format!("{prefix}iterations"), fit.trace.len().to_string()));
    entries.push((format!("{prefix}neg2loglik"), fit.neg2loglik.to_string()));
}

fn base_report(command: &str, s: &Setup, data: &Dataset) -> Vec<(String, String)> {
    vec![
        ("command".into(), command.into()),
        ("seed".into(), s.cfg.seed().to_string()),
        ("lowrank_only".into(), s.lowrank_only.to_string()),
        ("n_cells".into(), data.design.n().to_string()),
        ("rank".into(), data.design.r().to_string()),
        ("t_len".into(), data.t_len().to_string()),
        ("n_obs".into(), data.n_obs().to_string()),
    ]
}

pub fn simulate(path: Option<&Path>, opts: &Overrides) -> Result<()> {
    let (mut cfg, raw) = match path {
        Some(p) => (RunConfig::load(p)?, std::fs::read(p)?),
        None => {
            let cfg = RunConfig { scenario: Some(ScenarioConfig::default()), ..Default::default() };
            let raw = cfg.to_toml()?.into_bytes();
            (cfg, raw)
        }
    };
    if cfg.seed.is_none() {
        cfg.seed = cfg.scenario.as_ref().map(|sc| sc.seed);
    }
    let mut s = Setup::finish(cfg, raw, opts)?;
    let scenario = s.cfg.scenario.clone().unwrap_or_default();
    let (truth, batches, _) = generate(&scenario)?;
    let (obs, fp) = (s.path("observations.csv"), s.path("footprints.csv"));
    io::write_observations(&obs, &fp, &batches)?;
    io::write_truth(&s.path("truth.csv"), &truth)?;
    io::write_latent(&s.path("latent.csv"), &truth)?;
    io::write_params(&s.path("params_true.csv"), &truth.params)?;

    // A config that fits the generated data, with a central holdout block.
    let (nx, ny, c) = (scenario.nx as f64, scenario.ny as f64, scenario.cell_size);
    let follow = RunConfig {
        seed: Some(scenario.seed),
        grid: Some(GridSection {
            nx: scenario.nx,
            ny: scenario.ny,
            cell_size: c,
            origin: [0.0, 0.0],
            mask: None,
            neighborhood: scenario.neighborhood,
        }),
        basis: BasisSection {
            counts: scenario.basis_counts.clone(),
            radius_factor: scenario.radius_factor,
            centers: None,
            mc_points: scenario.mc_points,
        },
        data: Some(DataSection {
            observations: "observations.csv".into(),
            footprints: "footprints.csv".into(),
            t_len: scenario.t_len,
            n_instruments: scenario.instruments.len(),
            params: None,
        }),
        holdout: Some(HoldoutPlan {
            block_lo: Some([(0.35 * nx).round() * c, (0.35 * ny).round() * c]),
            block_hi: Some([(0.65 * nx).round() * c, (0.65 * ny).round() * c]),
            block_times: [1, scenario.t_len],
            random_fraction: 0.1,
            instrument: 1,
            seed: scenario.seed,
        }),
        ..Default::default()
    };
    std::fs::write(s.path("run.toml"), follow.to_toml()?)?;
    s.close("simulate")
}

pub fn fit(path: Option<&Path>, opts: &Overrides) -> Result<()> {
    let mut s = Setup::load(path, opts)?;
    let pr = problem(&s.cfg)?;
    let fit = fit_smoothing(&pr.data, &s.cfg.estimator)?;
    io::write_params(&s.path("params.csv"), &fit.params)?;
    io::write_trace(&s.path("trace.csv"), &fit.trace)?;
    let mut report = base_report("fit", &s, &pr.data);
    report_fit(&mut report, "", &fit);
    io::write_report(&s.path("report.txt"), &report)?;
    s.close("fit")
}

fn engine_options(lowrank_only: bool) -> EngineOptions {
    EngineOptions { lowrank_only, retain: Retain::Compact }
}

fn write_fields(s: &mut Setup, stem: &str, fields: &[PredictionField]) -> Result<()> {
    for f in fields {
        io::write_predictions(&s.path(format!("{stem}_t{}.csv", f.time)), std::slice::from_ref(f))?;
    }
    Ok(())
}

pub fn filter(path: Option<&Path>, opts: &Overrides) -> Result<()> {
    let mut s = Setup::load(path, opts)?;
    let pr = problem(&s.cfg)?;
    let t_len = pr.data.t_len();
    let cells: Vec<usize> = (0..pr.data.design.n()).collect();
    let mut report = base_report("filter", &s, &pr.data);
    let mut fields = Vec::with_capacity(t_len);
    let mut states: Vec<StatePosterior> = Vec::with_capacity(t_len + 1);

    if let Some(params) = &pr.fixed {
        let mut engine = Engine::new(&pr.data, params, engine_options(s.lowrank_only))?;
        let f = engine.filter()?;
        for t in 1..=t_len {
            fields.push(engine.predict_filtered(&f, t, &cells)?);
        }
        states = f.filtered;
        report.push(("estimation".into(), "fixed".into()));
    } else {
        // Horizon u predicts time u; time 1 comes from the first horizon.
        let fits = fit_filtering_sequence(&pr.data, &s.cfg.estimator, s.cfg.cv.warm_start)?;
        for (u, fit) in &fits {
            let mut engine = Engine::new(&pr.data.horizon(*u), &fit.params, engine_options(s.lowrank_only))?;
            let f = engine.filter()?;
            if *u == 2 {
                fields.push(engine.predict_filtered(&f, 1, &cells)?);
                states.extend(f.filtered[..2].iter().cloned());
            }
            fields.push(engine.predict_filtered(&f, *u, &cells)?);
            states.push(f.filtered[*u].clone());
            io::write_params(&s.path(format!("params_h{u}.csv")), &fit.params)?;
            report_fit(&mut report, &format!("h{u}_"), fit);
        }
        report.push(("estimation".into(), format!("{} horizon fits", fits.len())));
    }
    write_fields(&mut s, "filtered", &fields)?;
    io::write_checkpoint(&s.path("states_filtered.bin"), &states)?;
    io::write_report(&s.path("report.txt"), &report)?;
    s.close("filter")
}

pub fn smooth(path: Option<&Path>, opts: &Overrides) -> Result<()> {
    let mut s = Setup::load(path, opts)?;
    let pr = problem(&s.cfg)?;
    let mut report = base_report("smooth", &s, &pr.data);
    let params = match &pr.fixed {
        Some(p) => {
            report.push(("estimation".into(), "fixed".into()));
            p.clone()
        }
        None => {
            let fit = fit_smoothing(&pr.data, &s.cfg.estimator)?;
            io::write_params(&s.path("params.csv"), &fit.params)?;
            io::write_trace(&s.path("trace.csv"), &fit.trace)?;
            report.push(("estimation".into(), "1 fit".into()));
            report_fit(&mut report, "", &fit);
            fit.params
        }
    };
    let cells: Vec<usize> = (0..pr.data.design.n()).collect();
    let mut engine = Engine::new(&pr.data, &params, engine_options(s.lowrank_only))?;
    let f = engine.filter()?;
    let sm = engine.smooth(&f)?;
    let fields = (1..=pr.data.t_len()).map(|t| engine.predict_smoothed(&f, &sm, t, &cells)).collect::<Result<Vec<_>>>()?;
    write_fields(&mut s, "smoothed", &fields)?;
    io::write_checkpoint(&s.path("states_smoothed.bin"), &sm.smoothed)?;
    io::write_report(&s.path("report.txt"), &report)?;
    s.close("smooth")
}

/// Per-holdout predictions of every method, for plotting.
fn write_cv_predictions(path: &Path, rep: &CvReport) -> Result<()> {
    let mut text = String::from("time,footprint_id,kind,value,method,mean,stderr\n");
    for m in &rep.predictions {
        for (i, h) in rep.holdouts.iter().enumerate() {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{}",
                h.time,
                h.obs.id,
                h.kind.name(),
                h.obs.value,
                m.method.name(),
                m.mean[i],
                m.stderr[i]
            );
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cv(path: Option<&Path>, opts: &Overrides) -> Result<()> {
    let mut s = Setup::load(path, opts)?;
    if opts.lowrank_only {
        log::warn!("--lowrank-only has no effect on cv; list the methods in [cv] instead");
    }
    s.cfg.estimator.lowrank_only = false;
    let pr = problem(&s.cfg)?;
    let plan = require(&s.cfg.holdout, "holdout")?.clone();
    let d = require(&s.cfg.data, "data")?;
    plan.validate(&pr.grid, d.t_len, d.n_instruments)?;
    let config = CvConfig {
        methods: s.cfg.cv.methods.clone(),
        estimator: s.cfg.estimator.clone(),
        krige: s.cfg.cv.krige,
        warm_start: s.cfg.cv.warm_start,
    };
    let protocols = match s.cfg.protocol {
        Some(p) => vec![p],
        None => vec![Protocol::Filtering, Protocol::Smoothing],
    };
    let mut report = base_report("cv", &s, &pr.data);
    let mut rows = Vec::new();
    for protocol in protocols {
        let rep = run_cv(Arc::clone(&pr.data.design), &pr.grid, &pr.batches, &plan, protocol, &config)?;
        let name = protocol.name();
        io::write_holdouts(&s.path(format!("holdouts_{name}.csv")), &rep.holdouts)?;
        write_cv_predictions(&s.path(format!("predictions_{name}.csv")), &rep)?;
        report.push((format!("{name}_holdouts"), rep.holdouts.len().to_string()));
        for m in &rep.predictions {
            for (u, fit) in &m.fits {
                report_fit(&mut report, &format!("{name}_{}_h{u}_", m.method.name()), fit);
            }
        }
        rows.extend(rep.rows);
    }
    io::write_metrics(&s.path("metrics.csv"), &rows)?;
    io::write_report(&s.path("report.txt"), &report)?;
    s.close("cv")
}
