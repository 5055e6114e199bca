//! Comparators and scores: local space-time kriging, RMSPE, Gaussian CRPS and
//! the hold-out cross-validation harness.
//!
//! Every method predicts the noiseless footprint average of `Y_t` at a
//! held-out footprint; scores compare against the held-out observed value.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DataTerms, Engine, EngineOptions, Retain, StatePosterior};
use crate::error::{Error, Result};
use crate::estimate::{fit_filtering_sequence, fit_smoothing, EstimationResult, EstimatorConfig};
use crate::grid::{footprint_matrix, BauGrid, Coord, Observation, ObservationBatch};
use crate::linalg::cholesky;
use crate::model::{Dataset, Design};

/// `C(h, u) = σ² exp(-√(h²/φ_s² + u²/φ_t²)) + σ²_ε 1{h = u = 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpCovParams {
    pub sigma2: f64,
    pub phi_s: f64,
    pub phi_t: f64,
    pub nugget: f64,
}

impl ExpCovParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.sigma2) && ok(self.phi_s) && ok(self.phi_t) && self.nugget.is_finite() && self.nugget >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad exponential covariance {self:?}")))
        }
    }

    fn scaled_dist(&self, h: f64, u: f64) -> f64 {
        ((h / self.phi_s).powi(2) + (u / self.phi_t).powi(2)).sqrt()
    }
}

pub fn exp_cov(h: f64, u: f64, p: &ExpCovParams) -> f64 {
    let c = p.sigma2 * (-p.scaled_dist(h, u)).exp();
    if h == 0.0 && u == 0.0 {
        c + p.nugget
    } else {
        c
    }
}

pub fn rmspe(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} values", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("nothing to score".into()));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * FRAC_1_SQRT_2))
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// CRPS of `N(μ, σ²)` at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("predictive sd must be positive, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / PI.sqrt()))
}

/// One observation treated as a point at its footprint centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrigePoint {
    pub loc: Coord,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalKrigeConfig {
    /// Observations per moving window.
    pub k: usize,
    /// Nelder-Mead iterations per window fit.
    pub max_iter: u64,
    /// Random subsample used for the global pilot fit.
    pub pilot_size: usize,
    pub seed: u64,
}

impl Default for LocalKrigeConfig {
    fn default() -> Self {
        Self { k: 500, max_iter: 200, pilot_size: 500, seed: 0 }
    }
}

fn dist(a: Coord, b: Coord) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn window_cov(pts: &[KrigePoint], p: &ExpCovParams) -> DMatrix<f64> {
    let n = pts.len();
    DMatrix::from_fn(n, n, |i, j| exp_cov(dist(pts[i].loc, pts[j].loc), (pts[i].time - pts[j].time).abs(), p))
}

/// Factor of the window covariance, adding jitter when the window is
/// degenerate (e.g. collocated points without a nugget).
fn regularized_factor(mut c: DMatrix<f64>, scale: f64, warn: bool) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Ok(f) = cholesky(&c) {
        return Some(f);
    }
    let mut jitter = 1e-10 * scale;
    for _ in 0..10 {
        for i in 0..c.nrows() {
            c[(i, i)] += jitter;
        }
        if let Ok(f) = cholesky(&c) {
            if warn {
                log::warn!("degenerate kriging window regularized with jitter {jitter:e}");
            }
            return Some(f);
        }
        jitter *= 10.0;
    }
    None
}

/// Profile `-2 ln L` with the constant mean at its GLS value.
fn profile_neg2(pts: &[KrigePoint], p: &ExpCovParams) -> Option<f64> {
    let f = cholesky(&window_cov(pts, p)).ok()?;
    let n = pts.len();
    let z = DVector::from_iterator(n, pts.iter().map(|q| q.value));
    let ones = DVector::from_element(n, 1.0);
    let a = f.solve(&ones);
    let b = f.solve(&z);
    let mu = ones.dot(&b) / ones.dot(&a);
    let quad = z.dot(&b) - mu * ones.dot(&b);
    let logdet = 2.0 * f.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some(logdet + quad)
}

struct WindowLik<'a> {
    pts: &'a [KrigePoint],
    lo: [f64; 4],
    hi: [f64; 4],
}

impl WindowLik<'_> {
    fn params(x: &[f64]) -> ExpCovParams {
        ExpCovParams { sigma2: x[0].exp(), phi_s: x[1].exp(), phi_t: x[2].exp(), nugget: x[3].exp() }
    }
}

impl CostFunction for WindowLik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        if x.iter().zip(self.lo.iter().zip(&self.hi)).any(|(v, (l, h))| !(v >= l && v <= h)) {
            return Ok(f64::INFINITY);
        }
        Ok(profile_neg2(self.pts, &Self::params(x)).unwrap_or(f64::INFINITY))
    }
}

fn sample_var(pts: &[KrigePoint]) -> f64 {
    let n = pts.len() as f64;
    let m = pts.iter().map(|p| p.value).sum::<f64>() / n;
    pts.iter().map(|p| (p.value - m).powi(2)).sum::<f64>() / n
}

/// Maximum likelihood fit over log-parameters inside generous bounds set
/// by the window's spread, starting from `start`.
pub fn fit_exp_cov(pts: &[KrigePoint], start: &ExpCovParams, max_iter: u64) -> Result<ExpCovParams> {
    if pts.len() < 2 {
        return Err(Error::InvalidArgument("need at least two observations".into()));
    }
    let var = sample_var(pts);
    if !(var > 0.0) {
        return Ok(*start);
    }
    let mut span_s: f64 = 0.0;
    let (mut t_lo, mut t_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        span_s = span_s.max(dist(p.loc, pts[0].loc));
        t_lo = t_lo.min(p.time);
        t_hi = t_hi.max(p.time);
    }
    let span_s = span_s.max(1e-6);
    let span_t = (t_hi - t_lo).max(1.0);
    let lv = var.ln();
    let lo = [lv - 10.0, (1e-3 * span_s).ln(), (1e-3 * span_t).ln(), lv - 25.0];
    let hi = [lv + 5.0, (1e3 * span_s).ln(), (1e3 * span_t).ln(), lv + 3.0];
    let clamp = |v: f64, i: usize| v.clamp(lo[i] + 1e-3, hi[i] - 1e-3);
    let x0 = vec![
        clamp(start.sigma2.ln(), 0),
        clamp(start.phi_s.ln(), 1),
        clamp(start.phi_t.ln(), 2),
        clamp(start.nugget.max(1e-6 * var).ln(), 3),
    ];
    let mut simplex = vec![x0.clone()];
    for i in 0..4 {
        let mut v = x0.clone();
        v[i] += if v[i] + 0.5 < hi[i] { 0.5 } else { -0.5 };
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-6).map_err(|e| Error::Numerical {
        time: 0,
        message: e.to_string(),
    })?;
    let res = Executor::new(WindowLik { pts, lo, hi }, solver)
        .configure(|s| s.max_iters(max_iter))
        .run()
        .map_err(|e| Error::Numerical { time: 0, message: e.to_string() })?;
    let best = res.state().get_best_param().cloned().unwrap_or(x0);
    Ok(WindowLik::params(&best))
}

/// Simple kriging of the noiseless process at `(loc, time)` with the mean
/// re-estimated by GLS in the window.
pub fn simple_krige(pts: &[KrigePoint], p: &ExpCovParams, loc: Coord, time: f64) -> Result<(f64, f64)> {
    if pts.len() < 2 {
        return Err(Error::InvalidArgument("need at least two observations".into()));
    }
    let n = pts.len();
    let f = regularized_factor(window_cov(pts, p), p.sigma2 + p.nugget, true)
        .ok_or_else(|| Error::Numerical { time: 0, message: "kriging window covariance is singular".into() })?;
    let z = DVector::from_iterator(n, pts.iter().map(|q| q.value));
    let ones = DVector::from_element(n, 1.0);
    let a = f.solve(&ones);
    let mu = a.dot(&z) / a.dot(&ones);
    let c = DVector::from_iterator(
        n,
        pts.iter().map(|q| p.sigma2 * (-p.scaled_dist(dist(q.loc, loc), (q.time - time).abs())).exp()),
    );
    let w = f.solve(&c);
    let mean = mu + w.dot(&(z - ones * mu));
    let var = (p.sigma2 - w.dot(&c)).max(0.0);
    Ok((mean, var))
}

/// Moving-window kriging: `k` nearest observations under the space-time
/// metric of a global pilot fit, refitted by maximum likelihood per target.
pub struct LocalKriger {
    points: Vec<KrigePoint>,
    pilot: ExpCovParams,
    config: LocalKrigeConfig,
}

impl LocalKriger {
    pub fn new(points: Vec<KrigePoint>, config: LocalKrigeConfig) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("need at least two observations".into()));
        }
        if config.k < 2 {
            return Err(Error::InvalidArgument("window size must be at least 2".into()));
        }
        let mut sample = points.clone();
        sample.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        sample.truncate(config.pilot_size.max(2));
        // A constant sample has no scale; any positive one predicts the constant.
        let var = Some(sample_var(&sample)).filter(|&v| v > 0.0).unwrap_or(1.0);
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for p in &points {
            for (i, v) in [p.loc[0], p.loc[1], p.time].into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
        let start = ExpCovParams {
            sigma2: 0.9 * var,
            phi_s: 0.25 * extent,
            phi_t: (0.25 * (hi[2] - lo[2])).max(1.0),
            nugget: 0.1 * var,
        };
        let pilot = fit_exp_cov(&sample, &start, config.max_iter)?;
        Ok(Self { points, pilot, config })
    }

    pub fn pilot(&self) -> &ExpCovParams {
        &self.pilot
    }

    fn window_indices(&self, loc: Coord, time: f64) -> Vec<usize> {
        let mut keyed: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, q)| (self.pilot.scaled_dist(dist(q.loc, loc), (q.time - time).abs()), i))
            .collect();
        let k = self.config.k.min(keyed.len());
        if k < keyed.len() {
            keyed.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
            keyed.truncate(k);
        }
        // Fixed order so that results do not depend on the selection algorithm.
        let mut idx: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
        idx.sort_unstable();
        idx
    }

    fn gather(&self, idx: &[usize]) -> Vec<KrigePoint> {
        idx.iter().map(|&i| self.points[i]).collect()
    }

    /// Predictive mean and variance of the noiseless process.
    pub fn predict(&self, loc: Coord, time: f64) -> Result<(f64, f64)> {
        let w = self.gather(&self.window_indices(loc, time));
        let p = fit_exp_cov(&w, &self.pilot, self.config.max_iter)?;
        simple_krige(&w, &p, loc, time)
    }

    /// Same as calling [`predict`](Self::predict) per target, but targets
    /// with identical windows share one fit.
    pub fn predict_many(&self, targets: &[(Coord, f64)]) -> Result<Vec<(f64, f64)>> {
        let windows: Vec<Vec<usize>> = targets.par_iter().map(|&(loc, t)| self.window_indices(loc, t)).collect();
        let mut slot: HashMap<&[usize], usize> = HashMap::new();
        let mut distinct: Vec<&[usize]> = Vec::new();
        let which: Vec<usize> = windows
            .iter()
            .map(|w| {
                *slot.entry(w.as_slice()).or_insert_with(|| {
                    distinct.push(w.as_slice());
                    distinct.len() - 1
                })
            })
            .collect();
        let fits: Vec<ExpCovParams> = distinct
            .par_iter()
            .map(|idx| fit_exp_cov(&self.gather(idx), &self.pilot, self.config.max_iter))
            .collect::<Result<_>>()?;
        targets
            .par_iter()
            .zip(&windows)
            .zip(&which)
            .map(|((&(loc, t), idx), &j)| simple_krige(&self.gather(idx), &fits[j], loc, t))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Filtering,
    Smoothing,
}

impl Protocol {
    /// Times at which observations are held out and scored.
    pub fn eval_times(self, t_len: usize) -> std::ops::RangeInclusive<usize> {
        match self {
            Protocol::Filtering => 2..=t_len,
            Protocol::Smoothing => 1..=t_len.saturating_sub(1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Filtering => "filtering",
            Protocol::Smoothing => "smoothing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dfgp")]
    Dfgp,
    #[serde(rename = "lowrank")]
    LowRank,
    #[serde(rename = "localkrige")]
    LocalKrige,
    /// Returns the held-out value itself; a check on the harness.
    #[serde(rename = "truth")]
    Truth,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dfgp => "dfgp",
            Method::LowRank => "lowrank",
            Method::LocalKrige => "localkrige",
            Method::Truth => "truth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoldoutKind {
    Block,
    Random,
}

impl HoldoutKind {
    pub fn name(self) -> &'static str {
        match self {
            HoldoutKind::Block => "block",
            HoldoutKind::Random => "random",
        }
    }
}

/// Observations of one instrument withheld from training: everything whose
/// footprint centroid lies in a rectangle during a time range, plus a random
/// fraction of the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutPlan {
    pub block_lo: Option<Coord>,
    pub block_hi: Option<Coord>,
    /// Inclusive time range of the block.
    pub block_times: [usize; 2],
    pub random_fraction: f64,
    /// 1-based instrument whose observations are held out.
    #[serde(default = "first_instrument")]
    pub instrument: usize,
    pub seed: u64,
}

fn first_instrument() -> usize {
    1
}

impl HoldoutPlan {
    pub fn validate(&self, grid: &BauGrid, t_len: usize, n_instruments: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.random_fraction > 0.0 && self.random_fraction < 1.0) {
            return bad(format!("random fraction {} outside (0, 1)", self.random_fraction));
        }
        if self.instrument == 0 || self.instrument > n_instruments {
            return bad(format!("instrument {} outside 1..={n_instruments}", self.instrument));
        }
        match (self.block_lo, self.block_hi) {
            (None, None) => {}
            (Some(lo), Some(hi)) => {
                let (glo, ghi) = grid.bbox();
                if !(lo[0] < hi[0] && lo[1] < hi[1]) {
                    return bad("empty holdout block".into());
                }
                if lo[0] < glo[0] || lo[1] < glo[1] || hi[0] > ghi[0] || hi[1] > ghi[1] {
                    return bad("holdout block leaves the domain".into());
                }
                let [a, b] = self.block_times;
                if a == 0 || a > b || b > t_len {
                    return bad(format!("block times {a}..={b} outside 1..={t_len}"));
                }
            }
            _ => return bad("holdout block needs both corners".into()),
        }
        Ok(())
    }

    fn in_block(&self, c: Coord, t: usize) -> bool {
        match (self.block_lo, self.block_hi) {
            (Some(lo), Some(hi)) => {
                t >= self.block_times[0]
                    && t <= self.block_times[1]
                    && c[0] >= lo[0]
                    && c[0] <= hi[0]
                    && c[1] >= lo[1]
                    && c[1] <= hi[1]
            }
            _ => false,
        }
    }

    /// Training batches and held-out observations, restricted to the
    /// protocol's evaluation times.
    pub fn split(
        &self,
        batches: &[ObservationBatch],
        grid: &BauGrid,
        protocol: Protocol,
    ) -> Result<(Vec<ObservationBatch>, Vec<Holdout>)> {
        let n_instr = batches.first().map_or(1, |b| b.n_instruments());
        self.validate(grid, batches.len(), n_instr)?;
        let times = protocol.eval_times(batches.len());
        let mut training = Vec::with_capacity(batches.len());
        let mut held = Vec::new();
        for b in batches {
            let mut keep = b.clone();
            if times.contains(&b.time) {
                // One stream per time: both protocols hold out the same
                // observations at the times they share.
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(b.time as u64);
                let k = self.instrument - 1;
                keep.instruments[k].clear();
                for obs in &b.instruments[k] {
                    let draw: f64 = rng.gen();
                    let kind = if self.in_block(obs.footprint.centroid(grid), b.time) {
                        Some(HoldoutKind::Block)
                    } else if draw < self.random_fraction {
                        Some(HoldoutKind::Random)
                    } else {
                        None
                    };
                    match kind {
                        Some(kind) => held.push(Holdout { time: b.time, kind, obs: obs.clone() }),
                        None => keep.instruments[k].push(obs.clone()),
                    }
                }
            }
            training.push(keep);
        }
        Ok((training, held))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Holdout {
    pub time: usize,
    pub kind: HoldoutKind,
    pub obs: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub methods: Vec<Method>,
    pub estimator: EstimatorConfig,
    pub krige: LocalKrigeConfig,
    /// Warm-start each filtering horizon from the previous fit.
    pub warm_start: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dfgp, Method::LowRank, Method::LocalKrige],
            estimator: EstimatorConfig::default(),
            krige: LocalKrigeConfig::default(),
            warm_start: true,
        }
    }
}

/// Predictive means and standard errors of one method, aligned with
/// `CvReport::holdouts`.
#[derive(Debug, Clone)]
pub struct MethodPredictions {
    pub method: Method,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `(horizon, fit)` for the model-based methods.
    pub fits: Vec<(usize, EstimationResult)>,
}

/// One metrics line. `time = None` is the average over times and `kind =
/// None` pools block and random holdouts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: Method,
    pub protocol: Protocol,
    pub time: Option<usize>,
    pub kind: Option<HoldoutKind>,
    pub rmspe: f64,
    pub crps: f64,
    pub n_holdout: usize,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub protocol: Protocol,
    pub holdouts: Vec<Holdout>,
    pub predictions: Vec<MethodPredictions>,
    pub rows: Vec<MetricRow>,
}

impl CvReport {
    pub fn row(&self, method: Method, time: Option<usize>, kind: Option<HoldoutKind>) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.time == time && r.kind == kind)
    }
}

/// Mean and standard error of the footprint averages of `Y_t`.
pub fn footprint_predictions(
    engine: &Engine,
    grid: &BauGrid,
    t: usize,
    post: &StatePosterior,
    terms: &DataTerms,
    obs: &[&Observation],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = footprint_matrix(obs.iter().map(|o| &o.footprint), grid)?;
    let (mut mean, var) = engine.row_moments(t, post, terms, &rows)?;
    let design = &engine.dataset().design;
    let trend = &design.x_bau * &engine.params().beta[t - 1];
    for (j, m) in mean.iter_mut().enumerate() {
        let (c, w) = rows.row(j);
        *m += c.iter().zip(w).map(|(&i, &w)| w * trend[i]).sum::<f64>();
    }
    Ok((mean, var.into_iter().map(|v| v.max(0.0).sqrt()).collect()))
}

fn model_predictions(
    data: &Dataset,
    grid: &BauGrid,
    holdouts: &[Holdout],
    protocol: Protocol,
    config: &CvConfig,
    lowrank_only: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<(usize, EstimationResult)>)> {
    let est = EstimatorConfig { lowrank_only, ..config.estimator.clone() };
    let opts = EngineOptions { lowrank_only, retain: Retain::Full };
    let mut mean = vec![f64::NAN; holdouts.len()];
    let mut stderr = vec![f64::NAN; holdouts.len()];
    let at = |t: usize| -> (Vec<usize>, Vec<&Observation>) {
        holdouts.iter().enumerate().filter(|(_, h)| h.time == t).map(|(i, h)| (i, &h.obs)).unzip()
    };
    let mut put = |idx: &[usize], m: Vec<f64>, s: Vec<f64>| {
        for ((&i, m), s) in idx.iter().zip(m).zip(s) {
            mean[i] = m;
            stderr[i] = s;
        }
    };
    let fits = match protocol {
        Protocol::Filtering => {
            let fits = fit_filtering_sequence(data, &est, config.warm_start)?;
            for (u, fit) in &fits {
                let (idx, obs) = at(*u);
                if idx.is_empty() {
                    continue;
                }
                let sub = data.horizon(*u);
                let mut engine = Engine::new(&sub, &fit.params, opts)?;
                let f = engine.filter()?;
                let (m, s) = footprint_predictions(&engine, grid, *u, &f.filtered[*u], &f.terms[*u - 1], &obs)?;
                put(&idx, m, s);
            }
            fits
        }
        Protocol::Smoothing => {
            let fit = fit_smoothing(data, &est)?;
            let mut engine = Engine::new(data, &fit.params, opts)?;
            let f = engine.filter()?;
            let s = engine.smooth(&f)?;
            for t in protocol.eval_times(data.t_len()) {
                let (idx, obs) = at(t);
                if idx.is_empty() {
                    continue;
                }
                let (m, sd) = footprint_predictions(&engine, grid, t, &s.smoothed[t], &f.terms[t - 1], &obs)?;
                put(&idx, m, sd);
            }
            vec![(data.t_len(), fit)]
        }
    };
    Ok((mean, stderr, fits))
}

fn score(protocol: Protocol, method: Method, holdouts: &[Holdout], mean: &[f64], sd: &[f64]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let t_max = holdouts.iter().map(|h| h.time).max().unwrap_or(0);
    for kind in [None, Some(HoldoutKind::Block), Some(HoldoutKind::Random)] {
        let mut per_time = Vec::new();
        for t in 1..=t_max {
            let idx: Vec<usize> =
                (0..holdouts.len()).filter(|&i| holdouts[i].time == t && kind.is_none_or(|k| holdouts[i].kind == k)).collect();
            if idx.is_empty() {
                continue;
            }
            let p: Vec<f64> = idx.iter().map(|&i| mean[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| holdouts[i].obs.value).collect();
            let mut crps = 0.0;
            for &i in &idx {
                crps += crps_gaussian(mean[i], sd[i].max(1e-12), holdouts[i].obs.value)?;
            }
            let row = MetricRow {
                method,
                protocol,
                time: Some(t),
                kind,
                rmspe: rmspe(&p, &y)?,
                crps: crps / idx.len() as f64,
                n_holdout: idx.len(),
            };
            per_time.push(row.clone());
            rows.push(row);
        }
        if !per_time.is_empty() {
            let m = per_time.len() as f64;
            rows.push(MetricRow {
                method,
                protocol,
                time: None,
                kind,
                rmspe: per_time.iter().map(|r| r.rmspe).sum::<f64>() / m,
                crps: per_time.iter().map(|r| r.crps).sum::<f64>() / m,
                n_holdout: per_time.iter().map(|r| r.n_holdout).sum(),
            });
        }
    }
    Ok(rows)
}

/// Hold out, fit each method on the training data only, and score.
pub fn run_cv(
    design: Arc<Design>,
    grid: &BauGrid,
    batches: &[ObservationBatch],
    plan: &HoldoutPlan,
    protocol: Protocol,
    config: &CvConfig,
) -> Result<CvReport> {
    let (training, holdouts) = plan.split(batches, grid, protocol)?;
    let data = Dataset::assemble(design, grid, &training)?;
    let mut predictions = Vec::new();
    let mut rows = Vec::new();
    for &method in &config.methods {
        let (mean, stderr, fits) = match method {
            Method::Dfgp | Method::LowRank => {
                model_predictions(&data, grid, &holdouts, protocol, config, method == Method::LowRank)?
            }
            Method::LocalKrige => {
                let points = training
                    .iter()
                    .flat_map(|b| b.iter().map(move |o| (b.time, o)))
                    .map(|(t, o)| KrigePoint { loc: o.footprint.centroid(grid), time: t as f64, value: o.value })
                    .collect();
                let kriger = LocalKriger::new(points, config.krige)?;
                let targets: Vec<(Coord, f64)> =
                    holdouts.iter().map(|h| (h.obs.footprint.centroid(grid), h.time as f64)).collect();
                let (m, v): (Vec<f64>, Vec<f64>) = kriger.predict_many(&targets)?.into_iter().unzip();
                (m, v.into_iter().map(f64::sqrt).collect(), Vec::new())
            }
            Method::Truth => {
                (holdouts.iter().map(|h| h.obs.value).collect(), vec![1e-12; holdouts.len()], Vec::new())
            }
        };
        rows.extend(score(protocol, method, &holdouts, &mean, &stderr)?);
        predictions.push(MethodPredictions { method, mean, stderr, fits });
    }
    Ok(CvReport { protocol, holdouts, predictions, rows })
}
