//! Parameter estimation: exact EM for small grids, stochastic EM otherwise.
//!
//! Each iteration runs one filter/smoother pass at the current parameters and
//! collects the sufficient statistics of the complete-data likelihood:
//!
//! ```text
//! K_t = P_{t|u} + η_{t|u}η_{t|u}'              t = 0..u
//! L_t = P_{t,t-1|u} + η_{t|u}η_{t-1|u}'        t = 1..u
//! a_t = E ξ_t' diag(e) ξ_t,  b_t = E ξ_t' E ξ_t
//! ō_j = E b_j'(Sη_t + ξ_t),  var_j = var b_j'(Sη_t + ξ_t)
//! ```
//!
//! The stochastic variant keeps the exact `η` moments and replaces the
//! fine-scale and measurement statistics by one joint conditional draw.
//!
//! For the CAR block, `ξ'Qξ = (a - γb)/τ²` and
//! `ln|Q| = -N ln τ² + Σ ln e_i + ln|I - γW|`, so `τ² = (a - γb)/N` and `γ`
//! minimizes the profile `N ln(a - γb) - ln|I - γW|`.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::brent::BrentOpt;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::car::{sample_car, CarParams, CarStructure};
use crate::dynamics::{Engine, EngineOptions, FilterOutput, Retain, SmootherOutput};
use crate::error::{Error, Result};
use crate::likelihood::neg2_loglik_from;
use crate::linalg::{cholesky, eigen_floor, logdet_spd, psd_factor, right_solve_spd, spd_inverse, symmetrized, CompensatedSum};
use crate::model::{Dataset, Design, DfgpParams};

/// Nugget variances are kept at least this large so the next E-step stays
/// well posed.
pub const NUGGET_FLOOR: f64 = 1e-12;

/// Eigenvalues of the `K_0` and `U_t` updates are kept at least this
/// fraction of the largest one. EM drifts toward singular `K_0` on short
/// series, and without a floor the next E-step fails to factor it.
pub const COV_FLOOR_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmMode {
    /// Closed-form conditional expectations (dense-free but capped in `N`).
    Exact,
    /// One conditional simulation per iteration for the fine-scale terms.
    Stochastic,
}

/// Bounded search for `γ`: a coarse grid, then Brent's method around the
/// best grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaSearch {
    pub grid_points: usize,
    pub tol: f64,
    pub max_iter: u64,
}

impl Default for GammaSearch {
    fn default() -> Self {
        Self { grid_points: 32, tol: 1e-10, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mode: EmMode,
    pub max_iter: usize,
    /// Relative change of `-2 ln L` counted as "no change".
    pub rel_tol: f64,
    /// Consecutive iterations below `rel_tol` needed to stop.
    pub patience: usize,
    /// Stop when `‖Δθ‖ / max(1, ‖θ‖)` falls below this.
    pub param_tol: f64,
    /// Pool the nugget variance of each instrument over time.
    pub time_invariant_nugget: bool,
    /// Last time step of each block sharing `H` and `U`; empty means one
    /// block over all steps.
    pub blocks: Vec<usize>,
    pub gamma: GammaSearch,
    /// Largest `N` accepted in exact mode.
    pub exact_cap: usize,
    /// Fraction of final stochastic iterates averaged into the estimate.
    pub average_frac: f64,
    /// Conditional draws per stochastic E-step.
    pub draws: usize,
    pub seed: u64,
    pub lowrank_only: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: EmMode::Stochastic,
            max_iter: 100,
            rel_tol: 1e-6,
            patience: 5,
            param_tol: 1e-5,
            time_invariant_nugget: true,
            blocks: Vec::new(),
            gamma: GammaSearch::default(),
            exact_cap: 256,
            average_frac: 0.2,
            draws: 1,
            seed: 0,
            lowrank_only: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, t_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.max_iter == 0 || self.patience == 0 || self.draws == 0 {
            return bad("max_iter, patience and draws must be positive".into());
        }
        if !(self.rel_tol > 0.0 && self.param_tol > 0.0) {
            return bad("convergence thresholds must be positive".into());
        }
        if !(self.average_frac > 0.0 && self.average_frac <= 1.0) {
            return bad(format!("average_frac {} outside (0, 1]", self.average_frac));
        }
        if self.gamma.grid_points < 3 {
            return bad("gamma search needs at least 3 grid points".into());
        }
        self.block_ranges(t_len).map(|_| ())
    }

    /// `(first, last)` time step of each block.
    pub fn block_ranges(&self, t_len: usize) -> Result<Vec<(usize, usize)>> {
        if self.blocks.is_empty() {
            return Ok(vec![(1, t_len)]);
        }
        if self.blocks.windows(2).any(|w| w[0] >= w[1]) || self.blocks[0] == 0 || *self.blocks.last().unwrap() != t_len {
            return Err(Error::InvalidArgument(format!(
                "block ends {:?} must increase strictly and end at {t_len}",
                self.blocks
            )));
        }
        let mut start = 1;
        Ok(self
            .blocks
            .iter()
            .map(|&end| {
                let r = (start, end);
                start = end + 1;
                r
            })
            .collect())
    }
}

/// Expected (or sampled) complete-data statistics of one E-step.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `K_t` for `t = 0..u`.
    pub k: Vec<DMatrix<f64>>,
    /// `L_t` for `t = 1..u` at index `t - 1`.
    pub l: Vec<DMatrix<f64>>,
    /// `ξ_t' diag(e) ξ_t` for `t = 1..u` (empty without the fine scale).
    pub car_diag: Vec<f64>,
    /// `ξ_t' E ξ_t`.
    pub car_adj: Vec<f64>,
    /// Per observation, `E b_j'(Sη_t + ξ_t)`.
    pub mean_o: Vec<DVector<f64>>,
    /// Per observation, `var b_j'(Sη_t + ξ_t)` (zero for a sampled state).
    pub var_o: Vec<DVector<f64>>,
    /// Smoothed means `η_{t|u}`, `t = 0..u`.
    pub eta: Vec<DVector<f64>>,
    /// Marginal `-2 ln L` at the parameters used.
    pub neg2loglik: f64,
}

/// One joint draw of the latent states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDraw {
    /// `η_t`, `t = 0..u`.
    pub eta: Vec<DVector<f64>>,
    /// `ξ_t`, `t = 1..u` at index `t - 1` (empty without the fine scale).
    pub xi: Vec<Vec<f64>>,
}

fn gaussian_draw<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let l = psd_factor(cov);
    let z = DVector::from_fn(cov.nrows(), |_, _| rng.sample(StandardNormal));
    l * z
}

/// Unconditional draw of `η_{0..u}` and `ξ_{1..u}` from the model.
pub fn prior_draw<R: Rng + ?Sized>(design: &Design, params: &DfgpParams, lowrank_only: bool, rng: &mut R) -> Result<StateDraw> {
    let u = params.t_len();
    let mut eta = vec![gaussian_draw(&params.k0, rng)];
    let mut xi = Vec::new();
    for t in 1..=u {
        let next = &params.h[t - 1] * &eta[t - 1] + gaussian_draw(&params.u[t - 1], rng);
        eta.push(next);
        if !lowrank_only {
            xi.push(sample_car(&design.car, &params.car[t - 1], rng).map_err(|e| e.at_time(t))?);
        }
    }
    Ok(StateDraw { eta, xi })
}

/// `B_t(Sη_t + ξ_t) + ε_t` for every slice, i.e. detrended pseudo-data.
fn pseudo_data<R: Rng + ?Sized>(engine: &Engine, draw: &StateDraw, rng: &mut R) -> Vec<DVector<f64>> {
    let data = engine.dataset();
    let s_bau = &data.design.s_bau;
    (1..=data.t_len())
        .map(|t| {
            let slice = data.slice(t);
            let mut field = s_bau * &draw.eta[t];
            if let Some(x) = draw.xi.get(t - 1) {
                field += DVector::from_column_slice(x);
            }
            let mut y = DVector::from_vec(slice.b.mul_vec(field.as_slice()));
            for (v, s2) in y.iter_mut().zip(slice.noise_variances(&engine.params().sigma2[t - 1])) {
                *v += s2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            y
        })
        .collect()
}

/// Posterior means of all states for detrended data whose filter pass is `f`.
fn state_means(engine: &Engine, f: &FilterOutput, s: &SmootherOutput) -> StateDraw {
    let u = engine.t_len();
    let eta: Vec<DVector<f64>> = s.smoothed.iter().map(|p| p.mean.clone()).collect();
    let xi = if engine.options().lowrank_only {
        Vec::new()
    } else {
        (1..=u).map(|t| engine.xi_mean(t, &s.smoothed[t], &f.terms[t - 1])).collect()
    };
    StateDraw { eta, xi }
}

/// One draw from the states given the data, by correcting a prior draw
/// `x*` with the posterior mean of the residual data: `x* + E(x | Z - Z*)`.
/// The correction is linear in the data, so a single extra sweep suffices.
pub fn conditional_simulate<R: Rng + ?Sized>(engine: &Engine, rng: &mut R) -> Result<StateDraw> {
    let data = engine.dataset();
    let lowrank = engine.options().lowrank_only;
    let mut draw = prior_draw(&data.design, engine.params(), lowrank, rng)?;
    let star = pseudo_data(engine, &draw, rng);
    let diff: Vec<DVector<f64>> = (1..=data.t_len()).map(|t| engine.detrended(t) - &star[t - 1]).collect();
    let f = engine.filter_with(&diff)?;
    let s = engine.smooth(&f)?;
    let corr = state_means(engine, &f, &s);
    for (e, c) in draw.eta.iter_mut().zip(&corr.eta) {
        *e += c;
    }
    for (x, c) in draw.xi.iter_mut().zip(&corr.xi) {
        x.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    Ok(draw)
}

/// Convenience wrapper: builds the engine and draws with a fixed seed.
pub fn conditional_draw(data: &Dataset, params: &DfgpParams, lowrank_only: bool, seed: u64) -> Result<StateDraw> {
    let engine = Engine::new(data, params, EngineOptions { lowrank_only, retain: Retain::Full })?;
    conditional_simulate(&engine, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `K_t` and `L_t` from a smoother pass.
fn state_stats(s: &SmootherOutput, lag: &[DMatrix<f64>]) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let k = s.smoothed.iter().map(|p| symmetrized(&p.cov + &p.mean * p.mean.transpose())).collect();
    let l = lag
        .iter()
        .enumerate()
        .map(|(i, p)| p + &s.smoothed[i + 1].mean * s.smoothed[i].mean.transpose())
        .collect();
    (k, l)
}

/// Exact `E ξ'diag(e)ξ` and `E ξ'Eξ` at one time step.
fn exact_car_stats(engine: &Engine, t: usize, f: &FilterOutput, s: &SmootherOutput) -> Result<(f64, f64)> {
    let car = &engine.dataset().design.car;
    let op = engine.operator(t);
    let post = &s.smoothed[t];
    let mu = engine.xi_mean(t, post, &f.terms[t - 1]);
    let (mut a, mut b) = car.quad_stats(&mu);
    let finv = op.finv_diag()?;
    let psi = op.psi();
    let pp = psi * &post.cov;
    let e = car.degrees();
    for i in 0..car.n() {
        a += e[i] * (finv[i] + psi.row(i).dot(&pp.row(i)));
    }
    for (i, j, _) in car.adjacency().iter() {
        b += 2.0 * (op.finv_entry(i, j)? + psi.row(i).dot(&pp.row(j)));
    }
    Ok((a, b))
}

/// E-step at `params`. `rng` is used only in stochastic mode.
pub fn e_step<R: Rng + ?Sized>(
    data: &Dataset,
    params: &DfgpParams,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<SufficientStats> {
    let n = data.design.n();
    let lowrank = config.lowrank_only;
    if config.mode == EmMode::Exact && !lowrank && n > config.exact_cap {
        return Err(Error::ExactModeTooLarge { n, cap: config.exact_cap });
    }
    let engine = Engine::new(data, params, EngineOptions { lowrank_only: lowrank, retain: Retain::Full })?;
    let f = engine.filter_with(&(1..=data.t_len()).map(|t| engine.detrended(t)).collect::<Vec<_>>())?;
    let s = engine.smooth(&f)?;
    let lag = engine.lag1(&f, &s);
    let (k, l) = state_stats(&s, &lag);
    let u = data.t_len();

    // Without the fine scale the expectations are cheap and exact in any mode.
    let (mean_o, var_o, car_diag, car_adj) = if lowrank || config.mode == EmMode::Exact {
        let per_t: Vec<_> = (1..=u)
            .into_par_iter()
            .map(|t| -> Result<_> {
                let (m, v) = engine.row_moments(t, &s.smoothed[t], &f.terms[t - 1], &data.slice(t).b)?;
                let car = if lowrank { (0.0, 0.0) } else { exact_car_stats(&engine, t, &f, &s)? };
                Ok((DVector::from_vec(m), DVector::from_vec(v), car))
            })
            .collect::<Result<_>>()?;
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (m, v, (a, b)) in per_t {
            out.0.push(m);
            out.1.push(v);
            if !lowrank {
                out.2.push(a);
                out.3.push(b);
            }
        }
        out
    } else {
        let mut mean_o: Vec<DVector<f64>> = (1..=u).map(|t| DVector::zeros(data.slice(t).len())).collect();
        let mut car_diag = vec![0.0; u];
        let mut car_adj = vec![0.0; u];
        let w = 1.0 / config.draws as f64;
        for _ in 0..config.draws {
            let draw = conditional_simulate(&engine, rng)?;
            for t in 1..=u {
                let mut field = &data.design.s_bau * &draw.eta[t];
                field += DVector::from_column_slice(&draw.xi[t - 1]);
                mean_o[t - 1].axpy(w, &DVector::from_vec(data.slice(t).b.mul_vec(field.as_slice())), 1.0);
                let (a, b) = data.design.car.quad_stats(&draw.xi[t - 1]);
                car_diag[t - 1] += w * a;
                car_adj[t - 1] += w * b;
            }
        }
        let var_o = (1..=u).map(|t| DVector::zeros(data.slice(t).len())).collect();
        (mean_o, var_o, car_diag, car_adj)
    };
    Ok(SufficientStats {
        k,
        l,
        car_diag,
        car_adj,
        mean_o,
        var_o,
        eta: s.smoothed.iter().map(|p| p.mean.clone()).collect(),
        neg2loglik: neg2_loglik_from(&f),
    })
}

/// `N ln(a - γb) - ln|I - γW|`, the CAR part of `-2Q` with `τ²` profiled out
/// (up to a constant).
pub fn gamma_profile(car: &CarStructure, a: f64, b: f64, gamma: f64) -> Result<f64> {
    let s = a - gamma * b;
    if !(s > 0.0) {
        return Ok(f64::INFINITY);
    }
    Ok(car.n() as f64 * s.ln() - car.logdet_i_minus_gamma_w(gamma)?)
}

struct Profile<'a> {
    car: &'a CarStructure,
    a: f64,
    b: f64,
}

impl CostFunction for Profile<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, g: &f64) -> std::result::Result<f64, argmin::core::Error> {
        gamma_profile(self.car, self.a, self.b, *g).map_err(|e| argmin::core::Error::msg(e.to_string()))
    }
}

/// Closed-form `τ²` and numerically optimal `γ` for statistics `(a, b)`.
pub fn update_car(car: &CarStructure, a: f64, b: f64, search: &GammaSearch) -> Result<CarParams> {
    let (lo, hi) = (car.gamma_lo(), car.gamma_hi());
    let m = search.grid_points;
    let grid: Vec<f64> = (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect();
    let vals = grid.iter().map(|&g| gamma_profile(car, a, b, g)).collect::<Result<Vec<_>>>()?;
    let best = (0..m).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap();
    if !vals[best].is_finite() {
        return Err(Error::Numerical { time: 0, message: format!("CAR profile is not finite (a={a}, b={b})") });
    }
    let (blo, bhi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(m - 1)]);
    let solver = BrentOpt::new(blo, bhi).set_tolerance(search.tol, search.tol);
    let res = Executor::new(Profile { car, a, b }, solver)
        .configure(|s| s.max_iters(search.max_iter))
        .run()
        .map_err(|e| Error::Numerical { time: 0, message: format!("gamma search: {e}") })?;
    let mut gamma = grid[best];
    if let (Some(&g), cost) = (res.state().get_best_param(), res.state().get_best_cost()) {
        if cost <= vals[best] {
            gamma = g;
        }
    }
    let tau2 = (a - gamma * b) / car.n() as f64;
    Ok(CarParams::new(gamma, tau2))
}

/// Generalized least squares `(X'WX)⁻¹X'Wy` for diagonal weights `w`.
fn gls(x: &DMatrix<f64>, w: &[f64], y: &DVector<f64>) -> Option<DVector<f64>> {
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i]);
    let gram = symmetrized(xw.tr_mul(x));
    cholesky(&gram).ok().map(|c| c.solve(&xw.tr_mul(y)))
}

/// Per instrument, `(Σ ((r_j - ō_j)² + var_j)/v_j, count)` at one time step.
pub fn nugget_sums(data: &Dataset, stats: &SufficientStats, beta: &DVector<f64>, t: usize) -> Vec<(f64, usize)> {
    let slice = data.slice(t);
    let mut acc = vec![(0.0, 0usize); data.design.n_instruments];
    let fit = &slice.x * beta;
    for j in 0..slice.len() {
        let e = slice.z[j] - fit[j] - stats.mean_o[t - 1][j];
        let k = slice.instrument[j];
        acc[k].0 += (e * e + stats.var_o[t - 1][j]) / slice.vfac[j];
        acc[k].1 += 1;
    }
    acc
}

/// M-step: the maximizer of the expected complete-data likelihood given
/// `stats`, block by block. `β` uses the previous nugget variances.
pub fn m_step(stats: &SufficientStats, data: &Dataset, prev: &DfgpParams, config: &EstimatorConfig) -> Result<DfgpParams> {
    let u = data.t_len();
    let mut next = prev.clone();

    for t in 1..=u {
        let slice = data.slice(t);
        if slice.is_empty() {
            continue;
        }
        let w: Vec<f64> = slice.noise_variances(&prev.sigma2[t - 1]).iter().map(|v| 1.0 / v).collect();
        match gls(&slice.x, &w, &(&slice.z - &stats.mean_o[t - 1])) {
            Some(b) => next.beta[t - 1] = b,
            None => log::warn!("singular covariate Gram matrix at t={t}; keeping beta"),
        }
    }

    let sums: Vec<Vec<(f64, usize)>> = (1..=u).map(|t| nugget_sums(data, stats, &next.beta[t - 1], t)).collect();
    let n_inst = data.design.n_instruments;
    for k in 0..n_inst {
        if config.time_invariant_nugget {
            let (s, c) = sums.iter().fold((0.0, 0), |(s, c), v| (s + v[k].0, c + v[k].1));
            if c > 0 {
                let v = (s / c as f64).max(NUGGET_FLOOR);
                next.sigma2.iter_mut().for_each(|s2| s2[k] = v);
            }
        } else {
            for t in 0..u {
                let (s, c) = sums[t][k];
                if c > 0 {
                    next.sigma2[t][k] = (s / c as f64).max(NUGGET_FLOOR);
                }
            }
        }
    }

    next.k0 = stats.k[0].clone();
    if let Some(k0) = eigen_floor(&next.k0, COV_FLOOR_REL) {
        log::debug!("K0 update floored");
        next.k0 = k0;
    }
    for (first, last) in config.block_ranges(u)? {
        let len = (last - first + 1) as f64;
        let r = prev.r();
        let (mut sl, mut sk_prev, mut sk) = (DMatrix::zeros(r, r), DMatrix::zeros(r, r), DMatrix::zeros(r, r));
        for t in first..=last {
            sl += &stats.l[t - 1];
            sk_prev += &stats.k[t - 1];
            sk += &stats.k[t];
        }
        let h = right_solve_spd(&sl, &sk_prev);
        let mut uu = symmetrized((sk - &h * sl.transpose()) / len);
        if let Some(f) = eigen_floor(&uu, COV_FLOOR_REL) {
            log::debug!("U update floored on steps {first}..={last}");
            uu = f;
        }
        for t in first..=last {
            next.h[t - 1] = h.clone();
            next.u[t - 1] = uu.clone();
        }
    }

    if !config.lowrank_only {
        let car = &data.design.car;
        next.car = (0..u)
            .into_par_iter()
            .map(|t| update_car(car, stats.car_diag[t], stats.car_adj[t], &config.gamma).map_err(|e| e.at_time(t + 1)))
            .collect::<Result<_>>()?;
    }
    Ok(next)
}

/// `-2Q(θ)` up to a constant: the expected complete-data `-2 ln L` under
/// `stats`, evaluated at `params`.
pub fn neg2_q(stats: &SufficientStats, data: &Dataset, params: &DfgpParams, lowrank_only: bool) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    let u = data.t_len();
    for t in 1..=u {
        let slice = data.slice(t);
        let noise = slice.noise_variances(&params.sigma2[t - 1]);
        let fit = &slice.x * &params.beta[t - 1];
        for j in 0..slice.len() {
            let e = slice.z[j] - fit[j] - stats.mean_o[t - 1][j];
            acc.add((e * e + stats.var_o[t - 1][j]) / noise[j] + noise[j].ln());
        }
        let h = &params.h[t - 1];
        let inner = &stats.k[t] - h * stats.l[t - 1].transpose() - &stats.l[t - 1] * h.transpose() + h * &stats.k[t - 1] * h.transpose();
        acc.add(logdet_spd(&params.u[t - 1]).map_err(|e| e.at_time(t))?);
        acc.add((spd_inverse(&params.u[t - 1]) * inner).trace());
        if !lowrank_only {
            let car = &data.design.car;
            let cp = &params.car[t - 1];
            acc.add((stats.car_diag[t - 1] - cp.gamma * stats.car_adj[t - 1]) / cp.tau2);
            acc.add(-car.logdet_precision(cp).map_err(|e| e.at_time(t))?);
        }
    }
    acc.add(logdet_spd(&params.k0)?);
    acc.add((spd_inverse(&params.k0) * &stats.k[0]).trace());
    Ok(acc.value())
}

/// Default starting values: pooled OLS for `β`, the rest scaled from the
/// OLS residual variance.
pub fn initial_params(data: &Dataset, config: &EstimatorConfig) -> Result<DfgpParams> {
    let design = &data.design;
    let (r, p, u) = (design.r(), design.p(), data.t_len());
    let n = data.n_obs();
    if n <= p {
        return Err(Error::InvalidArgument(format!("{n} observations cannot fit {p} covariates")));
    }
    let mut x = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(n);
    let mut row = 0;
    for s in &data.slices {
        x.rows_mut(row, s.len()).copy_from(&s.x);
        z.rows_mut(row, s.len()).copy_from(&s.z);
        row += s.len();
    }
    let beta = gls(&x, &vec![1.0; n], &z)
        .ok_or_else(|| Error::InvalidArgument("covariates are collinear on the observed footprints".into()))?;
    let resid = &z - &x * &beta;
    let var = (resid.norm_squared() / (n - p) as f64).max(1e-8);
    let car = &design.car;
    let gamma = 0.5_f64.clamp(car.gamma_lo(), car.gamma_hi());
    // Split the residual variance roughly evenly between the two scales;
    // var(ξ_i) is about τ²/e_i. EM moves very slowly out of a start with
    // almost no fine-scale variance.
    let mean_degree = car.degrees().iter().sum::<f64>() / car.n() as f64;
    let mut params = DfgpParams::constant(
        u,
        beta,
        DMatrix::identity(r, r),
        DMatrix::identity(r, r) * (0.5 * var),
        DMatrix::identity(r, r) * (0.5 * var),
        CarParams::new(gamma, 0.25 * var * mean_degree),
        vec![0.1 * var; design.n_instruments],
    );
    if config.lowrank_only {
        // The CAR block is unused; keep values that validate.
        params.car.iter_mut().for_each(|c| *c = CarParams::new(gamma, var));
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// `-2 ln L` at the parameters entering this iteration.
    pub neg2loglik: f64,
    /// Relative parameter change made by this iteration.
    pub param_change: f64,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub params: DfgpParams,
    pub trace: Vec<TraceRow>,
    pub status: Status,
    /// `-2 ln L` at the returned parameters.
    pub neg2loglik: f64,
}

fn relative_change(a: &DfgpParams, b: &DfgpParams) -> f64 {
    let (fa, fb) = (a.to_flat(), b.to_flat());
    let diff: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1.0)
}

/// Iterates E- and M-steps from `init` (or [`initial_params`]) until
/// convergence or `max_iter`.
pub fn run_estimator(data: &Dataset, config: &EstimatorConfig, init: Option<DfgpParams>) -> Result<EstimationResult> {
    let u = data.t_len();
    if u == 0 {
        return Err(Error::InvalidArgument("no time steps".into()));
    }
    config.validate(u)?;
    let mut params = match init {
        Some(p) => p,
        None => initial_params(data, config)?,
    };
    params.validate(&data.design, u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let mut iterates = Vec::new();
    let mut quiet = 0;
    let mut status = Status::MaxIterations;
    let mut last_ll: Option<f64> = None;

    for iteration in 1..=config.max_iter {
        let step = (|| -> Result<(SufficientStats, DfgpParams)> {
            let stats = e_step(data, &params, config, &mut rng)?;
            let next = m_step(&stats, data, &params, config)?;
            cholesky(&next.k0)
                .map_err(|_| Error::Numerical { time: 0, message: format!("K0 lost definiteness at iteration {iteration}") })?;
            for (t, uu) in next.u.iter().enumerate() {
                cholesky(uu).map_err(|_| Error::Numerical {
                    time: t + 1,
                    message: format!("U lost definiteness at iteration {iteration}"),
                })?;
            }
            Ok((stats, next))
        })();
        let (stats, next) = match step {
            Ok(v) => v,
            Err(e) => {
                if e.is_numerical() {
                    log::error!("parameters entering iteration {iteration}: {params:?}");
                }
                return Err(e);
            }
        };
        let change = relative_change(&next, &params);
        trace.push(TraceRow { iteration, neg2loglik: stats.neg2loglik, param_change: change });
        log::debug!("iteration {iteration}: -2lnL {:.6}, change {change:.3e}", stats.neg2loglik);
        if let Some(prev) = last_ll {
            if (stats.neg2loglik - prev).abs() <= config.rel_tol * prev.abs().max(1.0) {
                quiet += 1;
            } else {
                quiet = 0;
            }
        }
        last_ll = Some(stats.neg2loglik);
        params = next;
        iterates.push(params.clone());
        if change < config.param_tol || quiet >= config.patience {
            status = Status::Converged;
            break;
        }
    }

    if config.mode == EmMode::Stochastic && !config.lowrank_only {
        let keep = ((iterates.len() as f64 * config.average_frac).ceil() as usize).clamp(1, iterates.len());
        params = DfgpParams::average(&iterates[iterates.len() - keep..]).expect("at least one iterate");
    }
    let engine = Engine::new(data, &params, EngineOptions { lowrank_only: config.lowrank_only, retain: Retain::Full })?;
    let f = engine.filter_with(&(1..=u).map(|t| engine.detrended(t)).collect::<Vec<_>>())?;
    Ok(EstimationResult { params, trace, status, neg2loglik: neg2_loglik_from(&f) })
}

/// Filtering protocol: one fit per horizon `u = 2..T` on `Z_{1:u}`,
/// optionally warm-started from the previous horizon.
pub fn fit_filtering_sequence(
    data: &Dataset,
    config: &EstimatorConfig,
    warm_start: bool,
) -> Result<Vec<(usize, EstimationResult)>> {
    let t_len = data.t_len();
    if t_len < 2 {
        return Err(Error::InvalidArgument("the filtering protocol needs at least two time steps".into()));
    }
    let mut out: Vec<(usize, EstimationResult)> = Vec::with_capacity(t_len - 1);
    for u in 2..=t_len {
        let sub = data.horizon(u);
        let mut cfg = config.clone();
        if !cfg.blocks.is_empty() {
            cfg.blocks = cfg.blocks.iter().map(|&b| b.min(u)).collect();
            cfg.blocks.dedup();
        }
        cfg.seed = config.seed.wrapping_add(u as u64);
        let init = match (warm_start, out.last()) {
            (true, Some((_, prev))) => Some(prev.params.extended(u)),
            _ => None,
        };
        out.push((u, run_estimator(&sub, &cfg, init)?));
    }
    Ok(out)
}

/// Smoothing protocol: a single fit on all of the data.
pub fn fit_smoothing(data: &Dataset, config: &EstimatorConfig) -> Result<EstimationResult> {
    run_estimator(data, config, None)
}
