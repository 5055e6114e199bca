//! Forecast, filter, smoother and predictors.
//!
//! For one time step write `V` for the noise covariance, `F = Q + B'V⁻¹B`
//! and `Ψ = F⁻¹B'V⁻¹S`. Then `D = (BQ⁻¹B' + V)⁻¹` is applied as
//! `V⁻¹ - V⁻¹BF⁻¹B'V⁻¹`, so the update only needs
//!
//! ```text
//! A     = S'DS      = S'V⁻¹S - (B'V⁻¹S)'Ψ
//! S'Dy  = (S - BΨ)'V⁻¹y
//! y'Dy  = y'V⁻¹y - g'F⁻¹g,      g = B'V⁻¹y
//! ```
//!
//! and with `P = LL'` for the forecast covariance and `W = I + L'AL`,
//!
//! ```text
//! P_{t|t} = L W⁻¹ L'          η_{t|t} = η_{t|t-1} + P_{t|t} S'Dα
//! α'Σ⁻¹α  = α'Dα - (S'Dα)' P_{t|t} (S'Dα)
//! ln|Σ|   = ln|W| + ln|F| - ln|Q| + ln|V|
//! ```
//!
//! Given `η_t` and the data, the fine-scale vector is Gaussian with mean
//! `w - Ψη_t` (where `w = F⁻¹B'V⁻¹(Z - Xβ)`) and covariance `F⁻¹`. This
//! yields the cell-level predictor and its variance for any posterior of
//! `η_t`, filtered or smoothed, without an `N × N` matrix.
//!
//! Cell and footprint rows of `S` are never stored: `S_t = B_t S_cells`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{psd_factor, right_solve_spd, symmetrize, symmetrized};
use crate::model::{Dataset, DfgpParams, TimeSlice};
use crate::sparse::{Cholesky, RowSparse, SelectedInverse};

/// How much of the per-time factorizations to keep after construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Retain {
    /// Keep factors: any right-hand side can be processed later.
    #[default]
    Full,
    /// Drop each factor as soon as its step is built, keeping only what
    /// filtering and predicting the observed data need (large grids).
    Compact,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineOptions {
    /// Drop the fine-scale component (fixed-rank filter/smoother).
    pub lowrank_only: bool,
    pub retain: Retain,
}

/// Mean and covariance of `η_t` given some data.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePosterior {
    pub time: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Innovation `α_t` with its quadratic form and covariance log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationRecord {
    pub time: usize,
    pub alpha: DVector<f64>,
    pub quad: f64,
    pub logdet: f64,
}

/// Data-dependent quantities of one time step for a given `y = Z - Xβ`.
#[derive(Debug, Clone)]
pub struct DataTerms {
    pub y: DVector<f64>,
    /// `S'Dy`.
    pub sdy: DVector<f64>,
    /// `y'Dy`.
    pub ydy: f64,
    /// `F⁻¹B'V⁻¹y` (empty in low-rank mode).
    pub w: Vec<f64>,
}

/// Everything about one time step that depends on parameters but not on
/// the observed values.
pub struct MeasurementOperator {
    pub time: usize,
    n_obs: usize,
    vinv: Vec<f64>,
    logdet_v: f64,
    logdet_f: f64,
    logdet_q: f64,
    factor: Option<Cholesky>,
    selinv: OnceLock<SelectedInverse>,
    finv_diag: OnceLock<Vec<f64>>,
    /// `F⁻¹B'V⁻¹S`, `N × r` (`0 × r` in low-rank mode).
    psi: DMatrix<f64>,
    a: DMatrix<f64>,
    lowrank: bool,
    /// Terms of the observed data, kept when the factor is dropped early.
    observed: Option<DataTerms>,
}

impl std::fmt::Debug for MeasurementOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasurementOperator")
            .field("time", &self.time)
            .field("n_obs", &self.n_obs)
            .field("lowrank", &self.lowrank)
            .finish_non_exhaustive()
    }
}

impl MeasurementOperator {
    pub fn build(dataset: &Dataset, slice: &TimeSlice, params: &DfgpParams, lowrank: bool) -> Result<Self> {
        let t = slice.time;
        let design = &dataset.design;
        let r = design.r();
        let noise = slice.noise_variances(&params.sigma2[t - 1]);
        let vinv: Vec<f64> = noise.iter().map(|v| 1.0 / v).collect();
        let logdet_v = noise.iter().map(|v| v.ln()).sum();
        let gram = slice.gram(&vinv);
        let gs = gram.mul_dense(&design.s_bau);
        let sgs = design.s_bau.tr_mul(&gs);
        if lowrank {
            return Ok(Self {
                time: t,
                n_obs: slice.len(),
                vinv,
                logdet_v,
                logdet_f: 0.0,
                logdet_q: 0.0,
                factor: None,
                selinv: OnceLock::new(),
                finv_diag: OnceLock::new(),
                psi: DMatrix::zeros(0, r),
                a: symmetrized(sgs),
                lowrank,
                observed: None,
            });
        }
        let car = &design.car;
        let cp = &params.car[t - 1];
        let q = car.precision(cp).map_err(|e| e.at_time(t))?;
        let logdet_q = car.logdet_precision(cp).map_err(|e| e.at_time(t))?;
        let symbolic = slice.posterior_symbolic(car)?;
        let f_mat = if slice.is_empty() { q } else { q.add(&gram) };
        let factor = Cholesky::factor_with(symbolic, &f_mat).map_err(|e| e.at_time(t))?;
        let cols: Vec<Vec<f64>> = (0..r).into_par_iter().map(|k| factor.solve(gs.column(k).as_slice())).collect();
        let mut psi = DMatrix::zeros(design.n(), r);
        for (k, c) in cols.into_iter().enumerate() {
            psi.column_mut(k).copy_from_slice(&c);
        }
        let a = symmetrized(sgs - gs.tr_mul(&psi));
        Ok(Self {
            time: t,
            n_obs: slice.len(),
            vinv,
            logdet_v,
            // F = Q without data; the two routes to the determinant differ
            // in the last bits, and an empty step must contribute nothing.
            logdet_f: if slice.is_empty() { logdet_q } else { factor.logdet() },
            logdet_q,
            factor: Some(factor),
            selinv: OnceLock::new(),
            finv_diag: OnceLock::new(),
            psi,
            a,
            lowrank,
            observed: None,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// `S'DS`.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn is_lowrank(&self) -> bool {
        self.lowrank
    }

    /// `ln|D⁻¹| = ln|F| - ln|Q| + ln|V|`.
    pub fn logdet_dinv(&self) -> f64 {
        self.logdet_f - self.logdet_q + self.logdet_v
    }

    pub fn logdet_q(&self) -> f64 {
        self.logdet_q
    }

    pub fn logdet_v(&self) -> f64 {
        self.logdet_v
    }

    pub fn vinv(&self) -> &[f64] {
        &self.vinv
    }

    pub fn factor(&self) -> Result<&Cholesky> {
        self.factor.as_ref().ok_or_else(|| Error::Numerical {
            time: self.time,
            message: "posterior factor was not retained".into(),
        })
    }

    fn selected_inverse(&self) -> Result<&SelectedInverse> {
        if let Some(s) = self.selinv.get() {
            return Ok(s);
        }
        let s = SelectedInverse::compute(self.factor()?);
        Ok(self.selinv.get_or_init(|| s))
    }

    /// Diagonal of `F⁻¹` (zeros in low-rank mode).
    pub fn finv_diag(&self) -> Result<&[f64]> {
        if let Some(d) = self.finv_diag.get() {
            return Ok(d);
        }
        let d = if self.lowrank { Vec::new() } else { self.selected_inverse()?.diagonal() };
        Ok(self.finv_diag.get_or_init(|| d))
    }

    /// Entry `(i, j)` of `F⁻¹`, from the selected inverse when the pair lies
    /// on the factor pattern and by a solve otherwise.
    pub fn finv_entry(&self, i: usize, j: usize) -> Result<f64> {
        if let Some(v) = self.selected_inverse()?.get(i, j) {
            return Ok(v);
        }
        let f = self.factor()?;
        let mut e = vec![0.0; f.n()];
        e[j] = 1.0;
        Ok(f.solve(&e)[i])
    }

    /// `b' F⁻¹ b` for a sparse row `b`.
    pub fn finv_quad(&self, cols: &[usize], vals: &[f64]) -> Result<f64> {
        if self.lowrank {
            return Ok(0.0);
        }
        let si = self.selected_inverse()?;
        let mut acc = 0.0;
        let mut missing = false;
        'outer: for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
            for (&cb, &vb) in cols[..=a].iter().zip(&vals[..=a]) {
                match si.get(ca, cb) {
                    Some(z) => acc += if ca == cb { va * va * z } else { 2.0 * va * vb * z },
                    None => {
                        missing = true;
                        break 'outer;
                    }
                }
            }
        }
        if !missing {
            return Ok(acc);
        }
        let f = self.factor()?;
        let mut e = vec![0.0; f.n()];
        for (&c, &v) in cols.iter().zip(vals) {
            e[c] += v;
        }
        let x = f.solve(&e);
        Ok(cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum())
    }

    /// Data terms for `y = Z - Xβ`.
    pub fn data_terms(&self, slice: &TimeSlice, s_bau: &DMatrix<f64>, y: DVector<f64>) -> Result<DataTerms> {
        if let Some(d) = self.observed.as_ref().filter(|d| d.y == y) {
            return Ok(d.clone());
        }
        let r = s_bau.ncols();
        let n = s_bau.nrows();
        if self.n_obs == 0 {
            return Ok(DataTerms {
                y,
                sdy: DVector::zeros(r),
                ydy: 0.0,
                w: if self.lowrank { Vec::new() } else { vec![0.0; n] },
            });
        }
        let vy: Vec<f64> = y.iter().zip(&self.vinv).map(|(a, b)| a * b).collect();
        let yvy: f64 = y.iter().zip(&vy).map(|(a, b)| a * b).sum();
        let g = DVector::from_vec(slice.b.tmul_vec(&vy));
        let sg = s_bau.tr_mul(&g);
        if self.lowrank {
            return Ok(DataTerms { y, sdy: sg, ydy: yvy, w: Vec::new() });
        }
        let w = self.factor()?.solve(g.as_slice());
        let gw: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
        let sdy = sg - self.psi.tr_mul(&g);
        Ok(DataTerms { y, sdy, ydy: yvy - gw, w })
    }

    /// Computes and keeps the terms for `y`, then drops the factor.
    pub fn compact_with(&mut self, slice: &TimeSlice, s_bau: &DMatrix<f64>, y: DVector<f64>) -> Result<()> {
        if self.observed.is_none() {
            self.observed = Some(self.data_terms(slice, s_bau, y)?);
        }
        self.compact()
    }

    /// Drops the factor after caching the diagonal of `F⁻¹`.
    pub fn compact(&mut self) -> Result<()> {
        self.finv_diag()?;
        self.factor = None;
        self.selinv = OnceLock::new();
        Ok(())
    }
}

/// `η_{t|t-1} = Hη`, `P_{t|t-1} = HPH' + U`.
pub fn forecast_step(prev: &StatePosterior, h: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<StatePosterior> {
    let r = prev.mean.len();
    if h.shape() != (r, r) || u.shape() != (r, r) || prev.cov.shape() != (r, r) {
        return Err(Error::Dimension(format!("forecast with r={r} got H {:?}, U {:?}", h.shape(), u.shape())));
    }
    let mut cov = h * &prev.cov * h.transpose() + u;
    symmetrize(&mut cov);
    Ok(StatePosterior { time: prev.time + 1, mean: h * &prev.mean, cov })
}

/// Result of one measurement update.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub posterior: StatePosterior,
    pub innovation: InnovationRecord,
    /// `G_t S_t = P_{t|t} S'DS`.
    pub gain_s: DMatrix<f64>,
}

/// Measurement update of a forecast with one time step's data.
pub fn filter_step(
    forecast: &StatePosterior,
    op: &MeasurementOperator,
    terms: &DataTerms,
    alpha: DVector<f64>,
) -> Result<FilterStep> {
    let t = forecast.time;
    let r = forecast.mean.len();
    let m = &forecast.mean;
    let l = psd_factor(&forecast.cov);
    let w = DMatrix::identity(r, r) + l.tr_mul(&(op.a() * &l));
    let chol = nalgebra::Cholesky::new(symmetrized(w)).ok_or_else(|| Error::Numerical {
        time: t,
        message: "inner r x r system is not positive definite".into(),
    })?;
    let logdet_w = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let linv_lt = chol.solve(&l.transpose());
    let cov = symmetrized(&l * linv_lt);
    let am = op.a() * m;
    let b = &terms.sdy - &am;
    let mean = m + &cov * &b;
    let quad = terms.ydy - 2.0 * m.dot(&terms.sdy) + m.dot(&am) - b.dot(&(&cov * &b));
    let gain_s = &cov * op.a();
    Ok(FilterStep {
        posterior: StatePosterior { time: t, mean, cov },
        innovation: InnovationRecord { time: t, alpha, quad, logdet: logdet_w + op.logdet_dinv() },
        gain_s,
    })
}

/// A full forward pass.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// `η_{t|t-1}` for `t = 1..u` at index `t - 1`.
    pub forecast: Vec<StatePosterior>,
    /// `η_{t|t}` for `t = 0..u` at index `t` (index 0 is the prior of `η_0`).
    pub filtered: Vec<StatePosterior>,
    pub innovations: Vec<InnovationRecord>,
    /// `G_t S_t` for `t = 1..u` at index `t - 1`.
    pub gain_s: Vec<DMatrix<f64>>,
    pub terms: Vec<DataTerms>,
}

impl FilterOutput {
    pub fn filtered_at(&self, t: usize) -> &StatePosterior {
        &self.filtered[t]
    }
}

/// A full backward pass.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// `η_{t|u}` for `t = 0..u` at index `t`.
    pub smoothed: Vec<StatePosterior>,
    /// `J_t` for `t = 0..u-1` at index `t`.
    pub j: Vec<DMatrix<f64>>,
}

/// Rauch–Tung–Striebel backward recursion, including `t = 0`.
pub fn smoother_pass(f: &FilterOutput, h: &[DMatrix<f64>]) -> Result<SmootherOutput> {
    let u = f.forecast.len();
    let mut smoothed = vec![f.filtered[u].clone()];
    let mut js = Vec::with_capacity(u);
    for t in (0..u).rev() {
        let filt = &f.filtered[t];
        let pred = &f.forecast[t];
        let next = smoothed.last().unwrap();
        let j = right_solve_spd(&(&filt.cov * h[t].transpose()), &pred.cov);
        let mean = &filt.mean + &j * (&next.mean - &pred.mean);
        let cov = symmetrized(&filt.cov + &j * (&next.cov - &pred.cov) * j.transpose());
        smoothed.push(StatePosterior { time: t, mean, cov });
        js.push(j);
    }
    smoothed.reverse();
    js.reverse();
    Ok(SmootherOutput { smoothed, j: js })
}

/// `P_{t,t-1|u}` for `t = 1..u` (index `t - 1`), by the backward lag-one
/// recursion started from `(I - G_u S_u) H_u P_{u-1|u-1}`.
pub fn lag1_cov(f: &FilterOutput, s: &SmootherOutput, h: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let u = f.forecast.len();
    let r = f.filtered[0].mean.len();
    let mut out = vec![DMatrix::zeros(r, r); u];
    out[u - 1] = (DMatrix::identity(r, r) - &f.gain_s[u - 1]) * &h[u - 1] * &f.filtered[u - 1].cov;
    for t in (2..=u).rev() {
        let p_prev = &f.filtered[t - 1].cov;
        let jm2 = s.j[t - 2].transpose();
        let inner = &out[t - 1] - &h[t - 1] * p_prev;
        out[t - 2] = p_prev * &jm2 + &s.j[t - 1] * inner * &jm2;
    }
    out
}

/// Cell-level predictions at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionField {
    pub time: usize,
    /// Grid indices of the predicted cells.
    pub cells: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Moments of the fine-scale component at the prediction cells.
#[derive(Debug, Clone)]
pub struct GgmMoments {
    /// `E(ξ_i | data)`.
    pub delta_mean: Vec<f64>,
    /// `var(ξ_i | data)`.
    pub r_diag: Vec<f64>,
    /// `cov(η_t, ξ_i | data)`, `r × m`.
    pub cross: DMatrix<f64>,
}

/// The engine for one parameter set over one dataset.
pub struct Engine {
    dataset: Dataset,
    params: DfgpParams,
    ops: Vec<MeasurementOperator>,
    opts: EngineOptions,
}

impl Engine {
    pub fn new(dataset: &Dataset, params: &DfgpParams, opts: EngineOptions) -> Result<Self> {
        let u = dataset.t_len();
        if u == 0 {
            return Err(Error::InvalidArgument("no time steps".into()));
        }
        params.validate(&dataset.design, u)?;
        let mut ops = Vec::with_capacity(u);
        for slice in &dataset.slices {
            let mut op = MeasurementOperator::build(dataset, slice, params, opts.lowrank_only)?;
            // Only one factor is alive at a time on large grids.
            if opts.retain == Retain::Compact {
                let y = &slice.z - &slice.x * &params.beta[slice.time - 1];
                op.compact_with(slice, &dataset.design.s_bau, y).map_err(|e| e.at_time(slice.time))?;
            }
            ops.push(op);
        }
        Ok(Self { dataset: dataset.clone(), params: params.clone(), ops, opts })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn params(&self) -> &DfgpParams {
        &self.params
    }

    pub fn options(&self) -> EngineOptions {
        self.opts
    }

    pub fn t_len(&self) -> usize {
        self.ops.len()
    }

    pub fn operator(&self, t: usize) -> &MeasurementOperator {
        &self.ops[t - 1]
    }

    /// `Z_t - X_t β_t`.
    pub fn detrended(&self, t: usize) -> DVector<f64> {
        let s = self.dataset.slice(t);
        &s.z - &s.x * &self.params.beta[t - 1]
    }

    /// Forward pass on the observed data.
    pub fn filter(&mut self) -> Result<FilterOutput> {
        let ys: Vec<DVector<f64>> = (1..=self.t_len()).map(|t| self.detrended(t)).collect();
        self.filter_with(&ys)
    }

    /// Forward pass on arbitrary detrended data `y_t = Z_t - X_t β_t`.
    pub fn filter_with(&self, ys: &[DVector<f64>]) -> Result<FilterOutput> {
        let u = self.t_len();
        if ys.len() != u {
            return Err(Error::Dimension(format!("{} data vectors for {u} steps", ys.len())));
        }
        let s_bau = &self.dataset.design.s_bau;
        let r = self.dataset.design.r();
        let mut filtered = vec![StatePosterior { time: 0, mean: DVector::zeros(r), cov: self.params.k0.clone() }];
        let mut forecast = Vec::with_capacity(u);
        let mut innovations = Vec::with_capacity(u);
        let mut gain_s = Vec::with_capacity(u);
        let mut terms = Vec::with_capacity(u);
        for t in 1..=u {
            let slice = self.dataset.slice(t);
            let op = &self.ops[t - 1];
            let pred = forecast_step(&filtered[t - 1], &self.params.h[t - 1], &self.params.u[t - 1])?;
            let dt = op.data_terms(slice, s_bau, ys[t - 1].clone()).map_err(|e| e.at_time(t))?;
            let s_m = s_bau * &pred.mean;
            let alpha = &dt.y - DVector::from_vec(slice.b.mul_vec(s_m.as_slice()));
            let step = filter_step(&pred, op, &dt, alpha)?;
            forecast.push(pred);
            filtered.push(step.posterior);
            innovations.push(step.innovation);
            gain_s.push(step.gain_s);
            terms.push(dt);
        }
        Ok(FilterOutput { forecast, filtered, innovations, gain_s, terms })
    }

    pub fn smooth(&self, f: &FilterOutput) -> Result<SmootherOutput> {
        smoother_pass(f, &self.params.h)
    }

    pub fn lag1(&self, f: &FilterOutput, s: &SmootherOutput) -> Vec<DMatrix<f64>> {
        lag1_cov(f, s, &self.params.h)
    }

    fn check_cells(&self, cells: &[usize]) -> Result<()> {
        let n = self.dataset.design.n();
        match cells.iter().find(|&&c| c >= n) {
            Some(c) => Err(Error::InvalidArgument(format!("prediction cell {c} is not a model cell (N={n})"))),
            None => Ok(()),
        }
    }

    /// `E(ξ_t | data)` given the posterior of `η_t`.
    pub fn xi_mean(&self, t: usize, post: &StatePosterior, terms: &DataTerms) -> Vec<f64> {
        let op = &self.ops[t - 1];
        if op.lowrank {
            return vec![0.0; self.dataset.design.n()];
        }
        let pe = &op.psi * &post.mean;
        terms.w.iter().zip(pe.iter()).map(|(w, p)| w - p).collect()
    }

    /// Fine-scale moments at model cells (`δ^P`, diagonal of `R^P`, `C`).
    pub fn ggm_moments(&self, t: usize, post: &StatePosterior, terms: &DataTerms, cells: &[usize]) -> Result<GgmMoments> {
        self.check_cells(cells)?;
        let op = &self.ops[t - 1];
        let r = post.mean.len();
        if op.lowrank {
            return Ok(GgmMoments {
                delta_mean: vec![0.0; cells.len()],
                r_diag: vec![0.0; cells.len()],
                cross: DMatrix::zeros(r, cells.len()),
            });
        }
        let finv = op.finv_diag()?;
        let mut delta_mean = Vec::with_capacity(cells.len());
        let mut r_diag = Vec::with_capacity(cells.len());
        let mut cross = DMatrix::zeros(r, cells.len());
        for (k, &i) in cells.iter().enumerate() {
            let psi_i = op.psi.row(i).transpose();
            delta_mean.push(terms.w[i] - psi_i.dot(&post.mean));
            let pp = &post.cov * &psi_i;
            r_diag.push(psi_i.dot(&pp) + finv[i]);
            cross.column_mut(k).copy_from(&(-pp));
        }
        Ok(GgmMoments { delta_mean, r_diag, cross })
    }

    /// Predicted mean and standard error of `Y_t` at model cells.
    pub fn predict(&self, t: usize, post: &StatePosterior, terms: &DataTerms, cells: &[usize]) -> Result<PredictionField> {
        self.check_cells(cells)?;
        let design = &self.dataset.design;
        let op = &self.ops[t - 1];
        let beta = &self.params.beta[t - 1];
        let finv = if op.lowrank { &[][..] } else { op.finv_diag()? };
        let mut mean = Vec::with_capacity(cells.len());
        let mut stderr = Vec::with_capacity(cells.len());
        for &i in cells {
            let mut d = design.s_bau.row(i).transpose();
            let mut m = design.x_bau.row(i).transpose().dot(beta);
            let mut v = 0.0;
            if !op.lowrank {
                d -= op.psi.row(i).transpose();
                m += terms.w[i];
                v += finv[i];
            }
            m += d.dot(&post.mean);
            v += d.dot(&(&post.cov * &d));
            let scale = v.abs().max(finv.get(i).copied().unwrap_or(0.0)).max(f64::MIN_POSITIVE);
            if v < -1e-10 * scale {
                log::warn!("negative prediction variance {v:e} at t={t}, cell {i}");
            }
            mean.push(m);
            stderr.push(v.max(0.0).sqrt());
        }
        let cells = cells.iter().map(|&i| design.cell_index[i]).collect();
        Ok(PredictionField { time: t, cells, mean, stderr })
    }

    pub fn predict_filtered(&self, f: &FilterOutput, t: usize, cells: &[usize]) -> Result<PredictionField> {
        self.predict(t, &f.filtered[t], &f.terms[t - 1], cells)
    }

    pub fn predict_smoothed(&self, f: &FilterOutput, s: &SmootherOutput, t: usize, cells: &[usize]) -> Result<PredictionField> {
        self.predict(t, &s.smoothed[t], &f.terms[t - 1], cells)
    }

    /// Full prediction covariance of `Y_t` at a handful of cells.
    pub fn prediction_cov(&self, t: usize, post: &StatePosterior, cells: &[usize]) -> Result<DMatrix<f64>> {
        self.check_cells(cells)?;
        let design = &self.dataset.design;
        let op = &self.ops[t - 1];
        let r = design.r();
        let mut d = DMatrix::zeros(cells.len(), r);
        for (k, &i) in cells.iter().enumerate() {
            let mut row = design.s_bau.row(i).into_owned();
            if !op.lowrank {
                row -= op.psi.row(i);
            }
            d.row_mut(k).copy_from(&row);
        }
        let mut cov = &d * &post.cov * d.transpose();
        if !op.lowrank {
            for a in 0..cells.len() {
                for b in 0..=a {
                    let v = op.finv_entry(cells[a], cells[b])?;
                    cov[(a, b)] += v;
                    if a != b {
                        cov[(b, a)] += v;
                    }
                }
            }
        }
        Ok(symmetrized(cov))
    }

    /// Mean and variance of `b_j'(Sη_t + ξ_t)` for sparse rows `b_j` (e.g.
    /// footprints) given the posterior of `η_t`.
    pub fn row_moments(
        &self,
        t: usize,
        post: &StatePosterior,
        terms: &DataTerms,
        rows: &RowSparse,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let design = &self.dataset.design;
        let op = &self.ops[t - 1];
        let mut mean = Vec::with_capacity(rows.nrows());
        let mut var = Vec::with_capacity(rows.nrows());
        for j in 0..rows.nrows() {
            let (c, v) = rows.row(j);
            let mut g = DVector::zeros(design.r());
            let mut m = 0.0;
            for (&i, &wv) in c.iter().zip(v) {
                g.axpy(wv, &design.s_bau.row(i).transpose(), 1.0);
                if !op.lowrank {
                    g.axpy(-wv, &op.psi.row(i).transpose(), 1.0);
                    m += wv * terms.w[i];
                }
            }
            m += g.dot(&post.mean);
            let vv = g.dot(&(&post.cov * &g)) + op.finv_quad(c, v)?;
            mean.push(m);
            var.push(vv);
        }
        Ok((mean, var))
    }
}
