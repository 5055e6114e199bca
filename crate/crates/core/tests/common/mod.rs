//! Brute-force joint-Gaussian reference for small instances.
//!
//! The latent vector `x = (η_0, …, η_u, ξ_1, …, ξ_u)` and the stacked data
//! are jointly Gaussian; every posterior quantity is obtained by dense
//! conditioning. Nothing here calls the library's filter, smoother, CAR or
//! likelihood code.

#![allow(dead_code)]

use std::sync::Arc;

use dfgp::car::{CarParams, CarStructure, Neighborhood};
use dfgp::grid::BauGrid;
use dfgp::model::{Dataset, Design, DfgpParams, TimeSlice};
use dfgp::sparse::RowSparse;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub grid: BauGrid,
    pub dataset: Dataset,
    pub params: DfgpParams,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn random_spd(rng: &mut impl Rng, r: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a * a.transpose() / r as f64 + DMatrix::identity(r, r) * 0.3) * scale
}

/// A propagation matrix with spectral norm below one.
pub fn random_h(rng: &mut impl Rng, r: usize) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(r, r, |_, _| rng.gen_range(-1.0..1.0));
    let norm = a.norm().max(1e-12);
    a * (rng.gen_range(0.3..0.95) / norm)
}

/// Options for random instances.
#[derive(Clone, Copy)]
pub struct Shape {
    pub nx: usize,
    pub ny: usize,
    pub r: usize,
    pub t_len: usize,
    pub p: usize,
}

/// Random grid, basis, covariates, parameters and data drawn from the model.
/// Instrument 1 sees single cells, instrument 2 sees 2x2 blocks; some time
/// steps may be empty.
pub fn random_instance(seed: u64, shape: Shape) -> Instance {
    let mut rng = rng(seed);
    let Shape { nx, ny, r, t_len, p } = shape;
    let grid = BauGrid::new(nx, ny, 1.0, [0.0, 0.0]).unwrap();
    let n = nx * ny;
    let car = Arc::new(CarStructure::from_grid(&grid, Neighborhood::Rook).unwrap());
    let s_bau = DMatrix::from_fn(n, r, |_, _| if rng.gen_bool(0.7) { rng.gen_range(0.0..1.0) } else { 0.0 });
    let x_bau = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37 + j as f64).sin() });
    let design = Arc::new(Design::new(car, s_bau, x_bau, 2).unwrap());

    let h = random_h(&mut rng, r);
    let su = rng.gen_range(0.2..1.0);
    let u = random_spd(&mut rng, r, su);
    let sk = rng.gen_range(0.5..2.0);
    let k0 = random_spd(&mut rng, r, sk);
    let mut params = DfgpParams::constant(
        t_len,
        DVector::from_fn(p, |_, _| rng.gen_range(-1.0..1.0)),
        h,
        u,
        k0,
        CarParams::new(0.5, 1.0),
        vec![0.3, 0.2],
    );
    for t in 0..t_len {
        params.car[t] = CarParams::new(rng.gen_range(0.0..0.95), rng.gen_range(0.1..2.0));
        params.sigma2[t] = vec![rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0)];
    }

    // Draw latent states from the prior, independently of the library.
    let mut eta = vec![cholesky_draw(&mut rng, &params.k0)];
    let mut slices = Vec::new();
    for t in 1..=t_len {
        let prev = eta[t - 1].clone();
        eta.push(&params.h[t - 1] * prev + cholesky_draw(&mut rng, &params.u[t - 1]));
        let q = dense_q(&grid, &params.car[t - 1]);
        let qinv = q.clone().cholesky().unwrap().inverse();
        let xi = cholesky_draw(&mut rng, &qinv);
        let field = &design.s_bau * &eta[t] + xi;

        let mut b = RowSparse::new(n);
        let mut vfac = Vec::new();
        let mut inst = Vec::new();
        let keep = if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.2..1.0) };
        for i in 0..n {
            if rng.gen_bool(keep) {
                b.push_row(&[i], &[1.0]);
                vfac.push(rng.gen_range(0.5..2.0));
                inst.push(0);
            }
        }
        for by in 0..ny / 2 {
            for bx in 0..nx / 2 {
                if rng.gen_bool(keep) {
                    let cells: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| (2 * by + dy) * nx + 2 * bx + dx)
                        .collect();
                    b.push_row(&cells, &[0.25; 4]);
                    vfac.push(1.0);
                    inst.push(1);
                }
            }
        }
        let bd = b.to_dense();
        let mean = &bd * &design.x_bau * &params.beta[t - 1] + &bd * &field;
        let noise: Vec<f64> = vfac.iter().zip(&inst).map(|(v, &k)| v * params.sigma2[t - 1][k]).collect();
        let z = DVector::from_fn(mean.len(), |j, _| mean[j] + noise[j].sqrt() * rng.sample::<f64, _>(StandardNormal));
        slices.push(TimeSlice::new(t, z, b, vfac, inst, &design).unwrap());
    }
    let dataset = Dataset::new(design, slices).unwrap();
    Instance { grid, dataset, params }
}

pub fn cholesky_draw(rng: &mut impl Rng, cov: &DMatrix<f64>) -> DVector<f64> {
    let l = cov.clone().cholesky().expect("covariance must be SPD").l();
    l * normal_vec(rng, cov.nrows())
}

/// Rook adjacency rebuilt from centroid distances.
pub fn dense_adjacency(grid: &BauGrid) -> DMatrix<f64> {
    let c = grid.centroids();
    let n = c.len();
    let h = grid.cell_size();
    DMatrix::from_fn(n, n, |i, j| {
        let d = ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2)).sqrt();
        if (d - h).abs() < 1e-9 * h {
            1.0
        } else {
            0.0
        }
    })
}

/// `Δ⁻¹(I - γW)/τ²` written out densely.
pub fn dense_q(grid: &BauGrid, car: &CarParams) -> DMatrix<f64> {
    let e = dense_adjacency(grid);
    let n = e.nrows();
    let deg: Vec<f64> = (0..n).map(|i| e.row(i).sum()).collect();
    let delta_inv = DMatrix::from_diagonal(&DVector::from_vec(deg.clone()));
    let w = DMatrix::from_fn(n, n, |i, j| e[(i, j)] / deg[i]);
    delta_inv * (DMatrix::identity(n, n) - w * car.gamma) / car.tau2
}

pub struct DenseOracle {
    pub u: usize,
    pub r: usize,
    pub n: usize,
    /// Prior covariance of `x`.
    pub cov_x: DMatrix<f64>,
    /// `Z - Xβ = M x + ε`, stacked over time.
    pub m: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise: DVector<f64>,
    pub obs_time: Vec<usize>,
    pub s_bau: DMatrix<f64>,
    pub x_bau: DMatrix<f64>,
    pub beta: Vec<DVector<f64>>,
    pub lowrank: bool,
}

impl DenseOracle {
    pub fn new(inst: &Instance, lowrank: bool) -> Self {
        Self::from_parts(&inst.grid, &inst.dataset, &inst.params, lowrank)
    }

    pub fn from_parts(grid: &BauGrid, data: &Dataset, params: &DfgpParams, lowrank: bool) -> Self {
        let u = data.t_len();
        let design = &data.design;
        let (r, n) = (design.r(), design.n());
        let dim = (u + 1) * r + u * n;
        let mut cov_x = DMatrix::zeros(dim, dim);
        // η block: Cov(η_t, η_s) for s ≤ t is H_t⋯H_{s+1} Var(η_s).
        let mut var = vec![params.k0.clone()];
        for t in 1..=u {
            let prev = &var[t - 1];
            var.push(&params.h[t - 1] * prev * params.h[t - 1].transpose() + &params.u[t - 1]);
        }
        for s in 0..=u {
            let mut c = var[s].clone();
            for t in s..=u {
                if t > s {
                    c = &params.h[t - 1] * c;
                }
                cov_x.view_mut((t * r, s * r), (r, r)).copy_from(&c);
                cov_x.view_mut((s * r, t * r), (r, r)).copy_from(&c.transpose());
            }
        }
        if !lowrank {
            for t in 1..=u {
                let q = dense_q(grid, &params.car[t - 1]);
                let qinv = q.cholesky().unwrap().inverse();
                let o = (u + 1) * r + (t - 1) * n;
                cov_x.view_mut((o, o), (n, n)).copy_from(&qinv);
            }
        }
        let n_obs = data.n_obs();
        let mut m = DMatrix::zeros(n_obs, dim);
        let mut y = DVector::zeros(n_obs);
        let mut noise = DVector::zeros(n_obs);
        let mut obs_time = Vec::new();
        let mut row = 0;
        for t in 1..=u {
            let s = data.slice(t);
            let bd = s.b.to_dense();
            let st = &bd * &design.s_bau;
            let xb = &bd * &design.x_bau * &params.beta[t - 1];
            for j in 0..s.len() {
                m.view_mut((row, t * r), (1, r)).copy_from(&st.row(j));
                if !lowrank {
                    m.view_mut((row, (u + 1) * r + (t - 1) * n), (1, n)).copy_from(&bd.row(j));
                }
                y[row] = s.z[j] - xb[j];
                noise[row] = s.vfac[j] * params.sigma2[t - 1][s.instrument[j]];
                obs_time.push(t);
                row += 1;
            }
        }
        Self {
            u,
            r,
            n,
            cov_x,
            m,
            y,
            noise,
            obs_time,
            s_bau: design.s_bau.clone(),
            x_bau: design.x_bau.clone(),
            beta: params.beta.clone(),
            lowrank,
        }
    }

    pub fn eta(&self, t: usize) -> std::ops::Range<usize> {
        t * self.r..(t + 1) * self.r
    }

    pub fn xi(&self, t: usize) -> std::ops::Range<usize> {
        let o = (self.u + 1) * self.r + (t - 1) * self.n;
        o..o + self.n
    }

    fn rows_upto(&self, upto: usize) -> Vec<usize> {
        (0..self.obs_time.len()).filter(|&i| self.obs_time[i] <= upto).collect()
    }

    /// Posterior mean and covariance of `x` given data at times `≤ upto`.
    pub fn posterior(&self, upto: usize) -> (DVector<f64>, DMatrix<f64>) {
        let rows = self.rows_upto(upto);
        if rows.is_empty() {
            return (DVector::zeros(self.cov_x.nrows()), self.cov_x.clone());
        }
        let m = self.m.select_rows(&rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let noise = DMatrix::from_diagonal(&DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.noise[i])));
        let cxz = &self.cov_x * m.transpose();
        let czz = &m * &cxz + noise;
        let chol = czz.cholesky().unwrap();
        let mean = &cxz * chol.solve(&y);
        let cov = &self.cov_x - &cxz * chol.solve(&cxz.transpose());
        (mean, 0.5 * (&cov + cov.transpose()))
    }

    /// Dense `-2 ln L` of all data (without the `2π` constant).
    pub fn neg2_loglik(&self) -> f64 {
        let czz = &self.m * &self.cov_x * self.m.transpose() + DMatrix::from_diagonal(&self.noise);
        let chol = czz.cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        logdet + self.y.dot(&chol.solve(&self.y))
    }

    /// Mean and variance of `Y_t` at model cell `i` under a posterior of `x`.
    pub fn cell(&self, post: &(DVector<f64>, DMatrix<f64>), t: usize, i: usize) -> (f64, f64) {
        let dim = self.cov_x.nrows();
        let mut a = DVector::zeros(dim);
        a.rows_mut(t * self.r, self.r).copy_from(&self.s_bau.row(i).transpose());
        if !self.lowrank {
            a[self.xi(t).start + i] = 1.0;
        }
        let trend = self.x_bau.row(i).transpose().dot(&self.beta[t - 1]);
        (trend + a.dot(&post.0), a.dot(&(&post.1 * &a)))
    }

    pub fn block(&self, cov: &DMatrix<f64>, a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> DMatrix<f64> {
        cov.view((a.start, b.start), (a.len(), b.len())).into_owned()
    }
}

/// `max |a - b| / max(max |b|, floor)`.
pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Shapes within the oracle's size limits (N ≤ 64, r ≤ 5, T ≤ 4).
pub fn random_shape(seed: u64) -> Shape {
    let mut rng = rng(seed ^ 0x5eed);
    let nx = rng.gen_range(2..=8);
    let ny = rng.gen_range(2..=(64 / nx).min(8));
    Shape { nx, ny, r: rng.gen_range(1..=5), t_len: rng.gen_range(1..=4), p: rng.gen_range(1..=3) }
}

/// Largest relative discrepancies between the engine and the oracle.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleErrors {
    pub filter: f64,
    pub smoother: f64,
    pub lag1: f64,
    pub predict_filter: f64,
    pub predict_smooth: f64,
    pub ggm: f64,
    pub loglik: f64,
}

impl OracleErrors {
    pub fn max_state(&self) -> f64 {
        [self.filter, self.smoother, self.lag1, self.predict_filter, self.predict_smooth, self.ggm]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn merge(&mut self, o: &OracleErrors) {
        self.filter = self.filter.max(o.filter);
        self.smoother = self.smoother.max(o.smoother);
        self.lag1 = self.lag1.max(o.lag1);
        self.predict_filter = self.predict_filter.max(o.predict_filter);
        self.predict_smooth = self.predict_smooth.max(o.predict_smooth);
        self.ggm = self.ggm.max(o.ggm);
        self.loglik = self.loglik.max(o.loglik);
    }
}

fn field_errors(
    oracle: &DenseOracle,
    post: &(DVector<f64>, DMatrix<f64>),
    t: usize,
    field: &dfgp::dynamics::PredictionField,
) -> f64 {
    let n = oracle.n;
    let mut om = DVector::zeros(n);
    let mut ov = DVector::zeros(n);
    for i in 0..n {
        let (m, v) = oracle.cell(post, t, i);
        om[i] = m;
        ov[i] = v;
    }
    let em = DVector::from_vec(field.mean.clone());
    let ev = DVector::from_iterator(n, field.stderr.iter().map(|s| s * s));
    rel_err_vec(&em, &om).max(rel_err_vec(&ev, &ov))
}

/// Runs filter, smoother, lag-one, predictors and likelihood on an
/// instance and compares each with dense conditioning.
pub fn oracle_errors(inst: &Instance, lowrank: bool) -> OracleErrors {
    use dfgp::dynamics::{Engine, EngineOptions};
    let opts = EngineOptions { lowrank_only: lowrank, ..Default::default() };
    let mut engine = Engine::new(&inst.dataset, &inst.params, opts).unwrap();
    let f = engine.filter().unwrap();
    let s = engine.smooth(&f).unwrap();
    let lag = engine.lag1(&f, &s);
    let oracle = DenseOracle::new(inst, lowrank);
    let u = oracle.u;
    let cells: Vec<usize> = (0..oracle.n).collect();
    let mut e = OracleErrors::default();

    for t in 1..=u {
        let post = oracle.posterior(t);
        let m = DVector::from(post.0.rows(t * oracle.r, oracle.r).into_owned());
        let c = oracle.block(&post.1, oracle.eta(t), oracle.eta(t));
        e.filter = e.filter.max(rel_err_vec(&f.filtered[t].mean, &m)).max(rel_err_mat(&f.filtered[t].cov, &c));
        let pf = engine.predict_filtered(&f, t, &cells).unwrap();
        e.predict_filter = e.predict_filter.max(field_errors(&oracle, &post, t, &pf));
        if !lowrank {
            let g = engine.ggm_moments(t, &f.filtered[t], &f.terms[t - 1], &cells).unwrap();
            let xm = DVector::from(post.0.rows(oracle.xi(t).start, oracle.n).into_owned());
            let xv = oracle.block(&post.1, oracle.xi(t), oracle.xi(t)).diagonal();
            let cross = oracle.block(&post.1, oracle.eta(t), oracle.xi(t));
            e.ggm = e
                .ggm
                .max(rel_err_vec(&DVector::from_vec(g.delta_mean.clone()), &xm))
                .max(rel_err_vec(&DVector::from_vec(g.r_diag.clone()), &xv))
                .max(rel_err_mat(&g.cross, &cross));
        }
    }
    let post = oracle.posterior(u);
    for t in 0..=u {
        let m = DVector::from(post.0.rows(t * oracle.r, oracle.r).into_owned());
        let c = oracle.block(&post.1, oracle.eta(t), oracle.eta(t));
        e.smoother = e.smoother.max(rel_err_vec(&s.smoothed[t].mean, &m)).max(rel_err_mat(&s.smoothed[t].cov, &c));
        if t >= 1 {
            let l = oracle.block(&post.1, oracle.eta(t), oracle.eta(t - 1));
            e.lag1 = e.lag1.max(rel_err_mat(&lag[t - 1], &l));
            let ps = engine.predict_smoothed(&f, &s, t, &cells).unwrap();
            e.predict_smooth = e.predict_smooth.max(field_errors(&oracle, &post, t, &ps));
        }
    }
    e.loglik = rel_err(dfgp::likelihood::neg2_loglik_from(&f), oracle.neg2_loglik());
    e
}

struct Objective<'a>(&'a dyn Fn(&[f64]) -> f64);

impl argmin::core::CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        Ok((self.0)(p))
    }
}

/// Derivative-free minimizer used to check closed-form updates: Nelder-Mead
/// restarted a few times with shrinking simplices.
pub fn numerical_argmin(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
    use argmin::core::{Executor, State};
    use argmin::solver::neldermead::NelderMead;
    let mut x = x0.to_vec();
    let mut h = step;
    for _ in 0..6 {
        let mut simplex = vec![x.clone()];
        for i in 0..x.len() {
            let mut v = x.clone();
            v[i] += h * x[i].abs().max(1.0);
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-15).unwrap();
        let res = Executor::new(Objective(f), solver).configure(|s| s.max_iters(20_000)).run().unwrap();
        x = res.state().get_best_param().unwrap().clone();
        h *= 0.1;
    }
    x
}

pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300)
}

fn chol_params(m: &DMatrix<f64>) -> Vec<f64> {
    let l = m.clone().cholesky().unwrap().l();
    let mut v = Vec::new();
    for j in 0..l.ncols() {
        for i in j..l.nrows() {
            v.push(l[(i, j)]);
        }
    }
    v
}

fn from_chol(v: &[f64], r: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(r, r);
    let mut k = 0;
    for j in 0..r {
        for i in j..r {
            l[(i, j)] = v[k];
            k += 1;
        }
    }
    &l * l.transpose()
}

/// One exact E-step and M-step from the instance's parameters, then each
/// closed-form block compared with a numerical minimizer of `-2Q` over
/// that block with the others held at the update. Returns the relative
/// discrepancy per block and whether `-2Q` went down. Expects per-time
/// nuggets and a single dynamics block.
pub fn m_step_discrepancies(inst: &Instance, cfg: &dfgp::estimate::EstimatorConfig) -> (Vec<(String, f64)>, bool) {
    use dfgp::estimate::{e_step, m_step, neg2_q, nugget_sums};
    let data = &inst.dataset;
    let prev = inst.params.clone();
    let (r, u, k_instr) = (prev.r(), prev.t_len(), data.design.n_instruments);
    let stats = e_step(data, &prev, cfg, &mut rng(0)).unwrap();
    let next = m_step(&stats, data, &prev, cfg).unwrap();
    let q = |p: &DfgpParams| neg2_q(&stats, data, p, false).unwrap();
    let mut out = Vec::new();

    for t in 0..u {
        if data.slice(t + 1).is_empty() {
            continue;
        }
        let f = |b: &[f64]| {
            let mut p = next.clone();
            p.sigma2 = prev.sigma2.clone();
            p.beta[t] = DVector::from_column_slice(b);
            q(&p)
        };
        let x = numerical_argmin(&f, prev.beta[t].as_slice(), 0.5);
        out.push((format!("beta_{}", t + 1), rel(&x, next.beta[t].as_slice())));

        let f = |s: &[f64]| {
            let mut p = next.clone();
            p.sigma2[t] = s.iter().map(|v| v.exp()).collect();
            q(&p)
        };
        let x0: Vec<f64> = prev.sigma2[t].iter().map(|v| v.ln()).collect();
        let x: Vec<f64> = numerical_argmin(&f, &x0, 0.5).iter().map(|v| v.exp()).collect();
        let counts = nugget_sums(data, &stats, &next.beta[t], t + 1);
        for k in 0..k_instr {
            if counts[k].1 > 0 {
                out.push((format!("sigma2_{},{}", t + 1, k + 1), rel(&[x[k]], &[next.sigma2[t][k]])));
            }
        }

        let f = |g: &[f64]| {
            let mut p = next.clone();
            let gamma = g[0];
            if gamma < data.design.car.gamma_lo() || gamma > data.design.car.gamma_hi() {
                return f64::INFINITY;
            }
            p.car[t] = CarParams::new(gamma, g[1].exp());
            q(&p)
        };
        let x = numerical_argmin(&f, &[prev.car[t].gamma.min(0.9), prev.car[t].tau2.ln()], 0.05);
        out.push((format!("car_{}", t + 1), rel(&[x[0], x[1].exp()], &[next.car[t].gamma, next.car[t].tau2])));
    }

    let f = |v: &[f64]| {
        let mut p = next.clone();
        p.k0 = from_chol(v, r);
        q(&p)
    };
    let x = from_chol(&numerical_argmin(&f, &chol_params(&prev.k0), 0.3), r);
    out.push(("K0".into(), rel(x.as_slice(), next.k0.as_slice())));

    let f = |v: &[f64]| {
        let mut p = next.clone();
        p.h.iter_mut().for_each(|h| *h = DMatrix::from_column_slice(r, r, v));
        q(&p)
    };
    let x = numerical_argmin(&f, prev.h[0].as_slice(), 0.3);
    out.push(("H".into(), rel(&x, next.h[0].as_slice())));

    let f = |v: &[f64]| {
        let mut p = next.clone();
        let m = from_chol(v, r);
        p.u.iter_mut().for_each(|x| *x = m.clone());
        q(&p)
    };
    let x = from_chol(&numerical_argmin(&f, &chol_params(&prev.u[0]), 0.3), r);
    out.push(("U".into(), rel(x.as_slice(), next.u[0].as_slice())));

    (out, q(&next) <= q(&prev))
}

/// `(value, gamma)` minimizing the CAR profile over a regular grid.
pub fn gamma_grid_search(car: &CarStructure, a: f64, b: f64, step: f64) -> (f64, f64) {
    let (lo, hi) = (car.gamma_lo(), car.gamma_hi());
    let mut best = (f64::INFINITY, lo);
    let mut gamma = lo;
    while gamma <= hi {
        let v = dfgp::estimate::gamma_profile(car, a, b, gamma).unwrap();
        if v < best.0 {
            best = (v, gamma);
        }
        gamma += step;
    }
    best
}
