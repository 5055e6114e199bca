mod common;

use std::sync::Arc;

use common::*;
use dfgp::car::{CarParams, CarStructure, IsolatedPolicy, Neighborhood};
use dfgp::dynamics::{forecast_step, Engine, EngineOptions, StatePosterior};
use dfgp::grid::BauGrid;
use dfgp::model::{Dataset, Design, DfgpParams, TimeSlice};
use dfgp::sparse::RowSparse;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn forecast_identity_and_scalar() {
    let prev = StatePosterior {
        time: 0,
        mean: DVector::from_vec(vec![1.0, -2.0]),
        cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
    };
    let f = forecast_step(&prev, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
    assert_eq!(f.mean, prev.mean);
    assert_eq!(f.cov, prev.cov);
    assert_eq!(f.time, 1);

    let zero = StatePosterior { time: 0, mean: DVector::zeros(2), cov: prev.cov.clone() };
    let f = forecast_step(&zero, &DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -2.0, 0.1]), &DMatrix::identity(2, 2)).unwrap();
    assert_eq!(f.mean, DVector::zeros(2));

    let s = StatePosterior { time: 0, mean: DVector::from_vec(vec![1.0]), cov: DMatrix::from_element(1, 1, 4.0) };
    let f = forecast_step(&s, &DMatrix::from_element(1, 1, 0.5), &DMatrix::from_element(1, 1, 1.0)).unwrap();
    assert_eq!(f.cov[(0, 0)], 2.0);
    assert!(forecast_step(&s, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).is_err());
}

fn small_design(nx: usize, ny: usize, r: usize) -> (BauGrid, Arc<Design>) {
    let grid = BauGrid::new(nx, ny, 1.0, [0.0, 0.0]).unwrap();
    let n = nx * ny;
    let car = Arc::new(CarStructure::from_grid(&grid, Neighborhood::Rook).unwrap());
    let s = DMatrix::from_fn(n, r, |i, k| ((i * (k + 2)) as f64 * 0.41).cos().abs());
    let x = DMatrix::from_element(n, 1, 1.0);
    (grid, Arc::new(Design::new(car, s, x, 1).unwrap()))
}

#[test]
fn no_data_step_keeps_forecast_and_prior_fine_scale() {
    let (grid, design) = small_design(3, 3, 2);
    let empty = TimeSlice::new(1, DVector::zeros(0), RowSparse::new(9), vec![], vec![], &design).unwrap();
    let data = Dataset::new(design.clone(), vec![empty]).unwrap();
    let car = CarParams::new(0.6, 0.8);
    let params = DfgpParams::constant(
        1,
        DVector::from_vec(vec![0.0]),
        DMatrix::identity(2, 2) * 0.7,
        DMatrix::identity(2, 2) * 0.5,
        DMatrix::identity(2, 2),
        car,
        vec![0.1],
    );
    let mut e = Engine::new(&data, &params, EngineOptions::default()).unwrap();
    let f = e.filter().unwrap();
    assert_eq!(f.filtered[1], StatePosterior { time: 1, ..f.forecast[0].clone() });
    let cells: Vec<usize> = (0..9).collect();
    let g = e.ggm_moments(1, &f.filtered[1], &f.terms[0], &cells).unwrap();
    assert!(g.delta_mean.iter().all(|&v| v == 0.0));
    let qinv = dense_q(&grid, &car).try_inverse().unwrap();
    for i in 0..9 {
        assert!((g.r_diag[i] - qinv[(i, i)]).abs() < 1e-12);
    }
    // Prior predictive with beta = 0.
    let p = e.predict_filtered(&f, 1, &cells).unwrap();
    assert!(p.mean.iter().all(|&m| m == 0.0));
    for i in 0..9 {
        let s = design.s_bau.row(i).transpose();
        let v = s.dot(&(&f.forecast[0].cov * &s)) + qinv[(i, i)];
        assert!((p.stderr[i].powi(2) - v).abs() < 1e-12);
    }
}

#[test]
fn uninformative_data_leaves_forecast() {
    let (_, design) = small_design(3, 3, 2);
    let b = RowSparse::selection(9, &[0, 4, 8]);
    let slice = TimeSlice::new(1, DVector::from_vec(vec![3.0, -1.0, 2.0]), b, vec![1e12; 3], vec![0; 3], &design).unwrap();
    let data = Dataset::new(design, vec![slice]).unwrap();
    let params = DfgpParams::constant(
        1,
        DVector::from_vec(vec![0.2]),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 0.5,
        DMatrix::identity(2, 2),
        CarParams::new(0.5, 1.0),
        vec![1.0],
    );
    let f = Engine::new(&data, &params, EngineOptions::default()).unwrap().filter().unwrap();
    assert!((&f.filtered[1].mean - &f.forecast[0].mean).amax() < 1e-6);
    assert!((&f.filtered[1].cov - &f.forecast[0].cov).amax() < 1e-6);
    assert!(f.gain_s[0].amax() < 1e-6);
}

#[test]
fn interpolation_limit_reproduces_observation() {
    let (_, design) = small_design(4, 4, 2);
    let b = RowSparse::selection(16, &[5]);
    let slice = TimeSlice::new(1, DVector::from_vec(vec![2.5]), b, vec![1e-10], vec![0], &design).unwrap();
    let data = Dataset::new(design, vec![slice]).unwrap();
    let params = DfgpParams::constant(
        1,
        DVector::from_vec(vec![0.3]),
        DMatrix::identity(2, 2) * 0.9,
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        CarParams::new(0.8, 1.0),
        vec![1.0],
    );
    let mut e = Engine::new(&data, &params, EngineOptions::default()).unwrap();
    let f = e.filter().unwrap();
    let p = e.predict_filtered(&f, 1, &[5]).unwrap();
    assert!((p.mean[0] - 2.5).abs() < 1e-6, "{}", p.mean[0]);
    assert!(p.stderr[0] < 1e-4);
}

#[test]
fn scalar_smoother_and_lag_one() {
    // r = 1, one cell observed directly each step, no fine-scale term.
    let grid = BauGrid::new(1, 1, 1.0, [0.0, 0.0]).unwrap();
    let car = Arc::new(CarStructure::from_edges(1, &[], IsolatedPolicy::UnitDegree).unwrap());
    let design = Arc::new(Design::new(car, DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.0), 1).unwrap());
    let slices = [1.0, -0.5]
        .iter()
        .enumerate()
        .map(|(k, &z)| TimeSlice::new(k + 1, DVector::from_vec(vec![z]), RowSparse::selection(1, &[0]), vec![1.0], vec![0], &design).unwrap())
        .collect();
    let data = Dataset::new(design, slices).unwrap();
    let params = DfgpParams::constant(
        2,
        DVector::from_vec(vec![0.0]),
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 2.0),
        CarParams::new(0.0, 1.0),
        vec![0.5],
    );
    let inst = Instance { grid, dataset: data, params };
    let e = oracle_errors(&inst, true);
    assert!(e.max_state() < 1e-12, "{e:?}");
    assert!(e.loglik < 1e-12);
    // Hand values: P_{1|0} = 0.25*2 + 1 = 1.5, P_{1|1} = 1.5*0.5/2 = 0.375.
    let f = Engine::new(&inst.dataset, &inst.params, EngineOptions { lowrank_only: true, ..Default::default() })
        .unwrap()
        .filter()
        .unwrap();
    assert!((f.forecast[0].cov[(0, 0)] - 1.5).abs() < 1e-15);
    assert!((f.filtered[1].cov[(0, 0)] - 0.375).abs() < 1e-15);
}

#[test]
fn smoothed_equals_filtered_at_last_step_and_without_coupling() {
    let mut inst = random_instance(11, Shape { nx: 4, ny: 3, r: 2, t_len: 3, p: 2 });
    let mut e = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap();
    let f = e.filter().unwrap();
    let s = e.smooth(&f).unwrap();
    assert_eq!(s.smoothed[3], f.filtered[3]);
    let cells: Vec<usize> = (0..12).collect();
    assert_eq!(e.predict_smoothed(&f, &s, 3, &cells).unwrap(), e.predict_filtered(&f, 3, &cells).unwrap());

    for h in &mut inst.params.h {
        h.fill(0.0);
    }
    let mut e = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap();
    let f = e.filter().unwrap();
    let s = e.smooth(&f).unwrap();
    let lag = e.lag1(&f, &s);
    for t in 1..=3 {
        assert!(s.j[t - 1].amax() == 0.0);
        assert!((&s.smoothed[t].mean - &f.filtered[t].mean).amax() < 1e-14);
        assert!((&s.smoothed[t].cov - &f.filtered[t].cov).amax() < 1e-14);
        assert_eq!(lag[t - 1].amax(), 0.0);
        let a = e.predict_smoothed(&f, &s, t, &cells).unwrap();
        let b = e.predict_filtered(&f, t, &cells).unwrap();
        for i in 0..12 {
            assert!((a.mean[i] - b.mean[i]).abs() < 1e-12 && (a.stderr[i] - b.stderr[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn lag_one_without_final_data() {
    let inst = random_instance(5, Shape { nx: 3, ny: 3, r: 2, t_len: 2, p: 1 });
    let mut slices: Vec<TimeSlice> = vec![inst.dataset.slice(1).subset(&(0..inst.dataset.slice(1).len()).collect::<Vec<_>>())];
    slices.push(inst.dataset.slice(2).subset(&[]));
    let data = Dataset::new(inst.dataset.design.clone(), slices).unwrap();
    let e = Engine::new(&data, &inst.params, EngineOptions::default()).unwrap();
    let ys: Vec<DVector<f64>> = (1..=2).map(|t| e.detrended(t)).collect();
    let f = e.filter_with(&ys).unwrap();
    let s = e.smooth(&f).unwrap();
    let lag = e.lag1(&f, &s);
    let expect = &inst.params.h[1] * &f.filtered[1].cov;
    assert!((&lag[1] - expect).amax() < 1e-12);
}

#[test]
fn oracle_nine_cells_two_functions() {
    for seed in 0..4 {
        let inst = random_instance(100 + seed, Shape { nx: 3, ny: 3, r: 2, t_len: 3, p: 2 });
        let e = oracle_errors(&inst, false);
        assert!(e.max_state() < 1e-8, "seed {seed}: {e:?}");
        assert!(e.loglik < 1e-8, "seed {seed}: {e:?}");
    }
}

#[test]
fn oracle_random_shapes() {
    for seed in 0..12 {
        let inst = random_instance(seed, random_shape(seed));
        let e = oracle_errors(&inst, false);
        assert!(e.max_state() < 1e-6, "seed {seed}: {e:?}");
        let e = oracle_errors(&inst, true);
        assert!(e.max_state() < 1e-6, "low-rank seed {seed}: {e:?}");
    }
}

#[test]
fn unknown_prediction_cell_is_rejected() {
    let inst = random_instance(3, Shape { nx: 3, ny: 2, r: 1, t_len: 1, p: 1 });
    let mut e = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap();
    let f = e.filter().unwrap();
    assert!(e.predict_filtered(&f, 1, &[6]).is_err());
}

#[test]
fn full_prediction_covariance_matches_oracle() {
    let inst = random_instance(21, Shape { nx: 4, ny: 4, r: 3, t_len: 2, p: 1 });
    let mut e = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap();
    let f = e.filter().unwrap();
    let cells = [0usize, 5, 6, 15];
    let cov = e.prediction_cov(2, &f.filtered[2], &cells).unwrap();
    let oracle = DenseOracle::new(&inst, false);
    let post = oracle.posterior(2);
    let dim = oracle.cov_x.nrows();
    let rows: Vec<DVector<f64>> = cells
        .iter()
        .map(|&i| {
            let mut a = DVector::zeros(dim);
            a.rows_mut(2 * oracle.r, oracle.r).copy_from(&oracle.s_bau.row(i).transpose());
            a[oracle.xi(2).start + i] = 1.0;
            a
        })
        .collect();
    let expect = DMatrix::from_fn(4, 4, |a, b| rows[a].dot(&(&post.1 * &rows[b])));
    assert!(rel_err_mat(&cov, &expect) < 1e-9);
}

#[test]
fn compact_retention_gives_same_predictions() {
    let inst = random_instance(8, Shape { nx: 5, ny: 4, r: 3, t_len: 3, p: 2 });
    let cells: Vec<usize> = (0..20).collect();
    let mut full = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap();
    let ff = full.filter().unwrap();
    let opts = EngineOptions { retain: dfgp::dynamics::Retain::Compact, ..Default::default() };
    let mut compact = Engine::new(&inst.dataset, &inst.params, opts).unwrap();
    let fc = compact.filter().unwrap();
    let sc = compact.smooth(&fc).unwrap();
    let sf = full.smooth(&ff).unwrap();
    for t in 1..=3 {
        assert_eq!(full.predict_smoothed(&ff, &sf, t, &cells).unwrap(), compact.predict_smoothed(&fc, &sc, t, &cells).unwrap());
    }
    assert_eq!(ff.innovations, fc.innovations);
    // Other data would need the dropped factors.
    let other: Vec<_> = (1..=3).map(|t| compact.detrended(t).add_scalar(1.0)).collect();
    if (1..=3).any(|t| compact.operator(t).n_obs() > 0) {
        assert!(compact.filter_with(&other).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn engine_matches_oracle(seed in 0u64..10_000) {
        let inst = random_instance(seed, random_shape(seed));
        let e = oracle_errors(&inst, false);
        prop_assert!(e.max_state() < 1e-6, "{:?}", e);
    }

    #[test]
    fn covariances_stay_symmetric_psd(seed in 0u64..10_000) {
        let inst = random_instance(seed, random_shape(seed));
        let mut e = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap();
        let f = e.filter().unwrap();
        let s = e.smooth(&f).unwrap();
        for p in f.filtered.iter().chain(&f.forecast).chain(&s.smoothed) {
            prop_assert_eq!((&p.cov - p.cov.transpose()).amax(), 0.0);
            let eig = p.cov.clone().symmetric_eigenvalues();
            let tr = p.cov.trace();
            prop_assert!(eig.iter().all(|&l| l >= -1e-10 * tr));
        }
    }

    #[test]
    fn more_data_never_raises_filter_variance(seed in 0u64..10_000, drop in 1usize..6) {
        let inst = random_instance(seed, Shape { nx: 4, ny: 4, r: 2, t_len: 2, p: 1 });
        let cells: Vec<usize> = (0..16).collect();
        let t = 2;
        let full = inst.dataset.slice(t);
        prop_assume!(full.len() > drop);
        let keep: Vec<usize> = (drop..full.len()).collect();
        let mut slices = vec![inst.dataset.slice(1).subset(&(0..inst.dataset.slice(1).len()).collect::<Vec<_>>())];
        slices.push(full.subset(&keep));
        let fewer = Dataset::new(inst.dataset.design.clone(), slices).unwrap();
        let mut a = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap();
        let fa = a.filter().unwrap();
        let mut b = Engine::new(&fewer, &inst.params, EngineOptions::default()).unwrap();
        let fb = b.filter().unwrap();
        let pa = a.predict_filtered(&fa, t, &cells).unwrap();
        let pb = b.predict_filtered(&fb, t, &cells).unwrap();
        for i in 0..16 {
            prop_assert!(pa.stderr[i] <= pb.stderr[i] * (1.0 + 1e-9) + 1e-12);
        }
    }
}

#[test]
fn oracle_notices_perturbed_parameters() {
    let inst = random_instance(42, Shape { nx: 4, ny: 3, r: 2, t_len: 3, p: 1 });
    let oracle = DenseOracle::new(&inst, false);
    let mut params = inst.params.clone();
    for c in &mut params.car {
        c.gamma *= 0.9;
    }
    params.sigma2[0][0] *= 1.1;
    let f = Engine::new(&inst.dataset, &params, EngineOptions::default()).unwrap().filter().unwrap();
    let ll = dfgp::likelihood::neg2_loglik_from(&f);
    assert!(rel_err(ll, oracle.neg2_loglik()) > 1e-6, "{ll} {}", oracle.neg2_loglik());
    let exact = Engine::new(&inst.dataset, &inst.params, EngineOptions::default()).unwrap().filter().unwrap();
    assert!(rel_err(dfgp::likelihood::neg2_loglik_from(&exact), oracle.neg2_loglik()) < 1e-10);
}
