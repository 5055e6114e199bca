//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,7` runs a subset; `ACCEPTANCE_STRICT=1` turns any
//! failure into a nonzero exit status.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use dfgp::basis::LAYOUT_99;
use dfgp::car::CarParams;
use dfgp::dynamics::{Engine, EngineOptions, Retain};
use dfgp::estimate::{e_step, initial_params, m_step, run_estimator, update_car, EmMode, EstimatorConfig, GammaSearch};
use dfgp::eval::{crps_gaussian, rmspe, run_cv, CvConfig, HoldoutPlan, Method, Protocol};
use dfgp::likelihood::neg2_loglik;
use dfgp::synth::{generate, ScenarioConfig};
use rand::Rng;

/// Tracks the largest single request and the live-byte high-water mark.
struct Counting;

static LARGEST: AtomicUsize = AtomicUsize::new(0);
static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
            let live = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(live, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

const ORACLE_INSTANCES: u64 = 60;

fn oracle_instance(i: u64) -> Instance {
    random_instance(1000 + i, random_shape(1000 + i))
}

fn dense_oracle_equivalence() -> Outcome {
    let mut worst = OracleErrors::default();
    let mut worst_lr = OracleErrors::default();
    for i in 0..ORACLE_INSTANCES {
        let inst = oracle_instance(i);
        worst.merge(&oracle_errors(&inst, false));
        worst_lr.merge(&oracle_errors(&inst, true));
    }
    let (a, b) = (worst.max_state(), worst_lr.max_state());
    outcome(
        a < 1e-6 && b < 1e-6,
        format!(
            "{ORACLE_INSTANCES} instances, max rel err {a:.1e} (filter {:.1e}, smoother {:.1e}, lag-1 {:.1e}, \
             predictors {:.1e}/{:.1e}); low-rank {b:.1e}",
            worst.filter, worst.smoother, worst.lag1, worst.predict_filter, worst.predict_smooth
        ),
    )
}

fn likelihood_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let inst = oracle_instance(i);
        for lowrank in [false, true] {
            let opts = EngineOptions { lowrank_only: lowrank, ..Default::default() };
            let v = neg2_loglik(&inst.dataset, &inst.params, opts).unwrap();
            worst = worst.max(rel_err(v, DenseOracle::new(&inst, lowrank).neg2_loglik()));
        }
    }
    outcome(worst < 1e-8, format!("{ORACLE_INSTANCES} instances x 2 modes, max rel err {worst:.1e}"))
}

fn exact_em_monotonicity() -> Outcome {
    let cfg = EstimatorConfig { mode: EmMode::Exact, ..Default::default() };
    let mut worst_rise = f64::NEG_INFINITY;
    let mut chol_failures = 0;
    let mut errors = Vec::new();
    for seed in 0..10 {
        let inst = random_instance(300 + seed, Shape { nx: 4, ny: 4, r: 2, t_len: 3, p: 2 });
        let data = &inst.dataset;
        let mut params = initial_params(data, &cfg).unwrap();
        let mut prev = f64::INFINITY;
        for it in 0..50 {
            let stats = match e_step(data, &params, &cfg, &mut rng(seed)) {
                Ok(s) => s,
                Err(e) => {
                    errors.push(format!("seed {seed} iteration {it}: {e}"));
                    break;
                }
            };
            worst_rise = worst_rise.max(stats.neg2loglik - prev);
            prev = stats.neg2loglik;
            params = match m_step(&stats, data, &params, &cfg) {
                Ok(p) => p,
                Err(e) => {
                    errors.push(format!("seed {seed} iteration {it}: {e}"));
                    break;
                }
            };
            chol_failures += params.k0.clone().cholesky().is_none() as usize;
            chol_failures += params.u.iter().filter(|u| (*u).clone().cholesky().is_none()).count();
        }
    }
    outcome(
        worst_rise <= 1e-9 && chol_failures == 0 && errors.is_empty(),
        format!(
            "10 instances x 50 iterations, largest -2lnL increase {worst_rise:.1e}, {chol_failures} Cholesky failures{}",
            errors.first().map_or(String::new(), |e| format!(", error: {e}"))
        ),
    )
}

fn m_step_correctness() -> Outcome {
    let cfg = EstimatorConfig { mode: EmMode::Exact, time_invariant_nugget: false, ..Default::default() };
    let mut worst = (String::new(), 0.0);
    let mut q_ok = true;
    for seed in [31, 33, 35] {
        let inst = random_instance(seed, Shape { nx: 3, ny: 3, r: 2, t_len: 3, p: 2 });
        let (errs, improved) = m_step_discrepancies(&inst, &cfg);
        q_ok &= improved;
        for (name, e) in errs {
            if e > worst.1 {
                worst = (format!("{name} (seed {seed})"), e);
            }
        }
    }

    let inst = random_instance(0, Shape { nx: 5, ny: 4, r: 1, t_len: 1, p: 1 });
    let car = &inst.dataset.design.car;
    let mut g = rng(3);
    let step = 1e-3;
    let mut gamma_gap: f64 = 0.0;
    for truth in [0.0, 0.2, 0.4, 0.8, 0.97] {
        let params = CarParams::new(truth, 1.3);
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..20 {
            let xi = dfgp::car::sample_car(car, &params, &mut g).unwrap();
            let (x, y) = car.quad_stats(&xi);
            a += x / 20.0;
            b += y / 20.0;
        }
        let fit = update_car(car, a, b, &GammaSearch::default()).unwrap();
        gamma_gap = gamma_gap.max((fit.gamma - gamma_grid_search(car, a, b, step).1).abs());
    }
    outcome(
        worst.1 < 1e-4 && q_ok && gamma_gap <= step,
        format!("max block discrepancy {:.1e} at {}; gamma vs 1e-3 grid {gamma_gap:.1e}", worst.1, worst.0),
    )
}

fn parameter_recovery() -> Outcome {
    let base = ScenarioConfig::default();
    let truth_s2: Vec<f64> = base.instruments.iter().map(|i| i.sigma2).collect();
    let mut s2: Vec<Vec<f64>> = vec![Vec::new(); truth_s2.len()];
    let mut gamma = Vec::new();
    for seed in 1..=5 {
        let cfg = ScenarioConfig { seed, ..base.clone() };
        let (_, _, data) = generate(&cfg).unwrap();
        let est = EstimatorConfig { seed, ..Default::default() };
        let fit = run_estimator(&data, &est, None).unwrap();
        let p = &fit.params;
        for (k, v) in s2.iter_mut().enumerate() {
            v.push(median(&mut p.sigma2.iter().map(|s| s[k]).collect::<Vec<_>>()));
        }
        gamma.push(median(&mut p.car.iter().map(|c| c.gamma).collect::<Vec<_>>()));
    }
    let ratios: Vec<f64> = s2.iter_mut().zip(&truth_s2).map(|(v, t)| median(v) / t).collect();
    let g = median(&mut gamma);
    let pass = ratios.iter().all(|r| (0.7..=1.3).contains(r)) && (g - base.truth.gamma).abs() <= 0.15;
    outcome(
        pass,
        format!(
            "sigma2 ratio to truth {}; gamma {g:.3} (truth {})",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", "),
            base.truth.gamma
        ),
    )
}

fn directional_reproduction() -> Outcome {
    const REPS: u64 = 20;
    let base = ScenarioConfig::default();
    let (nx, ny) = (base.nx as f64, base.ny as f64);
    // [method][protocol] -> per-replication (rmspe, crps) averages, plus
    // per-replication averages over the times both protocols score.
    let mut agg = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    let mut common_times = [Vec::new(), Vec::new()];
    for rep in 1..=REPS {
        let cfg = ScenarioConfig { seed: rep, ..base.clone() };
        let (truth, batches, _) = generate(&cfg).unwrap();
        let plan = HoldoutPlan {
            block_lo: Some([(0.35 * nx).round(), (0.35 * ny).round()]),
            block_hi: Some([(0.65 * nx).round(), (0.65 * ny).round()]),
            block_times: [1, cfg.t_len],
            random_fraction: 0.1,
            instrument: 1,
            seed: rep,
        };
        let cv = CvConfig {
            methods: vec![Method::Dfgp, Method::LowRank],
            estimator: EstimatorConfig { seed: rep, ..Default::default() },
            ..Default::default()
        };
        for (j, protocol) in [Protocol::Filtering, Protocol::Smoothing].into_iter().enumerate() {
            let rep = run_cv(Arc::clone(&truth.design), &truth.grid, &batches, &plan, protocol, &cv).unwrap();
            for (i, m) in [Method::Dfgp, Method::LowRank].into_iter().enumerate() {
                let row = rep.row(m, None, None).unwrap();
                agg[i][j].push((row.rmspe, row.crps));
                if i == 0 {
                    let at: Vec<(f64, f64)> = (2..cfg.t_len)
                        .map(|t| rep.row(m, Some(t), None).map(|r| (r.rmspe, r.crps)).unwrap())
                        .collect();
                    common_times[j].push((mean(&at.iter().map(|x| x.0).collect::<Vec<_>>()), mean(&at.iter().map(|x| x.1).collect::<Vec<_>>())));
                }
            }
        }
    }
    let m = |v: &[(f64, f64)]| (mean(&v.iter().map(|x| x.0).collect::<Vec<_>>()), mean(&v.iter().map(|x| x.1).collect::<Vec<_>>()));
    let (dfgpf, frf) = (m(&agg[0][0]), m(&agg[1][0]));
    let (dfgps, frs) = (m(&agg[0][1]), m(&agg[1][1]));
    let (cf, cs) = (m(&common_times[0]), m(&common_times[1]));
    let pass = dfgpf.0 < frf.0 && dfgps.0 < frs.0 && cs.0 <= cf.0 && dfgpf.1 < frf.1 && dfgps.1 < frs.1 && cs.1 <= cf.1;
    outcome(
        pass,
        format!(
            "{REPS} reps, RMSPE/CRPS: DFGPF {:.4}/{:.4} vs FRF {:.4}/{:.4}; DFGPS {:.4}/{:.4} vs FRS {:.4}/{:.4}; \
             common t: DFGPS {:.4}/{:.4} vs DFGPF {:.4}/{:.4}",
            dfgpf.0, dfgpf.1, frf.0, frf.1, dfgps.0, dfgps.1, frs.0, frs.1, cs.0, cs.1, cf.0, cf.1
        ),
    )
}

/// Standard normal quantile by bisection on `erfc`.
fn probit(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if 0.5 * libm::erfc(-mid / std::f64::consts::SQRT_2) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn scoring_rules() -> Outcome {
    // Stratified Monte Carlo with 10^6 draws: one uniform per stratum.
    const N: usize = 1_000_000;
    let mut g = rng(7);
    let z: Vec<f64> = (0..N).map(|i| probit((i as f64 + g.gen::<f64>()) / N as f64)).collect();
    let mut worst: f64 = 0.0;
    for mu in [-1.0, 0.0, 2.5] {
        for sigma in [0.3, 1.0, 2.0] {
            for y in [-2.0, 0.0, 0.7, 3.0] {
                // E|X - y| - E|X - X'| / 2, with X - X' ~ N(0, 2 sigma^2).
                let a = z.iter().map(|z| (mu + sigma * z - y).abs()).sum::<f64>() / N as f64;
                let b = z.iter().map(|z| (std::f64::consts::SQRT_2 * sigma * z).abs()).sum::<f64>() / N as f64;
                worst = worst.max((crps_gaussian(mu, sigma, y).unwrap() - (a - 0.5 * b)).abs());
            }
        }
    }
    let hand = [
        (vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], 0.0),
        (vec![0.0, 0.0], vec![3.0, 4.0], 12.5_f64.sqrt()),
        (vec![1.0], vec![-1.0], 2.0),
        (vec![0.0; 4], vec![1.0, -1.0, 1.0, -1.0], 1.0),
    ];
    let hand_ok = hand.iter().all(|(p, t, want)| rmspe(p, t).unwrap() == *want);
    outcome(
        worst < 1e-3 && hand_ok,
        format!("36 lattice points, max |CRPS - MC| {worst:.1e}; RMSPE hand cases {}", if hand_ok { "exact" } else { "wrong" }),
    )
}

fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status.lines().find(|l| l.starts_with("VmHWM"))?.split_whitespace().nth(1)?.parse().ok()
}

fn scalability() -> Outcome {
    let cfg = ScenarioConfig { nx: 500, ny: 500, basis_counts: LAYOUT_99.to_vec(), seed: 8, ..Default::default() };
    let (truth, _, data) = generate(&cfg).unwrap();
    let (n, r) = (data.design.n(), data.design.r());
    LARGEST.store(0, Ordering::Relaxed);
    PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
    let start = Instant::now();
    let mut engine =
        Engine::new(&data, &truth.params, EngineOptions { lowrank_only: false, retain: Retain::Compact }).unwrap();
    let f = engine.filter().unwrap();
    let s = engine.smooth(&f).unwrap();
    let cells: Vec<usize> = (0..n).collect();
    let mut finite = true;
    for t in 1..=data.t_len() {
        let p = engine.predict_smoothed(&f, &s, t, &cells).unwrap();
        finite &= p.mean.iter().chain(&p.stderr).all(|v| v.is_finite());
    }
    let elapsed = start.elapsed();
    let largest = LARGEST.load(Ordering::Relaxed);
    // Anything dense N x N would be N/r times larger than the biggest
    // legitimate buffer (an N x r basis or gain matrix).
    let linear = largest <= 2 * n * r * 8;
    outcome(
        finite && linear && elapsed < Duration::from_secs(30 * 60),
        format!(
            "N={n}, r={r}, T={}, {} obs: {:.0} s; largest allocation {:.0} MB (N x r = {:.0} MB); peak live {:.2} GB, peak RSS {:.2} GB",
            data.t_len(),
            data.n_obs(),
            elapsed.as_secs_f64(),
            largest as f64 / 1e6,
            (n * r * 8) as f64 / 1e6,
            PEAK.load(Ordering::Relaxed) as f64 / 1e9,
            peak_rss_kb().unwrap_or(0) as f64 / 1e6
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "dense-oracle equivalence", dense_oracle_equivalence),
        (2, "likelihood equivalence", likelihood_equivalence),
        (3, "exact EM monotonicity", exact_em_monotonicity),
        (4, "M-step correctness", m_step_correctness),
        (5, "parameter recovery", parameter_recovery),
        (6, "directional reproduction", directional_reproduction),
        (7, "scoring rules", scoring_rules),
        (8, "scalability", scalability),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let res = run();
        failed += !res.pass as usize;
        println!(
            "{} criterion {id} ({name}): {} [{:.1} s]",
            if res.pass { "PASS" } else { "FAIL" },
            res.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
