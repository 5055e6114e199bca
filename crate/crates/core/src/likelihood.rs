//! Marginal and complete-data likelihoods (as `-2 ln L`, up to constants).

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Engine, EngineOptions, FilterOutput};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, CompensatedSum};
use crate::model::{Dataset, DfgpParams};

/// `Σ_t ln|Σ_{t|t-1}| + α_t'Σ_{t|t-1}⁻¹α_t` from a finished forward pass.
pub fn neg2_loglik_from(f: &FilterOutput) -> f64 {
    f.innovations.iter().flat_map(|r| [r.logdet, r.quad]).collect::<CompensatedSum>().value()
}

/// Marginal `-2 ln L` of all slices of `data` under `params`.
pub fn neg2_loglik(data: &Dataset, params: &DfgpParams, opts: EngineOptions) -> Result<f64> {
    let engine = Engine::new(data, params, opts)?;
    Ok(neg2_loglik_from(&engine.filter_with(
        &(1..=data.t_len()).map(|t| engine.detrended(t)).collect::<Vec<_>>(),
    )?))
}

/// Complete-data `-2 ln L` given the states `η_0..η_u` and `ξ_1..ξ_u`.
/// With `lowrank_only` the fine-scale terms are left out and `xi` may be
/// empty.
pub fn neg2_complete_loglik(
    data: &Dataset,
    params: &DfgpParams,
    eta: &[DVector<f64>],
    xi: &[Vec<f64>],
    lowrank_only: bool,
) -> Result<f64> {
    let u = data.t_len();
    let design = &data.design;
    if eta.len() != u + 1 {
        return Err(Error::Dimension(format!("need eta_0..eta_{u}, got {} states", eta.len())));
    }
    if !lowrank_only && xi.len() != u {
        return Err(Error::Dimension(format!("need xi_1..xi_{u}, got {}", xi.len())));
    }
    params.validate(design, u)?;
    let mut acc = CompensatedSum::new();
    for t in 1..=u {
        let slice = data.slice(t);
        let mut field = &design.s_bau * &eta[t];
        if !lowrank_only {
            if xi[t - 1].len() != design.n() {
                return Err(Error::Dimension(format!("xi_{t} has length {}", xi[t - 1].len())));
            }
            field += DVector::from_column_slice(&xi[t - 1]);
        }
        let fitted = slice.b.mul_vec(field.as_slice());
        let noise = slice.noise_variances(&params.sigma2[t - 1]);
        let mean = &slice.x * &params.beta[t - 1];
        for j in 0..slice.len() {
            let e = slice.z[j] - mean[j] - fitted[j];
            acc.add(e * e / noise[j]);
            acc.add(noise[j].ln());
        }
        acc.add(gaussian_term(&(&eta[t] - &params.h[t - 1] * &eta[t - 1]), &params.u[t - 1], t)?);
        if !lowrank_only {
            let q = design.car.precision(&params.car[t - 1])?;
            acc.add(q.quad_form(&xi[t - 1]));
            acc.add(-design.car.logdet_precision(&params.car[t - 1])?);
        }
    }
    acc.add(gaussian_term(&eta[0], &params.k0, 0)?);
    Ok(acc.value())
}

/// `x'M⁻¹x + ln|M|`.
fn gaussian_term(x: &DVector<f64>, m: &DMatrix<f64>, t: usize) -> Result<f64> {
    let c = cholesky(m).map_err(|e| e.at_time(t))?;
    let logdet = 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(x.dot(&c.solve(x)) + logdet)
}
