//! Second-order MSE machinery for the EBLUP: the g1/g2/g3 components, the
//! Taylor-series MSE estimator of the multi-goal fit (no bias correction
//! needed), the variance formula for the shrinkage estimator, and the
//! single parametric bootstrap MSE estimator.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{fit, maximize_adjusted_likelihood, FitMethod, FitResult};
use crate::likelihood::{reml_eval, DerivOrder};
use crate::model::{blup_with_beta, shrinkage, trace_v_inv_pow, AreaLevelDataset, GlsSolution};
use crate::numeric::pairwise_sum;
use crate::rng::{standard_normal, stream};

/// Components of the second-order MSE approximation at a given `A`:
///
/// ```text
/// g1 = A D_i / (A + D_i)                      (leading prediction variance)
/// g2 = B_i^2 x_i' (X' V^-1 X)^-1 x_i          (beta estimation)
/// g3 = 2 D_i^2 / [(A + D_i)^3 tr(V^-2)]       (A estimation)
/// ```
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MseComponents {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub taylor_total: f64,
}

pub fn g_components(data: &AreaLevelDataset, a: f64, i: usize) -> Result<MseComponents> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!(
            "MSE components require A > 0, got {a}"
        )));
    }
    if i >= data.m() {
        return Err(Error::Domain(format!(
            "area index {i} out of range for m = {}",
            data.m()
        )));
    }
    let d = data.d()[i];
    let b = shrinkage(a, d)?;
    let g1 = a * d / (a + d);
    let eval = reml_eval(data, a, DerivOrder::None)?;
    let xi = nalgebra::DVector::from_column_slice(data.x_row(i));
    let g2 = b * b * xi.dot(&eval.factor.solve_vec(&xi));
    let t2 = trace_v_inv_pow(data, a, 2)?;
    let g3 = 2.0 * d * d / ((a + d).powi(3) * t2);
    Ok(MseComponents {
        g1,
        g2,
        g3,
        taylor_total: g1 + g2 + g3,
    })
}

/// Variance of the shrinkage estimator at `A`:
/// `Var(B_hat_i) = b1^2 * 2 / tr[V^-2]` with `b1 = -D_i/(A+D_i)^2`, i.e.
/// `2 D_i^2 / [tr(V^-2) (A + D_i)^4]`.
///
/// This is `b1^2 / (m h2)` with `h2 = tr[V^-2]/(2m)`: the variance of the
/// variance-component estimator, `2/tr[V^-2]`, scaled by the squared
/// sensitivity of `B_i` to `A`.
pub fn var_b_hat(data: &AreaLevelDataset, a: f64, i: usize) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("var_b_hat requires A > 0, got {a}")));
    }
    let d = *data
        .d()
        .get(i)
        .ok_or_else(|| Error::Domain(format!("area index {i} out of range")))?;
    let t2 = trace_v_inv_pow(data, a, 2)?;
    Ok(2.0 * d * d / (t2 * (a + d).powi(4)))
}

/// Taylor-series MSE estimate of the multi-goal EBLUP for area `i`:
/// `g1 + g2 + g3` evaluated at the area's own estimate, with no additional
/// bias-correction terms.
pub fn taylor_mse(data: &AreaLevelDataset, fit: &FitResult, i: usize) -> Result<f64> {
    if !fit.is_multi_goal() {
        return Err(Error::Domain(format!(
            "the uncorrected Taylor MSE estimator applies to multi-goal fits, got `{}`",
            fit.method_label
        )));
    }
    let area = fit
        .areas
        .get(i)
        .ok_or_else(|| Error::Domain(format!("area index {i} out of range")))?;
    Ok(g_components(data, area.a_hat, i)?.taylor_total)
}

/// Configuration of the parametric bootstrap.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Pair replicates `(2k, 2k+1)` on a shared stream with the odd member
    /// using negated normal draws.
    pub antithetic: bool,
    pub recentering: RecenteringBeta,
}

/// Which coefficient vector centers the bootstrap generating model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RecenteringBeta {
    /// GLS under the heterogeneous plug-in covariance `diag(A_i + D_i)`
    /// (the default).
    HeterogeneousGls,
    /// Each area recenters at its own homogeneous GLS fit `beta(A_i)`.
    PerAreaGls,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        BootstrapConfig {
            replicates: 10_000,
            seed,
            antithetic: false,
            recentering: RecenteringBeta::HeterogeneousGls,
        }
    }

    pub fn with_replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }
}

/// Per-area bootstrap output.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BootstrapEstimate {
    pub estimate: f64,
    /// Monte Carlo standard error; absent when only one replicate ran.
    pub mc_stderr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    pub per_area: Vec<BootstrapEstimate>,
    pub replicates: usize,
    pub excluded_replicates: usize,
}

/// Predictor plugged into the bootstrap replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapPredictor {
    /// Refit the multi-goal estimator on each resampled dataset (the
    /// estimator being assessed).
    Refit,
    /// Plug the generating `(beta, A_i)` straight in; no refit. The
    /// resulting estimate converges to `g1(A_i)` and exists for
    /// verification.
    Oracle,
}

/// Single parametric bootstrap MSE estimator of the multi-goal EBLUP.
///
/// Per replicate `r` (stream `(seed, r)`): draw `u_i* ~ N(0, A_i_hat)` for
/// every area, then `e_i* ~ N(0, D_i)`; set `theta_i* = x_i' beta_hat + u_i*`
/// and `y_i* = theta_i* + e_i*`; refit the multi-goal estimator on `y*` and
/// record `(theta_hat_i(A_i*, y*) - theta_i*)^2`. The estimate is the mean
/// over replicates, strictly positive by construction. `D` and `X` are the
/// original dataset's; only `y` is resampled.
///
/// A replicate whose refit fails is excluded and counted; if more than 1% of
/// replicates are excluded the whole bootstrap errors.
pub fn bootstrap_mse(
    data: &AreaLevelDataset,
    fit_result: &FitResult,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    bootstrap_mse_with_predictor(data, fit_result, cfg, BootstrapPredictor::Refit)
}

pub fn bootstrap_mse_with_predictor(
    data: &AreaLevelDataset,
    fit_result: &FitResult,
    cfg: &BootstrapConfig,
    predictor: BootstrapPredictor,
) -> Result<BootstrapResult> {
    if cfg.replicates == 0 {
        return Err(Error::Config("bootstrap needs at least one replicate".into()));
    }
    let m = data.m();
    let a_hats = fit_result.a_hats();
    if a_hats.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::Domain(
            "parametric bootstrap requires strictly positive per-area estimates".into(),
        ));
    }
    let mu: Vec<f64> = match cfg.recentering {
        RecenteringBeta::HeterogeneousGls => {
            let beta: &GlsSolution = fit_result.recentering_beta.as_ref().ok_or_else(|| {
                Error::Domain("fit carries no heterogeneous recentering coefficients".into())
            })?;
            (0..m).map(|i| beta.fitted(data.x_row(i))).collect()
        }
        RecenteringBeta::PerAreaGls => (0..m)
            .map(|i| {
                let area = &fit_result.areas[i];
                data.x_row(i)
                    .iter()
                    .zip(&area.beta_hat)
                    .map(|(x, b)| x * b)
                    .sum()
            })
            .collect(),
    };

    let u_sd: Vec<f64> = a_hats.iter().map(|a| a.sqrt()).collect();
    let e_sd: Vec<f64> = data.d().iter().map(|d| d.sqrt()).collect();
    let method = FitMethod::multi_goal();

    // replicate -> Some(per-area squared deviations) or None on refit failure
    let per_replicate: Vec<Option<Vec<f64>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let (stream_id, negate) = if cfg.antithetic {
                ((r / 2 * 2) as u64, r % 2 == 1)
            } else {
                (r as u64, false)
            };
            let mut rng = stream(cfg.seed, stream_id);
            let sign = if negate { -1.0 } else { 1.0 };
            let mut theta_star = Vec::with_capacity(m);
            let mut y_star = Vec::with_capacity(m);
            for i in 0..m {
                theta_star.push(mu[i] + sign * u_sd[i] * standard_normal(&mut rng));
            }
            for i in 0..m {
                y_star.push(theta_star[i] + sign * e_sd[i] * standard_normal(&mut rng));
            }
            let ds_star = AreaLevelDataset::new(
                data.area_ids().to_vec(),
                y_star,
                data.d().to_vec(),
                (0..m).flat_map(|i| data.x_row(i).to_vec()).collect(),
                data.p(),
            )
            .ok()?;
            let mut sq = Vec::with_capacity(m);
            match predictor {
                BootstrapPredictor::Refit => {
                    for i in 0..m {
                        let (a_star, _) =
                            maximize_adjusted_likelihood(&ds_star, &method, i).ok()?;
                        let beta_star = crate::model::gls_beta(&ds_star, a_star).ok()?;
                        let theta_hat = blup_with_beta(&ds_star, a_star, i, &beta_star).ok()?;
                        let dev = theta_hat - theta_star[i];
                        sq.push(dev * dev);
                    }
                }
                BootstrapPredictor::Oracle => {
                    for i in 0..m {
                        let b = data.d()[i] / (a_hats[i] + data.d()[i]);
                        let theta_hat = (1.0 - b) * ds_star.y()[i] + b * mu[i];
                        let dev = theta_hat - theta_star[i];
                        sq.push(dev * dev);
                    }
                }
            }
            Some(sq)
        })
        .collect();

    let excluded = per_replicate.iter().filter(|r| r.is_none()).count();
    let total = cfg.replicates;
    if excluded * 100 > total {
        return Err(Error::BootstrapFailure { excluded, total });
    }
    let kept: Vec<&Vec<f64>> = per_replicate.iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::BootstrapFailure { excluded, total });
    }
    let n = kept.len();
    let mut per_area = Vec::with_capacity(m);
    let mut column = vec![0.0; n];
    for i in 0..m {
        for (r, row) in kept.iter().enumerate() {
            column[r] = row[i];
        }
        let mean = pairwise_sum(&column) / n as f64;
        let mc_stderr = if n > 1 {
            let sq: Vec<f64> = column.iter().map(|v| (v - mean) * (v - mean)).collect();
            Some((pairwise_sum(&sq) / ((n - 1) as f64 * n as f64)).sqrt())
        } else {
            None
        };
        per_area.push(BootstrapEstimate {
            estimate: mean,
            mc_stderr,
        });
    }
    Ok(BootstrapResult {
        per_area,
        replicates: total,
        excluded_replicates: excluded,
    })
}

/// Fits the multi-goal method and returns its bootstrap MSE in one call.
pub fn bootstrap_mse_of_dataset(
    data: &AreaLevelDataset,
    cfg: &BootstrapConfig,
) -> Result<(FitResult, BootstrapResult)> {
    let f = fit(data, &FitMethod::multi_goal())?;
    let boot = bootstrap_mse(data, &f, cfg)?;
    Ok((f, boot))
}
