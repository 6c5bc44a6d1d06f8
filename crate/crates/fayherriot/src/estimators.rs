//! One-dimensional maximization of adjusted residual likelihoods, producing
//! the variance-component estimate, shrinkage factor, GLS coefficients and
//! EBLUP for ML, REML, power-adjusted and multi-goal methods.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{
    log_adjustment, log_adjustment_derivative, reml_eval, AdjustmentSpec, DerivOrder,
};
use crate::model::{
    blup_with_beta, gls_beta, gls_beta_heterogeneous, shrinkage, trace_v_inv_pow,
    AreaLevelDataset, GlsSolution,
};
use crate::optimize::{maximize, Maximum};

/// Number of probe points used to localize the global maximum before Brent
/// refinement; the no-spurious-maximum contract is checked against a
/// 201-point grid in the tests.
const SEARCH_PROBES: usize = 129;
/// Interior maximizers are polished until `|gradient| < GRAD_TOL * (1 + |curvature|)`.
const GRAD_TOL: f64 = 1e-9;
/// Retries with a 10x larger search bound when the maximizer lands on it.
const BOUND_ESCALATIONS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundaryPolicy {
    /// The search bracket includes `A = 0` (REML, ML, power adjustments).
    AllowZero,
    /// The objective diverges to `-inf` at the origin; search over
    /// `A = exp(t)` instead (multi-goal adjustments).
    StrictlyPositive,
}

/// An estimation method: adjustment factor plus search policy.
#[derive(Debug, Clone)]
pub struct FitMethod {
    pub adjustment: AdjustmentSpec,
    /// `A_max = search_bound_factor * (var(y) + max D_i)`.
    pub search_bound_factor: f64,
    pub boundary_policy: BoundaryPolicy,
}

impl FitMethod {
    pub fn reml() -> Self {
        FitMethod {
            adjustment: AdjustmentSpec::None,
            search_bound_factor: 100.0,
            boundary_policy: BoundaryPolicy::AllowZero,
        }
    }

    pub fn ml() -> Self {
        FitMethod {
            adjustment: AdjustmentSpec::profile_ml(),
            search_bound_factor: 100.0,
            boundary_policy: BoundaryPolicy::AllowZero,
        }
    }

    pub fn power(s: f64) -> Self {
        FitMethod {
            adjustment: AdjustmentSpec::Power { s, area: 0 },
            search_bound_factor: 100.0,
            boundary_policy: BoundaryPolicy::AllowZero,
        }
    }

    pub fn multi_goal() -> Self {
        FitMethod {
            adjustment: AdjustmentSpec::MultiGoal { area: 0 },
            search_bound_factor: 100.0,
            boundary_policy: BoundaryPolicy::StrictlyPositive,
        }
    }

    pub fn custom(adjustment: AdjustmentSpec) -> Self {
        let boundary_policy = if adjustment.vanishes_at_origin() {
            BoundaryPolicy::StrictlyPositive
        } else {
            BoundaryPolicy::AllowZero
        };
        FitMethod {
            adjustment,
            search_bound_factor: 100.0,
            boundary_policy,
        }
    }

    pub fn label(&self) -> String {
        self.adjustment.label()
    }

    fn validate(&self, data: &AreaLevelDataset) -> Result<()> {
        if self.adjustment.vanishes_at_origin()
            && self.boundary_policy != BoundaryPolicy::StrictlyPositive
        {
            return Err(Error::Config(
                "adjustments vanishing at A = 0 require the strictly-positive search policy"
                    .into(),
            ));
        }
        if matches!(self.adjustment, AdjustmentSpec::MultiGoal { .. })
            && !data.supports_multi_goal()
        {
            return Err(Error::Config(format!(
                "multi-goal estimation requires m > p + 2 (m = {}, p = {})",
                data.m(),
                data.p()
            )));
        }
        if !(self.search_bound_factor > 0.0) {
            return Err(Error::Config("search_bound_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Convergence diagnostics for one maximization.
#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub bracket: (f64, f64),
    pub objective: f64,
    /// Gradient of the log objective at the reported maximizer (interior
    /// solutions only).
    pub gradient: Option<f64>,
    /// The maximizer is the boundary solution `A = 0`.
    pub boundary_solution: bool,
    /// The maximizer stayed at the search bound even after escalation;
    /// treat the estimate with suspicion.
    pub at_search_bound: bool,
    pub bound_escalations: u32,
}

/// Per-area fit: variance component, shrinkage, GLS coefficients at that
/// component, and the EBLUP.
#[derive(Debug, Clone, Serialize)]
pub struct AreaFit {
    pub area_id: String,
    pub a_hat: f64,
    pub b_hat: f64,
    pub beta_hat: Vec<f64>,
    pub theta_hat: f64,
    pub diagnostics: FitDiagnostics,
}

/// Fit of a whole dataset under one method.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub method_label: String,
    pub area_specific: bool,
    pub areas: Vec<AreaFit>,
    /// The shared estimate for REML/ML/custom shared adjustments.
    pub shared_a_hat: Option<f64>,
    /// `beta(A_1, ..., A_m)` under the heterogeneous plug-in covariance
    /// `diag(A_i + D_i)`; present when every per-area estimate is strictly
    /// positive. This is the coefficient vector used to recenter the
    /// parametric bootstrap.
    pub recentering_beta: Option<GlsSolution>,
}

impl FitResult {
    pub fn a_hats(&self) -> Vec<f64> {
        self.areas.iter().map(|a| a.a_hat).collect()
    }

    pub fn is_multi_goal(&self) -> bool {
        self.method_label == "multi-goal"
    }
}

struct Objective<'a> {
    data: &'a AreaLevelDataset,
    adjustment: AdjustmentSpec,
}

impl Objective<'_> {
    fn value(&self, a: f64) -> f64 {
        let lre = match reml_eval(self.data, a, DerivOrder::None) {
            Ok(e) => e.value,
            Err(_) => return f64::NAN,
        };
        match log_adjustment(&self.adjustment, self.data, a) {
            Ok(h) => h + lre,
            Err(_) => f64::NAN,
        }
    }

    fn gradient(&self, a: f64) -> Result<f64> {
        let lre = reml_eval(self.data, a, DerivOrder::First)?;
        Ok(log_adjustment_derivative(&self.adjustment, self.data, a)? + lre.d1)
    }
}

fn polish_with_gradient(
    obj: &Objective<'_>,
    x0: f64,
    lo: f64,
    hi: f64,
) -> Option<(f64, f64, f64)> {
    // Bracket a sign change of the gradient around the Brent solution, then
    // bisect. Returns (x, gradient, curvature estimate).
    let g0 = obj.gradient(x0).ok()?;
    let mut step = 1e-8 * (1.0 + x0.abs());
    let (mut xl, mut xr, mut gl, mut gr) = (x0, x0, g0, g0);
    for _ in 0..60 {
        if gl > 0.0 && gr < 0.0 {
            break;
        }
        if gl <= 0.0 {
            let cand = (xl - step).max(lo);
            if cand == xl {
                return None;
            }
            xl = cand;
            gl = obj.gradient(xl).ok()?;
        }
        if gr >= 0.0 {
            let cand = (xr + step).min(hi);
            if cand == xr {
                return None;
            }
            xr = cand;
            gr = obj.gradient(xr).ok()?;
        }
        step *= 4.0;
    }
    if !(gl > 0.0 && gr < 0.0) {
        return None;
    }
    let mut x = x0;
    let mut g = g0;
    for _ in 0..120 {
        let curvature = (gr - gl) / (xr - xl);
        if g.abs() < GRAD_TOL * (1.0 + curvature.abs()) {
            return Some((x, g, curvature));
        }
        // Secant proposal, safeguarded by bisection.
        let mut cand = xl - gl * (xr - xl) / (gr - gl);
        if !(cand > xl && cand < xr) {
            cand = 0.5 * (xl + xr);
        }
        if xr - xl < f64::EPSILON * (1.0 + x.abs()) {
            return Some((x, g, curvature));
        }
        x = cand;
        g = obj.gradient(x).ok()?;
        if g > 0.0 {
            xl = x;
            gl = g;
        } else {
            xr = x;
            gr = g;
        }
    }
    let curvature = (gr - gl) / (xr - xl);
    Some((x, g, curvature))
}

/// Maximizes `log h(A) + l_RE(A)` for area `i` and returns the estimate with
/// its diagnostics.
///
/// The search bracket is `[0, A_max]` (or `(0, A_max]` via `A = exp(t)` for
/// strictly positive policies) with `A_max = search_bound_factor *
/// (var(y) + max D_i)`, escalated by 10x up to twice when the maximizer
/// lands on the bound.
pub fn maximize_adjusted_likelihood(
    data: &AreaLevelDataset,
    method: &FitMethod,
    area: usize,
) -> Result<(f64, FitDiagnostics)> {
    method.validate(data)?;
    if area >= data.m() {
        return Err(Error::Domain(format!(
            "area index {area} out of range for m = {}",
            data.m()
        )));
    }
    let obj = Objective {
        data,
        adjustment: method.adjustment.for_area(area),
    };
    let base_bound = method.search_bound_factor * (data.sample_variance_y() + data.max_d());
    let base_bound = if base_bound > 0.0 { base_bound } else { 1.0 };

    let mut escalation = 0u32;
    loop {
        let a_max = base_bound * 10f64.powi(escalation as i32);
        let x_tol = 1e-10 * (1.0 + a_max);
        let found: Option<Maximum> = match method.boundary_policy {
            BoundaryPolicy::AllowZero => maximize(&|a| obj.value(a), 0.0, a_max, x_tol, SEARCH_PROBES),
            BoundaryPolicy::StrictlyPositive => {
                let t_lo = (a_max * 1e-18).ln();
                let t_hi = a_max.ln();
                let t_tol = 1e-12 * (1.0 + t_hi.abs());
                maximize(&|t| obj.value(t.exp()), t_lo, t_hi, t_tol, SEARCH_PROBES).map(|m| {
                    Maximum {
                        x: m.x.exp(),
                        value: m.value,
                        iterations: m.iterations,
                        bracket: (m.bracket.0.exp(), m.bracket.1.exp()),
                        at_lower: m.at_lower,
                        at_upper: m.at_upper,
                    }
                })
            }
        };
        let Some(m) = found else {
            return Err(Error::NonFinite(format!(
                "adjusted likelihood `{}` was non-finite on the whole bracket [0, {a_max}]",
                method.label()
            )));
        };

        if m.at_upper && escalation < BOUND_ESCALATIONS {
            escalation += 1;
            continue;
        }

        let boundary_zero =
            method.boundary_policy == BoundaryPolicy::AllowZero && (m.at_lower || m.x == 0.0);

        let mut x = m.x;
        let mut value = m.value;
        let mut gradient = None;
        if !boundary_zero && !m.at_upper {
            if let Some((px, pg, _curv)) = polish_with_gradient(&obj, m.x, 0.0, a_max) {
                let pv = obj.value(px);
                // Near the maximum the objective is flat to within float
                // noise, so accept the gradient root unless the objective
                // visibly dropped.
                if pv.is_finite() && pv >= value - 1e-9 * (1.0 + value.abs()) {
                    x = px;
                    value = value.max(pv);
                    gradient = Some(pg);
                }
            }
        }
        // A boundary tie resolves to the smaller abscissa.
        if method.boundary_policy == BoundaryPolicy::AllowZero {
            let v0 = obj.value(0.0);
            if v0.is_finite() && v0 >= value {
                x = 0.0;
                value = v0;
                gradient = None;
            }
        }

        let diagnostics = FitDiagnostics {
            iterations: m.iterations,
            bracket: m.bracket,
            objective: value,
            gradient,
            boundary_solution: x == 0.0,
            at_search_bound: m.at_upper,
            bound_escalations: escalation,
        };
        return Ok((x, diagnostics));
    }
}

/// Fits every area: a single shared maximization for REML/ML/custom shared
/// adjustments, one maximization per area for the area-specific kinds.
///
/// Per-area maximizations are independent pure computations and run in
/// parallel; results are identical to sequential execution.
pub fn fit(data: &AreaLevelDataset, method: &FitMethod) -> Result<FitResult> {
    method.validate(data)?;
    let m = data.m();
    if method.adjustment.is_area_specific() {
        let fits: Vec<Result<(f64, FitDiagnostics)>> = (0..m)
            .into_par_iter()
            .map(|i| maximize_adjusted_likelihood(data, method, i))
            .collect();
        let mut areas = Vec::with_capacity(m);
        for (i, r) in fits.into_iter().enumerate() {
            let (a_hat, diagnostics) = r?;
            let beta = gls_beta(data, a_hat)?;
            let theta_hat = blup_with_beta(data, a_hat, i, &beta)?;
            areas.push(AreaFit {
                area_id: data.area_ids()[i].clone(),
                a_hat,
                b_hat: shrinkage(a_hat, data.d()[i])?,
                beta_hat: beta.beta,
                theta_hat,
                diagnostics,
            });
        }
        let a_hats: Vec<f64> = areas.iter().map(|a| a.a_hat).collect();
        let recentering_beta = if a_hats.iter().all(|a| *a > 0.0) {
            Some(gls_beta_heterogeneous(data, &a_hats)?)
        } else {
            None
        };
        Ok(FitResult {
            method_label: method.label(),
            area_specific: true,
            areas,
            shared_a_hat: None,
            recentering_beta,
        })
    } else {
        let (a_hat, diagnostics) = maximize_adjusted_likelihood(data, method, 0)?;
        let beta = gls_beta(data, a_hat)?;
        let areas = (0..m)
            .map(|i| {
                Ok(AreaFit {
                    area_id: data.area_ids()[i].clone(),
                    a_hat,
                    b_hat: shrinkage(a_hat, data.d()[i])?,
                    beta_hat: beta.beta.clone(),
                    theta_hat: blup_with_beta(data, a_hat, i, &beta)?,
                    diagnostics: diagnostics.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FitResult {
            method_label: method.label(),
            area_specific: false,
            areas,
            shared_a_hat: Some(a_hat),
            recentering_beta: None,
        })
    }
}

/// Observed versus predicted gap between an adjusted estimator and REML.
///
/// `observed = A_hat_adjusted - A_hat_RE`; the predicted first-order gap is
/// `2 (log h)'(A_hat_RE) / tr[V^-2](A_hat_RE)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AdjustmentGap {
    pub observed: f64,
    pub predicted: f64,
    pub a_re: f64,
    pub a_adjusted: f64,
}

pub fn adjustment_gap(
    data: &AreaLevelDataset,
    method: &FitMethod,
    area: usize,
) -> Result<AdjustmentGap> {
    let (a_re, _) = maximize_adjusted_likelihood(data, &FitMethod::reml(), area)?;
    if a_re == 0.0 {
        return Err(Error::BoundaryReml(
            "the observed-vs-predicted gap is only defined at interior REML solutions".into(),
        ));
    }
    adjustment_gap_at(data, method, area, a_re)
}

/// As [`adjustment_gap`] with a precomputed interior REML estimate.
pub fn adjustment_gap_at(
    data: &AreaLevelDataset,
    method: &FitMethod,
    area: usize,
    a_re: f64,
) -> Result<AdjustmentGap> {
    if !(a_re > 0.0) {
        return Err(Error::BoundaryReml(
            "the observed-vs-predicted gap is only defined at interior REML solutions".into(),
        ));
    }
    let (a_adj, _) = maximize_adjusted_likelihood(data, method, area)?;
    let adjustment = method.adjustment.for_area(area);
    let dlog = log_adjustment_derivative(&adjustment, data, a_re)?;
    let predicted = 2.0 * dlog / trace_v_inv_pow(data, a_re, 2)?;
    Ok(AdjustmentGap {
        observed: a_adj - a_re,
        predicted,
        a_re,
        a_adjusted: a_adj,
    })
}
