//! Residual likelihood of the variance component `A`, adjustment factors
//! with their logarithmic derivatives, prior densities on `A`, and the
//! posterior-propriety checker.
//!
//! Everything is evaluated on the log scale: the residual likelihood itself
//! underflows once `m` exceeds a few dozen areas.
//!
//! The residual log likelihood is fixed to the convention
//!
//! ```text
//! l_RE(A) = -1/2 [ sum_i log(A + D_i) + log det(X' V^-1 X) + y' P y ]
//! ```
//!
//! with `P = V^-1 - V^-1 X (X' V^-1 X)^-1 X' V^-1`; the additive constant
//! `-(m - p)/2 log(2 pi)` is omitted because every consumer works with
//! differences or normalized ratios.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{weighted_normal_equations, AreaLevelDataset, SpdFactor};

/// Value and first three derivatives of `l_RE` at a point, plus the pieces
/// shared with GLS (the factor of `X' V^-1 X` and `beta(A)`).
#[derive(Debug, Clone)]
pub(crate) struct RemlEval {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// `beta(A)` as a vector.
    pub beta: DVector<f64>,
    /// Factor of `X' V^-1 X`.
    pub factor: SpdFactor,
}

/// How many derivative orders to compute alongside the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd)]
pub(crate) enum DerivOrder {
    None,
    First,
    Third,
}

/// Evaluates `l_RE(A)` and, optionally, its first three analytic derivatives
/// in a single `O(m p^2)` accumulation pass over the diagonal of `V`.
pub(crate) fn reml_eval(data: &AreaLevelDataset, a: f64, order: DerivOrder) -> Result<RemlEval> {
    if !(a >= 0.0) {
        return Err(Error::Domain(format!(
            "residual likelihood requires A >= 0, got {a}"
        )));
    }
    let (m, p) = (data.m(), data.p());
    let d = data.d();
    let y = data.y();

    let mut s_log = 0.0; // sum log(A + D_i)
    let mut sw = [0.0f64; 4]; // sums of w^k, k = 1..4
    let mut q = [0.0f64; 4]; // sums of w^k y^2, k = 1..4
    let deep = order >= DerivOrder::First;
    let full = order >= DerivOrder::Third;

    // Power sums of the weights; M_k and b_k hold the raw accumulations
    // sum w^{k+1} x x' and sum w^{k+1} y x (signs applied later).
    let orders_needed = if full {
        4
    } else if deep {
        2
    } else {
        1
    };
    let mut mk: Vec<DMatrix<f64>> = (0..orders_needed)
        .map(|_| DMatrix::zeros(p, p))
        .collect();
    let mut bk: Vec<DVector<f64>> = (0..orders_needed).map(|_| DVector::zeros(p)).collect();

    for i in 0..m {
        let w = 1.0 / (a + d[i]);
        s_log += (a + d[i]).ln();
        let mut wk = w;
        for k in 0..4 {
            if k < orders_needed || k < 3 {
                sw[k] += wk;
            }
            q[k] += wk * y[i] * y[i];
            if k >= orders_needed {
                break;
            }
            let xi = data.x_row(i);
            let wy = wk * y[i];
            for aa in 0..p {
                bk[k][aa] += wy * xi[aa];
                for bb in aa..p {
                    mk[k][(aa, bb)] += wk * xi[aa] * xi[bb];
                }
            }
            wk *= w;
        }
    }
    for mat in mk.iter_mut() {
        for aa in 0..p {
            for bb in 0..aa {
                mat[(aa, bb)] = mat[(bb, aa)];
            }
        }
    }

    let factor = SpdFactor::new(&mk[0], "X' V^-1 X")?;
    let u0 = factor.solve_vec(&bk[0]);
    let r0 = bk[0].dot(&u0);
    let value = -0.5 * (s_log + factor.log_det() + q[0] - r0);
    if !value.is_finite() {
        return Err(Error::NonFinite("residual log likelihood".into()));
    }

    let mut eval = RemlEval {
        value,
        d1: f64::NAN,
        d2: f64::NAN,
        d3: f64::NAN,
        beta: u0.clone(),
        factor,
    };
    if !deep {
        return Ok(eval);
    }

    // Signed derivative pieces: d^k/dA^k of M, b, q and sum log(A + D_i).
    let m1 = -&mk[1];
    let b1 = -&bk[1];
    let q1 = -q[1];
    let s1 = sw[0];

    let f = &eval.factor;
    let fm1 = f.inverse() * &m1;
    let l1 = fm1.trace();
    let u1 = f.solve_vec(&(&b1 - &m1 * &u0));
    let r1 = b1.dot(&u0) + bk[0].dot(&u1);
    eval.d1 = -0.5 * (s1 + l1 + q1 - r1);

    if !full {
        return Ok(eval);
    }

    let m2 = 2.0 * &mk[2];
    let m3 = -6.0 * &mk[3];
    let b2 = 2.0 * &bk[2];
    let b3 = -6.0 * &bk[3];
    let q2 = 2.0 * q[2];
    let q3 = -6.0 * q[3];
    let s2 = -sw[1];
    let s3 = 2.0 * sw[2];

    let f_inv = f.inverse();
    let fm2 = &f_inv * &m2;
    let fm3 = &f_inv * &m3;
    let l2 = fm2.trace() - (&fm1 * &fm1).trace();
    let l3 = fm3.trace() - 3.0 * (&fm2 * &fm1).trace() + 2.0 * (&fm1 * &fm1 * &fm1).trace();

    let u2 = f.solve_vec(&(&b2 - &m2 * &u0 - 2.0 * (&m1 * &u1)));
    let u3 = f.solve_vec(&(&b3 - &m3 * &u0 - 3.0 * (&m2 * &u1) - 3.0 * (&m1 * &u2)));
    let r2 = b2.dot(&u0) + 2.0 * b1.dot(&u1) + bk[0].dot(&u2);
    let r3 = b3.dot(&u0) + 3.0 * b2.dot(&u1) + 3.0 * b1.dot(&u2) + bk[0].dot(&u3);

    eval.d2 = -0.5 * (s2 + l2 + q2 - r2);
    eval.d3 = -0.5 * (s3 + l3 + q3 - r3);
    Ok(eval)
}

/// Residual (restricted) log likelihood of `A`, up to the documented
/// additive constant.
pub fn log_residual_likelihood(data: &AreaLevelDataset, a: f64) -> Result<f64> {
    Ok(reml_eval(data, a, DerivOrder::None)?.value)
}

/// Analytic `k`-th derivative of `l_RE` at `A > 0`, `k` in `{1, 2, 3}`.
pub fn log_residual_likelihood_derivative(data: &AreaLevelDataset, a: f64, k: u32) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!(
            "derivatives of l_RE are evaluated on A > 0, got {a}"
        )));
    }
    match k {
        1 => Ok(reml_eval(data, a, DerivOrder::First)?.d1),
        2 => Ok(reml_eval(data, a, DerivOrder::Third)?.d2),
        3 => Ok(reml_eval(data, a, DerivOrder::Third)?.d3),
        _ => Err(Error::Domain(format!(
            "derivative order must be 1, 2 or 3, got {k}"
        ))),
    }
}

type AdjustmentFn = Arc<dyn Fn(&AreaLevelDataset, f64) -> f64 + Send + Sync>;

/// A user-supplied adjustment factor: `log h(A)` and its first derivative.
///
/// Both closures must be pure; higher derivatives are never requested of
/// custom adjustments (the optimizer only needs the gradient).
#[derive(Clone)]
pub struct CustomAdjustment {
    pub label: String,
    log_h: AdjustmentFn,
    dlog_h: AdjustmentFn,
}

impl CustomAdjustment {
    pub fn new(
        label: impl Into<String>,
        log_h: impl Fn(&AreaLevelDataset, f64) -> f64 + Send + Sync + 'static,
        dlog_h: impl Fn(&AreaLevelDataset, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        CustomAdjustment {
            label: label.into(),
            log_h: Arc::new(log_h),
            dlog_h: Arc::new(dlog_h),
        }
    }
}

impl std::fmt::Debug for CustomAdjustment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomAdjustment")
            .field("label", &self.label)
            .finish()
    }
}

/// Adjustment factor `h(A)` multiplying the residual likelihood.
///
/// * `None` — plain REML.
/// * `Power` — `h(A) = (A + D_i)^s` for area `i`.
/// * `MultiGoal` — `h~_i(A) = h_+(A) (A + D_i)`, where `h_+` is the bounded
///   arctan factor below; vanishes at `A = 0`, which forces a strictly
///   positive maximizer.
/// * `Custom` — arbitrary `log h` with its first derivative; used for the
///   profile-ML objective among other things.
#[derive(Debug, Clone)]
pub enum AdjustmentSpec {
    None,
    Power { s: f64, area: usize },
    MultiGoal { area: usize },
    Custom(CustomAdjustment),
}

impl AdjustmentSpec {
    /// Profile maximum likelihood realized as an adjustment:
    /// `l_P(A) = l_RE(A) + 1/2 log det(X' V^-1 X)`, so
    /// `h_ML(A) = det(X' V^-1 X)^{1/2}`.
    pub fn profile_ml() -> Self {
        AdjustmentSpec::Custom(CustomAdjustment::new(
            "profile-ml",
            |data, a| match reml_eval(data, a, DerivOrder::None) {
                Ok(e) => 0.5 * e.factor.log_det(),
                Err(_) => f64::NAN,
            },
            |data, a| {
                // d/dA log det M = tr(M^-1 M') with M' = -sum w^2 x x'.
                let d = data.d();
                let (m1_raw, _) = weighted_normal_equations(data, |i| {
                    let w = 1.0 / (a + d[i]);
                    w * w
                });
                let (m0, _) = weighted_normal_equations(data, |i| 1.0 / (a + d[i]));
                match SpdFactor::new(&m0, "X' V^-1 X") {
                    Ok(f) => -0.5 * (f.inverse() * m1_raw).trace(),
                    Err(_) => f64::NAN,
                }
            },
        ))
    }

    /// Rebinds the area index for the area-specific kinds; identity for the
    /// shared kinds.
    pub fn for_area(&self, i: usize) -> Self {
        match self {
            AdjustmentSpec::Power { s, .. } => AdjustmentSpec::Power { s: *s, area: i },
            AdjustmentSpec::MultiGoal { .. } => AdjustmentSpec::MultiGoal { area: i },
            other => other.clone(),
        }
    }

    /// True when `h(0) = 0`, i.e. the log objective is `-inf` at the origin
    /// and the search must stay strictly positive.
    pub fn vanishes_at_origin(&self) -> bool {
        matches!(self, AdjustmentSpec::MultiGoal { .. })
    }

    pub fn is_area_specific(&self) -> bool {
        matches!(
            self,
            AdjustmentSpec::Power { .. } | AdjustmentSpec::MultiGoal { .. }
        )
    }

    pub fn label(&self) -> String {
        match self {
            AdjustmentSpec::None => "reml".into(),
            AdjustmentSpec::Power { s, .. } => format!("power({s})"),
            AdjustmentSpec::MultiGoal { .. } => "multi-goal".into(),
            AdjustmentSpec::Custom(c) => c.label.clone(),
        }
    }
}

/// `T(A) = sum_j A / (A + D_j)`, the argument of the arctan factor.
fn arctan_sum(data: &AreaLevelDataset, a: f64) -> f64 {
    data.d().iter().map(|&d| a / (a + d)).sum()
}

/// `log h_+(A)` for the default bounded factor
/// `h_+(A) = [arctan(sum_j A/(A+D_j))]^{1/m}`.
///
/// `h_+(0) = 0`, `h_+ > 0` on `A > 0`, bounded above by `(pi/2)^{1/m}`, and
/// its log derivatives are `o(1)` in `m`.
pub fn log_h_plus(data: &AreaLevelDataset, a: f64) -> f64 {
    let t = arctan_sum(data, a);
    t.atan().ln() / data.m() as f64
}

/// Derivative of `log h_+` with respect to `A`, for `A > 0`.
pub fn dlog_h_plus(data: &AreaLevelDataset, a: f64) -> f64 {
    let t = arctan_sum(data, a);
    let t_prime: f64 = data
        .d()
        .iter()
        .map(|&d| {
            let w = 1.0 / (a + d);
            d * w * w
        })
        .sum();
    t_prime / ((1.0 + t * t) * t.atan()) / data.m() as f64
}

/// `log h(A)` for an adjustment. `A = 0` is allowed for the kinds defined
/// there; the multi-goal kind returns `-inf` at the origin by construction.
pub fn log_adjustment(spec: &AdjustmentSpec, data: &AreaLevelDataset, a: f64) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::Domain(format!(
            "adjustment evaluated at negative A = {a}"
        )));
    }
    let v = match spec {
        AdjustmentSpec::None => 0.0,
        AdjustmentSpec::Power { s, area } => {
            let d = area_d(data, *area)?;
            s * (a + d).ln()
        }
        AdjustmentSpec::MultiGoal { area } => {
            let d = area_d(data, *area)?;
            log_h_plus(data, a) + (a + d).ln()
        }
        AdjustmentSpec::Custom(c) => {
            let v = (c.log_h)(data, a);
            if v.is_nan() {
                return Err(Error::NonFinite(format!(
                    "custom adjustment `{}` at A = {a}",
                    c.label
                )));
            }
            v
        }
    };
    Ok(v)
}

/// `d log h / dA` for an adjustment, `A > 0`.
pub fn log_adjustment_derivative(
    spec: &AdjustmentSpec,
    data: &AreaLevelDataset,
    a: f64,
) -> Result<f64> {
    if !(a > 0.0) && !matches!(spec, AdjustmentSpec::None | AdjustmentSpec::Power { .. }) {
        return Err(Error::Domain(format!(
            "adjustment derivative requires A > 0, got {a}"
        )));
    }
    if !(a >= 0.0) {
        return Err(Error::Domain(format!(
            "adjustment derivative at negative A = {a}"
        )));
    }
    let v = match spec {
        AdjustmentSpec::None => 0.0,
        AdjustmentSpec::Power { s, area } => {
            let d = area_d(data, *area)?;
            s / (a + d)
        }
        AdjustmentSpec::MultiGoal { area } => {
            let d = area_d(data, *area)?;
            dlog_h_plus(data, a) + 1.0 / (a + d)
        }
        AdjustmentSpec::Custom(c) => {
            let v = (c.dlog_h)(data, a);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "custom adjustment derivative `{}` at A = {a}",
                    c.label
                )));
            }
            v
        }
    };
    Ok(v)
}

fn area_d(data: &AreaLevelDataset, i: usize) -> Result<f64> {
    data.d().get(i).copied().ok_or_else(|| {
        Error::Domain(format!("area index {i} out of range for m = {}", data.m()))
    })
}

/// Prior density on `A` (up to an additive constant on the log scale), with
/// a flat prior on `beta` throughout.
///
/// * `Flat` — `pi(A) ∝ 1`.
/// * `MultiGoal` — `pi_i(A) ∝ (A + D_i)^2 tr[V^-2]`; the unique prior whose
///   posterior means and variances of `B_i` and `theta_i` track the
///   multi-goal classical solutions to `o(m^-1)`.
/// * `GeneralMg` — `pi_{i;G}(A) ∝ h_{i;G}(A) (A + D_i) tr[V^-2]` for a given
///   adjustment factor.
/// * `GaneshLahiri` — `pi(A) ∝ [sum_j (A+D_j)^-2] / [sum_j w_j D_j^2 (A+D_j)^-2]`
///   for averaging weights `w` (uniform when omitted).
#[derive(Debug, Clone)]
pub enum PriorSpec {
    Flat,
    MultiGoal { area: usize },
    GeneralMg { adjustment: AdjustmentSpec, area: usize },
    GaneshLahiri { weights: Option<Vec<f64>> },
}

impl PriorSpec {
    pub fn label(&self) -> String {
        match self {
            PriorSpec::Flat => "flat".into(),
            PriorSpec::MultiGoal { .. } => "multi-goal".into(),
            PriorSpec::GeneralMg { adjustment, .. } => {
                format!("general-mg[{}]", adjustment.label())
            }
            PriorSpec::GaneshLahiri { .. } => "ganesh-lahiri".into(),
        }
    }

    /// True when the prior does not depend on the target area, so one
    /// posterior serves every area.
    pub fn is_area_independent(&self) -> bool {
        matches!(self, PriorSpec::Flat | PriorSpec::GaneshLahiri { .. })
    }

    /// Rebinds the area index for area-specific priors.
    pub fn for_area(&self, i: usize) -> Self {
        match self {
            PriorSpec::MultiGoal { .. } => PriorSpec::MultiGoal { area: i },
            PriorSpec::GeneralMg { adjustment, .. } => PriorSpec::GeneralMg {
                adjustment: adjustment.for_area(i),
                area: i,
            },
            other => other.clone(),
        }
    }

    fn validate_weights(&self, data: &AreaLevelDataset) -> Result<Option<Vec<f64>>> {
        match self {
            PriorSpec::GaneshLahiri { weights: Some(w) } => {
                if w.len() != data.m() {
                    return Err(Error::Config(format!(
                        "Ganesh-Lahiri weights have length {}, expected m = {}",
                        w.len(),
                        data.m()
                    )));
                }
                if w.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Config(
                        "Ganesh-Lahiri weights must be nonnegative".into(),
                    ));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-8 {
                    return Err(Error::Config(format!(
                        "Ganesh-Lahiri weights must sum to 1, got {sum}"
                    )));
                }
                Ok(Some(w.clone()))
            }
            PriorSpec::GaneshLahiri { weights: None } => {
                Ok(Some(vec![1.0 / data.m() as f64; data.m()]))
            }
            _ => Ok(None),
        }
    }

    /// `log pi(A)` up to an additive constant, `A > 0`.
    pub fn log_density(&self, data: &AreaLevelDataset, a: f64) -> Result<f64> {
        if !(a > 0.0) {
            return Err(Error::Domain(format!("prior evaluated at A = {a} <= 0")));
        }
        let v = match self {
            PriorSpec::Flat => 0.0,
            PriorSpec::MultiGoal { area } => {
                let d = area_d(data, *area)?;
                2.0 * (a + d).ln() + log_trace2(data, a)
            }
            PriorSpec::GeneralMg { adjustment, area } => {
                let d = area_d(data, *area)?;
                log_adjustment(adjustment, data, a)? + (a + d).ln() + log_trace2(data, a)
            }
            PriorSpec::GaneshLahiri { .. } => {
                let w = self.validate_weights(data)?.unwrap();
                // Same scaling for numerator and denominator: the common
                // (a + d_min)^-2 factor cancels in the ratio.
                let d_min = data.d().iter().cloned().fold(f64::INFINITY, f64::min);
                let base = a + d_min;
                let mut num = 0.0;
                let mut den = 0.0;
                for (&dj, &wj) in data.d().iter().zip(&w) {
                    let r = base / (a + dj);
                    num += r * r;
                    den += wj * dj * dj * r * r;
                }
                num.ln() - den.ln()
            }
        };
        if v.is_nan() {
            return Err(Error::NonFinite(format!(
                "log prior `{}` at A = {a}",
                self.label()
            )));
        }
        Ok(v)
    }

    /// `d log pi / dA`, `A > 0`. This is the `rho_1` term of the posterior
    /// expansions.
    pub fn log_density_derivative(&self, data: &AreaLevelDataset, a: f64) -> Result<f64> {
        if !(a > 0.0) {
            return Err(Error::Domain(format!(
                "prior derivative evaluated at A = {a} <= 0"
            )));
        }
        let t2 = trace2(data, a);
        let t3 = trace3(data, a);
        let v = match self {
            PriorSpec::Flat => 0.0,
            PriorSpec::MultiGoal { area } => {
                let d = area_d(data, *area)?;
                2.0 / (a + d) - 2.0 * t3 / t2
            }
            PriorSpec::GeneralMg { adjustment, area } => {
                let d = area_d(data, *area)?;
                log_adjustment_derivative(adjustment, data, a)? + 1.0 / (a + d) - 2.0 * t3 / t2
            }
            PriorSpec::GaneshLahiri { .. } => {
                let w = self.validate_weights(data)?.unwrap();
                let mut den = 0.0;
                let mut dden = 0.0;
                for (&dj, &wj) in data.d().iter().zip(&w) {
                    let inv = 1.0 / (a + dj);
                    let term = wj * dj * dj * inv * inv;
                    den += term;
                    dden += -2.0 * term * inv;
                }
                -2.0 * t3 / t2 - dden / den
            }
        };
        Ok(v)
    }
}

fn trace2(data: &AreaLevelDataset, a: f64) -> f64 {
    data.d()
        .iter()
        .map(|&d| {
            let w = 1.0 / (a + d);
            w * w
        })
        .sum()
}

/// `log tr[V^-2]` evaluated in scaled form so it stays finite out to the
/// largest representable `A` (the raw trace underflows near `A = 1e154`).
fn log_trace2(data: &AreaLevelDataset, a: f64) -> f64 {
    let d_min = data.d().iter().cloned().fold(f64::INFINITY, f64::min);
    let base = a + d_min;
    let scaled: f64 = data
        .d()
        .iter()
        .map(|&d| {
            let r = base / (a + d);
            r * r
        })
        .sum();
    -2.0 * base.ln() + scaled.ln()
}

fn trace3(data: &AreaLevelDataset, a: f64) -> f64 {
    data.d()
        .iter()
        .map(|&d| {
            let w = 1.0 / (a + d);
            w * w * w
        })
        .sum()
}

/// Convenience free function mirroring [`PriorSpec::log_density`].
pub fn log_prior(spec: &PriorSpec, data: &AreaLevelDataset, a: f64) -> Result<f64> {
    spec.log_density(data, a)
}

/// Propriety of the posterior when the power adjustment `h(A) = (A + D_i)^s`
/// is used directly as a prior, and when it is wrapped in the general
/// multi-goal prior `pi_{i;G}(A) ∝ h(A) (A + D_i) tr[V^-2]`.
///
/// For `m > p >= 1` the sufficient conditions are `s < (m - p - 2)/2` and
/// `s < (m - p)/2` respectively; both inequalities are strict and boundary
/// equality returns `false`. Other adjustment shapes are not covered: there
/// the quadrature tail-divergence detector is the fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProprietyFlags {
    pub proper_as_raw_adjustment: bool,
    pub proper_as_general_mg_prior: bool,
}

pub fn check_propriety(s: f64, m: usize, p: usize) -> ProprietyFlags {
    debug_assert!(m > p && p >= 1, "propriety bounds assume m > p >= 1");
    let mp = (m as f64) - (p as f64);
    ProprietyFlags {
        proper_as_raw_adjustment: s < (mp - 2.0) / 2.0,
        proper_as_general_mg_prior: s < mp / 2.0,
    }
}
