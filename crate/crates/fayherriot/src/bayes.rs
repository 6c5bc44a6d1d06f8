//! Posterior summaries of the shrinkage factor `B_i` and the random effect
//! `theta_i` under a prior on `A`, with `beta` integrated out analytically
//! under its flat prior.
//!
//! The marginal posterior of `A` is `w(A) ∝ exp(l_RE(A) + log pi(A))`: the
//! `-1/2 log det(X' V^-1 X)` term inside `l_RE` is exactly the
//! beta-marginalization term, so no extra factor appears. Summaries are
//! one-dimensional integrals over `t = log A`, truncated where the log
//! integrand drops a fixed number of nats below its maximum and evaluated
//! by adaptive composite Simpson quadrature. The conditional posterior of
//! `theta_i` given `(A, y)` is normal with mean `blup_i(A)` and variance
//! `g1 + g2`, so the law of total variance gives
//!
//! ```text
//! E[theta_i|y] = int blup_i w,   V[theta_i|y] = int (g1+g2) w + Var_w(blup_i)
//! ```

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{maximize_adjusted_likelihood, FitMethod};
use crate::likelihood::{reml_eval, DerivOrder, PriorSpec};
use crate::model::{shrinkage, trace_v_inv_pow, AreaLevelDataset};
use crate::optimize::maximize;
use crate::quadrature::{integrate_adaptive, NodeEval, QuadratureOutcome};

/// Tuning knobs for the posterior quadrature.
#[derive(Debug, Clone, Copy)]
pub struct BayesOptions {
    /// Relative tolerance on the normalization constant.
    pub rel_tol: f64,
    /// Truncate where the log integrand drops this many nats below its max.
    pub drop_nats: f64,
    /// Initial number of uniform Simpson panels (nodes = 2 panels + 1).
    pub min_panels: usize,
}

impl Default for BayesOptions {
    fn default() -> Self {
        BayesOptions {
            rel_tol: 1e-8,
            drop_nats: 40.0,
            min_panels: 256,
        }
    }
}

impl BayesOptions {
    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }
}

/// Quadrature diagnostics attached to each summary.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuadratureDiagnostics {
    pub node_count: usize,
    /// Integration window in `A` units.
    pub truncation_points: (f64, f64),
    /// `log int L_RE(A) pi(A) dA` under the crate's likelihood convention.
    pub normalization_log: f64,
    /// Set when the right tail needed an unusually wide window; the
    /// posterior is integrable but heavy-tailed.
    pub divergence_flag: bool,
    /// Conservative error bounds for (e_b, v_b, e_theta, v_theta).
    pub error_estimates: [f64; 4],
}

/// Posterior summaries for one area.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorSummary {
    pub area_id: String,
    /// `E[B_i | y]`, in (0, 1).
    pub e_b: f64,
    /// `V[B_i | y]`, at most 1/4.
    pub v_b: f64,
    /// `E[theta_i | y]`.
    pub e_theta: f64,
    /// `V[theta_i | y]`.
    pub v_theta: f64,
    pub diagnostics: QuadratureDiagnostics,
}

/// `log` of the marginal (in `beta`) unnormalized posterior of `A`:
/// `l_RE(A) + log pi(A)`.
pub fn marginal_log_posterior(data: &AreaLevelDataset, prior: &PriorSpec, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!(
            "marginal posterior evaluated at A = {a} <= 0"
        )));
    }
    Ok(reml_eval(data, a, DerivOrder::None)?.value + prior.log_density(data, a)?)
}

struct Window {
    t_lo: f64,
    t_hi: f64,
    g_max: f64,
    heavy_tail: bool,
}

/// Locates the mode of the log integrand `g(t) = l_RE(e^t) + log pi(e^t) + t`
/// and the window where it stays within `drop_nats` of the mode. A right
/// tail that fails to drop is reported as an improper posterior.
fn truncation_window(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    opts: &BayesOptions,
) -> Result<Window> {
    let g = |t: f64| -> f64 {
        let a = t.exp();
        match marginal_log_posterior(data, prior, a) {
            Ok(v) => v + t,
            Err(_) => f64::NAN,
        }
    };
    let a_hi0 = 100.0 * (data.sample_variance_y() + data.max_d());
    let a_hi0 = if a_hi0 > 0.0 { a_hi0 } else { 1.0 };
    let t_hi0 = a_hi0.ln();
    let t_lo0 = (a_hi0 * 1e-18).ln();
    let mode = maximize(&g, t_lo0, t_hi0, 1e-8 * (1.0 + t_hi0.abs()), 129).ok_or_else(|| {
        Error::NonFinite("log posterior was non-finite over the whole search range".into())
    })?;
    let t_star = mode.x;
    let g_star = mode.value;
    let drop = opts.drop_nats;

    // `A = exp(t)` overflows past t = 709.78; treat failure to decay within
    // the representable range as divergence.
    const T_MAX: f64 = 705.0;

    // Expand by doubling until the integrand has dropped, then bisect the
    // crossing to keep the window tight.
    let locate = |direction: f64| -> Result<f64> {
        let mut step = 1.0;
        let mut prev = t_star;
        let mut total = 0.0;
        loop {
            total += step;
            let t = t_star + direction * total;
            if direction > 0.0 && t > T_MAX {
                return Err(Error::ImproperPosterior {
                    prior: prior.label(),
                    detail: format!(
                        "log posterior drops less than {drop} nats anywhere right of the mode (searched up to A = exp({T_MAX}))"
                    ),
                });
            }
            let v = g(t);
            if v.is_nan() {
                return Err(Error::NonFinite(format!("log posterior at t = {t}")));
            }
            if v <= g_star - drop {
                // Bisect between prev (above the cut) and t (below).
                let (mut inside, mut outside) = (prev, t);
                for _ in 0..30 {
                    let mid = 0.5 * (inside + outside);
                    if g(mid) <= g_star - drop {
                        outside = mid;
                    } else {
                        inside = mid;
                    }
                    if (outside - inside).abs() < 0.05 {
                        break;
                    }
                }
                return Ok(outside);
            }
            prev = t;
            step *= 2.0;
        }
    };
    // A tail that dips below the cut but then flattens out still carries
    // infinite mass; require a genuinely negative asymptotic slope beyond
    // the cut.
    let check_tail_slope = |t_cut: f64| -> Result<()> {
        let span = (705.0 - t_cut).min(200.0);
        if span < 20.0 {
            return Err(Error::ImproperPosterior {
                prior: prior.label(),
                detail: "right tail only drops at the edge of the representable range".into(),
            });
        }
        let far_val = g(t_cut + span);
        if far_val.is_nan() {
            return Err(Error::NonFinite(format!(
                "log posterior at t = {}",
                t_cut + span
            )));
        }
        let slope = (far_val - g(t_cut)) / span;
        if slope > -0.01 {
            return Err(Error::ImproperPosterior {
                prior: prior.label(),
                detail: format!(
                    "right tail of the log posterior decays at slope {slope:.4} per log unit; the integral over A does not converge"
                ),
            });
        }
        Ok(())
    };

    // The left tail always decays: the Jacobian contributes slope 1, every
    // prior's log density grows at most logarithmically toward A = 0, and
    // l_RE(0) is finite. Once exp(t) underflows the evaluation errs out.
    let t_lo = locate(-1.0)?;
    let t_hi = locate(1.0)?;
    check_tail_slope(t_hi)?;
    Ok(Window {
        t_lo,
        t_hi,
        g_max: g_star,
        heavy_tail: t_hi - t_star > 500.0,
    })
}

/// Node payload layout for a set of areas: `[B_i, blup_i, g1+g2_i]` per area.
fn eval_nodes<'a>(
    data: &'a AreaLevelDataset,
    prior: &'a PriorSpec,
    areas: &[usize],
) -> impl FnMut(f64) -> Result<NodeEval> + 'a {
    let areas = areas.to_vec();
    let p = data.p();
    move |t: f64| {
        let a = t.exp();
        let re = reml_eval(data, a, DerivOrder::None)?;
        let lp = prior.log_density(data, a)?;
        let log_g = re.value + lp + t;
        let cov = re.factor.inverse();
        let mut payload = Vec::with_capacity(3 * areas.len());
        for &i in &areas {
            let d = data.d()[i];
            let b = d / (a + d);
            let xi = data.x_row(i);
            let mut fitted = 0.0;
            let mut quad = 0.0;
            for r in 0..p {
                fitted += xi[r] * re.beta[r];
                for c in 0..p {
                    quad += xi[r] * cov[(r, c)] * xi[c];
                }
            }
            let blup = (1.0 - b) * data.y()[i] + b * fitted;
            payload.push(b);
            payload.push(blup);
            payload.push(a * d / (a + d) + b * b * quad);
        }
        Ok(NodeEval { t, log_g, payload })
    }
}

fn summarize_area(
    outcome: &QuadratureOutcome,
    window: &Window,
    area_id: &str,
    slot: usize,
) -> PosteriorSummary {
    let z = outcome.z;
    let off = 3 * slot;
    let int_b = outcome.integral_of(|n| n.payload[off]);
    let e_b = int_b / z;
    let v_b = outcome.integral_of(|n| {
        let d = n.payload[off] - e_b;
        d * d
    }) / z;
    let int_theta = outcome.integral_of(|n| n.payload[off + 1]);
    let e_theta = int_theta / z;
    let var_blup = outcome.integral_of(|n| {
        let d = n.payload[off + 1] - e_theta;
        d * d
    }) / z;
    let cond_var = outcome.integral_of(|n| n.payload[off + 2]) / z;
    let v_theta = cond_var + var_blup;

    // Conservative error bounds: the Simpson-vs-trapezoid gap dominates the
    // true Simpson error by orders of magnitude.
    let ez = (outcome.z - outcome.trapezoid_of(|_| 1.0)).abs() + outcome.z_error;
    let bound = |simpson: f64, trapezoid: f64, value: f64| {
        ((simpson - trapezoid).abs() + value.abs() * ez / z) / z
    };
    let err_e_b = bound(int_b, outcome.trapezoid_of(|n| n.payload[off]), e_b * z);
    let err_v_b = bound(
        v_b * z,
        outcome.trapezoid_of(|n| {
            let d = n.payload[off] - e_b;
            d * d
        }),
        v_b * z,
    );
    let err_e_theta = bound(
        int_theta,
        outcome.trapezoid_of(|n| n.payload[off + 1]),
        e_theta * z,
    );
    let err_v_theta = bound(
        v_theta * z,
        outcome.trapezoid_of(|n| {
            let d = n.payload[off + 1] - e_theta;
            d * d
        }) + outcome.trapezoid_of(|n| n.payload[off + 2]),
        v_theta * z,
    );

    PosteriorSummary {
        area_id: area_id.to_string(),
        e_b,
        v_b,
        e_theta,
        v_theta,
        diagnostics: QuadratureDiagnostics {
            node_count: outcome.node_count,
            truncation_points: (window.t_lo.exp(), window.t_hi.exp()),
            normalization_log: window.g_max + z.ln(),
            divergence_flag: window.heavy_tail,
            error_estimates: [err_e_b, err_v_b, err_e_theta, err_v_theta],
        },
    }
}

/// Posterior summaries of `(B_i, theta_i)` for one area under a prior.
pub fn posterior_summary(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    area: usize,
    opts: &BayesOptions,
) -> Result<PosteriorSummary> {
    if area >= data.m() {
        return Err(Error::Domain(format!(
            "area index {area} out of range for m = {}",
            data.m()
        )));
    }
    let prior = prior.for_area(area);
    let window = truncation_window(data, &prior, opts)?;
    posterior_summary_in_window(data, &prior, area, &window, opts)
}

fn posterior_summary_in_window(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    area: usize,
    window: &Window,
    opts: &BayesOptions,
) -> Result<PosteriorSummary> {
    let areas = [area];
    let mut eval = eval_nodes(data, prior, &areas);
    let outcome = integrate_adaptive(
        &mut eval,
        window.t_lo,
        window.t_hi,
        window.g_max,
        opts.rel_tol,
        opts.min_panels,
    )?;
    Ok(summarize_area(
        &outcome,
        window,
        &data.area_ids()[area],
        0,
    ))
}

/// Summaries for every area at once under an area-independent prior (flat or
/// Ganesh-Lahiri): one quadrature serves all areas.
pub fn posterior_summaries_shared(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    opts: &BayesOptions,
) -> Result<Vec<PosteriorSummary>> {
    if !prior.is_area_independent() {
        return Err(Error::Config(format!(
            "prior `{}` is area-specific; summarize areas individually",
            prior.label()
        )));
    }
    let window = truncation_window(data, prior, opts)?;
    let areas: Vec<usize> = (0..data.m()).collect();
    let mut eval = eval_nodes(data, prior, &areas);
    let outcome = integrate_adaptive(
        &mut eval,
        window.t_lo,
        window.t_hi,
        window.g_max,
        opts.rel_tol,
        opts.min_panels,
    )?;
    Ok((0..data.m())
        .map(|i| summarize_area(&outcome, &window, &data.area_ids()[i], i))
        .collect())
}

/// Summaries of the posterior restricted to an explicit window
/// `[a_lo, a_hi]` instead of the automatically located truncation. This is
/// the well-defined object to compute when the unrestricted posterior is
/// improper, and the hook the dense-grid oracle comparisons use.
pub fn posterior_summary_with_window(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    area: usize,
    a_lo: f64,
    a_hi: f64,
    opts: &BayesOptions,
) -> Result<PosteriorSummary> {
    let prior = prior.for_area(area);
    let mid = 0.5 * (a_lo.ln() + a_hi.ln());
    let g_max = marginal_log_posterior(data, &prior, mid.exp())? + mid;
    let window = Window {
        t_lo: a_lo.ln(),
        t_hi: a_hi.ln(),
        g_max,
        heavy_tail: false,
    };
    posterior_summary_in_window(data, &prior, area, &window, opts)
}

/// The shrinkage-derivative and likelihood-curvature quantities entering the
/// posterior expansions, all evaluated at an interior REML estimate:
///
/// ```text
/// b1 = dB_i/dA,  b2 = d^2B_i/dA^2,
/// h2 = -(1/m) d^2 l_RE/dA^2,  h3 = -(1/m) d^3 l_RE/dA^3,
/// rho1 = d log pi/dA.
/// ```
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExpansionTerms {
    pub b1: f64,
    pub b2: f64,
    pub h2: f64,
    pub h3: f64,
    pub rho1: f64,
}

pub fn expansion_terms(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    a_re: f64,
    area: usize,
) -> Result<ExpansionTerms> {
    if !(a_re > 0.0) {
        return Err(Error::BoundaryReml(
            "expansion terms are defined at interior REML estimates only".into(),
        ));
    }
    let d = *data
        .d()
        .get(area)
        .ok_or_else(|| Error::Domain(format!("area index {area} out of range")))?;
    let m = data.m() as f64;
    let re = reml_eval(data, a_re, DerivOrder::Third)?;
    Ok(ExpansionTerms {
        b1: -d / ((a_re + d) * (a_re + d)),
        b2: 2.0 * d / (a_re + d).powi(3),
        h2: -re.d2 / m,
        h3: -re.d3 / m,
        rho1: prior.for_area(area).log_density_derivative(data, a_re)?,
    })
}

/// Second-order expansions of the posterior mean of `B_i` and of `theta_i`
/// around the REML estimate, used as a cross-check of the exact quadrature.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PosteriorExpansion {
    /// `B_hat(A_RE) + (b2 - (h3/h2) b1)/(2 m h2) + b1 rho1/(m h2)`
    pub expansion_e_b: f64,
    /// `y_i - B_hat (y_i - x_i'beta) + (g1pi/D_i)(y_i - x_i'beta)`
    pub expansion_theta: f64,
    /// `g1pi = (B^2/(m h2)) (rho1 - 1/(A+D_i) - h3/(2 h2))`
    pub g1pi: f64,
}

/// Expansion at a precomputed interior REML estimate.
pub fn posterior_expansion_at(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    area: usize,
    a_re: f64,
) -> Result<PosteriorExpansion> {
    let terms = expansion_terms(data, prior, a_re, area)?;
    let m = data.m() as f64;
    let d = data.d()[area];
    let b = shrinkage(a_re, d)?;
    let expansion_e_b = b + (terms.b2 - terms.h3 / terms.h2 * terms.b1) / (2.0 * m * terms.h2)
        + terms.b1 * terms.rho1 / (m * terms.h2);
    let g1pi = b * b / (m * terms.h2)
        * (terms.rho1 - 1.0 / (a_re + d) - terms.h3 / (2.0 * terms.h2));
    let re = reml_eval(data, a_re, DerivOrder::None)?;
    let fitted: f64 = data
        .x_row(area)
        .iter()
        .zip(re.beta.iter())
        .map(|(x, c)| x * c)
        .sum();
    let resid = data.y()[area] - fitted;
    let expansion_theta = data.y()[area] - b * resid + g1pi / d * resid;
    Ok(PosteriorExpansion {
        expansion_e_b,
        expansion_theta,
        g1pi,
    })
}

/// Fits REML internally and evaluates the expansion; errors when the REML
/// estimate sits on the boundary.
pub fn posterior_expansion_check(
    data: &AreaLevelDataset,
    prior: &PriorSpec,
    area: usize,
) -> Result<PosteriorExpansion> {
    let (a_re, _) = maximize_adjusted_likelihood(data, &FitMethod::reml(), area)?;
    if a_re == 0.0 {
        return Err(Error::BoundaryReml("no expansion at a boundary estimate".into()));
    }
    posterior_expansion_at(data, prior, area, a_re)
}

/// The first-order bias of the flat-prior posterior mean of `B_i` relative
/// to the multi-goal point estimate:
/// `4 D_i / (tr[V^-2] (A+D_i)^2) * [1/(A+D_i) - tr[V^-3]/tr[V^-2]]`.
/// Identically zero in the balanced case.
pub fn flat_prior_bias_term(data: &AreaLevelDataset, a: f64, i: usize) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("bias term requires A > 0, got {a}")));
    }
    let d = *data
        .d()
        .get(i)
        .ok_or_else(|| Error::Domain(format!("area index {i} out of range")))?;
    let t2 = trace_v_inv_pow(data, a, 2)?;
    let t3 = trace_v_inv_pow(data, a, 3)?;
    Ok(4.0 * d / (t2 * (a + d) * (a + d)) * (1.0 / (a + d) - t3 / t2))
}
