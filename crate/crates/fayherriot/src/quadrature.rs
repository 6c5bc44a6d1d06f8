//! Adaptive composite Simpson quadrature for log-space integrands.
//!
//! The driver integrates `exp(g(t) - g_max)` over a finite window, bisecting
//! intervals until the Richardson error estimate of the normalization
//! integral meets a relative tolerance. Every node evaluation can carry a
//! payload (shrinkage, BLUP, conditional variance, ...); the final panel
//! list is kept so that arbitrary payload functions can be integrated over
//! the same partition afterwards without re-evaluating anything.

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// One evaluated node: abscissa, log integrand, cached payload values.
#[derive(Debug, Clone)]
pub(crate) struct NodeEval {
    pub t: f64,
    pub log_g: f64,
    pub payload: Vec<f64>,
}

/// A converged leaf panel `[a, b]` with its midpoint.
#[derive(Debug, Clone)]
pub(crate) struct Panel {
    pub left: NodeEval,
    pub mid: NodeEval,
    pub right: NodeEval,
}

impl Panel {
    fn width(&self) -> f64 {
        self.right.t - self.left.t
    }
}

pub(crate) struct QuadratureOutcome {
    pub panels: Vec<Panel>,
    pub g_max: f64,
    pub node_count: usize,
    /// `int exp(g - g_max) dt` over the window.
    pub z: f64,
    /// Accumulated Richardson estimate of the error in `z`.
    pub z_error: f64,
}

impl QuadratureOutcome {
    /// Simpson integral of `f(node) * exp(g - g_max)` over the partition.
    pub fn integral_of(&self, f: impl Fn(&NodeEval) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .panels
            .iter()
            .map(|p| {
                let w = p.width() / 6.0;
                w * (f(&p.left) * weight(p.left.log_g, self.g_max)
                    + 4.0 * f(&p.mid) * weight(p.mid.log_g, self.g_max)
                    + f(&p.right) * weight(p.right.log_g, self.g_max))
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// Trapezoid integral over the same nodes; the gap to the Simpson value
    /// is a conservative error bound for the latter.
    pub fn trapezoid_of(&self, f: impl Fn(&NodeEval) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .panels
            .iter()
            .map(|p| {
                let h = 0.5 * p.width();
                let wl = f(&p.left) * weight(p.left.log_g, self.g_max);
                let wm = f(&p.mid) * weight(p.mid.log_g, self.g_max);
                let wr = f(&p.right) * weight(p.right.log_g, self.g_max);
                0.5 * h * (wl + 2.0 * wm + wr)
            })
            .collect();
        pairwise_sum(&terms)
    }
}

fn weight(log_g: f64, g_max: f64) -> f64 {
    (log_g - g_max).exp()
}

fn simpson(left: &NodeEval, mid: &NodeEval, right: &NodeEval, g_max: f64) -> f64 {
    (right.t - left.t) / 6.0
        * (weight(left.log_g, g_max) + 4.0 * weight(mid.log_g, g_max) + weight(right.log_g, g_max))
}

const MAX_DEPTH: u32 = 40;
const MAX_NODES: usize = 4_000_000;

/// Integrates `exp(g - g_max)` over `[t_lo, t_hi]`.
///
/// Starts from `min_panels` uniform Simpson panels (513 nodes at the default
/// 256) and bisects panels until each one's Richardson estimate fits its
/// width-proportional share of `rel_tol * z`.
pub(crate) fn integrate_adaptive(
    eval: &mut dyn FnMut(f64) -> Result<NodeEval>,
    t_lo: f64,
    t_hi: f64,
    g_max: f64,
    rel_tol: f64,
    min_panels: usize,
) -> Result<QuadratureOutcome> {
    if !(t_hi > t_lo) {
        return Err(Error::Domain(format!(
            "bad quadrature window [{t_lo}, {t_hi}]"
        )));
    }
    let node_count = std::cell::Cell::new(0usize);
    let mut eval_at = |t: f64| -> Result<NodeEval> {
        node_count.set(node_count.get() + 1);
        let node = eval(t)?;
        if node.log_g.is_nan() || node.log_g == f64::INFINITY {
            return Err(Error::NonFinite(format!("log integrand at t = {t}")));
        }
        Ok(node)
    };

    let n_panels = min_panels.max(1);
    let n_nodes = 2 * n_panels + 1;
    let step = (t_hi - t_lo) / (n_nodes - 1) as f64;
    let mut grid = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let t = if k + 1 == n_nodes {
            t_hi
        } else {
            t_lo + step * k as f64
        };
        grid.push(eval_at(t)?);
    }

    let mut z0_terms = Vec::with_capacity(n_panels);
    for k in 0..n_panels {
        z0_terms.push(simpson(&grid[2 * k], &grid[2 * k + 1], &grid[2 * k + 2], g_max));
    }
    let z0 = pairwise_sum(&z0_terms);
    if !(z0 > 0.0) && z0 != 0.0 {
        return Err(Error::NonFinite("initial quadrature pass".into()));
    }
    let abs_tol = rel_tol * z0.max(f64::MIN_POSITIVE);
    let total_width = t_hi - t_lo;

    let mut leaves: Vec<Panel> = Vec::with_capacity(2 * n_panels);
    let mut z_error = 0.0f64;
    // (panel, depth); processed LIFO.
    let mut stack: Vec<(Panel, u32)> = Vec::new();
    for k in (0..n_panels).rev() {
        stack.push((
            Panel {
                left: grid[2 * k].clone(),
                mid: grid[2 * k + 1].clone(),
                right: grid[2 * k + 2].clone(),
            },
            0,
        ));
    }

    while let Some((panel, depth)) = stack.pop() {
        if node_count.get() > MAX_NODES {
            return Err(Error::QuadratureNoConvergence {
                achieved: z_error / z0.max(f64::MIN_POSITIVE),
                requested: rel_tol,
            });
        }
        let s1 = simpson(&panel.left, &panel.mid, &panel.right, g_max);
        let m1 = eval_at(0.5 * (panel.left.t + panel.mid.t))?;
        let m2 = eval_at(0.5 * (panel.mid.t + panel.right.t))?;
        let left_half = Panel {
            left: panel.left.clone(),
            mid: m1,
            right: panel.mid.clone(),
        };
        let right_half = Panel {
            left: panel.mid.clone(),
            mid: m2,
            right: panel.right.clone(),
        };
        let s2 = simpson(&left_half.left, &left_half.mid, &left_half.right, g_max)
            + simpson(&right_half.left, &right_half.mid, &right_half.right, g_max);
        let err = (s2 - s1).abs() / 15.0;
        let share = abs_tol * panel.width() / total_width;
        if err <= share || depth >= MAX_DEPTH {
            z_error += err;
            leaves.push(left_half);
            leaves.push(right_half);
        } else {
            stack.push((right_half, depth + 1));
            stack.push((left_half, depth + 1));
        }
    }

    leaves.sort_by(|a, b| a.left.t.partial_cmp(&b.left.t).unwrap());
    let outcome = QuadratureOutcome {
        panels: leaves,
        g_max,
        node_count: node_count.get(),
        z: 0.0,
        z_error,
    };
    let z = outcome.integral_of(|_| 1.0);
    if !(z > 0.0) {
        return Err(Error::NonFinite(
            "normalization integral is zero or non-finite".into(),
        ));
    }
    if z_error > 100.0 * rel_tol * z {
        return Err(Error::QuadratureNoConvergence {
            achieved: z_error / z,
            requested: rel_tol,
        });
    }
    Ok(QuadratureOutcome { z, ..outcome })
}
