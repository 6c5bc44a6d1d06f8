//! Derivative-free scalar maximization: a probe scan to localize the global
//! maximum followed by Brent refinement (golden section with parabolic
//! interpolation) inside the bracketing probes.

const GOLDEN: f64 = 0.381_966_011_250_105_2;
const MAX_BRENT_ITER: usize = 200;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Maximum {
    pub x: f64,
    pub value: f64,
    pub iterations: usize,
    pub bracket: (f64, f64),
    pub at_lower: bool,
    pub at_upper: bool,
}

/// Maximizes `f` on `[lo, hi]`. Scans `probes` equally spaced points
/// (endpoints included), then runs Brent between the neighbors of the best
/// probe. Non-finite objective values are treated as `-inf`; if every probe
/// is non-finite the result is `None`.
///
/// Ties and plateaus resolve to the smallest maximizing abscissa: the probe
/// scan keeps the first (leftmost) maximum.
pub(crate) fn maximize(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    x_tol: f64,
    probes: usize,
) -> Option<Maximum> {
    debug_assert!(hi > lo && probes >= 3);
    let n = probes.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let mut best_i = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let x = if i + 1 == n { hi } else { lo + step * i as f64 };
        let v = f(x);
        let v = if v.is_finite() { v } else { f64::NEG_INFINITY };
        values.push(v);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    if best_i == usize::MAX {
        return None;
    }

    let bracket_lo = if best_i == 0 { lo } else { lo + step * (best_i - 1) as f64 };
    let bracket_hi = if best_i + 1 >= n {
        hi
    } else {
        lo + step * (best_i + 1) as f64
    };

    let (x, value, iterations) = brent_max(f, bracket_lo, bracket_hi, x_tol);

    // Keep whichever of {probe best, Brent result} is higher; on an exact
    // tie prefer the smaller abscissa.
    let probe_x = lo + step * best_i as f64;
    let probe_x = if best_i + 1 == n { hi } else { probe_x };
    let (x, value) = if best_v > value || (best_v == value && probe_x < x) {
        (probe_x, best_v)
    } else {
        (x, value)
    };

    Some(Maximum {
        x,
        value,
        iterations,
        bracket: (bracket_lo, bracket_hi),
        at_lower: x - lo <= x_tol.max(4.0 * f64::EPSILON * (1.0 + lo.abs())),
        at_upper: hi - x <= x_tol.max(4.0 * f64::EPSILON * (1.0 + hi.abs())),
    })
}

/// Brent's method on `-f`; returns `(argmax, max, iterations)`.
fn brent_max(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, x_tol: f64) -> (f64, f64, usize) {
    let neg = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let mut a = lo;
    let mut b = hi;
    let mut x = a + GOLDEN * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = neg(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut iter = 0;

    while iter < MAX_BRENT_ITER {
        iter += 1;
        let mid = 0.5 * (a + b);
        let tol1 = x_tol + f64::EPSILON * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - mid).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // Parabolic fit through (x, w, v).
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < mid { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < mid { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d >= 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = neg(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx, iter)
}
