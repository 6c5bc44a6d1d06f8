//! Formula evaluators for the nested error regression model
//! `y_ij = x_ij' beta + v_i + e_ij` with variance components
//! `psi = (sigma_v^2, sigma_e^2)`: the Fisher information inverse, the
//! gradient and Hessian of the shrinkage factor
//! `B_i(psi) = sigma_e^2 / (n_i sigma_v^2 + sigma_e^2)`, the curvature
//! functional `H(psi)`, and the family of adjustment-factor gradients that
//! solve `(d log h / d psi)' I_F^-1 (d B_i / d psi) = H(psi)`.
//!
//! This module evaluates formulas only; it performs no estimation.

use serde::Serialize;

use crate::error::{Error, Result};

/// Units-per-area design of the nested error regression model.
#[derive(Debug, Clone, Serialize)]
pub struct NermDesign {
    n: Vec<u64>,
}

impl NermDesign {
    /// Requires every `n_i >= 1` and at least one `n_i >= 2` (with all
    /// singleton areas the error variance is unidentifiable and the Fisher
    /// information degenerates).
    pub fn new(n: Vec<u64>) -> Result<Self> {
        if n.is_empty() {
            return Err(Error::Domain("design needs at least one area".into()));
        }
        if n.iter().any(|&v| v == 0) {
            return Err(Error::Domain("every area needs at least one unit".into()));
        }
        if !n.iter().any(|&v| v >= 2) {
            return Err(Error::Domain(
                "at least one area needs n_i >= 2; with all n_i = 1 the Fisher information is singular"
                    .into(),
            ));
        }
        Ok(NermDesign { n })
    }

    pub fn n(&self) -> &[u64] {
        &self.n
    }

    pub fn m(&self) -> usize {
        self.n.len()
    }
}

/// Variance components `(sigma_v^2, sigma_e^2)`, both strictly positive.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Psi {
    pub sigma_v2: f64,
    pub sigma_e2: f64,
}

impl Psi {
    pub fn new(sigma_v2: f64, sigma_e2: f64) -> Result<Self> {
        if !(sigma_v2 > 0.0) || !(sigma_e2 > 0.0) {
            return Err(Error::Domain(format!(
                "variance components must be strictly positive, got ({sigma_v2}, {sigma_e2})"
            )));
        }
        Ok(Psi { sigma_v2, sigma_e2 })
    }
}

pub type Sym2 = [[f64; 2]; 2];
pub type Vec2 = [f64; 2];

/// Inverse Fisher information of `psi`:
///
/// ```text
/// I_F^-1 = (2/a) [ S_ee  -S_n ;  -S_n  S_nn ]
/// S_ee = sum_i [(n_i - 1)/sigma_e^4 + d_i^-2],  S_n = sum_i n_i/d_i^2,
/// S_nn = sum_i n_i^2/d_i^2,  d_i = n_i sigma_v^2 + sigma_e^2,
/// a = S_nn S_ee - S_n^2.
/// ```
pub fn fisher_inverse(design: &NermDesign, psi: &Psi) -> Result<Sym2> {
    let mut s_ee = 0.0;
    let mut s_n = 0.0;
    let mut s_nn = 0.0;
    let se4 = psi.sigma_e2 * psi.sigma_e2;
    for &ni in design.n() {
        let nf = ni as f64;
        let di = nf * psi.sigma_v2 + psi.sigma_e2;
        let inv2 = 1.0 / (di * di);
        s_ee += (nf - 1.0) / se4 + inv2;
        s_n += nf * inv2;
        s_nn += nf * nf * inv2;
    }
    let a = s_nn * s_ee - s_n * s_n;
    if !(a > 0.0) {
        return Err(Error::Singular {
            context: "Fisher information of the nested error regression model".into(),
            condition_number: f64::INFINITY,
        });
    }
    let c = 2.0 / a;
    Ok([[c * s_ee, -c * s_n], [-c * s_n, c * s_nn]])
}

/// Gradient of the shrinkage factor:
/// `dB_i/dpsi = n_i/(n_i sigma_v^2 + sigma_e^2)^2 * (-sigma_e^2, sigma_v^2)`.
pub fn shrinkage_gradient(psi: &Psi, n_i: u64) -> Vec2 {
    let nf = n_i as f64;
    let di = nf * psi.sigma_v2 + psi.sigma_e2;
    let c = nf / (di * di);
    [-c * psi.sigma_e2, c * psi.sigma_v2]
}

/// Hessian of `B_i(psi)`, derived from `B_i = sigma_e^2 / d_i` with
/// `d_i = n_i sigma_v^2 + sigma_e^2`:
///
/// ```text
/// d2B/dv2   =  2 n^2 sigma_e^2 / d^3
/// d2B/dv de =  n (sigma_e^2 - n sigma_v^2) / d^3
/// d2B/de2   = -2 n sigma_v^2 / d^3
/// ```
pub fn shrinkage_hessian(psi: &Psi, n_i: u64) -> Sym2 {
    let nf = n_i as f64;
    let d = nf * psi.sigma_v2 + psi.sigma_e2;
    let d3 = d * d * d;
    let dvv = 2.0 * nf * nf * psi.sigma_e2 / d3;
    let dve = nf * (psi.sigma_e2 - nf * psi.sigma_v2) / d3;
    let dee = -2.0 * nf * psi.sigma_v2 / d3;
    [[dvv, dve], [dve, dee]]
}

/// Curvature functional `H(psi) = -1/2 tr[(d^2 B_i/dpsi^2) I_F^-1]`.
pub fn curvature_h(design: &NermDesign, psi: &Psi, area: usize) -> Result<f64> {
    let n_i = area_n(design, area)?;
    let inv = fisher_inverse(design, psi)?;
    let hess = shrinkage_hessian(psi, n_i);
    let trace = hess[0][0] * inv[0][0] + 2.0 * hess[0][1] * inv[0][1] + hess[1][1] * inv[1][1];
    Ok(-0.5 * trace)
}

/// The adjustment-factor gradient along a fixed direction `k`:
///
/// ```text
/// d log h / d psi = [H(psi) / (k' I_F^-1 dB/dpsi)] k
/// ```
///
/// which satisfies `(d log h/d psi)' I_F^-1 (dB/dpsi) = H(psi)` by
/// construction. Directions nearly orthogonal to `I_F^-1 dB/dpsi` are
/// rejected (the denominator check is relative to `|k| |I_F^-1 dB/dpsi|`
/// at `1e-12`).
pub fn adjustment_gradient(
    design: &NermDesign,
    psi: &Psi,
    area: usize,
    k: Vec2,
) -> Result<Vec2> {
    let n_i = area_n(design, area)?;
    let inv = fisher_inverse(design, psi)?;
    let grad = shrinkage_gradient(psi, n_i);
    let ig = [
        inv[0][0] * grad[0] + inv[0][1] * grad[1],
        inv[1][0] * grad[0] + inv[1][1] * grad[1],
    ];
    let denom = k[0] * ig[0] + k[1] * ig[1];
    let scale = (k[0] * k[0] + k[1] * k[1]).sqrt() * (ig[0] * ig[0] + ig[1] * ig[1]).sqrt();
    if denom.abs() <= 1e-12 * scale {
        return Err(Error::Domain(format!(
            "direction k is orthogonal to I_F^-1 dB/dpsi (denominator {denom:.3e} vs scale {scale:.3e})"
        )));
    }
    let h = curvature_h(design, psi, area)?;
    let v = h / denom;
    Ok([v * k[0], v * k[1]])
}

fn area_n(design: &NermDesign, area: usize) -> Result<u64> {
    design
        .n()
        .get(area)
        .copied()
        .ok_or_else(|| Error::Domain(format!("area index {area} out of range for m = {}", design.m())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn psi(v: f64, e: f64) -> Psi {
        Psi::new(v, e).unwrap()
    }

    #[test]
    fn design_validation() {
        assert!(NermDesign::new(vec![]).is_err());
        assert!(NermDesign::new(vec![1, 0, 2]).is_err());
        assert!(NermDesign::new(vec![1, 1, 1]).is_err());
        assert!(NermDesign::new(vec![1, 2]).is_ok());
        assert!(Psi::new(0.0, 1.0).is_err());
    }

    #[test]
    fn fisher_inverse_symmetric_positive_definite() {
        let design = NermDesign::new(vec![2, 3, 5]).unwrap();
        let inv = fisher_inverse(&design, &psi(1.0, 1.0)).unwrap();
        assert_eq!(inv[0][1], inv[1][0]);
        assert!(inv[0][0] > 0.0 && inv[1][1] > 0.0);
        assert!(inv[0][0] * inv[1][1] - inv[0][1] * inv[1][0] > 0.0);
    }

    #[test]
    fn fisher_inverse_balanced_oracle() {
        // Balanced n_i = n: invert the balanced information matrix
        // I_F = (m/2) [ n^2/d^2, n/d^2 ; n/d^2, (n-1)/se^4 + 1/d^2 ]
        // with the 2x2 cofactor formula, independently of the production path.
        let (m, n) = (6usize, 4u64);
        let p = psi(0.8, 1.7);
        let design = NermDesign::new(vec![n; m]).unwrap();
        let nf = n as f64;
        let d = nf * p.sigma_v2 + p.sigma_e2;
        let i11 = (m as f64 / 2.0) * nf * nf / (d * d);
        let i12 = (m as f64 / 2.0) * nf / (d * d);
        let i22 =
            (m as f64 / 2.0) * ((nf - 1.0) / (p.sigma_e2 * p.sigma_e2) + 1.0 / (d * d));
        let det = i11 * i22 - i12 * i12;
        let oracle = [[i22 / det, -i12 / det], [-i12 / det, i11 / det]];
        let got = fisher_inverse(&design, &p).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!(
                    (got[r][c] - oracle[r][c]).abs() < 1e-10 * (1.0 + oracle[r][c].abs()),
                    "entry ({r},{c}): {} vs {}",
                    got[r][c],
                    oracle[r][c]
                );
            }
        }
    }

    #[test]
    fn fisher_inverse_scales_quadratically() {
        let design = NermDesign::new(vec![2, 3, 5, 7]).unwrap();
        let base = fisher_inverse(&design, &psi(0.6, 1.1)).unwrap();
        let c = 3.5;
        let scaled = fisher_inverse(&design, &psi(0.6 * c, 1.1 * c)).unwrap();
        for r in 0..2 {
            for col in 0..2 {
                assert!(
                    (scaled[r][col] - c * c * base[r][col]).abs()
                        < 1e-10 * (1.0 + base[r][col].abs() * c * c)
                );
            }
        }
    }

    #[test]
    fn gradient_examples() {
        // n = 1, psi = (1, 1): gradient = (-1/4, 1/4).
        let g = shrinkage_gradient(&psi(1.0, 1.0), 1);
        assert!((g[0] + 0.25).abs() < 1e-15);
        assert!((g[1] - 0.25).abs() < 1e-15);
        // Orthogonal to (sigma_v^2, sigma_e^2): B is scale-invariant in psi.
        let p = psi(0.7, 2.2);
        let g = shrinkage_gradient(&p, 3);
        assert_eq!(g[0] * p.sigma_v2 + g[1] * p.sigma_e2, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = |v: f64, e: f64, n: f64| e / (n * v + e);
        let p = psi(0.9, 1.4);
        for n_i in [1u64, 2, 5, 11] {
            let g = shrinkage_gradient(&p, n_i);
            let h = 1e-7;
            let nf = n_i as f64;
            let fd_v = (b(p.sigma_v2 + h, p.sigma_e2, nf) - b(p.sigma_v2 - h, p.sigma_e2, nf))
                / (2.0 * h);
            let fd_e = (b(p.sigma_v2, p.sigma_e2 + h, nf) - b(p.sigma_v2, p.sigma_e2 - h, nf))
                / (2.0 * h);
            assert!((g[0] - fd_v).abs() < 1e-8 * (1.0 + g[0].abs()));
            assert!((g[1] - fd_e).abs() < 1e-8 * (1.0 + g[1].abs()));
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let p = psi(1.0, 2.0);
        for n_i in [2u64, 3, 7] {
            let hess = shrinkage_hessian(&p, n_i);
            let h = 1e-6;
            let gv_p = shrinkage_gradient(&psi(p.sigma_v2 + h, p.sigma_e2), n_i);
            let gv_m = shrinkage_gradient(&psi(p.sigma_v2 - h, p.sigma_e2), n_i);
            let ge_p = shrinkage_gradient(&psi(p.sigma_v2, p.sigma_e2 + h), n_i);
            let ge_m = shrinkage_gradient(&psi(p.sigma_v2, p.sigma_e2 - h), n_i);
            let fd = [
                [(gv_p[0] - gv_m[0]) / (2.0 * h), (ge_p[0] - ge_m[0]) / (2.0 * h)],
                [(gv_p[1] - gv_m[1]) / (2.0 * h), (ge_p[1] - ge_m[1]) / (2.0 * h)],
            ];
            for r in 0..2 {
                for c in 0..2 {
                    assert!(
                        (hess[r][c] - fd[r][c]).abs() < 1e-6 * (1.0 + hess[r][c].abs()),
                        "n={n_i} entry ({r},{c}): {} vs {}",
                        hess[r][c],
                        fd[r][c]
                    );
                }
            }
        }
    }

    #[test]
    fn curvature_matches_finite_difference_hessian() {
        let design = NermDesign::new(vec![2, 2, 3, 4]).unwrap();
        let p = psi(1.0, 2.0);
        let area = 2;
        let h_analytic = curvature_h(&design, &p, area).unwrap();
        // Rebuild H from a finite-difference Hessian of B.
        let n_i = design.n()[area] as f64;
        let b = |v: f64, e: f64| e / (n_i * v + e);
        let h = 1e-5;
        let dvv = (b(p.sigma_v2 + h, p.sigma_e2) - 2.0 * b(p.sigma_v2, p.sigma_e2)
            + b(p.sigma_v2 - h, p.sigma_e2))
            / (h * h);
        let dee = (b(p.sigma_v2, p.sigma_e2 + h) - 2.0 * b(p.sigma_v2, p.sigma_e2)
            + b(p.sigma_v2, p.sigma_e2 - h))
            / (h * h);
        let dve = (b(p.sigma_v2 + h, p.sigma_e2 + h) - b(p.sigma_v2 + h, p.sigma_e2 - h)
            - b(p.sigma_v2 - h, p.sigma_e2 + h)
            + b(p.sigma_v2 - h, p.sigma_e2 - h))
            / (4.0 * h * h);
        let inv = fisher_inverse(&design, &p).unwrap();
        let h_fd = -0.5 * (dvv * inv[0][0] + 2.0 * dve * inv[0][1] + dee * inv[1][1]);
        assert!(
            (h_analytic - h_fd).abs() < 1e-4 * (1.0 + h_analytic.abs()),
            "{h_analytic} vs {h_fd}"
        );
    }

    #[test]
    fn curvature_scale_invariant_and_pinned() {
        // B is homogeneous of degree 0 in psi, so its Hessian scales as
        // c^-2 while I_F^-1 scales as c^2: H(c psi) = H(psi).
        let design = NermDesign::new(vec![2, 2, 3, 4]).unwrap();
        let base = psi(1.0, 2.0);
        let h0 = curvature_h(&design, &base, 2).unwrap();
        for c in [0.1, 3.0, 40.0] {
            let scaled = curvature_h(
                &design,
                &psi(base.sigma_v2 * c, base.sigma_e2 * c),
                2,
            )
            .unwrap();
            assert!((scaled - h0).abs() < 1e-12 * h0.abs(), "c = {c}: {scaled} vs {h0}");
        }
        // Regression values pinned from the first verified computation.
        let pinned = [
            -1.75512665862484901e-1,
            -1.75512665862484901e-1,
            -2.25814234016887772e-1,
            -2.44471250502613563e-1,
        ];
        for (area, expect) in pinned.iter().enumerate() {
            let got = curvature_h(&design, &base, area).unwrap();
            assert!((got - expect).abs() < 1e-14, "area {area}: {got} vs {expect}");
        }
    }

    #[test]
    fn adjustment_gradient_defining_equation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let m = rng.random_range(2usize..8);
            let n: Vec<u64> = (0..m).map(|_| rng.random_range(1u64..9)).collect();
            let n = if n.iter().all(|&v| v < 2) {
                let mut n = n;
                n[0] = 2;
                n
            } else {
                n
            };
            let design = NermDesign::new(n).unwrap();
            let p = psi(rng.random_range(0.1..4.0), rng.random_range(0.1..4.0));
            let area = rng.random_range(0..m);
            let k: [f64; 2] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            if k[0].abs() + k[1].abs() < 1e-3 {
                continue;
            }
            let Ok(g) = adjustment_gradient(&design, &p, area, k) else {
                continue; // near-orthogonal direction, precondition refused
            };
            let inv = fisher_inverse(&design, &p).unwrap();
            let db = shrinkage_gradient(&p, design.n()[area]);
            let ig = [
                inv[0][0] * db[0] + inv[0][1] * db[1],
                inv[1][0] * db[0] + inv[1][1] * db[1],
            ];
            let lhs = g[0] * ig[0] + g[1] * ig[1];
            let h = curvature_h(&design, &p, area).unwrap();
            assert!(
                (lhs - h).abs() <= 1e-12 * (1.0 + h.abs()),
                "residual {} for h {h}",
                lhs - h
            );
        }
    }

    #[test]
    fn adjustment_gradient_direction_homogeneity() {
        let design = NermDesign::new(vec![2, 3, 4]).unwrap();
        let p = psi(1.2, 0.7);
        let k = [0.4, -1.1];
        let g1 = adjustment_gradient(&design, &p, 1, k).unwrap();
        let g2 = adjustment_gradient(&design, &p, 1, [2.0 * k[0], 2.0 * k[1]]).unwrap();
        assert!((g1[0] - g2[0]).abs() < 1e-14);
        assert!((g1[1] - g2[1]).abs() < 1e-14);
    }

    #[test]
    fn degenerate_direction_rejected() {
        let design = NermDesign::new(vec![2, 3, 4]).unwrap();
        let p = psi(1.0, 1.0);
        let inv = fisher_inverse(&design, &p).unwrap();
        let db = shrinkage_gradient(&p, design.n()[1]);
        let ig = [
            inv[0][0] * db[0] + inv[0][1] * db[1],
            inv[1][0] * db[0] + inv[1][1] * db[1],
        ];
        // k orthogonal to I_F^-1 dB/dpsi.
        let k = [-ig[1], ig[0]];
        let err = adjustment_gradient(&design, &p, 1, k).unwrap_err();
        assert!(err.to_string().contains("orthogonal"));
    }
}
