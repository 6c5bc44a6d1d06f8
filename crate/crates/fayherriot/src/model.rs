//! Domain types, shrinkage and trace computations, generalized least
//! squares, and BLUP for the two-level normal model.
//!
//! The covariance of `y` at variance component `A` is `V = diag(A + D_i)`.
//! Nothing in this module ever materializes `V`: every matrix product is
//! accumulated over the diagonal in `O(m p^2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which `X' V^-1 X` is reported singular.
const RANK_TOL: f64 = 1e-12;

/// Direct estimates, known sampling variances and auxiliary variables for
/// `m` areas.
///
/// Invariants enforced at construction: all `D_i > 0`, `rank(X) = p <= m`,
/// row lengths consistent, area ids unique. Row order is preserved from the
/// input everywhere; results are keyed by `area_id`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaLevelDataset {
    area_ids: Vec<String>,
    y: Vec<f64>,
    d: Vec<f64>,
    /// Row-major m x p design matrix.
    x: Vec<f64>,
    p: usize,
}

impl AreaLevelDataset {
    /// Builds a validated dataset. `x` is row-major with `p` columns.
    pub fn new(
        area_ids: Vec<String>,
        y: Vec<f64>,
        d: Vec<f64>,
        x: Vec<f64>,
        p: usize,
    ) -> Result<Self> {
        let m = y.len();
        if m == 0 {
            return Err(Error::InvalidDataset("no data rows".into()));
        }
        if d.len() != m || area_ids.len() != m {
            return Err(Error::InvalidDataset(format!(
                "length mismatch: y has {m} rows, D has {}, area_ids has {}",
                d.len(),
                area_ids.len()
            )));
        }
        if p == 0 {
            return Err(Error::InvalidDataset("design matrix has no columns".into()));
        }
        if x.len() != m * p {
            return Err(Error::InvalidDataset(format!(
                "design matrix has {} entries, expected {m} x {p}",
                x.len()
            )));
        }
        if p > m {
            return Err(Error::InvalidDataset(format!(
                "p = {p} exceeds number of areas m = {m}"
            )));
        }
        for (i, &di) in d.iter().enumerate() {
            if !(di > 0.0) || !di.is_finite() {
                return Err(Error::InvalidDataset(format!(
                    "sampling variance D must be positive and finite; area `{}` has D = {di}",
                    area_ids[i]
                )));
            }
        }
        for (i, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidDataset(format!(
                    "non-finite direct estimate for area `{}`",
                    area_ids[i]
                )));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite design entry".into()));
        }
        {
            let mut sorted = area_ids.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                let dup = sorted
                    .windows(2)
                    .find(|w| w[0] == w[1])
                    .map(|w| w[0].clone())
                    .unwrap_or_default();
                return Err(Error::InvalidDataset(format!("duplicate area_id `{dup}`")));
            }
        }
        let ds = AreaLevelDataset {
            area_ids,
            y,
            d,
            x,
            p,
        };
        // rank(X) = p: check X'X, which shares the rank of X.
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        for i in 0..m {
            let xi = ds.x_row(i);
            for a in 0..p {
                for b in a..p {
                    xtx[(a, b)] += xi[a] * xi[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        SpdFactor::new(&xtx, "rank check of X'X")
            .map_err(|e| Error::InvalidDataset(format!("design matrix is rank deficient: {e}")))?;
        Ok(ds)
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn area_ids(&self) -> &[String] {
        &self.area_ids
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Multi-goal estimation needs `m > p + 2` so that the adjusted
    /// likelihood has a finite maximizer.
    pub fn supports_multi_goal(&self) -> bool {
        self.m() > self.p + 2
    }

    /// Sample variance of the direct estimates (denominator `m - 1`).
    pub fn sample_variance_y(&self) -> f64 {
        let m = self.m();
        if m < 2 {
            return 0.0;
        }
        let mean = self.y.iter().sum::<f64>() / m as f64;
        self.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64
    }

    pub fn max_d(&self) -> f64 {
        self.d.iter().cloned().fold(f64::MIN, f64::max)
    }
}

/// Model hyperparameters `(beta, A)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub beta: Vec<f64>,
    pub a: f64,
}

impl Hyperparameters {
    pub fn new(beta: Vec<f64>, a: f64) -> Result<Self> {
        if !(a >= 0.0) {
            return Err(Error::Domain(format!(
                "variance component A must be nonnegative, got {a}"
            )));
        }
        Ok(Hyperparameters { beta, a })
    }
}

/// Shrinkage factor `B_i(A) = D_i / (A + D_i)`, in `(0, 1]` for `A >= 0`.
///
/// `B = 1` iff `A = 0`; strictly decreasing and continuous in `A`.
pub fn shrinkage(a: f64, d_i: f64) -> Result<f64> {
    if !(d_i > 0.0) {
        return Err(Error::Domain(format!(
            "sampling variance must be positive, got D = {d_i}"
        )));
    }
    if !(a >= 0.0) {
        return Err(Error::Domain(format!(
            "variance component A must be nonnegative, got {a}"
        )));
    }
    Ok(d_i / (a + d_i))
}

/// `tr[V^-k] = sum_i (A + D_i)^-k` for `k` in `{1, 2, 3}`.
pub fn trace_v_inv_pow(data: &AreaLevelDataset, a: f64, k: u32) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return Err(Error::Domain(format!("trace power k must be 1, 2 or 3, got {k}")));
    }
    if !(a >= 0.0) {
        return Err(Error::Domain(format!(
            "variance component A must be nonnegative, got {a}"
        )));
    }
    Ok(data
        .d()
        .iter()
        .map(|&d| (a + d).powi(-(k as i32)))
        .sum())
}

/// Eigendecomposition-backed factorization of a symmetric positive definite
/// p x p matrix, with rank detection and a condition-number report.
#[derive(Debug, Clone)]
pub(crate) struct SpdFactor {
    q: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    pub(crate) condition_number: f64,
}

impl SpdFactor {
    pub(crate) fn new(mat: &DMatrix<f64>, context: &str) -> Result<Self> {
        let eig = mat.clone().symmetric_eigen();
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &l in eig.eigenvalues.iter() {
            min = min.min(l);
            max = max.max(l);
        }
        if !max.is_finite() {
            return Err(Error::NonFinite(context.to_string()));
        }
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(min > RANK_TOL * max.max(f64::MIN_POSITIVE)) {
            return Err(Error::Singular {
                context: context.to_string(),
                condition_number: cond,
            });
        }
        Ok(SpdFactor {
            q: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
            condition_number: cond,
        })
    }

    pub(crate) fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut coeff = self.q.transpose() * rhs;
        for (i, c) in coeff.iter_mut().enumerate() {
            *c /= self.eigenvalues[i];
        }
        &self.q * coeff
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        let p = self.eigenvalues.len();
        let mut scaled = self.q.clone();
        for j in 0..p {
            let inv = 1.0 / self.eigenvalues[j];
            for i in 0..p {
                scaled[(i, j)] *= inv;
            }
        }
        &scaled * self.q.transpose()
    }

    pub(crate) fn log_det(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.ln()).sum()
    }
}

/// Accumulates `X' W X` and `X' W y` for a diagonal weight vector `w`.
pub(crate) fn weighted_normal_equations(
    data: &AreaLevelDataset,
    weights: impl Fn(usize) -> f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let (m, p) = (data.m(), data.p());
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..m {
        let w = weights(i);
        let xi = data.x_row(i);
        let yi = data.y()[i];
        for a in 0..p {
            xtwy[a] += w * xi[a] * yi;
            for b in a..p {
                xtwx[(a, b)] += w * xi[a] * xi[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    (xtwx, xtwy)
}

/// Weighted least squares solution with its covariance.
#[derive(Debug, Clone)]
pub struct GlsSolution {
    pub beta: Vec<f64>,
    /// `(X' V^-1 X)^-1`, row-major p x p.
    pub cov: Vec<Vec<f64>>,
    pub condition_number: f64,
}

impl GlsSolution {
    pub fn fitted(&self, x_row: &[f64]) -> f64 {
        x_row.iter().zip(&self.beta).map(|(x, b)| x * b).sum()
    }
}

fn gls_with_weights(
    data: &AreaLevelDataset,
    weights: impl Fn(usize) -> f64,
) -> Result<GlsSolution> {
    let (xtwx, xtwy) = weighted_normal_equations(data, weights);
    let factor = SpdFactor::new(&xtwx, "X' V^-1 X")?;
    let beta = factor.solve_vec(&xtwy);
    let cov = factor.inverse();
    let p = data.p();
    Ok(GlsSolution {
        beta: beta.iter().cloned().collect(),
        cov: (0..p)
            .map(|i| (0..p).map(|j| cov[(i, j)]).collect())
            .collect(),
        condition_number: factor.condition_number,
    })
}

/// Weighted least squares estimator of `beta` at variance component `A`:
/// `beta(A) = (X' V^-1 X)^-1 X' V^-1 y` with `V = diag(A + D_i)`.
pub fn gls_beta(data: &AreaLevelDataset, a: f64) -> Result<GlsSolution> {
    if !(a >= 0.0) {
        return Err(Error::Domain(format!(
            "variance component A must be nonnegative, got {a}"
        )));
    }
    let d = data.d();
    gls_with_weights(data, |i| 1.0 / (a + d[i]))
}

/// GLS with the heterogeneous plug-in covariance `diag(A_i + D_i)`, as used
/// to recenter the parametric bootstrap when each area carries its own
/// variance-component estimate.
pub fn gls_beta_heterogeneous(data: &AreaLevelDataset, a_vec: &[f64]) -> Result<GlsSolution> {
    if a_vec.len() != data.m() {
        return Err(Error::Domain(format!(
            "A vector has length {}, expected m = {}",
            a_vec.len(),
            data.m()
        )));
    }
    if let Some(bad) = a_vec.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::Domain(format!(
            "heterogeneous GLS requires strictly positive A entries, got {bad}"
        )));
    }
    let d = data.d();
    gls_with_weights(data, |i| 1.0 / (a_vec[i] + d[i]))
}

/// Best linear unbiased predictor of `theta_i` at known `A`:
/// `(1 - B_i) y_i + B_i x_i' beta(A)`.
pub fn blup(data: &AreaLevelDataset, a: f64, i: usize) -> Result<f64> {
    let beta = gls_beta(data, a)?;
    blup_with_beta(data, a, i, &beta)
}

/// BLUP with a precomputed GLS solution; avoids refactoring `X' V^-1 X`
/// when predicting every area at the same `A`.
pub fn blup_with_beta(
    data: &AreaLevelDataset,
    a: f64,
    i: usize,
    beta: &GlsSolution,
) -> Result<f64> {
    if i >= data.m() {
        return Err(Error::Domain(format!(
            "area index {i} out of range for m = {}",
            data.m()
        )));
    }
    let b = shrinkage(a, data.d()[i])?;
    Ok((1.0 - b) * data.y()[i] + b * beta.fitted(data.x_row(i)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn dataset(y: &[f64], d: &[f64], x_cols: usize, x: &[f64]) -> AreaLevelDataset {
        let ids = (0..y.len()).map(|i| format!("a{i:03}")).collect();
        AreaLevelDataset::new(ids, y.to_vec(), d.to_vec(), x.to_vec(), x_cols).unwrap()
    }

    fn intercept_only(y: &[f64], d: &[f64]) -> AreaLevelDataset {
        dataset(y, d, 1, &vec![1.0; y.len()])
    }

    #[test]
    fn shrinkage_examples() {
        assert_eq!(shrinkage(1.0, 1.0).unwrap(), 0.5);
        assert_eq!(shrinkage(0.0, 3.0).unwrap(), 1.0);
        assert_eq!(shrinkage(3.0, 1.0).unwrap(), 0.25);
        assert!(shrinkage(1.0, 0.0).is_err());
        assert!(shrinkage(1.0, -2.0).is_err());
        assert!(shrinkage(-0.1, 1.0).is_err());
    }

    #[test]
    fn trace_examples() {
        let ds = intercept_only(&[0.0, 0.0], &[1.0, 3.0]);
        assert!((trace_v_inv_pow(&ds, 1.0, 2).unwrap() - 0.3125).abs() < 1e-15);

        let balanced = intercept_only(&[0.0; 7], &[2.0; 7]);
        let a = 0.7;
        assert!(
            (trace_v_inv_pow(&balanced, a, 2).unwrap() - 7.0 / ((a + 2.0) * (a + 2.0))).abs()
                < 1e-14
        );

        let ds3 = intercept_only(&[0.0, 0.0, 0.0], &[0.5, 1.0, 2.0]);
        let expect = 1.0 + 1.0 / 3.375 + 1.0 / 15.625;
        assert!((trace_v_inv_pow(&ds3, 0.5, 3).unwrap() - expect).abs() < 1e-14);

        assert!(trace_v_inv_pow(&ds3, 0.5, 4).is_err());
        assert!(trace_v_inv_pow(&ds3, -1.0, 2).is_err());
    }

    #[test]
    fn gls_balanced_is_mean() {
        let y = [1.0, 4.0, -2.0, 3.5, 0.25];
        let ds = intercept_only(&y, &[2.0; 5]);
        let mean = y.iter().sum::<f64>() / 5.0;
        for a in [0.0, 0.5, 10.0] {
            let sol = gls_beta(&ds, a).unwrap();
            assert!((sol.beta[0] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn gls_balanced_equals_ols() {
        // With V = c I the weights cancel and GLS is OLS.
        let y = [1.0, 2.0, 0.5, 3.0, -1.0, 2.5];
        let x = [
            1.0, 0.3, 1.0, -0.2, 1.0, 1.1, 1.0, 0.6, 1.0, -0.9, 1.0, 0.0,
        ];
        let ds = dataset(&y, &[1.5; 6], 2, &x);
        let gls = gls_beta(&ds, 2.0).unwrap();
        // OLS via unweighted normal equations.
        let ds_ols = dataset(&y, &[1.0; 6], 2, &x);
        let ols = gls_beta(&ds_ols, 0.0).unwrap();
        for k in 0..2 {
            assert!((gls.beta[k] - ols.beta[k]).abs() < 1e-11);
        }
    }

    #[test]
    fn gls_hand_weighted_average() {
        // m=3, D=(1,2,4), A=0, X=ones, y=(1,2,3):
        // beta = (1/1 + 2/2 + 3/4) / (1 + 1/2 + 1/4) = 2.75 / 1.75
        let ds = intercept_only(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]);
        let sol = gls_beta(&ds, 0.0).unwrap();
        assert!((sol.beta[0] - 2.75 / 1.75).abs() < 1e-14);
    }

    #[test]
    fn gls_rank_deficient_reports_condition_number() {
        // Second column is a multiple of the first: construction refuses it.
        let x = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let err = AreaLevelDataset::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 2.0, 3.0],
            vec![1.0, 1.0, 1.0],
            x.to_vec(),
            2,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("condition number"), "got: {msg}");
    }

    #[test]
    fn blup_limits() {
        let ds = intercept_only(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]);
        // A = 0: full shrinkage to the regression estimate.
        let beta0 = gls_beta(&ds, 0.0).unwrap();
        for i in 0..3 {
            assert!((blup(&ds, 0.0, i).unwrap() - beta0.fitted(ds.x_row(i))).abs() < 1e-13);
        }
        // A huge: no shrinkage.
        for i in 0..3 {
            assert!((blup(&ds, 1e10, i).unwrap() - ds.y()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn blup_matches_direct_formula() {
        let ds = intercept_only(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]);
        let a = 1.0;
        // Hand-computed weighted combination at A = 1.
        let w: Vec<f64> = ds.d().iter().map(|&d| 1.0 / (a + d)).collect();
        let beta = ds
            .y()
            .iter()
            .zip(&w)
            .map(|(y, w)| y * w)
            .sum::<f64>()
            / w.iter().sum::<f64>();
        let b0 = ds.d()[0] / (a + ds.d()[0]);
        let expect = (1.0 - b0) * ds.y()[0] + b0 * beta;
        assert!((blup(&ds, a, 0).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn heterogeneous_reduces_to_homogeneous() {
        let ds = dataset(
            &[1.0, 2.0, 3.0, 1.5],
            &[1.0, 2.0, 4.0, 0.5],
            2,
            &[1.0, 0.1, 1.0, 0.4, 1.0, -0.3, 1.0, 0.9],
        );
        let a = 0.75;
        let hom = gls_beta(&ds, a).unwrap();
        let het = gls_beta_heterogeneous(&ds, &[a; 4]).unwrap();
        for k in 0..2 {
            assert!((hom.beta[k] - het.beta[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn heterogeneous_balanced_is_mean() {
        let y = [2.0, 4.0, 9.0];
        let ds = intercept_only(&y, &[1.0; 3]);
        let sol = gls_beta_heterogeneous(&ds, &[0.5; 3]).unwrap();
        assert!((sol.beta[0] - 5.0).abs() < 1e-13);
    }

    #[test]
    fn heterogeneous_matches_normal_equation_oracle() {
        let ds = intercept_only(&[1.0, -2.0, 4.0], &[0.5, 2.0, 8.0]);
        let a_vec = [0.25, 1.0, 3.0];
        // 1x1 normal equations solved directly.
        let w: Vec<f64> = (0..3).map(|i| 1.0 / (a_vec[i] + ds.d()[i])).collect();
        let expect =
            w.iter().zip(ds.y()).map(|(w, y)| w * y).sum::<f64>() / w.iter().sum::<f64>();
        let sol = gls_beta_heterogeneous(&ds, &a_vec).unwrap();
        assert!((sol.beta[0] - expect).abs() < 1e-14);
        assert!(gls_beta_heterogeneous(&ds, &[0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(AreaLevelDataset::new(vec![], vec![], vec![], vec![], 1).is_err());
        // nonpositive D
        assert!(AreaLevelDataset::new(
            vec!["a".into()],
            vec![1.0],
            vec![0.0],
            vec![1.0],
            1
        )
        .is_err());
        // duplicate ids
        assert!(AreaLevelDataset::new(
            vec!["a".into(), "a".into()],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            1
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn shrinkage_decreasing_in_a(d in 0.05f64..20.0, a1 in 0.0f64..50.0, delta in 0.001f64..50.0) {
            let b1 = shrinkage(a1, d).unwrap();
            let b2 = shrinkage(a1 + delta, d).unwrap();
            prop_assert!(b2 < b1);
            prop_assert!(b1 <= 1.0 && b1 > 0.0);
        }

        #[test]
        fn trace_decreasing_in_a(k in 1u32..=3, a in 0.0f64..10.0, delta in 0.01f64..10.0) {
            let ds = intercept_only(&[0.0, 1.0, 2.0, 3.0], &[0.5, 1.0, 2.0, 4.0]);
            let t1 = trace_v_inv_pow(&ds, a, k).unwrap();
            let t2 = trace_v_inv_pow(&ds, a + delta, k).unwrap();
            prop_assert!(t2 < t1);
        }

        #[test]
        fn blup_between_direct_and_synthetic(
            a in 0.0f64..30.0,
            y in proptest::collection::vec(-5.0f64..5.0, 4),
            d in proptest::collection::vec(0.1f64..8.0, 4),
        ) {
            let ds = intercept_only(&y, &d);
            let beta = gls_beta(&ds, a).unwrap();
            for i in 0..4 {
                let t = blup(&ds, a, i).unwrap();
                let synth = beta.fitted(ds.x_row(i));
                let lo = ds.y()[i].min(synth) - 1e-12;
                let hi = ds.y()[i].max(synth) + 1e-12;
                prop_assert!(t >= lo && t <= hi);
            }
        }

        #[test]
        fn gls_permutation_invariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let y = [1.0, -2.0, 0.5, 3.0, 2.0];
            let d = [0.5, 1.0, 2.0, 4.0, 8.0];
            let x = [1.0, 0.1, 1.0, 0.5, 1.0, -0.4, 1.0, 0.8, 1.0, 0.2];
            let ds = dataset(&y, &d, 2, &x);
            let sol = gls_beta(&ds, 1.0).unwrap();

            let mut order: Vec<usize> = (0..5).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
            let dp: Vec<f64> = order.iter().map(|&i| d[i]).collect();
            let mut xp = Vec::new();
            for &i in &order {
                xp.extend_from_slice(&x[2 * i..2 * i + 2]);
            }
            let dsp = dataset(&yp, &dp, 2, &xp);
            let solp = gls_beta(&dsp, 1.0).unwrap();
            for k in 0..2 {
                prop_assert!((sol.beta[k] - solp.beta[k]).abs() < 1e-11);
            }
        }

        #[test]
        fn gls_cov_symmetric_psd(a in 0.0f64..10.0) {
            let y = [1.0, -2.0, 0.5, 3.0, 2.0, 0.0];
            let d = [0.5, 1.0, 2.0, 4.0, 8.0, 1.0];
            let x = [1.0, 0.1, 1.0, 0.5, 1.0, -0.4, 1.0, 0.8, 1.0, 0.2, 1.0, -0.6];
            let ds = dataset(&y, &d, 2, &x);
            let sol = gls_beta(&ds, a).unwrap();
            let c = &sol.cov;
            let scale = c[0][0].abs().max(c[1][1].abs());
            prop_assert!((c[0][1] - c[1][0]).abs() <= 1e-10 * scale);
            // 2x2 PSD: nonnegative diagonal and determinant.
            prop_assert!(c[0][0] >= -1e-10 * scale);
            prop_assert!(c[1][1] >= -1e-10 * scale);
            prop_assert!(c[0][0] * c[1][1] - c[0][1] * c[1][0] >= -1e-10 * scale * scale);
        }
    }
}
