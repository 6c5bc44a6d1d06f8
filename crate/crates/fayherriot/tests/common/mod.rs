//! Shared test utilities: the dense-grid posterior oracle and a CLI runner.
//!
//! The oracle is deliberately primitive: intercept-only designs, raw loops,
//! a log-spaced grid and the trapezoid rule, sharing no code with the
//! adaptive quadrature engine it cross-checks. It stays in the test tree
//! permanently.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

#[derive(Debug, Clone, Copy)]
pub struct OracleSummary {
    pub e_b: f64,
    pub v_b: f64,
    pub e_theta: f64,
    pub v_theta: f64,
}

/// Posterior summaries of `(B_area, theta_area)` for the intercept-only
/// two-level model, by trapezoid integration of `exp(l_RE + log pi + t)`
/// on `nodes` log-spaced points over `[a_lo, a_hi]`.
pub fn dense_grid_posterior(
    y: &[f64],
    d: &[f64],
    area: usize,
    log_prior: impl Fn(f64) -> f64,
    a_lo: f64,
    a_hi: f64,
    nodes: usize,
) -> OracleSummary {
    let m = y.len();
    assert!(d.len() == m && area < m && nodes >= 3);
    let t_lo = a_lo.ln();
    let t_hi = a_hi.ln();
    let h = (t_hi - t_lo) / (nodes - 1) as f64;

    let mut log_w = vec![0.0f64; nodes];
    let mut b_vals = vec![0.0f64; nodes];
    let mut blup_vals = vec![0.0f64; nodes];
    let mut condvar_vals = vec![0.0f64; nodes];
    for k in 0..nodes {
        let t = t_lo + h * k as f64;
        let a = t.exp();
        let mut sum_log = 0.0;
        let mut sw = 0.0;
        let mut swy = 0.0;
        let mut swy2 = 0.0;
        for i in 0..m {
            let w = 1.0 / (a + d[i]);
            sum_log += (a + d[i]).ln();
            sw += w;
            swy += w * y[i];
            swy2 += w * y[i] * y[i];
        }
        let l_re = -0.5 * (sum_log + sw.ln() + swy2 - swy * swy / sw);
        log_w[k] = l_re + log_prior(a) + t;
        let b = d[area] / (a + d[area]);
        let beta = swy / sw;
        b_vals[k] = b;
        blup_vals[k] = (1.0 - b) * y[area] + b * beta;
        condvar_vals[k] = a * d[area] / (a + d[area]) + b * b / sw;
    }
    let g_max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|g| (g - g_max).exp()).collect();

    let trapezoid = |f: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = 0.5 * (f(0) * w[0] + f(nodes - 1) * w[nodes - 1]);
        for k in 1..nodes - 1 {
            acc += f(k) * w[k];
        }
        acc * h
    };

    let z = trapezoid(&|_| 1.0);
    let e_b = trapezoid(&|k| b_vals[k]) / z;
    let e_theta = trapezoid(&|k| blup_vals[k]) / z;
    let v_b = trapezoid(&|k| (b_vals[k] - e_b) * (b_vals[k] - e_b)) / z;
    let v_theta = trapezoid(&|k| condvar_vals[k]) / z
        + trapezoid(&|k| (blup_vals[k] - e_theta) * (blup_vals[k] - e_theta)) / z;
    OracleSummary {
        e_b,
        v_b,
        e_theta,
        v_theta,
    }
}

pub fn rel_err(got: f64, expect: f64) -> f64 {
    (got - expect).abs() / expect.abs().max(f64::MIN_POSITIVE)
}

/// Runs the packaged CLI binary with the given arguments and environment.
pub fn run_cli(args: &[&str], envs: &[(&str, &str)], cwd: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fayherriot"));
    cmd.args(args).current_dir(cwd);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("CLI binary failed to start")
}

/// Fresh scratch directory for a test, removed by the caller when wanted.
pub fn scratch_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "fayherriot-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
