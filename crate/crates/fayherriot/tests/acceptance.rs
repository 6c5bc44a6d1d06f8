//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run `cargo test --test acceptance -- --nocapture` to see every line;
//! the per-test outcome list carries the same information either way.

mod common;

use std::sync::Mutex;
use std::time::Instant;

/// Criteria carry wall-clock budgets, so the suite runs one criterion at a
/// time; parallel siblings would contend for the cores and distort the
/// measurements.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

use fayherriot::bayes::{
    posterior_summaries_shared, posterior_summary, posterior_summary_with_window, BayesOptions,
};
use fayherriot::estimators::{maximize_adjusted_likelihood, FitMethod};
use fayherriot::likelihood::{check_propriety, PriorSpec};
use fayherriot::model::AreaLevelDataset;
use fayherriot::nerm::{
    adjustment_gradient, curvature_h, fisher_inverse, shrinkage_gradient, shrinkage_hessian,
    NermDesign, Psi,
};
use fayherriot::verify::{
    agreement_study, DPattern, SimulationConfig, Simulator, StudyOptions, StudyKind, XDesign,
};

use common::{dense_grid_posterior, rel_err};

fn balanced_cfg(m: usize, d: f64, seed: u64) -> SimulationConfig {
    SimulationConfig {
        m,
        p: 1,
        true_beta: vec![0.0],
        true_a: 1.0,
        d_pattern: DPattern::Balanced(d),
        x_design: XDesign::InterceptOnly,
        replications: 1,
        seed,
    }
}

fn balanced_sum_of_squares(y: &[f64]) -> f64 {
    let m = y.len() as f64;
    let mean = y.iter().sum::<f64>() / m;
    y.iter().map(|v| (v - mean) * (v - mean)).sum()
}

#[test]
fn acceptance_01_balanced_reml_closed_form() {
    let _guard = serial();
    let start = Instant::now();
    let data = Simulator::new(&balanced_cfg(20, 1.0, 20)).unwrap().replicate(0).dataset;
    let s = balanced_sum_of_squares(data.y());
    let closed_form = (s / 19.0 - 1.0).max(0.0);
    assert!(closed_form > 0.0, "seed must give an interior solution");
    let (a_hat, _) = maximize_adjusted_likelihood(&data, &FitMethod::reml(), 0).unwrap();
    let err = (a_hat - closed_form).abs();
    assert!(err < 1e-8, "|A_RE - closed form| = {err:.3e}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 01 PASS: balanced REML matches S/(m-1) - D to {err:.2e} in {elapsed:?}"
    );
}

#[test]
fn acceptance_02_balanced_power_closed_form() {
    let _guard = serial();
    let data = Simulator::new(&balanced_cfg(20, 1.0, 20)).unwrap().replicate(0).dataset;
    let s = balanced_sum_of_squares(data.y());
    let closed_form = s / 17.0; // A + D = S/(m - p - 2), m = 20, p = 1
    let (a_hat, _) = maximize_adjusted_likelihood(&data, &FitMethod::power(1.0), 0).unwrap();
    let err = ((a_hat + 1.0) - closed_form).abs();
    assert!(err < 1e-8, "|A+D - S/(m-p-2)| = {err:.3e}");
    println!("ACCEPTANCE 02 PASS: power-adjusted closed form matched to {err:.2e}");
}

#[test]
fn acceptance_03_quadrature_vs_dense_grid_oracle() {
    let _guard = serial();
    let start = Instant::now();
    // The pinned m = 3 instance. With m = p + 2 the flat posterior is
    // improper (the propriety bound needs m > p + 2), so both sides
    // integrate the same explicit window; the engine's own truncation is
    // cross-checked on the proper m = 6 instance below.
    let y3 = [0.0, 1.0, 2.0];
    let d3 = [1.0, 2.0, 4.0];
    let ids = vec!["a".into(), "b".into(), "c".into()];
    let data3 = AreaLevelDataset::new(ids, y3.to_vec(), d3.to_vec(), vec![1.0; 3], 1).unwrap();
    let (a_lo, a_hi) = (1e-6, 1e6);
    let opts = BayesOptions::default();
    // Frozen oracle values (e_b, v_b, e_theta, v_theta) per area, computed
    // once from the dense grid; the live oracle must reproduce them.
    let frozen = [
        [
            4.06317720366435250e-2,
            1.45846946095278557e-2,
            3.14898006771811081e-2,
            9.84515557647721251e-1,
        ],
        [
            6.04324172198892201e-2,
            2.38775450179652890e-2,
            9.87858029235542112e-1,
            1.92098181050538641e0,
        ],
        [
            8.63886682014369245e-2,
            3.69000363083182778e-2,
            1.89832473882020891e0,
            3.79839100890324533e0,
        ],
    ];
    let mut worst: f64 = 0.0;
    for area in 0..3 {
        let oracle = dense_grid_posterior(&y3, &d3, area, |_| 0.0, a_lo, a_hi, 200_000);
        for (k, o) in [oracle.e_b, oracle.v_b, oracle.e_theta, oracle.v_theta]
            .into_iter()
            .enumerate()
        {
            assert!(
                rel_err(o, frozen[area][k]) < 1e-9,
                "oracle drifted from its frozen value: area {area} slot {k}"
            );
        }
        let got =
            posterior_summary_with_window(&data3, &PriorSpec::Flat, area, a_lo, a_hi, &opts)
                .unwrap();
        for (name, g, o) in [
            ("e_b", got.e_b, oracle.e_b),
            ("v_b", got.v_b, oracle.v_b),
            ("e_theta", got.e_theta, oracle.e_theta),
            ("v_theta", got.v_theta, oracle.v_theta),
        ] {
            let rel = rel_err(g, o);
            worst = worst.max(rel);
            assert!(rel < 1e-6, "area {area} {name}: engine {g} vs oracle {o} (rel {rel:.2e})");
        }
    }

    // Proper instance: the engine picks its own truncation; the oracle
    // integrates a much wider window.
    let y6 = [1.4, -0.3, 2.2, 0.7, -1.1, 1.9];
    let d6 = [0.5, 1.0, 2.0, 4.0, 1.5, 3.0];
    let ids6 = (0..6).map(|i| format!("s{i}")).collect();
    let data6 = AreaLevelDataset::new(ids6, y6.to_vec(), d6.to_vec(), vec![1.0; 6], 1).unwrap();
    for area in [0usize, 3, 5] {
        let got = posterior_summary(&data6, &PriorSpec::Flat, area, &opts).unwrap();
        let oracle = dense_grid_posterior(&y6, &d6, area, |_| 0.0, 1e-12, 1e10, 400_000);
        for (name, g, o) in [
            ("e_b", got.e_b, oracle.e_b),
            ("v_b", got.v_b, oracle.v_b),
            ("e_theta", got.e_theta, oracle.e_theta),
            ("v_theta", got.v_theta, oracle.v_theta),
        ] {
            let rel = rel_err(g, o);
            worst = worst.max(rel);
            assert!(rel < 1e-6, "proper area {area} {name}: {g} vs {o} (rel {rel:.2e})");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 03 PASS: quadrature within {worst:.2e} of the dense-grid oracle in {elapsed:?}"
    );
}

#[test]
fn acceptance_04_balanced_prior_equivalence() {
    let _guard = serial();
    // Balanced data: the multi-goal prior is constant in A, so posterior
    // means of B under it and under the flat prior coincide.
    let data = Simulator::new(&balanced_cfg(12, 1.5, 4)).unwrap().replicate(0).dataset;
    let opts = BayesOptions::default();
    let flat = posterior_summaries_shared(&data, &PriorSpec::Flat, &opts).unwrap();
    let mut worst: f64 = 0.0;
    for area in 0..data.m() {
        let mg =
            posterior_summary(&data, &PriorSpec::MultiGoal { area }, area, &opts).unwrap();
        for (name, g, f) in [
            ("e_b", mg.e_b, flat[area].e_b),
            ("v_b", mg.v_b, flat[area].v_b),
            ("e_theta", mg.e_theta, flat[area].e_theta),
            ("v_theta", mg.v_theta, flat[area].v_theta),
        ] {
            let gap = (g - f).abs();
            worst = worst.max(gap);
            assert!(gap < 1e-8, "area {area} {name}: MG {g} vs flat {f}");
        }
    }
    println!("ACCEPTANCE 04 PASS: balanced MG and flat posterior summaries agree to {worst:.2e}");
}

#[test]
fn acceptance_05_adjustment_gap_trend() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = SimulationConfig {
        m: 25,
        p: 1,
        true_beta: vec![0.0],
        true_a: 1.0,
        d_pattern: DPattern::Geometric { min: 0.5, max: 8.0 },
        x_design: XDesign::InterceptOnly,
        replications: 500,
        seed: 1001,
    };
    let report = agreement_study(
        &cfg,
        StudyKind::AdjustmentGap { power_s: 1.0 },
        &[25, 50, 100, 200],
        &StudyOptions::default(),
    )
    .unwrap();
    // Boundary-REML replicates are flagged and excluded per the gap
    // operation's contract; their rate is reported alongside the trend
    // (about 6% at m = 25 under this heavily unbalanced configuration).
    let rates: Vec<f64> = report
        .exclusions
        .iter()
        .map(|e| e.excluded as f64 / e.total as f64)
        .collect();
    assert!(rates.iter().all(|r| *r < 0.10), "exclusion rates {rates:?}");
    let medians: Vec<f64> = [25, 50, 100, 200]
        .iter()
        .map(|&m| report.row(m, "m_abs_gap_dev", "pooled").unwrap().median)
        .collect();
    assert!(
        medians.windows(2).all(|w| w[1] < w[0]),
        "medians of m|observed - predicted| do not strictly decrease: {medians:?}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 05 PASS: adjusted-vs-REML gap deviation medians strictly decrease {medians:?} (boundary exclusion rates {rates:?}) in {elapsed:?}"
    );
}

#[test]
fn acceptance_06_property_i_bias() {
    let _guard = serial();
    let start = Instant::now();
    // Sampling variances log-spaced over a decade, the default unbalanced
    // pattern of the verify harness.
    let cfg = SimulationConfig {
        m: 50,
        p: 1,
        true_beta: vec![0.0],
        true_a: 2.0,
        d_pattern: DPattern::Geometric { min: 0.5, max: 5.0 },
        x_design: XDesign::InterceptOnly,
        replications: 2000,
        seed: 1002,
    };
    let report = fayherriot::verify::bias_study(&cfg, &StudyOptions::default()).unwrap();
    for e in &report.exclusions {
        assert!((e.excluded as f64) <= 0.05 * e.total as f64);
    }
    // Multi-goal posterior mean: m-scaled bias within 2 MC standard errors
    // of zero for every tracked area class.
    for class in ["min_d", "mid_d", "max_d"] {
        let row = report.row(50, "m_bias_e_mg_post", class).unwrap();
        assert!(
            row.mean.abs() <= 2.0 * row.std_error,
            "MG posterior bias at {class}: {} (2 SE = {})",
            row.mean,
            2.0 * row.std_error
        );
    }
    // Flat posterior mean: biased beyond 2 standard errors at an extreme-D
    // area class.
    let mut extreme_hit = false;
    for class in ["min_d", "max_d"] {
        let row = report.row(50, "m_bias_e_flat_post", class).unwrap();
        if row.mean.abs() > 2.0 * row.std_error {
            extreme_hit = true;
        }
    }
    assert!(extreme_hit, "flat-prior bias not detected at the extreme-D areas");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!("ACCEPTANCE 06 PASS: MG posterior second-order unbiased, flat prior biased, in {elapsed:?}");
}

#[test]
fn acceptance_07_properties_iv_v_at_application_scale() {
    let _guard = serial();
    let start = Instant::now();
    // 51 areas, intercept plus three covariates. The per-area gap between
    // the posterior variance and the Taylor MSE behaves like
    // g3 * (standardized residual^2 - 1); holding its maximum over 51
    // areas under 5% needs the variance component well identified relative
    // to the sampling variances, hence the strong-auxiliary regime here
    // (A = 2, D log-spaced over a decade up to 0.5).
    let cfg = SimulationConfig {
        m: 51,
        p: 4,
        true_beta: vec![2.0, 1.0, 0.5, -0.5],
        true_a: 2.0,
        d_pattern: DPattern::Geometric { min: 0.05, max: 0.5 },
        x_design: XDesign::RandomUniform { seed: 1 },
        replications: 1,
        seed: 1,
    };
    let report = agreement_study(
        &cfg,
        StudyKind::MseMatch {
            bootstrap_replicates: 10_000,
        },
        &[51],
        &StudyOptions::default(),
    )
    .unwrap();
    let iv = report
        .thresholds
        .iter()
        .find(|t| t.name == "iv_posterior_variance_matches_taylor")
        .unwrap();
    let v = report
        .thresholds
        .iter()
        .find(|t| t.name == "v_bootstrap_matches_taylor")
        .unwrap();
    assert!(iv.passed, "{}", iv.description);
    assert!(v.passed, "{}", v.description);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 07 PASS: {} / {} in {elapsed:?}",
        iv.description, v.description
    );
}

#[test]
fn acceptance_08_var_b_hat_formula() {
    let _guard = serial();
    let cfg = SimulationConfig {
        replications: 2000,
        ..balanced_cfg(100, 1.0, 1004)
    };
    let sim = Simulator::new(&cfg).unwrap();
    let replicates = 2000u64;
    let b_hats: Vec<f64> = (0..replicates)
        .map(|r| {
            let data = sim.replicate(r).dataset;
            let (a_hat, _) =
                maximize_adjusted_likelihood(&data, &FitMethod::multi_goal(), 0).unwrap();
            data.d()[0] / (a_hat + data.d()[0])
        })
        .collect();
    let n = b_hats.len() as f64;
    let mean = b_hats.iter().sum::<f64>() / n;
    let s2 = b_hats.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (n - 1.0);
    let m4 = b_hats.iter().map(|b| (b - mean).powi(4)).sum::<f64>() / n;
    let var_of_s2 = (m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n;
    let se = var_of_s2.sqrt();
    // Formula value at the true A: 1/(2m) for balanced A = D = 1.
    let data0 = sim.replicate(0).dataset;
    let formula = fayherriot::mse::var_b_hat(&data0, 1.0, 0).unwrap();
    assert!((formula - 1.0 / 200.0).abs() < 1e-12);
    let dev = (s2 - formula).abs();
    assert!(
        dev <= 3.0 * se,
        "sample variance {s2:.6} vs formula {formula:.6} (3 SE = {:.6})",
        3.0 * se
    );
    println!(
        "ACCEPTANCE 08 PASS: Var(B_MG) sample {s2:.6} within 3 SE ({:.1e}) of formula {formula:.6}",
        3.0 * se
    );
}

#[test]
fn acceptance_09_propriety_truth_table() {
    let _guard = serial();
    let cases = [
        (2.0, true, true),
        (3.0, false, true),
        (4.0, false, false),
    ];
    for (s, raw, general) in cases {
        let flags = check_propriety(s, 10, 2);
        assert_eq!(flags.proper_as_raw_adjustment, raw, "s = {s}");
        assert_eq!(flags.proper_as_general_mg_prior, general, "s = {s}");
    }
    println!("ACCEPTANCE 09 PASS: propriety truth table exact for s in {{2, 3, 4}}, m = 10, p = 2");
}

#[test]
fn acceptance_10_nerm_formula_suite() {
    let _guard = serial();
    let start = Instant::now();
    use rand::Rng;
    use rand::SeedableRng;

    // Balanced closed-form oracle at 1e-10.
    let (m, n) = (7usize, 5u64);
    let psi = Psi::new(1.3, 0.9).unwrap();
    let design = NermDesign::new(vec![n; m]).unwrap();
    let nf = n as f64;
    let dd = nf * psi.sigma_v2 + psi.sigma_e2;
    let i11 = (m as f64 / 2.0) * nf * nf / (dd * dd);
    let i12 = (m as f64 / 2.0) * nf / (dd * dd);
    let i22 = (m as f64 / 2.0) * ((nf - 1.0) / (psi.sigma_e2 * psi.sigma_e2) + 1.0 / (dd * dd));
    let det = i11 * i22 - i12 * i12;
    let oracle = [[i22 / det, -i12 / det], [-i12 / det, i11 / det]];
    let inv = fisher_inverse(&design, &psi).unwrap();
    assert_eq!(inv[0][1], inv[1][0]);
    assert!(inv[0][0] > 0.0 && inv[0][0] * inv[1][1] - inv[0][1] * inv[1][0] > 0.0);
    for r in 0..2 {
        for c in 0..2 {
            assert!(
                rel_err(inv[r][c], oracle[r][c]) < 1e-10,
                "Fisher inverse ({r},{c}): {} vs oracle {}",
                inv[r][c],
                oracle[r][c]
            );
        }
    }

    // Gradient and Hessian against finite differences at 1e-6 relative.
    let b = |v: f64, e: f64, n: f64| e / (n * v + e);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10_000);
    for _ in 0..20 {
        let p = Psi::new(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)).unwrap();
        let n_i = rng.random_range(1u64..10);
        let nf = n_i as f64;
        let g = shrinkage_gradient(&p, n_i);
        let h = 1e-6 * (1.0 + p.sigma_v2.max(p.sigma_e2));
        let fd = [
            (b(p.sigma_v2 + h, p.sigma_e2, nf) - b(p.sigma_v2 - h, p.sigma_e2, nf)) / (2.0 * h),
            (b(p.sigma_v2, p.sigma_e2 + h, nf) - b(p.sigma_v2, p.sigma_e2 - h, nf)) / (2.0 * h),
        ];
        for k in 0..2 {
            assert!(
                (g[k] - fd[k]).abs() <= 1e-6 * (1.0 + g[k].abs()),
                "gradient[{k}]: {} vs fd {}",
                g[k],
                fd[k]
            );
        }
        let hess = shrinkage_hessian(&p, n_i);
        let hv = [
            (b(p.sigma_v2 + h, p.sigma_e2, nf) - 2.0 * b(p.sigma_v2, p.sigma_e2, nf)
                + b(p.sigma_v2 - h, p.sigma_e2, nf))
                / (h * h),
            (b(p.sigma_v2 + h, p.sigma_e2 + h, nf) - b(p.sigma_v2 + h, p.sigma_e2 - h, nf)
                - b(p.sigma_v2 - h, p.sigma_e2 + h, nf)
                + b(p.sigma_v2 - h, p.sigma_e2 - h, nf))
                / (4.0 * h * h),
            (b(p.sigma_v2, p.sigma_e2 + h, nf) - 2.0 * b(p.sigma_v2, p.sigma_e2, nf)
                + b(p.sigma_v2, p.sigma_e2 - h, nf))
                / (h * h),
        ];
        for (got, fd) in [(hess[0][0], hv[0]), (hess[0][1], hv[1]), (hess[1][1], hv[2])] {
            assert!(
                (got - fd).abs() <= 1e-4 * (1.0 + got.abs()),
                "hessian: {got} vs fd {fd}"
            );
        }
    }

    // Defining-equation residual below 1e-12 relative over 100 randomized
    // inputs.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(777);
    let mut checked = 0;
    while checked < 100 {
        let areas = rng.random_range(2usize..9);
        let mut units: Vec<u64> = (0..areas).map(|_| rng.random_range(1u64..8)).collect();
        if !units.iter().any(|&v| v >= 2) {
            units[0] = 2;
        }
        let design = NermDesign::new(units).unwrap();
        let p = Psi::new(rng.random_range(0.1..4.0), rng.random_range(0.1..4.0)).unwrap();
        let area = rng.random_range(0..areas);
        let k: [f64; 2] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let Ok(g) = adjustment_gradient(&design, &p, area, k) else {
            continue;
        };
        let inv = fisher_inverse(&design, &p).unwrap();
        let db = shrinkage_gradient(&p, design.n()[area]);
        let ig = [
            inv[0][0] * db[0] + inv[0][1] * db[1],
            inv[1][0] * db[0] + inv[1][1] * db[1],
        ];
        let h = curvature_h(&design, &p, area).unwrap();
        let residual = (g[0] * ig[0] + g[1] * ig[1] - h).abs() / h.abs().max(f64::MIN_POSITIVE);
        assert!(residual < 1e-12, "defining-equation residual {residual:.3e}");
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("ACCEPTANCE 10 PASS: NERM formula suite (oracle, finite differences, 100 random residuals) in {elapsed:?}");
}

#[test]
fn acceptance_11_determinism_across_runs_and_thread_counts() {
    let _guard = serial();
    use common::{run_cli, scratch_dir};
    let dir = scratch_dir("acceptance11");
    let data_csv = dir.join("data.csv");
    let synth = run_cli(
        &[
            "synth",
            "--m",
            "16",
            "--seed",
            "9",
            "--out",
            data_csv.to_str().unwrap(),
        ],
        &[],
        &dir,
    );
    assert!(synth.status.success());

    let sim_conf = dir.join("sim.conf");
    std::fs::write(
        &sim_conf,
        "study = adjustment-gap\nm = 15\np = 1\ntrue_a = 1.0\ntrue_beta = 0.0\n\
         d_pattern = geometric(0.5, 4)\nreplications = 40\nseed = 5\nm_ladder = 15,30\n",
    )
    .unwrap();

    // Reports embed the resolved configuration including the paths as
    // given, so each run uses identical relative paths from its own clean
    // working directory.
    let jobs: Vec<(Vec<&str>, &str)> = vec![
        (
            vec!["fit", "--input", "data.csv", "--method", "mg", "--format", "json"],
            "fit.json",
        ),
        (
            vec![
                "bayes", "--input", "data.csv", "--prior", "mg", "--prior", "flat",
                "--format", "csv",
            ],
            "bayes.csv",
        ),
        (
            vec![
                "bootstrap", "--input", "data.csv", "--replicates", "400", "--seed", "31",
                "--format", "json",
            ],
            "boot.json",
        ),
        (
            vec!["simulate", "--config", "sim.conf", "--format", "json"],
            "study.json",
        ),
    ];

    for (args, file_name) in &jobs {
        let mut outputs: Vec<Vec<u8>> = Vec::new();
        for (run, threads) in [(0, "1"), (1, "2"), (2, "1")] {
            let run_dir = dir.join(format!("{file_name}-run{run}"));
            std::fs::create_dir_all(&run_dir).unwrap();
            std::fs::copy(&data_csv, run_dir.join("data.csv")).unwrap();
            std::fs::copy(&sim_conf, run_dir.join("sim.conf")).unwrap();
            let mut full: Vec<&str> = args.clone();
            full.push("--out");
            full.push(file_name);
            let out = run_cli(&full, &[("RAYON_NUM_THREADS", threads)], &run_dir);
            assert!(
                out.status.success(),
                "{file_name} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            outputs.push(std::fs::read(run_dir.join(file_name)).unwrap());
        }
        assert_eq!(outputs[0], outputs[1], "{file_name}: thread count changed the bytes");
        assert_eq!(outputs[0], outputs[2], "{file_name}: re-run changed the bytes");
    }
    let _ = std::fs::remove_dir_all(&dir);
    println!("ACCEPTANCE 11 PASS: seeded commands byte-identical across runs and thread counts");
}
