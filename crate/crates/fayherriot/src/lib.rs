//! Toolkit for the two-level normal area-level model (Fay-Herriot model)
//!
//! ```text
//! sampling level:  y_i | theta_i ~ N(theta_i, D_i),   D_i known
//! linking level:   theta_i       ~ N(x_i' beta, A),   (beta, A) unknown
//! ```
//!
//! The crate provides, for `i = 1..m` small areas:
//!
//! * generalized least squares and BLUP/EBLUP prediction ([`model`]),
//! * the residual (restricted) log likelihood of `A`, adjustment factors
//!   for adjusted maximum likelihood, prior densities on `A`, and a
//!   posterior-propriety checker ([`likelihood`]),
//! * one-dimensional maximization of adjusted likelihoods producing
//!   ML / REML / power-adjusted / multi-goal fits ([`estimators`]),
//! * second-order MSE machinery: g1/g2/g3 components, the Taylor-series
//!   MSE estimator and a single parametric bootstrap MSE estimator ([`mse`]),
//! * exact (to quadrature tolerance) posterior summaries of the shrinkage
//!   factor `B_i` and of `theta_i` under pluggable priors ([`bayes`]),
//! * a Monte Carlo harness that checks the higher-order agreement between
//!   the Bayesian and classical solutions at desk scale ([`verify`]),
//! * evaluators for the nested error regression model extension ([`nerm`]),
//! * CSV ingestion, report emission and the CLI command layer ([`cli`]).
//!
//! All numeric routines are pure functions of immutable inputs and safe to
//! call concurrently. Every randomized routine draws from counter-based
//! streams keyed by `(seed, replicate)` so results are reproducible across
//! runs and thread counts.
//!
//! # Example
//!
//! ```
//! use fayherriot::bayes::{posterior_summary, BayesOptions};
//! use fayherriot::estimators::{fit, FitMethod};
//! use fayherriot::likelihood::PriorSpec;
//! use fayherriot::model::AreaLevelDataset;
//! use fayherriot::mse::taylor_mse;
//!
//! let data = AreaLevelDataset::new(
//!     (0..8).map(|i| format!("area{i}")).collect(),
//!     vec![1.2, -0.4, 2.6, 0.1, 1.9, -1.3, 0.8, 2.2], // direct estimates
//!     vec![0.5, 0.8, 1.2, 2.0, 0.6, 1.0, 1.5, 0.9],   // known sampling variances
//!     vec![1.0; 8],                                    // intercept-only design
//!     1,
//! )?;
//!
//! // Multi-goal fit: per-area variance component, shrinkage, EBLUP.
//! let mg = fit(&data, &FitMethod::multi_goal())?;
//! let area = 2;
//! assert!(mg.areas[area].a_hat > 0.0);
//! let mse = taylor_mse(&data, &mg, area)?;
//!
//! // Posterior summaries under the matching multi-goal prior.
//! let post = posterior_summary(
//!     &data,
//!     &PriorSpec::MultiGoal { area },
//!     area,
//!     &BayesOptions::default(),
//! )?;
//! assert!((post.e_b - mg.areas[area].b_hat).abs() < 0.2);
//! assert!(post.v_theta > 0.0 && mse > 0.0);
//! # Ok::<(), fayherriot::Error>(())
//! ```

pub mod bayes;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod likelihood;
pub mod model;
pub mod mse;
pub mod nerm;
mod numeric;
mod optimize;
mod quadrature;
pub mod report;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use model::AreaLevelDataset;
