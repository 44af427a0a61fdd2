//! Probabilistic partition-of-unity networks.
//!
//! A regression model built from three parts:
//!
//! - an optional encoder network that maps inputs onto a low-dimensional
//!   latent space,
//! - a softmax classifier whose outputs form a partition of unity over `J`
//!   clusters,
//! - one fixed-degree polynomial per cluster, defined on the latent space.
//!
//! The output is a Gaussian mixture whose weights come from the classifier
//! and whose component means are the polynomials. Training alternates
//! gradient steps on the networks with closed-form EM updates: weighted
//! least squares for the polynomial coefficients and analytic variance
//! updates (optionally under a fixed background noise).
//!
//! ```no_run
//! use ppou_core::config::RunConfig;
//! use ppou_core::data;
//! use ppou_core::trainer;
//!
//! let ds = data::gen_sine_noise(1024, 0.1, 7);
//! let cfg = RunConfig::sine_benchmark();
//! let fit = trainer::train_run(&cfg, &ds, None, None).unwrap();
//! println!("train rel l2 = {}", fit.summary.train.rel_l2);
//! ```

pub mod config;
pub mod data;
pub mod error;
pub mod kmeans;
pub mod mixture;
pub mod model_file;
pub mod nn;
mod par;
pub mod poly_basis;
pub mod trainer;
pub mod wls;

pub use error::{PpouError, Result};
pub use mixture::{Architecture, PpouModel, Responsibilities};
pub use nn::{Activation, AdamState, DenseNet, OutputTransform};
pub use poly_basis::{BasisFamily, PolyBasis};
