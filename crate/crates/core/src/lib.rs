//! Hierarchical Bayesian models of annual tree-ring growth as a function of
//! climate.
//!
//! The crate is organised along the analysis pipeline:
//!
//! * [`ring_data`] reads ring-width series and derives stand initiation years.
//! * [`water_balance`] turns monthly temperature and precipitation into
//!   evapotranspiration, deficit and snow pack, then seasonal covariates.
//! * [`design`] builds the P-spline age basis and aligned model matrices.
//! * [`sampler`] and [`ar1`] hold the shared MCMC machinery.
//! * [`fce`] fits time-constant climate coefficients; [`vce`] lets them follow
//!   a random walk, sampled by forward-filtering backward-sampling.
//! * [`lasso`] selects climate variables with the Bayesian Lasso.
//! * [`classify`] labels years of climate sensitivity.
//! * [`synth`] simulates data from the full generative model.

// Range checks are written `!(x > y)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ar1;
pub mod classify;
pub mod design;
pub mod error;
pub mod fce;
pub mod lasso;
pub mod linalg;
pub mod ring_data;
pub mod sampler;
pub mod synth;
pub mod vce;
pub mod water_balance;

pub use error::{Error, Result};
