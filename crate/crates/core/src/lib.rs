//! Generalized mixed effects random forests (GMERF) for small area proportions.
//!
//! A binary unit-level response is modelled as `logit(μ) = f(x) + ν_area`, with
//! `f` a regression forest and `ν` a Gaussian random intercept, and fitted by
//! penalized quasi-likelihood. Area proportions are then predicted over a
//! census frame, with mean squared errors from a parametric bootstrap.

pub mod area;
pub mod baseline;
pub mod bootstrap;
pub mod error;
pub mod forest;
pub mod gmerf;
pub mod io;
pub mod link;
pub mod mixedmodel;
pub mod predict;
pub mod seed;
pub mod simulation;

pub use area::{AreaId, AreaIndex};
pub use error::{Error, Result};
