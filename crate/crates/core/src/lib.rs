//! Query-efficient black-box optimization with Gaussian-process surrogates.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernel`], [`gp`] and [`surrogate`]: covariance functions, exact GP
//!   regression and hyperparameter selection by marginal likelihood.
//! * [`acquisition`]: expected improvement, UCB and Thompson sampling, plus a
//!   seeded multi-start maximizer.
//! * [`bo`]: the sequential fit → acquire → query loop over any [`bo::Objective`].
//! * [`subspace`] and [`prompt`]: random-projection soft prompts, the
//!   instruction-coupled Nyström kernel and the prompt-search loop.
//! * [`mobo`], [`preferential`], [`federated`]: multi-objective,
//!   pairwise-preference and multi-agent variants.
//! * [`fairness`]: statistical-parity and equal-opportunity gaps.
//!
//! Everything is deterministic for a fixed seed.

pub mod acquisition;
pub mod bo;
pub mod error;
pub mod fairness;
pub mod federated;
pub mod gp;
pub mod kernel;
pub mod mobo;
pub mod normal;
pub mod objectives;
pub mod preferential;
pub mod prompt;
pub mod space;
pub mod subspace;
pub mod surrogate;
pub mod trace;

pub use error::{Error, Result};
pub use gp::{fit_gp, EvaluationSet, GpModel, PosteriorMoment, Surrogate};
pub use kernel::{Kernel, KernelFamily, KernelSpec};
pub use space::Bounds;
