//! Household final-size transmission modelling.
//!
//! The crate covers the whole pipeline from a visit-level survey extract to
//! fitted household transmission parameters:
//!
//! * [`ingest`] turns the flat visit file into per-tranche household data.
//! * [`exploratory`] computes attack-rate histograms, two-group density fields
//!   and pair-count / Pearson-residual tables.
//! * [`model`] holds the parameter space and its transforms.
//! * [`finalsize`] solves the triangular linear system for the exact
//!   distribution of household infection outcomes.
//! * [`likelihood`] and [`inference`] build the posterior and fit it with a
//!   multi-restart quasi-Newton optimiser and a Laplace approximation.
//! * [`sellke`] simulates the same generative model directly and produces
//!   synthetic cohorts and flat files.

pub mod error;
pub mod exploratory;
pub mod finalsize;
pub mod inference;
pub mod ingest;
pub mod likelihood;
pub mod model;
pub mod optim;
pub mod sellke;
pub mod synthetic;

pub use error::{Error, Result};
pub use finalsize::{household_prob, solve, OutcomeDistribution};
pub use inference::{fit, FitConfig, FitResult};
pub use likelihood::{log_likelihood, log_posterior, Cohort};
pub use model::{decode, encode, EpiParams, FeatureConfig, FeatureRow, Household, ModelParams};

/// Version tag written into every structured output file.
pub const SCHEMA_VERSION: u32 = 1;
