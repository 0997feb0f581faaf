//! Micro-macro acceleration for stochastic differential equations.
//!
//! Short bursts of a particle simulation are combined with forward-Euler
//! extrapolation of a few moments and a matching step that reweights the
//! ensemble to the extrapolated moments.

// Validation negates comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceleration;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod matching;
pub mod model;
pub mod quadrature;
pub mod rng;

pub use ensemble::{
    degeneracy, kde_density, restrict, scott_bandwidth, stratified_resample, stress, weighted_average, BasisKind,
    DivergenceKind, MomentBasis, WeightedEnsemble,
};
pub use error::{Error, Result};
pub use matching::{match_moments, MatchConfig, MatchFailure, MatchOutcome, OperatorKind};
pub use model::{FeneModel, KappaProfile, OrnsteinUhlenbeck, SdeModel};
pub use acceleration::{adapt_step, extrapolate, macro_step, run, simulate_reference, AccelConfig, RunTrace, StepRecord};
pub use experiments::{load_config, run_experiment, ExperimentKind, ExperimentSpec};
