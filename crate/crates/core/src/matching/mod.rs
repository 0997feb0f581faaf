//! Matching operators: reweight a prior ensemble so that it reproduces a
//! target moment vector.
//!
//! KLD and L2D matching solve the dual problem by Newton iteration on the
//! ensemble; L2N matching is a single linear solve against the Gram matrix of
//! the basis on an interval.

mod l2n;
mod newton;

use serde::{Deserialize, Serialize};

use crate::ensemble::{MomentBasis, WeightedEnsemble};
use crate::error::{Error, Result};

pub use l2n::{
    gram_matrix, gram_matrix_quadrature, l2n_average, l2n_correction, l2n_multipliers,
    l2n_multipliers_from_moments, l2n_reweight,
};
pub use newton::{kld_reweight, l2d_reweight, newton_solve_kld, newton_solve_l2d};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_ITERATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    L2n,
    Kld,
    L2d,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::L2n => "l2n",
            OperatorKind::Kld => "kld",
            OperatorKind::L2d => "l2d",
        }
    }
}

impl std::fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Stop once `‖∇D‖_∞` falls below this.
    pub tolerance: f64,
    /// Newton updates allowed before the match counts as failed.
    pub max_iterations: usize,
    pub operator: OperatorKind,
    /// Diagonal regularization of the equilibrated Hessian; 0 disables it.
    pub jitter: f64,
    /// L2N integration interval `(−a, a)`; defaults to the basis scale.
    pub l2n_half_width: Option<f64>,
    /// KDE bandwidth for L2N ensemble weights; defaults to Scott's rule.
    pub kde_bandwidth: Option<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            operator: OperatorKind::Kld,
            jitter: 0.0,
            l2n_half_width: None,
            kde_bandwidth: None,
        }
    }
}

impl MatchConfig {
    pub fn new(operator: OperatorKind) -> Self {
        MatchConfig {
            operator,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("matching tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config(format!("jitter must be non-negative, got {}", self.jitter)));
        }
        if let Some(a) = self.l2n_half_width {
            if !(a > 0.0) {
                return Err(Error::Config(format!("l2n_half_width must be positive, got {a}")));
            }
        }
        if let Some(h) = self.kde_bandwidth {
            if !(h > 0.0) {
                return Err(Error::Config(format!("kde_bandwidth must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// Why a match did not converge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum MatchFailure {
    /// Gradient still above tolerance after the iteration cap.
    MaxIterations,
    /// Hessian (or Gram matrix) too badly conditioned to solve.
    IllConditioned { condition: f64 },
    /// Weights overflowed or became non-finite.
    Overflow,
    /// L2N produced negative ensemble weights.
    NegativeWeights,
}

impl std::fmt::Display for MatchFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatchFailure::MaxIterations => f.write_str("max-iterations"),
            MatchFailure::IllConditioned { condition } => write!(f, "ill-conditioned(condition={condition:e})"),
            MatchFailure::Overflow => f.write_str("overflow"),
            MatchFailure::NegativeWeights => f.write_str("negative-weights"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub operator: OperatorKind,
    /// `λ_0, …, λ_L`; index 0 is the mass multiplier.
    pub multipliers: Vec<f64>,
    /// `w_j(λ)` as produced by the operator, not renormalized.
    pub new_weights: Vec<f64>,
    /// Newton updates performed.
    pub iterations: usize,
    pub converged: bool,
    /// `‖∇D‖_∞` at the returned multipliers.
    pub final_gradient_norm: f64,
    /// Gradient norm before each update and at the end.
    pub gradient_history: Vec<f64>,
    pub failure: Option<MatchFailure>,
}

impl MatchOutcome {
    /// The matched ensemble with weights renormalized to unit mass.
    ///
    /// When no update was taken the prior is returned bit-for-bit.
    pub fn ensemble(&self, prior: &WeightedEnsemble) -> Result<WeightedEnsemble> {
        if !self.converged {
            return Err(Error::Numerical(format!(
                "matching did not converge: {}",
                self.failure.map(|f| f.to_string()).unwrap_or_default()
            )));
        }
        if self.iterations == 0 {
            return Ok(prior.clone());
        }
        prior.reweighted(self.new_weights.clone())
    }

    /// `|Σ_j w_j(λ) − 1|`.
    pub fn mass_error(&self) -> f64 {
        (self.new_weights.iter().sum::<f64>() - 1.0).abs()
    }
}

/// Matches `prior` to `target` with the configured operator.
///
/// Non-convergence is reported through [`MatchOutcome::failure`]; `Err` is
/// returned only for invalid input.
pub fn match_moments(
    target: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    config: &MatchConfig,
) -> Result<MatchOutcome> {
    match config.operator {
        OperatorKind::Kld => newton_solve_kld(target, prior, basis, config),
        OperatorKind::L2d => newton_solve_l2d(target, prior, basis, config),
        OperatorKind::L2n => l2n::match_l2n(target, prior, basis, config),
    }
}

pub(crate) fn check_target(target: &[f64], basis: &MomentBasis) -> Result<()> {
    if target.len() != basis.count {
        return Err(Error::DimensionMismatch {
            expected: basis.count,
            got: target.len(),
        });
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidEnsemble("target moments must be finite".into()));
    }
    if basis.count + 1 > 64 {
        return Err(Error::Config(format!("at most 63 moments supported, got {}", basis.count)));
    }
    Ok(())
}

pub(crate) fn check_lambda(lambda: &[f64], basis: &MomentBasis) -> Result<()> {
    if lambda.len() != basis.width() {
        return Err(Error::DimensionMismatch {
            expected: basis.width(),
            got: lambda.len(),
        });
    }
    Ok(())
}
