//! L²-norm matching on an interval `(−a, a)`.
//!
//! The matched object is the signed density `π + Σ_l λ_l R_l` with `λ` from
//! the Gram system `H λ = (0, m − R(π))`.

use nalgebra::DMatrix;

use crate::ensemble::{kde_density, restrict, scott_bandwidth, weighted_average, MomentBasis, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, SolveFailure};
use crate::quadrature::adaptive;

use super::{check_lambda, check_target, MatchConfig, MatchFailure, MatchOutcome, OperatorKind};

const QUAD_TOL: f64 = 1e-13;
const QUAD_DEPTH: usize = 30;

/// `H_{kl} = ∫_{−a}^{a} R_k R_l dx` in closed form.
pub fn gram_matrix(basis: &MomentBasis, half_width: f64) -> DMatrix<f64> {
    let n = basis.width();
    DMatrix::from_fn(n, n, |k, l| {
        let p = (basis.degree(k) + basis.degree(l)) as i32;
        if p % 2 == 1 {
            0.0
        } else {
            2.0 * half_width * (half_width / basis.scale).powi(p) / (p + 1) as f64
        }
    })
}

/// The Gram matrix by adaptive quadrature.
pub fn gram_matrix_quadrature(basis: &MomentBasis, half_width: f64) -> Result<DMatrix<f64>> {
    let n = basis.width();
    let mut h = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in k..n {
            let v = adaptive(
                |x| basis.eval_scalar(k, x) * basis.eval_scalar(l, x),
                -half_width,
                half_width,
                QUAD_TOL * half_width,
                QUAD_DEPTH,
            )
            .ok_or_else(|| Error::Numerical(format!("Gram entry ({k}, {l}) did not converge")))?;
            h[(k, l)] = v;
            h[(l, k)] = v;
        }
    }
    Ok(h)
}

fn solve_gram(
    target: &[f64],
    prior_moments: &[f64],
    basis: &MomentBasis,
    half_width: f64,
    jitter: f64,
) -> Result<Result<Vec<f64>, SolveFailure>> {
    check_target(target, basis)?;
    if prior_moments.len() != basis.count {
        return Err(Error::DimensionMismatch {
            expected: basis.count,
            got: prior_moments.len(),
        });
    }
    if !(half_width > 0.0) {
        return Err(Error::Config(format!("half-width must be positive, got {half_width}")));
    }
    let mut rhs = vec![0.0];
    rhs.extend(target.iter().zip(prior_moments).map(|(m, p)| m - p));
    if rhs.iter().all(|v| *v == 0.0) {
        return Ok(Ok(vec![0.0; basis.width()]));
    }
    Ok(solve_spd(&gram_matrix(basis, half_width), &rhs, jitter).map(|(x, _)| x))
}

fn failure_error(f: SolveFailure) -> Error {
    match f {
        SolveFailure::IllConditioned { condition } => {
            Error::Numerical(format!("Gram matrix ill-conditioned (condition {condition:e})"))
        }
        SolveFailure::NonFinite => Error::Numerical("Gram solve produced non-finite values".into()),
    }
}

/// Multipliers from the prior's moment vector directly, for priors given as
/// densities rather than ensembles.
pub fn l2n_multipliers_from_moments(
    target: &[f64],
    prior_moments: &[f64],
    basis: &MomentBasis,
    half_width: f64,
) -> Result<Vec<f64>> {
    solve_gram(target, prior_moments, basis, half_width, 0.0)?.map_err(failure_error)
}

/// Solves `H λ = (0, m − restrict(prior))` on `(−a, a)`.
pub fn l2n_multipliers(
    target: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    half_width: f64,
) -> Result<Vec<f64>> {
    l2n_multipliers_from_moments(target, &restrict(prior, basis), basis, half_width)
}

/// The signed correction `Σ_l λ_l R_l(x)` added to the prior density.
pub fn l2n_correction(lambda: &[f64], basis: &MomentBasis, x: f64) -> f64 {
    lambda
        .iter()
        .enumerate()
        .map(|(l, v)| v * basis.eval_scalar(l, x))
        .sum()
}

/// Average of `g` under the matched signed density:
/// `Σ_l λ_l ∫ g R_l dx + Σ_j g(X_j) w_j`.
pub fn l2n_average<G>(
    lambda: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    g: G,
    half_width: f64,
) -> Result<f64>
where
    G: Fn(f64) -> f64 + Sync,
{
    check_lambda(lambda, basis)?;
    if prior.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: prior.dim(),
        });
    }
    let mut total = 0.0;
    if lambda.iter().any(|v| *v != 0.0) {
        total = adaptive(
            |x| g(x) * l2n_correction(lambda, basis, x),
            -half_width,
            half_width,
            QUAD_TOL * half_width,
            QUAD_DEPTH,
        )
        .ok_or_else(|| Error::Numerical("quadrature of the L2N correction did not converge".into()))?;
    }
    Ok(total + weighted_average(prior, |x| g(x[0])))
}

/// Ensemble weights representing the matched density:
/// `w_j (1 + Σ_l λ_l R_l(X_j) / π̂(X_j))` with `π̂` a Gaussian KDE of the
/// prior. Approximate; weights may be negative.
pub fn l2n_reweight(
    lambda: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    bandwidth: Option<f64>,
) -> Result<Vec<f64>> {
    check_lambda(lambda, basis)?;
    if lambda.iter().all(|v| *v == 0.0) {
        return Ok(prior.weights().to_vec());
    }
    let h = bandwidth.unwrap_or_else(|| scott_bandwidth(prior));
    let grid: Vec<f64> = prior.positions().to_vec();
    let density = kde_density(prior, h, &grid)?;
    Ok(prior
        .iter()
        .zip(density)
        .map(|((x, w), p)| w * (1.0 + l2n_correction(lambda, basis, x[0]) / p))
        .collect())
}

pub(super) fn match_l2n(
    target: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    config: &MatchConfig,
) -> Result<MatchOutcome> {
    config.validate()?;
    if prior.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: prior.dim(),
        });
    }
    let half_width = config.l2n_half_width.unwrap_or(basis.scale);
    let prior_moments = restrict(prior, basis);
    let n = basis.width();
    let outcome = |multipliers: Vec<f64>, new_weights: Vec<f64>, iterations, gn: f64, failure: Option<MatchFailure>| {
        log::debug!(
            "match operator=l2n moments={} iterations={iterations} converged={} gradient_norm={gn:.3e} failure={}",
            basis.count,
            failure.is_none(),
            failure.map(|f| f.to_string()).unwrap_or_else(|| "none".into())
        );
        MatchOutcome {
            operator: OperatorKind::L2n,
            multipliers,
            new_weights,
            iterations,
            converged: failure.is_none(),
            final_gradient_norm: gn,
            gradient_history: vec![gn],
            failure,
        }
    };
    let lambda = match solve_gram(target, &prior_moments, basis, half_width, config.jitter)? {
        Ok(l) => l,
        Err(SolveFailure::IllConditioned { condition }) => {
            return Ok(outcome(vec![0.0; n], prior.weights().to_vec(), 0, f64::INFINITY, Some(MatchFailure::IllConditioned { condition })));
        }
        Err(SolveFailure::NonFinite) => {
            return Ok(outcome(vec![0.0; n], prior.weights().to_vec(), 0, f64::INFINITY, Some(MatchFailure::Overflow)));
        }
    };
    if lambda.iter().all(|v| *v == 0.0) {
        return Ok(outcome(lambda, prior.weights().to_vec(), 0, 0.0, None));
    }
    // Residual of the Gram system: the signed density meets the constraints
    // up to this.
    let h = gram_matrix(basis, half_width);
    let hl = &h * nalgebra::DVector::from_column_slice(&lambda);
    let gn = (0..n)
        .map(|l| {
            let want = if l == 0 { 0.0 } else { target[l - 1] - prior_moments[l - 1] };
            (hl[l] - want).abs()
        })
        .fold(0.0, f64::max);
    let weights = l2n_reweight(&lambda, prior, basis, config.kde_bandwidth)?;
    let failure = weights.iter().any(|w| *w < 0.0).then_some(MatchFailure::NegativeWeights);
    Ok(outcome(lambda, weights, 1, gn, failure))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::GaussLegendre;
    use approx::assert_relative_eq;

    #[test]
    fn gram_closed_form_values() {
        let b = MomentBasis::even_powers(7.0, 3);
        let h = gram_matrix(&b, 7.0);
        assert_relative_eq!(h[(0, 0)], 14.0, epsilon = 1e-14);
        assert_relative_eq!(h[(1, 1)], 2.8, epsilon = 1e-14);
        for k in 0..4 {
            for l in 0..4 {
                assert_relative_eq!(h[(k, l)], 14.0 / (2 * k + 2 * l + 1) as f64, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gram_closed_form_matches_quadrature() {
        for b in [MomentBasis::even_powers(7.0, 4), MomentBasis::powers(7.0, 6), MomentBasis::powers(2.0, 3)] {
            let exact = gram_matrix(&b, 5.0);
            let quad = gram_matrix_quadrature(&b, 5.0).unwrap();
            for (e, q) in exact.iter().zip(quad.iter()) {
                assert_relative_eq!(e, q, epsilon = 1e-11, max_relative = 1e-11);
            }
        }
    }

    fn prior() -> WeightedEnsemble {
        let xs: Vec<f64> = (0..200).map(|j| -6.5 + 13.0 * (j as f64 + 0.5) / 200.0).collect();
        WeightedEnsemble::uniform(1, xs).unwrap()
    }

    #[test]
    fn projection_gives_zero_multipliers() {
        let e = prior();
        let b = MomentBasis::even_powers(7.0, 3);
        let m = restrict(&e, &b);
        let l = l2n_multipliers(&m, &e, &b, 7.0).unwrap();
        assert_eq!(l, vec![0.0; 4]);
        let out = super::super::match_moments(&m, &e, &b, &MatchConfig::new(OperatorKind::L2n)).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.new_weights, e.weights());
    }

    #[test]
    fn average_reproduces_constraints() {
        let e = prior();
        let b = MomentBasis::even_powers(7.0, 3);
        let mut m = restrict(&e, &b);
        m[0] += 0.01;
        m[1] += 0.005;
        let l = l2n_multipliers(&m, &e, &b, 7.0).unwrap();
        assert_relative_eq!(l2n_average(&l, &e, &b, |_| 1.0, 7.0).unwrap(), 1.0, epsilon = 1e-12);
        for k in 1..=3 {
            let got = l2n_average(&l, &e, &b, |x| b.eval_scalar(k, x), 7.0).unwrap();
            assert_relative_eq!(got, m[k - 1], epsilon = 1e-12);
        }
        let zero = vec![0.0; 4];
        let g = |x: f64| x.sin() + x * x;
        assert_eq!(
            l2n_average(&zero, &e, &b, g, 7.0).unwrap(),
            weighted_average(&e, |x| g(x[0]))
        );
    }

    #[test]
    fn nonintegrable_observable_is_an_error() {
        let e = prior();
        let b = MomentBasis::even_powers(7.0, 1);
        let l = vec![0.0, 0.1];
        assert!(l2n_average(&l, &e, &b, |x| 1.0 / (49.0 - x * x), 7.0).is_err());
    }

    #[test]
    fn positive_prior_with_nearby_target_stays_positive() {
        // π uniform on (−7, 7); target moments from a slightly tilted density.
        let b = MomentBasis::powers(7.0, 3);
        let q = GaussLegendre::new(40);
        let pi = |_x: f64| 1.0 / 14.0;
        let p = |x: f64| (1.0 + 0.05 * (x / 7.0) + 0.03 * (x / 7.0).powi(2)) / (14.0 * (1.0 + 0.01));
        let mom = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            (1..=3).map(|l| q.integrate(|x| f(x) * b.eval_scalar(l, x), -7.0, 7.0)).collect()
        };
        let lambda = l2n_multipliers_from_moments(&mom(&p), &mom(&pi), &b, 7.0).unwrap();
        for i in 0..=200 {
            let x = -7.0 + 14.0 * i as f64 / 200.0;
            assert!(pi(x) + l2n_correction(&lambda, &b, x) >= 0.0);
            // p lies in the span, so the projection recovers it.
            assert_relative_eq!(pi(x) + l2n_correction(&lambda, &b, x), p(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn reweighting_follows_kde_formula() {
        let e = prior();
        let b = MomentBasis::even_powers(7.0, 2);
        let mut m = restrict(&e, &b);
        m[0] += 0.01;
        let out = super::super::match_moments(&m, &e, &b, &MatchConfig::new(OperatorKind::L2n)).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert!(out.final_gradient_norm < 1e-12);
        let h = scott_bandwidth(&e);
        let p = kde_density(&e, h, e.positions()).unwrap();
        for (j, (x, w)) in e.iter().enumerate() {
            let want = w * (1.0 + l2n_correction(&out.multipliers, &b, x[0]) / p[j]);
            assert_relative_eq!(out.new_weights[j], want, max_relative = 1e-14);
        }
        // The ensemble moves toward the target.
        let got = restrict(&e.reweighted(out.new_weights.clone()).unwrap(), &b);
        assert!(got[0] > restrict(&e, &b)[0]);
    }

    #[test]
    fn infeasible_target_yields_negative_weights() {
        let e = WeightedEnsemble::uniform(1, vec![-1.0, 1.0]).unwrap();
        let b = MomentBasis::powers(1.0, 1);
        let out = super::super::match_moments(&[1.5], &e, &b, &MatchConfig::new(OperatorKind::L2n)).unwrap();
        assert_eq!(out.failure, Some(MatchFailure::NegativeWeights));
    }
}
