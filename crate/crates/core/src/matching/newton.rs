//! Newton iteration for the KLD and L2D dual problems on an ensemble.

use crate::ensemble::{reduce_particles, MomentBasis, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::linalg::{from_upper, solve_spd, SolveFailure};

use super::{check_lambda, check_target, MatchConfig, MatchFailure, MatchOutcome, OperatorKind};

#[derive(Clone, Copy)]
enum Divergence {
    Kld,
    L2d,
}

impl Divergence {
    /// `(w_j(λ), Hessian weight)` for prior weight `w` and `s = λ·R(X_j)`.
    #[inline]
    fn weights(self, w: f64, s: f64) -> (f64, f64) {
        match self {
            Divergence::Kld => {
                let v = w * s.exp();
                (v, v)
            }
            Divergence::L2d => {
                let a = s + 1.0;
                if a > 0.0 {
                    (w * a, w)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    fn operator(self) -> OperatorKind {
        match self {
            Divergence::Kld => OperatorKind::Kld,
            Divergence::L2d => OperatorKind::L2d,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tilted_weights(div: Divergence, lambda: &[f64], prior: &WeightedEnsemble, basis: &MomentBasis) -> Vec<f64> {
    let width = basis.width();
    let mut r = vec![0.0; width];
    prior
        .iter()
        .map(|(x, w)| {
            basis.eval_into(x, &mut r);
            div.weights(w, dot(lambda, &r)).0
        })
        .collect()
}

/// `w_j(λ) = w_j exp(Σ_l λ_l R_l(X_j))`, not renormalized.
pub fn kld_reweight(lambda: &[f64], prior: &WeightedEnsemble, basis: &MomentBasis) -> Result<Vec<f64>> {
    check_lambda(lambda, basis)?;
    let w = tilted_weights(Divergence::Kld, lambda, prior, basis);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("exponential tilt overflowed".into()));
    }
    Ok(w)
}

/// `w_j(λ) = w_j max(0, Σ_l λ_l R_l(X_j) + 1)`.
pub fn l2d_reweight(lambda: &[f64], prior: &WeightedEnsemble, basis: &MomentBasis) -> Result<Vec<f64>> {
    check_lambda(lambda, basis)?;
    Ok(tilted_weights(Divergence::L2d, lambda, prior, basis))
}

struct Assembly {
    /// `Σ_j R w_j(λ)`.
    moments: Vec<f64>,
    /// `Σ_j R h_j`, with `h_j` the Hessian weight.
    linear: Vec<f64>,
    /// `Σ_j R Rᵀ h_j`.
    hessian: nalgebra::DMatrix<f64>,
    finite: bool,
}

fn assemble(div: Divergence, lambda: &[f64], prior: &WeightedEnsemble, basis: &MomentBasis) -> Assembly {
    let n = basis.width();
    let packed = n * (n + 1) / 2;
    let total = 2 * n + packed + 1;
    let dim = prior.dim();
    let positions = prior.positions();
    let weights = prior.weights();
    // Layout: moments | linear | packed Hessian | non-finite count. The
    // moment slots accumulate exactly as `moment_sums` does, so at λ = 0 the
    // gradient is bitwise that of `restrict`.
    let sums = reduce_particles(weights.len(), total, |j, acc| {
        let w = weights[j];
        if w == 0.0 {
            return;
        }
        let mut r = [0.0f64; 64];
        let r = &mut r[..n];
        basis.eval_into(&positions[j * dim..(j + 1) * dim], r);
        let (v, h) = div.weights(w, dot(lambda, r));
        if !v.is_finite() {
            acc[total - 1] += 1.0;
            return;
        }
        for l in 0..n {
            acc[l] += r[l] * v;
        }
        if h == 0.0 {
            return;
        }
        for l in 0..n {
            acc[n + l] += r[l] * h;
        }
        let mut idx = 2 * n;
        for k in 0..n {
            let rk = r[k] * h;
            for l in k..n {
                acc[idx] += rk * r[l];
                idx += 1;
            }
        }
    });
    Assembly {
        moments: sums[..n].to_vec(),
        linear: sums[n..2 * n].to_vec(),
        hessian: from_upper(n, &sums[2 * n..2 * n + packed]),
        finite: sums[total - 1] == 0.0,
    }
}

fn solve(
    div: Divergence,
    target: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    config: &MatchConfig,
) -> Result<MatchOutcome> {
    check_target(target, basis)?;
    config.validate()?;
    let op = div.operator();
    let n = basis.width();
    let mut goal = Vec::with_capacity(n);
    goal.push(1.0);
    goal.extend_from_slice(target);

    let mut lambda = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let asm = assemble(div, &lambda, prior, basis);
        let finish = |lambda: Vec<f64>, history: Vec<f64>, gn: f64, failure: Option<MatchFailure>| {
            let new_weights = tilted_weights(div, &lambda, prior, basis);
            log::debug!(
                "match operator={op} moments={} iterations={iterations} converged={} gradient_norm={gn:.3e} failure={}",
                basis.count,
                failure.is_none(),
                failure.map(|f| f.to_string()).unwrap_or_else(|| "none".into())
            );
            Ok(MatchOutcome {
                operator: op,
                multipliers: lambda,
                new_weights,
                iterations,
                converged: failure.is_none(),
                final_gradient_norm: gn,
                gradient_history: history,
                failure,
            })
        };
        if !asm.finite {
            return finish(lambda, history, f64::INFINITY, Some(MatchFailure::Overflow));
        }
        let gradient: Vec<f64> = goal.iter().zip(&asm.moments).map(|(g, m)| g - m).collect();
        let gn = gradient
            .iter()
            .map(|v| if v.is_nan() { f64::INFINITY } else { v.abs() })
            .fold(0.0, f64::max);
        history.push(gn);
        log::trace!("match operator={op} iteration={iterations} gradient_norm={gn:.3e}");
        if gn < config.tolerance {
            return finish(lambda, history, gn, None);
        }
        if iterations == config.max_iterations {
            return finish(lambda, history, gn, Some(MatchFailure::MaxIterations));
        }
        let rhs: Vec<f64> = match div {
            Divergence::Kld => gradient,
            Divergence::L2d => goal.iter().zip(&asm.linear).map(|(g, m)| g - m).collect(),
        };
        match solve_spd(&asm.hessian, &rhs, config.jitter) {
            Ok((step, _)) => match div {
                Divergence::Kld => lambda.iter_mut().zip(step).for_each(|(l, s)| *l += s),
                Divergence::L2d => lambda = step,
            },
            Err(SolveFailure::IllConditioned { condition }) => {
                return finish(lambda, history, gn, Some(MatchFailure::IllConditioned { condition }));
            }
            Err(SolveFailure::NonFinite) => {
                return finish(lambda, history, gn, Some(MatchFailure::Overflow));
            }
        }
        iterations += 1;
    }
}

/// KLD matching: Newton iteration on `λ ↦ D(λ)` from `λ = 0`.
///
/// Each update solves `(Σ_j R Rᵀ w_j(λ)) δ = m̃ − Σ_j R w_j(λ)` with
/// `m̃ = (1, m)`.
pub fn newton_solve_kld(
    target: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    config: &MatchConfig,
) -> Result<MatchOutcome> {
    solve(Divergence::Kld, target, prior, basis, config)
}

/// L2D matching: `λ_new = A⁻¹(m̃ − m̂(λ_old))`, where `A` and `m̂` sum over the
/// particles whose clamped weight is positive at `λ_old`.
pub fn newton_solve_l2d(
    target: &[f64],
    prior: &WeightedEnsemble,
    basis: &MomentBasis,
    config: &MatchConfig,
) -> Result<MatchOutcome> {
    solve(Divergence::L2d, target, prior, basis, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::restrict;
    use proptest::prelude::*;

    fn two_atoms() -> (WeightedEnsemble, MomentBasis) {
        (
            WeightedEnsemble::uniform(1, vec![-1.0, 1.0]).unwrap(),
            MomentBasis::powers(1.0, 1),
        )
    }

    fn kld() -> MatchConfig {
        MatchConfig::new(OperatorKind::Kld)
    }

    fn l2d() -> MatchConfig {
        MatchConfig::new(OperatorKind::L2d)
    }

    #[test]
    fn zero_multipliers_leave_weights() {
        let (e, b) = two_atoms();
        assert_eq!(kld_reweight(&[0.0, 0.0], &e, &b).unwrap(), e.weights());
        assert_eq!(l2d_reweight(&[0.0, 0.0], &e, &b).unwrap(), e.weights());
    }

    #[test]
    fn two_atom_reweight_formulas() {
        let (e, b) = two_atoms();
        let w = kld_reweight(&[0.3, 0.7], &e, &b).unwrap();
        assert!((w[0] - 0.5 * (0.3f64 - 0.7).exp()).abs() < 1e-15);
        assert!((w[1] - 0.5 * (0.3f64 + 0.7).exp()).abs() < 1e-15);
        let w = l2d_reweight(&[0.0, 0.5], &e, &b).unwrap();
        assert_eq!(w, vec![0.25, 0.75]);
        assert_eq!(l2d_reweight(&[-2.0, 0.0], &e, &b).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn kld_overflow_is_an_error() {
        let (e, b) = two_atoms();
        assert!(kld_reweight(&[0.0, 1e4], &e, &b).is_err());
        assert!(kld_reweight(&[0.0], &e, &b).is_err());
    }

    #[test]
    fn kld_two_atom_closed_form() {
        let (e, b) = two_atoms();
        let out = newton_solve_kld(&[0.5], &e, &b, &kld()).unwrap();
        assert!(out.converged);
        let l1 = 0.5f64.atanh();
        assert!((out.multipliers[1] - l1).abs() < 1e-9);
        assert!((out.multipliers[0] + l1.cosh().ln()).abs() < 1e-9);
        assert!((out.new_weights[0] - 0.25).abs() < 1e-9);
        assert!((out.new_weights[1] - 0.75).abs() < 1e-9);
        assert!((1..=5).contains(&out.iterations));
    }

    #[test]
    fn l2d_two_atom_closed_form() {
        let (e, b) = two_atoms();
        let out = newton_solve_l2d(&[0.5], &e, &b, &l2d()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert!(out.multipliers[0].abs() < 1e-15);
        assert!((out.multipliers[1] - 0.5).abs() < 1e-15);
        assert_eq!(out.new_weights, vec![0.25, 0.75]);
    }

    #[test]
    fn projection_is_exact() {
        let e = WeightedEnsemble::new(1, vec![0.3, -1.2, 2.5, 0.9], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = MomentBasis::even_powers(3.0, 2);
        let m = restrict(&e, &b);
        for cfg in [kld(), l2d()] {
            let out = super::super::match_moments(&m, &e, &b, &cfg).unwrap();
            assert!(out.converged);
            assert_eq!(out.iterations, 0);
            assert_eq!(out.multipliers, vec![0.0; 3]);
            assert_eq!(out.new_weights, e.weights());
            assert_eq!(out.ensemble(&e).unwrap(), e);
        }
    }

    #[test]
    fn infeasible_target_fails_softly() {
        let (e, b) = two_atoms();
        for cfg in [kld(), l2d()] {
            let out = super::super::match_moments(&[1.5], &e, &b, &cfg).unwrap();
            assert!(!out.converged, "{:?}", cfg.operator);
            assert!(out.failure.is_some());
            assert!(out.ensemble(&e).is_err());
        }
    }

    #[test]
    fn kld_gives_up_after_max_iterations() {
        let (e, b) = two_atoms();
        let out = newton_solve_kld(&[1.5], &e, &b, &kld()).unwrap();
        if out.failure == Some(MatchFailure::MaxIterations) {
            assert_eq!(out.iterations, 5);
            assert_eq!(out.gradient_history.len(), 6);
        }
    }

    #[test]
    fn zero_weight_particle_is_neutral() {
        let b = MomentBasis::powers(2.0, 2);
        let full = WeightedEnsemble::new(1, vec![-1.0, 0.2, 0.5, 1.5, 1.9], vec![0.2, 0.3, 0.0, 0.4, 0.1]).unwrap();
        let reduced = WeightedEnsemble::new(1, vec![-1.0, 0.2, 1.5, 1.9], vec![0.2, 0.3, 0.4, 0.1]).unwrap();
        let target = [0.25, 0.3];
        for cfg in [l2d(), kld()] {
            let a = super::super::match_moments(&target, &full, &b, &cfg).unwrap();
            let r = super::super::match_moments(&target, &reduced, &b, &cfg).unwrap();
            assert!(a.converged && r.converged);
            assert_eq!(a.multipliers, r.multipliers);
            assert_eq!(a.new_weights[2], 0.0);
            let mut aw = a.new_weights.clone();
            aw.remove(2);
            assert_eq!(aw, r.new_weights);
        }
    }

    #[test]
    fn l2d_clamps_to_exact_zero() {
        let e = WeightedEnsemble::uniform(1, vec![-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let b = MomentBasis::powers(1.0, 1);
        let out = newton_solve_l2d(&[0.6], &e, &b, &l2d()).unwrap();
        assert!(out.converged);
        assert!(out.new_weights.iter().all(|w| *w >= 0.0));
        assert!(out.new_weights.contains(&0.0));
        let m = restrict(&out.ensemble(&e).unwrap(), &b);
        assert!((m[0] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn ill_conditioned_hessian_is_a_failure() {
        // Two distinct support points cannot carry three independent moments.
        let e = WeightedEnsemble::uniform(1, vec![-1.0, 1.0, 1.0]).unwrap();
        let b = MomentBasis::powers(1.0, 2);
        let out = newton_solve_kld(&[0.1, 0.8], &e, &b, &kld()).unwrap();
        assert!(matches!(out.failure, Some(MatchFailure::IllConditioned { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn converged_matches_reproduce_moments(
            xs in proptest::collection::vec(-2.0f64..2.0, 12..40),
            t in 0.0f64..1.0,
            l in 1usize..4,
        ) {
            let b = MomentBasis::powers(2.0, l);
            let e = WeightedEnsemble::uniform(1, xs.clone()).unwrap();
            // A feasible target: the moments of a positive reweighting.
            let w: Vec<f64> = xs.iter().map(|x| 1.0 + t * x.sin()).collect();
            let s: f64 = w.iter().sum();
            let other = e.reweighted(w.iter().map(|v| v / s).collect()).unwrap();
            let m = restrict(&other, &b);
            for cfg in [kld(), l2d()] {
                let cfg = MatchConfig { max_iterations: 50, ..cfg };
                let out = super::super::match_moments(&m, &e, &b, &cfg).unwrap();
                if out.converged {
                    prop_assert!(out.final_gradient_norm < 1e-9);
                    prop_assert!(out.mass_error() < 1e-9);
                    let got = restrict(&out.ensemble(&e).unwrap(), &b);
                    for (g, want) in got.iter().zip(&m) {
                        prop_assert!((g - want).abs() < 1e-8);
                    }
                    match cfg.operator {
                        OperatorKind::Kld => prop_assert!(out.new_weights.iter().all(|w| *w > 0.0)),
                        _ => prop_assert!(out.new_weights.iter().all(|w| *w >= 0.0)),
                    }
                }
            }
        }
    }
}
