//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run all with `cargo test -p micromacro --test acceptance`; pass a
//! substring to run a subset, e.g. `-- snapshot`.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use micromacro::acceleration::projective_moments;
use micromacro::ensemble::stratified_branching;
use micromacro::experiments::{
    fit_order, run_acceleration_experiment, run_convergence_study, run_snapshot_matching, SeriesKey, SnapshotReport,
};
use micromacro::matching::{l2n_correction, l2n_multipliers_from_moments};
use micromacro::model::sample_fene_equilibrium;
use micromacro::quadrature::adaptive;
use micromacro::rng::{Purpose, StreamKey};
use micromacro::{
    match_moments, restrict, run, simulate_reference, stratified_resample, stress, AccelConfig, ExperimentKind,
    ExperimentSpec, FeneModel, KappaProfile, MatchConfig, MomentBasis, OperatorKind, OrnsteinUhlenbeck,
    WeightedEnsemble,
};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    check: fn() -> Outcome,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fene() -> FeneModel {
    FeneModel::new(49.0, 1.0, KappaProfile::Constant { value: 2.0 }).unwrap()
}

/// Positions uniform on `(−1, 1)` with positive random weights.
fn random_prior(j: usize, seed: u64) -> WeightedEnsemble {
    let mut rng = StreamKey::new(seed, Purpose::Fixture).stream(0, 0);
    let x: Vec<f64> = (0..j).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = w.iter().sum();
    WeightedEnsemble::new(1, x, w.iter().map(|v| v / total).collect()).unwrap()
}

/// Moments of a positive tilt of the prior, hence feasible.
fn feasible_target(prior: &WeightedEnsemble, basis: &MomentBasis, seed: u64) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, Purpose::Fixture).stream(1, 0);
    let a: f64 = rng.random_range(-0.6..0.6);
    let c: f64 = rng.random_range(-0.3..0.3);
    let q: Vec<f64> = prior
        .iter()
        .map(|(x, w)| w * (1.0 + a * x[0] + c * (3.0 * x[0]).sin()))
        .collect();
    let total: f64 = q.iter().sum();
    (1..=basis.count)
        .map(|l| prior.iter().zip(&q).map(|((x, _), qj)| qj * basis.eval_scalar(l, x[0])).sum::<f64>() / total)
        .collect()
}

fn projection_property() -> Outcome {
    let model = fene();
    let x = sample_fene_equilibrium(&model, 1000, model.cutoff(2e-4), 11);
    let mut rng = StreamKey::new(11, Purpose::Fixture).stream(0, 0);
    let w: Vec<f64> = (0..1000).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = w.iter().sum();
    let prior = WeightedEnsemble::new(1, x, w.iter().map(|v| v / total).collect()).unwrap();
    let basis = MomentBasis::even_powers(model.gamma(), 3);
    let target = restrict(&prior, &basis);
    let mut worst: f64 = 0.0;
    for op in [OperatorKind::L2n, OperatorKind::Kld, OperatorKind::L2d] {
        let out = match_moments(&target, &prior, &basis, &MatchConfig::new(op)).map_err(|e| e.to_string())?;
        ensure(out.converged && out.iterations == 0, || format!("{op}: iterations {}", out.iterations))?;
        ensure(out.multipliers.iter().all(|l| *l == 0.0), || format!("{op}: λ = {:?}", out.multipliers))?;
        let matched = out.ensemble(&prior).map_err(|e| e.to_string())?;
        for (a, b) in matched.weights().iter().zip(prior.weights()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("weight deviation {worst:e}"))?;
    Ok(format!("max weight deviation {worst:e}"))
}

fn two_atom_closed_forms() -> Outcome {
    let prior = WeightedEnsemble::new(1, vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
    let basis = MomentBasis::powers(1.0, 1);
    let mut worst: f64 = 0.0;
    for m in [-0.9, -0.5, 0.0, 0.5, 0.9] {
        let expected = [(1.0 - m) / 2.0, (1.0 + m) / 2.0];
        for op in [OperatorKind::Kld, OperatorKind::L2d] {
            let config = MatchConfig {
                tolerance: 1e-13,
                max_iterations: 50,
                ..MatchConfig::new(op)
            };
            let out = match_moments(&[m], &prior, &basis, &config).map_err(|e| e.to_string())?;
            ensure(out.converged, || format!("{op} m={m}: {:?}", out.failure))?;
            let mass: f64 = out.new_weights.iter().sum();
            let dl = match op {
                OperatorKind::Kld => (out.multipliers[1] - m.atanh()).abs(),
                _ => (out.multipliers[0] - 0.0).abs().max((out.multipliers[1] - m).abs()),
            };
            let dw = (out.new_weights[0] / mass - expected[0])
                .abs()
                .max((out.new_weights[1] / mass - expected[1]).abs());
            worst = worst.max(dl).max(dw);
        }
    }
    ensure(worst <= 1e-9, || format!("deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:e}"))
}

fn constraint_satisfaction() -> Outcome {
    let mut worst_moment: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    let mut converged = 0;
    let mut total = 0;
    for op in [OperatorKind::Kld, OperatorKind::L2d] {
        for l in 1..=5 {
            let basis = MomentBasis::powers(1.0, l);
            let mut hits = 0;
            for trial in 0..10u64 {
                let seed = 1000 * l as u64 + trial;
                let prior = random_prior(1000, seed);
                let target = feasible_target(&prior, &basis, seed);
                let config = MatchConfig {
                    max_iterations: 50,
                    ..MatchConfig::new(op)
                };
                let out = match_moments(&target, &prior, &basis, &config).map_err(|e| e.to_string())?;
                total += 1;
                if !out.converged {
                    continue;
                }
                hits += 1;
                for k in 1..=l {
                    let got: f64 = prior
                        .iter()
                        .zip(&out.new_weights)
                        .map(|((x, _), q)| q * basis.eval_scalar(k, x[0]))
                        .sum();
                    worst_moment = worst_moment.max((got - target[k - 1]).abs());
                }
                worst_mass = worst_mass.max(out.mass_error());
            }
            ensure(hits > 0, || format!("{op} L={l}: no converged match"))?;
            converged += hits;
        }
    }
    ensure(worst_moment < 1e-8 && worst_mass < 1e-9, || {
        format!("moment error {worst_moment:e}, mass error {worst_mass:e}")
    })?;
    Ok(format!(
        "{converged}/{total} converged, moment error {worst_moment:e}, mass error {worst_mass:e}"
    ))
}

fn divergence(op: OperatorKind, q: &[f64], w: &[f64]) -> f64 {
    q.iter()
        .zip(w)
        .map(|(&qj, &wj)| match op {
            OperatorKind::Kld if qj == 0.0 => wj,
            OperatorKind::Kld => qj * (qj / wj).ln() - qj + wj,
            _ => (qj - wj).powi(2) / (2.0 * wj),
        })
        .sum()
}

/// Minimizes the divergence over `{q ≥ 0, A q = m}` by zooming grid search
/// in null-space coordinates.
fn grid_oracle(op: OperatorKind, a: &DMatrix<f64>, m: &DVector<f64>, w: &[f64]) -> f64 {
    let j = a.ncols();
    let k = j - a.nrows();
    let particular = a.transpose() * (a * a.transpose()).try_inverse().unwrap() * m;
    let eig = SymmetricEigen::new(a.transpose() * a);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].partial_cmp(&eig.eigenvalues[y]).unwrap());
    let null: Vec<DVector<f64>> = order[..k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let points = match k {
        1 => 201,
        2 => 41,
        3 => 21,
        _ => 13,
    };
    let mut center = vec![0.0; k];
    let mut half = 2.0;
    let mut best = f64::INFINITY;
    let mut z = vec![0.0; k];
    while half > 1e-10 {
        let mut best_z = center.clone();
        let total = (points as usize).pow(k as u32);
        for idx in 0..total {
            let mut rest = idx;
            for d in 0..k {
                let i = rest % points;
                rest /= points;
                z[d] = center[d] + half * (2.0 * i as f64 / (points - 1) as f64 - 1.0);
            }
            let mut q = particular.clone();
            for d in 0..k {
                q += &null[d] * z[d];
            }
            if q.iter().any(|v| *v < 0.0) {
                continue;
            }
            let f = divergence(op, q.as_slice(), w);
            if f < best {
                best = f;
                best_z.copy_from_slice(&z);
            }
        }
        center = best_z;
        half *= 0.35;
    }
    best
}

fn oracle_optimality() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (j, l) in [(3, 1), (4, 1), (4, 2), (5, 2), (6, 1), (6, 2)] {
        for trial in 0..3u64 {
            let seed = 77 + 10 * j as u64 + trial;
            let prior = random_prior(j, seed);
            let basis = MomentBasis::powers(1.0, l);
            let target = feasible_target(&prior, &basis, seed);
            let a = DMatrix::from_fn(l + 1, j, |r, c| basis.eval_scalar(r, prior.particle(c)[0]));
            let mut m = vec![1.0];
            m.extend_from_slice(&target);
            let m = DVector::from_vec(m);
            for op in [OperatorKind::Kld, OperatorKind::L2d] {
                let config = MatchConfig {
                    max_iterations: 100,
                    tolerance: 1e-12,
                    ..MatchConfig::new(op)
                };
                let out = match_moments(&target, &prior, &basis, &config).map_err(|e| e.to_string())?;
                ensure(out.converged, || format!("{op} J={j} L={l}: {:?}", out.failure))?;
                let solver = divergence(op, &out.new_weights, prior.weights());
                let oracle = grid_oracle(op, &a, &m, prior.weights());
                worst = worst.max((solver - oracle).abs());
                count += 1;
            }
        }
    }
    ensure(worst < 1e-6, || format!("objective gap {worst:e}"))?;
    Ok(format!("{count} instances, max objective gap {worst:e}"))
}

fn l2n_rate_bound() -> Outcome {
    const A: f64 = 7.0;
    let integrate = |f: &dyn Fn(f64) -> f64| adaptive(f, -A, A, 1e-14, 40).ok_or("quadrature failed".to_string());
    let gauss = |x: f64, mu: f64, s: f64| (-(x - mu).powi(2) / (2.0 * s * s)).exp();
    let dgauss = |x: f64, mu: f64, s: f64| -(x - mu) / (s * s) * gauss(x, mu, s);
    let zp = integrate(&|x| gauss(x, 0.0, 2.0))?;
    let zt = integrate(&|x| 0.5 * gauss(x, -1.5, 1.0) + 0.5 * gauss(x, 2.0, 1.2))?;
    let prior = |x: f64| gauss(x, 0.0, 2.0) / zp;
    let target = |x: f64| (0.5 * gauss(x, -1.5, 1.0) + 0.5 * gauss(x, 2.0, 1.2)) / zt;
    let dprior = |x: f64| dgauss(x, 0.0, 2.0) / zp;
    let dtarget = |x: f64| (0.5 * dgauss(x, -1.5, 1.0) + 0.5 * dgauss(x, 2.0, 1.2)) / zt;
    let slope = integrate(&|x| (dprior(x) - dtarget(x)).powi(2))?.sqrt();
    let mut violations = Vec::new();
    let mut ratios = Vec::new();
    for l in 1..=7 {
        let basis = MomentBasis::powers(A, l);
        let moments = |f: &dyn Fn(f64) -> f64| -> Result<Vec<f64>, String> {
            (1..=l).map(|k| integrate(&|x| f(x) * basis.eval_scalar(k, x))).collect()
        };
        let lambda = l2n_multipliers_from_moments(&moments(&target)?, &moments(&prior)?, &basis, A)
            .map_err(|e| e.to_string())?;
        let err = integrate(&|x| (prior(x) + l2n_correction(&lambda, &basis, x) - target(x)).powi(2))?.sqrt();
        let bound = A.sqrt() / (l + 1) as f64 * slope + 1e-8;
        let sharp = A / (l + 1) as f64 * slope;
        ratios.push(format!("{:.2}", err / bound));
        if err > bound {
            violations.push(format!("L={l} error {err:.4e} > {bound:.4e} (γ/(L+1) bound {sharp:.4e} holds: {})", err <= sharp));
        }
    }
    ensure(violations.is_empty(), || violations.join("; "))?;
    Ok(format!("error/bound ratios {}", ratios.join(" ")))
}

fn weak_order() -> Outcome {
    let spec = ExperimentSpec::new(ExperimentKind::ConvergenceStudy);
    ensure(spec.convergence.particles == 100_000 && spec.convergence.dt_micro_values.len() == 5, || {
        "unexpected convergence defaults".into()
    })?;
    let report = run_convergence_study(&spec).map_err(|e| e.to_string())?;
    let p = report.micro_order.0;
    ensure((0.7..=1.3).contains(&p), || format!("fitted order {p:.3}"))?;
    ensure(report.combined_error < report.combined_bound, || {
        format!("combined {:e} above {:e}", report.combined_error, report.combined_bound)
    })?;
    Ok(format!("fitted order {p:.3}"))
}

fn extrapolation_order() -> Outcome {
    let ou = OrnsteinUhlenbeck::new(1.0, 1.0);
    let start = [1.0, 1.0];
    let exact = ou.exact_moments(start, 1.0);
    let flow = |m: &[f64], _t: f64, h: f64| ou.exact_moments([m[0], m[1]], h).to_vec();
    let steps: Vec<f64> = (0..5).map(|k| 0.1 / 2f64.powi(k)).collect();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &dt in &steps {
        let m = projective_moments(flow, &start, 1.0, 1e-4, 1, dt).map_err(|e| e.to_string())?;
        first.push(m[0] - exact[0]);
        second.push(m[1] - exact[1]);
    }
    let p1 = fit_order(&steps, &first);
    let p2 = fit_order(&steps, &second);
    ensure((0.8..=1.2).contains(&p1) && (0.8..=1.2).contains(&p2), || {
        format!("slopes {p1:.3}, {p2:.3}")
    })?;
    Ok(format!("slopes E[X] {p1:.3}, E[X²] {p2:.3}"))
}

fn stratified_resampling() -> Outcome {
    let model = fene();
    let x = sample_fene_equilibrium(&model, 1000, model.cutoff(2e-4), 3);
    let uniform = WeightedEnsemble::uniform(1, x).unwrap();
    let mut rng = StreamKey::new(3, Purpose::Resample).stream(0, 0);
    let out = stratified_resample(&uniform, &mut rng);
    ensure(out.positions() == uniform.positions() && out.weights() == uniform.weights(), || {
        "uniform weights not reproduced".into()
    })?;

    let w = [0.2, 0.5, 0.3];
    let reps = 10_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for r in 0..reps {
        let mut rng = StreamKey::new(5, Purpose::Resample).stream(0, r);
        let n = stratified_branching(&w, &mut rng);
        for j in 0..3 {
            sum[j] += n[j] as f64;
            sq[j] += (n[j] * n[j]) as f64;
        }
    }
    let mut worst_z: f64 = 0.0;
    for j in 0..3 {
        let mean = sum[j] / reps as f64;
        let var = sq[j] / reps as f64 - mean * mean;
        let se = (var / reps as f64).sqrt();
        let expected = 3.0 * w[j];
        let dev = (mean - expected).abs();
        ensure(dev <= 3.0 * se, || format!("atom {j}: mean {mean} vs {expected} (se {se:e})"))?;
        if se > 0.0 {
            worst_z = worst_z.max(dev / se);
        }
    }
    Ok(format!("largest deviation {worst_z:.2} standard errors"))
}

fn degenerate_equivalence() -> Outcome {
    let model = fene();
    let config = AccelConfig {
        dt_macro_max: 2e-4,
        horizon: 0.2,
        seed: 21,
        ..AccelConfig::default()
    };
    let basis = MomentBasis::even_powers(model.gamma(), config.moments);
    let x = sample_fene_equilibrium(&model, 1000, model.cutoff(config.dt_micro), 21);
    let initial = WeightedEnsemble::uniform(1, x).unwrap();
    let obs = |e: &WeightedEnsemble| stress(e, &model).map(|s| s[0]);
    let acc = run(&config, &model, &basis, &initial, obs).map_err(|e| e.to_string())?;
    let reference = simulate_reference(&config, &model, &basis, &initial, obs).map_err(|e| e.to_string())?;
    let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same(acc.ensemble.positions(), reference.ensemble.positions()), || {
        "final positions differ".into()
    })?;
    ensure(same(acc.ensemble.weights(), reference.ensemble.weights()), || "final weights differ".into())?;
    let (ta, ya) = acc.observable_series();
    let (tr, yr) = reference.observable_series();
    ensure(same(&ta, &tr) && same(&ya, &yr), || "stress series differ".into())?;
    Ok(format!("{} steps bit-identical", ta.len()))
}

const DT: f64 = 2e-4;

type Study = Result<(SnapshotReport, Duration), String>;

/// Snapshot study at `J = 10⁴` with `L ∈ {3, 5, 7}` and the six-point `Δt` grid.
fn snapshot_study(replicates: usize) -> Study {
    let start = Instant::now();
    let mut spec = ExperimentSpec::new(ExperimentKind::StressErrorVsDt);
    spec.particles = 10_000;
    spec.replicates = replicates;
    spec.snapshot.operators = vec![OperatorKind::Kld, OperatorKind::L2d];
    spec.snapshot.moment_counts = vec![3, 5, 7];
    spec.resolve();
    run_snapshot_matching(&spec)
        .map(|r| (r, start.elapsed()))
        .map_err(|e| e.to_string())
}

fn study_20() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| snapshot_study(20))
}

/// The stress trend uses 100 replicates; with 20 the sampling error of
/// the L = 7 curve is comparable to its increments.
fn study_100() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| snapshot_study(100))
}

fn moment_error_trend() -> Outcome {
    let (report, _) = study_20().as_ref().map_err(|e| e.clone())?;
    let dt = 500.0 * DT;
    let mut lines = Vec::new();
    for op in [OperatorKind::Kld, OperatorKind::L2d] {
        let mut tails = Vec::new();
        for l in [3, 5, 7] {
            let row = report.row(op, l, dt).ok_or("missing row")?;
            ensure(row.samples > 0, || format!("{op} L={l}: no converged samples"))?;
            for k in 0..l {
                let e = row.moment_errors[k].0;
                ensure(e < 1e-6, || format!("{op} L={l}: constrained moment {} error {e:e}", k + 1))?;
            }
            let tail = &row.moment_errors[l..];
            tails.push(tail.iter().map(|e| e.0).sum::<f64>() / tail.len() as f64);
        }
        ensure(tails[0] > tails[1] && tails[1] > tails[2], || format!("{op}: tail errors {tails:?}"))?;
        lines.push(format!("{op} {:.3e}/{:.3e}/{:.3e}", tails[0], tails[1], tails[2]));
    }
    Ok(format!("unconstrained mean error L=3/5/7: {}", lines.join(", ")))
}

fn stress_error_trend() -> Outcome {
    let (report, _) = study_100().as_ref().map_err(|e| e.clone())?;
    let grid: Vec<f64> = [5.0, 20.0, 50.0, 100.0, 250.0, 500.0].iter().map(|k| k * DT).collect();
    let mut problems = Vec::new();
    let mut notes = Vec::new();
    for op in [OperatorKind::Kld, OperatorKind::L2d] {
        let curve = |l: usize| -> Result<Vec<f64>, String> {
            grid.iter()
                .map(|&dt| report.row(op, l, dt).map(|r| r.stress_error.0).ok_or("missing row".to_string()))
                .collect()
        };
        let curves = [curve(3)?, curve(5)?, curve(7)?];
        for (l, c) in [3, 5, 7].iter().zip(&curves) {
            if !c.windows(2).all(|p| p[1] >= p[0]) {
                problems.push(format!("{op} L={l} not monotone {c:?}"));
            }
        }
        if !curves[2].iter().zip(&curves[0]).all(|(a, b)| a <= b) {
            problems.push(format!("{op}: L=7 curve above L=3"));
        }
        for l in [3, 5, 7] {
            let it = report.row(op, l, 500.0 * DT).ok_or("missing row")?.iterations_mean;
            let ok = match op {
                OperatorKind::Kld => (2.0..=4.0).contains(&it),
                _ => it <= 2.0,
            };
            if !ok {
                problems.push(format!("{op} L={l}: mean iterations {it} at the largest Δt"));
            }
            notes.push(format!("{op} L={l} {it:.2}"));
        }
    }
    ensure(problems.is_empty(), || problems.join("; "))?;
    Ok(format!("monotone in Δt, L=7 below L=3; mean iterations {}", notes.join(", ")))
}

fn periodic_flow_tracking() -> Outcome {
    let mut spec = ExperimentSpec::new(ExperimentKind::FullAcceleration);
    spec.particles = 10_000;
    spec.replicates = 10;
    spec.model.kappa = KappaProfile::Sinusoid {
        scale: 2.0,
        offset: 1.1,
        amplitude: 1.0,
        frequency: std::f64::consts::PI,
    };
    spec.accel.horizon = 6.0;
    spec.accel.moments = 3;
    spec.accel.dt_macro_max = 5.0 * DT;
    spec.acceleration.moment_counts = vec![3];
    spec.acceleration.dt_macro_max_values = vec![5.0 * DT];
    spec.resolve();
    let report = run_acceleration_experiment(&spec).map_err(|e| e.to_string())?;
    let key = SeriesKey {
        moments: 3,
        dt_macro_max: 5.0 * DT,
    };
    let summary = &report.summaries[0];
    ensure(summary.completed > 0, || "no completed replicate".into())?;
    let mut cycles = [(0.0, 0usize); 3];
    for row in report.series(key) {
        let c = ((row.time / 2.0) as usize).min(2);
        cycles[c].0 += row.abs_error.0;
        cycles[c].1 += 1;
    }
    let avg: Vec<f64> = cycles.iter().map(|(s, n)| s / *n as f64).collect();
    ensure(avg[2] < avg[0], || format!("cycle errors {avg:?}"))?;
    Ok(format!(
        "cycle errors {:.4}/{:.4}/{:.4}, error ratio {:.4}, extrapolated fraction {:.3}, {} completed",
        avg[0],
        avg[1],
        avg[2],
        summary.error_ratio,
        summary.extrapolated_fraction,
        summary.completed
    ))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "projection_property",
            limit: Duration::from_secs(1),
            check: projection_property,
        },
        Criterion {
            name: "two_atom_closed_forms",
            limit: Duration::from_secs(1),
            check: two_atom_closed_forms,
        },
        Criterion {
            name: "constraint_satisfaction",
            limit: Duration::from_secs(10),
            check: constraint_satisfaction,
        },
        Criterion {
            name: "oracle_optimality",
            limit: Duration::from_secs(30),
            check: oracle_optimality,
        },
        Criterion {
            name: "l2n_rate_bound",
            limit: Duration::from_secs(10),
            check: l2n_rate_bound,
        },
        Criterion {
            name: "weak_order",
            limit: Duration::from_secs(120),
            check: weak_order,
        },
        Criterion {
            name: "extrapolation_order",
            limit: Duration::from_secs(1),
            check: extrapolation_order,
        },
        Criterion {
            name: "stratified_resampling",
            limit: Duration::from_secs(10),
            check: stratified_resampling,
        },
        Criterion {
            name: "degenerate_equivalence",
            limit: Duration::from_secs(30),
            check: degenerate_equivalence,
        },
        Criterion {
            name: "snapshot_moment_error_trend",
            limit: Duration::from_secs(600),
            check: moment_error_trend,
        },
        Criterion {
            name: "snapshot_stress_error_trend",
            limit: Duration::from_secs(900),
            check: stress_error_trend,
        },
        Criterion {
            name: "periodic_flow_tracking",
            limit: Duration::from_secs(1200),
            check: periodic_flow_tracking,
        },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.check)();
        let mut elapsed = start.elapsed();
        // Studies are cached; each criterion is charged for the one it uses.
        let study = match c.name {
            "snapshot_moment_error_trend" => Some(study_20()),
            "snapshot_stress_error_trend" => Some(study_100()),
            _ => None,
        };
        if let Some(Ok((_, shared))) = study {
            elapsed = elapsed.max(*shared);
        }
        let outcome = outcome.and_then(|msg| {
            if elapsed <= c.limit {
                Ok(msg)
            } else {
                Err(format!("{msg}; runtime {:.1}s over {}s", elapsed.as_secs_f64(), c.limit.as_secs()))
            }
        });
        match outcome {
            Ok(msg) => println!("PASS {} ({:.2}s): {msg}", c.name, elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} ({:.2}s): {msg}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
