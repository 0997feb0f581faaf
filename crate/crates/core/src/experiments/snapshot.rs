//! Matching a prior snapshot of the FENE simulation to moments of later
//! snapshots.

use std::path::PathBuf;

use crate::ensemble::{fmt_f64, restrict, stress, MomentBasis, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::matching::{l2n_average, match_moments, MatchConfig, OperatorKind};
use crate::model::{advance_positions, fene_virial, FeneModel};
use crate::rng::{Purpose, StreamKey};

use super::{mean_sd, replicates, write_artifact, ExperimentSpec};

/// Aggregated errors for one `(operator, L, Δt)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRow {
    pub operator: OperatorKind,
    pub moments: usize,
    pub dt_macro: f64,
    /// Replicates contributing to the averages.
    pub samples: usize,
    /// Replicates where the match failed (excluded from the averages for
    /// KLD and L2D; L2N rows count negative weights but keep the sample).
    pub failures: usize,
    pub iterations_mean: f64,
    pub stress_error: (f64, f64),
    /// `(mean, sd)` of `|m*_l − m_l| / m*_l` for `l = 1..=report_moments`.
    pub moment_errors: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SnapshotReport {
    pub rows: Vec<SnapshotRow>,
    pub aborted: usize,
    pub report_moments: usize,
}

impl SnapshotReport {
    pub fn row(&self, operator: OperatorKind, moments: usize, dt_macro: f64) -> Option<&SnapshotRow> {
        self.rows
            .iter()
            .find(|r| r.operator == operator && r.moments == moments && (r.dt_macro - dt_macro).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "operator",
            "moments",
            "dt_macro",
            "samples",
            "failures",
            "iterations_mean",
            "stress_error_mean",
            "stress_error_sd",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((1..=self.report_moments).map(|l| format!("moment_error_mean_{l}")));
        header.extend((1..=self.report_moments).map(|l| format!("moment_error_sd_{l}")));
        w.write_record(&header).map_err(crate::ensemble::csv_err)?;
        for r in &self.rows {
            let mut row = vec![
                r.operator.to_string(),
                r.moments.to_string(),
                fmt_f64(r.dt_macro),
                r.samples.to_string(),
                r.failures.to_string(),
                fmt_f64(r.iterations_mean),
                fmt_f64(r.stress_error.0),
                fmt_f64(r.stress_error.1),
            ];
            row.extend(r.moment_errors.iter().map(|e| fmt_f64(e.0)));
            row.extend(r.moment_errors.iter().map(|e| fmt_f64(e.1)));
            w.write_record(&row).map_err(crate::ensemble::csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn write(&self, spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
        Ok(vec![write_artifact(spec, "snapshot.csv", &self.to_csv()?)?])
    }
}

struct Cell {
    ok: bool,
    iterations: usize,
    stress_error: f64,
    moment_errors: Vec<f64>,
}

/// Simulates from the equilibrium to the prior time and to each target time.
fn snapshots(
    spec: &ExperimentSpec,
    model: &FeneModel,
    seed: u64,
) -> Result<(WeightedEnsemble, Vec<WeightedEnsemble>)> {
    let dt = spec.accel.dt_micro;
    let key = StreamKey::new(seed, Purpose::MicroStep);
    let mut ensemble = spec.initial_ensemble(model, seed)?;
    let prior_steps = (spec.snapshot.prior_time / dt).round() as u64;
    let offsets: Vec<u64> = spec
        .snapshot
        .dt_macro_values
        .iter()
        .map(|d| (d / dt).round() as u64)
        .collect();
    let last = prior_steps + offsets.iter().copied().max().unwrap_or(0);
    let mut prior = None;
    let mut captured: Vec<Option<WeightedEnsemble>> = vec![None; offsets.len()];
    for k in 0..=last {
        if k == prior_steps {
            prior = Some(ensemble.clone());
        }
        for (i, off) in offsets.iter().enumerate() {
            if k == prior_steps + off {
                captured[i] = Some(ensemble.clone());
            }
        }
        if k < last {
            advance_positions(
                model,
                ensemble.positions_mut(),
                k as f64 * dt,
                dt,
                key,
                k,
                spec.accel.max_redraws,
            )?;
        }
    }
    let prior = prior.expect("prior step reached");
    Ok((prior, captured.into_iter().map(|e| e.expect("target step reached")).collect()))
}

fn evaluate(
    spec: &ExperimentSpec,
    model: &FeneModel,
    prior: &WeightedEnsemble,
    target: &WeightedEnsemble,
    operator: OperatorKind,
    moments: usize,
) -> Result<Cell> {
    let gamma = model.gamma();
    let report = MomentBasis::even_powers(gamma, spec.snapshot.report_moments);
    let basis = MomentBasis::even_powers(gamma, moments);
    let wanted = restrict(target, &report);
    let tau = stress(target, model)?[0];
    let config = MatchConfig {
        operator,
        ..spec.accel.matching
    };
    let outcome = match_moments(&restrict(target, &basis), prior, &basis, &config)?;
    let relative = |got: &[f64]| -> Vec<f64> { wanted.iter().zip(got).map(|(w, g)| (w - g).abs() / w.abs()).collect() };
    match operator {
        OperatorKind::L2n => {
            // Moments of the signed density exactly; stress from the
            // (possibly signed) ensemble weights.
            let half_width = config.l2n_half_width.unwrap_or(gamma);
            let got = if outcome.iterations == 0 {
                restrict(prior, &report)
            } else {
                (1..=report.count)
                    .map(|l| l2n_average(&outcome.multipliers, prior, &basis, |x| report.eval_scalar(l, x), half_width))
                    .collect::<Result<Vec<f64>>>()?
            };
            let tau_hat = if outcome.iterations == 0 {
                stress(prior, model)?[0]
            } else {
                let mass: f64 = outcome.new_weights.iter().sum();
                let b = model.b();
                let virial: f64 = prior
                    .iter()
                    .zip(&outcome.new_weights)
                    .map(|((x, _), w)| w * fene_virial(x, b))
                    .sum::<f64>()
                    / mass;
                (virial - 1.0) / model.weissenberg()
            };
            Ok(Cell {
                ok: outcome.converged,
                iterations: outcome.iterations,
                stress_error: (tau - tau_hat).abs() / tau.abs(),
                moment_errors: relative(&got),
            })
        }
        _ => {
            if !outcome.converged {
                return Ok(Cell {
                    ok: false,
                    iterations: outcome.iterations,
                    stress_error: f64::NAN,
                    moment_errors: vec![f64::NAN; report.count],
                });
            }
            let matched = outcome.ensemble(prior)?;
            let tau_hat = stress(&matched, model)?[0];
            Ok(Cell {
                ok: true,
                iterations: outcome.iterations,
                stress_error: (tau - tau_hat).abs() / tau.abs(),
                moment_errors: relative(&restrict(&matched, &report)),
            })
        }
    }
}

/// Runs the snapshot-matching protocol over all replicates.
///
/// Each replicate simulates its own prior and targets from a fresh
/// equilibrium sample. Failed matches are counted, not fatal.
pub fn run_snapshot_matching(spec: &ExperimentSpec) -> Result<SnapshotReport> {
    spec.validate()?;
    let model = spec.model()?;
    let s = &spec.snapshot;
    let cells: Vec<(OperatorKind, usize, usize)> = s
        .operators
        .iter()
        .flat_map(|&op| {
            s.moment_counts
                .iter()
                .flat_map(move |&l| (0..s.dt_macro_values.len()).map(move |i| (op, l, i)))
        })
        .collect();
    let results = replicates(spec, |r, seed| {
        let (prior, targets) = snapshots(spec, &model, seed)?;
        let out = cells
            .iter()
            .map(|&(op, l, i)| evaluate(spec, &model, &prior, &targets[i], op, l))
            .collect::<Result<Vec<Cell>>>()?;
        log::info!("snapshot replicate={r} done");
        Ok(out)
    });
    let mut aborted = 0;
    let mut runs = Vec::new();
    for r in results {
        match r {
            Ok(v) => runs.push(v),
            Err(e) => {
                log::warn!("snapshot replicate aborted: {e}");
                aborted += 1;
            }
        }
    }
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(operator, moments, i))| {
            let all: Vec<&Cell> = runs.iter().map(|run| &run[c]).collect();
            let used: Vec<&Cell> = all
                .iter()
                .copied()
                .filter(|cell| cell.ok || operator == OperatorKind::L2n)
                .collect();
            let pick = |f: &dyn Fn(&Cell) -> f64| mean_sd(&used.iter().map(|c| f(c)).collect::<Vec<_>>());
            SnapshotRow {
                operator,
                moments,
                dt_macro: s.dt_macro_values[i],
                samples: used.len(),
                failures: all.iter().filter(|c| !c.ok).count(),
                iterations_mean: mean_sd(&all.iter().map(|c| c.iterations as f64).collect::<Vec<_>>()).0,
                stress_error: pick(&|c| c.stress_error),
                moment_errors: (0..s.report_moments).map(|l| pick(&|c| c.moment_errors[l])).collect(),
            }
        })
        .collect();
    Ok(SnapshotReport {
        rows,
        aborted,
        report_moments: s.report_moments,
    })
}
