//! Accelerated and reference FENE runs compared on a common time grid.

use std::path::PathBuf;

use serde::Serialize;

use crate::acceleration::{run, simulate_reference, AccelConfig, RunTrace};
use crate::ensemble::{fmt_f64, stress, MomentBasis, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::model::FeneModel;

use super::{mean_sd, replicates, write_artifact, ExperimentSpec};

/// One `(L, Δt_max)` configuration of the accelerated method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesKey {
    pub moments: usize,
    pub dt_macro_max: f64,
}

/// Statistics at one output time.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelerationRow {
    pub key: SeriesKey,
    pub time: f64,
    pub accelerated: (f64, f64),
    pub reference: (f64, f64),
    /// `(mean, sd)` over replicates of `|τ_acc − τ_ref|`.
    pub abs_error: (f64, f64),
    /// `|mean τ_acc − mean τ_ref|`.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub key: SeriesKey,
    pub completed: usize,
    pub aborted: usize,
    /// Mean over replicates of `Σ(Δt_i − Kδt)/T`.
    pub extrapolated_fraction: f64,
    /// Time-averaged bias divided by the time-averaged `|τ_ref|`.
    pub error_ratio: f64,
    pub time_averaged_abs_error: f64,
    pub rejected_steps_mean: f64,
    pub resamples_mean: f64,
    pub accepted_steps_mean: f64,
    pub final_stress_mean: f64,
}

#[derive(Debug, Clone)]
pub struct AccelerationReport {
    pub grid: Vec<f64>,
    pub rows: Vec<AccelerationRow>,
    pub summaries: Vec<SeriesSummary>,
    /// Replicates whose reference run failed.
    pub aborted: usize,
}

impl AccelerationReport {
    pub fn series(&self, key: SeriesKey) -> Vec<&AccelerationRow> {
        self.rows.iter().filter(|r| r.key == key).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "moments",
            "dt_macro_max",
            "time",
            "accelerated_mean",
            "accelerated_sd",
            "reference_mean",
            "reference_sd",
            "abs_error_mean",
            "abs_error_sd",
            "bias",
        ])
        .map_err(crate::ensemble::csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.key.moments.to_string(),
                fmt_f64(r.key.dt_macro_max),
                fmt_f64(r.time),
                fmt_f64(r.accelerated.0),
                fmt_f64(r.accelerated.1),
                fmt_f64(r.reference.0),
                fmt_f64(r.reference.1),
                fmt_f64(r.abs_error.0),
                fmt_f64(r.abs_error.1),
                fmt_f64(r.bias),
            ])
            .map_err(crate::ensemble::csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn write(&self, spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
        let csv_path = write_artifact(spec, "acceleration.csv", &self.to_csv()?)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a ExperimentSpec,
            aborted_replicates: usize,
            series: &'a [SeriesSummary],
        }
        let json = serde_json::to_vec_pretty(&Summary {
            config: spec,
            aborted_replicates: self.aborted,
            series: &self.summaries,
        })
        .map_err(|e| Error::Serialize(e.to_string()))?;
        std::fs::create_dir_all(&spec.output_dir)?;
        let json_path = spec.output_dir.join("acceleration_summary.json");
        std::fs::write(&json_path, json)?;
        Ok(vec![csv_path, json_path])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub time: f64,
    pub stress: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ReferenceReport {
    pub rows: Vec<ReferenceRow>,
    pub aborted: usize,
}

impl ReferenceReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["time", "stress_mean", "stress_sd"])
            .map_err(crate::ensemble::csv_err)?;
        for r in &self.rows {
            w.write_record([fmt_f64(r.time), fmt_f64(r.stress.0), fmt_f64(r.stress.1)])
                .map_err(crate::ensemble::csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn write(&self, spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
        Ok(vec![write_artifact(spec, "reference.csv", &self.to_csv()?)?])
    }
}

/// Output times `0, h, 2h, …` up to the horizon, which is always included.
fn output_grid(horizon: f64, interval: f64) -> Vec<f64> {
    let n = (horizon / interval + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| i as f64 * interval).collect();
    if horizon - grid[n] > 1e-9 * interval {
        grid.push(horizon);
    }
    grid
}

/// Linear interpolation of the series `(t, y)` (increasing `t`) at `x`.
fn interpolate(t: &[f64], y: &[f64], x: f64) -> f64 {
    let i = t.partition_point(|v| *v < x);
    if i == 0 {
        return y[0];
    }
    if i == t.len() {
        return y[t.len() - 1];
    }
    if t[i] == x {
        return y[i];
    }
    let s = (x - t[i - 1]) / (t[i] - t[i - 1]);
    y[i - 1] + s * (y[i] - y[i - 1])
}

fn on_grid(trace: &RunTrace, grid: &[f64]) -> Vec<f64> {
    let (t, y) = trace.observable_series();
    grid.iter().map(|&x| interpolate(&t, &y, x)).collect()
}

fn stress_of(model: &FeneModel) -> impl Fn(&WeightedEnsemble) -> Result<f64> + '_ {
    move |e| Ok(stress(e, model)?[0])
}

struct SeriesRun {
    values: Vec<f64>,
    extrapolated_fraction: f64,
    rejected: usize,
    resamples: usize,
    accepted: usize,
}

fn keys(spec: &ExperimentSpec) -> Vec<SeriesKey> {
    spec.acceleration
        .moment_counts
        .iter()
        .flat_map(|&moments| {
            spec.acceleration
                .dt_macro_max_values
                .iter()
                .map(move |&dt_macro_max| SeriesKey { moments, dt_macro_max })
        })
        .collect()
}

fn config_for(spec: &ExperimentSpec, key: SeriesKey, seed: u64) -> AccelConfig {
    AccelConfig {
        moments: key.moments,
        dt_macro_max: key.dt_macro_max,
        dt_macro_initial: None,
        seed,
        ..spec.accel.clone()
    }
}

/// Runs accelerated and reference simulations for every replicate and
/// every `(L, Δt_max)` configuration.
///
/// Replicate `r` uses one initial ensemble and one seed for the reference
/// and all accelerated runs. A failing accelerated run excludes that
/// replicate from its configuration only.
pub fn run_acceleration_experiment(spec: &ExperimentSpec) -> Result<AccelerationReport> {
    spec.validate()?;
    let model = spec.model()?;
    let gamma = model.gamma();
    let grid = output_grid(spec.accel.horizon, spec.acceleration.output_interval);
    let keys = keys(spec);
    let results = replicates(spec, |r, seed| {
        let initial = spec.initial_ensemble(&model, seed)?;
        let ref_cfg = AccelConfig {
            seed,
            ..spec.accel.clone()
        };
        let basis = MomentBasis::even_powers(gamma, ref_cfg.moments);
        let reference = simulate_reference(&ref_cfg, &model, &basis, &initial, stress_of(&model))?;
        let reference = on_grid(&reference, &grid);
        let runs: Vec<Result<SeriesRun>> = keys
            .iter()
            .map(|&key| {
                let cfg = config_for(spec, key, seed);
                let basis = MomentBasis::even_powers(gamma, key.moments);
                let trace = run(&cfg, &model, &basis, &initial, stress_of(&model))?;
                Ok(SeriesRun {
                    values: on_grid(&trace, &grid),
                    extrapolated_fraction: trace.summary.extrapolated_fraction,
                    rejected: trace.summary.rejected_steps,
                    resamples: trace.summary.resamples,
                    accepted: trace.summary.accepted_steps,
                })
            })
            .collect();
        log::info!("acceleration replicate={r} done");
        Ok((reference, runs))
    });

    let mut aborted = 0;
    let mut done = Vec::new();
    for r in results {
        match r {
            Ok(v) => done.push(v),
            Err(e) => {
                log::warn!("acceleration replicate aborted: {e}");
                aborted += 1;
            }
        }
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (k, &key) in keys.iter().enumerate() {
        let ok: Vec<(&Vec<f64>, &SeriesRun)> = done
            .iter()
            .filter_map(|(reference, runs)| runs[k].as_ref().ok().map(|s| (reference, s)))
            .collect();
        let failed = done.len() - ok.len();
        for (run_err, _) in done.iter().filter_map(|(_, runs)| runs[k].as_ref().err().map(|e| (e, ()))) {
            log::warn!("accelerated run aborted (L={}, dt_macro_max={}): {run_err}", key.moments, key.dt_macro_max);
        }
        let mut bias_sum = 0.0;
        let mut ref_sum = 0.0;
        let mut abs_sum = 0.0;
        for (g, &time) in grid.iter().enumerate() {
            let acc: Vec<f64> = ok.iter().map(|(_, s)| s.values[g]).collect();
            let rf: Vec<f64> = ok.iter().map(|(r, _)| r[g]).collect();
            let err: Vec<f64> = acc.iter().zip(&rf).map(|(a, b)| (a - b).abs()).collect();
            let a = mean_sd(&acc);
            let b = mean_sd(&rf);
            let e = mean_sd(&err);
            let bias = (a.0 - b.0).abs();
            bias_sum += bias;
            ref_sum += b.0.abs();
            abs_sum += e.0;
            rows.push(AccelerationRow {
                key,
                time,
                accelerated: a,
                reference: b,
                abs_error: e,
                bias,
            });
        }
        let avg = |f: &dyn Fn(&SeriesRun) -> f64| mean_sd(&ok.iter().map(|(_, s)| f(s)).collect::<Vec<_>>()).0;
        summaries.push(SeriesSummary {
            key,
            completed: ok.len(),
            aborted: failed + aborted,
            extrapolated_fraction: avg(&|s| s.extrapolated_fraction),
            error_ratio: bias_sum / ref_sum,
            time_averaged_abs_error: abs_sum / grid.len() as f64,
            rejected_steps_mean: avg(&|s| s.rejected as f64),
            resamples_mean: avg(&|s| s.resamples as f64),
            accepted_steps_mean: avg(&|s| s.accepted as f64),
            final_stress_mean: avg(&|s| *s.values.last().unwrap_or(&f64::NAN)),
        });
    }
    Ok(AccelerationReport {
        grid,
        rows,
        summaries,
        aborted,
    })
}

/// Plain microscopic FENE runs, averaged over replicates on the output grid.
pub fn run_reference(spec: &ExperimentSpec) -> Result<ReferenceReport> {
    spec.validate()?;
    let model = spec.model()?;
    let grid = output_grid(spec.accel.horizon, spec.acceleration.output_interval);
    let basis = MomentBasis::even_powers(model.gamma(), spec.accel.moments);
    let results = replicates(spec, |_, seed| {
        let initial = spec.initial_ensemble(&model, seed)?;
        let cfg = AccelConfig {
            seed,
            ..spec.accel.clone()
        };
        let trace = simulate_reference(&cfg, &model, &basis, &initial, stress_of(&model))?;
        Ok(on_grid(&trace, &grid))
    });
    let mut aborted = 0;
    let mut ok = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("reference replicate aborted: {e}");
                aborted += 1;
            }
        }
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(g, &time)| ReferenceRow {
            time,
            stress: mean_sd(&ok.iter().map(|v| v[g]).collect::<Vec<_>>()),
        })
        .collect();
    Ok(ReferenceReport { rows, aborted })
}
