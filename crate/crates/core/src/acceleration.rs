//! The micro-macro loop: microscopic bursts, moment extrapolation, matching,
//! step-size control and resampling.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::{
    degeneracy, fmt_f64, restrict, stratified_resample, DivergenceKind, MomentBasis, WeightedEnsemble,
};
use crate::error::{Error, Result};
use crate::matching::{match_moments, MatchConfig, MatchFailure, OperatorKind};
use crate::model::{advance_positions, SdeModel, DEFAULT_MAX_REDRAWS};
use crate::rng::{Purpose, StreamKey};

/// Relative slack, in units of `δt`, below which the remaining time counts
/// as zero.
const HORIZON_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelConfig {
    /// Microscopic step `δt`.
    pub dt_micro: f64,
    /// Cap `Δt_max` on the macroscopic step.
    pub dt_macro_max: f64,
    /// First macroscopic step; defaults to `Δt_max`.
    pub dt_macro_initial: Option<f64>,
    /// Microsteps `K` per burst.
    pub micro_steps: usize,
    /// Number `L` of moments.
    pub moments: usize,
    /// Reduction factor after a matching failure.
    pub step_down: f64,
    /// Growth factor after a success.
    pub step_up: f64,
    /// Resample when the weight degeneracy exceeds this. `None` means
    /// `ln(J)/10` for KLD matching and no resampling otherwise.
    pub degeneracy_threshold: Option<f64>,
    /// Accepted steps between degeneracy checks.
    pub degeneracy_check_interval: usize,
    pub matching: MatchConfig,
    /// Final time `T`.
    pub horizon: f64,
    pub seed: u64,
    pub max_redraws: usize,
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig {
            dt_micro: 2e-4,
            dt_macro_max: 1e-3,
            dt_macro_initial: None,
            micro_steps: 1,
            moments: 3,
            step_down: 0.5,
            step_up: 1.2,
            degeneracy_threshold: None,
            degeneracy_check_interval: 10,
            matching: MatchConfig::default(),
            horizon: 1.0,
            seed: 0,
            max_redraws: DEFAULT_MAX_REDRAWS,
        }
    }
}

impl AccelConfig {
    /// Length `K δt` of one burst.
    pub fn burst_length(&self) -> f64 {
        self.micro_steps as f64 * self.dt_micro
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.dt_micro > 0.0 && self.dt_micro < 1.0) {
            return fail(format!("dt_micro must lie in (0, 1), got {}", self.dt_micro));
        }
        if self.micro_steps < 1 {
            return fail("micro_steps must be at least 1".into());
        }
        if !(self.burst_length() <= self.dt_macro_max) {
            return fail(format!(
                "micro_steps * dt_micro = {} exceeds dt_macro_max = {}",
                self.burst_length(),
                self.dt_macro_max
            ));
        }
        if let Some(d) = self.dt_macro_initial {
            if !(d >= self.burst_length() && d <= self.dt_macro_max) {
                return fail(format!("dt_macro_initial = {d} must lie in [K dt_micro, dt_macro_max]"));
            }
        }
        if !(self.step_down > 0.0 && self.step_down < 1.0) {
            return fail(format!("step_down must lie in (0, 1), got {}", self.step_down));
        }
        if !(self.step_up > 1.0 && self.step_up.is_finite()) {
            return fail(format!("step_up must exceed 1, got {}", self.step_up));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return fail(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.moments < 1 {
            return fail("moments must be at least 1".into());
        }
        if self.degeneracy_check_interval < 1 {
            return fail("degeneracy_check_interval must be at least 1".into());
        }
        if let Some(a) = self.degeneracy_threshold {
            if !(a >= 0.0) {
                return fail(format!("degeneracy_threshold must be non-negative, got {a}"));
            }
        }
        if self.max_redraws < 1 {
            return fail("max_redraws must be at least 1".into());
        }
        self.matching.validate()
    }

    fn divergence(&self) -> DivergenceKind {
        match self.matching.operator {
            OperatorKind::Kld => DivergenceKind::Kld,
            OperatorKind::L2d | OperatorKind::L2n => DivergenceKind::L2d,
        }
    }

    fn threshold(&self, particles: usize) -> Option<f64> {
        match (self.degeneracy_threshold, self.matching.operator) {
            (Some(a), _) => Some(a),
            (None, OperatorKind::Kld) => Some((particles as f64).ln() / 10.0),
            (None, _) => None,
        }
    }
}

/// Forward-Euler extrapolation `m⁰ + (Δt/(Kδt))(m^K − m⁰)`.
///
/// Returns `m^K` unchanged when `Δt = Kδt`.
pub fn extrapolate(m_start: &[f64], m_end: &[f64], burst: f64, dt_macro: f64) -> Vec<f64> {
    if dt_macro == burst {
        return m_end.to_vec();
    }
    let r = dt_macro / burst;
    m_start.iter().zip(m_end).map(|(a, b)| a + r * (b - a)).collect()
}

/// Next macroscopic step after a success or failure.
pub fn adapt_step(dt_macro: f64, success: bool, config: &AccelConfig) -> f64 {
    if success {
        (config.step_up * dt_macro).min(config.dt_macro_max)
    } else {
        (config.step_down * dt_macro).max(config.burst_length())
    }
}

/// One macroscopic step, accepted or rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Time at the end of the step (or the attempted end when rejected).
    pub time: f64,
    pub dt_macro: f64,
    pub accepted: bool,
    /// Rejected attempts immediately before this one.
    pub retries: usize,
    /// Restrictions `m^{n,k}`, `k = 0..=K`.
    pub burst_moments: Vec<Vec<f64>>,
    /// Extrapolated target `m^{n+1}`.
    pub target: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub failure: Option<MatchFailure>,
    /// Set on steps where degeneracy was checked.
    pub degeneracy: Option<f64>,
    pub resampled: bool,
    /// Observable of the ensemble at `time`.
    pub observable: f64,
    /// Accept-reject redraws during the burst.
    pub redraws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub resamples: usize,
    pub microsteps: u64,
    pub redraws: u64,
    pub final_time: f64,
    pub final_observable: f64,
    /// `Σ_i (Δt_i − Kδt)/T` over accepted extrapolating steps.
    pub extrapolated_fraction: f64,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub initial_time: f64,
    pub initial_observable: f64,
    /// Every attempted step in order, rejected ones included.
    pub records: Vec<StepRecord>,
    pub ensemble: WeightedEnsemble,
    pub summary: RunSummary,
}

impl RunTrace {
    pub fn accepted(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(|r| r.accepted)
    }

    /// `(t, observable)` at the start and after every accepted step.
    pub fn observable_series(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = vec![self.initial_time];
        let mut y = vec![self.initial_observable];
        for r in self.accepted() {
            t.push(r.time);
            y.push(r.observable);
        }
        (t, y)
    }

    /// One row per accepted step. Columns: `step, time, dt_macro, retries,
    /// iterations, gradient_norm, degeneracy, resampled, observable,
    /// m0_1..m0_L, mK_1..mK_L, target_1..target_L`.
    pub fn write_csv<W: Write>(&self, out: W, moments: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "step",
            "time",
            "dt_macro",
            "retries",
            "iterations",
            "gradient_norm",
            "degeneracy",
            "resampled",
            "observable",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for prefix in ["m0", "mK", "target"] {
            header.extend((1..=moments).map(|l| format!("{prefix}_{l}")));
        }
        w.write_record(&header).map_err(crate::ensemble::csv_err)?;
        for (i, r) in self.accepted().enumerate() {
            let mut row = vec![
                i.to_string(),
                fmt_f64(r.time),
                fmt_f64(r.dt_macro),
                r.retries.to_string(),
                r.iterations.to_string(),
                fmt_f64(r.gradient_norm),
                r.degeneracy.map(fmt_f64).unwrap_or_default(),
                (r.resampled as u8).to_string(),
                fmt_f64(r.observable),
            ];
            let pad = |v: Option<&Vec<f64>>| -> Vec<String> {
                (0..moments)
                    .map(|l| v.and_then(|v| v.get(l)).map(|x| fmt_f64(*x)).unwrap_or_default())
                    .collect()
            };
            row.extend(pad(r.burst_moments.first()));
            row.extend(pad(r.burst_moments.last()));
            row.extend(pad(Some(&r.target)));
            w.write_record(&row).map_err(crate::ensemble::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summary).map_err(|e| Error::Serialize(e.to_string()))
    }
}

/// Microscopic state threaded through a run.
#[derive(Debug, Clone)]
pub struct Clock {
    /// Current time.
    pub time: f64,
    /// Global microstep counter; keys the per-particle random streams.
    pub microstep: u64,
}

/// Result of [`macro_step`].
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Accepted {
        ensemble: WeightedEnsemble,
        time: f64,
        record: StepRecord,
    },
    Rejected {
        /// Ensemble after the burst, before matching.
        burst_end: WeightedEnsemble,
        failure: MatchFailure,
        record: StepRecord,
    },
}

/// Runs `K` microsteps of length `h` from `clock`, recording moments.
#[allow(clippy::too_many_arguments)]
fn burst<M: SdeModel>(
    model: &M,
    ensemble: &mut WeightedEnsemble,
    clock: &mut Clock,
    h: f64,
    steps: usize,
    key: StreamKey,
    basis: &MomentBasis,
    max_redraws: usize,
    moments: Option<&mut Vec<Vec<f64>>>,
) -> Result<u64> {
    let mut redraws = 0;
    let mut moments = moments;
    if let Some(m) = moments.as_deref_mut() {
        m.push(restrict(ensemble, basis));
    }
    for _ in 0..steps {
        redraws += advance_positions(
            model,
            ensemble.positions_mut(),
            clock.time,
            h,
            key,
            clock.microstep,
            max_redraws,
        )?;
        clock.time += h;
        clock.microstep += 1;
        if let Some(m) = moments.as_deref_mut() {
            m.push(restrict(ensemble, basis));
        }
    }
    Ok(redraws)
}

/// Microstep length for a macroscopic step `Δt`: `δt`, or `Δt/K` when the
/// step is shorter than one burst.
fn micro_length(dt_macro: f64, config: &AccelConfig) -> f64 {
    if dt_macro >= config.burst_length() {
        config.dt_micro
    } else {
        dt_macro / config.micro_steps as f64
    }
}

/// One pass of the algorithm: burst, restrict, extrapolate, match.
///
/// `clock.microstep` advances whether or not the step is accepted, so a
/// retry draws fresh variates. On acceptance the new time is `t + Δt`, or
/// the accumulated burst-end time when `Δt` does not exceed the burst.
pub fn macro_step<M, O>(
    ensemble: &WeightedEnsemble,
    clock: &mut Clock,
    dt_macro: f64,
    config: &AccelConfig,
    model: &M,
    basis: &MomentBasis,
    observable: &O,
) -> Result<StepOutcome>
where
    M: SdeModel,
    O: Fn(&WeightedEnsemble) -> Result<f64>,
{
    let key = StreamKey::new(config.seed, Purpose::MicroStep);
    let start = clock.time;
    let h = micro_length(dt_macro, config);
    let mut post = ensemble.clone();
    let mut burst_clock = Clock {
        time: start,
        microstep: clock.microstep,
    };
    let mut moments = Vec::with_capacity(config.micro_steps + 1);
    let redraws = burst(
        model,
        &mut post,
        &mut burst_clock,
        h,
        config.micro_steps,
        key,
        basis,
        config.max_redraws,
        Some(&mut moments),
    )?;
    clock.microstep = burst_clock.microstep;
    let extrapolating = dt_macro > config.burst_length();
    let (target, end) = if extrapolating {
        (
            extrapolate(&moments[0], &moments[config.micro_steps], config.burst_length(), dt_macro),
            start + dt_macro,
        )
    } else {
        (moments[config.micro_steps].clone(), burst_clock.time)
    };
    let outcome = match_moments(&target, &post, basis, &config.matching)?;
    let mut record = StepRecord {
        time: end,
        dt_macro,
        accepted: outcome.converged,
        retries: 0,
        burst_moments: moments,
        target,
        iterations: outcome.iterations,
        gradient_norm: outcome.final_gradient_norm,
        failure: outcome.failure,
        degeneracy: None,
        resampled: false,
        observable: f64::NAN,
        redraws,
    };
    match outcome.failure {
        None => {
            let matched = outcome.ensemble(&post)?;
            record.observable = observable(&matched)?;
            Ok(StepOutcome::Accepted {
                ensemble: matched,
                time: end,
                record,
            })
        }
        Some(failure) => Ok(StepOutcome::Rejected {
            burst_end: post,
            failure,
            record,
        }),
    }
}

fn remaining(config: &AccelConfig, t: f64) -> f64 {
    let r = config.horizon - t;
    if r <= HORIZON_SLACK * config.dt_micro {
        0.0
    } else {
        r
    }
}

/// Runs the accelerated method from `t = 0` to the horizon.
///
/// `observable` is evaluated after every accepted step (e.g. the polymer
/// stress). Steps are truncated so the last accepted time is the horizon.
pub fn run<M, O>(
    config: &AccelConfig,
    model: &M,
    basis: &MomentBasis,
    initial: &WeightedEnsemble,
    observable: O,
) -> Result<RunTrace>
where
    M: SdeModel,
    O: Fn(&WeightedEnsemble) -> Result<f64>,
{
    config.validate()?;
    check_basis(config, basis, initial, model)?;
    let wall = Instant::now();
    let burst_len = config.burst_length();
    let threshold = config.threshold(initial.len());
    let resample_key = StreamKey::new(config.seed, Purpose::Resample);

    let mut ensemble = initial.clone();
    let mut clock = Clock { time: 0.0, microstep: 0 };
    let mut dt = config.dt_macro_initial.unwrap_or(config.dt_macro_max);
    let mut records = Vec::new();
    let mut retries = 0;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut resamples = 0usize;
    let mut checks = 0u64;
    let mut redraws = 0u64;
    let mut extrapolated = 0.0;
    let initial_observable = observable(&ensemble)?;

    loop {
        let left = remaining(config, clock.time);
        if left == 0.0 {
            snap_to_horizon(config, &mut clock, &mut records);
            break;
        }
        let last = dt >= left;
        let attempt = if last { left } else { dt };
        match macro_step(&ensemble, &mut clock, attempt, config, model, basis, &observable)? {
            StepOutcome::Accepted {
                ensemble: next,
                time,
                mut record,
            } => {
                ensemble = next;
                clock.time = if last { config.horizon } else { time };
                record.time = clock.time;
                record.retries = retries;
                redraws += record.redraws;
                retries = 0;
                accepted += 1;
                if attempt > burst_len {
                    extrapolated += attempt - burst_len;
                }
                if accepted.is_multiple_of(config.degeneracy_check_interval) {
                    let value = degeneracy(ensemble.weights(), config.divergence());
                    record.degeneracy = Some(value);
                    if threshold.is_some_and(|a| value > a) {
                        let mut rng = resample_key.stream(checks, 0);
                        ensemble = stratified_resample(&ensemble, &mut rng);
                        record.resampled = true;
                        resamples += 1;
                        record.observable = observable(&ensemble)?;
                        log::debug!("resample time={} degeneracy={value:.6e}", clock.time);
                    }
                    checks += 1;
                }
                log::trace!(
                    "step time={:.6e} dt_macro={attempt:.6e} iterations={}",
                    clock.time,
                    record.iterations
                );
                records.push(record);
                dt = adapt_step(attempt, true, config);
            }
            StepOutcome::Rejected { failure, mut record, .. } => {
                record.retries = retries;
                redraws += record.redraws;
                records.push(record);
                rejected += 1;
                retries += 1;
                log::debug!("reject time={:.6e} dt_macro={attempt:.6e} failure={failure}", clock.time);
                if attempt <= burst_len {
                    return Err(Error::Numerical(format!(
                        "matching failed without extrapolation at t = {} ({failure})",
                        clock.time
                    )));
                }
                dt = adapt_step(attempt, false, config);
            }
        }
    }
    let final_observable = records
        .iter()
        .rev()
        .find(|r| r.accepted)
        .map(|r| r.observable)
        .unwrap_or(initial_observable);
    let summary = RunSummary {
        accepted_steps: accepted,
        rejected_steps: rejected,
        resamples,
        microsteps: clock.microstep,
        redraws,
        final_time: clock.time,
        final_observable,
        extrapolated_fraction: extrapolated / config.horizon,
        wall_time_seconds: wall.elapsed().as_secs_f64(),
    };
    log::info!(
        "run accepted={accepted} rejected={rejected} resamples={resamples} extrapolated_fraction={:.4}",
        summary.extrapolated_fraction
    );
    Ok(RunTrace {
        initial_time: 0.0,
        initial_observable,
        records,
        ensemble,
        summary,
    })
}

/// Plain microscopic simulation with the same stepper, random streams and
/// time bookkeeping as [`run`]; one record per burst of `K` microsteps.
pub fn simulate_reference<M, O>(
    config: &AccelConfig,
    model: &M,
    basis: &MomentBasis,
    initial: &WeightedEnsemble,
    observable: O,
) -> Result<RunTrace>
where
    M: SdeModel,
    O: Fn(&WeightedEnsemble) -> Result<f64>,
{
    config.validate()?;
    check_basis(config, basis, initial, model)?;
    let wall = Instant::now();
    let key = StreamKey::new(config.seed, Purpose::MicroStep);
    let mut ensemble = initial.clone();
    let mut clock = Clock { time: 0.0, microstep: 0 };
    let mut records = Vec::new();
    let mut redraws = 0;
    let initial_observable = observable(&ensemble)?;
    loop {
        let left = remaining(config, clock.time);
        if left == 0.0 {
            snap_to_horizon(config, &mut clock, &mut records);
            break;
        }
        let last = config.burst_length() >= left;
        let span = if last { left } else { config.burst_length() };
        let h = micro_length(span, config);
        let mut moments = Vec::new();
        let r = burst(
            model,
            &mut ensemble,
            &mut clock,
            h,
            config.micro_steps,
            key,
            basis,
            config.max_redraws,
            Some(&mut moments),
        )?;
        if last {
            clock.time = config.horizon;
        }
        redraws += r;
        let target = moments.last().cloned().unwrap_or_default();
        records.push(StepRecord {
            time: clock.time,
            dt_macro: span,
            accepted: true,
            retries: 0,
            burst_moments: moments,
            target,
            iterations: 0,
            gradient_norm: 0.0,
            failure: None,
            degeneracy: None,
            resampled: false,
            observable: observable(&ensemble)?,
            redraws: r,
        });
    }
    let summary = RunSummary {
        accepted_steps: records.len(),
        rejected_steps: 0,
        resamples: 0,
        microsteps: clock.microstep,
        redraws,
        final_time: clock.time,
        final_observable: records.last().map(|r| r.observable).unwrap_or(initial_observable),
        extrapolated_fraction: 0.0,
        wall_time_seconds: wall.elapsed().as_secs_f64(),
    };
    Ok(RunTrace {
        initial_time: 0.0,
        initial_observable,
        records,
        ensemble,
        summary,
    })
}

/// Absorbs a rounding-level remainder into the last accepted step.
fn snap_to_horizon(config: &AccelConfig, clock: &mut Clock, records: &mut [StepRecord]) {
    clock.time = config.horizon;
    if let Some(r) = records.iter_mut().rev().find(|r| r.accepted) {
        r.time = config.horizon;
    }
}

fn check_basis<M: SdeModel>(
    config: &AccelConfig,
    basis: &MomentBasis,
    initial: &WeightedEnsemble,
    model: &M,
) -> Result<()> {
    if basis.count != config.moments {
        return Err(Error::Config(format!(
            "basis has {} moments but the configuration asks for {}",
            basis.count, config.moments
        )));
    }
    if initial.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: initial.dim(),
        });
    }
    if let Some(bad) = initial.iter().position(|(x, _)| !model.is_admissible(x)) {
        return Err(Error::InvalidEnsemble(format!("particle {bad} lies outside the model domain")));
    }
    Ok(())
}

/// Projective forward Euler on moment vectors with an exact moment flow in
/// place of the stochastic burst.
///
/// `flow(m, t, h)` advances the moments over `[t, t + h]`. Each macroscopic
/// step applies the flow `K` times with step `δt`, extrapolates to `Δt`, and
/// takes the extrapolated vector as the new state; the last step is
/// truncated at the horizon.
pub fn projective_moments<F>(
    flow: F,
    initial: &[f64],
    horizon: f64,
    dt_micro: f64,
    micro_steps: usize,
    dt_macro: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64, f64) -> Vec<f64>,
{
    let burst_len = micro_steps as f64 * dt_micro;
    if !(dt_micro > 0.0 && micro_steps >= 1 && dt_macro >= burst_len && horizon > 0.0) {
        return Err(Error::Config("projective integration needs 0 < K dt_micro <= dt_macro".into()));
    }
    let mut m = initial.to_vec();
    let mut t = 0.0;
    while horizon - t > HORIZON_SLACK * dt_micro {
        let step = dt_macro.min(horizon - t);
        let h = if step >= burst_len { dt_micro } else { step / micro_steps as f64 };
        let mut end = m.clone();
        for k in 0..micro_steps {
            end = flow(&end, t + k as f64 * h, h);
        }
        m = if step > burst_len {
            extrapolate(&m, &end, burst_len, step)
        } else {
            end
        };
        t += step;
    }
    Ok(m)
}
