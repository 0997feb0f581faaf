//! Experiment specifications, configuration files and seeded runners.
//!
//! Every artifact written here starts with the resolved configuration as
//! `# `-prefixed TOML, so [`load_config`] accepts an artifact in place of a
//! configuration file and reproduces it.

mod accelerate;
mod convergence;
mod snapshot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acceleration::AccelConfig;
use crate::ensemble::WeightedEnsemble;
use crate::error::{Error, Result};
use crate::matching::OperatorKind;
use crate::model::{sample_fene_equilibrium, FeneModel, KappaProfile};
use crate::rng::replicate_seed;

pub use accelerate::{
    run_acceleration_experiment, run_reference, AccelerationReport, AccelerationRow, ReferenceReport, ReferenceRow,
    SeriesKey,
};
pub use convergence::{
    fit_order, ou_weak_errors, run_convergence_study, ConvergenceReport, ConvergenceRow, WeakErrors,
};
pub use snapshot::{run_snapshot_matching, SnapshotReport, SnapshotRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SnapshotMatching,
    #[serde(rename = "moment-error-vs-L", alias = "moment-error-vs-l")]
    MomentErrorVsL,
    StressErrorVsDt,
    FullAcceleration,
    ReferenceRun,
    ConvergenceStudy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// FENE `b`, with `γ = √b`.
    pub b: f64,
    pub weissenberg: f64,
    pub kappa: KappaProfile,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            b: 49.0,
            weissenberg: 1.0,
            kappa: KappaProfile::Constant { value: 2.0 },
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<FeneModel> {
        FeneModel::new(self.b, self.weissenberg, self.kappa.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotSpec {
    /// Time of the prior ensemble.
    pub prior_time: f64,
    /// Matching steps `Δt`; targets are taken at `prior_time + Δt`. Each
    /// value must be a multiple of `dt_micro`.
    pub dt_macro_values: Vec<f64>,
    pub moment_counts: Vec<usize>,
    pub operators: Vec<OperatorKind>,
    /// Moments `l = 1..=n` reported in the error table.
    pub report_moments: usize,
}

impl Default for SnapshotSpec {
    fn default() -> Self {
        SnapshotSpec {
            prior_time: 1.0,
            dt_macro_values: Vec::new(),
            moment_counts: vec![3, 5, 7],
            operators: vec![OperatorKind::L2n, OperatorKind::Kld, OperatorKind::L2d],
            report_moments: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelerationSpec {
    /// Values of `L` to run; empty means `accel.moments`.
    pub moment_counts: Vec<usize>,
    /// Values of `Δt_max` to run; empty means `accel.dt_macro_max`.
    pub dt_macro_max_values: Vec<f64>,
    /// Spacing of the common output grid.
    pub output_interval: f64,
}

impl Default for AccelerationSpec {
    fn default() -> Self {
        AccelerationSpec {
            moment_counts: Vec::new(),
            dt_macro_max_values: Vec::new(),
            output_interval: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub theta: f64,
    pub sigma: f64,
    pub initial_value: f64,
    pub horizon: f64,
    pub particles: usize,
    /// Euler–Maruyama steps; the smallest must divide all others.
    pub dt_micro_values: Vec<f64>,
    /// Macroscopic steps for the exact-moment sweep.
    pub dt_macro_values: Vec<f64>,
    /// Microscopic step of the exact-moment sweep.
    pub dt_micro_exact: f64,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        ConvergenceSpec {
            theta: 1.0,
            sigma: 1.0,
            initial_value: 1.0,
            horizon: 1.0,
            particles: 100_000,
            dt_micro_values: (4..=8).map(|k| 0.5f64.powi(k)).collect(),
            dt_macro_values: (0..5).map(|k| 0.1 * 0.5f64.powi(k)).collect(),
            dt_micro_exact: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Ensemble size `J`.
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub accel: AccelConfig,
    #[serde(default)]
    pub snapshot: SnapshotSpec,
    #[serde(default)]
    pub acceleration: AccelerationSpec,
    #[serde(default)]
    pub convergence: ConvergenceSpec,
}

fn default_replicates() -> usize {
    20
}

fn default_particles() -> usize {
    10_000
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentSpec {
    /// A spec with every default resolved.
    pub fn new(kind: ExperimentKind) -> Self {
        let mut spec = ExperimentSpec {
            kind,
            seed: 0,
            replicates: default_replicates(),
            particles: default_particles(),
            output_dir: default_output(),
            model: ModelSpec::default(),
            accel: AccelConfig::default(),
            snapshot: SnapshotSpec::default(),
            acceleration: AccelerationSpec::default(),
            convergence: ConvergenceSpec::default(),
        };
        spec.resolve();
        spec
    }

    /// Fills defaults that depend on other fields.
    pub fn resolve(&mut self) {
        self.accel.seed = self.seed;
        if self.snapshot.dt_macro_values.is_empty() {
            let dt = self.accel.dt_micro;
            self.snapshot.dt_macro_values = match self.kind {
                ExperimentKind::MomentErrorVsL => vec![500.0 * dt],
                _ => [5.0, 20.0, 50.0, 100.0, 250.0, 500.0].iter().map(|k| k * dt).collect(),
            };
        }
        if self.acceleration.moment_counts.is_empty() {
            self.acceleration.moment_counts = vec![self.accel.moments];
        }
        if self.acceleration.dt_macro_max_values.is_empty() {
            self.acceleration.dt_macro_max_values = vec![self.accel.dt_macro_max];
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.replicates < 1 {
            return fail("replicates must be at least 1".into());
        }
        if self.particles < 1 {
            return fail("particles must be at least 1".into());
        }
        if !(self.model.b > 0.0 && self.model.weissenberg > 0.0) {
            return fail("model.b and model.weissenberg must be positive".into());
        }
        self.accel.validate()?;
        let s = &self.snapshot;
        if !(s.prior_time >= 0.0) {
            return fail("snapshot.prior_time must be non-negative".into());
        }
        for &dt in &s.dt_macro_values {
            let k = dt / self.accel.dt_micro;
            if !(dt >= 0.0) || (k - k.round()).abs() > 1e-6 {
                return fail(format!("snapshot.dt_macro_values: {dt} is not a multiple of dt_micro"));
            }
        }
        if s.moment_counts.iter().any(|&l| !(1..=30).contains(&l)) {
            return fail("snapshot.moment_counts must lie in 1..=30".into());
        }
        if s.report_moments < 1 || s.report_moments > 30 {
            return fail("snapshot.report_moments must lie in 1..=30".into());
        }
        let a = &self.acceleration;
        if a.moment_counts.iter().any(|&l| !(1..=30).contains(&l)) {
            return fail("acceleration.moment_counts must lie in 1..=30".into());
        }
        for &d in &a.dt_macro_max_values {
            if !(d >= self.accel.burst_length()) {
                return fail(format!(
                    "acceleration.dt_macro_max_values: {d} is below micro_steps * dt_micro = {}",
                    self.accel.burst_length()
                ));
            }
        }
        if !(a.output_interval > 0.0) {
            return fail("acceleration.output_interval must be positive".into());
        }
        let c = &self.convergence;
        if !(c.theta > 0.0 && c.sigma > 0.0 && c.horizon > 0.0 && c.particles >= 2) {
            return fail("convergence: theta, sigma, horizon must be positive and particles >= 2".into());
        }
        if c.dt_micro_values.len() < 2 || c.dt_macro_values.len() < 2 {
            return fail("convergence sweeps need at least two step sizes".into());
        }
        let finest = c.dt_micro_values.iter().cloned().fold(f64::INFINITY, f64::min);
        for &dt in &c.dt_micro_values {
            let steps = c.horizon / dt;
            let ratio = dt / finest;
            if !(dt > 0.0) || (steps - steps.round()).abs() > 1e-9 || (ratio - ratio.round()).abs() > 1e-9 {
                return fail(format!(
                    "convergence.dt_micro_values: {dt} must divide the horizon and be a multiple of the finest step"
                ));
            }
        }
        if c.dt_macro_values.iter().any(|&d| !(d >= c.dt_micro_exact)) || !(c.dt_micro_exact > 0.0) {
            return fail("convergence.dt_macro_values must be at least dt_micro_exact > 0".into());
        }
        Ok(())
    }

    /// The resolved spec as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.resolve();
        spec.validate()?;
        Ok(spec)
    }

    pub(crate) fn model(&self) -> Result<FeneModel> {
        self.model.build()
    }

    /// Replicate `r`'s initial ensemble: `J` equilibrium samples within the
    /// truncation ball.
    pub(crate) fn initial_ensemble(&self, model: &FeneModel, seed: u64) -> Result<WeightedEnsemble> {
        let x = sample_fene_equilibrium(model, self.particles, model.cutoff(self.accel.dt_micro), seed);
        WeightedEnsemble::uniform(1, x)
    }
}

/// Reads a configuration file, or the configuration header of an artifact.
pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parses a configuration, accepting either plain TOML or an artifact whose
/// leading lines are `# `-prefixed TOML.
pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    let header: Vec<&str> = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.strip_prefix("# ").or_else(|| l.strip_prefix('#')).unwrap_or(l))
        .collect();
    let is_artifact = !header.is_empty() && header.iter().any(|l| l.trim_start().starts_with("kind"));
    if is_artifact {
        ExperimentSpec::from_toml(&header.join("\n"))
    } else {
        ExperimentSpec::from_toml(text)
    }
}

/// Writes `body` to `dir/name` below a `# `-prefixed copy of the spec.
pub(crate) fn write_artifact(spec: &ExperimentSpec, name: &str, body: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(&spec.output_dir)?;
    let path = spec.output_dir.join(name);
    let mut file = fs::File::create(&path)?;
    for line in spec.to_toml()?.lines() {
        writeln!(file, "# {line}")?;
    }
    file.write_all(body)?;
    Ok(path)
}

/// Runs `f` for every replicate in parallel; results are ordered by
/// replicate index.
pub(crate) fn replicates<T, F>(spec: &ExperimentSpec, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    (0..spec.replicates)
        .into_par_iter()
        .map(|r| f(r, replicate_seed(spec.seed, r as u64)))
        .collect()
}

pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub files: Vec<PathBuf>,
    /// Replicates that aborted with an unrecoverable error.
    pub aborted: usize,
    pub replicates: usize,
}

/// Runs the experiment named by `spec.kind` and writes its artifacts.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    match spec.kind {
        ExperimentKind::SnapshotMatching | ExperimentKind::MomentErrorVsL | ExperimentKind::StressErrorVsDt => {
            let report = run_snapshot_matching(spec)?;
            Ok(ExperimentOutput {
                files: report.write(spec)?,
                aborted: report.aborted,
                replicates: spec.replicates,
            })
        }
        ExperimentKind::FullAcceleration => {
            let report = run_acceleration_experiment(spec)?;
            Ok(ExperimentOutput {
                files: report.write(spec)?,
                aborted: report.aborted,
                replicates: spec.replicates,
            })
        }
        ExperimentKind::ReferenceRun => {
            let report = run_reference(spec)?;
            Ok(ExperimentOutput {
                files: report.write(spec)?,
                aborted: report.aborted,
                replicates: spec.replicates,
            })
        }
        ExperimentKind::ConvergenceStudy => {
            let report = run_convergence_study(spec)?;
            Ok(ExperimentOutput {
                files: report.write(spec)?,
                aborted: 0,
                replicates: 1,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let spec = parse_config("kind = \"snapshot-matching\"\n[model]\nb = 49.0\n").unwrap();
        assert_eq!(spec.accel.dt_micro, 2e-4);
        assert_eq!(spec.accel.matching.tolerance, 1e-9);
        assert_eq!(spec.accel.matching.max_iterations, 5);
        assert_eq!(spec.accel.step_down, 0.5);
        assert_eq!(spec.accel.step_up, 1.2);
        assert_eq!(spec.snapshot.dt_macro_values.len(), 6);
        assert_eq!(spec.replicates, 20);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let err = parse_config("kind = \"full-acceleration\"\n[accel]\nmicro_steps = 10\n").unwrap_err();
        assert!(err.to_string().contains("dt_macro_max"), "{err}");
        let err = parse_config("kind = \"nonsense\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(parse_config("kind = \"reference-run\"\nbogus = 1\n").is_err());
        assert!(parse_config("kind = \"reference-run\"\nreplicates = 0\n").is_err());
    }

    #[test]
    fn kind_names() {
        for (name, kind) in [
            ("moment-error-vs-L", ExperimentKind::MomentErrorVsL),
            ("stress-error-vs-dt", ExperimentKind::StressErrorVsDt),
            ("convergence-study", ExperimentKind::ConvergenceStudy),
        ] {
            assert_eq!(parse_config(&format!("kind = \"{name}\"")).unwrap().kind, kind);
        }
    }

    #[test]
    fn resolved_spec_round_trips_through_artifact_header() {
        let mut spec = ExperimentSpec::new(ExperimentKind::FullAcceleration);
        spec.seed = 99;
        spec.model.kappa = KappaProfile::Sinusoid {
            scale: 2.0,
            offset: 1.1,
            amplitude: 1.0,
            frequency: std::f64::consts::PI,
        };
        spec.resolve();
        let header: String = spec.to_toml().unwrap().lines().map(|l| format!("# {l}\n")).collect();
        let text = format!("{header}time,value\n0,1\n");
        assert_eq!(parse_config(&text).unwrap(), spec);
    }

    #[test]
    fn sample_statistics() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
