//! Order-of-convergence study on the Ornstein–Uhlenbeck process.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::acceleration::projective_moments;
use crate::ensemble::{fmt_f64, reduce_particles};
use crate::error::{Error, Result};
use crate::model::OrnsteinUhlenbeck;
use crate::rng::{Purpose, StreamKey};

use super::{write_artifact, ExperimentSpec};

/// Monte Carlo weak errors of Euler–Maruyama on one set of step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakErrors {
    pub dt: Vec<f64>,
    /// Estimates of `E[X_T^δt] − E[X_T]`.
    pub first: Vec<f64>,
    /// Estimates of `E[(X_T^δt)²] − E[X_T²]`.
    pub second: Vec<f64>,
    /// Standard errors of `first`.
    pub first_se: Vec<f64>,
}

/// Weak errors of Euler–Maruyama for `dX = −θX dt + σ dW`, `X_0 = x0`,
/// with common random numbers.
///
/// Every particle draws one Brownian path on the finest grid. Coarser
/// levels sum its increments, and the reference is the exact transition
/// driven by the same normals, so each particle contributes
/// `X^δt_T − X_T` with the shared noise largely cancelled.
pub fn ou_weak_errors(
    ou: &OrnsteinUhlenbeck,
    x0: f64,
    horizon: f64,
    dt_values: &[f64],
    particles: usize,
    seed: u64,
) -> Result<WeakErrors> {
    if dt_values.is_empty() || particles < 2 {
        return Err(Error::Config("need at least one step size and two particles".into()));
    }
    let finest = dt_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let steps = (horizon / finest).round() as usize;
    let ratios: Vec<usize> = dt_values.iter().map(|d| (d / finest).round() as usize).collect();
    if ratios.iter().any(|&r| r == 0 || !steps.is_multiple_of(r)) {
        return Err(Error::Config("step sizes must be multiples of the finest and divide the horizon".into()));
    }
    let n = dt_values.len();
    let key = StreamKey::new(seed, Purpose::MicroStep);
    let decay = (-ou.theta * finest).exp();
    let spread = ou.sigma * ((1.0 - decay * decay) / (2.0 * ou.theta)).sqrt();
    let sqrt_h = finest.sqrt();
    let sums = reduce_particles(particles, 3 * n, |j, acc| {
        let mut rng = key.stream(j as u64, 0);
        let mut exact = x0;
        let mut em = vec![x0; n];
        let mut pending = vec![0.0; n];
        for i in 0..steps {
            let xi: f64 = rng.sample(StandardNormal);
            exact = decay * exact + spread * xi;
            for l in 0..n {
                pending[l] += xi;
                if (i + 1) % ratios[l] == 0 {
                    let h = dt_values[l];
                    em[l] += -ou.theta * em[l] * h + ou.sigma * sqrt_h * pending[l];
                    pending[l] = 0.0;
                }
            }
        }
        for l in 0..n {
            let d = em[l] - exact;
            acc[3 * l] += d;
            acc[3 * l + 1] += d * d;
            acc[3 * l + 2] += em[l] * em[l] - exact * exact;
        }
    });
    let p = particles as f64;
    let mut out = WeakErrors {
        dt: dt_values.to_vec(),
        first: Vec::with_capacity(n),
        second: Vec::with_capacity(n),
        first_se: Vec::with_capacity(n),
    };
    for l in 0..n {
        let mean = sums[3 * l] / p;
        let var = (sums[3 * l + 1] / p - mean * mean) * p / (p - 1.0);
        out.first.push(mean);
        out.second.push(sums[3 * l + 2] / p);
        out.first_se.push((var.max(0.0) / p).sqrt());
    }
    Ok(out)
}

/// Least-squares slope of `ln|err|` against `ln h`.
pub fn fit_order(h: &[f64], err: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = h.iter().zip(err).map(|(a, b)| (a.ln(), b.abs().ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Value of the fitted power law `C hᵖ` at `x`.
fn fitted_at(h: &[f64], err: &[f64], x: f64) -> f64 {
    let p = fit_order(h, err);
    let n = h.len() as f64;
    let c = h.iter().zip(err).map(|(a, b)| b.abs().ln() - p * a.ln()).sum::<f64>() / n;
    (c + p * x.ln()).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    /// `dt_micro`, `dt_macro` or `combined`.
    pub sweep: &'static str,
    pub step: f64,
    pub error_first: f64,
    pub error_second: f64,
    pub standard_error_first: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Fitted orders `(E[X_T], E[X_T²])` of the `δt` sweep.
    pub micro_order: (f64, f64),
    /// Fitted orders `(E[X_T], E[X_T²])` of the exact-moment `Δt` sweep.
    pub macro_order: (f64, f64),
    /// `|E[X_T²]|` error with both steps at their finest values.
    pub combined_error: f64,
    /// Sum of the two fitted error laws at the finest steps.
    pub combined_bound: f64,
}

impl ConvergenceReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "sweep",
            "step",
            "error_first",
            "error_second",
            "standard_error_first",
            "order_first",
            "order_second",
        ])
        .map_err(crate::ensemble::csv_err)?;
        for r in &self.rows {
            let order = match r.sweep {
                "dt_micro" => self.micro_order,
                "dt_macro" => self.macro_order,
                _ => (f64::NAN, f64::NAN),
            };
            w.write_record([
                r.sweep.to_string(),
                fmt_f64(r.step),
                fmt_f64(r.error_first),
                fmt_f64(r.error_second),
                fmt_f64(r.standard_error_first),
                fmt_f64(order.0),
                fmt_f64(order.1),
            ])
            .map_err(crate::ensemble::csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn write(&self, spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
        Ok(vec![write_artifact(spec, "convergence.csv", &self.to_csv()?)?])
    }
}

/// Sweeps `δt` (Monte Carlo, `Δt = Kδt`) and `Δt` (exact moments) on the
/// Ornstein–Uhlenbeck process and fits the orders.
pub fn run_convergence_study(spec: &ExperimentSpec) -> Result<ConvergenceReport> {
    spec.validate()?;
    let c = &spec.convergence;
    let ou = OrnsteinUhlenbeck::new(c.theta, c.sigma);
    let start = [c.initial_value, c.initial_value * c.initial_value];
    let exact = ou.exact_moments(start, c.horizon);
    let mut rows = Vec::new();

    let weak = ou_weak_errors(&ou, c.initial_value, c.horizon, &c.dt_micro_values, c.particles, spec.seed)?;
    for i in 0..weak.dt.len() {
        rows.push(ConvergenceRow {
            sweep: "dt_micro",
            step: weak.dt[i],
            error_first: weak.first[i],
            error_second: weak.second[i],
            standard_error_first: weak.first_se[i],
        });
    }
    let micro_order = (fit_order(&weak.dt, &weak.first), fit_order(&weak.dt, &weak.second));

    let exact_flow = |m: &[f64], _t: f64, h: f64| ou.exact_moments([m[0], m[1]], h).to_vec();
    let mut macro_first = Vec::new();
    let mut macro_second = Vec::new();
    for &dt in &c.dt_macro_values {
        let m = projective_moments(exact_flow, &start, c.horizon, c.dt_micro_exact, 1, dt)?;
        macro_first.push(m[0] - exact[0]);
        macro_second.push(m[1] - exact[1]);
        rows.push(ConvergenceRow {
            sweep: "dt_macro",
            step: dt,
            error_first: m[0] - exact[0],
            error_second: m[1] - exact[1],
            standard_error_first: 0.0,
        });
    }
    let macro_order = (
        fit_order(&c.dt_macro_values, &macro_first),
        fit_order(&c.dt_macro_values, &macro_second),
    );

    // Both errors at once: the expected Euler–Maruyama moments as the burst
    // at the finest δt, extrapolated with the finest Δt.
    let dt_micro = c.dt_micro_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let dt_macro = c.dt_macro_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if dt_macro < dt_micro {
        return Err(Error::Config("the finest dt_macro must not be below the finest dt_micro".into()));
    }
    let euler_flow = |m: &[f64], _t: f64, h: f64| ou.euler_moments([m[0], m[1]], h, 1).to_vec();
    let both = projective_moments(euler_flow, &start, c.horizon, dt_micro, 1, dt_macro)?;
    let combined_error = (both[1] - exact[1]).abs();
    rows.push(ConvergenceRow {
        sweep: "combined",
        step: dt_macro,
        error_first: both[0] - exact[0],
        error_second: both[1] - exact[1],
        standard_error_first: 0.0,
    });
    let combined_bound = fitted_at(&weak.dt, &weak.second, dt_micro)
        + fitted_at(&c.dt_macro_values, &macro_second, dt_macro);
    log::info!(
        "convergence micro_order={:.3} macro_order={:.3} combined_error={combined_error:.3e} combined_bound={combined_bound:.3e}",
        micro_order.0,
        macro_order.1
    );
    Ok(ConvergenceReport {
        rows,
        micro_order,
        macro_order,
        combined_error,
        combined_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ExperimentKind;

    #[test]
    fn fit_recovers_power_law() {
        let h = [0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((fit_order(&h, &e) - 1.5).abs() < 1e-12);
        assert!((fitted_at(&h, &e, 0.01) - 3.0 * 0.01f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn weak_errors_track_closed_form_bias() {
        // E[X^δt_T] = x0 (1 − θδt)^N exactly, so the estimate must agree
        // with the known bias within a few standard errors.
        let ou = OrnsteinUhlenbeck::new(1.0, 1.0);
        let dts = [0.25, 0.125, 0.0625];
        let w = ou_weak_errors(&ou, 1.0, 1.0, &dts, 20_000, 4).unwrap();
        for i in 0..3 {
            let n = (1.0 / dts[i]).round() as i32;
            let bias = (1.0 - dts[i]).powi(n) - (-1.0f64).exp();
            assert!((w.first[i] - bias).abs() < 4.0 * w.first_se[i] + 1e-12, "{i}: {} vs {bias}", w.first[i]);
        }
    }

    #[test]
    fn study_reports_first_order() {
        let mut spec = ExperimentSpec::new(ExperimentKind::ConvergenceStudy);
        spec.convergence.particles = 20_000;
        let report = run_convergence_study(&spec).unwrap();
        assert!((report.macro_order.1 - 1.0).abs() < 0.2);
        assert!(report.combined_error < report.combined_bound);
        let text = String::from_utf8(report.to_csv().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1 + 5 + 5 + 1);
    }
}
