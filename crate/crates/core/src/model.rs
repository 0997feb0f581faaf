//! SDE models and the accept-reject Euler–Maruyama propagator.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose, StreamKey};

/// Default bound on consecutive rejections of one accept-reject step.
pub const DEFAULT_MAX_REDRAWS: usize = 1000;

/// Particles per parallel work unit. Results never depend on this value.
pub(crate) const CHUNK: usize = 512;

/// An Itô SDE `dX = a(t, X) dt + b(t, X) dW` on a domain `G ⊆ R^d`.
///
/// Time-dependent coefficients are evaluated once per step through
/// [`SdeModel::freeze`], which keeps per-particle work free of time
/// functions.
pub trait SdeModel: Send + Sync {
    /// Coefficients frozen at one time instant.
    type Frozen: Send + Sync;

    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Dimension `m` of the driving Wiener process.
    fn noise_dim(&self) -> usize;

    fn freeze(&self, t: f64) -> Self::Frozen;

    /// Writes `a(t, x)` into `out`.
    fn drift(&self, frozen: &Self::Frozen, x: &[f64], out: &mut [f64]);

    /// Writes `b(t, x) ξ` into `out`.
    fn apply_dispersion(&self, frozen: &Self::Frozen, x: &[f64], xi: &[f64], out: &mut [f64]);

    /// Dispersion matrix `b(t, x)` in row-major `d × m` layout.
    fn dispersion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (d, m) = (self.dim(), self.noise_dim());
        let frozen = self.freeze(t);
        let mut mat = vec![0.0; d * m];
        let mut e = vec![0.0; m];
        let mut col = vec![0.0; d];
        for c in 0..m {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            self.apply_dispersion(&frozen, x, &e, &mut col);
            for r in 0..d {
                mat[r * m + c] = col[r];
            }
        }
        mat
    }

    fn is_admissible(&self, x: &[f64]) -> bool;

    /// Norm bound enforced by accept-reject stepping, or `None` when the
    /// domain is unbounded and every candidate is accepted.
    fn truncation_radius(&self, dt: f64) -> Option<f64>;
}

/// Time profile `s(t)` of the velocity gradient `κ(t) = s(t) · K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KappaProfile {
    Constant { value: f64 },
    /// `scale · (offset + amplitude · sin(frequency · t))`
    Sinusoid {
        scale: f64,
        offset: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl KappaProfile {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            KappaProfile::Constant { value } => value,
            KappaProfile::Sinusoid {
                scale,
                offset,
                amplitude,
                frequency,
            } => scale * (offset + amplitude * (frequency * t).sin()),
        }
    }
}

/// FENE dumbbell: `dX = (κ(t) X − F(X) / (2 Wi)) dt + Wi^{-1/2} dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeneModel {
    b: f64,
    weissenberg: f64,
    dim: usize,
    profile: KappaProfile,
    /// Row-major `d × d` direction of the velocity gradient.
    gradient: Vec<f64>,
}

impl FeneModel {
    /// One-dimensional model with scalar velocity gradient `κ(t)`.
    ///
    /// Trajectorial uniqueness of the continuous model needs `b ≥ 2`;
    /// smaller values are accepted but unexplored.
    pub fn new(b: f64, weissenberg: f64, profile: KappaProfile) -> Result<Self> {
        Self::with_gradient(b, weissenberg, profile, vec![1.0], 1)
    }

    pub fn with_gradient(
        b: f64,
        weissenberg: f64,
        profile: KappaProfile,
        gradient: Vec<f64>,
        dim: usize,
    ) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::Config(format!("FENE b must be positive, got {b}")));
        }
        if !(weissenberg > 0.0 && weissenberg.is_finite()) {
            return Err(Error::Config(format!(
                "Weissenberg number must be positive, got {weissenberg}"
            )));
        }
        if dim == 0 || gradient.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: gradient.len(),
            });
        }
        Ok(FeneModel {
            b,
            weissenberg,
            dim,
            profile,
            gradient,
        })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Maximal extension `γ = √b`.
    pub fn gamma(&self) -> f64 {
        self.b.sqrt()
    }

    pub fn weissenberg(&self) -> f64 {
        self.weissenberg
    }

    pub fn profile(&self) -> &KappaProfile {
        &self.profile
    }

    /// `κ(t)` as a row-major `d × d` matrix.
    pub fn kappa(&self, t: f64) -> Vec<f64> {
        let s = self.profile.value(t);
        self.gradient.iter().map(|g| s * g).collect()
    }

    /// Accept-reject cutoff `(1 − √δt) √b`.
    pub fn cutoff(&self, dt: f64) -> f64 {
        (1.0 - dt.sqrt()) * self.b.sqrt()
    }
}

/// FENE spring force `b x / (b − ‖x‖²)`.
pub fn fene_force(x: &[f64], b: f64) -> Result<Vec<f64>> {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if !(r2 < b) {
        return Err(Error::DomainViolation {
            norm: r2.sqrt(),
            radius: b.sqrt(),
        });
    }
    let f = b / (b - r2);
    Ok(x.iter().map(|v| f * v).collect())
}

/// `x · F(x)` for one particle; callers guarantee `‖x‖² < b`.
#[inline]
pub(crate) fn fene_virial(x: &[f64], b: f64) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    b * r2 / (b - r2)
}

impl SdeModel for FeneModel {
    type Frozen = Vec<f64>;

    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn freeze(&self, t: f64) -> Vec<f64> {
        self.kappa(t)
    }

    #[inline]
    fn drift(&self, kappa: &Vec<f64>, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let spring = self.b / (self.b - r2) / (2.0 * self.weissenberg);
        for i in 0..d {
            let row = &kappa[i * d..(i + 1) * d];
            let kx: f64 = row.iter().zip(x).map(|(k, v)| k * v).sum();
            out[i] = kx - spring * x[i];
        }
    }

    #[inline]
    fn apply_dispersion(&self, _: &Vec<f64>, _: &[f64], xi: &[f64], out: &mut [f64]) {
        let s = 1.0 / self.weissenberg.sqrt();
        for (o, z) in out.iter_mut().zip(xi) {
            *o = s * z;
        }
    }

    fn is_admissible(&self, x: &[f64]) -> bool {
        x.iter().map(|v| v * v).sum::<f64>() < self.b
    }

    fn truncation_radius(&self, dt: f64) -> Option<f64> {
        Some(self.cutoff(dt))
    }
}

/// Ornstein–Uhlenbeck process `dX = −θ X dt + σ dW` on `R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrnsteinUhlenbeck {
    pub theta: f64,
    pub sigma: f64,
}

impl OrnsteinUhlenbeck {
    pub fn new(theta: f64, sigma: f64) -> Self {
        OrnsteinUhlenbeck { theta, sigma }
    }

    /// Exact `(E[X_t], E[X_t²])` from `(E[X_0], E[X_0²])`.
    pub fn exact_moments(&self, m: [f64; 2], t: f64) -> [f64; 2] {
        let decay = (-self.theta * t).exp();
        let stationary = self.sigma * self.sigma / (2.0 * self.theta);
        [
            m[0] * decay,
            stationary + (m[1] - stationary) * decay * decay,
        ]
    }

    /// Expected moments after `steps` Euler–Maruyama steps of size `dt`.
    pub fn euler_moments(&self, m: [f64; 2], dt: f64, steps: usize) -> [f64; 2] {
        let c = 1.0 - self.theta * dt;
        let mut out = m;
        for _ in 0..steps {
            out = [c * out[0], c * c * out[1] + self.sigma * self.sigma * dt];
        }
        out
    }
}

impl SdeModel for OrnsteinUhlenbeck {
    type Frozen = ();

    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn freeze(&self, _: f64) {}

    #[inline]
    fn drift(&self, _: &(), x: &[f64], out: &mut [f64]) {
        out[0] = -self.theta * x[0];
    }

    #[inline]
    fn apply_dispersion(&self, _: &(), _: &[f64], xi: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * xi[0];
    }

    fn is_admissible(&self, x: &[f64]) -> bool {
        x[0].is_finite()
    }

    fn truncation_radius(&self, _: f64) -> Option<f64> {
        None
    }
}

/// Reusable per-worker buffers for the stepping kernels.
#[derive(Debug, Clone)]
pub struct StepScratch {
    xi: Vec<f64>,
    drift: Vec<f64>,
    noise: Vec<f64>,
}

impl StepScratch {
    pub fn new<M: SdeModel>(model: &M) -> Self {
        StepScratch {
            xi: vec![0.0; model.noise_dim()],
            drift: vec![0.0; model.dim()],
            noise: vec![0.0; model.dim()],
        }
    }
}

#[inline]
fn candidate_into<M: SdeModel>(
    model: &M,
    frozen: &M::Frozen,
    x: &[f64],
    dt: f64,
    xi: &[f64],
    out: &mut [f64],
    drift: &mut [f64],
    noise: &mut [f64],
) {
    model.drift(frozen, x, drift);
    model.apply_dispersion(frozen, x, xi, noise);
    let sq = dt.sqrt();
    for i in 0..x.len() {
        out[i] = x[i] + drift[i] * dt + noise[i] * sq;
    }
}

/// One explicit Euler–Maruyama candidate `x + a(t,x) δt + b(t,x) √δt ξ`.
///
/// The candidate may leave the admissible domain; see [`accept_reject_step`].
pub fn em_candidate_step<M: SdeModel>(model: &M, x: &[f64], t: f64, dt: f64, xi: &[f64]) -> Vec<f64> {
    let frozen = model.freeze(t);
    let mut out = vec![0.0; x.len()];
    let mut drift = vec![0.0; x.len()];
    let mut noise = vec![0.0; x.len()];
    candidate_into(model, &frozen, x, dt, xi, &mut out, &mut drift, &mut noise);
    out
}

/// Draws Brownian increments from `rng` until the candidate lies within the
/// model's truncation radius, and returns the number of draws used.
///
/// `particle` and `t` only label the stagnation error.
#[allow(clippy::too_many_arguments)]
pub fn accept_reject_into<M: SdeModel>(
    model: &M,
    frozen: &M::Frozen,
    x: &[f64],
    dt: f64,
    radius: Option<f64>,
    rng: &mut CounterRng,
    max_redraws: usize,
    out: &mut [f64],
    scratch: &mut StepScratch,
    particle: usize,
    t: f64,
) -> Result<usize> {
    let r2max = radius.map(|r| r * r);
    let mut draws = 0;
    loop {
        for z in scratch.xi.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        draws += 1;
        candidate_into(
            model,
            frozen,
            x,
            dt,
            &scratch.xi,
            out,
            &mut scratch.drift,
            &mut scratch.noise,
        );
        match r2max {
            None => return Ok(draws),
            Some(r2) => {
                let n2: f64 = out.iter().map(|v| v * v).sum();
                if n2 <= r2 {
                    return Ok(draws);
                }
            }
        }
        if draws > max_redraws {
            return Err(Error::Stagnation {
                particle,
                redraws: max_redraws,
                time: t,
            });
        }
    }
}

/// Single-particle accept-reject Euler–Maruyama step.
pub fn accept_reject_step<M: SdeModel>(
    model: &M,
    x: &[f64],
    t: f64,
    dt: f64,
    rng: &mut CounterRng,
    max_redraws: usize,
) -> Result<Vec<f64>> {
    let frozen = model.freeze(t);
    let mut scratch = StepScratch::new(model);
    let mut out = vec![0.0; x.len()];
    accept_reject_into(
        model,
        &frozen,
        x,
        dt,
        model.truncation_radius(dt),
        rng,
        max_redraws,
        &mut out,
        &mut scratch,
        0,
        t,
    )?;
    Ok(out)
}

/// Advances every particle by one accept-reject step from time `t`.
///
/// Particle `j` draws from the stream `(key, j, step)`, so the result is
/// independent of the thread count. Returns the total number of rejected
/// candidates.
pub fn advance_positions<M: SdeModel>(
    model: &M,
    positions: &mut [f64],
    t: f64,
    dt: f64,
    key: StreamKey,
    step: u64,
    max_redraws: usize,
) -> Result<u64> {
    let d = model.dim();
    let frozen = model.freeze(t);
    let radius = model.truncation_radius(dt);
    let results: Vec<Result<u64>> = positions
        .par_chunks_mut(CHUNK * d)
        .enumerate()
        .map(|(c, chunk)| {
            let mut scratch = StepScratch::new(model);
            let mut next = vec![0.0; d];
            let mut rejected = 0u64;
            for (i, x) in chunk.chunks_exact_mut(d).enumerate() {
                let j = c * CHUNK + i;
                let mut rng = key.stream(j as u64, step);
                let draws = accept_reject_into(
                    model,
                    &frozen,
                    x,
                    dt,
                    radius,
                    &mut rng,
                    max_redraws,
                    &mut next,
                    &mut scratch,
                    j,
                    t,
                )?;
                rejected += draws as u64 - 1;
                x.copy_from_slice(&next);
            }
            Ok(rejected)
        })
        .collect();
    let mut total = 0;
    for r in results {
        total += r?;
    }
    Ok(total)
}

/// Samples `count` particles from the zero-flow FENE equilibrium
/// `p(x) ∝ (1 − ‖x‖²/b)^{b/2}`, redrawing any sample beyond `max_radius`.
///
/// Uses `‖x‖²/b ~ Beta(d/2, b/2 + 1)` with a uniform direction.
pub fn sample_fene_equilibrium(model: &FeneModel, count: usize, max_radius: f64, seed: u64) -> Vec<f64> {
    let d = model.dim();
    let b = model.b();
    let beta = Beta::new(0.5 * d as f64, 0.5 * b + 1.0).expect("valid beta parameters");
    let key = StreamKey::new(seed, Purpose::InitialCondition);
    let mut out = vec![0.0; count * d];
    out.par_chunks_mut(CHUNK * d)
        .enumerate()
        .for_each(|(c, chunk)| {
            for (i, x) in chunk.chunks_exact_mut(d).enumerate() {
                let mut rng = key.stream((c * CHUNK + i) as u64, 0);
                loop {
                    let r = (b * beta.sample(&mut rng)).sqrt();
                    let mut n2: f64 = 0.0;
                    for v in x.iter_mut() {
                        *v = rng.sample(StandardNormal);
                        n2 += *v * *v;
                    }
                    if n2 == 0.0 {
                        continue;
                    }
                    let s = r / n2.sqrt();
                    x.iter_mut().for_each(|v| *v *= s);
                    if r <= max_radius {
                        break;
                    }
                }
            }
        });
    out
}
