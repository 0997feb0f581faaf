//! Weighted particle ensembles and the estimators built on them.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fene_virial, FeneModel, CHUNK};

/// Tolerance on `|Σ w_j − 1|` accepted by [`WeightedEnsemble::new`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// `J` particles in `R^d` with non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    dim: usize,
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn new(dim: usize, positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || !positions.len().is_multiple_of(dim) {
            return Err(Error::InvalidEnsemble(format!(
                "{} coordinates do not split into dimension {dim}",
                positions.len()
            )));
        }
        let count = positions.len() / dim;
        if count == 0 {
            return Err(Error::InvalidEnsemble("ensemble is empty".into()));
        }
        if weights.len() != count {
            return Err(Error::DimensionMismatch {
                expected: count,
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidEnsemble(format!("weight {w} is not a finite non-negative number")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidEnsemble(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightedEnsemble {
            dim,
            positions,
            weights,
        })
    }

    /// Uniform weights `1/J`.
    pub fn uniform(dim: usize, positions: Vec<f64>) -> Result<Self> {
        let count = if dim == 0 { 0 } else { positions.len() / dim };
        let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        Self::new(dim, positions, vec![w; count])
    }

    /// Replaces the weights, renormalizing them to unit mass.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidEnsemble(format!("cannot normalize weights with mass {sum}")));
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Self::new(self.dim, self.positions.clone(), weights)
    }

    pub(crate) fn from_parts_unchecked(dim: usize, positions: Vec<f64>, weights: Vec<f64>) -> Self {
        WeightedEnsemble {
            dim,
            positions,
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        &self.positions[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.positions.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    pub fn into_parts(self) -> (usize, Vec<f64>, Vec<f64>) {
        (self.dim, self.positions, self.weights)
    }

    /// Largest particle norm.
    pub fn max_norm(&self) -> f64 {
        self.positions
            .chunks_exact(self.dim)
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Effective sample size `1 / Σ w_j²`.
    pub fn effective_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Writes one row per particle: `x0,…,x{d-1},weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        header.push("weight".into());
        w.write_record(&header).map_err(csv_err)?;
        for (x, wt) in self.iter() {
            let mut row: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(wt));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let cols = r.headers().map_err(csv_err)?.len();
        if cols < 2 {
            return Err(Error::InvalidEnsemble("ensemble CSV needs position and weight columns".into()));
        }
        let dim = cols - 1;
        let mut positions = Vec::new();
        let mut weights = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|e| Error::Serialize(format!("bad number {field:?}: {e}")))?;
                if i < dim {
                    positions.push(v);
                } else {
                    weights.push(v);
                }
            }
        }
        Self::new(dim, positions, weights)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Serialize(e.to_string())
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Family of moment functions `R_0 ≡ 1, R_1, …, R_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    /// `R_l(x) = (‖x‖/s)^{2l}`, the normalized even raw moments.
    EvenPowers,
    /// `R_l(x) = (x/s)^l` on the first coordinate.
    Powers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBasis {
    pub kind: BasisKind,
    pub scale: f64,
    /// Number `L` of moments beyond the mass.
    pub count: usize,
}

impl MomentBasis {
    /// The FENE basis `(x/γ)^{2l}`, `l = 1..=L`.
    pub fn even_powers(gamma: f64, count: usize) -> Self {
        MomentBasis {
            kind: BasisKind::EvenPowers,
            scale: gamma,
            count,
        }
    }

    pub fn powers(scale: f64, count: usize) -> Self {
        MomentBasis {
            kind: BasisKind::Powers,
            scale,
            count,
        }
    }

    pub fn with_count(self, count: usize) -> Self {
        MomentBasis { count, ..self }
    }

    /// `L + 1`.
    pub fn width(&self) -> usize {
        self.count + 1
    }

    /// Writes `R_0(x), …, R_L(x)` into `out`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let y = match self.kind {
            BasisKind::EvenPowers => x.iter().map(|v| v * v).sum::<f64>() / (self.scale * self.scale),
            BasisKind::Powers => x[0] / self.scale,
        };
        out[0] = 1.0;
        for l in 1..=self.count {
            out[l] = out[l - 1] * y;
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.eval_into(x, &mut out);
        out
    }

    /// `R_l` at a scalar position.
    pub fn eval_scalar(&self, l: usize, x: f64) -> f64 {
        match self.kind {
            BasisKind::EvenPowers => (x / self.scale).powi(2 * l as i32),
            BasisKind::Powers => (x / self.scale).powi(l as i32),
        }
    }

    /// Degree in `x` of `R_l`.
    pub fn degree(&self, l: usize) -> usize {
        match self.kind {
            BasisKind::EvenPowers => 2 * l,
            BasisKind::Powers => l,
        }
    }
}

/// Fixed-order parallel reduction into a vector of `width` sums.
///
/// Particles are grouped in index order into chunks of [`CHUNK`]; partial
/// sums are combined sequentially, so the result is bit-identical for any
/// thread count.
pub(crate) fn reduce_particles<F>(count: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunks = count.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for j in c * CHUNK..((c + 1) * CHUNK).min(count) {
                f(j, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `Σ_j R_l(X_j) w_j` for `l = 0..=L` with arbitrary weights.
pub(crate) fn moment_sums(dim: usize, positions: &[f64], weights: &[f64], basis: &MomentBasis) -> Vec<f64> {
    let width = basis.width();
    reduce_particles(weights.len(), width, |j, acc| {
        let w = weights[j];
        if w == 0.0 {
            return;
        }
        let mut r = [0.0f64; 64];
        let r = &mut r[..width];
        basis.eval_into(&positions[j * dim..(j + 1) * dim], r);
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += v * w;
        }
    })
}

/// Macroscopic state `m_l = Σ_j R_l(X_j) w_j`, `l = 1..=L`.
pub fn restrict(ensemble: &WeightedEnsemble, basis: &MomentBasis) -> Vec<f64> {
    let mut m = moment_sums(ensemble.dim, &ensemble.positions, &ensemble.weights, basis);
    m.remove(0);
    m
}

/// `Σ_j g(X_j) w_j`.
pub fn weighted_average<G>(ensemble: &WeightedEnsemble, g: G) -> f64
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    let d = ensemble.dim;
    reduce_particles(ensemble.len(), 1, |j, acc| {
        acc[0] += g(&ensemble.positions[j * d..(j + 1) * d]) * ensemble.weights[j];
    })[0]
}

/// Polymer stress `τ = (Σ_j w_j X_j ⊗ F(X_j) − I) / Wi`, row-major `d × d`.
pub fn stress(ensemble: &WeightedEnsemble, model: &FeneModel) -> Result<Vec<f64>> {
    let d = ensemble.dim;
    if d != crate::model::SdeModel::dim(model) {
        return Err(Error::DimensionMismatch {
            expected: crate::model::SdeModel::dim(model),
            got: d,
        });
    }
    let b = model.b();
    if let Some(x) = ensemble
        .positions
        .chunks_exact(d)
        .find(|x| !(x.iter().map(|v| v * v).sum::<f64>() < b))
    {
        return Err(Error::DomainViolation {
            norm: x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            radius: b.sqrt(),
        });
    }
    let mut xf = reduce_particles(ensemble.len(), d * d, |j, acc| {
        let x = &ensemble.positions[j * d..(j + 1) * d];
        let w = ensemble.weights[j];
        if d == 1 {
            acc[0] += fene_virial(x, b) * w;
            return;
        }
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let f = b / (b - r2);
        for r in 0..d {
            for c in 0..d {
                acc[r * d + c] += x[r] * f * x[c] * w;
            }
        }
    });
    let wi = model.weissenberg();
    for r in 0..d {
        for c in 0..d {
            let id = if r == c { 1.0 } else { 0.0 };
            xf[r * d + c] = (xf[r * d + c] - id) / wi;
        }
    }
    Ok(xf)
}

/// How weight degeneracy is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    /// `Σ w_j ln(J w_j) ∈ [0, ln J]`
    Kld,
    /// `(1/J) Σ (J w_j − 1)² ∈ [0, (J−1)²/J]`
    L2d,
}

/// Divergence of normalized weights from the uniform weights `1/J`.
pub fn degeneracy(weights: &[f64], kind: DivergenceKind) -> f64 {
    let n = weights.len() as f64;
    if weights.iter().all(|w| *w == weights[0]) {
        return 0.0;
    }
    match kind {
        DivergenceKind::Kld => weights
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| w * (n * w).ln())
            .sum(),
        DivergenceKind::L2d => weights.iter().map(|w| (n * w - 1.0).powi(2)).sum::<f64>() / n,
    }
}

/// Branching numbers `n_j` of stratified resampling.
///
/// Stratum `k` (0-based) draws `u_k = (k + ũ_k)/J` and lands in the
/// half-open cumulative-weight bin `[c_{j−1}, c_j)`. Bins are compared in the
/// scaled variable `J c_j`, so uniform weights reproduce the input exactly.
pub fn stratified_branching<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let scale = n as f64;
    let mut counts = vec![0usize; n];
    let last_positive = weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
    let mut j = 0usize;
    let mut upper = scale * weights[0];
    for k in 0..n {
        let u = k as f64 + rng.random::<f64>();
        while u >= upper && j < last_positive {
            j += 1;
            upper += scale * weights[j];
        }
        counts[j] += 1;
    }
    counts
}

/// Stratified resampling to `J` equally weighted particles.
pub fn stratified_resample<R: Rng + ?Sized>(ensemble: &WeightedEnsemble, rng: &mut R) -> WeightedEnsemble {
    let counts = stratified_branching(&ensemble.weights, rng);
    let d = ensemble.dim;
    let mut positions = Vec::with_capacity(ensemble.positions.len());
    for (j, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            positions.extend_from_slice(ensemble.particle(j));
        }
    }
    let n = ensemble.len();
    WeightedEnsemble::from_parts_unchecked(d, positions, vec![1.0 / n as f64; n])
}

/// Scott's rule `h = σ_w n_eff^{-1/5}` from the weighted standard deviation
/// and effective sample size (one-dimensional ensembles).
pub fn scott_bandwidth(ensemble: &WeightedEnsemble) -> f64 {
    let mean = weighted_average(ensemble, |x| x[0]);
    let var = weighted_average(ensemble, |x| (x[0] - mean).powi(2));
    var.sqrt() * ensemble.effective_size().powf(-0.2)
}

/// Gaussian kernel density estimate `p̂(x) = Σ_j w_j φ_h(x − X_j)` on a
/// one-dimensional grid.
pub fn kde_density(ensemble: &WeightedEnsemble, bandwidth: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if ensemble.dim != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: ensemble.dim,
        });
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Numerical(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let inv = 1.0 / bandwidth;
    Ok(grid
        .par_iter()
        .map(|&x| {
            ensemble
                .iter()
                .map(|(p, w)| {
                    let z = (x - p[0]) * inv;
                    w * (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}
