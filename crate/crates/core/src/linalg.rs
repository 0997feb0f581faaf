//! Dense symmetric positive definite solves with a conditioning guard.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Largest accepted spectral condition number.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub enum SolveFailure {
    /// The matrix is not positive definite or its condition number exceeds
    /// the limit.
    IllConditioned { condition: f64 },
    NonFinite,
}

/// Solves `A x = rhs` for symmetric positive definite `A`.
///
/// `A` is first equilibrated to unit diagonal, `S = D⁻¹ A D⁻¹` with
/// `D = diag(√A_ii)`; the returned condition number is that of `S`, which is
/// checked against [`MAX_CONDITION`]. `jitter > 0` adds `jitter` to the
/// diagonal of `S` before factorizing.
pub fn solve_spd(a: &DMatrix<f64>, rhs: &[f64], jitter: f64) -> Result<(Vec<f64>, f64), SolveFailure> {
    let n = a.nrows();
    if a.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(SolveFailure::NonFinite);
    }
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let aii = a[(i, i)];
        if !(aii > 0.0) {
            return Err(SolveFailure::IllConditioned { condition: f64::INFINITY });
        }
        d.push(aii.sqrt());
    }
    let mut s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]));
    if jitter > 0.0 {
        for i in 0..n {
            s[(i, i)] += jitter;
        }
    }
    let eig = SymmetricEigen::new(s.clone()).eigenvalues;
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(SolveFailure::IllConditioned { condition });
    }
    let chol = s.cholesky().ok_or(SolveFailure::IllConditioned { condition: f64::INFINITY })?;
    let scaled = DVector::from_iterator(n, rhs.iter().zip(&d).map(|(r, di)| r / di));
    let y = chol.solve(&scaled);
    let x: Vec<f64> = y.iter().zip(&d).map(|(v, di)| v / di).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolveFailure::NonFinite);
    }
    Ok((x, condition))
}

/// Builds a symmetric matrix from its packed upper triangle (row-major).
pub(crate) fn from_upper(n: usize, packed: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = packed[idx];
            m[(j, i)] = packed[idx];
            idx += 1;
        }
    }
    m
}
