//! Small dense and tridiagonal Gaussian helpers shared by the samplers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} inverse", m.nrows(), m.ncols())))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Draws from `N(P^{-1} b, P^{-1})` given the precision `P` and linear term `b`.
pub fn sample_from_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    linear: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol =
        symmetrize(precision).cholesky().ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let mean = chol.solve(linear);
    let z = standard_normal_vec(rng, linear.len());
    // L L' x = ..., so x = L'^{-1} z has covariance P^{-1}.
    let l = chol.l();
    let x = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NotPositiveDefinite("triangular solve".into()))?;
    Ok(mean + x)
}

/// Lower factor `L` with `L L' = cov` for a positive semi-definite matrix.
///
/// Tries a Cholesky factorisation, then a jittered one, then falls back to a
/// symmetric eigendecomposition with negative eigenvalues clamped to zero.
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let c = symmetrize(cov);
    let n = c.nrows();
    if n == 0 {
        return c;
    }
    if c.iter().all(|v| *v == 0.0) {
        return c;
    }
    if let Some(ch) = c.clone().cholesky() {
        return ch.l();
    }
    let eig = c.symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (k, mut col) in l.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    l
}

pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let l = psd_factor(cov);
    mean + l * standard_normal_vec(rng, mean.len())
}

/// Symmetric tridiagonal matrix stored by its diagonal and first off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub diag: Vec<f64>,
    /// `off[k]` couples entries `k` and `k + 1`.
    pub off: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Tridiagonal { diag: vec![0.0; n], off: vec![0.0; n.saturating_sub(1)] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            m[(k, k)] = self.diag[k];
            if k + 1 < n {
                m[(k, k + 1)] = self.off[k];
                m[(k + 1, k)] = self.off[k];
            }
        }
        m
    }

    /// Bidiagonal Cholesky factor: returns `(l_diag, l_sub)` with `L L' = self`.
    pub fn cholesky(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.len();
        let mut d = vec![0.0; n];
        let mut s = vec![0.0; n.saturating_sub(1)];
        for k in 0..n {
            let mut v = self.diag[k];
            if k > 0 {
                s[k - 1] = self.off[k - 1] / d[k - 1];
                v -= s[k - 1] * s[k - 1];
            }
            if !(v > 0.0) {
                return Err(Error::NotPositiveDefinite(format!("tridiagonal pivot {k} = {v}")));
            }
            d[k] = v.sqrt();
        }
        Ok((d, s))
    }

    /// Solves `self x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let (d, s) = self.cholesky()?;
        Ok(back_solve(&d, &s, &forward_solve(&d, &s, b)))
    }

    /// Draws from `N(self^{-1} b, self^{-1})`.
    pub fn sample<R: Rng + ?Sized>(&self, b: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let (d, s) = self.cholesky()?;
        let mean = back_solve(&d, &s, &forward_solve(&d, &s, b));
        let z: Vec<f64> = (0..self.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let noise = back_solve(&d, &s, &z);
        Ok(mean.iter().zip(&noise).map(|(m, e)| m + e).collect())
    }
}

// L y = b
fn forward_solve(d: &[f64], s: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; b.len()];
    for k in 0..b.len() {
        let mut v = b[k];
        if k > 0 {
            v -= s[k - 1] * y[k - 1];
        }
        y[k] = v / d[k];
    }
    y
}

// L' x = y
fn back_solve(d: &[f64], s: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut v = y[k];
        if k + 1 < n {
            v -= s[k] * x[k + 1];
        }
        x[k] = v / d[k];
    }
    x
}
