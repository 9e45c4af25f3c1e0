//! Stationary first-order autoregressive errors.
//!
//! A series `e_1..e_m` with `e_t = phi e_{t-1} + u_t`, `u_t ~ N(0, sigma2)` and
//! `e_1 ~ N(0, sigma2 / (1 - phi^2))` is whitened to independent `N(0, sigma2)`
//! terms by `sqrt(1 - phi^2) e_1, e_2 - phi e_1, ...`.

use std::f64::consts::PI;

use crate::linalg::Tridiagonal;

pub fn whiten(e: &[f64], phi: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(e.len());
    if let Some(&first) = e.first() {
        out.push((1.0 - phi * phi).sqrt() * first);
    }
    out.extend(e.windows(2).map(|w| w[1] - phi * w[0]));
    out
}

/// Sum of squared whitened terms.
pub fn whitened_ss(e: &[f64], phi: f64) -> f64 {
    if e.is_empty() {
        return 0.0;
    }
    let mut ss = (1.0 - phi * phi) * e[0] * e[0];
    for w in e.windows(2) {
        let u = w[1] - phi * w[0];
        ss += u * u;
    }
    ss
}

pub fn log_likelihood(e: &[f64], phi: f64, sigma2: f64) -> f64 {
    let m = e.len() as f64;
    if e.is_empty() {
        return 0.0;
    }
    -0.5 * m * (2.0 * PI * sigma2).ln() + 0.5 * (1.0 - phi * phi).ln() - whitened_ss(e, phi) / (2.0 * sigma2)
}

/// Precision matrix of a length-`m` stationary series.
pub fn precision(m: usize, phi: f64, sigma2: f64) -> Tridiagonal {
    let mut q = Tridiagonal::zeros(m);
    if m == 0 {
        return q;
    }
    let inv = 1.0 / sigma2;
    for k in 0..m {
        q.diag[k] = if k == 0 || k == m - 1 { inv } else { (1.0 + phi * phi) * inv };
    }
    if m == 1 {
        q.diag[0] = (1.0 - phi * phi) * inv;
    }
    for o in q.off.iter_mut() {
        *o = -phi * inv;
    }
    q
}

/// Sufficient statistics for `phi` pooled over independent series.
///
/// With `e1` the squared first terms, the whitened sum of squares is
/// `(1 - phi^2) e1 + s11 - 2 phi s01 + phi^2 s00`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ar1Stats {
    pub n_series: usize,
    pub n_obs: usize,
    pub e1: f64,
    pub s00: f64,
    pub s01: f64,
    pub s11: f64,
}

impl Ar1Stats {
    pub fn add_series(&mut self, e: &[f64]) {
        if e.is_empty() {
            return;
        }
        self.n_series += 1;
        self.n_obs += e.len();
        self.e1 += e[0] * e[0];
        for w in e.windows(2) {
            self.s00 += w[0] * w[0];
            self.s01 += w[0] * w[1];
            self.s11 += w[1] * w[1];
        }
    }

    pub fn from_series<'a>(series: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut s = Ar1Stats::default();
        for e in series {
            s.add_series(e);
        }
        s
    }

    pub fn whitened_ss(&self, phi: f64) -> f64 {
        (1.0 - phi * phi) * self.e1 + self.s11 - 2.0 * phi * self.s01 + phi * phi * self.s00
    }

    /// Log-likelihood in `phi`, dropping terms constant in `phi`.
    pub fn log_lik_phi(&self, phi: f64, sigma2: f64) -> f64 {
        if phi.abs() >= 1.0 {
            return f64::NEG_INFINITY;
        }
        0.5 * self.n_series as f64 * (1.0 - phi * phi).ln() - self.whitened_ss(phi) / (2.0 * sigma2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_times_covariance_is_identity() {
        let (phi, s2) = (0.6, 0.7);
        let m = 5;
        let q = precision(m, phi, s2).to_dense();
        let c = nalgebra::DMatrix::from_fn(m, m, |a, b| s2 * phi.powi((a as i32 - b as i32).abs()) / (1.0 - phi * phi));
        let id = q * c;
        assert!((id - nalgebra::DMatrix::identity(m, m)).norm() < 1e-12);
    }

    #[test]
    fn stats_match_direct_ss() {
        let a = [0.3, -0.1, 0.4, 0.2];
        let b = [1.0, 0.5];
        let st = Ar1Stats::from_series([&a[..], &b[..]]);
        for phi in [-0.5, 0.0, 0.37, 0.9] {
            let direct = whitened_ss(&a, phi) + whitened_ss(&b, phi);
            assert!((st.whitened_ss(phi) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_precision() {
        let q = precision(1, 0.5, 2.0);
        assert!((q.diag[0] - 0.75 / 2.0).abs() < 1e-15);
    }
}
