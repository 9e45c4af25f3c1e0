//! Bayesian Lasso for picking the climate variables fed to the growth models.
//!
//! Hierarchy: `y | beta, s2 ~ N(X beta, s2 I)`, `beta_k | s2, t2_k ~ N(0, s2 t2_k)`,
//! `t2_k ~ Exp(lambda^2 / 2)`, `lambda^2 ~ Gamma(r, delta)`. All full
//! conditionals are standard, with inverse-Gaussian draws for `1 / t2_k`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Gamma, InverseGaussian};
use serde::{Deserialize, Serialize};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::linalg::{sample_from_precision, symmetrize};
use crate::sampler::{quantile_sorted, sample_inverse_gamma, stream_rng, PosteriorChain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaPrior {
    /// `lambda^2 ~ Gamma(shape = r, rate = delta)`.
    Gamma { r: f64, delta: f64 },
    /// `lambda` held fixed; a tiny value approaches a flat coefficient prior.
    Fixed(f64),
}

impl Default for LambdaPrior {
    fn default() -> Self {
        LambdaPrior::Gamma { r: 1.0, delta: 1.78 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub lambda: LambdaPrior,
    /// Selection keeps variables whose central interval at this level excludes zero.
    pub ci_level: f64,
    /// Allowed deviation of column means from 0 and standard deviations from 1.
    pub standardization_tol: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            iterations: 6000,
            burn_in: 1000,
            thin: 1,
            seed: 1,
            lambda: LambdaPrior::default(),
            ci_level: 0.90,
            standardization_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoVariable {
    pub variable: String,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub chain: PosteriorChain,
    pub variables: Vec<LassoVariable>,
    pub ci_level: f64,
    pub response_mean: f64,
}

impl LassoFit {
    pub fn selected(&self) -> Vec<String> {
        self.variables.iter().filter(|v| v.selected).map(|v| v.variable.clone()).collect()
    }
}

/// Rejects columns that are not z-scores over the rows supplied.
pub fn check_standardized(x: &DMatrix<f64>, names: &[String], tol: f64) -> Result<()> {
    let n = x.nrows() as f64;
    for (k, col) in x.column_iter().enumerate() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if mean.abs() > tol || (sd - 1.0).abs() > tol {
            return Err(Error::Data(format!(
                "column {} is not standardized (mean {mean:.3e}, sd {sd:.6})",
                names.get(k).map_or("?", String::as_str)
            )));
        }
    }
    Ok(())
}

/// Z-scores every column over its rows (sample standard deviation).
pub fn standardize_columns(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for (k, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance(format!("column {k}")));
        }
        col.apply(|v| *v = (*v - mean) / sd);
    }
    Ok(out)
}

pub fn fit_blasso(y: &DVector<f64>, x: &DMatrix<f64>, names: &[String], config: &LassoConfig) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if y.len() != n || names.len() != p {
        return Err(Error::Data(format!("lasso: {} responses, {n}x{p} design, {} names", y.len(), names.len())));
    }
    if n < 3 {
        return Err(Error::Data("lasso needs at least three observations".into()));
    }
    if config.iterations <= config.burn_in || config.thin == 0 {
        return Err(Error::Config("lasso iterations must exceed burn_in and thin must be positive".into()));
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return Err(Error::Config("lasso ci_level must lie in (0, 1)".into()));
    }
    check_standardized(x, names, config.standardization_tol)?;
    let response_mean = y.mean();
    let y = y.add_scalar(-response_mean);

    let mut rng = stream_rng(config.seed, "lasso", 0);
    let xtx = x.transpose() * x;
    let xty = x.transpose() * &y;
    let mut beta: DVector<f64>;
    let mut inv_t2 = DVector::from_element(p, 1.0);
    let mut sigma2 = y.norm_squared() / n as f64;
    let mut lambda2 = match config.lambda {
        LambdaPrior::Fixed(l) => l * l,
        LambdaPrior::Gamma { .. } => 1.0,
    };
    let mut chain = PosteriorChain::new(config.iterations, config.burn_in, config.thin, config.seed, 0);
    chain.add_block("beta", names.to_vec());
    chain.add_block("sigma2", vec!["sigma2".into()]);
    chain.add_block("lambda", vec!["lambda".into()]);

    for it in 0..config.iterations {
        // beta | rest ~ N(A^-1 X'y, s2 A^-1), A = X'X + D^-1
        let mut a = xtx.clone();
        for k in 0..p {
            a[(k, k)] += inv_t2[k];
        }
        let prec = symmetrize(&(a / sigma2));
        beta = sample_from_precision(&prec, &(&xty / sigma2), &mut rng)?;

        let resid = (&y - x * &beta).norm_squared();
        let pen: f64 = (0..p).map(|k| beta[k] * beta[k] * inv_t2[k]).sum();
        sigma2 = sample_inverse_gamma(0.5 * (n - 1 + p) as f64, 0.5 * (resid + pen), &mut rng)?;

        for k in 0..p {
            let b2 = (beta[k] * beta[k]).max(1e-300);
            let mu = (lambda2 * sigma2 / b2).sqrt().max(1e-300);
            let shape = lambda2.max(1e-300);
            let ig = InverseGaussian::new(mu, shape).map_err(|e| Error::Config(format!("inverse Gaussian: {e}")))?;
            // bounded so that exactly collinear columns keep a proper conditional
            inv_t2[k] = rng.sample::<f64, _>(ig).clamp(1e-10, 1e12);
        }

        if let LambdaPrior::Gamma { r, delta } = config.lambda {
            let sum_t2: f64 = inv_t2.iter().map(|v| 1.0 / v).sum();
            let g = Gamma::new(p as f64 + r, 1.0 / (0.5 * sum_t2 + delta))
                .map_err(|e| Error::Config(format!("gamma: {e}")))?;
            lambda2 = rng.sample(g);
        }
        if chain.keeps(it) {
            chain.push("beta", beta.iter().copied().collect());
            chain.push("sigma2", vec![sigma2]);
            chain.push("lambda", vec![lambda2.sqrt()]);
        }
    }

    let tail = (1.0 - config.ci_level) / 2.0;
    let block = chain.block("beta").expect("beta block");
    let variables = (0..p)
        .map(|k| {
            let mut d = block.column(k);
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            d.sort_by(f64::total_cmp);
            let lower = quantile_sorted(&d, tail);
            let upper = quantile_sorted(&d, 1.0 - tail);
            LassoVariable {
                variable: names[k].clone(),
                mean,
                median: quantile_sorted(&d, 0.5),
                lower,
                upper,
                selected: lower > 0.0 || upper < 0.0,
            }
        })
        .collect();
    Ok(LassoFit { chain, variables, ci_level: config.ci_level, response_mean })
}

/// Selection data from a design that carries all candidate variables:
/// per stand-year mean deviation of log growth from a per-tree penalised
/// spline fit, against re-standardized climate rows.
pub fn selection_data(design: &ModelDesign, smoothing: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = design.basis.n_basis();
    let prior = design.basis.penalty() * smoothing + design.basis.null_projector() * 1e-6;
    let mut sum = vec![vec![0.0; design.n_years()]; design.n_stands()];
    let mut count = vec![vec![0usize; design.n_years()]; design.n_stands()];
    for tree in &design.trees {
        let y = DVector::from_column_slice(&tree.log_growth);
        let lhs = tree.basis.transpose() * &tree.basis + &prior;
        let rhs = tree.basis.transpose() * &y;
        let b = symmetrize(&lhs)
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("preliminary spline fit of {}", tree.tree_id)))?
            .solve(&rhs);
        debug_assert_eq!(b.len(), k);
        let r = y - &tree.basis * b;
        for (m, v) in r.iter().enumerate() {
            sum[tree.stand][tree.start + m] += v;
            count[tree.stand][tree.start + m] += 1;
        }
    }
    let (cells, f) = design.climate_rows();
    let y = DVector::from_iterator(cells.len(), cells.iter().map(|&(j, t)| sum[j][t] / count[j][t] as f64));
    Ok((y, standardize_columns(&f)?))
}

/// `variable, median, q5, q95, selected` (interval bounds at the configured level).
pub fn write_lasso_summary<W: std::io::Write>(writer: W, fit: &LassoFit) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let lo = format!("q{}", fmt_pct((1.0 - fit.ci_level) / 2.0));
    let hi = format!("q{}", fmt_pct(1.0 - (1.0 - fit.ci_level) / 2.0));
    w.write_record(["variable", "median", lo.as_str(), hi.as_str(), "selected"])?;
    for v in &fit.variables {
        w.write_record([
            v.variable.clone(),
            format!("{:.6}", v.median),
            format!("{:.6}", v.lower),
            format!("{:.6}", v.upper),
            v.selected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<lasso writer>", e))?;
    Ok(())
}

fn fmt_pct(q: f64) -> String {
    let s = format!("{:.2}", 100.0 * q);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Selected variable names from a table written by [`write_lasso_summary`].
pub fn read_selected<R: std::io::Read>(reader: R) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.get(4).map(str::trim) == Some("true") {
            out.push(rec.get(0).unwrap_or_default().to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|k| format!("V{k}")).collect()
    }

    /// Columns with orthogonal +-1 patterns, then standardized.
    fn orthogonal(n: usize, p: usize) -> DMatrix<f64> {
        let raw = DMatrix::from_fn(n, p, |r, c| if (r >> c) & 1 == 0 { 1.0 } else { -1.0 });
        standardize_columns(&raw).unwrap()
    }

    fn short() -> LassoConfig {
        LassoConfig { iterations: 4000, burn_in: 500, ..Default::default() }
    }

    #[test]
    fn strong_signal_is_barely_shrunk() {
        let x = orthogonal(64, 4);
        let mut rng = stream_rng(1, "y", 0);
        let y = DVector::from_fn(64, |r, _| 5.0 * x[(r, 0)] + 0.3 * rng.sample::<f64, _>(StandardNormal));
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * (&y.add_scalar(-y.mean()));
        let fit = fit_blasso(&y, &x, &names(4), &short()).unwrap();
        assert!((fit.variables[0].median - ols[0]).abs() < 0.05 * ols[0].abs());
        assert_eq!(fit.selected(), vec!["V0".to_string()]);
    }

    #[test]
    fn shrinkage_grows_with_lambda() {
        let x = orthogonal(32, 3);
        let mut rng = stream_rng(2, "y", 0);
        let y = DVector::from_fn(32, |r, _| 0.4 * x[(r, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        let med = |l: f64| {
            let cfg = LassoConfig { lambda: LambdaPrior::Fixed(l), ..short() };
            fit_blasso(&y, &x, &names(3), &cfg).unwrap().variables[0].median
        };
        let (a, b, c) = (med(0.1), med(5.0), med(40.0));
        assert!(a > b && b > c && c > 0.0, "{a} {b} {c}");
    }

    #[test]
    fn flat_limit_matches_regression() {
        let x = orthogonal(32, 3);
        let mut rng = stream_rng(3, "y", 0);
        let y =
            DVector::from_fn(32, |r, _| 0.7 * x[(r, 1)] - 0.2 * x[(r, 2)] + 0.4 * rng.sample::<f64, _>(StandardNormal));
        let yc = y.add_scalar(-y.mean());
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &yc;
        let cfg =
            LassoConfig { lambda: LambdaPrior::Fixed(1e-6), iterations: 20_000, burn_in: 1000, ..Default::default() };
        let fit = fit_blasso(&y, &x, &names(3), &cfg).unwrap();
        // posterior sd of each coefficient is about sigma / sqrt(n - 1)
        let se = 0.4 / (31f64).sqrt();
        for k in 0..3 {
            assert!(
                (fit.variables[k].mean - ols[k]).abs() < 0.1 * se + 0.01,
                "{k}: {} vs {}",
                fit.variables[k].mean,
                ols[k]
            );
        }
    }

    #[test]
    fn permutation_permutes_selection() {
        let mut rng = stream_rng(4, "x", 0);
        let raw = DMatrix::from_fn(120, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = standardize_columns(&raw).unwrap();
        let y = DVector::from_fn(120, |r, _| {
            0.8 * x[(r, 1)] - 0.6 * x[(r, 4)] + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        let perm = [5, 4, 3, 2, 1, 0];
        let xp = DMatrix::from_fn(120, 6, |r, c| x[(r, perm[c])]);
        let np: Vec<String> = perm.iter().map(|&k| format!("V{k}")).collect();
        let mut a = fit_blasso(&y, &x, &names(6), &short()).unwrap().selected();
        let mut b = fit_blasso(&y, &xp, &np, &short()).unwrap().selected();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(a, vec!["V1".to_string(), "V4".to_string()]);
    }

    #[test]
    fn collinear_columns_do_not_fail() {
        let x0 = orthogonal(16, 2);
        let x = DMatrix::from_fn(16, 3, |r, c| x0[(r, c.min(1))]);
        let y = DVector::from_fn(16, |r, _| x[(r, 1)] + 0.2 * ((r * 5 % 7) as f64 - 3.0));
        let fit = fit_blasso(&y, &x, &names(3), &short()).unwrap();
        assert!(fit.variables.iter().all(|v| v.median.is_finite()));
    }

    #[test]
    fn rejects_unstandardized_columns() {
        let x = orthogonal(16, 2) * 2.0;
        let y = DVector::zeros(16);
        assert!(matches!(fit_blasso(&y, &x, &names(2), &short()), Err(Error::Data(_))));
    }

    #[test]
    fn summary_round_trip() {
        let x = orthogonal(32, 2);
        let y = DVector::from_fn(32, |r, _| 3.0 * x[(r, 0)] + 0.1 * ((r % 3) as f64 - 1.0));
        let fit = fit_blasso(&y, &x, &names(2), &short()).unwrap();
        let mut buf = Vec::new();
        write_lasso_summary(&mut buf, &fit).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("variable,median,q5,q95,selected"));
        assert_eq!(read_selected(&buf[..]).unwrap(), fit.selected());
    }
}
