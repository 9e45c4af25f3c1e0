//! Fixed-climate-effects model.
//!
//! Tree level: `log y_it = x_it' beta_i + alpha_{j(i),t} + eps_it` with
//! stationary AR(1) errors. Stand level: `alpha_jt = f_jt' theta + v_jt`,
//! `v_jt ~ N(0, tau2)`. Each Gibbs sweep updates, in order, the spline
//! coefficients, the stand-year effects, `theta`, the variances and `phi`.
//!
//! The tree-level blocks are shared with the time-varying model in
//! [`crate::vce`], which only swaps the prior mean of the stand effects.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar1::{self, Ar1Stats};
use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::linalg::{sample_from_precision, Tridiagonal};
use crate::sampler::{stream_rng, ChainRng, ChainStream, InvGamma, PhiPrior, PhiSampler, PosteriorChain, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Keep every stored draw of the stand-year effects.
    pub store_alpha: bool,
    /// Appends kept draws of the scalar blocks here, 100 rows at a time.
    pub stream_path: Option<std::path::PathBuf>,
    /// Any variance above this aborts the run.
    pub divergence_limit: f64,
    pub ci_level: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 3000,
            burn_in: 1000,
            thin: 1,
            chains: 1,
            seed: 1,
            store_alpha: false,
            stream_path: None,
            divergence_limit: 1e12,
            ci_level: 0.95,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn_in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.chains == 0 || self.thin == 0 {
            return Err(Error::Config("chains and thin must be at least 1".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!("ci_level {} not in (0, 1)", self.ci_level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    pub sigma2_pe: InvGamma,
    pub tau2: InvGamma,
    pub sigma2_beta: InvGamma,
    /// Diagonal entries of the random-walk covariance (time-varying model).
    pub sigma_theta: InvGamma,
    /// Prior standard deviation of each climate coefficient.
    pub theta_sd: f64,
    /// Prior standard deviation of the unpenalised spline directions.
    pub beta_null_sd: f64,
    pub phi: PhiPrior,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            sigma2_pe: InvGamma::default(),
            tau2: InvGamma::default(),
            sigma2_beta: InvGamma::default(),
            sigma_theta: InvGamma::default(),
            theta_sd: 10.0,
            beta_null_sd: 10.0,
            phi: PhiPrior::Uniform,
        }
    }
}

/// Parameters held at fixed values instead of being sampled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fixed {
    pub theta: Option<Vec<f64>>,
    pub sigma2_pe: Option<f64>,
    pub phi: Option<f64>,
    pub tau2: Option<f64>,
    pub sigma2_beta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FceConfig {
    pub sampler: SamplerConfig,
    pub priors: Priors,
    pub fixed: Fixed,
}

/// Parameters of the tree level, shared by both models.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeLevelState {
    pub beta: Vec<DVector<f64>>,
    /// `alpha[j][t]`; zero outside a stand's span.
    pub alpha: Vec<Vec<f64>>,
    pub sigma2_pe: f64,
    pub phi: f64,
    pub sigma2_beta: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FceState {
    pub tree: TreeLevelState,
    pub theta: DVector<f64>,
}

/// Quantities of the spline prior that do not change during a run.
#[derive(Debug, Clone)]
pub struct SplinePrior {
    pub penalty: DMatrix<f64>,
    pub null_precision: DMatrix<f64>,
    pub rank: usize,
}

impl SplinePrior {
    pub fn new(design: &ModelDesign, beta_null_sd: f64) -> Self {
        let penalty = design.basis.penalty();
        let null_precision = design.basis.null_projector() / (beta_null_sd * beta_null_sd);
        SplinePrior { penalty, null_precision, rank: design.basis.penalty_rank() }
    }

    /// Prior precision `K / sigma2_beta + P_null / s0^2`.
    pub fn precision(&self, sigma2_beta: f64) -> DMatrix<f64> {
        &self.penalty / sigma2_beta + &self.null_precision
    }
}

/// Initial state: per-tree penalised least squares with zero stand effects.
pub fn initial_tree_state(design: &ModelDesign, prior: &SplinePrior) -> TreeLevelState {
    let k = design.basis.n_basis();
    let ridge = prior.precision(1.0) + DMatrix::identity(k, k) * 1e-6;
    let mut ss = 0.0;
    let beta: Vec<DVector<f64>> = design
        .trees
        .iter()
        .map(|tree| {
            let y = DVector::from_column_slice(&tree.log_growth);
            let lhs = tree.basis.transpose() * &tree.basis + &ridge;
            let rhs = tree.basis.transpose() * &y;
            let b = lhs.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(k));
            ss += (y - &tree.basis * &b).norm_squared();
            b
        })
        .collect();
    let n = design.n_observations().max(1) as f64;
    TreeLevelState {
        beta,
        alpha: vec![vec![0.0; design.n_years()]; design.n_stands()],
        sigma2_pe: (ss / n).max(1e-4),
        phi: 0.0,
        sigma2_beta: 1.0,
        tau2: 0.1,
    }
}

fn whiten_columns(x: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    let (m, k) = x.shape();
    let mut out = DMatrix::zeros(m, k);
    let s = (1.0 - phi * phi).sqrt();
    for c in 0..k {
        out[(0, c)] = s * x[(0, c)];
        for r in 1..m {
            out[(r, c)] = x[(r, c)] - phi * x[(r - 1, c)];
        }
    }
    out
}

/// Draws every `beta_i` from its Gaussian full conditional.
pub fn update_beta(
    design: &ModelDesign,
    state: &mut TreeLevelState,
    prior: &SplinePrior,
    rng: &mut ChainRng,
) -> Result<()> {
    let prior_prec = prior.precision(state.sigma2_beta);
    let inv_s2 = 1.0 / state.sigma2_pe;
    for (i, tree) in design.trees.iter().enumerate() {
        let alpha = &state.alpha[tree.stand][tree.start..tree.end()];
        let r: Vec<f64> = tree.log_growth.iter().zip(alpha).map(|(y, a)| y - a).collect();
        let xw = whiten_columns(&tree.basis, state.phi);
        let rw = DVector::from_vec(ar1::whiten(&r, state.phi));
        let prec = xw.transpose() * &xw * inv_s2 + &prior_prec;
        let lin = xw.transpose() * rw * inv_s2;
        state.beta[i] = sample_from_precision(&prec, &lin, rng)?;
    }
    Ok(())
}

/// Full conditional of stand `j`'s effects over its span `[lo, hi)`:
/// returns `(lo, precision, linear term)`.
pub fn alpha_full_conditional(
    design: &ModelDesign,
    state: &TreeLevelState,
    j: usize,
    prior_mean: &dyn Fn(usize, usize) -> f64,
) -> Option<(usize, Tridiagonal, Vec<f64>)> {
    let (lo, hi) = design.stand_span(j)?;
    let n = hi - lo;
    let mut q = Tridiagonal::zeros(n);
    let mut lin = vec![0.0; n];
    let inv_tau = 1.0 / state.tau2;
    for k in 0..n {
        q.diag[k] = inv_tau;
        lin[k] = prior_mean(j, lo + k) * inv_tau;
    }
    for (i, tree) in design.trees_in_stand(j) {
        let fit = &tree.basis * &state.beta[i];
        let d: Vec<f64> = tree.log_growth.iter().zip(fit.iter()).map(|(y, f)| y - f).collect();
        let qi = ar1::precision(d.len(), state.phi, state.sigma2_pe);
        let off = tree.start - lo;
        for k in 0..d.len() {
            q.diag[off + k] += qi.diag[k];
            let mut v = qi.diag[k] * d[k];
            if k > 0 {
                v += qi.off[k - 1] * d[k - 1];
            }
            if k + 1 < d.len() {
                q.off[off + k] += qi.off[k];
                v += qi.off[k] * d[k + 1];
            }
            lin[off + k] += v;
        }
    }
    Some((lo, q, lin))
}

/// Draws all stand-year effects given their prior means `m(j, t)`.
pub fn update_alpha(
    design: &ModelDesign,
    state: &mut TreeLevelState,
    prior_mean: &dyn Fn(usize, usize) -> f64,
    rng: &mut ChainRng,
) -> Result<()> {
    for j in 0..design.n_stands() {
        if let Some((lo, q, lin)) = alpha_full_conditional(design, state, j, prior_mean) {
            let draw = q.sample(&lin, rng)?;
            state.alpha[j][lo..lo + draw.len()].copy_from_slice(&draw);
        }
    }
    Ok(())
}

/// Tree-level residuals `log y - x' beta - alpha`, one vector per tree.
pub fn residuals(design: &ModelDesign, state: &TreeLevelState) -> Vec<Vec<f64>> {
    design
        .trees
        .iter()
        .enumerate()
        .map(|(i, tree)| {
            let fit = &tree.basis * &state.beta[i];
            let alpha = &state.alpha[tree.stand][tree.start..tree.end()];
            tree.log_growth.iter().zip(fit.iter()).zip(alpha).map(|((y, f), a)| y - f - a).collect()
        })
        .collect()
}

/// Updates `sigma2_pe`, `sigma2_beta` and `phi` (each unless fixed).
pub fn update_tree_variances(
    design: &ModelDesign,
    state: &mut TreeLevelState,
    prior: &SplinePrior,
    priors: &Priors,
    fixed: &Fixed,
    phi_sampler: &mut PhiSampler,
    rng: &mut ChainRng,
) -> Result<()> {
    let res = residuals(design, state);
    match fixed.sigma2_pe {
        Some(v) => state.sigma2_pe = v,
        None => {
            let ss: f64 = res.iter().map(|e| ar1::whitened_ss(e, state.phi)).sum();
            state.sigma2_pe = priors.sigma2_pe.posterior(design.n_observations() as f64, ss).sample(rng)?;
        }
    }
    match fixed.sigma2_beta {
        Some(v) => state.sigma2_beta = v,
        None => {
            let ss: f64 = state.beta.iter().map(|b| (b.transpose() * &prior.penalty * b)[(0, 0)]).sum();
            let n = (design.n_trees() * prior.rank) as f64;
            state.sigma2_beta = priors.sigma2_beta.posterior(n, ss).sample(rng)?;
        }
    }
    match fixed.phi {
        Some(v) => state.phi = v,
        None => {
            let stats = Ar1Stats::from_series(res.iter().map(Vec::as_slice));
            state.phi = phi_sampler.sample(state.phi, &stats, state.sigma2_pe, &priors.phi, rng);
        }
    }
    Ok(())
}

/// Bayesian regression of `alpha` on the climate rows with noise `tau2`.
pub fn theta_full_conditional(
    f: &DMatrix<f64>,
    alpha: &DVector<f64>,
    tau2: f64,
    theta_sd: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = f.ncols();
    let prec = f.transpose() * f / tau2 + DMatrix::identity(p, p) / (theta_sd * theta_sd);
    let lin = f.transpose() * alpha / tau2;
    (prec, lin)
}

/// Cached observed cells and their climate rows.
#[derive(Debug, Clone)]
pub struct CellRows {
    pub cells: Vec<(usize, usize)>,
    pub f: DMatrix<f64>,
}

impl CellRows {
    pub fn new(design: &ModelDesign) -> Self {
        let (cells, f) = design.climate_rows();
        CellRows { cells, f }
    }

    pub fn alpha(&self, state: &TreeLevelState) -> DVector<f64> {
        DVector::from_iterator(self.cells.len(), self.cells.iter().map(|&(j, t)| state.alpha[j][t]))
    }
}

/// Log of the joint density of data and parameters (up to a constant).
pub fn log_joint(
    design: &ModelDesign,
    rows: &CellRows,
    state: &TreeLevelState,
    prior: &SplinePrior,
    priors: &Priors,
    stand_mean: &DVector<f64>,
) -> f64 {
    let res = residuals(design, state);
    let mut lp: f64 = res.iter().map(|e| ar1::log_likelihood(e, state.phi, state.sigma2_pe)).sum();
    let alpha = rows.alpha(state);
    let n = alpha.len() as f64;
    lp += -0.5 * n * state.tau2.ln() - (alpha - stand_mean).norm_squared() / (2.0 * state.tau2);
    let prec = prior.precision(state.sigma2_beta);
    for b in &state.beta {
        lp -= 0.5 * (b.transpose() * &prec * b)[(0, 0)];
    }
    lp -= 0.5 * (design.n_trees() * prior.rank) as f64 * state.sigma2_beta.ln();
    let ig = |g: &InvGamma, x: f64| -(g.shape + 1.0) * x.ln() - g.rate / x;
    lp += ig(&priors.sigma2_pe, state.sigma2_pe)
        + ig(&priors.tau2, state.tau2)
        + ig(&priors.sigma2_beta, state.sigma2_beta);
    lp += priors.phi.log_density(state.phi);
    lp
}

pub(crate) fn check_divergence(state: &TreeLevelState, limit: f64) -> Result<()> {
    for (name, v) in [("sigma2_pe", state.sigma2_pe), ("tau2", state.tau2), ("sigma2_beta", state.sigma2_beta)] {
        if !(v < limit) || !v.is_finite() {
            return Err(Error::Divergence(format!("{name} = {v:e}")));
        }
    }
    Ok(())
}

/// Context needed by a sweep that does not change between sweeps.
pub struct FceSweep<'a> {
    pub design: &'a ModelDesign,
    pub rows: CellRows,
    pub spline: SplinePrior,
    pub config: &'a FceConfig,
}

impl<'a> FceSweep<'a> {
    pub fn new(design: &'a ModelDesign, config: &'a FceConfig) -> Self {
        FceSweep {
            design,
            rows: CellRows::new(design),
            spline: SplinePrior::new(design, config.priors.beta_null_sd),
            config,
        }
    }

    pub fn initial_state(&self, rng: &mut ChainRng) -> FceState {
        let mut tree = initial_tree_state(self.design, &self.spline);
        let fixed = &self.config.fixed;
        if let Some(v) = fixed.tau2 {
            tree.tau2 = v;
        }
        if let Some(v) = fixed.sigma2_pe {
            tree.sigma2_pe = v;
        }
        if let Some(v) = fixed.phi {
            tree.phi = v;
        }
        if let Some(v) = fixed.sigma2_beta {
            tree.sigma2_beta = v;
        }
        let p = self.design.n_vars();
        let theta = match &fixed.theta {
            Some(t) => DVector::from_column_slice(t),
            None => DVector::from_fn(p, |_, _| 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)),
        };
        FceState { tree, theta }
    }

    /// One full scan: beta, alpha, theta, variances, phi.
    pub fn sweep(&self, state: &mut FceState, phi_sampler: &mut PhiSampler, rng: &mut ChainRng) -> Result<()> {
        let design = self.design;
        let fixed = &self.config.fixed;
        let priors = &self.config.priors;
        update_beta(design, &mut state.tree, &self.spline, rng)?;
        let theta = state.theta.clone();
        let mean = |j: usize, t: usize| match &design.climate[j][t] {
            Some(f) => f.dot(&theta),
            None => 0.0,
        };
        update_alpha(design, &mut state.tree, &mean, rng)?;

        let alpha = self.rows.alpha(&state.tree);
        match &fixed.theta {
            Some(t) => state.theta = DVector::from_column_slice(t),
            None => {
                let (prec, lin) = theta_full_conditional(&self.rows.f, &alpha, state.tree.tau2, priors.theta_sd);
                state.theta = sample_from_precision(&prec, &lin, rng)?;
            }
        }
        match fixed.tau2 {
            Some(v) => state.tree.tau2 = v,
            None => {
                let ss = (&alpha - &self.rows.f * &state.theta).norm_squared();
                state.tree.tau2 = priors.tau2.posterior(alpha.len() as f64, ss).sample(rng)?;
            }
        }
        update_tree_variances(design, &mut state.tree, &self.spline, priors, fixed, phi_sampler, rng)?;
        check_divergence(&state.tree, self.config.sampler.divergence_limit)
    }

    pub fn log_joint(&self, state: &FceState) -> f64 {
        let mean = &self.rows.f * &state.theta;
        let sd = self.config.priors.theta_sd;
        log_joint(self.design, &self.rows, &state.tree, &self.spline, &self.config.priors, &mean)
            - 0.5 * state.theta.norm_squared() / (sd * sd)
    }
}

/// Draws accumulated across chains for quantities too large to store per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulated {
    pub n: usize,
    pub alpha_sum: Vec<Vec<f64>>,
    pub beta_sum: Vec<DVector<f64>>,
}

impl Accumulated {
    pub fn new(design: &ModelDesign) -> Self {
        Accumulated {
            n: 0,
            alpha_sum: vec![vec![0.0; design.n_years()]; design.n_stands()],
            beta_sum: vec![DVector::zeros(design.basis.n_basis()); design.n_trees()],
        }
    }

    pub fn add(&mut self, state: &TreeLevelState) {
        self.n += 1;
        for (acc, a) in self.alpha_sum.iter_mut().zip(&state.alpha) {
            for (x, y) in acc.iter_mut().zip(a) {
                *x += y;
            }
        }
        for (acc, b) in self.beta_sum.iter_mut().zip(&state.beta) {
            *acc += b;
        }
    }

    pub fn merge(&mut self, other: &Accumulated) {
        self.n += other.n;
        for (a, b) in self.alpha_sum.iter_mut().zip(&other.alpha_sum) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.beta_sum.iter_mut().zip(&other.beta_sum) {
            *a += b;
        }
    }

    /// Posterior mean of `alpha` on observed cells (`NaN` elsewhere).
    pub fn alpha_mean(&self, design: &ModelDesign) -> Vec<Vec<f64>> {
        let n = self.n.max(1) as f64;
        self.alpha_sum
            .iter()
            .enumerate()
            .map(|(j, row)| {
                row.iter().enumerate().map(|(t, v)| if design.observed[j][t] { v / n } else { f64::NAN }).collect()
            })
            .collect()
    }

    pub fn beta_mean(&self) -> Vec<DVector<f64>> {
        let n = self.n.max(1) as f64;
        self.beta_sum.iter().map(|b| b / n).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FceFit {
    pub chains: Vec<PosteriorChain>,
    pub variables: Vec<String>,
    pub alpha_mean: Vec<Vec<f64>>,
    pub beta_mean: Vec<DVector<f64>>,
    pub phi_acceptance: f64,
    pub summary: Vec<Summary>,
}

pub(crate) fn scalar_blocks(chain: &mut PosteriorChain) {
    for name in ["sigma2_pe", "phi", "tau2", "sigma2_beta", "log_joint"] {
        chain.add_block(name, vec![name.to_string()]);
    }
}

pub(crate) fn push_scalars(chain: &mut PosteriorChain, s: &TreeLevelState, log_joint: f64) {
    chain.push("sigma2_pe", vec![s.sigma2_pe]);
    chain.push("phi", vec![s.phi]);
    chain.push("tau2", vec![s.tau2]);
    chain.push("sigma2_beta", vec![s.sigma2_beta]);
    chain.push("log_joint", vec![log_joint]);
}

pub(crate) fn stream_for(config: &SamplerConfig, chain: usize) -> Option<ChainStream> {
    config.stream_path.as_ref().map(|p| {
        let mut path = p.clone();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        path.set_file_name(format!("{stem}_chain{chain}.csv"));
        let _ = std::fs::remove_file(&path);
        ChainStream::new(path)
    })
}

fn run_chain(
    design: &ModelDesign,
    config: &FceConfig,
    chain_index: usize,
) -> Result<(PosteriorChain, Accumulated, f64)> {
    let sc = &config.sampler;
    let sweep = FceSweep::new(design, config);
    let mut rng = stream_rng(sc.seed, "fce", chain_index as u64);
    let mut state = sweep.initial_state(&mut rng);
    let mut phi_sampler = PhiSampler::default();
    let mut chain = PosteriorChain::new(sc.iterations, sc.burn_in, sc.thin, sc.seed, chain_index);
    chain.add_block("theta", design.variables.clone());
    scalar_blocks(&mut chain);
    let cell_labels: Vec<String> =
        sweep.rows.cells.iter().map(|&(j, t)| format!("{}:{}", design.stands[j], design.year(t))).collect();
    if sc.store_alpha {
        chain.add_block("alpha", cell_labels);
    }
    let mut acc = Accumulated::new(design);
    let mut stream = stream_for(sc, chain_index);
    for it in 0..sc.iterations {
        sweep.sweep(&mut state, &mut phi_sampler, &mut rng)?;
        if it < sc.burn_in && it % 50 == 49 {
            phi_sampler.adapt();
        }
        if chain.keeps(it) {
            chain.push("theta", state.theta.iter().copied().collect());
            push_scalars(&mut chain, &state.tree, sweep.log_joint(&state));
            if sc.store_alpha {
                chain.push("alpha", sweep.rows.alpha(&state.tree).iter().copied().collect());
            }
            acc.add(&state.tree);
            if let Some(s) = stream.as_mut() {
                s.record(it, &chain, &["theta", "sigma2_pe", "phi", "tau2", "sigma2_beta"])?;
            }
        }
    }
    if let Some(s) = stream.as_mut() {
        s.flush()?;
    }
    Ok((chain, acc, phi_sampler.acceptance_rate()))
}

/// Runs `config.sampler.chains` independent chains in parallel.
pub fn fit_fce(design: &ModelDesign, config: &FceConfig) -> Result<FceFit> {
    config.sampler.validate()?;
    if let Some(t) = &config.fixed.theta {
        if t.len() != design.n_vars() {
            return Err(Error::Config(format!("fixed theta has {} values, design has {}", t.len(), design.n_vars())));
        }
    }
    let results: Vec<Result<(PosteriorChain, Accumulated, f64)>> =
        (0..config.sampler.chains).into_par_iter().map(|c| run_chain(design, config, c)).collect();
    let mut chains = Vec::new();
    let mut acc = Accumulated::new(design);
    let mut acceptance = 0.0;
    for r in results {
        let (chain, a, rate) = r?;
        chains.push(chain);
        acc.merge(&a);
        acceptance += rate;
    }
    let summary = crate::sampler::summarize(&chains, config.sampler.ci_level)?;
    Ok(FceFit {
        variables: design.variables.clone(),
        alpha_mean: acc.alpha_mean(design),
        beta_mean: acc.beta_mean(),
        phi_acceptance: acceptance / chains.len() as f64,
        chains,
        summary,
    })
}

impl FceFit {
    pub fn theta_summary(&self) -> Vec<&Summary> {
        self.summary.iter().filter(|s| s.block == "theta").collect()
    }

    pub fn scalar(&self, name: &str) -> Option<&Summary> {
        self.summary.iter().find(|s| s.block == name)
    }

    /// Posterior mean and covariance of `theta` pooled over chains.
    pub fn theta_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let draws: Vec<&Vec<f64>> =
            self.chains.iter().flat_map(|c| c.block("theta").map(|b| b.draws.iter()).into_iter().flatten()).collect();
        let p = self.variables.len();
        let n = draws.len() as f64;
        let mut mean = DVector::zeros(p);
        for d in &draws {
            mean += DVector::from_column_slice(d);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(p, p);
        for d in &draws {
            let x = DVector::from_column_slice(d) - &mean;
            cov += &x * x.transpose();
        }
        cov /= (n - 1.0).max(1.0);
        (mean, cov)
    }
}

/// `variable, median, q2.5, q97.5` (plus mean, sd, ESS and R-hat).
pub fn write_theta_summary<W: std::io::Write>(writer: W, fit: &FceFit) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "median", "q2.5", "q97.5", "mean", "sd", "ess", "rhat"])?;
    for s in fit.theta_summary() {
        w.write_record([
            s.label.clone(),
            format!("{:.6}", s.median),
            format!("{:.6}", s.lower),
            format!("{:.6}", s.upper),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.sd),
            format!("{:.1}", s.ess),
            format!("{:.4}", s.rhat),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<theta summary writer>", e))?;
    Ok(())
}

/// Full summary table: `block, dimension, mean, median, sd, q2.5, q97.5, ESS, R-hat`.
pub fn write_summary<W: std::io::Write>(writer: W, summary: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["block", "dimension", "mean", "median", "sd", "q2.5", "q97.5", "ess", "rhat"])?;
    for s in summary {
        w.write_record([
            s.block.clone(),
            s.label.clone(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.median),
            format!("{:.6}", s.sd),
            format!("{:.6}", s.lower),
            format!("{:.6}", s.upper),
            format!("{:.1}", s.ess),
            format!("{:.4}", s.rhat),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary writer>", e))?;
    Ok(())
}

/// Writes every stored draw of every block, one row per draw.
pub fn write_chains<W: std::io::Write>(writer: W, chains: &[PosteriorChain]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = chains.first() else { return Ok(()) };
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    for b in &first.blocks {
        header.extend(b.labels.iter().map(|l| if l == &b.name { l.clone() } else { format!("{}[{l}]", b.name) }));
    }
    w.write_record(&header)?;
    for c in chains {
        for k in 0..c.stored_draws() {
            let mut row = vec![c.chain.to_string(), k.to_string()];
            for b in &c.blocks {
                row.extend(b.draws[k].iter().map(|v| format!("{v:.8e}")));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<chain writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{simulate, SynthConfig, ThetaPath, TrendSpec};

    fn small_design(seed: u64) -> (ModelDesign, crate::synth::Truth) {
        let cfg = SynthConfig {
            n_trees: 12,
            n_stands: 3,
            n_years: 25,
            seed,
            theta: ThetaPath::Constant(vec![-0.3, 0.2]),
            trend: TrendSpec::NegExp { level_sd: 0.2, amplitude: 0.5, scale: 20.0 },
            n_knots: 6,
            ..SynthConfig::default()
        };
        let out = simulate(&cfg).unwrap();
        (out.design, out.truth)
    }

    #[test]
    fn alpha_conditional_is_precision_weighted_average() {
        let (design, _) = small_design(11);
        let cfg = FceConfig::default();
        let sweep = FceSweep::new(&design, &cfg);
        let mut rng = stream_rng(1, "t", 0);
        let mut state = sweep.initial_state(&mut rng);
        state.tree.phi = 0.0;
        state.tree.sigma2_pe = 0.3;
        state.tree.tau2 = 0.07;
        let theta = DVector::from_vec(vec![0.4, -0.1]);
        let mean = |j: usize, t: usize| design.climate[j][t].as_ref().map_or(0.0, |f| f.dot(&theta));
        let j = 1;
        let (lo, q, lin) = alpha_full_conditional(&design, &state.tree, j, &mean).unwrap();
        let post = q.solve(&lin).unwrap();
        for (k, m) in post.iter().enumerate() {
            let t = lo + k;
            // hand formula: (sum_i d_it / s2 + f'theta / tau2) / (n_t / s2 + 1 / tau2)
            let mut n_t = 0.0;
            let mut sum_d = 0.0;
            for (i, tree) in design.trees_in_stand(j) {
                if t >= tree.start && t < tree.end() {
                    let r = t - tree.start;
                    let fit = (tree.basis.row(r) * &state.tree.beta[i])[(0, 0)];
                    sum_d += tree.log_growth[r] - fit;
                    n_t += 1.0;
                }
            }
            let expect = (sum_d / 0.3 + mean(j, t) / 0.07) / (n_t / 0.3 + 1.0 / 0.07);
            assert!((m - expect).abs() < 1e-10, "t={t}: {m} vs {expect}");
        }
    }

    #[test]
    fn alpha_limits_in_tau2() {
        let (design, _) = small_design(12);
        let cfg = FceConfig::default();
        let sweep = FceSweep::new(&design, &cfg);
        let mut rng = stream_rng(2, "t", 0);
        let mut state = sweep.initial_state(&mut rng);
        state.tree.phi = 0.3;
        let theta = DVector::from_vec(vec![0.4, -0.1]);
        let mean = |j: usize, t: usize| design.climate[j][t].as_ref().map_or(0.0, |f| f.dot(&theta));
        state.tree.tau2 = 1e-12;
        let (lo, q, lin) = alpha_full_conditional(&design, &state.tree, 0, &mean).unwrap();
        for (k, v) in q.solve(&lin).unwrap().iter().enumerate() {
            assert!((v - mean(0, lo + k)).abs() < 1e-6);
        }
        // tau2 -> infinity: conditional no longer depends on the prior mean
        state.tree.tau2 = 1e12;
        let zero = |_: usize, _: usize| 0.0;
        let (_, q1, l1) = alpha_full_conditional(&design, &state.tree, 0, &mean).unwrap();
        let (_, q2, l2) = alpha_full_conditional(&design, &state.tree, 0, &zero).unwrap();
        let a = q1.solve(&l1).unwrap();
        let b = q2.solve(&l2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn theta_step_is_bayesian_regression() {
        // Monte Carlo check of the theta draw against its closed form.
        let mut rng = stream_rng(5, "theta", 0);
        let f = DMatrix::from_fn(40, 2, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
        let alpha = DVector::from_fn(40, |r, _| 0.3 * f[(r, 0)] - 0.2 * f[(r, 1)] + ((r % 5) as f64 - 2.0) * 0.05);
        let (prec, lin) = theta_full_conditional(&f, &alpha, 0.04, 10.0);
        let cov = prec.clone().try_inverse().unwrap();
        let mean = &cov * &lin;
        let n = 40_000;
        let mut m = DVector::zeros(2);
        let mut c = DMatrix::zeros(2, 2);
        let draws: Vec<DVector<f64>> = (0..n).map(|_| sample_from_precision(&prec, &lin, &mut rng).unwrap()).collect();
        for d in &draws {
            m += d;
        }
        m /= n as f64;
        for d in &draws {
            let x = d - &m;
            c += &x * x.transpose();
        }
        c /= n as f64;
        for k in 0..2 {
            assert!((m[k] - mean[k]).abs() < 4.0 * (cov[(k, k)] / n as f64).sqrt());
            assert!((c[(k, k)] / cov[(k, k)] - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn fixed_seed_reproduces_chain() {
        let (design, _) = small_design(13);
        let cfg = FceConfig {
            sampler: SamplerConfig { iterations: 260, burn_in: 20, seed: 9, ..Default::default() },
            ..Default::default()
        };
        let a = fit_fce(&design, &cfg).unwrap();
        let b = fit_fce(&design, &cfg).unwrap();
        assert_eq!(a.chains, b.chains);
        assert_eq!(a.chains[0].stored_draws(), 240);
    }

    #[test]
    fn single_flat_tree_runs() {
        let cfg = SynthConfig {
            n_trees: 1,
            n_stands: 1,
            n_years: 30,
            sigma2_pe: 0.0,
            tau2: 0.0,
            theta: ThetaPath::Constant(vec![0.0]),
            trend: TrendSpec::Flat,
            staggered: false,
            n_knots: 4,
            ..SynthConfig::default()
        };
        let out = simulate(&cfg).unwrap();
        assert!(out.rings[0].widths.iter().all(|w| (*w - 1.0).abs() < 1e-12));
        let fit = fit_fce(
            &out.design,
            &FceConfig {
                sampler: SamplerConfig { iterations: 400, burn_in: 100, ..Default::default() },
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fit.theta_summary().len(), 1);
        assert!(fit.theta_summary()[0].sd.is_finite());
    }

    #[test]
    fn rejects_bad_iterations() {
        let (design, _) = small_design(14);
        let cfg = FceConfig {
            sampler: SamplerConfig { iterations: 10, burn_in: 10, ..Default::default() },
            ..Default::default()
        };
        assert!(matches!(fit_fce(&design, &cfg), Err(Error::Config(_))));
    }
}
