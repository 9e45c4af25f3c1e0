//! Variable-climate-effects model.
//!
//! The stand level becomes a dynamic linear model: `alpha_jt = f_jt' theta_t + v_jt`
//! with `theta_t = theta_{t-1} + w_t`, `w_t ~ N(0, Sigma_theta)`. Within each
//! Gibbs sweep the state path is drawn by forward filtering, backward
//! sampling given the current stand effects. The tree level is shared with
//! [`crate::fce`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::fce::{
    check_divergence, initial_tree_state, push_scalars, scalar_blocks, stream_for, update_alpha, update_beta,
    update_tree_variances, Accumulated, CellRows, Fixed, Priors, SamplerConfig, SplinePrior, TreeLevelState,
};
use crate::linalg::{sample_mvn, spd_inverse, symmetrize};
use crate::sampler::{quantile_sorted, stream_rng, ChainRng, InvGamma, PhiSampler, PosteriorChain, Summary};

/// Which observation rows inform each state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    /// `rows[t]`: indices into the observed-cell list used to update `theta_t`.
    pub rows: Vec<Vec<usize>>,
    pub half_width: usize,
}

impl WindowPlan {
    /// Each cell `(j, s)` informs every `theta_t` with `|s - t| <= half_width`.
    /// A half-width of zero uses every row exactly once.
    pub fn new(cells: &[(usize, usize)], n_years: usize, half_width: usize) -> Self {
        let mut rows = vec![Vec::new(); n_years];
        for (r, &(_, s)) in cells.iter().enumerate() {
            let lo = s.saturating_sub(half_width);
            let hi = (s + half_width).min(n_years - 1);
            for row in rows.iter_mut().take(hi + 1).skip(lo) {
                row.push(r);
            }
        }
        WindowPlan { rows, half_width }
    }

    pub fn strict(cells: &[(usize, usize)], n_years: usize) -> Self {
        Self::new(cells, n_years, 0)
    }

    pub fn n_years(&self) -> usize {
        self.rows.len()
    }
}

/// Gaussian prior on the state before the first year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl StatePrior {
    /// `N(0, variance * I)`.
    pub fn diffuse(p: usize, variance: f64) -> Self {
        StatePrior { mean: DVector::zeros(p), cov: DMatrix::identity(p, p) * variance }
    }

    /// `N(mean, inflation * cov)` from a fixed-effects fit.
    pub fn from_fce(mean: DVector<f64>, cov: &DMatrix<f64>, inflation: f64) -> Self {
        StatePrior { mean, cov: symmetrize(cov) * inflation }
    }
}

/// Filtered moments. Index 0 holds the prior; indices `1..=T` the years.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub m: Vec<DVector<f64>>,
    pub c: Vec<DMatrix<f64>>,
    /// One-step predicted moments (`a[0]`, `r[0]` unused).
    pub a: Vec<DVector<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub r_inv: Vec<DMatrix<f64>>,
    /// Number of jitter corrections applied.
    pub jitters: usize,
}

impl Filtered {
    pub fn n_years(&self) -> usize {
        self.m.len() - 1
    }
}

/// Smoothed marginals, same indexing as [`Filtered`].
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub s: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

fn inverse_with_jitter(m: &DMatrix<f64>, what: &str, jitters: &mut usize) -> Result<DMatrix<f64>> {
    let m = symmetrize(m);
    if let Ok(inv) = spd_inverse(&m) {
        return Ok(inv);
    }
    let n = m.nrows();
    let scale = (m.trace() / n as f64).abs().max(1e-300);
    let mut eps = 1e-12 * scale;
    for _ in 0..8 {
        *jitters += 1;
        log::warn!("{what}: lost positive definiteness, adding jitter {eps:e}");
        if let Ok(inv) = spd_inverse(&(&m + DMatrix::identity(n, n) * eps)) {
            return Ok(inv);
        }
        eps *= 100.0;
    }
    Err(Error::NotPositiveDefinite(what.to_string()))
}

/// Forward filter for `alpha_cell = f_cell' theta_t + N(0, tau2)` with the
/// rows of year `t` given by `plan`.
pub fn kalman_filter(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    plan: &WindowPlan,
    w: &DMatrix<f64>,
    tau2: f64,
    prior: &StatePrior,
) -> Result<Filtered> {
    let gram = year_grams(f, plan);
    kalman_filter_with(y, f, plan, &gram, w, tau2, prior)
}

/// `F_t' F_t` for every year; constant across sweeps.
pub fn year_grams(f: &DMatrix<f64>, plan: &WindowPlan) -> Vec<DMatrix<f64>> {
    let p = f.ncols();
    plan.rows
        .iter()
        .map(|rows| {
            let mut g = DMatrix::zeros(p, p);
            for &r in rows {
                let row = f.row(r);
                g += row.transpose() * row;
            }
            g
        })
        .collect()
}

fn kalman_filter_with(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    plan: &WindowPlan,
    gram: &[DMatrix<f64>],
    w: &DMatrix<f64>,
    tau2: f64,
    prior: &StatePrior,
) -> Result<Filtered> {
    let n = plan.n_years();
    let p = f.ncols();
    let mut out = Filtered {
        m: Vec::with_capacity(n + 1),
        c: Vec::with_capacity(n + 1),
        a: Vec::with_capacity(n + 1),
        r: Vec::with_capacity(n + 1),
        r_inv: Vec::with_capacity(n + 1),
        jitters: 0,
    };
    out.m.push(prior.mean.clone());
    out.c.push(symmetrize(&prior.cov));
    out.a.push(prior.mean.clone());
    out.r.push(prior.cov.clone());
    out.r_inv.push(DMatrix::zeros(p, p));
    for t in 0..n {
        let a = out.m[t].clone();
        let r = symmetrize(&(&out.c[t] + w));
        let r_inv = inverse_with_jitter(&r, "predicted state covariance", &mut out.jitters)?;
        let (m, c) = if plan.rows[t].is_empty() {
            (a.clone(), r.clone())
        } else {
            let mut fy = DVector::zeros(p);
            for &row in &plan.rows[t] {
                fy += f.row(row).transpose() * y[row];
            }
            let prec = &r_inv + &gram[t] / tau2;
            let c = inverse_with_jitter(&prec, "filtered state precision", &mut out.jitters)?;
            let m = &c * (&r_inv * &a + fy / tau2);
            (m, c)
        };
        out.a.push(a);
        out.r.push(r);
        out.r_inv.push(r_inv);
        out.m.push(m);
        out.c.push(c);
    }
    Ok(out)
}

/// Rauch-Tung-Striebel smoother over the filtered moments.
pub fn rts_smoother(filtered: &Filtered) -> Smoothed {
    let n = filtered.n_years();
    let mut s = filtered.m.clone();
    let mut cov = filtered.c.clone();
    for t in (0..n).rev() {
        let j = &filtered.c[t] * &filtered.r_inv[t + 1];
        s[t] = &filtered.m[t] + &j * (&s[t + 1] - &filtered.a[t + 1]);
        cov[t] = symmetrize(&(&filtered.c[t] + &j * (&cov[t + 1] - &filtered.r[t + 1]) * j.transpose()));
    }
    Smoothed { s, cov }
}

/// Backward sampling: returns `theta_0, theta_1, ..., theta_T`.
pub fn ffbs<R: Rng + ?Sized>(filtered: &Filtered, rng: &mut R) -> Vec<DVector<f64>> {
    let n = filtered.n_years();
    let mut path = vec![DVector::zeros(0); n + 1];
    path[n] = sample_mvn(&filtered.m[n], &filtered.c[n], rng);
    for t in (0..n).rev() {
        let j = &filtered.c[t] * &filtered.r_inv[t + 1];
        let h = &filtered.m[t] + &j * (&path[t + 1] - &filtered.a[t + 1]);
        let hc = &filtered.c[t] - &j * &filtered.r[t + 1] * j.transpose();
        path[t] = sample_mvn(&h, &hc, rng);
    }
    path
}

/// Prior on the random-walk covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateNoisePrior {
    /// Independent inverse-gamma priors on the diagonal.
    Diagonal(InvGamma),
    /// Inverse-Wishart with `df` degrees of freedom and scale `scale * I`.
    InverseWishart { df: f64, scale: f64 },
}

impl Default for StateNoisePrior {
    fn default() -> Self {
        StateNoisePrior::Diagonal(InvGamma::default())
    }
}

/// Inverse-Wishart draw via the Bartlett decomposition of its inverse.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(df: f64, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if df <= (p as f64) - 1.0 {
        return Err(Error::Config(format!("inverse-Wishart needs df > {} (got {df})", p - 1)));
    }
    let l =
        spd_inverse(scale)?.cholesky().ok_or_else(|| Error::NotPositiveDefinite("inverse-Wishart scale".into()))?.l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::Config(e.to_string()))?;
        a[(i, i)] = rng.sample::<f64, _>(chi).sqrt();
        for k in 0..i {
            a[(i, k)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    spd_inverse(&(&la * la.transpose()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VceConfig {
    pub sampler: SamplerConfig,
    pub priors: Priors,
    pub state_noise: StateNoisePrior,
    pub fixed: Fixed,
    /// Holds the random-walk covariance diagonal fixed.
    pub fixed_sigma_theta: Option<Vec<f64>>,
    /// Window half-width; 0 is the exact single-use mode.
    pub half_width: usize,
    /// Prior on the initial state; `None` means `N(0, 100 I)`.
    pub theta0: Option<StatePrior>,
    /// Starting value of the random-walk variances.
    pub initial_sigma_theta: f64,
}

impl Default for VceConfig {
    fn default() -> Self {
        VceConfig {
            sampler: SamplerConfig::default(),
            priors: Priors::default(),
            state_noise: StateNoisePrior::default(),
            fixed: Fixed::default(),
            fixed_sigma_theta: None,
            half_width: 0,
            theta0: None,
            initial_sigma_theta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VceState {
    pub tree: TreeLevelState,
    /// `theta[0]` is the initial state; `theta[t + 1]` belongs to year index `t`.
    pub theta: Vec<DVector<f64>>,
    pub sigma_theta: DMatrix<f64>,
}

pub struct VceSweep<'a> {
    pub design: &'a ModelDesign,
    pub rows: CellRows,
    pub plan: WindowPlan,
    pub gram: Vec<DMatrix<f64>>,
    pub spline: SplinePrior,
    pub prior0: StatePrior,
    pub config: &'a VceConfig,
}

impl<'a> VceSweep<'a> {
    pub fn new(design: &'a ModelDesign, config: &'a VceConfig) -> Result<Self> {
        let rows = CellRows::new(design);
        let plan = WindowPlan::new(&rows.cells, design.n_years(), config.half_width);
        let gram = year_grams(&rows.f, &plan);
        let p = design.n_vars();
        let prior0 = config.theta0.clone().unwrap_or_else(|| StatePrior::diffuse(p, 100.0));
        if prior0.mean.len() != p || prior0.cov.shape() != (p, p) {
            return Err(Error::Config(format!("initial-state prior must have dimension {p}")));
        }
        Ok(VceSweep {
            design,
            spline: SplinePrior::new(design, config.priors.beta_null_sd),
            rows,
            plan,
            gram,
            prior0,
            config,
        })
    }

    pub fn initial_state(&self, rng: &mut ChainRng) -> VceState {
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
        let start: DVector<f64> =
            &self.prior0.mean + DVector::from_fn(p, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let sigma_theta = match &self.config.fixed_sigma_theta {
            Some(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            None => DMatrix::identity(p, p) * self.config.initial_sigma_theta,
        };
        VceState { tree, theta: vec![start; self.design.n_years() + 1], sigma_theta }
    }

    fn stand_mean(&self, theta: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.cells.len(),
            self.rows.cells.iter().enumerate().map(|(r, &(_, t))| (self.rows.f.row(r) * &theta[t + 1])[(0, 0)]),
        )
    }

    pub fn sweep(&self, state: &mut VceState, phi_sampler: &mut PhiSampler, rng: &mut ChainRng) -> Result<()> {
        let design = self.design;
        let priors = &self.config.priors;
        let fixed = &self.config.fixed;
        update_beta(design, &mut state.tree, &self.spline, rng)?;
        let theta = state.theta.clone();
        let mean = |j: usize, t: usize| match &design.climate[j][t] {
            Some(f) => f.dot(&theta[t + 1]),
            None => 0.0,
        };
        update_alpha(design, &mut state.tree, &mean, rng)?;

        let alpha = self.rows.alpha(&state.tree);
        let filtered = kalman_filter_with(
            &alpha,
            &self.rows.f,
            &self.plan,
            &self.gram,
            &state.sigma_theta,
            state.tree.tau2,
            &self.prior0,
        )?;
        state.theta = ffbs(&filtered, rng);

        match fixed.tau2 {
            Some(v) => state.tree.tau2 = v,
            None => {
                let ss = (&alpha - self.stand_mean(&state.theta)).norm_squared();
                state.tree.tau2 = priors.tau2.posterior(alpha.len() as f64, ss).sample(rng)?;
            }
        }
        self.update_sigma_theta(state, rng)?;
        update_tree_variances(design, &mut state.tree, &self.spline, priors, fixed, phi_sampler, rng)?;
        check_divergence(&state.tree, self.config.sampler.divergence_limit)?;
        if state.sigma_theta.iter().any(|v| !v.is_finite() || v.abs() > self.config.sampler.divergence_limit) {
            return Err(Error::Divergence("random-walk covariance".into()));
        }
        Ok(())
    }

    fn update_sigma_theta(&self, state: &mut VceState, rng: &mut ChainRng) -> Result<()> {
        if let Some(d) = &self.config.fixed_sigma_theta {
            state.sigma_theta = DMatrix::from_diagonal(&DVector::from_column_slice(d));
            return Ok(());
        }
        let p = self.design.n_vars();
        let n = self.design.n_years();
        match &self.config.state_noise {
            StateNoisePrior::Diagonal(ig) => {
                for k in 0..p {
                    let ss: f64 = (1..=n).map(|t| (state.theta[t][k] - state.theta[t - 1][k]).powi(2)).sum();
                    state.sigma_theta[(k, k)] = ig.posterior(n as f64, ss).sample(rng)?;
                }
            }
            StateNoisePrior::InverseWishart { df, scale } => {
                let mut s = DMatrix::identity(p, p) * *scale;
                for t in 1..=n {
                    let d = &state.theta[t] - &state.theta[t - 1];
                    s += &d * d.transpose();
                }
                state.sigma_theta = sample_inverse_wishart(df + n as f64, &s, rng)?;
            }
        }
        Ok(())
    }

    pub fn log_joint(&self, state: &VceState) -> f64 {
        let mean = self.stand_mean(&state.theta);
        crate::fce::log_joint(self.design, &self.rows, &state.tree, &self.spline, &self.config.priors, &mean)
    }
}

fn theta_labels(design: &ModelDesign) -> Vec<String> {
    let mut out = Vec::with_capacity(design.n_years() * design.n_vars());
    for t in 0..design.n_years() {
        for v in &design.variables {
            out.push(format!("{v}@{}", design.year(t)));
        }
    }
    out
}

fn run_chain(
    design: &ModelDesign,
    config: &VceConfig,
    chain_index: usize,
) -> Result<(PosteriorChain, Accumulated, f64)> {
    let sc = &config.sampler;
    let sweep = VceSweep::new(design, config)?;
    let mut rng = stream_rng(sc.seed, "vce", chain_index as u64);
    let mut state = sweep.initial_state(&mut rng);
    let mut phi_sampler = PhiSampler::default();
    let mut chain = PosteriorChain::new(sc.iterations, sc.burn_in, sc.thin, sc.seed, chain_index);
    chain.add_block("theta_t", theta_labels(design));
    chain.add_block("theta0", design.variables.clone());
    chain.add_block("sigma_theta", design.variables.clone());
    scalar_blocks(&mut chain);
    let mut acc = Accumulated::new(design);
    let mut stream = stream_for(sc, chain_index);
    for it in 0..sc.iterations {
        sweep.sweep(&mut state, &mut phi_sampler, &mut rng)?;
        if it < sc.burn_in && it % 50 == 49 {
            phi_sampler.adapt();
        }
        if chain.keeps(it) {
            chain.push("theta_t", state.theta[1..].iter().flat_map(|v| v.iter().copied()).collect());
            chain.push("theta0", state.theta[0].iter().copied().collect());
            chain.push("sigma_theta", state.sigma_theta.diagonal().iter().copied().collect());
            push_scalars(&mut chain, &state.tree, sweep.log_joint(&state));
            acc.add(&state.tree);
            if let Some(s) = stream.as_mut() {
                s.record(it, &chain, &["sigma_theta", "sigma2_pe", "phi", "tau2", "sigma2_beta"])?;
            }
        }
    }
    if let Some(s) = stream.as_mut() {
        s.flush()?;
    }
    Ok((chain, acc, phi_sampler.acceptance_rate()))
}

/// Per-year posterior summary of one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearEffect {
    pub year: i32,
    pub variable: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Fit of the window's stand effects at the posterior mean; `None` when undefined.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VceFit {
    pub chains: Vec<PosteriorChain>,
    pub variables: Vec<String>,
    pub years: Vec<i32>,
    pub alpha_mean: Vec<Vec<f64>>,
    pub beta_mean: Vec<DVector<f64>>,
    /// `theta_mean[t][k]`.
    pub theta_mean: Vec<Vec<f64>>,
    pub trajectory: Vec<YearEffect>,
    pub summary: Vec<Summary>,
    pub phi_acceptance: f64,
}

impl VceFit {
    pub fn scalar(&self, name: &str) -> Option<&Summary> {
        self.summary.iter().find(|s| s.block == name)
    }

    pub fn effect(&self, variable: &str, year: i32) -> Option<&YearEffect> {
        self.trajectory.iter().find(|e| e.variable == variable && e.year == year)
    }
}

pub fn fit_vce(design: &ModelDesign, config: &VceConfig) -> Result<VceFit> {
    config.sampler.validate()?;
    if let Some(d) = &config.fixed_sigma_theta {
        if d.len() != design.n_vars() {
            return Err(Error::Config("fixed_sigma_theta length must match the variables".into()));
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

    let p = design.n_vars();
    let n = design.n_years();
    let alpha_mean = acc.alpha_mean(design);
    let tail = (1.0 - config.sampler.ci_level) / 2.0;
    let mut theta_mean = vec![vec![0.0; p]; n];
    let mut bounds = vec![vec![(0.0, 0.0); p]; n];
    for t in 0..n {
        for k in 0..p {
            let col = t * p + k;
            let mut draws: Vec<f64> =
                chains.iter().flat_map(|c| c.block("theta_t").map(|b| b.column(col)).unwrap_or_default()).collect();
            theta_mean[t][k] = crate::sampler::mean(&draws);
            draws.sort_by(f64::total_cmp);
            bounds[t][k] = (quantile_sorted(&draws, tail), quantile_sorted(&draws, 1.0 - tail));
        }
    }
    let rows = CellRows::new(design);
    let alpha_cells: Vec<f64> = rows.cells.iter().map(|&(j, t)| alpha_mean[j][t]).collect();
    let mut trajectory = Vec::with_capacity(n * p);
    for t in 0..n {
        let theta_t = DVector::from_column_slice(&theta_mean[t]);
        let r2 = crate::classify::annual_r2(&rows.cells, &alpha_cells, &rows.f, &theta_t, t, config.half_width.max(2));
        for k in 0..p {
            trajectory.push(YearEffect {
                year: design.year(t),
                variable: design.variables[k].clone(),
                mean: theta_mean[t][k],
                lower: bounds[t][k].0,
                upper: bounds[t][k].1,
                r2,
            });
        }
    }
    Ok(VceFit {
        variables: design.variables.clone(),
        years: (0..n).map(|t| design.year(t)).collect(),
        alpha_mean,
        beta_mean: acc.beta_mean(),
        theta_mean,
        trajectory,
        summary,
        phi_acceptance: acceptance / chains.len() as f64,
        chains,
    })
}

/// `year, variable, post_mean, q2.5, q97.5, r2_annual`.
pub fn write_trajectory<W: std::io::Write>(writer: W, fit: &VceFit) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["year", "variable", "post_mean", "q2.5", "q97.5", "r2_annual"])?;
    for e in &fit.trajectory {
        w.write_record([
            e.year.to_string(),
            e.variable.clone(),
            format!("{:.6}", e.mean),
            format!("{:.6}", e.lower),
            format!("{:.6}", e.upper),
            e.r2.map_or_else(|| "NA".to_string(), |r| format!("{r:.6}")),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trajectory writer>", e))?;
    Ok(())
}

/// Reads the table written by [`write_trajectory`].
pub fn read_trajectory<R: std::io::Read>(reader: R) -> Result<Vec<YearEffect>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                Error::Data(format!("trajectory row {:?}: bad column {k}", rec.position().map(|p| p.line())))
            })
        };
        out.push(YearEffect {
            year: num(0)? as i32,
            variable: rec.get(1).unwrap_or_default().to_string(),
            mean: num(2)?,
            lower: num(3)?,
            upper: num(4)?,
            r2: rec.get(5).and_then(|s| s.trim().parse().ok()),
        });
    }
    Ok(out)
}

/// Dense mean and covariance of `(theta_0, ..., theta_T)` given the rows,
/// by direct Gaussian conditioning. Cost is cubic in `T p`; for checks only.
pub fn dense_posterior(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    plan: &WindowPlan,
    w: &DMatrix<f64>,
    tau2: f64,
    prior: &StatePrior,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = plan.n_years();
    let p = f.ncols();
    let dim = (n + 1) * p;
    let mut mean = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    for s in 0..=n {
        mean.rows_mut(s * p, p).copy_from(&prior.mean);
        for t in 0..=n {
            let block = &prior.cov + w * (s.min(t) as f64);
            cov.view_mut((s * p, t * p), (p, p)).copy_from(&block);
        }
    }
    let pairs: Vec<(usize, usize)> =
        plan.rows.iter().enumerate().flat_map(|(t, rows)| rows.iter().map(move |&r| (t, r))).collect();
    let m = pairs.len();
    let mut h = DMatrix::zeros(m, dim);
    let mut obs = DVector::zeros(m);
    for (i, &(t, r)) in pairs.iter().enumerate() {
        h.view_mut((i, (t + 1) * p), (1, p)).copy_from(&f.row(r));
        obs[i] = y[r];
    }
    let s = &h * &cov * h.transpose() + DMatrix::identity(m, m) * tau2;
    let s_inv = spd_inverse(&s)?;
    let gain = &cov * h.transpose() * s_inv;
    let post_mean = &mean + &gain * (obs - &h * &mean);
    let post_cov = symmetrize(&(&cov - &gain * &h * &cov));
    Ok((post_mean, post_cov))
}
