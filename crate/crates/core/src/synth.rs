//! Forward simulation of the hierarchical growth model.
//!
//! Climate covariates are abstract standard-normal series (optionally
//! equicorrelated) for all 28 seasonal variables; the first `p` variables of
//! [`model_variable_order`] drive growth. Widths are `exp` of the simulated
//! log growth, so everything downstream sees the same data a field study
//! would provide.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{assemble, DesignOptions, ModelDesign};
use crate::error::{Error, Result};
use crate::ring_data::{RingSeries, StudyWindow};
use crate::sampler::{stream_rng, ChainRng};
use crate::water_balance::{seasonal_var_names, SeasonalClimate, Standardization, DEFAULT_SELECTED};

/// Default true climate effects, ordered as [`DEFAULT_SELECTED`].
pub const DEFAULT_THETA: [f64; 5] = [-0.3, -0.2, -0.25, -0.25, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaPath {
    Constant(Vec<f64>),
    /// `component` jumps from `base[component]` to `value` at year index `at`.
    Step {
        base: Vec<f64>,
        component: usize,
        at: usize,
        value: f64,
    },
    /// Linear change of `component` from `base[component]` at `start` to `value` at `end`.
    Ramp {
        base: Vec<f64>,
        component: usize,
        start: usize,
        end: usize,
        value: f64,
    },
}

impl ThetaPath {
    pub fn dim(&self) -> usize {
        match self {
            ThetaPath::Constant(b) | ThetaPath::Step { base: b, .. } | ThetaPath::Ramp { base: b, .. } => b.len(),
        }
    }

    /// Deterministic part of `theta_t` at year index `t`.
    pub fn at(&self, t: usize) -> Vec<f64> {
        match self {
            ThetaPath::Constant(b) => b.clone(),
            ThetaPath::Step { base, component, at, value } => {
                let mut v = base.clone();
                if t >= *at {
                    v[*component] = *value;
                }
                v
            }
            ThetaPath::Ramp { base, component, start, end, value } => {
                let mut v = base.clone();
                let from = base[*component];
                v[*component] = if t <= *start {
                    from
                } else if t >= *end {
                    *value
                } else {
                    from + (value - from) * (t - start) as f64 / (end - start) as f64
                };
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrendSpec {
    Flat,
    /// Per-tree level `N(0, level_sd^2)` plus `amplitude * exp(-age / scale)`.
    NegExp {
        level_sd: f64,
        amplitude: f64,
        scale: f64,
    },
}

/// Host trees' widths multiplied by `factor` in `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Defoliation {
    pub start: i32,
    pub end: i32,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_trees: usize,
    pub n_stands: usize,
    pub n_years: usize,
    pub start_year: i32,
    pub theta: ThetaPath,
    /// Standard deviations of the random-walk increments of `theta_t`.
    pub sigma_theta: Vec<f64>,
    pub sigma2_pe: f64,
    pub phi: f64,
    pub tau2: f64,
    pub trend: TrendSpec,
    pub staggered: bool,
    /// Equicorrelation of the 28 climate series within a stand-year.
    pub climate_correlation: f64,
    /// Species cycled within each stand.
    pub species: Vec<String>,
    pub defoliation: Option<Defoliation>,
    pub n_knots: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_trees: 200,
            n_stands: 20,
            n_years: 60,
            start_year: 1948,
            theta: ThetaPath::Constant(DEFAULT_THETA.to_vec()),
            sigma_theta: Vec::new(),
            sigma2_pe: 0.29,
            phi: 0.37,
            tau2: 0.05,
            trend: TrendSpec::NegExp { level_sd: 0.3, amplitude: 0.6, scale: 25.0 },
            staggered: true,
            climate_correlation: 0.0,
            species: vec!["POTR".into(), "PIBA".into(), "BEPA".into(), "PIGL".into()],
            defoliation: None,
            n_knots: 10,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.n_stands == 0 || self.n_years == 0 {
            return Err(Error::Config("synthetic counts must all be at least 1".into()));
        }
        if self.n_stands > self.n_trees {
            return Err(Error::Config(format!("{} stands need at least as many trees", self.n_stands)));
        }
        if self.phi.abs() >= 1.0 {
            return Err(Error::Config(format!("phi = {} must lie in (-1, 1)", self.phi)));
        }
        let p = self.theta.dim();
        if p == 0 || p > 28 {
            return Err(Error::Config(format!("theta has {p} components; 1 to 28 supported")));
        }
        if !self.sigma_theta.is_empty() && self.sigma_theta.len() != p {
            return Err(Error::Config("sigma_theta length must match theta".into()));
        }
        match &self.theta {
            ThetaPath::Step { component, at, .. } if *component >= p || *at > self.n_years => {
                return Err(Error::Config("step outside theta or years".into()))
            }
            ThetaPath::Ramp { component, start, end, .. } if *component >= p || start >= end => {
                return Err(Error::Config("ramp needs a valid component and start < end".into()))
            }
            _ => {}
        }
        if self.sigma2_pe < 0.0 || self.tau2 < 0.0 || self.sigma_theta.iter().any(|s| *s < 0.0) {
            return Err(Error::Config("variances must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.climate_correlation) {
            return Err(Error::Config("climate_correlation must lie in [0, 1)".into()));
        }
        if self.species.is_empty() {
            return Err(Error::Config("at least one species is required".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> StudyWindow {
        StudyWindow { start_year: self.start_year, end_year: self.start_year + self.n_years as i32 - 1 }
    }
}

/// The default five variables first, then the remaining seasonal variables.
pub fn model_variable_order() -> Vec<String> {
    let mut out: Vec<String> = DEFAULT_SELECTED.iter().map(|s| s.to_string()).collect();
    for v in seasonal_var_names() {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Every latent quantity behind a simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub variables: Vec<String>,
    pub start_year: i32,
    pub stands: Vec<String>,
    pub tree_ids: Vec<String>,
    /// `theta[t]`.
    pub theta: Vec<Vec<f64>>,
    /// `alpha[j][t]` for every stand-year, observed or not.
    pub alpha: Vec<Vec<f64>>,
    /// Stand-level noise `v[j][t]`.
    pub v: Vec<Vec<f64>>,
    /// AR(1) errors per tree over its observed years.
    pub epsilon: Vec<Vec<f64>>,
    /// AR(1) innovations per tree (first term scaled to the innovation variance).
    pub innovations: Vec<Vec<f64>>,
    /// Age trend per tree over its observed years.
    pub trend: Vec<Vec<f64>>,
    pub sigma2_pe: f64,
    pub phi: f64,
    pub tau2: f64,
    pub sigma_theta: Vec<f64>,
}

impl Truth {
    /// Empirical tree-level to stand-level variance ratio:
    /// variance of the AR(1) innovations over variance of `v`.
    pub fn variance_ratio(&self) -> f64 {
        let tree: Vec<f64> = self.innovations.iter().flatten().copied().collect();
        let stand: Vec<f64> = self.v.iter().flatten().copied().collect();
        crate::sampler::variance(&tree) / crate::sampler::variance(&stand)
    }
}

pub fn write_truth<W: std::io::Write>(writer: W, truth: &Truth) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["quantity", "stand_id", "component", "year", "value"])?;
    for (name, v) in [("sigma2_pe", truth.sigma2_pe), ("phi", truth.phi), ("tau2", truth.tau2)] {
        w.write_record([name, "", "", "", &format!("{v:.10}")])?;
    }
    for (k, s) in truth.sigma_theta.iter().enumerate() {
        w.write_record(["sigma_theta", "", &truth.variables[k], "", &format!("{s:.10}")])?;
    }
    for (t, row) in truth.theta.iter().enumerate() {
        let year = (truth.start_year + t as i32).to_string();
        for (k, v) in row.iter().enumerate() {
            w.write_record(["theta", "", &truth.variables[k], &year, &format!("{v:.10}")])?;
        }
    }
    for (j, row) in truth.alpha.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            let year = (truth.start_year + t as i32).to_string();
            w.write_record(["alpha", &truth.stands[j], "", &year, &format!("{v:.10}")])?;
        }
    }
    w.flush().map_err(|e| Error::io("<truth writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub rings: Vec<RingSeries>,
    /// All 28 seasonal variables, already on the z scale.
    pub seasonal: SeasonalClimate,
    /// Design over the model variables, built from `rings` and `seasonal`.
    pub design: ModelDesign,
    pub truth: Truth,
}

fn normal(rng: &mut ChainRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulates one data set from the model.
pub fn simulate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, "synth", 0);
    let n_years = config.n_years;
    let p = config.theta.dim();
    let order = model_variable_order();
    let model_vars: Vec<String> = order[..p].to_vec();
    let all_vars = seasonal_var_names();
    let stands: Vec<String> = (0..config.n_stands).map(|j| format!("S{:03}", j + 1)).collect();

    // climate: independent across stand-years, equicorrelated across variables
    let rho = config.climate_correlation;
    let mut seasonal = SeasonalClimate::new(all_vars.clone());
    let mut f_model: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n_years]; config.n_stands];
    for (j, s) in stands.iter().enumerate() {
        for t in 0..n_years {
            let common = normal(&mut rng);
            let z: Vec<f64> =
                (0..all_vars.len()).map(|_| rho.sqrt() * common + (1.0 - rho).sqrt() * normal(&mut rng)).collect();
            f_model[j][t] = model_vars.iter().map(|v| z[all_vars.iter().position(|a| a == v).unwrap()]).collect();
            let row: Vec<Option<f64>> = z.into_iter().map(Some).collect();
            let year = config.start_year + t as i32;
            seasonal.raw.insert((s.clone(), year), row.clone());
            seasonal.standardized.insert((s.clone(), year), row);
        }
    }
    seasonal.transforms = vec![Some(Standardization { mean: 0.0, sd: 1.0 }); all_vars.len()];

    // theta path with optional random-walk noise
    let mut theta = Vec::with_capacity(n_years);
    let mut drift = vec![0.0; p];
    for t in 0..n_years {
        if t > 0 {
            for (d, s) in drift.iter_mut().zip(&config.sigma_theta) {
                *d += s * normal(&mut rng);
            }
        }
        let base = config.theta.at(t);
        theta.push(base.iter().zip(&drift).map(|(b, d)| b + d).collect::<Vec<f64>>());
    }

    let tau = config.tau2.sqrt();
    let mut v = vec![vec![0.0; n_years]; config.n_stands];
    let mut alpha = vec![vec![0.0; n_years]; config.n_stands];
    for j in 0..config.n_stands {
        for t in 0..n_years {
            v[j][t] = tau * normal(&mut rng);
            let mean: f64 = f_model[j][t].iter().zip(&theta[t]).map(|(f, th)| f * th).sum();
            alpha[j][t] = mean + v[j][t];
        }
    }

    let sd = config.sigma2_pe.sqrt();
    let phi = config.phi;
    let max_delay = if config.staggered { n_years / 3 } else { 0 };
    let mut rings = Vec::with_capacity(config.n_trees);
    let mut epsilon = Vec::with_capacity(config.n_trees);
    let mut innovations = Vec::with_capacity(config.n_trees);
    let mut trends = Vec::with_capacity(config.n_trees);
    let mut tree_ids = Vec::with_capacity(config.n_trees);
    for i in 0..config.n_trees {
        let j = i % config.n_stands;
        let species = &config.species[(i / config.n_stands) % config.species.len()];
        let start = if max_delay > 0 { rng.random_range(0..=max_delay) } else { 0 };
        let first_year = config.start_year + start as i32;
        let age0: i32 = rng.random_range(1..=40);
        let recruitment_year = first_year - age0;
        let level = match config.trend {
            TrendSpec::Flat => 0.0,
            TrendSpec::NegExp { level_sd, .. } => level_sd * normal(&mut rng),
        };
        let m = n_years - start;
        let mut e = Vec::with_capacity(m);
        let mut u = Vec::with_capacity(m);
        let first = sd * normal(&mut rng);
        u.push(first);
        e.push(first / (1.0 - phi * phi).sqrt());
        for k in 1..m {
            let z = sd * normal(&mut rng);
            u.push(z);
            e.push(phi * e[k - 1] + z);
        }
        let mut trend = Vec::with_capacity(m);
        let mut widths = Vec::with_capacity(m);
        for k in 0..m {
            let t = start + k;
            let year = first_year + k as i32;
            let age = (year - recruitment_year) as f64;
            let tr = match config.trend {
                TrendSpec::Flat => 0.0,
                TrendSpec::NegExp { amplitude, scale, .. } => level + amplitude * (-age / scale).exp(),
            };
            trend.push(tr);
            let mut w = (tr + alpha[j][t] + e[k]).exp();
            if let Some(d) = config.defoliation {
                if crate::ring_data::FTC_HOSTS.contains(&species.as_str()) && year >= d.start && year <= d.end {
                    w *= d.factor;
                }
            }
            widths.push(w);
        }
        let tree_id = format!("T{:04}", i + 1);
        tree_ids.push(tree_id.clone());
        rings.push(RingSeries::new(
            tree_id,
            stands[j].clone(),
            "P1",
            species.clone(),
            recruitment_year,
            first_year,
            widths,
        )?);
        epsilon.push(e);
        innovations.push(u);
        trends.push(trend);
    }

    let options = DesignOptions { n_knots: config.n_knots, ..Default::default() };
    let design = assemble(&rings, &seasonal, &model_vars, config.window(), &options)?;
    let truth = Truth {
        variables: model_vars,
        start_year: config.start_year,
        stands,
        tree_ids,
        theta,
        alpha,
        v,
        epsilon,
        innovations,
        trend: trends,
        sigma2_pe: config.sigma2_pe,
        phi,
        tau2: config.tau2,
        sigma_theta: if config.sigma_theta.is_empty() { vec![0.0; p] } else { config.sigma_theta.clone() },
    };
    Ok(SynthOutput { rings, seasonal, design, truth })
}

/// Per-stand mean of the simulated `alpha` over observed cells, for quick checks.
pub fn observed_alpha(design: &ModelDesign, truth: &Truth) -> BTreeMap<(usize, usize), f64> {
    design.observed_cells().into_iter().map(|(j, t)| ((j, t), truth.alpha[j][t])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_chain_gives_unit_widths() {
        let cfg = SynthConfig {
            n_trees: 6,
            n_stands: 2,
            n_years: 20,
            sigma2_pe: 0.0,
            tau2: 0.0,
            theta: ThetaPath::Constant(vec![0.0; 5]),
            trend: TrendSpec::Flat,
            n_knots: 4,
            ..Default::default()
        };
        let out = simulate(&cfg).unwrap();
        for r in &out.rings {
            assert!(r.widths.iter().all(|w| *w == 1.0));
        }
    }

    #[test]
    fn staggered_counts_never_decrease() {
        let out = simulate(&SynthConfig { n_trees: 60, n_stands: 6, n_years: 40, ..Default::default() }).unwrap();
        let counts: Vec<usize> =
            (0..40).map(|t| out.design.trees.iter().filter(|tr| tr.start <= t && t < tr.end()).count()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert!(counts[0] < counts[39]);
    }

    #[test]
    fn design_reproduces_log_widths() {
        let out = simulate(&SynthConfig { n_trees: 20, n_stands: 4, n_years: 30, ..Default::default() }).unwrap();
        let d = &out.design;
        for (i, tree) in d.trees.iter().enumerate() {
            for (k, y) in tree.log_growth.iter().enumerate() {
                let t = tree.start + k;
                let expect = out.truth.trend[i][k] + out.truth.alpha[tree.stand][t] + out.truth.epsilon[i][k];
                assert!((y - expect).abs() < 1e-12);
            }
        }
        for (j, row) in d.climate.iter().enumerate() {
            for (t, f) in row.iter().enumerate() {
                if let Some(f) = f {
                    let m: f64 = f.iter().zip(&out.truth.theta[t]).map(|(a, b)| a * b).sum();
                    assert!((out.truth.alpha[j][t] - out.truth.v[j][t] - m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ar1_moments_over_replicates() {
        let (phi, s2) = (0.37, 0.29);
        let target_var = s2 / (1.0 - phi * phi);
        let mut vars = Vec::new();
        let mut lags = Vec::new();
        for r in 0..200 {
            let out = simulate(&SynthConfig {
                n_trees: 20,
                n_stands: 4,
                n_years: 60,
                staggered: false,
                seed: 1000 + r,
                n_knots: 4,
                ..Default::default()
            })
            .unwrap();
            let all: Vec<f64> = out.truth.epsilon.iter().flatten().copied().collect();
            vars.push(all.iter().map(|e| e * e).sum::<f64>() / all.len() as f64);
            let mut num = 0.0;
            let mut den = 0.0;
            for e in &out.truth.epsilon {
                for w in e.windows(2) {
                    num += w[0] * w[1];
                    den += w[0] * w[0];
                }
            }
            lags.push(num / den);
        }
        let check = |xs: &[f64], target: f64| {
            let m = crate::sampler::mean(xs);
            let se = (crate::sampler::variance(xs) / xs.len() as f64).sqrt();
            assert!((m - target).abs() < 3.0 * se + 0.01 * target.abs(), "{m} vs {target} (se {se})");
        };
        check(&vars, target_var);
        check(&lags, phi);
    }

    #[test]
    fn step_and_ramp_paths() {
        let s = ThetaPath::Step { base: vec![-0.3, 0.1], component: 0, at: 5, value: -0.6 };
        assert_eq!(s.at(4), vec![-0.3, 0.1]);
        assert_eq!(s.at(5), vec![-0.6, 0.1]);
        let r = ThetaPath::Ramp { base: vec![0.0], component: 0, start: 0, end: 10, value: 1.0 };
        assert!((r.at(5)[0] - 0.5).abs() < 1e-15);
        assert_eq!(r.at(20)[0], 1.0);
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(simulate(&SynthConfig { phi: 1.0, ..Default::default() }).is_err());
        assert!(simulate(&SynthConfig { n_trees: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig { n_trees: 10, n_stands: 2, n_years: 15, n_knots: 4, ..Default::default() };
        assert_eq!(simulate(&cfg).unwrap().rings, simulate(&cfg).unwrap().rings);
    }
}
