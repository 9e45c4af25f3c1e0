//! Shared MCMC machinery: seeded streams, conjugate draws, the AR(1)
//! coefficient update, chain storage and convergence diagnostics.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ar1::Ar1Stats;
use crate::error::{Error, Result};

pub type ChainRng = ChaCha8Rng;

/// FNV-1a, used to turn stream labels into stable stream ids.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `(seed, label, index)`.
pub fn stream_rng(seed: u64, label: &str, index: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label) ^ index.rotate_left(32));
    rng
}

/// Inverse-gamma prior or full conditional with shape/rate parameterisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub rate: f64,
}

impl Default for InvGamma {
    fn default() -> Self {
        InvGamma { shape: 0.01, rate: 0.01 }
    }
}

impl InvGamma {
    /// Conjugate update with `n` Gaussian terms whose sum of squares is `ss`.
    pub fn posterior(&self, n: f64, ss: f64) -> InvGamma {
        InvGamma { shape: self.shape + 0.5 * n, rate: self.rate + 0.5 * ss }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        sample_inverse_gamma(self.shape, self.rate, rng)
    }
}

pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::Config(format!("inverse-gamma needs shape, rate > 0 (got {shape}, {rate})")));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Config(e.to_string()))?;
    // Tiny shapes can underflow the gamma draw to zero.
    let x: f64 = g.sample(rng).max(f64::MIN_POSITIVE);
    Ok(1.0 / x)
}

/// Scalar Gaussian full conditional.
///
/// Prior `N(prior_mean, 1 / prior_precision)` combined with Gaussian
/// likelihood terms summarised by their total precision and precision-weighted
/// sum (`sum y_k / v_k`). An infinite prior precision pins the draw to the
/// prior mean.
pub fn sample_normal_conjugate<R: Rng + ?Sized>(
    prior_mean: f64,
    prior_precision: f64,
    data_precision: f64,
    data_linear: f64,
    rng: &mut R,
) -> Result<f64> {
    if prior_precision.is_infinite() {
        return Ok(prior_mean);
    }
    let p = prior_precision + data_precision;
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::NotPositiveDefinite(format!("posterior precision {p}")));
    }
    let mean = (prior_precision * prior_mean + data_linear) / p;
    let z: f64 = rng.sample(StandardNormal);
    Ok(mean + z / p.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum PhiPrior {
    #[default]
    Uniform,
    /// Normal truncated to (-1, 1).
    TruncatedNormal { mean: f64, sd: f64 },
}

impl PhiPrior {
    pub fn log_density(&self, phi: f64) -> f64 {
        if phi.abs() >= 1.0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            PhiPrior::Uniform => 0.0,
            PhiPrior::TruncatedNormal { mean, sd } => -0.5 * ((phi - mean) / sd).powi(2),
        }
    }
}

/// Random-walk Metropolis for the AR(1) coefficient on the exact stationary
/// likelihood. Proposals are reflected back into (-1, 1), which keeps them
/// symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiSampler {
    pub step: f64,
    pub steps_per_sweep: usize,
    pub accepted: u64,
    pub proposed: u64,
}

impl Default for PhiSampler {
    fn default() -> Self {
        PhiSampler { step: 0.05, steps_per_sweep: 5, accepted: 0, proposed: 0 }
    }
}

pub fn reflect_unit(mut x: f64) -> f64 {
    loop {
        if x >= 1.0 {
            x = 2.0 - x;
        } else if x <= -1.0 {
            x = -2.0 - x;
        } else {
            return x;
        }
    }
}

impl PhiSampler {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Nudges the step size toward 30-50% acceptance; call during burn-in only.
    pub fn adapt(&mut self) {
        if self.proposed < 50 {
            return;
        }
        let r = self.acceptance_rate();
        if r < 0.3 {
            self.step *= 0.8;
        } else if r > 0.5 {
            self.step = (self.step * 1.25).min(1.0);
        }
        self.accepted = 0;
        self.proposed = 0;
    }

    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        current: f64,
        stats: &Ar1Stats,
        sigma2: f64,
        prior: &PhiPrior,
        rng: &mut R,
    ) -> f64 {
        sample_phi_ar1(current, stats, sigma2, prior, self, rng)
    }
}

/// One block of Metropolis steps for `phi` given residual statistics.
pub fn sample_phi_ar1<R: Rng + ?Sized>(
    current: f64,
    stats: &Ar1Stats,
    sigma2: f64,
    prior: &PhiPrior,
    sampler: &mut PhiSampler,
    rng: &mut R,
) -> f64 {
    let target = |phi: f64| stats.log_lik_phi(phi, sigma2) + prior.log_density(phi);
    let mut phi = current.clamp(-0.999_999, 0.999_999);
    let mut lp = target(phi);
    for _ in 0..sampler.steps_per_sweep.max(1) {
        let z: f64 = rng.sample(StandardNormal);
        let prop = reflect_unit(phi + sampler.step * z);
        let lq = target(prop);
        sampler.proposed += 1;
        let u: f64 = rng.random();
        if u.ln() < lq - lp {
            phi = prop;
            lp = lq;
            sampler.accepted += 1;
        }
    }
    phi
}

/// Stored draws for one named parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub labels: Vec<String>,
    /// One vector of length `labels.len()` per stored draw.
    pub draws: Vec<Vec<f64>>,
}

impl Block {
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Self {
        Block { name: name.into(), labels, draws: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.draws.iter().map(|v| v[d]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub blocks: Vec<Block>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chain: usize,
}

impl PosteriorChain {
    pub fn new(iterations: usize, burn_in: usize, thin: usize, seed: u64, chain: usize) -> Self {
        PosteriorChain { blocks: Vec::new(), iterations, burn_in, thin: thin.max(1), seed, chain }
    }

    pub fn add_block(&mut self, name: &str, labels: Vec<String>) {
        self.blocks.push(Block::new(name, labels));
    }

    pub fn expected_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    /// Whether iteration `it` (0-based) is kept.
    pub fn keeps(&self, it: usize) -> bool {
        it >= self.burn_in && (it + 1 - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn push(&mut self, name: &str, draw: Vec<f64>) {
        let b = self.block_mut(name).unwrap_or_else(|| panic!("unknown block {name}"));
        debug_assert_eq!(b.dim(), draw.len());
        b.draws.push(draw);
    }

    pub fn stored_draws(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.draws.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub block: String,
    pub label: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub ess: f64,
    pub rhat: f64,
}

/// Sample quantile with linear interpolation between order statistics
/// (the default "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Equal-tailed credible interval at `level`.
pub fn credible_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(&v, a), quantile_sorted(&v, 1.0 - a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub ess: f64,
    pub rhat: f64,
}

/// Split-R-hat and effective sample size for one scalar across chains.
///
/// Each chain is split in half; R-hat is computed on the halves. ESS uses
/// Geyer's initial positive sequence on the multi-chain autocorrelation.
pub fn convergence(chains: &[Vec<f64>]) -> Result<Convergence> {
    let total: usize = chains.iter().map(Vec::len).sum();
    if chains.is_empty() || (chains.len() < 2 && total < 200) {
        return Err(Error::InsufficientDraws(format!(
            "{} chain(s), {total} draws; need 2 chains or 200 draws",
            chains.len()
        )));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if n < 2 {
        return Err(Error::InsufficientDraws(format!("chains too short ({n} per half)")));
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let c = &c[c.len() - 2 * n..];
            [&c[..n], &c[n..]]
        })
        .collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves.iter().map(|h| variance(h)).collect();
    let grand = mean(&means);
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = mean(&vars);
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    let rhat = if w > 0.0 {
        (var_plus / w).sqrt().max(1.0)
    } else if b > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };

    let draws = m * nf;
    let ess = if !(var_plus > 0.0) || !var_plus.is_finite() || w == 0.0 {
        if b > 0.0 {
            1.0
        } else {
            draws
        }
    } else {
        // Multi-chain autocorrelation via per-half autocovariances.
        let max_lag = n - 1;
        let acov: Vec<Vec<f64>> = halves.iter().zip(&means).map(|(h, &mu)| autocovariance(h, mu, max_lag)).collect();
        let rho = |t: usize| -> f64 {
            let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m;
            1.0 - (w - mean_acov) / var_plus
        };
        let mut sum = 0.0;
        let mut t = 0;
        let mut prev_pair = f64::INFINITY;
        while t < max_lag {
            let mut pair = rho(t) + rho(t + 1);
            if pair < 0.0 {
                break;
            }
            // initial monotone sequence
            if pair > prev_pair {
                pair = prev_pair;
            }
            sum += pair;
            prev_pair = pair;
            t += 2;
        }
        let tau = (-1.0 + 2.0 * sum).max(1.0 / draws.log10().max(1.0));
        (draws / tau).min(draws)
    };
    Ok(Convergence { ess, rhat })
}

fn autocovariance(x: &[f64], mu: f64, max_lag: usize) -> Vec<f64> {
    let n = x.len();
    (0..=max_lag)
        .map(|lag| {
            let mut s = 0.0;
            for k in 0..n - lag {
                s += (x[k] - mu) * (x[k + lag] - mu);
            }
            s / n as f64
        })
        .collect()
}

/// Per-block, per-dimension convergence over a set of chains with the same
/// layout.
pub fn diagnostics(chains: &[PosteriorChain]) -> Result<Vec<(String, String, Convergence)>> {
    let first = chains.first().ok_or_else(|| Error::InsufficientDraws("no chains".into()))?;
    let mut out = Vec::new();
    for (bi, block) in first.blocks.iter().enumerate() {
        for d in 0..block.dim() {
            let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.blocks[bi].column(d)).collect();
            out.push((block.name.clone(), block.labels[d].clone(), convergence(&cols)?));
        }
    }
    Ok(out)
}

/// Pooled summaries of every block dimension at credible level `level`.
pub fn summarize(chains: &[PosteriorChain], level: f64) -> Result<Vec<Summary>> {
    let diag = diagnostics(chains)?;
    let first = &chains[0];
    let mut out = Vec::with_capacity(diag.len());
    let mut k = 0;
    for (bi, block) in first.blocks.iter().enumerate() {
        for d in 0..block.dim() {
            let pooled: Vec<f64> = chains.iter().flat_map(|c| c.blocks[bi].column(d)).collect();
            let mut sorted = pooled.clone();
            sorted.sort_by(f64::total_cmp);
            let a = (1.0 - level) / 2.0;
            out.push(Summary {
                block: block.name.clone(),
                label: block.labels[d].clone(),
                mean: mean(&pooled),
                median: quantile_sorted(&sorted, 0.5),
                sd: variance(&pooled).max(0.0).sqrt(),
                lower: quantile_sorted(&sorted, a),
                upper: quantile_sorted(&sorted, 1.0 - a),
                ess: diag[k].2.ess,
                rhat: diag[k].2.rhat,
            });
            k += 1;
        }
    }
    Ok(out)
}

/// Appends kept draws of selected blocks to a CSV file in batches.
#[derive(Debug)]
pub struct ChainStream {
    path: PathBuf,
    buffer: Vec<String>,
    pub batch: usize,
    header_written: bool,
}

impl ChainStream {
    pub fn new(path: impl AsRef<Path>) -> Self {
        ChainStream { path: path.as_ref().to_path_buf(), buffer: Vec::new(), batch: 100, header_written: false }
    }

    pub fn record(&mut self, iteration: usize, chain: &PosteriorChain, blocks: &[&str]) -> Result<()> {
        if !self.header_written {
            let mut cols = vec!["iteration".to_string()];
            for name in blocks {
                if let Some(b) = chain.block(name) {
                    cols.extend(b.labels.iter().map(|l| format!("{name}[{l}]")));
                }
            }
            self.buffer.push(cols.join(","));
            self.header_written = true;
        }
        let mut row = vec![iteration.to_string()];
        for name in blocks {
            if let Some(d) = chain.block(name).and_then(|b| b.draws.last()) {
                row.extend(d.iter().map(|v| format!("{v:.8e}")));
            }
        }
        self.buffer.push(row.join(","));
        if self.buffer.len() >= self.batch {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        for line in self.buffer.drain(..) {
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}
