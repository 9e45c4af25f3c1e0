//! Labelling of time-varying climate effects.
//!
//! A variable-year is *sensitive* when its credible interval excludes zero and
//! the climate model explains at least a quarter of the stand-effect
//! variance in the surrounding window. Sensitive years are then attributed to
//! a nearby threshold exceedance, a persistent response after one, an insect
//! outbreak, or nothing known.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::ring_data::FTC_HOSTS;
use crate::sampler::quantile;
use crate::vce::YearEffect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Zero,
    Weak,
    Threshold,
    Persistent,
    Disturbance,
    Unknown,
}

impl Category {
    pub const SENSITIVE: [Category; 4] =
        [Category::Threshold, Category::Persistent, Category::Disturbance, Category::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Zero => "zero",
            Category::Weak => "weak",
            Category::Threshold => "threshold",
            Category::Persistent => "persistent",
            Category::Disturbance => "disturbance",
            Category::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        [
            Category::Zero,
            Category::Weak,
            Category::Threshold,
            Category::Persistent,
            Category::Disturbance,
            Category::Unknown,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }

    pub fn is_sensitive(self) -> bool {
        !matches!(self, Category::Zero | Category::Weak)
    }
}

/// Upper-quantile level per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub quantiles: BTreeMap<String, f64>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        let quantiles =
            [("SUM-DEF", 0.95), ("SUM-DEF-LAG", 0.95), ("FAL-DEF", 0.98), ("SPR-DEF", 0.85), ("SNOW", 0.85)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
        ThresholdConfig { quantiles }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, q) in &self.quantiles {
            if !(*q > 0.0 && *q < 1.0) {
                return Err(Error::Config(format!("threshold quantile for {k} is {q}; must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Insect outbreak years and the species they affect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisturbanceCalendar {
    /// Inclusive year ranges.
    pub outbreaks: Vec<(i32, i32)>,
    pub hosts: Vec<String>,
}

impl Default for DisturbanceCalendar {
    fn default() -> Self {
        DisturbanceCalendar {
            outbreaks: vec![(1951, 1959), (1964, 1972), (1989, 1995), (2000, 2006)],
            hosts: FTC_HOSTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl DisturbanceCalendar {
    pub fn validate(&self) -> Result<()> {
        for &(a, b) in &self.outbreaks {
            if a > b {
                return Err(Error::Config(format!("outbreak {a}-{b} ends before it starts")));
            }
        }
        for w in self.outbreaks.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(Error::Config(format!(
                    "outbreaks {}-{} and {}-{} overlap or are out of order",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(())
    }

    pub fn in_outbreak(&self, year: i32) -> bool {
        self.outbreaks.iter().any(|&(a, b)| a <= year && year <= b)
    }

    pub fn is_host(&self, species: &str) -> bool {
        self.hosts.iter().any(|h| h == species)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub r2_cut: f64,
    /// Exceedances within this many years of a response count as causes.
    pub half_width: i32,
    /// Order in which the attributable categories are tried.
    pub priority: Vec<Category>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            r2_cut: 0.25,
            half_width: 2,
            priority: vec![Category::Threshold, Category::Persistent, Category::Disturbance],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let allowed = [Category::Threshold, Category::Persistent, Category::Disturbance];
        let set: BTreeSet<Category> = self.priority.iter().copied().collect();
        if set.len() != self.priority.len() || self.priority.iter().any(|c| !allowed.contains(c)) {
            return Err(Error::Config(
                "priority must list threshold, persistent and disturbance, each at most once".into(),
            ));
        }
        if self.half_width < 0 {
            return Err(Error::Config("half_width must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLabel {
    pub variable: String,
    pub year: i32,
    pub category: Category,
    pub ci_low: f64,
    pub ci_high: f64,
    pub r2: Option<f64>,
}

/// `1 - SS_res / SS_tot` over observed cells whose year lies within
/// `half_width` of `t`, using coefficients `theta_t` for every cell. `None`
/// when the window is empty or the stand effects are constant.
pub fn annual_r2(
    cells: &[(usize, usize)],
    alpha: &[f64],
    f: &DMatrix<f64>,
    theta_t: &DVector<f64>,
    t: usize,
    half_width: usize,
) -> Option<f64> {
    let idx: Vec<usize> =
        cells.iter().enumerate().filter(|(_, &(_, s))| s.abs_diff(t) <= half_width).map(|(r, _)| r).collect();
    if idx.is_empty() {
        return None;
    }
    let mean = idx.iter().map(|&r| alpha[r]).sum::<f64>() / idx.len() as f64;
    let ss_tot: f64 = idx.iter().map(|&r| (alpha[r] - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return None;
    }
    let ss_res: f64 = idx.iter().map(|&r| (alpha[r] - (f.row(r) * theta_t)[(0, 0)]).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

/// Type-7 quantile of a variable's annual means.
pub fn threshold_value(annual: &BTreeMap<i32, f64>, q: f64) -> f64 {
    let vals: Vec<f64> = annual.values().copied().collect();
    quantile(&vals, q)
}

/// Years whose annual mean is strictly above the `q` quantile.
pub fn exceedance_years(annual: &BTreeMap<i32, f64>, q: f64) -> Vec<i32> {
    if annual.is_empty() {
        return Vec::new();
    }
    let th = threshold_value(annual, q);
    annual.iter().filter(|(_, v)| **v > th).map(|(y, _)| *y).collect()
}

/// First-pass category ignoring attribution: zero, weak or sensitive.
fn base_category(e: &YearEffect, r2_cut: f64) -> Option<Category> {
    if e.lower <= 0.0 && 0.0 <= e.upper {
        return Some(Category::Zero);
    }
    match e.r2 {
        None => Some(Category::Zero),
        Some(r) if r < r2_cut => Some(Category::Weak),
        Some(_) => None,
    }
}

/// Labels every variable-year of a trajectory.
///
/// `annual_climate[variable]` holds the across-stand annual means used for
/// thresholds. Persistent years are sensitive years in the same unbroken
/// sensitive run as an earlier threshold year, falling outside every
/// exceedance window.
pub fn classify(
    trajectory: &[YearEffect],
    thresholds: &ThresholdConfig,
    annual_climate: &BTreeMap<String, BTreeMap<i32, f64>>,
    calendar: &DisturbanceCalendar,
    config: &ClassifierConfig,
) -> Result<Vec<ResponseLabel>> {
    thresholds.validate()?;
    calendar.validate()?;
    config.validate()?;
    let mut by_var: BTreeMap<&str, Vec<&YearEffect>> = BTreeMap::new();
    for e in trajectory {
        by_var.entry(e.variable.as_str()).or_default().push(e);
    }
    let mut order: Vec<&str> = Vec::new();
    for e in trajectory {
        if !order.contains(&e.variable.as_str()) {
            order.push(&e.variable);
        }
    }
    let mut out = Vec::with_capacity(trajectory.len());
    for var in order {
        let mut effects = by_var[var].clone();
        effects.sort_by_key(|e| e.year);
        let exceed: Vec<i32> = match (thresholds.quantiles.get(var), annual_climate.get(var)) {
            (Some(&q), Some(series)) => exceedance_years(series, q),
            _ => Vec::new(),
        };
        let near_exceedance = |y: i32| exceed.iter().any(|e| (e - y).abs() <= config.half_width);
        let base: Vec<Option<Category>> = effects.iter().map(|e| base_category(e, config.r2_cut)).collect();

        let mut run_has_threshold = false;
        let mut prev_year: Option<i32> = None;
        for (k, e) in effects.iter().enumerate() {
            let category = match base[k] {
                Some(c) => {
                    run_has_threshold = false;
                    c
                }
                None => {
                    if prev_year.is_none_or(|p| e.year != p + 1) || k == 0 || base[k - 1].is_some() {
                        run_has_threshold = false;
                    }
                    let threshold = near_exceedance(e.year);
                    let persistent = !threshold && run_has_threshold;
                    let disturbance = calendar.in_outbreak(e.year);
                    let chosen = config.priority.iter().copied().find(|c| match c {
                        Category::Threshold => threshold,
                        Category::Persistent => persistent,
                        Category::Disturbance => disturbance,
                        _ => false,
                    });
                    if threshold {
                        run_has_threshold = true;
                    }
                    chosen.unwrap_or(Category::Unknown)
                }
            };
            prev_year = Some(e.year);
            out.push(ResponseLabel {
                variable: var.to_string(),
                year: e.year,
                category,
                ci_low: e.lower,
                ci_high: e.upper,
                r2: e.r2,
            });
        }
    }
    Ok(out)
}

/// One exceedance year of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub variable: String,
    pub year: i32,
    pub value: f64,
    pub threshold: f64,
    /// A threshold response was labelled within the window around this year.
    pub responded: bool,
}

pub fn exceedance_report(
    annual_climate: &BTreeMap<String, BTreeMap<i32, f64>>,
    thresholds: &ThresholdConfig,
    labels: &[ResponseLabel],
    half_width: i32,
) -> Vec<Exceedance> {
    let mut out = Vec::new();
    for (var, &q) in &thresholds.quantiles {
        let Some(series) = annual_climate.get(var) else { continue };
        if series.is_empty() {
            continue;
        }
        let th = threshold_value(series, q);
        for (&year, &value) in series.iter().filter(|(_, v)| **v > th) {
            let responded = labels.iter().any(|l| {
                l.variable == *var && l.category == Category::Threshold && (l.year - year).abs() <= half_width
            });
            out.push(Exceedance { variable: var.clone(), year, value, threshold: th, responded });
        }
    }
    out
}

/// Counts and shares of the four attributable categories among sensitive labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub total: usize,
    pub counts: BTreeMap<Category, usize>,
}

impl Partition {
    pub fn percent(&self, c: Category) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * *self.counts.get(&c).unwrap_or(&0) as f64 / self.total as f64
    }
}

pub fn partition(labels: &[ResponseLabel]) -> Partition {
    let mut counts: BTreeMap<Category, usize> = Category::SENSITIVE.iter().map(|c| (*c, 0)).collect();
    let mut total = 0;
    for l in labels.iter().filter(|l| l.category.is_sensitive()) {
        *counts.get_mut(&l.category).expect("sensitive category") += 1;
        total += 1;
    }
    Partition { total, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialResidual {
    pub tree_id: String,
    pub stand_id: String,
    pub species: String,
    pub host: bool,
    pub year: i32,
    /// Log growth minus the tree's fitted age trend.
    pub residual: f64,
}

/// Stands with the lowest mean stand effect over `years`: the lowest
/// `ceil(fraction * k)` stands, ties broken by stand id.
pub fn low_growth_stands(
    design: &ModelDesign,
    alpha_mean: &[Vec<f64>],
    years: (i32, i32),
    fraction: f64,
) -> Result<Vec<usize>> {
    let (lo, hi) = year_range(design, years)?;
    let mut means: Vec<(f64, &str, usize)> = (0..design.n_stands())
        .filter_map(|j| {
            let vals: Vec<f64> = (lo..=hi).filter(|&t| design.observed[j][t]).map(|t| alpha_mean[j][t]).collect();
            (!vals.is_empty()).then(|| (vals.iter().sum::<f64>() / vals.len() as f64, design.stands[j].as_str(), j))
        })
        .collect();
    means.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let n = ((fraction * design.n_stands() as f64).ceil() as usize).clamp(1, means.len().max(1));
    Ok(means.into_iter().take(n).map(|(_, _, j)| j).collect())
}

fn year_range(design: &ModelDesign, years: (i32, i32)) -> Result<(usize, usize)> {
    let w = design.window;
    if years.0 > years.1 || years.0 < w.start_year || years.1 > w.end_year {
        return Err(Error::Config(format!(
            "year range {}-{} outside study window {}-{}",
            years.0, years.1, w.start_year, w.end_year
        )));
    }
    Ok(((years.0 - w.start_year) as usize, (years.1 - w.start_year) as usize))
}

/// Residuals of log growth about each tree's fitted trend, for trees in the
/// lowest-growth stands over `years`.
pub fn partial_residuals(
    design: &ModelDesign,
    beta_mean: &[DVector<f64>],
    alpha_mean: &[Vec<f64>],
    calendar: &DisturbanceCalendar,
    years: (i32, i32),
    fraction: f64,
) -> Result<Vec<PartialResidual>> {
    let (lo, hi) = year_range(design, years)?;
    let stands = low_growth_stands(design, alpha_mean, years, fraction)?;
    let mut out = Vec::new();
    for (i, tree) in design.trees.iter().enumerate() {
        if !stands.contains(&tree.stand) {
            continue;
        }
        let fit = &tree.basis * &beta_mean[i];
        for t in lo.max(tree.start)..=hi.min(tree.end().saturating_sub(1)) {
            if t < tree.start || t >= tree.end() {
                continue;
            }
            let k = t - tree.start;
            out.push(PartialResidual {
                tree_id: tree.tree_id.clone(),
                stand_id: design.stands[tree.stand].clone(),
                species: tree.species.clone(),
                host: calendar.is_host(&tree.species),
                year: design.year(t),
                residual: tree.log_growth[k] - fit[k],
            });
        }
    }
    Ok(out)
}

/// One point of an empirical cumulative distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub set: String,
    pub years_since_initiation: i32,
    pub cumulative_fraction: f64,
    pub n: usize,
}

/// Stand ages at which responses occurred: each label contributes one age
/// per stand observed in its year.
pub fn response_ages(
    labels: &[ResponseLabel],
    initiation: &BTreeMap<String, i32>,
    observed_years: &BTreeMap<String, (i32, i32)>,
) -> Vec<i32> {
    let mut ages = Vec::new();
    for l in labels {
        for (stand, &(first, last)) in observed_years {
            if l.year < first || l.year > last {
                continue;
            }
            if let Some(init) = initiation.get(stand) {
                ages.push(l.year - init);
            }
        }
    }
    ages.sort_unstable();
    ages
}

/// Empirical CDF evaluated at each distinct age.
pub fn ecdf(set: &str, ages: &[i32]) -> Vec<CurvePoint> {
    let mut sorted = ages.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut out = Vec::new();
    let mut k = 0;
    while k < n {
        let a = sorted[k];
        while k < n && sorted[k] == a {
            k += 1;
        }
        out.push(CurvePoint {
            set: set.to_string(),
            years_since_initiation: a,
            cumulative_fraction: k as f64 / n as f64,
            n,
        });
    }
    out
}

/// Fraction of ages at or below `age`.
pub fn ecdf_at(curve: &[CurvePoint], age: i32) -> f64 {
    curve.iter().take_while(|p| p.years_since_initiation <= age).last().map_or(0.0, |p| p.cumulative_fraction)
}

/// Curves for unknown-category responses and for all sensitive responses.
pub fn initiation_curve(
    labels: &[ResponseLabel],
    initiation: &BTreeMap<String, i32>,
    observed_years: &BTreeMap<String, (i32, i32)>,
) -> Vec<CurvePoint> {
    let unknown: Vec<ResponseLabel> = labels.iter().filter(|l| l.category == Category::Unknown).cloned().collect();
    let all: Vec<ResponseLabel> = labels.iter().filter(|l| l.category.is_sensitive()).cloned().collect();
    let mut out = ecdf("unknown", &response_ages(&unknown, initiation, observed_years));
    out.extend(ecdf("all", &response_ages(&all, initiation, observed_years)));
    out
}

/// Mean across stands of each variable per year, from a seasonal table.
pub fn annual_means(
    seasonal: &crate::water_balance::SeasonalClimate,
    variables: &[String],
) -> Result<BTreeMap<String, BTreeMap<i32, f64>>> {
    variables
        .iter()
        .map(|v| {
            let k = seasonal.index_of(v).ok_or_else(|| Error::UnknownVariable(v.clone()))?;
            Ok((v.clone(), seasonal.stand_mean_by_year(k)))
        })
        .collect()
}

pub fn write_labels<W: std::io::Write>(writer: W, labels: &[ResponseLabel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "year", "category", "ci_low", "ci_high", "r2_annual"])?;
    for l in labels {
        w.write_record([
            l.variable.clone(),
            l.year.to_string(),
            l.category.as_str().to_string(),
            format!("{:.6}", l.ci_low),
            format!("{:.6}", l.ci_high),
            l.r2.map_or_else(|| "NA".into(), |r| format!("{r:.6}")),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<label writer>", e))?;
    Ok(())
}

pub fn read_labels<R: std::io::Read>(reader: R) -> Result<Vec<ResponseLabel>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Data(format!("labels: bad {what} in {:?}", rec));
        out.push(ResponseLabel {
            variable: rec.get(0).ok_or_else(|| bad("variable"))?.to_string(),
            year: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("year"))?,
            category: rec.get(2).and_then(Category::parse).ok_or_else(|| bad("category"))?,
            ci_low: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("ci_low"))?,
            ci_high: rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("ci_high"))?,
            r2: rec.get(5).and_then(|s| s.parse().ok()),
        });
    }
    Ok(out)
}

pub fn write_exceedances<W: std::io::Write>(writer: W, rows: &[Exceedance]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "year", "value", "threshold", "responded"])?;
    for e in rows {
        w.write_record([
            e.variable.clone(),
            e.year.to_string(),
            format!("{:.6}", e.value),
            format!("{:.6}", e.threshold),
            e.responded.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<exceedance writer>", e))?;
    Ok(())
}

pub fn write_partial_residuals<W: std::io::Write>(writer: W, rows: &[PartialResidual]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tree_id", "stand_id", "species", "host", "year", "residual"])?;
    for r in rows {
        w.write_record([
            r.tree_id.clone(),
            r.stand_id.clone(),
            r.species.clone(),
            r.host.to_string(),
            r.year.to_string(),
            format!("{:.6}", r.residual),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<residual writer>", e))?;
    Ok(())
}

pub fn write_initiation_curve<W: std::io::Write>(writer: W, rows: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["set", "years_since_initiation", "cumulative_fraction", "n"])?;
    for p in rows {
        w.write_record([
            p.set.clone(),
            p.years_since_initiation.to_string(),
            format!("{:.6}", p.cumulative_fraction),
            p.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<curve writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn effect(var: &str, year: i32, lower: f64, upper: f64, r2: f64) -> YearEffect {
        YearEffect { variable: var.into(), year, mean: (lower + upper) / 2.0, lower, upper, r2: Some(r2) }
    }

    fn strong(var: &str, year: i32) -> YearEffect {
        effect(var, year, -0.5, -0.1, 0.6)
    }

    fn weakish(var: &str, year: i32) -> YearEffect {
        effect(var, year, -0.3, 0.2, 0.1)
    }

    fn series(values: &[(i32, f64)]) -> BTreeMap<i32, f64> {
        values.iter().copied().collect()
    }

    #[test]
    fn r2_perfect_and_null() {
        let cells = vec![(0, 0), (1, 0), (0, 1), (1, 1)];
        let f = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 2.0, 0.5]);
        let theta = DVector::from_vec(vec![0.7]);
        let alpha: Vec<f64> = (0..4).map(|r| 0.7 * f[(r, 0)]).collect();
        assert!((annual_r2(&cells, &alpha, &f, &theta, 0, 2).unwrap() - 1.0).abs() < 1e-15);
        let centered = vec![0.3, -0.3, 0.1, -0.1];
        let zero = DVector::from_vec(vec![0.0]);
        assert!(annual_r2(&cells, &centered, &f, &zero, 0, 2).unwrap().abs() < 1e-15);
        assert!(annual_r2(&cells, &[0.2; 4], &f, &theta, 0, 2).is_none());
    }

    #[test]
    fn r2_hand_computed_two_stands_five_years() {
        // two stands, years 0..5, window centred on t = 2 covers everything
        let cells: Vec<(usize, usize)> = (0..5).flat_map(|t| [(0, t), (1, t)]).collect();
        let fv = [0.5, -1.0, 1.2, 0.3, -0.4, 0.9, -1.5, 0.2, 0.8, -0.6];
        let av = [0.1, -0.35, 0.42, 0.05, -0.1, 0.33, -0.5, 0.02, 0.3, -0.2];
        let f = DMatrix::from_column_slice(10, 1, &fv);
        let theta = DVector::from_vec(vec![0.35]);
        // written out: mean, total and residual sums of squares
        let mean = av.iter().sum::<f64>() / 10.0;
        let ss_tot: f64 = av.iter().map(|a| (a - mean) * (a - mean)).sum();
        let ss_res: f64 = av.iter().zip(&fv).map(|(a, x)| (a - 0.35 * x) * (a - 0.35 * x)).sum();
        let expect = 1.0 - ss_res / ss_tot;
        let got = annual_r2(&cells, &av, &f, &theta, 2, 2).unwrap();
        assert!((got - expect).abs() < 1e-10);
        // near the edge the window clips to years 0..=2
        let clipped = annual_r2(&cells, &av, &f, &theta, 0, 2).unwrap();
        assert!((clipped - got).abs() > 1e-6);
    }

    #[test]
    fn median_threshold_on_ten_values() {
        let s: BTreeMap<i32, f64> = (1..=10).map(|y| (y, y as f64)).collect();
        assert_eq!(threshold_value(&s, 0.5), 5.5);
        assert_eq!(exceedance_years(&s, 0.5), vec![6, 7, 8, 9, 10]);
        let flat: BTreeMap<i32, f64> = (1..=10).map(|y| (y, 3.0)).collect();
        assert!(exceedance_years(&flat, 0.9).is_empty());
    }

    #[test]
    fn spring_run_around_exceedance_is_threshold() {
        let traj: Vec<YearEffect> = (1930..=1940)
            .map(|y| if (1934..=1937).contains(&y) { strong("SPR-DEF", y) } else { weakish("SPR-DEF", y) })
            .collect();
        let mut climate = BTreeMap::new();
        climate.insert("SPR-DEF".to_string(), (1900..=1999).map(|y| (y, if y == 1935 { 10.0 } else { 0.0 })).collect());
        let labels = classify(
            &traj,
            &ThresholdConfig::default(),
            &climate,
            &DisturbanceCalendar::default(),
            &ClassifierConfig::default(),
        )
        .unwrap();
        for l in &labels {
            let expect = if (1934..=1937).contains(&l.year) { Category::Threshold } else { Category::Zero };
            assert_eq!(l.category, expect, "{}", l.year);
        }
    }

    #[test]
    fn persistence_and_disturbance() {
        // exceedance in 1936; sensitive 1934..=1943; outbreak year 1966 sensitive
        let mut traj: Vec<YearEffect> = (1930..=1970)
            .map(|y| {
                if (1934..=1943).contains(&y) || y == 1966 || y == 1920 {
                    strong("SUM-DEF", y)
                } else {
                    effect("SUM-DEF", y, -0.4, -0.1, 0.1)
                }
            })
            .collect();
        traj.push(strong("SUM-DEF", 1925));
        let mut climate = BTreeMap::new();
        climate.insert(
            "SUM-DEF".to_string(),
            series(&(1900..=2000).map(|y| (y, if y == 1936 { 9.0 } else { 0.0 })).collect::<Vec<_>>()),
        );
        let labels = classify(
            &traj,
            &ThresholdConfig::default(),
            &climate,
            &DisturbanceCalendar::default(),
            &ClassifierConfig::default(),
        )
        .unwrap();
        let cat = |y: i32| labels.iter().find(|l| l.year == y).unwrap().category;
        assert_eq!(cat(1934), Category::Threshold);
        assert_eq!(cat(1938), Category::Threshold);
        assert_eq!(cat(1939), Category::Persistent);
        assert_eq!(cat(1943), Category::Persistent);
        assert_eq!(cat(1944), Category::Weak);
        assert_eq!(cat(1966), Category::Disturbance);
        assert_eq!(cat(1925), Category::Unknown);
        let part = partition(&labels);
        assert_eq!(part.total, 10 + 1 + 1);
    }

    #[test]
    fn gap_year_ends_persistence() {
        let traj: Vec<YearEffect> = (1930..=1945)
            .map(|y| {
                if y == 1940 {
                    weakish("SUM-DEF", y)
                } else if y >= 1934 {
                    strong("SUM-DEF", y)
                } else {
                    weakish("SUM-DEF", y)
                }
            })
            .collect();
        let mut climate = BTreeMap::new();
        climate.insert("SUM-DEF".to_string(), (1900..=2000).map(|y| (y, if y == 1935 { 9.0 } else { 0.0 })).collect());
        let labels = classify(
            &traj,
            &ThresholdConfig::default(),
            &climate,
            &DisturbanceCalendar::default(),
            &ClassifierConfig::default(),
        )
        .unwrap();
        let cat = |y: i32| labels.iter().find(|l| l.year == y).unwrap().category;
        assert_eq!(cat(1939), Category::Persistent);
        assert_eq!(cat(1941), Category::Unknown);
    }

    #[test]
    fn priority_is_configurable() {
        let traj = vec![strong("SUM-DEF", 1953)];
        let mut climate = BTreeMap::new();
        climate.insert("SUM-DEF".to_string(), (1900..=2000).map(|y| (y, if y == 1954 { 9.0 } else { 0.0 })).collect());
        let cal = DisturbanceCalendar::default();
        let th = ThresholdConfig::default();
        let default = classify(&traj, &th, &climate, &cal, &ClassifierConfig::default()).unwrap();
        assert_eq!(default[0].category, Category::Threshold);
        let cfg = ClassifierConfig {
            priority: vec![Category::Disturbance, Category::Threshold, Category::Persistent],
            ..Default::default()
        };
        assert_eq!(classify(&traj, &th, &climate, &cal, &cfg).unwrap()[0].category, Category::Disturbance);
    }

    #[test]
    fn variable_order_does_not_matter() {
        let a: Vec<YearEffect> = (1930..1940).map(|y| strong("SNOW", y)).collect();
        let b: Vec<YearEffect> = (1930..1940).map(|y| strong("SUM-DEF", y)).collect();
        let climate = BTreeMap::new();
        let run = |t: Vec<YearEffect>| {
            let mut l = classify(
                &t,
                &ThresholdConfig::default(),
                &climate,
                &DisturbanceCalendar::default(),
                &ClassifierConfig::default(),
            )
            .unwrap();
            l.sort_by(|x, y| (&x.variable, x.year).cmp(&(&y.variable, y.year)));
            l
        };
        assert_eq!(run([a.clone(), b.clone()].concat()), run([b, a].concat()));
    }

    #[test]
    fn calendar_validation() {
        let bad = DisturbanceCalendar { outbreaks: vec![(1950, 1960), (1955, 1970)], hosts: vec![] };
        assert!(bad.validate().is_err());
        assert!(DisturbanceCalendar::default().validate().is_ok());
    }

    #[test]
    fn step_curve_at_ten() {
        let labels: Vec<ResponseLabel> = (0..3)
            .map(|k| ResponseLabel {
                variable: "SNOW".into(),
                year: 1950 + k,
                category: Category::Unknown,
                ci_low: 0.1,
                ci_high: 0.2,
                r2: Some(0.5),
            })
            .collect();
        // each stand observed only in the year it turns ten
        let initiation: BTreeMap<String, i32> = (0..3).map(|k| (format!("S{k}"), 1940 + k)).collect();
        let observed: BTreeMap<String, (i32, i32)> = (0..3).map(|k| (format!("S{k}"), (1950 + k, 1950 + k))).collect();
        let curve = initiation_curve(&labels, &initiation, &observed);
        let unknown: Vec<&CurvePoint> = curve.iter().filter(|p| p.set == "unknown").collect();
        assert_eq!(unknown.len(), 1);
        assert_eq!(unknown[0].years_since_initiation, 10);
        assert_eq!(unknown[0].cumulative_fraction, 1.0);
    }
}
