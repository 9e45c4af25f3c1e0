//! Model design: the P-spline age basis and the aligned tree, stand and
//! climate structures consumed by the samplers.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring_data::{RingSeries, StudyWindow};
use crate::water_balance::SeasonalClimate;

/// Clamped B-spline basis over age with a difference penalty.
///
/// Interior knots sit at empirical quantiles of age. The penalty is built
/// from divided differences of the coefficients at their Greville abscissae,
/// so an order-2 penalty leaves exactly the functions linear in age
/// unpenalised; with evenly spaced knots it reduces to ordinary differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub degree: usize,
    pub penalty_order: usize,
    pub lower: f64,
    pub upper: f64,
    pub interior: Vec<f64>,
    /// Full knot vector with `degree + 1` copies of each boundary.
    pub knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(lower: f64, upper: f64, interior: Vec<f64>, degree: usize, penalty_order: usize) -> Result<Self> {
        if !(upper > lower) {
            return Err(Error::Config(format!("spline range [{lower}, {upper}] is empty")));
        }
        if interior.windows(2).any(|w| !(w[1] > w[0])) || interior.iter().any(|k| !(*k > lower && *k < upper)) {
            return Err(Error::Config("interior knots must be increasing and inside the range".into()));
        }
        if penalty_order == 0 || penalty_order > interior.len() + degree {
            return Err(Error::Config(format!("penalty order {penalty_order} not supported for this basis")));
        }
        let mut knots = vec![lower; degree + 1];
        knots.extend(&interior);
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Ok(SplineBasis { degree, penalty_order, lower, upper, interior, knots })
    }

    pub fn n_basis(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    /// Basis values at `x` (clamped to the basis range).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let p = self.degree;
        let t = &self.knots;
        let n = self.n_basis();
        let x = x.clamp(self.lower, self.upper);
        // knot span: t[span] <= x < t[span + 1], with the last span closed
        let span = if x >= self.upper {
            n - 1
        } else {
            let mut s = p;
            while s + 1 < t.len() && t[s + 1] <= x {
                s += 1;
            }
            s
        };
        // Cox-de Boor on the p + 1 nonzero functions
        let mut local = vec![0.0; p + 1];
        local[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { local[r] / denom } else { 0.0 };
                local[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            local[j] = saved;
        }
        let mut row = vec![0.0; n];
        for (r, v) in local.into_iter().enumerate() {
            row[span - p + r] = v;
        }
        row
    }

    pub fn design_matrix(&self, xs: &[f64]) -> DMatrix<f64> {
        let n = self.n_basis();
        let mut m = DMatrix::zeros(xs.len(), n);
        for (i, &x) in xs.iter().enumerate() {
            for (k, v) in self.eval(x).into_iter().enumerate() {
                m[(i, k)] = v;
            }
        }
        m
    }

    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.n_basis()).map(|k| self.knots[k + 1..=k + p].iter().sum::<f64>() / p.max(1) as f64).collect()
    }

    /// Difference operator `D`; the penalty is `D' D`.
    pub fn difference_operator(&self) -> DMatrix<f64> {
        let n = self.n_basis();
        let g = self.greville();
        let h_mean = (g[n - 1] - g[0]) / (n - 1) as f64;
        // first divided difference, scaled to unit mean spacing
        let mut d = DMatrix::zeros(n - 1, n);
        for k in 0..n - 1 {
            let h = (g[k + 1] - g[k]).max(f64::EPSILON);
            d[(k, k)] = -h_mean / h;
            d[(k, k + 1)] = h_mean / h;
        }
        for _ in 1..self.penalty_order {
            let r = d.nrows();
            let mut delta = DMatrix::zeros(r - 1, r);
            for k in 0..r - 1 {
                delta[(k, k)] = -1.0;
                delta[(k, k + 1)] = 1.0;
            }
            d = delta * d;
        }
        d
    }

    pub fn penalty(&self) -> DMatrix<f64> {
        let d = self.difference_operator();
        d.transpose() * d
    }

    /// Orthogonal projector onto the null space of the penalty.
    pub fn null_projector(&self) -> DMatrix<f64> {
        let k = self.penalty();
        let eig = k.clone().symmetric_eigen();
        let scale = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1.0);
        let n = k.nrows();
        let mut p = DMatrix::zeros(n, n);
        for (i, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev.abs() < 1e-9 * scale {
                let v = eig.eigenvectors.column(i);
                p += v * v.transpose();
            }
        }
        p
    }

    pub fn penalty_rank(&self) -> usize {
        self.n_basis() - self.penalty_order
    }
}

/// Cubic P-spline over `ages` with `n_knots` interior knots at age quantiles.
pub fn build_basis(ages: &[f64], n_knots: usize) -> Result<SplineBasis> {
    build_basis_with(ages, n_knots, 3, 2)
}

pub fn build_basis_with(ages: &[f64], n_knots: usize, degree: usize, penalty_order: usize) -> Result<SplineBasis> {
    if ages.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Data("ages must be non-negative".into()));
    }
    if n_knots < degree + 1 {
        return Err(Error::Config(format!("need at least {} knots, got {n_knots}", degree + 1)));
    }
    let mut sorted = ages.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_knots + 2 {
        return Err(Error::Data(format!(
            "fewer distinct ages ({}) than knots ({n_knots} interior + 2 boundary)",
            distinct.len()
        )));
    }
    let lower = sorted[0];
    let upper = sorted[sorted.len() - 1];
    let at_quantiles = |v: &[f64]| -> Vec<f64> {
        (1..=n_knots).map(|k| crate::sampler::quantile_sorted(v, k as f64 / (n_knots + 1) as f64)).collect()
    };
    let valid = |ks: &[f64]| {
        ks.windows(2).all(|w| w[1] > w[0])
            && ks.first().is_none_or(|k| *k > lower)
            && ks.last().is_none_or(|k| *k < upper)
    };
    let mut interior = at_quantiles(&sorted);
    if !valid(&interior) {
        // heavily tied ages: fall back to quantiles of the distinct values
        interior = at_quantiles(&distinct);
    }
    SplineBasis::new(lower, upper, interior, degree, penalty_order)
}

/// One tree's data aligned to the study years.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeDesign {
    pub tree_id: String,
    pub stand: usize,
    pub species: String,
    pub recruitment_year: i32,
    /// Index of the first observed year in the study window.
    pub start: usize,
    /// Log growth increments for consecutive years from `start`.
    pub log_growth: Vec<f64>,
    /// Basis rows (one per observed year).
    pub basis: DMatrix<f64>,
}

impl TreeDesign {
    pub fn len(&self) -> usize {
        self.log_growth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_growth.is_empty()
    }

    pub fn end(&self) -> usize {
        self.start + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDesign {
    pub window: StudyWindow,
    pub stands: Vec<String>,
    pub trees: Vec<TreeDesign>,
    pub variables: Vec<String>,
    /// `climate[j][t]`: standardized covariates of stand `j` in year `t`,
    /// present wherever the stand is observed.
    pub climate: Vec<Vec<Option<DVector<f64>>>>,
    /// `observed[j][t]`: at least one tree of stand `j` has a ring in year `t`.
    pub observed: Vec<Vec<bool>>,
    pub basis: SplineBasis,
    pub intercept: bool,
}

impl ModelDesign {
    pub fn n_years(&self) -> usize {
        self.window.len()
    }

    pub fn n_stands(&self) -> usize {
        self.stands.len()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn year(&self, t: usize) -> i32 {
        self.window.start_year + t as i32
    }

    pub fn n_observations(&self) -> usize {
        self.trees.iter().map(TreeDesign::len).sum()
    }

    /// `(stand, year)` cells with data, in stand-major order.
    pub fn observed_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, row) in self.observed.iter().enumerate() {
            for (t, &o) in row.iter().enumerate() {
                if o {
                    out.push((j, t));
                }
            }
        }
        out
    }

    pub fn trees_in_stand(&self, j: usize) -> impl Iterator<Item = (usize, &TreeDesign)> {
        self.trees.iter().enumerate().filter(move |(_, t)| t.stand == j)
    }

    /// Contiguous year range `[lo, hi)` spanned by a stand's trees.
    pub fn stand_span(&self, j: usize) -> Option<(usize, usize)> {
        let mut span: Option<(usize, usize)> = None;
        for (_, tree) in self.trees_in_stand(j) {
            span = Some(match span {
                None => (tree.start, tree.end()),
                Some((a, b)) => (a.min(tree.start), b.max(tree.end())),
            });
        }
        span
    }

    /// Number of observed stands per year.
    pub fn stands_per_year(&self) -> Vec<usize> {
        (0..self.n_years()).map(|t| self.observed.iter().filter(|r| r[t]).count()).collect()
    }

    /// Builds a design directly from aligned arrays; used by the simulator.
    pub fn from_parts(
        window: StudyWindow,
        stands: Vec<String>,
        trees: Vec<TreeDesign>,
        variables: Vec<String>,
        climate: Vec<Vec<Option<DVector<f64>>>>,
        basis: SplineBasis,
    ) -> Result<Self> {
        let t_len = window.len();
        let mut observed = vec![vec![false; t_len]; stands.len()];
        for tree in &trees {
            if tree.stand >= stands.len() || tree.end() > t_len {
                return Err(Error::Data(format!("tree {} out of design bounds", tree.tree_id)));
            }
            for t in tree.start..tree.end() {
                observed[tree.stand][t] = true;
            }
        }
        let design = ModelDesign { window, stands, trees, variables, climate, observed, basis, intercept: false };
        design.validate()?;
        Ok(design)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.n_vars();
        for (j, row) in self.observed.iter().enumerate() {
            for (t, &o) in row.iter().enumerate() {
                if o {
                    match &self.climate[j][t] {
                        Some(f) if f.len() == p => {}
                        Some(f) => {
                            return Err(Error::Data(format!(
                                "stand {} year {}: climate row has {} values, expected {p}",
                                self.stands[j],
                                self.year(t),
                                f.len()
                            )))
                        }
                        None => {
                            return Err(Error::Data(format!(
                                "stand {} year {}: no climate row",
                                self.stands[j],
                                self.year(t)
                            )))
                        }
                    }
                }
            }
        }
        for tree in &self.trees {
            if tree.basis.nrows() != tree.len() || tree.basis.ncols() != self.basis.n_basis() {
                return Err(Error::Data(format!("tree {}: basis shape mismatch", tree.tree_id)));
            }
        }
        Ok(())
    }

    /// Climate matrix of observed cells (rows in `observed_cells` order).
    pub fn climate_rows(&self) -> (Vec<(usize, usize)>, DMatrix<f64>) {
        let cells = self.observed_cells();
        let p = self.n_vars();
        let mut f = DMatrix::zeros(cells.len(), p);
        for (r, &(j, t)) in cells.iter().enumerate() {
            let row = self.climate[j][t].as_ref().expect("validated");
            for k in 0..p {
                f[(r, k)] = row[k];
            }
        }
        (cells, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignOptions {
    pub n_knots: usize,
    pub degree: usize,
    pub penalty_order: usize,
    /// Adds a constant column to the climate design.
    pub intercept: bool,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { n_knots: 10, degree: 3, penalty_order: 2, intercept: false }
    }
}

pub const INTERCEPT: &str = "INTERCEPT";

/// Aligns rings and standardized climate into a [`ModelDesign`].
pub fn assemble(
    rings: &[RingSeries],
    seasonal: &SeasonalClimate,
    selected: &[String],
    window: StudyWindow,
    options: &DesignOptions,
) -> Result<ModelDesign> {
    let var_idx: Vec<usize> = selected
        .iter()
        .map(|v| seasonal.index_of(v).ok_or_else(|| Error::UnknownVariable(v.clone())))
        .collect::<Result<_>>()?;
    if seasonal.standardized.is_empty() {
        return Err(Error::Data("seasonal climate has not been standardized".into()));
    }
    for (&k, name) in var_idx.iter().zip(selected) {
        if seasonal.standardized.values().all(|z| z[k].is_none()) {
            return Err(Error::ZeroVariance(name.clone()));
        }
    }
    let truncated: Vec<RingSeries> = rings.iter().filter_map(|r| r.truncate(window)).collect();
    if truncated.is_empty() {
        return Err(Error::Data("no ring data inside the study window".into()));
    }
    let mut stand_index: BTreeMap<String, usize> = BTreeMap::new();
    for r in &truncated {
        let n = stand_index.len();
        stand_index.entry(r.stand_id.clone()).or_insert(n);
    }
    // sorted stand order
    let stands: Vec<String> = stand_index.keys().cloned().collect();
    let stand_index: BTreeMap<&str, usize> = stands.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let climate_stands: std::collections::BTreeSet<&str> = seasonal.raw.keys().map(|(s, _)| s.as_str()).collect();
    for s in &stands {
        if !climate_stands.contains(s.as_str()) {
            return Err(Error::Data(format!("stand {s} has rings but no climate")));
        }
    }

    let ages: Vec<f64> = truncated.iter().flat_map(|r| r.years().map(move |y| r.age(y) as f64)).collect();
    let basis = build_basis_with(&ages, options.n_knots, options.degree, options.penalty_order)?;

    let trees: Vec<TreeDesign> = truncated
        .iter()
        .map(|r| {
            let ages: Vec<f64> = r.years().map(|y| r.age(y) as f64).collect();
            TreeDesign {
                tree_id: r.tree_id.clone(),
                stand: stand_index[r.stand_id.as_str()],
                species: r.species.clone(),
                recruitment_year: r.recruitment_year,
                start: (r.first_year - window.start_year) as usize,
                log_growth: r.widths.iter().map(|w| w.ln()).collect(),
                basis: basis.design_matrix(&ages),
            }
        })
        .collect();

    let t_len = window.len();
    let mut climate = vec![vec![None; t_len]; stands.len()];
    let mut variables: Vec<String> = Vec::new();
    if options.intercept {
        variables.push(INTERCEPT.to_string());
    }
    variables.extend(selected.iter().cloned());
    let mut observed = vec![vec![false; t_len]; stands.len()];
    for tree in &trees {
        for t in tree.start..tree.end() {
            observed[tree.stand][t] = true;
        }
    }
    for (j, s) in stands.iter().enumerate() {
        for t in 0..t_len {
            let year = window.start_year + t as i32;
            let z = seasonal.standardized.get(&(s.clone(), year));
            let mut row = Vec::with_capacity(variables.len());
            if options.intercept {
                row.push(1.0);
            }
            let mut complete = z.is_some();
            if let Some(z) = z {
                for (&k, name) in var_idx.iter().zip(selected) {
                    match z[k] {
                        Some(v) => row.push(v),
                        None => {
                            complete = false;
                            if observed[j][t] {
                                return Err(Error::Data(format!("stand {s} year {year}: variable {name} missing")));
                            }
                        }
                    }
                }
            } else if observed[j][t] {
                return Err(Error::Data(format!("stand {s} year {year}: no climate row")));
            }
            if complete {
                climate[j][t] = Some(DVector::from_vec(row));
            }
        }
    }
    let design =
        ModelDesign { window, stands, trees, variables, climate, observed, basis, intercept: options.intercept };
    design.validate()?;
    Ok(design)
}

/// Audit table of a design: dimensions, knots and the observation mask.
pub fn write_design_summary<W: std::io::Write>(writer: W, design: &ModelDesign) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["section", "key", "value"])?;
    let dims = [
        ("n_trees", design.n_trees().to_string()),
        ("n_stands", design.n_stands().to_string()),
        ("n_years", design.n_years().to_string()),
        ("n_vars", design.n_vars().to_string()),
        ("n_observations", design.n_observations().to_string()),
        ("start_year", design.window.start_year.to_string()),
        ("end_year", design.window.end_year.to_string()),
        ("degree", design.basis.degree.to_string()),
        ("penalty_order", design.basis.penalty_order.to_string()),
    ];
    for (k, v) in dims {
        w.write_record(["dimension", k, &v])?;
    }
    for (k, v) in design.variables.iter().enumerate() {
        w.write_record(["variable", &k.to_string(), v])?;
    }
    w.write_record(["knot", "lower", &format!("{:.6}", design.basis.lower)])?;
    for (k, v) in design.basis.interior.iter().enumerate() {
        w.write_record(["knot", &k.to_string(), &format!("{v:.6}")])?;
    }
    w.write_record(["knot", "upper", &format!("{:.6}", design.basis.upper)])?;
    for (j, s) in design.stands.iter().enumerate() {
        for t in 0..design.n_years() {
            if design.observed[j][t] {
                let n = design.trees_in_stand(j).filter(|(_, tr)| t >= tr.start && t < tr.end()).count();
                w.write_record(["mask", &format!("{s}:{}", design.year(t)), &n.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<design writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::water_balance::standardize;

    fn basis_0_100() -> SplineBasis {
        let ages: Vec<f64> = (0..=100).map(f64::from).collect();
        build_basis(&ages, 10).unwrap()
    }

    #[test]
    fn partition_of_unity() {
        let b = basis_0_100();
        assert_eq!(b.n_basis(), 14);
        for k in 0..=1000 {
            let x = k as f64 * 0.1;
            let s: f64 = b.eval(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "x={x} sum={s}");
        }
    }

    #[test]
    fn reproduces_constants_and_lines() {
        let b = basis_0_100();
        let g = b.greville();
        for x in [0.0, 3.3, 50.0, 99.9, 100.0] {
            let row = b.eval(x);
            let c: f64 = row.iter().map(|v| v * 2.5).sum();
            assert!((c - 2.5).abs() < 1e-12);
            let l: f64 = row.iter().zip(&g).map(|(v, g)| v * g).sum();
            assert!((l - x).abs() < 1e-9, "{x} {l}");
        }
    }

    #[test]
    fn heavy_penalty_fits_straight_line() {
        // Oracle: the limit is the least-squares line, computed directly.
        let ages: Vec<f64> = (0..120).map(|k| (k as f64 * 0.7).powf(1.2)).collect();
        let y: Vec<f64> = ages.iter().map(|a| (a / 15.0).sin() + 0.02 * a).collect();
        let b = build_basis(&ages, 10).unwrap();
        let x = b.design_matrix(&ages);
        let k = b.penalty();
        let lhs = x.transpose() * &x + k * 1e9;
        let rhs = x.transpose() * DVector::from_column_slice(&y);
        let coef = lhs.lu().solve(&rhs).unwrap();
        let fit = &x * coef;

        let n = ages.len() as f64;
        let ma = ages.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = ages.iter().zip(&y).map(|(a, v)| (a - ma) * (v - my)).sum();
        let sxx: f64 = ages.iter().map(|a| (a - ma).powi(2)).sum();
        let slope = sxy / sxx;
        for (i, a) in ages.iter().enumerate() {
            let line = my + slope * (a - ma);
            assert!((fit[i] - line).abs() < 1e-4, "age {a}: {} vs {line}", fit[i]);
        }
    }

    #[test]
    fn null_space_is_two_dimensional() {
        let b = basis_0_100();
        let p = b.null_projector();
        assert!((p.trace() - 2.0).abs() < 1e-9);
        assert_eq!(b.penalty_rank(), 12);
    }

    #[test]
    fn too_few_distinct_ages() {
        assert!(build_basis(&[1.0, 2.0, 3.0, 1.0, 2.0], 10).is_err());
        assert!(build_basis(&[0.0, 1.0], 2).is_err());
    }

    fn seasonal_fixture(stand: &str, years: std::ops::RangeInclusive<i32>) -> SeasonalClimate {
        let names: Vec<String> = crate::water_balance::seasonal_var_names();
        let mut s = SeasonalClimate::new(names.clone());
        for y in years {
            let row = (0..names.len()).map(|k| Some(((y * 7 + k as i32 * 13) % 17) as f64)).collect();
            s.raw.insert((stand.to_string(), y), row);
        }
        standardize(s).unwrap()
    }

    fn tree(id: &str, first: i32, n: usize, recruit: i32) -> RingSeries {
        RingSeries::new(id, "S1", "P1", "PIMA", recruit, first, (0..n).map(|k| 1.0 + 0.01 * k as f64).collect())
            .unwrap()
    }

    #[test]
    fn assemble_counts_rows() {
        let seasonal = seasonal_fixture("S1", 1950..=2007);
        let rings = vec![tree("A", 2000, 3, 1960), tree("B", 2000, 3, 1965)];
        let vars = vec!["SUM-DEF".to_string(), "SNOW".to_string()];
        let opts = DesignOptions { n_knots: 4, ..Default::default() };
        let d = assemble(&rings, &seasonal, &vars, StudyWindow::new(2000, 2002).unwrap(), &opts).unwrap();
        assert_eq!(d.n_observations(), 6);
        assert_eq!(d.observed_cells().len(), 3);
        assert_eq!(d.climate_rows().1.shape(), (3, 2));
    }

    #[test]
    fn assemble_masks_unobserved_years() {
        let seasonal = seasonal_fixture("S1", 1897..=2007);
        let rings = vec![tree("A", 1990, 18, 1950), tree("B", 1985, 23, 1940)];
        let d =
            assemble(&rings, &seasonal, &["SUM-DEF".to_string()], StudyWindow::default(), &DesignOptions::default())
                .unwrap();
        let a = d.trees.iter().find(|t| t.tree_id == "A").unwrap();
        assert_eq!(d.year(a.start), 1990);
        assert_eq!(d.year(a.end() - 1), 2007);
        assert!(!d.observed[0][d.window.len() - 30]);
        assert!(d.observed[0][(1985 - 1897) as usize]);
        assert!(!d.observed[0][(1984 - 1897) as usize]);
    }

    #[test]
    fn assemble_rejects_unknown_variable_and_missing_climate() {
        let seasonal = seasonal_fixture("S1", 1990..=2007);
        let rings = vec![tree("A", 2000, 8, 1950)];
        let w = StudyWindow::new(1990, 2007).unwrap();
        let o = DesignOptions { n_knots: 2, ..Default::default() };
        assert!(matches!(
            assemble(&rings, &seasonal, &["JUL-RAIN".to_string()], w, &o),
            Err(Error::UnknownVariable(v)) if v == "JUL-RAIN"
        ));
        let mut other = rings[0].clone();
        other.stand_id = "S9".into();
        assert!(assemble(&[other], &seasonal, &["SNOW".to_string()], w, &o).is_err());
    }
}
