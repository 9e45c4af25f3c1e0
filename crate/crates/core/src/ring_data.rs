//! Tree-ring series, stand membership and stand initiation years.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Species codes of the fifteen study taxa.
pub const DEFAULT_SPECIES: [&str; 15] = [
    "ABBA", "ACRU", "ACSA", "BEPA", "FRNI", "LALA", "PIGL", "PIMA", "PIBA", "PIRE", "PIST", "POGR", "POTR", "QURU",
    "THOC",
];

/// Known forest tent caterpillar hosts among [`DEFAULT_SPECIES`].
pub const FTC_HOSTS: [&str; 5] = ["ACSA", "BEPA", "POGR", "POTR", "QURU"];

/// One tree's contiguous record of annual growth increments (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSeries {
    pub tree_id: String,
    pub stand_id: String,
    pub plot_id: String,
    pub species: String,
    pub recruitment_year: i32,
    pub first_year: i32,
    /// Widths for `first_year, first_year + 1, ...`.
    pub widths: Vec<f64>,
}

impl RingSeries {
    /// Builds a series and checks positivity and recruitment ordering.
    pub fn new(
        tree_id: impl Into<String>,
        stand_id: impl Into<String>,
        plot_id: impl Into<String>,
        species: impl Into<String>,
        recruitment_year: i32,
        first_year: i32,
        widths: Vec<f64>,
    ) -> Result<Self> {
        let s = RingSeries {
            tree_id: tree_id.into(),
            stand_id: stand_id.into(),
            plot_id: plot_id.into(),
            species: species.into(),
            recruitment_year,
            first_year,
            widths,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Data(format!("tree {} has no rings", self.tree_id)));
        }
        for (k, &w) in self.widths.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::NonPositiveWidth {
                    tree_id: self.tree_id.clone(),
                    year: self.first_year + k as i32,
                    width: w,
                });
            }
        }
        if self.recruitment_year > self.first_year {
            return Err(Error::Data(format!(
                "tree {}: recruitment year {} after first ring {}",
                self.tree_id, self.recruitment_year, self.first_year
            )));
        }
        Ok(())
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.widths.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.widths.len()).map(move |k| self.first_year + k as i32)
    }

    pub fn width(&self, year: i32) -> Option<f64> {
        if year < self.first_year {
            return None;
        }
        self.widths.get((year - self.first_year) as usize).copied()
    }

    pub fn age(&self, year: i32) -> i32 {
        year - self.recruitment_year
    }

    /// Restricts the record to `window`; `None` when nothing remains.
    pub fn truncate(&self, window: StudyWindow) -> Option<RingSeries> {
        let lo = self.first_year.max(window.start_year);
        let hi = self.last_year().min(window.end_year);
        if lo > hi {
            return None;
        }
        let a = (lo - self.first_year) as usize;
        let b = (hi - self.first_year) as usize;
        Some(RingSeries { first_year: lo, widths: self.widths[a..=b].to_vec(), ..self.clone() })
    }
}

/// Natural log of every increment, keyed by year.
pub fn log_growth(series: &RingSeries) -> BTreeMap<i32, f64> {
    series.years().zip(series.widths.iter().map(|w| w.ln())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start_year: i32,
    pub end_year: i32,
}

impl Default for StudyWindow {
    fn default() -> Self {
        StudyWindow { start_year: 1897, end_year: 2007 }
    }
}

impl StudyWindow {
    pub fn new(start_year: i32, end_year: i32) -> Result<Self> {
        if start_year >= end_year {
            return Err(Error::Config(format!("study window start {start_year} must precede end {end_year}")));
        }
        Ok(StudyWindow { start_year, end_year })
    }

    pub fn len(&self) -> usize {
        (self.end_year - self.start_year + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.start_year..=self.end_year).contains(&year)
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.start_year..=self.end_year
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandTable {
    pub stand_id: String,
    pub tree_ids: Vec<String>,
    pub initiation_year: i32,
}

/// Groups trees by stand (sorted by stand id) and derives each initiation year.
pub fn stand_tables(rings: &[RingSeries]) -> Result<Vec<StandTable>> {
    let mut by_stand: BTreeMap<&str, Vec<&RingSeries>> = BTreeMap::new();
    for r in rings {
        by_stand.entry(r.stand_id.as_str()).or_default().push(r);
    }
    by_stand
        .into_iter()
        .map(|(id, trees)| {
            let recruit: Vec<i32> = trees.iter().map(|t| t.recruitment_year).collect();
            Ok(StandTable {
                stand_id: id.to_string(),
                tree_ids: trees.iter().map(|t| t.tree_id.clone()).collect(),
                initiation_year: initiation_from_years(&recruit)?,
            })
        })
        .collect()
}

/// Stand initiation: 25th percentile of member recruitment years, taken as
/// the order statistic at 1-based rank `ceil(0.25 n)`.
pub fn derive_initiation(stand: &[RingSeries]) -> Result<i32> {
    let years: Vec<i32> = stand.iter().map(|r| r.recruitment_year).collect();
    initiation_from_years(&years)
}

pub fn initiation_from_years(years: &[i32]) -> Result<i32> {
    if years.is_empty() {
        return Err(Error::EmptyStand);
    }
    let mut sorted = years.to_vec();
    sorted.sort_unstable();
    let rank = (sorted.len() as f64 * 0.25).ceil().max(1.0) as usize;
    Ok(sorted[rank - 1])
}

/// Species codes the data may use. Unknown codes are logged, not rejected.
#[derive(Debug, Clone)]
pub struct SpeciesRegistry {
    codes: BTreeSet<String>,
}

impl Default for SpeciesRegistry {
    fn default() -> Self {
        SpeciesRegistry { codes: DEFAULT_SPECIES.iter().map(|s| s.to_string()).collect() }
    }
}

impl SpeciesRegistry {
    pub fn insert(&mut self, code: impl Into<String>) {
        self.codes.insert(code.into());
    }

    pub fn contains(&self, code: &str) -> bool {
        self.codes.contains(code)
    }

    /// Returns the codes in `rings` that are not registered, logging each once.
    pub fn check(&self, rings: &[RingSeries]) -> Vec<String> {
        let unknown: BTreeSet<&str> = rings.iter().map(|r| r.species.as_str()).filter(|c| !self.contains(c)).collect();
        for c in &unknown {
            log::warn!("unregistered species code `{c}`");
        }
        unknown.into_iter().map(str::to_string).collect()
    }
}

/// Column names of the long-format ring file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingSchema {
    pub tree_id: String,
    pub stand_id: String,
    pub plot_id: String,
    pub species: String,
    pub recruitment_year: String,
    pub year: String,
    pub width_mm: String,
}

impl Default for RingSchema {
    fn default() -> Self {
        RingSchema {
            tree_id: "tree_id".into(),
            stand_id: "stand_id".into(),
            plot_id: "plot_id".into(),
            species: "species".into(),
            recruitment_year: "recruitment_year".into(),
            year: "year".into(),
            width_mm: "width_mm".into(),
        }
    }
}

struct Row {
    stand_id: String,
    plot_id: String,
    species: String,
    recruitment_year: i32,
    year: i32,
    width: f64,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Data(format!("line {line}: cannot parse {what} from `{field}`")))
}

pub fn load_rings(path: impl AsRef<Path>, schema: &RingSchema) -> Result<Vec<RingSeries>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_rings(file, schema)
}

/// Reads long-format rows, groups them by tree and validates each record.
pub fn read_rings<R: std::io::Read>(reader: R, schema: &RingSchema) -> Result<Vec<RingSeries>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_tree = column(&headers, &schema.tree_id)?;
    let c_stand = column(&headers, &schema.stand_id)?;
    let c_plot = column(&headers, &schema.plot_id)?;
    let c_species = column(&headers, &schema.species)?;
    let c_recruit = column(&headers, &schema.recruitment_year)?;
    let c_year = column(&headers, &schema.year)?;
    let c_width = column(&headers, &schema.width_mm)?;

    let mut trees: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let tree = rec[c_tree].trim().to_string();
        let row = Row {
            stand_id: rec[c_stand].trim().to_string(),
            plot_id: rec[c_plot].trim().to_string(),
            species: rec[c_species].trim().to_string(),
            recruitment_year: parse(&rec[c_recruit], "recruitment_year", line)?,
            year: parse(&rec[c_year], "year", line)?,
            width: parse(&rec[c_width], "width_mm", line)?,
        };
        if !(row.width > 0.0) {
            return Err(Error::NonPositiveWidth { tree_id: tree, year: row.year, width: row.width });
        }
        trees.entry(tree).or_default().push(row);
    }

    let mut out = Vec::with_capacity(trees.len());
    for (tree_id, mut rows) in trees {
        rows.sort_by_key(|r| r.year);
        let first = &rows[0];
        for r in &rows[1..] {
            if r.stand_id != first.stand_id {
                return Err(Error::Data(format!(
                    "tree {tree_id} listed in stands {} and {}",
                    first.stand_id, r.stand_id
                )));
            }
        }
        let mut missing = Vec::new();
        for w in rows.windows(2) {
            if w[1].year == w[0].year {
                return Err(Error::Data(format!("tree {tree_id}: duplicate year {}", w[0].year)));
            }
            missing.extend(w[0].year + 1..w[1].year);
        }
        if !missing.is_empty() {
            return Err(Error::YearGap { tree_id, missing });
        }
        out.push(RingSeries::new(
            tree_id,
            first.stand_id.clone(),
            first.plot_id.clone(),
            first.species.clone(),
            first.recruitment_year,
            first.year,
            rows.iter().map(|r| r.width).collect(),
        )?);
    }
    Ok(out)
}

pub fn save_rings(path: impl AsRef<Path>, rings: &[RingSeries]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    write_rings(file, rings)
}

pub fn write_rings<W: std::io::Write>(writer: W, rings: &[RingSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tree_id", "stand_id", "plot_id", "species", "recruitment_year", "year", "width_mm"])?;
    for r in rings {
        for (year, width) in r.years().zip(&r.widths) {
            w.write_record([
                r.tree_id.as_str(),
                &r.stand_id,
                &r.plot_id,
                &r.species,
                &r.recruitment_year.to_string(),
                &year.to_string(),
                // shortest representation that round-trips exactly
                &format!("{width:?}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<ring writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "tree_id,stand_id,plot_id,species,recruitment_year,year,width_mm\n";

    #[test]
    fn groups_rows_into_one_series() {
        let csv =
            format!("{HEADER}A,S1,P1,PIMA,1990,2001,0.8\nA,S1,P1,PIMA,1990,2000,1.2\nA,S1,P1,PIMA,1990,2002,1.5\n");
        let rings = read_rings(csv.as_bytes(), &RingSchema::default()).unwrap();
        assert_eq!(rings.len(), 1);
        assert_eq!(rings[0].first_year, 2000);
        assert_eq!(rings[0].widths, vec![1.2, 0.8, 1.5]);
    }

    #[test]
    fn zero_width_names_tree_and_year() {
        let csv = format!("{HEADER}A,S1,P1,PIMA,1990,2000,0.0\n");
        match read_rings(csv.as_bytes(), &RingSchema::default()) {
            Err(Error::NonPositiveWidth { tree_id, year, .. }) => {
                assert_eq!(tree_id, "A");
                assert_eq!(year, 2000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gap_lists_missing_years() {
        let csv = format!("{HEADER}A,S1,P1,PIMA,1990,2000,1.0\nA,S1,P1,PIMA,1990,2002,1.0\n");
        match read_rings(csv.as_bytes(), &RingSchema::default()) {
            Err(Error::YearGap { tree_id, missing }) => {
                assert_eq!(tree_id, "A");
                assert_eq!(missing, vec![2001]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let csv = "tree_id,stand_id,year,width_mm\nA,S,2000,1.0\n";
        assert!(matches!(
            read_rings(csv.as_bytes(), &RingSchema::default()),
            Err(Error::MissingColumn(c)) if c == "plot_id"
        ));
    }

    #[test]
    fn initiation_order_statistic() {
        assert_eq!(initiation_from_years(&[1950]).unwrap(), 1950);
        assert_eq!(initiation_from_years(&[1900, 1900, 1900, 1980]).unwrap(), 1900);
        // brute force: sorted, rank ceil(0.25 * 5) = 2
        assert_eq!(initiation_from_years(&[1940, 1900, 1930, 1910, 1920]).unwrap(), 1910);
        assert!(matches!(initiation_from_years(&[]), Err(Error::EmptyStand)));
    }

    #[test]
    fn log_growth_values() {
        let s = RingSeries::new("A", "S", "P", "PIMA", 1990, 2000, vec![1.0, std::f64::consts::E, 1.2, 0.8]).unwrap();
        let lg = log_growth(&s);
        assert_eq!(lg[&2000], 0.0);
        assert!((lg[&2001] - 1.0).abs() < 1e-15);
        assert!((lg[&2002] - 0.18232).abs() < 1e-5);
        assert!((lg[&2003] + 0.22314).abs() < 1e-5);
    }

    #[test]
    fn truncation_keeps_contiguous_tail() {
        let s = RingSeries::new("A", "S", "P", "PIMA", 1880, 1890, vec![1.0; 20]).unwrap();
        let t = s.truncate(StudyWindow::new(1897, 2007).unwrap()).unwrap();
        assert_eq!(t.first_year, 1897);
        assert_eq!(t.last_year(), 1909);
        assert_eq!(t.recruitment_year, 1880);
    }

    #[test]
    fn unknown_species_warns_only() {
        let s = RingSeries::new("A", "S", "P", "XXXX", 1990, 2000, vec![1.0]).unwrap();
        assert_eq!(SpeciesRegistry::default().check(&[s]), vec!["XXXX".to_string()]);
    }
}
