//! Monthly Thornthwaite water balance and seasonal climate covariates.
//!
//! Monthly temperature and precipitation drive a snow pack and a single soil
//! bucket. Potential evapotranspiration follows Thornthwaite with an annual
//! heat index and a daylength correction; actual evapotranspiration is
//! limited by rain, melt and stored soil water. Seasonal aggregates follow the
//! growth-year convention: fall and lagged summer come from the year before
//! growth, winter is December of the previous year through February.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonthlyClimate {
    pub year: i32,
    /// 1..=12
    pub month: u32,
    pub tmin: f64,
    pub tmean: f64,
    pub tmax: f64,
    pub precip: f64,
}

impl MonthlyClimate {
    pub fn validate(&self) -> Result<()> {
        if !(1..=12).contains(&self.month) {
            return Err(Error::Data(format!("month {} out of range", self.month)));
        }
        if !(self.tmin <= self.tmean && self.tmean <= self.tmax) {
            return Err(Error::Data(format!(
                "{}-{:02}: temperatures not ordered (tmin {}, tmean {}, tmax {})",
                self.year, self.month, self.tmin, self.tmean, self.tmax
            )));
        }
        if !(self.precip >= 0.0) {
            return Err(Error::Data(format!("{}-{:02}: negative precipitation", self.year, self.month)));
        }
        Ok(())
    }
}

/// Monthly climate of one stand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandClimate {
    pub stand_id: String,
    pub latitude: f64,
    /// Sorted by (year, month).
    pub months: Vec<MonthlyClimate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaterBalanceParams {
    /// Soil available water capacity (mm).
    pub awc: f64,
    /// At or below this mean temperature all precipitation is snow.
    pub snow_temp: f64,
    /// At or above this mean temperature all precipitation is rain.
    pub rain_temp: f64,
    /// Melt fraction is `clamp((tmean - melt_base) / melt_range, 0, 1)`.
    pub melt_base: f64,
    pub melt_range: f64,
    pub spinup_max_cycles: usize,
    pub spinup_tolerance: f64,
}

impl Default for WaterBalanceParams {
    fn default() -> Self {
        WaterBalanceParams {
            awc: 150.0,
            snow_temp: 0.0,
            rain_temp: 6.0,
            melt_base: 0.0,
            melt_range: 6.0,
            spinup_max_cycles: 50,
            spinup_tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketState {
    pub snowpack: f64,
    pub soil_water: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketFlux {
    pub aet: f64,
    pub deficit: f64,
    pub runoff: f64,
    pub rain: f64,
    pub snowfall: f64,
    pub melt: f64,
}

/// One month of water balance output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterBalanceMonth {
    pub year: i32,
    pub month: u32,
    pub precip: f64,
    pub pet: f64,
    pub aet: f64,
    pub deficit: f64,
    pub runoff: f64,
    /// End-of-month snow water equivalent (mm).
    pub snowpack: f64,
    /// End-of-month soil water (mm).
    pub soil_water: f64,
    /// Mass-balance residual `P - dSnow - dSoil - AET - runoff`.
    pub closure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterBalanceSeries {
    pub stand_id: String,
    pub params: WaterBalanceParams,
    pub months: Vec<WaterBalanceMonth>,
}

const MID_MONTH_DOY: [f64; 12] = [15.0, 46.0, 74.0, 105.0, 135.0, 166.0, 196.0, 227.0, 258.0, 288.0, 319.0, 349.0];

/// Mean daylength (hours) at mid-month from the solar declination.
pub fn daylength_hours(latitude: f64, month: u32) -> f64 {
    let doy = MID_MONTH_DOY[(month - 1) as usize];
    let decl = 0.409 * (2.0 * PI * doy / 365.0 - 1.39).sin();
    let lat = latitude.to_radians();
    let x = (-lat.tan() * decl.tan()).clamp(-1.0, 1.0);
    24.0 / PI * x.acos()
}

/// Annual heat index from twelve monthly mean temperatures.
pub fn heat_index(tmean: &[f64; 12]) -> f64 {
    tmean.iter().filter(|&&t| t > 0.0).map(|t| (t / 5.0).powf(1.514)).sum()
}

pub fn thornthwaite_exponent(heat_index: f64) -> f64 {
    let i = heat_index;
    6.75e-7 * i.powi(3) - 7.71e-5 * i.powi(2) + 1.792e-2 * i + 0.49239
}

/// Monthly potential evapotranspiration (mm) for one year of mean temperatures.
pub fn thornthwaite_pet(tmean: &[f64; 12], latitude: f64) -> Result<[f64; 12]> {
    if !(-66.5..=66.5).contains(&latitude) {
        return Err(Error::Data(format!("latitude {latitude} outside [-66.5, 66.5]")));
    }
    let hi = heat_index(tmean);
    let mut pet = [0.0; 12];
    if hi <= 0.0 {
        return Ok(pet);
    }
    let a = thornthwaite_exponent(hi);
    for (m, &t) in tmean.iter().enumerate() {
        if t > 0.0 {
            let correction = daylength_hours(latitude, m as u32 + 1) / 12.0;
            pet[m] = 16.0 * correction * (10.0 * t / hi).powf(a);
        }
    }
    Ok(pet)
}

/// Advances snow and soil stores by one month.
pub fn step_bucket(
    state: BucketState,
    tmean: f64,
    precip: f64,
    pet: f64,
    params: &WaterBalanceParams,
) -> (BucketState, BucketFlux) {
    let precip = precip.max(0.0);
    let pet = pet.max(0.0);
    let snow_frac = if tmean <= params.snow_temp {
        1.0
    } else if tmean >= params.rain_temp {
        0.0
    } else {
        (params.rain_temp - tmean) / (params.rain_temp - params.snow_temp)
    };
    let snowfall = precip * snow_frac;
    let rain = precip - snowfall;
    let pack = state.snowpack.max(0.0) + snowfall;
    let melt_frac = ((tmean - params.melt_base) / params.melt_range).clamp(0.0, 1.0);
    let melt = pack * melt_frac;
    let snowpack = pack - melt;

    let supply = rain + melt;
    let soil = state.soil_water.clamp(0.0, params.awc);
    let (aet, soil_after, runoff) = if supply >= pet {
        let stored = soil + (supply - pet);
        (pet, stored.min(params.awc), (stored - params.awc).max(0.0))
    } else {
        let draw = (pet - supply).min(soil);
        // supply + (pet - supply) can round one ulp above pet
        ((supply + draw).min(pet), soil - draw, 0.0)
    };
    (
        BucketState { snowpack, soil_water: soil_after },
        BucketFlux { aet, deficit: pet - aet, runoff, rain, snowfall, melt },
    )
}

fn twelve(months: &[MonthlyClimate], f: impl Fn(&MonthlyClimate) -> f64) -> [f64; 12] {
    let mut out = [0.0; 12];
    for m in months {
        out[(m.month - 1) as usize] = f(m);
    }
    out
}

/// Runs the bucket over a stand's full monthly record.
///
/// The record must be contiguous and cover whole calendar years (PET needs the
/// year's heat index). The initial state is spun up by cycling the first year
/// until the stores settle.
pub fn run_water_balance(climate: &StandClimate, params: &WaterBalanceParams) -> Result<WaterBalanceSeries> {
    let months = &climate.months;
    if months.is_empty() || !months.len().is_multiple_of(12) {
        return Err(Error::Data(format!(
            "stand {}: monthly record must cover whole years ({} months)",
            climate.stand_id,
            months.len()
        )));
    }
    for (k, m) in months.iter().enumerate() {
        m.validate()?;
        let expect_year = months[0].year + (k / 12) as i32;
        let expect_month = (k % 12) as u32 + 1;
        if m.year != expect_year || m.month != expect_month {
            return Err(Error::Data(format!(
                "stand {}: expected {expect_year}-{expect_month:02}, found {}-{:02}",
                climate.stand_id, m.year, m.month
            )));
        }
    }
    let mut pets = Vec::with_capacity(months.len());
    for year in months.chunks(12) {
        pets.extend(thornthwaite_pet(&twelve(year, |m| m.tmean), climate.latitude)?);
    }

    let mut state = BucketState { snowpack: 0.0, soil_water: params.awc };
    for _ in 0..params.spinup_max_cycles {
        let start = state;
        for (m, pet) in months[..12].iter().zip(&pets[..12]) {
            state = step_bucket(state, m.tmean, m.precip, *pet, params).0;
        }
        if (state.snowpack - start.snowpack).abs() < params.spinup_tolerance
            && (state.soil_water - start.soil_water).abs() < params.spinup_tolerance
        {
            break;
        }
    }

    let mut out = Vec::with_capacity(months.len());
    for (m, &pet) in months.iter().zip(&pets) {
        let (next, flux) = step_bucket(state, m.tmean, m.precip, pet, params);
        let closure =
            m.precip - (next.snowpack - state.snowpack) - (next.soil_water - state.soil_water) - flux.aet - flux.runoff;
        out.push(WaterBalanceMonth {
            year: m.year,
            month: m.month,
            precip: m.precip,
            pet,
            aet: flux.aet,
            deficit: flux.deficit,
            runoff: flux.runoff,
            snowpack: next.snowpack,
            soil_water: next.soil_water,
            closure,
        });
        state = next;
    }
    Ok(WaterBalanceSeries { stand_id: climate.stand_id.clone(), params: *params, months: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Season {
    Fall,
    Winter,
    Spring,
    Summer,
    SummerLag,
}

impl Season {
    pub const ALL: [Season; 5] = [Season::Fall, Season::Winter, Season::Spring, Season::Summer, Season::SummerLag];

    fn prefix(self) -> &'static str {
        match self {
            Season::Fall => "FAL",
            Season::Winter => "WIN",
            Season::Spring => "SPR",
            Season::Summer | Season::SummerLag => "SUM",
        }
    }

    /// `(year offset, month)` pairs relative to growth year `t`.
    pub fn months(self) -> [(i32, u32); 3] {
        match self {
            Season::Fall => [(-1, 9), (-1, 10), (-1, 11)],
            Season::Winter => [(-1, 12), (0, 1), (0, 2)],
            Season::Spring => [(0, 3), (0, 4), (0, 5)],
            Season::Summer => [(0, 6), (0, 7), (0, 8)],
            Season::SummerLag => [(-1, 6), (-1, 7), (-1, 8)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    Tmin,
    Tmean,
    Tmax,
    Aet,
    Pet,
    Def,
    Snow,
}

impl Quantity {
    fn code(self) -> &'static str {
        match self {
            Quantity::Tmin => "TMIN",
            Quantity::Tmean => "TMEAN",
            Quantity::Tmax => "TMAX",
            Quantity::Aet => "AET",
            Quantity::Pet => "PET",
            Quantity::Def => "DEF",
            Quantity::Snow => "SNOW",
        }
    }

    /// Flux quantities are seasonal totals; the rest are seasonal means.
    pub fn is_total(self) -> bool {
        matches!(self, Quantity::Aet | Quantity::Pet | Quantity::Def)
    }
}

/// One of the 28 seasonal climate covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeasonalVar {
    pub quantity: Quantity,
    pub season: Season,
}

impl SeasonalVar {
    pub fn name(&self) -> String {
        match (self.quantity, self.season) {
            (Quantity::Snow, _) => "SNOW".to_string(),
            (q, Season::SummerLag) => format!("SUM-{}-LAG", q.code()),
            (q, s) => format!("{}-{}", s.prefix(), q.code()),
        }
    }

    pub fn from_name(name: &str) -> Option<SeasonalVar> {
        all_seasonal_vars().into_iter().find(|v| v.name() == name)
    }
}

/// The 28 seasonal variables in canonical column order.
pub fn all_seasonal_vars() -> Vec<SeasonalVar> {
    let mut out = Vec::with_capacity(28);
    for q in [Quantity::Tmin, Quantity::Tmean, Quantity::Tmax] {
        for s in Season::ALL {
            out.push(SeasonalVar { quantity: q, season: s });
        }
    }
    for q in [Quantity::Aet, Quantity::Pet, Quantity::Def] {
        for s in [Season::Fall, Season::Spring, Season::Summer, Season::SummerLag] {
            out.push(SeasonalVar { quantity: q, season: s });
        }
    }
    out.push(SeasonalVar { quantity: Quantity::Snow, season: Season::Winter });
    out
}

pub fn seasonal_var_names() -> Vec<String> {
    all_seasonal_vars().iter().map(SeasonalVar::name).collect()
}

/// The five-variable default set, in the order used throughout the models.
pub const DEFAULT_SELECTED: [&str; 5] = ["FAL-DEF", "SPR-DEF", "SUM-DEF", "SUM-DEF-LAG", "SNOW"];

/// Per-variable location and scale used for z-scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Seasonal covariates per stand-year; `None` where a window is incomplete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalClimate {
    pub variables: Vec<String>,
    /// (stand_id, year) -> raw values in `variables` order.
    pub raw: BTreeMap<(String, i32), Vec<Option<f64>>>,
    /// z-scores, filled by [`standardize`].
    pub standardized: BTreeMap<(String, i32), Vec<Option<f64>>>,
    pub transforms: Vec<Option<Standardization>>,
}

impl SeasonalClimate {
    pub fn new(variables: Vec<String>) -> Self {
        SeasonalClimate { variables, raw: BTreeMap::new(), standardized: BTreeMap::new(), transforms: Vec::new() }
    }

    /// Variables with at least one z-score.
    pub fn usable_variables(&self) -> Vec<String> {
        (0..self.variables.len())
            .filter(|&k| self.standardized.values().any(|z| z[k].is_some()))
            .map(|k| self.variables[k].clone())
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    pub fn stands(&self) -> Vec<String> {
        let mut s: Vec<String> = self.raw.keys().map(|(s, _)| s.clone()).collect();
        s.dedup();
        s
    }

    pub fn raw_value(&self, stand: &str, year: i32, var: usize) -> Option<f64> {
        self.raw.get(&(stand.to_string(), year)).and_then(|v| v[var])
    }

    pub fn z_value(&self, stand: &str, year: i32, var: usize) -> Option<f64> {
        self.standardized.get(&(stand.to_string(), year)).and_then(|v| v[var])
    }

    /// Mean raw value across stands for each year (skipping absent cells).
    pub fn stand_mean_by_year(&self, var: usize) -> BTreeMap<i32, f64> {
        let mut acc: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
        for ((_, year), vals) in &self.raw {
            if let Some(v) = vals[var] {
                let e = acc.entry(*year).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(y, (s, n))| (y, s / n as f64)).collect()
    }
}

/// Aggregates monthly water balance and climate into the 28 seasonal variables.
pub fn aggregate_seasonal(stands: &[(StandClimate, WaterBalanceSeries)]) -> Result<SeasonalClimate> {
    let vars = all_seasonal_vars();
    let mut out = SeasonalClimate::new(vars.iter().map(SeasonalVar::name).collect());
    for (climate, wb) in stands {
        if climate.stand_id != wb.stand_id {
            return Err(Error::Data(format!(
                "climate stand {} paired with water balance {}",
                climate.stand_id, wb.stand_id
            )));
        }
        let mut raw_by_month: BTreeMap<(i32, u32), &MonthlyClimate> = BTreeMap::new();
        for m in &climate.months {
            raw_by_month.insert((m.year, m.month), m);
        }
        let mut wb_by_month: BTreeMap<(i32, u32), &WaterBalanceMonth> = BTreeMap::new();
        for m in &wb.months {
            wb_by_month.insert((m.year, m.month), m);
        }
        let years: std::collections::BTreeSet<i32> = climate.months.iter().map(|m| m.year).collect();
        for &year in &years {
            let row: Vec<Option<f64>> = vars
                .iter()
                .map(|v| {
                    let mut vals = Vec::with_capacity(3);
                    for (off, month) in v.season.months() {
                        let key = (year + off, month);
                        let x = match v.quantity {
                            Quantity::Tmin => raw_by_month.get(&key).map(|m| m.tmin),
                            Quantity::Tmean => raw_by_month.get(&key).map(|m| m.tmean),
                            Quantity::Tmax => raw_by_month.get(&key).map(|m| m.tmax),
                            Quantity::Aet => wb_by_month.get(&key).map(|m| m.aet),
                            Quantity::Pet => wb_by_month.get(&key).map(|m| m.pet),
                            Quantity::Def => wb_by_month.get(&key).map(|m| m.deficit),
                            Quantity::Snow => wb_by_month.get(&key).map(|m| m.snowpack),
                        }?;
                        vals.push(x);
                    }
                    let total: f64 = vals.iter().sum();
                    Some(if v.quantity.is_total() { total } else { total / 3.0 })
                })
                .collect();
            out.raw.insert((climate.stand_id.clone(), year), row);
        }
    }
    Ok(out)
}

/// z-scores each variable over all present stand-years with the sample
/// standard deviation; stores the transforms.
///
/// A variable that is constant (a deficit that is always zero in a wet
/// climate, say) or has fewer than two values gets no transform and no
/// z-scores; it stays in the raw table and cannot be used as a covariate.
pub fn standardize(mut seasonal: SeasonalClimate) -> Result<SeasonalClimate> {
    let p = seasonal.variables.len();
    let mut transforms = Vec::with_capacity(p);
    for k in 0..p {
        let vals: Vec<f64> = seasonal.raw.values().filter_map(|r| r[k]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if vals.len() < 2 || !(sd > 1e-12 * mean.abs().max(1.0)) {
            log::warn!("seasonal variable {} is constant or nearly empty; it has no z-scores", seasonal.variables[k]);
            transforms.push(None);
            continue;
        }
        transforms.push(Some(Standardization { mean, sd }));
    }
    seasonal.standardized = seasonal
        .raw
        .iter()
        .map(|(key, row)| {
            let z = row.iter().zip(&transforms).map(|(v, t)| v.zip(*t).map(|(v, t)| t.apply(v))).collect();
            (key.clone(), z)
        })
        .collect();
    seasonal.transforms = transforms;
    Ok(seasonal)
}

/// Reads the monthly climate CSV
/// (`stand_id, year, month, tmin_c, tmean_c, tmax_c, precip_mm, latitude`).
pub fn read_monthly_climate<R: std::io::Read>(reader: R) -> Result<Vec<StandClimate>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cols = [
        col("stand_id")?,
        col("year")?,
        col("month")?,
        col("tmin_c")?,
        col("tmean_c")?,
        col("tmax_c")?,
        col("precip_mm")?,
        col("latitude")?,
    ];
    let num = |rec: &csv::StringRecord, c: usize| -> Result<f64> {
        rec[c].trim().parse::<f64>().map_err(|_| Error::Data(format!("cannot parse `{}`", &rec[c])))
    };
    let mut by_stand: BTreeMap<String, StandClimate> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let stand = rec[cols[0]].trim().to_string();
        let m = MonthlyClimate {
            year: num(&rec, cols[1])? as i32,
            month: num(&rec, cols[2])? as u32,
            tmin: num(&rec, cols[3])?,
            tmean: num(&rec, cols[4])?,
            tmax: num(&rec, cols[5])?,
            precip: num(&rec, cols[6])?,
        };
        m.validate()?;
        let lat = num(&rec, cols[7])?;
        let entry = by_stand.entry(stand.clone()).or_insert_with(|| StandClimate {
            stand_id: stand,
            latitude: lat,
            months: Vec::new(),
        });
        entry.months.push(m);
    }
    let mut out: Vec<StandClimate> = by_stand.into_values().collect();
    for s in &mut out {
        s.months.sort_by_key(|m| (m.year, m.month));
    }
    Ok(out)
}

pub fn load_monthly_climate(path: impl AsRef<Path>) -> Result<Vec<StandClimate>> {
    let f = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_monthly_climate(f)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn write_monthly_balance<W: std::io::Write>(writer: W, series: &[WaterBalanceSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "stand_id",
        "year",
        "month",
        "precip_mm",
        "pet_mm",
        "aet_mm",
        "deficit_mm",
        "runoff_mm",
        "snowpack_mm",
        "soil_water_mm",
    ])?;
    for s in series {
        for m in &s.months {
            w.write_record([
                s.stand_id.clone(),
                m.year.to_string(),
                m.month.to_string(),
                format!("{:.6}", m.precip),
                format!("{:.6}", m.pet),
                format!("{:.6}", m.aet),
                format!("{:.6}", m.deficit),
                format!("{:.6}", m.runoff),
                format!("{:.6}", m.snowpack),
                format!("{:.6}", m.soil_water),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<water balance writer>", e))?;
    Ok(())
}

/// Writes the seasonal table: raw columns by name, then z-scores suffixed `_z`.
pub fn write_seasonal<W: std::io::Write>(writer: W, seasonal: &SeasonalClimate) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["stand_id".to_string(), "year".to_string()];
    header.extend(seasonal.variables.iter().cloned());
    header.extend(seasonal.variables.iter().map(|v| format!("{v}_z")));
    w.write_record(&header)?;
    for ((stand, year), raw) in &seasonal.raw {
        let mut row = vec![stand.clone(), year.to_string()];
        row.extend(raw.iter().map(|v| fmt_opt(*v)));
        let z = seasonal.standardized.get(&(stand.clone(), *year));
        for k in 0..seasonal.variables.len() {
            row.push(fmt_opt(z.and_then(|z| z[k])));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<seasonal writer>", e))?;
    Ok(())
}

/// Reads a seasonal table. Raw columns are required; `_z` columns are used
/// when present and complete, otherwise the table is re-standardized.
pub fn read_seasonal<R: std::io::Read>(reader: R) -> Result<SeasonalClimate> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_stand =
        headers.iter().position(|h| h == "stand_id").ok_or_else(|| Error::MissingColumn("stand_id".into()))?;
    let c_year = headers.iter().position(|h| h == "year").ok_or_else(|| Error::MissingColumn("year".into()))?;
    let vars: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(k, h)| *k != c_stand && *k != c_year && !h.ends_with("_z"))
        .map(|(k, h)| (k, h.to_string()))
        .collect();
    let z_cols: Vec<Option<usize>> =
        vars.iter().map(|(_, name)| headers.iter().position(|h| h == format!("{name}_z"))).collect();
    let mut out = SeasonalClimate::new(vars.iter().map(|(_, n)| n.clone()).collect());
    let parse = |s: &str| -> Result<Option<f64>> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("na") {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Data(format!("cannot parse `{s}`")))
        }
    };
    let mut have_z = z_cols.iter().all(Option::is_some);
    for rec in rdr.records() {
        let rec = rec?;
        let key = (
            rec[c_stand].trim().to_string(),
            rec[c_year].trim().parse::<i32>().map_err(|_| Error::Data(format!("bad year `{}`", &rec[c_year])))?,
        );
        let raw: Vec<Option<f64>> = vars.iter().map(|(c, _)| parse(&rec[*c])).collect::<Result<_>>()?;
        if have_z {
            let z: Vec<Option<f64>> = z_cols.iter().map(|c| parse(&rec[c.unwrap()])).collect::<Result<_>>()?;
            if z.iter().zip(&raw).any(|(z, r)| z.is_some() != r.is_some()) {
                have_z = false;
            }
            out.standardized.insert(key.clone(), z);
        }
        out.raw.insert(key, raw);
    }
    if !have_z {
        out.standardized.clear();
        out = standardize(out)?;
    }
    Ok(out)
}

pub fn load_seasonal(path: impl AsRef<Path>) -> Result<SeasonalClimate> {
    let f = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_seasonal(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_year(year: i32, tmean: f64, precip: f64) -> Vec<MonthlyClimate> {
        (1..=12)
            .map(|month| MonthlyClimate { year, month, tmin: tmean - 5.0, tmean, tmax: tmean + 5.0, precip })
            .collect()
    }

    #[test]
    fn pet_freezing_and_boundary() {
        let mut t = [10.0; 12];
        t[0] = -5.0;
        let pet = thornthwaite_pet(&t, 45.0).unwrap();
        assert_eq!(pet[0], 0.0);
        assert!(pet[1] > 0.0);
        assert_eq!(thornthwaite_pet(&[0.0; 12], 45.0).unwrap(), [0.0; 12]);
    }

    #[test]
    fn pet_hand_computed_equator() {
        // I = 12 (20/5)^1.514 = 97.8814, a = 2.14075, PET = 16 (200/I)^a = 73.868 mm
        let pet = thornthwaite_pet(&[20.0; 12], 0.0).unwrap();
        for p in pet {
            assert!((p - 73.868).abs() < 0.005, "{p}");
        }
    }

    #[test]
    fn polar_latitude_rejected() {
        assert!(thornthwaite_pet(&[5.0; 12], 70.0).is_err());
    }

    #[test]
    fn bucket_examples() {
        let p = WaterBalanceParams::default();
        let full = BucketState { snowpack: 0.0, soil_water: p.awc };
        let (next, f) = step_bucket(full, 15.0, 100.0, 50.0, &p);
        assert_eq!(f.aet, 50.0);
        assert_eq!(f.deficit, 0.0);
        assert!((f.runoff - 50.0).abs() < 1e-12);
        assert_eq!(next.soil_water, p.awc);

        let (_, f) = step_bucket(BucketState::default(), 15.0, 0.0, 50.0, &p);
        assert_eq!(f.aet, 0.0);
        assert_eq!(f.deficit, 50.0);

        let (next, f) = step_bucket(BucketState { snowpack: 12.0, soil_water: 40.0 }, -10.0, 30.0, 0.0, &p);
        assert!((next.snowpack - 42.0).abs() < 1e-12);
        assert_eq!(f.aet, 0.0);
    }

    #[test]
    fn seasonal_windows_and_totals() {
        let mut months = flat_year(2000, 5.0, 50.0);
        months.extend(flat_year(2001, 5.0, 50.0));
        let climate = StandClimate { stand_id: "S".into(), latitude: 47.0, months };
        // constant deficit of 10 mm per month
        let wb = WaterBalanceSeries {
            stand_id: "S".into(),
            params: WaterBalanceParams::default(),
            months: climate
                .months
                .iter()
                .map(|m| WaterBalanceMonth {
                    year: m.year,
                    month: m.month,
                    precip: m.precip,
                    pet: 30.0,
                    aet: 20.0,
                    deficit: 10.0,
                    runoff: 0.0,
                    snowpack: 4.0,
                    soil_water: 0.0,
                    closure: 0.0,
                })
                .collect(),
        };
        let s = aggregate_seasonal(&[(climate, wb)]).unwrap();
        let idx = |n: &str| s.index_of(n).unwrap();
        assert_eq!(s.variables.len(), 28);
        assert_eq!(s.raw_value("S", 2001, idx("SUM-DEF")), Some(30.0));
        assert_eq!(s.raw_value("S", 2001, idx("SPR-DEF")), Some(30.0));
        assert_eq!(s.raw_value("S", 2001, idx("FAL-DEF")), Some(30.0));
        assert_eq!(s.raw_value("S", 2001, idx("SNOW")), Some(4.0));
        assert_eq!(s.raw_value("S", 2001, idx("WIN-TMEAN")), Some(5.0));
        assert_eq!(s.raw_value("S", 2000, idx("FAL-DEF")), None);
        assert_eq!(s.raw_value("S", 2000, idx("SUM-DEF-LAG")), None);
        assert_eq!(s.raw_value("S", 2000, idx("WIN-TMEAN")), None);
        assert_eq!(s.raw_value("S", 2000, idx("SUM-DEF")), Some(30.0));
    }

    #[test]
    fn variable_names_are_the_table_set() {
        let names = seasonal_var_names();
        assert_eq!(names.len(), 28);
        for n in DEFAULT_SELECTED {
            assert!(names.iter().any(|x| x == n), "{n}");
        }
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 28);
        assert_eq!(SeasonalVar::from_name("JUL-RAIN"), None);
    }

    #[test]
    fn standardize_two_values() {
        let mut s = SeasonalClimate::new(vec!["X".into()]);
        s.raw.insert(("A".into(), 2000), vec![Some(1.0)]);
        s.raw.insert(("A".into(), 2001), vec![Some(3.0)]);
        let s = standardize(s).unwrap();
        let z0 = s.z_value("A", 2000, 0).unwrap();
        assert!((z0 + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s.z_value("A", 2001, 0).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let t = s.transforms[0].unwrap();
        assert!((t.invert(z0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_skips_constants_and_is_idempotent_otherwise() {
        let mut s = SeasonalClimate::new(vec!["C".into(), "V".into()]);
        s.raw.insert(("A".into(), 2000), vec![Some(2.0), Some(1.0)]);
        s.raw.insert(("A".into(), 2001), vec![Some(2.0), Some(3.0)]);
        let s = standardize(s).unwrap();
        assert_eq!(s.transforms[0], None);
        assert_eq!(s.z_value("A", 2000, 0), None);
        assert!(s.z_value("A", 2000, 1).is_some());
        assert_eq!(s.usable_variables(), vec!["V".to_string()]);

        let mut s = SeasonalClimate::new(vec!["X".into()]);
        for (k, v) in [0.3, 1.9, -2.0, 4.4].iter().enumerate() {
            s.raw.insert(("A".into(), 2000 + k as i32), vec![Some(*v)]);
        }
        let once = standardize(s).unwrap();
        let mut again = SeasonalClimate::new(vec!["X".into()]);
        again.raw = once.standardized.clone();
        let twice = standardize(again).unwrap();
        for (k, z) in &once.standardized {
            assert!((z[0].unwrap() - twice.standardized[k][0].unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn water_balance_closes_and_spins_up() {
        let mut months = Vec::new();
        for (k, y) in (1990..1993).enumerate() {
            for month in 1..=12u32 {
                let tmean = -12.0 + 30.0 * ((month as f64 - 1.0) / 11.0 * PI).sin() + k as f64;
                months.push(MonthlyClimate {
                    year: y,
                    month,
                    tmin: tmean - 6.0,
                    tmean,
                    tmax: tmean + 6.0,
                    precip: 40.0 + month as f64 * 3.0,
                });
            }
        }
        let c = StandClimate { stand_id: "S".into(), latitude: 47.5, months };
        let wb = run_water_balance(&c, &WaterBalanceParams::default()).unwrap();
        for m in &wb.months {
            assert!(m.closure.abs() < 1e-9);
            assert!(m.deficit >= 0.0 && m.aet <= m.pet + 1e-12);
            assert!(m.soil_water >= 0.0 && m.soil_water <= 150.0);
        }
    }

    #[test]
    fn seasonal_csv_round_trip() {
        let mut s = SeasonalClimate::new(vec!["X".into(), "Y".into()]);
        s.raw.insert(("A".into(), 2000), vec![Some(1.0), None]);
        s.raw.insert(("A".into(), 2001), vec![Some(3.0), Some(2.0)]);
        s.raw.insert(("B".into(), 2001), vec![Some(4.0), Some(5.0)]);
        let s = standardize(s).unwrap();
        let mut buf = Vec::new();
        write_seasonal(&mut buf, &s).unwrap();
        let back = read_seasonal(buf.as_slice()).unwrap();
        assert_eq!(back.variables, s.variables);
        assert_eq!(back.raw, s.raw);
        for (k, z) in &s.standardized {
            for (a, b) in z.iter().zip(&back.standardized[k]) {
                assert_eq!(a.is_some(), b.is_some());
                if let (Some(a), Some(b)) = (a, b) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
