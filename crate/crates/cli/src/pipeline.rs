//! Stage implementations and the run manifest.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dendroclim::classify::{
    annual_means, classify, exceedance_report, initiation_curve, partial_residuals, partition, read_labels,
    write_exceedances, write_initiation_curve, write_labels, write_partial_residuals, Category, DisturbanceCalendar,
};
use dendroclim::design::{assemble, ModelDesign};
use dendroclim::fce::{fit_fce, write_summary, write_theta_summary, FceConfig};
use dendroclim::lasso::{fit_blasso, read_selected, selection_data, write_lasso_summary, LassoConfig};
use dendroclim::ring_data::{load_rings, save_rings, stand_tables, RingSchema, RingSeries, StudyWindow};
use dendroclim::sampler::Summary;
use dendroclim::synth::{simulate, write_truth};
use dendroclim::vce::{fit_vce, read_trajectory, write_trajectory, StatePrior, VceConfig};
use dendroclim::water_balance::{
    aggregate_seasonal, load_monthly_climate, load_seasonal, run_water_balance, standardize, write_monthly_balance,
    write_seasonal, SeasonalClimate, DEFAULT_SELECTED,
};

use crate::config::RunConfig;
use crate::PipelineError;

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Simulate,
    WaterBalance,
    Select,
    FitFce,
    FitVce,
    Classify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Simulate,
        Stage::WaterBalance,
        Stage::Select,
        Stage::FitFce,
        Stage::FitVce,
        Stage::Classify,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::WaterBalance => "water-balance",
            Stage::Select => "select",
            Stage::FitFce => "fit-fce",
            Stage::FitVce => "fit-vce",
            Stage::Classify => "classify",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s.trim())
    }

    /// Parses `a,b,c` or `all`; the result is in pipeline order.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        let mut out = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let st = Stage::parse(part).ok_or_else(|| {
                PipelineError::Config(format!(
                    "unknown stage `{}`; expected one of {}",
                    part.trim(),
                    Stage::ALL.map(Stage::name).join(", ")
                ))
            })?;
            if !out.contains(&st) {
                out.push(st);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Stages that make sense for a config: `simulate` without a ring file,
    /// `water-balance` with a monthly climate file.
    pub fn defaults_for(config: &RunConfig) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Simulate => config.paths.rings.is_none(),
                Stage::WaterBalance => config.paths.climate.is_some(),
                _ => true,
            })
            .collect()
    }
}

/// File names inside the output directory.
pub mod artifacts {
    pub const RINGS: &str = "rings.csv";
    pub const SEASONAL: &str = "seasonal.csv";
    pub const TRUTH: &str = "truth.csv";
    pub const MONTHLY_BALANCE: &str = "monthly_balance.csv";
    pub const LASSO_SUMMARY: &str = "lasso_summary.csv";
    pub const THETA_SUMMARY: &str = "theta_summary.csv";
    pub const FCE_PARAMETERS: &str = "fce_parameters.csv";
    pub const FCE_MOMENTS: &str = "fce_theta_moments.json";
    pub const THETA_TRAJECTORY: &str = "theta_trajectory.csv";
    pub const VCE_PARAMETERS: &str = "vce_parameters.csv";
    pub const STAND_EFFECTS: &str = "stand_effects.csv";
    pub const SPLINE_COEFFICIENTS: &str = "spline_coefficients.csv";
    pub const LABELS: &str = "labels.csv";
    pub const EXCEEDANCES: &str = "exceedances.csv";
    pub const PARTIAL_RESIDUALS: &str = "partial_residuals.csv";
    pub const INITIATION_CURVE: &str = "initiation_curve.csv";
    pub const PARTITION: &str = "report/partition.csv";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub stages: Vec<Stage>,
    /// Everything worth a look, convergence problems included.
    pub warnings: Vec<String>,
    /// Number of stages whose chains failed the R-hat check.
    pub convergence_warnings: usize,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.convergence_warnings == 0 {
            0
        } else {
            4
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Context<'a> {
    config: &'a RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    unconverged: bool,
}

impl<'a> Context<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
        }
        let f = File::create(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        self.outputs.push(path);
        Ok(BufWriter::new(f))
    }

    fn finish(w: BufWriter<File>) -> Result<()> {
        w.into_inner()
            .map_err(|e| PipelineError::Data(e.to_string()))?
            .sync_all()
            .map_err(|e| PipelineError::Data(e.to_string()))
    }

    /// A produced artifact, or the configured override.
    fn input(&mut self, configured: Option<&PathBuf>, name: &str, stage: Stage) -> Result<PathBuf> {
        let path = configured.cloned().unwrap_or_else(|| self.path(name));
        if !path.exists() {
            return Err(PipelineError::MissingArtifact { artifact: name.to_string(), stage });
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn rings(&mut self) -> Result<Vec<RingSeries>> {
        let path = self.input(self.config.paths.rings.as_ref(), artifacts::RINGS, Stage::Simulate)?;
        Ok(load_rings(&path, &RingSchema::default())?)
    }

    fn seasonal(&mut self) -> Result<SeasonalClimate> {
        let producer = if self.config.paths.rings.is_none() { Stage::Simulate } else { Stage::WaterBalance };
        let path = self.input(self.config.paths.seasonal.as_ref(), artifacts::SEASONAL, producer)?;
        Ok(load_seasonal(&path)?)
    }

    fn calendar(&mut self) -> Result<DisturbanceCalendar> {
        match self.config.paths.calendar.clone() {
            None => Ok(self.config.calendar.clone()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(&p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?;
                self.inputs.push(p.clone());
                let cal: DisturbanceCalendar = toml::from_str(&text)
                    .map_err(|e| PipelineError::Config(format!("calendar {}: {e}", p.display())))?;
                cal.validate()?;
                Ok(cal)
            }
        }
    }

    /// Study window clipped to the years covered by the rings.
    fn window(&self, rings: &[RingSeries]) -> Result<StudyWindow> {
        let first = rings.iter().map(|r| r.first_year).min();
        let last = rings.iter().map(|r| r.last_year()).max();
        let (Some(first), Some(last)) = (first, last) else {
            return Err(PipelineError::Data("ring table is empty".into()));
        };
        let start = self.config.window.start_year.max(first);
        let end = self.config.window.end_year.min(last);
        if start > end {
            return Err(PipelineError::Data(format!(
                "rings cover {first}-{last}, outside the study window {}-{}",
                self.config.window.start_year, self.config.window.end_year
            )));
        }
        Ok(StudyWindow::new(start, end)?)
    }

    /// Model variables: explicit override, then the lasso selection, then the default five.
    fn selected(&mut self) -> Result<Vec<String>> {
        if let Some(v) = &self.config.selection.variables {
            return Ok(v.clone());
        }
        let path = self.path(artifacts::LASSO_SUMMARY);
        if path.exists() {
            self.inputs.push(path.clone());
            let f = File::open(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
            let sel = read_selected(f)?;
            if !sel.is_empty() {
                return Ok(sel);
            }
            self.warnings.push("lasso selected no variables; using the default five".into());
        }
        Ok(DEFAULT_SELECTED.iter().map(|s| s.to_string()).collect())
    }

    fn design(&mut self, variables: &[String]) -> Result<ModelDesign> {
        let rings = self.rings()?;
        let seasonal = self.seasonal()?;
        let window = self.window(&rings)?;
        Ok(assemble(&rings, &seasonal, variables, window, &self.config.design)?)
    }

    fn check_convergence(&mut self, stage: Stage, summary: &[Summary], blocks: &[&str]) {
        let limit = self.config.rhat_warning;
        let bad: Vec<String> = summary
            .iter()
            .filter(|s| {
                blocks.contains(&s.block.as_str())
                    && !matches!(s.rhat.partial_cmp(&limit), Some(Ordering::Less | Ordering::Equal))
            })
            .map(|s| format!("{}[{}] R-hat {:.3}", s.block, s.label, s.rhat))
            .collect();
        if !bad.is_empty() {
            let shown: Vec<&str> = bad.iter().take(5).map(String::as_str).collect();
            let msg = format!("{}: {} parameter(s) above R-hat {limit}: {}", stage.name(), bad.len(), shown.join(", "));
            log::warn!("{msg}");
            self.warnings.push(msg);
            self.unconverged = true;
        }
    }
}

fn simulate_stage(ctx: &mut Context) -> Result<()> {
    let mut synth = ctx.config.synth.clone();
    synth.seed = ctx.config.seed;
    let out = simulate(&synth)?;
    let path = ctx.path(artifacts::RINGS);
    save_rings(&path, &out.rings)?;
    ctx.outputs.push(path);
    let w = ctx.create(artifacts::SEASONAL)?;
    write_seasonal(w, &out.seasonal)?;
    let w = ctx.create(artifacts::TRUTH)?;
    write_truth(w, &out.truth)?;
    Ok(())
}

fn water_balance_stage(ctx: &mut Context) -> Result<()> {
    let path = ctx
        .config
        .paths
        .climate
        .clone()
        .ok_or_else(|| PipelineError::Config("paths.climate is required for the water-balance stage".into()))?;
    ctx.inputs.push(path.clone());
    let climate = load_monthly_climate(&path)?;
    let mut pairs = Vec::with_capacity(climate.len());
    for stand in climate {
        let wb = run_water_balance(&stand, &ctx.config.water_balance)?;
        pairs.push((stand, wb));
    }
    let balances: Vec<_> = pairs.iter().map(|(_, wb)| wb.clone()).collect();
    let w = ctx.create(artifacts::MONTHLY_BALANCE)?;
    write_monthly_balance(w, &balances)?;
    let seasonal = standardize(aggregate_seasonal(&pairs)?)?;
    let w = ctx.create(artifacts::SEASONAL)?;
    write_seasonal(w, &seasonal)?;
    Ok(())
}

fn select_stage(ctx: &mut Context) -> Result<()> {
    let seasonal = ctx.seasonal()?;
    let candidates = seasonal.usable_variables();
    for v in seasonal.variables.iter().filter(|v| !candidates.contains(v)) {
        ctx.warnings.push(format!("{v} has no z-scores and is left out of selection"));
    }
    let design = ctx.design(&candidates)?;
    let (y, x) = selection_data(&design, ctx.config.selection.smoothing.unwrap_or(1.0))?;
    let cfg = LassoConfig { seed: ctx.config.seed, ..ctx.config.selection.lasso.clone() };
    let fit = fit_blasso(&y, &x, &design.variables, &cfg)?;
    log::info!("lasso selected {:?}", fit.selected());
    let w = ctx.create(artifacts::LASSO_SUMMARY)?;
    write_lasso_summary(w, &fit)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ThetaMoments {
    variables: Vec<String>,
    mean: Vec<f64>,
    /// Row-major covariance.
    cov: Vec<f64>,
}

fn fit_fce_stage(ctx: &mut Context) -> Result<()> {
    let variables = ctx.selected()?;
    let design = ctx.design(&variables)?;
    let cfg = FceConfig {
        sampler: dendroclim::fce::SamplerConfig { seed: ctx.config.seed, ..ctx.config.sampler.clone() },
        priors: ctx.config.priors.clone(),
        ..Default::default()
    };
    let fit = fit_fce(&design, &cfg)?;
    ctx.check_convergence(Stage::FitFce, &fit.summary, &["theta", "sigma2_pe", "phi", "tau2"]);
    let w = ctx.create(artifacts::THETA_SUMMARY)?;
    write_theta_summary(w, &fit)?;
    let w = ctx.create(artifacts::FCE_PARAMETERS)?;
    write_summary(w, &fit.summary)?;
    let (mean, cov) = fit.theta_moments();
    let p = mean.len();
    let moments = ThetaMoments {
        variables: fit.variables.clone(),
        mean: mean.iter().copied().collect(),
        cov: (0..p * p).map(|k| cov[(k / p, k % p)]).collect(),
    };
    let mut w = ctx.create(artifacts::FCE_MOMENTS)?;
    serde_json::to_writer_pretty(&mut w, &moments).map_err(|e| PipelineError::Data(e.to_string()))?;
    Context::finish(w)
}

fn fit_vce_stage(ctx: &mut Context) -> Result<()> {
    let variables = ctx.selected()?;
    let design = ctx.design(&variables)?;
    let mut theta0 = None;
    let moments_path = ctx.path(artifacts::FCE_MOMENTS);
    if ctx.config.vce.use_fce_prior && moments_path.exists() {
        let text = std::fs::read_to_string(&moments_path).map_err(|e| PipelineError::Data(e.to_string()))?;
        let m: ThetaMoments = serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))?;
        if m.variables == design.variables {
            ctx.inputs.push(moments_path);
            let p = m.mean.len();
            theta0 = Some(StatePrior::from_fce(
                DVector::from_vec(m.mean),
                &DMatrix::from_row_slice(p, p, &m.cov),
                ctx.config.vce.fce_prior_inflation,
            ));
        } else {
            log::info!("fixed-effects fit used other variables; starting from the diffuse prior");
        }
    }
    let cfg = VceConfig {
        sampler: dendroclim::fce::SamplerConfig { seed: ctx.config.seed, ..ctx.config.sampler.clone() },
        priors: ctx.config.priors.clone(),
        half_width: ctx.config.vce.half_width,
        theta0,
        ..Default::default()
    };
    let fit = fit_vce(&design, &cfg)?;
    ctx.check_convergence(Stage::FitVce, &fit.summary, &["sigma2_pe", "phi", "tau2"]);
    let w = ctx.create(artifacts::THETA_TRAJECTORY)?;
    write_trajectory(w, &fit)?;
    let w = ctx.create(artifacts::VCE_PARAMETERS)?;
    let scalars: Vec<Summary> = fit.summary.iter().filter(|s| s.block != "theta_t").cloned().collect();
    write_summary(w, &scalars)?;

    let mut w = csv::Writer::from_writer(ctx.create(artifacts::STAND_EFFECTS)?);
    w.write_record(["stand_id", "year", "alpha"]).map_err(csv_err)?;
    for (j, row) in fit.alpha_mean.iter().enumerate() {
        for (t, a) in row.iter().enumerate() {
            if design.observed[j][t] {
                w.write_record([design.stands[j].clone(), design.year(t).to_string(), format!("{a:.8}")])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| PipelineError::Data(e.to_string()))?;
    let mut w = csv::Writer::from_writer(ctx.create(artifacts::SPLINE_COEFFICIENTS)?);
    let k = design.basis.n_basis();
    let mut header = vec!["tree_id".to_string()];
    header.extend((0..k).map(|c| format!("b{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for (tree, b) in design.trees.iter().zip(&fit.beta_mean) {
        let mut row = vec![tree.tree_id.clone()];
        row.extend(b.iter().map(|v| format!("{v:.8}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok(())
}

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Data(e.to_string())
}

fn read_csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    rdr.records().map(|r| r.map_err(csv_err)).collect()
}

fn classify_stage(ctx: &mut Context) -> Result<()> {
    let traj_path = ctx.input(None, artifacts::THETA_TRAJECTORY, Stage::FitVce)?;
    let alpha_path = ctx.input(None, artifacts::STAND_EFFECTS, Stage::FitVce)?;
    let beta_path = ctx.input(None, artifacts::SPLINE_COEFFICIENTS, Stage::FitVce)?;
    let trajectory = read_trajectory(File::open(&traj_path).map_err(|e| PipelineError::Data(e.to_string()))?)?;
    let mut variables: Vec<String> = Vec::new();
    for e in &trajectory {
        if !variables.contains(&e.variable) {
            variables.push(e.variable.clone());
        }
    }
    let seasonal = ctx.seasonal()?;
    let climate_vars: Vec<String> = variables.iter().filter(|v| seasonal.index_of(v).is_some()).cloned().collect();
    let annual = annual_means(&seasonal, &climate_vars)?;
    let calendar = ctx.calendar()?;
    let labels = classify(&trajectory, &ctx.config.thresholds, &annual, &calendar, &ctx.config.classifier)?;
    let w = ctx.create(artifacts::LABELS)?;
    write_labels(w, &labels)?;
    let exceed = exceedance_report(&annual, &ctx.config.thresholds, &labels, ctx.config.classifier.half_width);
    let w = ctx.create(artifacts::EXCEEDANCES)?;
    write_exceedances(w, &exceed)?;

    // the design is rebuilt only for the residuals, so it uses the trajectory's variables
    let design = ctx.design(&variables)?;
    let mut alpha = vec![vec![f64::NAN; design.n_years()]; design.n_stands()];
    for rec in read_csv_rows(&alpha_path)? {
        let (Some(s), Some(y), Some(a)) = (rec.get(0), rec.get(1), rec.get(2)) else { continue };
        let j = design.stands.iter().position(|x| x == s);
        let y: Option<i32> = y.parse().ok();
        if let (Some(j), Some(y), Ok(a)) = (j, y, a.parse::<f64>()) {
            if design.window.contains(y) {
                alpha[j][(y - design.window.start_year) as usize] = a;
            }
        }
    }
    let mut betas: BTreeMap<String, DVector<f64>> = BTreeMap::new();
    for rec in read_csv_rows(&beta_path)? {
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| PipelineError::Data(format!("spline coefficients: {e}")))?;
        betas.insert(rec.get(0).unwrap_or_default().to_string(), DVector::from_vec(vals));
    }
    let beta_mean: Vec<DVector<f64>> = design
        .trees
        .iter()
        .map(|t| {
            betas
                .get(&t.tree_id)
                .cloned()
                .filter(|b| b.len() == design.basis.n_basis())
                .ok_or_else(|| PipelineError::Data(format!("no spline coefficients for tree {}", t.tree_id)))
        })
        .collect::<Result<_>>()?;
    let (ry0, ry1) = ctx.config.report.residual_years;
    let years = (ry0.max(design.window.start_year), ry1.min(design.window.end_year));
    let residuals = if years.0 <= years.1 {
        partial_residuals(&design, &beta_mean, &alpha, &calendar, years, ctx.config.report.residual_fraction)?
    } else {
        ctx.warnings.push(format!("residual years {ry0}-{ry1} lie outside the data; no partial residuals"));
        Vec::new()
    };
    let w = ctx.create(artifacts::PARTIAL_RESIDUALS)?;
    write_partial_residuals(w, &residuals)?;

    let rings = ctx.rings()?;
    let initiation: BTreeMap<String, i32> =
        stand_tables(&rings)?.into_iter().map(|s| (s.stand_id, s.initiation_year)).collect();
    let mut observed: BTreeMap<String, (i32, i32)> = BTreeMap::new();
    for r in &rings {
        let e = observed.entry(r.stand_id.clone()).or_insert((r.first_year, r.last_year()));
        e.0 = e.0.min(r.first_year);
        e.1 = e.1.max(r.last_year());
    }
    let curve = initiation_curve(&labels, &initiation, &observed);
    let w = ctx.create(artifacts::INITIATION_CURVE)?;
    write_initiation_curve(w, &curve)?;
    Ok(())
}

fn report_stage(ctx: &mut Context) -> Result<()> {
    let labels_path = ctx.input(None, artifacts::LABELS, Stage::Classify)?;
    let labels = read_labels(File::open(&labels_path).map_err(|e| PipelineError::Data(e.to_string()))?)?;
    let part = partition(&labels);
    let mut w = csv::Writer::from_writer(ctx.create(artifacts::PARTITION)?);
    w.write_record(["category", "count", "percent"]).map_err(csv_err)?;
    for c in Category::SENSITIVE {
        w.write_record([c.as_str().to_string(), part.counts[&c].to_string(), format!("{:.2}", part.percent(c))])
            .map_err(csv_err)?;
    }
    w.write_record(["total".to_string(), part.total.to_string(), "100.00".to_string()]).map_err(csv_err)?;
    w.flush().map_err(|e| PipelineError::Data(e.to_string()))?;
    let figures = [
        (artifacts::THETA_SUMMARY, "report/coefficients.csv", Stage::FitFce),
        (artifacts::THETA_TRAJECTORY, "report/trajectory.csv", Stage::FitVce),
        (artifacts::EXCEEDANCES, "report/exceedances.csv", Stage::Classify),
        (artifacts::PARTIAL_RESIDUALS, "report/partial_residuals.csv", Stage::Classify),
        (artifacts::INITIATION_CURVE, "report/initiation_curve.csv", Stage::Classify),
    ];
    for (src, dst, stage) in figures {
        let from = ctx.input(None, src, stage)?;
        let to = ctx.path(dst);
        std::fs::copy(&from, &to).map_err(|e| PipelineError::Data(format!("{}: {e}", to.display())))?;
        ctx.outputs.push(to);
    }
    Ok(())
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn records(paths: &[PathBuf], base: &Path) -> Result<Vec<FileRecord>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for p in paths {
        if seen.insert(p.clone()) {
            out.push(FileRecord { path: relative(p, base), sha256: sha256_file(p)? });
        }
    }
    Ok(out)
}

fn load_manifest(path: &Path) -> Manifest {
    std::fs::read_to_string(path).ok().and_then(|t| serde_json::from_str(&t).ok()).unwrap_or_else(|| Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        stages: Vec::new(),
    })
}

/// Runs `stages` in pipeline order and updates `manifest.json`.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage]) -> Result<RunOutcome> {
    config.validate()?;
    let out = config.paths.output_dir.clone();
    std::fs::create_dir_all(out.join("report")).map_err(|e| PipelineError::Data(format!("{}: {e}", out.display())))?;
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let manifest_path = out.join(artifacts::MANIFEST);
    let mut manifest = load_manifest(&manifest_path);
    let mut outcome = RunOutcome::default();
    for stage in ordered {
        log::info!("stage {}", stage.name());
        let mut ctx = Context {
            config,
            out: out.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            unconverged: false,
        };
        match stage {
            Stage::Simulate => simulate_stage(&mut ctx)?,
            Stage::WaterBalance => water_balance_stage(&mut ctx)?,
            Stage::Select => select_stage(&mut ctx)?,
            Stage::FitFce => fit_fce_stage(&mut ctx)?,
            Stage::FitVce => fit_vce_stage(&mut ctx)?,
            Stage::Classify => classify_stage(&mut ctx)?,
            Stage::Report => report_stage(&mut ctx)?,
        }
        let record = StageRecord {
            stage: stage.name().to_string(),
            seed: config.seed,
            inputs: records(&ctx.inputs, &out)?,
            outputs: records(&ctx.outputs, &out)?,
            warnings: ctx.warnings.clone(),
        };
        manifest.stages.retain(|r| r.stage != record.stage);
        manifest.stages.push(record);
        manifest.stages.sort_by_key(|r| Stage::parse(&r.stage));
        outcome.warnings.extend(ctx.warnings);
        outcome.convergence_warnings += usize::from(ctx.unconverged);
        outcome.stages.push(stage);
        let mut f = File::create(&manifest_path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", manifest_path.display())))?;
        serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| PipelineError::Data(e.to_string()))?;
        f.write_all(b"\n").map_err(|e| PipelineError::Data(e.to_string()))?;
    }
    Ok(outcome)
}
