//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dendroclim::classify::{ClassifierConfig, DisturbanceCalendar, ThresholdConfig};
use dendroclim::design::DesignOptions;
use dendroclim::fce::{Priors, SamplerConfig};
use dendroclim::lasso::LassoConfig;
use dendroclim::synth::SynthConfig;
use dendroclim::water_balance::WaterBalanceParams;

use crate::PipelineError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Ring-width table; when absent the `simulate` stage provides one.
    pub rings: Option<PathBuf>,
    /// Monthly climate table for the `water-balance` stage.
    pub climate: Option<PathBuf>,
    /// Precomputed seasonal table; overrides the water-balance output.
    pub seasonal: Option<PathBuf>,
    /// Outbreak calendar (TOML with `outbreaks` and `hosts`).
    pub calendar: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub start_year: i32,
    pub end_year: i32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { start_year: 1897, end_year: 2007 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Skips the lasso output and uses these variables.
    pub variables: Option<Vec<String>>,
    pub lasso: LassoConfig,
    /// Penalty weight of the preliminary per-tree spline fit.
    pub smoothing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VceOptions {
    pub half_width: usize,
    /// Centre the initial state on the fixed-effects fit when one exists.
    pub use_fce_prior: bool,
    pub fce_prior_inflation: f64,
}

impl Default for VceOptions {
    fn default() -> Self {
        VceOptions { half_width: 0, use_fce_prior: true, fce_prior_inflation: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Year range for the low-growth partial residuals.
    pub residual_years: (i32, i32),
    /// Share of stands (lowest mean stand effect) used for residuals.
    pub residual_fraction: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { residual_years: (1951, 1959), residual_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub window: WindowConfig,
    pub water_balance: WaterBalanceParams,
    pub design: DesignOptions,
    pub selection: SelectionConfig,
    pub sampler: SamplerConfig,
    pub priors: Priors,
    pub vce: VceOptions,
    pub thresholds: ThresholdConfig,
    pub classifier: ClassifierConfig,
    pub calendar: DisturbanceCalendar,
    pub report: ReportConfig,
    pub synth: SynthConfig,
    /// Largest split R-hat tolerated before the run reports a convergence warning.
    pub rhat_warning: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            paths: Paths { output_dir: PathBuf::from("out"), ..Default::default() },
            window: WindowConfig::default(),
            water_balance: WaterBalanceParams::default(),
            design: DesignOptions::default(),
            selection: SelectionConfig::default(),
            sampler: SamplerConfig::default(),
            priors: Priors::default(),
            vce: VceOptions::default(),
            thresholds: ThresholdConfig::default(),
            classifier: ClassifierConfig::default(),
            calendar: DisturbanceCalendar::default(),
            report: ReportConfig::default(),
            synth: SynthConfig::default(),
            rhat_warning: 1.1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.paths.output_dir);
        for p in [&mut cfg.paths.rings, &mut cfg.paths.climate, &mut cfg.paths.seasonal, &mut cfg.paths.calendar]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    /// Field-level checks that do not need any data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let field = |name: &str, e: dendroclim::Error| PipelineError::Config(format!("{name}: {e}"));
        self.sampler.validate().map_err(|e| field("sampler", e))?;
        self.thresholds.validate().map_err(|e| field("thresholds", e))?;
        self.classifier.validate().map_err(|e| field("classifier", e))?;
        self.calendar.validate().map_err(|e| field("calendar", e))?;
        self.synth.validate().map_err(|e| field("synth", e))?;
        if self.window.start_year > self.window.end_year {
            return Err(PipelineError::Config(format!(
                "window: start_year {} is after end_year {}",
                self.window.start_year, self.window.end_year
            )));
        }
        if !(self.report.residual_fraction > 0.0 && self.report.residual_fraction <= 1.0) {
            return Err(PipelineError::Config("report.residual_fraction must lie in (0, 1]".into()));
        }
        if self.rhat_warning < 1.0 {
            return Err(PipelineError::Config("rhat_warning must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[sampler]\niterations = 500\nburn_in = 100\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sampler.iterations, 500);
        assert_eq!(cfg.sampler.chains, 1);
        assert_eq!(cfg.classifier.r2_cut, 0.25);
    }

    #[test]
    fn shipped_example_is_valid() {
        let cfg = RunConfig::from_toml(include_str!("../../../config/example.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sampler.chains, 2);
    }

    #[test]
    fn bad_field_is_named() {
        let err = RunConfig::from_toml("[sampler]\niterations = 10\nburn_in = 20\n").unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("sampler"), "{err}");
        assert!(RunConfig::from_toml("unknown_key = 1\n").is_err());
    }
}
