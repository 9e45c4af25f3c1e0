use std::path::Path;

use dendroclim_cli::pipeline::{artifacts, Manifest};
use dendroclim_cli::{run_pipeline, PipelineError, RunConfig, Stage};

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
seed = 11
[synth]
n_trees = 40
n_stands = 8
n_years = 30
start_year = 1948
[sampler]
iterations = 400
burn_in = 100
[selection.lasso]
iterations = 800
burn_in = 200
[report]
residual_years = [1951, 1959]
residual_fraction = 0.25
"#,
    )
    .unwrap();
    cfg.paths.output_dir = dir.to_path_buf();
    cfg
}

fn non_empty_csv(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(text.lines().count() >= 2, "{} has no data rows", path.display());
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let stages = Stage::defaults_for(&cfg);
    let outcome = run_pipeline(&cfg, &stages).unwrap();
    assert_eq!(outcome.stages, stages);
    for name in [
        artifacts::RINGS,
        artifacts::SEASONAL,
        artifacts::TRUTH,
        artifacts::LASSO_SUMMARY,
        artifacts::THETA_SUMMARY,
        artifacts::FCE_PARAMETERS,
        artifacts::THETA_TRAJECTORY,
        artifacts::VCE_PARAMETERS,
        artifacts::STAND_EFFECTS,
        artifacts::SPLINE_COEFFICIENTS,
        artifacts::LABELS,
        artifacts::EXCEEDANCES,
        artifacts::INITIATION_CURVE,
        artifacts::PARTITION,
    ] {
        non_empty_csv(&dir.path().join(name));
    }
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(artifacts::MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest.stages.len(), stages.len());
    let fce = manifest.stages.iter().find(|s| s.stage == "fit-fce").unwrap();
    assert!(fce.inputs.iter().any(|f| f.path == artifacts::RINGS));
    assert!(fce.outputs.iter().all(|f| f.sha256.len() == 64));
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stages = [Stage::Simulate, Stage::FitFce];
    run_pipeline(&small_config(a.path()), &stages).unwrap();
    run_pipeline(&small_config(b.path()), &stages).unwrap();
    for name in [artifacts::RINGS, artifacts::THETA_SUMMARY, artifacts::FCE_PARAMETERS, artifacts::MANIFEST] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn classify_without_trajectory_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run_pipeline(&cfg, &[Stage::Simulate]).unwrap();
    let err = run_pipeline(&cfg, &[Stage::Classify]).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { stage: Stage::FitVce, .. }), "{err}");
    assert!(err.to_string().contains("fit-vce"));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.sampler.burn_in = cfg.sampler.iterations;
    let err = run_pipeline(&cfg, &[Stage::Simulate]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn monthly_climate_feeds_the_model() {
    use std::fmt::Write as _;

    let dir = tempfile::tempdir().unwrap();
    let synth = dendroclim::synth::simulate(&small_config(dir.path()).synth).unwrap();
    let rings_path = dir.path().join("field_rings.csv");
    dendroclim::ring_data::save_rings(&rings_path, &synth.rings).unwrap();
    let mut stands: Vec<&str> = synth.rings.iter().map(|r| r.stand_id.as_str()).collect();
    stands.sort();
    stands.dedup();
    let mut csv = String::from("stand_id,year,month,tmin_c,tmean_c,tmax_c,precip_mm,latitude\n");
    for (s, stand) in stands.iter().enumerate() {
        for year in 1940..=2000 {
            for month in 1..=12 {
                let phase = (month as f64 - 4.0) / 12.0 * std::f64::consts::TAU;
                let tmean = 3.0 + 15.0 * phase.sin() + ((year * 7 + month * 3 + s as i32) % 11) as f64 / 5.0 - 1.0;
                let precip = ((year * 13 + month * 5 + s as i32 * 3) % 17) as f64 * 7.0;
                writeln!(csv, "{stand},{year},{month},{},{tmean},{},{precip},47.5", tmean - 6.0, tmean + 6.0).unwrap();
            }
        }
    }
    let climate_path = dir.path().join("monthly.csv");
    std::fs::write(&climate_path, csv).unwrap();

    let mut cfg = small_config(&dir.path().join("out"));
    cfg.paths.rings = Some(rings_path);
    cfg.paths.climate = Some(climate_path);
    let stages = Stage::defaults_for(&cfg);
    assert_eq!(stages.first(), Some(&Stage::WaterBalance));
    run_pipeline(&cfg, &[Stage::WaterBalance, Stage::Select, Stage::FitFce]).unwrap();
    let out = dir.path().join("out");
    non_empty_csv(&out.join(artifacts::MONTHLY_BALANCE));
    non_empty_csv(&out.join(artifacts::SEASONAL));
    non_empty_csv(&out.join(artifacts::THETA_SUMMARY));
    let header = std::fs::read_to_string(out.join(artifacts::SEASONAL)).unwrap();
    assert!(header.lines().next().unwrap().contains("SUM-DEF-LAG"));
}
