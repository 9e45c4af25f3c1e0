use dendroclim::fce::{fit_fce, FceConfig, SamplerConfig};
use dendroclim::synth::{simulate, SynthConfig};

#[test]
fn default_synthetic_fit_covers_truth() {
    let out = simulate(&SynthConfig { seed: 77, ..Default::default() }).unwrap();
    let cfg = FceConfig {
        sampler: SamplerConfig { iterations: 1500, burn_in: 500, seed: 3, ..Default::default() },
        ..Default::default()
    };
    let fit = fit_fce(&out.design, &cfg).unwrap();
    let covered =
        fit.theta_summary().iter().zip(&out.truth.theta[0]).filter(|(s, t)| s.lower <= **t && **t <= s.upper).count();
    assert!(covered >= 4, "{covered} of 5 climate effects covered");
    for (name, truth) in [("sigma2_pe", out.truth.sigma2_pe), ("phi", out.truth.phi), ("tau2", out.truth.tau2)] {
        let s = fit.scalar(name).unwrap();
        assert!((s.median - truth).abs() < 0.25 * truth, "{name}: {} vs {truth}", s.median);
    }
    assert!(fit.phi_acceptance > 0.1 && fit.phi_acceptance < 0.9);
}

#[test]
fn chains_agree_on_a_small_design() {
    let out = simulate(&SynthConfig { n_trees: 40, n_stands: 8, n_years: 30, seed: 4, ..Default::default() }).unwrap();
    let cfg = FceConfig {
        sampler: SamplerConfig { iterations: 1200, burn_in: 400, chains: 3, seed: 8, ..Default::default() },
        ..Default::default()
    };
    let fit = fit_fce(&out.design, &cfg).unwrap();
    for s in fit.summary.iter().filter(|s| s.block == "theta" || s.block == "phi") {
        assert!(s.rhat < 1.1, "{}[{}] R-hat {}", s.block, s.label, s.rhat);
    }
}
