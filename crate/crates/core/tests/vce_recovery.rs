use dendroclim::fce::{fit_fce, FceConfig, SamplerConfig};
use dendroclim::sampler::InvGamma;
use dendroclim::synth::{simulate, SynthConfig, ThetaPath, DEFAULT_THETA};
use dendroclim::vce::{fit_vce, StateNoisePrior, VceConfig};

#[test]
fn step_change_is_tracked() {
    let cfg = SynthConfig {
        n_years: 100,
        seed: 5,
        theta: ThetaPath::Step { base: DEFAULT_THETA.to_vec(), component: 0, at: 60, value: -0.6 },
        ..Default::default()
    };
    let out = simulate(&cfg).unwrap();
    let vcfg = VceConfig {
        sampler: SamplerConfig { iterations: 1500, burn_in: 500, seed: 2, ..Default::default() },
        ..Default::default()
    };
    let fit = fit_vce(&out.design, &vcfg).unwrap();
    let moved = fit.theta_mean[65][0] - fit.theta_mean[55][0];
    assert!(moved / -0.3 >= 0.8, "moved {moved}");
    // the other components stay put
    let drift = (fit.theta_mean[65][2] - fit.theta_mean[55][2]).abs();
    assert!(drift < 0.15, "unchanged component drifted {drift}");
}

#[test]
fn tight_state_noise_flattens_to_the_fixed_effects_fit() {
    let out =
        simulate(&SynthConfig { n_trees: 60, n_stands: 12, n_years: 40, seed: 12, ..Default::default() }).unwrap();
    let sampler = SamplerConfig { iterations: 1200, burn_in: 400, seed: 6, ..Default::default() };
    let fce = fit_fce(&out.design, &FceConfig { sampler: sampler.clone(), ..Default::default() }).unwrap();
    let vcfg = VceConfig {
        sampler,
        state_noise: StateNoisePrior::Diagonal(InvGamma { shape: 1e4, rate: 1e-6 }),
        initial_sigma_theta: 1e-10,
        ..Default::default()
    };
    let vce = fit_vce(&out.design, &vcfg).unwrap();
    for (k, s) in fce.theta_summary().iter().enumerate() {
        let first = vce.theta_mean[0][k];
        let last = vce.theta_mean[vce.years.len() - 1][k];
        assert!((first - last).abs() < 0.02, "{}: path not flat", s.label);
        assert!((first - s.mean).abs() < 0.05, "{}: {first} vs fixed {}", s.label, s.mean);
    }
}
