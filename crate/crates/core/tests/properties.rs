use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dendroclim::ar1::{self, Ar1Stats};
use dendroclim::ring_data::{read_rings, write_rings, RingSchema, RingSeries};
use dendroclim::sampler::{quantile, stream_rng};
use dendroclim::vce::{kalman_filter, rts_smoother, StatePrior, WindowPlan};
use dendroclim::water_balance::{step_bucket, BucketState, WaterBalanceParams};

proptest! {
    #[test]
    fn whitened_terms_match_their_sum_of_squares(
        e in prop::collection::vec(-5.0f64..5.0, 0..30),
        phi in -0.99f64..0.99,
    ) {
        let w = ar1::whiten(&e, phi);
        let ss: f64 = w.iter().map(|x| x * x).sum();
        prop_assert!((ss - ar1::whitened_ss(&e, phi)).abs() <= 1e-9 * (1.0 + ss));
        let stats = Ar1Stats::from_series([e.as_slice()]);
        prop_assert!((stats.whitened_ss(phi) - ss).abs() <= 1e-9 * (1.0 + ss));
    }

    #[test]
    fn pooled_ar1_statistics_add_up(
        a in prop::collection::vec(-3.0f64..3.0, 1..12),
        b in prop::collection::vec(-3.0f64..3.0, 1..12),
        phi in -0.9f64..0.9,
    ) {
        let pooled = Ar1Stats::from_series([a.as_slice(), b.as_slice()]);
        let split = ar1::whitened_ss(&a, phi) + ar1::whitened_ss(&b, phi);
        prop_assert!((pooled.whitened_ss(phi) - split).abs() < 1e-9);
        prop_assert_eq!(pooled.n_obs, a.len() + b.len());
    }

    #[test]
    fn bucket_month_conserves_water(
        snow in 0.0f64..300.0,
        soil_frac in 0.0f64..1.0,
        tmean in -30.0f64..35.0,
        precip in 0.0f64..400.0,
        pet in 0.0f64..250.0,
        awc in 10.0f64..400.0,
    ) {
        let params = WaterBalanceParams { awc, ..Default::default() };
        let state = BucketState { snowpack: snow, soil_water: soil_frac * awc };
        let (next, flux) = step_bucket(state, tmean, precip, pet, &params);
        prop_assert!(flux.aet <= pet && flux.aet >= 0.0);
        prop_assert!(flux.deficit >= 0.0);
        prop_assert!(next.soil_water >= 0.0 && next.soil_water <= awc);
        prop_assert!(next.snowpack >= 0.0);
        let closure = precip - (next.snowpack - state.snowpack) - (next.soil_water - state.soil_water) - flux.aet - flux.runoff;
        prop_assert!(closure.abs() < 1e-9 * (1.0 + precip + snow + awc));
    }

    #[test]
    fn quantiles_are_monotone_and_bounded(
        values in prop::collection::vec(-100.0f64..100.0, 1..50),
        q1 in 0.0f64..1.0,
        q2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = quantile(&values, lo);
        let b = quantile(&values, hi);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a <= b + 1e-12);
        prop_assert!(a >= min - 1e-12 && b <= max + 1e-12);
    }

    #[test]
    fn ring_tables_round_trip(
        widths in prop::collection::vec(prop::collection::vec(0.001f64..10.0, 1..15), 1..6),
        start in 1850i32..1990,
    ) {
        let rings: Vec<RingSeries> = widths
            .iter()
            .enumerate()
            .map(|(i, w)| RingSeries::new(format!("T{i}"), format!("S{}", i % 2), "P1", "POTR", start - 3, start + i as i32, w.clone()).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_rings(&mut buf, &rings).unwrap();
        let mut back = read_rings(buf.as_slice(), &RingSchema::default()).unwrap();
        back.sort_by(|a, b| a.tree_id.cmp(&b.tree_id));
        prop_assert_eq!(back, rings);
    }

    #[test]
    fn filtered_covariances_stay_positive_semidefinite(seed in 0u64..500, n in 1usize..12, p in 1usize..4, k in 1usize..4) {
        use rand::Rng;
        let mut rng = stream_rng(seed, "psd", 0);
        let cells: Vec<(usize, usize)> = (0..n).flat_map(|t| (0..k).map(move |j| (j, t))).collect();
        let f = DMatrix::from_fn(cells.len(), p, |_, _| rng.random_range(-3.0..3.0));
        let y = DVector::from_fn(cells.len(), |_, _| rng.random_range(-2.0..2.0));
        let w = DMatrix::from_diagonal(&DVector::from_fn(p, |_, _| rng.random_range(1e-6..1.0)));
        let tau2 = rng.random_range(1e-4..2.0);
        let plan = WindowPlan::strict(&cells, n);
        let filt = kalman_filter(&y, &f, &plan, &w, tau2, &StatePrior::diffuse(p, 100.0)).unwrap();
        prop_assert_eq!(filt.jitters, 0);
        for c in filt.c.iter().chain(&rts_smoother(&filt).cov) {
            let min = c.clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min >= -1e-10, "min eigenvalue {}", min);
        }
    }
}
