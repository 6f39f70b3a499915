use jpinn::datio::SplitConfig;
use jpinn::ensemble::{
    cross_offsets, holdout_sites, make_bootstrap_splits, no_information_rate, relative_overfitting_rate, rows_of_sites,
    run_members, weight_from_rate, weighted_pool, EnsembleConfig, EnsembleResult, OverfitWeights,
};
use jpinn::simdata::Scenario;
use jpinn::trainer::{Mode, ModelConfig, TrainConfig};
use proptest::prelude::*;

fn brute_gamma(obs: &[f64], pred: &[f64]) -> f64 {
    let mut s = 0.0;
    for y in obs {
        for p in pred {
            s += (y - p) * (y - p);
        }
    }
    s / (obs.len() * pred.len()) as f64
}

proptest! {
    #[test]
    fn gamma_matches_double_loop(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..=10)) {
        let (obs, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let fast = no_information_rate(&obs, &pred);
        let slow = brute_gamma(&obs, &pred);
        prop_assert!((fast - slow).abs() <= 1e-9 * slow.max(1.0), "{} vs {}", fast, slow);
    }

    #[test]
    fn rate_stays_in_unit_interval(test in 0.0f64..10.0, train in 0.0f64..5.0, gamma in 0.0f64..10.0) {
        prop_assume!(gamma != train);
        let r = relative_overfitting_rate(test, train, gamma).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let w = weight_from_rate(r);
        prop_assert!((0.632..=0.632 / 0.816 + 1e-12).contains(&w));
    }
}

#[test]
fn weight_end_points() {
    assert!((weight_from_rate(0.0) - 0.632).abs() < 1e-9);
    assert!((weight_from_rate(1.0) - 0.774509803921).abs() < 1e-9);
}

#[test]
fn no_overfitting_gives_plain_632_weights() {
    let w = OverfitWeights::new([2.0, 2.0, 2.0], 5.0, false).unwrap();
    assert_eq!((w.r_te, w.r_site), (0.0, 0.0));
    assert!((w.coef[0] - (1.0 - 2.0 * 0.632)).abs() < 1e-12);
    assert!((w.combined() - 2.0).abs() < 1e-12);
}

#[test]
fn pool_mixture_of_identical_pools_scales_it() {
    let p: Vec<f64> = (0..11).map(|i| i as f64).collect();
    let out = weighted_pool([&p, &p, &p], [0.2, 0.3, 0.5], 11).unwrap();
    assert_eq!(out, p);
    let shifted: Vec<f64> = p.iter().map(|v| v + 2.0).collect();
    let (lo, hi) = cross_offsets(&[0.0], &shifted, 0.5, 1000).unwrap();
    assert!((lo - 4.5).abs() < 1e-12 && (hi - 9.5).abs() < 1e-12);
}

#[test]
fn small_ensemble_end_to_end() {
    let mut sc = Scenario::plume_small();
    sc.sampling.sites = 16;
    sc.sampling.weeks = 5;
    sc.sampling.spinup_weeks = 2;
    let ds = sc.generate().unwrap();
    let (inner, held) = holdout_sites(&ds.site_ids(), 3, 4).unwrap();
    assert_eq!(held.len(), 3);
    let plans = make_bootstrap_splits(&inner, 3, 4).unwrap();
    let model = ModelConfig { estimation_widths: vec![8, 4], parameter_widths: vec![8, 4], ..Default::default() };
    let train = TrainConfig { epochs: 2, batch_size: 32, mode: Mode::Joint, ..Default::default() };
    let split = SplitConfig::default();
    let a = run_members(&ds, &plans, &model, &train, &split, 1).unwrap();
    let b = run_members(&ds, &plans, &model, &train, &split, 3).unwrap();
    assert_eq!(
        a.iter().map(|m| &m.predictions).collect::<Vec<_>>(),
        b.iter().map(|m| &m.predictions).collect::<Vec<_>>()
    );
    let cfg = EnsembleConfig { runs: 3, holdout_sites: 3, ..Default::default() };
    let r = EnsembleResult::aggregate(&ds, &a, &cfg).unwrap();
    assert_eq!(r.runs(), 3);
    assert_eq!(r.mean.len(), ds.len());
    for (m, iv) in r.mean.iter().zip(&r.interval) {
        for k in 0..2 {
            assert!(iv[k].0 >= 0.0 && iv[k].0 <= m[k] && m[k] <= iv[k].1);
        }
    }
    let d = r.decomposition_report();
    for k in 0..2 {
        assert!((d.variance_share[k] + d.bias_noise_share[k] - 1.0).abs() < 1e-12);
    }
    let cov = r.coverage(&ds, &rows_of_sites(&ds, &held));
    assert!(cov.iter().all(|c| c.is_some_and(|c| (0.0..=1.0).contains(&c))));
}
