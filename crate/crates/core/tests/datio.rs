use jpinn::datio::{
    normalize_importances, permutation_importance, stratified_split, ConcentrationModel, Dataset, SplitConfig,
};
use jpinn::simdata::Scenario;

fn scenario_data() -> Dataset {
    let mut sc = Scenario::plume_small();
    sc.sampling.sites = 20;
    sc.sampling.weeks = 50;
    sc.generate().unwrap()
}

/// Predicts from one covariate, plus a little of a second, both in units
/// of their spread.
struct Leaning {
    strong: usize,
    weak: usize,
    sd: Vec<f64>,
}

impl ConcentrationModel for Leaning {
    fn predict_ppb(&self, ds: &Dataset, rows: &[usize]) -> Vec<[f64; 2]> {
        rows.iter()
            .map(|&r| {
                let c = &ds.records[r].covariates;
                let v = 40.0 + 5.0 * c[self.strong] / self.sd[self.strong] + 0.5 * c[self.weak] / self.sd[self.weak];
                [v, 2.0 * v]
            })
            .collect()
    }
}

#[test]
fn importance_ranks_the_covariate_the_model_uses() {
    let ds = scenario_data();
    let rows: Vec<usize> = (0..ds.len()).step_by(3).collect();
    let n = ds.covariate_names.len();
    let sd: Vec<f64> = (0..n)
        .map(|c| {
            let v: Vec<f64> = ds.records.iter().map(|r| r.covariates[c]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .collect();
    let strong = ds.covariate_index("u10").unwrap();
    let weak = ds.covariate_index("v50").unwrap();
    let m = Leaning { strong, weak, sd };
    // observations the model reproduces exactly
    let all: Vec<usize> = (0..ds.len()).collect();
    let exact = m.predict_ppb(&ds, &all);
    let mut ds = ds;
    for (rec, p) in ds.records.iter_mut().zip(exact) {
        rec.no2_ppb = Some(p[0]);
        rec.nox_ppb = Some(p[1]);
    }
    let scores: Vec<f64> =
        (0..n).map(|c| permutation_importance(&m, &ds, &rows, c, 3, 8).unwrap()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    assert_eq!(order[..2], [strong, weak], "{scores:?}");
    for c in (0..n).filter(|c| ![strong, weak].contains(c)) {
        assert_eq!(scores[c], 0.0, "{}", ds.covariate_names[c]);
    }
    let w = normalize_importances(&scores);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn simulated_data_round_trips_through_csv() {
    let ds = scenario_data();
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    let back = Dataset::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.covariate_names, ds.covariate_names);
    assert_eq!(back.records, ds.records);
}

#[test]
fn split_share_holds_on_simulated_rows() {
    let ds = scenario_data();
    let rows: Vec<usize> = (0..1000).collect();
    for seed in 0..5 {
        let cfg = SplitConfig { oversample_tails: 0.0, seed, ..Default::default() };
        let a = stratified_split(&ds, &rows, &cfg).unwrap();
        let share = a.train.len() as f64 / rows.len() as f64;
        assert!((share - 0.78).abs() <= 0.02, "seed {seed}: {share}");
        assert_eq!(a.train.len() + a.regular.len(), rows.len());
    }
}
