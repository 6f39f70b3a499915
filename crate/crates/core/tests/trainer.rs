use jpinn::datio::{Dataset, SplitConfig};
use jpinn::ensemble::{make_bootstrap_splits, plan_assignment};
use jpinn::physics::LossWeights;
use jpinn::simdata::Scenario;
use jpinn::trainer::{train_joint, train_model, JpinnModel, Mode, ModelConfig, TrainConfig};

fn small() -> (Dataset, jpinn::datio::SplitAssignment) {
    let mut sc = Scenario::plume_small();
    sc.sampling.sites = 14;
    sc.sampling.weeks = 6;
    sc.sampling.spinup_weeks = 2;
    let ds = sc.generate().unwrap();
    let plan = make_bootstrap_splits(&ds.site_ids(), 2, 3).unwrap().swap_remove(0);
    let split = plan_assignment(&ds, &plan, &SplitConfig { seed: 3, ..Default::default() }).unwrap();
    (ds, split)
}

fn tiny_model() -> ModelConfig {
    ModelConfig { estimation_widths: vec![12, 6], parameter_widths: vec![12, 6], ..Default::default() }
}

fn cfg(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, seed: 11, mode, ..Default::default() }
}

#[test]
fn same_seed_same_result() {
    let (ds, split) = small();
    let a = train_joint(&ds, &split, &tiny_model(), &cfg(Mode::Joint, 3)).unwrap();
    let b = train_joint(&ds, &split, &tiny_model(), &cfg(Mode::Joint, 3)).unwrap();
    assert_eq!(a.history.losses(), b.history.losses());
    assert_eq!(a.model, b.model);
    let c = train_joint(&ds, &split, &tiny_model(), &TrainConfig { seed: 12, ..cfg(Mode::Joint, 3) }).unwrap();
    assert_ne!(a.history.losses(), c.history.losses());
}

#[test]
fn supervised_loss_falls_on_a_single_sample() {
    let (ds, mut split) = small();
    // output shift fitted on the full split, so one sample starts off target
    let model = JpinnModel::build(&ds, &split.train, &tiny_model(), Mode::BaselineNoPhysics, 11).unwrap();
    split.train.truncate(1);
    let c = TrainConfig { batch_size: 1, learning_rate: 0.003, ..cfg(Mode::BaselineNoPhysics, 60) };
    let out = train_model(model, &ds, &split, &c).unwrap();
    let l = out.history.losses();
    assert!(l.last().unwrap() < &(0.1 * l[0]), "{} -> {}", l[0], l.last().unwrap());
}

#[test]
fn baseline_matches_joint_with_physics_weights_zeroed() {
    let (ds, split) = small();
    let base = train_joint(&ds, &split, &tiny_model(), &cfg(Mode::BaselineNoPhysics, 3)).unwrap();
    let joint = TrainConfig { weights: LossWeights::default().supervised_only(), ..cfg(Mode::Joint, 3) };
    let zeroed = train_joint(&ds, &split, &tiny_model(), &joint).unwrap();
    assert_eq!(base.history.losses(), zeroed.history.losses());
    let rows: Vec<usize> = (0..ds.len()).collect();
    assert_eq!(base.model.predict_log(&ds, &rows).unwrap(), zeroed.model.predict_log(&ds, &rows).unwrap());
    assert!(base.history.epochs.iter().all(|e| !e.pde_evaluated));
}

#[test]
fn every_mode_trains_and_records_terms() {
    let (ds, split) = small();
    for mode in Mode::ALL {
        let out = train_joint(&ds, &split, &tiny_model(), &cfg(mode, 2)).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.loss.is_finite(), "{mode}");
        assert_eq!(last.pde_evaluated, mode != Mode::BaselineNoPhysics);
        let units = if mode == Mode::Separate { 2 } else { 1 };
        assert_eq!(out.model.units.len(), units, "{mode}");
        if mode != Mode::BaselineNoPhysics {
            assert!(last.mean_sq[0] > 0.0);
        }
    }
}

#[test]
fn saved_model_predicts_identically() {
    let (ds, split) = small();
    let out = train_joint(&ds, &split, &tiny_model(), &cfg(Mode::Joint, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.model.save(dir.path()).unwrap();
    let back = JpinnModel::load(dir.path()).unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    assert_eq!(out.model.predict_log(&ds, &rows).unwrap(), back.predict_log(&ds, &rows).unwrap());
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let (ds, split) = small();
    let out = train_joint(&ds, &split, &tiny_model(), &cfg(Mode::BaselineNoPhysics, 4)).unwrap();
    let mut buf = Vec::new();
    out.history.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().contains("NA"));
}
