use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use jpinn::datio::{
    normalize_importances, permutation_importance, ConcentrationModel, Dataset, SplitAssignment, SplitTag,
};
use jpinn::ensemble::{
    holdout_sites, make_bootstrap_splits, plan_assignment, rows_of_sites, run_members, write_member_predictions,
    EnsembleResult, MemberRun, SplitPlan,
};
use jpinn::physics::Species;
use jpinn::simdata::Scenario;
use jpinn::trainer::{eval_rows, metrics, train_joint, EvalSplit, JpinnModel, TrainHistory, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load_and_validate(path).map_err(|e| CliError::from(e).context(&path.display().to_string()))
}

/// Simulate `scenario` and write the dataset to `out`, with the scenario
/// itself next to it as `<stem>.scenario.toml`.
pub fn cmd_simulate(scenario: &Scenario, out: &Path) -> Result<Dataset, CliError> {
    let ds = scenario.generate()?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ds.save(out)?;
    let resolved = toml::to_string_pretty(scenario).expect("scenario serializes");
    std::fs::write(out.with_extension("scenario.toml"), resolved)?;
    log::info!("wrote {} rows to {}", ds.len(), out.display());
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Splits and metrics

/// The split for a single model: the tags in the data when any row is
/// tagged, otherwise a seeded site plan.
pub fn single_split(ds: &Dataset, cfg: &RunConfig) -> Result<SplitAssignment, CliError> {
    if ds.records.iter().any(|r| r.split != SplitTag::Predict) {
        let split = SplitAssignment::from_tags(ds);
        if split.train.is_empty() {
            return Err(CliError::Config("data is tagged but has no train rows".into()));
        }
        return Ok(split);
    }
    let plan = make_bootstrap_splits(&ds.site_ids(), 2, cfg.seed)?.swap_remove(0);
    Ok(plan_assignment(ds, &plan, &cfg.split)?)
}

pub fn write_split_csv(ds: &Dataset, split: &SplitAssignment, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["site_id", "week", "split"])?;
    for (rec, tag) in ds.records.iter().zip(split.tags(ds.len())) {
        w.write_record([rec.site_id.as_str(), &rec.week.to_string(), tag.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_split_csv`]; training duplicates are not restored.
pub fn read_split_csv(ds: &Dataset, path: &Path) -> Result<SplitAssignment, CliError> {
    let index: HashMap<(&str, i64), usize> =
        ds.records.iter().enumerate().map(|(i, r)| ((r.site_id.as_str(), r.week), i)).collect();
    let mut split = SplitAssignment::default();
    let mut rdr = csv::Reader::from_reader(File::open(path)?);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || CliError::Data(format!("{}: line {}: malformed", path.display(), line + 2));
        let site = rec.get(0).ok_or_else(bad)?;
        let week: i64 = rec.get(1).and_then(|w| w.parse().ok()).ok_or_else(bad)?;
        let tag: SplitTag = rec.get(2).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let &row = index
            .get(&(site, week))
            .ok_or_else(|| CliError::Data(format!("{}: ({site}, {week}) not in data", path.display())))?;
        match tag {
            SplitTag::Train => split.train.push(row),
            SplitTag::RegularTest => split.regular.push(row),
            SplitTag::SiteTest => split.site.push(row),
            SplitTag::Predict => split.predict.push(row),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub split: String,
    pub species: Species,
    pub n: usize,
    pub r2: Option<f64>,
    pub rmse: f64,
}

/// R2/RMSE per species of `pred` against the observations of `rows`.
pub fn metric_rows(ds: &Dataset, label: &str, rows: &[usize], pred: &[[f64; 2]]) -> Vec<MetricRow> {
    let obs: Vec<[f64; 2]> = rows.iter().filter_map(|&r| ds.records[r].observed()).collect();
    let pred: Vec<[f64; 2]> =
        rows.iter().zip(pred).filter(|(&r, _)| ds.records[r].observed().is_some()).map(|(_, p)| *p).collect();
    match metrics(&obs, &pred) {
        Ok(m) => Species::BOTH
            .iter()
            .map(|&sp| MetricRow {
                split: label.into(),
                species: sp,
                n: obs.len(),
                r2: m[sp.index()].r2,
                rmse: m[sp.index()].rmse,
            })
            .collect(),
        Err(_) => Vec::new(),
    }
}

pub fn model_metrics<M: ConcentrationModel + ?Sized>(model: &M, ds: &Dataset, split: &SplitAssignment) -> Vec<MetricRow> {
    let rows = eval_rows(ds, split);
    EvalSplit::ALL
        .iter()
        .zip(&rows)
        .flat_map(|(s, r)| metric_rows(ds, s.as_str(), r, &model.predict_ppb(ds, r)))
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["split", "species", "n", "r2", "rmse"])?;
    for m in rows {
        w.write_record([
            m.split.clone(),
            m.species.name().to_string(),
            m.n.to_string(),
            m.r2.map_or("NA".into(), |v| format!("{v:?}")),
            format!("{:?}", m.rmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_history(history: &TrainHistory, path: &Path) -> Result<(), CliError> {
    history.write_csv(create(path)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Train

pub fn cmd_train(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainOutcome, CliError> {
    cfg.write_resolved(out)?;
    let split = single_split(ds, cfg)?;
    write_split_csv(ds, &split, &out.join("split.csv"))?;
    log::info!(
        "training mode {} on {} rows ({} train, {} regular, {} site, {} predict)",
        cfg.train.mode,
        ds.len(),
        split.train.len(),
        split.regular.len(),
        split.site.len(),
        split.predict.len()
    );
    let outcome = train_joint(ds, &split, &cfg.model, &cfg.train)?;
    outcome.model.save(&out.join("model"))?;
    write_history(&outcome.history, &out.join("history.csv"))?;
    write_metrics_csv(&model_metrics(&outcome.model, ds, &split), &out.join("metrics.csv"))?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Ensemble

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlansFile {
    pub holdout: Vec<String>,
    pub plan: Vec<SplitPlan>,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub holdout: Vec<String>,
    pub members: Vec<MemberRun>,
    pub result: EnsembleResult,
}

impl EnsembleRun {
    pub fn holdout_rows(&self, ds: &Dataset) -> Vec<usize> {
        rows_of_sites(ds, &self.holdout)
    }

    /// Metrics of the ensemble mean on the held-out sites and on the rest.
    pub fn metrics(&self, ds: &Dataset) -> Vec<MetricRow> {
        let hold = self.holdout_rows(ds);
        let in_hold: std::collections::HashSet<usize> = hold.iter().copied().collect();
        let inner: Vec<usize> = (0..ds.len()).filter(|r| !in_hold.contains(r)).collect();
        let pick = |rows: &[usize]| -> Vec<[f64; 2]> { rows.iter().map(|&r| self.result.mean[r]).collect() };
        let mut out = metric_rows(ds, "holdout", &hold, &pick(&hold));
        out.extend(metric_rows(ds, "inner", &inner, &pick(&inner)));
        out
    }

    /// Coverage over the observed held-out rows.
    pub fn coverage(&self, ds: &Dataset) -> ([Option<f64>; 2], usize) {
        let rows = self.holdout_rows(ds);
        let n = rows.iter().filter(|&&r| ds.records[r].observed().is_some()).count();
        (self.result.coverage(ds, &rows), n)
    }
}

fn ensemble_plans(cfg: &RunConfig, ds: &Dataset) -> Result<PlansFile, CliError> {
    let sites = ds.site_ids();
    let (inner, holdout) = if cfg.ensemble.holdout_sites > 0 {
        holdout_sites(&sites, cfg.ensemble.holdout_sites, cfg.seed)?
    } else {
        (sites, Vec::new())
    };
    Ok(PlansFile { holdout, plan: make_bootstrap_splits(&inner, cfg.ensemble.runs, cfg.seed)? })
}

pub fn run_ensemble(cfg: &RunConfig, ds: &Dataset, jobs: usize) -> Result<EnsembleRun, CliError> {
    let plans = ensemble_plans(cfg, ds)?;
    log::info!("ensemble: {} members, {} held-out sites, {jobs} jobs", plans.plan.len(), plans.holdout.len());
    let members = run_members(ds, &plans.plan, &cfg.model, &cfg.train, &cfg.split, jobs)?;
    let result = EnsembleResult::aggregate(ds, &members, &cfg.ensemble)?;
    Ok(EnsembleRun { holdout: plans.holdout, members, result })
}

fn write_coverage(run: &EnsembleRun, ds: &Dataset, path: &Path) -> Result<(), CliError> {
    let (cov, n) = run.coverage(ds);
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["species", "alpha", "n", "coverage"])?;
    for sp in Species::BOTH {
        w.write_record([
            sp.name().to_string(),
            format!("{:?}", run.result.alpha),
            n.to_string(),
            cov[sp.index()].map_or("NA".into(), |v| format!("{v:?}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_decomposition(result: &EnsembleResult, path: &Path) -> Result<(), CliError> {
    let d = result.decomposition_report();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["species", "variance_share", "bias_noise_share"])?;
    for sp in Species::BOTH {
        let k = sp.index();
        w.write_record([sp.name().to_string(), format!("{:?}", d.variance_share[k]), format!("{:?}", d.bias_noise_share[k])])?;
    }
    w.flush()?;
    Ok(())
}

fn write_ensemble_tables(run: &EnsembleRun, ds: &Dataset, out: &Path) -> Result<(), CliError> {
    run.result.write_summary(ds, create(&out.join("summary.csv"))?)?;
    run.result.write_stats(create(&out.join("stats.csv"))?)?;
    write_decomposition(&run.result, &out.join("decomposition.csv"))?;
    write_metrics_csv(&run.metrics(ds), &out.join("metrics.csv"))?;
    write_coverage(run, ds, &out.join("coverage.csv"))
}

fn member_dir(out: &Path, run_id: usize) -> PathBuf {
    out.join("members").join(format!("run_{run_id:03}"))
}

pub fn cmd_ensemble(cfg: &RunConfig, ds: &Dataset, out: &Path, jobs: usize) -> Result<EnsembleRun, CliError> {
    cfg.write_resolved(out)?;
    let run = run_ensemble(cfg, ds, jobs)?;
    let plans = PlansFile { holdout: run.holdout.clone(), plan: run.members.iter().map(|m| m.plan.clone()).collect() };
    std::fs::write(out.join("plans.toml"), toml::to_string_pretty(&plans).expect("plans serialize"))?;
    for m in &run.members {
        let dir = member_dir(out, m.plan.run_id);
        m.model.save(&dir.join("model"))?;
        write_history(&m.history, &dir.join("history.csv"))?;
        write_member_predictions(ds, m, create(&dir.join("predictions.csv"))?)?;
    }
    write_ensemble_tables(&run, ds, out)?;
    Ok(run)
}

// ---------------------------------------------------------------------------
// Evaluate and importance

/// Trained model and split from a `train` output directory.
pub fn load_trained(dir: &Path, ds: &Dataset) -> Result<(JpinnModel, SplitAssignment), CliError> {
    let model = JpinnModel::load(&dir.join("model"))?;
    let split = read_split_csv(ds, &dir.join("split.csv"))?;
    Ok((model, split))
}

fn reload_ensemble(dir: &Path, ds: &Dataset) -> Result<EnsembleRun, CliError> {
    let cfg = RunConfig::load(Some(&dir.join("config.toml")))?;
    let text = std::fs::read_to_string(dir.join("plans.toml"))?;
    let plans: PlansFile = toml::from_str(&text).map_err(|e| CliError::Data(format!("plans.toml: {e}")))?;
    let members = plans
        .plan
        .iter()
        .map(|p| {
            let model = JpinnModel::load(&member_dir(dir, p.run_id).join("model"))?;
            Ok(MemberRun::from_model(ds, p, &cfg.split, model, TrainHistory::default())?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let result = EnsembleResult::aggregate(ds, &members, &cfg.ensemble)?;
    Ok(EnsembleRun { holdout: plans.holdout, members, result })
}

/// Metrics of a `train` directory, or metrics plus the variance/bias
/// decomposition of an `ensemble` directory.
pub fn cmd_evaluate(ds: &Dataset, model_dir: &Path, out: &Path) -> Result<Vec<MetricRow>, CliError> {
    std::fs::create_dir_all(out)?;
    if model_dir.join("model").join("model.txt").exists() {
        let (model, split) = load_trained(model_dir, ds)?;
        let rows = model_metrics(&model, ds, &split);
        write_metrics_csv(&rows, &out.join("metrics.csv"))?;
        Ok(rows)
    } else if model_dir.join("plans.toml").exists() {
        let run = reload_ensemble(model_dir, ds)?;
        write_ensemble_tables(&run, ds, out)?;
        Ok(run.metrics(ds))
    } else {
        Err(CliError::Config(format!("{}: neither a train nor an ensemble output directory", model_dir.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    pub covariate: String,
    pub score: f64,
    pub normalized: f64,
}

/// Permutation importances of every covariate, ranked by score.
pub fn cmd_importance(cfg: &RunConfig, ds: &Dataset, model_dir: &Path, out: &Path) -> Result<Vec<ImportanceRow>, CliError> {
    cfg.write_resolved(out)?;
    let (model, split) = load_trained(model_dir, ds)?;
    let observed = |rows: &[usize]| -> Vec<usize> {
        rows.iter().copied().filter(|&r| ds.records[r].observed().is_some()).collect()
    };
    let mut rows = observed(&split.regular);
    rows.extend(observed(&split.site));
    if rows.len() < 2 {
        rows = observed(&(0..ds.len()).collect::<Vec<_>>());
    }
    rows.sort_unstable();
    let cap = cfg.importance.max_rows;
    if cap > 0 && rows.len() > cap {
        let step = rows.len() as f64 / cap as f64;
        rows = (0..cap).map(|i| rows[(i as f64 * step) as usize]).collect();
    }
    let scores = (0..ds.covariate_names.len())
        .map(|c| permutation_importance(&model, ds, &rows, c, cfg.importance.repeats, cfg.seed.wrapping_add(c as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let norm = normalize_importances(&scores);
    let mut ranked: Vec<ImportanceRow> = ds
        .covariate_names
        .iter()
        .zip(scores.iter().zip(&norm))
        .map(|(n, (&score, &normalized))| ImportanceRow { covariate: n.clone(), score, normalized })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.covariate.cmp(&b.covariate)));
    let mut w = csv::Writer::from_writer(create(&out.join("importance.csv"))?);
    w.write_record(["rank", "covariate", "score", "normalized"])?;
    for (i, r) in ranked.iter().enumerate() {
        w.write_record([(i + 1).to_string(), r.covariate.clone(), format!("{:?}", r.score), format!("{:?}", r.normalized)])?;
    }
    w.flush()?;
    Ok(ranked)
}
