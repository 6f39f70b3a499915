//! The desk-scale pipeline in one call: simulate, train every mode on every
//! seed's site split, then run a bootstrap ensemble per seed.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use jpinn::datio::Dataset;
use jpinn::ensemble::{make_bootstrap_splits, plan_assignment, Decomposition};
use jpinn::physics::{Species, N_TERMS};
use jpinn::trainer::{train_joint, Mode, TrainConfig, TrainHistory};
use rayon::prelude::*;

use crate::commands::{cmd_ensemble, cmd_simulate, model_metrics, write_metrics_csv, write_split_csv, MetricRow};
use crate::{CliError, RunConfig};

#[derive(Debug, Clone)]
pub struct ModeRun {
    pub seed: u64,
    pub mode: Mode,
    pub metrics: Vec<MetricRow>,
    pub history: TrainHistory,
}

impl ModeRun {
    pub fn metric(&self, split: &str, species: Species) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.split == split && m.species == species)
    }
}

#[derive(Debug, Clone)]
pub struct SeedEnsemble {
    pub seed: u64,
    pub coverage: [Option<f64>; 2],
    pub n_holdout: usize,
    /// Ensemble means breaking NO2 <= NOx.
    pub ordering_violations: usize,
    /// Member predictions breaking NO2 <= NOx.
    pub member_violations: usize,
    pub targets: usize,
    pub decomposition: Decomposition,
    /// Final-epoch mean squared terms of each member.
    pub member_terms: Vec<[f64; N_TERMS]>,
}

#[derive(Debug, Clone, Default)]
pub struct ReproduceReport {
    pub runs: Vec<ModeRun>,
    pub ensembles: Vec<SeedEnsemble>,
    /// Wall time of simulation plus mode comparison, and of the ensembles.
    pub mode_seconds: f64,
    pub ensemble_seconds: f64,
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl ReproduceReport {
    pub fn runs_of(&self, mode: Mode) -> impl Iterator<Item = &ModeRun> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    pub fn median_site_rmse(&self, mode: Mode, species: Species) -> Option<f64> {
        let mut v: Vec<f64> = self.runs_of(mode).filter_map(|r| r.metric("site", species).map(|m| m.rmse)).collect();
        median(&mut v)
    }

    pub fn median_site_r2(&self, mode: Mode, species: Species) -> Option<f64> {
        let mut v: Vec<f64> = self.runs_of(mode).filter_map(|r| r.metric("site", species).and_then(|m| m.r2)).collect();
        median(&mut v)
    }

    /// Site-test R2 of `mode` for `seed`.
    pub fn site_r2(&self, mode: Mode, seed: u64, species: Species) -> Option<f64> {
        self.runs_of(mode).find(|r| r.seed == seed).and_then(|r| r.metric("site", species)).and_then(|m| m.r2)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:?}"))
}

fn run_modes(cfg: &RunConfig, ds: &Dataset, out: &Path, jobs: usize) -> Result<Vec<ModeRun>, CliError> {
    let sites = ds.site_ids();
    let mut tasks = Vec::new();
    for &seed in &cfg.reproduce.seeds {
        let plan = make_bootstrap_splits(&sites, 2, seed)?.swap_remove(0);
        let split = plan_assignment(ds, &plan, &jpinn::datio::SplitConfig { seed, ..cfg.split })?;
        write_split_csv(ds, &split, &out.join("train").join(format!("seed{seed}_split.csv")))?;
        for &mode in &cfg.reproduce.modes {
            tasks.push((seed, mode, split.clone()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| {
        tasks
            .par_iter()
            .map(|(seed, mode, split)| {
                let tc = TrainConfig { seed: *seed, mode: *mode, ..cfg.train.clone() };
                let o = train_joint(ds, split, &cfg.model, &tc)
                    .map_err(|e| CliError::from(e).context(&format!("seed {seed}, mode {mode}")))?;
                log::info!("seed {seed} mode {mode} done");
                Ok(ModeRun { seed: *seed, mode: *mode, metrics: model_metrics(&o.model, ds, split), history: o.history })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })
}

fn write_comparison(report: &ReproduceReport, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(&out.join("comparison.csv"))?);
    w.write_record(["seed", "mode", "split", "species", "n", "r2", "rmse"])?;
    for r in &report.runs {
        for m in &r.metrics {
            w.write_record([
                r.seed.to_string(),
                r.mode.to_string(),
                m.split.clone(),
                m.species.name().to_string(),
                m.n.to_string(),
                opt(m.r2),
                format!("{:?}", m.rmse),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&out.join("comparison_summary.csv"))?);
    w.write_record(["mode", "species", "seeds", "median_site_r2", "median_site_rmse"])?;
    for &mode in &cfg.reproduce.modes {
        for sp in Species::BOTH {
            w.write_record([
                mode.to_string(),
                sp.name().to_string(),
                report.runs_of(mode).count().to_string(),
                opt(report.median_site_r2(mode, sp)),
                opt(report.median_site_rmse(mode, sp)),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&out.join("constraints.csv"))?);
    let mut header = vec!["seed".to_string(), "mode".to_string()];
    header.extend((1..=N_TERMS).map(|i| format!("final_e{i}_sq")));
    w.write_record(&header)?;
    for r in &report.runs {
        let Some(last) = r.history.last() else { continue };
        let mut row = vec![r.seed.to_string(), r.mode.to_string()];
        for (i, v) in last.mean_sq.iter().enumerate() {
            row.push(if i < 2 && !last.pde_evaluated { "NA".into() } else { format!("{v:?}") });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_coverage_table(report: &ReproduceReport, out: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(&out.join("coverage.csv"))?);
    w.write_record([
        "seed",
        "species",
        "n_holdout",
        "coverage",
        "ordering_violations",
        "member_violations",
        "targets",
        "variance_share",
        "bias_noise_share",
    ])?;
    for e in &report.ensembles {
        for sp in Species::BOTH {
            let k = sp.index();
            w.write_record([
                e.seed.to_string(),
                sp.name().to_string(),
                e.n_holdout.to_string(),
                opt(e.coverage[k]),
                e.ordering_violations.to_string(),
                e.member_violations.to_string(),
                e.targets.to_string(),
                format!("{:?}", e.decomposition.variance_share[k]),
                format!("{:?}", e.decomposition.bias_noise_share[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Run the whole pipeline for `cfg` into `out`.
pub fn run_reproduce(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<ReproduceReport, CliError> {
    if cfg.reproduce.seeds.is_empty() {
        return Err(CliError::Config("reproduce.seeds is empty".into()));
    }
    let start = Instant::now();
    cfg.write_resolved(out)?;
    std::fs::create_dir_all(out.join("train"))?;
    let ds = cmd_simulate(&cfg.scenario, &out.join("data.csv"))?;
    let mut report = ReproduceReport { runs: run_modes(cfg, &ds, out, jobs)?, ..Default::default() };
    for r in &report.runs {
        let dir = out.join("train").join(format!("seed{}_{}", r.seed, r.mode));
        std::fs::create_dir_all(&dir)?;
        r.history.write_csv(create(&dir.join("history.csv"))?)?;
        write_metrics_csv(&r.metrics, &dir.join("metrics.csv"))?;
    }
    write_comparison(&report, cfg, out)?;
    report.mode_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    if cfg.reproduce.ensemble {
        let mut scenario = cfg.scenario.clone();
        if cfg.reproduce.ensemble_weeks > 0 {
            scenario.sampling.weeks = cfg.reproduce.ensemble_weeks;
        }
        let ens_dir = out.join("ensemble");
        let ds_e = cmd_simulate(&scenario, &ens_dir.join("data.csv"))?;
        for &seed in &cfg.reproduce.seeds {
            let mut c = cfg.clone();
            c.scenario = scenario.clone();
            if cfg.reproduce.ensemble_epochs > 0 {
                c.train.epochs = cfg.reproduce.ensemble_epochs;
            }
            let c = c.resolve(Some(seed), Some(Mode::Joint))?;
            let run = cmd_ensemble(&c, &ds_e, &ens_dir.join(format!("seed{seed}")), jobs)
                .map_err(|e| e.context(&format!("ensemble seed {seed}")))?;
            let (coverage, n_holdout) = run.coverage(&ds_e);
            report.ensembles.push(SeedEnsemble {
                seed,
                coverage,
                n_holdout,
                ordering_violations: run.result.ordering_violations(),
                member_violations: run
                    .members
                    .iter()
                    .map(|m| m.predictions.iter().filter(|p| p[0] > p[1]).count())
                    .sum(),
                targets: ds_e.len(),
                decomposition: run.result.decomposition_report(),
                member_terms: run.members.iter().filter_map(|m| m.history.last().map(|l| l.mean_sq)).collect(),
            });
        }
        write_coverage_table(&report, out)?;
    }
    report.ensemble_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
