//! Acceptance checks, one PASS/FAIL line each.
//!
//! Runs the property suites and the bundled-scale reproduce pipeline (about
//! 25 minutes on one core). `JPINN_ACCEPT_QUICK=1` shrinks the pipeline so
//! the harness itself can be exercised in seconds; the empirical checks are
//! then not meaningful.
//!
//! The process fails when a property check (1, 2, 3, 8, 10) fails. The
//! empirical checks (4, 5, 6, 7, 9) are reported but do not fail the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use jpinn::ensemble::{no_information_rate, weight_from_rate};
use jpinn::nets::{Network, NetworkTopology, DESK_ESTIMATION_WIDTHS, DESK_PARAMETER_WIDTHS};
use jpinn::physics::Species;
use jpinn::simdata::{simulate, Boundary, FieldSet, GridSpec, SpeciesState};
use jpinn::trainer::{Mode, TrainHistory};
use jpinn::verify::{domain_points, fd_check, manufactured_cases, manufactured_residual};
use jpinn_cli::reproduce::{run_reproduce, ReproduceReport};
use jpinn_cli::RunConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_TOL: f64 = 1e-4;
const FD_POINTS: usize = 100;
const FD_SECONDS: f64 = 60.0;
const MMS_TOL: f64 = 1e-6;
const MMS_FAMILIES: usize = 5;
const MMS_SECONDS: f64 = 10.0;
const MASS_TOL: f64 = 1e-8;
const MASS_STEPS: usize = 1000;
const SPREAD_TOL: f64 = 0.05;
const RMSE_REDUCTION: f64 = 0.15;
const COMPARISON_MINUTES: f64 = 30.0;
const MIN_SITES: usize = 60;
const MIN_WEEKS: usize = 80;
const SEEDS: usize = 5;
const R2_SLACK: f64 = 0.01;
const STRICT_WINS: usize = 3;
const E5_TOL: f64 = 1e-2;
const PDE_TOL: f64 = 1e-3;
const WEIGHT_TOL: f64 = 1e-9;
const GAMMA_MAX_N: usize = 10;
const COVERAGE: (f64, f64) = (0.90, 0.98);
const RUNS: usize = 25;

struct Outcome {
    id: usize,
    pass: bool,
    what: &'static str,
    detail: String,
}

fn check(id: usize, what: &'static str, result: (bool, String)) -> Outcome {
    let o = Outcome { id, pass: result.0, what, detail: result.1 };
    println!("{} {:>2} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.what, o.detail);
    o
}

fn quick() -> bool {
    std::env::var("JPINN_ACCEPT_QUICK").is_ok_and(|v| v == "1")
}

// ---------------------------------------------------------------------------
// Property checks

fn autodiff_suite() -> (bool, String) {
    let start = Instant::now();
    let width = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x = Array2::from_shape_fn((FD_POINTS, width), |_| rng.random_range(-2.0..2.0));
    let nets = [
        ("estimation", NetworkTopology::estimation_net(width, &DESK_ESTIMATION_WIDTHS, 2)),
        ("parameter", NetworkTopology::parameter_net(width, &DESK_PARAMETER_WIDTHS, 2)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, topo)) in nets.into_iter().enumerate() {
        let net = Network::new(topo, 10 + i as u64).unwrap();
        let r = fd_check(&net, &x, 1e-5, 1e-3, 1e-2).unwrap();
        ok &= r.first < FD_TOL && r.second < FD_TOL && r.skipped_kinks * 20 < r.checked;
        parts.push(format!("{name} first {:.1e} second {:.1e} ({} kink stencils skipped)", r.first, r.second, r.skipped_kinks));
    }
    let secs = start.elapsed().as_secs_f64();
    (ok && secs < FD_SECONDS, format!("{}; {secs:.1} s", parts.join(", ")))
}

fn manufactured_suite() -> (bool, String) {
    let start = Instant::now();
    let cases = manufactured_cases();
    let mut worst = 0.0f64;
    for c in &cases {
        worst = worst.max(manufactured_residual(c, &domain_points(&c.domain, 500)).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    (
        cases.len() >= MMS_FAMILIES && worst < MMS_TOL && secs < MMS_SECONDS,
        format!("{} families, max |residual| {worst:.1e}, {secs:.2} s", cases.len()),
    )
}

fn conservation_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = GridSpec { nx: 24, ny: 18, dx: 1.0, dy: 1.0, dt: 0.1, steps: MASS_STEPS, boundary: Boundary::ZeroFlux, save_every: MASS_STEPS };
    let rough = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| Array2::from_shape_fn((g.nx, g.ny), |_| rng.random_range(lo..hi));
    let mut f = FieldSet::quiescent(&g);
    f.vx = rough(&mut rng, -1.5, 1.5);
    f.vy = rough(&mut rng, -1.5, 1.5);
    f.p = rough(&mut rng, 0.0, 0.6);
    let init = SpeciesState { c: [rough(&mut rng, 0.0, 5.0), rough(&mut rng, 5.0, 10.0)] };
    let end = simulate(&g, &f, &init).unwrap().states.pop().unwrap();
    let (m0, m1) = (init.mass(&g), end.mass(&g));
    let drift = (0..2).map(|k| ((m1[k] - m0[k]) / m0[k]).abs()).fold(0.0, f64::max);

    let p = 0.4;
    let g = GridSpec { nx: 81, ny: 81, dx: 1.0, dy: 1.0, dt: 0.25, steps: 80, boundary: Boundary::ZeroFlux, save_every: 80 };
    let mut f = FieldSet::quiescent(&g);
    f.p.fill(p);
    let mut init = SpeciesState::uniform(&g, 0.0, 0.0);
    init.c[0][(40, 40)] = 1.0;
    init.c[1][(40, 40)] = 1.0;
    let c = simulate(&g, &f, &init).unwrap().states.pop().unwrap().c[0].clone();
    let m = c.sum();
    let var_x = c.indexed_iter().map(|((i, _), v)| (i as f64 - 40.0).powi(2) * v).sum::<f64>() / m;
    let want = 2.0 * p * 80.0 * 0.25;
    let spread = (var_x - want).abs() / want;
    (
        drift < MASS_TOL && spread < SPREAD_TOL,
        format!("mass drift {drift:.1e} over {MASS_STEPS} steps, spread error {:.2}%", 100.0 * spread),
    )
}

fn weights_suite() -> (bool, String) {
    let w0 = weight_from_rate(0.0);
    let w1 = weight_from_rate(1.0);
    let ok_w = (w0 - 0.632).abs() < WEIGHT_TOL && (w1 - 0.774_509_803_921_568_6).abs() < WEIGHT_TOL;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=GAMMA_MAX_N);
        let obs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..80.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..80.0)).collect();
        let mut brute = 0.0;
        for y in &obs {
            for q in &pred {
                brute += (y - q) * (y - q);
            }
        }
        brute /= (n * n) as f64;
        worst = worst.max((no_information_rate(&obs, &pred) - brute).abs() / brute.max(1.0));
    }
    (ok_w && worst < WEIGHT_TOL, format!("w(0) = {w0}, w(1) = {w1:.11}, gamma max rel error {worst:.1e}"))
}

/// All CSV files below `dir`, keyed by relative path.
fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::bundled();
    cfg.scenario.sampling.sites = 16;
    cfg.scenario.sampling.weeks = 8;
    cfg.scenario.sampling.spinup_weeks = 2;
    cfg.model.estimation_widths = vec![12, 6];
    cfg.model.parameter_widths = vec![12, 6];
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.ensemble.runs = 3;
    cfg.ensemble.holdout_sites = 3;
    cfg.reproduce.seeds = vec![1, 2];
    cfg.reproduce.ensemble_weeks = 0;
    cfg.reproduce.ensemble_epochs = 0;
    cfg
}

fn determinism_suite(root: &Path) -> (bool, String) {
    let cfg = small_config();
    let a = root.join("det_a");
    let b = root.join("det_b");
    run_reproduce(&cfg, &a, 1).unwrap();
    run_reproduce(&cfg, &b, 1).unwrap();
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let metric_files = fa.keys().filter(|k| k.to_string_lossy().contains("metrics")).count();
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    (
        differing.is_empty() && fa.len() == fb.len() && metric_files > 0,
        format!("{} CSV files ({metric_files} metrics files) compared, {} differ", fa.len(), differing.len()),
    )
}

// ---------------------------------------------------------------------------
// Empirical checks on the reproduce pipeline

fn bias_reduction(cfg: &RunConfig, r: &ReproduceReport) -> (bool, String) {
    let s = &cfg.scenario.sampling;
    let mut ok = s.sites >= MIN_SITES && s.weeks >= MIN_WEEKS && cfg.reproduce.seeds.len() >= SEEDS;
    let mut parts = Vec::new();
    for sp in Species::BOTH {
        let j = r.median_site_rmse(Mode::Joint, sp).unwrap_or(f64::NAN);
        let b = r.median_site_rmse(Mode::BaselineNoPhysics, sp).unwrap_or(f64::NAN);
        let red = 1.0 - j / b;
        ok &= red >= RMSE_REDUCTION;
        parts.push(format!("{} median site RMSE {j:.3} vs baseline {b:.3} ({:+.1}%)", sp.name(), -100.0 * red));
    }
    let minutes = r.mode_seconds / 60.0;
    ok &= minutes <= COMPARISON_MINUTES;
    parts.push(format!("{} sites x {} weeks, {} seeds, {minutes:.1} min", s.sites, s.weeks, cfg.reproduce.seeds.len()));
    (ok, parts.join("; "))
}

fn joint_vs_separate(cfg: &RunConfig, r: &ReproduceReport) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for sp in Species::BOTH {
        let j = r.median_site_r2(Mode::Joint, sp).unwrap_or(f64::NAN);
        let s = r.median_site_r2(Mode::Separate, sp).unwrap_or(f64::NAN);
        ok &= j >= s - R2_SLACK;
        parts.push(format!("{} median site R2 {j:.3} vs separate {s:.3}", sp.name()));
    }
    // a seed counts when the species-averaged site R2 improves
    let wins = cfg
        .reproduce
        .seeds
        .iter()
        .filter(|&&seed| {
            let avg = |m| {
                Species::BOTH.iter().map(|&sp| r.site_r2(m, seed, sp).unwrap_or(f64::NAN)).sum::<f64>() / 2.0
            };
            avg(Mode::Joint) > avg(Mode::Separate)
        })
        .count();
    ok &= wins >= STRICT_WINS;
    parts.push(format!("strictly better on {wins} of {} seeds", cfg.reproduce.seeds.len()));
    (ok, parts.join("; "))
}

fn constraints(r: &ReproduceReport) -> (bool, String) {
    let violations: usize = r.ensembles.iter().map(|e| e.ordering_violations).sum();
    let member_violations: usize = r.ensembles.iter().map(|e| e.member_violations).sum();
    let targets: usize = r.ensembles.iter().map(|e| e.targets).sum();
    let terms: Vec<_> = r.ensembles.iter().flat_map(|e| e.member_terms.iter()).collect();
    let n = terms.len().max(1) as f64;
    let mean = |i: usize| terms.iter().map(|t| t[i]).sum::<f64>() / n;
    let (e3, e4, e5) = (mean(2), mean(3), mean(4));
    let ok = !r.ensembles.is_empty() && violations == 0 && e3 == 0.0 && e4 == 0.0 && e5 < E5_TOL;
    (
        ok,
        format!(
            "{violations} of {targets} ensemble means break NO2 <= NOx ({member_violations} member predictions); \
             member final mean e3^2 {e3:e}, e4^2 {e4:e}, e5^2 {e5:e}"
        ),
    )
}

/// Means of consecutive windows of `w` epochs.
fn window_means(v: &[f64], w: usize) -> Vec<f64> {
    v.chunks(w).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

fn pde_convergence(r: &ReproduceReport) -> (bool, String) {
    let histories: Vec<&TrainHistory> = r.runs.iter().filter(|m| m.mode != Mode::BaselineNoPhysics).map(|m| &m.history).collect();
    let mut ok = !histories.is_empty();
    let mut worst_end = 0.0f64;
    let mut broken = 0;
    for h in &histories {
        let w = (h.len() / 8).max(1);
        for term in [0, 1] {
            let m = window_means(&h.term(term), w);
            if m.windows(2).any(|p| p[1] > p[0]) {
                broken += 1;
            }
            worst_end = worst_end.max(*m.last().unwrap());
        }
    }
    ok &= broken == 0 && worst_end < PDE_TOL;
    (
        ok,
        format!("{} physics runs, {broken} non-monotone window sequences, largest final window mean {worst_end:.2e}", histories.len()),
    )
}

fn coverage(r: &ReproduceReport, cfg: &RunConfig) -> (bool, String) {
    let mut ok = cfg.ensemble.runs == RUNS && r.ensembles.len() >= SEEDS;
    let mut parts = Vec::new();
    for sp in Species::BOTH {
        let k = sp.index();
        let per: Vec<f64> = r.ensembles.iter().filter_map(|e| e.coverage[k]).collect();
        let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
        ok &= per.len() == r.ensembles.len() && (COVERAGE.0..=COVERAGE.1).contains(&mean);
        let list: Vec<String> = per.iter().map(|c| format!("{c:.3}")).collect();
        parts.push(format!("{} mean {mean:.3} [{}]", sp.name(), list.join(" ")));
    }
    parts.push(format!("B = {}, {} seeds", cfg.ensemble.runs, r.ensembles.len()));
    (ok, parts.join("; "))
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let mut results = vec![
        check(1, "autodiff vs finite differences", autodiff_suite()),
        check(2, "manufactured solutions", manufactured_suite()),
        check(3, "simulator conservation and spread", conservation_suite()),
    ];

    let cfg = if quick() { small_config() } else { RunConfig::bundled().resolve(None, None).unwrap() };
    let start = Instant::now();
    let report = run_reproduce(&cfg, &root.path().join("reproduce"), 1).unwrap();
    println!(
        "     reproduce pipeline: {:.1} min (modes {:.1}, ensembles {:.1})",
        start.elapsed().as_secs_f64() / 60.0,
        report.mode_seconds / 60.0,
        report.ensemble_seconds / 60.0
    );
    results.push(check(4, "bias reduction vs baseline", bias_reduction(&cfg, &report)));
    results.push(check(5, "joint vs separate", joint_vs_separate(&cfg, &report)));
    results.push(check(6, "constraint satisfaction", constraints(&report)));
    results.push(check(7, "PDE loss convergence", pde_convergence(&report)));
    results.push(check(8, "0.632+ arithmetic", weights_suite()));
    results.push(check(9, "interval coverage", coverage(&report, &cfg)));
    results.push(check(10, "determinism", determinism_suite(root.path())));

    let passed = results.iter().filter(|r| r.pass).count();
    println!("{passed} of {} criteria pass", results.len());
    let property_failed = results.iter().any(|r| !r.pass && [1, 2, 3, 8, 10].contains(&r.id));
    if property_failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
