//! Site-level bootstrap bagging and 0.632+ prediction intervals.
//!
//! Each member trains on a fresh partition of the sites. Aggregation pools
//! the member predictions into variance samples (deviations from the
//! ensemble mean) and bias/noise samples (observed minus predicted, mixed
//! across the train, regular-test and site-test errors with 0.632+ weights),
//! stratifies both by predicted-concentration octile and reads interval
//! offsets off the percentiles of their level-wise sum set.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datio::{stratified_split, ConcentrationModel, DataError, Dataset, SplitAssignment, SplitConfig};
use crate::physics::Species;
use crate::trainer::{derive_seed, train_joint, JpinnModel, ModelConfig, TrainConfig, TrainError, TrainHistory, TrainOutcome};

pub const MIN_SITES: usize = 10;
pub const TRAIN_SITE_FRACTION: f64 = 0.632;
/// Factor of the relative overfitting rate in the 0.632+ weights.
pub const OVERFIT_FACTOR: f64 = 0.184;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no-information rate {gamma} equals the training error {train}; relative overfitting rate undefined")]
    DivisionByZero { gamma: f64, train: f64 },
    #[error("empty error pool: {0}")]
    EmptyPool(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("member {run}: {source}")]
    Member { run: usize, source: TrainError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Split plans

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub run_id: usize,
    pub train_sites: Vec<String>,
    pub regular_sites: Vec<String>,
    pub site_sites: Vec<String>,
    pub seed: u64,
}

/// One partition of the sites per run: round(0.632 S) training sites, the
/// rest halved between regular and site-based testing (the site-test half
/// gets the odd one).
pub fn make_bootstrap_splits(site_ids: &[String], runs: usize, seed: u64) -> Result<Vec<SplitPlan>, EnsembleError> {
    let mut sites: Vec<String> = site_ids.to_vec();
    sites.sort();
    sites.dedup();
    if sites.len() != site_ids.len() {
        return Err(EnsembleError::Config("duplicate site ids".into()));
    }
    let s = sites.len();
    if s < MIN_SITES {
        return Err(EnsembleError::Config(format!("{s} sites; at least {MIN_SITES} are needed")));
    }
    if runs < 2 {
        return Err(EnsembleError::Config(format!("{runs} runs; at least 2 are needed")));
    }
    let n_train = (TRAIN_SITE_FRACTION * s as f64).round() as usize;
    let n_regular = (s - n_train) / 2;
    (0..runs)
        .map(|run_id| {
            // 63 bits, so plans fit TOML integers
            let run_seed = derive_seed(seed, run_id as u64) >> 1;
            let mut order = sites.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(run_seed));
            let mut train_sites = order[..n_train].to_vec();
            let mut regular_sites = order[n_train..n_train + n_regular].to_vec();
            let mut site_sites = order[n_train + n_regular..].to_vec();
            train_sites.sort();
            regular_sites.sort();
            site_sites.sort();
            Ok(SplitPlan { run_id, train_sites, regular_sites, site_sites, seed: run_seed })
        })
        .collect()
}

/// Row assignment of one plan. Observed rows at training sites go through
/// the stratified train/regular split; observed rows at regular-test sites
/// are regular tests; all rows at site-test sites are site tests. Anything
/// else (unobserved rows, sites outside the plan) is a prediction row.
pub fn plan_assignment(ds: &Dataset, plan: &SplitPlan, split_cfg: &SplitConfig) -> Result<SplitAssignment, EnsembleError> {
    let train: HashSet<&str> = plan.train_sites.iter().map(String::as_str).collect();
    let regular: HashSet<&str> = plan.regular_sites.iter().map(String::as_str).collect();
    let site: HashSet<&str> = plan.site_sites.iter().map(String::as_str).collect();
    let mut out = SplitAssignment::default();
    let mut train_rows = Vec::new();
    for (i, rec) in ds.records.iter().enumerate() {
        let id = rec.site_id.as_str();
        let observed = rec.observed().is_some();
        if site.contains(id) {
            out.site.push(i);
        } else if observed && train.contains(id) {
            train_rows.push(i);
        } else if observed && regular.contains(id) {
            out.regular.push(i);
        } else {
            out.predict.push(i);
        }
    }
    if train_rows.is_empty() {
        return Err(EnsembleError::Config(format!("run {}: no observed rows at training sites", plan.run_id)));
    }
    let inner = stratified_split(ds, &train_rows, &SplitConfig { seed: plan.seed, ..*split_cfg })?;
    out.train = inner.train;
    out.regular.extend(inner.regular);
    out.regular.sort_unstable();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Members

#[derive(Debug, Clone)]
pub struct MemberRun {
    pub plan: SplitPlan,
    pub split: SplitAssignment,
    /// Predictions (ppb) for every dataset row.
    pub predictions: Vec<[f64; 2]>,
    pub history: TrainHistory,
    pub model: JpinnModel,
}

impl MemberRun {
    /// Rebuild a member from a trained model; the split is recomputed from the plan.
    pub fn from_model(
        ds: &Dataset,
        plan: &SplitPlan,
        split_cfg: &SplitConfig,
        model: JpinnModel,
        history: TrainHistory,
    ) -> Result<Self, EnsembleError> {
        let split = plan_assignment(ds, plan, split_cfg)?;
        let all: Vec<usize> = (0..ds.len()).collect();
        Ok(MemberRun { plan: plan.clone(), split, predictions: model.predict_ppb(ds, &all), history, model })
    }
}

/// Train one member per plan, at most `jobs` at a time. Results come back
/// in plan order and do not depend on `jobs`.
pub fn run_members(
    ds: &Dataset,
    plans: &[SplitPlan],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split_cfg: &SplitConfig,
    jobs: usize,
) -> Result<Vec<MemberRun>, EnsembleError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EnsembleError::Config(e.to_string()))?;
    let all: Vec<usize> = (0..ds.len()).collect();
    pool.install(|| {
        plans
            .par_iter()
            .map(|plan| {
                let split = plan_assignment(ds, plan, split_cfg)?;
                let cfg = TrainConfig { seed: plan.seed, ..train_cfg.clone() };
                let TrainOutcome { model, history } = train_joint(ds, &split, model_cfg, &cfg)
                    .map_err(|source| EnsembleError::Member { run: plan.run_id, source })?;
                log::info!("member {} done", plan.run_id);
                let predictions = model.predict_ppb(ds, &all);
                Ok(MemberRun { plan: plan.clone(), split, predictions, history, model })
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Aggregation pieces

/// Mean over runs of `predictions[b][t]`.
pub fn ensemble_mean(predictions: &[Vec<f64>]) -> Result<Vec<f64>, EnsembleError> {
    let first = predictions.first().ok_or_else(|| EnsembleError::Config("no runs".into()))?;
    let n = first.len();
    if let Some(b) = predictions.iter().position(|p| p.len() != n) {
        return Err(EnsembleError::Schema(format!("run {b} has {} targets, run 0 has {n}", predictions[b].len())));
    }
    let runs = predictions.len() as f64;
    Ok((0..n).map(|t| predictions.iter().map(|p| p[t]).sum::<f64>() / runs).collect())
}

/// `mean[t] - predictions[b][t]`, target-major: sample (t, b) at `t * B + b`.
pub fn variance_samples(mean: &[f64], predictions: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(mean.len() * predictions.len());
    for (t, &m) in mean.iter().enumerate() {
        out.extend(predictions.iter().map(|p| m - p[t]));
    }
    out
}

/// (1/n^2) sum_i sum_j (y_i - yhat_j)^2, expanded so it costs O(n).
pub fn no_information_rate(observed: &[f64], predicted: &[f64]) -> f64 {
    let n_o = observed.len() as f64;
    let n_p = predicted.len() as f64;
    let mean = |v: &[f64], n: f64| v.iter().sum::<f64>() / n;
    let mean_sq = |v: &[f64], n: f64| v.iter().map(|x| x * x).sum::<f64>() / n;
    mean_sq(observed, n_o) - 2.0 * mean(observed, n_o) * mean(predicted, n_p) + mean_sq(predicted, n_p)
}

pub fn mse(errors: &[f64]) -> f64 {
    errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64
}

/// 0.632 / (1 - 0.184 R).
pub fn weight_from_rate(r: f64) -> f64 {
    TRAIN_SITE_FRACTION / (1.0 - OVERFIT_FACTOR * r)
}

/// Relative overfitting rate, clamped to [0, 1]. A no-information rate
/// below the training error gives 0.
pub fn relative_overfitting_rate(test: f64, train: f64, gamma: f64) -> Result<f64, EnsembleError> {
    let denom = gamma - train;
    if denom == 0.0 {
        return Err(EnsembleError::DivisionByZero { gamma, train });
    }
    if denom < 0.0 {
        log::warn!("no-information rate {gamma} below training error {train}; overfitting rate set to 0");
        return Ok(0.0);
    }
    Ok(((test - train) / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitWeights {
    pub gamma: f64,
    /// MSE of the train, regular-test and site-test errors.
    pub eps: [f64; 3],
    pub r_te: f64,
    pub r_site: f64,
    pub w_te: f64,
    pub w_site: f64,
    /// Coefficients of the train, regular and site terms.
    pub coef: [f64; 3],
}

impl OverfitWeights {
    pub fn new(eps: [f64; 3], gamma: f64, renormalize: bool) -> Result<Self, EnsembleError> {
        let r_te = relative_overfitting_rate(eps[1], eps[0], gamma)?;
        let r_site = relative_overfitting_rate(eps[2], eps[0], gamma)?;
        let w_te = weight_from_rate(r_te);
        let w_site = weight_from_rate(r_site);
        let mut coef = [1.0 - w_te - w_site, w_te, w_site];
        if renormalize {
            coef[0] = coef[0].max(0.0);
            let s: f64 = coef.iter().sum();
            coef.iter_mut().for_each(|c| *c /= s);
        }
        Ok(OverfitWeights { gamma, eps, r_te, r_site, w_te, w_site, coef })
    }

    /// Weighted generalization error estimate.
    pub fn combined(&self) -> f64 {
        self.coef.iter().zip(&self.eps).map(|(c, e)| c * e).sum()
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    s
}

/// `m` evenly spaced quantiles of a sorted pool, or the pool itself when it
/// is no larger than `m`.
fn thin(sorted: &[f64], m: usize) -> Vec<f64> {
    if sorted.len() <= m {
        return sorted.to_vec();
    }
    (0..m).map(|i| quantile_sorted(sorted, (i as f64 + 0.5) / m as f64)).collect()
}

/// Rank-matched mixture of the three error pools: the k-th value is
/// `sum_i coef_i * Q_i(q_k)`, a linear combination of the pools' quantile
/// functions on a grid of `points` probabilities.
pub fn weighted_pool(pools: [&[f64]; 3], coef: [f64; 3], points: usize) -> Result<Vec<f64>, EnsembleError> {
    for (p, name) in pools.iter().zip(["train", "regular-test", "site-test"]) {
        if p.is_empty() {
            return Err(EnsembleError::EmptyPool(name.into()));
        }
    }
    let points = points.max(1).min(pools.iter().map(|p| p.len()).max().unwrap_or(1));
    let s = pools.map(sorted);
    Ok((0..points)
        .map(|k| {
            let q = if points == 1 { 0.5 } else { k as f64 / (points - 1) as f64 };
            (0..3).map(|i| coef[i] * quantile_sorted(&s[i], q)).sum()
        })
        .collect())
}

/// Weights and weighted bias/noise pool from signed errors (observed minus
/// predicted).
pub fn bias_noise_estimate(
    train: &[f64],
    regular: &[f64],
    site: &[f64],
    gamma: f64,
    renormalize: bool,
    points: usize,
) -> Result<(Vec<f64>, OverfitWeights), EnsembleError> {
    for (p, name) in [(train, "train"), (regular, "regular-test"), (site, "site-test")] {
        if p.is_empty() {
            return Err(EnsembleError::EmptyPool(name.into()));
        }
    }
    let w = OverfitWeights::new([mse(train), mse(regular), mse(site)], gamma, renormalize)?;
    Ok((weighted_pool([train, regular, site], w.coef, points)?, w))
}

/// Interior octile-style cut points: `levels - 1` type-7 quantiles.
pub fn level_edges(values: &[f64], levels: usize) -> Vec<f64> {
    let s = sorted(values);
    (1..levels).map(|k| quantile_sorted(&s, k as f64 / levels as f64)).collect()
}

/// Level index in `0..=edges.len()`.
pub fn level_of(v: f64, edges: &[f64]) -> usize {
    edges.partition_point(|e| *e <= v)
}

/// Percentile offsets (lower, upper) of the sum set {v + o}. Pools larger
/// than `cap` are thinned to evenly spaced quantiles first.
pub fn cross_offsets(variance: &[f64], bias: &[f64], alpha: f64, cap: usize) -> Result<(f64, f64), EnsembleError> {
    if variance.is_empty() || bias.is_empty() {
        return Err(EnsembleError::EmptyPool("cross set".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EnsembleError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let v = thin(&sorted(variance), cap);
    let b = thin(&sorted(bias), cap);
    let mut sums = Vec::with_capacity(v.len() * b.len());
    for x in &v {
        sums.extend(b.iter().map(|y| x + y));
    }
    sums.sort_unstable_by(f64::total_cmp);
    Ok((quantile_sorted(&sums, alpha / 2.0), quantile_sorted(&sums, 1.0 - alpha / 2.0)))
}

/// Interval around one prediction; always contains `mu` and never goes
/// below 0 ppb.
pub fn interval_estimate(mu: f64, offsets: (f64, f64)) -> (f64, f64) {
    ((mu + offsets.0).max(0.0).min(mu), (mu + offsets.1).max(mu))
}

// ---------------------------------------------------------------------------
// Ensemble result

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub runs: usize,
    pub alpha: f64,
    pub levels: usize,
    /// Clip the train coefficient at 0 and rescale the weights to sum to 1.
    pub renormalize: bool,
    /// Quantile grid size of the weighted bias/noise pool.
    pub pool_points: usize,
    /// Largest pool used on either side of the level cross set.
    pub cross_cap: usize,
    /// Sites left out of every member; their rows are prediction rows and
    /// measure interval coverage.
    pub holdout_sites: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { runs: 25, alpha: 0.05, levels: 8, renormalize: false, pool_points: 1000, cross_cap: 1000, holdout_sites: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPool {
    pub variance_count: usize,
    /// Weighted bias/noise pool of this level.
    pub bias: Vec<f64>,
    /// Level whose error pools were used, when this one had an empty pool.
    pub fallback: Option<usize>,
    pub lower_offset: f64,
    pub upper_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesUncertainty {
    pub weights: OverfitWeights,
    pub edges: Vec<f64>,
    pub levels: Vec<LevelPool>,
    /// Mean |variance sample| per target.
    pub target_variance: Vec<f64>,
    pub mean_abs_variance: f64,
    pub mean_abs_bias_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub alpha: f64,
    /// `predictions[b][row]`, ppb.
    pub predictions: Vec<Vec<[f64; 2]>>,
    pub mean: Vec<[f64; 2]>,
    /// Per species, target-major (see [`variance_samples`]).
    pub variance: [Vec<f64>; 2],
    pub species: [SpeciesUncertainty; 2],
    pub level: Vec<[usize; 2]>,
    /// `interval[row][species] = (lower, upper)`.
    pub interval: Vec<[(f64, f64); 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub variance_share: [f64; 2],
    pub bias_noise_share: [f64; 2],
}

/// Signed errors of one species, grouped by partition and level.
struct ErrorPools {
    by_level: Vec<[Vec<f64>; 3]>,
    all: [Vec<f64>; 3],
}

impl EnsembleResult {
    pub fn aggregate(ds: &Dataset, members: &[MemberRun], cfg: &EnsembleConfig) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::Config("no members".into()));
        }
        if cfg.levels == 0 {
            return Err(EnsembleError::Config("level count must be positive".into()));
        }
        let n = ds.len();
        let predictions: Vec<Vec<[f64; 2]>> = members.iter().map(|m| m.predictions.clone()).collect();
        let per_species = |k: usize| -> Vec<Vec<f64>> {
            predictions.iter().map(|p| p.iter().map(|v| v[k]).collect()).collect()
        };
        let mut mean = vec![[0.0; 2]; n];
        let mut variance: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut level = vec![[0usize; 2]; n];
        let mut interval = vec![[(0.0, 0.0); 2]; n];
        let mut species = Vec::with_capacity(2);
        let runs = members.len();

        for sp in Species::BOTH {
            let k = sp.index();
            let preds = per_species(k);
            let mu = ensemble_mean(&preds)?;
            if mu.len() != n {
                return Err(EnsembleError::Schema(format!("members predict {} rows, dataset has {n}", mu.len())));
            }
            let var = variance_samples(&mu, &preds);
            let edges = level_edges(&mu, cfg.levels);
            let lv: Vec<usize> = mu.iter().map(|&m| level_of(m, &edges)).collect();

            let mut pools = ErrorPools {
                by_level: (0..cfg.levels).map(|_| [Vec::new(), Vec::new(), Vec::new()]).collect(),
                all: [Vec::new(), Vec::new(), Vec::new()],
            };
            let mut gamma_sum = 0.0;
            for (b, m) in members.iter().enumerate() {
                let mut obs_all = Vec::new();
                let mut pred_all = Vec::new();
                for (p, rows) in [m.split.train_unique(), m.split.regular.clone(), m.split.site.clone()].iter().enumerate() {
                    for &r in rows {
                        let Some(o) = ds.records[r].observed() else { continue };
                        let e = o[k] - preds[b][r];
                        pools.by_level[lv[r]][p].push(e);
                        pools.all[p].push(e);
                        obs_all.push(o[k]);
                        pred_all.push(preds[b][r]);
                    }
                }
                if obs_all.is_empty() {
                    return Err(EnsembleError::EmptyPool(format!("member {b} has no observed rows")));
                }
                gamma_sum += no_information_rate(&obs_all, &pred_all);
            }
            let gamma = gamma_sum / runs as f64;
            let (global_pool, weights) = bias_noise_estimate(
                &pools.all[0],
                &pools.all[1],
                &pools.all[2],
                gamma,
                cfg.renormalize,
                cfg.pool_points,
            )?;

            let populated = |l: usize| pools.by_level[l].iter().all(|p| !p.is_empty());
            let mut level_pools = Vec::with_capacity(cfg.levels);
            for l in 0..cfg.levels {
                let source = if populated(l) {
                    l
                } else {
                    let alt = (1..cfg.levels)
                        .flat_map(|d| [l.checked_sub(d), Some(l + d)])
                        .flatten()
                        .find(|&c| c < cfg.levels && populated(c))
                        .ok_or_else(|| EnsembleError::EmptyPool(format!("{}: no populated level", sp.name())))?;
                    log::warn!("{} level {l}: empty error pool, using level {alt}", sp.name());
                    alt
                };
                let [tr, re, si] = &pools.by_level[source];
                let bias = weighted_pool([tr, re, si], weights.coef, cfg.pool_points)?;
                let vl: Vec<f64> =
                    (0..n).filter(|&t| lv[t] == l).flat_map(|t| var[t * runs..(t + 1) * runs].iter().copied()).collect();
                let (lower_offset, upper_offset) = if vl.is_empty() {
                    cross_offsets(&[0.0], &bias, cfg.alpha, cfg.cross_cap)?
                } else {
                    cross_offsets(&vl, &bias, cfg.alpha, cfg.cross_cap)?
                };
                level_pools.push(LevelPool {
                    variance_count: vl.len(),
                    bias,
                    fallback: (source != l).then_some(source),
                    lower_offset,
                    upper_offset,
                });
            }

            let target_variance: Vec<f64> =
                (0..n).map(|t| var[t * runs..(t + 1) * runs].iter().map(|v| v.abs()).sum::<f64>() / runs as f64).collect();
            let mean_abs_variance = var.iter().map(|v| v.abs()).sum::<f64>() / var.len() as f64;
            let mean_abs_bias_noise = global_pool.iter().map(|v| v.abs()).sum::<f64>() / global_pool.len() as f64;
            for t in 0..n {
                mean[t][k] = mu[t];
                level[t][k] = lv[t];
                let lp = &level_pools[lv[t]];
                interval[t][k] = interval_estimate(mu[t], (lp.lower_offset, lp.upper_offset));
            }
            variance[k] = var;
            species.push(SpeciesUncertainty {
                weights,
                edges,
                levels: level_pools,
                target_variance,
                mean_abs_variance,
                mean_abs_bias_noise,
            });
        }
        let species: [SpeciesUncertainty; 2] = species.try_into().expect("two species");
        let out = EnsembleResult { alpha: cfg.alpha, predictions, mean, variance, species, level, interval };
        out.check_finite()?;
        Ok(out)
    }

    fn check_finite(&self) -> Result<(), EnsembleError> {
        let bad = |name: &str| Err(EnsembleError::NonFinite(name.into()));
        if self.mean.iter().flatten().any(|v| !v.is_finite()) {
            return bad("ensemble mean");
        }
        if self.interval.iter().flatten().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return bad("intervals");
        }
        for s in &self.species {
            let w = &s.weights;
            if ![w.gamma, w.r_te, w.r_site, w.w_te, w.w_site].iter().chain(&w.eps).all(|v| v.is_finite()) {
                return bad("0.632+ weights");
            }
        }
        Ok(())
    }

    pub fn runs(&self) -> usize {
        self.predictions.len()
    }

    /// Mean-|variance| share and its complement, per species.
    pub fn decomposition_report(&self) -> Decomposition {
        let mut out = Decomposition { variance_share: [0.0; 2], bias_noise_share: [0.0; 2] };
        for (k, s) in self.species.iter().enumerate() {
            let g = s.mean_abs_variance + s.mean_abs_bias_noise;
            let share = if g > 0.0 { s.mean_abs_variance / g } else { 0.0 };
            out.variance_share[k] = share;
            out.bias_noise_share[k] = 1.0 - share;
        }
        out
    }

    /// Per-target variance share: mean |variance| at the target over that
    /// plus the mean |bias/noise| of its level pool.
    pub fn target_variance_share(&self, row: usize, k: usize) -> f64 {
        let s = &self.species[k];
        let lp = &s.levels[self.level[row][k]];
        let bn = lp.bias.iter().map(|v| v.abs()).sum::<f64>() / lp.bias.len() as f64;
        let v = s.target_variance[row];
        if v + bn > 0.0 {
            v / (v + bn)
        } else {
            0.0
        }
    }

    /// Fraction of observed values inside their interval, per species, over
    /// `rows` (unobserved rows skipped). `None` when no row is observed.
    pub fn coverage(&self, ds: &Dataset, rows: &[usize]) -> [Option<f64>; 2] {
        let mut hit = [0usize; 2];
        let mut total = 0usize;
        for &r in rows {
            let Some(o) = ds.records[r].observed() else { continue };
            total += 1;
            for k in 0..2 {
                let (lo, hi) = self.interval[r][k];
                if o[k] >= lo && o[k] <= hi {
                    hit[k] += 1;
                }
            }
        }
        hit.map(|h| (total > 0).then(|| h as f64 / total as f64))
    }

    /// Rows where the mean of either species breaks NO2 <= NOx.
    pub fn ordering_violations(&self) -> usize {
        self.mean.iter().filter(|m| m[0] > m[1]).count()
    }

    /// Summary CSV keyed by (site, week).
    pub fn write_summary<W: Write>(&self, ds: &Dataset, w: W) -> Result<(), EnsembleError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["site_id".to_string(), "week".to_string()];
        for sp in Species::BOTH {
            for f in ["mean", "lower", "upper", "level", "variance_share", "level_fallback"] {
                header.push(format!("{}_{f}", sp.name()));
            }
        }
        out.write_record(&header)?;
        for (r, rec) in ds.records.iter().enumerate() {
            let mut row = vec![rec.site_id.clone(), rec.week.to_string()];
            for k in 0..2 {
                let l = self.level[r][k];
                row.push(format!("{:?}", self.mean[r][k]));
                row.push(format!("{:?}", self.interval[r][k].0));
                row.push(format!("{:?}", self.interval[r][k].1));
                row.push(l.to_string());
                row.push(format!("{:?}", self.target_variance_share(r, k)));
                row.push(self.species[k].levels[l].fallback.map_or(String::new(), |f| f.to_string()));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per species with the 0.632+ quantities and the decomposition.
    pub fn write_stats<W: Write>(&self, w: W) -> Result<(), EnsembleError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "species",
            "runs",
            "gamma",
            "eps_train",
            "eps_regular",
            "eps_site",
            "r_te",
            "r_site",
            "w_te",
            "w_site",
            "coef_train",
            "generalization_mse",
            "variance_share",
            "bias_noise_share",
        ])?;
        let d = self.decomposition_report();
        for sp in Species::BOTH {
            let k = sp.index();
            let w = &self.species[k].weights;
            let mut row = vec![sp.name().to_string(), self.runs().to_string()];
            row.extend(
                [
                    w.gamma,
                    w.eps[0],
                    w.eps[1],
                    w.eps[2],
                    w.r_te,
                    w.r_site,
                    w.w_te,
                    w.w_site,
                    w.coef[0],
                    w.combined(),
                    d.variance_share[k],
                    d.bias_noise_share[k],
                ]
                .iter()
                .map(|v| format!("{v:?}")),
            );
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-run predictions CSV.
pub fn write_member_predictions<W: Write>(ds: &Dataset, member: &MemberRun, w: W) -> Result<(), EnsembleError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run", "site_id", "week", "split", "no2_ppb", "nox_ppb"])?;
    let tags = member.split.tags(ds.len());
    let run = member.plan.run_id.to_string();
    for (r, rec) in ds.records.iter().enumerate() {
        let p = member.predictions[r];
        out.write_record([
            run.clone(),
            rec.site_id.clone(),
            rec.week.to_string(),
            tags[r].to_string(),
            format!("{:?}", p[0]),
            format!("{:?}", p[1]),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Rows of `ds` whose site is in `sites`.
pub fn rows_of_sites(ds: &Dataset, sites: &[String]) -> Vec<usize> {
    let set: HashSet<&str> = sites.iter().map(String::as_str).collect();
    (0..ds.len()).filter(|&r| set.contains(ds.records[r].site_id.as_str())).collect()
}

/// Hold out `n_holdout` sites (seeded) from every member; returns (inner, holdout) site ids.
pub fn holdout_sites(site_ids: &[String], n_holdout: usize, seed: u64) -> Result<(Vec<String>, Vec<String>), EnsembleError> {
    if n_holdout >= site_ids.len() {
        return Err(EnsembleError::Config(format!("cannot hold out {n_holdout} of {} sites", site_ids.len())));
    }
    let mut order: Vec<String> = site_ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)));
    let mut holdout = order[..n_holdout].to_vec();
    let mut inner = order[n_holdout..].to_vec();
    holdout.sort();
    inner.sort();
    Ok((inner, holdout))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn plan_sizes_for_hundred_sites() {
        let plans = make_bootstrap_splits(&ids(100), 3, 1).unwrap();
        for p in &plans {
            assert_eq!(p.train_sites.len(), 63);
            assert_eq!(p.regular_sites.len(), 18);
            assert_eq!(p.site_sites.len(), 19);
        }
        assert_ne!(plans[0].train_sites, plans[1].train_sites);
    }

    #[test]
    fn plans_need_sites_and_runs() {
        assert!(make_bootstrap_splits(&ids(9), 2, 0).is_err());
        assert!(make_bootstrap_splits(&ids(10), 1, 0).is_err());
        assert_eq!(make_bootstrap_splits(&ids(10), 2, 5).unwrap(), make_bootstrap_splits(&ids(10), 2, 5).unwrap());
    }

    #[test]
    fn mean_and_variance_samples() {
        let preds = vec![vec![4.0, 7.0], vec![8.0, 7.0]];
        let mu = ensemble_mean(&preds).unwrap();
        assert_eq!(mu, vec![6.0, 7.0]);
        assert_eq!(variance_samples(&mu, &preds), vec![2.0, -2.0, 0.0, 0.0]);
        assert!(ensemble_mean(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn weights_at_rate_bounds() {
        assert_eq!(weight_from_rate(0.0), 0.632);
        assert!((weight_from_rate(1.0) - 0.632 / 0.816).abs() < 1e-12);
        let w = OverfitWeights::new([1.0, 1.0, 3.0], 3.0, false).unwrap();
        assert_eq!(w.r_te, 0.0);
        assert_eq!(w.r_site, 1.0);
        assert!(OverfitWeights::new([1.0, 1.0, 1.0], 1.0, false).is_err());
        let r = OverfitWeights::new([1.0, 2.0, 3.0], 3.0, true).unwrap();
        assert_eq!(r.coef[0], 0.0);
        assert!((r.coef.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn levels_cover_everything() {
        let v: Vec<f64> = (0..80).map(|i| i as f64).collect();
        let e = level_edges(&v, 8);
        assert_eq!(e.len(), 7);
        let mut counts = [0; 8];
        for x in &v {
            counts[level_of(*x, &e)] += 1;
        }
        assert_eq!(counts, [10; 8]);
        assert_eq!(level_of(-1e9, &e), 0);
        assert_eq!(level_of(1e9, &e), 7);
    }

    #[test]
    fn degenerate_and_symmetric_offsets() {
        assert_eq!(cross_offsets(&[0.0; 5], &[0.0; 7], 0.05, 1000).unwrap(), (0.0, 0.0));
        let sym: Vec<f64> = (-50..=50).map(|i| i as f64 / 10.0).collect();
        let (lo, hi) = cross_offsets(&sym, &sym, 0.05, 1000).unwrap();
        assert!((lo + hi).abs() < 1e-9, "{lo} {hi}");
        assert_eq!(interval_estimate(3.0, (0.5, 1.0)), (3.0, 4.0));
        assert_eq!(interval_estimate(3.0, (-5.0, 1.0)), (0.0, 4.0));
    }
}
