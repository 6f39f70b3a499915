//! Dataset schema, CSV I/O, stratified splitting, standardization and
//! permutation importance.
//!
//! CSV layout (UTF-8, dot decimal, header required):
//!
//! ```text
//! site_id,week,x,y,z,no2_ppb,nox_ppb,split,<covariate>...
//! ```
//!
//! `no2_ppb` and `nox_ppb` may be empty (predict-only rows). `split` is one
//! of `train`, `regular-test`, `site-test`, `predict` (empty means
//! `predict`).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Mat;

pub const FIXED_COLUMNS: [&str; 8] = ["site_id", "week", "x", "y", "z", "no2_ppb", "nox_ppb", "split"];
/// Number of coordinate inputs: t, x, y, z.
pub const N_COORDS: usize = 4;
pub const WEEKS_PER_YEAR: i64 = 52;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("duplicate (site, week) key ({site}, {week}) at row {row}")]
    DuplicateKey { site: String, week: i64, row: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    RegularTest,
    SiteTest,
    Predict,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::RegularTest => "regular-test",
            SplitTag::SiteTest => "site-test",
            SplitTag::Predict => "predict",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitTag::Train),
            "regular-test" => Ok(SplitTag::RegularTest),
            "site-test" => Ok(SplitTag::SiteTest),
            "predict" | "" => Ok(SplitTag::Predict),
            other => Err(format!("unknown split tag '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub site_id: String,
    pub week: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub covariates: Vec<f64>,
    pub no2_ppb: Option<f64>,
    pub nox_ppb: Option<f64>,
    pub split: SplitTag,
}

impl SampleRecord {
    /// Both concentrations, when observed.
    pub fn observed(&self) -> Option<[f64; 2]> {
        match (self.no2_ppb, self.nox_ppb) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub records: Vec<SampleRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Dataset {
    pub fn new(covariate_names: Vec<String>, records: Vec<SampleRecord>) -> Result<Self, DataError> {
        let ds = Dataset { covariate_names, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Distinct site ids in first-appearance order.
    pub fn site_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.site_id.as_str()))
            .map(|r| r.site_id.clone())
            .collect()
    }

    pub fn rows_with_tag(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == tag).collect()
    }

    fn validate(&self) -> Result<(), DataError> {
        let k = self.covariate_names.len();
        let mut keys = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let row = i + 1;
            validate_record(r, k).map_err(|msg| DataError::Row { row, msg })?;
            if !keys.insert((r.site_id.clone(), r.week)) {
                return Err(DataError::DuplicateKey { site: r.site_id.clone(), week: r.week, row });
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<&str> = FIXED_COLUMNS.iter().copied().chain(self.covariate_names.iter().map(String::as_str)).collect();
        wr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.site_id.clone(),
                r.week.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.z.to_string(),
                fmt_opt(r.no2_ppb),
                fmt_opt(r.nox_ppb),
                r.split.to_string(),
            ];
            row.extend(r.covariates.iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DataError> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rd.headers()?.clone();
        if header.len() < FIXED_COLUMNS.len() || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b) {
            return Err(DataError::Schema(format!(
                "header must start with {}",
                FIXED_COLUMNS.join(",")
            )));
        }
        let covariate_names: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(str::to_string).collect();
        let mut names = HashSet::new();
        for n in &covariate_names {
            if n.is_empty() || !names.insert(n) {
                return Err(DataError::Schema(format!("duplicate or empty covariate column '{n}'")));
            }
        }
        let mut records = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(DataError::Row { row, msg: format!("expected {} fields, found {}", header.len(), rec.len()) });
            }
            let bad = |what: &str| DataError::Row { row, msg: format!("cannot parse {what}") };
            let num = |j: usize, what: &str| -> Result<f64, DataError> { rec[j].trim().parse::<f64>().map_err(|_| bad(what)) };
            let opt = |j: usize, what: &str| -> Result<Option<f64>, DataError> {
                let s = rec[j].trim();
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| bad(what))
                }
            };
            let record = SampleRecord {
                site_id: rec[0].to_string(),
                week: rec[1].trim().parse().map_err(|_| bad("week"))?,
                x: num(2, "x")?,
                y: num(3, "y")?,
                z: num(4, "z")?,
                no2_ppb: opt(5, "no2_ppb")?,
                nox_ppb: opt(6, "nox_ppb")?,
                split: rec[7].trim().parse().map_err(|m| DataError::Row { row, msg: m })?,
                covariates: (FIXED_COLUMNS.len()..rec.len())
                    .map(|j| num(j, &header[j]))
                    .collect::<Result<_, _>>()?,
            };
            records.push(record);
        }
        Dataset::new(covariate_names, records)
    }

    /// Read and validate a CSV dataset from disk.
    pub fn load_and_validate(path: &Path) -> Result<Self, DataError> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn validate_record(r: &SampleRecord, n_cov: usize) -> Result<(), String> {
    if r.site_id.is_empty() {
        return Err("empty site id".into());
    }
    for (name, v) in [("x", r.x), ("y", r.y), ("z", r.z)] {
        if !v.is_finite() {
            return Err(format!("non-finite {name}"));
        }
    }
    if r.covariates.len() != n_cov {
        return Err(format!("expected {n_cov} covariates, found {}", r.covariates.len()));
    }
    if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite covariate in column {j}"));
    }
    for (name, v) in [("no2_ppb", r.no2_ppb), ("nox_ppb", r.nox_ppb)] {
        if let Some(v) = v {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be a nonnegative number, found {v}"));
            }
        }
    }
    if let (Some(a), Some(b)) = (r.no2_ppb, r.nox_ppb) {
        if a > b {
            return Err(format!("ordering violation: no2 {a} > nox {b}"));
        }
    }
    if r.no2_ppb.is_some() != r.nox_ppb.is_some() {
        return Err("no2_ppb and nox_ppb must both be present or both empty".into());
    }
    if r.no2_ppb.is_none() && matches!(r.split, SplitTag::Train | SplitTag::RegularTest | SplitTag::SiteTest) {
        return Err(format!("split '{}' requires observed concentrations", r.split));
    }
    Ok(())
}

/// Per-column affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fit on the given rows of `m`. Columns with zero spread get scale 1.
    pub fn fit(m: &Mat, rows: &[usize]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Invalid("cannot fit a standardizer on zero rows".into()));
        }
        let k = m.ncols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; k];
        for &r in rows {
            for j in 0..k {
                mean[j] += m[(r, j)];
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; k];
        for &r in rows {
            for j in 0..k {
                let d = m[(r, j)] - mean[j];
                var[j] += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn transform(&self, m: &Mat) -> Mat {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn inverse_transform(&self, m: &Mat) -> Mat {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.mean[j];
            }
        }
        out
    }
}

/// Raw input matrix (t, x, y, z, covariates...) for the given rows.
pub fn raw_features(ds: &Dataset, rows: &[usize]) -> Mat {
    let k = ds.covariate_names.len();
    let mut m = Array2::zeros((rows.len(), N_COORDS + k));
    for (i, &r) in rows.iter().enumerate() {
        let rec = &ds.records[r];
        m[(i, 0)] = rec.week as f64;
        m[(i, 1)] = rec.x;
        m[(i, 2)] = rec.y;
        m[(i, 3)] = rec.z;
        for (j, v) in rec.covariates.iter().enumerate() {
            m[(i, N_COORDS + j)] = *v;
        }
    }
    m
}

/// Feature pipeline: clamp elevation to the fitted range, then standardize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub standardizer: Standardizer,
    pub z_range: (f64, f64),
}

impl FeatureMap {
    /// Fit on training rows only.
    pub fn fit(ds: &Dataset, train_rows: &[usize]) -> Result<Self, DataError> {
        let raw = raw_features(ds, train_rows);
        let all: Vec<usize> = (0..train_rows.len()).collect();
        let standardizer = Standardizer::fit(&raw, &all)?;
        let (lo, hi) = raw
            .column(3)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
        Ok(FeatureMap { standardizer, z_range: (lo, hi) })
    }

    pub fn width(&self) -> usize {
        self.standardizer.mean.len()
    }

    pub fn transform(&self, ds: &Dataset, rows: &[usize]) -> Mat {
        let mut raw = raw_features(ds, rows);
        for v in raw.column_mut(3).iter_mut() {
            *v = v.clamp(self.z_range.0, self.z_range.1);
        }
        self.standardizer.transform(&raw)
    }

    /// Scales converting derivatives w.r.t. standardized coordinates into
    /// derivatives w.r.t. physical coordinates.
    pub fn coord_scales(&self) -> crate::physics::CoordScales {
        let s = &self.standardizer.scale;
        crate::physics::CoordScales { t: s[0], space: [s[1], s[2], s[3]] }
    }
}

/// Row-index assignment produced by [`stratified_split`]. `train` may
/// contain duplicated rows (tail oversampling).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub regular: Vec<usize>,
    pub site: Vec<usize>,
    pub predict: Vec<usize>,
}

impl SplitAssignment {
    /// Distinct training rows.
    pub fn train_unique(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Partition tag of each of `n` rows; rows in no partition are `Predict`.
    pub fn tags(&self, n: usize) -> Vec<SplitTag> {
        let mut tags = vec![SplitTag::Predict; n];
        for (rows, tag) in [(&self.train, SplitTag::Train), (&self.regular, SplitTag::RegularTest), (&self.site, SplitTag::SiteTest)] {
            for &r in rows {
                tags[r] = tag;
            }
        }
        tags
    }

    /// Rows grouped by partition, taken from the split tags in `ds`.
    pub fn from_tags(ds: &Dataset) -> Self {
        SplitAssignment {
            train: ds.rows_with_tag(SplitTag::Train),
            regular: ds.rows_with_tag(SplitTag::RegularTest),
            site: ds.rows_with_tag(SplitTag::SiteTest),
            predict: ds.rows_with_tag(SplitTag::Predict),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub oversample_tails: f64,
    /// Region tiles per axis.
    pub region_tiles: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.78, oversample_tails: 0.2, region_tiles: 4, seed: 0 }
    }
}

/// Stratum key: region tile of (x, y) and quarter of the week-of-year.
fn strata_keys(ds: &Dataset, rows: &[usize], tiles: usize) -> Vec<(usize, usize)> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &r in rows {
        let rec = &ds.records[r];
        x0 = x0.min(rec.x);
        x1 = x1.max(rec.x);
        y0 = y0.min(rec.y);
        y1 = y1.max(rec.y);
    }
    let tile = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            (((v - lo) / (hi - lo) * tiles as f64) as usize).min(tiles - 1)
        } else {
            0
        }
    };
    rows.iter()
        .map(|&r| {
            let rec = &ds.records[r];
            let region = tile(rec.y, y0, y1) * tiles + tile(rec.x, x0, x1);
            let season = (rec.week.rem_euclid(WEEKS_PER_YEAR) * 4 / WEEKS_PER_YEAR) as usize;
            (region, season)
        })
        .collect()
}

/// Split `rows` into training and regular-test rows within region x season
/// strata, then duplicate part of the tail-decile training rows (lowest and
/// highest NOx) so the tails gain about `oversample_tails` extra weight.
///
/// Strata with fewer than two rows are merged into the next stratum.
pub fn stratified_split(ds: &Dataset, rows: &[usize], cfg: &SplitConfig) -> Result<SplitAssignment, DataError> {
    if !(0.0..=1.0).contains(&cfg.train_fraction) || cfg.oversample_tails < 0.0 || cfg.region_tiles == 0 {
        return Err(DataError::Invalid("invalid split configuration".into()));
    }
    let keys = strata_keys(ds, rows, cfg.region_tiles);
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (&r, k) in rows.iter().zip(keys) {
        strata.entry(k).or_default().push(r);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut carry: Vec<usize> = Vec::new();
    for (key, mut members) in strata {
        members.append(&mut carry);
        if members.len() < 2 {
            log::debug!("stratum {key:?} has {} rows; merged into next stratum", members.len());
            carry = members;
            continue;
        }
        groups.push(members);
    }
    if !carry.is_empty() {
        match groups.last_mut() {
            Some(last) => last.append(&mut carry),
            None => groups.push(carry),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SplitAssignment::default();
    for mut g in groups {
        g.sort_unstable();
        g.shuffle(&mut rng);
        let n_train = (cfg.train_fraction * g.len() as f64).round() as usize;
        out.train.extend_from_slice(&g[..n_train]);
        out.regular.extend_from_slice(&g[n_train..]);
    }
    out.train.sort_unstable();
    out.regular.sort_unstable();

    if cfg.oversample_tails > 0.0 && out.train.len() >= 10 {
        let mut by_conc: Vec<(f64, usize)> = out
            .train
            .iter()
            .map(|&r| (ds.records[r].nox_ppb.unwrap_or(0.0), r))
            .collect();
        by_conc.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let decile = by_conc.len() / 10;
        let mut tails: Vec<usize> = by_conc[..decile]
            .iter()
            .chain(&by_conc[by_conc.len() - decile..])
            .map(|&(_, r)| r)
            .collect();
        tails.shuffle(&mut rng);
        let extra = (cfg.oversample_tails * tails.len() as f64).round() as usize;
        out.train.extend_from_slice(&tails[..extra.min(tails.len())]);
    }
    Ok(out)
}

/// Something that maps records to (NO2, NOx) predictions in ppb.
pub trait ConcentrationModel {
    fn predict_ppb(&self, ds: &Dataset, rows: &[usize]) -> Vec<[f64; 2]>;
}

/// RMSE per species between observed and predicted values.
pub fn rmse_pair(observed: &[[f64; 2]], predicted: &[[f64; 2]]) -> [f64; 2] {
    let n = observed.len().max(1) as f64;
    let mut acc = [0.0; 2];
    for (o, p) in observed.iter().zip(predicted) {
        for k in 0..2 {
            acc[k] += (o[k] - p[k]).powi(2);
        }
    }
    [(acc[0] / n).sqrt(), (acc[1] / n).sqrt()]
}

/// Mean increase in RMSE (averaged over the two species, ppb) when the
/// covariate column is randomly permuted across `rows`.
pub fn permutation_importance<M: ConcentrationModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    rows: &[usize],
    covariate: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64, DataError> {
    if covariate >= ds.covariate_names.len() {
        return Err(DataError::Invalid(format!("covariate index {covariate} out of range")));
    }
    let observed: Vec<[f64; 2]> = rows
        .iter()
        .map(|&r| ds.records[r].observed().ok_or_else(|| DataError::Invalid(format!("row {r} has no observation"))))
        .collect::<Result<_, _>>()?;
    let mut slice = Dataset {
        covariate_names: ds.covariate_names.clone(),
        records: rows.iter().map(|&r| ds.records[r].clone()).collect(),
    };
    let local: Vec<usize> = (0..rows.len()).collect();
    let mean_rmse = |ds: &Dataset| {
        let r = rmse_pair(&observed, &model.predict_ppb(ds, &local));
        0.5 * (r[0] + r[1])
    };
    let base = mean_rmse(&slice);
    let original: Vec<f64> = slice.records.iter().map(|r| r.covariates[covariate]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..repeats.max(1) {
        let mut perm = original.clone();
        perm.shuffle(&mut rng);
        for (rec, v) in slice.records.iter_mut().zip(&perm) {
            rec.covariates[covariate] = *v;
        }
        total += mean_rmse(&slice) - base;
    }
    Ok(total / repeats.max(1) as f64)
}

/// Scale nonnegative parts of the scores to sum to one.
pub fn normalize_importances(scores: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = scores.iter().map(|s| s.max(0.0)).collect();
    let sum: f64 = pos.iter().sum();
    if sum > 0.0 {
        pos.iter().map(|s| s / sum).collect()
    } else {
        vec![0.0; scores.len()]
    }
}
