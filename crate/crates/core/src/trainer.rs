//! Semi-supervised jPINN training: mini-batches mix supervised training rows
//! with unsupervised rows that only enter the physics terms.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Mat, Tape, Var};
use crate::datio::{ConcentrationModel, DataError, Dataset, FeatureMap, SplitAssignment, N_COORDS};
use crate::nets::{NetError, Network, NetworkTopology, DESK_ESTIMATION_WIDTHS, DESK_PARAMETER_WIDTHS};
use crate::physics::{
    self, default_threshold, from_log, to_log, CoordScales, LossWeights, PhysicsError, Species, SpeciesTheta, Theta,
    ThetaVars, N_TERMS,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("numeric failure at epoch {epoch}, batch {batch}: {source}")]
    Numeric { epoch: usize, batch: usize, source: PhysicsError },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("metrics need at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("model file: {0}")]
    Model(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Joint,
    Separate,
    BaselineNoPhysics,
    NoElevationPde,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Joint, Mode::Separate, Mode::BaselineNoPhysics, Mode::NoElevationPde];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Separate => "separate",
            Mode::BaselineNoPhysics => "baseline-no-physics",
            Mode::NoElevationPde => "no-elevation-pde",
        }
    }

    pub fn use_z(self) -> bool {
        self != Mode::NoElevationPde
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode '{s}'"))
    }
}

/// Which unsupervised rows enter the physics terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhysicsPolicy {
    AllSamples,
    TrainRegularOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub policy: PhysicsPolicy,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 200,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-3,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            policy: PhysicsPolicy::AllSamples,
            mode: Mode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig { batch_size: 1666, epochs: 160, ..Default::default() }
    }

    /// Use the literal `beta = 0.09` from the hyperparameter list.
    pub fn with_literal_beta(mut self) -> Self {
        self.beta1 = 0.09;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return bad("learning_rate and epsilon must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.weights.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and nonnegative");
        }
        Ok(())
    }

    /// Loss weights after applying the mode.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            Mode::BaselineNoPhysics => self.weights.supervised_only(),
            _ => self.weights,
        }
    }
}

/// Network sizes and options shared by every unit of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub estimation_widths: Vec<usize>,
    pub parameter_widths: Vec<usize>,
    pub attention: bool,
    pub weight_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            estimation_widths: DESK_ESTIMATION_WIDTHS.to_vec(),
            parameter_widths: DESK_PARAMETER_WIDTHS.to_vec(),
            attention: true,
            weight_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            estimation_widths: crate::nets::FULL_ESTIMATION_WIDTHS.to_vec(),
            parameter_widths: crate::nets::FULL_PARAMETER_WIDTHS.to_vec(),
            ..Default::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Mat>) -> Self {
        let m: Vec<Mat> = params.into_iter().map(|p| Array2::zeros(p.dim())).collect();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale `grads` so their global norm is at most `clip`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Mat], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// One Adam update with global-norm clipping. Returns the pre-clip norm.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Mat>,
    grads: &mut [Mat],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> f64 {
    let norm = clip_global_norm(grads, cfg.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        });
    }
    norm
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesMetrics {
    /// `None` when the observations have zero variance.
    pub r2: Option<f64>,
    pub rmse: f64,
}

/// R^2 and RMSE per species on ppb pairs.
pub fn metrics(observed: &[[f64; 2]], predicted: &[[f64; 2]]) -> Result<[SpeciesMetrics; 2], TrainError> {
    let n = observed.len();
    if n < 2 || predicted.len() != n {
        return Err(TrainError::TooFewObservations(n.min(predicted.len())));
    }
    let one = |k: usize| {
        let mean = observed.iter().map(|o| o[k]).sum::<f64>() / n as f64;
        let ss_tot: f64 = observed.iter().map(|o| (o[k] - mean).powi(2)).sum();
        let ss_res: f64 = observed.iter().zip(predicted).map(|(o, p)| (o[k] - p[k]).powi(2)).sum();
        SpeciesMetrics {
            r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
            rmse: (ss_res / n as f64).sqrt(),
        }
    };
    Ok([one(0), one(1)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Regular,
    Site,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 3] = [EvalSplit::Train, EvalSplit::Regular, EvalSplit::Site];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Regular => "regular",
            EvalSplit::Site => "site",
        }
    }
}

/// Observed rows of each evaluation split.
pub fn eval_rows(ds: &Dataset, split: &SplitAssignment) -> [Vec<usize>; 3] {
    let observed = |rows: &[usize]| -> Vec<usize> {
        rows.iter().copied().filter(|&r| ds.records[r].observed().is_some()).collect()
    };
    [observed(&split.train_unique()), observed(&split.regular), observed(&split.site)]
}

/// Metrics for each evaluation split; `None` where a split has fewer than
/// two observations.
pub fn split_metrics<M: ConcentrationModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    rows: &[Vec<usize>; 3],
) -> [Option<[SpeciesMetrics; 2]>; 3] {
    let mut out = [None; 3];
    for (slot, r) in out.iter_mut().zip(rows) {
        if r.len() < 2 {
            continue;
        }
        let obs: Vec<[f64; 2]> = r.iter().map(|&i| ds.records[i].observed().unwrap()).collect();
        let pred = model.predict_ppb(ds, r);
        *slot = metrics(&obs, &pred).ok();
    }
    out
}

// ---------------------------------------------------------------------------
// Model

/// One estimation/parameter network pair covering one or both species.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnUnit {
    pub species: Vec<Species>,
    pub est: Network,
    pub para: Network,
    /// Log-space output `= shift + scale * net output`, per species.
    pub out_shift: Vec<f64>,
    pub out_scale: Vec<f64>,
}

impl PinnUnit {
    fn n_params(&self) -> usize {
        self.est.params.tensors.len() + self.para.params.tensors.len()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.est.params.tensors.iter_mut().chain(self.para.params.tensors.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &Mat> {
        self.est.params.tensors.iter().chain(self.para.params.tensors.iter())
    }
}

/// A trained (or initialized) jPINN: one joint unit, or one unit per species.
#[derive(Debug, Clone, PartialEq)]
pub struct JpinnModel {
    pub mode: Mode,
    pub features: FeatureMap,
    /// Log-space thresholds per species.
    pub thresholds: [f64; 2],
    pub units: Vec<PinnUnit>,
}

pub(crate) fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl JpinnModel {
    /// Fit the feature map and output scaling on `train_rows` and initialize
    /// networks for `mode`.
    pub fn build(
        ds: &Dataset,
        train_rows: &[usize],
        cfg: &ModelConfig,
        mode: Mode,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut train: Vec<usize> = train_rows.to_vec();
        train.sort_unstable();
        train.dedup();
        let obs: Vec<[f64; 2]> = train.iter().filter_map(|&r| ds.records[r].observed()).collect();
        if obs.is_empty() {
            return Err(TrainError::Config("no observed training rows".into()));
        }
        let features = FeatureMap::fit(ds, &train)?;
        let mut thresholds = [0.0; 2];
        let mut shift = [0.0; 2];
        let mut scale = [1.0; 2];
        for k in 0..2 {
            let max = obs.iter().map(|o| o[k]).fold(0.0, f64::max);
            thresholds[k] = default_threshold(max);
            let logs: Vec<f64> = obs.iter().map(|o| to_log(o[k])).collect();
            let mean = logs.iter().sum::<f64>() / logs.len() as f64;
            let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / logs.len() as f64;
            shift[k] = mean;
            scale[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let groups: Vec<Vec<Species>> = match mode {
            Mode::Separate => vec![vec![Species::No2], vec![Species::Nox]],
            _ => vec![Species::BOTH.to_vec()],
        };
        let width = features.width();
        let mut units = Vec::new();
        for (u, species) in groups.into_iter().enumerate() {
            let s = species.len();
            let mut et = NetworkTopology::estimation_net(width, &cfg.estimation_widths, s);
            let mut pt = NetworkTopology::parameter_net(width, &cfg.parameter_widths, s);
            for t in [&mut et, &mut pt] {
                t.attention = cfg.attention;
                t.weight_norm = cfg.weight_norm;
            }
            let est = Network::new(et, derive_seed(seed, 2 * u as u64 + 1))?;
            let para = Network::new(pt, derive_seed(seed, 2 * u as u64 + 2))?;
            units.push(PinnUnit {
                out_shift: species.iter().map(|sp| shift[sp.index()]).collect(),
                out_scale: species.iter().map(|sp| scale[sp.index()]).collect(),
                species,
                est,
                para,
            });
        }
        Ok(JpinnModel { mode, features, thresholds, units })
    }

    /// Log-space predictions (`n x 2`, NO2 then NOx) for standardized inputs.
    pub fn predict_log_features(&self, x: &Mat) -> Result<Mat, TrainError> {
        let mut out = Array2::zeros((x.nrows(), 2));
        for u in &self.units {
            let y = u.est.predict(x)?;
            for (j, sp) in u.species.iter().enumerate() {
                let (a, b) = (u.out_shift[j], u.out_scale[j]);
                out.column_mut(sp.index()).assign(&y.column(j).mapv(|v| a + b * v));
            }
        }
        Ok(out)
    }

    pub fn predict_log(&self, ds: &Dataset, rows: &[usize]) -> Result<Mat, TrainError> {
        self.predict_log_features(&self.features.transform(ds, rows))
    }

    /// Per-row transport coefficients from the parameter network(s).
    pub fn theta(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<Theta>, TrainError> {
        let x = self.features.transform(ds, rows);
        let mut out = vec![Theta::default(); rows.len()];
        for u in &self.units {
            let th = u.para.predict(&x)?;
            for (j, sp) in u.species.iter().enumerate() {
                let o = j * crate::nets::THETA_PER_SPECIES;
                for (i, t) in out.iter_mut().enumerate() {
                    let c = |k: usize| th[(i, o + k)];
                    t.species[sp.index()] = SpeciesTheta {
                        v: [c(0), c(1), c(2)],
                        p: [c(3), c(4), c(5)],
                        rho: c(6),
                    };
                }
            }
        }
        Ok(out)
    }

    /// Write the model to `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        let mut meta = String::new();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        meta.push_str("jpinn-model v1\n");
        meta.push_str(&format!("mode {}\n", self.mode));
        meta.push_str(&format!("thresholds {}\n", join(&self.thresholds)));
        meta.push_str(&format!("feature_mean {}\n", join(&self.features.standardizer.mean)));
        meta.push_str(&format!("feature_scale {}\n", join(&self.features.standardizer.scale)));
        meta.push_str(&format!("z_range {}\n", join(&[self.features.z_range.0, self.features.z_range.1])));
        meta.push_str(&format!("units {}\n", self.units.len()));
        for (i, u) in self.units.iter().enumerate() {
            let names: Vec<&str> = u.species.iter().map(|s| s.name()).collect();
            meta.push_str(&format!("unit {i} {}\n", names.join(" ")));
            meta.push_str(&format!("shift {}\n", join(&u.out_shift)));
            meta.push_str(&format!("scale {}\n", join(&u.out_scale)));
            fs::write(dir.join(format!("unit{i}.est.txt")), u.est.to_snapshot())?;
            fs::write(dir.join(format!("unit{i}.para.txt")), u.para.to_snapshot())?;
        }
        fs::write(dir.join("model.txt"), meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let meta = fs::read_to_string(dir.join("model.txt"))?;
        let bad = |m: String| TrainError::Model(m);
        let mut lines = meta.lines();
        if lines.next() != Some("jpinn-model v1") {
            return Err(bad("missing header".into()));
        }
        let mut field = |key: &str| -> Result<Vec<String>, TrainError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing '{key}'")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(format!("expected '{key}', got '{line}'")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let floats = |v: Vec<String>| -> Result<Vec<f64>, TrainError> {
            v.iter().map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}")))).collect()
        };
        let mode: Mode = field("mode")?.join("").parse().map_err(bad)?;
        let th = floats(field("thresholds")?)?;
        let mean = floats(field("feature_mean")?)?;
        let scale = floats(field("feature_scale")?)?;
        let z = floats(field("z_range")?)?;
        if th.len() != 2 || z.len() != 2 || mean.len() != scale.len() {
            return Err(bad("malformed header values".into()));
        }
        let n_units: usize = field("units")?.join("").parse().map_err(|e| bad(format!("units: {e}")))?;
        let mut units = Vec::new();
        for i in 0..n_units {
            let names = field("unit")?;
            let species = names
                .iter()
                .skip(1)
                .map(|n| match n.as_str() {
                    "no2" => Ok(Species::No2),
                    "nox" => Ok(Species::Nox),
                    other => Err(bad(format!("unknown species '{other}'"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let out_shift = floats(field("shift")?)?;
            let out_scale = floats(field("scale")?)?;
            let est = Network::from_snapshot(&fs::read_to_string(dir.join(format!("unit{i}.est.txt")))?)?;
            let para = Network::from_snapshot(&fs::read_to_string(dir.join(format!("unit{i}.para.txt")))?)?;
            units.push(PinnUnit { species, est, para, out_shift, out_scale });
        }
        let features = FeatureMap {
            standardizer: crate::datio::Standardizer { mean, scale },
            z_range: (z[0], z[1]),
        };
        Ok(JpinnModel { mode, features, thresholds: [th[0], th[1]], units })
    }
}

impl ConcentrationModel for JpinnModel {
    fn predict_ppb(&self, ds: &Dataset, rows: &[usize]) -> Vec<[f64; 2]> {
        let y = self.predict_log(ds, rows).expect("dataset schema matches the fitted feature map");
        y.rows().into_iter().map(|r| [from_log(r[0]), from_log(r[1])]).collect()
    }
}

// ---------------------------------------------------------------------------
// Loss on one batch

/// Batch inputs shared by every unit.
struct Batch {
    x: Mat,
    /// Log observations (`n x 2`); zero on unsupervised rows.
    obs: Mat,
    /// 1 on supervised rows.
    mask: Mat,
    n_train: usize,
}

struct BatchLoss {
    total: f64,
    mean_sq: [f64; N_TERMS],
    grads: Vec<Mat>,
}

fn unit_loss(
    unit: &PinnUnit,
    batch: &Batch,
    thresholds: [f64; 2],
    weights: LossWeights,
    scales: CoordScales,
    use_z: bool,
) -> Result<BatchLoss, PhysicsError> {
    let mut tape = Tape::new();
    let est = unit.est.bind(&mut tape, true);
    let para = unit.para.bind(&mut tape, true);
    let n = batch.x.nrows();
    let w = batch.x.ncols();
    let coords = tape.variable(batch.x.slice(ndarray::s![.., ..N_COORDS]).to_owned());
    let input = if w > N_COORDS {
        let cov = tape.constant(batch.x.slice(ndarray::s![.., N_COORDS..]).to_owned());
        tape.concat_cols(coords, cov)
    } else {
        coords
    };
    let raw = unit.est.forward(&mut tape, &est, input).map_err(|e| PhysicsError::Config(e.to_string()))?;
    let physics_on = weights.0[..5].iter().any(|w| *w != 0.0);
    let theta = if physics_on {
        Some(unit.para.forward(&mut tape, &para, input).map_err(|e| PhysicsError::Config(e.to_string()))?)
    } else {
        None
    };
    let mask = tape.constant(batch.mask.clone());
    let mut terms: [Option<Var>; N_TERMS] = [None; N_TERMS];
    let mut outputs = [None, None];
    for (j, sp) in unit.species.iter().enumerate() {
        let k = sp.index();
        let col = tape.column(raw, j);
        let col = tape.scale(col, unit.out_scale[j]);
        let y = tape.shift(col, unit.out_shift[j]);
        outputs[k] = Some(y);
        if let Some(theta) = theta {
            let d = physics::input_derivatives(&mut tape, y, coords, scales, use_z)?;
            let tv = ThetaVars::from_output(&mut tape, theta, j);
            terms[k] = Some(physics::pde_residual(&mut tape, &tv, &d, use_z)?);
        }
        terms[2 + k] = Some(physics::threshold_residual(&mut tape, y, thresholds[k]));
        let obs = tape.constant(batch.obs.column(k).to_owned().insert_axis(Axis(1)));
        terms[5 + k] = Some(physics::mse_residual(&mut tape, obs, y, mask));
    }
    if let [Some(a), Some(b)] = outputs {
        terms[4] = Some(physics::ordering_residual(&mut tape, a, b));
    }
    let bundle = physics::total_loss(&mut tape, terms, n, batch.n_train, weights)?;
    let leaves: Vec<Var> = est.leaves.iter().chain(&para.leaves).copied().collect();
    let grads = tape.gradients(bundle.total, &leaves)?.grads;
    Ok(BatchLoss { total: bundle.total_value(&tape), mean_sq: bundle.mean_sq, grads })
}

// ---------------------------------------------------------------------------
// History

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mean_sq: [f64; N_TERMS],
    /// False when the PDE terms were not evaluated (their `mean_sq` entries are 0).
    pub pde_evaluated: bool,
    /// Train, regular, site.
    pub metrics: [Option<[SpeciesMetrics; 2]>; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Series of mean e_i^2 (0-based term index).
    pub fn term(&self, i: usize) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_sq[i]).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn header() -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "loss".to_string()];
        h.extend((1..=N_TERMS).map(|i| format!("e{i}_sq")));
        for s in EvalSplit::ALL {
            for sp in Species::BOTH {
                h.push(format!("r2_{}_{}", s.as_str(), sp.name()));
                h.push(format!("rmse_{}_{}", s.as_str(), sp.name()));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| TrainError::Io(std::io::Error::other(e));
        out.write_record(Self::header()).map_err(io)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), format!("{:?}", e.loss)];
            for (i, v) in e.mean_sq.iter().enumerate() {
                row.push(if i < 2 && !e.pde_evaluated { "NA".into() } else { format!("{v:?}") });
            }
            for m in &e.metrics {
                for k in 0..2 {
                    match m {
                        Some(m) => {
                            row.push(m[k].r2.map_or("NA".into(), |v| format!("{v:?}")));
                            row.push(format!("{:?}", m[k].rmse));
                        }
                        None => row.extend(["NA".to_string(), "NA".to_string()]),
                    }
                }
            }
            out.write_record(row).map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: JpinnModel,
    pub history: TrainHistory,
}

/// Row partitions used for mini-batches.
struct Partitions {
    train: Vec<usize>,
    regular: Vec<usize>,
    site: Vec<usize>,
}

fn partitions(split: &SplitAssignment, policy: PhysicsPolicy, physics_on: bool) -> Result<Partitions, TrainError> {
    let mut regular = split.regular.clone();
    regular.extend_from_slice(&split.predict);
    let site = match policy {
        PhysicsPolicy::AllSamples => split.site.clone(),
        PhysicsPolicy::TrainRegularOnly => Vec::new(),
    };
    if split.train.is_empty() {
        return Err(TrainError::Config("training partition is empty".into()));
    }
    if physics_on {
        if regular.is_empty() {
            return Err(TrainError::Config("regular/predict partition is empty".into()));
        }
        if policy == PhysicsPolicy::AllSamples && site.is_empty() {
            return Err(TrainError::Config("policy all-samples requires a nonempty site partition".into()));
        }
    }
    Ok(Partitions { train: split.train.clone(), regular, site })
}

/// Row indices (into the dataset) of mini-batch `j`.
fn batch_rows(p: &Partitions, j: usize, b: usize) -> (Vec<usize>, usize) {
    let lo = j * b;
    let hi = ((j + 1) * b).min(p.train.len());
    let mut rows: Vec<usize> = p.train[lo..hi].to_vec();
    let n_tr = rows.len();
    for part in [&p.regular, &p.site] {
        if part.is_empty() {
            continue;
        }
        let take = n_tr.min(part.len());
        rows.extend((0..take).map(|i| part[(lo + i) % part.len()]));
    }
    (rows, n_tr)
}

/// Build the networks for `cfg.mode` and train them.
pub fn train_joint(
    ds: &Dataset,
    split: &SplitAssignment,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let model = JpinnModel::build(ds, &split.train, model_cfg, cfg.mode, cfg.seed)?;
    train_model(model, ds, split, cfg)
}

/// Train an already built model.
pub fn train_model(
    mut model: JpinnModel,
    ds: &Dataset,
    split: &SplitAssignment,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let weights = cfg.effective_weights();
    if cfg.mode == Mode::BaselineNoPhysics {
        log::info!("mode baseline-no-physics: physics weights e1..e5 set to 0");
    }
    let physics_on = weights.0[..5].iter().any(|w| *w != 0.0);
    let mut parts = partitions(split, cfg.policy, physics_on)?;
    if split.train.iter().any(|&r| ds.records[r].observed().is_none()) {
        return Err(TrainError::Config("training row without observations".into()));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let x_all = model.features.transform(ds, &all);
    let mut obs_all = Array2::zeros((ds.len(), 2));
    for (i, rec) in ds.records.iter().enumerate() {
        if let Some(o) = rec.observed() {
            obs_all[(i, 0)] = to_log(o[0]);
            obs_all[(i, 1)] = to_log(o[1]);
        }
    }
    let scales = model.features.coord_scales();
    let use_z = cfg.mode.use_z();
    let eval = eval_rows(ds, split);
    let b = cfg.batch_size;
    let l_mini = parts.train.len().div_ceil(b);
    let mut states: Vec<AdamState> = model.units.iter().map(|u| AdamState::new(u.params())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        parts.train.shuffle(&mut rng);
        parts.regular.shuffle(&mut rng);
        parts.site.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut sq_sum = [0.0; N_TERMS];
        for j in 0..l_mini {
            let (rows, n_tr) = batch_rows(&parts, j, b);
            let mut mask = Array2::zeros((rows.len(), 1));
            mask.slice_mut(ndarray::s![..n_tr, ..]).fill(1.0);
            let mut obs = obs_all.select(Axis(0), &rows);
            obs.slice_mut(ndarray::s![n_tr.., ..]).fill(0.0);
            let batch = Batch { x: x_all.select(Axis(0), &rows), obs, mask, n_train: n_tr };
            for (unit, state) in model.units.iter_mut().zip(&mut states) {
                let mut bl = unit_loss(unit, &batch, model.thresholds, weights, scales, use_z)
                    .map_err(|source| TrainError::Numeric { epoch, batch: j, source })?;
                if !bl.total.is_finite() || bl.grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(TrainError::NonFinite { epoch, batch: j });
                }
                debug_assert_eq!(bl.grads.len(), unit.n_params());
                adam_step(unit.params_mut(), &mut bl.grads, state, cfg);
                loss_sum += bl.total;
                for (s, v) in sq_sum.iter_mut().zip(bl.mean_sq) {
                    *s += v;
                }
            }
        }
        let loss = loss_sum / l_mini as f64;
        let mean_sq = sq_sum.map(|s| s / l_mini as f64);
        let metrics = split_metrics(&model, ds, &eval);
        log::debug!("epoch {epoch}: loss {loss:.6e}");
        history.epochs.push(EpochRecord { epoch, loss, mean_sq, pde_evaluated: physics_on, metrics });
    }
    Ok(TrainOutcome { model, history })
}
