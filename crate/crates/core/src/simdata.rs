//! Two-species advection-diffusion simulator on a regular 2-D grid and a
//! site sampler that turns simulated fields into datasets.
//!
//! Species 0 is NO2 and species 1 is NOx. Both share the transport fields.
//! NOx sources dominate NO2 sources, NO2 decays at least as fast as NOx, and
//! a linear conversion term moves the non-NO2 share of NOx into NO2, so
//! `C_no2 <= C_nox` is preserved by every step that passes the positivity
//! check.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datio::{DataError, Dataset, SampleRecord, SplitTag, WEEKS_PER_YEAR};

/// A field on the grid, indexed `[(i, j)]` with `i` along x.
pub type GridField = Array2<f64>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("CFL violation: {what} = {ratio:.4} exceeds {limit}")]
    Cfl { what: &'static str, ratio: f64, limit: f64 },
    #[error("invalid fields: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    ZeroFlux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Step length in weeks.
    pub dt: f64,
    pub steps: usize,
    pub boundary: Boundary,
    /// Keep every `save_every`-th state (the initial state is always kept).
    #[serde(default = "one")]
    pub save_every: usize,
}

fn one() -> usize {
    1
}

impl GridSpec {
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dy)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn zeros(&self) -> GridField {
        Array2::zeros((self.nx, self.ny))
    }
}

/// Seasonal multipliers applied to wind, diffusion and sources:
/// `1 + a_w sin(phase)`, `1 + a_p cos(phase)`, `1 + a_s cos(phase)` with
/// `phase = 2 pi t / period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Forcing {
    pub wind: f64,
    pub diffusion: f64,
    pub source: f64,
    pub period_weeks: f64,
}

impl Default for Forcing {
    fn default() -> Self {
        Forcing { wind: 0.0, diffusion: 0.0, source: 0.0, period_weeks: WEEKS_PER_YEAR as f64 }
    }
}

impl Forcing {
    pub fn multipliers(&self, t: f64) -> (f64, f64, f64) {
        let ph = 2.0 * PI * t / self.period_weeks;
        (1.0 + self.wind * ph.sin(), 1.0 + self.diffusion * ph.cos(), 1.0 + self.source * ph.cos())
    }

    fn peak(&self) -> (f64, f64) {
        (1.0 + self.wind.abs(), 1.0 + self.diffusion.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub vx: GridField,
    pub vy: GridField,
    pub p: GridField,
    /// Emission rates (ppb/week) for NO2 and NOx.
    pub source: [GridField; 2],
    /// First-order loss rates (1/week) for NO2 and NOx.
    pub decay: [f64; 2],
    /// Rate (1/week) at which `C_nox - C_no2` converts into NO2.
    pub conversion: f64,
    pub z: GridField,
    pub forcing: Forcing,
}

impl FieldSet {
    /// Still air, no diffusion or sources, flat terrain.
    pub fn quiescent(grid: &GridSpec) -> Self {
        FieldSet {
            vx: grid.zeros(),
            vy: grid.zeros(),
            p: grid.zeros(),
            source: [grid.zeros(), grid.zeros()],
            decay: [0.0; 2],
            conversion: 0.0,
            z: grid.zeros(),
            forcing: Forcing::default(),
        }
    }

    fn validate(&self, grid: &GridSpec) -> Result<(), SimError> {
        let shape = [grid.nx, grid.ny];
        let fields = [("vx", &self.vx), ("vy", &self.vy), ("p", &self.p), ("z", &self.z)];
        for (name, f) in fields.iter().copied().chain([("source_no2", &self.source[0]), ("source_nox", &self.source[1])]) {
            if f.shape() != shape {
                return Err(SimError::Invalid(format!("{name} has shape {:?}, grid is {shape:?}", f.shape())));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Invalid(format!("{name} is not finite")));
            }
        }
        if self.p.iter().any(|&v| v < 0.0) {
            return Err(SimError::Invalid("negative diffusion".into()));
        }
        if self.source[0].iter().zip(&self.source[1]).any(|(&a, &b)| a < 0.0 || b < a) {
            return Err(SimError::Invalid("sources must satisfy 0 <= no2 <= nox".into()));
        }
        if self.decay[1] < 0.0 || self.decay[0] < self.decay[1] || self.conversion < 0.0 {
            return Err(SimError::Invalid("need decay_no2 >= decay_nox >= 0 and conversion >= 0".into()));
        }
        let f = &self.forcing;
        if [f.wind, f.diffusion, f.source].iter().any(|a| !(a.abs() < 1.0)) || !(f.period_weeks > 0.0) {
            return Err(SimError::Invalid("forcing amplitudes must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesState {
    pub c: [GridField; 2],
}

impl SpeciesState {
    pub fn uniform(grid: &GridSpec, no2: f64, nox: f64) -> Self {
        SpeciesState { c: [Array2::from_elem((grid.nx, grid.ny), no2), Array2::from_elem((grid.nx, grid.ny), nox)] }
    }

    /// Total mass per species, `sum C dx dy`.
    pub fn mass(&self, grid: &GridSpec) -> [f64; 2] {
        [self.c[0].sum() * grid.dx * grid.dy, self.c[1].sum() * grid.dx * grid.dy]
    }

    pub fn is_ordered(&self) -> bool {
        self.c[0].iter().zip(&self.c[1]).all(|(&a, &b)| 0.0 <= a && a <= b)
    }
}

/// Snapshots of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub times: Vec<f64>,
    pub states: Vec<SpeciesState>,
}

/// Stability ratios of a configuration at peak forcing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflReport {
    pub advection: f64,
    pub diffusion: f64,
    /// Smallest diagonal coefficient of the update; must be nonnegative.
    pub min_self_weight: f64,
}

fn face(a: &GridField, i: usize, j: usize, i2: usize, j2: usize) -> f64 {
    0.5 * (a[(i, j)] + a[(i2, j2)])
}

/// Neighbor of `k` in direction `+1`, or `None` at a closed boundary.
fn next(k: usize, n: usize, b: Boundary) -> Option<usize> {
    if k + 1 < n {
        Some(k + 1)
    } else {
        match b {
            Boundary::Periodic => Some(0),
            Boundary::ZeroFlux => None,
        }
    }
}

fn prev(k: usize, n: usize, b: Boundary) -> Option<usize> {
    if k > 0 {
        Some(k - 1)
    } else {
        match b {
            Boundary::Periodic => Some(n - 1),
            Boundary::ZeroFlux => None,
        }
    }
}

/// Check the advection and diffusion ratios and the per-cell positivity of
/// the explicit update.
pub fn check_cfl(grid: &GridSpec, fields: &FieldSet) -> Result<CflReport, SimError> {
    if grid.nx == 0 || grid.ny == 0 || !(grid.dx > 0.0) || !(grid.dy > 0.0) || !(grid.dt > 0.0) {
        return Err(SimError::Invalid("grid needs nx, ny >= 1 and positive dx, dy, dt".into()));
    }
    fields.validate(grid)?;
    let (wm, pm) = fields.forcing.peak();
    let h = grid.dx.min(grid.dy);
    let vmax = fields.vx.iter().chain(fields.vy.iter()).fold(0.0f64, |m, v| m.max(v.abs())) * wm;
    let pmax = fields.p.iter().fold(0.0f64, |m, &v| m.max(v)) * pm;
    let advection = vmax * grid.dt / h;
    let diffusion = pmax * grid.dt / (h * h);
    if advection > 1.0 {
        return Err(SimError::Cfl { what: "max|v| dt / min(dx, dy)", ratio: advection, limit: 1.0 });
    }
    if diffusion > 0.5 {
        return Err(SimError::Cfl { what: "max(p) dt / min(dx, dy)^2", ratio: diffusion, limit: 0.5 });
    }
    let b = grid.boundary;
    let mut min_w = f64::INFINITY;
    let loss = fields.decay[0].max(fields.decay[1]) + fields.conversion;
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let mut out = 0.0;
            if let Some(i2) = next(i, grid.nx, b) {
                out += (face(&fields.vx, i, j, i2, j).max(0.0) * wm) / grid.dx
                    + face(&fields.p, i, j, i2, j) * pm / (grid.dx * grid.dx);
            }
            if let Some(i0) = prev(i, grid.nx, b) {
                out += ((-face(&fields.vx, i0, j, i, j)).max(0.0) * wm) / grid.dx
                    + face(&fields.p, i0, j, i, j) * pm / (grid.dx * grid.dx);
            }
            if let Some(j2) = next(j, grid.ny, b) {
                out += (face(&fields.vy, i, j, i, j2).max(0.0) * wm) / grid.dy
                    + face(&fields.p, i, j, i, j2) * pm / (grid.dy * grid.dy);
            }
            if let Some(j0) = prev(j, grid.ny, b) {
                out += ((-face(&fields.vy, i, j0, i, j)).max(0.0) * wm) / grid.dy
                    + face(&fields.p, i, j0, i, j) * pm / (grid.dy * grid.dy);
            }
            min_w = min_w.min(1.0 - grid.dt * (out + loss));
        }
    }
    if min_w < 0.0 {
        return Err(SimError::Cfl { what: "1 - self weight of the explicit update", ratio: 1.0 - min_w, limit: 1.0 });
    }
    Ok(CflReport { advection, diffusion, min_self_weight: min_w })
}

/// Net flux of `c` across the face from cell `a` to cell `b` (positive from
/// `a` to `b`), per unit face length.
#[inline]
fn flux(u: f64, p: f64, ca: f64, cb: f64, h: f64) -> f64 {
    u.max(0.0) * ca + u.min(0.0) * cb - p * (cb - ca) / h
}

fn step(grid: &GridSpec, fields: &FieldSet, t: f64, state: &SpeciesState) -> SpeciesState {
    let (wm, pm, sm) = fields.forcing.multipliers(t);
    let b = grid.boundary;
    let (nx, ny) = (grid.nx, grid.ny);
    let mut out = state.clone();
    for s in 0..2 {
        let c = &state.c[s];
        let mut tend = Array2::<f64>::zeros((nx, ny));
        for i in 0..nx {
            let Some(i2) = next(i, nx, b) else { continue };
            for j in 0..ny {
                let u = face(&fields.vx, i, j, i2, j) * wm;
                let p = face(&fields.p, i, j, i2, j) * pm;
                let f = flux(u, p, c[(i, j)], c[(i2, j)], grid.dx) / grid.dx;
                tend[(i, j)] -= f;
                tend[(i2, j)] += f;
            }
        }
        for j in 0..ny {
            let Some(j2) = next(j, ny, b) else { continue };
            for i in 0..nx {
                let v = face(&fields.vy, i, j, i, j2) * wm;
                let p = face(&fields.p, i, j, i, j2) * pm;
                let f = flux(v, p, c[(i, j)], c[(i, j2)], grid.dy) / grid.dy;
                tend[(i, j)] -= f;
                tend[(i, j2)] += f;
            }
        }
        let o = &mut out.c[s];
        for ((i, j), v) in o.indexed_iter_mut() {
            let mut r = fields.source[s][(i, j)] * sm - fields.decay[s] * c[(i, j)];
            if s == 0 {
                r += fields.conversion * (state.c[1][(i, j)] - c[(i, j)]);
            }
            *v = c[(i, j)] + grid.dt * (tend[(i, j)] + r);
        }
    }
    out
}

/// Run the explicit scheme from `initial` for `grid.steps` steps.
pub fn simulate(grid: &GridSpec, fields: &FieldSet, initial: &SpeciesState) -> Result<Series, SimError> {
    check_cfl(grid, fields)?;
    if initial.c.iter().any(|c| c.shape() != [grid.nx, grid.ny]) {
        return Err(SimError::Invalid("initial state does not match the grid".into()));
    }
    let every = grid.save_every.max(1);
    let mut series = Series { times: vec![0.0], states: vec![initial.clone()] };
    let mut cur = initial.clone();
    for k in 0..grid.steps {
        let t = k as f64 * grid.dt;
        cur = step(grid, fields, t, &cur);
        if (k + 1) % every == 0 {
            series.times.push((k + 1) as f64 * grid.dt);
            series.states.push(cur.clone());
        }
    }
    Ok(series)
}

/// Stagnation and shear indicators from winds at 2, 10 and 50 m.
pub fn derived_wind(u2: f64, v2: f64, u10: f64, v10: f64, u50: f64, v50: f64) -> (f64, f64) {
    let s2 = u2.hypot(v2);
    let s10 = u10.hypot(v10);
    let s50 = u50.hypot(v50);
    (s50 - s10, s10 - s2)
}

// ---------------------------------------------------------------------------
// Site sampling

/// Names of the generated covariate columns, before distractors.
pub const BASE_COVARIATES: [&str; 14] = [
    "emission",
    "emission_buffer",
    "u2",
    "v2",
    "u10",
    "v10",
    "u50",
    "v50",
    "w_stag",
    "w_mix",
    "diffusion",
    "terrain",
    "season_sin",
    "season_cos",
];

/// Roughness length (m) of the logarithmic wind profile.
const ROUGHNESS_M: f64 = 0.3;

fn profile(h: f64) -> f64 {
    (h / ROUGHNESS_M).ln() / (10.0 / ROUGHNESS_M).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovariatePlan {
    /// Relative noise sd on the physical proxies.
    pub proxy_noise: f64,
    /// Number of pure-noise distractor columns.
    pub distractors: usize,
    /// Half-width in cells of the emission buffer window.
    pub buffer_cells: usize,
    /// Wind in m/s per grid-unit/week of velocity.
    pub wind_unit: f64,
}

impl Default for CovariatePlan {
    fn default() -> Self {
        CovariatePlan { proxy_noise: 0.1, distractors: 2, buffer_cells: 2, wind_unit: 1.0 }
    }
}

impl CovariatePlan {
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = BASE_COVARIATES.iter().map(|s| s.to_string()).collect();
        v.extend((1..=self.distractors).map(|k| format!("noise_{k}")));
        v
    }
}

/// Sample `n_sites` distinct cells weekly for `n_weeks` snapshots, starting
/// at snapshot `first`. Snapshot `first + w` becomes week index `w`.
#[allow(clippy::too_many_arguments)]
pub fn sample_sites(
    grid: &GridSpec,
    fields: &FieldSet,
    series: &Series,
    first: usize,
    n_sites: usize,
    n_weeks: usize,
    plan: &CovariatePlan,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset, SimError> {
    if n_sites > grid.cells() {
        return Err(SimError::Invalid(format!("{n_sites} sites requested on {} cells", grid.cells())));
    }
    if first + n_weeks > series.states.len() {
        return Err(SimError::Invalid(format!(
            "need {} snapshots, simulation kept {}",
            first + n_weeks,
            series.states.len()
        )));
    }
    if !(noise_sd >= 0.0) || !(plan.proxy_noise >= 0.0) {
        return Err(SimError::Invalid("noise sd must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = index::sample(&mut rng, grid.cells(), n_sites).into_vec();
    cells.sort_unstable();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let gauss = move |rng: &mut ChaCha8Rng| std.sample(rng);

    let buffer = {
        let k = plan.buffer_cells as isize;
        let mut b = grid.zeros();
        for ((i, j), v) in b.indexed_iter_mut() {
            let (mut s, mut n) = (0.0, 0.0);
            for di in -k..=k {
                for dj in -k..=k {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii >= 0 && jj >= 0 && (ii as usize) < grid.nx && (jj as usize) < grid.ny {
                        s += fields.source[1][(ii as usize, jj as usize)];
                        n += 1.0;
                    }
                }
            }
            *v = s / n;
        }
        b
    };

    let width = (n_sites.max(1) as f64).log10().floor() as usize + 1;
    let mut records = Vec::with_capacity(n_sites * n_weeks);
    for &cell in &cells {
        let (i, j) = (cell % grid.nx, cell / grid.nx);
        let (x, y) = grid.cell_center(i, j);
        let z = fields.z[(i, j)];
        let site_id = format!("s{cell:0width$}", width = width.max(4));
        for w in 0..n_weeks {
            let k = first + w;
            let t = series.times[k];
            let (wm, pm, sm) = fields.forcing.multipliers(t);
            let noisy = |v: f64, rng: &mut ChaCha8Rng| v * (1.0 + plan.proxy_noise * gauss(rng));
            let (u, v) = (fields.vx[(i, j)] * wm * plan.wind_unit, fields.vy[(i, j)] * wm * plan.wind_unit);
            let mut winds = [0.0; 6];
            for (h, hgt) in [2.0, 10.0, 50.0].into_iter().enumerate() {
                let f = profile(hgt);
                winds[2 * h] = noisy(u * f, &mut rng);
                winds[2 * h + 1] = noisy(v * f, &mut rng);
            }
            let (w_stag, w_mix) = derived_wind(winds[0], winds[1], winds[2], winds[3], winds[4], winds[5]);
            let phase = 2.0 * PI * w as f64 / WEEKS_PER_YEAR as f64;
            let mut cov = vec![
                noisy(fields.source[1][(i, j)] * sm, &mut rng),
                noisy(buffer[(i, j)] * sm, &mut rng),
            ];
            cov.extend_from_slice(&winds);
            cov.push(w_stag);
            cov.push(w_mix);
            cov.push(noisy(fields.p[(i, j)] * pm, &mut rng));
            cov.push(z + plan.proxy_noise * gauss(&mut rng));
            cov.push(phase.sin());
            cov.push(phase.cos());
            for _ in 0..plan.distractors {
                cov.push(gauss(&mut rng));
            }
            let st = &series.states[k];
            let (c1, c2) = (st.c[0][(i, j)], st.c[1][(i, j)]);
            let (e, eta) = (noise_sd * gauss(&mut rng), noise_sd * gauss(&mut rng));
            let nox = c2 * e.exp();
            let no2 = (c1 * (e + eta).exp()).min(nox);
            records.push(SampleRecord {
                site_id: site_id.clone(),
                week: w as i64,
                x,
                y,
                z,
                covariates: cov,
                no2_ppb: Some(no2),
                nox_ppb: Some(nox),
                split: SplitTag::Predict,
            });
        }
    }
    Ok(Dataset::new(plan.names(), records)?)
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Steps per week.
    pub steps_per_week: usize,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WindSpec {
    Uniform { u: f64, v: f64 },
    /// Uniform drift plus a solid-body swirl that fades outside `radius`.
    Swirl { u: f64, v: f64, center: [f64; 2], radius: f64, strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerrainSpec {
    Flat { elevation: f64 },
    Hill { base: f64, height: f64, center: [f64; 2], width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceShape {
    Gaussian { center: [f64; 2], width: f64 },
    /// A road along x at `y` between `x0` and `x1`.
    Road { y: f64, x0: f64, x1: f64, width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub shape: SourceShape,
    /// Peak NOx emission (ppb/week).
    pub nox_rate: f64,
    /// Share of the NOx emission emitted directly as NO2.
    pub no2_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chemistry {
    /// Uniform background NOx emission (ppb/week).
    pub background_nox: f64,
    pub background_no2_fraction: f64,
    pub decay_no2: f64,
    pub decay_nox: f64,
    pub conversion: f64,
    /// Initial uniform concentrations (ppb).
    pub initial_no2: f64,
    pub initial_nox: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub sites: usize,
    pub weeks: usize,
    pub spinup_weeks: usize,
    pub noise_sd: f64,
    #[serde(default)]
    pub covariates: CovariatePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub grid: ScenarioGrid,
    pub wind: WindSpec,
    pub diffusion: f64,
    /// Relative diffusion increase per unit elevation above the minimum.
    #[serde(default)]
    pub terrain_diffusion_gain: f64,
    pub terrain: TerrainSpec,
    pub sources: Vec<SourceSpec>,
    pub chemistry: Chemistry,
    #[serde(default)]
    pub forcing: Forcing,
    pub sampling: Sampling,
}

impl Scenario {
    /// The bundled desk-scale plume scenario.
    pub fn plume_small() -> Self {
        Scenario {
            name: "plume-small".into(),
            seed: 7,
            grid: ScenarioGrid { nx: 32, ny: 32, dx: 1.0, dy: 1.0, steps_per_week: 8, boundary: Boundary::ZeroFlux },
            wind: WindSpec::Swirl { u: 0.8, v: 0.3, center: [16.0, 16.0], radius: 10.0, strength: 0.06 },
            diffusion: 0.35,
            terrain_diffusion_gain: 0.5,
            terrain: TerrainSpec::Hill { base: 0.0, height: 1.0, center: [22.0, 10.0], width: 6.0 },
            sources: vec![
                SourceSpec {
                    shape: SourceShape::Road { y: 12.0, x0: 2.0, x1: 30.0, width: 1.2 },
                    nox_rate: 30.0,
                    no2_fraction: 0.1,
                },
                SourceSpec {
                    shape: SourceShape::Gaussian { center: [9.0, 22.0], width: 2.0 },
                    nox_rate: 45.0,
                    no2_fraction: 0.15,
                },
                SourceSpec {
                    shape: SourceShape::Gaussian { center: [24.0, 25.0], width: 1.5 },
                    nox_rate: 25.0,
                    no2_fraction: 0.1,
                },
            ],
            chemistry: Chemistry {
                background_nox: 1.0,
                background_no2_fraction: 0.3,
                decay_no2: 0.35,
                decay_nox: 0.25,
                conversion: 0.3,
                initial_no2: 2.0,
                initial_nox: 4.0,
            },
            forcing: Forcing { wind: 0.3, diffusion: 0.25, source: 0.2, period_weeks: WEEKS_PER_YEAR as f64 },
            sampling: Sampling {
                sites: 64,
                weeks: 80,
                spinup_weeks: 8,
                noise_sd: 0.08,
                covariates: CovariatePlan::default(),
            },
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        let g = &self.grid;
        let weeks = self.sampling.spinup_weeks + self.sampling.weeks;
        GridSpec {
            nx: g.nx,
            ny: g.ny,
            dx: g.dx,
            dy: g.dy,
            dt: 1.0 / g.steps_per_week.max(1) as f64,
            steps: weeks * g.steps_per_week,
            boundary: g.boundary,
            save_every: g.steps_per_week.max(1),
        }
    }

    pub fn fields(&self, grid: &GridSpec) -> FieldSet {
        let mut f = FieldSet::quiescent(grid);
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let (x, y) = grid.cell_center(i, j);
                let (u, v) = match &self.wind {
                    WindSpec::Uniform { u, v } => (*u, *v),
                    WindSpec::Swirl { u, v, center, radius, strength } => {
                        let (rx, ry) = (x - center[0], y - center[1]);
                        let fade = (-(rx * rx + ry * ry) / (radius * radius)).exp();
                        (u - strength * ry * fade, v + strength * rx * fade)
                    }
                };
                f.vx[(i, j)] = u;
                f.vy[(i, j)] = v;
                f.z[(i, j)] = match &self.terrain {
                    TerrainSpec::Flat { elevation } => *elevation,
                    TerrainSpec::Hill { base, height, center, width } => {
                        let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
                        base + height * (-r2 / (2.0 * width * width)).exp()
                    }
                };
                let c = &self.chemistry;
                let mut nox = c.background_nox;
                let mut no2 = c.background_nox * c.background_no2_fraction;
                for s in &self.sources {
                    let shape = match &s.shape {
                        SourceShape::Gaussian { center, width } => {
                            let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
                            (-r2 / (2.0 * width * width)).exp()
                        }
                        SourceShape::Road { y: yr, x0, x1, width } => {
                            let along = if x >= *x0 && x <= *x1 { 1.0 } else { 0.0 };
                            along * (-(y - yr).powi(2) / (2.0 * width * width)).exp()
                        }
                    };
                    nox += s.nox_rate * shape;
                    no2 += s.nox_rate * shape * s.no2_fraction.clamp(0.0, 1.0);
                }
                f.source[0][(i, j)] = no2;
                f.source[1][(i, j)] = nox;
            }
        }
        let zmin = f.z.iter().copied().fold(f64::INFINITY, f64::min);
        let gain = self.terrain_diffusion_gain;
        f.p = f.z.mapv(|z| self.diffusion * (1.0 + gain * (z - zmin)));
        f.decay = [self.chemistry.decay_no2, self.chemistry.decay_nox];
        f.conversion = self.chemistry.conversion;
        f.forcing = self.forcing;
        f
    }

    pub fn initial(&self, grid: &GridSpec) -> SpeciesState {
        SpeciesState::uniform(grid, self.chemistry.initial_no2, self.chemistry.initial_nox)
    }

    /// Simulate and sample the scenario's dataset.
    pub fn generate(&self) -> Result<Dataset, SimError> {
        let grid = self.grid_spec();
        let fields = self.fields(&grid);
        let series = simulate(&grid, &fields, &self.initial(&grid))?;
        let s = &self.sampling;
        sample_sites(
            &grid,
            &fields,
            &series,
            s.spinup_weeks + 1,
            s.sites,
            s.weeks,
            &s.covariates,
            s.noise_sd,
            self.seed,
        )
    }
}
