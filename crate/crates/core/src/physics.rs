//! Residual terms of the joint loss.
//!
//! e1, e2: log-space advection-diffusion residuals for NO2 and NOx.
//! e3, e4: threshold violations. e5: NO2 <= NOx ordering violation.
//! e6, e7: supervised residuals on training rows only.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Mat, Tape, Var};
use crate::nets::THETA_PER_SPECIES;

/// Concentration floor (ppb) added before taking logs.
pub const LOG_FLOOR_PPB: f64 = 0.01;

/// Number of residual terms in the joint loss.
pub const N_TERMS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("non-finite {what} at sample {sample}")]
    NonFinite { what: &'static str, sample: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    No2,
    Nox,
}

impl Species {
    pub const BOTH: [Species; 2] = [Species::No2, Species::Nox];

    pub fn index(self) -> usize {
        match self {
            Species::No2 => 0,
            Species::Nox => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Species::No2 => "no2",
            Species::Nox => "nox",
        }
    }
}

pub fn to_log(ppb: f64) -> f64 {
    (ppb + LOG_FLOOR_PPB).ln()
}

pub fn from_log(y: f64) -> f64 {
    y.exp() - LOG_FLOOR_PPB
}

/// Default threshold: log of 1.2 times the largest observed training value.
pub fn default_threshold(max_observed_ppb: f64) -> f64 {
    to_log(1.2 * max_observed_ppb)
}

/// Transport coefficients of one species.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpeciesTheta {
    /// Reynolds velocities along x, y, z (grid-units/week).
    pub v: [f64; 3],
    /// Diffusion coefficients along x, y, z (grid-units^2/week).
    pub p: [f64; 3],
    /// Net source term (log-concentration/week).
    pub rho: f64,
}

/// All 14 learned coefficients, NO2 first.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Theta {
    pub species: [SpeciesTheta; 2],
}

impl Theta {
    pub fn to_vec(&self) -> Vec<f64> {
        self.species
            .iter()
            .flat_map(|s| s.v.iter().chain(s.p.iter()).copied().chain(std::iter::once(s.rho)))
            .collect()
    }

    pub fn from_slice(v: &[f64]) -> Option<Self> {
        if v.len() != 2 * THETA_PER_SPECIES || v.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let one = |o: usize| SpeciesTheta {
            v: [v[o], v[o + 1], v[o + 2]],
            p: [v[o + 3], v[o + 4], v[o + 5]],
            rho: v[o + 6],
        };
        Some(Theta { species: [one(0), one(THETA_PER_SPECIES)] })
    }
}

/// Per-row coefficient columns (`n x 1` each) for one species.
#[derive(Debug, Clone, Copy)]
pub struct ThetaVars {
    pub v: [Var; 3],
    pub p: [Var; 3],
    pub rho: Var,
}

impl ThetaVars {
    /// Slice the coefficients of the `slot`-th species out of a parameter
    /// network output laid out as 7 columns per species.
    pub fn from_output(tape: &mut Tape, theta: Var, slot: usize) -> Self {
        let o = slot * THETA_PER_SPECIES;
        let mut c = |k| tape.column(theta, o + k);
        ThetaVars {
            v: [c(0), c(1), c(2)],
            p: [c(3), c(4), c(5)],
            rho: c(6),
        }
    }

    /// Constant coefficient columns for `n` rows.
    pub fn constant(tape: &mut Tape, theta: &SpeciesTheta, n: usize) -> Self {
        let mut col = |x: f64| tape.constant(Array2::from_elem((n, 1), x));
        ThetaVars {
            v: [col(theta.v[0]), col(theta.v[1]), col(theta.v[2])],
            p: [col(theta.p[0]), col(theta.p[1]), col(theta.p[2])],
            rho: col(theta.rho),
        }
    }
}

/// Input derivatives of one log-concentration output, each `n x 1`.
#[derive(Debug, Clone, Copy)]
pub struct PdeDerivatives {
    pub dt: Var,
    /// First derivatives along x, y, z.
    pub grad: [Var; 3],
    /// Diagonal second derivatives along x, y, z.
    pub hess: [Var; 3],
}

/// Coordinate scales mapping network inputs back to physical units: a
/// network input `u` relates to the physical coordinate by `u = (c - m) / s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordScales {
    pub t: f64,
    pub space: [f64; 3],
}

impl Default for CoordScales {
    fn default() -> Self {
        CoordScales { t: 1.0, space: [1.0; 3] }
    }
}

/// Differentiate `y` (`n x 1`) with respect to the coordinate leaf `coords`
/// (`n x 4`, columns t, x, y, z). Derivatives are recorded on the tape and
/// converted to physical units. With `use_z == false` the z derivatives are
/// zero constants and no z second derivative is taken.
pub fn input_derivatives(
    tape: &mut Tape,
    y: Var,
    coords: Var,
    scales: CoordScales,
    use_z: bool,
) -> Result<PdeDerivatives, PhysicsError> {
    let n = tape.value(y).nrows();
    let g = tape.grad(y, &[coords])?.grads[0];
    let gt = tape.column(g, 0);
    let dt = tape.scale(gt, 1.0 / scales.t);
    let mut grad = [dt; 3];
    let mut hess = [dt; 3];
    let dims = if use_z { 3 } else { 2 };
    for d in 0..3 {
        if d >= dims {
            let z = tape.constant(Array2::zeros((n, 1)));
            grad[d] = z;
            hess[d] = z;
            continue;
        }
        let gd = tape.column(g, d + 1);
        let s = scales.space[d];
        grad[d] = tape.scale(gd, 1.0 / s);
        let h = tape.grad(gd, &[coords])?.grads[0];
        let hd = tape.column(h, d + 1);
        hess[d] = tape.scale(hd, 1.0 / (s * s));
    }
    Ok(PdeDerivatives { dt, grad, hess })
}

fn first_non_finite(m: &Mat) -> Option<usize> {
    m.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Log-space advection-diffusion residual:
/// `dt + v.grad - sum_d p_d (hess_d + grad_d^2) - rho`.
pub fn pde_residual(
    tape: &mut Tape,
    theta: &ThetaVars,
    d: &PdeDerivatives,
    use_z: bool,
) -> Result<Var, PhysicsError> {
    for v in std::iter::once(&d.dt).chain(d.grad.iter()).chain(d.hess.iter()) {
        if let Some(sample) = first_non_finite(tape.value(*v)) {
            return Err(PhysicsError::NonFinite { what: "derivative", sample });
        }
    }
    let dims = if use_z { 3 } else { 2 };
    let mut e = d.dt;
    for k in 0..dims {
        let adv = tape.mul(theta.v[k], d.grad[k]);
        e = tape.add(e, adv);
        let g2 = tape.square(d.grad[k]);
        let curv = tape.add(d.hess[k], g2);
        let diff = tape.mul(theta.p[k], curv);
        e = tape.sub(e, diff);
    }
    Ok(tape.sub(e, theta.rho))
}

/// `ReLU(y - max)` for a log-space threshold.
pub fn threshold_residual(tape: &mut Tape, y: Var, max: f64) -> Var {
    let over = tape.shift(y, -max);
    tape.relu(over)
}

/// `ReLU(y_no2 - y_nox)`.
pub fn ordering_residual(tape: &mut Tape, y_no2: Var, y_nox: Var) -> Var {
    let d = tape.sub(y_no2, y_nox);
    tape.relu(d)
}

/// `observed - predicted` on rows where `mask` is 1; 0 elsewhere.
pub fn mse_residual(tape: &mut Tape, observed: Var, predicted: Var, mask: Var) -> Var {
    let r = tape.sub(observed, predicted);
    tape.mul(r, mask)
}

/// Weights of the seven loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; N_TERMS]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([1.0; N_TERMS])
    }
}

impl LossWeights {
    /// Weights with every physics term (e1 to e5) set to zero.
    pub fn supervised_only(mut self) -> Self {
        for w in &mut self.0[..5] {
            *w = 0.0;
        }
        self
    }
}

/// Residual columns, their mean squares, and the weighted total loss.
#[derive(Debug, Clone)]
pub struct ResidualBundle {
    /// Per-row residual columns; `None` for terms that do not apply.
    pub terms: [Option<Var>; N_TERMS],
    /// Mean of squares per term (over all rows for e1..e5, training rows
    /// for e6, e7).
    pub mean_sq: [f64; N_TERMS],
    pub weights: LossWeights,
    pub n_all: usize,
    pub n_train: usize,
    pub total: Var,
}

impl ResidualBundle {
    pub fn total_value(&self, tape: &Tape) -> f64 {
        tape.scalar_value(self.total)
    }

    pub fn values(&self, tape: &Tape, term: usize) -> Option<Vec<f64>> {
        self.terms[term].map(|v| tape.value(v).iter().copied().collect())
    }
}

/// `sum_{i<=5} l_i sum_j e_i^2 / N + sum_{i=6,7} l_i sum_j e_i^2 / M`.
///
/// e6 and e7 must already be zero on non-training rows.
pub fn total_loss(
    tape: &mut Tape,
    terms: [Option<Var>; N_TERMS],
    n_all: usize,
    n_train: usize,
    weights: LossWeights,
) -> Result<ResidualBundle, PhysicsError> {
    let supervised = terms[5..].iter().zip(&weights.0[5..]).any(|(t, w)| t.is_some() && *w != 0.0);
    if supervised && n_train == 0 {
        return Err(PhysicsError::Config("supervised terms enabled with no training samples".into()));
    }
    if n_all == 0 {
        return Err(PhysicsError::Config("empty batch".into()));
    }
    let mut mean_sq = [0.0; N_TERMS];
    let mut total: Option<Var> = None;
    for (i, term) in terms.iter().enumerate() {
        let Some(e) = *term else { continue };
        let denom = if i < 5 { n_all } else { n_train.max(1) } as f64;
        let sq = tape.square(e);
        let s = tape.sum_all(sq);
        let m = tape.scale(s, 1.0 / denom);
        mean_sq[i] = tape.scalar_value(m);
        let w = weights.0[i];
        if w == 0.0 {
            continue;
        }
        let wm = tape.scale(m, w);
        total = Some(match total {
            None => wm,
            Some(acc) => tape.add(acc, wm),
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Array2::zeros((1, 1))),
    };
    Ok(ResidualBundle { terms, mean_sq, weights, n_all, n_train, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn col(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap())
    }

    fn derivs(tape: &mut Tape, dt: f64, g: [f64; 3], h: [f64; 3]) -> PdeDerivatives {
        PdeDerivatives {
            dt: col(tape, &[dt]),
            grad: [col(tape, &[g[0]]), col(tape, &[g[1]]), col(tape, &[g[2]])],
            hess: [col(tape, &[h[0]]), col(tape, &[h[1]]), col(tape, &[h[2]])],
        }
    }

    #[test]
    fn constant_field_has_zero_residual() {
        let mut t = Tape::new();
        let d = derivs(&mut t, 0.0, [0.0; 3], [0.0; 3]);
        let th = SpeciesTheta { v: [1.0, 2.0, 3.0], p: [0.1, 0.2, 0.3], rho: 0.0 };
        let tv = ThetaVars::constant(&mut t, &th, 1);
        let e = pde_residual(&mut t, &tv, &d, true).unwrap();
        assert_eq!(t.scalar_value(e), 0.0);
    }

    #[test]
    fn traveling_wave_cancels() {
        let v = 1.7;
        let mut t = Tape::new();
        // C' = x - v t
        let d = derivs(&mut t, -v, [1.0, 0.0, 0.0], [0.0; 3]);
        let th = SpeciesTheta { v: [v, 0.0, 0.0], ..Default::default() };
        let tv = ThetaVars::constant(&mut t, &th, 1);
        let e = pde_residual(&mut t, &tv, &d, true).unwrap();
        assert_eq!(t.scalar_value(e), 0.0);
    }

    #[test]
    fn manufactured_sine_wave() {
        // C' = sin(x - t) + 2 with v_x = 1: e = -p_x (-sin(x - t) + cos^2(x - t))
        for &(x, tt, px) in &[(0.3, 0.1, 0.0), (1.2, 0.4, 0.5), (-0.7, 2.0, 1.3)] {
            let u: f64 = x - tt;
            let mut t = Tape::new();
            let d = derivs(&mut t, -u.cos(), [u.cos(), 0.0, 0.0], [-u.sin(), 0.0, 0.0]);
            let th = SpeciesTheta { v: [1.0, 0.0, 0.0], p: [px, 0.0, 0.0], rho: 0.0 };
            let tv = ThetaVars::constant(&mut t, &th, 1);
            let e = pde_residual(&mut t, &tv, &d, true).unwrap();
            let e = t.scalar_value(e);
            let expected = -px * (-u.sin() + u.cos().powi(2));
            assert!((e - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_derivative_names_sample() {
        let mut t = Tape::new();
        let mut d = derivs(&mut t, 0.0, [0.0; 3], [0.0; 3]);
        d.grad[1] = t.constant(array![[0.0], [f64::NAN]]);
        d.dt = col(&mut t, &[0.0, 0.0]);
        let tv = ThetaVars::constant(&mut t, &SpeciesTheta::default(), 2);
        let err = pde_residual(&mut t, &tv, &d, true).unwrap_err();
        assert_eq!(err, PhysicsError::NonFinite { what: "derivative", sample: 1 });
    }

    #[test]
    fn threshold_and_ordering() {
        let mut t = Tape::new();
        let y = col(&mut t, &[10.0, 8.0, -3.0]);
        let e = threshold_residual(&mut t, y, 8.0);
        assert_eq!(t.value(e).iter().copied().collect::<Vec<_>>(), vec![2.0, 0.0, 0.0]);
        let a = col(&mut t, &[3.0, 2.0, 1.0]);
        let b = col(&mut t, &[2.0, 2.0, 5.0]);
        let e5 = ordering_residual(&mut t, a, b);
        assert_eq!(t.value(e5).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn mse_residual_masks() {
        let mut t = Tape::new();
        let obs = col(&mut t, &[3.0, 5.0, 1.0]);
        let pred = col(&mut t, &[1.0, 5.0, 9.0]);
        let mask = col(&mut t, &[1.0, 1.0, 0.0]);
        let e = mse_residual(&mut t, obs, pred, mask);
        assert_eq!(t.value(e).iter().copied().collect::<Vec<_>>(), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn total_loss_examples() {
        let mut t = Tape::new();
        let zero = col(&mut t, &[0.0, 0.0]);
        let b = total_loss(&mut t, [Some(zero); 7], 2, 2, LossWeights::default()).unwrap();
        assert_eq!(b.total_value(&t), 0.0);

        let e6 = col(&mut t, &[2.0]);
        let mut terms = [None; 7];
        terms[5] = Some(e6);
        let b = total_loss(&mut t, terms, 1, 1, LossWeights::default()).unwrap();
        assert_eq!(b.total_value(&t), 4.0);

        let e1 = col(&mut t, &[1.0, 1.0]);
        let z = col(&mut t, &[0.0, 0.0]);
        let mut terms = [Some(z); 7];
        terms[0] = Some(e1);
        let b = total_loss(&mut t, terms, 2, 2, LossWeights::default()).unwrap();
        assert_eq!(b.total_value(&t), 1.0);

        let pm = col(&mut t, &[1.0, -1.0]);
        let mut terms = [None; 7];
        terms[6] = Some(pm);
        let b = total_loss(&mut t, terms, 2, 2, LossWeights::default()).unwrap();
        assert_eq!(b.mean_sq[6], 1.0);
    }

    #[test]
    fn supervised_terms_need_training_rows() {
        let mut t = Tape::new();
        let e = col(&mut t, &[0.0]);
        let mut terms = [None; 7];
        terms[5] = Some(e);
        assert!(matches!(
            total_loss(&mut t, terms, 1, 0, LossWeights::default()),
            Err(PhysicsError::Config(_))
        ));
    }

    #[test]
    fn theta_round_trip() {
        let v: Vec<f64> = (0..14).map(|i| i as f64 * 0.5).collect();
        let th = Theta::from_slice(&v).unwrap();
        assert_eq!(th.to_vec(), v);
        assert_eq!(th.species[1].rho, 6.5);
        assert!(Theta::from_slice(&v[..13]).is_none());
    }

    #[test]
    fn log_transform_inverts() {
        for c in [0.0, 0.5, 12.0, 300.0] {
            assert!((from_log(to_log(c)) - c).abs() < 1e-12);
        }
    }
}
