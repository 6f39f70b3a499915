//! Verification harnesses: finite-difference checks of network input
//! derivatives and manufactured solutions of the log-space PDE residual.

use ndarray::{Array2, Axis};

use crate::autodiff::{AutodiffError, Mat, Tape, Var};
use crate::nets::{Activation, NetError, Network};
use crate::physics::{input_derivatives, pde_residual, CoordScales, PhysicsError, SpeciesTheta, ThetaVars};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Largest scaled error of the first derivatives.
    pub first: f64,
    /// Largest scaled error of the diagonal second derivatives.
    pub second: f64,
    pub checked: usize,
    /// Second-derivative comparisons skipped because the stencil crossed
    /// an elu/relu kink, where the second derivative jumps.
    pub skipped_kinks: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn scaled_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Per output, per input column: an `n x 1` derivative.
pub type DerivativeTable = Vec<Vec<Mat>>;

/// Autodiff first and diagonal second derivatives of every output of `net`
/// with respect to every input column, `[output][input]` of `n x 1`.
pub fn autodiff_input_derivatives(net: &Network, x: &Mat) -> Result<(DerivativeTable, DerivativeTable), VerifyError> {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape, false);
    let input = tape.variable(x.clone());
    let out = net.forward(&mut tape, &p, input)?;
    let w = x.ncols();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for j in 0..net.output_width() {
        let col = tape.column(out, j);
        let g = tape.grad(col, &[input])?.grads[0];
        let mut f = Vec::with_capacity(w);
        let mut s = Vec::with_capacity(w);
        for d in 0..w {
            let gd = tape.column(g, d);
            f.push(tape.value(gd).clone());
            let h = tape.grad(gd, &[input])?.grads[0];
            let hd = tape.column(h, d);
            s.push(tape.value(hd).clone());
        }
        first.push(f);
        second.push(s);
    }
    Ok((first, second))
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Sign pattern of every piecewise (elu/relu) hidden unit, per row.
fn kink_signs(net: &Network, x: &Mat) -> Result<Vec<Vec<bool>>, NetError> {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape, false);
    let input = tape.constant(x.clone());
    let tr = net.forward_trace(&mut tape, &p, input)?;
    let acts = &net.topology().activations;
    let mut signs = vec![Vec::new(); x.nrows()];
    for (layer, act) in tr.encoder.iter().chain(&tr.decoder).zip(acts) {
        if !matches!(act, Activation::Elu | Activation::Relu) {
            continue;
        }
        for (i, row) in tape.value(*layer).rows().into_iter().enumerate() {
            signs[i].extend(row.iter().map(|v| *v > 0.0));
        }
    }
    Ok(signs)
}

/// Compare autodiff input derivatives against central differences with
/// steps `h1` (first) and `h2` (second).
pub fn fd_check(net: &Network, x: &Mat, h1: f64, h2: f64, floor: f64) -> Result<FdReport, VerifyError> {
    let (ad1, ad2) = autodiff_input_derivatives(net, x)?;
    let f0 = net.predict(x)?;
    let mut report = FdReport { first: 0.0, second: 0.0, checked: 0, skipped_kinks: 0 };
    let s0 = kink_signs(net, x)?;
    for d in 0..x.ncols() {
        let shifted = |h: f64| -> Result<Mat, NetError> {
            let mut xs = x.clone();
            xs.column_mut(d).mapv_inplace(|v| v + h);
            net.predict(&xs)
        };
        let (p1, m1) = (shifted(h1)?, shifted(-h1)?);
        let (p2, m2) = (shifted(h2)?, shifted(-h2)?);
        let mut smooth = vec![true; x.nrows()];
        for h in [h2, -h2] {
            let mut xs = x.clone();
            xs.column_mut(d).mapv_inplace(|v| v + h);
            for (i, s) in kink_signs(net, &xs)?.iter().enumerate() {
                smooth[i] &= *s == s0[i];
            }
        }
        for j in 0..f0.ncols() {
            for i in 0..x.nrows() {
                let fd1 = (p1[(i, j)] - m1[(i, j)]) / (2.0 * h1);
                let fd2 = (p2[(i, j)] - 2.0 * f0[(i, j)] + m2[(i, j)]) / (h2 * h2);
                report.first = report.first.max(scaled_error(ad1[j][d][(i, 0)], fd1, floor));
                if smooth[i] {
                    report.second = report.second.max(scaled_error(ad2[j][d][(i, 0)], fd2, floor));
                } else {
                    report.skipped_kinks += 1;
                }
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Manufactured solutions

/// A log-concentration field written with tape operations on the physical
/// coordinates (columns t, x, y, z), and the coefficients that make it an
/// exact solution.
pub struct Manufactured {
    pub name: &'static str,
    pub theta: SpeciesTheta,
    pub use_z: bool,
    pub scales: CoordScales,
    /// Physical coordinate ranges sampled, per column.
    pub domain: [(f64, f64); 4],
    pub field: fn(&mut Tape, [Var; 4]) -> Result<Var, AutodiffError>,
}

/// -(u - v t)^2 / (4 p t) - ln(4 pi p t) / 2: a spreading Gaussian in log form.
fn log_gaussian(tape: &mut Tape, t: Var, u: Var, v: f64, p: f64) -> Result<Var, AutodiffError> {
    let vt = tape.scale(t, v);
    let du = tape.sub(u, vt);
    let num = tape.square(du);
    let inv_t = tape.powf(t, -1.0);
    let q = tape.mul(num, inv_t);
    let a = tape.scale(q, -1.0 / (4.0 * p));
    let four_pt = tape.scale(t, 4.0 * std::f64::consts::PI * p);
    let l = tape.log(four_pt)?;
    let b = tape.scale(l, -0.5);
    Ok(tape.add(a, b))
}

const GAUSS_P: f64 = 0.4;
const WAVE_V: f64 = 1.3;
const AD_V: [f64; 3] = [0.6, -0.35, 0.2];
const AD_P: [f64; 3] = [0.3, 0.5, 0.15];
const AD_RHO: f64 = -0.25;
const Z_SLOPE: f64 = 0.7;

/// Five exact cases: constant, traveling wave, pure diffusion, and two
/// mixed advection-diffusion-reaction fields (the last with coordinate
/// scaling and a z dependence).
pub fn manufactured_cases() -> Vec<Manufactured> {
    let unit = CoordScales::default();
    let dom = [(0.5, 3.0), (-2.0, 2.0), (-2.0, 2.0), (0.0, 1.0)];
    vec![
        Manufactured {
            name: "constant",
            theta: SpeciesTheta { v: [0.4, -0.2, 0.1], p: [0.3, 0.2, 0.1], rho: 0.0 },
            use_z: true,
            scales: unit,
            domain: dom,
            field: |tape, c| {
                let z = tape.scale(c[1], 0.0);
                Ok(tape.shift(z, 1.7))
            },
        },
        Manufactured {
            name: "traveling-wave",
            theta: SpeciesTheta { v: [WAVE_V, 0.0, 0.0], p: [0.0; 3], rho: 0.0 },
            use_z: true,
            scales: unit,
            domain: dom,
            field: |tape, c| {
                let vt = tape.scale(c[0], WAVE_V);
                let u = tape.sub(c[1], vt);
                let w = tape.tanh(u);
                Ok(tape.shift(w, 0.5))
            },
        },
        Manufactured {
            name: "pure-diffusion-gaussian",
            theta: SpeciesTheta { v: [0.0; 3], p: [GAUSS_P, 0.0, 0.0], rho: 0.0 },
            use_z: false,
            scales: unit,
            domain: dom,
            field: |tape, c| log_gaussian(tape, c[0], c[1], 0.0, GAUSS_P),
        },
        Manufactured {
            name: "advected-gaussian-2d",
            theta: SpeciesTheta { v: [AD_V[0], AD_V[1], 0.0], p: [AD_P[0], AD_P[1], 0.0], rho: AD_RHO },
            use_z: false,
            scales: unit,
            domain: dom,
            field: |tape, c| {
                let gx = log_gaussian(tape, c[0], c[1], AD_V[0], AD_P[0])?;
                let gy = log_gaussian(tape, c[0], c[2], AD_V[1], AD_P[1])?;
                let g = tape.add(gx, gy);
                let r = tape.scale(c[0], AD_RHO);
                Ok(tape.add(g, r))
            },
        },
        Manufactured {
            name: "advected-gaussian-3d-scaled",
            theta: SpeciesTheta {
                v: AD_V,
                p: AD_P,
                rho: AD_RHO + AD_V[2] * Z_SLOPE - AD_P[2] * Z_SLOPE * Z_SLOPE,
            },
            use_z: true,
            scales: CoordScales { t: 2.5, space: [3.0, 0.5, 1.7] },
            domain: [(1.0, 8.0), (-5.0, 5.0), (-1.0, 1.0), (0.0, 2.0)],
            field: |tape, c| {
                let gx = log_gaussian(tape, c[0], c[1], AD_V[0], AD_P[0])?;
                let gy = log_gaussian(tape, c[0], c[2], AD_V[1], AD_P[1])?;
                let g = tape.add(gx, gy);
                let r = tape.scale(c[0], AD_RHO);
                let g = tape.add(g, r);
                let z = tape.scale(c[3], Z_SLOPE);
                Ok(tape.add(g, z))
            },
        },
    ]
}

/// Largest |residual| of `case` over `points` (physical coordinates, `n x 4`).
/// The field is differentiated through the tape with respect to scaled
/// inputs, as in training.
pub fn manufactured_residual(case: &Manufactured, points: &Mat) -> Result<f64, PhysicsError> {
    let mut tape = Tape::new();
    let s = case.scales;
    let scale = [s.t, s.space[0], s.space[1], s.space[2]];
    let mut u = points.clone();
    for (k, mut c) in u.axis_iter_mut(Axis(1)).enumerate() {
        c.mapv_inplace(|v| v / scale[k]);
    }
    let inputs = tape.variable(u);
    let mut phys = [inputs; 4];
    for (k, p) in phys.iter_mut().enumerate() {
        let c = tape.column(inputs, k);
        *p = tape.scale(c, scale[k]);
    }
    let y = (case.field)(&mut tape, phys)?;
    let d = input_derivatives(&mut tape, y, inputs, s, case.use_z)?;
    let th = ThetaVars::constant(&mut tape, &case.theta, points.nrows());
    let e = pde_residual(&mut tape, &th, &d, case.use_z)?;
    Ok(tape.value(e).iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Evenly spread sample points inside `domain` (a deterministic lattice
/// walk, `n x 4`).
pub fn domain_points(domain: &[(f64, f64); 4], n: usize) -> Mat {
    // additive recurrence with irrational steps
    let steps = [0.618_033_988_75, 0.754_877_666_25, 0.569_840_290_99, 0.438_289_325_26];
    Array2::from_shape_fn((n, 4), |(i, k)| {
        let f = ((i as f64 + 0.5) * steps[k]).fract();
        domain[k].0 + f * (domain[k].1 - domain[k].0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_error_floor() {
        assert_eq!(scaled_error(1.0, 1.0, 1e-3), 0.0);
        assert!((scaled_error(0.0, 1e-6, 1e-2) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn wrong_coefficients_leave_a_residual() {
        let mut case = manufactured_cases().swap_remove(1);
        case.theta.v[0] += 0.1;
        let pts = domain_points(&case.domain, 20);
        assert!(manufactured_residual(&case, &pts).unwrap() > 1e-3);
    }
}
