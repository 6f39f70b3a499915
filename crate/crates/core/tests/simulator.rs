use jpinn::simdata::{check_cfl, simulate, Boundary, FieldSet, GridSpec, SimError, SpeciesState};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(nx: usize, ny: usize, dt: f64, steps: usize, boundary: Boundary) -> GridSpec {
    GridSpec { nx, ny, dx: 1.0, dy: 1.0, dt, steps, boundary, save_every: steps.max(1) }
}

fn rough(g: &GridSpec, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((g.nx, g.ny), |_| rng.random_range(lo..hi))
}

fn rel_drift(a: [f64; 2], b: [f64; 2]) -> f64 {
    (0..2).map(|k| ((b[k] - a[k]) / a[k]).abs()).fold(0.0, f64::max)
}

/// Random wind and diffusion, no sources or losses, closed walls.
pub fn conservation_drift(steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid(20, 14, 0.1, steps, Boundary::ZeroFlux);
    let mut f = FieldSet::quiescent(&g);
    f.vx = rough(&g, -1.5, 1.5, &mut rng);
    f.vy = rough(&g, -1.5, 1.5, &mut rng);
    f.p = rough(&g, 0.0, 0.6, &mut rng);
    let init = SpeciesState { c: [rough(&g, 0.0, 5.0, &mut rng), rough(&g, 5.0, 10.0, &mut rng)] };
    let s = simulate(&g, &f, &init).unwrap();
    rel_drift(init.mass(&g), s.states.last().unwrap().mass(&g))
}

#[test]
fn closed_box_conserves_mass_over_1000_steps() {
    for seed in 0..3 {
        let d = conservation_drift(1000, seed);
        assert!(d < 1e-8, "seed {seed}: drift {d:e}");
    }
}

#[test]
fn periodic_box_conserves_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = grid(12, 12, 0.2, 500, Boundary::Periodic);
    let mut f = FieldSet::quiescent(&g);
    f.vx.fill(0.9);
    f.vy.fill(-0.4);
    f.p = rough(&g, 0.1, 0.5, &mut rng);
    let init = SpeciesState { c: [rough(&g, 0.0, 1.0, &mut rng), rough(&g, 1.0, 2.0, &mut rng)] };
    let s = simulate(&g, &f, &init).unwrap();
    assert!(rel_drift(init.mass(&g), s.states.last().unwrap().mass(&g)) < 1e-10);
}

/// Mass-weighted centroid and variance along x and y.
fn moments(c: &Array2<f64>) -> ([f64; 2], [f64; 2]) {
    let m = c.sum();
    let mut mean = [0.0; 2];
    for ((i, j), v) in c.indexed_iter() {
        mean[0] += i as f64 * v / m;
        mean[1] += j as f64 * v / m;
    }
    let mut var = [0.0; 2];
    for ((i, j), v) in c.indexed_iter() {
        var[0] += (i as f64 - mean[0]).powi(2) * v / m;
        var[1] += (j as f64 - mean[1]).powi(2) * v / m;
    }
    (mean, var)
}

fn point_release(g: &GridSpec) -> SpeciesState {
    let mut init = SpeciesState::uniform(g, 0.0, 0.0);
    init.c[0][(g.nx / 2, g.ny / 2)] = 1.0;
    init.c[1][(g.nx / 2, g.ny / 2)] = 1.0;
    init
}

/// Relative error of the variance growth of a point release against 2 p t.
pub fn gaussian_spread_error(p: f64, t: f64, dt: f64) -> f64 {
    let steps = (t / dt).round() as usize;
    let g = grid(81, 81, dt, steps, Boundary::ZeroFlux);
    let mut f = FieldSet::quiescent(&g);
    f.p.fill(p);
    let s = simulate(&g, &f, &point_release(&g)).unwrap();
    let (_, var) = moments(&s.states.last().unwrap().c[1]);
    let want = 2.0 * p * steps as f64 * dt;
    var.iter().map(|v| (v - want).abs() / want).fold(0.0, f64::max)
}

#[test]
fn gaussian_variance_grows_as_two_p_t() {
    for (p, t) in [(0.3, 20.0), (0.8, 10.0), (0.5, 30.0)] {
        let e = gaussian_spread_error(p, t, 0.25);
        assert!(e < 0.05, "p {p} t {t}: {e}");
    }
}

#[test]
fn uniform_wind_moves_the_centroid_at_wind_speed() {
    let g = grid(61, 61, 0.2, 100, Boundary::ZeroFlux);
    let mut f = FieldSet::quiescent(&g);
    f.vx.fill(0.5);
    f.vy.fill(-0.25);
    f.p.fill(0.1);
    let init = point_release(&g);
    let s = simulate(&g, &f, &init).unwrap();
    let (m0, _) = moments(&init.c[0]);
    let (m1, _) = moments(&s.states.last().unwrap().c[0]);
    // the far tail touches the downwind wall, hence not 1e-12
    assert!((m1[0] - m0[0] - 10.0).abs() < 1e-6, "{m0:?} {m1:?}");
    assert!((m1[1] - m0[1] + 5.0).abs() < 1e-6);
}

#[test]
fn smaller_time_steps_converge() {
    // variance growth is exact for the discrete scheme; the profile shape
    // converges as dt shrinks
    let run = |dt: f64| {
        let steps = (4.0 / dt).round() as usize;
        let g = grid(41, 41, dt, steps, Boundary::ZeroFlux);
        let mut f = FieldSet::quiescent(&g);
        f.p.fill(0.5);
        simulate(&g, &f, &point_release(&g)).unwrap().states.pop().unwrap().c[0].clone()
    };
    let fine = run(0.025);
    let mid = (&run(0.1) - &fine).mapv(f64::abs).sum();
    let coarse = (&run(0.4) - &fine).mapv(f64::abs).sum();
    assert!(mid < coarse / 2.0, "{mid} vs {coarse}");
}

#[test]
fn unstable_time_step_is_rejected() {
    let g = grid(8, 8, 0.9, 1, Boundary::ZeroFlux);
    let mut f = FieldSet::quiescent(&g);
    f.p.fill(1.0);
    match check_cfl(&g, &f) {
        Err(SimError::Cfl { ratio, limit, .. }) => assert!(ratio > limit),
        other => panic!("{other:?}"),
    }
}

fn chem_case(seed: u64) -> (GridSpec, FieldSet, SpeciesState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid(10, 9, 0.05, 200, Boundary::ZeroFlux);
    let mut f = FieldSet::quiescent(&g);
    f.vx = rough(&g, -2.0, 2.0, &mut rng);
    f.vy = rough(&g, -2.0, 2.0, &mut rng);
    f.p = rough(&g, 0.0, 1.0, &mut rng);
    let nox = rough(&g, 0.0, 20.0, &mut rng);
    let frac = rough(&g, 0.0, 1.0, &mut rng);
    f.source = [&nox * &frac, nox];
    f.decay = [rng.random_range(0.2..0.6), rng.random_range(0.0..0.2)];
    f.conversion = rng.random_range(0.0..0.5);
    let hi = rough(&g, 0.0, 10.0, &mut rng);
    let lo = &hi * &rough(&g, 0.0, 1.0, &mut rng);
    (g, f, SpeciesState { c: [lo, hi] })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stays_nonnegative_and_ordered(seed in any::<u64>()) {
        let (g, f, init) = chem_case(seed);
        let s = simulate(&g, &f, &init).unwrap();
        for st in &s.states {
            prop_assert!(st.is_ordered());
        }
    }

    #[test]
    fn source_free_mass_is_conserved(seed in any::<u64>()) {
        let (g, mut f, init) = chem_case(seed);
        f.source = [g.zeros(), g.zeros()];
        f.decay = [0.0; 2];
        f.conversion = 0.0;
        let s = simulate(&g, &f, &init).unwrap();
        prop_assert!(rel_drift(init.mass(&g), s.states.last().unwrap().mass(&g)) < 1e-10);
    }
}
