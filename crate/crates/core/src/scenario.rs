//! Synthetic ground truths, the event catalog and the measurement noise
//! model.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boundary::{BoundaryOps, BoundaryTrace};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, EventData, ForwardSettings, PrimalDualState};
use crate::grid::{integrate_slice, Region, SpaceTimeGrid};
use crate::inverse::MeasurementEvent;
use crate::kernel::{fit_background_mu, FrequencySet};
use crate::model::{MfgContext, ModelParams};
use crate::real::{lit, to_f64, Real};

pub const KAPPA_BACKGROUND: f64 = 2.0;
pub const BUMP_HEIGHT: f64 = 4.0;
pub const BUMP_WIDTH: f64 = 0.1;
pub const RING_RADIUS: f64 = 0.75;
pub const EVENT_WIDTH: f64 = 0.15;
pub const TARGET_WIDTH: f64 = 0.2;
/// Background kernel `K₀(d) = 0.2 exp(−|d|²/(2·0.4²))`.
pub const BACKGROUND_AMPLITUDE: f64 = 0.2;
pub const BACKGROUND_WIDTH: f64 = 0.4;

/// Closed-form description of one synthetic example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSpec {
    pub id: u8,
    pub bump_centers: Vec<[f64; 2]>,
    pub mu_s: Vec<f64>,
    pub omega_s: Vec<[f64; 2]>,
}

impl ExampleSpec {
    pub fn get(id: u8) -> Result<Self> {
        let spec = match id {
            1 => Self {
                id,
                bump_centers: vec![[0.25, 0.25]],
                mu_s: vec![0.2094, 0.2094, 0.2613, 0.2613],
                omega_s: vec![[PI, 0.0], [0.0, PI], [PI, PI], [-PI, PI]],
            },
            2 => Self {
                id,
                bump_centers: vec![[-0.25, 0.25], [0.25, -0.25]],
                mu_s: vec![0.3374, 0.3374, 0.2942, 0.2942],
                omega_s: vec![[PI, 0.0], [0.0, PI], [2.0 * PI, 0.0], [0.0, 2.0 * PI]],
            },
            3 => Self {
                id,
                bump_centers: vec![[0.25, 0.25], [0.25, -0.25]],
                mu_s: vec![0.2973; 4],
                omega_s: vec![[2.0 * PI, -PI], [2.0 * PI, PI], [PI, 2.0 * PI], [PI, -2.0 * PI]],
            },
            _ => return Err(Error::Config(format!("unknown example id {id}; expected 1, 2 or 3"))),
        };
        Ok(spec)
    }

    pub fn kappa_at(&self, x: f64, y: f64) -> f64 {
        let bumps: f64 = self
            .bump_centers
            .iter()
            .map(|c| (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (BUMP_WIDTH * BUMP_WIDTH)).exp())
            .sum();
        KAPPA_BACKGROUND + BUMP_HEIGHT * bumps
    }

    /// Signal coefficients placed on the lattice (reduced layout).
    pub fn signal_on_lattice<T: Real>(&self, freqs: &FrequencySet<T>) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); freqs.len()];
        for (m, w) in self.mu_s.iter().zip(&self.omega_s) {
            let idx = freqs
                .index_of([lit(w[0]), lit(w[1])])
                .ok_or_else(|| Error::Config(format!("frequency {w:?} is not on the lattice")))?;
            out[idx] += lit::<T>(*m);
        }
        Ok(out)
    }
}

/// Background kernel coefficients fitted on displacements `|d|_∞ ≤ 1`.
pub fn background_mu<T: Real>(grid: &SpaceTimeGrid<T>, freqs: &FrequencySet<T>) -> Result<Vec<T>> {
    let s2 = lit::<T>(2.0 * BACKGROUND_WIDTH * BACKGROUND_WIDTH);
    let amp = lit::<T>(BACKGROUND_AMPLITUDE);
    let fit = fit_background_mu(
        grid,
        freqs,
        |d| amp * (-(d[0] * d[0] + d[1] * d[1]) / s2).exp(),
        T::one(),
    )?;
    Ok(fit.mu)
}

/// Ground-truth parameters of an example; `μ_true = μ₀ + μ_s` entrywise on
/// the lattice.
pub fn example_params<T: Real>(ctx: &MfgContext<T>, spec: &ExampleSpec, nu: T) -> Result<ModelParams<T>> {
    let grid = &ctx.grid;
    let mu0 = background_mu(grid, &ctx.freqs)?;
    let signal = spec.signal_on_lattice(&ctx.freqs)?;
    let mu: Vec<T> = mu0.iter().zip(&signal).map(|(a, b)| *a + *b).collect();
    // The speed field is known on and outside the inner box boundary, so the
    // bump tails (up to ~1e-2 there) are cut off to keep the truth
    // consistent with it.
    let kappa = Array2::from_shape_fn(grid.spatial_shape(), |(i, j)| {
        if grid.inner.contains_open(i, j) {
            lit(spec.kappa_at(to_f64(grid.x(i)), to_f64(grid.y(j))))
        } else {
            lit(KAPPA_BACKGROUND)
        }
    });
    let k0 = ctx.features.normalising_offset(grid, &mu);
    Ok(ModelParams {
        kappa,
        mu,
        nu,
        k0,
        kappa0: Array2::from_elem(grid.spatial_shape(), lit(KAPPA_BACKGROUND)),
        mu0,
    })
}

/// Background parameters `(κ₀, μ₀)` the inversion starts from.
pub fn background_params<T: Real>(ctx: &MfgContext<T>, nu: T) -> Result<ModelParams<T>> {
    let mu0 = background_mu(&ctx.grid, &ctx.freqs)?;
    let k0 = ctx.features.normalising_offset(&ctx.grid, &mu0);
    let kappa0 = Array2::from_elem(ctx.grid.spatial_shape(), lit(KAPPA_BACKGROUND));
    Ok(ModelParams::background(kappa0, mu0, nu, k0))
}

/// Centres of the two Gaussians forming the initial density of event `i`.
pub fn event_centers(i: usize, count: usize) -> [[f64; 2]; 2] {
    let th = 2.0 * PI * i as f64 / count as f64;
    let th2 = th + PI / 4.0;
    [
        [RING_RADIUS * th.cos(), RING_RADIUS * th.sin()],
        [RING_RADIUS * th2.cos(), RING_RADIUS * th2.sin()],
    ]
}

/// Deterministic catalog of `count` events: initial density is the average
/// of two Gaussians on the outer ring, and the terminal cost is low around
/// the point opposite the first centre.
pub fn event_catalog<T: Real>(grid: &SpaceTimeGrid<T>, count: usize) -> Result<Vec<EventData<T>>> {
    (0..count).map(|i| catalog_event(grid, i, count)).collect()
}

pub fn catalog_event<T: Real>(grid: &SpaceTimeGrid<T>, i: usize, count: usize) -> Result<EventData<T>> {
    let [c1, c2] = event_centers(i, count);
    let s2 = 2.0 * EVENT_WIDTH * EVENT_WIDTH;
    let gauss = |x: f64, y: f64, c: [f64; 2]| (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / s2).exp();
    let floor = lit::<T>(1e-8);
    let mut rho0 = grid.sample(|x, y| {
        let (x, y) = (x.to_f64().unwrap_or(0.0), y.to_f64().unwrap_or(0.0));
        lit::<T>(0.5 * (gauss(x, y, c1) + gauss(x, y, c2)))
    });
    let mass = integrate_slice(grid, rho0.view(), Region::Full);
    rho0.mapv_inplace(|v| (v / mass).max(floor));
    let mass = integrate_slice(grid, rho0.view(), Region::Full);
    rho0.mapv_inplace(|v| v / mass);
    let xg = [-c1[0], -c1[1]];
    let t2 = TARGET_WIDTH * TARGET_WIDTH;
    let g = grid.sample(|x, y| {
        let (x, y) = (x.to_f64().unwrap_or(0.0), y.to_f64().unwrap_or(0.0));
        lit::<T>(1.0 - (-((x - xg[0]).powi(2) + (y - xg[1]).powi(2)) / t2).exp())
    });
    EventData::new(grid, rho0, g)
}

/// One generated measurement with its noise-free trace and the forward solve
/// that produced it.
#[derive(Clone, Debug)]
pub struct GeneratedEvent<T> {
    pub measurement: MeasurementEvent<T>,
    pub clean: BoundaryTrace<T>,
    pub iterations: usize,
    pub gap: T,
    pub mass_drift: T,
}

/// Measurements of `events` under `truth`: cold-start forward solves, their
/// boundary traces, then multiplicative noise of level `eps` (stream `i` of
/// `seed` for event `i`).
pub fn generate_measurements<T: Real>(
    ctx: &MfgContext<T>,
    ops: &BoundaryOps<T>,
    truth: &ModelParams<T>,
    events: &[EventData<T>],
    settings: &ForwardSettings<T>,
    eps: T,
    seed: u64,
) -> Result<Vec<GeneratedEvent<T>>> {
    events
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let sol = solve_forward(ctx, e, truth, PrimalDualState::cold_start(ctx, e), settings)?;
            if !sol.converged {
                return Err(Error::SolverFailed {
                    what: "forward solve for measurement generation",
                    residual: to_f64(sol.gap),
                    iterations: sol.iterations,
                });
            }
            let clean = ops.trace(&sol.state.rho, &sol.state.m);
            let noisy = add_noise(&clean, eps, seed, i);
            Ok(GeneratedEvent {
                measurement: MeasurementEvent {
                    data: e.clone(),
                    trace: noisy,
                },
                clean,
                iterations: sol.iterations,
                gap: sol.gap,
                mass_drift: sol.state.mass_drift(&ctx.grid),
            })
        })
        .collect()
}

/// Multiplicative noise `(1 + ε δ)` with `δ ~ U[−0.5, 0.5]` drawn
/// independently for every density and flux sample.
pub fn add_noise<T: Real>(trace: &BoundaryTrace<T>, eps: T, seed: u64, event: usize) -> BoundaryTrace<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(event as u64);
    let mut out = trace.clone();
    if eps == T::zero() {
        return out;
    }
    let half = lit::<T>(0.5);
    for v in out.rho.iter_mut() {
        let d: T = lit(rng.gen::<f64>());
        *v *= T::one() + eps * (d - half);
    }
    for v in out.flux.iter_mut() {
        let d: T = lit(rng.gen::<f64>());
        *v *= T::one() + eps * (d - half);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SpaceTimeGrid<f64> {
        SpaceTimeGrid::standard()
    }

    #[test]
    fn example_one_peak_and_boundary_values() {
        let s = ExampleSpec::get(1).unwrap();
        assert_eq!(s.kappa_at(0.25, 0.25), 6.0);
        assert!(s.kappa_at(1.0, 1.0) - 2.0 < 1e-20);
        let g = grid();
        let k = g.sample(|x, y| s.kappa_at(x, y));
        let max = k.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 6.0).abs() < 1e-12);
    }

    #[test]
    fn example_two_bump_value_and_outside_background() {
        let s = ExampleSpec::get(2).unwrap();
        let v = s.kappa_at(-0.25, 0.25);
        assert!((v - 6.0).abs() < 1e-10);
        let ctx = MfgContext::new(grid(), FrequencySet::lattice(2, 2));
        let p = example_params(&ctx, &s, 0.1).unwrap();
        let g = &ctx.grid;
        for i in 0..g.nx {
            for j in 0..g.ny {
                if !g.inner.contains_open(i, j) {
                    assert_eq!(p.kappa[[i, j]], 2.0);
                }
            }
        }
        // the bump tail at the box edge is far from negligible
        assert!(s.kappa_at(-0.5, 0.25) - 2.0 > 1e-3);
        assert!(ExampleSpec::get(4).is_err());
    }

    #[test]
    fn signals_are_on_lattice() {
        let f = FrequencySet::<f64>::lattice(2, 2);
        for id in 1..=3 {
            let s = ExampleSpec::get(id).unwrap();
            let on = s.signal_on_lattice(&f).unwrap();
            let total: f64 = on.iter().sum();
            let want: f64 = s.mu_s.iter().sum();
            assert!((total - want).abs() < 1e-12);
            assert_eq!(on.iter().filter(|v| **v != 0.0).count(), 4);
        }
    }

    #[test]
    fn event_centres_lie_outside_inner_box() {
        for i in 0..16 {
            for c in event_centers(i, 16) {
                assert!(c[0].abs().max(c[1].abs()) > 0.5);
            }
        }
    }

    #[test]
    fn catalog_is_normalised_and_deterministic() {
        let g = grid();
        let a = event_catalog(&g, 16).unwrap();
        let b = event_catalog(&g, 16).unwrap();
        assert_eq!(a, b);
        for e in &a {
            let m = integrate_slice(&g, e.rho0.view(), Region::Full);
            assert!((m - 1.0).abs() < 1e-10);
            assert!(e.rho0.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn noise_bounds_and_identity() {
        let trace = BoundaryTrace {
            rho: Array2::from_elem((26, 80), 0.7f64),
            flux: Array2::from_elem((26, 80), -0.3),
        };
        assert_eq!(add_noise(&trace, 0.0, 1, 0), trace);
        let n = add_noise(&trace, 0.1, 1, 0);
        for (a, b) in n.rho.iter().zip(trace.rho.iter()) {
            assert!((a / b - 1.0f64).abs() <= 0.05 + 1e-15);
        }
        for (a, b) in n.flux.iter().zip(trace.flux.iter()) {
            assert!((a / b - 1.0f64).abs() <= 0.05 + 1e-15);
        }
        assert_eq!(n, add_noise(&trace, 0.1, 1, 0));
        assert_ne!(n, add_noise(&trace, 0.1, 1, 1));
    }

    #[test]
    fn uniform_draws_are_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mean: f64 = (0..100_000).map(|_| rng.gen::<f64>() - 0.5).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.005);
    }
}
