//! Diagnostics run by `mfginv verify`: dataset integrity plus the numerical
//! identities the solvers rely on, each against an independent route.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfg_inverse::adjoint::{hessian_block, resolvent};
use mfg_inverse::boundary::BoundaryOps;
use mfg_inverse::forward::{prox_a, prox_node, StepSizes};
use mfg_inverse::grid::{
    backward_time_derivative, divergence, gradient, inner_slice, integrate_slice, time_derivative, Region,
};
use mfg_inverse::kernel::{kernel_value, zeta, FrequencySet};
use mfg_inverse::model::{MfgContext, ModelParams};
use mfg_inverse::{Grid, Result};

use crate::config::RunConfig;
use crate::formats::{event_path, read_dataset_manifest, read_event, read_trace, trace_path};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, err: f64, tol: f64) -> Check {
    Check {
        name,
        passed: err <= tol,
        detail: format!("max error {err:.2e} (tolerance {tol:.0e})"),
    }
}

/// Loads every file of the dataset in `dir` and runs the oracle suite on
/// its grid. File-level problems are returned as errors.
pub fn verify_dataset(dir: &Path) -> Result<Vec<Check>> {
    let manifest = read_dataset_manifest(dir)?;
    let cfg = &manifest.config;
    let grid = cfg.grid()?;
    let ops = BoundaryOps::new(&grid)?;
    let mut checks = vec![Check {
        name: "grid hash",
        passed: cfg.grid_hash() == manifest.grid_hash,
        detail: format!("manifest {}", &manifest.grid_hash[..12.min(manifest.grid_hash.len())]),
    }];

    let mut mass_err = 0.0f64;
    for i in 0..manifest.events {
        let (index, event) = read_event(&event_path(dir, i), &grid)?;
        if index != i {
            return Err(mfg_inverse::Error::Schema {
                file: event_path(dir, i),
                line: 1,
                message: format!("event index {index}, expected {i}"),
            });
        }
        mass_err = mass_err.max((integrate_slice(&grid, event.rho0.view(), Region::Full) - 1.0).abs());
        read_trace(&trace_path(dir, i), grid.nt, ops.len())?;
    }
    checks.push(check("event masses", mass_err, 1e-10));

    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    checks.push(kernel_identity(&mut rng));
    checks.push(gradient_divergence(&grid, &mut rng));
    checks.push(time_derivative_adjoint(&grid, &mut rng));
    checks.push(neumann_adjoint(&grid, &ops, &mut rng)?);
    checks.push(dirichlet_harmonic(&grid, &ops, &mut rng)?);
    checks.push(resolvent_dense(&mut rng));
    checks.push(prox_density_flux(&mut rng));
    checks.push(prox_interaction(cfg, &grid, &mut rng)?);
    Ok(checks)
}

fn kernel_identity(rng: &mut ChaCha8Rng) -> Check {
    let mut err = 0.0f64;
    for _ in 0..1000 {
        let w = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        let freqs = match FrequencySet::new(vec![w]) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let mu = [rng.gen_range(-1.0..1.0)];
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let zx = zeta(x, &mu, &freqs).expect("one coefficient per frequency");
        let zy = zeta(y, &mu, &freqs).expect("one coefficient per frequency");
        let lhs: f64 = zx.iter().zip(&zy).map(|(a, b)| a * b).sum();
        err = err.max((lhs - kernel_value([x[0] - y[0], x[1] - y[1]], &mu, &freqs)).abs());
    }
    check("kernel identity", err, 1e-12)
}

fn random_slice(grid: &Grid, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(grid.spatial_shape(), |_| rng.gen_range(-1.0..1.0))
}

fn gradient_divergence(grid: &Grid, rng: &mut ChaCha8Rng) -> Check {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let f = random_slice(grid, rng);
        let mut vx = random_slice(grid, rng);
        let mut vy = random_slice(grid, rng);
        vx.slice_mut(s![0, ..]).fill(0.0);
        vx.slice_mut(s![grid.nx - 1, ..]).fill(0.0);
        vy.slice_mut(s![.., 0]).fill(0.0);
        vy.slice_mut(s![.., grid.ny - 1]).fill(0.0);
        let (gx, gy) = gradient(grid, f.view());
        let d = divergence(grid, vx.view(), vy.view());
        let lhs = inner_slice(grid, gx.view(), vx.view()) + inner_slice(grid, gy.view(), vy.view());
        err = err.max((lhs + inner_slice(grid, f.view(), d.view())).abs());
    }
    check("gradient/divergence adjoint", err, 1e-8)
}

fn time_derivative_adjoint(grid: &Grid, rng: &mut ChaCha8Rng) -> Check {
    let n = grid.nt - 1;
    let mut err = 0.0f64;
    for _ in 0..100 {
        let f = Array3::from_shape_fn(grid.shape(), |_| rng.gen_range(-1.0..1.0));
        let h = Array3::from_shape_fn(grid.shape(), |_| rng.gen_range(-1.0..1.0));
        let (df, dh) = (time_derivative(grid, &f), backward_time_derivative(grid, &h));
        let slice =
            |a: &Array3<f64>, b: &Array3<f64>, k| inner_slice(grid, a.index_axis(Axis(0), k), b.index_axis(Axis(0), k));
        let lhs: f64 = (0..n).map(|k| grid.dt * slice(&df, &h, k)).sum();
        let rhs: f64 = -(1..=n).map(|k| grid.dt * slice(&f, &dh, k)).sum::<f64>() + slice(&f, &h, n) - slice(&f, &h, 0);
        err = err.max((lhs - rhs).abs());
    }
    check("time derivative adjoint", err, 1e-8)
}

fn neumann_adjoint(grid: &Grid, ops: &BoundaryOps<f64>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let mut f: Array1<f64> = (0..ops.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = f.mean().unwrap_or(0.0);
        f -= mean;
        let v = random_slice(grid, rng);
        let (xi, _, _) = ops.neumann_extend_slice(f.view())?;
        let vb: Array1<f64> = ops.nodes().iter().map(|n| v[[n.i, n.j]]).collect();
        let rhs = ops.pairing(f.view(), vb.view());
        err = err.max((ops.inner_energy(xi.view(), v.view()) - rhs).abs() / (1.0 + rhs.abs()));
    }
    Ok(check("trace/extension adjoint", err, 1e-8))
}

fn dirichlet_harmonic(grid: &Grid, ops: &BoundaryOps<f64>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let u: Array1<f64> = (0..ops.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eu = ops.dirichlet_extend_slice(u.view())?;
        let mut v0 = random_slice(grid, rng);
        for n in ops.nodes() {
            v0[[n.i, n.j]] = 0.0;
        }
        err = err.max(ops.inner_energy(eu.view(), v0.view()).abs());
    }
    Ok(check("Dirichlet extension harmonic", err, 1e-8))
}

fn resolvent_dense(rng: &mut ChaCha8Rng) -> Check {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let kappa: f64 = rng.gen_range(0.5..6.0);
        let rho: f64 = rng.gen_range(1e-3..2.0);
        let m = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let alpha = rng.gen_range(0.0..20.0);
        let r = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let h = hessian_block(kappa, rho, m);
        let a = Matrix3::from_fn(|p, q| if p == q { 1.0 } else { 0.0 } + alpha * rho * h[p][q]);
        let Some(oracle) = a.lu().solve(&Vector3::from(r)) else {
            err = f64::INFINITY;
            continue;
        };
        let Some(x) = resolvent(kappa, rho, m, alpha, r) else {
            err = f64::INFINITY;
            continue;
        };
        for c in 0..3 {
            err = err.max((x[c] - oracle[c]).abs() / (1.0 + oracle[c].abs()));
        }
    }
    check("adjoint resolvent vs dense solve", err, 1e-12)
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-12 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Brute force over `ρ` with the flux minimised in closed form for each `ρ`.
fn prox_density_flux(rng: &mut ChaCha8Rng) -> Check {
    let mut err = 0.0f64;
    for _ in 0..50 {
        let rho_prev = rng.gen_range(0.0..2.0);
        let m_prev = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let c = rng.gen_range(-3.0..12.0);
        let b = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let kappa = rng.gen_range(0.5..6.0);
        let (ar, am) = (rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0));
        let best_m = |r: f64| {
            if r <= 0.0 {
                return [0.0, 0.0];
            }
            let d = 1.0 / (kappa * r) + 1.0 / am;
            [(m_prev[0] / am - b[0]) / d, (m_prev[1] / am - b[1]) / d]
        };
        let objective = |r: f64| {
            let m = best_m(r);
            let kinetic = if r > 0.0 {
                (m[0] * m[0] + m[1] * m[1]) / (2.0 * kappa * r)
            } else {
                0.0
            };
            c * r
                + b[0] * m[0]
                + b[1] * m[1]
                + kinetic
                + (r - rho_prev).powi(2) / (2.0 * ar)
                + ((m[0] - m_prev[0]).powi(2) + (m[1] - m_prev[1]).powi(2)) / (2.0 * am)
        };
        let r = golden_min(objective, 0.0, rho_prev + ar * c.abs() + 10.0);
        let r = if objective(0.0) <= objective(r) { 0.0 } else { r };
        let mo = best_m(r);
        let Some((rp, mp)) = prox_node(rho_prev, m_prev, c, b, kappa, ar, am) else {
            err = f64::INFINITY;
            continue;
        };
        err = err
            .max((rp - r).abs())
            .max((mp[0] - mo[0]).abs())
            .max((mp[1] - mo[1]).abs());
    }
    check("density/flux prox vs brute force", err, 1e-6)
}

/// Each component of the closed-form step minimises its scalar quadratic.
fn prox_interaction(cfg: &RunConfig, grid: &Grid, rng: &mut ChaCha8Rng) -> Result<Check> {
    let freqs = FrequencySet::lattice(cfg.model.k1_max, cfg.model.k2_max);
    let ctx = MfgContext::new(grid.clone(), freqs);
    let nf = ctx.features.features();
    let mu: Vec<f64> = (0..ctx.freqs.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let kappa = Array2::from_elem(grid.spatial_shape(), 2.0);
    let params = ModelParams::background(kappa, mu.clone(), cfg.model.nu, 0.0);
    let rho = Array3::from_shape_fn(grid.shape(), |_| rng.gen_range(0.0..2.0));
    let a = Array2::from_shape_fn((grid.nt, nf), |_| rng.gen_range(-1.0..1.0));
    let steps = StepSizes {
        alpha_a: rng.gen_range(0.1..2.0),
        ..StepSizes::default()
    };
    let out = prox_a(&ctx, &a, &rho, &params, &steps);
    let mut err = 0.0f64;
    for k in 1..grid.nt.min(6) {
        let field = ctx.features.interaction_field(grid, rho.index_axis(Axis(0), k), &mu);
        for f in 0..nf {
            // ½ x² − x·s + (x − aⁿ)²/(2α_a)
            let obj = |x: f64| 0.5 * x * x - x * field[f] + (x - a[[k, f]]).powi(2) / (2.0 * steps.alpha_a);
            let span = 10.0 + field[f].abs() + a[[k, f]].abs();
            err = err.max((golden_min(obj, -span, span) - out[[k, f]]).abs());
        }
    }
    Ok(check("interaction prox vs scalar minimisation", err, 1e-6))
}
