use ndarray::Array2;

use mfg_inverse::adjoint::{update_adjoint, AdjointState};
use mfg_inverse::boundary::BoundaryOps;
use mfg_inverse::forward::{primal_dual_gap, solve_forward, ForwardSettings, PrimalDualState};
use mfg_inverse::inverse::{residual, run_inversion, InversionConfig, MeasurementEvent};
use mfg_inverse::kernel::FrequencySet;
use mfg_inverse::model::{MfgContext, ModelParams};
use mfg_inverse::params::{
    lambda_kappa, lambda_mu, update_kappa, update_mu, InverseSettings, SplittingState, Stabilizers,
};
use mfg_inverse::scenario::{catalog_event, generate_measurements};
use mfg_inverse::{Error, Grid};

fn ctx() -> MfgContext<f64> {
    let grid = Grid::new([-1.0, 1.0, -1.0, 1.0], 0.25, 0.4, 0.1, [-0.5, 0.5, -0.5, 0.5]).unwrap();
    MfgContext::new(grid, FrequencySet::lattice(1, 1))
}

fn background(ctx: &MfgContext<f64>) -> ModelParams<f64> {
    let kappa0 = Array2::from_elem(ctx.grid.spatial_shape(), 2.0);
    ModelParams::background(kappa0, vec![0.2, 0.1, 0.05, 0.05], 0.1, 0.0)
}

fn truth(ctx: &MfgContext<f64>) -> ModelParams<f64> {
    let mut p = background(ctx);
    p.kappa[[4, 4]] = 3.0;
    p.kappa[[5, 4]] = 2.5;
    p.mu[1] += 0.2;
    p
}

fn forward_settings() -> ForwardSettings<f64> {
    ForwardSettings {
        e_tol: 1e-4,
        max_iter: 20_000,
        ..ForwardSettings::default()
    }
}

/// A mask reaching into the small box so that the speed can move.
fn settings() -> InverseSettings<f64> {
    InverseSettings {
        mask_zero_cells: 0.0,
        mask_one_cells: 1.0,
        psi_sigma_cells: 0.5,
        psi_radius: 1,
        ..InverseSettings::default()
    }
}

fn config(n_max: usize) -> InversionConfig<f64> {
    InversionConfig {
        n_max,
        forward: forward_settings(),
        inverse: settings(),
        checkpoint_stride: 2,
        max_flagged: 3,
    }
}

fn measurements(
    ctx: &MfgContext<f64>,
    ops: &BoundaryOps<f64>,
    p: &ModelParams<f64>,
    eps: f64,
) -> Vec<MeasurementEvent<f64>> {
    let events: Vec<_> = (0..2).map(|i| catalog_event(&ctx.grid, i, 2).unwrap()).collect();
    generate_measurements(ctx, ops, p, &events, &forward_settings(), eps, 11)
        .unwrap()
        .into_iter()
        .map(|g| g.measurement)
        .collect()
}

#[test]
fn consistent_data_is_a_fixed_point() {
    let ctx = ctx();
    let ops = BoundaryOps::new(&ctx.grid).unwrap();
    let init = background(&ctx);
    let events = measurements(&ctx, &ops, &init, 0.0);
    let r = run_inversion(&ctx, &ops, &events, &init, &config(5), |_| {}).unwrap();
    assert_eq!(r.res_history.len(), 6);
    for rec in &r.res_history {
        assert!(rec.res < 1e-10, "Res {} at n = {}", rec.res, rec.n);
    }
    let dk = r
        .params_last
        .kappa
        .iter()
        .zip(init.kappa.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(dk < 1e-8, "speed moved by {dk}");
    assert_eq!(r.params_last.mu, init.mu);
}

#[test]
fn one_iteration_is_one_composed_sweep() {
    let ctx = ctx();
    let ops = BoundaryOps::new(&ctx.grid).unwrap();
    let init = background(&ctx);
    let events = measurements(&ctx, &ops, &truth(&ctx), 0.05);
    // Without sparsity thresholds the first step cannot be absorbed.
    let mut cfg = config(1);
    cfg.inverse.gamma_kappa = 0.0;
    cfg.inverse.gamma_mu = 0.0;
    let r = run_inversion(&ctx, &ops, &events, &init, &cfg, |_| {}).unwrap();

    // Same sweep by hand, event by event.
    let fs = forward_settings();
    let states: Vec<_> = events
        .iter()
        .map(|e| {
            solve_forward(&ctx, &e.data, &init, PrimalDualState::cold_start(&ctx, &e.data), &fs)
                .unwrap()
                .state
        })
        .collect();
    let res0 = residual(&ctx, &ops, &events, &states);
    assert_eq!(r.res_history[0].res, res0);
    let mut gk = ctx.grid.spatial_zeros();
    let mut gm = vec![0.0; ctx.features.features()];
    for (e, s) in events.iter().zip(&states) {
        let mismatch = ops.trace(&s.rho, &s.m).minus(&e.trace);
        let ext = ops.extend(&mismatch).unwrap();
        let adj = update_adjoint(
            &AdjointState::zeros(&ctx.grid, cfg.inverse.alpha_lambda),
            &s.rho,
            &s.m,
            &init,
            &ext,
        )
        .unwrap();
        gk += &lambda_kappa(&ctx.grid, &init, s, &adj);
        for (a, b) in gm.iter_mut().zip(lambda_mu(&ctx, &adj.lambda_rho, &s.a)) {
            *a += b;
        }
    }
    let split = SplittingState::new(&init);
    let stab = Stabilizers::new(&ctx.grid, &cfg.inverse);
    let (kappa, _) = update_kappa(&ctx.grid, &init, &split, &gk, &stab, &cfg.inverse);
    let (mu, _) = update_mu(&init, &split, &gm, &cfg.inverse);
    assert_eq!(r.params_last.kappa, kappa);
    assert_eq!(r.params_last.mu, mu);
    assert!(kappa != init.kappa || mu != init.mu, "the sweep must move something");

    let mut next = init.clone();
    next.kappa = kappa;
    next.mu = mu;
    let resolved: Vec<_> = events
        .iter()
        .zip(states)
        .map(|(e, s)| {
            if primal_dual_gap(&ctx, &s, &next).unwrap() < fs.e_tol {
                s
            } else {
                solve_forward(&ctx, &e.data, &next, s, &fs).unwrap().state
            }
        })
        .collect();
    assert_eq!(r.res_history[1].res, residual(&ctx, &ops, &events, &resolved));
}

#[test]
fn best_iterate_checkpoints_and_determinism() {
    let ctx = ctx();
    let ops = BoundaryOps::new(&ctx.grid).unwrap();
    let init = background(&ctx);
    let events = measurements(&ctx, &ops, &truth(&ctx), 0.1);
    let mut seen = Vec::new();
    let a = run_inversion(&ctx, &ops, &events, &init, &config(7), |rec| seen.push(rec.n)).unwrap();
    assert_eq!(seen, (0..=7).collect::<Vec<_>>());
    let min = a.res_history.iter().map(|r| r.res).fold(f64::INFINITY, f64::min);
    assert_eq!(a.res_history[a.n_opt].res, min);
    let ns: Vec<usize> = a.checkpoints.iter().map(|c| c.n).collect();
    for n in [0, 2, 4, 6, a.n_opt] {
        assert!(ns.contains(&n), "checkpoint {n} missing from {ns:?}");
    }
    let opt = a.checkpoints.iter().find(|c| c.n == a.n_opt).unwrap();
    assert_eq!(opt.kappa, a.params_opt.kappa);
    assert_eq!(opt.mu, a.params_opt.mu);
    assert!(a.params_opt.kappa.iter().all(|k| *k >= settings().eps1));

    let b = run_inversion(&ctx, &ops, &events, &init, &config(7), |_| {}).unwrap();
    assert_eq!(a.res_history, b.res_history);
    assert_eq!(a.params_last, b.params_last);
}

#[test]
fn residual_is_quadratic_in_the_mismatch() {
    let ctx = ctx();
    let ops = BoundaryOps::new(&ctx.grid).unwrap();
    let p = background(&ctx);
    let events = measurements(&ctx, &ops, &p, 0.0);
    let fs = forward_settings();
    let states: Vec<_> = events
        .iter()
        .map(|e| {
            solve_forward(&ctx, &e.data, &p, PrimalDualState::cold_start(&ctx, &e.data), &fs)
                .unwrap()
                .state
        })
        .collect();
    assert_eq!(residual(&ctx, &ops, &events, &states), 0.0);
    let shifted = |delta: f64| -> Vec<MeasurementEvent<f64>> {
        events
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.trace.rho.mapv_inplace(|v| v + delta);
                e.trace.flux.mapv_inplace(|v| v - 0.5 * delta);
                e
            })
            .collect()
    };
    let r1 = residual(&ctx, &ops, &shifted(1e-3), &states);
    let r2 = residual(&ctx, &ops, &shifted(3e-3), &states);
    assert!(r1 > 0.0);
    assert!((r2 / r1 - 9.0).abs() < 1e-9, "ratio {}", r2 / r1);
}

#[test]
fn repeated_unconverged_solves_abort_the_run() {
    let ctx = ctx();
    let ops = BoundaryOps::new(&ctx.grid).unwrap();
    let init = background(&ctx);
    let events = measurements(&ctx, &ops, &truth(&ctx), 0.1);
    let mut cfg = config(10);
    cfg.forward.max_iter = 2;
    cfg.max_flagged = 2;
    match run_inversion(&ctx, &ops, &events, &init, &cfg, |_| {}) {
        Err(Error::Aborted { iteration, .. }) => assert_eq!(iteration, 1),
        other => panic!("expected an abort, got {:?}", other.map(|r| r.n_opt)),
    }
}

#[test]
fn empty_event_list_is_rejected() {
    let ctx = ctx();
    let ops = BoundaryOps::new(&ctx.grid).unwrap();
    assert!(matches!(
        run_inversion(&ctx, &ops, &[], &background(&ctx), &config(1), |_| {}),
        Err(Error::Config(_))
    ));
}
