//! Outer inversion loop: adjoint step, parameter step, forward re-solve.

use ndarray::Array2;
use rayon::prelude::*;

use crate::adjoint::{update_adjoint, AdjointState};
use crate::boundary::{trace_misfit, BoundaryOps, BoundaryTrace};
use crate::error::{Error, Result};
use crate::forward::{primal_dual_gap, solve_forward, EventData, ForwardSettings, PrimalDualState};
use crate::model::{MfgContext, ModelParams};
use crate::params::{
    lambda_kappa, lambda_mu, param_summary, update_kappa, update_mu, InverseSettings, SplittingState, Stabilizers,
};
use crate::real::{to_f64, Real};

/// One measurement: the event that was run and its (noisy) boundary trace.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementEvent<T> {
    pub data: EventData<T>,
    pub trace: BoundaryTrace<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct InversionConfig<T> {
    pub n_max: usize,
    pub forward: ForwardSettings<T>,
    pub inverse: InverseSettings<T>,
    /// Parameters are stored every this many iterations.
    pub checkpoint_stride: usize,
    /// Consecutive iterations with an unconverged forward solve before the
    /// run is aborted.
    pub max_flagged: usize,
}

impl<T: Real> Default for InversionConfig<T> {
    fn default() -> Self {
        Self {
            n_max: 1500,
            forward: ForwardSettings::default(),
            inverse: InverseSettings::default(),
            checkpoint_stride: 10,
            max_flagged: 3,
        }
    }
}

/// Per-iteration diagnostics. Row `n = 0` describes the initial parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResRecord<T> {
    pub n: usize,
    pub res: T,
    pub kappa_max: T,
    pub mu_l1: T,
    /// Some forward solve of this iteration hit its iteration cap.
    pub flagged: bool,
    /// Forward iterations summed over events.
    pub forward_iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub n: usize,
    pub kappa: Array2<T>,
    pub mu: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct InversionResult<T> {
    pub res_history: Vec<ResRecord<T>>,
    pub checkpoints: Vec<Checkpoint<T>>,
    pub n_opt: usize,
    pub params_opt: ModelParams<T>,
    pub params_last: ModelParams<T>,
}

/// `Σ_i ∫∫ |trace_i − data_i|²` in the given event order.
pub fn residual<T: Real>(
    ctx: &MfgContext<T>,
    ops: &BoundaryOps<T>,
    events: &[MeasurementEvent<T>],
    states: &[PrimalDualState<T>],
) -> T {
    events
        .iter()
        .zip(states)
        .map(|(e, s)| trace_misfit(&ctx.grid, &ops.trace(&s.rho, &s.m), &e.trace))
        .fold(T::zero(), |a, b| a + b)
}

struct Solved<T> {
    state: PrimalDualState<T>,
    converged: bool,
    iterations: usize,
}

/// Forward solve from `init`; no sweep at all if `init` already meets the
/// tolerance at `params`.
fn resolve<T: Real>(
    ctx: &MfgContext<T>,
    event: &EventData<T>,
    params: &ModelParams<T>,
    init: PrimalDualState<T>,
    settings: &ForwardSettings<T>,
) -> Result<Solved<T>> {
    if primal_dual_gap(ctx, &init, params)? < settings.e_tol {
        return Ok(Solved {
            state: init,
            converged: true,
            iterations: 0,
        });
    }
    let sol = solve_forward(ctx, event, params, init, settings)?;
    Ok(Solved {
        state: sol.state,
        converged: sol.converged,
        iterations: sol.iterations,
    })
}

fn solve_all<T: Real>(
    ctx: &MfgContext<T>,
    events: &[MeasurementEvent<T>],
    params: &ModelParams<T>,
    inits: Vec<PrimalDualState<T>>,
    settings: &ForwardSettings<T>,
) -> Result<(Vec<PrimalDualState<T>>, bool, usize)> {
    let solved: Vec<Solved<T>> = events
        .par_iter()
        .zip(inits)
        .map(|(e, s)| resolve(ctx, &e.data, params, s, settings))
        .collect::<Result<_>>()?;
    let flagged = solved.iter().any(|s| !s.converged);
    let iterations = solved.iter().map(|s| s.iterations).sum();
    Ok((solved.into_iter().map(|s| s.state).collect(), flagged, iterations))
}

/// Runs the inversion from `init` for `config.n_max` iterations and returns
/// the iterate with the smallest boundary residual. `observe` sees every
/// residual record as it is produced.
pub fn run_inversion<T: Real>(
    ctx: &MfgContext<T>,
    ops: &BoundaryOps<T>,
    events: &[MeasurementEvent<T>],
    init: &ModelParams<T>,
    config: &InversionConfig<T>,
    mut observe: impl FnMut(&ResRecord<T>),
) -> Result<InversionResult<T>> {
    if events.is_empty() {
        return Err(Error::Config("no measurement events".into()));
    }
    init.validate(&ctx.grid, &ctx.freqs)?;
    config.forward.steps.validate()?;
    config.inverse.validate()?;
    for e in events {
        e.data.validate(&ctx.grid)?;
        e.trace.validate(ctx.grid.nt, ops.len())?;
    }
    let grid = &ctx.grid;
    let stab = Stabilizers::new(grid, &config.inverse);
    let stride = config.checkpoint_stride.max(1);

    let mut params = init.clone();
    let mut split = SplittingState::new(&params);
    let cold: Vec<_> = events
        .iter()
        .map(|e| PrimalDualState::cold_start(ctx, &e.data))
        .collect();
    let (mut states, flagged, iterations) = solve_all(ctx, events, &params, cold, &config.forward)?;
    let mut adjoints: Vec<_> = events
        .iter()
        .map(|_| AdjointState::zeros(grid, config.inverse.alpha_lambda))
        .collect();

    let record = |n: usize, params: &ModelParams<T>, states: &[PrimalDualState<T>], flagged, iterations| {
        let (kappa_max, mu_l1) = param_summary(params);
        ResRecord {
            n,
            res: residual(ctx, ops, events, states),
            kappa_max,
            mu_l1,
            flagged,
            forward_iterations: iterations,
        }
    };
    let first = record(0, &params, &states, flagged, iterations);
    observe(&first);
    let mut res_history = vec![first];
    let mut checkpoints = vec![Checkpoint {
        n: 0,
        kappa: params.kappa.clone(),
        mu: params.mu.clone(),
    }];
    let mut best = (first.res, 0, params.clone());
    let mut consecutive = usize::from(flagged);

    for n in 1..=config.n_max {
        // Adjoint step per event.
        adjoints = events
            .par_iter()
            .zip(&states)
            .zip(adjoints)
            .map(|((e, s), adj)| {
                let mismatch = ops.trace(&s.rho, &s.m).minus(&e.trace);
                let ext = ops.extend(&mismatch)?;
                update_adjoint(&adj, &s.rho, &s.m, &params, &ext)
            })
            .collect::<Result<_>>()?;

        // Parameter step, summing event contributions in a fixed order.
        let parts: Vec<(Array2<T>, Vec<T>)> = states
            .par_iter()
            .zip(&adjoints)
            .map(|(s, adj)| {
                (
                    lambda_kappa(grid, &params, s, adj),
                    lambda_mu(ctx, &adj.lambda_rho, &s.a),
                )
            })
            .collect();
        let mut grad_kappa = grid.spatial_zeros();
        let mut grad_mu = vec![T::zero(); ctx.features.features()];
        for (gk, gm) in &parts {
            grad_kappa += gk;
            for (a, b) in grad_mu.iter_mut().zip(gm) {
                *a += *b;
            }
        }
        let (kappa, kappa_tilde) = update_kappa(grid, &params, &split, &grad_kappa, &stab, &config.inverse);
        let (mu, mu_tilde) = update_mu(&params, &split, &grad_mu, &config.inverse);
        params.kappa = kappa;
        params.mu = mu;
        split = SplittingState { kappa_tilde, mu_tilde };

        // Forward re-solve, warm started.
        let (next, flagged, iterations) = solve_all(ctx, events, &params, states, &config.forward)?;
        states = next;
        let rec = record(n, &params, &states, flagged, iterations);
        observe(&rec);
        res_history.push(rec);

        consecutive = if flagged { consecutive + 1 } else { 0 };
        if consecutive >= config.max_flagged.max(1) {
            return Err(Error::Aborted {
                iteration: n,
                reason: format!(
                    "forward solve did not reach tolerance {:e} in {} consecutive iterations (Res = {:e})",
                    to_f64(config.forward.e_tol),
                    consecutive,
                    to_f64(rec.res)
                ),
            });
        }
        if rec.res < best.0 {
            best = (rec.res, n, params.clone());
        }
        if n % stride == 0 {
            checkpoints.push(Checkpoint {
                n,
                kappa: params.kappa.clone(),
                mu: params.mu.clone(),
            });
        }
    }

    let (_, n_opt, params_opt) = best;
    if !checkpoints.iter().any(|c| c.n == n_opt) {
        checkpoints.push(Checkpoint {
            n: n_opt,
            kappa: params_opt.kappa.clone(),
            mu: params_opt.mu.clone(),
        });
        checkpoints.sort_by_key(|c| c.n);
    }
    Ok(InversionResult {
        res_history,
        checkpoints,
        n_opt,
        params_opt,
        params_last: params,
    })
}
