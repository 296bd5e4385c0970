//! Inverse step for the speed field and the kernel coefficients.
//!
//! Both parameters follow the same three-operator pattern: an L¹ shrinkage
//! towards the background at a reflected point, accumulation into a shadow
//! variable, then a projection (floor for κ, cap for μ). For κ the change is
//! additionally tapered near the sampling boundary and smoothed by a
//! Gaussian before the floor is applied.

use ndarray::{Array2, Array3, Axis};

use crate::adjoint::AdjointState;
use crate::error::{Error, Result};
use crate::forward::{PrimalDualState, RHO_FLOOR};
use crate::grid::{InnerBox, SpaceTimeGrid};
use crate::kernel::{expand_mu, project_mu};
use crate::model::{MfgContext, ModelParams};
use crate::real::{lit, Real};

/// Soft threshold `sign(r)·max(|r| − α, 0)`.
#[inline]
pub fn shrink<T: Real>(r: T, alpha: T) -> T {
    let m = (r.abs() - alpha).max(T::zero());
    if r < T::zero() {
        -m
    } else {
        m
    }
}

/// Elementwise [`shrink`].
pub fn shrink_array<T: Real, D: ndarray::Dimension>(r: &ndarray::Array<T, D>, alpha: T) -> ndarray::Array<T, D> {
    r.mapv(|v| shrink(v, alpha))
}

/// Weights, floors and steps of the inverse step, plus the stabiliser shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseSettings<T> {
    /// Floor on κ.
    pub eps1: T,
    /// Cap on the expanded μ entries.
    pub eps2: T,
    pub gamma_kappa: T,
    pub gamma_mu: T,
    pub alpha_kappa: T,
    pub alpha_mu: T,
    pub alpha_lambda: T,
    /// Mask is 0 up to this many cells from the sampling boundary...
    pub mask_zero_cells: T,
    /// ...and 1 from this many cells on.
    pub mask_one_cells: T,
    /// Gaussian width of the smoothing kernel, in cells.
    pub psi_sigma_cells: T,
    /// Half-width of the smoothing stencil, in cells.
    pub psi_radius: usize,
}

impl<T: Real> Default for InverseSettings<T> {
    fn default() -> Self {
        Self {
            eps1: lit(2.0),
            eps2: lit(1.0),
            gamma_kappa: lit(0.2),
            gamma_mu: lit(0.1),
            alpha_kappa: lit(0.1),
            alpha_mu: lit(0.1),
            alpha_lambda: lit(crate::adjoint::ALPHA_LAMBDA),
            mask_zero_cells: lit(2.0),
            mask_one_cells: lit(6.0),
            psi_sigma_cells: lit(2.0),
            psi_radius: 4,
        }
    }
}

impl<T: Real> InverseSettings<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.eps1,
            self.alpha_kappa,
            self.alpha_mu,
            self.alpha_lambda,
            self.psi_sigma_cells,
        ];
        let nonneg = [self.gamma_kappa, self.gamma_mu, self.mask_zero_cells];
        if positive.iter().any(|v| !(*v > T::zero() && v.is_finite()))
            || nonneg.iter().any(|v| !(*v >= T::zero() && v.is_finite()))
            || !self.eps2.is_finite()
        {
            return Err(Error::Config(
                "inverse weights and steps must be finite and positive".into(),
            ));
        }
        if !(self.mask_one_cells > self.mask_zero_cells) || !self.mask_one_cells.is_finite() {
            return Err(Error::Config("mask ramp must end after it starts".into()));
        }
        Ok(())
    }
}

/// Shadow variables of the splitting: κ̃ on the grid and μ̃ in expanded
/// layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SplittingState<T> {
    pub kappa_tilde: Array2<T>,
    pub mu_tilde: Vec<T>,
}

impl<T: Real> SplittingState<T> {
    /// Starts at the background parameters.
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            kappa_tilde: params.kappa0.clone(),
            mu_tilde: expand_mu(&params.mu0),
        }
    }
}

/// Boundary taper and smoothing kernel applied to the κ update.
#[derive(Clone, Debug)]
pub struct Stabilizers<T> {
    /// Taper `w ∈ [0, 1]`, zero next to the sampling boundary.
    pub mask_weight: Array2<T>,
    /// Stencil of the smoothing kernel, `(2R+1)²`, with `Σψ h² = 1`.
    pub psi: Array2<T>,
    radius: usize,
}

/// Distance of node `(i, j)` to the boundary of the inner box, in cells.
fn box_distance_cells<T: Real>(b: &InnerBox, i: usize, j: usize) -> T {
    let (i, j) = (i as i64, j as i64);
    let (i0, i1, j0, j1) = (b.i0 as i64, b.i1 as i64, b.j0 as i64, b.j1 as i64);
    if i >= i0 && i <= i1 && j >= j0 && j <= j1 {
        let d = (i - i0).min(i1 - i).min(j - j0).min(j1 - j);
        lit(d as f64)
    } else {
        let dx = (i0 - i).max(0).max(i - i1);
        let dy = (j0 - j).max(0).max(j - j1);
        lit::<T>((dx * dx + dy * dy) as f64).sqrt()
    }
}

impl<T: Real> Stabilizers<T> {
    pub fn new(grid: &SpaceTimeGrid<T>, settings: &InverseSettings<T>) -> Self {
        let (lo, hi) = (settings.mask_zero_cells, settings.mask_one_cells);
        let mask_weight = Array2::from_shape_fn(grid.spatial_shape(), |(i, j)| {
            let d = box_distance_cells::<T>(&grid.inner, i, j);
            if d <= lo {
                T::zero()
            } else if d >= hi {
                T::one()
            } else {
                let s = (d - lo) / (hi - lo);
                lit::<T>(0.5) * (T::one() - (T::PI() * s).cos())
            }
        });
        let r = settings.psi_radius;
        let two_s2 = lit::<T>(2.0) * settings.psi_sigma_cells * settings.psi_sigma_cells;
        let mut psi = Array2::from_shape_fn((2 * r + 1, 2 * r + 1), |(a, b)| {
            let (da, db) = (a as f64 - r as f64, b as f64 - r as f64);
            (-lit::<T>(da * da + db * db) / two_s2).exp()
        });
        let total: T = psi.iter().copied().sum::<T>() * grid.h * grid.h;
        psi.mapv_inplace(|v| v / total);
        Self {
            mask_weight,
            psi,
            radius: r,
        }
    }

    /// `w (κ − κ₀) + κ₀`.
    pub fn taper(&self, kappa: &Array2<T>, kappa0: &Array2<T>) -> Array2<T> {
        let mut out = kappa - kappa0;
        out *= &self.mask_weight;
        out += kappa0;
        out
    }

    /// Discrete convolution with ψ. Near the edge of the grid the truncated
    /// stencil is renormalised, so constants are reproduced exactly.
    pub fn smooth(&self, u: &Array2<T>) -> Array2<T> {
        let (nx, ny) = u.dim();
        let r = self.radius as i64;
        Array2::from_shape_fn((nx, ny), |(i, j)| {
            let (mut acc, mut wsum) = (T::zero(), T::zero());
            for a in -r..=r {
                let ii = i as i64 + a;
                if ii < 0 || ii >= nx as i64 {
                    continue;
                }
                for b in -r..=r {
                    let jj = j as i64 + b;
                    if jj < 0 || jj >= ny as i64 {
                        continue;
                    }
                    let w = self.psi[[(a + r) as usize, (b + r) as usize]];
                    acc += w * u[[ii as usize, jj as usize]];
                    wsum += w;
                }
            }
            acc / wsum
        })
    }
}

/// `Σ_{k≥1} dt [ |m|²/(2κ²ρ²) λ_ρ − (m·λ_m)/(κ²ρ) ]` at every node: the
/// κ-derivative of `⟨λ, ∂_{(ρ,m)}𝓛⟩` as a density in space.
pub fn lambda_kappa<T: Real>(
    grid: &SpaceTimeGrid<T>,
    params: &ModelParams<T>,
    state: &PrimalDualState<T>,
    adj: &AdjointState<T>,
) -> Array2<T> {
    let floor = lit::<T>(RHO_FLOOR);
    let half = lit::<T>(0.5);
    let mut out = grid.spatial_zeros();
    for k in 1..grid.nt {
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let kap = params.kappa[[i, j]];
                let r = state.rho[[k, i, j]].max(floor);
                let (mx, my) = (state.m.x[[k, i, j]], state.m.y[[k, i, j]]);
                let m2 = mx * mx + my * my;
                let k2 = kap * kap;
                let lm = mx * adj.lambda_m.x[[k, i, j]] + my * adj.lambda_m.y[[k, i, j]];
                out[[i, j]] += grid.dt * (half * m2 / (k2 * r * r) * adj.lambda_rho[[k, i, j]] - lm / (k2 * r));
            }
        }
    }
    out
}

/// `Σ_{k≥1} dt a_{k,f} ∫ T_f λ_ρ,k` for every expanded feature `f`, the
/// derivative of `⟨λ, ∂_{(ρ,m)}𝓛⟩` in the expanded coefficients.
pub fn lambda_mu<T: Real>(ctx: &MfgContext<T>, lambda_rho: &Array3<T>, a: &Array2<T>) -> Vec<T> {
    let grid = &ctx.grid;
    let nf = ctx.features.features();
    let mut out = vec![T::zero(); nf];
    for k in 1..grid.nt {
        let row = a.row(k);
        if row.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let mom = ctx.features.moments(grid, lambda_rho.index_axis(Axis(0), k));
        for f in 0..nf {
            out[f] += grid.dt * row[f] * mom[f];
        }
    }
    out
}

/// One κ step. Returns the new speed field and the new shadow variable.
pub fn update_kappa<T: Real>(
    grid: &SpaceTimeGrid<T>,
    params: &ModelParams<T>,
    split: &SplittingState<T>,
    grad: &Array2<T>,
    stab: &Stabilizers<T>,
    settings: &InverseSettings<T>,
) -> (Array2<T>, Array2<T>) {
    let (kap, kap0) = (&params.kappa, &params.kappa0);
    let alpha = settings.alpha_kappa;
    let mut reflected = kap * lit::<T>(2.0) - &split.kappa_tilde;
    reflected.scaled_add(-alpha, grad);
    reflected -= kap0;
    let temp = shrink_array(&reflected, alpha * settings.gamma_kappa) + kap0;
    let tilde = &split.kappa_tilde + &stab.taper(&temp, kap0) - kap;
    let mut next = stab.smooth(&tilde).mapv(|v| v.max(settings.eps1));
    for ((i, j), v) in next.indexed_iter_mut() {
        if !grid.inner.contains_open(i, j) {
            *v = kap0[[i, j]];
        }
    }
    (next, tilde)
}

/// One μ step on expanded coefficients. Returns the reduced coefficients and
/// the new expanded shadow variable.
pub fn update_mu<T: Real>(
    params: &ModelParams<T>,
    split: &SplittingState<T>,
    grad: &[T],
    settings: &InverseSettings<T>,
) -> (Vec<T>, Vec<T>) {
    let cur = expand_mu(&params.mu);
    let base = expand_mu(&params.mu0);
    let alpha = settings.alpha_mu;
    let thr = alpha * settings.gamma_mu;
    let tilde: Vec<T> = (0..cur.len())
        .map(|f| {
            let reflected = cur[f] + cur[f] - split.mu_tilde[f] - alpha * grad[f] - base[f];
            let temp = shrink(reflected, thr) + base[f];
            split.mu_tilde[f] + temp - cur[f]
        })
        .collect();
    let capped: Vec<T> = tilde.iter().map(|v| v.min(settings.eps2)).collect();
    (project_mu(&capped), tilde)
}

/// `max κ` and `‖μ − μ₀‖₁` (reduced layout), the per-iteration diagnostics.
pub fn param_summary<T: Real>(params: &ModelParams<T>) -> (T, T) {
    let kmax = params.kappa.iter().copied().fold(T::neg_infinity(), T::max);
    let dmu = params
        .mu
        .iter()
        .zip(&params.mu0)
        .map(|(a, b)| (*a - *b).abs())
        .fold(T::zero(), |s, v| s + v);
    (kmax, dmu)
}
