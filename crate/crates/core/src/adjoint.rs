//! Primal-dual update of the adjoint variables `(λ_ρ, λ_m)`.
//!
//! Each node solves `[I + α ρ H] λ* = λⁿ − α ρ (η, ∇ξ)` with `H` the Hessian
//! of the kinetic term `|m|²/(2κρ)` in `(ρ, m)`, then the iterate is
//! extrapolated as `λ^{n+1} = 2λ* − λ*_prev`.

use ndarray::Array3;

use crate::boundary::ExtensionPair;
use crate::error::{Error, Result};
use crate::forward::RHO_FLOOR;
use crate::grid::{SpaceTimeGrid, VectorField};
use crate::model::ModelParams;
use crate::real::{lit, Real};

/// Default adjoint step.
pub const ALPHA_LAMBDA: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState<T> {
    pub lambda_rho: Array3<T>,
    pub lambda_m: VectorField<T>,
    /// Resolvent outputs of the previous update, for the extrapolation.
    pub temp_rho_prev: Array3<T>,
    pub temp_m_prev: VectorField<T>,
    pub alpha: T,
}

impl<T: Real> AdjointState<T> {
    pub fn zeros(grid: &SpaceTimeGrid<T>, alpha: T) -> Self {
        Self {
            lambda_rho: grid.zeros(),
            lambda_m: VectorField::zeros(grid.shape()),
            temp_rho_prev: grid.zeros(),
            temp_m_prev: VectorField::zeros(grid.shape()),
            alpha,
        }
    }
}

/// `∂²/∂(ρ,m)² [|m|²/(2κρ)]`, symmetric positive semidefinite for `ρ > 0`.
pub fn hessian_block<T: Real>(kappa: T, rho: T, m: [T; 2]) -> [[T; 3]; 3] {
    let kr = kappa * rho;
    let m2 = m[0] * m[0] + m[1] * m[1];
    let off = [-m[0] / (kr * rho), -m[1] / (kr * rho)];
    let d = T::one() / kr;
    [
        [m2 / (kr * rho * rho), off[0], off[1]],
        [off[0], d, T::zero()],
        [off[1], T::zero(), d],
    ]
}

/// Solves `[I + α ρ H] x = r` at one node.
///
/// With `u = m/ρ` and `c = α/κ` the matrix is `I + c [[|u|², −uᵀ], [−u, I]]`;
/// eliminating the flux block gives the closed form below.
/// Returns `None` when the system is singular or the result is not finite.
pub fn resolvent<T: Real>(kappa: T, rho: T, m: [T; 2], alpha: T, r: [T; 3]) -> Option<[T; 3]> {
    if !(rho > T::zero()) || !(kappa > T::zero()) || !(alpha >= T::zero()) {
        return None;
    }
    let u = [m[0] / rho, m[1] / rho];
    let c = alpha / kappa;
    let u2 = u[0] * u[0] + u[1] * u[1];
    let one_c = T::one() + c;
    let den = one_c + c * u2;
    let lr = (r[0] * one_c + c * (u[0] * r[1] + u[1] * r[2])) / den;
    let lx = (r[1] + c * u[0] * lr) / one_c;
    let ly = (r[2] + c * u[1] * lr) / one_c;
    if !(lr.is_finite() && lx.is_finite() && ly.is_finite()) {
        return None;
    }
    Some([lr, lx, ly])
}

/// One adjoint step for one event. `rho` is floored at [`RHO_FLOOR`] inside
/// the Hessian; where the flux vanishes with the density this is exact.
pub fn update_adjoint<T: Real>(
    adj: &AdjointState<T>,
    rho: &Array3<T>,
    m: &VectorField<T>,
    params: &ModelParams<T>,
    ext: &ExtensionPair<T>,
) -> Result<AdjointState<T>> {
    let (nt, nx, ny) = rho.dim();
    let floor = lit::<T>(RHO_FLOOR);
    let alpha = adj.alpha;
    let mut temp_rho = Array3::zeros((nt, nx, ny));
    let mut temp_m = VectorField::zeros((nt, nx, ny));
    for k in 0..nt {
        for i in 0..nx {
            for j in 0..ny {
                let r = rho[[k, i, j]];
                let mm = [m.x[[k, i, j]], m.y[[k, i, j]]];
                let w = alpha * r;
                let rhs = [
                    adj.lambda_rho[[k, i, j]] - w * ext.eta[[k, i, j]],
                    adj.lambda_m.x[[k, i, j]] - w * ext.grad_xi.x[[k, i, j]],
                    adj.lambda_m.y[[k, i, j]] - w * ext.grad_xi.y[[k, i, j]],
                ];
                // The matrix is I + α·ρ·H; ρH is bounded as ρ → 0 when m/ρ is.
                let out = resolvent(params.kappa[[i, j]], r.max(floor), mm, alpha, rhs)
                    .ok_or(Error::SingularResolvent { t: k, i, j })?;
                temp_rho[[k, i, j]] = out[0];
                temp_m.x[[k, i, j]] = out[1];
                temp_m.y[[k, i, j]] = out[2];
            }
        }
    }
    let extrap = |new: &Array3<T>, old: &Array3<T>| {
        let mut out = new.clone();
        out.zip_mut_with(old, |a, b| *a = *a + *a - *b);
        out
    };
    Ok(AdjointState {
        lambda_rho: extrap(&temp_rho, &adj.temp_rho_prev),
        lambda_m: VectorField {
            x: extrap(&temp_m.x, &adj.temp_m_prev.x),
            y: extrap(&temp_m.y, &adj.temp_m_prev.y),
        },
        temp_rho_prev: temp_rho,
        temp_m_prev: temp_m,
        alpha,
    })
}
