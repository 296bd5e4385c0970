//! Forward nonlocal mean-field game solver.
//!
//! The discrete saddle function, minimised over `(ρ, m)` and maximised over
//! `(φ, a)`, is
//!
//! ```text
//! 𝓛 = −½ Σ_{k≥1} dt |a_k|² + ⟨φ_0, ρ_0⟩
//!     + Σ_{k≥1} dt ⟨ρ_k, (φ_k − φ_{k−1})/dt + ν Δφ_{k−1} + a_k·ζ⟩
//!     + Σ_{k≥1} dt ⟨m_k, ∇φ_{k−1}⟩ + Σ_{k≥1} dt ⟨1, |m_k|²/(2κρ_k)⟩
//! ```
//!
//! with `ρ_0 = ρ₀` and `φ_N = g` pinned. Brackets are dual-cell weighted sums
//! over the nodes. Its φ-derivative is the Fokker–Planck residual
//! `R_k = (ρ_k − ρ_{k+1})/dt + ν Δρ_{k+1} − ∇·m_{k+1}` for `k < N`, and its
//! `(ρ, m)` derivatives give the Hamilton–Jacobi equation with optimal flux
//! `m = −κρ∇φ`.
//!
//! Summing `R_k` over space shows that any saddle point conserves mass. The
//! solver may impose `∫ρ_k = ∫ρ_0` explicitly as a constraint of the primal
//! step; its multipliers `θ_k` then enter `c_k` and 𝓛 gains the term
//! `Σ_{k≥1} dt θ_k (∫ρ_k − ∫ρ_0)`. The primal solution is the same either
//! way, but the primal-dual iteration otherwise leaks mass through the
//! near-empty region until it has fully converged.
//!
//! The solver is a Chambolle–Pock iteration: a pointwise proximal step in
//! `(ρ, m)` at the extrapolated dual point, a metric-preconditioned ascent
//! step in φ (see [`metric`]), a closed-form step in `a`, then
//! over-relaxation of `(φ, a)`.

pub mod metric;

pub use metric::{MetricSolver, PhiMetric};


use ndarray::{s, Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::grid::{
    divergence_into, gradient_into, integrate_slice, laplacian_into, Region, SpaceTimeGrid, VectorField,
};
use crate::model::{MfgContext, ModelParams};
use crate::real::{lit, to_f64, Real};

/// Density floor used inside kinetic-term divisions of the stopping residual.
pub const RHO_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct EventData<T> {
    pub rho0: Array2<T>,
    pub g: Array2<T>,
}

impl<T: Real> EventData<T> {
    pub fn new(grid: &SpaceTimeGrid<T>, rho0: Array2<T>, g: Array2<T>) -> Result<Self> {
        let ev = Self { rho0, g };
        ev.validate(grid)?;
        Ok(ev)
    }

    pub fn validate(&self, grid: &SpaceTimeGrid<T>) -> Result<()> {
        let shape = grid.spatial_shape();
        if self.rho0.dim() != shape || self.g.dim() != shape {
            return Err(Error::Shape(format!("event slices must have shape {shape:?}")));
        }
        if let Some(((i, j), v)) = self.rho0.indexed_iter().find(|(_, v)| !(**v >= T::zero())) {
            return Err(Error::DomainViolation {
                t: 0,
                i,
                j,
                value: to_f64(*v),
            });
        }
        if self.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("terminal cost is not finite".into()));
        }
        let mass = integrate_slice(grid, self.rho0.view(), Region::Full);
        let tol = lit::<T>(1e-10).max(T::epsilon() * lit(100.0));
        if (mass - T::one()).abs() > tol {
            return Err(Error::Config(format!("initial density has mass {mass}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualState<T> {
    pub rho: Array3<T>,
    pub m: VectorField<T>,
    pub phi: Array3<T>,
    /// Feature-space auxiliary variable, shape `(nt, 2r)`; row 0 is unused.
    pub a: Array2<T>,
    /// Per-slice multiplier of the mass constraint `∫ρ_k = ∫ρ_0`; entry 0 is
    /// unused. Zero when mass is not constrained explicitly.
    pub theta: Vec<T>,
}

impl<T: Real> PrimalDualState<T> {
    /// Uniform density after the initial slice, zero flux, `φ ≡ g` and
    /// `a = 0`.
    pub fn cold_start(ctx: &MfgContext<T>, event: &EventData<T>) -> Self {
        let grid = &ctx.grid;
        let area = (grid.x_max - grid.x_min) * (grid.y_max - grid.y_min);
        let mut rho = Array3::from_elem(grid.shape(), T::one() / area);
        rho.index_axis_mut(Axis(0), 0).assign(&event.rho0);
        let mut phi = grid.zeros();
        for k in 0..grid.nt {
            phi.index_axis_mut(Axis(0), k).assign(&event.g);
        }
        Self {
            rho,
            m: VectorField::zeros(grid.shape()),
            phi,
            a: Array2::zeros((grid.nt, ctx.features.features())),
            theta: vec![T::zero(); grid.nt],
        }
    }

    pub fn validate(&self, ctx: &MfgContext<T>) -> Result<()> {
        let shape = ctx.grid.shape();
        if self.rho.dim() != shape || self.phi.dim() != shape || self.m.x.dim() != shape || self.m.y.dim() != shape {
            return Err(Error::Shape(format!("state fields must have shape {shape:?}")));
        }
        if self.a.dim() != (shape.0, ctx.features.features()) || self.theta.len() != shape.0 {
            return Err(Error::Shape("auxiliary variable has the wrong shape".into()));
        }
        if let Some(((t, i, j), v)) = self.rho.indexed_iter().find(|(_, v)| !(**v >= T::zero())) {
            return Err(Error::DomainViolation {
                t,
                i,
                j,
                value: to_f64(*v),
            });
        }
        let finite = self
            .phi
            .iter()
            .chain(self.a.iter())
            .chain(self.theta.iter())
            .all(|v| v.is_finite())
            && self.m.all_finite();
        if !finite {
            return Err(Error::Config("state contains non-finite values".into()));
        }
        Ok(())
    }

    fn pin(&mut self, event: &EventData<T>) {
        let n = self.rho.dim().0 - 1;
        self.rho.index_axis_mut(Axis(0), 0).assign(&event.rho0);
        self.m.x.index_axis_mut(Axis(0), 0).fill(T::zero());
        self.m.y.index_axis_mut(Axis(0), 0).fill(T::zero());
        self.phi.index_axis_mut(Axis(0), n).assign(&event.g);
        self.a.row_mut(0).fill(T::zero());
        self.theta[0] = T::zero();
    }

    /// `max_k |∫ρ_k − ∫ρ_0|`.
    pub fn mass_drift(&self, grid: &SpaceTimeGrid<T>) -> T {
        let m0 = integrate_slice(grid, self.rho.index_axis(Axis(0), 0), Region::Full);
        (1..grid.nt)
            .map(|k| (integrate_slice(grid, self.rho.index_axis(Axis(0), k), Region::Full) - m0).abs())
            .fold(T::zero(), T::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes<T> {
    pub alpha_rho: T,
    pub alpha_m: T,
    pub alpha_phi: T,
    pub alpha_a: T,
}

impl<T: Real> Default for StepSizes<T> {
    fn default() -> Self {
        Self {
            alpha_rho: lit(0.05),
            alpha_m: lit(0.05),
            alpha_phi: lit(0.5),
            alpha_a: lit(0.5),
        }
    }
}

impl<T: Real> StepSizes<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha_rho, self.alpha_m, self.alpha_phi, self.alpha_a]
            .iter()
            .all(|a| *a > T::zero() && a.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("step sizes must be positive and finite".into()))
        }
    }

    fn halved(self) -> Self {
        let h = lit::<T>(0.5);
        Self {
            alpha_rho: self.alpha_rho * h,
            alpha_m: self.alpha_m * h,
            alpha_phi: self.alpha_phi * h,
            alpha_a: self.alpha_a * h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiSolver {
    /// Cosine transform in space with tridiagonal solves in time.
    Spectral,
    /// Diagonally preconditioned conjugate gradients.
    ConjugateGradient,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardSettings<T> {
    pub steps: StepSizes<T>,
    pub e_tol: T,
    pub max_iter: usize,
    /// Maximum number of step halvings on stagnation.
    pub max_backoffs: usize,
    /// Iterations per stagnation check.
    pub stagnation_window: usize,
    pub metric: PhiMetric,
    pub phi_solver: PhiSolver,
    /// Enforce `∫ρ_k = ∫ρ_0` inside the primal step. The constraint holds at
    /// every saddle point anyway, so the primal solution is unchanged.
    pub conserve_mass: bool,
}

impl<T: Real> Default for ForwardSettings<T> {
    fn default() -> Self {
        Self {
            steps: StepSizes::default(),
            e_tol: lit(2e-3),
            max_iter: 5000,
            max_backoffs: 6,
            stagnation_window: 200,
            metric: PhiMetric::Parabolic,
            phi_solver: PhiSolver::Spectral,
            conserve_mass: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapRecord<T> {
    pub iteration: usize,
    pub gap: T,
    pub mass_drift: T,
}

#[derive(Clone, Debug)]
pub struct ForwardSolution<T> {
    pub state: PrimalDualState<T>,
    pub converged: bool,
    pub iterations: usize,
    pub gap: T,
    pub steps: StepSizes<T>,
    pub history: Vec<GapRecord<T>>,
}

/// Squared norms of the four residual blocks entering the stopping rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapParts<T> {
    pub rho: T,
    pub m: T,
    pub a: T,
    pub phi: T,
}

impl<T: Real> GapParts<T> {
    pub fn total(&self) -> T {
        self.rho + self.m + self.a + self.phi
    }
}

// ----------------------------------------------------------------------------
// building blocks

#[inline]
fn flat<T>(a: &Array3<T>) -> &[T] {
    a.as_slice().expect("fields are stored in standard layout")
}

#[inline]
fn flat_mut<T>(a: &mut Array3<T>) -> &mut [T] {
    a.as_slice_mut().expect("fields are stored in standard layout")
}

/// Linear coefficients of `ρ_k` and `m_k` in 𝓛 for `k ≥ 1`:
/// `c_k = (φ_k − φ_{k−1})/dt + νΔφ_{k−1} + a_k·ζ + θ_k` and `b_k = ∇φ_{k−1}`.
/// Slice 0 is left at zero.
fn dual_coefficients<T: Real>(
    ctx: &MfgContext<T>,
    params: &ModelParams<T>,
    phi: &Array3<T>,
    a: &Array2<T>,
    theta: &[T],
) -> (Array3<T>, VectorField<T>) {
    let grid = &ctx.grid;
    let mut c = grid.zeros();
    let mut b = VectorField::zeros(grid.shape());
    let mut lap = grid.spatial_zeros();
    for k in 1..grid.nt {
        let prev = phi.index_axis(Axis(0), k - 1);
        laplacian_into(grid, prev, lap.view_mut());
        let pot = ctx
            .features
            .potential(a.row(k).as_slice().expect("contiguous row"), &params.mu);
        let cur = phi.index_axis(Axis(0), k);
        let mut ck = c.index_axis_mut(Axis(0), k);
        ndarray::Zip::from(&mut ck)
            .and(&cur)
            .and(&prev)
            .and(&lap)
            .and(&pot)
            .for_each(|o, &p1, &p0, &l, &v| *o = (p1 - p0) / grid.dt + params.nu * l + v + theta[k]);
        gradient_into(
            grid,
            prev,
            b.x.index_axis_mut(Axis(0), k),
            b.y.index_axis_mut(Axis(0), k),
        );
    }
    (c, b)
}

/// Fokker–Planck residual `R_k`, `k < N`; slice `N` is zero.
pub fn fp_residual<T: Real>(
    ctx: &MfgContext<T>,
    params: &ModelParams<T>,
    rho: &Array3<T>,
    m: &VectorField<T>,
) -> Array3<T> {
    let grid = &ctx.grid;
    let mut r = grid.zeros();
    let mut div = grid.spatial_zeros();
    let mut lap = grid.spatial_zeros();
    for k in 0..grid.nt - 1 {
        let next = rho.index_axis(Axis(0), k + 1);
        laplacian_into(grid, next, lap.view_mut());
        divergence_into(
            grid,
            m.x.index_axis(Axis(0), k + 1),
            m.y.index_axis(Axis(0), k + 1),
            div.view_mut(),
        );
        let cur = rho.index_axis(Axis(0), k);
        ndarray::Zip::from(r.index_axis_mut(Axis(0), k))
            .and(&cur)
            .and(&next)
            .and(&lap)
            .and(&div)
            .for_each(|o, &r0, &r1, &l, &d| *o = (r0 - r1) / grid.dt + params.nu * l - d);
    }
    r
}

/// `I_k = ∫ ζ ρ_k` for `k ≥ 1`, row 0 zero.
fn interaction_rows<T: Real>(ctx: &MfgContext<T>, params: &ModelParams<T>, rho: &Array3<T>) -> Array2<T> {
    let nf = ctx.features.features();
    let mut out = Array2::zeros((ctx.grid.nt, nf));
    for k in 1..ctx.grid.nt {
        let v = ctx
            .features
            .interaction_field(&ctx.grid, rho.index_axis(Axis(0), k), &params.mu);
        for f in 0..nf {
            out[[k, f]] = v[f];
        }
    }
    out
}

/// Discrete saddle function. Returns `+∞` if some node has zero density and
/// non-zero flux.
pub fn lagrangian<T: Real>(
    ctx: &MfgContext<T>,
    event: &EventData<T>,
    state: &PrimalDualState<T>,
    params: &ModelParams<T>,
) -> Result<T> {
    let grid = &ctx.grid;
    let (c, b) = dual_coefficients(ctx, params, &state.phi, &state.a, &state.theta);
    let mut total = T::zero();
    let half = lit::<T>(0.5);
    for k in 1..grid.nt {
        let a2: T = state.a.row(k).iter().map(|v| *v * *v).sum();
        total -= half * grid.dt * a2;
    }
    total += crate::grid::inner_slice(grid, state.phi.index_axis(Axis(0), 0), event.rho0.view());
    let m0 = integrate_slice(grid, event.rho0.view(), Region::Full);
    total -= grid.dt * m0 * state.theta[1..].iter().copied().sum::<T>();
    for k in 1..grid.nt {
        let mut acc = T::zero();
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let r = state.rho[[k, i, j]];
                let (mx, my) = (state.m.x[[k, i, j]], state.m.y[[k, i, j]]);
                if r < T::zero() {
                    return Err(Error::DomainViolation {
                        t: k,
                        i,
                        j,
                        value: to_f64(r),
                    });
                }
                let m2 = mx * mx + my * my;
                let kinetic = if r > T::zero() {
                    m2 / (lit::<T>(2.0) * params.kappa[[i, j]] * r)
                } else if m2 > T::zero() {
                    return Ok(T::infinity());
                } else {
                    T::zero()
                };
                acc +=
                    grid.node_weight(i, j) * (r * c[[k, i, j]] + mx * b.x[[k, i, j]] + my * b.y[[k, i, j]] + kinetic);
            }
        }
        total += grid.dt * acc;
    }
    Ok(total)
}

fn rho_m_gradient<T: Real>(
    ctx: &MfgContext<T>,
    state: &PrimalDualState<T>,
    params: &ModelParams<T>,
    floor: Option<T>,
) -> Result<(Array3<T>, VectorField<T>)> {
    let grid = &ctx.grid;
    let (mut c, mut b) = dual_coefficients(ctx, params, &state.phi, &state.a, &state.theta);
    let two = lit::<T>(2.0);
    for k in 1..grid.nt {
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let mut r = state.rho[[k, i, j]];
                match floor {
                    Some(f) => r = r.max(f),
                    None if !(r > T::zero()) => {
                        return Err(Error::DomainViolation {
                            t: k,
                            i,
                            j,
                            value: to_f64(r),
                        })
                    }
                    None => {}
                }
                let kap = params.kappa[[i, j]];
                let (mx, my) = (state.m.x[[k, i, j]], state.m.y[[k, i, j]]);
                c[[k, i, j]] -= (mx * mx + my * my) / (two * kap * r * r);
                b.x[[k, i, j]] += mx / (kap * r);
                b.y[[k, i, j]] += my / (kap * r);
            }
        }
    }
    Ok((c, b))
}

/// `(∂_ρ𝓛, ∂_m𝓛)` per unit space-time weight, slices `k ≥ 1` (slice 0 is
/// pinned and returned as zero). Requires `ρ > 0` on those slices.
pub fn grad_rho_m<T: Real>(
    ctx: &MfgContext<T>,
    state: &PrimalDualState<T>,
    params: &ModelParams<T>,
) -> Result<(Array3<T>, VectorField<T>)> {
    rho_m_gradient(ctx, state, params, None)
}

/// `(∂_a𝓛, ∂_φ𝓛)`: `−a_k + ∫ζρ_k` for `k ≥ 1` and the Fokker–Planck
/// residual for `k < N`.
pub fn grad_a_phi<T: Real>(
    ctx: &MfgContext<T>,
    state: &PrimalDualState<T>,
    params: &ModelParams<T>,
) -> (Array2<T>, Array3<T>) {
    let mut ga = interaction_rows(ctx, params, &state.rho);
    for k in 1..ctx.grid.nt {
        for f in 0..ga.dim().1 {
            ga[[k, f]] -= state.a[[k, f]];
        }
    }
    (ga, fp_residual(ctx, params, &state.rho, &state.m))
}

/// Residual blocks of the stopping rule: the projected ρ-residual
/// `ρ − max(0, ρ − ∂_ρ𝓛)`, the flux residual `κρ∂_m𝓛 = κρ∇φ + m`, the `a`
/// residual and the Fokker–Planck residual, each as a squared space-time L²
/// norm.
pub fn gap_parts<T: Real>(
    ctx: &MfgContext<T>,
    state: &PrimalDualState<T>,
    params: &ModelParams<T>,
) -> Result<GapParts<T>> {
    let grid = &ctx.grid;
    let floor = lit::<T>(RHO_FLOOR);
    let (gr, gm) = rho_m_gradient(ctx, state, params, Some(floor))?;
    let (ga, fp) = grad_a_phi(ctx, state, params);
    let mut parts = GapParts {
        rho: T::zero(),
        m: T::zero(),
        a: T::zero(),
        phi: T::zero(),
    };
    for k in 0..grid.nt {
        if k >= 1 {
            for i in 0..grid.nx {
                for j in 0..grid.ny {
                    let w = grid.dt * grid.node_weight(i, j);
                    let r = state.rho[[k, i, j]];
                    let pr = r - (r - gr[[k, i, j]]).max(T::zero());
                    parts.rho += w * pr * pr;
                    let kr = params.kappa[[i, j]] * r.max(floor);
                    let (fx, fy) = (kr * gm.x[[k, i, j]], kr * gm.y[[k, i, j]]);
                    parts.m += w * (fx * fx + fy * fy);
                }
            }
            parts.a += grid.dt * ga.row(k).iter().map(|v| *v * *v).sum::<T>();
        }
        if k + 1 < grid.nt {
            let f = fp.index_axis(Axis(0), k);
            let mut acc = T::zero();
            for i in 0..grid.nx {
                for j in 0..grid.ny {
                    acc += grid.node_weight(i, j) * f[[i, j]] * f[[i, j]];
                }
            }
            parts.phi += grid.dt * acc;
        }
    }
    Ok(parts)
}

/// Stationarity residual used as the primal-dual gap surrogate; zero exactly
/// at saddle points.
pub fn primal_dual_gap<T: Real>(ctx: &MfgContext<T>, state: &PrimalDualState<T>, params: &ModelParams<T>) -> Result<T> {
    Ok(gap_parts(ctx, state, params)?.total())
}

// ----------------------------------------------------------------------------
// proximal steps

/// Solves the per-node proximal problem
/// `min c ρ + b·m + |m|²/(2κρ) + (ρ − ρⁿ)²/(2α_ρ) + |m − mⁿ|²/(2α_m)`
/// over `ρ ≥ 0`. Returns `None` if the root solve does not converge.
#[allow(clippy::too_many_arguments)]
pub fn prox_node<T: Real>(
    rho_prev: T,
    m_prev: [T; 2],
    c: T,
    b: [T; 2],
    kappa: T,
    alpha_rho: T,
    alpha_m: T,
) -> Option<(T, [T; 2])> {
    let vx = m_prev[0] - alpha_m * b[0];
    let vy = m_prev[1] - alpha_m * b[1];
    let v2 = vx * vx + vy * vy;
    let half = lit::<T>(0.5);
    let shift = alpha_rho * c - rho_prev;
    let pull = half * alpha_rho * kappa * v2;
    let f = |r: T| {
        let d = kappa * r + alpha_m;
        r + shift - pull / (d * d)
    };
    let f0 = f(T::zero());
    if f0 >= T::zero() {
        return Some((T::zero(), [T::zero(), T::zero()]));
    }
    // F is increasing with F(ρ) ≥ ρ + F(0), so the root lies in (0, −F(0)].
    // Newton steps are accepted while they stay inside the bracket and
    // shrink it fast enough; otherwise the bracket is bisected.
    let tol = T::solver_eps();
    let scale = T::one() + rho_prev.abs() + shift.abs();
    let (mut lo, mut hi) = (T::zero(), -f0);
    let mut r = rho_prev.max(T::zero()).min(hi);
    let mut dx_old = hi - lo;
    let mut dx = dx_old;
    let mut done = false;
    let mut fr = f(r);
    for _ in 0..60 {
        if fr.abs() <= tol * scale {
            done = true;
            break;
        }
        if fr < T::zero() {
            lo = r;
        } else {
            hi = r;
        }
        let d = kappa * r + alpha_m;
        let slope = T::one() + lit::<T>(2.0) * pull * kappa / (d * d * d);
        let newton = r - fr / slope;
        if !(newton > lo && newton < hi) || (fr + fr).abs() > (dx_old * slope).abs() {
            dx_old = dx;
            dx = half * (hi - lo);
            r = lo + dx;
        } else {
            dx_old = dx;
            dx = fr / slope;
            r = newton;
        }
        fr = f(r);
        if dx.abs() <= tol * r.max(T::one()) {
            done = true;
            break;
        }
    }
    if !done && fr.abs() > tol.sqrt() * scale {
        return None;
    }
    let s = kappa * r / (kappa * r + alpha_m);
    Some((r, [s * vx, s * vy]))
}

/// Per-slice data of the primal step: the previous iterate and the linear
/// coefficients at the extrapolated dual point.
struct SliceProx<'a, T> {
    rho: &'a [T],
    mx: &'a [T],
    my: &'a [T],
    c: &'a [T],
    bx: &'a [T],
    by: &'a [T],
    kappa: &'a [T],
    weights: &'a [T],
    steps: &'a StepSizes<T>,
}

impl<T: Real> SliceProx<'_, T> {
    /// Solves every node with `c` shifted by `theta` and returns the slice
    /// mass together with its derivative in `theta`.
    fn eval(&self, theta: T, out: (&mut [T], &mut [T], &mut [T])) -> std::result::Result<(T, T), usize> {
        let (out_r, out_mx, out_my) = out;
        let (ar, am) = (self.steps.alpha_rho, self.steps.alpha_m);
        let two = lit::<T>(2.0);
        let mut mass = T::zero();
        let mut slope = T::zero();
        for n in 0..self.rho.len() {
            let (r, mm) = prox_node(
                self.rho[n],
                [self.mx[n], self.my[n]],
                self.c[n] + theta,
                [self.bx[n], self.by[n]],
                self.kappa[n],
                ar,
                am,
            )
            .ok_or(n)?;
            out_r[n] = r;
            out_mx[n] = mm[0];
            out_my[n] = mm[1];
            mass += self.weights[n] * r;
            if r > T::zero() {
                // dρ/dθ = −α_ρ / F'(ρ) from the optimality equation.
                let vx = self.mx[n] - am * self.bx[n];
                let vy = self.my[n] - am * self.by[n];
                let pull = ar * self.kappa[n] * (vx * vx + vy * vy) / two;
                let d = self.kappa[n] * r + am;
                let fp = T::one() + two * pull * self.kappa[n] / (d * d * d);
                slope -= self.weights[n] * ar / fp;
            }
        }
        Ok((mass, slope))
    }

    /// Finds the shift `theta` for which the slice carries `target` mass.
    /// Mass is non-increasing in `theta`; Newton steps are safeguarded by a
    /// bracket that is grown until it encloses the root.
    fn conserve(
        &self,
        target: T,
        mut theta: T,
        out: (&mut [T], &mut [T], &mut [T]),
    ) -> std::result::Result<T, Option<usize>> {
        let (out_r, out_mx, out_my) = out;
        let tol = T::solver_eps() * target.max(T::one());
        let (mut lo, mut hi) = (T::neg_infinity(), T::infinity());
        let mut step = T::one() / self.steps.alpha_rho;
        for _ in 0..200 {
            let (mass, slope) = self
                .eval(theta, (&mut *out_r, &mut *out_mx, &mut *out_my))
                .map_err(Some)?;
            let err = mass - target;
            if err.abs() <= tol {
                return Ok(theta);
            }
            if err > T::zero() {
                lo = theta;
            } else {
                hi = theta;
            }
            let newton = if slope < T::zero() {
                theta - err / slope
            } else {
                T::nan()
            };
            theta = if newton > lo && newton < hi {
                newton
            } else if lo.is_finite() && hi.is_finite() {
                (lo + hi) / lit(2.0)
            } else if lo.is_finite() {
                step = step + step;
                lo + step
            } else {
                step = step + step;
                hi - step
            };
            if lo.is_finite() && hi.is_finite() && hi - lo <= T::epsilon() * (T::one() + theta.abs()) {
                return Ok(theta);
            }
        }
        Err(None)
    }
}

#[allow(clippy::too_many_arguments)]
fn prox_rho_m_at<T: Real>(
    ctx: &MfgContext<T>,
    event: &EventData<T>,
    rho: &Array3<T>,
    m: &VectorField<T>,
    phi_bar: &Array3<T>,
    a_bar: &Array2<T>,
    theta: &[T],
    params: &ModelParams<T>,
    steps: &StepSizes<T>,
    conserve_mass: bool,
) -> Result<(Array3<T>, VectorField<T>, Vec<T>)> {
    let grid = &ctx.grid;
    // With mass conserved explicitly the shift is solved for per slice, so
    // the coefficients are built without it.
    let zero = vec![T::zero(); grid.nt];
    let shift = if conserve_mass { &zero[..] } else { theta };
    let (c, b) = dual_coefficients(ctx, params, phi_bar, a_bar, shift);
    let mut rho_new = grid.zeros();
    let mut m_new = VectorField::zeros(grid.shape());
    rho_new.index_axis_mut(Axis(0), 0).assign(&event.rho0);
    let plane = grid.nx * grid.ny;
    let weights: Vec<T> = grid.spatial_weights(Region::Full).iter().copied().collect();
    let target = integrate_slice(grid, event.rho0.view(), Region::Full);
    let kappa = params.kappa.as_slice().expect("standard layout");
    let (rs, mxs, mys) = (flat(rho), flat(&m.x), flat(&m.y));
    let (cs, bxs, bys) = (flat(&c), flat(&b.x), flat(&b.y));
    let mut out_theta = theta.to_vec();
    out_theta[0] = T::zero();
    let out_r = flat_mut(&mut rho_new);
    let mut out_mx = vec![T::zero(); rs.len()];
    let mut out_my = vec![T::zero(); rs.len()];
    for k in 1..grid.nt {
        let span = k * plane..(k + 1) * plane;
        let slice = SliceProx {
            rho: &rs[span.clone()],
            mx: &mxs[span.clone()],
            my: &mys[span.clone()],
            c: &cs[span.clone()],
            bx: &bxs[span.clone()],
            by: &bys[span.clone()],
            kappa,
            weights: &weights,
            steps,
        };
        let out = (
            &mut out_r[span.clone()],
            &mut out_mx[span.clone()],
            &mut out_my[span.clone()],
        );
        let node_error = |n: usize| Error::RootFinder {
            t: k,
            i: n / grid.ny,
            j: n % grid.ny,
        };
        if conserve_mass {
            out_theta[k] = slice.conserve(target, theta[k], out).map_err(|e| match e {
                Some(n) => node_error(n),
                None => Error::SolverFailed {
                    what: "mass-constrained primal step",
                    residual: f64::NAN,
                    iterations: 200,
                },
            })?;
        } else {
            slice.eval(T::zero(), out).map_err(node_error)?;
        }
    }
    flat_mut(&mut m_new.x).copy_from_slice(&out_mx);
    flat_mut(&mut m_new.y).copy_from_slice(&out_my);
    Ok((rho_new, m_new, out_theta))
}

/// Proximal step in `(ρ, m)` evaluated at the dual point `(state.phi,
/// state.a)`, starting from `(state.rho, state.m)`. With `conserve_mass` the
/// mass multiplier is re-solved so that every slice keeps the initial mass;
/// otherwise `state.theta` is used as given.
pub fn prox_rho_m<T: Real>(
    ctx: &MfgContext<T>,
    event: &EventData<T>,
    state: &PrimalDualState<T>,
    params: &ModelParams<T>,
    steps: &StepSizes<T>,
    conserve_mass: bool,
) -> Result<(Array3<T>, VectorField<T>, Vec<T>)> {
    prox_rho_m_at(
        ctx,
        event,
        &state.rho,
        &state.m,
        &state.phi,
        &state.a,
        &state.theta,
        params,
        steps,
        conserve_mass,
    )
}

/// Metric-preconditioned ascent step in φ against the new primal iterate.
#[allow(clippy::too_many_arguments)]
pub fn prox_phi<T: Real>(
    ctx: &MfgContext<T>,
    event: &EventData<T>,
    phi: &Array3<T>,
    rho_new: &Array3<T>,
    m_new: &VectorField<T>,
    params: &ModelParams<T>,
    steps: &StepSizes<T>,
    metric: &MetricSolver<T>,
    solver: PhiSolver,
) -> Result<Array3<T>> {
    let grid = &ctx.grid;
    let n = grid.nt - 1;
    let rhs = metric.gradient_rhs(&fp_residual(ctx, params, rho_new, m_new));
    let inc = match solver {
        PhiSolver::Spectral => metric.solve(&rhs),
        PhiSolver::ConjugateGradient => metric.solve_cg(grid, &rhs, lit(1e-10), 5000)?,
    };
    let mut out = phi.clone();
    out.slice_mut(s![..n, .., ..]).scaled_add(steps.alpha_phi, &inc);
    out.index_axis_mut(Axis(0), n).assign(&event.g);
    Ok(out)
}

/// Closed-form step `a = (aⁿ + α_a ∫ζρ)/(1 + α_a)` for every slice `k ≥ 1`.
pub fn prox_a<T: Real>(
    ctx: &MfgContext<T>,
    a: &Array2<T>,
    rho_new: &Array3<T>,
    params: &ModelParams<T>,
    steps: &StepSizes<T>,
) -> Array2<T> {
    let mut out = interaction_rows(ctx, params, rho_new);
    let denom = T::one() + steps.alpha_a;
    for k in 1..ctx.grid.nt {
        for f in 0..out.dim().1 {
            out[[k, f]] = (a[[k, f]] + steps.alpha_a * out[[k, f]]) / denom;
        }
    }
    out
}

/// Over-relaxation `2·new − old`.
pub fn extrapolate<T: Real, D: ndarray::Dimension>(
    new: &ndarray::Array<T, D>,
    old: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut out = new.clone();
    out.zip_mut_with(old, |n, o| *n = *n + *n - *o);
    out
}

/// Runs the primal-dual iteration until the gap falls below `e_tol` or the
/// iteration cap is reached (`converged == false`). At least one sweep is
/// always performed.
pub fn solve_forward<T: Real>(
    ctx: &MfgContext<T>,
    event: &EventData<T>,
    params: &ModelParams<T>,
    init: PrimalDualState<T>,
    settings: &ForwardSettings<T>,
) -> Result<ForwardSolution<T>> {
    settings.steps.validate()?;
    init.validate(ctx)?;
    let grid = &ctx.grid;
    let metric = MetricSolver::new(grid, settings.metric, params.nu);
    let mut state = init;
    state.pin(event);
    let mut phi_bar = state.phi.clone();
    let mut a_bar = state.a.clone();
    let mut steps = settings.steps;
    let mut history = Vec::new();
    let mut backoffs = 0;
    let mut window_best = T::infinity();
    let mut prev_window_best = T::infinity();
    let mut gap = T::infinity();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < settings.max_iter.max(1) {
        let (rho, m, theta) = prox_rho_m_at(
            ctx,
            event,
            &state.rho,
            &state.m,
            &phi_bar,
            &a_bar,
            &state.theta,
            params,
            &steps,
            settings.conserve_mass,
        )?;
        let phi = prox_phi(
            ctx,
            event,
            &state.phi,
            &rho,
            &m,
            params,
            &steps,
            &metric,
            settings.phi_solver,
        )?;
        let a = prox_a(ctx, &state.a, &rho, params, &steps);
        if !(phi.iter().all(|v| v.is_finite()) && a.iter().all(|v| v.is_finite())) {
            return Err(Error::SolverFailed {
                what: "forward primal-dual iteration diverged",
                residual: f64::INFINITY,
                iterations: iterations + 1,
            });
        }
        phi_bar = extrapolate(&phi, &state.phi);
        a_bar = extrapolate(&a, &state.a);
        state = PrimalDualState { rho, m, phi, a, theta };
        iterations += 1;

        gap = primal_dual_gap(ctx, &state, params)?;
        if !gap.is_finite() {
            return Err(Error::SolverFailed {
                what: "forward primal-dual iteration",
                residual: to_f64(gap),
                iterations,
            });
        }
        history.push(GapRecord {
            iteration: iterations,
            gap,
            mass_drift: state.mass_drift(grid),
        });
        if gap < settings.e_tol {
            converged = true;
            break;
        }
        window_best = window_best.min(gap);
        if settings.stagnation_window > 0 && iterations % settings.stagnation_window == 0 {
            if window_best > lit::<T>(0.9) * prev_window_best && backoffs < settings.max_backoffs {
                steps = steps.halved();
                backoffs += 1;
                phi_bar = state.phi.clone();
                a_bar = state.a.clone();
            }
            prev_window_best = window_best;
            window_best = T::infinity();
        }
    }
    Ok(ForwardSolution {
        state,
        converged,
        iterations,
        gap,
        steps,
        history,
    })
}
