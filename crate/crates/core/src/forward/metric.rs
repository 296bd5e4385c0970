//! Space-time metrics for the φ proximal step and their fast inverses.
//!
//! Both metrics act on the free slices `0..N` of φ (slice `N` is pinned, so
//! increments vanish there) and are written as `‖u‖² = Σ_k τ_k ⟨(M u)_k, u_k⟩`
//! with dual-cell weights in space.
//!
//! * [`PhiMetric::H1`]: `Σ_{k≥1} dt ‖(u_k − u_{k−1})/dt‖² + Σ_{k<N} τ_k ⟨−Δu_k, u_k⟩`,
//!   `τ_0 = dt/2`, `τ_k = dt` otherwise.
//! * [`PhiMetric::Parabolic`]: `Σ_{k≥1} dt (‖(Bu)_k‖² + ⟨−Δu_{k−1}, u_{k−1}⟩)` with
//!   `(Bu)_k = (u_k − u_{k−1})/dt + νΔu_{k−1}`, `τ_k = dt`. This is the norm
//!   induced by the linear part of the saddle function, so the coupling
//!   between `(ρ, m)` and φ has operator norm at most one; it reduces to the
//!   H¹ metric when `ν = 0`.
//!
//! In the cosine basis that diagonalises the ghost-node Laplacian (with
//! trapezoid weights) each spatial mode decouples into a tridiagonal system in
//! time, so a solve costs two dense transforms per slice plus one Thomas
//! sweep per mode.

use ndarray::{s, Array2, Array3, Axis};

use crate::error::Result;
use crate::grid::{laplacian, Region, SpaceTimeGrid};
use crate::linalg::{conjugate_gradient, Tridiagonal};
use crate::real::{from_usize, lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiMetric {
    H1,
    Parabolic,
}

#[derive(Clone, Debug)]
pub struct MetricSolver<T> {
    metric: PhiMetric,
    slices: usize,
    dt: T,
    nu: T,
    /// `[p, i] = w_i v_p(i) / ‖v_p‖²`
    fwd_x: Array2<T>,
    fwd_y: Array2<T>,
    /// `[i, p] = v_p(i)`
    inv_x: Array2<T>,
    inv_y: Array2<T>,
    modes: Vec<Tridiagonal<T>>,
}

fn cosine_basis<T: Real>(n: usize, h: T) -> (Array2<T>, Array2<T>, Vec<T>) {
    let m = from_usize::<T>(n - 1);
    let pi = T::PI();
    let inv = Array2::from_shape_fn((n, n), |(i, p)| (pi * from_usize::<T>(p * i) / m).cos());
    let w: Vec<T> = (0..n)
        .map(|i| if i == 0 || i == n - 1 { h * lit(0.5) } else { h })
        .collect();
    let mut fwd = Array2::zeros((n, n));
    let mut eig = vec![T::zero(); n];
    for p in 0..n {
        let norm: T = (0..n).map(|i| w[i] * inv[[i, p]] * inv[[i, p]]).sum();
        for i in 0..n {
            fwd[[p, i]] = w[i] * inv[[i, p]] / norm;
        }
        let sn = (pi * from_usize::<T>(p) / (lit::<T>(2.0) * m)).sin();
        eig[p] = lit::<T>(4.0) * sn * sn / (h * h);
    }
    (fwd, inv, eig)
}

/// Time weights `τ_k` of the metric on the free slices.
pub fn metric_time_weights<T: Real>(metric: PhiMetric, slices: usize, dt: T) -> Vec<T> {
    let mut tau = vec![dt; slices];
    if metric == PhiMetric::H1 {
        tau[0] = dt * lit(0.5);
    }
    tau
}

impl<T: Real> MetricSolver<T> {
    pub fn new(grid: &SpaceTimeGrid<T>, metric: PhiMetric, nu: T) -> Self {
        let n = grid.nt - 1;
        let (fwd_x, inv_x, ex) = cosine_basis(grid.nx, grid.h);
        let (fwd_y, inv_y, ey) = cosine_basis(grid.ny, grid.h);
        let dt = grid.dt;
        let dt2 = dt * dt;
        let two = lit::<T>(2.0);
        let mut modes = Vec::with_capacity(grid.nx * grid.ny);
        for p in 0..grid.nx {
            for q in 0..grid.ny {
                let lam = ex[p] + ey[q];
                let (lower, diag, upper) = match metric {
                    PhiMetric::H1 => {
                        let mut lower = vec![-T::one() / dt2; n];
                        let mut upper = vec![-T::one() / dt2; n];
                        lower[0] = T::zero();
                        upper[0] = -two / dt2;
                        (lower, vec![two / dt2 + lam; n], upper)
                    }
                    PhiMetric::Parabolic => {
                        let beta = T::one() + nu * lam * dt;
                        let lower = vec![-beta / dt2; n];
                        let upper = vec![-beta / dt2; n];
                        let mut diag = vec![(T::one() + beta * beta) / dt2 + lam; n];
                        diag[0] = beta * beta / dt2 + lam;
                        (lower, diag, upper)
                    }
                };
                modes.push(Tridiagonal::factor(&lower, &diag, &upper));
            }
        }
        Self {
            metric,
            slices: n,
            dt,
            nu,
            fwd_x,
            fwd_y,
            inv_x,
            inv_y,
            modes,
        }
    }

    pub fn metric(&self) -> PhiMetric {
        self.metric
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    /// Converts a φ-derivative of the saddle function (per unit space-time
    /// weight, slices `0..N`) into the right-hand side of `M u = f`.
    pub fn gradient_rhs(&self, r: &Array3<T>) -> Array3<T> {
        let mut f = r.slice(s![..self.slices, .., ..]).to_owned();
        if self.metric == PhiMetric::H1 {
            f.index_axis_mut(Axis(0), 0).mapv_inplace(|v| v * lit(2.0));
        }
        f
    }

    /// Solves `M u = f` for `f` of shape `(N, nx, ny)`.
    pub fn solve(&self, f: &Array3<T>) -> Array3<T> {
        let (nk, nx, ny) = f.dim();
        assert_eq!(nk, self.slices, "metric solve expects the free slices only");
        let mut hat = Array3::zeros((nk, nx, ny));
        for k in 0..nk {
            let c = self.fwd_x.dot(&f.index_axis(Axis(0), k)).dot(&self.fwd_y.t());
            hat.index_axis_mut(Axis(0), k).assign(&c);
        }
        let mut line = vec![T::zero(); nk];
        for p in 0..nx {
            for q in 0..ny {
                for k in 0..nk {
                    line[k] = hat[[k, p, q]];
                }
                self.modes[p * ny + q].solve(&mut line);
                for k in 0..nk {
                    hat[[k, p, q]] = line[k];
                }
            }
        }
        let mut out = Array3::zeros((nk, nx, ny));
        for k in 0..nk {
            let u = self.inv_x.dot(&hat.index_axis(Axis(0), k)).dot(&self.inv_y.t());
            out.index_axis_mut(Axis(0), k).assign(&u);
        }
        out
    }

    /// Applies `M` in physical space to `u` of shape `(N, nx, ny)`.
    pub fn apply(&self, grid: &SpaceTimeGrid<T>, u: &Array3<T>) -> Array3<T> {
        let nk = self.slices;
        let dt = self.dt;
        let dt2 = dt * dt;
        let two = lit::<T>(2.0);
        let mut out = Array3::zeros(u.dim());
        match self.metric {
            PhiMetric::H1 => {
                for k in 0..nk {
                    let lap = laplacian(grid, u.index_axis(Axis(0), k));
                    let mut o = out.index_axis_mut(Axis(0), k);
                    o.assign(&lap.mapv(|v| -v));
                    let uk = u.index_axis(Axis(0), k);
                    if k == 0 {
                        let u1 = u.index_axis(Axis(0), 1);
                        o.zip_mut_with(&(&uk - &u1), |a, d| *a += two * *d / dt2);
                    } else {
                        let prev = u.index_axis(Axis(0), k - 1);
                        let mut t = &uk * two - prev;
                        if k + 1 < nk {
                            t = t - u.index_axis(Axis(0), k + 1);
                        }
                        o.zip_mut_with(&t, |a, d| *a += *d / dt2);
                    }
                }
            }
            PhiMetric::Parabolic => {
                // (Bu)_k for k = 1..N with u_N = 0
                let mut bu = Array3::zeros((nk + 1, grid.nx, grid.ny));
                for k in 1..=nk {
                    let prev = u.index_axis(Axis(0), k - 1);
                    let lap = laplacian(grid, prev);
                    let cur = if k < nk {
                        u.index_axis(Axis(0), k).to_owned()
                    } else {
                        Array2::zeros(prev.dim())
                    };
                    let b = (&cur - &prev) / dt + &lap * self.nu;
                    bu.index_axis_mut(Axis(0), k).assign(&b);
                }
                for j in 0..nk {
                    let next = bu.index_axis(Axis(0), j + 1);
                    let lap_next = laplacian(grid, next);
                    let lap_u = laplacian(grid, u.index_axis(Axis(0), j));
                    let mut o = &lap_next * self.nu - &next / dt - &lap_u;
                    if j >= 1 {
                        o = o + &bu.index_axis(Axis(0), j) / dt;
                    }
                    out.index_axis_mut(Axis(0), j).assign(&o);
                }
            }
        }
        out
    }

    /// Independent route: diagonally preconditioned CG on the symmetrised
    /// system `diag(τ ⊗ w) M u = diag(τ ⊗ w) f`.
    pub fn solve_cg(&self, grid: &SpaceTimeGrid<T>, f: &Array3<T>, tol: T, max_iter: usize) -> Result<Array3<T>> {
        let (nk, nx, ny) = f.dim();
        let tau = metric_time_weights(self.metric, nk, self.dt);
        let w = grid.spatial_weights(Region::Full);
        let mut scale = Array3::zeros((nk, nx, ny));
        for k in 0..nk {
            scale.slice_mut(s![k, .., ..]).assign(&w.mapv(|v| v * tau[k]));
        }
        let b: Vec<T> = (&scale * f).iter().copied().collect();
        let dt2 = self.dt * self.dt;
        let h2 = grid.h * grid.h;
        let d = match self.metric {
            PhiMetric::H1 => lit::<T>(2.0) / dt2 + lit::<T>(4.0) / h2,
            PhiMetric::Parabolic => {
                let beta = T::one() + self.nu * lit::<T>(4.0) / h2 * self.dt;
                (T::one() + beta * beta) / dt2 + lit::<T>(4.0) / h2
            }
        };
        let diag_inv: Vec<T> = scale.iter().map(|s| T::one() / (*s * d)).collect();
        let mut x = vec![T::zero(); b.len()];
        conjugate_gradient(
            |v: &[T], out: &mut [T]| {
                let u = Array3::from_shape_vec((nk, nx, ny), v.to_vec()).expect("shape");
                let au = &self.apply(grid, &u) * &scale;
                out.copy_from_slice(au.as_slice().expect("standard layout"));
            },
            Some(&diag_inv),
            &b,
            &mut x,
            tol,
            max_iter,
        )?;
        Ok(Array3::from_shape_vec((nk, nx, ny), x).expect("shape"))
    }
}
