//! Uniform space-time grid and the finite-difference operators used by the
//! forward and inverse solvers.
//!
//! Fields are stored as `Array3` indexed `(t, i, j)` with `i` along `x` and
//! `j` along `y`. Every node carries the area of its dual cell as quadrature
//! weight (`h²` in the interior, `h²/2` on edges, `h²/4` at corners), and the
//! operators are built so that the discrete identities the solvers rely on
//! hold exactly in that weighted inner product:
//!
//! * `divergence` is the negative weighted adjoint of `gradient`;
//! * `laplacian` (ghost-node Neumann closure) is self-adjoint and has zero
//!   weighted column sums, so diffusion conserves mass.
//!
//! `laplacian` is the compact 5-point stencil while `divergence ∘ gradient`
//! is the wide (2h) stencil. Both are exact on quadratics, so they agree at
//! nodes two or more cells away from the outer boundary for such inputs; the
//! compact stencil is used wherever a Laplacian appears.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::error::{Error, Result};
use crate::real::{from_usize, lit, Real};

/// Index bounds (inclusive) of the inner sampling box on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InnerBox {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl InnerBox {
    #[inline]
    pub fn contains_closed(&self, i: usize, j: usize) -> bool {
        i >= self.i0 && i <= self.i1 && j >= self.j0 && j <= self.j1
    }

    #[inline]
    pub fn contains_open(&self, i: usize, j: usize) -> bool {
        i > self.i0 && i < self.i1 && j > self.j0 && j < self.j1
    }

    #[inline]
    pub fn on_interface(&self, i: usize, j: usize) -> bool {
        self.contains_closed(i, j) && !self.contains_open(i, j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Full,
    Inner,
    Outer,
}

#[derive(Clone, Debug)]
pub struct SpaceTimeGrid<T> {
    pub x_min: T,
    pub x_max: T,
    pub y_min: T,
    pub y_max: T,
    pub t_end: T,
    pub h: T,
    pub dt: T,
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub inner: InnerBox,
    inner_bounds: [T; 4],
    wx: Vec<T>,
    wy: Vec<T>,
}

fn steps<T: Real>(len: T, step: T, what: &str) -> Result<usize> {
    if !(step > T::zero()) || !len.is_finite() || !(len > T::zero()) {
        return Err(Error::Config(format!("{what}: non-positive extent or step")));
    }
    let ratio = len / step;
    let n = ratio.round();
    if (ratio - n).abs() > lit::<T>(1e-9) * n.max(T::one()) {
        return Err(Error::Config(format!(
            "{what}: extent {len} is not an integer multiple of step {step}"
        )));
    }
    Ok(n.to_usize().unwrap_or(0))
}

fn trapezoid_weights<T: Real>(n: usize, h: T) -> Vec<T> {
    let mut w = vec![h; n];
    w[0] = h * lit(0.5);
    w[n - 1] = h * lit(0.5);
    w
}

impl<T: Real> SpaceTimeGrid<T> {
    /// `domain` and `inner` are `[x_min, x_max, y_min, y_max]`.
    pub fn new(domain: [T; 4], h: T, t_end: T, dt: T, inner: [T; 4]) -> Result<Self> {
        let [x_min, x_max, y_min, y_max] = domain;
        let cx = steps(x_max - x_min, h, "x axis")?;
        let cy = steps(y_max - y_min, h, "y axis")?;
        let ct = steps(t_end, dt, "time axis")?;
        if cx < 3 || cy < 3 || ct < 2 {
            return Err(Error::Config("grid needs at least 4x4 nodes and 3 time slices".into()));
        }
        let snap = |v: T, lo: T, what: &str| -> Result<usize> {
            let r = (v - lo) / h;
            let n = r.round();
            if (r - n).abs() > lit(1e-9) || n < T::zero() {
                return Err(Error::Config(format!(
                    "inner box edge {what}={v} is not on a grid line"
                )));
            }
            Ok(n.to_usize().unwrap_or(0))
        };
        let ib = InnerBox {
            i0: snap(inner[0], x_min, "x_min")?,
            i1: snap(inner[1], x_min, "x_max")?,
            j0: snap(inner[2], y_min, "y_min")?,
            j1: snap(inner[3], y_min, "y_max")?,
        };
        if !(ib.i0 > 0 && ib.i1 < cx && ib.j0 > 0 && ib.j1 < cy && ib.i1 >= ib.i0 + 2 && ib.j1 >= ib.j0 + 2) {
            return Err(Error::Config(
                "inner box must lie strictly inside the domain and span at least two cells".into(),
            ));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            t_end,
            h,
            dt,
            nx: cx + 1,
            ny: cy + 1,
            nt: ct + 1,
            inner: ib,
            inner_bounds: inner,
            wx: trapezoid_weights(cx + 1, h),
            wy: trapezoid_weights(cy + 1, h),
        })
    }

    /// `[-1,1]² × [0,1]`, `h = 0.05`, `dt = 0.04`, inner box `[-0.5,0.5]²`.
    pub fn standard() -> Self {
        Self::new(
            [lit(-1.0), lit(1.0), lit(-1.0), lit(1.0)],
            lit(0.05),
            lit(1.0),
            lit(0.04),
            [lit(-0.5), lit(0.5), lit(-0.5), lit(0.5)],
        )
        .expect("default grid is valid")
    }

    pub fn inner_bounds(&self) -> [T; 4] {
        self.inner_bounds
    }

    #[inline]
    pub fn x(&self, i: usize) -> T {
        self.x_min + from_usize::<T>(i) * self.h
    }

    #[inline]
    pub fn y(&self, j: usize) -> T {
        self.y_min + from_usize::<T>(j) * self.h
    }

    #[inline]
    pub fn t(&self, k: usize) -> T {
        from_usize::<T>(k) * self.dt
    }

    /// Index of the last time slice.
    #[inline]
    pub fn last(&self) -> usize {
        self.nt - 1
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nt, self.nx, self.ny)
    }

    /// Dual-cell area of node `(i, j)` in the full domain.
    #[inline]
    pub fn node_weight(&self, i: usize, j: usize) -> T {
        self.wx[i] * self.wy[j]
    }

    fn inner_weight_1d(&self, i: usize, lo: usize, hi: usize) -> T {
        if i < lo || i > hi {
            T::zero()
        } else if i == lo || i == hi {
            self.h * lit(0.5)
        } else {
            self.h
        }
    }

    /// Quadrature weight of node `(i, j)` restricted to `region`.
    pub fn region_weight(&self, region: Region, i: usize, j: usize) -> T {
        let ib = self.inner;
        let inner = self.inner_weight_1d(i, ib.i0, ib.i1) * self.inner_weight_1d(j, ib.j0, ib.j1);
        match region {
            Region::Full => self.node_weight(i, j),
            Region::Inner => inner,
            Region::Outer => self.node_weight(i, j) - inner,
        }
    }

    pub fn spatial_weights(&self, region: Region) -> Array2<T> {
        Array2::from_shape_fn((self.nx, self.ny), |(i, j)| self.region_weight(region, i, j))
    }

    /// Trapezoid weights along time.
    pub fn time_weights(&self) -> Vec<T> {
        trapezoid_weights(self.nt, self.dt)
    }

    pub fn zeros(&self) -> Array3<T> {
        Array3::zeros(self.shape())
    }

    pub fn spatial_zeros(&self) -> Array2<T> {
        Array2::zeros(self.spatial_shape())
    }

    /// Samples `f(x, y)` at every node.
    pub fn sample<F: Fn(T, T) -> T>(&self, f: F) -> Array2<T> {
        Array2::from_shape_fn((self.nx, self.ny), |(i, j)| f(self.x(i), self.y(j)))
    }

    /// Samples `f(t, x, y)` at every space-time node.
    pub fn sample_st<F: Fn(T, T, T) -> T>(&self, f: F) -> Array3<T> {
        Array3::from_shape_fn(self.shape(), |(k, i, j)| f(self.t(k), self.x(i), self.y(j)))
    }
}

/// Pair of space-time arrays `(v₁, v₂)` on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    pub x: Array3<T>,
    pub y: Array3<T>,
}

impl<T: Real> VectorField<T> {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            x: Array3::zeros(shape),
            y: Array3::zeros(shape),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

pub type ScalarField<T> = Array3<T>;

// ----------------------------------------------------------------------------
// spatial stencils on one slice

#[inline]
fn grad_1d<T: Real>(f: &[T], n: usize, stride: usize, base: usize, idx: usize, h: T) -> T {
    let at = |k: usize| f[base + k * stride];
    if idx == 0 {
        (at(1) - at(0)) / h
    } else if idx == n - 1 {
        (at(n - 1) - at(n - 2)) / h
    } else {
        (at(idx + 1) - at(idx - 1)) / (h + h)
    }
}

/// Gradient of one spatial slice: centred differences inside, one-sided on
/// the outer boundary.
pub fn gradient<T: Real>(grid: &SpaceTimeGrid<T>, f: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
    let mut gx = grid.spatial_zeros();
    let mut gy = grid.spatial_zeros();
    gradient_into(grid, f, gx.view_mut(), gy.view_mut());
    (gx, gy)
}

pub fn gradient_into<T: Real>(
    grid: &SpaceTimeGrid<T>,
    f: ArrayView2<T>,
    mut gx: ArrayViewMut2<T>,
    mut gy: ArrayViewMut2<T>,
) {
    let (nx, ny) = (grid.nx, grid.ny);
    let f = f.as_standard_layout();
    let fs = f.as_slice().expect("standard layout");
    let h = grid.h;
    for i in 0..nx {
        for j in 0..ny {
            gx[[i, j]] = grad_1d(fs, nx, ny, j, i, h);
            gy[[i, j]] = grad_1d(fs, ny, 1, i * ny, j, h);
        }
    }
}

fn div_1d<T: Real>(v: &[T], w: &[T], h: T, out: &mut [T]) {
    let n = v.len();
    let half = lit::<T>(0.5) / h;
    let inv = T::one() / h;
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for r in 0..n {
        let s = w[r] * v[r];
        if r == 0 {
            out[0] -= inv * s;
            out[1] += inv * s;
        } else if r == n - 1 {
            out[n - 2] -= inv * s;
            out[n - 1] += inv * s;
        } else {
            out[r - 1] -= half * s;
            out[r + 1] += half * s;
        }
    }
    for c in 0..n {
        out[c] = -out[c] / w[c];
    }
}

/// Divergence of one slice, defined as the negative weighted adjoint of
/// [`gradient`]: `⟨∇f, v⟩ + ⟨f, ∇·v⟩ = 0` holds to round-off for all `f, v`.
pub fn divergence<T: Real>(grid: &SpaceTimeGrid<T>, vx: ArrayView2<T>, vy: ArrayView2<T>) -> Array2<T> {
    let mut out = grid.spatial_zeros();
    divergence_into(grid, vx, vy, out.view_mut());
    out
}

pub fn divergence_into<T: Real>(
    grid: &SpaceTimeGrid<T>,
    vx: ArrayView2<T>,
    vy: ArrayView2<T>,
    mut out: ArrayViewMut2<T>,
) {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut line = vec![T::zero(); nx.max(ny)];
    let mut res = vec![T::zero(); nx.max(ny)];
    for j in 0..ny {
        for i in 0..nx {
            line[i] = vx[[i, j]];
        }
        div_1d(&line[..nx], &grid.wx, grid.h, &mut res[..nx]);
        for i in 0..nx {
            out[[i, j]] = res[i];
        }
    }
    for i in 0..nx {
        for j in 0..ny {
            line[j] = vy[[i, j]];
        }
        div_1d(&line[..ny], &grid.wy, grid.h, &mut res[..ny]);
        for j in 0..ny {
            out[[i, j]] += res[j];
        }
    }
}

/// 5-point Laplacian of one slice with homogeneous Neumann ghost nodes.
pub fn laplacian<T: Real>(grid: &SpaceTimeGrid<T>, f: ArrayView2<T>) -> Array2<T> {
    let mut out = grid.spatial_zeros();
    laplacian_into(grid, f, out.view_mut());
    out
}

pub fn laplacian_into<T: Real>(grid: &SpaceTimeGrid<T>, f: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
    let (nx, ny) = (grid.nx, grid.ny);
    let inv_h2 = T::one() / (grid.h * grid.h);
    let two = lit::<T>(2.0);
    for i in 0..nx {
        for j in 0..ny {
            let c = f[[i, j]];
            let lx = if i == 0 {
                two * (f[[1, j]] - c)
            } else if i == nx - 1 {
                two * (f[[nx - 2, j]] - c)
            } else {
                f[[i - 1, j]] - two * c + f[[i + 1, j]]
            };
            let ly = if j == 0 {
                two * (f[[i, 1]] - c)
            } else if j == ny - 1 {
                two * (f[[i, ny - 2]] - c)
            } else {
                f[[i, j - 1]] - two * c + f[[i, j + 1]]
            };
            out[[i, j]] = (lx + ly) * inv_h2;
        }
    }
}

// ----------------------------------------------------------------------------
// space-time wrappers

pub fn gradient_field<T: Real>(grid: &SpaceTimeGrid<T>, f: &Array3<T>) -> VectorField<T> {
    let mut v = VectorField::zeros(f.dim());
    for k in 0..f.dim().0 {
        gradient_into(
            grid,
            f.index_axis(Axis(0), k),
            v.x.index_axis_mut(Axis(0), k),
            v.y.index_axis_mut(Axis(0), k),
        );
    }
    v
}

pub fn divergence_field<T: Real>(grid: &SpaceTimeGrid<T>, v: &VectorField<T>) -> Array3<T> {
    let mut out = Array3::zeros(v.x.dim());
    for k in 0..v.x.dim().0 {
        divergence_into(
            grid,
            v.x.index_axis(Axis(0), k),
            v.y.index_axis(Axis(0), k),
            out.index_axis_mut(Axis(0), k),
        );
    }
    out
}

pub fn laplacian_field<T: Real>(grid: &SpaceTimeGrid<T>, f: &Array3<T>) -> Array3<T> {
    let mut out = Array3::zeros(f.dim());
    for k in 0..f.dim().0 {
        laplacian_into(grid, f.index_axis(Axis(0), k), out.index_axis_mut(Axis(0), k));
    }
    out
}

/// Forward difference in time, `(f[k+1] - f[k]) / dt`; the last slice
/// repeats the final backward difference so the stencil stays exact on
/// affine-in-time inputs.
pub fn time_derivative<T: Real>(grid: &SpaceTimeGrid<T>, f: &Array3<T>) -> Array3<T> {
    let n = f.dim().0;
    let mut out = Array3::zeros(f.dim());
    for k in 0..n {
        let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
        Zip::from(out.index_axis_mut(Axis(0), k))
            .and(f.index_axis(Axis(0), b))
            .and(f.index_axis(Axis(0), a))
            .for_each(|o, &fb, &fa| *o = (fb - fa) / grid.dt);
    }
    out
}

/// Backward difference in time, `(f[k] - f[k-1]) / dt`; slice 0 uses the
/// first forward difference. Transpose partner of [`time_derivative`]:
/// `Σ_{k<N} (f[k+1]-f[k]) g[k] = f[N]g[N] - f[0]g[0] - Σ_{k≥1} f[k](g[k]-g[k-1])`.
pub fn backward_time_derivative<T: Real>(grid: &SpaceTimeGrid<T>, f: &Array3<T>) -> Array3<T> {
    let n = f.dim().0;
    let mut out = Array3::zeros(f.dim());
    for k in 0..n {
        let (a, b) = if k > 0 { (k - 1, k) } else { (0, 1) };
        Zip::from(out.index_axis_mut(Axis(0), k))
            .and(f.index_axis(Axis(0), b))
            .and(f.index_axis(Axis(0), a))
            .for_each(|o, &fb, &fa| *o = (fb - fa) / grid.dt);
    }
    out
}

/// Weighted sum of one spatial slice over `region`.
pub fn integrate_slice<T: Real>(grid: &SpaceTimeGrid<T>, f: ArrayView2<T>, region: Region) -> T {
    let mut acc = T::zero();
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let w = grid.region_weight(region, i, j);
            if w != T::zero() {
                acc += w * f[[i, j]];
            }
        }
    }
    acc
}

/// Space-time integral with dual-cell weights in space and the trapezoid
/// rule in time.
pub fn integrate<T: Real>(grid: &SpaceTimeGrid<T>, f: &Array3<T>, region: Region) -> T {
    let tw = grid.time_weights();
    let mut acc = T::zero();
    for (k, w) in tw.iter().enumerate() {
        acc += *w * integrate_slice(grid, f.index_axis(Axis(0), k), region);
    }
    acc
}

/// Weighted spatial inner product of two slices over the full domain.
pub fn inner_slice<T: Real>(grid: &SpaceTimeGrid<T>, a: ArrayView2<T>, b: ArrayView2<T>) -> T {
    let mut acc = T::zero();
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            acc += grid.node_weight(i, j) * a[[i, j]] * b[[i, j]];
        }
    }
    acc
}
