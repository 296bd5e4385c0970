//! Boundary measurements on the inner box and their adjoints.
//!
//! The measured quantities are the density and the normal flux `m·n` on the
//! nodes of the inner box boundary, listed counter-clockwise from the
//! south-west corner. Each node carries the outward normal of the face it
//! starts (corners belong to the face that leaves them counter-clockwise).
//!
//! The adjoints are harmonic extensions, computed independently per time
//! slice on the inner box and on its complement. Both subdomains use the
//! graph energy `a(v, w) = Σ_e c_e (v_p − v_q)(w_p − w_q)` over grid edges,
//! with `c_e = ½` on edges that lie on the subdomain boundary. Minimising it
//! gives the 5-point Laplacian at interior nodes and the ghost-node Neumann
//! closure on the boundary, and the boundary pairing is `⟨f, v⟩ = Σ_b h f_b
//! v_b`. With these choices `a(N f, v) = ⟨f, v|_∂⟩` holds exactly for the
//! Neumann extension `N`.
//!
//! All extensions are linear in the boundary data, so they are precomputed
//! once per grid as dense response matrices.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::grid::{InnerBox, Region, SpaceTimeGrid, VectorField};
use crate::linalg::conjugate_gradient;
use crate::real::{from_usize, lit, Real};

/// Density and normal-flux samples, both shaped `(nt, nb)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryTrace<T> {
    pub rho: Array2<T>,
    pub flux: Array2<T>,
}

impl<T: Real> BoundaryTrace<T> {
    pub fn zeros(nt: usize, nb: usize) -> Self {
        Self {
            rho: Array2::zeros((nt, nb)),
            flux: Array2::zeros((nt, nb)),
        }
    }

    pub fn validate(&self, nt: usize, nb: usize) -> Result<()> {
        if self.rho.dim() != (nt, nb) || self.flux.dim() != (nt, nb) {
            return Err(Error::Shape(format!(
                "trace has shapes {:?}/{:?}, expected {:?}",
                self.rho.dim(),
                self.flux.dim(),
                (nt, nb)
            )));
        }
        if self.rho.iter().chain(self.flux.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("trace contains non-finite values".into()));
        }
        Ok(())
    }

    /// `self − other`, componentwise.
    pub fn minus(&self, other: &Self) -> Self {
        Self {
            rho: &self.rho - &other.rho,
            flux: &self.flux - &other.flux,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryNode {
    pub i: usize,
    pub j: usize,
    /// Outward unit normal along the grid axes.
    pub normal: [i8; 2],
}

/// Nodes of the inner box boundary, counter-clockwise from `(i0, j0)`.
pub fn boundary_nodes(b: &InnerBox) -> Vec<BoundaryNode> {
    let mut out = Vec::with_capacity(2 * (b.i1 - b.i0 + b.j1 - b.j0));
    for i in b.i0..b.i1 {
        out.push(BoundaryNode {
            i,
            j: b.j0,
            normal: [0, -1],
        });
    }
    for j in b.j0..b.j1 {
        out.push(BoundaryNode {
            i: b.i1,
            j,
            normal: [1, 0],
        });
    }
    for i in (b.i0 + 1..=b.i1).rev() {
        out.push(BoundaryNode {
            i,
            j: b.j1,
            normal: [0, 1],
        });
    }
    for j in (b.j0 + 1..=b.j1).rev() {
        out.push(BoundaryNode {
            i: b.i0,
            j,
            normal: [-1, 0],
        });
    }
    out
}

/// Squared space-time L² norm of boundary samples: trapezoid weights in time
/// and `h` per node along the loop.
pub fn boundary_norm_sq<T: Real>(grid: &SpaceTimeGrid<T>, values: ArrayView2<T>) -> T {
    let wt = grid.time_weights();
    values
        .outer_iter()
        .zip(&wt)
        .map(|(row, w)| *w * grid.h * row.iter().map(|v| *v * *v).sum::<T>())
        .sum()
}

/// `∫∫ (|ρ-part|² + |flux-part|²)` of the difference of two traces.
pub fn trace_misfit<T: Real>(grid: &SpaceTimeGrid<T>, a: &BoundaryTrace<T>, b: &BoundaryTrace<T>) -> T {
    let d = a.minus(b);
    boundary_norm_sq(grid, d.rho.view()) + boundary_norm_sq(grid, d.flux.view())
}

const ABSENT: usize = usize::MAX;

/// Closed subdomain of the grid with its edge graph.
#[derive(Clone, Debug)]
struct Subdomain<T> {
    nodes: Vec<(usize, usize)>,
    local: Array2<usize>,
    /// Local endpoints and conductance.
    edges: Vec<(usize, usize, T)>,
    /// Quadrature weights used for the zero-mean gauge.
    weights: Vec<T>,
}

impl<T: Real> Subdomain<T> {
    fn build(
        grid: &SpaceTimeGrid<T>,
        member: impl Fn(usize, usize) -> bool,
        on_boundary: impl Fn(usize, usize) -> bool,
        region: Region,
    ) -> Self {
        let mut local = Array2::from_elem((grid.nx, grid.ny), ABSENT);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                if member(i, j) {
                    local[[i, j]] = nodes.len();
                    nodes.push((i, j));
                    weights.push(grid.region_weight(region, i, j));
                }
            }
        }
        let half = lit::<T>(0.5);
        let mut edges = Vec::new();
        for (p, &(i, j)) in nodes.iter().enumerate() {
            for (ni, nj) in [(i + 1, j), (i, j + 1)] {
                if ni < grid.nx && nj < grid.ny && local[[ni, nj]] != ABSENT {
                    let c = if on_boundary(i, j) && on_boundary(ni, nj) {
                        half
                    } else {
                        T::one()
                    };
                    edges.push((p, local[[ni, nj]], c));
                }
            }
        }
        Self {
            nodes,
            local,
            edges,
            weights,
        }
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        y.iter_mut().for_each(|v| *v = T::zero());
        for &(p, q, c) in &self.edges {
            let d = c * (x[p] - x[q]);
            y[p] += d;
            y[q] -= d;
        }
    }

    fn diagonal(&self) -> Vec<T> {
        let mut d = vec![T::zero(); self.len()];
        for &(p, q, c) in &self.edges {
            d[p] += c;
            d[q] += c;
        }
        d
    }

    fn energy(&self, u: &[T], v: &[T]) -> T {
        self.edges
            .iter()
            .map(|&(p, q, c)| c * (u[p] - u[q]) * (v[p] - v[q]))
            .sum()
    }

    /// Solves the energy minimisation with `fixed` nodes prescribed (values
    /// taken from `x`) and the load `rhs` on free nodes. With no fixed nodes
    /// the problem is the singular Neumann one; the load must then be
    /// compatible and the result is returned with zero weighted mean.
    fn solve(&self, fixed: &[bool], rhs: &[T], x: &mut [T]) -> Result<()> {
        let n = self.len();
        let free: Vec<usize> = (0..n).filter(|&p| !fixed[p]).collect();
        // load on free nodes: rhs − K_fb x_b
        let mut xb = x.to_vec();
        free.iter().for_each(|&p| xb[p] = T::zero());
        let mut kb = vec![T::zero(); n];
        self.apply(&xb, &mut kb);
        let b: Vec<T> = free.iter().map(|&p| rhs[p] - kb[p]).collect();
        let diag = self.diagonal();
        let precond: Vec<T> = free.iter().map(|&p| T::one() / diag[p]).collect();
        let apply = |v: &[T], out: &mut [T]| {
            let mut full = vec![T::zero(); n];
            for (k, &p) in free.iter().enumerate() {
                full[p] = v[k];
            }
            let mut y = vec![T::zero(); n];
            self.apply(&full, &mut y);
            for (k, &p) in free.iter().enumerate() {
                out[k] = y[p];
            }
        };
        let mut sol = vec![T::zero(); free.len()];
        let tol = T::solver_eps() * lit(0.1);
        conjugate_gradient(apply, Some(&precond), &b, &mut sol, tol, 20 * n + 100)?;
        for (k, &p) in free.iter().enumerate() {
            x[p] = sol[k];
        }
        if free.len() == n {
            let total: T = self.weights.iter().copied().sum();
            let mean = self.weights.iter().zip(x.iter()).map(|(w, v)| *w * *v).sum::<T>() / total;
            x.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(())
    }
}

/// Harmonic extensions of a boundary mismatch, one per time slice.
#[derive(Clone, Debug)]
pub struct ExtensionPair<T> {
    /// Dirichlet extension of the density mismatch; continuous across the
    /// box boundary and zero on the outer boundary.
    pub eta: Array3<T>,
    /// Neumann potential of the flux mismatch: inner-box values on the closed
    /// box, outer values elsewhere.
    pub xi: Array3<T>,
    /// Gradient of the Neumann potential, taken within each subdomain. Normal
    /// components on boundaries are the prescribed data.
    pub grad_xi: VectorField<T>,
    /// Mean of the flux mismatch removed per slice to make the Neumann
    /// problems solvable.
    pub flux_mean: Vec<T>,
}

/// Trace operator and its harmonic-extension adjoints for one grid.
#[derive(Clone, Debug)]
pub struct BoundaryOps<T> {
    nodes: Vec<BoundaryNode>,
    slot: Array2<usize>,
    inner: Subdomain<T>,
    outer: Subdomain<T>,
    /// Response matrices, `(subdomain nodes, nb)`.
    dirichlet_inner: Array2<T>,
    dirichlet_outer: Array2<T>,
    neumann_inner: Array2<T>,
    neumann_outer: Array2<T>,
    inner_box: InnerBox,
    h: T,
    nx: usize,
    ny: usize,
}

impl<T: Real> BoundaryOps<T> {
    pub fn new(grid: &SpaceTimeGrid<T>) -> Result<Self> {
        let ib = grid.inner;
        let nodes = boundary_nodes(&ib);
        let nb = nodes.len();
        let mut slot = Array2::from_elem((grid.nx, grid.ny), ABSENT);
        for (b, n) in nodes.iter().enumerate() {
            slot[[n.i, n.j]] = b;
        }
        let (nx, ny) = (grid.nx, grid.ny);
        let outer_edge = move |i: usize, j: usize| i == 0 || j == 0 || i + 1 == nx || j + 1 == ny;
        let inner = Subdomain::build(
            grid,
            |i, j| ib.contains_closed(i, j),
            |i, j| ib.on_interface(i, j),
            Region::Inner,
        );
        let outer = Subdomain::build(
            grid,
            |i, j| !ib.contains_open(i, j),
            |i, j| ib.on_interface(i, j) || outer_edge(i, j),
            Region::Outer,
        );

        let mut dirichlet_inner = Array2::zeros((inner.len(), nb));
        let mut dirichlet_outer = Array2::zeros((outer.len(), nb));
        let mut neumann_inner = Array2::zeros((inner.len(), nb));
        let mut neumann_outer = Array2::zeros((outer.len(), nb));
        let fixed_inner: Vec<bool> = inner.nodes.iter().map(|&(i, j)| ib.on_interface(i, j)).collect();
        let fixed_outer: Vec<bool> = outer
            .nodes
            .iter()
            .map(|&(i, j)| ib.on_interface(i, j) || outer_edge(i, j))
            .collect();
        let no_fixed_inner = vec![false; inner.len()];
        let no_fixed_outer = vec![false; outer.len()];
        let mean = T::one() / from_usize::<T>(nb);
        for (b, n) in nodes.iter().enumerate() {
            // Dirichlet: unit value at node b, zero elsewhere on the boundary.
            let mut x = vec![T::zero(); inner.len()];
            x[inner.local[[n.i, n.j]]] = T::one();
            inner.solve(&fixed_inner, &vec![T::zero(); inner.len()], &mut x)?;
            dirichlet_inner.column_mut(b).assign(&Array1::from(x));
            let mut x = vec![T::zero(); outer.len()];
            x[outer.local[[n.i, n.j]]] = T::one();
            outer.solve(&fixed_outer, &vec![T::zero(); outer.len()], &mut x)?;
            dirichlet_outer.column_mut(b).assign(&Array1::from(x));

            // Neumann: zero-mean unit flux at node b. Inside the normal is n,
            // outside it is −n, so the outer load changes sign.
            let mut load = vec![T::zero(); inner.len()];
            for (c, m) in nodes.iter().enumerate() {
                let d = if c == b { T::one() - mean } else { -mean };
                load[inner.local[[m.i, m.j]]] = grid.h * d;
            }
            let mut x = vec![T::zero(); inner.len()];
            inner.solve(&no_fixed_inner, &load, &mut x)?;
            neumann_inner.column_mut(b).assign(&Array1::from(x));
            let mut load = vec![T::zero(); outer.len()];
            for (c, m) in nodes.iter().enumerate() {
                let d = if c == b { T::one() - mean } else { -mean };
                load[outer.local[[m.i, m.j]]] = -grid.h * d;
            }
            let mut x = vec![T::zero(); outer.len()];
            outer.solve(&no_fixed_outer, &load, &mut x)?;
            neumann_outer.column_mut(b).assign(&Array1::from(x));
        }
        Ok(Self {
            nodes,
            slot,
            inner,
            outer,
            dirichlet_inner,
            dirichlet_outer,
            neumann_inner,
            neumann_outer,
            inner_box: ib,
            h: grid.h,
            nx: grid.nx,
            ny: grid.ny,
        })
    }

    pub fn nodes(&self) -> &[BoundaryNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Samples `ρ` and `m·n` on the boundary nodes of every slice.
    pub fn trace(&self, rho: &Array3<T>, m: &VectorField<T>) -> BoundaryTrace<T> {
        let nt = rho.dim().0;
        let mut out = BoundaryTrace::zeros(nt, self.len());
        for k in 0..nt {
            for (b, n) in self.nodes.iter().enumerate() {
                out.rho[[k, b]] = rho[[k, n.i, n.j]];
                out.flux[[k, b]] =
                    m.x[[k, n.i, n.j]] * lit(n.normal[0] as f64) + m.y[[k, n.i, n.j]] * lit(n.normal[1] as f64);
            }
        }
        out
    }

    /// Boundary pairing `Σ_b h u_b w_b` of one slice.
    pub fn pairing(&self, u: ArrayView1<T>, w: ArrayView1<T>) -> T {
        self.h * u.dot(&w)
    }

    /// Energy `a(u, v)` of two full-grid slices restricted to the inner box.
    pub fn inner_energy(&self, u: ArrayView2<T>, v: ArrayView2<T>) -> T {
        let pick = |f: ArrayView2<T>| self.inner.nodes.iter().map(|&(i, j)| f[[i, j]]).collect::<Vec<_>>();
        self.inner.energy(&pick(u), &pick(v))
    }

    /// Same as [`inner_energy`](Self::inner_energy) on the complement of the
    /// open box.
    pub fn outer_energy(&self, u: ArrayView2<T>, v: ArrayView2<T>) -> T {
        let pick = |f: ArrayView2<T>| self.outer.nodes.iter().map(|&(i, j)| f[[i, j]]).collect::<Vec<_>>();
        self.outer.energy(&pick(u), &pick(v))
    }

    fn check_len(&self, u: ArrayView1<T>) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} boundary values for {} nodes",
                u.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Dirichlet harmonic extension of one slice of boundary values: harmonic
    /// in the box and in its complement, zero on the outer boundary.
    pub fn dirichlet_extend_slice(&self, u: ArrayView1<T>) -> Result<Array2<T>> {
        self.check_len(u)?;
        let mut out = Array2::zeros((self.nx, self.ny));
        let outer = self.dirichlet_outer.dot(&u);
        for (p, &(i, j)) in self.outer.nodes.iter().enumerate() {
            out[[i, j]] = outer[p];
        }
        let inner = self.dirichlet_inner.dot(&u);
        for (p, &(i, j)) in self.inner.nodes.iter().enumerate() {
            out[[i, j]] = inner[p];
        }
        Ok(out)
    }

    /// Neumann potential of one slice of normal-flux data, after removing
    /// its mean. Returns the potential, its gradient and the removed mean.
    pub fn neumann_extend_slice(&self, f: ArrayView1<T>) -> Result<(Array2<T>, [Array2<T>; 2], T)> {
        self.check_len(f)?;
        let mean = f.sum() / from_usize(self.len());
        let inner = self.neumann_inner.dot(&f);
        let outer = self.neumann_outer.dot(&f);
        let mut xi = Array2::zeros((self.nx, self.ny));
        let mut xi_out = Array2::zeros((self.nx, self.ny));
        for (p, &(i, j)) in self.outer.nodes.iter().enumerate() {
            xi[[i, j]] = outer[p];
            xi_out[[i, j]] = outer[p];
        }
        for (p, &(i, j)) in self.inner.nodes.iter().enumerate() {
            xi[[i, j]] = inner[p];
        }
        let grad = self.potential_gradient(&xi, &xi_out, |b| f[b] - mean);
        Ok((xi, grad, mean))
    }

    /// Gradient of the piecewise potential. Inside the closed box it uses
    /// box values; elsewhere the outer values. On a boundary face the normal
    /// component is the prescribed flux, zero on the outer boundary.
    fn potential_gradient(&self, xi_in: &Array2<T>, xi_out: &Array2<T>, flux: impl Fn(usize) -> T) -> [Array2<T>; 2] {
        let (nx, ny) = (self.nx, self.ny);
        let two_h = self.h + self.h;
        let mut gx = Array2::zeros((nx, ny));
        let mut gy = Array2::zeros((nx, ny));
        let ib = &self.inner_box;
        for i in 0..nx {
            for j in 0..ny {
                if ib.contains_closed(i, j) {
                    let v = xi_in;
                    gx[[i, j]] = if i == ib.i0 || i == ib.i1 {
                        let sign = if i == ib.i1 { T::one() } else { -T::one() };
                        sign * flux(self.slot[[i, j]])
                    } else {
                        (v[[i + 1, j]] - v[[i - 1, j]]) / two_h
                    };
                    gy[[i, j]] = if j == ib.j0 || j == ib.j1 {
                        let sign = if j == ib.j1 { T::one() } else { -T::one() };
                        sign * flux(self.slot[[i, j]])
                    } else {
                        (v[[i, j + 1]] - v[[i, j - 1]]) / two_h
                    };
                } else {
                    let v = xi_out;
                    gx[[i, j]] = if i == 0 || i + 1 == nx {
                        T::zero()
                    } else {
                        (v[[i + 1, j]] - v[[i - 1, j]]) / two_h
                    };
                    gy[[i, j]] = if j == 0 || j + 1 == ny {
                        T::zero()
                    } else {
                        (v[[i, j + 1]] - v[[i, j - 1]]) / two_h
                    };
                }
            }
        }
        [gx, gy]
    }

    /// Dirichlet extension of every slice, shape `(nt, nx, ny)`.
    pub fn dirichlet_extend(&self, values: ArrayView2<T>) -> Result<Array3<T>> {
        let nt = values.dim().0;
        let mut out = Array3::zeros((nt, self.nx, self.ny));
        for k in 0..nt {
            out.index_axis_mut(Axis(0), k)
                .assign(&self.dirichlet_extend_slice(values.row(k))?);
        }
        Ok(out)
    }

    /// Neumann extension of every slice: potential, gradient and the removed
    /// per-slice means.
    pub fn neumann_extend(&self, values: ArrayView2<T>) -> Result<(Array3<T>, VectorField<T>, Vec<T>)> {
        let nt = values.dim().0;
        let mut xi = Array3::zeros((nt, self.nx, self.ny));
        let mut grad = VectorField::zeros((nt, self.nx, self.ny));
        let mut means = Vec::with_capacity(nt);
        for k in 0..nt {
            let (x, [gx, gy], mean) = self.neumann_extend_slice(values.row(k))?;
            xi.index_axis_mut(Axis(0), k).assign(&x);
            grad.x.index_axis_mut(Axis(0), k).assign(&gx);
            grad.y.index_axis_mut(Axis(0), k).assign(&gy);
            means.push(mean);
        }
        Ok((xi, grad, means))
    }

    /// Both extensions of a trace mismatch.
    pub fn extend(&self, mismatch: &BoundaryTrace<T>) -> Result<ExtensionPair<T>> {
        mismatch.validate(mismatch.rho.dim().0, self.len())?;
        let eta = self.dirichlet_extend(mismatch.rho.view())?;
        let (xi, grad_xi, flux_mean) = self.neumann_extend(mismatch.flux.view())?;
        Ok(ExtensionPair {
            eta,
            xi,
            grad_xi,
            flux_mean,
        })
    }

    /// `|u|²` in the half-order seminorm: Dirichlet energy of the harmonic
    /// extension into the box.
    pub fn seminorm_h_half(&self, u: ArrayView1<T>) -> Result<T> {
        self.check_len(u)?;
        let v = self.dirichlet_inner.dot(&u);
        Ok(self
            .inner
            .energy(v.as_slice().expect("contiguous"), v.as_slice().expect("contiguous")))
    }

    /// `|f|²` in the dual seminorm: energy of the Neumann potential in the box
    /// (of the zero-mean part of `f`).
    pub fn seminorm_h_minus_half(&self, f: ArrayView1<T>) -> Result<T> {
        self.check_len(f)?;
        let v = self.neumann_inner.dot(&f);
        Ok(self
            .inner
            .energy(v.as_slice().expect("contiguous"), v.as_slice().expect("contiguous")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> SpaceTimeGrid<f64> {
        SpaceTimeGrid::new([-1.0, 1.0, -1.0, 1.0], 0.1, 0.2, 0.1, [-0.5, 0.5, -0.5, 0.5]).unwrap()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn standard_grid_has_eighty_nodes_with_outward_normals() {
        let g = SpaceTimeGrid::<f64>::standard();
        let nodes = boundary_nodes(&g.inner);
        assert_eq!(nodes.len(), 80);
        let mut seen = std::collections::HashSet::new();
        for n in &nodes {
            assert!(g.inner.on_interface(n.i, n.j));
            assert!(seen.insert((n.i, n.j)));
            // stepping along the normal leaves the closed box
            let ni = n.i as i64 + n.normal[0] as i64;
            let nj = n.j as i64 + n.normal[1] as i64;
            assert!(!g.inner.contains_closed(ni as usize, nj as usize));
            assert_eq!(n.normal[0].abs() + n.normal[1].abs(), 1);
        }
    }

    #[test]
    fn trace_of_simple_fields() {
        let g = grid();
        let ops = BoundaryOps::new(&g).unwrap();
        let rho = Array3::from_elem(g.shape(), 1.0);
        let mut m = VectorField::zeros(g.shape());
        let t = ops.trace(&rho, &m);
        assert!(t.rho.iter().all(|v| *v == 1.0));
        assert!(t.flux.iter().all(|v| *v == 0.0));
        m.x.fill(1.0);
        let t = ops.trace(&rho, &m);
        for (b, n) in ops.nodes().iter().enumerate() {
            let expected = n.normal[0] as f64;
            assert_eq!(t.flux[[0, b]], expected);
        }
    }

    #[test]
    fn dirichlet_reproduces_a_harmonic_function() {
        // Oracle: solve the box Dirichlet problem with a dense LU on the
        // assembled 5-point system.
        let g = grid();
        let ops = BoundaryOps::new(&g).unwrap();
        let ib = g.inner;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_vec(ops.len(), &mut rng);
        let mut f = Array2::zeros(g.spatial_shape());
        for (b, n) in ops.nodes().iter().enumerate() {
            f[[n.i, n.j]] = u[b];
        }
        let interior: Vec<(usize, usize)> = (0..g.nx)
            .flat_map(|i| (0..g.ny).map(move |j| (i, j)))
            .filter(|&(i, j)| ib.contains_open(i, j))
            .collect();
        let idx = |i: usize, j: usize| interior.iter().position(|&p| p == (i, j));
        let n = interior.len();
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for (r, &(i, j)) in interior.iter().enumerate() {
            a[(r, r)] = 4.0;
            for (ni, nj) in [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)] {
                match idx(ni, nj) {
                    Some(c) => a[(r, c)] = -1.0,
                    None => rhs[r] += f[[ni, nj]],
                }
            }
        }
        let sol = a.lu().solve(&rhs).unwrap();
        for (r, &(i, j)) in interior.iter().enumerate() {
            f[[i, j]] = sol[r];
        }
        let eta = ops.dirichlet_extend_slice(u.view()).unwrap();
        for i in ib.i0..=ib.i1 {
            for j in ib.j0..=ib.j1 {
                assert!((eta[[i, j]] - f[[i, j]]).abs() < 1e-9);
            }
        }
        // maximum principle in both subdomains, zero on the outer boundary
        let (lo, hi) = u.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        for ((i, j), v) in eta.indexed_iter() {
            assert!(*v >= lo.min(0.0) - 1e-12 && *v <= hi.max(0.0) + 1e-12);
            if i == 0 || j == 0 || i + 1 == g.nx || j + 1 == g.ny {
                assert_eq!(*v, 0.0);
            }
            if ib.contains_closed(i, j) {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    /// Max errors of the Neumann potential (up to the gauge constant) and of
    /// its gradient for a harmonic `exact` with gradient `grad`.
    fn neumann_errors(h: f64, exact: fn(f64, f64) -> f64, grad: fn(f64, f64) -> [f64; 2]) -> (f64, f64) {
        let g = SpaceTimeGrid::new([-1.0, 1.0, -1.0, 1.0], h, 0.2, 0.1, [-0.5, 0.5, -0.5, 0.5]).unwrap();
        let ops = BoundaryOps::new(&g).unwrap();
        let flux: Array1<f64> = ops
            .nodes()
            .iter()
            .map(|n| {
                let d = grad(g.x(n.i), g.y(n.j));
                d[0] * n.normal[0] as f64 + d[1] * n.normal[1] as f64
            })
            .collect();
        let (xi, gxi, _) = ops.neumann_extend_slice(flux.view()).unwrap();
        let ib = g.inner;
        let (mut wsum, mut offset, mut area) = (0.0, 0.0, 0.0);
        for i in ib.i0..=ib.i1 {
            for j in ib.j0..=ib.j1 {
                let w = g.region_weight(Region::Inner, i, j);
                wsum += w * xi[[i, j]];
                offset += w * exact(g.x(i), g.y(j));
                area += w;
            }
        }
        assert!(wsum.abs() < 1e-12, "gauge {wsum}");
        offset /= area;
        let (mut e_val, mut e_grad) = (0.0f64, 0.0f64);
        for i in ib.i0..=ib.i1 {
            for j in ib.j0..=ib.j1 {
                let (x, y) = (g.x(i), g.y(j));
                e_val = e_val.max((xi[[i, j]] - exact(x, y) + offset).abs());
                let d = grad(x, y);
                e_grad = e_grad
                    .max((gxi[0][[i, j]] - d[0]).abs())
                    .max((gxi[1][[i, j]] - d[1]).abs());
            }
        }
        (e_val, e_grad)
    }

    #[test]
    fn neumann_is_exact_for_a_corner_consistent_quadratic() {
        // For x·y both faces meeting at a corner see the same normal
        // derivative, so a single sample per corner is exact.
        let (v, g) = neumann_errors(0.1, |x, y| x * y, |x, y| [y, x]);
        assert!(v < 1e-9 && g < 1e-9, "{v} {g}");
    }

    #[test]
    fn neumann_converges_for_a_general_quadratic() {
        // For x² − y² the two half-faces at a corner disagree, and the single
        // corner sample leaves an O(h) point source there.
        let f: fn(f64, f64) -> f64 = |x, y| x * x - y * y;
        let d: fn(f64, f64) -> [f64; 2] = |x, y| [2.0 * x, -2.0 * y];
        let (v1, _) = neumann_errors(0.1, f, d);
        let (v2, _) = neumann_errors(0.05, f, d);
        let (v3, _) = neumann_errors(0.025, f, d);
        assert!(v2 < v1 && v3 < v2, "{v1} {v2} {v3}");
        assert!((v1 / v3).log2() > 1.4, "{v1} -> {v3}");
    }

    #[test]
    fn zero_data_gives_zero_extensions() {
        let g = grid();
        let ops = BoundaryOps::new(&g).unwrap();
        let ext = ops.extend(&BoundaryTrace::zeros(g.nt, ops.len())).unwrap();
        assert!(ext.eta.iter().chain(ext.xi.iter()).all(|v| *v == 0.0));
        assert!(ext.grad_xi.x.iter().chain(ext.grad_xi.y.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn neumann_extension_is_the_adjoint_of_the_trace() {
        let g = grid();
        let ops = BoundaryOps::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut f = random_vec(ops.len(), &mut rng);
            let mean = f.sum() / f.len() as f64;
            f -= mean;
            let v = Array2::from_shape_fn(g.spatial_shape(), |_| rng.gen_range(-1.0..1.0));
            let (xi, _, _) = ops.neumann_extend_slice(f.view()).unwrap();
            let vb: Array1<f64> = ops.nodes().iter().map(|n| v[[n.i, n.j]]).collect();
            let lhs = ops.inner_energy(xi.view(), v.view());
            let rhs = ops.pairing(f.view(), vb.view());
            assert!((lhs - rhs).abs() < 1e-8 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
            // outside the normal is reversed
            let lhs_out = ops.outer_energy(xi_outer(&ops, &f).view(), v.view());
            assert!((lhs_out + rhs).abs() < 1e-8 * (1.0 + rhs.abs()));
        }
    }

    fn xi_outer(ops: &BoundaryOps<f64>, f: &Array1<f64>) -> Array2<f64> {
        let vals = ops.neumann_outer.dot(f);
        let mut out = Array2::zeros((ops.nx, ops.ny));
        for (p, &(i, j)) in ops.outer.nodes.iter().enumerate() {
            out[[i, j]] = vals[p];
        }
        out
    }

    #[test]
    fn dirichlet_extension_realises_the_half_order_pairing() {
        let g = grid();
        let ops = BoundaryOps::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ib = g.inner;
        for _ in 0..20 {
            let u = random_vec(ops.len(), &mut rng);
            let eu = ops.dirichlet_extend_slice(u.view()).unwrap();
            // orthogonal to every field vanishing on the box boundary
            let mut v0 = Array2::from_shape_fn(g.spatial_shape(), |_| rng.gen_range(-1.0..1.0));
            for n in ops.nodes() {
                v0[[n.i, n.j]] = 0.0;
            }
            assert!(ops.inner_energy(eu.view(), v0.view()).abs() < 1e-9);
            // and minimal among extensions with the same boundary values
            let e = ops.seminorm_h_half(u.view()).unwrap();
            let perturbed = &eu + &(&v0 * 1e-2);
            assert!(ops.inner_energy(perturbed.view(), perturbed.view()) >= e);
            assert!((ops.inner_energy(eu.view(), eu.view()) - e).abs() < 1e-10 * (1.0 + e));
            let _ = ib;
        }
    }

    #[test]
    fn seminorms_constant_and_homogeneity() {
        let g = grid();
        let ops = BoundaryOps::new(&g).unwrap();
        let ones = Array1::from_elem(ops.len(), 1.0);
        assert!(ops.seminorm_h_half(ones.view()).unwrap().abs() < 1e-20);
        assert!(ops.seminorm_h_minus_half(ones.view()).unwrap().abs() < 1e-20);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_vec(ops.len(), &mut rng);
        let u2 = &u * 2.0;
        for norm in [BoundaryOps::seminorm_h_half, BoundaryOps::seminorm_h_minus_half] {
            let (a, b) = (norm(&ops, u.view()).unwrap(), norm(&ops, u2.view()).unwrap());
            assert!((b - 4.0 * a).abs() < 1e-10 * b);
        }
        // energy identity of the dual seminorm
        let (xi, _, mean) = ops.neumann_extend_slice(u.view()).unwrap();
        let xb: Array1<f64> = ops.nodes().iter().map(|n| xi[[n.i, n.j]]).collect();
        let centred = &u - mean;
        let e = ops.seminorm_h_minus_half(u.view()).unwrap();
        assert!((ops.pairing(centred.view(), xb.view()) - e).abs() < 1e-10);
    }

    #[test]
    fn extensions_are_linear() {
        let g = grid();
        let ops = BoundaryOps::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, w) = (random_vec(ops.len(), &mut rng), random_vec(ops.len(), &mut rng));
        let comb = &u * 0.3 - &w * 1.7;
        let d = |v: &Array1<f64>| ops.dirichlet_extend_slice(v.view()).unwrap();
        let n = |v: &Array1<f64>| ops.neumann_extend_slice(v.view()).unwrap().0;
        for f in [&d as &dyn Fn(&Array1<f64>) -> Array2<f64>, &n] {
            let lhs = f(&comb);
            let rhs = f(&u) * 0.3 - f(&w) * 1.7;
            assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn misfit_of_a_single_node() {
        let g = grid();
        let nb = boundary_nodes(&g.inner).len();
        let a = BoundaryTrace::zeros(g.nt, nb);
        let mut b = a.clone();
        b.rho[[1, 3]] = 0.5;
        let wt = g.time_weights()[1];
        assert!((trace_misfit(&g, &a, &b) - 0.25 * wt * g.h).abs() < 1e-15);
        b.flux[[0, 0]] = 1.0;
        let doubled = BoundaryTrace {
            rho: &b.rho * 2.0,
            flux: &b.flux * 2.0,
        };
        assert!((trace_misfit(&g, &a, &doubled) - 4.0 * trace_misfit(&g, &a, &b)).abs() < 1e-15);
    }
}
