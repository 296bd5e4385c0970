//! Feature-space representation of translation-invariant interaction
//! kernels, `K(x, y) = ζ(x)·ζ(y) = Σ_k μ_k² cos(ω_k·(x − y))`.
//!
//! Coefficients are stored reduced (one `μ_k` per frequency). The expanded
//! layout has length `2r` with entry `2k` multiplying `cos(ω_k·x)` and entry
//! `2k + 1` multiplying `sin(ω_k·x)`.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::linalg::nnls_normal;
use crate::real::{from_usize, lit, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySet<T> {
    omegas: Vec<[T; 2]>,
}

impl<T: Real> FrequencySet<T> {
    pub fn new(omegas: Vec<[T; 2]>) -> Result<Self> {
        if omegas.is_empty() {
            return Err(Error::Config("frequency set is empty".into()));
        }
        for (a, w) in omegas.iter().enumerate() {
            if !w[0].is_finite() || !w[1].is_finite() {
                return Err(Error::Config(format!("frequency {a} is not finite")));
            }
            if w[0] == T::zero() && w[1] == T::zero() {
                return Err(Error::Config(
                    "the zero frequency is carried as a constant offset".into(),
                ));
            }
            for v in &omegas[..a] {
                if same_mode(*v, *w) {
                    return Err(Error::Config(format!(
                        "frequency {a} duplicates an earlier entry up to sign"
                    )));
                }
            }
        }
        Ok(Self { omegas })
    }

    /// `{(k₁π, k₂π) : 0 ≤ k₁ ≤ k1_max, |k₂| ≤ k2_max}` without the origin and
    /// without sign duplicates, ordered by `k₁` then `k₂`.
    pub fn lattice(k1_max: usize, k2_max: usize) -> Self {
        let pi = T::PI();
        let mut omegas = Vec::new();
        let k2 = k2_max as i64;
        for a in 0..=k1_max as i64 {
            for b in -k2..=k2 {
                if a == 0 && b <= 0 {
                    continue;
                }
                omegas.push([lit::<T>(a as f64) * pi, lit::<T>(b as f64) * pi]);
            }
        }
        Self { omegas }
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    pub fn omegas(&self) -> &[[T; 2]] {
        &self.omegas
    }

    /// Position of `ω` (or `−ω`) in the set.
    pub fn index_of(&self, w: [T; 2]) -> Option<usize> {
        self.omegas.iter().position(|v| same_mode(*v, w))
    }
}

fn same_mode<T: Real>(a: [T; 2], b: [T; 2]) -> bool {
    let tol = lit::<T>(1e-9);
    let close = |p: T, q: T| (p - q).abs() <= tol * (T::one() + p.abs());
    (close(a[0], b[0]) && close(a[1], b[1])) || (close(a[0], -b[0]) && close(a[1], -b[1]))
}

/// Duplicates each reduced coefficient into its (cos, sin) pair.
pub fn expand_mu<T: Real>(reduced: &[T]) -> Vec<T> {
    reduced.iter().flat_map(|m| [*m, *m]).collect()
}

/// Averages each (cos, sin) pair. The adjoint of [`expand_mu`] in the
/// Euclidean pairing is `2 · project_mu`.
pub fn project_mu<T: Real>(expanded: &[T]) -> Vec<T> {
    expanded.chunks(2).map(|p| (p[0] + p[1]) * lit(0.5)).collect()
}

fn check_len<T>(mu: &[T], freqs: &FrequencySet<T>) -> Result<()> {
    if mu.len() != freqs.omegas.len() {
        return Err(Error::Config(format!(
            "{} kernel coefficients for {} frequencies",
            mu.len(),
            freqs.omegas.len()
        )));
    }
    Ok(())
}

#[inline]
fn phase<T: Real>(w: [T; 2], x: [T; 2]) -> T {
    w[0] * x[0] + w[1] * x[1]
}

/// Feature vector `ζ(x; μ, ω)` in expanded layout.
pub fn zeta<T: Real>(x: [T; 2], mu: &[T], freqs: &FrequencySet<T>) -> Result<Vec<T>> {
    check_len(mu, freqs)?;
    let mut out = Vec::with_capacity(2 * mu.len());
    for (m, w) in mu.iter().zip(&freqs.omegas) {
        let p = phase(*w, x);
        out.push(*m * p.cos());
        out.push(*m * p.sin());
    }
    Ok(out)
}

/// Diagonal of the block matrix `diag(cos(ω_k·x), sin(ω_k·x))`.
pub fn lambda1<T: Real>(freqs: &FrequencySet<T>, x: [T; 2]) -> Vec<T> {
    freqs
        .omegas
        .iter()
        .flat_map(|w| {
            let p = phase(*w, x);
            [p.cos(), p.sin()]
        })
        .collect()
}

/// `K(d) = Σ_k μ_k² cos(ω_k·d)` evaluated at displacement `d`.
pub fn kernel_value<T: Real>(d: [T; 2], mu: &[T], freqs: &FrequencySet<T>) -> T {
    mu.iter()
        .zip(&freqs.omegas)
        .map(|(m, w)| *m * *m * phase(*w, d).cos())
        .fold(T::zero(), |a, b| a + b)
}

/// μ-independent trig table `(2r, nx, ny)`: row `2k` is `cos(ω_k·x)`, row
/// `2k + 1` is `sin(ω_k·x)`.
#[derive(Clone, Debug)]
pub struct FeatureTable<T> {
    table: Array3<T>,
}

impl<T: Real> FeatureTable<T> {
    pub fn new(grid: &SpaceTimeGrid<T>, freqs: &FrequencySet<T>) -> Self {
        let r = freqs.len();
        let table = Array3::from_shape_fn((2 * r, grid.nx, grid.ny), |(f, i, j)| {
            let p = phase(freqs.omegas[f / 2], [grid.x(i), grid.y(j)]);
            if f % 2 == 0 {
                p.cos()
            } else {
                p.sin()
            }
        });
        Self { table }
    }

    pub fn features(&self) -> usize {
        self.table.dim().0
    }

    #[inline]
    pub fn get(&self, f: usize, i: usize, j: usize) -> T {
        self.table[[f, i, j]]
    }

    pub fn table(&self) -> &Array3<T> {
        &self.table
    }

    /// Trig moments `∫ T_f(x) u(x) dx` of one slice (expanded layout, no μ).
    pub fn moments(&self, grid: &SpaceTimeGrid<T>, u: ArrayView2<T>) -> Vec<T> {
        let nf = self.features();
        let mut out = vec![T::zero(); nf];
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let wu = grid.node_weight(i, j) * u[[i, j]];
                if wu == T::zero() {
                    continue;
                }
                for (f, o) in out.iter_mut().enumerate() {
                    *o += wu * self.table[[f, i, j]];
                }
            }
        }
        out
    }

    /// `∫ ζ(y) ρ(y) dy` for one time slice (expanded layout).
    pub fn interaction_field(&self, grid: &SpaceTimeGrid<T>, rho: ArrayView2<T>, mu: &[T]) -> Vec<T> {
        let mu_e = expand_mu(mu);
        self.moments(grid, rho)
            .into_iter()
            .zip(mu_e)
            .map(|(m, c)| m * c)
            .collect()
    }

    /// Spatial field `a·ζ(x)` for an expanded vector `a`.
    pub fn potential(&self, a: &[T], mu: &[T]) -> Array2<T> {
        let (nf, nx, ny) = self.table.dim();
        let mut out = Array2::zeros((nx, ny));
        for f in 0..nf {
            let c = a[f] * mu[f / 2];
            if c == T::zero() {
                continue;
            }
            out.scaled_add(c, &self.table.index_axis(ndarray::Axis(0), f));
        }
        out
    }

    /// Constant `k₀` making `∫∫ (k₀ + K(x − y)) dx dy = 1` over the domain,
    /// by quadrature on the grid.
    pub fn normalising_offset(&self, grid: &SpaceTimeGrid<T>, mu: &[T]) -> T {
        let ones = Array2::from_elem((grid.nx, grid.ny), T::one());
        let mom = self.moments(grid, ones.view());
        let area = (grid.x_max - grid.x_min) * (grid.y_max - grid.y_min);
        let mut kk = T::zero();
        for (k, m) in mu.iter().enumerate() {
            kk += *m * *m * (mom[2 * k] * mom[2 * k] + mom[2 * k + 1] * mom[2 * k + 1]);
        }
        (T::one() - kk) / (area * area)
    }
}

/// Result of fitting a background kernel on the frequency lattice.
#[derive(Clone, Debug)]
pub struct BackgroundFit<T> {
    pub mu: Vec<T>,
    /// Free constant absorbed by the fit; the constant mode is not a
    /// recoverable unknown and is discarded by callers.
    pub constant: T,
    /// Relative weighted L² misfit on the displacement grid.
    pub rel_error: T,
}

/// Non-negative least squares fit `K₀(d) ≈ c + Σ_k μ_k² cos(ω_k·d)` on the
/// displacement vectors `d = (p h, q h)` with `|d|_∞ ≤ half_width`. Each
/// displacement is weighted by the number of node pairs realising it on the
/// grid.
pub fn fit_background_mu<T: Real, K: Fn([T; 2]) -> T>(
    grid: &SpaceTimeGrid<T>,
    freqs: &FrequencySet<T>,
    k0: K,
    half_width: T,
) -> Result<BackgroundFit<T>> {
    let np = (half_width / grid.h)
        .round()
        .to_usize()
        .unwrap_or(0)
        .min(grid.nx - 1)
        .min(grid.ny - 1) as i64;
    if np == 0 {
        return Err(Error::IllFit("displacement grid is empty".into()));
    }
    let r = freqs.len();
    let ncol = r + 2;
    let mut gram = vec![T::zero(); ncol * ncol];
    let mut atb = vec![T::zero(); ncol];
    let mut samples = Vec::new();
    let mut col = vec![T::zero(); ncol];
    for p in -np..=np {
        for q in -np..=np {
            let d = [lit::<T>(p as f64) * grid.h, lit::<T>(q as f64) * grid.h];
            let w = from_usize::<T>(grid.nx - p.unsigned_abs() as usize)
                * from_usize::<T>(grid.ny - q.unsigned_abs() as usize);
            let kv = k0(d);
            if !kv.is_finite() {
                return Err(Error::IllFit(format!("kernel is not finite at displacement {p},{q}")));
            }
            col[0] = T::one();
            col[1] = -T::one();
            for (k, om) in freqs.omegas.iter().enumerate() {
                col[k + 2] = phase(*om, d).cos();
            }
            for a in 0..ncol {
                atb[a] += w * col[a] * kv;
                for b in 0..ncol {
                    gram[a * ncol + b] += w * col[a] * col[b];
                }
            }
            samples.push((d, w, kv));
        }
    }
    // Split ± constant columns are exactly collinear; regularise the Gram
    // diagonal at round-off level so the passive-set solves stay regular.
    let bump = lit::<T>(1e-13) * gram[0];
    gram[0] += bump;
    gram[ncol + 1] += bump;
    let coef = nnls_normal(&gram, &atb, ncol, 50 * ncol)?;
    let constant = coef[0] - coef[1];
    let mu: Vec<T> = coef[2..].iter().map(|c| c.max(T::zero()).sqrt()).collect();

    let mut num = T::zero();
    let mut den = T::zero();
    for (d, w, kv) in samples {
        let fit = constant + kernel_value(d, &mu, freqs);
        num += w * (fit - kv) * (fit - kv);
        den += w * kv * kv;
    }
    let rel_error = if den > T::zero() {
        (num / den).sqrt()
    } else {
        num.sqrt()
    };
    Ok(BackgroundFit {
        mu,
        constant,
        rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid() -> SpaceTimeGrid<f64> {
        SpaceTimeGrid::standard()
    }

    #[test]
    fn lattice_has_twelve_distinct_modes_covering_examples() {
        let f = FrequencySet::<f64>::lattice(2, 2);
        assert_eq!(f.len(), 12);
        assert!(FrequencySet::new(f.omegas().to_vec()).is_ok());
        let truth = [
            [PI, 0.0],
            [0.0, PI],
            [PI, PI],
            [-PI, PI],
            [2.0 * PI, 0.0],
            [0.0, 2.0 * PI],
            [2.0 * PI, -PI],
            [2.0 * PI, PI],
            [PI, 2.0 * PI],
            [PI, -2.0 * PI],
        ];
        for w in truth {
            assert!(f.index_of(w).is_some(), "{w:?}");
        }
        assert_eq!(f.index_of([-PI, PI]), f.index_of([PI, -PI]));
        assert!(FrequencySet::new(vec![[PI, 0.0], [-PI, 0.0]]).is_err());
    }

    #[test]
    fn zeta_zero_and_pythagoras() {
        let f = FrequencySet::<f64>::lattice(2, 2);
        let z = zeta([0.3, -0.2], &[0.0; 12], &f).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let mu: Vec<f64> = (0..12).map(|k| 0.1 * k as f64).collect();
        let z = zeta([0.37, -0.81], &mu, &f).unwrap();
        let lhs: f64 = z.iter().map(|v| v * v).sum();
        let rhs: f64 = mu.iter().map(|v| v * v).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(matches!(zeta([0.0, 0.0], &mu[..3], &f), Err(Error::Config(_))));
    }

    #[test]
    fn example_one_kernel_identity() {
        let freqs = FrequencySet::new(vec![[PI, 0.0], [0.0, PI], [PI, PI], [-PI, PI]]).unwrap();
        let mu = [0.2094, 0.2094, 0.2613, 0.2613];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let zx = zeta(x, &mu, &freqs).unwrap();
            let zy = zeta(y, &mu, &freqs).unwrap();
            let k: f64 = zx.iter().zip(&zy).map(|(a, b)| a * b).sum();
            let (d1, d2) = (x[0] - y[0], x[1] - y[1]);
            let want = 0.2094f64.powi(2) * ((PI * d1).cos() + (PI * d2).cos())
                + 0.2613f64.powi(2) * ((PI * d1 + PI * d2).cos() + (-PI * d1 + PI * d2).cos());
            assert!((k - want).abs() < 1e-12);
            assert!((k - kernel_value([d1, d2], &mu, &freqs)).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda1_special_points_and_product() {
        let f = FrequencySet::new(vec![[PI, 0.0], [0.0, PI / 2.0]]).unwrap();
        let l0 = lambda1(&f, [0.0, 0.0]);
        assert_eq!(l0, vec![1.0, 0.0, 1.0, 0.0]);
        let l = lambda1(&f, [0.0, 1.0]);
        assert!(l[2].abs() < 1e-15 && (l[3] - 1.0).abs() < 1e-15);
        let mu = [0.4, 0.7];
        let x = [0.31, -0.44];
        let prod: Vec<f64> = lambda1(&f, x).iter().zip(expand_mu(&mu)).map(|(a, b)| a * b).collect();
        let z = zeta(x, &mu, &f).unwrap();
        for (a, b) in prod.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_pairing() {
        let u = vec![0.3, -1.2, 2.0];
        assert_eq!(project_mu(&expand_mu(&u)), u);
        assert_eq!(project_mu(&[1.0, 3.0]), vec![2.0]);
        let v = vec![0.5, 1.5, -0.25, 4.0, 1.0, -2.0];
        let lhs: f64 = expand_mu(&u).iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(project_mu(&v)).map(|(a, b)| a * b).sum();
        assert!((lhs - 2.0 * rhs).abs() < 1e-14);
    }

    #[test]
    fn interaction_field_oracles() {
        let g = grid();
        let f = FrequencySet::<f64>::lattice(2, 2);
        let t = FeatureTable::new(&g, &f);
        let mu = vec![0.5; 12];
        let zero = g.spatial_zeros();
        assert!(t.interaction_field(&g, zero.view(), &mu).iter().all(|v| *v == 0.0));

        // point mass at node (13, 27)
        let (i0, j0) = (13, 27);
        let mut rho = g.spatial_zeros();
        rho[[i0, j0]] = 1.0 / g.node_weight(i0, j0);
        let got = t.interaction_field(&g, rho.view(), &mu);
        let want = zeta([g.x(i0), g.y(j0)], &mu, &f).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        // uniform density: every lattice mode integrates to zero
        let uni = g.sample(|_, _| 0.25);
        assert!(t.interaction_field(&g, uni.view(), &mu).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn potential_matches_pointwise_dot() {
        let g = grid();
        let f = FrequencySet::<f64>::lattice(2, 2);
        let t = FeatureTable::new(&g, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..0.5)).collect();
        let a: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = t.potential(&a, &mu);
        for (i, j) in [(0, 0), (7, 33), (40, 12)] {
            let z = zeta([g.x(i), g.y(j)], &mu, &f).unwrap();
            let want: f64 = z.iter().zip(&a).map(|(u, v)| u * v).sum();
            assert!((p[[i, j]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalising_offset_for_lattice_kernel() {
        let g = grid();
        let f = FrequencySet::<f64>::lattice(2, 2);
        let t = FeatureTable::new(&g, &f);
        let k0 = t.normalising_offset(&g, &[0.3; 12]);
        assert!((k0 - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn background_fit_round_trip() {
        let g = grid();
        let f = FrequencySet::<f64>::lattice(2, 2);
        let zero = fit_background_mu(&g, &f, |_| 0.0, 1.0).unwrap();
        assert!(zero.mu.iter().all(|m| *m == 0.0));

        let idx = f.index_of([PI, -PI]).unwrap();
        let fit = fit_background_mu(&g, &f, |d| 0.09 * (PI * d[0] - PI * d[1]).cos(), 1.0).unwrap();
        for (k, m) in fit.mu.iter().enumerate() {
            let want = if k == idx { 0.3 } else { 0.0 };
            assert!((m - want).abs() < 1e-8, "mode {k}: {m}");
        }
        assert!(fit.constant.abs() < 1e-8);
    }

    #[test]
    fn gaussian_background_fit_quality() {
        let g = grid();
        let f = FrequencySet::<f64>::lattice(2, 2);
        let fit = fit_background_mu(
            &g,
            &f,
            |d| 0.2 * (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * 0.16)).exp(),
            1.0,
        )
        .unwrap();
        assert!(fit.rel_error < 0.05, "rel error {}", fit.rel_error);
        assert!(fit.mu.iter().all(|m| *m >= 0.0));
        // the fit is symmetric under x ↔ y
        let a = f.index_of([PI, 0.0]).unwrap();
        let b = f.index_of([0.0, PI]).unwrap();
        assert!((fit.mu[a] - fit.mu[b]).abs() < 1e-8);
    }
}
