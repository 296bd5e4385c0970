//! Small dense and iterative linear algebra kernels.

use crate::error::{Error, Result};
use crate::real::{lit, Real};

/// Solves the dense `n × n` system `a x = b` in place by Gaussian elimination
/// with partial pivoting. `a` is row-major and is destroyed. Returns `None`
/// when a pivot falls below `tiny`.
pub fn solve_dense<T: Real>(a: &mut [T], b: &mut [T], n: usize, tiny: T) -> Option<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best > tiny) {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == T::zero() {
                continue;
            }
            for c in col..n {
                let v = a[col * n + c];
                a[r * n + c] -= f * v;
            }
            let bc = b[col];
            b[r] -= f * bc;
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= a[col * n + c] * b[c];
        }
        b[col] = s / a[col * n + col];
    }
    Some(())
}

/// Thomas algorithm for a tridiagonal system; `lower[0]` and `upper[n-1]`
/// are ignored. Assumes the matrix is diagonally dominant or SPD.
pub fn solve_tridiagonal<T: Real>(lower: &[T], diag: &[T], upper: &[T], rhs: &mut [T]) {
    let n = diag.len();
    let mut c = vec![T::zero(); n];
    let mut beta = diag[0];
    rhs[0] /= beta;
    for k in 1..n {
        c[k - 1] = upper[k - 1] / beta;
        beta = diag[k] - lower[k] * c[k - 1];
        rhs[k] = (rhs[k] - lower[k] * rhs[k - 1]) / beta;
    }
    for k in (0..n - 1).rev() {
        let next = rhs[k + 1];
        rhs[k] -= c[k] * next;
    }
}

/// Factored tridiagonal matrix for repeated solves with different right-hand
/// sides.
#[derive(Clone, Debug)]
pub struct Tridiagonal<T> {
    lower: Vec<T>,
    inv_beta: Vec<T>,
    c: Vec<T>,
}

impl<T: Real> Tridiagonal<T> {
    pub fn factor(lower: &[T], diag: &[T], upper: &[T]) -> Self {
        let n = diag.len();
        let mut c = vec![T::zero(); n];
        let mut inv_beta = vec![T::zero(); n];
        let mut beta = diag[0];
        inv_beta[0] = T::one() / beta;
        for k in 1..n {
            c[k - 1] = upper[k - 1] * inv_beta[k - 1];
            beta = diag[k] - lower[k] * c[k - 1];
            inv_beta[k] = T::one() / beta;
        }
        Self {
            lower: lower.to_vec(),
            inv_beta,
            c,
        }
    }

    pub fn solve(&self, rhs: &mut [T]) {
        let n = self.inv_beta.len();
        rhs[0] *= self.inv_beta[0];
        for k in 1..n {
            rhs[k] = (rhs[k] - self.lower[k] * rhs[k - 1]) * self.inv_beta[k];
        }
        for k in (0..n - 1).rev() {
            let next = rhs[k + 1];
            rhs[k] -= self.c[k] * next;
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

#[derive(Clone, Copy, Debug)]
pub struct CgReport<T> {
    pub iterations: usize,
    pub residual: T,
}

/// Preconditioned conjugate gradients for a symmetric positive (semi)definite
/// operator given as a closure. `precond` holds the inverse diagonal (or
/// `None`). Convergence is declared when `‖r‖ ≤ tol · ‖b‖`.
pub fn conjugate_gradient<T: Real, A>(
    apply: A,
    precond: Option<&[T]>,
    b: &[T],
    x: &mut [T],
    tol: T,
    max_iter: usize,
) -> Result<CgReport<T>>
where
    A: Fn(&[T], &mut [T]),
{
    let n = b.len();
    let mut r = vec![T::zero(); n];
    let mut ap = vec![T::zero(); n];
    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    let bnorm = dot(b, b).sqrt().max(T::min_positive_value());
    let mut z = match precond {
        Some(m) => r.iter().zip(m).map(|(a, b)| *a * *b).collect::<Vec<_>>(),
        None => r.clone(),
    };
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rnorm = dot(&r, &r).sqrt();
    let mut it = 0;
    while rnorm > tol * bnorm {
        if it >= max_iter {
            return Err(Error::SolverFailed {
                what: "conjugate gradient",
                residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
                iterations: it,
            });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::SolverFailed {
                what: "conjugate gradient (operator not positive definite)",
                residual: (rnorm / bnorm).to_f64().unwrap_or(f64::NAN),
                iterations: it,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        match precond {
            Some(m) => {
                for i in 0..n {
                    z[i] = r[i] * m[i];
                }
            }
            None => z.copy_from_slice(&r),
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rnorm = dot(&r, &r).sqrt();
        it += 1;
    }
    Ok(CgReport {
        iterations: it,
        residual: rnorm / bnorm,
    })
}

/// Non-negative least squares `min ‖A c − b‖²` s.t. `c ≥ 0` by the
/// Lawson–Hanson active-set method, working on the normal equations
/// `gram = AᵀA` (row-major `n × n`) and `atb = Aᵀb`.
pub fn nnls_normal<T: Real>(gram: &[T], atb: &[T], n: usize, max_iter: usize) -> Result<Vec<T>> {
    let scale = (0..n).map(|i| gram[i * n + i]).fold(T::zero(), T::max);
    let tol = lit::<T>(1e-12) * scale.max(T::one());
    let mut x = vec![T::zero(); n];
    let mut passive = vec![false; n];

    let gradient = |x: &[T]| -> Vec<T> {
        (0..n)
            .map(|i| atb[i] - (0..n).map(|j| gram[i * n + j] * x[j]).fold(T::zero(), |a, b| a + b))
            .collect()
    };
    let solve_passive = |passive: &[bool]| -> Option<Vec<T>> {
        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let m = idx.len();
        let mut a = vec![T::zero(); m * m];
        let mut b = vec![T::zero(); m];
        for (r, &i) in idx.iter().enumerate() {
            b[r] = atb[i];
            for (c, &j) in idx.iter().enumerate() {
                a[r * m + c] = gram[i * n + j];
            }
        }
        solve_dense(&mut a, &mut b, m, T::epsilon() * scale)?;
        let mut z = vec![T::zero(); n];
        for (r, &i) in idx.iter().enumerate() {
            z[i] = b[r];
        }
        Some(z)
    };

    for _ in 0..max_iter {
        let w = gradient(&x);
        let next = (0..n)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap_or(std::cmp::Ordering::Equal));
        let Some(t) = next else {
            return Ok(x);
        };
        passive[t] = true;
        loop {
            let z = solve_passive(&passive).ok_or_else(|| Error::IllFit("singular normal equations".into()))?;
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > T::zero()) {
                x = z;
                break;
            }
            let mut alpha = T::infinity();
            for i in 0..n {
                if passive[i] && z[i] <= T::zero() {
                    let a = x[i] / (x[i] - z[i]);
                    if a < alpha {
                        alpha = a;
                    }
                }
            }
            for i in 0..n {
                x[i] = x[i] + alpha * (z[i] - x[i]);
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = T::zero();
                }
            }
        }
    }
    Err(Error::IllFit("non-negative least squares hit the iteration cap".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_solve_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 3, 7] {
            let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let oracle = DMatrix::from_row_slice(n, n, &a)
                .lu()
                .solve(&DVector::from_vec(b.clone()))
                .unwrap();
            let mut aa = a.clone();
            let mut bb = b.clone();
            solve_dense(&mut aa, &mut bb, n, 1e-300).unwrap();
            for i in 0..n {
                assert!((bb[i] - oracle[i]).abs() < 1e-10);
            }
        }
        let mut sing = vec![1.0, 2.0, 2.0, 4.0];
        assert!(solve_dense(&mut sing, &mut [1.0, 1.0], 2, 1e-14).is_none());
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let n = 9;
        let lower: Vec<f64> = (0..n).map(|k| -1.0 - 0.1 * k as f64).collect();
        let upper: Vec<f64> = (0..n).map(|k| -0.5 + 0.05 * k as f64).collect();
        let diag: Vec<f64> = (0..n).map(|k| 4.0 + k as f64).collect();
        let rhs: Vec<f64> = (0..n).map(|k| (k as f64).sin()).collect();
        let mut dense = vec![0.0; n * n];
        for k in 0..n {
            dense[k * n + k] = diag[k];
            if k > 0 {
                dense[k * n + k - 1] = lower[k];
            }
            if k + 1 < n {
                dense[k * n + k + 1] = upper[k];
            }
        }
        let mut want = rhs.clone();
        solve_dense(&mut dense, &mut want, n, 1e-300).unwrap();
        let mut got = rhs.clone();
        solve_tridiagonal(&lower, &diag, &upper, &mut got);
        let fac = Tridiagonal::factor(&lower, &diag, &upper);
        let mut got2 = rhs.clone();
        fac.solve(&mut got2);
        for k in 0..n {
            assert!((got[k] - want[k]).abs() < 1e-12);
            assert!((got2[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_solves_spd_system() {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let spd = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
        let b = DVector::from_fn(n, |i, _| (i as f64).cos());
        let want = spd.clone().cholesky().unwrap().solve(&b);
        let mut x = vec![0.0; n];
        let diag_inv: Vec<f64> = (0..n).map(|i| 1.0 / spd[(i, i)]).collect();
        let rep = conjugate_gradient(
            |v: &[f64], out: &mut [f64]| {
                let r = &spd * DVector::from_column_slice(v);
                out.copy_from_slice(r.as_slice());
            },
            Some(&diag_inv),
            b.as_slice(),
            &mut x,
            1e-13,
            1000,
        )
        .unwrap();
        assert!(rep.iterations > 0);
        for i in 0..n {
            assert!((x[i] - want[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn nnls_recovers_known_nonnegative_solution() {
        // columns of a tall random matrix; truth has two zero entries
        let (rows, n) = (40, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-1.0..1.0));
        let truth = DVector::from_vec(vec![0.5, 0.0, 1.2, 0.0, 0.3]);
        let b = &a * &truth;
        let gram = a.transpose() * &a;
        let atb = a.transpose() * &b;
        let gram_rm: Vec<f64> = (0..n * n).map(|k| gram[(k / n, k % n)]).collect();
        let x = nnls_normal(&gram_rm, atb.as_slice(), n, 100).unwrap();
        for i in 0..n {
            assert!((x[i] - truth[i]).abs() < 1e-9, "{:?}", x);
        }
    }

    #[test]
    fn nnls_clamps_negative_unconstrained_solution() {
        // 1-D: minimise (c - (-1))², c ≥ 0  ⇒  c = 0.
        let x = nnls_normal(&[1.0], &[-1.0], 1, 10).unwrap();
        assert_eq!(x, vec![0.0]);
        // 2-D with one active: A = I, b = (2, -3) ⇒ (2, 0)
        let x: Vec<f64> = nnls_normal(&[1.0, 0.0, 0.0, 1.0], &[2.0, -3.0], 2, 10).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14 && x[1] == 0.0);
    }
}
