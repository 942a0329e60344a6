//! Matrix-free Jacobi-preconditioned conjugate gradients for the screened
//! Poisson problem
//!
//! ```text
//! -a * Lap(x) + b(x) * x = f      (homogeneous Neumann boundary)
//! ```
//!
//! with `a > 0`, `b >= 0` pixelwise, and an optional set of pinned pixels
//! whose values are held fixed (Dirichlet). The operator is symmetric
//! positive semi-definite on the free pixels, so CG applies directly.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats<T> {
    pub iterations: usize,
    /// Final residual norm `||f - A x||_2` over free pixels.
    pub residual: T,
    /// `||f||_2` over free pixels.
    pub rhs_norm: T,
    pub converged: bool,
}

impl<T: Real> SolveStats<T> {
    pub fn relative_residual(&self) -> T {
        if self.rhs_norm > T::zero() {
            self.residual / self.rhs_norm
        } else {
            self.residual
        }
    }
}

pub struct ScreenedPoisson<'a, T> {
    pub width: usize,
    pub height: usize,
    pub diffusion: T,
    pub reaction: &'a [T],
    pub pinned: Option<&'a [bool]>,
}

impl<T: Real> ScreenedPoisson<'_, T> {
    #[inline]
    fn is_pinned(&self, i: usize) -> bool {
        self.pinned.map(|m| m[i]).unwrap_or(false)
    }

    /// `out = A x` on free pixels, zero on pinned ones.
    pub fn apply(&self, x: &[T], out: &mut [T]) {
        let (w, h) = (self.width, self.height);
        let a = self.diffusion;
        for y in 0..h {
            let row = y * w;
            for xx in 0..w {
                let i = row + xx;
                if self.is_pinned(i) {
                    out[i] = T::zero();
                    continue;
                }
                let c = x[i];
                let mut lap = T::zero();
                if xx > 0 {
                    lap += x[i - 1] - c;
                }
                if xx + 1 < w {
                    lap += x[i + 1] - c;
                }
                if y > 0 {
                    lap += x[i - w] - c;
                }
                if y + 1 < h {
                    lap += x[i + w] - c;
                }
                out[i] = self.reaction[i] * c - a * lap;
            }
        }
    }

    fn diagonal(&self) -> Vec<T> {
        let (w, h) = (self.width, self.height);
        let mut d = vec![T::one(); w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if self.is_pinned(i) {
                    continue;
                }
                let deg = usize::from(x > 0)
                    + usize::from(x + 1 < w)
                    + usize::from(y > 0)
                    + usize::from(y + 1 < h);
                let v = self.diffusion * T::from_count(deg) + self.reaction[i];
                d[i] = if v > T::zero() { v } else { T::one() };
            }
        }
        d
    }

    /// Residual `f - A x` with pinned entries zeroed.
    pub fn residual(&self, rhs: &[T], x: &[T], out: &mut [T]) {
        self.apply(x, out);
        for (i, o) in out.iter_mut().enumerate() {
            *o = if self.is_pinned(i) {
                T::zero()
            } else {
                rhs[i] - *o
            };
        }
    }

    /// Solves in place starting from `x` (pinned entries of `x` are the
    /// Dirichlet values). Stops when `||r|| <= rel_tol * ||f||`, or
    /// `||r|| <= abs_tol` when the right-hand side vanishes.
    pub fn solve(
        &self,
        rhs: &[T],
        x: &mut [T],
        rel_tol: T,
        abs_tol: T,
        max_iter: usize,
    ) -> SolveStats<T> {
        let n = self.width * self.height;
        debug_assert_eq!(rhs.len(), n);
        debug_assert_eq!(x.len(), n);

        let rhs_norm = norm(
            rhs.iter()
                .enumerate()
                .filter(|(i, _)| !self.is_pinned(*i))
                .map(|(_, &v)| v),
        );
        let target = (rel_tol * rhs_norm).max(abs_tol);

        let diag = self.diagonal();
        let mut r = vec![T::zero(); n];
        self.residual(rhs, x, &mut r);
        let mut z: Vec<T> = r.iter().zip(&diag).map(|(&ri, &di)| ri / di).collect();
        let mut p = z.clone();
        let mut ap = vec![T::zero(); n];
        let mut rz = dot(&r, &z);
        let mut res = norm(r.iter().copied());

        let mut iterations = 0;
        while res > target && iterations < max_iter {
            self.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= T::zero() {
                break;
            }
            let step = rz / pap;
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            iterations += 1;
            // periodic true-residual refresh against drift
            if iterations % 50 == 0 {
                self.residual(rhs, x, &mut r);
            }
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            res = norm(r.iter().copied());
        }

        self.residual(rhs, x, &mut r);
        let residual = norm(r.iter().copied());
        SolveStats {
            iterations,
            residual,
            rhs_norm,
            converged: residual <= target,
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm<T: Real>(v: impl Iterator<Item = T>) -> T {
    v.fold(T::zero(), |acc, x| acc + x * x).sqrt()
}
