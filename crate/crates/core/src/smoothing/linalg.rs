//! Dense Cholesky factorization for the small Newton systems.

use crate::num::Real;

/// Lower-triangular factor of a symmetric positive-definite matrix, row-major.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors `a` (row-major `n x n`). Returns `None` if `a` is not
    /// numerically positive definite.
    pub fn factor(a: &[T], n: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i * n + j];
                for k in 0..j {
                    sum = sum - l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum.is_nan() || sum <= T::zero() || !sum.is_finite() {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    /// Crude condition estimate `(max L_ii / min L_ii)^2`.
    pub fn condition_estimate(&self) -> T {
        let diag = (0..self.n).map(|i| self.l[i * self.n + i]);
        let (lo, hi) = diag.fold((T::infinity(), T::zero()), |(lo, hi), d| {
            (lo.min(d), hi.max(d))
        });
        let r = hi / lo;
        r * r
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s = row
                .iter()
                .zip(&y[..i])
                .fold(y[i], |s, (&l, &yk)| s - l * yk);
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let s = (i + 1..n)
                .zip(&y[i + 1..])
                .fold(y[i], |s, (k, &yk)| s - self.l[k * n + i] * yk);
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let x = [1.0, -2.0, 0.5];
        let b: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a[i * 3 + j] * x[j]).sum())
            .collect();
        let ch = Cholesky::factor(&a, 3).unwrap();
        for (got, want) in ch.solve(&b).iter().zip(x) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(ch.condition_estimate() >= 1.0);
    }

    #[test]
    fn rejects_indefinite() {
        assert!(Cholesky::factor(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        assert!(Cholesky::factor(&[0.0f64], 1).is_none());
    }
}
