//! Local smoothing-polynomial estimator.
//!
//! For each sample unique `k` the sample counts in a neighborhood `M` of `k`
//! are modelled as independent Poisson with
//! `log λ_{k'} = β₀ + Σ_j Σ_i β_{ij} (k'_i - k_i)^j`, and the local
//! log-likelihood `Σ_M [f log λ - λ]` is maximized by Newton-Raphson. The
//! intercept gives `λ̂_k = exp(β̂₀)`, which enters the Poisson risk formulas
//! with remainder rate `λ̂_k (1 - π) / π`.

mod linalg;
mod neighborhood;

use rayon::prelude::*;

pub use neighborhood::{design_row, neighborhood, BoundaryMode, Neighbor, NeighborhoodSpec};

use crate::error::{Error, Result};
use crate::models::{poisson_e_inv, poisson_p_unique};
use crate::num::Real;
use crate::risk::{CellRisk, Diagnostics, RiskEstimate};
use crate::table::{CellKey, FreqTable};
use linalg::Cholesky;

/// Condition estimate above which the ridge term is switched on.
const RIDGE_CONDITION: f64 = 1e12;
const RIDGE_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions<T> {
    /// Converged once the gradient max-norm is at most `tol · max(1, Σ_M f)`.
    pub tol: T,
    pub max_iter: usize,
    /// Step halvings tried before giving up on an iteration.
    pub max_halvings: usize,
}

impl<T: Real> Default for NewtonOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-8).max(T::epsilon() * T::lit(1e4)),
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

/// Result of one local maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit<T> {
    pub center: CellKey,
    /// `(β₀, then power-major slopes)`, in [`design_row`] order.
    pub coeffs: Vec<T>,
    pub lambda_hat: T,
    pub iterations: usize,
    /// Gradient max-norm at the returned iterate.
    pub grad_norm: T,
    pub converged: bool,
    /// The ridge fallback was needed.
    pub ridged: bool,
    /// Cells in `M` that entered the likelihood.
    pub neighborhood_size: usize,
    pub sum_f: T,
    /// `Σ_M λ_{k'}(α̂)`.
    pub sum_lambda: T,
}

/// A local Poisson regression problem: design rows and responses.
struct LocalProblem<'a, T> {
    rows: &'a [Vec<T>],
    counts: Vec<T>,
}

impl<T: Real> LocalProblem<'_, T> {
    fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn eta(&self, alpha: &[T], row: &[T]) -> T {
        row.iter()
            .zip(alpha)
            .fold(T::zero(), |acc, (&x, &a)| acc + x * a)
    }

    /// Penalized objective `L(α) - ridge ‖α‖²`.
    fn objective(&self, alpha: &[T], ridge: T) -> T {
        let l = self
            .rows
            .iter()
            .zip(&self.counts)
            .fold(T::zero(), |acc, (row, &f)| {
                let eta = self.eta(alpha, row);
                let term = if f > T::zero() { f * eta } else { T::zero() };
                acc + term - eta.exp()
            });
        l - ridge * alpha.iter().fold(T::zero(), |acc, &a| acc + a * a)
    }

    /// Gradient and negated Hessian (row-major) of the penalized objective.
    fn derivatives(&self, alpha: &[T], ridge: T) -> (Vec<T>, Vec<T>, T) {
        let p = self.dim();
        let mut grad = vec![T::zero(); p];
        let mut info = vec![T::zero(); p * p];
        let mut sum_lambda = T::zero();
        for (row, &f) in self.rows.iter().zip(&self.counts) {
            let lambda = self.eta(alpha, row).exp();
            sum_lambda = sum_lambda + lambda;
            let resid = f - lambda;
            for i in 0..p {
                grad[i] = grad[i] + resid * row[i];
                let wi = lambda * row[i];
                for j in 0..=i {
                    info[i * p + j] = info[i * p + j] + wi * row[j];
                }
            }
        }
        let two = T::lit(2.0);
        for i in 0..p {
            grad[i] = grad[i] - two * ridge * alpha[i];
            info[i * p + i] = info[i * p + i] + two * ridge;
            for j in 0..i {
                info[j * p + i] = info[i * p + j];
            }
        }
        (grad, info, sum_lambda)
    }

    fn solve(&self, alpha0: Vec<T>, opts: &NewtonOptions<T>) -> NewtonOutcome<T> {
        let sum_f: T = self.counts.iter().copied().sum();
        let tol = opts.tol * sum_f.max(T::one());
        let mut alpha = alpha0;
        let mut ridge = T::zero();
        let mut iterations = 0;
        let mut current = self.objective(&alpha, ridge);
        let converged = loop {
            let (grad, info, _) = self.derivatives(&alpha, ridge);
            let grad_norm = grad.iter().fold(T::zero(), |m, g| m.max(g.abs()));
            if grad_norm <= tol {
                break true;
            }
            if iterations >= opts.max_iter {
                break false;
            }
            let factor = Cholesky::factor(&info, self.dim());
            let well_posed = factor
                .as_ref()
                .is_some_and(|ch| ch.condition_estimate() <= T::lit(RIDGE_CONDITION));
            if !well_posed && ridge == T::zero() {
                ridge = T::lit(RIDGE_WEIGHT);
                current = self.objective(&alpha, ridge);
                continue;
            }
            let Some(factor) = factor else {
                break false;
            };
            iterations += 1;
            let step = factor.solve(&grad);
            let mut scale = T::one();
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                let trial: Vec<T> = alpha
                    .iter()
                    .zip(&step)
                    .map(|(&a, &s)| a + scale * s)
                    .collect();
                let value = self.objective(&trial, ridge);
                if value.is_finite() && value >= current {
                    alpha = trial;
                    current = value;
                    accepted = true;
                    break;
                }
                scale = scale / T::lit(2.0);
            }
            if !accepted {
                break false;
            }
        };
        let (grad, _, sum_lambda) = self.derivatives(&alpha, ridge);
        NewtonOutcome {
            grad_norm: grad.iter().fold(T::zero(), |m, g| m.max(g.abs())),
            alpha,
            iterations,
            converged,
            ridged: ridge > T::zero(),
            sum_lambda,
        }
    }
}

struct NewtonOutcome<T> {
    alpha: Vec<T>,
    iterations: usize,
    grad_norm: T,
    converged: bool,
    ridged: bool,
    sum_lambda: T,
}

/// Precomputed offsets and design rows of a neighborhood shape.
struct Design<T> {
    offsets: Vec<Vec<i32>>,
    rows: Vec<Vec<T>>,
}

impl<T: Real> Design<T> {
    fn new(spec: &NeighborhoodSpec, m: usize) -> Self {
        let offsets = spec.offsets(m);
        let rows = offsets.iter().map(|o| design_row(o, spec)).collect();
        Self { offsets, rows }
    }

    fn fit(
        &self,
        f: &FreqTable,
        center: &CellKey,
        spec: &NeighborhoodSpec,
        opts: &NewtonOptions<T>,
    ) -> Result<LocalFit<T>> {
        let schema = f.schema();
        let mut rows_kept = Vec::new();
        let mut counts = Vec::with_capacity(self.offsets.len());
        for (offset, row) in self.offsets.iter().zip(&self.rows) {
            match neighborhood::shift(center, offset, schema) {
                Some(cell) => counts.push(T::from_count(f.get(&cell))),
                None if spec.boundary == BoundaryMode::ZeroFill => counts.push(T::zero()),
                None => continue,
            }
            if spec.boundary == BoundaryMode::Shrink {
                rows_kept.push(row.clone());
            }
        }
        let rows = if spec.boundary == BoundaryMode::Shrink {
            &rows_kept
        } else {
            &self.rows
        };
        let sum_f: T = counts.iter().copied().sum();
        if sum_f < T::one() {
            return Err(Error::InvalidParameter(format!(
                "neighborhood of {center} holds no sample records"
            )));
        }
        let size = counts.len();
        let problem = LocalProblem { rows, counts };
        let mut alpha = vec![T::zero(); problem.dim()];
        let mean = sum_f / T::lit(size as f64);
        alpha[0] = mean.max(T::one() / T::lit(2.0 * size as f64)).ln();
        let out = problem.solve(alpha, opts);
        Ok(LocalFit {
            center: center.clone(),
            lambda_hat: out.alpha[0].exp(),
            coeffs: out.alpha,
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            converged: out.converged,
            ridged: out.ridged,
            neighborhood_size: size,
            sum_f,
            sum_lambda: out.sum_lambda,
        })
    }
}

/// Maximizes the local Poisson log-likelihood around `center`.
pub fn local_mle<T: Real>(
    f: &FreqTable,
    center: &CellKey,
    spec: &NeighborhoodSpec,
    opts: &NewtonOptions<T>,
) -> Result<LocalFit<T>> {
    f.schema().check_key(center)?;
    spec.validate_for(f.schema())?;
    Design::new(spec, f.schema().m()).fit(f, center, spec, opts)
}

/// Local fits for every sample unique, in key order. Fits run in parallel;
/// the output order does not depend on scheduling.
pub fn fit_uniques<T: Real>(
    f: &FreqTable,
    spec: &NeighborhoodSpec,
    opts: &NewtonOptions<T>,
) -> Result<Vec<LocalFit<T>>> {
    spec.validate_for(f.schema())?;
    let design = Design::new(spec, f.schema().m());
    f.sample_uniques()
        .par_iter()
        .map(|k| design.fit(f, k, spec, opts))
        .collect()
}

/// Plug-in risk from local fits: `mu_k = λ̂_k (1 - π) / π`.
pub fn risk_from_fits<T: Real>(fits: &[LocalFit<T>], pi: T) -> Result<RiskEstimate<T>> {
    check_fraction(pi)?;
    let mut diagnostics = Diagnostics::default();
    let mut cells = Vec::with_capacity(fits.len());
    for fit in fits {
        if !fit.converged {
            diagnostics.bump("not_converged");
        }
        if fit.ridged {
            diagnostics.bump("ridged");
        }
        let mu = fit.lambda_hat * (T::one() - pi) / pi;
        cells.push(CellRisk {
            key: fit.center.clone(),
            param: fit.lambda_hat,
            p_unique: poisson_p_unique(mu)?,
            e_inv: poisson_e_inv(mu)?,
            flagged: !fit.converged || fit.ridged,
        });
    }
    Ok(RiskEstimate::from_cells(cells, diagnostics))
}

/// Smoothing estimate of `τ̂_1`, `τ̂_2` for a sample drawn with fraction `pi`.
pub fn smooth_estimate<T: Real>(
    f: &FreqTable,
    spec: &NeighborhoodSpec,
    pi: T,
    opts: &NewtonOptions<T>,
) -> Result<RiskEstimate<T>> {
    check_fraction(pi)?;
    let fits = fit_uniques(f, spec, opts)?;
    risk_from_fits(&fits, pi)
}

fn check_fraction<T: Real>(pi: T) -> Result<()> {
    if !(pi > T::zero() && pi < T::one()) {
        return Err(Error::InvalidParameter(format!(
            "sampling fraction must lie in (0, 1), got {pi}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{Attribute, TableSchema};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn grid(levels: &[u32]) -> Arc<TableSchema> {
        Arc::new(
            TableSchema::new(
                levels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| Attribute::ordinal(format!("a{i}"), l))
                    .collect(),
            )
            .unwrap(),
        )
    }

    fn constant_table(levels: &[u32], value: u64) -> FreqTable {
        let schema = grid(levels);
        let cells: Vec<_> = schema.cells().map(|k| (k, value)).collect();
        FreqTable::from_counts(schema, cells).unwrap()
    }

    #[test]
    fn constant_neighborhood_fits_constant() {
        let f = constant_table(&[9, 9], 3);
        let spec = NeighborhoodSpec::cube(2, 2);
        let fit = local_mle(
            &f,
            &CellKey::from([4, 4]),
            &spec,
            &NewtonOptions::<f64>::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.lambda_hat, 3.0, epsilon = 1e-12);
        assert_relative_eq!(fit.coeffs[0], 3f64.ln(), epsilon = 1e-12);
        assert!(fit.coeffs[1..].iter().all(|c| c.abs() < 1e-12));
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // f = (1, 2, 4) at offsets (-1, 0, 1) is fitted exactly by
        // log λ = log 2 + δ log 2, so λ̂ = 2.
        let schema = grid(&[3]);
        let f = FreqTable::from_counts(
            schema,
            [
                (CellKey::from([0]), 1),
                (CellKey::from([1]), 2),
                (CellKey::from([2]), 4),
            ],
        )
        .unwrap();
        let fit = local_mle(
            &f,
            &CellKey::from([1]),
            &NeighborhoodSpec::cube(1, 1),
            &NewtonOptions::<f64>::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.lambda_hat, 2.0, max_relative = 1e-7);
        assert_relative_eq!(fit.coeffs[1], 2f64.ln(), max_relative = 1e-7);
        assert_relative_eq!(fit.sum_lambda, 7.0, max_relative = 1e-7);
    }

    #[test]
    fn isolated_unique_terminates() {
        let schema = grid(&[7, 7]);
        let f = FreqTable::from_counts(schema, [(CellKey::from([3, 3]), 1)]).unwrap();
        for degree in [1, 2] {
            let fit = local_mle(
                &f,
                &CellKey::from([3, 3]),
                &NeighborhoodSpec::cube(3, degree),
                &NewtonOptions::<f64>::default(),
            )
            .unwrap();
            assert!(fit.lambda_hat > 0.0 && fit.lambda_hat.is_finite());
            assert!(fit.lambda_hat <= 1.0 + 1e-6);
            assert!((fit.sum_lambda - 1.0).abs() < 1e-6, "{fit:?}");
        }
    }

    #[test]
    fn boundary_modes_differ() {
        let schema = grid(&[5, 5]);
        let f = FreqTable::from_counts(
            schema,
            [
                (CellKey::from([0, 0]), 1),
                (CellKey::from([0, 1]), 2),
                (CellKey::from([1, 0]), 2),
                (CellKey::from([1, 1]), 3),
            ],
        )
        .unwrap();
        let zero = NeighborhoodSpec::cube(1, 1);
        let shrink = zero.clone().with_boundary(BoundaryMode::Shrink);
        let opts = NewtonOptions::<f64>::default();
        let a = local_mle(&f, &CellKey::from([0, 0]), &zero, &opts).unwrap();
        let b = local_mle(&f, &CellKey::from([0, 0]), &shrink, &opts).unwrap();
        assert_eq!(a.neighborhood_size, 9);
        assert_eq!(b.neighborhood_size, 4);
        assert!(a.converged && b.converged);
        assert!((a.lambda_hat - b.lambda_hat).abs() > 1e-3);
    }

    #[test]
    fn translation_invariance() {
        let schema = grid(&[12, 12]);
        let pattern = [
            ((0, 0), 1),
            ((1, 0), 3),
            ((0, 1), 2),
            ((2, 2), 5),
            ((1, 2), 1),
        ];
        let build = |shift: u32| {
            FreqTable::from_counts(
                schema.clone(),
                pattern
                    .iter()
                    .map(|&((a, b), c)| (CellKey::from([a + shift, b + shift]), c)),
            )
            .unwrap()
        };
        let spec = NeighborhoodSpec::cube(2, 2);
        let opts = NewtonOptions::<f64>::default();
        let a = local_mle(&build(3), &CellKey::from([4, 3]), &spec, &opts).unwrap();
        let b = local_mle(&build(6), &CellKey::from([7, 6]), &spec, &opts).unwrap();
        assert_relative_eq!(a.lambda_hat, b.lambda_hat, max_relative = 1e-12);
    }

    #[test]
    fn uniform_ones_table() {
        let f = constant_table(&[6, 5], 1);
        let est = smooth_estimate(
            &f,
            &NeighborhoodSpec::cube(2, 2),
            0.5,
            &NewtonOptions::<f64>::default(),
        )
        .unwrap();
        // Interior cells see constant neighborhoods; boundary cells see zero-fill
        // and get a different fit, so check only interior ones exactly.
        let interior: Vec<_> = est
            .cells
            .iter()
            .filter(|c| {
                c.key
                    .coords()
                    .iter()
                    .zip([6u32, 5])
                    .all(|(&x, l)| x >= 2 && x + 2 < l)
            })
            .collect();
        assert!(!interior.is_empty());
        for c in interior {
            assert_relative_eq!(c.param, 1.0, epsilon = 1e-10);
            assert_relative_eq!(c.p_unique, (-1f64).exp(), epsilon = 1e-10);
            assert_relative_eq!(c.e_inv, 1.0 - (-1f64).exp(), epsilon = 1e-10);
        }
    }

    #[test]
    fn uniform_ones_table_shrink_mode_is_exact_everywhere() {
        let f = constant_table(&[6, 5], 1);
        let spec = NeighborhoodSpec::cube(2, 2).with_boundary(BoundaryMode::Shrink);
        let est = smooth_estimate(&f, &spec, 0.5, &NewtonOptions::<f64>::default()).unwrap();
        assert_eq!(est.unique_count(), 30);
        assert_relative_eq!(est.tau1, 30.0 * (-1f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(est.tau2, 30.0 * (1.0 - (-1f64).exp()), epsilon = 1e-9);
    }

    #[test]
    fn no_uniques_and_bad_fraction() {
        let f = constant_table(&[3, 3], 2);
        let spec = NeighborhoodSpec::cube(1, 1);
        let est = smooth_estimate(&f, &spec, 0.1, &NewtonOptions::<f64>::default()).unwrap();
        assert_eq!((est.tau1, est.tau2), (0.0, 0.0));
        assert!(smooth_estimate(&f, &spec, 1.0, &NewtonOptions::<f64>::default()).is_err());
        assert!(smooth_estimate(&f, &spec, 0.0, &NewtonOptions::<f64>::default()).is_err());
    }

    #[test]
    fn single_precision_fit() {
        let f = constant_table(&[7, 7], 2);
        let fit = local_mle::<f32>(
            &f,
            &CellKey::from([3, 3]),
            &NeighborhoodSpec::cube(2, 2),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert!((fit.lambda_hat - 2.0).abs() < 1e-4);
    }
}
