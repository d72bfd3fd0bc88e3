//! Poisson log-linear plug-in estimator.
//!
//! With a constant sampling fraction `f_k ~ Poisson(n γ_k)`. A log-linear model
//! fitted to the sample gives `γ̂_k`, and the conditional risks of a sample
//! unique follow from the Poisson remainder rate `N γ̂_k (1 - π)`.
//!
//! Two models are supported: mutual independence (closed form) and all
//! two-way interactions (iterative proportional fitting). The fitted table is
//! kept in factored form and evaluated cell by cell on demand, so no dense
//! `K`-vector is ever stored.
//!
//! Sampling zeros can push the two-way MLE onto the boundary of the model, in
//! which case plain IPF only creeps towards it. Before iterating, the cells
//! that are zero in every nonnegative table sharing the observed margins are
//! found with a small linear program and held at zero, so IPF fits the
//! extended MLE on the remaining cells at its usual geometric rate.

use std::collections::BTreeSet;
use std::sync::Arc;

use microlp::{ComparisonOp, OptimizationDirection, Problem};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{poisson_e_inv, poisson_p_unique};
use crate::num::Real;
use crate::risk::{CellRisk, Diagnostics, RiskEstimate};
use crate::table::{CellKey, FreqTable, TableSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoglinModel {
    Independence,
    TwoWay,
}

impl LoglinModel {
    pub fn label(self) -> &'static str {
        match self {
            LoglinModel::Independence => "independence",
            LoglinModel::TwoWay => "two-way",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpfOptions<T> {
    /// Stop once every fitted pairwise margin is within `tol` of the observed one.
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for IpfOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-8),
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone)]
enum Fitted<T> {
    /// `γ̂_k = Π_i p_i(k_i)`.
    Independence { proportions: Vec<Vec<T>> },
    /// Two attributes with all interactions: `γ̂_k = f_k / n`.
    Saturated { table: FreqTable },
    /// `n γ̂_k = base · Π_{pairs} φ_ab(k_a, k_b)`, zero on `boundary`.
    Pairwise {
        base: T,
        pairs: Vec<Pair<T>>,
        boundary: BTreeSet<CellKey>,
    },
}

#[derive(Debug, Clone)]
struct Pair<T> {
    a: usize,
    b: usize,
    b_levels: usize,
    factor: Vec<T>,
}

impl<T: Real> Pair<T> {
    fn slot(&self, key: &[u32]) -> usize {
        key[self.a] as usize * self.b_levels + key[self.b] as usize
    }
}

/// A fitted log-linear model.
#[derive(Debug, Clone)]
pub struct LoglinFit<T> {
    pub model: LoglinModel,
    /// Sample total `n`.
    pub n: T,
    pub converged: bool,
    /// IPF sweeps performed (0 for closed forms).
    pub iterations: usize,
    /// Largest absolute gap between a fitted and an observed margin of the
    /// model's sufficient statistics.
    pub max_margin_gap: T,
    /// Poisson log-likelihood (up to constants) after each IPF sweep.
    pub loglik_trace: Vec<T>,
    /// Cells with positive pairwise margins whose fitted value is forced to
    /// zero because the MLE lies on the boundary.
    pub boundary_cells: usize,
    schema: Arc<TableSchema>,
    uniques: Vec<CellKey>,
    fitted: Fitted<T>,
}

impl<T: Real> LoglinFit<T> {
    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn uniques(&self) -> &[CellKey] {
        &self.uniques
    }

    /// Fitted expected sample count `n γ̂_k`.
    pub fn expected(&self, key: &CellKey) -> T {
        match &self.fitted {
            Fitted::Independence { proportions } => {
                let g = key
                    .coords()
                    .iter()
                    .zip(proportions)
                    .fold(T::one(), |acc, (&l, p)| acc * p[l as usize]);
                self.n * g
            }
            Fitted::Saturated { table } => T::from_count(table.get(key)),
            Fitted::Pairwise {
                base,
                pairs,
                boundary,
            } => {
                if boundary.contains(key) {
                    T::zero()
                } else {
                    pairwise_mean(*base, pairs, key.coords())
                }
            }
        }
    }

    /// `γ̂_k`.
    pub fn gamma_hat(&self, key: &CellKey) -> T {
        self.expected(key) / self.n
    }
}

fn pairwise_mean<T: Real>(base: T, pairs: &[Pair<T>], key: &[u32]) -> T {
    pairs
        .iter()
        .fold(base, |acc, p| acc * p.factor[p.slot(key)])
}

fn check_nonempty(f: &FreqTable) -> Result<()> {
    if f.total() == 0 {
        return Err(Error::InvalidParameter(
            "cannot fit a log-linear model to an empty table".into(),
        ));
    }
    Ok(())
}

/// Per-attribute level proportions of `f`.
fn one_way_proportions<T: Real>(f: &FreqTable) -> Vec<Vec<T>> {
    let n = T::from_count(f.total());
    let mut counts: Vec<Vec<u64>> = f.schema().levels().map(|l| vec![0; l as usize]).collect();
    for (key, c) in f.iter() {
        for (i, &l) in key.coords().iter().enumerate() {
            counts[i][l as usize] += c;
        }
    }
    counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| T::from_count(c) / n).collect())
        .collect()
}

/// Mutual independence: `γ̂_k` is the product of the one-way margin proportions.
pub fn fit_independence<T: Real>(f: &FreqTable) -> Result<LoglinFit<T>> {
    check_nonempty(f)?;
    let n = T::from_count(f.total());
    let proportions = one_way_proportions::<T>(f);
    let sums: Vec<T> = proportions
        .iter()
        .map(|p| p.iter().copied().sum())
        .collect();

    let mut gap = T::zero();
    let mut observed: Vec<Vec<u64>> = f.schema().levels().map(|l| vec![0; l as usize]).collect();
    for (key, c) in f.iter() {
        for (i, &l) in key.coords().iter().enumerate() {
            observed[i][l as usize] += c;
        }
    }
    for (i, p) in proportions.iter().enumerate() {
        let others = sums
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(T::one(), |acc, (_, &s)| acc * s);
        for (l, &pl) in p.iter().enumerate() {
            let fitted = n * pl * others;
            gap = gap.max((fitted - T::from_count(observed[i][l])).abs());
        }
    }

    Ok(LoglinFit {
        model: LoglinModel::Independence,
        n,
        converged: true,
        iterations: 0,
        max_margin_gap: gap,
        loglik_trace: Vec::new(),
        boundary_cells: 0,
        schema: f.schema_arc().clone(),
        uniques: f.sample_uniques(),
        fitted: Fitted::Independence { proportions },
    })
}

/// All two-way interactions, fitted by iterative proportional fitting to
/// every observed pairwise margin, starting from the uniform table.
///
/// With two attributes the model is saturated and the observed table is
/// returned as the fit.
pub fn fit_two_way<T: Real>(f: &FreqTable, opts: IpfOptions<T>) -> Result<LoglinFit<T>> {
    check_nonempty(f)?;
    let schema = f.schema_arc().clone();
    let m = schema.m();
    if m < 2 {
        return Err(Error::InvalidParameter(
            "two-way model needs at least two attributes".into(),
        ));
    }
    let n = T::from_count(f.total());
    if m == 2 {
        return Ok(LoglinFit {
            model: LoglinModel::TwoWay,
            n,
            converged: true,
            iterations: 0,
            max_margin_gap: T::zero(),
            loglik_trace: Vec::new(),
            boundary_cells: 0,
            schema,
            uniques: f.sample_uniques(),
            fitted: Fitted::Saturated { table: f.clone() },
        });
    }
    if opts.tol.is_nan() || opts.tol <= T::zero() || opts.max_iter == 0 {
        return Err(Error::InvalidParameter(
            "IPF needs tol > 0 and max_iter >= 1".into(),
        ));
    }

    let levels: Vec<usize> = schema.levels().map(|l| l as usize).collect();
    let mut pairs = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            pairs.push(Pair {
                a,
                b,
                b_levels: levels[b],
                factor: vec![T::one(); levels[a] * levels[b]],
            });
        }
    }
    let observed: Vec<Vec<T>> = pairs
        .iter()
        .map(|p| {
            let mut obs = vec![T::zero(); p.factor.len()];
            for (key, c) in f.iter() {
                let s = p.slot(key.coords());
                obs[s] = obs[s] + T::from_count(c);
            }
            obs
        })
        .collect();

    let boundary = boundary_cells(&schema, f, &pairs, &observed)?;
    let k_total = T::lit(schema.cell_count() as f64);
    let base = n / k_total;
    let mut converged = false;
    let mut iterations = 0;
    let mut gap = T::infinity();
    let mut trace = Vec::new();

    while iterations < opts.max_iter {
        iterations += 1;
        for pi in 0..pairs.len() {
            let fitted = pair_margins(&schema, base, &pairs, &boundary, &[pi]).remove(0);
            let pair = &mut pairs[pi];
            for ((phi, &obs), &fit) in pair.factor.iter_mut().zip(&observed[pi]).zip(&fitted) {
                if obs == T::zero() {
                    *phi = T::zero();
                } else if fit > T::zero() {
                    *phi = *phi * obs / fit;
                }
            }
        }
        let all: Vec<usize> = (0..pairs.len()).collect();
        let fitted = pair_margins(&schema, base, &pairs, &boundary, &all);
        gap = fitted
            .iter()
            .zip(&observed)
            .flat_map(|(fit, obs)| fit.iter().zip(obs).map(|(&a, &b)| (a - b).abs()))
            .fold(T::zero(), T::max);
        trace.push(sample_loglik(f, base, &pairs));
        if gap <= opts.tol {
            converged = true;
            break;
        }
    }

    Ok(LoglinFit {
        model: LoglinModel::TwoWay,
        n,
        converged,
        iterations,
        max_margin_gap: gap,
        loglik_trace: trace,
        boundary_cells: boundary.len(),
        schema,
        uniques: f.sample_uniques(),
        fitted: Fitted::Pairwise {
            base,
            pairs,
            boundary,
        },
    })
}

/// Fitted margins of the selected pairs, from one streaming pass over the grid.
fn pair_margins<T: Real>(
    schema: &TableSchema,
    base: T,
    pairs: &[Pair<T>],
    boundary: &BTreeSet<CellKey>,
    which: &[usize],
) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = which
        .iter()
        .map(|&i| vec![T::zero(); pairs[i].factor.len()])
        .collect();
    for cell in schema.cells() {
        if !boundary.is_empty() && boundary.contains(&cell) {
            continue;
        }
        let mu = pairwise_mean(base, pairs, cell.coords());
        if mu == T::zero() {
            continue;
        }
        for (slot, &i) in out.iter_mut().zip(which) {
            let s = pairs[i].slot(cell.coords());
            slot[s] = slot[s] + mu;
        }
    }
    out
}

/// Zero cells whose pairwise margins are all positive but which are zero in
/// every nonnegative table with the observed margins.
///
/// Solves `max Σ_c y_c` over candidate zero cells `c`, subject to
/// `margins(x) = s · margins(f)`, `x ≥ 0`, `s ≥ 0` and `0 ≤ y_c ≤ min(1, x_c)`.
/// The feasible `x` form a cone, so every cell that can be positive reaches
/// `y_c = 1` at the optimum and every other cell stays at 0.
fn boundary_cells<T: Real>(
    schema: &TableSchema,
    f: &FreqTable,
    pairs: &[Pair<T>],
    observed: &[Vec<T>],
) -> Result<BTreeSet<CellKey>> {
    let open = |key: &[u32]| {
        pairs
            .iter()
            .zip(observed)
            .all(|(p, obs)| obs[p.slot(key)] > T::zero())
    };
    let mut cells = Vec::new();
    let mut candidates = 0usize;
    for cell in schema.cells() {
        let positive = f.get(&cell) > 0;
        if positive || open(cell.coords()) {
            candidates += usize::from(!positive);
            cells.push((cell, positive));
        }
    }
    if candidates == 0 {
        return Ok(BTreeSet::new());
    }

    let n = T::from_count(f.total()).as_f64();
    let offsets: Vec<usize> = pairs
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.factor.len();
            Some(start)
        })
        .collect();
    let rows_total =
        offsets.last().copied().unwrap_or(0) + pairs.last().map_or(0, |p| p.factor.len());
    let mut rows: Vec<Vec<(microlp::Variable, f64)>> = vec![Vec::new(); rows_total];

    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let scale = lp.add_var(0.0, (0.0, f64::INFINITY));
    let mut y_vars = Vec::with_capacity(candidates);
    for (cell, positive) in &cells {
        let x = lp.add_var(0.0, (0.0, f64::INFINITY));
        for (p, &start) in pairs.iter().zip(&offsets) {
            rows[start + p.slot(cell.coords())].push((x, 1.0));
        }
        if !positive {
            let y = lp.add_var(1.0, (0.0, 1.0));
            lp.add_constraint([(y, 1.0), (x, -1.0)], ComparisonOp::Le, 0.0);
            y_vars.push((cell, y));
        }
    }
    for ((p, &start), obs) in pairs.iter().zip(&offsets).zip(observed) {
        for slot in 0..p.factor.len() {
            let target = obs[slot].as_f64() / n;
            if target > 0.0 {
                let mut row = std::mem::take(&mut rows[start + slot]);
                row.push((scale, -target));
                lp.add_constraint(row, ComparisonOp::Eq, 0.0);
            }
        }
    }
    let solution = lp
        .solve()
        .map_err(|e| Error::InvalidParameter(format!("boundary detection LP failed: {e}")))?
        .into_solution()
        .map_err(|_| Error::InvalidParameter("boundary detection LP was interrupted".into()))?;
    Ok(y_vars
        .into_iter()
        .filter(|(_, y)| solution.var_value(*y) < 0.5)
        .map(|(cell, _)| cell.clone())
        .collect())
}

/// `Σ_k f_k log μ_k - Σ_k μ_k`; after a full sweep `Σ μ_k = n`.
fn sample_loglik<T: Real>(f: &FreqTable, base: T, pairs: &[Pair<T>]) -> T {
    let n = T::from_count(f.total());
    f.iter()
        .map(|(k, c)| T::from_count(c) * pairwise_mean(base, pairs, k.coords()).ln())
        .fold(T::zero(), |a, b| a + b)
        - n
}

/// Plug-in risks: `mu_k = N γ̂_k (1 - π)` for every sample unique.
pub fn loglin_estimate<T: Real>(fit: &LoglinFit<T>, n_pop: T, pi: T) -> Result<RiskEstimate<T>> {
    if !(n_pop.is_finite() && n_pop > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "population size must be positive, got {n_pop}"
        )));
    }
    if !(pi > T::zero() && pi < T::one()) {
        return Err(Error::InvalidParameter(format!(
            "sampling fraction must lie in (0, 1), got {pi}"
        )));
    }
    let mut diagnostics = Diagnostics::default();
    if !fit.converged {
        diagnostics.bump("ipf_not_converged");
    }
    if fit.boundary_cells > 0 {
        diagnostics.add("boundary_cells", fit.boundary_cells as u64);
    }
    let cells = fit
        .uniques
        .iter()
        .map(|key| {
            let expected = fit.expected(key);
            let mu = n_pop * (expected / fit.n) * (T::one() - pi);
            Ok(CellRisk {
                key: key.clone(),
                param: expected,
                p_unique: poisson_p_unique(mu)?,
                e_inv: poisson_e_inv(mu)?,
                flagged: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskEstimate::from_cells(cells, diagnostics))
}
