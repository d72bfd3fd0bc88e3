//! Plug-in global risk estimates assembled from per-unique conditional risks.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::num::Real;
use crate::table::CellKey;

/// Estimated conditional risk of one sample unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRisk<T> {
    pub key: CellKey,
    /// The method's per-cell parameter: `λ̂_k` for smoothing, the fitted
    /// expected sample count `n γ̂_k` for log-linear models, `F̂_k` for Argus.
    pub param: T,
    /// Estimate of `P(F_k = 1 | f_k = 1)`.
    pub p_unique: T,
    /// Estimate of `E[1/F_k | f_k = 1]`.
    pub e_inv: T,
    /// Set when the cell needed special handling (clamping, ridge fallback,
    /// non-convergence).
    pub flagged: bool,
}

/// Named counters and free-form notes collected during estimation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    pub counters: BTreeMap<String, u64>,
    pub notes: Vec<String>,
}

impl Diagnostics {
    pub fn bump(&mut self, name: &str) {
        self.add(name, 1);
    }

    pub fn add(&mut self, name: &str, by: u64) {
        *self.counters.entry(name.to_string()).or_insert(0) += by;
    }

    pub fn count(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn merge(&mut self, other: &Diagnostics) {
        for (k, v) in &other.counters {
            self.add(k, *v);
        }
        self.notes.extend(other.notes.iter().cloned());
    }

    pub fn is_empty(&self) -> bool {
        self.counters.values().all(|&v| v == 0) && self.notes.is_empty()
    }
}

impl fmt::Display for Diagnostics {
    /// Compact `key=value;...` form used in report rows.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, v) in self.counters.iter().filter(|(_, &v)| v > 0) {
            if !first {
                f.write_str(";")?;
            }
            write!(f, "{k}={v}")?;
            first = false;
        }
        for note in &self.notes {
            if !first {
                f.write_str(";")?;
            }
            write!(f, "{note}")?;
            first = false;
        }
        Ok(())
    }
}

/// `τ̂_1 = Σ_U P̂_k` and `τ̂_2 = Σ_U Ê_k` with the per-cell terms retained.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEstimate<T> {
    pub cells: Vec<CellRisk<T>>,
    pub tau1: T,
    pub tau2: T,
    pub diagnostics: Diagnostics,
}

impl<T: Real> RiskEstimate<T> {
    /// Sums in ascending key order so the totals do not depend on how the
    /// cells were computed.
    pub fn from_cells(mut cells: Vec<CellRisk<T>>, diagnostics: Diagnostics) -> Self {
        cells.sort_by(|a, b| a.key.cmp(&b.key));
        let tau1 = cells
            .iter()
            .map(|c| c.p_unique)
            .fold(T::zero(), |a, b| a + b);
        let tau2 = cells.iter().map(|c| c.e_inv).fold(T::zero(), |a, b| a + b);
        Self {
            cells,
            tau1,
            tau2,
            diagnostics,
        }
    }

    pub fn unique_count(&self) -> usize {
        self.cells.len()
    }

    pub fn flagged_count(&self) -> usize {
        self.cells.iter().filter(|c| c.flagged).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_follow_key_order() {
        let cell = |k: u32, p: f64, e: f64| CellRisk {
            key: CellKey::from([k]),
            param: 1.0,
            p_unique: p,
            e_inv: e,
            flagged: false,
        };
        let est = RiskEstimate::from_cells(
            vec![cell(2, 0.1, 0.2), cell(0, 0.3, 0.4)],
            Diagnostics::default(),
        );
        assert_eq!(est.cells[0].key, CellKey::from([0]));
        assert!((est.tau1 - 0.4).abs() < 1e-15);
        assert!((est.tau2 - 0.6).abs() < 1e-15);
        let empty = RiskEstimate::<f64>::from_cells(vec![], Diagnostics::default());
        assert_eq!((empty.tau1, empty.tau2), (0.0, 0.0));
    }

    #[test]
    fn diagnostics_render() {
        let mut d = Diagnostics::default();
        assert!(d.is_empty());
        d.bump("clamped");
        d.add("clamped", 2);
        d.note("empty stratum (1)");
        assert_eq!(d.to_string(), "clamped=3;empty stratum (1)");
    }
}
