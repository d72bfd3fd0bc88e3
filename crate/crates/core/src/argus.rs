//! The Argus estimator.
//!
//! Sampling weights are calibrated within post-strata, summed per release cell
//! into initial population estimates `F̂_k`, and turned into moment estimates
//! `π̂_k = f_k / F̂_k`. Each sample unique then contributes the Negative
//! Binomial risks `P̂ = π̂_k` and `Ê = -π̂_k log(π̂_k) / (1 - π̂_k)`. Cells are
//! treated independently: no cell's estimate looks at any other cell.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::{nb_e_inv, nb_p_unique};
use crate::num::Real;
use crate::risk::{CellRisk, Diagnostics, RiskEstimate};
use crate::table::{CellKey, FreqTable, Microdata, TableSchema};

/// Post-strata definition and the known population count of each stratum.
///
/// An empty `strata_attrs` list means a single stratum covering everyone,
/// keyed by the empty level vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PostStrataSpec {
    pub strata_attrs: Vec<String>,
    pub population_margins: BTreeMap<Vec<u32>, f64>,
}

impl PostStrataSpec {
    pub fn single(population: f64) -> Self {
        Self {
            strata_attrs: Vec::new(),
            population_margins: BTreeMap::from([(Vec::new(), population)]),
        }
    }

    /// Margins read off a known population table over the given attributes.
    pub fn from_population(population: &FreqTable, strata_attrs: &[String]) -> Result<Self> {
        if strata_attrs.is_empty() {
            return Ok(Self::single(population.total() as f64));
        }
        let idx = strata_attrs
            .iter()
            .map(|name| {
                population.schema().index_of(name).ok_or_else(|| {
                    Error::Strata(format!(
                        "stratum attribute `{name}` not in population table"
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let margin = population.margin(&idx)?;
        Ok(Self {
            strata_attrs: strata_attrs.to_vec(),
            population_margins: margin
                .iter()
                .map(|(k, c)| (k.coords().to_vec(), c as f64))
                .collect(),
        })
    }
}

/// Microdata with one calibrated weight per record.
#[derive(Debug, Clone)]
pub struct WeightedSample<T> {
    pub microdata: Microdata,
    pub weights: Vec<T>,
    /// Stratum level vector of each record.
    pub strata: Vec<Vec<u32>>,
    pub diagnostics: Diagnostics,
}

impl<T: Real> WeightedSample<T> {
    /// Weighted record count per stratum.
    pub fn stratum_totals(&self) -> BTreeMap<Vec<u32>, T> {
        let mut totals = BTreeMap::new();
        for (s, &w) in self.strata.iter().zip(&self.weights) {
            let e = totals.entry(s.clone()).or_insert_with(T::zero);
            *e = *e + w;
        }
        totals
    }
}

/// Post-stratification weights `w_i = margin(s) / sample_count(s)`.
pub fn compute_weights<T: Real>(
    sample: &Microdata,
    spec: &PostStrataSpec,
) -> Result<WeightedSample<T>> {
    let columns = spec
        .strata_attrs
        .iter()
        .map(|name| {
            sample.column(name).ok_or_else(|| {
                Error::Strata(format!("stratum attribute `{name}` not found in microdata"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let strata: Vec<Vec<u32>> = (0..sample.len())
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();

    let mut sample_counts: BTreeMap<&[u32], u64> = BTreeMap::new();
    for s in &strata {
        *sample_counts.entry(s.as_slice()).or_insert(0) += 1;
    }

    let mut per_stratum = BTreeMap::new();
    for (&s, &count) in &sample_counts {
        let margin = spec.population_margins.get(s).copied().ok_or_else(|| {
            Error::Strata(format!(
                "stratum {s:?} has {count} sample records but no population margin"
            ))
        })?;
        if !(margin.is_finite() && margin > 0.0) {
            return Err(Error::Strata(format!(
                "stratum {s:?} has non-positive population margin {margin}"
            )));
        }
        per_stratum.insert(s.to_vec(), T::lit(margin) / T::from_count(count));
    }

    let mut diagnostics = Diagnostics::default();
    for s in spec.population_margins.keys() {
        if !sample_counts.contains_key(s.as_slice()) {
            diagnostics.bump("empty_strata");
            diagnostics.note(format!("empty stratum {s:?}"));
        }
    }

    let weights = strata.iter().map(|s| per_stratum[s]).collect();
    Ok(WeightedSample {
        microdata: sample.clone(),
        weights,
        strata,
        diagnostics,
    })
}

/// `F̂_k = Σ_{i ∈ cell k} w_i` over nonzero release cells.
pub fn fhat<T: Real>(
    ws: &WeightedSample<T>,
    release: &TableSchema,
) -> Result<BTreeMap<CellKey, T>> {
    Ok(fhat_with_counts(ws, release)?
        .into_iter()
        .map(|(k, (w, _))| (k, w))
        .collect())
}

fn fhat_with_counts<T: Real>(
    ws: &WeightedSample<T>,
    release: &TableSchema,
) -> Result<BTreeMap<CellKey, (T, u64)>> {
    let keys = ws.microdata.release_keys(release)?;
    let mut out: BTreeMap<CellKey, (T, u64)> = BTreeMap::new();
    for (key, &w) in keys.into_iter().zip(&ws.weights) {
        let e = out.entry(key).or_insert((T::zero(), 0));
        e.0 = e.0 + w;
        e.1 += 1;
    }
    Ok(out)
}

/// Risk of a single Argus cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArgusCellRisk<T> {
    pub pi_hat: T,
    pub p_unique: T,
    pub e_inv: T,
    /// `f_k / F̂_k` exceeded one and was clamped.
    pub clamped: bool,
}

/// `(P̂, Ê)` for a sample unique with initial population estimate `F̂_k`.
pub fn argus_cell_risk<T: Real>(f_k: u64, fhat_k: T) -> Result<ArgusCellRisk<T>> {
    if f_k != 1 {
        return Err(Error::InvalidParameter(format!(
            "Argus cell risk is defined for sample uniques, got f_k = {f_k}"
        )));
    }
    if !(fhat_k.is_finite() && fhat_k > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "F̂_k must be finite and positive, got {fhat_k}"
        )));
    }
    let raw = T::from_count(f_k) / fhat_k;
    let clamped = raw > T::one();
    let pi_hat = raw.min(T::one());
    Ok(ArgusCellRisk {
        pi_hat,
        p_unique: nb_p_unique(pi_hat)?,
        e_inv: nb_e_inv(pi_hat)?,
        clamped,
    })
}

/// Plug-in `τ̂_1`, `τ̂_2` over the sample uniques of `f`.
///
/// `f` must be the release table cross-tabulated from `ws.microdata`.
pub fn argus_estimate<T: Real>(f: &FreqTable, ws: &WeightedSample<T>) -> Result<RiskEstimate<T>> {
    let totals = fhat_with_counts(ws, f.schema())?;
    let mut diagnostics = ws.diagnostics.clone();
    let mut cells = Vec::new();
    for key in f.sample_uniques() {
        let (fhat_k, records) = totals.get(&key).copied().ok_or_else(|| {
            Error::TableMismatch(format!("sample unique {key} has no weighted records"))
        })?;
        if records != 1 {
            return Err(Error::TableMismatch(format!(
                "cell {key}: table count 1 but {records} weighted records"
            )));
        }
        let risk = argus_cell_risk(1, fhat_k)?;
        if risk.clamped {
            diagnostics.bump("clamped");
        }
        cells.push(CellRisk {
            key,
            param: fhat_k,
            p_unique: risk.p_unique,
            e_inv: risk.e_inv,
            flagged: risk.clamped,
        });
    }
    Ok(RiskEstimate::from_cells(cells, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{ingest_microdata, Attribute};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    /// Sex x Income microdata: `males` and `females` records in income level 0.
    fn sex_income(males: usize, females: usize) -> Microdata {
        let schema = Arc::new(
            TableSchema::new(vec![
                Attribute::nominal("sex", 2),
                Attribute::ordinal("income", 3),
            ])
            .unwrap(),
        );
        let mut records = vec![vec![0, 0]; males];
        records.extend(vec![vec![1, 0]; females]);
        Microdata::new(schema, records, BTreeMap::new()).unwrap()
    }

    /// One percent design, 20% male non-response: margins make w = 125 / 100.
    fn sex_strata(male_sample: u64, female_sample: u64) -> PostStrataSpec {
        PostStrataSpec {
            strata_attrs: vec!["sex".into()],
            population_margins: BTreeMap::from([
                (vec![0], 125.0 * male_sample as f64),
                (vec![1], 100.0 * female_sample as f64),
            ]),
        }
    }

    #[test]
    fn uniform_single_stratum() {
        let md = sex_income(4, 6);
        let ws = compute_weights::<f64>(&md, &PostStrataSpec::single(1000.0)).unwrap();
        assert!(ws.weights.iter().all(|&w| w == 100.0));
    }

    #[test]
    fn two_strata_division() {
        let md = sex_income(3, 7);
        let spec = PostStrataSpec {
            strata_attrs: vec!["sex".into()],
            population_margins: BTreeMap::from([(vec![0], 300.0), (vec![1], 700.0)]),
        };
        let ws = compute_weights::<f64>(&md, &spec).unwrap();
        assert!(ws.weights.iter().all(|&w| w == 100.0));
    }

    #[test]
    fn sex_example_weights_and_fhat() {
        let md = sex_income(20, 0);
        let ws = compute_weights::<f64>(&md, &sex_strata(20, 1)).unwrap();
        assert!(ws.weights.iter().all(|&w| w == 125.0));
        let f = fhat(&ws, md.schema()).unwrap();
        assert_eq!(f[&CellKey::from([0, 0])], 2500.0);
        assert_eq!(ws.diagnostics.count("empty_strata"), 1);
    }

    #[test]
    fn sex_not_released_mixed_cell() {
        let md = sex_income(10, 10);
        let ws = compute_weights::<f64>(&md, &sex_strata(10, 10)).unwrap();
        let release = TableSchema::new(vec![Attribute::ordinal("income", 3)]).unwrap();
        let f = fhat(&ws, &release).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[&CellKey::from([0])], 2250.0);
    }

    #[test]
    fn auxiliary_strata() {
        let schema = Arc::new(TableSchema::new(vec![Attribute::ordinal("income", 3)]).unwrap());
        let md = Microdata::new(
            schema,
            vec![vec![0], vec![1], vec![1]],
            BTreeMap::from([("geo".to_string(), vec![0, 1, 1])]),
        )
        .unwrap();
        let spec = PostStrataSpec {
            strata_attrs: vec!["geo".into()],
            population_margins: BTreeMap::from([(vec![0], 50.0), (vec![1], 40.0)]),
        };
        let ws = compute_weights::<f64>(&md, &spec).unwrap();
        assert_eq!(ws.weights, vec![50.0, 20.0, 20.0]);
    }

    #[test]
    fn weight_errors() {
        let md = sex_income(2, 2);
        let missing = PostStrataSpec {
            strata_attrs: vec!["sex".into()],
            population_margins: BTreeMap::from([(vec![0], 10.0)]),
        };
        assert!(matches!(
            compute_weights::<f64>(&md, &missing),
            Err(Error::Strata(_))
        ));
        let unknown = PostStrataSpec {
            strata_attrs: vec!["geo".into()],
            population_margins: BTreeMap::new(),
        };
        assert!(compute_weights::<f64>(&md, &unknown).is_err());
    }

    #[test]
    fn cell_risk_values() {
        let r = argus_cell_risk(1, 1.0f64).unwrap();
        assert_eq!((r.p_unique, r.e_inv), (1.0, 1.0));
        let r = argus_cell_risk(1, 2.0f64).unwrap();
        assert_eq!(r.p_unique, 0.5);
        assert_relative_eq!(r.e_inv, std::f64::consts::LN_2, epsilon = 1e-15);
        let r = argus_cell_risk(1, 100.0f64).unwrap();
        assert_relative_eq!(r.p_unique, 0.01, epsilon = 1e-15);
        assert_relative_eq!(r.e_inv, 0.046_516_870_565_536_28, epsilon = 1e-15);
        let r = argus_cell_risk(1, 0.8f64).unwrap();
        assert!(r.clamped);
        assert_eq!((r.p_unique, r.e_inv), (1.0, 1.0));
        assert!(argus_cell_risk(2, 3.0f64).is_err());
        assert!(argus_cell_risk(1, 0.0f64).is_err());
        assert!(argus_cell_risk(1, f64::NAN).is_err());
    }

    #[test]
    fn estimate_edge_cases() {
        let md = sex_income(2, 2);
        let ws = compute_weights::<f64>(&md, &PostStrataSpec::single(400.0)).unwrap();
        let f = ingest_microdata(&md).unwrap();
        let est = argus_estimate(&f, &ws).unwrap();
        assert_eq!((est.tau1, est.tau2), (0.0, 0.0));

        let md = sex_income(1, 0);
        let ws = compute_weights::<f64>(&md, &PostStrataSpec::single(1.0)).unwrap();
        let f = ingest_microdata(&md).unwrap();
        let est = argus_estimate(&f, &ws).unwrap();
        assert_eq!((est.tau1, est.tau2), (1.0, 1.0));
    }

    #[test]
    fn full_census_identity() {
        let schema = Arc::new(
            TableSchema::new(vec![Attribute::ordinal("a", 4), Attribute::ordinal("b", 3)]).unwrap(),
        );
        let records = vec![
            vec![0, 0],
            vec![0, 0],
            vec![1, 2],
            vec![3, 1],
            vec![2, 2],
            vec![2, 2],
            vec![2, 2],
        ];
        let md = Microdata::new(schema, records, BTreeMap::new()).unwrap();
        let f = ingest_microdata(&md).unwrap();
        let ws = compute_weights::<f64>(&md, &PostStrataSpec::single(md.len() as f64)).unwrap();
        let est = argus_estimate(&f, &ws).unwrap();
        assert_eq!(est.tau1, 2.0);
        assert_eq!(est.tau1, f.sample_uniques().len() as f64);
    }

    #[test]
    fn cells_are_independent() {
        // Adding records to another cell in the same stratum changes nothing
        // when the stratum weight is held fixed.
        let schema = Arc::new(
            TableSchema::new(vec![
                Attribute::nominal("sex", 2),
                Attribute::ordinal("income", 3),
            ])
            .unwrap(),
        );
        let risk_of_first = |extra: usize| {
            let mut records = vec![vec![0, 0]];
            records.extend(vec![vec![0, 2]; extra]);
            let n = records.len() as f64;
            let md = Microdata::new(schema.clone(), records, BTreeMap::new()).unwrap();
            let spec = PostStrataSpec {
                strata_attrs: vec!["sex".into()],
                population_margins: BTreeMap::from([(vec![0], 40.0 * n)]),
            };
            let ws = compute_weights::<f64>(&md, &spec).unwrap();
            let f = ingest_microdata(&md).unwrap();
            argus_estimate(&f, &ws).unwrap().cells[0].clone()
        };
        let a = risk_of_first(2);
        let b = risk_of_first(7);
        assert_eq!(a.key, b.key);
        assert_eq!((a.p_unique, a.e_inv), (b.p_unique, b.e_inv));
    }

    #[test]
    fn calibration_is_exact() {
        let md = sex_income(7, 13);
        let spec = PostStrataSpec {
            strata_attrs: vec!["sex".into()],
            population_margins: BTreeMap::from([(vec![0], 1234.5), (vec![1], 98765.0)]),
        };
        let ws = compute_weights::<f64>(&md, &spec).unwrap();
        for (s, total) in ws.stratum_totals() {
            let margin = spec.population_margins[&s];
            assert!((total - margin).abs() <= 1e-9 * margin);
        }
    }
}
