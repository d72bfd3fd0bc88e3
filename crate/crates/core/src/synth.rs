//! Synthetic populations, Bernoulli samples and exact true risk.
//!
//! Populations follow `F_k ~ Poisson(N γ_k)` independently over the grid; a
//! sample keeps each population unit with probability `π`, so
//! `f_k | F_k ~ Bin(F_k, π)`. With both tables in hand `τ₁` and `τ₂` are
//! computed by direct enumeration over the sample uniques.

use std::sync::Arc;

use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::table::{CellKey, FreqTable, TableSchema};

/// Discretized Gaussian bump with equal pairwise correlation, evaluated at
/// integer level codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothLaw {
    pub location: Vec<f64>,
    pub scale: Vec<f64>,
    #[serde(default)]
    pub correlation: f64,
}

impl SmoothLaw {
    fn validate(&self, m: usize) -> Result<()> {
        if self.location.len() != m || self.scale.len() != m {
            return Err(Error::Config(format!(
                "smooth law needs {m} locations and scales, got {} and {}",
                self.location.len(),
                self.scale.len()
            )));
        }
        if self.scale.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config("smooth law scales must be positive".into()));
        }
        let lower = if m > 1 { -1.0 / (m as f64 - 1.0) } else { -1.0 };
        if !(self.correlation > lower && self.correlation < 1.0) {
            return Err(Error::Config(format!(
                "correlation {} outside ({lower}, 1)",
                self.correlation
            )));
        }
        Ok(())
    }

    /// Unnormalized density at `key`.
    fn density(&self, key: &[u32]) -> f64 {
        let m = key.len() as f64;
        let rho = self.correlation;
        let (mut sq, mut sum) = (0.0, 0.0);
        for ((&k, &loc), &scale) in key.iter().zip(&self.location).zip(&self.scale) {
            let z = (f64::from(k) - loc) / scale;
            sq += z * z;
            sum += z;
        }
        // quadratic form with the inverse of the equicorrelation matrix
        let quad = (sq - rho / (1.0 + (m - 1.0) * rho) * sum * sum) / (1.0 - rho);
        (-0.5 * quad).exp()
    }
}

/// Cell-probability law `γ` of a synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GammaLaw {
    /// Product of per-attribute level probabilities.
    Independence {
        probabilities: Vec<Vec<f64>>,
    },
    Smooth(SmoothLaw),
    /// `weight · smooth + (1 - weight) · independence`.
    Mixture {
        probabilities: Vec<Vec<f64>>,
        smooth: SmoothLaw,
        weight: f64,
    },
}

fn check_probabilities(probabilities: &[Vec<f64>], schema: &TableSchema) -> Result<()> {
    if probabilities.len() != schema.m() {
        return Err(Error::Config(format!(
            "independence law needs {} probability vectors, got {}",
            schema.m(),
            probabilities.len()
        )));
    }
    for (p, attr) in probabilities.iter().zip(schema.attributes()) {
        if p.len() != attr.levels as usize {
            return Err(Error::Config(format!(
                "`{}` has {} levels but {} probabilities",
                attr.name,
                attr.levels,
                p.len()
            )));
        }
        if p.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "`{}` probabilities must be nonnegative with positive sum",
                attr.name
            )));
        }
    }
    Ok(())
}

fn independence_weight(probabilities: &[Vec<f64>], key: &[u32]) -> f64 {
    key.iter()
        .zip(probabilities)
        .map(|(&k, p)| p[k as usize] / p.iter().sum::<f64>())
        .product()
}

impl GammaLaw {
    pub fn validate(&self, schema: &TableSchema) -> Result<()> {
        match self {
            GammaLaw::Independence { probabilities } => check_probabilities(probabilities, schema),
            GammaLaw::Smooth(law) => law.validate(schema.m()),
            GammaLaw::Mixture {
                probabilities,
                smooth,
                weight,
            } => {
                check_probabilities(probabilities, schema)?;
                smooth.validate(schema.m())?;
                if !(0.0..=1.0).contains(weight) {
                    return Err(Error::Config(format!(
                        "mixture weight {weight} outside [0, 1]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// `γ_k` for every cell, in lexicographic order, normalized to sum to one.
    pub fn cell_probabilities(&self, schema: &TableSchema) -> Result<Vec<(CellKey, f64)>> {
        self.validate(schema)?;
        let normalized = |raw: Vec<(CellKey, f64)>| {
            let total: f64 = raw.iter().map(|(_, g)| g).sum();
            raw.into_iter()
                .map(|(k, g)| (k, g / total))
                .collect::<Vec<_>>()
        };
        let smooth_part = |law: &SmoothLaw| {
            normalized(
                schema
                    .cells()
                    .map(|k| {
                        let d = law.density(k.coords());
                        (k, d)
                    })
                    .collect(),
            )
        };
        Ok(match self {
            GammaLaw::Independence { probabilities } => schema
                .cells()
                .map(|k| {
                    let g = independence_weight(probabilities, k.coords());
                    (k, g)
                })
                .collect(),
            GammaLaw::Smooth(law) => smooth_part(law),
            GammaLaw::Mixture {
                probabilities,
                smooth,
                weight,
            } => smooth_part(smooth)
                .into_iter()
                .map(|(k, g)| {
                    let ind = independence_weight(probabilities, k.coords());
                    (k, weight * g + (1.0 - weight) * ind)
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub schema: Arc<TableSchema>,
    /// Expected population size `N`.
    pub n_expected: f64,
    pub law: GammaLaw,
    pub seed: u64,
}

/// Draws `F_k ~ Poisson(N γ_k)` independently for every cell.
pub fn gen_population(spec: &PopulationSpec) -> Result<FreqTable> {
    if !(spec.n_expected.is_finite() && spec.n_expected >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "expected population size must be nonnegative, got {}",
            spec.n_expected
        )));
    }
    let gamma = spec.law.cell_probabilities(&spec.schema)?;
    let mut rng = stream_rng(spec.seed, Stream::Population);
    let mut counts = Vec::new();
    for (key, g) in gamma {
        let rate = spec.n_expected * g;
        if rate <= 0.0 {
            continue;
        }
        let draw = Poisson::new(rate)
            .map_err(|e| Error::InvalidParameter(format!("Poisson rate {rate}: {e}")))?
            .sample(&mut rng);
        if draw > 0.0 {
            counts.push((key, draw as u64));
        }
    }
    FreqTable::from_counts(spec.schema.clone(), counts)
}

/// Keeps each population unit independently with probability `pi`.
pub fn draw_sample(population: &FreqTable, pi: f64, seed: u64) -> Result<FreqTable> {
    if !(pi > 0.0 && pi <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling fraction must lie in (0, 1], got {pi}"
        )));
    }
    if pi == 1.0 {
        return Ok(population.clone());
    }
    let mut rng = stream_rng(seed, Stream::Sample);
    let mut counts = Vec::new();
    for (key, big_f) in population.iter() {
        let f = Binomial::new(big_f, pi)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(&mut rng);
        counts.push((key.clone(), f));
    }
    FreqTable::from_counts(population.schema_arc().clone(), counts)
}

/// Exact `τ₁`, `τ₂` of a sample against its population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruthReport {
    pub tau1: u64,
    pub tau2: f64,
    /// Sample uniques `|U|`.
    pub unique_count: u64,
    /// Cells with `F_k = 1`.
    pub population_uniques: u64,
}

pub fn true_risk(sample: &FreqTable, population: &FreqTable) -> Result<TruthReport> {
    let (s, p) = (sample.schema(), population.schema());
    if s.m() != p.m() || s.levels().zip(p.levels()).any(|(a, b)| a != b) {
        return Err(Error::TableMismatch(
            "sample and population schemas differ".into(),
        ));
    }
    for (key, f) in sample.iter() {
        let big_f = population.get(key);
        if f > big_f {
            return Err(Error::TableMismatch(format!(
                "cell {key}: sample count {f} exceeds population count {big_f}"
            )));
        }
    }
    let mut tau1 = 0;
    let mut tau2 = 0.0;
    let uniques = sample.sample_uniques();
    for key in &uniques {
        let big_f = population.get(key);
        if big_f == 1 {
            tau1 += 1;
        }
        tau2 += 1.0 / big_f as f64;
    }
    Ok(TruthReport {
        tau1,
        tau2,
        unique_count: uniques.len() as u64,
        population_uniques: population.iter().filter(|&(_, c)| c == 1).count() as u64,
    })
}
