//! Disclosure risk estimation for sample frequency tables.
//!
//! Given a released sample table `f`, the global risk measures
//!
//! * `τ₁ = Σ_k I(f_k = 1, F_k = 1)`, sample uniques that are population uniques, and
//! * `τ₂ = Σ_k I(f_k = 1) / F_k`, expected correct matches of sample uniques,
//!
//! depend on the unknown population table `F`. Three plug-in estimators are
//! provided:
//!
//! * [`argus`]: post-stratified sampling weights and Negative Binomial risks,
//! * [`loglinear`]: a Poisson log-linear fit (independence or all two-way
//!   interactions),
//! * [`smoothing`]: a local polynomial Poisson fit over a neighborhood of
//!   each sample unique.
//!
//! [`synth`] generates synthetic populations and samples with known true risk,
//! and [`experiment`] runs replicated comparisons of the estimators.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which is what the harness uses.

pub mod argus;
pub mod error;
pub mod experiment;
pub mod io;
pub mod loglinear;
pub mod models;
mod num;
pub mod risk;
pub mod rng;
pub mod smoothing;
pub mod synth;
pub mod table;

pub use error::{Error, Result};
pub use num::Real;
pub use risk::{CellRisk, Diagnostics, RiskEstimate};
pub use table::{ingest_microdata, Attribute, CellKey, FreqTable, Microdata, TableSchema};

pub type RiskEstimate64 = risk::RiskEstimate<f64>;
pub type CellRisk64 = risk::CellRisk<f64>;
pub type LocalFit64 = smoothing::LocalFit<f64>;
pub type NewtonOptions64 = smoothing::NewtonOptions<f64>;
pub type LoglinFit64 = loglinear::LoglinFit<f64>;
pub type IpfOptions64 = loglinear::IpfOptions<f64>;
pub type WeightedSample64 = argus::WeightedSample<f64>;
pub type PoissonPosterior64 = models::PoissonPosterior<f64>;
pub type NbLaw64 = models::NbLaw<f64>;
