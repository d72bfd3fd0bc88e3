//! Poisson and Negative Binomial posterior laws of `F_k` given a sample unique.
//!
//! Under Bernoulli sampling with `F_k ~ Poisson(N γ_k)`, the unseen remainder
//! `F_k - f_k` is Poisson with rate `N γ_k (1 - π_k)`, independent of `f_k`.
//! Under the Argus model the remainder is `NB(f_k, π_k)`. Only the `f_k = 1`
//! case is needed for the uniqueness-based risk measures.

use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::{stream_rng, Stream};

/// Below this rate `(1 - e^{-mu}) / mu` switches to its Taylor series.
const E_INV_SERIES_BELOW: f64 = 1e-5;

/// Above this `π` the Argus expectation switches to `1 - (1 - π) / 2`.
const NB_E_INV_SERIES_ABOVE: f64 = 1.0 - 1e-8;

fn check_rate<T: Real>(mu: T) -> Result<()> {
    if !mu.is_finite() || mu < T::zero() {
        return Err(Error::InvalidParameter(format!(
            "Poisson rate must be finite and nonnegative, got {mu}"
        )));
    }
    Ok(())
}

/// `P(F = 1 | f = 1) = exp(-mu)` with `mu = N γ (1 - π)`.
pub fn poisson_p_unique<T: Real>(mu: T) -> Result<T> {
    check_rate(mu)?;
    Ok((-mu).exp())
}

/// `E[1/F | f = 1] = (1 - exp(-mu)) / mu`, equal to 1 at `mu = 0`.
pub fn poisson_e_inv<T: Real>(mu: T) -> Result<T> {
    check_rate(mu)?;
    if mu < T::lit(E_INV_SERIES_BELOW) {
        // 1 - mu/2 + mu^2/6
        return Ok(T::one() - mu / T::lit(2.0) + mu * mu / T::lit(6.0));
    }
    Ok(-(-mu).exp_m1() / mu)
}

/// Conditional rate of the unseen population remainder of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonPosterior<T> {
    mu: T,
}

impl<T: Real> PoissonPosterior<T> {
    pub fn new(mu: T) -> Result<Self> {
        check_rate(mu)?;
        Ok(Self { mu })
    }

    /// From the population-scale parameters: `mu = N γ (1 - π)`.
    pub fn from_population(n_pop: T, gamma: T, pi: T) -> Result<Self> {
        Self::new(n_pop * gamma * (T::one() - pi))
    }

    pub fn mu(&self) -> T {
        self.mu
    }

    pub fn p_unique(&self) -> T {
        (-self.mu).exp()
    }

    pub fn e_inv(&self) -> T {
        poisson_e_inv(self.mu).expect("rate validated at construction")
    }
}

/// Negative Binomial law counting failures before `alpha` successes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NbLaw<T> {
    alpha: T,
    p: T,
}

impl<T: Real> NbLaw<T> {
    pub fn new(alpha: T, p: T) -> Result<Self> {
        if !(alpha.is_finite() && alpha > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "NB alpha must be positive, got {alpha}"
            )));
        }
        if !(p > T::zero() && p <= T::one()) {
            return Err(Error::InvalidParameter(format!(
                "NB success probability must lie in (0, 1], got {p}"
            )));
        }
        Ok(Self { alpha, p })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn p(&self) -> T {
        self.p
    }

    pub fn ln_pmf(&self, x: u64) -> T {
        let alpha = self.alpha.as_f64();
        let p = self.p.as_f64();
        let xf = x as f64;
        let tail = if x == 0 {
            0.0
        } else if p == 1.0 {
            f64::NEG_INFINITY
        } else {
            xf * (-p).ln_1p()
        };
        let ln =
            ln_gamma(xf + alpha) - ln_gamma(xf + 1.0) - ln_gamma(alpha) + tail + alpha * p.ln();
        T::lit(ln)
    }

    /// `Γ(x+α) / (Γ(x+1) Γ(α)) (1-p)^x p^α`, evaluated in log space.
    pub fn pmf(&self, x: u64) -> T {
        self.ln_pmf(x).exp()
    }

    pub fn mean(&self) -> T {
        self.alpha * (T::one() - self.p) / self.p
    }
}

/// `P(F = 1 | f = 1)` under `F - 1 ~ NB(1, π)`: simply `π`.
pub fn nb_p_unique<T: Real>(pi: T) -> Result<T> {
    check_probability(pi)?;
    Ok(pi)
}

/// `E[1/F | f = 1] = -π log(π) / (1 - π)` under `F - 1 ~ NB(1, π)`, with limit 1 at `π = 1`.
pub fn nb_e_inv<T: Real>(pi: T) -> Result<T> {
    check_probability(pi)?;
    if pi > T::lit(NB_E_INV_SERIES_ABOVE) {
        return Ok(T::one() - (T::one() - pi) / T::lit(2.0));
    }
    Ok(-pi * pi.ln() / (T::one() - pi))
}

fn check_probability<T: Real>(pi: T) -> Result<()> {
    if !(pi > T::zero() && pi <= T::one()) {
        return Err(Error::InvalidParameter(format!(
            "probability must lie in (0, 1], got {pi}"
        )));
    }
    Ok(())
}

/// Law of `F_k` given `f_k = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosteriorModel {
    /// `F = 1 + Poisson(mu)`.
    Poisson { mu: f64 },
    /// `F = 1 + NB(1, pi)`, the Argus model.
    NegBinomial { pi: f64 },
}

impl PosteriorModel {
    fn validate(&self) -> Result<()> {
        match *self {
            PosteriorModel::Poisson { mu } => check_rate(mu),
            PosteriorModel::NegBinomial { pi } => check_probability(pi),
        }
    }

    /// Closed-form `(P(F = 1), E[1/F])`.
    pub fn closed_form(&self) -> Result<(f64, f64)> {
        match *self {
            PosteriorModel::Poisson { mu } => Ok((poisson_p_unique(mu)?, poisson_e_inv(mu)?)),
            PosteriorModel::NegBinomial { pi } => Ok((nb_p_unique(pi)?, nb_e_inv(pi)?)),
        }
    }
}

/// Sampler for `F | f = 1`.
#[derive(Debug, Clone)]
pub struct PosteriorSampler {
    inner: SamplerKind,
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Degenerate,
    Poisson(Poisson<f64>),
    Geometric(Geometric),
}

impl PosteriorSampler {
    pub fn new(model: PosteriorModel) -> Result<Self> {
        model.validate()?;
        let inner = match model {
            PosteriorModel::Poisson { mu: 0.0 } => SamplerKind::Degenerate,
            PosteriorModel::Poisson { mu } => SamplerKind::Poisson(
                Poisson::new(mu).map_err(|e| Error::InvalidParameter(e.to_string()))?,
            ),
            PosteriorModel::NegBinomial { pi: 1.0 } => SamplerKind::Degenerate,
            // NB(1, π) is the geometric count of failures before the first success.
            PosteriorModel::NegBinomial { pi } => SamplerKind::Geometric(
                Geometric::new(pi).map_err(|e| Error::InvalidParameter(e.to_string()))?,
            ),
        };
        Ok(Self { inner })
    }

    /// One draw of `F`, always `>= 1`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let remainder = match &self.inner {
            SamplerKind::Degenerate => 0,
            SamplerKind::Poisson(d) => d.sample(rng) as u64,
            SamplerKind::Geometric(d) => d.sample(rng),
        };
        1 + remainder
    }
}

/// One seeded draw of `F | f = 1`.
pub fn sample_posterior_f_given_f1(model: PosteriorModel, seed: u64) -> Result<u64> {
    let sampler = PosteriorSampler::new(model)?;
    Ok(sampler.draw(&mut stream_rng(seed, Stream::MonteCarlo)))
}

/// Monte-Carlo estimates of `P(F = 1)` and `E[1/F]` with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    pub draws: u64,
    pub p_unique: f64,
    pub p_unique_se: f64,
    pub e_inv: f64,
    pub e_inv_se: f64,
    pub mean_f: f64,
}

pub fn simulate_posterior(
    model: PosteriorModel,
    draws: u64,
    seed: u64,
) -> Result<PosteriorSummary> {
    if draws < 2 {
        return Err(Error::InvalidParameter("need at least two draws".into()));
    }
    let sampler = PosteriorSampler::new(model)?;
    let mut rng = stream_rng(seed, Stream::MonteCarlo);
    let (mut ones, mut sum_inv, mut sum_inv2, mut sum_f) = (0u64, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let f = sampler.draw(&mut rng);
        if f == 1 {
            ones += 1;
        }
        let inv = 1.0 / f as f64;
        sum_inv += inv;
        sum_inv2 += inv * inv;
        sum_f += f as f64;
    }
    let n = draws as f64;
    let p = ones as f64 / n;
    let e = sum_inv / n;
    let var_inv = ((sum_inv2 - n * e * e) / (n - 1.0)).max(0.0);
    Ok(PosteriorSummary {
        draws,
        p_unique: p,
        p_unique_se: (p * (1.0 - p) / n).sqrt(),
        e_inv: e,
        e_inv_se: (var_inv / n).sqrt(),
        mean_f: sum_f / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn poisson_p_unique_values() {
        assert_eq!(poisson_p_unique(0.0f64).unwrap(), 1.0);
        assert_relative_eq!(poisson_p_unique(2f64.ln()).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(
            poisson_p_unique(2.0f64).unwrap(),
            0.135_335_283_236_612_7,
            epsilon = 1e-15
        );
        assert!(poisson_p_unique(-1.0f64).is_err());
        assert!(poisson_p_unique(f64::NAN).is_err());
        assert!(poisson_p_unique(f64::INFINITY).is_err());
    }

    #[test]
    fn poisson_e_inv_values() {
        assert_eq!(poisson_e_inv(0.0f64).unwrap(), 1.0);
        assert_relative_eq!(
            poisson_e_inv(1.0f64).unwrap(),
            0.632_120_558_828_557_7,
            epsilon = 1e-15
        );
        assert!((poisson_e_inv(1e-12f64).unwrap() - 1.0).abs() < 1e-9);
        assert!(poisson_e_inv(-0.5f64).is_err());
    }

    #[test]
    fn e_inv_series_is_continuous_at_switch() {
        let below = poisson_e_inv(E_INV_SERIES_BELOW * (1.0 - 1e-12)).unwrap();
        let above = poisson_e_inv(E_INV_SERIES_BELOW).unwrap();
        assert!((below - above).abs() < 1e-14);
    }

    #[test]
    fn works_in_single_precision() {
        assert_relative_eq!(poisson_e_inv(1.0f32).unwrap(), 0.632_120_56, epsilon = 1e-6);
        assert_relative_eq!(
            nb_e_inv(0.5f32).unwrap(),
            std::f32::consts::LN_2,
            epsilon = 1e-6
        );
    }

    #[test]
    fn nb_pmf_values() {
        let geo = NbLaw::new(1.0f64, 0.5).unwrap();
        assert_relative_eq!(geo.pmf(0), 0.5, epsilon = 1e-14);
        assert_relative_eq!(geo.pmf(3), 0.0625, epsilon = 1e-14);
        let law = NbLaw::new(2.0f64, 0.3).unwrap();
        assert_relative_eq!(law.pmf(2), 0.1323, epsilon = 1e-13);
        let certain = NbLaw::new(3.0f64, 1.0).unwrap();
        assert_relative_eq!(certain.pmf(0), 1.0, epsilon = 1e-14);
        assert_eq!(certain.pmf(1), 0.0);
        assert!(NbLaw::new(0.0f64, 0.5).is_err());
        assert!(NbLaw::new(1.0f64, 0.0).is_err());
        assert!(NbLaw::new(1.0f64, 1.5).is_err());
    }

    #[test]
    fn nb_pmf_matches_monte_carlo() {
        // NB(2, 0.3) as the sum of two independent geometric failure counts.
        let geo = Geometric::new(0.3).unwrap();
        let mut rng = stream_rng(11, Stream::MonteCarlo);
        let draws = 1_000_000;
        let hits = (0..draws)
            .filter(|_| geo.sample(&mut rng) + geo.sample(&mut rng) == 2)
            .count();
        let freq = hits as f64 / draws as f64;
        let se = (0.1323f64 * (1.0 - 0.1323) / draws as f64).sqrt();
        assert!((freq - 0.1323).abs() < 4.0 * se, "freq {freq}");
    }

    #[test]
    fn nb_pmf_sums_to_one() {
        for &(alpha, p) in &[(1.0, 0.5), (2.0, 0.3), (0.4, 0.05), (25.0, 0.9)] {
            let law = NbLaw::new(alpha, p).unwrap();
            let mut total = 0.0f64;
            let mut x = 0u64;
            loop {
                let term = law.pmf(x);
                total += term;
                x += 1;
                // tail beyond the mode is bounded by a geometric series with ratio < 1
                if x as f64 > law.mean() && term < 1e-16 {
                    break;
                }
            }
            assert!((total - 1.0).abs() < 1e-9, "alpha {alpha} p {p}: {total}");
        }
    }

    #[test]
    fn argus_closed_forms() {
        assert_eq!(nb_p_unique(0.25f64).unwrap(), 0.25);
        assert_eq!(nb_e_inv(1.0f64).unwrap(), 1.0);
        assert_relative_eq!(
            nb_e_inv(0.5f64).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            nb_e_inv(0.01f64).unwrap(),
            0.046_516_870_565_536_28,
            epsilon = 1e-15
        );
        let near = 1.0f64 - 1e-9;
        assert!((nb_e_inv(near).unwrap() - (1.0 - 0.5e-9)).abs() < 1e-15);
        assert!(nb_e_inv(0.0f64).is_err());
    }

    #[test]
    fn sampler_degenerate_and_seeded() {
        for seed in 0..20 {
            assert_eq!(
                sample_posterior_f_given_f1(PosteriorModel::Poisson { mu: 0.0 }, seed).unwrap(),
                1
            );
        }
        let a = sample_posterior_f_given_f1(PosteriorModel::Poisson { mu: 3.0 }, 5).unwrap();
        let b = sample_posterior_f_given_f1(PosteriorModel::Poisson { mu: 3.0 }, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_moments() {
        let s = simulate_posterior(PosteriorModel::Poisson { mu: 2.0 }, 1_000_000, 1).unwrap();
        assert!((s.mean_f - 3.0).abs() < 0.01, "mean {}", s.mean_f);
        let s = simulate_posterior(PosteriorModel::NegBinomial { pi: 0.5 }, 1_000_000, 2).unwrap();
        assert!((s.p_unique - 0.5).abs() < 0.002, "p {}", s.p_unique);
    }

    proptest! {
        #[test]
        fn e_inv_bounds_and_order(mu in 0.0f64..50.0, dmu in 1e-6f64..5.0) {
            let e = poisson_e_inv(mu).unwrap();
            let p = poisson_p_unique(mu).unwrap();
            prop_assert!(e > 0.0 && e <= 1.0);
            prop_assert!(e >= p);
            if mu > 0.0 {
                prop_assert!(e > p);
            }
            prop_assert!(poisson_e_inv(mu + dmu).unwrap() < e);
        }

        #[test]
        fn argus_p_below_e(pi in 1e-6f64..1.0) {
            let p = nb_p_unique(pi).unwrap();
            let e = nb_e_inv(pi).unwrap();
            prop_assert!(p > 0.0 && p <= e && e <= 1.0);
        }
    }
}
