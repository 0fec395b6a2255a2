use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmissionGradient, EmissionModel, NaturalMetric};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Scalar log-normal emission: `ln y ~ N(mu, sigma²)`, support `y > 0`.
///
/// Stored as `(mu, ln sigma)` so that sampler steps in the scale coordinate
/// are unconstrained; exposed as `(mu, sigma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LogNormalRepr<T>", into = "LogNormalRepr<T>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct LogNormal<T: Real> {
    mu: T,
    log_sigma: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
struct LogNormalRepr<T: Real> {
    mu: T,
    sigma: T,
}

impl<T: Real> TryFrom<LogNormalRepr<T>> for LogNormal<T> {
    type Error = Error;
    fn try_from(r: LogNormalRepr<T>) -> Result<Self> {
        LogNormal::new(r.mu, r.sigma)
    }
}

impl<T: Real> From<LogNormal<T>> for LogNormalRepr<T> {
    fn from(l: LogNormal<T>) -> Self {
        LogNormalRepr {
            mu: l.mu,
            sigma: l.sigma(),
        }
    }
}

impl<T: Real> LogNormal<T> {
    pub fn new(mu: T, sigma: T) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::validation("lognormal emission", "mu must be finite"));
        }
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::validation("lognormal emission", "sigma must be > 0"));
        }
        Ok(LogNormal {
            mu,
            log_sigma: sigma.ln(),
        })
    }

    pub fn from_log_sigma(mu: T, log_sigma: T) -> Result<Self> {
        Self::new(mu, log_sigma.exp())
    }

    pub fn mu(&self) -> T {
        self.mu
    }

    pub fn sigma(&self) -> T {
        self.log_sigma.exp()
    }

    pub fn log_sigma(&self) -> T {
        self.log_sigma
    }
}

impl<T: Real> EmissionModel<T> for LogNormal<T> {
    fn dim(&self) -> usize {
        1
    }

    fn in_support(&self, y: &[T]) -> bool {
        y.len() == 1 && y[0] > T::zero() && y[0].is_finite()
    }

    fn log_density(&self, y: &[T]) -> T {
        if !self.in_support(y) {
            return T::neg_infinity();
        }
        let ly = y[0].ln();
        let z = (ly - self.mu) / self.sigma();
        -ly - self.log_sigma - T::of(0.5) * T::TAU().ln() - T::of(0.5) * z * z
    }

    fn grad_log_density(&self, y: &[T]) -> Result<EmissionGradient<T>> {
        if !self.in_support(y) {
            return Err(Error::numeric("lognormal gradient", "observation outside support"));
        }
        let s = self.sigma();
        let r = y[0].ln() - self.mu;
        Ok(EmissionGradient::LogNormal {
            mu: r / (s * s),
            sigma: -T::one() / s + r * r / (s * s * s),
        })
    }

    /// Inverse Fisher information in `(mu, sigma)`: `diag(σ², σ²/2)`.
    fn natural_metric(&self) -> NaturalMetric<T> {
        let s2 = self.sigma() * self.sigma();
        NaturalMetric::LogNormal {
            mu: s2,
            sigma: s2 * T::of(0.5),
        }
    }

    fn validate(&self) -> Result<()> {
        LogNormal::new(self.mu, self.sigma()).map(|_| ())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let z = T::of(rng.sample::<f64, _>(StandardNormal));
        vec![(self.mu + self.sigma() * z).exp()]
    }
}
