use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmissionGradient, EmissionModel, NaturalMetric};
use crate::error::{Error, Result};
use crate::linalg::{forward_substitute, spd_inverse_logdet, Matrix};
use crate::scalar::Real;

const SYMMETRY_TOL: f64 = 1e-12;

/// Multivariate normal emission with mean `mu` and covariance `cov`.
///
/// The Cholesky factor, precision and log-determinant are cached at
/// construction because the density is evaluated for every (timestep, state)
/// pair of every window.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr<T>", into = "GaussianRepr<T>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Gaussian<T: Real> {
    mu: Vec<T>,
    cov: Matrix<T>,
    chol: Matrix<T>,
    prec: Matrix<T>,
    logdet: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
struct GaussianRepr<T: Real> {
    mu: Vec<T>,
    cov: Matrix<T>,
}

impl<T: Real> TryFrom<GaussianRepr<T>> for Gaussian<T> {
    type Error = Error;
    fn try_from(r: GaussianRepr<T>) -> Result<Self> {
        Gaussian::new(r.mu, r.cov)
    }
}

impl<T: Real> From<Gaussian<T>> for GaussianRepr<T> {
    fn from(g: Gaussian<T>) -> Self {
        GaussianRepr { mu: g.mu, cov: g.cov }
    }
}

impl<T: Real> Gaussian<T> {
    pub fn new(mu: Vec<T>, cov: Matrix<T>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::validation("gaussian emission", "dimension must be >= 1"));
        }
        if cov.rows() != d || cov.cols() != d {
            return Err(Error::validation(
                "gaussian emission",
                format!("covariance must be {d}x{d}"),
            ));
        }
        if mu.iter().any(|m| !m.is_finite()) || !cov.is_finite() {
            return Err(Error::validation("gaussian emission", "non-finite entries"));
        }
        let scale = cov.max_abs().max(T::one());
        if !cov.is_symmetric(T::of(SYMMETRY_TOL) * scale) {
            return Err(Error::validation("gaussian emission", "covariance not symmetric"));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::validation("gaussian emission", "covariance not positive definite"))?;
        let (prec, logdet) = spd_inverse_logdet(&chol);
        Ok(Gaussian {
            mu,
            cov,
            chol,
            prec,
            logdet,
        })
    }

    /// Isotropic covariance `variance * I`.
    pub fn isotropic(mu: Vec<T>, variance: T) -> Result<Self> {
        let d = mu.len();
        Self::new(mu, Matrix::identity(d).scale(variance))
    }

    pub fn mean(&self) -> &[T] {
        &self.mu
    }

    pub fn cov(&self) -> &Matrix<T> {
        &self.cov
    }

    pub fn precision(&self) -> &Matrix<T> {
        &self.prec
    }

    pub fn cholesky_factor(&self) -> &Matrix<T> {
        &self.chol
    }

    pub fn log_det(&self) -> T {
        self.logdet
    }

    fn centered(&self, y: &[T]) -> Vec<T> {
        y.iter().zip(&self.mu).map(|(&a, &b)| a - b).collect()
    }
}

impl<T: Real> EmissionModel<T> for Gaussian<T> {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn in_support(&self, y: &[T]) -> bool {
        y.len() == self.dim() && y.iter().all(|v| v.is_finite())
    }

    fn log_density(&self, y: &[T]) -> T {
        if !self.in_support(y) {
            return T::neg_infinity();
        }
        let z = self.centered(y);
        let w = forward_substitute(&self.chol, &z);
        let quad: T = w.iter().map(|&x| x * x).sum();
        let d = T::of_usize(self.dim());
        -T::of(0.5) * (d * (T::TAU()).ln() + self.logdet + quad)
    }

    fn grad_log_density(&self, y: &[T]) -> Result<EmissionGradient<T>> {
        if !self.in_support(y) {
            return Err(Error::numeric("gaussian gradient", "observation outside support"));
        }
        let z = self.centered(y);
        let pz = self.prec.matvec(&z);
        let d = self.dim();
        let cov = Matrix::from_fn(d, d, |i, j| T::of(0.5) * (pz[i] * pz[j] - self.prec[(i, j)]));
        Ok(EmissionGradient::Gaussian { mean: pz, cov })
    }

    fn natural_metric(&self) -> NaturalMetric<T> {
        NaturalMetric::Gaussian {
            mean: self.cov.clone(),
            cov_factor: self.cov.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        Gaussian::new(self.mu.clone(), self.cov.clone()).map(|_| ())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let z: Vec<T> = (0..self.dim())
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let lz = self.chol.matvec(&z);
        self.mu.iter().zip(lz).map(|(&m, v)| m + v).collect()
    }
}
