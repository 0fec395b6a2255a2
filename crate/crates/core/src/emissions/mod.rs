//! Emission families: log-density, score, natural metric and sampling behind
//! one interface so the HMM code never looks at the family.

mod gaussian;
mod lognormal;

pub use gaussian::Gaussian;
pub use lognormal::LogNormal;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

pub trait EmissionModel<T: Real> {
    fn dim(&self) -> usize;

    fn in_support(&self, y: &[T]) -> bool;

    /// Exact log-density; `-inf` outside the support (check [`in_support`]
    /// to tell an impossible observation from a merely unlikely one).
    ///
    /// [`in_support`]: EmissionModel::in_support
    fn log_density(&self, y: &[T]) -> T;

    /// Partial derivatives of the log-density with respect to the exposed
    /// parameters.
    fn grad_log_density(&self, y: &[T]) -> Result<EmissionGradient<T>>;

    /// Inverse Fisher information, used as the preconditioner `D`.
    fn natural_metric(&self) -> NaturalMetric<T>;

    fn validate(&self) -> Result<()>;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T>;
}

/// Per-state emission parameters, tagged by family in JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub enum Emission<T: Real> {
    Gaussian(Gaussian<T>),
    #[serde(rename = "lognormal")]
    LogNormal(LogNormal<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    #[serde(rename = "lognormal")]
    LogNormal,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "lognormal" | "log-normal" => Ok(Family::LogNormal),
            other => Err(Error::Config(format!("unknown emission family {other:?}"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::LogNormal => "lognormal",
        })
    }
}

impl<T: Real> Emission<T> {
    pub fn family(&self) -> Family {
        match self {
            Emission::Gaussian(_) => Family::Gaussian,
            Emission::LogNormal(_) => Family::LogNormal,
        }
    }

    /// The zero gradient with this family's layout.
    pub fn zero_gradient(&self) -> EmissionGradient<T> {
        match self {
            Emission::Gaussian(g) => EmissionGradient::Gaussian {
                mean: vec![T::zero(); g.dim()],
                cov: Matrix::zeros(g.dim(), g.dim()),
            },
            Emission::LogNormal(_) => EmissionGradient::LogNormal {
                mu: T::zero(),
                sigma: T::zero(),
            },
        }
    }

    /// Unconstrained coordinates used by finite-difference checks and
    /// averaging: Gaussian `(mu, cov entries row-major)`, log-normal `(mu, sigma)`.
    pub fn params_vec(&self) -> Vec<T> {
        match self {
            Emission::Gaussian(g) => g.mean().iter().chain(g.cov().as_slice()).copied().collect(),
            Emission::LogNormal(l) => vec![l.mu(), l.sigma()],
        }
    }

    /// Inverse of [`params_vec`](Self::params_vec) with the same family and dimension.
    pub fn with_params_vec(&self, v: &[T]) -> Result<Self> {
        match self {
            Emission::Gaussian(g) => {
                let d = g.dim();
                if v.len() != d + d * d {
                    return Err(Error::validation("gaussian emission", "parameter length"));
                }
                let cov = Matrix::from_fn(d, d, |i, j| v[d + i * d + j]);
                Ok(Emission::Gaussian(Gaussian::new(v[..d].to_vec(), cov)?))
            }
            Emission::LogNormal(_) => {
                if v.len() != 2 {
                    return Err(Error::validation("lognormal emission", "parameter length"));
                }
                Ok(Emission::LogNormal(LogNormal::new(v[0], v[1])?))
            }
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Emission::Gaussian($e) => $body,
            Emission::LogNormal($e) => $body,
        }
    };
}

impl<T: Real> EmissionModel<T> for Emission<T> {
    fn dim(&self) -> usize {
        dispatch!(self, e => e.dim())
    }
    fn in_support(&self, y: &[T]) -> bool {
        dispatch!(self, e => e.in_support(y))
    }
    fn log_density(&self, y: &[T]) -> T {
        dispatch!(self, e => e.log_density(y))
    }
    fn grad_log_density(&self, y: &[T]) -> Result<EmissionGradient<T>> {
        dispatch!(self, e => e.grad_log_density(y))
    }
    fn natural_metric(&self) -> NaturalMetric<T> {
        dispatch!(self, e => e.natural_metric())
    }
    fn validate(&self) -> Result<()> {
        dispatch!(self, e => e.validate())
    }
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        dispatch!(self, e => e.sample(rng))
    }
}

/// Partials of a (log-)density or potential with respect to one state's
/// emission parameters, laid out like the family's parameter record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub enum EmissionGradient<T: Real> {
    Gaussian {
        mean: Vec<T>,
        cov: Matrix<T>,
    },
    #[serde(rename = "lognormal")]
    LogNormal {
        mu: T,
        sigma: T,
    },
}

impl<T: Real> EmissionGradient<T> {
    /// `self += w * other`; panics on a family mismatch.
    pub fn add_scaled(&mut self, other: &Self, w: T) {
        match (self, other) {
            (EmissionGradient::Gaussian { mean, cov }, EmissionGradient::Gaussian { mean: om, cov: oc }) => {
                for (a, &b) in mean.iter_mut().zip(om) {
                    *a += w * b;
                }
                cov.add_assign_scaled(oc, w);
            }
            (EmissionGradient::LogNormal { mu, sigma }, EmissionGradient::LogNormal { mu: om, sigma: os }) => {
                *mu += w * *om;
                *sigma += w * *os;
            }
            _ => panic!("emission gradient family mismatch"),
        }
    }

    pub fn scaled(&self, w: T) -> Self {
        let mut out = self.clone();
        out.scale_in_place(w);
        out
    }

    pub fn scale_in_place(&mut self, w: T) {
        match self {
            EmissionGradient::Gaussian { mean, cov } => {
                mean.iter_mut().for_each(|m| *m *= w);
                cov.as_mut_slice().iter_mut().for_each(|c| *c *= w);
            }
            EmissionGradient::LogNormal { mu, sigma } => {
                *mu *= w;
                *sigma *= w;
            }
        }
    }

    /// Flattened in the order of [`Emission::params_vec`].
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            EmissionGradient::Gaussian { mean, cov } => mean.iter().chain(cov.as_slice()).copied().collect(),
            EmissionGradient::LogNormal { mu, sigma } => vec![*mu, *sigma],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.to_vec().iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }
}

/// Weighted score accumulator for one state: `Σ_t w_t ∇ ln p(y_t | φ)`
/// without allocating per observation.
#[derive(Clone, Debug)]
pub(crate) enum ScoreAccumulator<T: Real> {
    /// Moments of `z = y - mu`.
    Gaussian { w: T, sz: Vec<T>, szz: Matrix<T> },
    /// Moments of `r = ln y - mu`.
    LogNormal { w: T, sr: T, srr: T },
}

impl<T: Real> ScoreAccumulator<T> {
    pub(crate) fn new(e: &Emission<T>) -> Self {
        match e {
            Emission::Gaussian(g) => ScoreAccumulator::Gaussian {
                w: T::zero(),
                sz: vec![T::zero(); g.dim()],
                szz: Matrix::zeros(g.dim(), g.dim()),
            },
            Emission::LogNormal(_) => ScoreAccumulator::LogNormal {
                w: T::zero(),
                sr: T::zero(),
                srr: T::zero(),
            },
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, e: &Emission<T>, y: &[T], weight: T) {
        match (self, e) {
            (ScoreAccumulator::Gaussian { w, sz, szz }, Emission::Gaussian(g)) => {
                *w += weight;
                let d = sz.len();
                let mu = g.mean();
                for i in 0..d {
                    let zi = y[i] - mu[i];
                    sz[i] += weight * zi;
                    for j in 0..d {
                        szz[(i, j)] += weight * zi * (y[j] - mu[j]);
                    }
                }
            }
            (ScoreAccumulator::LogNormal { w, sr, srr }, Emission::LogNormal(l)) => {
                let r = y[0].ln() - l.mu();
                *w += weight;
                *sr += weight * r;
                *srr += weight * r * r;
            }
            _ => panic!("score accumulator family mismatch"),
        }
    }

    pub(crate) fn merge(&mut self, other: &Self) {
        match (self, other) {
            (
                ScoreAccumulator::Gaussian { w, sz, szz },
                ScoreAccumulator::Gaussian {
                    w: ow,
                    sz: osz,
                    szz: oszz,
                },
            ) => {
                *w += *ow;
                for (a, &b) in sz.iter_mut().zip(osz) {
                    *a += b;
                }
                szz.add_assign_scaled(oszz, T::one());
            }
            (
                ScoreAccumulator::LogNormal { w, sr, srr },
                ScoreAccumulator::LogNormal {
                    w: ow,
                    sr: osr,
                    srr: osrr,
                },
            ) => {
                *w += *ow;
                *sr += *osr;
                *srr += *osrr;
            }
            _ => panic!("score accumulator family mismatch"),
        }
    }

    pub(crate) fn gradient(&self, e: &Emission<T>) -> EmissionGradient<T> {
        let half = T::of(0.5);
        match (self, e) {
            (ScoreAccumulator::Gaussian { w, sz, szz }, Emission::Gaussian(g)) => {
                let p = g.precision();
                let mean = p.matvec(sz);
                let cov = p.matmul(szz).matmul(p).scale(half).sub(&p.scale(half * *w));
                EmissionGradient::Gaussian { mean, cov }
            }
            (ScoreAccumulator::LogNormal { w, sr, srr }, Emission::LogNormal(l)) => {
                let s = l.sigma();
                EmissionGradient::LogNormal {
                    mu: *sr / (s * s),
                    sigma: -*w / s + *srr / (s * s * s),
                }
            }
            _ => panic!("score accumulator family mismatch"),
        }
    }
}

/// Riemannian preconditioner for one state's emission parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum NaturalMetric<T: Real> {
    /// `D_mu = mean`, `D_Sigma = cov_factor ⊗ cov_factor`.
    Gaussian { mean: Matrix<T>, cov_factor: Matrix<T> },
    /// Diagonal entries for `(mu, sigma)`.
    LogNormal { mu: T, sigma: T },
}

impl<T: Real> NaturalMetric<T> {
    /// The full block-diagonal operator over [`Emission::params_vec`] coordinates.
    pub fn to_matrix(&self) -> Matrix<T> {
        match self {
            NaturalMetric::Gaussian { mean, cov_factor } => {
                let d = mean.rows();
                let kron = kron(cov_factor, cov_factor);
                let n = d + d * d;
                Matrix::from_fn(n, n, |i, j| match (i < d, j < d) {
                    (true, true) => mean[(i, j)],
                    (false, false) => kron[(i - d, j - d)],
                    _ => T::zero(),
                })
            }
            NaturalMetric::LogNormal { mu, sigma } => Matrix::from_diag(&[*mu, *sigma]),
        }
    }
}

pub fn kron<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    Matrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_covariance_metric_is_identity() {
        let g = Emission::Gaussian(Gaussian::isotropic(vec![0.0f64, 0.0], 1.0).unwrap());
        match g.natural_metric() {
            NaturalMetric::Gaussian { mean, .. } => {
                assert_eq!(mean, Matrix::identity(2));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn scalar_kronecker_metric() {
        let g = Emission::Gaussian(Gaussian::isotropic(vec![0.0f64], 4.0).unwrap());
        let m = g.natural_metric().to_matrix();
        assert_eq!(m[(0, 0)], 4.0);
        assert_eq!(m[(1, 1)], 16.0);
    }

    #[test]
    fn family_tag_in_json() {
        let e = Emission::LogNormal(LogNormal::new(0.0f64, 2.0).unwrap());
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"family\":\"lognormal\""), "{s}");
        let back: Emission<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back.family(), Family::LogNormal);
        let g = Emission::Gaussian(Gaussian::isotropic(vec![1.0f64], 2.0).unwrap());
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"family\":\"gaussian\""), "{s}");
    }

    #[test]
    fn accumulator_matches_summed_scores() {
        let cov = Matrix::from_rows(&[vec![2.0, 0.4], vec![0.4, 1.0]]).unwrap();
        let g = Emission::Gaussian(Gaussian::new(vec![0.5f64, -1.0], cov).unwrap());
        let l = Emission::LogNormal(LogNormal::new(0.3f64, 1.7).unwrap());
        let ys: [[f64; 2]; 3] = [[1.0, 2.0], [-0.5, 0.1], [3.0, -2.0]];
        let ws = [0.2, 1.5, 0.7];
        for e in [g, l] {
            let mut acc = ScoreAccumulator::new(&e);
            let mut direct = e.zero_gradient();
            for (y, &w) in ys.iter().zip(&ws) {
                let y: Vec<f64> = if e.dim() == 1 {
                    vec![y[0].abs() + 0.1]
                } else {
                    y.to_vec()
                };
                acc.add(&e, &y, w);
                direct.add_scaled(&e.grad_log_density(&y).unwrap(), w);
            }
            let got = acc.gradient(&e).to_vec();
            for (a, b) in got.iter().zip(direct.to_vec()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn params_vec_round_trip() {
        let g = Emission::Gaussian(Gaussian::isotropic(vec![1.0f64, -1.0], 2.0).unwrap());
        let back = g.with_params_vec(&g.params_vec()).unwrap();
        assert_eq!(back.params_vec(), g.params_vec());
    }
}
