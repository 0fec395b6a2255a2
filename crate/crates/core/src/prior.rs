//! Priors as log-density + gradient pairs, one per parameter block.

use serde::{Deserialize, Serialize};

use crate::emissions::{Emission, EmissionGradient, EmissionModel, Family};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Prior over the expanded-mean transition entries `Â`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub enum TransitionPrior<T: Real> {
    /// Improper constant density on `Â`.
    Flat,
    /// Independent `Gamma(alpha, 1)` on each `|Â_ij|`, which makes every
    /// column of the normalized matrix `Dirichlet(alpha)`. `alpha = 1` is
    /// uniform on the simplex.
    Dirichlet { alpha: T },
}

impl<T: Real> Default for TransitionPrior<T> {
    fn default() -> Self {
        TransitionPrior::Dirichlet { alpha: T::one() }
    }
}

impl<T: Real> TransitionPrior<T> {
    pub fn log_density(&self, a_hat: &Matrix<T>) -> T {
        match self {
            TransitionPrior::Flat => T::zero(),
            TransitionPrior::Dirichlet { alpha } => a_hat
                .as_slice()
                .iter()
                .map(|&a| (*alpha - T::one()) * a.abs().ln() - a.abs())
                .sum(),
        }
    }

    /// `∂ ln p(Â) / ∂Â`.
    pub fn grad_log_density(&self, a_hat: &Matrix<T>) -> Matrix<T> {
        match self {
            TransitionPrior::Flat => Matrix::zeros(a_hat.rows(), a_hat.cols()),
            TransitionPrior::Dirichlet { alpha } => a_hat.map(|a| {
                let s = a.signum();
                s * ((*alpha - T::one()) / a.abs() - T::one())
            }),
        }
    }
}

/// Inverse-Wishart(`df`, `scale`) on a covariance matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct InverseWishart<T: Real> {
    pub df: T,
    pub scale: Matrix<T>,
}

/// Prior shared by every state's emission parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub enum EmissionPrior<T: Real> {
    #[default]
    Flat,
    /// Optional `N(mean0, var0 I)` on the mean and inverse-Wishart on the covariance.
    Gaussian {
        mean: Option<(T, T)>,
        cov: Option<InverseWishart<T>>,
    },
    /// `mu ~ N(mu_mean, mu_sd²)`, `sigma ~ N(0, sigma_sd²)` restricted to `sigma > 0`.
    LogNormal { mu_mean: T, mu_sd: T, sigma_sd: T },
}

impl<T: Real> EmissionPrior<T> {
    /// Standard-normal priors on `mu` and `sigma` of a log-normal emission.
    pub fn standard_lognormal() -> Self {
        EmissionPrior::LogNormal {
            mu_mean: T::zero(),
            mu_sd: T::one(),
            sigma_sd: T::one(),
        }
    }

    pub fn supports(&self, family: Family) -> bool {
        matches!(
            (self, family),
            (EmissionPrior::Flat, _)
                | (EmissionPrior::Gaussian { .. }, Family::Gaussian)
                | (EmissionPrior::LogNormal { .. }, Family::LogNormal)
        )
    }

    /// Up to an additive constant.
    pub fn log_density(&self, e: &Emission<T>) -> T {
        let half = T::of(0.5);
        match (self, e) {
            (EmissionPrior::Flat, _) => T::zero(),
            (EmissionPrior::Gaussian { mean, cov }, Emission::Gaussian(g)) => {
                let mut lp = T::zero();
                if let Some((m0, v0)) = mean {
                    lp -= g.mean().iter().map(|&m| (m - *m0) * (m - *m0)).sum::<T>() * half / *v0;
                }
                if let Some(iw) = cov {
                    let d = T::of_usize(g.dim());
                    let tr = iw.scale.matmul(g.precision()).trace();
                    lp -= half * (iw.df + d + T::one()) * g.log_det() + half * tr;
                }
                lp
            }
            (
                EmissionPrior::LogNormal {
                    mu_mean,
                    mu_sd,
                    sigma_sd,
                },
                Emission::LogNormal(l),
            ) => {
                let zm = (l.mu() - *mu_mean) / *mu_sd;
                let zs = l.sigma() / *sigma_sd;
                -half * (zm * zm + zs * zs)
            }
            _ => panic!("emission prior does not match emission family"),
        }
    }

    /// `∂ ln p(φ) / ∂φ` in the family's exposed coordinates.
    pub fn grad_log_density(&self, e: &Emission<T>) -> EmissionGradient<T> {
        let half = T::of(0.5);
        let mut g = e.zero_gradient();
        match (self, e, &mut g) {
            (EmissionPrior::Flat, _, _) => {}
            (
                EmissionPrior::Gaussian { mean, cov },
                Emission::Gaussian(em),
                EmissionGradient::Gaussian { mean: gm, cov: gc },
            ) => {
                if let Some((m0, v0)) = mean {
                    for (o, &m) in gm.iter_mut().zip(em.mean()) {
                        *o = -(m - *m0) / *v0;
                    }
                }
                if let Some(iw) = cov {
                    let d = T::of_usize(em.dim());
                    let p = em.precision();
                    let pspp = p.matmul(&iw.scale).matmul(p);
                    *gc = p.scale(-half * (iw.df + d + T::one())).add(&pspp.scale(half));
                }
            }
            (
                EmissionPrior::LogNormal {
                    mu_mean,
                    mu_sd,
                    sigma_sd,
                },
                Emission::LogNormal(l),
                EmissionGradient::LogNormal { mu, sigma },
            ) => {
                *mu = -(l.mu() - *mu_mean) / (*mu_sd * *mu_sd);
                *sigma = -l.sigma() / (*sigma_sd * *sigma_sd);
            }
            _ => panic!("emission prior does not match emission family"),
        }
        g
    }
}

/// Priors for every parameter block of the model.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Prior<T: Real> {
    #[serde(default)]
    pub transition: TransitionPrior<T>,
    #[serde(default)]
    pub emission: EmissionPrior<T>,
}

impl<T: Real> Prior<T> {
    pub fn flat() -> Self {
        Prior {
            transition: TransitionPrior::Flat,
            emission: EmissionPrior::Flat,
        }
    }

    /// Log prior density of `(Â, φ)`, up to a constant.
    pub fn log_density(&self, a_hat: &Matrix<T>, emissions: &[Emission<T>]) -> T {
        self.transition.log_density(a_hat) + emissions.iter().map(|e| self.emission.log_density(e)).sum::<T>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emissions::{Gaussian, LogNormal};

    fn fd<F: Fn(T) -> T, T: Real>(f: F, x: T, h: T) -> T {
        (f(x + h) - f(x - h)) / (h + h)
    }

    #[test]
    fn dirichlet_gradient_matches_finite_difference() {
        let p = TransitionPrior::Dirichlet { alpha: 2.5f64 };
        let a = Matrix::from_rows(&[vec![0.7, 1.3], vec![0.4, 2.0]]).unwrap();
        let g = p.grad_log_density(&a);
        for i in 0..2 {
            for j in 0..2 {
                let num = fd(
                    |x| {
                        let mut b = a.clone();
                        b[(i, j)] = x;
                        p.log_density(&b)
                    },
                    a[(i, j)],
                    1e-6,
                );
                assert!((num - g[(i, j)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn inverse_wishart_gradient_matches_finite_difference() {
        let iw = InverseWishart {
            df: 6.0f64,
            scale: Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap(),
        };
        let prior = EmissionPrior::Gaussian {
            mean: Some((0.5, 4.0)),
            cov: Some(iw),
        };
        let cov = Matrix::from_rows(&[vec![1.5, 0.2], vec![0.2, 0.8]]).unwrap();
        let e = Emission::Gaussian(Gaussian::new(vec![1.0, -1.0], cov).unwrap());
        let g = prior.grad_log_density(&e).to_vec();
        let base = e.params_vec();
        let h = 1e-6;
        for idx in 0..base.len() {
            // Covariance entries are perturbed symmetrically.
            let mirror = if idx >= 2 {
                let (i, j) = ((idx - 2) / 2, (idx - 2) % 2);
                Some(2 + j * 2 + i)
            } else {
                None
            };
            let eval = |s: f64| {
                let mut v = base.clone();
                v[idx] += s;
                if let Some(m) = mirror.filter(|&m| m != idx) {
                    v[m] += s;
                }
                prior.log_density(&e.with_params_vec(&v).unwrap())
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let expect = match mirror {
                Some(m) if m != idx => g[idx] + g[m],
                _ => g[idx],
            };
            assert!((num - expect).abs() < 1e-6, "idx {idx}: {num} vs {expect}");
        }
    }

    #[test]
    fn lognormal_prior_gradient() {
        let prior = EmissionPrior::<f64>::standard_lognormal();
        let e = Emission::LogNormal(LogNormal::new(0.7, 1.4).unwrap());
        match prior.grad_log_density(&e) {
            EmissionGradient::LogNormal { mu, sigma } => {
                assert!((mu + 0.7).abs() < 1e-15);
                assert!((sigma + 1.4).abs() < 1e-15);
            }
            _ => unreachable!(),
        }
    }
}
