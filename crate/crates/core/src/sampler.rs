//! SG-RLD updates for the expanded-mean transition matrix and the emission
//! parameters, the minibatch sampler loop and its full-gradient counterpart.
//!
//! Every block follows `θ' = θ - ε (D ∇U - Γ) + N(0, ε (2D - ε B̂))` with `D`
//! the block's metric and `Γ_i = Σ_j ∂D_ij / ∂θ_j`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adaptivity::{
    buffer_length, estimate_lyapunov_with, max_batch_count, mixing_time, sample_minibatch, LyapunovConfig,
    LyapunovEstimate,
};
use crate::emissions::{Emission, EmissionGradient, EmissionModel, Family, Gaussian, LogNormal};
use crate::error::{Error, Result};
use crate::gradient::{
    full_gradient, prior_term, stochastic_gradient, window_terms, GradientOptions, Minibatch, PotentialGradient,
};
use crate::hmm::{HmmParams, ObservationSequence};
use crate::linalg::Matrix;
use crate::prior::{Prior, TransitionPrior};
use crate::scalar::Real;

/// Replacement for an expanded-mean entry that lands exactly on zero.
const ZERO_NUDGE: f64 = 1e-10;

/// `A_ij = |Â_ij| / Σ_i |Â_ij|`.
pub fn normalize_transition<T: Real>(a_hat: &Matrix<T>) -> Result<Matrix<T>> {
    let k = a_hat.rows();
    let mut out = a_hat.map(|v| v.abs());
    for j in 0..a_hat.cols() {
        let s: T = (0..k).map(|i| out[(i, j)]).sum();
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::numeric(
                "normalize transition",
                format!("column {j} of the expanded matrix is degenerate (sum {s})"),
            ));
        }
        for i in 0..k {
            out.as_mut_slice()[i * k + j] /= s;
        }
    }
    Ok(out)
}

/// Diagonal estimate of the gradient-noise covariance per block, in the
/// coordinates the update uses (`Â`; Gaussian mean then covariance entries;
/// log-normal `(mu, ln sigma)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct NoiseEstimate<T: Real> {
    pub transition: Matrix<T>,
    pub emissions: Vec<Vec<T>>,
}

/// Counters for the numerical guards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuardStats {
    /// Steps whose step size was halved to keep the noise covariance PSD.
    pub step_shrinks: u64,
    /// Covariance proposals rejected for not being positive definite.
    pub cov_rejections: u64,
    /// Expanded-mean entries that crossed zero and were reflected.
    pub reflections: u64,
    /// Minibatches redrawn after a window likelihood vanished.
    pub window_redraws: u64,
    /// Smallest noise variance (or covariance eigenvalue proxy) drawn from.
    pub min_noise_variance: f64,
}

/// Current point of the chain plus its step sizes and random stream.
#[derive(Clone, Debug)]
pub struct SamplerState<T: Real> {
    pub a_hat: Matrix<T>,
    pub emissions: Vec<Emission<T>>,
    pub pi0: Vec<T>,
    pub step_size: T,
    pub emission_step_size: T,
    pub noise: Option<NoiseEstimate<T>>,
    pub iteration: usize,
    pub guard: GuardStats,
    rng: ChaCha8Rng,
}

impl<T: Real> SamplerState<T> {
    pub fn new(a_hat: Matrix<T>, emissions: Vec<Emission<T>>, pi0: Vec<T>, step_size: T, seed: u64) -> Result<Self> {
        if !(step_size > T::zero()) {
            return Err(Error::Config("step size must be > 0".into()));
        }
        let a_hat = a_hat.map(|v| v.abs());
        HmmParams::new(normalize_transition(&a_hat)?, emissions.clone(), pi0.clone())?;
        Ok(SamplerState {
            a_hat,
            emissions,
            pi0,
            step_size,
            emission_step_size: step_size,
            noise: None,
            iteration: 0,
            guard: GuardStats {
                min_noise_variance: f64::INFINITY,
                ..GuardStats::default()
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Starts from `params` with `Â = A`.
    pub fn from_params(params: &HmmParams<T>, step_size: T, seed: u64) -> Result<Self> {
        Self::new(
            params.transition().clone(),
            params.emissions().to_vec(),
            params.pi0().to_vec(),
            step_size,
            seed,
        )
    }

    pub fn params(&self) -> Result<HmmParams<T>> {
        HmmParams::new(
            normalize_transition(&self.a_hat)?,
            self.emissions.clone(),
            self.pi0.clone(),
        )
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn normal(&mut self) -> T {
        T::of(self.rng.sample::<f64, _>(StandardNormal))
    }

    fn note_variance(&mut self, v: T) {
        self.guard.min_noise_variance = self.guard.min_noise_variance.min(v.to_f64_lossy());
    }
}

/// Expanded-mean step on a block of positive entries with `D = diag(values)`, `Γ = 1`.
fn expanded_step<T: Real>(state: &mut SamplerState<T>, values: &mut [T], grad: &[T], bhat: Option<&[T]>) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("transition step", "non-finite gradient"));
    }
    let two = T::of(2.0);
    let mut eps = state.step_size;
    if let Some(b) = bhat {
        let mut halvings = 0;
        while values.iter().zip(b).any(|(&a, &bi)| two * a - eps * bi < T::zero()) {
            eps = eps * T::of(0.5);
            halvings += 1;
            if halvings > 200 {
                return Err(Error::numeric(
                    "transition step",
                    "cannot make noise variance nonnegative",
                ));
            }
        }
        state.guard.step_shrinks += u64::from(halvings > 0);
    }
    for (idx, v) in values.iter_mut().enumerate() {
        let a = *v;
        let b = bhat.map_or(T::zero(), |b| b[idx]);
        let var = eps * (two * a - eps * b);
        assert!(var >= T::zero(), "transition noise variance {var} < 0");
        state.note_variance(var);
        let z = state.normal();
        let next = a - eps * (a * grad[idx] - T::one()) + var.sqrt() * z;
        if next < T::zero() {
            state.guard.reflections += 1;
        }
        *v = if next == T::zero() {
            T::of(ZERO_NUDGE)
        } else {
            next.abs()
        };
    }
    Ok(())
}

/// One SG-RLD step on `Â` given `∇U` with respect to `Â`.
pub fn sgld_step_transition<T: Real>(state: &mut SamplerState<T>, grad: &Matrix<T>) -> Result<()> {
    let mut values = state.a_hat.as_slice().to_vec();
    let bhat = state.noise.as_ref().map(|n| n.transition.as_slice().to_vec());
    expanded_step(state, &mut values, grad.as_slice(), bhat.as_deref())?;
    state.a_hat = Matrix::from_fn(state.a_hat.rows(), state.a_hat.cols(), |i, j| {
        values[i * state.a_hat.cols() + j]
    });
    Ok(())
}

/// Draws `N(0, cov)` via Cholesky, halving `eps` until `2D - eps B̂` is PD.
/// `base` is `D`; returns the step size used and the sample scaled by `sqrt(eps)`.
fn noise_with_correction<T: Real>(
    state: &mut SamplerState<T>,
    base: &Matrix<T>,
    bhat: &[T],
    eps: T,
) -> Result<(T, Vec<T>)> {
    let n = base.rows();
    let two = T::of(2.0);
    let mut eps = eps;
    for halvings in 0..200 {
        let cov = Matrix::from_fn(n, n, |i, j| {
            two * base[(i, j)] - if i == j { eps * bhat[i] } else { T::zero() }
        });
        if let Some(l) = cov.cholesky() {
            state.guard.step_shrinks += u64::from(halvings > 0);
            let min_diag = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(T::infinity(), T::min);
            state.note_variance(eps * min_diag);
            let z: Vec<T> = (0..n).map(|_| state.normal()).collect();
            let s = eps.sqrt();
            return Ok((eps, l.matvec(&z).into_iter().map(|v| v * s).collect()));
        }
        eps = eps * T::of(0.5);
    }
    Err(Error::numeric(
        "emission step",
        "cannot make noise covariance positive definite",
    ))
}

fn gaussian_step<T: Real>(
    state: &mut SamplerState<T>,
    g: &Gaussian<T>,
    grad: &EmissionGradient<T>,
    bhat: Option<&[T]>,
) -> Result<Gaussian<T>> {
    let EmissionGradient::Gaussian { mean: gm, cov: gc } = grad else {
        return Err(Error::validation("emission gradient", "family mismatch"));
    };
    let d = g.dim();
    let sigma = g.cov();
    let eps0 = state.emission_step_size;
    let two = T::of(2.0);

    let (eps_mu, noise_mu) = match bhat {
        None => {
            let z: Vec<T> = (0..d).map(|_| state.normal()).collect();
            let s = (two * eps0).sqrt();
            let min_var = symmetric_min_diag(g.cholesky_factor());
            state.note_variance(two * eps0 * min_var);
            (
                eps0,
                g.cholesky_factor().matvec(&z).into_iter().map(|v| v * s).collect(),
            )
        }
        Some(b) => noise_with_correction(state, sigma, &b[..d], eps0)?,
    };
    let drift = sigma.matvec(gm);
    let mu: Vec<T> = (0..d).map(|i| g.mean()[i] - eps_mu * drift[i] + noise_mu[i]).collect();

    let (eps_cov, noise_cov) = match bhat {
        None => {
            let l = g.cholesky_factor();
            let z = Matrix::from_fn(d, d, |_, _| state.normal());
            let min_var = symmetric_min_diag(l);
            state.note_variance(two * eps0 * min_var * min_var);
            let n = l.matmul(&z).matmul(&l.transpose()).scale((two * eps0).sqrt());
            (eps0, n)
        }
        Some(b) => {
            let kron = crate::emissions::kron(sigma, sigma);
            let (e, v) = noise_with_correction(state, &kron, &b[d..], eps0)?;
            (e, Matrix::from_fn(d, d, |i, j| v[i * d + j]))
        }
    };
    let dplus1 = T::of_usize(d + 1);
    let sgs = sigma.matmul(gc).matmul(sigma);
    let proposal = Matrix::from_fn(d, d, |i, j| {
        sigma[(i, j)] - eps_cov * (sgs[(i, j)] - dplus1 * sigma[(i, j)]) + noise_cov[(i, j)]
    })
    .symmetrized();
    let cov = if proposal.is_finite() && proposal.is_positive_definite() {
        proposal
    } else {
        state.guard.cov_rejections += 1;
        sigma.clone()
    };
    if mu.iter().any(|m| !m.is_finite()) {
        return Err(Error::numeric("gaussian step", "non-finite mean"));
    }
    Gaussian::new(mu, cov).or_else(|_| {
        state.guard.cov_rejections += 1;
        Gaussian::new(
            g.mean()
                .iter()
                .zip(&drift)
                .zip(&noise_mu)
                .map(|((&m, &dr), &n)| m - eps_mu * dr + n)
                .collect(),
            sigma.clone(),
        )
    })
}

/// Smallest squared diagonal entry of a Cholesky factor, a cheap lower bound
/// proxy for the noise scale.
fn symmetric_min_diag<T: Real>(l: &Matrix<T>) -> T {
    (0..l.rows()).map(|i| l[(i, i)] * l[(i, i)]).fold(T::infinity(), T::min)
}

fn lognormal_step<T: Real>(
    state: &mut SamplerState<T>,
    l: &LogNormal<T>,
    grad: &EmissionGradient<T>,
    bhat: Option<&[T]>,
) -> Result<LogNormal<T>> {
    let EmissionGradient::LogNormal { mu: gmu, sigma: gsigma } = *grad else {
        return Err(Error::validation("emission gradient", "family mismatch"));
    };
    let s2 = l.sigma() * l.sigma();
    let gs = l.sigma() * gsigma - T::one();
    let two = T::of(2.0);
    let half = T::of(0.5);
    let (bm, bs) = bhat.map_or((T::zero(), T::zero()), |b| (b[0], b[1]));
    let mut eps = state.emission_step_size;
    let mut halvings = 0;
    while two * s2 - eps * bm < T::zero() || T::one() - eps * bs < T::zero() {
        eps = eps * half;
        halvings += 1;
        if halvings > 200 {
            return Err(Error::numeric(
                "lognormal step",
                "cannot make noise variance nonnegative",
            ));
        }
    }
    state.guard.step_shrinks += u64::from(halvings > 0);
    let var_mu = eps * (two * s2 - eps * bm);
    let var_s = eps * (T::one() - eps * bs);
    state.note_variance(var_mu.min(var_s));
    let z1 = state.normal();
    let z2 = state.normal();
    let mu = l.mu() - eps * s2 * gmu + var_mu.sqrt() * z1;
    let log_sigma = l.log_sigma() - eps * half * gs + var_s.sqrt() * z2;
    LogNormal::from_log_sigma(mu, log_sigma)
}

/// One SG-RLD step on every state's emission parameters.
pub fn sgld_step_emissions<T: Real>(state: &mut SamplerState<T>, grads: &[EmissionGradient<T>]) -> Result<()> {
    let bhat = state.noise.as_ref().map(|n| n.emissions.clone());
    let mut next = Vec::with_capacity(state.emissions.len());
    for k in 0..state.emissions.len() {
        let b = bhat.as_ref().map(|b| b[k].as_slice());
        let e = state.emissions[k].clone();
        next.push(match &e {
            Emission::Gaussian(g) => Emission::Gaussian(gaussian_step(state, g, &grads[k], b)?),
            Emission::LogNormal(l) => Emission::LogNormal(lognormal_step(state, l, &grads[k], b)?),
        });
    }
    state.emissions = next;
    Ok(())
}

/// Gaussian-emission step for state `k`.
pub fn sgld_step_gaussian<T: Real>(state: &mut SamplerState<T>, k: usize, grad: &EmissionGradient<T>) -> Result<()> {
    let Emission::Gaussian(g) = state.emissions[k].clone() else {
        return Err(Error::validation("emission", "state is not gaussian"));
    };
    let b = state.noise.as_ref().map(|n| n.emissions[k].clone());
    state.emissions[k] = Emission::Gaussian(gaussian_step(state, &g, grad, b.as_deref())?);
    Ok(())
}

/// Log-normal-emission step for state `k`.
pub fn sgld_step_lognormal<T: Real>(state: &mut SamplerState<T>, k: usize, grad: &EmissionGradient<T>) -> Result<()> {
    let Emission::LogNormal(l) = state.emissions[k].clone() else {
        return Err(Error::validation("emission", "state is not lognormal"));
    };
    let b = state.noise.as_ref().map(|n| n.emissions[k].clone());
    state.emissions[k] = Emission::LogNormal(lognormal_step(state, &l, grad, b.as_deref())?);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum BufferMode {
    /// Re-estimated from the Lyapunov exponent at the current parameters.
    Adaptive,
    Fixed(usize),
    /// `B = 0`.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum GapMode {
    /// `ceil(1 / (1 - lambda2))` of the current transition matrix.
    Adaptive,
    Fixed(usize),
}

/// Temporal structure of the fitted model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    Hmm,
    /// Every column of `A` equals one weight vector: an i.i.d. mixture.
    Mixture,
}

/// `ε_t = a (1 + t / b)^(-gamma)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub b: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
#[serde(default)]
pub struct RunConfig<T: Real> {
    pub num_states: usize,
    pub family: Family,
    pub structure: Structure,
    pub half_width: usize,
    pub batch_count: usize,
    pub step_size: f64,
    /// Defaults to `step_size`.
    pub emission_step_size: Option<f64>,
    pub step_decay: Option<StepDecay>,
    pub n_iter: usize,
    /// Stop once this many observations have been touched (`n_iter` still caps).
    pub cost_budget: Option<u64>,
    pub n_steps: usize,
    pub buffer: BufferMode,
    pub gap: GapMode,
    pub delta: f64,
    pub delta0: f64,
    pub b_max: usize,
    pub reestimate_every: usize,
    pub lyapunov_iters: usize,
    /// Average the inner steps before moving on.
    pub average_inner: bool,
    /// Estimate `B̂` from the spread of the window terms.
    pub empirical_noise: bool,
    pub parallel: bool,
    pub thin: usize,
    pub seed: u64,
    pub kmeans_subsample: usize,
    pub prior: Prior<T>,
}

impl<T: Real> Default for RunConfig<T> {
    fn default() -> Self {
        RunConfig {
            num_states: 2,
            family: Family::Gaussian,
            structure: Structure::Hmm,
            half_width: 2,
            batch_count: 10,
            step_size: 1e-4,
            emission_step_size: None,
            step_decay: None,
            n_iter: 1000,
            cost_budget: None,
            n_steps: 1,
            buffer: BufferMode::Adaptive,
            gap: GapMode::Adaptive,
            delta: 1e-3,
            delta0: 2.0,
            b_max: 100,
            reestimate_every: 50,
            lyapunov_iters: 5000,
            average_inner: true,
            empirical_noise: false,
            parallel: false,
            thin: 1,
            seed: 0,
            kmeans_subsample: 5000,
            prior: Prior::default(),
        }
    }
}

impl<T: Real> RunConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_states == 0 {
            return bad("K must be >= 1");
        }
        if !(self.step_size > 0.0) || self.emission_step_size.is_some_and(|e| !(e > 0.0)) {
            return bad("step sizes must be > 0");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be >= 1");
        }
        if self.batch_count == 0 {
            return bad("batch count must be >= 1");
        }
        if self.thin == 0 {
            return bad("thin must be >= 1");
        }
        if !(self.delta > 0.0 && self.delta <= self.delta0) {
            return bad("need 0 < delta <= delta0");
        }
        if self.reestimate_every == 0 {
            return bad("reestimate_every must be >= 1");
        }
        if let Some(d) = self.step_decay {
            if !(d.b > 0.0 && d.gamma >= 0.0) {
                return bad("step decay needs b > 0 and gamma >= 0");
            }
        }
        if matches!(self.gap, GapMode::Fixed(0)) {
            return bad("fixed gap must be >= 1");
        }
        Ok(())
    }

    fn step_at(&self, base: f64, t: usize) -> T {
        let f = self.step_decay.map_or(1.0, |d| (1.0 + t as f64 / d.b).powf(-d.gamma));
        T::of(base * f)
    }
}

/// Buffer and gap in force from `iteration` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub iteration: usize,
    pub buffer: usize,
    pub nu: usize,
    pub lyapunov: Option<LyapunovEstimate>,
    /// The mixing-time gap was reduced so the batch still fits.
    pub nu_clamped: bool,
    pub buffer_warning: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct TraceSample<T: Real> {
    pub iteration: usize,
    /// Sampler wall time up to and including this iteration.
    pub wall_ms: f64,
    /// Observations touched by gradient evaluations so far.
    pub cost: u64,
    pub params: HmmParams<T>,
    /// Filled in by evaluation, not by the sampler.
    pub log_pred: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Trace<T: Real> {
    pub samples: Vec<TraceSample<T>>,
    pub epochs: Vec<Epoch>,
    pub guard: GuardStats,
    pub wall_ms: f64,
    pub cost: u64,
    pub iterations: usize,
}

impl<T: Real> Trace<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples recorded at or after `fraction` of the run.
    pub fn tail(&self, fraction: f64) -> &[TraceSample<T>] {
        let from = ((1.0 - fraction.clamp(0.0, 1.0)) * self.samples.len() as f64).floor() as usize;
        &self.samples[from.min(self.samples.len())..]
    }
}

/// Lloyd's algorithm from a k-means++ seeding, best of `restarts` by inertia.
/// Returns centroids and assignments.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if points.len() < k || k == 0 {
        return Err(Error::validation(
            "k-means",
            format!("{} points for {k} clusters", points.len()),
        ));
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
        let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let idx = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                d2.iter()
                    .position(|&d| {
                        u -= d;
                        u <= 0.0
                    })
                    .unwrap_or(points.len() - 1)
            } else {
                rng.random_range(0..points.len())
            };
            centers.push(points[idx].clone());
            for (d, p) in d2.iter_mut().zip(points) {
                *d = d.min(dist2(p, &centers[centers.len() - 1]));
            }
        }
        let mut assign = vec![0; points.len()];
        for _ in 0..iters.max(1) {
            let mut changed = false;
            for (a, p) in assign.iter_mut().zip(points) {
                let nearest = (0..k)
                    .min_by(|&i, &j| dist2(p, &centers[i]).total_cmp(&dist2(p, &centers[j])))
                    .unwrap();
                changed |= *a != nearest;
                *a = nearest;
            }
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (&a, p) in assign.iter().zip(points) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = assign.iter().zip(points).map(|(&a, p)| dist2(p, &centers[a])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centers, assign));
        }
    }
    let (_, c, a) = best.expect("at least one restart");
    Ok((c, a))
}

/// Emission parameters from k-means on (a subsample of) the data, uniform
/// transitions and start.
pub fn kmeans_init<T: Real>(
    y: &ObservationSequence<T>,
    k: usize,
    family: Family,
    subsample: usize,
    seed: u64,
) -> Result<HmmParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6d_6561_6e73);
    let n = y.len();
    let stride = (n / subsample.max(1)).max(1);
    let points: Vec<Vec<f64>> = (0..n)
        .step_by(stride)
        .map(|t| {
            y.get(t)
                .iter()
                .map(|v| match family {
                    Family::Gaussian => v.to_f64_lossy(),
                    Family::LogNormal => v.to_f64_lossy().ln(),
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("observations", "log-normal data must be > 0"));
    }
    let (centers, assign) = kmeans(&points, k, 100, 5, &mut rng)?;
    let d = y.dim();
    let mut pooled = Matrix::zeros(d, d);
    for (&a, p) in assign.iter().zip(&points) {
        for i in 0..d {
            for j in 0..d {
                pooled.as_mut_slice()[i * d + j] += (p[i] - centers[a][i]) * (p[j] - centers[a][j]);
            }
        }
    }
    let mut pooled = pooled.scale(1.0 / points.len() as f64);
    let floor = 1e-6 * (1.0 + pooled.trace() / d as f64);
    for i in 0..d {
        pooled.as_mut_slice()[i * d + i] += floor;
    }
    let mut emissions = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<&Vec<f64>> = assign
            .iter()
            .zip(&points)
            .filter(|(&a, _)| a == c)
            .map(|(_, p)| p)
            .collect();
        let mut cov = Matrix::zeros(d, d);
        for p in &members {
            for i in 0..d {
                for j in 0..d {
                    cov.as_mut_slice()[i * d + j] += (p[i] - centers[c][i]) * (p[j] - centers[c][j]);
                }
            }
        }
        let cov = if members.len() > d + 1 {
            let mut c = cov.scale(1.0 / members.len() as f64);
            for i in 0..d {
                c.as_mut_slice()[i * d + i] += floor;
            }
            if c.is_positive_definite() {
                c
            } else {
                pooled.clone()
            }
        } else {
            pooled.clone()
        };
        let mu: Vec<T> = centers[c].iter().map(|&v| T::of(v)).collect();
        emissions.push(match family {
            Family::Gaussian => {
                Emission::Gaussian(Gaussian::new(mu, Matrix::from_fn(d, d, |i, j| T::of(cov[(i, j)])))?)
            }
            Family::LogNormal => Emission::LogNormal(LogNormal::new(mu[0], T::of(cov[(0, 0)].sqrt().max(1e-2)))?),
        });
    }
    let kt = T::of_usize(k);
    HmmParams::with_uniform_start(Matrix::filled(k, k, T::one() / kt), emissions)
}

#[derive(Clone, Copy)]
enum GradientSource {
    Minibatch,
    Full,
}

/// Gradient with respect to `Â` (or the mixture weights replicated across
/// columns) and the emissions at the state's current point.
struct Evaluator<'a, T: Real> {
    y: &'a ObservationSequence<T>,
    config: &'a RunConfig<T>,
    source: GradientSource,
    batch: Option<Minibatch>,
    opts: GradientOptions,
}

impl<T: Real> Evaluator<'_, T> {
    fn cost(&self) -> u64 {
        match (&self.source, &self.batch) {
            (GradientSource::Full, _) => self.y.len() as u64,
            (GradientSource::Minibatch, Some(b)) => b.windows.iter().map(|w| (w.len() + 2 * w.buffer) as u64).sum(),
            (GradientSource::Minibatch, None) => 0,
        }
    }

    fn gradient(&self, state: &mut SamplerState<T>) -> Result<PotentialGradient<T>> {
        let params = state.params()?;
        let prior = match self.config.structure {
            Structure::Hmm => self.config.prior.clone(),
            Structure::Mixture => Prior {
                transition: TransitionPrior::Flat,
                emission: self.config.prior.emission.clone(),
            },
        };
        let mut g = match self.source {
            GradientSource::Full => full_gradient(
                &params,
                &state.a_hat,
                &prior,
                self.y,
                self.config.half_width,
                self.config.parallel,
            )?,
            GradientSource::Minibatch => {
                let batch = self.batch.as_ref().expect("minibatch drawn");
                if self.config.empirical_noise {
                    let (g, noise) = self.with_noise(state, &params, &prior, batch)?;
                    state.noise = Some(noise);
                    g
                } else {
                    stochastic_gradient(&params, &state.a_hat, &prior, self.y, batch, self.opts)?
                }
            }
        };
        if let Structure::Mixture = self.config.structure {
            let k = state.a_hat.rows();
            let w_hat = Matrix::from_fn(k, 1, |i, _| state.a_hat[(i, 0)]);
            let pw = self.config.prior.transition.grad_log_density(&w_hat);
            let rows: Vec<T> = (0..k)
                .map(|i| g.d_a_hat.row(i).iter().copied().sum::<T>() - pw[(i, 0)])
                .collect();
            g.d_a_hat = Matrix::from_fn(k, k, |i, _| rows[i]);
        }
        Ok(g)
    }

    fn with_noise(
        &self,
        state: &SamplerState<T>,
        params: &HmmParams<T>,
        prior: &Prior<T>,
        batch: &Minibatch,
    ) -> Result<(PotentialGradient<T>, NoiseEstimate<T>)> {
        let terms = window_terms(params, &state.a_hat, self.y, batch, self.opts)?;
        let scale = T::of((-batch.log_inclusion).exp());
        let n = terms.len();
        let mut g = prior_term(params, &state.a_hat, prior);
        for t in &terms {
            g.add_scaled(t, scale);
        }
        let vecs: Vec<Vec<T>> = terms.iter().map(|t| t.to_vec()).collect();
        let dim = vecs[0].len();
        let var: Vec<T> = (0..dim)
            .map(|c| {
                if n < 2 {
                    return T::zero();
                }
                let nt = T::of_usize(n);
                let m = vecs.iter().map(|v| v[c]).sum::<T>() / nt;
                let s = vecs.iter().map(|v| (v[c] - m) * (v[c] - m)).sum::<T>() / T::of_usize(n - 1);
                s * nt * scale * scale
            })
            .collect();
        let k = state.a_hat.rows();
        let transition = Matrix::from_fn(k, k, |i, j| {
            let a = state.a_hat[(i, j)];
            a * a * var[i * k + j]
        });
        let mut offset = k * k;
        let mut emissions = Vec::with_capacity(k);
        for e in &state.emissions {
            match e {
                Emission::Gaussian(gs) => {
                    let d = gs.dim();
                    let s = gs.cov();
                    let mut b: Vec<T> = (0..d).map(|i| s[(i, i)] * s[(i, i)] * var[offset + i]).collect();
                    for i in 0..d {
                        for j in 0..d {
                            let dd = s[(i, i)] * s[(j, j)];
                            b.push(dd * dd * var[offset + d + i * d + j]);
                        }
                    }
                    offset += d + d * d;
                    emissions.push(b);
                }
                Emission::LogNormal(l) => {
                    let s2 = l.sigma() * l.sigma();
                    emissions.push(vec![s2 * s2 * var[offset], T::of(0.25) * s2 * var[offset + 1]]);
                    offset += 2;
                }
            }
        }
        Ok((g, NoiseEstimate { transition, emissions }))
    }
}

fn average_emissions<T: Real>(sum: &[Vec<T>], n: usize, like: &[Emission<T>]) -> Result<Vec<Emission<T>>> {
    let nt = T::of_usize(n);
    sum.iter()
        .zip(like)
        .map(|(s, e)| {
            let v: Vec<T> = s.iter().map(|&x| x / nt).collect();
            let mut out = e.with_params_vec(&v);
            if let (Err(_), Emission::Gaussian(g)) = (&out, e) {
                let d = g.dim();
                let cov = Matrix::from_fn(d, d, |i, j| v[d + i * d + j]).symmetrized();
                out = Gaussian::new(v[..d].to_vec(), cov).map(Emission::Gaussian);
            }
            out
        })
        .collect()
}

fn replicate_first_column<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(m.rows(), m.cols(), |i, _| m[(i, 0)])
}

fn run<T: Real>(
    y: &ObservationSequence<T>,
    init: &HmmParams<T>,
    config: &RunConfig<T>,
    source: GradientSource,
    observer: &mut dyn FnMut(&TraceSample<T>),
) -> Result<Trace<T>> {
    config.validate()?;
    if init.num_states() != config.num_states {
        return Err(Error::Config(format!(
            "initial params have K={} but config has K={}",
            init.num_states(),
            config.num_states
        )));
    }
    if let Some(e) = init
        .emissions()
        .iter()
        .find(|e| !config.prior.emission.supports(e.family()))
    {
        return Err(Error::Config(format!(
            "emission prior does not apply to {} emissions",
            e.family()
        )));
    }
    let mut state = SamplerState::from_params(init, T::of(config.step_size), config.seed)?;
    if let Structure::Mixture = config.structure {
        let k = config.num_states;
        state.a_hat = Matrix::filled(k, k, T::one());
    }
    let t_len = y.len();
    let mut trace = Trace {
        samples: Vec::new(),
        epochs: Vec::new(),
        guard: state.guard,
        wall_ms: 0.0,
        cost: 0,
        iterations: 0,
    };
    let (mut buffer, mut nu) = (0usize, 1usize);
    if let GradientSource::Minibatch = source {
        buffer = match config.buffer {
            BufferMode::Fixed(b) => b,
            _ => 0,
        };
        nu = match config.gap {
            GapMode::Fixed(g) => g,
            GapMode::Adaptive => 1,
        };
        let max = max_batch_count(t_len, config.half_width, buffer, nu);
        if config.batch_count > max {
            return Err(Error::Capacity {
                requested: config.batch_count,
                max_feasible: max,
            });
        }
    } else if t_len < 2 * config.half_width + 1 {
        return Err(Error::validation("observations", "sequence shorter than one window"));
    }
    let start = Instant::now();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    for it in 0..config.n_iter {
        state.iteration = it;
        state.step_size = config.step_at(config.step_size, it);
        state.emission_step_size = config.step_at(config.emission_step_size.unwrap_or(config.step_size), it);
        let tag = |e: Error| e.context(format_args!("iteration {it}"));

        if matches!(source, GradientSource::Minibatch) && it % config.reestimate_every == 0 {
            let params = state.params().map_err(tag)?;
            let mut epoch = Epoch {
                iteration: it,
                buffer,
                nu,
                lyapunov: None,
                nu_clamped: false,
                buffer_warning: false,
            };
            let adaptive_b = config.buffer == BufferMode::Adaptive;
            let adaptive_g = config.gap == GapMode::Adaptive;
            if adaptive_b {
                let est = estimate_lyapunov_with(
                    &params,
                    y,
                    &LyapunovConfig {
                        n_iter: config.lyapunov_iters.max(10),
                        seed: config.seed.wrapping_add(it as u64),
                        ..LyapunovConfig::default()
                    },
                )
                .map_err(tag)?;
                let pol = buffer_length(&est, config.delta, config.delta0, config.b_max);
                buffer = pol.buffer;
                epoch.lyapunov = Some(est);
                epoch.buffer_warning = pol.warning;
            }
            if adaptive_g {
                nu = mixing_time(params.transition(), t_len).gap();
            }
            if adaptive_b || adaptive_g {
                while buffer > 0 && max_batch_count(t_len, config.half_width, buffer, 1) < config.batch_count {
                    buffer -= 1;
                    epoch.buffer_warning = true;
                }
                while nu > 1 && max_batch_count(t_len, config.half_width, buffer, nu) < config.batch_count {
                    let fit =
                        (t_len.saturating_sub(1 + 2 * (config.half_width + buffer))) / (config.batch_count - 1).max(1);
                    let next = fit.saturating_sub(2 * (config.half_width + buffer)).max(1);
                    nu = if next < nu { next } else { nu - 1 };
                    epoch.nu_clamped = true;
                }
                let max = max_batch_count(t_len, config.half_width, buffer, nu);
                if config.batch_count > max {
                    return Err(Error::Capacity {
                        requested: config.batch_count,
                        max_feasible: max,
                    });
                }
            }
            epoch.buffer = buffer;
            epoch.nu = nu;
            trace.epochs.push(epoch);
        }

        let mut eval = Evaluator {
            y,
            config,
            source,
            batch: None,
            opts: GradientOptions {
                boundary: crate::gradient::Boundary::Buffered,
                parallel: config.parallel,
            },
        };
        let draw =
            |rng: &mut ChaCha8Rng| sample_minibatch(t_len, config.half_width, buffer, nu, config.batch_count, rng);
        if let GradientSource::Minibatch = source {
            eval.batch = Some(draw(&mut batch_rng).map_err(tag)?);
        }

        let snapshot = state.clone();
        let mut attempt = 0;
        loop {
            match inner_blocks(&mut state, &eval, config) {
                Ok(()) => break,
                Err(Error::Numeric { .. }) if attempt == 0 && matches!(source, GradientSource::Minibatch) => {
                    attempt += 1;
                    let guard = state.guard;
                    state = snapshot.clone();
                    state.guard = guard;
                    state.guard.window_redraws += 1;
                    eval.batch = Some(draw(&mut batch_rng).map_err(tag)?);
                }
                Err(e) => return Err(tag(e)),
            }
        }
        trace.cost += 2 * config.n_steps as u64 * eval.cost();

        let exhausted = config.cost_budget.is_some_and(|b| trace.cost >= b);
        if it % config.thin == 0 || it + 1 == config.n_iter || exhausted {
            trace.samples.push(TraceSample {
                iteration: it,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                cost: trace.cost,
                params: state.params().map_err(tag)?,
                log_pred: None,
            });
            observer(trace.samples.last().expect("just pushed"));
        }
        trace.iterations = it + 1;
        if exhausted {
            break;
        }
    }
    trace.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    trace.guard = state.guard;
    Ok(trace)
}

/// `n_steps` transition updates (averaged), then `n_steps` emission updates (averaged).
fn inner_blocks<T: Real>(state: &mut SamplerState<T>, eval: &Evaluator<'_, T>, config: &RunConfig<T>) -> Result<()> {
    let n = config.n_steps;
    let mixture = matches!(config.structure, Structure::Mixture);
    let k = state.a_hat.rows();
    let mut a_sum = Matrix::zeros(k, k);
    for _ in 0..n {
        let g = eval.gradient(state)?;
        if mixture {
            let mut w: Vec<T> = (0..k).map(|i| state.a_hat[(i, 0)]).collect();
            let gw: Vec<T> = (0..k).map(|i| g.d_a_hat[(i, 0)]).collect();
            let bw = state.noise.as_ref().map(|nz| {
                (0..k)
                    .map(|i| nz.transition.row(i).iter().copied().sum::<T>())
                    .collect::<Vec<T>>()
            });
            expanded_step(state, &mut w, &gw, bw.as_deref())?;
            state.a_hat = Matrix::from_fn(k, k, |i, _| w[i]);
        } else {
            sgld_step_transition(state, &g.d_a_hat)?;
        }
        a_sum.add_assign_scaled(&state.a_hat, T::one());
    }
    if config.average_inner && n > 1 {
        state.a_hat = a_sum.scale(T::one() / T::of_usize(n));
        if mixture {
            state.a_hat = replicate_first_column(&state.a_hat);
        }
    }

    let mut e_sum: Vec<Vec<T>> = state
        .emissions
        .iter()
        .map(|e| vec![T::zero(); e.params_vec().len()])
        .collect();
    for _ in 0..n {
        let g = eval.gradient(state)?;
        sgld_step_emissions(state, &g.d_emissions)?;
        for (s, e) in e_sum.iter_mut().zip(&state.emissions) {
            for (a, b) in s.iter_mut().zip(e.params_vec()) {
                *a += b;
            }
        }
    }
    if config.average_inner && n > 1 {
        state.emissions = average_emissions(&e_sum, n, &state.emissions)?;
    }
    Ok(())
}

/// Minibatch SG-RLD from `init`.
pub fn run_sg_mcmc_from<T: Real>(
    y: &ObservationSequence<T>,
    init: &HmmParams<T>,
    config: &RunConfig<T>,
) -> Result<Trace<T>> {
    run(y, init, config, GradientSource::Minibatch, &mut |_| {})
}

/// As [`run_sg_mcmc_from`], calling `observer` on every stored sample.
pub fn run_sg_mcmc_observed<T: Real>(
    y: &ObservationSequence<T>,
    init: &HmmParams<T>,
    config: &RunConfig<T>,
    observer: &mut dyn FnMut(&TraceSample<T>),
) -> Result<Trace<T>> {
    run(y, init, config, GradientSource::Minibatch, observer)
}

/// Minibatch SG-RLD from a k-means initialization.
pub fn run_sg_mcmc<T: Real>(y: &ObservationSequence<T>, config: &RunConfig<T>) -> Result<Trace<T>> {
    config.validate()?;
    let init = kmeans_init(
        y,
        config.num_states,
        config.family,
        config.kmeans_subsample,
        config.seed,
    )?;
    run_sg_mcmc_from(y, &init, config)
}

/// The same updates driven by the exact full-sequence gradient.
pub fn run_batch_rld_from<T: Real>(
    y: &ObservationSequence<T>,
    init: &HmmParams<T>,
    config: &RunConfig<T>,
) -> Result<Trace<T>> {
    run(y, init, config, GradientSource::Full, &mut |_| {})
}

pub fn run_batch_rld_observed<T: Real>(
    y: &ObservationSequence<T>,
    init: &HmmParams<T>,
    config: &RunConfig<T>,
    observer: &mut dyn FnMut(&TraceSample<T>),
) -> Result<Trace<T>> {
    run(y, init, config, GradientSource::Full, observer)
}

pub fn run_batch_rld<T: Real>(y: &ObservationSequence<T>, config: &RunConfig<T>) -> Result<Trace<T>> {
    config.validate()?;
    let init = kmeans_init(
        y,
        config.num_states,
        config.family,
        config.kmeans_subsample,
        config.seed,
    )?;
    run_batch_rld_from(y, &init, config)
}
