//! HMM data model and normalized message passing.
//!
//! Indexing convention: latent states `s_0 … s_T` with `s_0 ~ pi0`, and
//! observation `y[t]` (0-based, `t < T`) is emitted by `s_{t+1}`. The
//! transition matrix is column-stochastic: `A[(i, j)] = Pr(s_{t+1} = i | s_t = j)`.
//! The marginal likelihood is `1ᵀ P(y[T-1]) A ⋯ P(y[0]) A pi0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emissions::{Emission, EmissionModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Transition matrix, per-state emissions and initial distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr<T>", into = "ParamsRepr<T>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct HmmParams<T: Real> {
    transition: Matrix<T>,
    emissions: Vec<Emission<T>>,
    pi0: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
struct ParamsRepr<T: Real> {
    column_stochastic: bool,
    #[serde(rename = "K")]
    k: usize,
    /// Rows indexed by next state, columns by previous state.
    transition: Matrix<T>,
    emissions: Vec<Emission<T>>,
    pi0: Vec<T>,
}

impl<T: Real> TryFrom<ParamsRepr<T>> for HmmParams<T> {
    type Error = Error;
    fn try_from(r: ParamsRepr<T>) -> Result<Self> {
        if !r.column_stochastic {
            return Err(Error::validation(
                "params",
                "only column-stochastic transition matrices are accepted \
                 (A[i][j] = Pr(next = i | previous = j))",
            ));
        }
        if r.k != r.pi0.len() {
            return Err(Error::validation("params", "K does not match pi0 length"));
        }
        HmmParams::new(r.transition, r.emissions, r.pi0)
    }
}

impl<T: Real> From<HmmParams<T>> for ParamsRepr<T> {
    fn from(p: HmmParams<T>) -> Self {
        ParamsRepr {
            column_stochastic: true,
            k: p.num_states(),
            transition: p.transition,
            emissions: p.emissions,
            pi0: p.pi0,
        }
    }
}

impl<T: Real> HmmParams<T> {
    pub fn new(transition: Matrix<T>, emissions: Vec<Emission<T>>, pi0: Vec<T>) -> Result<Self> {
        let k = pi0.len();
        if k == 0 {
            return Err(Error::validation("params", "K must be >= 1"));
        }
        if transition.rows() != k || transition.cols() != k {
            return Err(Error::validation(
                "params",
                format!(
                    "transition must be {k}x{k}, got {}x{}",
                    transition.rows(),
                    transition.cols()
                ),
            ));
        }
        if emissions.len() != k {
            return Err(Error::validation(
                "params",
                format!("expected {k} emission records, got {}", emissions.len()),
            ));
        }
        let tol = T::of(STOCHASTIC_TOL).max(T::epsilon() * T::of_usize(16 * k));
        if transition
            .as_slice()
            .iter()
            .any(|&a| !(a >= T::zero()) || !a.is_finite())
        {
            return Err(Error::validation(
                "params",
                "transition entries must be finite and >= 0",
            ));
        }
        for (j, s) in transition.column_sums().into_iter().enumerate() {
            if (s - T::one()).abs() > tol {
                return Err(Error::validation(
                    "params",
                    format!("transition column {j} sums to {s}, not 1"),
                ));
            }
        }
        if pi0.iter().any(|&p| !(p >= T::zero())) {
            return Err(Error::validation("params", "pi0 entries must be >= 0"));
        }
        let s: T = pi0.iter().copied().sum();
        if (s - T::one()).abs() > tol {
            return Err(Error::validation("params", format!("pi0 sums to {s}, not 1")));
        }
        let d = emissions[0].dim();
        let fam = emissions[0].family();
        for e in &emissions {
            e.validate()?;
            if e.dim() != d || e.family() != fam {
                return Err(Error::validation(
                    "params",
                    "all states must share one emission family and dimension",
                ));
            }
        }
        Ok(HmmParams {
            transition,
            emissions,
            pi0,
        })
    }

    /// Uniform initial distribution.
    pub fn with_uniform_start(transition: Matrix<T>, emissions: Vec<Emission<T>>) -> Result<Self> {
        let k = emissions.len();
        Self::new(transition, emissions, vec![T::one() / T::of_usize(k); k])
    }

    pub fn num_states(&self) -> usize {
        self.pi0.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.emissions[0].dim()
    }

    pub fn transition(&self) -> &Matrix<T> {
        &self.transition
    }

    pub fn emissions(&self) -> &[Emission<T>] {
        &self.emissions
    }

    pub fn pi0(&self) -> &[T] {
        &self.pi0
    }

    pub fn with_transition(&self, transition: Matrix<T>) -> Result<Self> {
        Self::new(transition, self.emissions.clone(), self.pi0.clone())
    }

    pub fn with_emissions(&self, emissions: Vec<Emission<T>>) -> Result<Self> {
        Self::new(self.transition.clone(), emissions, self.pi0.clone())
    }

    /// Relabels states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.num_states();
        let a = Matrix::from_fn(k, k, |i, j| self.transition[(perm[i], perm[j])]);
        let em = perm.iter().map(|&p| self.emissions[p].clone()).collect();
        let pi = perm.iter().map(|&p| self.pi0[p]).collect();
        Self::new(a, em, pi)
    }

    /// Log-densities of `y` under every state, shifted by their maximum,
    /// exponentiated into `out`. Returns the shift.
    pub(crate) fn scaled_densities(&self, y: &[T], t: usize, out: &mut [T]) -> Result<T> {
        let mut max = T::neg_infinity();
        for (o, e) in out.iter_mut().zip(&self.emissions) {
            let l = e.log_density(y);
            if l.is_nan() || l == T::infinity() {
                return Err(Error::numeric(
                    format!("timestep {t}"),
                    format!("emission log-density is {l}"),
                ));
            }
            *o = l;
            max = max.max(l);
        }
        if max == T::neg_infinity() {
            return Err(Error::numeric(
                format!("timestep {t}"),
                "observation impossible under every state",
            ));
        }
        for o in out.iter_mut() {
            *o = (*o - max).exp();
        }
        Ok(max)
    }
}

/// `T` observations of dimension `d`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence<T> {
    data: Vec<T>,
    dim: usize,
}

impl<T: Real> ObservationSequence<T> {
    pub fn new(data: Vec<T>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("observations", "dimension must be >= 1"));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::validation(
                "observations",
                format!(
                    "{} values do not form a whole number of rows of width {dim}",
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "observations",
                format!("non-finite value at timestep {}", i / dim),
            ));
        }
        Ok(ObservationSequence { data, dim })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("observations", "ragged rows"));
        }
        Self::new(rows.iter().flatten().copied().collect(), dim)
    }

    pub fn from_scalars(values: Vec<T>) -> Result<Self> {
        Self::new(values, 1)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, t: usize) -> &[T] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    /// Observations `[from, to)` as a new sequence.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.len() {
            return Err(Error::Index(format!("slice [{from}, {to}) of length {}", self.len())));
        }
        Self::new(self.data[from * self.dim..to * self.dim].to_vec(), self.dim)
    }
}

/// Left message: normalized state distribution plus its log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardMessage<T> {
    /// Sums to one.
    pub prob: Vec<T>,
    pub log_norm: T,
}

/// Right message: likelihood direction with max entry 1 plus its log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardMessage<T> {
    pub lik: Vec<T>,
    pub log_norm: T,
}

/// Boundary messages of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct MessagePair<T> {
    pub left: ForwardMessage<T>,
    pub right: BackwardMessage<T>,
}

impl<T: Real> ForwardMessage<T> {
    /// Unnormalized vector, `exp(log_norm) * prob`.
    pub fn denormalized(&self) -> Vec<T> {
        let s = self.log_norm.exp();
        self.prob.iter().map(|&p| p * s).collect()
    }
}

impl<T: Real> BackwardMessage<T> {
    pub fn denormalized(&self) -> Vec<T> {
        let s = self.log_norm.exp();
        self.lik.iter().map(|&p| p * s).collect()
    }
}

/// One normalized forward step; returns `ln` of the step's normalizer.
/// `scratch` must have length K.
pub(crate) fn forward_step<T: Real>(
    params: &HmmParams<T>,
    y: &[T],
    t: usize,
    prob: &mut [T],
    scratch: &mut [T],
) -> Result<T> {
    let k = prob.len();
    params.transition.matvec_into(prob, scratch);
    let mut dens = vec![T::zero(); k];
    let shift = params.scaled_densities(y, t, &mut dens)?;
    let mut c = T::zero();
    for i in 0..k {
        prob[i] = scratch[i] * dens[i];
        c += prob[i];
    }
    if !(c > T::zero()) || !c.is_finite() {
        return Err(Error::numeric(
            format!("timestep {t}"),
            "predictive likelihood is zero under every state",
        ));
    }
    for p in prob.iter_mut() {
        *p /= c;
    }
    Ok(c.ln() + shift)
}

/// `ln p(y | θ)` by normalized forward recursion.
pub fn log_marginal_likelihood<T: Real>(params: &HmmParams<T>, y: &ObservationSequence<T>) -> Result<T> {
    check_dims(params, y)?;
    let msg = forward_predictive(params, y, 0, y.len(), params.pi0())?;
    Ok(msg.log_norm)
}

/// Absorbs `y[from..to)` into `init`: the normalized `P(y[to-1]) A ⋯ P(y[from]) A init`.
///
/// With `from = 0` and `init = pi0` the result is the filter
/// `p(s_to | y[0..to))`; multiply by `A` for the one-step predictive.
pub fn forward_predictive<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    from: usize,
    to: usize,
    init: &[T],
) -> Result<ForwardMessage<T>> {
    check_dims(params, y)?;
    if from > to || to > y.len() {
        return Err(Error::Index(format!(
            "forward range [{from}, {to}) of length {}",
            y.len()
        )));
    }
    let k = params.num_states();
    if init.len() != k {
        return Err(Error::validation("forward init", format!("expected length {k}")));
    }
    let s: T = init.iter().copied().sum();
    let mut prob: Vec<T> = init.iter().map(|&p| p / s).collect();
    let mut log_norm = T::zero();
    let mut scratch = vec![T::zero(); k];
    for t in from..to {
        log_norm += forward_step(params, y.get(t), t, &mut prob, &mut scratch)?;
    }
    Ok(ForwardMessage { prob, log_norm })
}

/// `1ᵀ P(y[to-1]) A ⋯ P(y[from]) A` as a max-normalized row vector: entry `j`
/// is proportional to `p(y[from..to) | s_from = j)`.
pub fn backward_likelihood<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    from: usize,
    to: usize,
) -> Result<BackwardMessage<T>> {
    check_dims(params, y)?;
    if from > to || to > y.len() {
        return Err(Error::Index(format!(
            "backward range [{from}, {to}) of length {}",
            y.len()
        )));
    }
    let mut lik = vec![T::one(); params.num_states()];
    let log_norm = backward_absorb(params, y, from, to, &mut lik)?;
    Ok(BackwardMessage { lik, log_norm })
}

/// Left-multiplies the max-normalized row vector `lik` by
/// `P(y[to-1]) A ⋯ P(y[from]) A`; returns the accumulated log scale.
pub(crate) fn backward_absorb<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    from: usize,
    to: usize,
    lik: &mut [T],
) -> Result<T> {
    let k = params.num_states();
    let mut log_norm = T::zero();
    let mut dens = vec![T::zero(); k];
    let mut tmp = vec![T::zero(); k];
    for t in (from..to).rev() {
        let shift = params.scaled_densities(y.get(t), t, &mut dens)?;
        for i in 0..k {
            tmp[i] = lik[i] * dens[i];
        }
        params.transition.vecmat_into(&tmp, lik);
        let m = lik.iter().copied().fold(T::zero(), T::max);
        if !(m > T::zero()) || !m.is_finite() {
            return Err(Error::numeric(
                format!("timestep {t}"),
                "backward likelihood vanished for every state",
            ));
        }
        for l in lik.iter_mut() {
            *l /= m;
        }
        log_norm += m.ln() + shift;
    }
    Ok(log_norm)
}

pub(crate) fn check_dims<T: Real>(params: &HmmParams<T>, y: &ObservationSequence<T>) -> Result<()> {
    if params.obs_dim() != y.dim() {
        return Err(Error::validation(
            "observations",
            format!(
                "dimension {} does not match emission dimension {}",
                y.dim(),
                params.obs_dim()
            ),
        ));
    }
    Ok(())
}

pub(crate) fn sample_categorical<T: Real, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().map(|p| p.to_f64_lossy()).sum();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy() / total;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > T::zero()).unwrap_or(probs.len() - 1)
}

/// Forward-samples `T` observations. Returns the observations and the states
/// that emitted them (`s_1 … s_T`).
pub fn simulate<T: Real>(params: &HmmParams<T>, len: usize, seed: u64) -> Result<(ObservationSequence<T>, Vec<usize>)> {
    if len == 0 {
        return Err(Error::validation("simulate", "T must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = sample_categorical(params.pi0(), &mut rng);
    let mut data = Vec::with_capacity(len * params.obs_dim());
    let mut states = Vec::with_capacity(len);
    for _ in 0..len {
        let col = params.transition.column(state);
        state = sample_categorical(&col, &mut rng);
        states.push(state);
        data.extend(params.emissions[state].sample(&mut rng));
    }
    Ok((ObservationSequence::new(data, params.obs_dim())?, states))
}
