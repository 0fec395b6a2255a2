//! Gradients of the potential `U(θ) = -ln p(y | θ) - ln p(θ)`, exact over a
//! partition of the sequence or estimated from a minibatch of windows.
//!
//! Every window is handled by one fused pass: normalized forward messages
//! left to right, then a backward sweep that accumulates the pairwise and
//! single-state posterior weights against the same normalizers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emissions::{EmissionGradient, ScoreAccumulator};
use crate::error::{Error, Result};
use crate::hmm::{
    backward_absorb, backward_likelihood, check_dims, forward_predictive, forward_step, BackwardMessage,
    ForwardMessage, HmmParams, MessagePair, ObservationSequence,
};
use crate::linalg::Matrix;
use crate::prior::Prior;
use crate::scalar::Real;

/// Observations `tau - L ..= tau + L` with `B` buffer observations on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubsequenceWindow {
    pub tau: usize,
    pub half_width: usize,
    pub buffer: usize,
}

impl SubsequenceWindow {
    pub fn new(tau: usize, half_width: usize, buffer: usize) -> Self {
        SubsequenceWindow {
            tau,
            half_width,
            buffer,
        }
    }

    /// First covered index. Only meaningful for a window that passed [`validate`](Self::validate).
    pub fn start(&self) -> usize {
        self.tau - self.half_width
    }

    /// One past the last covered index.
    pub fn end(&self) -> usize {
        self.tau + self.half_width + 1
    }

    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[start, end)` including both buffers.
    pub fn extent(&self) -> (usize, usize) {
        (self.start() - self.buffer, self.end() + self.buffer)
    }

    /// Checks that the window and both buffers lie inside a sequence of length `t_len`.
    pub fn validate(&self, t_len: usize) -> Result<()> {
        let reach = self.half_width + self.buffer;
        if self.tau < reach || self.tau + reach >= t_len {
            return Err(Error::Index(format!(
                "window tau={} L={} B={} does not fit in T={t_len}",
                self.tau, self.half_width, self.buffer
            )));
        }
        Ok(())
    }
}

/// Windows drawn together, with the probability of the draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Minibatch {
    pub windows: Vec<SubsequenceWindow>,
    /// `ln p(S̃)` from the sequential sampler.
    pub log_prob: f64,
    /// Log of the per-position coverage probability `|S̃|(2L+1)/T`; the
    /// gradient estimator is scaled by its inverse.
    pub log_inclusion: f64,
}

impl Minibatch {
    /// One window drawn uniformly from a sequence of length `t_len`.
    pub fn single(window: SubsequenceWindow, t_len: usize) -> Self {
        let lp = (window.len() as f64 / t_len as f64).ln();
        Minibatch {
            windows: vec![window],
            log_prob: lp,
            log_inclusion: lp,
        }
    }

    /// Fraction of the sequence covered, in `(0, 1]`.
    pub fn inclusion(&self) -> f64 {
        self.log_inclusion.exp()
    }
}

/// How a window's boundary messages are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Exact filter and full-suffix likelihood. Costs O(T) per window; for tests and diagnostics.
    Exact,
    /// Propagate `pi0` through the left buffer and `1ᵀ` through the right
    /// buffer. With `B = 0` this is the unbuffered estimator.
    #[default]
    Buffered,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradientOptions {
    pub boundary: Boundary,
    /// Evaluate windows on the rayon pool.
    pub parallel: bool,
}

/// `∇U` in the sampler's coordinates: expanded-mean `Â` and each state's
/// exposed emission parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PotentialGradient<T: Real> {
    pub d_a_hat: Matrix<T>,
    pub d_emissions: Vec<EmissionGradient<T>>,
}

impl<T: Real> PotentialGradient<T> {
    pub fn zeros(params: &HmmParams<T>) -> Self {
        let k = params.num_states();
        PotentialGradient {
            d_a_hat: Matrix::zeros(k, k),
            d_emissions: params.emissions().iter().map(|e| e.zero_gradient()).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, w: T) {
        self.d_a_hat.add_assign_scaled(&other.d_a_hat, w);
        for (a, b) in self.d_emissions.iter_mut().zip(&other.d_emissions) {
            a.add_scaled(b, w);
        }
    }

    pub fn scale_in_place(&mut self, w: T) {
        self.d_a_hat = self.d_a_hat.scale(w);
        self.d_emissions.iter_mut().for_each(|e| e.scale_in_place(w));
    }

    /// Transition entries row-major, then each state's emission partials.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = self.d_a_hat.as_slice().to_vec();
        for e in &self.d_emissions {
            v.extend(e.to_vec());
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .fold(T::zero(), |m, (&a, b)| m.max((a - b).abs()))
    }
}

/// Sufficient statistics of one or more window passes.
struct WindowStats<T: Real> {
    /// `∂ ln p / ∂A_ij` summed over the covered transitions.
    trans: Matrix<T>,
    scores: Vec<ScoreAccumulator<T>>,
}

impl<T: Real> WindowStats<T> {
    fn merge(mut self, other: &Self) -> Self {
        self.trans.add_assign_scaled(&other.trans, T::one());
        for (a, b) in self.scores.iter_mut().zip(&other.scores) {
            a.merge(b);
        }
        self
    }
}

/// Fused pass over `y[start..end)` given a normalized left message and an
/// arbitrary positive right message. When `weights` is given, the per-state
/// posterior weights are written to it, `(end - start) × K` row-major.
fn window_pass<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    start: usize,
    end: usize,
    left: &[T],
    right: &[T],
    mut weights: Option<&mut Vec<T>>,
) -> Result<(WindowStats<T>, T)> {
    let k = params.num_states();
    let n = end - start;
    let a = params.transition();
    let mut alpha = vec![T::zero(); (n + 1) * k];
    let mut dens = vec![T::zero(); n * k];
    let mut c = vec![T::zero(); n];
    let mut pred = vec![T::zero(); k];
    let total: T = left.iter().copied().sum();
    for (o, &l) in alpha.iter_mut().zip(left) {
        *o = l / total;
    }
    let mut log_lik = T::zero();
    for s in 0..n {
        let t = start + s;
        let d = &mut dens[s * k..(s + 1) * k];
        let shift = params.scaled_densities(y.get(t), t, d)?;
        let (prev, cur) = alpha.split_at_mut((s + 1) * k);
        a.matvec_into(&prev[s * k..], &mut pred);
        let mut ct = T::zero();
        for i in 0..k {
            cur[i] = pred[i] * d[i];
            ct += cur[i];
        }
        if !(ct > T::zero()) || !ct.is_finite() {
            return Err(Error::numeric(
                format!("timestep {t}"),
                "window likelihood vanished under every state",
            ));
        }
        for v in &mut cur[..k] {
            *v /= ct;
        }
        c[s] = ct;
        log_lik += ct.ln() + shift;
    }

    let last = &alpha[n * k..];
    let z: T = last.iter().zip(right).map(|(&p, &r)| p * r).sum();
    if !(z > T::zero()) || !z.is_finite() {
        return Err(Error::numeric(
            format!("timestep {}", end - 1),
            "right boundary message has no mass on the filtered states",
        ));
    }
    log_lik += z.ln();

    if let Some(w) = weights.as_deref_mut() {
        w.clear();
        w.resize(n * k, T::zero());
    }
    let emissions = params.emissions();
    let mut scores: Vec<_> = emissions.iter().map(ScoreAccumulator::new).collect();
    let mut trans = Matrix::zeros(k, k);
    let mut beta: Vec<T> = right.iter().map(|&r| r / z).collect();
    let mut u = vec![T::zero(); k];
    for s in (0..n).rev() {
        let t = start + s;
        let yt = y.get(t);
        let prev = &alpha[s * k..(s + 1) * k];
        let cur = &alpha[(s + 1) * k..(s + 2) * k];
        for i in 0..k {
            let gamma = cur[i] * beta[i];
            if let Some(w) = weights.as_deref_mut() {
                w[s * k + i] = gamma;
            }
            if gamma > T::zero() {
                scores[i].add(&emissions[i], yt, gamma);
            }
            u[i] = dens[s * k + i] * beta[i] / c[s];
        }
        let g = trans.as_mut_slice();
        for i in 0..k {
            let ui = u[i];
            for j in 0..k {
                g[i * k + j] += ui * prev[j];
            }
        }
        a.vecmat_into(&u, &mut beta);
    }
    Ok((WindowStats { trans, scores }, log_lik))
}

/// Left and right messages for `window` under `boundary`.
pub fn boundary_messages<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    window: &SubsequenceWindow,
    boundary: Boundary,
) -> Result<MessagePair<T>> {
    check_dims(params, y)?;
    window.validate(y.len())?;
    let (start, end) = (window.start(), window.end());
    let (left, right): (ForwardMessage<T>, BackwardMessage<T>) = match boundary {
        Boundary::Exact => (
            forward_predictive(params, y, 0, start, params.pi0())?,
            backward_likelihood(params, y, end, y.len())?,
        ),
        Boundary::Buffered => (
            forward_predictive(params, y, start - window.buffer, start, params.pi0())?,
            backward_likelihood(params, y, end, end + window.buffer)?,
        ),
    };
    Ok(MessagePair { left, right })
}

fn window_stats<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    window: &SubsequenceWindow,
    boundary: Boundary,
    weights: Option<&mut Vec<T>>,
) -> Result<(WindowStats<T>, T)> {
    let tag = |e: Error| e.context(format_args!("window tau={}", window.tau));
    let msgs = boundary_messages(params, y, window, boundary).map_err(tag)?;
    window_pass(
        params,
        y,
        window.start(),
        window.end(),
        &msgs.left.prob,
        &msgs.right.lik,
        weights,
    )
    .map_err(tag)
}

/// Chain-rule map from `∂ ln p / ∂A` to `∂ ln p / ∂Â` for `A = |Â| / colsum|Â|`.
fn expanded_score<T: Real>(a: &Matrix<T>, a_hat: &Matrix<T>, g: &Matrix<T>) -> Matrix<T> {
    let k = a.rows();
    let mut out = Matrix::zeros(k, k);
    for j in 0..k {
        let s: T = (0..k).map(|i| a_hat[(i, j)].abs()).sum();
        let m: T = (0..k).map(|i| a[(i, j)] * g[(i, j)]).sum();
        for i in 0..k {
            out.as_mut_slice()[i * k + j] = a_hat[(i, j)].signum() * (g[(i, j)] - m) / s;
        }
    }
    out
}

fn check_a_hat<T: Real>(params: &HmmParams<T>, a_hat: &Matrix<T>) -> Result<()> {
    let k = params.num_states();
    if a_hat.rows() != k || a_hat.cols() != k {
        return Err(Error::validation("expanded transition", format!("expected {k}x{k}")));
    }
    if !a_hat.is_finite() {
        return Err(Error::validation("expanded transition", "non-finite entries"));
    }
    for j in 0..k {
        let s: T = (0..k).map(|i| a_hat[(i, j)].abs()).sum();
        if !(s > T::zero()) {
            return Err(Error::validation(
                "expanded transition",
                format!("column {j} is identically zero"),
            ));
        }
    }
    Ok(())
}

/// Turns likelihood statistics scaled by `scale` into `∇U`, adding the prior.
fn assemble<T: Real>(
    params: &HmmParams<T>,
    a_hat: &Matrix<T>,
    prior: &Prior<T>,
    stats: &WindowStats<T>,
    scale: T,
) -> Result<PotentialGradient<T>> {
    let lik_a = expanded_score(params.transition(), a_hat, &stats.trans);
    let prior_a = prior.transition.grad_log_density(a_hat);
    let d_a_hat = lik_a.scale(-scale).sub(&prior_a);
    let d_emissions = params
        .emissions()
        .iter()
        .zip(&stats.scores)
        .map(|(e, acc)| {
            let mut g = acc.gradient(e).scaled(-scale);
            g.add_scaled(&prior.emission.grad_log_density(e), -T::one());
            g
        })
        .collect();
    let out = PotentialGradient { d_a_hat, d_emissions };
    if !out.is_finite() {
        return Err(Error::numeric("gradient assembly", "non-finite gradient entry"));
    }
    Ok(out)
}

fn reduce<T: Real>(parts: Vec<WindowStats<T>>) -> WindowStats<T> {
    let mut it = parts.into_iter();
    let first = it.next().expect("at least one window");
    it.fold(first, |acc, s| acc.merge(&s))
}

/// Exact `∇U` as a sum over consecutive windows of length `2L+1` (the last
/// one possibly shorter) with exact boundary messages. The result does not
/// depend on `half_width` beyond rounding.
pub fn full_gradient<T: Real>(
    params: &HmmParams<T>,
    a_hat: &Matrix<T>,
    prior: &Prior<T>,
    y: &ObservationSequence<T>,
    half_width: usize,
    parallel: bool,
) -> Result<PotentialGradient<T>> {
    check_dims(params, y)?;
    check_a_hat(params, a_hat)?;
    let t_len = y.len();
    let len = 2 * half_width + 1;
    if t_len < len {
        return Err(Error::validation(
            "full gradient",
            format!("T={t_len} is shorter than one window of length {len}"),
        ));
    }
    let spans: Vec<(usize, usize)> = (0..t_len).step_by(len).map(|s| (s, (s + len).min(t_len))).collect();
    let k = params.num_states();

    let mut lefts = Vec::with_capacity(spans.len());
    let mut prob = params.pi0().to_vec();
    let mut scratch = vec![T::zero(); k];
    for &(s, e) in &spans {
        lefts.push(prob.clone());
        for t in s..e {
            forward_step(params, y.get(t), t, &mut prob, &mut scratch)?;
        }
    }
    let mut rights = vec![Vec::new(); spans.len()];
    let mut lik = vec![T::one(); k];
    for (idx, &(s, e)) in spans.iter().enumerate().rev() {
        rights[idx] = lik.clone();
        backward_absorb(params, y, s, e, &mut lik)?;
    }

    let run = |idx: usize| {
        let (s, e) = spans[idx];
        window_pass(params, y, s, e, &lefts[idx], &rights[idx], None).map(|r| r.0)
    };
    let parts: Vec<WindowStats<T>> = if parallel {
        (0..spans.len()).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..spans.len()).map(run).collect::<Result<_>>()?
    };
    assemble(params, a_hat, prior, &reduce(parts), T::one())
}

/// Minibatch estimate of `∇U`: window terms summed and divided by the
/// batch's inclusion probability, plus the prior term.
pub fn stochastic_gradient<T: Real>(
    params: &HmmParams<T>,
    a_hat: &Matrix<T>,
    prior: &Prior<T>,
    y: &ObservationSequence<T>,
    batch: &Minibatch,
    opts: GradientOptions,
) -> Result<PotentialGradient<T>> {
    check_dims(params, y)?;
    check_a_hat(params, a_hat)?;
    if batch.windows.is_empty() {
        return Err(Error::validation("minibatch", "no windows"));
    }
    if !batch.log_inclusion.is_finite() || batch.log_inclusion > 1e-12 {
        return Err(Error::validation("minibatch", "inclusion probability outside (0, 1]"));
    }
    for w in &batch.windows {
        w.validate(y.len())?;
    }
    let run = |w: &SubsequenceWindow| window_stats(params, y, w, opts.boundary, None).map(|r| r.0);
    let parts: Vec<WindowStats<T>> = if opts.parallel {
        batch.windows.par_iter().map(run).collect::<Result<_>>()?
    } else {
        batch.windows.iter().map(run).collect::<Result<_>>()?
    };
    let scale = T::of((-batch.log_inclusion).exp());
    assemble(params, a_hat, prior, &reduce(parts), scale)
}

/// Each window's likelihood term `-∂ ln p(y_window | boundaries)` in the
/// batch, unscaled and without the prior.
pub fn window_terms<T: Real>(
    params: &HmmParams<T>,
    a_hat: &Matrix<T>,
    y: &ObservationSequence<T>,
    batch: &Minibatch,
    opts: GradientOptions,
) -> Result<Vec<PotentialGradient<T>>> {
    check_dims(params, y)?;
    check_a_hat(params, a_hat)?;
    for w in &batch.windows {
        w.validate(y.len())?;
    }
    let flat = Prior::flat();
    let run = |w: &SubsequenceWindow| {
        let (stats, _) = window_stats(params, y, w, opts.boundary, None)?;
        assemble(params, a_hat, &flat, &stats, T::one())
    };
    if opts.parallel {
        batch.windows.par_iter().map(run).collect()
    } else {
        batch.windows.iter().map(run).collect()
    }
}

/// `-∇ ln p(θ)` in the same layout as the likelihood gradients.
pub fn prior_term<T: Real>(params: &HmmParams<T>, a_hat: &Matrix<T>, prior: &Prior<T>) -> PotentialGradient<T> {
    PotentialGradient {
        d_a_hat: prior.transition.grad_log_density(a_hat).scale(-T::one()),
        d_emissions: params
            .emissions()
            .iter()
            .map(|e| prior.emission.grad_log_density(e).scaled(-T::one()))
            .collect(),
    }
}

/// `-∂ ln p(y_window | boundaries) / ∂Â` for one window, without prior or scaling.
pub fn transition_gradient_term<T: Real>(
    params: &HmmParams<T>,
    a_hat: &Matrix<T>,
    y: &ObservationSequence<T>,
    window: &SubsequenceWindow,
    boundary: Boundary,
) -> Result<Matrix<T>> {
    check_a_hat(params, a_hat)?;
    let (stats, _) = window_stats(params, y, window, boundary, None)?;
    Ok(expanded_score(params.transition(), a_hat, &stats.trans).scale(-T::one()))
}

/// `-∂ ln p(y_window | boundaries) / ∂φ_k` for one window.
pub fn emission_gradient_term<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    window: &SubsequenceWindow,
    k: usize,
    boundary: Boundary,
) -> Result<EmissionGradient<T>> {
    if k >= params.num_states() {
        return Err(Error::Index(format!("state {k} of {}", params.num_states())));
    }
    let (stats, _) = window_stats(params, y, window, boundary, None)?;
    Ok(stats.scores[k].gradient(&params.emissions()[k]).scaled(-T::one()))
}

/// Posterior state weights inside the window given its boundary messages,
/// one row of length K per covered timestep.
pub fn state_weights<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    window: &SubsequenceWindow,
    boundary: Boundary,
) -> Result<Vec<Vec<T>>> {
    let mut w = Vec::new();
    window_stats(params, y, window, boundary, Some(&mut w))?;
    Ok(w.chunks(params.num_states()).map(<[T]>::to_vec).collect())
}

/// `ln p(y_window | boundaries)` up to the scale of the right message.
pub fn window_log_likelihood<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    window: &SubsequenceWindow,
    boundary: Boundary,
) -> Result<T> {
    let msgs = boundary_messages(params, y, window, boundary)?;
    let (_, ll) = window_pass(
        params,
        y,
        window.start(),
        window.end(),
        &msgs.left.prob,
        &msgs.right.lik,
        None,
    )?;
    Ok(ll + msgs.right.log_norm)
}
