//! Metrics for fitted models and the synthetic experiment datasets.

use serde::{Deserialize, Serialize};

use crate::emissions::{Emission, Family, Gaussian, LogNormal};
use crate::error::{Error, Result};
use crate::hmm::{check_dims, forward_step, log_marginal_likelihood, simulate, HmmParams, ObservationSequence};
use crate::linalg::Matrix;
use crate::prior::{EmissionPrior, Prior, TransitionPrior};
use crate::sampler::{kmeans_init, run_sg_mcmc_from, RunConfig, Structure, Trace};
use crate::scalar::{log_sum_exp, Real};

/// `ln p(y[t..t+k) | y[0..t))`.
pub fn k_step_predictive<T: Real>(params: &HmmParams<T>, y: &ObservationSequence<T>, t: usize, k: usize) -> Result<T> {
    check_dims(params, y)?;
    if t + k > y.len() {
        return Err(Error::Index(format!(
            "predictive window [{t}, {}) of length {}",
            t + k,
            y.len()
        )));
    }
    let n = params.num_states();
    let mut prob = params.pi0().to_vec();
    let mut scratch = vec![T::zero(); n];
    for s in 0..t {
        forward_step(params, y.get(s), s, &mut prob, &mut scratch)?;
    }
    let mut lp = T::zero();
    for s in t..t + k {
        lp += forward_step(params, y.get(s), s, &mut prob, &mut scratch)?;
    }
    Ok(lp)
}

/// `count` evenly spaced `t` with `from <= t` and `t + horizon <= to`.
pub fn evaluation_points(from: usize, to: usize, horizon: usize, count: usize) -> Result<Vec<usize>> {
    if to < from + horizon || count == 0 {
        return Err(Error::validation(
            "evaluation points",
            format!("range [{from}, {to}) cannot hold a horizon of {horizon}"),
        ));
    }
    let last = to - horizon;
    if count == 1 {
        return Ok(vec![from]);
    }
    let span = (last - from) as f64;
    let mut pts: Vec<usize> = (0..count)
        .map(|i| from + (span * i as f64 / (count - 1) as f64).round() as usize)
        .collect();
    pts.dedup();
    Ok(pts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveReport {
    pub horizon: usize,
    pub points: Vec<usize>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    /// Wall time spent producing the evaluated model.
    pub wall_ms: f64,
}

impl PredictiveReport {
    fn from_values(horizon: usize, points: Vec<usize>, values: Vec<f64>, wall_ms: f64) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        PredictiveReport {
            horizon,
            points,
            values,
            mean,
            se: (var / n).sqrt(),
            wall_ms,
        }
    }

    /// Per-point differences `self - other` on shared points: mean and SE.
    pub fn paired_difference(&self, other: &PredictiveReport) -> Result<(f64, f64)> {
        if self.points != other.points || self.horizon != other.horizon {
            return Err(Error::validation("predictive reports", "evaluated on different points"));
        }
        let d: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        let r = PredictiveReport::from_values(self.horizon, self.points.clone(), d, 0.0);
        Ok((r.mean, r.se))
    }
}

/// `k_step_predictive` at every point, sharing one forward sweep.
pub fn predictive_report<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    points: &[usize],
    horizon: usize,
    wall_ms: f64,
) -> Result<PredictiveReport> {
    check_dims(params, y)?;
    if horizon == 0 {
        return Err(Error::validation("horizon", "must be >= 1"));
    }
    if points.is_empty() {
        return Err(Error::validation("evaluation points", "none given"));
    }
    let mut sorted = points.to_vec();
    sorted.sort_unstable();
    if let Some(&p) = sorted.last() {
        if p + horizon > y.len() {
            return Err(Error::Index(format!(
                "predictive window [{p}, {}) of length {}",
                p + horizon,
                y.len()
            )));
        }
    }
    let n = params.num_states();
    let mut prob = params.pi0().to_vec();
    let mut scratch = vec![T::zero(); n];
    let mut at = 0;
    let mut by_point = std::collections::HashMap::new();
    for &p in &sorted {
        while at < p {
            forward_step(params, y.get(at), at, &mut prob, &mut scratch)?;
            at += 1;
        }
        let mut ahead = prob.clone();
        let mut lp = T::zero();
        for s in p..p + horizon {
            lp += forward_step(params, y.get(s), s, &mut ahead, &mut scratch)?;
        }
        by_point.insert(p, lp.to_f64_lossy());
    }
    let values = points.iter().map(|p| by_point[p]).collect();
    Ok(PredictiveReport::from_values(horizon, points.to_vec(), values, wall_ms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Frobenius,
    MaxAbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionError {
    pub error: f64,
    pub norm: NormKind,
    /// `perm[i]` is the reference state matched to estimated state `i`.
    pub permutation: Option<Vec<usize>>,
}

fn norm_of<T: Real>(a: &Matrix<T>, b: &Matrix<T>, perm: &[usize], norm: NormKind) -> f64 {
    let k = a.rows();
    let mut acc = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let d = (a[(i, j)] - b[(perm[i], perm[j])]).to_f64_lossy().abs();
            match norm {
                NormKind::Frobenius => acc += d * d,
                NormKind::MaxAbs => acc = acc.max(d),
            }
        }
    }
    match norm {
        NormKind::Frobenius => acc.sqrt(),
        NormKind::MaxAbs => acc,
    }
}

fn for_each_permutation(k: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..k).collect();
    let mut c = vec![0; k];
    f(&p);
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            f(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Largest K for which label alignment enumerates every permutation.
pub const EXHAUSTIVE_ALIGNMENT_MAX: usize = 8;

/// Distance between two transition matrices, optionally minimized over
/// relabelings of the estimate (exhaustive up to 8 states, pairwise-swap
/// descent from the identity beyond).
pub fn transition_error<T: Real>(
    est: &Matrix<T>,
    reference: &Matrix<T>,
    norm: NormKind,
    align: bool,
) -> Result<TransitionError> {
    if est.rows() != reference.rows() || est.cols() != reference.cols() || !est.is_square() {
        return Err(Error::validation(
            "transition error",
            format!(
                "shapes {}x{} and {}x{} differ",
                est.rows(),
                est.cols(),
                reference.rows(),
                reference.cols()
            ),
        ));
    }
    let k = est.rows();
    let identity: Vec<usize> = (0..k).collect();
    if !align {
        return Ok(TransitionError {
            error: norm_of(est, reference, &identity, norm),
            norm,
            permutation: None,
        });
    }
    let mut best = (norm_of(est, reference, &identity, norm), identity);
    if k <= EXHAUSTIVE_ALIGNMENT_MAX {
        for_each_permutation(k, |p| {
            let e = norm_of(est, reference, p, norm);
            if e < best.0 {
                best = (e, p.to_vec());
            }
        });
    } else {
        let mut improved = true;
        while improved {
            improved = false;
            for a in 0..k {
                for b in a + 1..k {
                    let mut p = best.1.clone();
                    p.swap(a, b);
                    let e = norm_of(est, reference, &p, norm);
                    if e < best.0 - 1e-15 {
                        best = (e, p);
                        improved = true;
                    }
                }
            }
        }
    }
    Ok(TransitionError {
        error: best.0,
        norm,
        permutation: Some(best.1),
    })
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
/// Returns `assign[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn emission_location<T: Real>(e: &Emission<T>) -> Vec<f64> {
    match e {
        Emission::Gaussian(g) => g.mean().iter().map(|v| v.to_f64_lossy()).collect(),
        Emission::LogNormal(l) => vec![l.mu().to_f64_lossy(), l.sigma().to_f64_lossy()],
    }
}

/// Relabeling of `est` that best matches `reference` by emission location
/// (Gaussian means; log-normal `(mu, sigma)`): `perm[i]` is the reference
/// state matched to estimated state `i`.
pub fn align_by_emissions<T: Real>(est: &HmmParams<T>, reference: &HmmParams<T>) -> Result<Vec<usize>> {
    if est.num_states() != reference.num_states() {
        return Err(Error::validation("alignment", "state counts differ"));
    }
    let cost: Vec<Vec<f64>> = est
        .emissions()
        .iter()
        .map(|a| {
            let la = emission_location(a);
            reference
                .emissions()
                .iter()
                .map(|b| {
                    la.iter()
                        .zip(emission_location(b))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(hungarian(&cost))
}

/// Transition error after relabeling `est` by `perm` (`perm[i]` = reference label of `i`).
pub fn transition_error_with<T: Real>(
    est: &Matrix<T>,
    reference: &Matrix<T>,
    perm: &[usize],
    norm: NormKind,
) -> Result<TransitionError> {
    let k = est.rows();
    let mut seen = vec![false; k];
    if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::validation("alignment", "not a permutation"));
    }
    if reference.rows() != k || reference.cols() != k {
        return Err(Error::validation("transition error", "shapes differ"));
    }
    Ok(TransitionError {
        error: norm_of(est, reference, perm, norm),
        norm,
        permutation: Some(perm.to_vec()),
    })
}

/// Coordinate-wise average of posterior samples (transition, emission
/// parameters and start distribution). Labels are taken as given.
pub fn posterior_mean<T: Real>(samples: &[HmmParams<T>]) -> Result<HmmParams<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("posterior mean", "no samples"))?;
    let k = first.num_states();
    let w = T::one() / T::of(samples.len() as f64);
    let mut a = Matrix::zeros(k, k);
    let mut pi0 = vec![T::zero(); k];
    let mut em: Vec<Vec<T>> = first
        .emissions()
        .iter()
        .map(|e| vec![T::zero(); e.params_vec().len()])
        .collect();
    for s in samples {
        if s.num_states() != k || s.obs_dim() != first.obs_dim() {
            return Err(Error::validation("posterior mean", "samples disagree in shape"));
        }
        a.add_assign_scaled(s.transition(), w);
        for (acc, v) in pi0.iter_mut().zip(s.pi0()) {
            *acc += *v * w;
        }
        for (acc, e) in em.iter_mut().zip(s.emissions()) {
            for (x, v) in acc.iter_mut().zip(e.params_vec()) {
                *x += v * w;
            }
        }
    }
    let emissions = em
        .iter()
        .zip(first.emissions())
        .map(|(v, e)| e.with_params_vec(v))
        .collect::<Result<Vec<_>>>()?;
    HmmParams::new(a, emissions, pi0)
}

/// The i.i.d. mixture baseline: the same sampler with every column of `A`
/// tied to one weight vector.
pub fn iid_baseline_fit<T: Real>(y: &ObservationSequence<T>, k: usize, config: &RunConfig<T>) -> Result<Trace<T>> {
    let config = RunConfig {
        num_states: k,
        structure: Structure::Mixture,
        ..config.clone()
    };
    config.validate()?;
    let init = kmeans_init(y, k, config.family, config.kmeans_subsample, config.seed)?;
    run_sg_mcmc_from(y, &init, &config)
}

/// `ln mean_s p(y_test | θ_s)` over the given posterior samples.
pub fn model_selection_score<T: Real>(y_test: &ObservationSequence<T>, samples: &[HmmParams<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("model selection", "trace is empty"));
    }
    let lls = samples
        .iter()
        .map(|p| log_marginal_likelihood(p, y_test).map(|v| v.to_f64_lossy()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&lls) - (lls.len() as f64).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Eight near-deterministic sticky states with well separated 2-d means.
    Dd,
    /// Two reversed three-cycles joined by bridge states, noisy 2-d emissions.
    Rc,
    /// Two-state switching log-normal, 1-d.
    LogNormal,
    /// Three sticky 1-d Gaussian levels, a stand-in for a segmentation trace.
    Segmentation,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dd" => Ok(DatasetKind::Dd),
            "rc" => Ok(DatasetKind::Rc),
            "lognormal" | "log-normal" | "log_normal" => Ok(DatasetKind::LogNormal),
            "segmentation" | "seg" => Ok(DatasetKind::Segmentation),
            _ => Err(Error::Config(format!("unknown dataset kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Dd => "dd",
            DatasetKind::Rc => "rc",
            DatasetKind::LogNormal => "lognormal",
            DatasetKind::Segmentation => "segmentation",
        })
    }
}

/// Row `i` holds `Pr(next = i | prev = j)` for every `j`.
pub const A_DD: [[f64; 8]; 8] = [
    [0.999, 0.001, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.999, 0.001, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.999, 0.001, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.999, 0.001, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.999, 0.001, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.999, 0.001, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.999, 0.001],
    [0.001, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.999],
];

pub const MU_DD: [[f64; 2]; 8] = [
    [0.0, 20.0],
    [20.0, 0.0],
    [-30.0, -30.0],
    [30.0, -30.0],
    [-20.0, 0.0],
    [0.0, -20.0],
    [30.0, 30.0],
    [-30.0, 30.0],
];

pub const A_RC: [[f64; 8]; 8] = [
    [0.01, 0.0, 0.85, 0.0, 0.0, 0.0, 0.0, 1.0],
    [0.99, 0.01, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.99, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.15, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 0.01, 0.0, 0.85, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.99, 0.01, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.99, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.15, 0.0],
];

pub const MU_RC: [[f64; 2]; 8] = [
    [-50.0, 0.0],
    [30.0, -30.0],
    [30.0, 30.0],
    [-100.0, -10.0],
    [40.0, -40.0],
    [-65.0, 0.0],
    [40.0, 40.0],
    [100.0, 10.0],
];

pub const A_LOGNORMAL: [[f64; 2]; 2] = [[0.1, 0.9], [0.9, 0.1]];
pub const MU_LOGNORMAL: [f64; 2] = [0.0, 4.0];
pub const SIGMA_LOGNORMAL: [f64; 2] = [2.0, 2.0];

const A_SEGMENTATION: [[f64; 3]; 3] = [[0.99, 0.005, 0.005], [0.005, 0.99, 0.005], [0.005, 0.005, 0.99]];
const MU_SEGMENTATION: [f64; 3] = [-2.0, 0.0, 3.0];
const VAR_SEGMENTATION: [f64; 3] = [0.5, 0.3, 1.0];

fn matrix_of<const N: usize>(rows: &[[f64; N]; N]) -> Matrix<f64> {
    Matrix::from_fn(N, N, |i, j| rows[i][j])
}

/// The generating parameters of a dataset kind, with a uniform start.
pub fn dataset_params(kind: DatasetKind) -> HmmParams<f64> {
    let build = || -> Result<HmmParams<f64>> {
        match kind {
            DatasetKind::Dd => HmmParams::with_uniform_start(
                matrix_of(&A_DD),
                MU_DD
                    .iter()
                    .map(|m| Gaussian::isotropic(m.to_vec(), 1.0).map(Emission::Gaussian))
                    .collect::<Result<_>>()?,
            ),
            DatasetKind::Rc => HmmParams::with_uniform_start(
                matrix_of(&A_RC),
                MU_RC
                    .iter()
                    .map(|m| Gaussian::isotropic(m.to_vec(), 20.0).map(Emission::Gaussian))
                    .collect::<Result<_>>()?,
            ),
            DatasetKind::LogNormal => HmmParams::with_uniform_start(
                matrix_of(&A_LOGNORMAL),
                (0..2)
                    .map(|k| LogNormal::new(MU_LOGNORMAL[k], SIGMA_LOGNORMAL[k]).map(Emission::LogNormal))
                    .collect::<Result<_>>()?,
            ),
            DatasetKind::Segmentation => HmmParams::with_uniform_start(
                matrix_of(&A_SEGMENTATION),
                (0..3)
                    .map(|k| Gaussian::isotropic(vec![MU_SEGMENTATION[k]], VAR_SEGMENTATION[k]).map(Emission::Gaussian))
                    .collect::<Result<_>>()?,
            ),
        }
    };
    build().expect("dataset constants are valid")
}

pub fn dataset_family(kind: DatasetKind) -> Family {
    match kind {
        DatasetKind::LogNormal => Family::LogNormal,
        _ => Family::Gaussian,
    }
}

/// Prior used when fitting a dataset kind with a given family: uniform
/// Dirichlet columns, standard-normal `mu`/`sigma` for log-normal emissions,
/// flat on Gaussian emissions.
pub fn default_prior<T: Real>(family: Family) -> Prior<T> {
    Prior {
        transition: TransitionPrior::default(),
        emission: match family {
            Family::Gaussian => EmissionPrior::Flat,
            Family::LogNormal => EmissionPrior::standard_lognormal(),
        },
    }
}

/// Simulated `T` observations from `kind`'s parameters.
pub fn make_dataset(kind: DatasetKind, len: usize, seed: u64) -> Result<(ObservationSequence<f64>, HmmParams<f64>)> {
    let params = dataset_params(kind);
    let (y, _) = simulate(&params, len, seed)?;
    Ok((y, params))
}
