//! Buffer length from the Lyapunov exponent of the filter map, inter-window
//! gap from the mixing time, and gap-respecting minibatch draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient::{Minibatch, SubsequenceWindow};
use crate::hmm::{check_dims, HmmParams, ObservationSequence};
use crate::linalg::{eigenvalue_moduli, Matrix};
use crate::scalar::Real;

/// Floor on a single step's log contraction, reached when the map collapses
/// the simplex to a point.
const LOG_FLOOR: f64 = -700.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    /// `-inf` when `K = 1`.
    pub exponent: f64,
    pub n_samples: usize,
    pub std_error: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovMethod {
    /// Push a tangent vector through the Jacobian of the normalized map.
    #[default]
    Tangent,
    /// Follow two trajectories a distance `eta` apart, renormalizing the separation each step.
    TwoTrajectory,
}

/// How the observations driving the map are drawn from the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovDrive {
    /// Independent uniform draws.
    #[default]
    Iid,
    /// The data in order from a uniform random start, restarting at the end.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub n_iter: usize,
    pub seed: u64,
    pub drive: LyapunovDrive,
    /// Independent chains, averaged.
    pub replicas: usize,
    pub method: LyapunovMethod,
    pub eta: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            n_iter: 20_000,
            seed: 0,
            drive: LyapunovDrive::Iid,
            replicas: 1,
            method: LyapunovMethod::Tangent,
            eta: 1e-8,
        }
    }
}

/// Monte Carlo estimate of the top Lyapunov exponent of `v ↦ normalize(P(y) A v)`
/// with `y` drawn uniformly from the data.
pub fn estimate_lyapunov<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    n_iter: usize,
    rng_seed: u64,
) -> Result<LyapunovEstimate> {
    let cfg = LyapunovConfig {
        n_iter,
        seed: rng_seed,
        ..LyapunovConfig::default()
    };
    estimate_lyapunov_with(params, y, &cfg)
}

pub fn estimate_lyapunov_with<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    cfg: &LyapunovConfig,
) -> Result<LyapunovEstimate> {
    check_dims(params, y)?;
    if cfg.n_iter < 10 {
        return Err(Error::Config(format!(
            "lyapunov needs n_iter >= 10 to leave samples after burn-in, got {}",
            cfg.n_iter
        )));
    }
    if params.num_states() == 1 {
        return Ok(LyapunovEstimate {
            exponent: f64::NEG_INFINITY,
            n_samples: cfg.n_iter,
            std_error: 0.0,
        });
    }
    let replicas = cfg.replicas.max(1);
    let logs: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| lyapunov_chain(params, y, cfg, cfg.seed.wrapping_add(r as u64)))
        .collect::<Result<_>>()?;
    let all: Vec<f64> = logs.into_iter().flatten().collect();
    let n = all.len();
    let mean = all.iter().sum::<f64>() / n as f64;
    Ok(LyapunovEstimate {
        exponent: mean,
        n_samples: n,
        std_error: batch_means_se(&all),
    })
}

fn batch_means_se(xs: &[f64]) -> f64 {
    let nb = 20.min(xs.len());
    let size = xs.len() / nb;
    if nb < 2 || size == 0 {
        return 0.0;
    }
    let means: Vec<f64> = xs
        .chunks_exact(size)
        .take(nb)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / nb as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (nb - 1) as f64;
    (var / nb as f64).sqrt()
}

/// Per-step log growth rates after burn-in.
fn lyapunov_chain<T: Real>(
    params: &HmmParams<T>,
    y: &ObservationSequence<T>,
    cfg: &LyapunovConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let k = params.num_states();
    let a = params.transition();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let burn = cfg.n_iter / 10;
    let mut v: Vec<f64> = params.pi0().iter().map(|p| p.to_f64_lossy()).collect();
    let mut w = random_tangent(k, &mut rng);
    let eta = cfg.eta;
    let mut v2: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + eta * b).collect();
    let mut dens = vec![T::zero(); k];
    let am: Vec<f64> = a.as_slice().iter().map(|x| x.to_f64_lossy()).collect();
    let mut m = vec![0.0; k * k];
    let mut out = Vec::with_capacity(cfg.n_iter - burn);
    let mut cursor = rng.random_range(0..y.len());
    for it in 0..cfg.n_iter {
        let t = match cfg.drive {
            LyapunovDrive::Iid => rng.random_range(0..y.len()),
            LyapunovDrive::Sequential => {
                if cursor >= y.len() {
                    cursor = rng.random_range(0..y.len());
                }
                cursor += 1;
                cursor - 1
            }
        };
        params.scaled_densities(y.get(t), t, &mut dens)?;
        for i in 0..k {
            let d = dens[i].to_f64_lossy();
            for j in 0..k {
                m[i * k + j] = d * am[i * k + j];
            }
        }
        let mut step = match cfg.method {
            LyapunovMethod::Tangent => tangent_step(&m, k, &mut v, &mut w, &mut rng),
            LyapunovMethod::TwoTrajectory => pair_step(&m, k, &mut v, &mut v2, eta),
        };
        if step.is_none() {
            // The drawn observation is impossible from the current vector:
            // everything collapses, so count full contraction and restart.
            v = vec![1.0 / k as f64; k];
            w = random_tangent(k, &mut rng);
            v2 = v.iter().zip(&w).map(|(a, b)| a + eta * b).collect();
            let mut scratch = w.clone();
            let (mut va, mut vb) = (v.clone(), v2.clone());
            let ok = match cfg.method {
                LyapunovMethod::Tangent => tangent_step(&m, k, &mut va, &mut scratch, &mut rng),
                LyapunovMethod::TwoTrajectory => pair_step(&m, k, &mut va, &mut vb, eta),
            };
            if ok.is_none() {
                return Err(Error::numeric(
                    format!("timestep {t}"),
                    "filter map has zero mass under every state",
                ));
            }
            v = va;
            w = random_tangent(k, &mut rng);
            v2 = v.iter().zip(&w).map(|(a, b)| a + eta * b).collect();
            step = Some(LOG_FLOOR);
        }
        let step = step.expect("set above");
        if it >= burn {
            out.push(step);
        }
    }
    Ok(out)
}

fn random_tangent<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() - 0.5).collect();
    let mean = w.iter().sum::<f64>() / k as f64;
    w.iter_mut().for_each(|x| *x -= mean);
    let n = norm(&w);
    if n == 0.0 {
        w[0] = 1.0;
        w[1] = -1.0;
        let n = norm(&w);
        w.iter_mut().for_each(|x| *x /= n);
    } else {
        w.iter_mut().for_each(|x| *x /= n);
    }
    w
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn apply(m: &[f64], k: usize, v: &[f64]) -> Vec<f64> {
    (0..k).map(|i| (0..k).map(|j| m[i * k + j] * v[j]).sum()).collect()
}

fn tangent_step<R: Rng + ?Sized>(m: &[f64], k: usize, v: &mut Vec<f64>, w: &mut Vec<f64>, rng: &mut R) -> Option<f64> {
    let mv = apply(m, k, v);
    let z: f64 = mv.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return None;
    }
    let f: Vec<f64> = mv.iter().map(|x| x / z).collect();
    let mw = apply(m, k, w);
    let total_mw: f64 = mw.iter().sum();
    // Row r of (I - F 1ᵀ) M w / z, arranged so that no term cancels against itself.
    let u: Vec<f64> = (0..k)
        .map(|r| {
            let others_f = 1.0 - f[r];
            let others_mw = total_mw - mw[r];
            (others_f * mw[r] - f[r] * others_mw) / z
        })
        .collect();
    *v = f;
    let n = norm(&u);
    if n > 0.0 && n.is_finite() {
        *w = u.iter().map(|x| x / n).collect();
        Some(n.ln().max(LOG_FLOOR))
    } else {
        *w = random_tangent(k, rng);
        Some(LOG_FLOOR)
    }
}

fn pair_step(m: &[f64], k: usize, v: &mut Vec<f64>, v2: &mut Vec<f64>, eta: f64) -> Option<f64> {
    let normalize = |x: Vec<f64>| -> Option<Vec<f64>> {
        let s: f64 = x.iter().sum();
        (s > 0.0 && s.is_finite()).then(|| x.iter().map(|e| e / s).collect())
    };
    let a = normalize(apply(m, k, v))?;
    let b = normalize(apply(m, k, v2))?;
    let diff: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
    let d = norm(&diff);
    let step = if d > 0.0 {
        (d / eta).ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    };
    *v2 = if d > 0.0 {
        a.iter().zip(&diff).map(|(x, e)| x + eta * e / d).collect()
    } else {
        let mut w = vec![0.0; k];
        w[0] = eta;
        w[1] = -eta;
        a.iter().zip(&w).map(|(x, e)| x + e).collect()
    };
    *v = a;
    Some(step)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferPolicy {
    pub buffer: usize,
    pub delta: f64,
    pub delta0: f64,
    /// Set when the exponent gave no contraction and `B_max` was used.
    pub warning: bool,
}

/// `B = ceil(ln(delta / delta0) / exponent)`, clamped to `[1, b_max]`.
pub fn buffer_length(est: &LyapunovEstimate, delta: f64, delta0: f64, b_max: usize) -> BufferPolicy {
    let b_max = b_max.max(1);
    let (buffer, warning) = if est.exponent == f64::NEG_INFINITY {
        (1, false)
    } else if !(est.exponent < 0.0) {
        (b_max, true)
    } else {
        let raw = ((delta / delta0).ln() / est.exponent).ceil();
        let b = if raw.is_finite() && raw >= 1.0 { raw as usize } else { 1 };
        (b.clamp(1, b_max), false)
    };
    BufferPolicy {
        buffer,
        delta,
        delta0,
        warning,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingTime {
    pub nu: f64,
    /// Second-largest eigenvalue modulus.
    pub lambda2: f64,
    /// Set when `nu` hit the `T / 10` cap.
    pub capped: bool,
}

impl MixingTime {
    /// `nu` rounded up for index arithmetic, at least 1.
    pub fn gap(&self) -> usize {
        (self.nu.ceil() as usize).max(1)
    }
}

/// `nu = 1 / (1 - lambda2)` for a column-stochastic `a`, capped at `t_len / 10`.
/// Values within `1e-9` (relative) of an integer are snapped to it.
pub fn mixing_time<T: Real>(a: &Matrix<T>, t_len: usize) -> MixingTime {
    let cap = (t_len as f64 / 10.0).max(1.0);
    let lambda2 = if a.rows() < 2 {
        0.0
    } else {
        eigenvalue_moduli(a).get(1).copied().unwrap_or(0.0)
    };
    let raw = 1.0 / (1.0 - lambda2);
    if !(raw.is_finite() && raw >= 0.0) || raw > cap {
        return MixingTime {
            nu: cap,
            lambda2,
            capped: true,
        };
    }
    let r = raw.round();
    let nu = if (raw - r).abs() <= 1e-9 * r.max(1.0) { r } else { raw };
    MixingTime {
        nu: nu.max(1.0),
        lambda2,
        capped: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapPolicy {
    pub nu: usize,
    /// Minimum distance between the centers of two windows in one batch.
    pub min_gap: usize,
}

impl GapPolicy {
    pub fn new(half_width: usize, buffer: usize, nu: usize) -> Self {
        GapPolicy {
            nu: nu.max(1),
            min_gap: 2 * (half_width + buffer) + nu.max(1),
        }
    }
}

/// Largest batch that fits in a sequence of length `t_len`.
pub fn max_batch_count(t_len: usize, half_width: usize, buffer: usize, nu: usize) -> usize {
    let reach = half_width + buffer;
    if t_len < 2 * reach + 1 {
        return 0;
    }
    (t_len - 1 - 2 * reach) / GapPolicy::new(half_width, buffer, nu).min_gap + 1
}

/// Draws `count` windows one at a time, each uniform over the centers that
/// keep its buffers in range and its center at least `2(L+B)+nu` from every
/// earlier center. `log_prob` follows the sequential-selection product with
/// window length `2L+1`.
pub fn sample_minibatch<R: Rng + ?Sized>(
    t_len: usize,
    half_width: usize,
    buffer: usize,
    nu: usize,
    count: usize,
    rng: &mut R,
) -> Result<Minibatch> {
    let max_feasible = max_batch_count(t_len, half_width, buffer, nu);
    if count == 0 {
        return Err(Error::Config("minibatch count must be >= 1".into()));
    }
    if count > max_feasible {
        return Err(Error::Capacity {
            requested: count,
            max_feasible,
        });
    }
    let gap = GapPolicy::new(half_width, buffer, nu).min_gap;
    let lo = half_width + buffer;
    let hi = t_len - 1 - lo;
    let mut centers = None;
    'attempt: for _ in 0..20 {
        let mut picked: Vec<usize> = Vec::with_capacity(count);
        for _ in 0..count {
            let free = free_intervals(lo, hi, &picked, gap);
            let total: usize = free.iter().map(|(a, b)| b - a + 1).sum();
            if total == 0 {
                continue 'attempt;
            }
            picked.push(nth_free(&free, rng.random_range(0..total)));
        }
        centers = Some(picked);
        break;
    }
    let centers = centers.unwrap_or_else(|| packed_draw(lo, hi, gap, count, rng));
    let log_prob = sequential_log_prob(t_len, half_width, buffer, nu, &centers);
    let log_inclusion = ((count * (2 * half_width + 1)) as f64 / t_len as f64).ln().min(0.0);
    Ok(Minibatch {
        windows: centers
            .into_iter()
            .map(|tau| SubsequenceWindow::new(tau, half_width, buffer))
            .collect(),
        log_prob,
        log_inclusion,
    })
}

fn nth_free(free: &[(usize, usize)], mut pick: usize) -> usize {
    free.iter()
        .find_map(|&(a, b)| {
            let n = b - a + 1;
            if pick < n {
                Some(a + pick)
            } else {
                pick -= n;
                None
            }
        })
        .expect("pick within total")
}

/// Centers that fit in `[a, b]` at spacing `gap`.
fn capacity(a: usize, b: usize, gap: usize) -> usize {
    if a > b {
        0
    } else {
        (b - a) / gap + 1
    }
}

/// Sequential draw restricted at each step to centers that leave room for
/// the rest of the batch. Used when unrestricted draws keep jamming near
/// the packing limit.
fn packed_draw<R: Rng + ?Sized>(lo: usize, hi: usize, gap: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut centers: Vec<usize> = Vec::with_capacity(count);
    for n in 0..count {
        let free = free_intervals(lo, hi, &centers, gap);
        let room: usize = free.iter().map(|&(a, b)| capacity(a, b, gap)).sum();
        let need = count - n - 1;
        let ok: Vec<usize> = free
            .iter()
            .flat_map(|&(a, b)| {
                let rest = room - capacity(a, b, gap);
                (a..=b).filter(move |&c| {
                    let left = if c >= a + gap { capacity(a, c - gap, gap) } else { 0 };
                    rest + left + capacity(c + gap, b, gap) >= need
                })
            })
            .collect();
        centers.push(ok[rng.random_range(0..ok.len())]);
    }
    centers
}

/// Inclusive intervals of `[lo, hi]` at distance `>= gap` from every center.
fn free_intervals(lo: usize, hi: usize, centers: &[usize], gap: usize) -> Vec<(usize, usize)> {
    let mut blocked: Vec<(usize, usize)> = centers
        .iter()
        .map(|&c| (c.saturating_sub(gap - 1), c + gap - 1))
        .collect();
    blocked.sort_unstable();
    let mut out = Vec::new();
    let mut cur = lo;
    for (a, b) in blocked {
        if cur > hi {
            break;
        }
        if a > cur {
            out.push((cur, (a - 1).min(hi)));
        }
        cur = cur.max(b + 1);
    }
    if cur <= hi {
        out.push((cur, hi));
    }
    out
}

/// `ln Π_n L' / |S_n|` with `|S_0| = T` and
/// `|S_n| = |S_{n-1}| - (nu + 2B + 2L) - L_overlap(tau_n)`, where
/// `L_overlap` sums whichever of the distances to the sequence ends and to the
/// nearest earlier centers (minus `L + B`) fall below `2 nu + 3L + 3B`.
/// Centers are 1-based in this rule; `|S_n|` never drops below `L'`.
pub fn sequential_log_prob(t_len: usize, half_width: usize, buffer: usize, nu: usize, centers: &[usize]) -> f64 {
    let l_eff = (2 * half_width + 1) as f64;
    let (l, b, nu_f) = (half_width as f64, buffer as f64, nu as f64);
    let threshold = 2.0 * nu_f + 3.0 * l + 3.0 * b;
    let mut size = t_len as f64;
    let mut lp = 0.0;
    for (n, &c) in centers.iter().enumerate() {
        lp += (l_eff / size.max(l_eff)).ln();
        let tau = (c + 1) as f64;
        let mut terms = vec![tau, t_len as f64 - tau];
        let earlier = &centers[..n];
        if let Some(d) = earlier
            .iter()
            .filter(|&&p| p < c)
            .map(|&p| (c - p) as f64)
            .reduce(f64::min)
        {
            terms.push(d - l - b);
        }
        if let Some(d) = earlier
            .iter()
            .filter(|&&p| p > c)
            .map(|&p| (p - c) as f64)
            .reduce(f64::min)
        {
            terms.push(d - l - b);
        }
        let overlap: f64 = terms.iter().filter(|&&x| x < threshold).sum();
        size = (size - (nu_f + 2.0 * b + 2.0 * l) - overlap).max(l_eff);
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emissions::{Emission, Gaussian};
    use crate::hmm::simulate;

    fn est(exponent: f64) -> LyapunovEstimate {
        LyapunovEstimate {
            exponent,
            n_samples: 1,
            std_error: 0.0,
        }
    }

    #[test]
    fn buffer_length_examples() {
        assert_eq!(buffer_length(&est(-1.0), 1e-3, 2.0, 100).buffer, 8);
        assert_eq!(buffer_length(&est(f64::NEG_INFINITY), 1e-3, 2.0, 100).buffer, 1);
        let p = buffer_length(&est(0.1), 1e-3, 2.0, 37);
        assert_eq!(p.buffer, 37);
        assert!(p.warning);
    }

    #[test]
    fn mixing_time_examples() {
        let a = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.9, 0.1]]).unwrap();
        let m = mixing_time(&a, 1000);
        assert_eq!(m.nu, 5.0);
        assert_eq!(m.gap(), 5);
        assert!((m.lambda2 - 0.8).abs() < 1e-12);
        let u = mixing_time(&Matrix::filled(3, 3, 1.0 / 3.0), 1000);
        assert_eq!(u.nu, 1.0);
        let i = mixing_time(&Matrix::<f64>::identity(3), 1000);
        assert!(i.capped);
        assert_eq!(i.nu, 100.0);
    }

    #[test]
    fn single_window_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_minibatch(200, 3, 2, 4, 1, &mut rng).unwrap();
        assert!((b.log_prob - (7.0f64 / 200.0).ln()).abs() < 1e-15);
        assert_eq!(b.log_prob, b.log_inclusion);
    }

    #[test]
    fn capacity_error_reports_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let max = max_batch_count(100, 2, 3, 4);
        assert_eq!(max, (100 - 1 - 10) / 14 + 1);
        match sample_minibatch(100, 2, 3, 4, max + 1, &mut rng) {
            Err(Error::Capacity { max_feasible, .. }) => assert_eq!(max_feasible, max),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn free_intervals_exclude_neighbourhoods() {
        assert_eq!(free_intervals(0, 20, &[10], 4), vec![(0, 6), (14, 20)]);
        assert_eq!(free_intervals(0, 20, &[1, 19], 4), vec![(5, 15)]);
        assert!(free_intervals(0, 5, &[2], 10).is_empty());
    }

    #[test]
    fn lyapunov_limits() {
        let g = |m: f64| Emission::Gaussian(Gaussian::isotropic(vec![m], 1.0).unwrap());
        let shared = HmmParams::with_uniform_start(Matrix::identity(2), vec![g(0.0), g(0.0)]).unwrap();
        let (y, _) = simulate(&shared, 500, 1).unwrap();
        let e = estimate_lyapunov(&shared, &y, 2000, 3).unwrap();
        assert!(e.exponent.abs() <= 1e-12 + 3.0 * e.std_error, "{e:?}");
        let uniform = HmmParams::with_uniform_start(Matrix::filled(2, 2, 0.5), vec![g(0.0), g(0.0)]).unwrap();
        assert!(estimate_lyapunov(&uniform, &y, 2000, 3).unwrap().exponent <= -5.0);
        assert!(estimate_lyapunov(&uniform, &y, 5, 3).is_err());
    }

    #[test]
    fn two_trajectory_agrees_with_tangent_on_a_mild_chain() {
        let g = |m: f64| Emission::Gaussian(Gaussian::isotropic(vec![m], 1.0).unwrap());
        let a = Matrix::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.8]]).unwrap();
        let p = HmmParams::with_uniform_start(a, vec![g(-1.0), g(1.0)]).unwrap();
        let (y, _) = simulate(&p, 2000, 4).unwrap();
        let mut cfg = LyapunovConfig {
            n_iter: 20_000,
            seed: 9,
            ..LyapunovConfig::default()
        };
        let t = estimate_lyapunov_with(&p, &y, &cfg).unwrap();
        cfg.method = LyapunovMethod::TwoTrajectory;
        let d = estimate_lyapunov_with(&p, &y, &cfg).unwrap();
        assert!(t.exponent < 0.0);
        assert!((t.exponent - d.exponent).abs() < 1e-4, "{t:?} {d:?}");
    }
}
