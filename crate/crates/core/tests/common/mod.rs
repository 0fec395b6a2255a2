#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sghmm::emissions::EmissionModel;
use sghmm::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Column-stochastic with entries bounded away from zero.
pub fn random_transition(rng: &mut ChaCha8Rng, k: usize) -> Mat {
    let raw = Mat::from_fn(k, k, |_, _| rng.random_range(0.1..1.0));
    let s = raw.column_sums();
    Mat::from_fn(k, k, |i, j| raw[(i, j)] / s[j])
}

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let m = Mat::from_fn(d, d, |_, _| rng.random_range(-0.6..0.6));
    m.matmul(&m.transpose())
        .add(&Mat::identity(d).scale(rng.random_range(0.4..1.5)))
}

pub fn random_emission(rng: &mut ChaCha8Rng, family: Family, d: usize) -> Emission<f64> {
    match family {
        Family::Gaussian => {
            let mu = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            Emission::Gaussian(Gaussian::new(mu, random_spd(rng, d)).unwrap())
        }
        Family::LogNormal => {
            Emission::LogNormal(LogNormal::new(rng.random_range(-1.0..1.0), rng.random_range(0.4..1.5)).unwrap())
        }
    }
}

/// Random parameters plus a sequence simulated from them.
pub fn random_instance(seed: u64, k: usize, t_len: usize) -> (Params, Sequence) {
    let mut r = rng(seed);
    let family = if r.random_bool(0.3) {
        Family::LogNormal
    } else {
        Family::Gaussian
    };
    let d = if family == Family::Gaussian {
        r.random_range(1..=2)
    } else {
        1
    };
    let a = random_transition(&mut r, k);
    let em = (0..k).map(|_| random_emission(&mut r, family, d)).collect();
    let pi0 = random_simplex(&mut r, k);
    let p = HmmParams::new(a, em, pi0).unwrap();
    let (y, _) = simulate(&p, t_len, seed ^ 0x5eed).unwrap();
    (p, y)
}

/// `ln Σ_paths` of `init(s_from) Π A[s_{t+1}, s_t] p(y_t | s_{t+1})` over
/// `t in from..to`, split by the final state (`Some(j)`) or summed (`None`).
/// Every path is enumerated explicitly.
fn enumerate_paths(
    p: &Params,
    y: &Sequence,
    from: usize,
    to: usize,
    init: &[f64],
    mut visit: impl FnMut(&[usize], f64),
) {
    let k = p.num_states();
    let n = to - from + 1;
    let log_a: Vec<f64> = p.transition().as_slice().iter().map(|v| v.ln()).collect();
    let log_e: Vec<Vec<f64>> = (from..to)
        .map(|t| p.emissions().iter().map(|e| e.log_density(y.get(t))).collect())
        .collect();
    let mut path = vec![0usize; n];
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % k;
            c /= k;
        }
        let mut lp = init[path[0]].ln();
        for i in 0..n - 1 {
            lp += log_a[path[i + 1] * k + path[i]] + log_e[i][path[i + 1]];
        }
        visit(&path, lp);
    }
}

pub fn brute_log_marginal(p: &Params, y: &Sequence) -> f64 {
    let mut terms = Vec::new();
    enumerate_paths(p, y, 0, y.len(), p.pi0(), |_, lp| terms.push(lp));
    log_sum_exp(&terms)
}

/// Unnormalized `P(y[to-1]) A ⋯ P(y[from]) A init` with `init` normalized, in logs.
pub fn brute_forward(p: &Params, y: &Sequence, from: usize, to: usize, init: &[f64]) -> Vec<f64> {
    let s: f64 = init.iter().sum();
    let init: Vec<f64> = init.iter().map(|v| v / s).collect();
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); p.num_states()];
    enumerate_paths(p, y, from, to, &init, |path, lp| per[*path.last().unwrap()].push(lp));
    per.iter().map(|v| log_sum_exp(v)).collect()
}

/// `ln p(y[from..to) | s_from = j)` for each `j`.
pub fn brute_backward(p: &Params, y: &Sequence, from: usize, to: usize) -> Vec<f64> {
    let k = p.num_states();
    (0..k)
        .map(|j| {
            let mut init = vec![0.0; k];
            init[j] = 1.0;
            let mut terms = Vec::new();
            enumerate_paths(p, y, from, to, &init, |path, lp| {
                if path[0] == j {
                    terms.push(lp)
                }
            });
            log_sum_exp(&terms)
        })
        .collect()
}

pub fn brute_k_step(p: &Params, y: &Sequence, t: usize, k: usize) -> f64 {
    let head = |n: usize| {
        if n == 0 {
            0.0
        } else {
            brute_log_marginal(p, &y.slice(0, n).unwrap())
        }
    };
    head(t + k) - head(t)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

/// `max |got - want| / max |want|`.
pub fn rel_err_vec(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

pub fn normalized(a_hat: &Mat) -> Mat {
    let abs = a_hat.map(f64::abs);
    let s = abs.column_sums();
    Mat::from_fn(abs.rows(), abs.cols(), |i, j| abs[(i, j)] / s[j])
}

/// `U(Â, φ) = -ln p(y | θ) - ln p(Â, φ)` with `A` the column-normalized `Â`.
pub fn potential(p: &Params, a_hat: &Mat, prior: &Prior<f64>, y: &Sequence) -> f64 {
    let q = p.with_transition(normalized(a_hat)).unwrap();
    -log_marginal_likelihood(&q, y).unwrap() - prior.log_density(a_hat, q.emissions())
}

/// Central differences of `U` in the gradient's layout. Covariance entries
/// are perturbed symmetrically, so an off-diagonal pair is compared through
/// the sum of the two analytic entries (see [`symmetrized_layout`]).
pub fn fd_gradient(p: &Params, a_hat: &Mat, prior: &Prior<f64>, y: &Sequence, h: f64) -> Vec<f64> {
    let k = p.num_states();
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let f = |d: f64| {
                let mut b = a_hat.clone();
                b[(i, j)] += d;
                potential(p, &b, prior, y)
            };
            out.push((f(h) - f(-h)) / (2.0 * h));
        }
    }
    for s in 0..k {
        let base = p.emissions()[s].params_vec();
        let dim = p.obs_dim();
        let gaussian = matches!(p.emissions()[s], Emission::Gaussian(_));
        for idx in 0..base.len() {
            let f = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                if gaussian && idx >= dim {
                    let (r, c) = ((idx - dim) / dim, (idx - dim) % dim);
                    if r != c {
                        v[dim + c * dim + r] += d;
                    }
                }
                let mut em = p.emissions().to_vec();
                em[s] = em[s].with_params_vec(&v).unwrap();
                potential(&p.with_emissions(em).unwrap(), a_hat, prior, y)
            };
            out.push((f(h) - f(-h)) / (2.0 * h));
        }
    }
    out
}

/// Flattens a gradient into the layout of [`fd_gradient`]: off-diagonal
/// covariance entries become `g_rc + g_cr`.
pub fn symmetrized_layout(p: &Params, g: &PotentialGradient<f64>) -> Vec<f64> {
    let mut out = g.d_a_hat.as_slice().to_vec();
    for e in &g.d_emissions {
        out.extend(symmetrized_emission(p.obs_dim(), e));
    }
    out
}

pub fn symmetrized_emission(dim: usize, e: &EmissionGradient<f64>) -> Vec<f64> {
    match e {
        EmissionGradient::Gaussian { mean, cov } => {
            let mut v = mean.clone();
            for r in 0..dim {
                for c in 0..dim {
                    v.push(if r == c { cov[(r, c)] } else { cov[(r, c)] + cov[(c, r)] });
                }
            }
            v
        }
        EmissionGradient::LogNormal { mu, sigma } => vec![*mu, *sigma],
    }
}

/// Weights over every legal centre `L..T-L` such that each position is
/// covered exactly once. Solved left to right; `None` when no such weighting
/// exists (the coverage system forces a tiling).
pub fn coverage_weights(t_len: usize, half_width: usize) -> Option<Vec<(usize, f64)>> {
    let len = 2 * half_width + 1;
    if t_len < len {
        return None;
    }
    let n = t_len - len + 1;
    let mut w = vec![0.0; n];
    for t in 0..t_len {
        let lo = t.saturating_sub(len - 1);
        let hi = t.min(n - 1);
        let covered: f64 = (lo..hi).map(|s| w[s]).sum();
        if t < n {
            w[t] = 1.0 - covered;
        } else if (covered + w[hi] - 1.0).abs() > 1e-12 {
            return None;
        }
    }
    if w.iter().any(|&v| v < -1e-12) {
        return None;
    }
    Some(w.into_iter().enumerate().map(|(s, v)| (s + half_width, v)).collect())
}

/// `Σ_τ w_τ · g(single window at τ) · L' / T`: the expectation of the scaled
/// single-window estimator under the position distribution `w_τ L' / T`.
pub fn weighted_window_average(
    p: &Params,
    a_hat: &Mat,
    prior: &Prior<f64>,
    y: &Sequence,
    half_width: usize,
    boundary: Boundary,
) -> Option<PotentialGradient<f64>> {
    let weights = coverage_weights(y.len(), half_width)?;
    let opts = GradientOptions {
        boundary,
        parallel: false,
    };
    let mut acc = PotentialGradient::zeros(p);
    let len = (2 * half_width + 1) as f64;
    for (tau, w) in weights {
        let batch = Minibatch::single(SubsequenceWindow::new(tau, half_width, 0), y.len());
        let g = stochastic_gradient(p, a_hat, prior, y, &batch, opts).unwrap();
        acc.add_scaled(&g, w * len / y.len() as f64);
    }
    Some(acc)
}

pub fn flatten(g: &PotentialGradient<f64>) -> Vec<f64> {
    g.to_vec()
}

/// Runs SG-RLD on the prior alone, handing every state after `burn` steps to `visit`.
pub fn prior_chain(
    start: &Params,
    prior: &Prior<f64>,
    step: f64,
    n: usize,
    burn: usize,
    seed: u64,
    mut visit: impl FnMut(&SamplerState<f64>),
) {
    let mut s = SamplerState::from_params(start, step, seed).unwrap();
    s.emission_step_size = step;
    for it in 0..burn + n {
        let p = s.params().unwrap();
        let g = prior_term(&p, &s.a_hat, prior);
        sgld_step_transition(&mut s, &g.d_a_hat).unwrap();
        sgld_step_emissions(&mut s, &g.d_emissions).unwrap();
        if it >= burn {
            visit(&s);
        }
    }
}

/// Mean and batch-means standard error of a correlated series.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let batches = 50;
    let size = xs.len() / batches;
    let bm: Vec<f64> = xs
        .chunks(size)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let var = bm.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

pub fn is_column_stochastic(a: &Mat, tol: f64) -> bool {
    a.as_slice().iter().all(|&v| v >= 0.0) && a.column_sums().iter().all(|s| (s - 1.0).abs() <= tol)
}
