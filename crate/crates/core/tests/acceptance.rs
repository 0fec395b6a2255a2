//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p sghmm-core --release --test acceptance` runs all of them;
//! pass criterion numbers after `--` to run a subset. The process exits 0
//! either way so that a FAIL line is reported rather than aborting the suite.

mod common;

use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sghmm::adaptivity::sequential_log_prob;
use sghmm::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    type Check = fn() -> Outcome;
    let checks: [(usize, f64, Check); 9] = [
        (1, 10.0, oracle_equivalence),
        (2, 30.0, gradient_correctness),
        (3, 10.0, exact_unbiasedness),
        (4, 120.0, buffer_decay),
        (5, 1800.0, predictive_ordering),
        (6, 1200.0, model_selection),
        (7, 600.0, speedup),
        (8, 300.0, sampler_sanity),
        (9, 60.0, adaptivity_units),
    ];
    let mut failed = 0;
    for (n, limit, check) in checks {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let out = check();
        let secs = t0.elapsed().as_secs_f64();
        let pass = out.pass && secs < limit;
        failed += usize::from(!pass);
        println!(
            "criterion {n}: {} ({secs:.1} s, limit {limit:.0} s): {}",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    println!("{failed} criteria failed");
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let k = 1 + (seed % 3) as usize;
        let t_len = if k == 3 {
            8 + (seed % 3) as usize
        } else {
            8 + (seed % 5) as usize
        };
        let (p, y) = random_instance(10_000 + seed, k, t_len);
        worst = worst.max(rel_err(
            log_marginal_likelihood(&p, &y).unwrap(),
            brute_log_marginal(&p, &y),
        ));

        let init = random_simplex(&mut rng(seed), k);
        for (from, to) in [(0, t_len), (2, t_len - 1)] {
            let fw = forward_predictive(&p, &y, from, to, &init).unwrap();
            let got: Vec<f64> = fw.prob.iter().map(|v| v.ln() + fw.log_norm).collect();
            worst = worst.max(rel_err_vec(&got, &brute_forward(&p, &y, from, to, &init)));
            let bw = backward_likelihood(&p, &y, from, to).unwrap();
            let got: Vec<f64> = bw.lik.iter().map(|v| v.ln() + bw.log_norm).collect();
            worst = worst.max(rel_err_vec(&got, &brute_backward(&p, &y, from, to)));
        }
        for h in 1..=4 {
            let t = (seed as usize * 7 + h) % (t_len - h + 1);
            let got = k_step_predictive(&p, &y, t, h).unwrap();
            worst = worst.max(rel_err(got, brute_k_step(&p, &y, t, h)));
        }
    }
    outcome(
        worst <= 1e-10,
        format!("200 instances, max rel err {worst:.2e} (tol 1e-10)"),
    )
}

fn gradient_prior(p: &Params) -> Prior<f64> {
    let emission = match p.emissions()[0].family() {
        Family::Gaussian => EmissionPrior::Gaussian {
            mean: Some((0.0, 10.0)),
            cov: Some(InverseWishart {
                df: p.obs_dim() as f64 + 3.0,
                scale: Mat::identity(p.obs_dim()),
            }),
        },
        Family::LogNormal => EmissionPrior::standard_lognormal(),
    };
    Prior {
        transition: TransitionPrior::Dirichlet { alpha: 2.0 },
        emission,
    }
}

fn column_scaled(p: &Params, seed: u64) -> Mat {
    let mut r = rng(seed ^ 0xa5);
    let k = p.num_states();
    let scale: Vec<f64> = (0..k).map(|_| r.random_range(0.3..3.0)).collect();
    Mat::from_fn(k, k, |i, j| p.transition()[(i, j)] * scale[j])
}

fn gradient_correctness() -> Outcome {
    let (mut full_worst, mut window_worst) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let k = 2 + (seed % 2) as usize;
        let (p, y) = random_instance(20_000 + seed, k, 9);
        let a_hat = column_scaled(&p, seed);
        let prior = gradient_prior(&p);
        let g = full_gradient(&p, &a_hat, &prior, &y, 1, false).unwrap();
        let fd = fd_gradient(&p, &a_hat, &prior, &y, 1e-5);
        full_worst = full_worst.max(rel_err_vec(&symmetrized_layout(&p, &g), &fd));

        let flat = Prior::flat();
        let fd = fd_gradient(&p, &a_hat, &flat, &y, 1e-5);
        let w = SubsequenceWindow::new(4, 4, 0);
        for boundary in [Boundary::Exact, Boundary::Buffered] {
            let mut got = transition_gradient_term(&p, &a_hat, &y, &w, boundary)
                .unwrap()
                .as_slice()
                .to_vec();
            for s in 0..k {
                let e = emission_gradient_term(&p, &y, &w, s, boundary).unwrap();
                got.extend(symmetrized_emission(p.obs_dim(), &e));
            }
            window_worst = window_worst.max(rel_err_vec(&got, &fd));
        }
    }
    outcome(
        full_worst <= 1e-6 && window_worst <= 1e-6,
        format!("50 instances, full gradient {full_worst:.2e}, window terms {window_worst:.2e} (tol 1e-6)"),
    )
}

fn exact_unbiasedness() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (t_len, l) in [(9, 1), (12, 1), (15, 1), (15, 2), (20, 2), (21, 1), (24, 1), (25, 2)] {
        for seed in 0..8u64 {
            let (p, y) = random_instance(30_000 + seed * 100 + t_len as u64, 2, t_len);
            let a_hat = column_scaled(&p, seed);
            let prior = gradient_prior(&p);
            let full = full_gradient(&p, &a_hat, &prior, &y, l, false).unwrap();
            let avg = weighted_window_average(&p, &a_hat, &prior, &y, l, Boundary::Exact)
                .expect("length is a multiple of the window");
            worst = worst.max(rel_err_vec(&flatten(&avg), &flatten(&full)));
            cases += 1;
        }
    }
    outcome(
        worst <= 1e-8,
        format!("{cases} cases with T <= 25, max rel err {worst:.2e} (tol 1e-8)"),
    )
}

struct DecayFit {
    exponent: f64,
    slope: f64,
    r2: f64,
    series: Vec<f64>,
    fitted: usize,
}

fn decay_fit(kind: DatasetKind, cov_scale: f64, l: usize) -> DecayFit {
    let base = dataset_params(kind);
    let em = base
        .emissions()
        .iter()
        .map(|e| match e {
            Emission::Gaussian(g) => {
                Emission::Gaussian(Gaussian::new(g.mean().to_vec(), g.cov().scale(cov_scale)).unwrap())
            }
            other => other.clone(),
        })
        .collect();
    let p = base.with_emissions(em).unwrap();
    let t_len = 100_000;
    let (y, _) = simulate(&p, t_len, 1).unwrap();
    let est = estimate_lyapunov(&p, &y, 50_000, 1).unwrap();

    let mut r = ChaCha8Rng::seed_from_u64(101);
    let taus: Vec<usize> = (0..300).map(|_| r.random_range(100..t_len - 100)).collect();
    let a_hat = p.transition().clone();
    let opts = |boundary| GradientOptions {
        boundary,
        parallel: false,
    };
    let term = |tau: usize, b: usize, boundary| {
        let batch = Minibatch::single(SubsequenceWindow::new(tau, l, b), t_len);
        window_terms(&p, &a_hat, &y, &batch, opts(boundary)).unwrap().remove(0)
    };
    let exact: Vec<_> = taus.par_iter().map(|&tau| term(tau, 0, Boundary::Exact)).collect();
    let series: Vec<f64> = (0..=12)
        .into_par_iter()
        .map(|b| {
            let total: f64 = taus
                .iter()
                .zip(&exact)
                .map(|(&tau, ex)| term(tau, b, Boundary::Buffered).max_abs_diff(ex))
                .sum();
            (total / taus.len() as f64).ln()
        })
        .collect();

    // Past the round-off floor the error stops carrying information.
    let scale = exact
        .iter()
        .map(|g| g.to_vec().iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .sum::<f64>()
        / exact.len() as f64;
    let floor = scale.ln() + 1e-10f64.ln();
    let fitted = series.iter().position(|&v| v < floor).unwrap_or(series.len()).max(2);
    let ys = &series[..fitted];
    let n = fitted as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = ys.iter().enumerate().map(|(x, y)| (x as f64 - mx) * (y - my)).sum();
    let sxx: f64 = (0..fitted).map(|x| (x as f64 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = ys
        .iter()
        .enumerate()
        .map(|(x, y)| (y - my - slope * (x as f64 - mx)).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    DecayFit {
        exponent: est.exponent,
        slope,
        r2: 1.0 - ss_res / ss_tot,
        series,
        fitted,
    }
}

fn buffer_decay() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, cov_scale, l) in [(DatasetKind::Dd, 100.0, 2), (DatasetKind::Rc, 16.0, 5)] {
        let f = decay_fit(kind, cov_scale, l);
        let ratio = f.slope / f.exponent;
        let ok = f.slope < 0.0
            && f.exponent < 0.0
            && f.series[f.fitted - 1] < f.series[0]
            && (1.0 / 3.0..=3.0).contains(&ratio);
        pass &= ok;
        parts.push(format!(
            "{kind} [{}]: exponent {:.3}, slope {:.3} over B=0..{}, ratio {ratio:.2}, R2 {:.3}",
            if ok { "ok" } else { "off" },
            f.exponent,
            f.slope,
            f.fitted - 1,
            f.r2
        ));
    }
    outcome(pass, parts.join("; "))
}

fn average_params(samples: &[TraceSample<f64>]) -> Params {
    let ps: Vec<Params> = samples.iter().map(|s| s.params.clone()).collect();
    posterior_mean(&ps).unwrap()
}

struct ArmResult {
    log_pred: f64,
    transition_error: f64,
}

fn ordering_runs(kind: DatasetKind, seed: u64) -> [ArmResult; 3] {
    let (l, count) = if kind == DatasetKind::Rc { (5, 4) } else { (2, 10) };
    let t_train = 50_000;
    let (y_all, truth) = make_dataset(kind, t_train + 5000, seed).unwrap();
    let y = y_all.slice(0, t_train).unwrap();
    let points = evaluation_points(t_train, y_all.len(), 10, 100).unwrap();
    let iters = 3000;
    let base = RunConfig::<f64> {
        num_states: 8,
        half_width: l,
        batch_count: count,
        step_size: 1e-4,
        emission_step_size: Some(1e-6),
        n_iter: iters,
        thin: 10,
        lyapunov_iters: 3000,
        reestimate_every: 100,
        seed,
        prior: default_prior(Family::Gaussian),
        ..RunConfig::default()
    };
    let init = kmeans_init(&y, 8, Family::Gaussian, 5000, seed).unwrap();
    let run = |cfg: &RunConfig<f64>| {
        let trace = run_sg_mcmc_from(&y, &init, cfg).unwrap();
        let pm = average_params(trace.tail(0.5));
        let perm = align_by_emissions(&pm, &truth).unwrap();
        let err = transition_error_with(pm.transition(), truth.transition(), &perm, NormKind::Frobenius).unwrap();
        let rep = predictive_report(&pm, &y_all, &points, 10, trace.wall_ms).unwrap();
        (
            trace.cost,
            ArmResult {
                log_pred: rep.mean,
                transition_error: err.error,
            },
        )
    };
    let (cost, buffered) = run(&RunConfig {
        buffer: BufferMode::Adaptive,
        ..base.clone()
    });
    let matched = RunConfig {
        buffer: BufferMode::None,
        n_iter: iters * 3,
        cost_budget: Some(cost),
        ..base.clone()
    };
    let (_, unbuffered) = run(&matched);
    let (_, iid) = run(&RunConfig {
        structure: Structure::Mixture,
        ..matched
    });
    [buffered, unbuffered, iid]
}

fn predictive_ordering() -> Outcome {
    let seeds = [1u64, 2, 3];
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [DatasetKind::Dd, DatasetKind::Rc] {
        let runs: Vec<[ArmResult; 3]> = seeds.par_iter().map(|&s| ordering_runs(kind, s)).collect();
        let mean =
            |arm: usize, f: fn(&ArmResult) -> f64| runs.iter().map(|r| f(&r[arm])).sum::<f64>() / runs.len() as f64;
        let lp: Vec<f64> = (0..3).map(|a| mean(a, |r| r.log_pred)).collect();
        let err: Vec<f64> = (0..3).map(|a| mean(a, |r| r.transition_error)).collect();
        let ok = lp[0] >= lp[1] && lp[1] > lp[2] && err[1] > err[0];
        pass &= ok;
        parts.push(format!(
            "{kind} [{}]: log pred buffered {:.3}, unbuffered {:.3}, iid {:.3}; transition error buffered {:.4}, unbuffered {:.4}",
            if ok { "ok" } else { "off" },
            lp[0],
            lp[1],
            lp[2],
            err[0],
            err[1]
        ));
    }
    outcome(pass, format!("seeds 1-3 at matched cost; {}", parts.join("; ")))
}

fn model_selection() -> Outcome {
    let (y_all, _) = make_dataset(DatasetKind::LogNormal, 22_000, 1).unwrap();
    let y_train = y_all.slice(0, 20_000).unwrap();
    let y_test = y_all.slice(20_000, 22_000).unwrap();
    let grid: Vec<(Family, usize)> = [Family::LogNormal, Family::Gaussian]
        .into_iter()
        .flat_map(|f| (1..=4).map(move |k| (f, k)))
        .collect();
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|&(family, k)| {
            let config = RunConfig::<f64> {
                num_states: k,
                family,
                step_size: 1e-4,
                emission_step_size: Some(1e-5),
                n_iter: 30_000,
                thin: 10,
                seed: 1,
                prior: default_prior(family),
                ..RunConfig::default()
            };
            let trace = run_sg_mcmc(&y_train, &config).unwrap();
            let samples: Vec<Params> = trace.tail(0.5).iter().map(|s| s.params.clone()).collect();
            model_selection_score(&y_test, &samples).unwrap()
        })
        .collect();
    let score = |f: Family, k: usize| scores[grid.iter().position(|&g| g == (f, k)).unwrap()];
    let best_k = (1..=4)
        .max_by(|&a, &b| score(Family::LogNormal, a).total_cmp(&score(Family::LogNormal, b)))
        .unwrap();
    let pass = best_k == 2 && score(Family::LogNormal, 2) > score(Family::Gaussian, 2);
    let row = |f: Family| {
        (1..=4)
            .map(|k| format!("K{k} {:.2}", score(f, k)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        pass,
        format!(
            "argmax K = {best_k}; lognormal {}; gaussian {}",
            row(Family::LogNormal),
            row(Family::Gaussian)
        ),
    )
}

fn ms_per_iteration(y: &Sequence, config: &RunConfig<f64>, batch: bool) -> f64 {
    let init = kmeans_init(y, config.num_states, config.family, 5000, config.seed).unwrap();
    let trace = if batch {
        run_batch_rld_from(y, &init, config).unwrap()
    } else {
        run_sg_mcmc_from(y, &init, config).unwrap()
    };
    trace.wall_ms / trace.iterations as f64
}

fn speedup_ratio(t_len: usize, batch_iters: usize) -> (f64, f64) {
    let (l, count, b) = (2, 10, 5);
    let (y, _) = make_dataset(DatasetKind::Segmentation, t_len, 1).unwrap();
    let config = RunConfig::<f64> {
        num_states: 3,
        half_width: l,
        batch_count: count,
        buffer: BufferMode::Fixed(b),
        gap: GapMode::Fixed(10),
        emission_step_size: Some(1e-6),
        n_iter: 2000,
        thin: 100,
        seed: 1,
        ..RunConfig::default()
    };
    let sg = ms_per_iteration(&y, &config, false);
    let batch = ms_per_iteration(
        &y,
        &RunConfig {
            n_iter: batch_iters,
            thin: 1,
            ..config
        },
        true,
    );
    let predicted = t_len as f64 / (count * (2 * l + 1 + 2 * b)) as f64;
    (batch / sg, predicted)
}

fn speedup() -> Outcome {
    let (desk, desk_pred) = speedup_ratio(50_000, 20);
    let (full, full_pred) = speedup_ratio(209_634, 5);
    let within = desk / desk_pred;
    let pass = (1.0 / 3.0..=3.0).contains(&within) && full > 100.0;
    outcome(
        pass,
        format!(
            "T=5e4: measured {desk:.0}x vs predicted {desk_pred:.0}x (factor {within:.2}); \
             T=209634: measured {full:.0}x (predicted {full_pred:.0}x, need > 100)"
        ),
    )
}

fn sampler_sanity() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, note: String| {
        pass &= ok;
        notes.push(note);
    };
    let close = |got: f64, want: f64| (got - want).abs() <= 0.05 * want.abs();

    let alpha = 2.0;
    let dirichlet = Prior {
        transition: TransitionPrior::Dirichlet { alpha },
        emission: EmissionPrior::Flat,
    };
    let start = HmmParams::with_uniform_start(
        Mat::filled(3, 3, 1.0 / 3.0),
        (0..3)
            .map(|i| Emission::Gaussian(Gaussian::isotropic(vec![i as f64], 1.0).unwrap()))
            .collect(),
    )
    .unwrap();
    let (mut entries, mut col) = (Vec::new(), Vec::new());
    prior_chain(&start, &dirichlet, 0.01, 200_000, 2_000, 1, |s| {
        entries.extend(s.a_hat.as_slice());
        col.push(s.params().unwrap().transition()[(0, 1)]);
    });
    let n = entries.len() as f64;
    let m = entries.iter().sum::<f64>() / n;
    let v = entries.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let c = col.iter().sum::<f64>() / col.len() as f64;
    check(
        close(m, alpha) && close(v, alpha) && close(c, 1.0 / 3.0),
        format!("Dirichlet mean {m:.3} var {v:.3} (want {alpha}), A col mean {c:.4}"),
    );

    let lognormal = Prior {
        transition: TransitionPrior::Flat,
        emission: EmissionPrior::standard_lognormal(),
    };
    let start = HmmParams::with_uniform_start(
        Mat::identity(1),
        vec![Emission::LogNormal(LogNormal::new(0.0, 1.0).unwrap())],
    )
    .unwrap();
    let (mut mu2, mut s1, mut s2, mut cnt) = (0.0, 0.0, 0.0, 0.0);
    prior_chain(&start, &lognormal, 0.01, 400_000, 5_000, 2, |s| {
        if let Emission::LogNormal(l) = &s.emissions[0] {
            mu2 += l.mu() * l.mu();
            s1 += l.sigma();
            s2 += l.sigma() * l.sigma();
            cnt += 1.0;
        }
    });
    let (mu2, s1, s2) = (mu2 / cnt, s1 / cnt, s2 / cnt);
    let want_s1 = (2.0 / std::f64::consts::PI).sqrt();
    check(
        close(mu2, 1.0) && close(s1, want_s1) && close(s2, 1.0),
        format!("log-normal E mu^2 {mu2:.3}, E sigma {s1:.3} (want {want_s1:.3}), E sigma^2 {s2:.3}"),
    );

    let (df, scale) = (6.0, 2.0);
    let iw = Prior {
        transition: TransitionPrior::Flat,
        emission: EmissionPrior::Gaussian {
            mean: Some((0.0, 1.0)),
            cov: Some(InverseWishart {
                df,
                scale: Mat::identity(1).scale(scale),
            }),
        },
    };
    let start = HmmParams::with_uniform_start(
        Mat::identity(1),
        vec![Emission::Gaussian(Gaussian::isotropic(vec![0.0], 1.0).unwrap())],
    )
    .unwrap();
    let mut covs = Vec::new();
    prior_chain(&start, &iw, 0.01, 400_000, 5_000, 3, |s| {
        if let Emission::Gaussian(g) = &s.emissions[0] {
            covs.push(g.cov()[(0, 0)]);
        }
    });
    let ec = covs.iter().sum::<f64>() / covs.len() as f64;
    let want = scale / (df - 2.0);
    check(
        close(ec, want),
        format!("inverse-Wishart E Sigma {ec:.3} (want {want:.3})"),
    );

    let truth = HmmParams::with_uniform_start(
        Mat::identity(1),
        vec![Emission::Gaussian(Gaussian::isotropic(vec![1.5], 0.8).unwrap())],
    )
    .unwrap();
    let (y, _) = simulate(&truth, 500, 9).unwrap();
    let ybar = y.as_slice().iter().sum::<f64>() / y.len() as f64;
    let trace = run_batch_rld(
        &y,
        &RunConfig {
            num_states: 1,
            step_size: 1e-3,
            emission_step_size: Some(2e-4),
            n_iter: 4000,
            seed: 4,
            ..RunConfig::default()
        },
    )
    .unwrap();
    let mus: Vec<f64> = trace
        .tail(0.9)
        .iter()
        .map(|s| s.params.emissions()[0].params_vec()[0])
        .collect();
    let (mu, se) = mean_and_se(&mus);
    check(
        (mu - ybar).abs() <= 3.0 * se,
        format!(
            "K=1 posterior mean {mu:.4} vs {ybar:.4} ({:.1} SE)",
            (mu - ybar).abs() / se
        ),
    );

    let property: Vec<(bool, f64)> = (0..40u64)
        .into_par_iter()
        .map(|seed| {
            let k = 1 + (seed % 3) as usize;
            let (_, y) = random_instance(40_000 + seed, k, 1500);
            let family = if seed % 2 == 0 && y.dim() == 1 && y.as_slice().iter().all(|&v| v > 0.0) {
                Family::LogNormal
            } else {
                Family::Gaussian
            };
            let config = RunConfig {
                num_states: k,
                family,
                batch_count: 5,
                step_size: 1e-3,
                emission_step_size: Some(1e-4),
                n_iter: 200,
                reestimate_every: 50,
                lyapunov_iters: 500,
                seed,
                ..RunConfig::default()
            };
            let trace = run_sg_mcmc(&y, &config).unwrap();
            let valid = trace.samples.iter().all(|s| {
                is_column_stochastic(s.params.transition(), 1e-9)
                    && s.params.emissions().iter().all(|e| match e {
                        Emission::Gaussian(g) => g.cov().is_positive_definite(),
                        Emission::LogNormal(l) => l.sigma() > 0.0,
                    })
            });
            (valid, trace.guard.min_noise_variance)
        })
        .collect();
    let min_var = property.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    check(
        property.iter().all(|p| p.0) && min_var >= 0.0,
        format!("40 random chains: all Sigma PD and A column-stochastic, min noise variance {min_var:.2e}"),
    );
    outcome(pass, notes.join("; "))
}

fn adaptivity_units() -> Outcome {
    let a = Mat::from_rows(&[vec![0.1, 0.9], vec![0.9, 0.1]]).unwrap();
    let nu = mixing_time(&a, 100_000).nu;
    let est = LyapunovEstimate {
        exponent: -1.0,
        n_samples: 1,
        std_error: 0.0,
    };
    let b = buffer_length(&est, 1e-3, 2.0, 100).buffer;

    let mut r = rng(9);
    let mut bad = 0;
    let mut configs = 0;
    while configs < 10_000 {
        let t_len = r.random_range(20..5000);
        let (l, buf, nu) = (r.random_range(0..8), r.random_range(0..8), r.random_range(1..12));
        let max = max_batch_count(t_len, l, buf, nu);
        if max == 0 {
            continue;
        }
        configs += 1;
        let count = r.random_range(1..=max.min(40));
        let batch = sample_minibatch(t_len, l, buf, nu, count, &mut r).unwrap();
        let gap = 2 * (l + buf) + nu;
        let centers: Vec<usize> = batch.windows.iter().map(|w| w.tau).collect();
        let spaced = centers
            .iter()
            .enumerate()
            .all(|(i, &c)| centers[..i].iter().all(|&d| c.abs_diff(d) >= gap));
        let in_range = batch.windows.iter().all(|w| w.tau >= l + buf && w.extent().1 <= t_len);
        let lp = sequential_log_prob(t_len, l, buf, nu, &centers);
        let inclusion = ((count * (2 * l + 1)) as f64 / t_len as f64).ln().min(0.0);
        let ok = spaced
            && in_range
            && batch.windows.len() == count
            && batch.log_prob == lp
            && lp <= 0.0
            && (batch.log_inclusion - inclusion).abs() < 1e-12;
        bad += usize::from(!ok);
    }
    let pass = nu == 5.0 && b == 8 && bad == 0;
    outcome(
        pass,
        format!("mixing time {nu}, buffer length {b}, {bad} of {configs} minibatch configs violate an invariant"),
    )
}
