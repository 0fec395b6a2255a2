use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sghmm::{
    align_by_emissions, buffer_length, default_prior, estimate_lyapunov, evaluation_points, kmeans_init, make_dataset,
    mixing_time, model_selection_score, posterior_mean, predictive_report, run_batch_rld_observed, run_sg_mcmc,
    run_sg_mcmc_observed, transition_error_with, Error, Family, HmmParams, NormKind, ObservationSequence, Result,
    RunConfig, Structure, Trace, TraceSample,
};

use crate::io::{self, Manifest};
use crate::{EvalArgs, FitArgs, GenerateArgs, LyapunovArgs, Method, SamplerFlags, SeqFormat};

fn to_value<S: Serialize>(v: &S) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    if a.t == 0 {
        return Err(Error::Config("--T must be positive".into()));
    }
    let (y, truth) = make_dataset(a.kind, a.t, a.seed)?;
    let data = a.out.join(match a.format {
        SeqFormat::Bin => "data.bin",
        SeqFormat::Csv => "data.csv",
    });
    match a.format {
        SeqFormat::Bin => io::write_sequence(&data, &y)?,
        SeqFormat::Csv => {
            let rows: Vec<Vec<String>> = y.iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
            let header: Vec<String> = (0..y.dim()).map(|i| format!("y{i}")).collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            io::write_table(&data, &header, &rows)?;
        }
    }
    let truth_path = a.out.join("truth.json");
    io::write_json(&truth_path, &truth)?;
    let mut m = Manifest::new("generate", to_value(a));
    m.output(&data)?;
    m.output(&truth_path)?;
    m.write(&a.out)?;
    for f in &m.outputs {
        println!("{}  {}", f.hash, f.path.display());
    }
    Ok(())
}

/// Library defaults, overlaid by the config file, overlaid by flags. The
/// prior follows the family unless the file sets one.
pub fn build_config(flags: &SamplerFlags, k: Option<usize>) -> Result<RunConfig<f64>> {
    let file: Value = match &flags.config {
        None => json!({}),
        Some(p) => read_config_file(p)?,
    };
    let has_prior = file.get("prior").is_some();
    let mut cfg: RunConfig<f64> = serde_json::from_value(file).map_err(|e| Error::Config(format!("config: {e}")))?;
    if let Some(v) = k {
        cfg.num_states = v;
    }
    if let Some(v) = flags.family {
        cfg.family = v;
    }
    if let Some(v) = flags.half_width {
        cfg.half_width = v;
    }
    if let Some(v) = flags.batch_count {
        cfg.batch_count = v;
    }
    if let Some(v) = flags.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = flags.emission_step_size {
        cfg.emission_step_size = Some(v);
    }
    if let Some(v) = flags.n_iter {
        cfg.n_iter = v;
    }
    if let Some(v) = flags.n_steps {
        cfg.n_steps = v;
    }
    if let Some(v) = flags.buffer {
        cfg.buffer = v;
    }
    if let Some(v) = flags.gap {
        cfg.gap = v;
    }
    if let Some(v) = flags.thin {
        cfg.thin = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    cfg.parallel |= flags.parallel;
    if !has_prior {
        cfg.prior = default_prior(cfg.family);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    if path.extension().is_some_and(|e| e == "toml") {
        let v: toml::Value = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        serde_json::to_value(v).map_err(|e| bad(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

fn split(y: &ObservationSequence<f64>, holdout: f64, horizon: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::Config(format!("holdout must lie in [0, 1), got {holdout}")));
    }
    let n_train = ((1.0 - holdout) * y.len() as f64).round() as usize;
    if holdout > 0.0 && (y.len() < n_train + horizon || n_train == y.len()) {
        return Err(Error::Config(format!(
            "held-out tail of {} observations is shorter than the horizon {horizon}",
            y.len() - n_train
        )));
    }
    Ok(n_train)
}

fn sample_params(samples: &[TraceSample<f64>]) -> Vec<HmmParams<f64>> {
    samples.iter().map(|s| s.params.clone()).collect()
}

fn progress(label: &str, total: usize) -> impl FnMut(&TraceSample<f64>) + '_ {
    let stride = (total / 10).max(1);
    let mut next = 0;
    move |s| {
        if s.iteration >= next || s.iteration + 1 == total {
            eprintln!(
                "[{label}] iter {}/{total}  {:.0} ms  cost {}",
                s.iteration + 1,
                s.wall_ms,
                s.cost
            );
            next = (s.iteration / stride + 1) * stride;
        }
    }
}

fn run_method(
    method: Method,
    y: &ObservationSequence<f64>,
    cfg: &RunConfig<f64>,
    observer: &mut dyn FnMut(&TraceSample<f64>),
) -> Result<Trace<f64>> {
    let cfg = match method {
        Method::Iid => RunConfig {
            structure: Structure::Mixture,
            ..cfg.clone()
        },
        _ => cfg.clone(),
    };
    let init = kmeans_init(y, cfg.num_states, cfg.family, cfg.kmeans_subsample, cfg.seed)?;
    match method {
        Method::Batch => run_batch_rld_observed(y, &init, &cfg, observer),
        Method::Sg | Method::Iid => run_sg_mcmc_observed(y, &init, &cfg, observer),
    }
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let cfg = build_config(&a.sampler, a.k)?;
    let y_all = io::read_sequence(&a.data)?;
    let n_train = split(&y_all, a.holdout, a.horizon)?;
    let y = y_all.slice(0, n_train)?;
    let truth = a.truth.as_deref().map(io::read_params).transpose()?;

    let mut observer = progress("fit", cfg.n_iter);
    let mut trace = run_method(a.method, &y, &cfg, &mut observer)?;

    let points = if a.holdout > 0.0 {
        Some(evaluation_points(n_train, y_all.len(), a.horizon, a.eval_points)?)
    } else {
        None
    };
    let score = |p: &HmmParams<f64>| -> Result<f64> {
        let pts = points.as_ref().expect("holdout set");
        Ok(predictive_report(p, &y_all, pts, a.horizon, 0.0)?.mean)
    };
    if points.is_some() {
        let n = trace.samples.len();
        let scored: Vec<usize> = if a.emit_plot_data {
            (0..n).collect()
        } else {
            n.checked_sub(1).into_iter().collect()
        };
        let values = scored
            .par_iter()
            .map(|&i| score(&trace.samples[i].params))
            .collect::<Result<Vec<f64>>>()?;
        for (i, v) in scored.into_iter().zip(values) {
            trace.samples[i].log_pred = Some(v);
        }
    }

    let mean = if trace.is_empty() {
        None
    } else {
        Some(posterior_mean(&sample_params(trace.tail(0.5)))?)
    };
    let mean_log_pred = match (&points, &mean) {
        (Some(_), Some(m)) => Some(score(m)?),
        _ => None,
    };

    let out = &a.out;
    let paths = [
        out.join("trace.ndjson"),
        out.join("summary.csv"),
        out.join("epochs.csv"),
        out.join("posterior_mean.json"),
        out.join("fit.json"),
    ];
    io::write_trace_ndjson(&paths[0], &trace.samples)?;
    io::write_trace_summary(&paths[1], &trace.samples)?;
    io::write_epochs(&paths[2], &trace.epochs)?;
    match &mean {
        Some(m) => io::write_json(&paths[3], m)?,
        None => io::write_json(&paths[3], &Value::Null)?,
    }
    let last_epoch = trace.epochs.last();
    let summary = json!({
        "method": a.method,
        "iterations": trace.iterations,
        "samples": trace.samples.len(),
        "wall_ms": trace.wall_ms,
        "ms_per_iteration": if trace.iterations > 0 { trace.wall_ms / trace.iterations as f64 } else { 0.0 },
        "cost": trace.cost,
        "epochs": trace.epochs.len(),
        "buffer": last_epoch.map(|e| e.buffer),
        "nu": last_epoch.map(|e| e.nu),
        "guard": trace.guard,
        "train_len": n_train,
        "posterior_mean_log_pred": mean_log_pred,
    });
    io::write_json(&paths[4], &summary)?;

    let mut m = Manifest::new("fit", json!({ "args": to_value(a), "run": to_value(&cfg) }));
    m.input(&a.data)?;
    if let Some(c) = &a.sampler.config {
        m.input(c)?;
    }
    if let Some(t) = &a.truth {
        m.input(t)?;
    }
    if a.emit_plot_data {
        let curve = out.join("curve.csv");
        let rows = trace
            .samples
            .iter()
            .map(|s| {
                let err = match &truth {
                    Some(t) => {
                        let perm = align_by_emissions(&s.params, t)?;
                        transition_error_with(s.params.transition(), t.transition(), &perm, NormKind::Frobenius)?
                            .error
                            .to_string()
                    }
                    None => String::new(),
                };
                Ok(vec![
                    s.iteration.to_string(),
                    format!("{:.3}", s.wall_ms),
                    s.cost.to_string(),
                    s.log_pred.map_or(String::new(), |v| v.to_string()),
                    err,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        io::write_table(
            &curve,
            &["iteration", "wall_ms", "cost", "log_pred", "transition_error"],
            &rows,
        )?;
        m.output(&curve)?;
    }
    for p in &paths {
        m.output(p)?;
    }
    m.write(out)?;
    print_json(&summary);
    Ok(())
}

/// Parameters JSON, or the tail average of a trace NDJSON. Returns the
/// trace's wall time alongside.
fn load_estimate(path: &Path, tail: f64) -> Result<(HmmParams<f64>, f64)> {
    if path.extension().is_some_and(|e| e == "ndjson") {
        let samples = io::read_trace_ndjson(path)?;
        if samples.is_empty() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "trace has no samples".into(),
            });
        }
        let from = ((1.0 - tail.clamp(0.0, 1.0)) * samples.len() as f64).floor() as usize;
        let from = from.min(samples.len() - 1);
        let wall = samples.last().map_or(0.0, |s| s.wall_ms);
        Ok((posterior_mean(&sample_params(&samples[from..]))?, wall))
    } else {
        Ok((io::read_params(path)?, 0.0))
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.model_select {
        return model_select(a);
    }
    let source = a
        .trace
        .as_deref()
        .or(a.params.as_deref())
        .ok_or_else(|| Error::Config("eval needs --trace or --params".into()))?;
    let y = io::read_sequence(&a.data)?;
    let (est, wall_ms) = load_estimate(source, a.tail)?;
    let label = a.label.clone().unwrap_or_else(|| {
        source
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "estimate".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let mut m = Manifest::new("eval", to_value(a));
    m.input(&a.data)?;
    m.input(source)?;

    let mut metrics: Vec<(&str, f64)> = Vec::new();
    if a.holdout > 0.0 {
        let n_train = split(&y, a.holdout, a.horizon)?;
        let points = evaluation_points(n_train, y.len(), a.horizon, a.eval_points)?;
        let rep = predictive_report(&est, &y, &points, a.horizon, wall_ms)?;
        metrics.push(("log_pred_mean", rep.mean));
        metrics.push(("log_pred_se", rep.se));
    }
    if let Some(r) = &a.reference {
        let (reference, _) = load_estimate(r, a.tail)?;
        m.input(r)?;
        let perm = align_by_emissions(&est, &reference)?;
        metrics.push((
            "transition_error_frobenius",
            transition_error_with(est.transition(), reference.transition(), &perm, NormKind::Frobenius)?.error,
        ));
        metrics.push((
            "transition_error_max",
            transition_error_with(est.transition(), reference.transition(), &perm, NormKind::MaxAbs)?.error,
        ));
    }
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|(k, v)| vec![label.clone(), format!("{wall_ms:.3}"), k.to_string(), v.to_string()])
        .collect();
    let path = a.out.join("metrics.csv");
    io::write_table(&path, &["method", "wall_ms", "metric", "value"], &rows)?;
    m.output(&path)?;
    m.write(&a.out)?;
    for r in &rows {
        println!("{}", r.join(","));
    }
    Ok(())
}

fn model_select(a: &EvalArgs) -> Result<()> {
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(Error::Config("--K needs positive state counts".into()));
    }
    let y_all = io::read_sequence(&a.data)?;
    if a.holdout <= 0.0 {
        return Err(Error::Config("model selection needs --holdout > 0".into()));
    }
    let n_train = split(&y_all, a.holdout, 0)?;
    let y_train = y_all.slice(0, n_train)?;
    let y_test = y_all.slice(n_train, y_all.len())?;
    let families: Vec<Family> = if a.families.is_empty() {
        vec![build_config(&a.sampler, None)?.family]
    } else {
        a.families.clone()
    };
    let grid: Vec<(Family, usize)> = families
        .iter()
        .flat_map(|&f| a.ks.iter().map(move |&k| (f, k)))
        .collect();
    let configs = grid
        .iter()
        .map(|&(f, k)| {
            let flags = SamplerFlags {
                family: Some(f),
                ..a.sampler.clone()
            };
            build_config(&flags, Some(k))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = grid
        .par_iter()
        .zip(&configs)
        .map(|(&(f, k), cfg)| {
            let t0 = Instant::now();
            let tag = |e: Error| e.context(format!("{f} K={k}"));
            let trace = run_sg_mcmc(&y_train, cfg).map_err(tag)?;
            let score = model_selection_score(&y_test, &sample_params(trace.tail(a.tail))).map_err(tag)?;
            eprintln!(
                "[model-select] {f} K={k}: {score:.3} ({:.0} ms)",
                t0.elapsed().as_secs_f64() * 1e3
            );
            Ok(score)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut rows = Vec::new();
    for &f in &families {
        let mut fam: Vec<(usize, f64)> = grid
            .iter()
            .zip(&scores)
            .filter(|((g, _), _)| *g == f)
            .map(|((_, k), s)| (*k, *s))
            .collect();
        fam.sort_by(|x, y| y.1.total_cmp(&x.1));
        for (rank, (k, s)) in fam.into_iter().enumerate() {
            rows.push(vec![
                f.to_string(),
                k.to_string(),
                s.to_string(),
                (rank + 1).to_string(),
            ]);
        }
    }
    let path = a.out.join("model_selection.csv");
    io::write_table(&path, &["family", "K", "score", "rank"], &rows)?;
    let mut m = Manifest::new("eval", json!({ "args": to_value(a), "runs": to_value(&configs) }));
    m.input(&a.data)?;
    if let Some(c) = &a.sampler.config {
        m.input(c)?;
    }
    m.output(&path)?;
    m.write(&a.out)?;
    println!("family,K,score,rank");
    for r in &rows {
        println!("{}", r.join(","));
    }
    Ok(())
}

pub fn lyapunov(a: &LyapunovArgs) -> Result<()> {
    let y = io::read_sequence(&a.data)?;
    let params = io::read_params(&a.params)?;
    let est = estimate_lyapunov(&params, &y, a.n_iter, a.seed)?;
    let policy = buffer_length(&est, a.delta, a.delta0, a.b_max);
    let mix = mixing_time(params.transition(), y.len());
    let report = json!({
        "exponent": est.exponent,
        "std_error": est.std_error,
        "n_samples": est.n_samples,
        "B": policy.buffer,
        "buffer_warning": policy.warning,
        "nu": mix.nu,
        "gap": mix.gap(),
        "nu_capped": mix.capped,
    });
    if let Some(out) = &a.out {
        let path = out.join("lyapunov.json");
        io::write_json(&path, &report)?;
        let mut m = Manifest::new("lyapunov", to_value(a));
        m.input(&a.data)?;
        m.input(&a.params)?;
        m.output(&path)?;
        m.write(out)?;
    }
    print_json(&report);
    Ok(())
}
