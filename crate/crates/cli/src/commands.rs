use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use taxiswalk::em::{fit as em_fit, EmSettings, FitResult, StartOutcome, StartRecord};
use taxiswalk::explore::{
    critical_distance, distance_summary, fit_exp_mixture, interaction_trajectory,
    partition_diagnostics, MixtureSettings, SubsetSummary,
};
use taxiswalk::filter::posterior;
use taxiswalk::hidden::behavior_stationary;
use taxiswalk::inference::{decode_states, infer, InferenceReport};
use taxiswalk::io::{
    csv_bytes, format_f64, read_trajectory, write_atomic, write_trajectory, AngleUnits, RunConfig,
    TrajectoryTable,
};
use taxiswalk::model::{validate, ModelSpec, Params, Trajectory, Transition, DEFAULT_TRUNCATION};
use taxiswalk::simulate::simulate_trajectory;
use taxiswalk::{Error, Result};

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn simulate(
    config: &Path,
    reps: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
    degrees: bool,
) -> Result<()> {
    if reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.em_settings().seed);
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let scenario = cfg.simulation.clone().unwrap_or_default().scenario_config();
    let spec = cfg.model_spec_for(1)?;
    scenario.check(&spec)?;
    let name = match cfg.model.targets.as_slice() {
        [] => "target".to_string(),
        [one] => one.clone(),
        more => {
            return Err(Error::Config(format!(
                "simulation uses a single target, config names {}",
                more.len()
            )))
        }
    };
    let units = if degrees {
        AngleUnits::Degrees
    } else {
        AngleUnits::Radians
    };
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut track = simulate_trajectory(&scenario, &spec, &mut rng)?;
        if track.truncated {
            warn!(
                "replicate {} stopped at max_steps before reaching the target",
                r + 1
            );
        }
        track.trajectory.target_names = vec![name.clone()];
        let path = out.join(format!("sim_{:04}.csv", r + 1));
        write_trajectory(&path, &TrajectoryTable::from_simulation(&track), units)?;
        info!(
            "wrote {} ({} steps)",
            path.display(),
            track.trajectory.steps.len()
        );
    }
    #[derive(Serialize)]
    struct Truth<'a> {
        seed: u64,
        reps: usize,
        spec: &'a ModelSpec,
        scenario: &'a taxiswalk::simulate::ScenarioConfig,
    }
    write_atomic(
        &out.join("truth.json"),
        &json_bytes(&Truth {
            seed,
            reps,
            spec: &spec,
            scenario: &scenario,
        })?,
    )
}

#[derive(Serialize)]
struct FitOutput<'a> {
    data: String,
    spec: &'a ModelSpec,
    settings: &'a EmSettings,
    params: &'a Params,
    loglik: f64,
    first_pass_loglik: Option<f64>,
    n_iters: usize,
    converged: bool,
    stationary: Option<Vec<f64>>,
    inference: Option<&'a InferenceReport>,
    inference_error: Option<String>,
    multistart_audit: &'a [StartRecord],
}

pub fn fit(
    data: &Path,
    units: AngleUnits,
    from_positions: bool,
    config: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let table = read_trajectory(data, units, from_positions)?;
    let (traj, spec) = cfg.prepare(&table.trajectory)?;
    let settings = cfg.em_settings();
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());

    let result = em_fit(&spec, &traj, &settings)?;
    let (report, inference_error) = match infer(&result.params, &spec, &traj) {
        Ok(r) => (Some(r), None),
        Err(e) => {
            warn!("standard errors unavailable: {e}");
            (None, Some(e.to_string()))
        }
    };
    let stationary = behavior_stationary(&spec, &result.params).ok();

    let machine = FitOutput {
        data: data.display().to_string(),
        spec: &spec,
        settings: &settings,
        params: &result.params,
        loglik: result.loglik,
        first_pass_loglik: result.first_pass_loglik,
        n_iters: result.n_iters,
        converged: result.converged,
        stationary: stationary.clone(),
        inference: report.as_ref(),
        inference_error: inference_error.clone(),
        multistart_audit: &result.multistart_audit,
    };
    write_atomic(&out.join("fit.json"), &json_bytes(&machine)?)?;
    write_atomic(&out.join("params.json"), &json_bytes(&result.params)?)?;
    write_atomic(
        &out.join("multistart.csv"),
        &audit_csv(&result.multistart_audit)?,
    )?;
    let text = fit_text(
        data,
        &traj,
        &spec,
        &result,
        report.as_ref(),
        inference_error.as_deref(),
        stationary.as_deref(),
    );
    write_atomic(&out.join("fit.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn audit_csv(audit: &[StartRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &["start", "loglik", "outcome", "detail"],
        audit.iter().map(|r| {
            let (outcome, detail) = match &r.outcome {
                StartOutcome::Kept => ("kept", String::new()),
                StartOutcome::Selected => ("selected", String::new()),
                StartOutcome::ScreenedStationary { min_stationary } => (
                    "screened-stationary",
                    format!("min_stationary={min_stationary}"),
                ),
                StartOutcome::ScreenedKappa { max_abs_kappa } => {
                    ("screened-kappa", format!("max_abs_kappa={max_abs_kappa}"))
                }
                StartOutcome::Failed { message } => ("failed", message.clone()),
            };
            vec![
                (r.index + 1).to_string(),
                r.loglik.map(format_f64).unwrap_or_default(),
                outcome.to_string(),
                detail,
            ]
        }),
    )
}

fn fit_text(
    data: &Path,
    traj: &Trajectory,
    spec: &ModelSpec,
    result: &FitResult,
    report: Option<&InferenceReport>,
    inference_error: Option<&str>,
    stationary: Option<&[f64]>,
) -> String {
    let mut s = String::new();
    let kind = if spec.is_semi_markov() {
        "semi-Markov"
    } else {
        "Markov"
    };
    let _ = writeln!(s, "data: {}", data.display());
    let _ = writeln!(
        s,
        "model: {} states, {kind}, targets {:?}",
        spec.n_states, traj.target_names
    );
    let _ = writeln!(s, "modelled steps: {}", traj.n_modelled());
    let _ = writeln!(
        s,
        "log-likelihood: {:.4} (first pass {:.4}), {} EM iterations, converged: {}",
        result.loglik,
        result.first_pass_loglik.unwrap_or(f64::NAN),
        result.n_iters,
        result.converged
    );
    let screened = result
        .multistart_audit
        .iter()
        .filter(|r| {
            matches!(
                r.outcome,
                StartOutcome::ScreenedKappa { .. } | StartOutcome::ScreenedStationary { .. }
            )
        })
        .count();
    let failed = result
        .multistart_audit
        .iter()
        .filter(|r| matches!(r.outcome, StartOutcome::Failed { .. }))
        .count();
    let _ = writeln!(
        s,
        "starts: {} ({} screened, {} failed)",
        result.multistart_audit.len(),
        screened,
        failed
    );
    if let Some(nu) = stationary {
        let probs: Vec<String> = nu.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(s, "stationary distribution: {}", probs.join(" "));
    }
    match report {
        Some(r) => {
            let _ = writeln!(
                s,
                "AIC: {:.3}  BIC: {:.3}  (k = {}, n = {})",
                r.aic, r.bic, r.n_params, r.n_obs
            );
            if !r.positive_definite {
                let _ = writeln!(s, "warning: observed information is not positive definite");
            }
            let _ = writeln!(s, "condition number: {:.3e}", r.condition_number);
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<14} {:>12} {:>12} {:>12} {:>12}",
                "parameter", "estimate", "std.error", "lower95", "upper95"
            );
            for (p, (lo, hi)) in r.parameters.iter().zip(r.wald_ci(0.95)) {
                let _ = writeln!(
                    s,
                    "{:<14} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
                    p.name, p.estimate, p.std_error, lo, hi
                );
            }
        }
        None => {
            let _ = writeln!(
                s,
                "standard errors unavailable: {}",
                inference_error.unwrap_or("unknown error")
            );
        }
    }
    s
}

fn load_params(path: &Path) -> Result<Params> {
    let text = std::fs::read_to_string(path)?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(inner) = value.get_mut("params") {
        value = inner.take();
    }
    Ok(serde_json::from_value(value)?)
}

fn spec_from_params(params: &Params, n_targets: usize) -> ModelSpec {
    match &params.transition {
        Transition::Matrix(_) => ModelSpec::markov(params.n_states(), n_targets),
        Transition::Dwell(_) => {
            ModelSpec::semi_markov(n_targets, [DEFAULT_TRUNCATION, DEFAULT_TRUNCATION])
        }
    }
}

pub fn decode(
    data: &Path,
    units: AngleUnits,
    from_positions: bool,
    params_path: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let table = read_trajectory(data, units, from_positions)?;
    let params = load_params(params_path)?;
    let (traj, spec) = match config {
        Some(c) => RunConfig::load(c)?.prepare(&table.trajectory)?,
        None => {
            let p = params
                .kappa
                .first()
                .map_or(0, |k| k.len().saturating_sub(1));
            if p != table.trajectory.n_targets() {
                return Err(Error::Config(format!(
                    "parameters use {p} targets but the data has {}; pass --config to select targets",
                    table.trajectory.n_targets()
                )));
            }
            let spec = spec_from_params(&params, p);
            (table.trajectory.clone(), spec)
        }
    };
    validate(&spec, &params, Some(&traj)).into_result()?;
    let post = posterior(&params, &spec, &traj)?;
    let decoding = decode_states(&post.summary);
    let k = spec.n_states;
    let mut header = vec!["t".to_string()];
    header.extend((1..=k).map(|j| format!("p_{j}")));
    header.push("state".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = decoding
        .probabilities
        .iter()
        .zip(&decoding.labels)
        .enumerate()
        .map(|(i, (probs, label))| {
            let mut row = vec![format_f64(table.times[i + 1])];
            row.extend(probs.iter().map(|&v| format_f64(v)));
            row.push((label + 1).to_string());
            row
        });
    write_atomic(out, &csv_bytes(&header, rows)?)?;
    info!("log-likelihood {:.6}", post.summary.loglik);
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

fn subset_row(name: &str, s: &SubsetSummary) -> Vec<String> {
    vec![
        name.to_string(),
        s.count.to_string(),
        opt(s.summary.as_ref().map(|c| c.mean_direction)),
        opt(s.summary.as_ref().map(|c| c.resultant_length)),
        opt(s.kuiper_v),
        opt(s.kuiper_p),
    ]
}

pub fn explore(
    data: &Path,
    units: AngleUnits,
    from_positions: bool,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let table = read_trajectory(data, units, from_positions)?;
    let traj = &table.trajectory;

    let ds = distance_summary(traj);
    write_atomic(
        &out.join("distances.csv"),
        &csv_bytes(
            &["n", "min", "q1", "median", "mean", "q3", "max"],
            [vec![
                ds.n.to_string(),
                format_f64(ds.min),
                format_f64(ds.q1),
                format_f64(ds.median),
                format_f64(ds.mean),
                format_f64(ds.q3),
                format_f64(ds.max),
            ]],
        )?,
    )?;

    let distances: Vec<f64> = traj.steps.iter().skip(1).map(|s| s.distance).collect();
    let mixture = fit_exp_mixture(
        &distances,
        &MixtureSettings {
            seed,
            ..Default::default()
        },
    )?;
    let d_crit = critical_distance(&mixture);
    write_atomic(
        &out.join("mixture.csv"),
        &csv_bytes(
            &[
                "component",
                "weight",
                "rate",
                "mean_length",
                "critical_distance",
                "loglik",
            ],
            (0..2).map(|j| {
                vec![
                    (j + 1).to_string(),
                    format_f64(mixture.weights[j]),
                    format_f64(mixture.rates[j]),
                    format_f64(1.0 / mixture.rates[j]),
                    format_f64(d_crit),
                    format_f64(mixture.loglik),
                ]
            }),
        )?,
    )?;

    let part = partition_diagnostics(traj, d_crit);
    write_atomic(
        &out.join("partition.csv"),
        &csv_bytes(
            &[
                "subset",
                "count",
                "mean_direction",
                "resultant_length",
                "kuiper_v",
                "kuiper_p",
            ],
            [
                subset_row("short", &part.short),
                subset_row("long", &part.long),
            ],
        )?,
    )?;

    match interaction_fit(traj, d_crit, seed) {
        Ok(report) => write_atomic(
            &out.join("interaction.csv"),
            &csv_bytes(
                &["parameter", "estimate", "std_error"],
                report.parameters.iter().map(|p| {
                    vec![
                        p.name.clone(),
                        format_f64(p.estimate),
                        format_f64(p.std_error),
                    ]
                }),
            )?,
        )?,
        Err(e) => warn!("single-state interaction fit skipped: {e}"),
    }

    println!(
        "critical distance {:.4}; short steps {}, long steps {}",
        d_crit, part.short.count, part.long.count
    );
    Ok(())
}

/// One-state model whose coefficients differ between short and long steps.
/// Parameter names are rewritten to the covariate names.
fn interaction_fit(traj: &Trajectory, d_crit: f64, seed: u64) -> Result<InferenceReport> {
    let itraj = interaction_trajectory(traj, d_crit)?;
    let spec = ModelSpec::markov(1, itraj.n_targets());
    let settings = EmSettings {
        n_starts: 4,
        seed,
        ..Default::default()
    };
    let fit = em_fit(&spec, &itraj, &settings)?;
    let mut report = infer(&fit.params, &spec, &itraj)?;
    report.parameters.retain(|p| !p.name.starts_with("p["));
    for p in &mut report.parameters {
        if p.name.starts_with("lambda") {
            p.name = "lambda".into();
        }
        if let Some(j) = p
            .name
            .strip_prefix("kappa")
            .and_then(|r| r.split('[').next())
            .and_then(|j| j.parse::<usize>().ok())
        {
            p.name = if j == 0 {
                "persistence".into()
            } else {
                itraj.target_names[j - 1].clone()
            };
        }
    }
    Ok(report)
}
