//! Implementations of the `koopman` CLI commands: config-driven fit,
//! predict, compare, analyze, and datagen runs producing model files, CSV
//! tables, and logs.
//!
//! Exit-code contract: 0 success, 2 solver failure, 3 configuration or data
//! error. All tabular outputs are deterministic for a fixed config and seed;
//! wall-clock timings go to `timings.log` (and the `wall_ms` column of the
//! BMI iteration log).

use crate::analysis::{self, bode_data, compare_models, model_report, predict_multistep};
use crate::config::{AnalysisConfig, ExperimentConfig};
use crate::constrained::{
    fit_hinf_regularized, fit_stability_constrained, BmiIterationLog, BmiOptions, HinfOptions,
};
use crate::datagen;
use crate::dmdc::{
    dmdc_closed_form, dmdc_lmi, fit_dmdc_constrained, full_rank_til, optimal_hard_threshold,
    DmdcConstraint,
};
use crate::error::{Error, Result};
use crate::lifting::LiftingPipeline;
use crate::lti::{self, hinf_norm, highpass_weight};
use crate::regressors::{edmd_closed_form, edmd_lmi, tikhonov, Basis, KoopmanModel};
use crate::sdp::SolveSettings;
use crate::snapshots::{build_snapshots, format_float, load_episodes, save_episodes, Dataset};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Map an error to the CLI exit code: solver-side failures give 2,
/// everything else (config, schema, data, dimension mismatches) gives 3.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Solver(_) | Error::InfeasibleStep(_) | Error::Bracket(_) | Error::Build(_) => 2,
        _ => 3,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Load or generate the dataset named by the config (seed already resolved).
pub fn resolve_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match config.data.source.as_str() {
        "file" => {
            let path = config
                .data
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is required".into()))?;
            load_episodes(path, &config.data.schema())
        }
        "synthetic" => {
            let mut spec = config
                .data
                .synthetic
                .clone()
                .ok_or_else(|| Error::Config("[data.synthetic] is required".into()))?;
            if let Some(seed) = config.seed {
                spec.seed = seed;
            }
            datagen::generate(&spec)
        }
        other => Err(Error::Config(format!("unknown data.source '{other}'"))),
    }
}

fn split_dataset(config: &ExperimentConfig, dataset: &Dataset) -> (Dataset, Dataset) {
    let test_ids = &config.split.test_episodes;
    if config.split.train_episodes.is_empty() {
        let (test, train) = dataset.split(test_ids);
        (train, test)
    } else {
        let (train, _) = dataset.split(&config.split.train_episodes);
        let (test, _) = dataset.split(test_ids);
        (train, test)
    }
}

fn solve_settings(config: &ExperimentConfig) -> SolveSettings {
    SolveSettings {
        max_iter: config.solver.max_iter,
        tol: config.solver.tol,
        time_limit_s: config.solver.time_limit_s,
        verbose: config.solver.verbose,
        margin_coeff: config.solver.margin_coeff,
    }
}

fn bmi_options(config: &ExperimentConfig) -> BmiOptions {
    BmiOptions {
        tol: config.solver.bmi_tol,
        max_iter: config.solver.bmi_max_iter,
        solver: solve_settings(config),
    }
}

fn resolve_ranks(
    config: &ExperimentConfig,
    snap: &crate::snapshots::SnapshotMatrices,
) -> Result<(usize, usize)> {
    let r_til = if config.regression.r_til == 0 {
        full_rank_til(snap)
    } else {
        config.regression.r_til
    };
    let r_hat = if config.regression.r_hat == 0 {
        let sv: Vec<f64> = snap
            .theta_plus
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect();
        optimal_hard_threshold(&sv, snap.p_theta, snap.q)?.max(1)
    } else {
        config.regression.r_hat
    };
    Ok((r_hat, r_til))
}

struct FitOutcome {
    model: KoopmanModel,
    log: Option<BmiIterationLog>,
    gamma: Option<f64>,
}

fn run_regression(
    config: &ExperimentConfig,
    snap: &crate::snapshots::SnapshotMatrices,
) -> Result<FitOutcome> {
    let settings = solve_settings(config);
    let bmi = bmi_options(config);
    let weight = match &config.regression.weight {
        None => None,
        Some(w) => Some(highpass_weight(w.f_zero_hz, w.f_pole_hz, snap.dt)?),
    };
    let outcome = match config.regression.method.as_str() {
        "edmd" => FitOutcome {
            model: edmd_closed_form(snap),
            log: None,
            gamma: None,
        },
        "edmd-lmi" => FitOutcome {
            model: edmd_lmi(snap, &settings)?,
            log: None,
            gamma: None,
        },
        "tikhonov" => FitOutcome {
            model: tikhonov(snap, config.regression.alpha)?,
            log: None,
            gamma: None,
        },
        "stability" => {
            let (model, log) = fit_stability_constrained(snap, config.regression.rho_bar, &bmi)?;
            FitOutcome {
                model,
                log: Some(log),
                gamma: None,
            }
        }
        "hinf" => {
            let (model, log, gamma) = fit_hinf_regularized(
                snap,
                config.regression.beta,
                &HinfOptions {
                    weight,
                    ..HinfOptions::default()
                },
                &bmi,
            )?;
            FitOutcome {
                model,
                log: Some(log),
                gamma: Some(gamma),
            }
        }
        "dmdc" => {
            let (r_hat, r_til) = resolve_ranks(config, snap)?;
            FitOutcome {
                model: dmdc_closed_form(snap, r_hat, r_til)?,
                log: None,
                gamma: None,
            }
        }
        "dmdc-lmi" => {
            let (r_hat, r_til) = resolve_ranks(config, snap)?;
            FitOutcome {
                model: dmdc_lmi(snap, r_hat, r_til, &settings)?,
                log: None,
                gamma: None,
            }
        }
        "dmdc-stability" => {
            let (r_hat, r_til) = resolve_ranks(config, snap)?;
            let (model, log) = fit_dmdc_constrained(
                snap,
                r_hat,
                r_til,
                &DmdcConstraint::Stability {
                    rho_bar: config.regression.rho_bar,
                },
                &bmi,
            )?;
            FitOutcome {
                model,
                log: Some(log),
                gamma: None,
            }
        }
        "dmdc-hinf" => {
            let (r_hat, r_til) = resolve_ranks(config, snap)?;
            let (model, log) = fit_dmdc_constrained(
                snap,
                r_hat,
                r_til,
                &DmdcConstraint::Hinf {
                    beta: config.regression.beta,
                    options: HinfOptions {
                        weight,
                        ..HinfOptions::default()
                    },
                },
                &bmi,
            )?;
            let gamma = model.meta.params.get("gamma").copied();
            FitOutcome {
                model,
                log: Some(log),
                gamma,
            }
        }
        other => return Err(Error::Config(format!("unknown regression.method '{other}'"))),
    };
    Ok(outcome)
}

fn model_report_json(
    model: &KoopmanModel,
    gamma: Option<f64>,
    log: Option<&BmiIterationLog>,
    analysis_cfg: &AnalysisConfig,
) -> serde_json::Value {
    let report = model_report(model);
    let posthoc_norm = if report.asymptotically_stable {
        model
            .state_space()
            .ok()
            .and_then(|ss| hinf_norm(&ss, analysis_cfg.hinf_tol).ok())
    } else {
        None
    };
    let ranks = match &model.basis {
        Basis::Full => serde_json::Value::Null,
        Basis::Reduced { q_hat } => serde_json::json!({
            "r_hat": q_hat.ncols(),
            "p_theta": q_hat.nrows(),
        }),
    };
    serde_json::json!({
        "method": model.meta.method,
        "params": model.meta.params,
        "final_cost": model.meta.final_cost,
        "iterations": model.meta.iterations,
        "spectral_radius": report.spectral_radius,
        "asymptotically_stable": report.asymptotically_stable,
        "cond_a": float_or_string(report.cond_a),
        "cond_b": float_or_string(report.cond_b),
        "gamma_solver": gamma,
        "hinf_norm_posthoc": posthoc_norm,
        "converged": log.map(|l| l.converged),
        "convergence_reason": log.map(|l| l.reason.clone()),
        "basis": ranks,
        "notes": model.meta.notes,
    })
}

fn float_or_string(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}

/// `fit`: fit a model per the config; writes `model.json`, `iterations.csv`,
/// `report.json`, `effective_config.toml`, and `timings.log`.
pub fn cmd_fit(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let t0 = Instant::now();
    let dataset = resolve_dataset(config)?;
    let (train, _test) = split_dataset(config, &dataset);
    if train.episodes.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let pipeline = LiftingPipeline::new(config.lifting.stages.clone())?.fit(&train)?;
    let snap = build_snapshots(&train, &pipeline)?;
    let t_data = t0.elapsed();

    let t1 = Instant::now();
    let outcome = run_regression(config, &snap)?;
    let t_fit = t1.elapsed();

    let model = outcome.model.with_pipeline(pipeline);
    model.save_json(out_dir.join("model.json"))?;

    match &outcome.log {
        Some(log) => log.write_csv(out_dir.join("iterations.csv"))?,
        None => {
            std::fs::write(
                out_dir.join("iterations.csv"),
                "iter,objective,gamma,rho,wall_ms\n",
            )?;
        }
    }

    let report = model_report_json(&model, outcome.gamma, outcome.log.as_ref(), &config.analysis);
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("effective_config.toml"), config.to_toml_string()?)?;
    std::fs::write(
        out_dir.join("timings.log"),
        format!(
            "data_s {:.6}\nfit_s {:.6}\ntotal_s {:.6}\nproblem_p {} q {}\n",
            t_data.as_secs_f64(),
            t_fit.as_secs_f64(),
            t0.elapsed().as_secs_f64(),
            snap.p(),
            snap.q
        ),
    )?;
    println!(
        "fit: method={} p_theta={} p_upsilon={} q={} rho={:.6} cost={:.6e}",
        model.meta.method,
        snap.p_theta,
        snap.p_upsilon,
        snap.q,
        report["spectral_radius"].as_f64().unwrap_or(f64::NAN),
        model.meta.final_cost,
    );
    Ok(())
}

fn parse_episode_selector(selector: Option<&str>) -> Result<Option<Vec<u64>>> {
    match selector {
        None => Ok(None),
        Some(s) => {
            let ids = s
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| {
                    p.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("bad episode id '{p}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(ids))
        }
    }
}

/// `predict`: multi-step prediction of selected episodes; one CSV per
/// episode plus a summary table.
pub fn cmd_predict(
    model_path: &Path,
    data_path: &Path,
    selector: Option<&str>,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let model = KoopmanModel::load_json(model_path)?;
    let dataset = load_episodes(data_path, &config.data.schema())?;
    let ids = parse_episode_selector(selector)?;
    let episodes: Vec<_> = match &ids {
        None => dataset.episodes.iter().collect(),
        Some(ids) => {
            let mut sel = Vec::new();
            for id in ids {
                sel.push(dataset.episode(*id).ok_or_else(|| {
                    Error::Config(format!("episode {id} not present in the data file"))
                })?);
            }
            sel
        }
    };
    if episodes.is_empty() {
        return Err(Error::Config("no episodes selected".into()));
    }

    let mut summary = csv::Writer::from_path(out_dir.join("predictions_summary.csv"))?;
    summary.write_record(["episode", "rms_error", "diverged"])?;
    for ep in episodes {
        let result = predict_multistep(&model, ep)?;
        let m = result.truth.nrows();
        let mut w = csv::Writer::from_path(out_dir.join(format!("prediction_ep{}.csv", ep.id)))?;
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|i| format!("x{i}_true")));
        header.extend((0..m).map(|i| format!("x{i}_pred")));
        header.push("error".into());
        w.write_record(&header)?;
        for k in 0..ep.len() {
            let mut rec = vec![format_float(k as f64 * ep.dt)];
            rec.extend((0..m).map(|i| format_float(result.truth[(i, k)])));
            rec.extend((0..m).map(|i| format_float(result.predicted[(i, k)])));
            rec.push(format_float(result.per_step_error[k]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        summary.write_record([
            ep.id.to_string(),
            format_float(result.rms_error),
            result.diverged.to_string(),
        ])?;
        println!(
            "predict: episode {} rms {:.6e} diverged {}",
            ep.id, result.rms_error, result.diverged
        );
    }
    summary.flush()?;
    Ok(())
}

/// `compare`: one summary row per model (mean/std RMS over the episodes,
/// spectral radius, conditioning, H-infinity norm) plus per-model Bode CSVs.
pub fn cmd_compare(
    model_paths: &[PathBuf],
    data_path: &Path,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<()> {
    if model_paths.is_empty() {
        return Err(Error::Config("compare needs at least one model".into()));
    }
    ensure_dir(out_dir)?;
    let dataset = load_episodes(data_path, &config.data.schema())?;
    let mut models = Vec::new();
    for path in model_paths {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        models.push((name, KoopmanModel::load_json(path)?));
    }
    let refs: Vec<(String, &KoopmanModel)> =
        models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let rows = compare_models(&refs, &dataset.episodes)?;

    let mut w = csv::Writer::from_path(out_dir.join("compare.csv"))?;
    w.write_record([
        "model",
        "mean_rms",
        "std_rms",
        "spectral_radius",
        "cond_a",
        "cond_b",
        "hinf_norm",
        "any_diverged",
    ])?;
    for (row, (name, model)) in rows.iter().zip(&models) {
        let report = model_report(model);
        let norm = if report.asymptotically_stable {
            model
                .state_space()
                .ok()
                .and_then(|ss| hinf_norm(&ss, config.analysis.hinf_tol).ok())
                .map_or("inf".to_string(), format_float)
        } else {
            "inf".to_string()
        };
        w.write_record([
            name.clone(),
            format_float(row.mean_rms),
            format_float(row.std_rms),
            format_float(report.spectral_radius),
            format_float(report.cond_a),
            format_float(report.cond_b),
            norm,
            row.any_diverged.to_string(),
        ])?;

        write_bode_csv(
            model,
            &config.analysis,
            &out_dir.join(format!("bode_{name}.csv")),
        )?;
    }
    w.flush()?;
    println!("compare: wrote {} model rows", rows.len());
    Ok(())
}

fn write_bode_csv(model: &KoopmanModel, cfg: &AnalysisConfig, path: &Path) -> Result<()> {
    let nyquist = 0.5 / model.dt;
    let f_max = if cfg.f_max_hz > 0.0 { cfg.f_max_hz } else { nyquist };
    let points = bode_data(model, cfg.bode_points, f_max)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["freq_hz", "max_singular_value"])?;
    for p in points {
        w.write_record([
            format_float(p.freq_hz),
            p.max_sv.map_or(String::new(), format_float),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `analyze`: stability/conditioning report, eigenvalues, singular values,
/// and Bode data of a stored model.
pub fn cmd_analyze(model_path: &Path, config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let model = KoopmanModel::load_json(model_path)?;
    let report = model_report(&model);

    let json = model_report_json(&model, model.meta.params.get("gamma").copied(), None, &config.analysis);
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&json)?)?;

    let mut w = csv::Writer::from_path(out_dir.join("eigenvalues.csv"))?;
    w.write_record(["re", "im"])?;
    for (re, im) in &report.eigenvalues {
        w.write_record([format_float(*re), format_float(*im)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("singular_values.csv"))?;
    w.write_record(["matrix", "index", "sigma"])?;
    for (i, s) in report.singular_values_a.iter().enumerate() {
        w.write_record(["A".into(), i.to_string(), format_float(*s)])?;
    }
    for (i, s) in report.singular_values_b.iter().enumerate() {
        w.write_record(["B".into(), i.to_string(), format_float(*s)])?;
    }
    w.flush()?;

    write_bode_csv(&model, &config.analysis, &out_dir.join("bode.csv"))?;
    println!(
        "analyze: rho {:.6} stable {} cond_a {:.3e}",
        report.spectral_radius, report.asymptotically_stable, report.cond_a
    );
    Ok(())
}

/// `datagen`: generate the synthetic dataset named by the config and write
/// it in the episode CSV format.
pub fn cmd_datagen(config: &ExperimentConfig, out_path: &Path) -> Result<()> {
    let mut spec = config
        .data
        .synthetic
        .clone()
        .ok_or_else(|| Error::Config("datagen requires [data.synthetic]".into()))?;
    if let Some(seed) = config.seed {
        spec.seed = seed;
    }
    let dataset = datagen::generate(&spec)?;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_episodes(&dataset, out_path)?;
    println!(
        "datagen: wrote {} episodes x {} samples to {}",
        dataset.episodes.len(),
        spec.episode_len,
        out_path.display()
    );
    Ok(())
}

/// Convenience used by tests and the acceptance suite: fit a model directly
/// from a dataset with the config's lifting and regression settings.
pub fn fit_from_dataset(
    config: &ExperimentConfig,
    train: &Dataset,
) -> Result<(KoopmanModel, Option<BmiIterationLog>, Option<f64>)> {
    let pipeline = LiftingPipeline::new(config.lifting.stages.clone())?.fit(train)?;
    let snap = build_snapshots(train, &pipeline)?;
    let outcome = run_regression(config, &snap)?;
    Ok((
        outcome.model.with_pipeline(pipeline),
        outcome.log,
        outcome.gamma,
    ))
}

/// Unstable-model sentinel used in comparison tables.
pub fn hinf_or_inf(model: &KoopmanModel, tol: f64) -> String {
    let report = analysis::model_report(model);
    if !report.asymptotically_stable {
        return "inf".into();
    }
    model
        .state_space()
        .ok()
        .and_then(|ss| lti::hinf_norm(&ss, tol).ok())
        .map_or("inf".into(), format_float)
}
