//! Experiment drivers: dispatch the configured model onto concrete types,
//! fan replications out over the worker pool, and emit per-replication and
//! summary CSV files.

use crate::config::{DataConfig, ExperimentConfig, Kind};
use crate::output::*;
use anyhow::{bail, Context, Result};
use pathscore::discretization::ObsRecord;
use pathscore::estimation::{
    kb_score_fd, BridgeBackend, DirectBackend, MlBackend, RmlOptions, RmlRow, StepSchedule,
};
use pathscore::model::{BuiltinModel, Model};
use pathscore::multilevel::{allocate_particles, run_ml, MlConfig};
use pathscore::rng::StreamKey;
use pathscore::smoother_bridge::run_alg3;
use pathscore::smoother_direct::{run_alg1, ScoreEstimate};
use pathscore::{with_builtin_model, with_model_and_aux};
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

const REP_NS: u64 = 100_000;

fn rep_key(seed: u64, rep: usize) -> StreamKey {
    StreamKey::root(seed).child(REP_NS + rep as u64)
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    pool.install(|| dispatch(cfg, out))
}

fn dispatch(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    match cfg.kind {
        Kind::Simulate => simulate(cfg, out),
        Kind::ScoreDirect | Kind::ScoreBridge | Kind::ScoreMl => score(cfg, out),
        Kind::Estimate => estimate(cfg, out),
        Kind::Benchmark => benchmark(cfg, out),
    }
}

fn comment(cfg: &ExperimentConfig, extra: &str) -> String {
    let base = format!("config_hash={} seed={}", cfg.hash(), cfg.seed);
    if extra.is_empty() {
        base
    } else {
        format!("{base} {extra}")
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.build_model()?;
    let theta = cfg.theta_data().context("simulate requires theta")?;
    let DataConfig::Simulate { level } = cfg.data else {
        bail!("simulate runs synthesize their data; use data.kind = simulate");
    };
    let grid = pathscore::Grid::new(level, cfg.horizon);
    let key = StreamKey::root(cfg.seed);
    let hidden =
        pathscore::discretization::simulate_hidden(&model, &theta, grid, &[cfg.x_star], key)?;
    let obs = pathscore::discretization::simulate_observations(
        &model,
        &theta,
        &hidden,
        &[cfg.y_star],
        key,
    );
    let dt = grid.delta();
    write_csv(
        &out.join("hidden.csv"),
        &comment(cfg, &format!("level={level}")),
        &["step", "time", "x"],
        (0..hidden.len()).map(|k| {
            vec![
                k.to_string(),
                fmt_f(k as f64 * dt),
                fmt_f(hidden.state(k)[0]),
            ]
        }),
    )?;
    write_csv(
        &out.join("observations.csv"),
        &comment(cfg, &format!("level={level} y_star={}", cfg.y_star)),
        &["step", "time", "dy"],
        (0..obs.count()).map(|k| {
            vec![
                k.to_string(),
                fmt_f(k as f64 * dt),
                fmt_f(obs.increment(k)[0]),
            ]
        }),
    )?;
    println!("wrote hidden.csv and observations.csv to {}", out.display());
    Ok(())
}

fn run_one_score(
    cfg: &ExperimentConfig,
    model: &BuiltinModel,
    obs: &ObsRecord,
    rep: usize,
) -> Result<Vec<ScoreEstimate>> {
    let theta = cfg.theta_eval().unwrap();
    let key = rep_key(cfg.seed, rep);
    let aux = cfg.build_aux(model);
    let estimates = match cfg.kind {
        Kind::ScoreDirect => with_builtin_model!(model, m => run_alg1(
            m, &theta, obs, cfg.level.unwrap(), cfg.particles.unwrap(), cfg.horizon,
            &[cfg.x_star], key,
        ))?,
        Kind::ScoreBridge => with_model_and_aux!(model, &aux, m, a => run_alg3(
            m, a, &theta, obs, cfg.level.unwrap(), cfg.particles.unwrap(), cfg.horizon,
            cfg.x_star, key,
        ))?,
        Kind::ScoreMl => {
            let section = cfg.ml.as_ref().unwrap();
            let ml = cfg.ml_config(section)?;
            with_model_and_aux!(model, &aux, m, a => run_ml(
                m, a, &theta, obs, &ml, cfg.horizon, cfg.x_star, key,
            ))?
        }
        _ => unreachable!(),
    };
    Ok(estimates)
}

fn score(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.build_model()?;
    let obs = cfg.load_observations(&model)?;
    let obs = match cfg.kind {
        Kind::ScoreMl => obs, // coarsened per level inside the runner
        _ => cfg.obs_at_level(&obs, cfg.level.unwrap())?,
    };
    let d_theta = model.dims().d_theta;

    let t0 = Instant::now();
    let results: Vec<(usize, Result<Vec<ScoreEstimate>>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| (rep, run_one_score(cfg, &model, &obs, rep)))
        .collect();
    let wall = t0.elapsed().as_secs_f64();

    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results {
        match r {
            Ok(tr) => {
                write_csv(
                    &out.join(format!("rep_{rep:04}.csv")),
                    &comment(cfg, &format!("replication={rep}")),
                    &score_header(d_theta).iter().map(String::as_str).collect::<Vec<_>>(),
                    tr.iter().map(score_row),
                )?;
                ok.push(tr);
            }
            Err(e) => failures.push((rep, format!("{e:#}"))),
        }
    }
    if ok.is_empty() {
        bail!("all {} replications failed; first error: {}", cfg.replications, failures[0].1);
    }
    write_csv(
        &out.join("summary.csv"),
        &comment(
            cfg,
            &format!(
                "replications_ok={} replications_failed={}",
                ok.len(),
                failures.len()
            ),
        ),
        &summary_header(d_theta).iter().map(String::as_str).collect::<Vec<_>>(),
        summarize_trajectories(&ok, d_theta),
    )?;
    if !failures.is_empty() {
        write_csv(
            &out.join("failures.csv"),
            &comment(cfg, ""),
            &["replication", "error"],
            failures
                .iter()
                .map(|(r, e)| vec![r.to_string(), format!("\"{}\"", e.replace('"', "'"))]),
        )?;
        eprintln!("{} of {} replications failed", failures.len(), cfg.replications);
    }
    println!(
        "score run complete: {} replications, wall {wall:.1}s, outputs in {}",
        ok.len(),
        out.display()
    );
    Ok(())
}

fn run_one_estimate(
    cfg: &ExperimentConfig,
    model: &BuiltinModel,
    obs: &ObsRecord,
    rep: usize,
) -> Result<Vec<RmlRow>> {
    let schedule = cfg.schedule.as_ref().unwrap();
    let schedule = StepSchedule::new(schedule.c, schedule.gamma)?;
    let opts = RmlOptions {
        schedule,
        horizon: cfg.horizon,
    };
    let theta0 = cfg.theta0.clone().unwrap();
    let key = rep_key(cfg.seed, rep);
    let aux = cfg.build_aux(model);
    let rows = match cfg.backend.as_deref().unwrap() {
        "direct" => {
            let level = cfg.level.unwrap();
            let obs_l = cfg.obs_at_level(obs, level)?;
            with_builtin_model!(model, m => {
                let mut backend = DirectBackend::new(
                    m, obs_l, level, cfg.particles.unwrap(), &[cfg.x_star], key,
                );
                pathscore::estimation::run_rml(m, &mut backend, &theta0, &opts)
            })?
        }
        "bridge" => {
            let level = cfg.level.unwrap();
            let obs_l = cfg.obs_at_level(obs, level)?;
            with_model_and_aux!(model, &aux, m, a => {
                let mut backend = BridgeBackend::new(
                    m, a, obs_l, level, cfg.particles.unwrap(), cfg.x_star, key,
                );
                pathscore::estimation::run_rml(m, &mut backend, &theta0, &opts)
            })?
        }
        "ml" => {
            let ml = cfg.ml_config(cfg.ml.as_ref().unwrap())?;
            with_model_and_aux!(model, &aux, m, a => {
                let sm = pathscore::multilevel::MlSmoother::new(
                    m, a, ml.clone(), obs, cfg.x_star, key,
                )?;
                let mut backend = MlBackend::new(sm);
                pathscore::estimation::run_rml(m, &mut backend, &theta0, &opts)
            })?
        }
        other => bail!("unknown backend {other}"),
    };
    Ok(rows)
}

fn estimate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.build_model()?;
    let obs = cfg.load_observations(&model)?;
    let d_theta = model.dims().d_theta;

    let t0 = Instant::now();
    let results: Vec<(usize, Result<Vec<RmlRow>>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| (rep, run_one_estimate(cfg, &model, &obs, rep)))
        .collect();
    let wall = t0.elapsed().as_secs_f64();

    let mut header = vec!["unit_time".to_string()];
    for c in 0..d_theta {
        header.push(format!("theta_{c}"));
    }
    header.extend(
        ["increment_norm", "step_size", "collapsed", "rejected", "cost_total"].map(String::from),
    );

    let mut finals = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results {
        match r {
            Ok(rows) => {
                write_csv(
                    &out.join(format!("rep_{rep:04}.csv")),
                    &comment(cfg, &format!("replication={rep}")),
                    &header.iter().map(String::as_str).collect::<Vec<_>>(),
                    rows.iter().map(|r| {
                        let mut row = vec![r.unit_time.to_string()];
                        row.extend(r.theta.iter().map(|v| fmt_f(*v)));
                        row.push(fmt_f(r.increment_norm));
                        row.push(fmt_f(r.step_size));
                        row.push((r.collapsed as u8).to_string());
                        row.push((r.rejected as u8).to_string());
                        row.push(r.cost.total().to_string());
                        row
                    }),
                )?;
                finals.push((rep, rows.last().unwrap().theta.clone()));
            }
            Err(e) => failures.push((rep, format!("{e:#}"))),
        }
    }
    if finals.is_empty() {
        bail!("all {} replications failed; first error: {}", cfg.replications, failures[0].1);
    }
    let mut fheader = vec!["replication".to_string()];
    for c in 0..d_theta {
        fheader.push(format!("theta_{c}"));
    }
    write_csv(
        &out.join("final_theta.csv"),
        &comment(
            cfg,
            &format!(
                "replications_ok={} replications_failed={}",
                finals.len(),
                failures.len()
            ),
        ),
        &fheader.iter().map(String::as_str).collect::<Vec<_>>(),
        finals.iter().map(|(rep, th)| {
            let mut row = vec![rep.to_string()];
            row.extend(th.iter().map(|v| fmt_f(*v)));
            row
        }),
    )?;
    if !failures.is_empty() {
        eprintln!("{} of {} replications failed", failures.len(), cfg.replications);
    }
    println!(
        "estimation complete: {} replications, wall {wall:.1}s, outputs in {}",
        finals.len(),
        out.display()
    );
    Ok(())
}

/// Reference score for benchmark runs: the Kalman-Bucy finite-difference
/// oracle for model 1, otherwise a high-level bridge run with many
/// particles.
fn reference_score(
    cfg: &ExperimentConfig,
    model: &BuiltinModel,
    obs: &ObsRecord,
) -> Result<(Vec<f64>, String)> {
    let b = cfg.benchmark.as_ref().unwrap();
    let theta = cfg.theta_eval().unwrap();
    let obs_ref = cfg.obs_at_level(obs, b.reference_level)?;
    if model.id() == 1 {
        let score = kb_score_fd(model, &theta, &obs_ref, cfg.x_star, 1e-5)?;
        Ok((
            score,
            format!("kalman-bucy-fd@l{}", b.reference_level),
        ))
    } else {
        let aux = cfg.build_aux(model);
        let key = StreamKey::root(cfg.seed).child(999_999);
        let est = with_model_and_aux!(model, &aux, m, a => run_alg3(
            m, a, &theta, &obs_ref, b.reference_level, b.reference_particles,
            cfg.horizon, cfg.x_star, key,
        ))?;
        Ok((
            est.last().unwrap().values.clone(),
            format!(
                "bridge@l{} N={} seed-ns=999999",
                b.reference_level, b.reference_particles
            ),
        ))
    }
}

fn mse_against(reference: &[f64], finals: &[Vec<f64>]) -> f64 {
    let d = reference.len() as f64;
    let per_rep: Vec<f64> = finals
        .iter()
        .map(|v| {
            v.iter()
                .zip(reference)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d
        })
        .collect();
    pathscore::stats::mean(&per_rep)
}

fn benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = cfg.build_model()?;
    let b = cfg.benchmark.as_ref().unwrap().clone();
    let obs = cfg.load_observations(&model)?;
    let theta = cfg.theta_eval().unwrap();
    let (reference, ref_desc) = reference_score(cfg, &model, &obs)?;
    let aux = cfg.build_aux(&model);

    let mut rows: Vec<Vec<String>> = Vec::new();
    for &top in &b.sweep {
        // multilevel estimator
        let ml: MlConfig = allocate_particles(b.l_star, top, b.rho, b.beta, b.ml_scale)?;
        let t0 = Instant::now();
        let finals: Vec<(Vec<f64>, u64)> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                let key = rep_key(cfg.seed, rep).child(top as u64).child(0);
                let est = with_model_and_aux!(&model, &aux, m, a => run_ml(
                    m, a, &theta, &obs, &ml, cfg.horizon, cfg.x_star, key,
                ))
                .expect("multilevel run");
                let last = est.last().unwrap();
                (last.values.clone(), last.cost.total())
            })
            .collect();
        let wall = t0.elapsed().as_secs_f64();
        let mse = mse_against(&reference, &finals.iter().map(|f| f.0.clone()).collect::<Vec<_>>());
        let cost = finals.iter().map(|f| f.1 as f64).sum::<f64>() / finals.len() as f64;
        rows.push(vec![
            "ml".into(),
            top.to_string(),
            format!(
                "l*={} N={}",
                b.l_star,
                ml.n_per_level
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join("/")
            ),
            fmt_f(mse),
            fmt_f(cost),
            fmt_f(wall),
            cfg.replications.to_string(),
        ]);

        // matched single-level bridge estimator
        let n_single = ((b.single_scale * (1u64 << top) as f64).floor() as usize).max(2);
        let t0 = Instant::now();
        let obs_top = cfg.obs_at_level(&obs, top)?;
        let finals: Vec<(Vec<f64>, u64)> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                let key = rep_key(cfg.seed, rep).child(top as u64).child(1);
                let est = with_model_and_aux!(&model, &aux, m, a => run_alg3(
                    m, a, &theta, &obs_top, top, n_single, cfg.horizon, cfg.x_star, key,
                ))
                .expect("single-level run");
                let last = est.last().unwrap();
                (last.values.clone(), last.cost.total())
            })
            .collect();
        let wall = t0.elapsed().as_secs_f64();
        let mse = mse_against(&reference, &finals.iter().map(|f| f.0.clone()).collect::<Vec<_>>());
        let cost = finals.iter().map(|f| f.1 as f64).sum::<f64>() / finals.len() as f64;
        rows.push(vec![
            "single".into(),
            top.to_string(),
            format!("N={n_single}"),
            fmt_f(mse),
            fmt_f(cost),
            fmt_f(wall),
            cfg.replications.to_string(),
        ]);
    }

    write_csv(
        &out.join("results.csv"),
        &comment(cfg, &format!("reference={ref_desc}")),
        &["estimator", "top_level", "particles", "mse", "cost", "wall_s", "replications"],
        rows,
    )?;
    println!("benchmark complete; results in {}", out.join("results.csv").display());
    Ok(())
}
