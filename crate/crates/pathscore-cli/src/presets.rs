//! Named experiment presets: one per headline figure, at publication scale,
//! with desk-scaled variants (suffix `-desk`) that finish on a laptop.

use crate::config::ExperimentConfig;
use anyhow::{bail, Result};
use serde_json::json;

fn model_section(id: u32) -> serde_json::Value {
    match id {
        1 => json!({"id": 1, "kappa": 2.0, "sigma": 0.3}),
        2 => json!({"id": 2, "kappa": 2.2, "sigma": 0.25}),
        3 => json!({"id": 3, "kappa": 2.0, "sigma": 0.25}),
        4 => json!({"id": 4, "beta": 2.0}),
        _ => unreachable!(),
    }
}

/// Score-evaluation parameters per model (the data-generating values of the
/// estimation experiments, except model 1 which uses the cost-comparison
/// point).
fn score_theta(id: u32) -> serde_json::Value {
    match id {
        1 => json!([-0.4, -0.5]),
        2 => json!([1.3, -0.5, 0.18]),
        3 => json!([2.0, 1.0, 0.45]),
        4 => json!([2.4, 0.5, 0.4]),
        _ => unreachable!(),
    }
}

fn x_star(id: u32) -> f64 {
    // score-estimation settings; estimation presets override model 2/3
    match id {
        1 => 0.2,
        2 => 1.0,
        3 => 2.0,
        4 => 1.3,
        _ => unreachable!(),
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let v = preset_json(name)?;
    ExperimentConfig::from_json(&v.to_string())
}

pub fn preset_names() -> Vec<&'static str> {
    vec![
        "fig1-model1",
        "fig3-model1",
        "fig3-model2",
        "fig3-model3",
        "fig3-model4",
        "fig3-model1-bridge",
        "fig3-model2-bridge",
        "fig3-model3-bridge",
        "fig3-model4-bridge",
        "fig3-model1-desk",
        "fig3-model2-desk",
        "fig3-model3-desk",
        "fig4-model1",
        "fig4-model2",
        "fig4-model3",
        "fig4-model1-desk",
        "fig5-model1",
        "fig5-model1-ml",
        "fig6-model2",
        "fig6-model2-ml",
        "fig7-model3",
        "fig7-model3-ml",
        "fig8-model4",
        "fig8-model4-ml",
        "fig5-model1-desk",
        "fig6-model2-desk",
        "fig7-model3-desk",
    ]
}

fn preset_json(name: &str) -> Result<serde_json::Value> {
    let direct_n = [3000, 7000, 4000, 5000];
    let bridge_n = [1000, 2000, 1000, 1500];
    let v = match name {
        // cost comparison of the two single-level algorithms
        "fig1-model1" => json!({
            "kind": "score-direct",
            "model": model_section(1),
            "theta": [-0.4, -0.5],
            "level": 10,
            "particles": 3000,
            "horizon": 40,
            "x_star": 0.2,
            "replications": 8,
            "data": {"kind": "simulate", "level": 10},
        }),
        // score-function estimation, 56 replications
        n if n.starts_with("fig3-model") => {
            let rest = &n["fig3-model".len()..];
            let (id_s, variant) = rest.split_once('-').unwrap_or((rest, ""));
            let id: u32 = id_s.parse()?;
            if !(1..=4).contains(&id) {
                bail!("unknown preset {name}");
            }
            let (kind, particles, horizon, reps, level) = match variant {
                "" => ("score-direct", direct_n[id as usize - 1], 50, 56, 10),
                "bridge" => ("score-bridge", bridge_n[id as usize - 1], 50, 56, 10),
                "desk" => ("score-bridge", 256, 20, 16, 10),
                _ => bail!("unknown preset {name}"),
            };
            json!({
                "kind": kind,
                "model": model_section(id),
                "theta": score_theta(id),
                "level": level,
                "particles": particles,
                "horizon": horizon,
                "x_star": x_star(id),
                "replications": reps,
                "data": {"kind": "simulate", "level": level},
            })
        }
        // cost against MSE, multilevel vs single level
        "fig4-model1" | "fig4-model2" | "fig4-model3" => {
            let id: u32 = name["fig4-model".len()..].parse()?;
            json!({
                "kind": "benchmark",
                "model": model_section(id),
                "theta": score_theta(id),
                "horizon": 5,
                "x_star": x_star(id),
                "replications": 56,
                "data": {"kind": "simulate", "level": 11},
                "benchmark": {
                    "reference_level": 11,
                    "sweep": [7, 8, 9, 10],
                    "l_star": 7,
                    "rho": 0.14,
                    "beta": 1.0,
                    "ml_scale": 1.0,
                    "single_scale": 1.0,
                    "reference_particles": 2000,
                },
            })
        }
        "fig4-model1-desk" => json!({
            "kind": "benchmark",
            "model": model_section(1),
            "theta": [-0.4, -0.5],
            "horizon": 5,
            "x_star": 0.2,
            "replications": 48,
            "data": {"kind": "simulate", "level": 10},
            "benchmark": {
                "reference_level": 10,
                "sweep": [5, 6, 7, 8],
                "l_star": 4,
                "rho": 0.14,
                "beta": 1.0,
                "ml_scale": 0.5,
                "single_scale": 0.5,
            },
        }),
        // parameter estimation, models 1-3 (direct and multilevel backends)
        "fig5-model1" | "fig5-model1-ml" | "fig5-model1-desk" | "fig6-model2"
        | "fig6-model2-ml" | "fig6-model2-desk" | "fig7-model3" | "fig7-model3-ml"
        | "fig7-model3-desk" => {
            let (id, theta0, gamma, rho, xs): (u32, _, f64, f64, f64) = match &name[..10] {
                "fig5-model" => (1, json!([-0.05, -1.5]), 0.85, 0.14, 0.2),
                "fig6-model" => (2, json!([0.8, -1.0, 0.8]), 0.95, 0.09, 1.8),
                "fig7-model" => (3, json!([1.24, 0.6, 1.11]), 0.9, 0.11, 1.5),
                _ => bail!("unknown preset {name}"),
            };
            let desk = name.ends_with("-desk");
            let ml = name.ends_with("-ml");
            let mut cfg = json!({
                "kind": "estimate",
                "model": model_section(id),
                "theta0": theta0,
                "theta_star": score_theta(id),
                "schedule": {"c": 1.0, "gamma": gamma},
                "horizon": if desk { 2000 } else { 20000 },
                "x_star": xs,
                "replications": 8,
                "data": {"kind": "simulate", "level": if desk { 9 } else { 10 }},
            });
            let obj = cfg.as_object_mut().unwrap();
            if ml {
                obj.insert("backend".into(), json!("ml"));
                obj.insert(
                    "ml".into(),
                    json!({"l_star": 7, "top": 10, "rho": rho, "beta": 1.0, "scale": 1.0}),
                );
            } else {
                obj.insert("backend".into(), json!("direct"));
                obj.insert("level".into(), json!(if desk { 9 } else { 10 }));
                obj.insert("particles".into(), json!(if desk { 1000 } else { 2000 }));
            }
            if id >= 2 {
                // keep the positive-state drift parameters in their
                // well-posed region during estimation
                obj.insert(
                    "theta_box".into(),
                    json!({"lo": [0.05, if id == 2 { -10.0 } else { 0.05 }, -10.0],
                           "hi": [10.0, 10.0, 10.0]}),
                );
            }
            cfg
        }
        // model 4 on a loaded price series (path supplied via --config merge
        // or by editing the written config)
        "fig8-model4" | "fig8-model4-ml" => {
            let ml = name.ends_with("-ml");
            let mut cfg = json!({
                "kind": "estimate",
                "model": model_section(4),
                "theta0": [2.4, 0.5, 0.4],
                "schedule": {"c": 1.0, "gamma": 0.82},
                "horizon": 11425,
                "x_star": 1.3,
                "replications": 1,
                "data": {"kind": "csv", "path": "prices.csv", "seconds_per_unit": 512},
            });
            let obj = cfg.as_object_mut().unwrap();
            if ml {
                obj.insert("backend".into(), json!("ml"));
                obj.insert(
                    "ml".into(),
                    json!({"l_star": 8, "top": 9, "rho": 0.1, "beta": 0.5, "scale": 1.4}),
                );
            } else {
                obj.insert("backend".into(), json!("direct"));
                obj.insert("level".into(), json!(9));
                obj.insert("particles".into(), json!(2500));
            }
            cfg
        }
        _ => bail!(
            "unknown preset `{name}`; available: {}",
            preset_names().join(", ")
        ),
    };
    Ok(v)
}
