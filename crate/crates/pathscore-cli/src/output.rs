//! CSV emission: every file carries a header row and a `#` comment row
//! recording the config hash and seed, so outputs are attributable and
//! byte-reproducible.

use anyhow::{Context, Result};
use pathscore::smoother_direct::ScoreEstimate;
use pathscore::stats;
use std::fmt::Write as _;
use std::path::Path;

pub fn write_csv(
    path: &Path,
    comment: &str,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "# {comment}").unwrap();
    writeln!(s, "{}", header.join(",")).unwrap();
    for row in rows {
        writeln!(s, "{}", row.join(",")).unwrap();
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.17e}")
    } else {
        format!("{v}")
    }
}

/// Header for per-replication score trajectories.
pub fn score_header(d_theta: usize) -> Vec<String> {
    let mut h = vec!["unit_time".to_string()];
    for c in 0..d_theta {
        h.push(format!("score_{c}"));
    }
    h.extend(
        [
            "ess",
            "backward_ess",
            "pair_failures",
            "drift_evals",
            "density_evals",
            "normal_draws",
        ]
        .map(String::from),
    );
    h
}

pub fn score_row(e: &ScoreEstimate) -> Vec<String> {
    let mut r = vec![e.unit_time.to_string()];
    r.extend(e.values.iter().map(|v| fmt_f(*v)));
    r.push(fmt_f(e.ess));
    r.push(fmt_f(e.backward_ess));
    r.push(e.pair_failures.to_string());
    r.push(e.cost.drift_evals.to_string());
    r.push(e.cost.density_evals.to_string());
    r.push(e.cost.normal_draws.to_string());
    r
}

/// Per-unit-time mean and standard error across replications.
pub fn summarize_trajectories(all: &[Vec<ScoreEstimate>], d_theta: usize) -> Vec<Vec<String>> {
    if all.is_empty() {
        return Vec::new();
    }
    let horizon = all[0].len();
    let mut rows = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let mut row = vec![(k + 1).to_string()];
        for c in 0..d_theta {
            let xs: Vec<f64> = all.iter().map(|t| t[k].values[c]).collect();
            row.push(fmt_f(stats::mean(&xs)));
            row.push(fmt_f(stats::std_error(&xs)));
        }
        rows.push(row);
    }
    rows
}

pub fn summary_header(d_theta: usize) -> Vec<String> {
    let mut h = vec!["unit_time".to_string()];
    for c in 0..d_theta {
        h.push(format!("mean_{c}"));
        h.push(format!("se_{c}"));
    }
    h
}
