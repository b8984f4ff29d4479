//! Summarizes benchmark results: least-squares slopes of log cost against
//! log MSE per estimator, with standard errors.

use anyhow::{bail, Context, Result};
use pathscore::stats::ols_slope;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SlopeFit {
    pub estimator: String,
    pub points: usize,
    pub slope: f64,
    pub slope_se: f64,
}

pub fn summarize_files(paths: &[String]) -> Result<Vec<SlopeFit>> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in paths {
        let content = std::fs::read_to_string(p).with_context(|| format!("reading {p}"))?;
        let mut header: Option<Vec<String>> = None;
        for line in content.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            match &header {
                None => header = Some(fields.iter().map(|s| s.to_string()).collect()),
                Some(h) => {
                    let idx = |name: &str| -> Result<usize> {
                        h.iter()
                            .position(|c| c == name)
                            .with_context(|| format!("{p}: missing column {name}"))
                    };
                    let est = fields[idx("estimator")?].to_string();
                    let mse: f64 = fields[idx("mse")?].parse()?;
                    let cost: f64 = fields[idx("cost")?].parse()?;
                    groups.entry(est).or_default().push((mse, cost));
                }
            }
        }
    }
    let mut fits = Vec::new();
    for (estimator, pts) in groups {
        if pts.len() < 3 {
            bail!("estimator {estimator}: need at least 3 points for a slope fit, have {}", pts.len());
        }
        let x: Vec<f64> = pts.iter().map(|(m, _)| m.ln()).collect();
        let y: Vec<f64> = pts.iter().map(|(_, c)| c.ln()).collect();
        let (_, slope, se) = ols_slope(&x, &y);
        fits.push(SlopeFit {
            estimator,
            points: pts.len(),
            slope,
            slope_se: se,
        });
    }
    Ok(fits)
}

pub fn write_summary(fits: &[SlopeFit], out: &Path) -> Result<()> {
    crate::output::write_csv(
        &out.join("slopes.csv"),
        "log(cost) ~ log(mse) least squares",
        &["estimator", "points", "slope", "slope_se"],
        fits.iter().map(|f| {
            vec![
                f.estimator.clone(),
                f.points.to_string(),
                crate::output::fmt_f(f.slope),
                crate::output::fmt_f(f.slope_se),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_results(dir: &Path, rows: &[(&str, f64, f64)]) -> String {
        let p = dir.join("results.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "# test").unwrap();
        writeln!(f, "estimator,top_level,particles,mse,cost,wall_s,replications").unwrap();
        for (e, m, c) in rows {
            writeln!(f, "{e},0,\"\",{m},{c},0,1").unwrap();
        }
        p.display().to_string()
    }

    #[test]
    fn exact_power_law_slopes() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<(&str, f64, f64)> = (1..=4)
            .map(|i| {
                let mse = (i as f64) * 0.01;
                ("ml", mse, mse.powi(-2))
            })
            .collect();
        let p = write_results(dir.path(), &rows);
        let fits = summarize_files(&[p]).unwrap();
        assert_eq!(fits.len(), 1);
        assert!((fits[0].slope + 2.0).abs() < 1e-9, "{}", fits[0].slope);

        let rows: Vec<(&str, f64, f64)> = (1..=4)
            .map(|i| {
                let mse = (i as f64) * 0.01;
                ("single", mse, mse.powi(-3))
            })
            .collect();
        let p = write_results(dir.path(), &rows);
        let fits = summarize_files(&[p]).unwrap();
        assert!((fits[0].slope + 3.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_results(dir.path(), &[("ml", 0.1, 10.0), ("ml", 0.2, 5.0)]);
        assert!(summarize_files(&[p]).is_err());
    }
}
