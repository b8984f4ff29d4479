//! Experiment configuration: JSON schema, validation and the derived
//! runtime objects (model, auxiliary process, observation record).

use anyhow::{bail, Context, Result};
use pathscore::bridge::{default_aux, BuiltinAux};
use pathscore::discretization::{
    coarsen_obs, load_price_csv, simulate_hidden, simulate_observations, Grid, ObsRecord,
};
use pathscore::model::{builtin_model, BuiltinModel, FixedParams};
use pathscore::multilevel::{allocate_particles, MlConfig};
use pathscore::rng::StreamKey;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Simulate,
    ScoreDirect,
    ScoreBridge,
    ScoreMl,
    Estimate,
    Benchmark,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub id: u32,
    #[serde(flatten)]
    pub fixed: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlSection {
    pub l_star: u32,
    pub top: u32,
    pub rho: f64,
    /// 1.0 for constant diffusion coefficient models, 0.5 otherwise.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_beta() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub c: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataConfig {
    /// Synthesize observations from the model at `level`, using
    /// `theta_star` (defaulting to the evaluation theta).
    Simulate { level: u32 },
    /// Load a single-column price series; `seconds_per_unit` readings make
    /// one unit time (must be a power of two).
    Csv {
        path: String,
        #[serde(default = "default_spu")]
        seconds_per_unit: usize,
    },
}

fn default_spu() -> usize {
    512
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSection {
    /// Discretization level of the reference score.
    pub reference_level: u32,
    /// Top levels L to sweep.
    pub sweep: Vec<u32>,
    pub l_star: u32,
    pub rho: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Scale constant for the multilevel allocation (C2).
    #[serde(default = "default_scale")]
    pub ml_scale: f64,
    /// Scale constant for the single-level particle count N_L = C1 2^L.
    #[serde(default = "default_scale")]
    pub single_scale: f64,
    /// Reference particle count when the oracle is unavailable (models 2-4).
    #[serde(default = "default_ref_particles")]
    pub reference_particles: usize,
}

fn default_ref_particles() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub model: ModelConfig,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Initial parameter for estimation runs.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    /// Data-generating parameter (defaults to `theta`/`theta0`).
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_box: Option<BoxConfig>,
    #[serde(default)]
    pub level: Option<u32>,
    #[serde(default)]
    pub ml: Option<MlSection>,
    #[serde(default)]
    pub particles: Option<usize>,
    pub horizon: usize,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_x_star")]
    pub x_star: f64,
    #[serde(default)]
    pub y_star: f64,
    pub data: DataConfig,
    /// Estimation backend: "direct", "bridge" or "ml".
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkSection>,
}

fn default_seed() -> u64 {
    7
}
fn default_reps() -> usize {
    16
}
fn default_x_star() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short hash of the canonical JSON, recorded in every output file.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            bail!("horizon must be positive");
        }
        if self.replications == 0 {
            bail!("replications must be positive");
        }
        let d_theta = match self.model.id {
            1 => 2,
            2 | 3 | 4 => 3,
            other => bail!("unknown model id {other}"),
        };
        let check_dim = |name: &str, v: &Option<Vec<f64>>| -> Result<()> {
            if let Some(v) = v {
                if v.len() != d_theta {
                    bail!("{name} must have {d_theta} coordinates for model {}", self.model.id);
                }
            }
            Ok(())
        };
        check_dim("theta", &self.theta)?;
        check_dim("theta0", &self.theta0)?;
        check_dim("theta_star", &self.theta_star)?;
        match self.kind {
            Kind::Simulate => {
                if self.theta_eval().is_none() {
                    bail!("simulate requires theta (or theta_star)");
                }
            }
            Kind::ScoreDirect | Kind::ScoreBridge => {
                if self.theta_eval().is_none() {
                    bail!("score runs require theta");
                }
                if self.level.is_none() {
                    bail!("score runs require level");
                }
                if self.particles.is_none() {
                    bail!("score runs require particles");
                }
            }
            Kind::ScoreMl => {
                if self.theta_eval().is_none() {
                    bail!("score runs require theta");
                }
                if self.ml.is_none() {
                    bail!("score-ml requires the ml section");
                }
            }
            Kind::Estimate => {
                if self.theta0.is_none() {
                    bail!("estimate requires theta0");
                }
                if self.schedule.is_none() {
                    bail!("estimate requires schedule");
                }
                match self.backend.as_deref() {
                    Some("direct") | Some("bridge") => {
                        if self.level.is_none() || self.particles.is_none() {
                            bail!("direct/bridge backends require level and particles");
                        }
                    }
                    Some("ml") => {
                        if self.ml.is_none() {
                            bail!("ml backend requires the ml section");
                        }
                    }
                    other => bail!("estimate backend must be direct|bridge|ml, got {other:?}"),
                }
            }
            Kind::Benchmark => {
                if self.benchmark.is_none() {
                    bail!("benchmark requires the benchmark section (reference-truth spec)");
                }
                if self.theta_eval().is_none() {
                    bail!("benchmark requires theta");
                }
            }
        }
        if let DataConfig::Simulate { level } = &self.data {
            let need = self.max_run_level()?;
            if *level < need {
                bail!("data level {level} is coarser than the finest run level {need}");
            }
        }
        Ok(())
    }

    /// Parameter at which scores are evaluated.
    pub fn theta_eval(&self) -> Option<Vec<f64>> {
        self.theta.clone().or_else(|| self.theta_star.clone())
    }

    /// Parameter used to synthesize data.
    pub fn theta_data(&self) -> Option<Vec<f64>> {
        self.theta_star
            .clone()
            .or_else(|| self.theta.clone())
            .or_else(|| self.theta0.clone())
    }

    fn max_run_level(&self) -> Result<u32> {
        let mut need = self.level.unwrap_or(0);
        if let Some(ml) = &self.ml {
            need = need.max(ml.top);
        }
        if let Some(b) = &self.benchmark {
            need = need.max(b.reference_level);
            need = need.max(b.sweep.iter().copied().max().unwrap_or(0));
        }
        Ok(need)
    }

    pub fn build_model(&self) -> Result<BuiltinModel> {
        let mut fixed = FixedParams::new();
        for (k, v) in &self.model.fixed {
            fixed.set(k, *v);
        }
        let mut m = builtin_model(self.model.id, &fixed)?;
        if let Some(b) = &self.theta_box {
            m.set_theta_box(b.lo.clone(), b.hi.clone());
        }
        Ok(m)
    }

    pub fn build_aux(&self, model: &BuiltinModel) -> BuiltinAux {
        default_aux(model)
    }

    pub fn ml_config(&self, section: &MlSection) -> Result<MlConfig> {
        Ok(allocate_particles(
            section.l_star,
            section.top,
            section.rho,
            section.beta,
            section.scale,
        )?)
    }

    /// Produces the observation record (simulated or loaded from disk).
    pub fn load_observations(&self, model: &BuiltinModel) -> Result<ObsRecord> {
        match &self.data {
            DataConfig::Simulate { level } => {
                let theta = self
                    .theta_data()
                    .context("data generation requires a parameter value")?;
                let grid = Grid::new(*level, self.horizon);
                let key = StreamKey::root(self.seed);
                let hidden = simulate_hidden(model, &theta, grid, &[self.x_star], key)
                    .context("simulating the hidden path")?;
                Ok(simulate_observations(model, &theta, &hidden, &[self.y_star], key))
            }
            DataConfig::Csv {
                path,
                seconds_per_unit,
            } => {
                let content = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {path}"))?;
                let obs = load_price_csv(&content, *seconds_per_unit)?;
                if obs.horizon < self.horizon {
                    bail!(
                        "data provides {} unit times, config requires {}",
                        obs.horizon,
                        self.horizon
                    );
                }
                Ok(obs)
            }
        }
    }

    /// Coarsened copy of the observations at the requested level.
    pub fn obs_at_level(&self, obs: &ObsRecord, level: u32) -> Result<ObsRecord> {
        Ok(coarsen_obs(obs, level)?)
    }
}
