//! Grids, Euler-Maruyama simulation, the Euler transition density, and
//! observation records with level coarsening.
//!
//! Observations are stored as increments, never as levels: every weight and
//! functional in the smoothers consumes increments. Levels are recovered on
//! demand by cumulative summation from `y_*`.

use crate::linalg::{cholesky_in_place, cholesky_logdet, cholesky_solve};
use crate::model::Model;
use crate::rng::{role, StreamKey};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state left the admissible region at step {step} (unit time {unit_time})")]
    Inadmissible { step: usize, unit_time: usize },
    #[error("diffusion covariance not positive definite")]
    SingularCovariance,
    #[error("target level {target} exceeds native level {native}")]
    LevelTooFine { target: u32, native: u32 },
    #[error("observation horizon {have} shorter than requested {want}")]
    HorizonTooShort { have: usize, want: usize },
    #[error("data file: {0}")]
    Data(String),
}

/// Dyadic time grid: step `2^-level` over `horizon` unit-time intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub level: u32,
    pub horizon: usize,
}

impl Grid {
    pub fn new(level: u32, horizon: usize) -> Self {
        Grid { level, horizon }
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        // Exact: 2^-l is a power of two.
        (0.5f64).powi(self.level as i32)
    }

    #[inline]
    pub fn steps_per_unit(&self) -> usize {
        1usize << self.level
    }

    #[inline]
    pub fn total_steps(&self) -> usize {
        self.horizon * self.steps_per_unit()
    }
}

/// A simulated hidden path at one level, with its driving Brownian
/// increments retained.
#[derive(Debug, Clone)]
pub struct HiddenPath {
    pub level: u32,
    pub d_x: usize,
    /// States at grid times, `(total_steps + 1) * d_x`, row-major.
    pub states: Vec<f64>,
    /// Brownian increments `W_{(k+1)D} - W_{kD}`, `total_steps * d_x`.
    pub increments: Vec<f64>,
}

impl HiddenPath {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.d_x..(k + 1) * self.d_x]
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.d_x
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Observation increments on a dyadic grid with native level `level`.
#[derive(Debug, Clone)]
pub struct ObsRecord {
    pub level: u32,
    pub d_y: usize,
    pub horizon: usize,
    pub y0: Vec<f64>,
    /// `horizon * 2^level` increments, row-major by step.
    pub increments: Vec<f64>,
}

impl ObsRecord {
    #[inline]
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.d_y..(k + 1) * self.d_y]
    }

    pub fn count(&self) -> usize {
        self.increments.len() / self.d_y
    }

    /// Increments of unit-time block `k` (the `2^level` steps in `[k, k+1)`).
    pub fn block(&self, k: usize) -> &[f64] {
        let n = 1usize << self.level;
        &self.increments[k * n * self.d_y..(k + 1) * n * self.d_y]
    }
}

/// One Euler step `x + b(x) dt + sigma(x) sqrt(dt) z`, written into `out`.
/// No admissibility check; callers enforce their own policy.
#[inline]
pub fn euler_step_into<M: Model>(
    model: &M,
    theta: &[f64],
    x: &[f64],
    dt: f64,
    z: &[f64],
    drift_buf: &mut [f64],
    sigma_buf: &mut [f64],
    out: &mut [f64],
) {
    let d = x.len();
    model.drift(theta, x, drift_buf);
    model.diffusion(x, sigma_buf);
    let sdt = dt.sqrt();
    if d == 1 {
        out[0] = x[0] + drift_buf[0] * dt + sigma_buf[0] * sdt * z[0];
    } else {
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += sigma_buf[i * d + j] * z[j];
            }
            out[i] = x[i] + drift_buf[i] * dt + sdt * noise;
        }
    }
}

/// Checked single Euler step. Errors if `x` is outside the admissible region.
pub fn euler_step<M: Model>(
    model: &M,
    theta: &[f64],
    x: &[f64],
    dt: f64,
    z: &[f64],
) -> Result<Vec<f64>, SimError> {
    if !model.admissible(x) {
        return Err(SimError::Inadmissible {
            step: 0,
            unit_time: 0,
        });
    }
    let d = x.len();
    let mut out = vec![0.0; d];
    let mut bb = vec![0.0; d];
    let mut sb = vec![0.0; d * d];
    euler_step_into(model, theta, x, dt, z, &mut bb, &mut sb, &mut out);
    Ok(out)
}

/// Simulates the hidden chain over the grid from `x_star`, retaining the
/// driving increments. An exit from the admissible region aborts with the
/// offending step index.
pub fn simulate_hidden<M: Model>(
    model: &M,
    theta: &[f64],
    grid: Grid,
    x_star: &[f64],
    key: StreamKey,
) -> Result<HiddenPath, SimError> {
    let d = model.dims().d_x;
    let n = grid.total_steps();
    let dt = grid.delta();
    let mut states = vec![0.0; (n + 1) * d];
    let mut increments = vec![0.0; n * d];
    states[..d].copy_from_slice(x_star);

    let mut rng = key.child(role::DATA_HIDDEN).rng();
    let mut bb = vec![0.0; d];
    let mut sb = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    for k in 0..n {
        let (head, tail) = states.split_at_mut((k + 1) * d);
        let x = &head[k * d..];
        if !model.admissible(x) {
            return Err(SimError::Inadmissible {
                step: k,
                unit_time: k >> grid.level,
            });
        }
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        euler_step_into(model, theta, x, dt, &z, &mut bb, &mut sb, &mut tail[..d]);
        let sdt = dt.sqrt();
        for i in 0..d {
            increments[k * d + i] = sdt * z[i];
        }
    }
    let last = &states[n * d..];
    if !model.admissible(last) {
        return Err(SimError::Inadmissible {
            step: n,
            unit_time: grid.horizon,
        });
    }
    Ok(HiddenPath {
        level: grid.level,
        d_x: d,
        states,
        increments,
    })
}

/// Simulates observation increments along a hidden path:
/// `dY_k = h(x_k) dt + sqrt(dt) xi_k` at the path's level.
pub fn simulate_observations<M: Model>(
    model: &M,
    theta: &[f64],
    hidden: &HiddenPath,
    y_star: &[f64],
    key: StreamKey,
) -> ObsRecord {
    let d_y = model.dims().d_y;
    let n = hidden.len() - 1;
    let dt = (0.5f64).powi(hidden.level as i32);
    let sdt = dt.sqrt();
    let mut increments = vec![0.0; n * d_y];
    let mut h = vec![0.0; d_y];
    let mut rng = key.child(role::DATA_OBS).rng();
    for k in 0..n {
        model.obs_drift(theta, hidden.state(k), &mut h);
        for i in 0..d_y {
            let xi: f64 = StandardNormal.sample(&mut rng);
            increments[k * d_y + i] = h[i] * dt + sdt * xi;
        }
    }
    ObsRecord {
        level: hidden.level,
        d_y,
        horizon: n >> hidden.level,
        y0: y_star.to_vec(),
        increments,
    }
}

/// Coarsens an observation record to `target` level by summing
/// `2^(native-target)` consecutive increments, left to right, so the total
/// sum is preserved with a fixed summation order.
pub fn coarsen_obs(obs: &ObsRecord, target: u32) -> Result<ObsRecord, SimError> {
    if target > obs.level {
        return Err(SimError::LevelTooFine {
            target,
            native: obs.level,
        });
    }
    if target == obs.level {
        return Ok(obs.clone());
    }
    let ratio = 1usize << (obs.level - target);
    let d = obs.d_y;
    let coarse_n = obs.count() / ratio;
    let mut increments = vec![0.0; coarse_n * d];
    for j in 0..coarse_n {
        for r in 0..ratio {
            let src = (j * ratio + r) * d;
            for i in 0..d {
                increments[j * d + i] += obs.increments[src + i];
            }
        }
    }
    Ok(ObsRecord {
        level: target,
        d_y: d,
        horizon: obs.horizon,
        y0: obs.y0.clone(),
        increments,
    })
}

/// Log-density of the Euler transition `N(x'; x + b(x) dt, dt a(x))`.
pub fn euler_transition_logdensity<M: Model>(
    model: &M,
    theta: &[f64],
    x: &[f64],
    x_next: &[f64],
    dt: f64,
) -> Result<f64, SimError> {
    let d = x.len();
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    model.drift(theta, x, &mut b);
    model.diffusion_cov(x, &mut a);
    for v in a.iter_mut() {
        *v *= dt;
    }
    if !cholesky_in_place(&mut a, d) {
        return Err(SimError::SingularCovariance);
    }
    let logdet = cholesky_logdet(&a, d);
    let mut diff = vec![0.0; d];
    for i in 0..d {
        diff[i] = x_next[i] - x[i] - b[i] * dt;
    }
    let mut solved = diff.clone();
    cholesky_solve(&a, d, &mut solved);
    let quad: f64 = diff.iter().zip(&solved).map(|(u, v)| u * v).sum();
    Ok(-0.5 * (d as f64 * LN_2PI + logdet + quad))
}

/// Loads a single-column price series (optional non-numeric header line),
/// differences it into increments, and assigns the native level implied by
/// `seconds_per_unit` (must be a power of two) readings per unit time.
pub fn load_price_csv(
    content: &str,
    seconds_per_unit: usize,
) -> Result<ObsRecord, SimError> {
    if !seconds_per_unit.is_power_of_two() {
        return Err(SimError::Data(format!(
            "seconds_per_unit must be a power of two, got {seconds_per_unit}"
        )));
    }
    let mut prices = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let t = line.trim().trim_end_matches(',');
        if t.is_empty() {
            continue;
        }
        match t.parse::<f64>() {
            Ok(v) => prices.push(v),
            Err(_) if i == 0 => continue, // header
            Err(e) => return Err(SimError::Data(format!("line {}: {e}", i + 1))),
        }
    }
    if prices.len() < 2 {
        return Err(SimError::Data("need at least two price readings".into()));
    }
    let level = seconds_per_unit.trailing_zeros();
    let horizon = (prices.len() - 1) / seconds_per_unit;
    if horizon == 0 {
        return Err(SimError::HorizonTooShort {
            have: prices.len() - 1,
            want: seconds_per_unit,
        });
    }
    let n = horizon * seconds_per_unit;
    let increments: Vec<f64> = prices.windows(2).take(n).map(|w| w[1] - w[0]).collect();
    Ok(ObsRecord {
        level,
        d_y: 1,
        horizon,
        y0: vec![prices[0]],
        increments,
    })
}
