//! Online score estimation in the state parameterization.
//!
//! One unit-time step: multinomial resampling by the block potentials,
//! Euler propagation of the blocks, the O(N^2) backward update of the
//! additive functional, and a self-normalized score estimate. The backward
//! kernel uses only the first potential and first Euler density of the new
//! block, so its cost per unit time is N^2 independent of the step count.

use crate::discretization::{coarsen_obs, ObsRecord, SimError, LN_2PI};
use crate::linalg::{cholesky_in_place, cholesky_logdet, cholesky_solve};
use crate::model::Model;
use crate::rng::{role, StreamKey};
use crate::sampling::multinomial_indices;
use crate::stats;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

/// Abstract work counters; machine-independent cost accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    /// Drift/diffusion evaluations (one per Euler or bridge step).
    pub drift_evals: u64,
    /// Transition / proposal density evaluations.
    pub density_evals: u64,
    /// Standard normal draws.
    pub normal_draws: u64,
}

impl Cost {
    pub fn total(&self) -> u64 {
        self.drift_evals + self.density_evals + self.normal_draws
    }

    pub fn accumulate(&mut self, other: &Cost) {
        self.drift_evals += other.drift_evals;
        self.density_evals += other.density_evals;
        self.normal_draws += other.normal_draws;
    }
}

/// Score estimate at a unit time, with per-step diagnostics and cumulative
/// cost counters.
#[derive(Debug, Clone)]
pub struct ScoreEstimate {
    /// Number of unit intervals incorporated (the estimate targets the
    /// cumulative score at this time).
    pub unit_time: usize,
    pub level: u32,
    pub n_particles: usize,
    pub values: Vec<f64>,
    /// ESS of the normalized forward weights at this step.
    pub ess: f64,
    /// Mean over targets of the backward-kernel weight ESS (0 at init).
    pub backward_ess: f64,
    /// Pairs assigned zero weight because reconstruction left the
    /// admissible region (bridge smoother only).
    pub pair_failures: u64,
    pub cost: Cost,
}

#[derive(Debug, Error)]
pub enum SmootherError {
    #[error("weight collapse at unit time {unit_time}")]
    WeightCollapse { unit_time: usize },
    #[error("observation record exhausted at unit time {unit_time}")]
    ObsExhausted { unit_time: usize },
    #[error("observation record at level {have}, run requires level {want}")]
    LevelMismatch { have: u32, want: u32 },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Log observation potential `h(x)^T dy - (dt/2) |h(x)|^2`.
pub fn g_log_weight<M: Model>(model: &M, theta: &[f64], x: &[f64], dy: &[f64], dt: f64) -> f64 {
    let d_y = model.dims().d_y;
    let mut h = [0.0; 8];
    debug_assert!(d_y <= 8);
    model.obs_drift(theta, x, &mut h[..d_y]);
    let mut dot = 0.0;
    let mut nrm = 0.0;
    for i in 0..d_y {
        dot += h[i] * dy[i];
        nrm += h[i] * h[i];
    }
    dot - 0.5 * dt * nrm
}

/// The additive-functional contribution of one block in the state
/// parameterization: sum over steps of
/// `(grad_b)^T a^-1 sigma dW + (grad_h)^T dY - (grad_h)^T h dt`,
/// with `states` the block states after the predecessor endpoint and
/// `increments` the retained Brownian increments.
pub fn lambda_block_direct<M: Model>(
    model: &M,
    theta: &[f64],
    x_prev_end: &[f64],
    states: &[f64],
    increments: &[f64],
    obs_block: &[f64],
    dt: f64,
) -> Vec<f64> {
    let dims = model.dims();
    let (d_x, d_y, d_th) = (dims.d_x, dims.d_y, dims.d_theta);
    let steps = increments.len() / d_x;
    let mut out = vec![0.0; d_th];
    let mut scratch = LambdaScratch::new(d_x, d_y, d_th);
    for p in 0..steps {
        let x = if p == 0 {
            x_prev_end
        } else {
            &states[(p - 1) * d_x..p * d_x]
        };
        let dw = &increments[p * d_x..(p + 1) * d_x];
        let dy = &obs_block[p * d_y..(p + 1) * d_y];
        scratch.add_f_term(model, theta, x, dw, dy, dt, &mut out);
    }
    out
}

/// Reusable buffers for per-step functional terms.
struct LambdaScratch {
    grad_b: Vec<f64>,
    grad_h: Vec<f64>,
    h: Vec<f64>,
    a: Vec<f64>,
    sigma: Vec<f64>,
    v: Vec<f64>,
}

impl LambdaScratch {
    fn new(d_x: usize, d_y: usize, d_th: usize) -> Self {
        LambdaScratch {
            grad_b: vec![0.0; d_x * d_th],
            grad_h: vec![0.0; d_y * d_th],
            h: vec![0.0; d_y],
            a: vec![0.0; d_x * d_x],
            sigma: vec![0.0; d_x * d_x],
            v: vec![0.0; d_x],
        }
    }

    /// Adds `f(x, .)` for one step: the dW term uses the retained Brownian
    /// increment; observation terms use the step's observation increment.
    fn add_f_term<M: Model>(
        &mut self,
        model: &M,
        theta: &[f64],
        x: &[f64],
        dw: &[f64],
        dy: &[f64],
        dt: f64,
        out: &mut [f64],
    ) {
        let dims = model.dims();
        let (d_x, d_y, d_th) = (dims.d_x, dims.d_y, dims.d_theta);
        model.grad_drift(theta, x, &mut self.grad_b);
        model.grad_obs_drift(theta, x, &mut self.grad_h);
        model.obs_drift(theta, x, &mut self.h);
        // v = a^-1 sigma dW
        model.diffusion(x, &mut self.sigma);
        for i in 0..d_x {
            let mut s = 0.0;
            for j in 0..d_x {
                s += self.sigma[i * d_x + j] * dw[j];
            }
            self.v[i] = s;
        }
        model.diffusion_cov(x, &mut self.a);
        if !cholesky_in_place(&mut self.a, d_x) {
            out.fill(f64::NAN);
            return;
        }
        cholesky_solve(&self.a, d_x, &mut self.v);
        for c in 0..d_th {
            let mut s = 0.0;
            for i in 0..d_x {
                s += self.grad_b[i * d_th + c] * self.v[i];
            }
            for i in 0..d_y {
                s += self.grad_h[i * d_th + c] * (dy[i] - self.h[i] * dt);
            }
            out[c] += s;
        }
    }
}

const MAX_THETA: usize = 8;

struct PropagateOut {
    endpoint: [f64; 4],
    first: [f64; 4],
    log_g: f64,
    lambda_rest: [f64; MAX_THETA],
    lambda_full: [f64; MAX_THETA],
    alive: bool,
    steps_taken: u64,
}

/// Algorithm state for the direct online smoother. `advance` consumes one
/// unit-time observation block and returns the updated cumulative score
/// estimate; theta may change between calls (recursive ML keeps the
/// particle system alive across parameter updates).
pub struct DirectSmoother<'m, M: Model> {
    model: &'m M,
    pub level: u32,
    pub n: usize,
    dt: f64,
    spu: usize,
    x_star: Vec<f64>,
    key: StreamKey,
    k: usize,
    // per-particle state
    endpoint: Vec<f64>,
    first: Vec<f64>,
    log_g: Vec<f64>,
    lambda_rest: Vec<f64>,
    f_vals: Vec<f64>,
    alive: Vec<bool>,
    // scratch
    x_check: Vec<f64>,
    f_prev: Vec<f64>,
    cost: Cost,
    lambda_override: Option<Vec<f64>>,
}

impl<'m, M: Model> DirectSmoother<'m, M> {
    pub fn new(model: &'m M, level: u32, n: usize, x_star: &[f64], key: StreamKey) -> Self {
        let dims = model.dims();
        assert!(dims.d_x <= 4 && dims.d_theta <= MAX_THETA);
        assert!(n >= 1);
        let spu = 1usize << level;
        DirectSmoother {
            model,
            level,
            n,
            dt: (0.5f64).powi(level as i32),
            spu,
            x_star: x_star.to_vec(),
            key,
            k: 0,
            endpoint: vec![0.0; n * dims.d_x],
            first: vec![0.0; n * dims.d_x],
            log_g: vec![0.0; n],
            lambda_rest: vec![0.0; n * dims.d_theta],
            f_vals: vec![0.0; n * dims.d_theta],
            alive: vec![true; n],
            x_check: vec![0.0; n * dims.d_x],
            f_prev: vec![0.0; n * dims.d_theta],
            cost: Cost::default(),
            lambda_override: None,
        }
    }

    /// Test hook: treat every block functional as the given constant vector.
    pub fn set_lambda_override(&mut self, c: Option<Vec<f64>>) {
        self.lambda_override = c;
    }

    pub fn unit_time(&self) -> usize {
        self.k
    }

    pub fn cost(&self) -> Cost {
        self.cost
    }

    /// Advances one unit time at the given theta. The observation record
    /// must be at the smoother's level.
    pub fn advance(&mut self, theta: &[f64], obs: &ObsRecord) -> Result<ScoreEstimate, SmootherError> {
        self.advance_block(theta, obs, self.k)
    }

    /// Like `advance` but consuming the given observation block; drivers
    /// that rebuild a system mid-stream keep their own data position.
    pub fn advance_block(
        &mut self,
        theta: &[f64],
        obs: &ObsRecord,
        block: usize,
    ) -> Result<ScoreEstimate, SmootherError> {
        if obs.level != self.level {
            return Err(SmootherError::LevelMismatch {
                have: obs.level,
                want: self.level,
            });
        }
        if block >= obs.horizon {
            return Err(SmootherError::ObsExhausted { unit_time: block });
        }
        let d_x = self.model.dims().d_x;
        let d_th = self.model.dims().d_theta;
        let k = self.k;
        let obs_block = obs.block(block).to_vec();

        let mut backward_ess = 0.0;
        if k == 0 {
            for i in 0..self.n {
                self.x_check[i * d_x..(i + 1) * d_x].copy_from_slice(&self.x_star);
            }
            self.propagate(theta, &obs_block);
            // F_0 = Lambda_0 on each initial block
            for i in 0..self.n {
                if !self.alive[i] {
                    self.f_vals[i * d_th..(i + 1) * d_th].fill(0.0);
                }
            }
            // f_vals were filled by propagate with lambda_full
        } else {
            self.resample()?;
            self.propagate(theta, &obs_block);
            backward_ess = self.backward_update(theta, &obs_block);
        }

        self.k += 1;
        self.estimate(backward_ess)
    }

    fn resample(&mut self) -> Result<(), SmootherError> {
        let d_x = self.model.dims().d_x;
        let d_th = self.model.dims().d_theta;
        let mut w = self.log_g.clone();
        if stats::normalize_log_weights(&mut w).is_none() {
            return Err(SmootherError::WeightCollapse { unit_time: self.k });
        }
        let mut rng = self
            .key
            .child(role::RESAMPLE)
            .child(self.level as u64)
            .child(self.k as u64)
            .rng();
        let idx = multinomial_indices(&w, self.n, &mut rng);
        for (i, &j) in idx.iter().enumerate() {
            self.x_check[i * d_x..(i + 1) * d_x]
                .copy_from_slice(&self.endpoint[j * d_x..(j + 1) * d_x]);
            self.f_prev[i * d_th..(i + 1) * d_th]
                .copy_from_slice(&self.f_vals[j * d_th..(j + 1) * d_th]);
        }
        Ok(())
    }

    fn propagate(&mut self, theta: &[f64], obs_block: &[f64]) {
        let dims = self.model.dims();
        let (d_x, d_y, d_th) = (dims.d_x, dims.d_y, dims.d_theta);
        let (model, spu, dt, level, k) = (self.model, self.spu, self.dt, self.level, self.k);
        let key = self.key;
        let x_check = &self.x_check;
        let lambda_override = self.lambda_override.as_deref();

        let out: Vec<PropagateOut> = (0..self.n)
            .into_par_iter()
            .map_init(
                || (LambdaScratch::new(d_x, d_y, d_th), vec![0.0; 3 * d_x + d_x * d_x]),
                |(lsc, buf), i| {
                    let (bb, rest) = buf.split_at_mut(d_x);
                    let (zb, rest) = rest.split_at_mut(d_x);
                    let (xn, sb) = rest.split_at_mut(d_x);
                    let mut rng = key
                        .child(role::PROPAGATE)
                        .child(level as u64)
                        .child(k as u64)
                        .child(i as u64)
                        .rng();
                    let mut o = PropagateOut {
                        endpoint: [0.0; 4],
                        first: [0.0; 4],
                        log_g: f64::NEG_INFINITY,
                        lambda_rest: [0.0; MAX_THETA],
                        lambda_full: [0.0; MAX_THETA],
                        alive: true,
                        steps_taken: 0,
                    };
                    let mut x = [0.0; 4];
                    x[..d_x].copy_from_slice(&x_check[i * d_x..(i + 1) * d_x]);
                    let mut log_g = 0.0;
                    let mut lam = [0.0; MAX_THETA];
                    let sdt = dt.sqrt();
                    for p in 0..spu {
                        let dy = &obs_block[p * d_y..(p + 1) * d_y];
                        log_g += g_log_weight(model, theta, &x[..d_x], dy, dt);
                        for z in zb.iter_mut() {
                            *z = StandardNormal.sample(&mut rng);
                        }
                        crate::discretization::euler_step_into(
                            model,
                            theta,
                            &x[..d_x],
                            dt,
                            zb,
                            bb,
                            sb,
                            xn,
                        );
                        o.steps_taken += 1;
                        let mut f_term = [0.0; MAX_THETA];
                        // Brownian increment: sqrt(dt) z
                        let mut dw = [0.0; 4];
                        for c in 0..d_x {
                            dw[c] = sdt * zb[c];
                        }
                        lsc.add_f_term(
                            model,
                            theta,
                            &x[..d_x],
                            &dw[..d_x],
                            dy,
                            dt,
                            &mut f_term[..d_th],
                        );
                        for c in 0..d_th {
                            lam[c] += f_term[c];
                        }
                        if p == 0 {
                            o.first[..d_x].copy_from_slice(xn);
                            // lambda_rest excludes the first-step term so the
                            // backward pass can swap in cross-pair versions
                            for c in 0..d_th {
                                o.lambda_rest[c] = -f_term[c];
                            }
                        }
                        if !model.admissible(xn) {
                            o.alive = false;
                            break;
                        }
                        x[..d_x].copy_from_slice(xn);
                    }
                    if o.alive {
                        o.endpoint[..d_x].copy_from_slice(&x[..d_x]);
                        o.log_g = log_g;
                        for c in 0..d_th {
                            o.lambda_full[c] = lam[c];
                            o.lambda_rest[c] += lam[c];
                        }
                        if let Some(c0) = lambda_override {
                            for c in 0..d_th {
                                o.lambda_full[c] = c0[c];
                                o.lambda_rest[c] = c0[c];
                            }
                        }
                    }
                    o
                },
            )
            .collect();

        for (i, o) in out.iter().enumerate() {
            self.alive[i] = o.alive;
            self.log_g[i] = o.log_g;
            self.endpoint[i * d_x..(i + 1) * d_x].copy_from_slice(&o.endpoint[..d_x]);
            self.first[i * d_x..(i + 1) * d_x].copy_from_slice(&o.first[..d_x]);
            self.lambda_rest[i * d_th..(i + 1) * d_th].copy_from_slice(&o.lambda_rest[..d_th]);
            if self.k == 0 {
                self.f_vals[i * d_th..(i + 1) * d_th].copy_from_slice(&o.lambda_full[..d_th]);
            }
            self.cost.drift_evals += o.steps_taken;
            self.cost.normal_draws += o.steps_taken * d_x as u64;
        }
    }

    /// The O(N^2) functional update with the cancelled kernel: source
    /// weights `g_k(x_check_j) m(x_check_j, first_i)`. Returns the mean
    /// backward-weight ESS.
    fn backward_update(&mut self, theta: &[f64], obs_block: &[f64]) -> f64 {
        let dims = self.model.dims();
        let (d_x, d_y, d_th) = (dims.d_x, dims.d_y, dims.d_theta);
        let n = self.n;
        let model = self.model;
        let dt = self.dt;
        let dy0 = &obs_block[..d_y];
        let lambda_override = self.lambda_override.is_some();

        // Per-source precomputation at the resampled endpoints.
        let mut src_ok = vec![false; n];
        let mut base = vec![f64::NEG_INFINITY; n]; // log g_j - (d ln 2pi + logdet)/2
        let mut mean = vec![0.0; n * d_x];
        let mut chol = vec![0.0; n * d_x * d_x];
        let mut coef = vec![0.0; n * d_th * d_x]; // (grad_b)^T a^-1 at x_check_j
        let mut f0_obs = vec![0.0; n * d_th];
        {
            let mut b = vec![0.0; d_x];
            let mut a = vec![0.0; d_x * d_x];
            let mut gb = vec![0.0; d_x * d_th];
            let mut gh = vec![0.0; d_y * d_th];
            let mut h = vec![0.0; d_y];
            let mut col = vec![0.0; d_x];
            for j in 0..n {
                // Sources are the resampled predecessor endpoints; these are
                // admissible by construction (dead blocks carry zero weight).
                let xj = &self.x_check[j * d_x..(j + 1) * d_x];
                if !model.admissible(xj) {
                    continue;
                }
                model.drift(theta, xj, &mut b);
                model.diffusion_cov(xj, &mut a);
                for v in a.iter_mut() {
                    *v *= dt;
                }
                if !cholesky_in_place(&mut a, d_x) {
                    continue;
                }
                src_ok[j] = true;
                let logdet = cholesky_logdet(&a, d_x);
                base[j] = g_log_weight(model, theta, xj, dy0, dt)
                    - 0.5 * (d_x as f64 * LN_2PI + logdet);
                for c in 0..d_x {
                    mean[j * d_x + c] = xj[c] + b[c] * dt;
                }
                chol[j * d_x * d_x..(j + 1) * d_x * d_x].copy_from_slice(&a);
                if !lambda_override {
                    // coef = (grad_b)^T (dt a)^-1 dt = (grad_b)^T a^-1
                    model.grad_drift(theta, xj, &mut gb);
                    for c in 0..d_th {
                        for r in 0..d_x {
                            col[r] = gb[r * d_th + c] * dt;
                        }
                        cholesky_solve(&a, d_x, &mut col);
                        for r in 0..d_x {
                            coef[(j * d_th + c) * d_x + r] = col[r];
                        }
                    }
                    model.grad_obs_drift(theta, xj, &mut gh);
                    model.obs_drift(theta, xj, &mut h);
                    for c in 0..d_th {
                        let mut s = 0.0;
                        for r in 0..d_y {
                            s += gh[r * d_th + c] * (dy0[r] - h[r] * dt);
                        }
                        f0_obs[j * d_th + c] = s;
                    }
                }
            }
        }

        let f_prev = &self.f_prev;
        let first = &self.first;
        let lambda_rest = &self.lambda_rest;
        let alive = &self.alive;

        let results: Vec<([f64; MAX_THETA], f64, u64)> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![f64::NEG_INFINITY; n], vec![0.0; d_x]),
                |(logw, sol), i| {
                    if !alive[i] {
                        return ([0.0; MAX_THETA], 0.0, 0u64);
                    }
                    let xi = &first[i * d_x..(i + 1) * d_x];
                    let mut max_lw = f64::NEG_INFINITY;
                    let mut evals = 0u64;
                    for j in 0..n {
                        if !src_ok[j] {
                            logw[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let lj = &chol[j * d_x * d_x..(j + 1) * d_x * d_x];
                        let mut quad = 0.0;
                        if d_x == 1 {
                            let r = (xi[0] - mean[j]) / lj[0];
                            quad = r * r;
                        } else {
                            for r in 0..d_x {
                                sol[r] = xi[r] - mean[j * d_x + r];
                            }
                            cholesky_solve(lj, d_x, sol);
                            for r in 0..d_x {
                                quad += sol[r] * (xi[r] - mean[j * d_x + r]);
                            }
                        }
                        let lw = base[j] - 0.5 * quad;
                        logw[j] = lw;
                        if lw > max_lw {
                            max_lw = lw;
                        }
                        evals += 1;
                    }
                    if !max_lw.is_finite() {
                        return ([0.0; MAX_THETA], 0.0, evals);
                    }
                    let mut num = [0.0; MAX_THETA];
                    let mut den = 0.0;
                    let mut sq = 0.0;
                    for j in 0..n {
                        let lw = logw[j];
                        if lw == f64::NEG_INFINITY {
                            continue;
                        }
                        let w = (lw - max_lw).exp();
                        den += w;
                        sq += w * w;
                        if lambda_override {
                            for c in 0..d_th {
                                num[c] += w * f_prev[j * d_th + c];
                            }
                        } else {
                            for c in 0..d_th {
                                let mut cross = f0_obs[j * d_th + c];
                                for r in 0..d_x {
                                    cross += coef[(j * d_th + c) * d_x + r]
                                        * (xi[r] - mean[j * d_x + r]);
                                }
                                num[c] += w * (f_prev[j * d_th + c] + cross);
                            }
                        }
                    }
                    let mut f_new = [0.0; MAX_THETA];
                    for c in 0..d_th {
                        f_new[c] = lambda_rest[i * d_th + c] + num[c] / den;
                    }
                    (f_new, den * den / sq, evals)
                },
            )
            .collect();

        let mut ess_sum = 0.0;
        let mut ess_count = 0usize;
        for (i, (f_new, bess, evals)) in results.iter().enumerate() {
            self.cost.density_evals += evals;
            if !self.alive[i] {
                self.f_vals[i * d_th..(i + 1) * d_th].fill(0.0);
                continue;
            }
            self.f_vals[i * d_th..(i + 1) * d_th].copy_from_slice(&f_new[..d_th]);
            ess_sum += bess;
            ess_count += 1;
        }
        if ess_count > 0 {
            ess_sum / ess_count as f64
        } else {
            0.0
        }
    }

    fn estimate(&self, backward_ess: f64) -> Result<ScoreEstimate, SmootherError> {
        let d_th = self.model.dims().d_theta;
        let (values, w) = stats::self_normalized_estimate(&self.log_g, &self.f_vals, d_th)
            .ok_or(SmootherError::WeightCollapse {
                unit_time: self.k - 1,
            })?;
        Ok(ScoreEstimate {
            unit_time: self.k,
            level: self.level,
            n_particles: self.n,
            values,
            ess: stats::ess(&w),
            backward_ess,
            pair_failures: 0,
            cost: self.cost,
        })
    }
}

/// Runs the direct smoother for `horizon` unit times at fixed theta,
/// returning one estimate per unit time. The observation record is
/// coarsened to the requested level if finer.
pub fn run_alg1<M: Model>(
    model: &M,
    theta: &[f64],
    obs: &ObsRecord,
    level: u32,
    n_particles: usize,
    horizon: usize,
    x_star: &[f64],
    key: StreamKey,
) -> Result<Vec<ScoreEstimate>, SmootherError> {
    let obs = coarsen_obs(obs, level)?;
    if obs.horizon < horizon {
        return Err(SmootherError::ObsExhausted {
            unit_time: obs.horizon,
        });
    }
    let mut sm = DirectSmoother::new(model, level, n_particles, x_star, key);
    (0..horizon).map(|_| sm.advance(theta, &obs)).collect()
}
