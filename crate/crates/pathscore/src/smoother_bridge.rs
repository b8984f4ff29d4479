//! Online score estimation in the bridge parameterization.
//!
//! Particles carry Brownian increments and a proposed endpoint instead of a
//! state path; the path is a deterministic reconstruction. The backward
//! functional update re-solves the bridge recursion for every source/target
//! pair, so the cost per unit time is O(N^2 / dt); in exchange the kernel
//! involves no Euler transition density and does not degenerate as the mesh
//! refines.

use crate::bridge::{eval_bridge_block, eval_bridge_block_batch, Aux, LANES, MAX_THETA};
use crate::discretization::{coarsen_obs, ObsRecord};
use crate::model::Model;
use crate::rng::{role, StreamKey};
use crate::sampling::multinomial_indices;
use crate::smoother_direct::{Cost, ScoreEstimate, SmootherError};
use crate::stats;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Per-level particle arrays shared by the single-level smoother and the
/// coupled multilevel filter. The driver fills `x_check`, `increments` and
/// `endpoint`, then runs the fused evaluations.
pub(crate) struct LevelState {
    pub level: u32,
    pub n: usize,
    pub dt: f64,
    pub spu: usize,
    pub d_theta: usize,
    pub x_check: Vec<f64>,
    pub f_prev: Vec<f64>,
    pub increments: Vec<f64>,
    pub endpoint: Vec<f64>,
    pub log_g: Vec<f64>,
    pub lambda_self: Vec<f64>,
    pub f_vals: Vec<f64>,
    pub alive: Vec<bool>,
    pub pair_failures: u64,
    pub cost: Cost,
    pub lambda_override: Option<Vec<f64>>,
}

impl LevelState {
    pub fn new(level: u32, n: usize, d_theta: usize) -> Self {
        let spu = 1usize << level;
        LevelState {
            level,
            n,
            dt: (0.5f64).powi(level as i32),
            spu,
            d_theta,
            x_check: vec![0.0; n],
            f_prev: vec![0.0; n * d_theta],
            increments: vec![0.0; n * (spu - 1).max(1)],
            endpoint: vec![0.0; n],
            log_g: vec![f64::NEG_INFINITY; n],
            lambda_self: vec![0.0; n * d_theta],
            f_vals: vec![0.0; n * d_theta],
            alive: vec![true; n],
            pair_failures: 0,
            cost: Cost::default(),
            lambda_override: None,
        }
    }

    fn increments_of_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.spu - 1;
        &mut self.increments[i * w..(i + 1) * w]
    }

    /// Gathers resampled predecessors: `x_check` from endpoints and
    /// `f_prev` from functional values, by index.
    pub fn gather(&mut self, idx: &[usize]) {
        let d = self.d_theta;
        let mut xc = vec![0.0; self.n];
        let mut fp = vec![0.0; self.n * d];
        for (i, &j) in idx.iter().enumerate() {
            xc[i] = self.endpoint[j];
            fp[i * d..(i + 1) * d].copy_from_slice(&self.f_vals[j * d..(j + 1) * d]);
        }
        self.x_check = xc;
        self.f_prev = fp;
    }

    /// Normalized forward weights (self potentials), or None on collapse.
    pub fn forward_weights(&self) -> Option<Vec<f64>> {
        let mut w = self.log_g.clone();
        stats::normalize_log_weights(&mut w).map(|_| w)
    }

    /// Evaluates each particle's own block: fills `log_g` and
    /// `lambda_self`. Failed reconstructions become dead particles.
    pub fn eval_self<M: Model, A: Aux>(
        &mut self,
        model: &M,
        aux: &A,
        theta: &[f64],
        obs_block: &[f64],
    ) {
        let w = self.spu - 1;
        let (dt, spu) = (self.dt, self.spu);
        let d_th = self.d_theta;
        let x_check = &self.x_check;
        let increments = &self.increments;
        let endpoint = &self.endpoint;
        let results: Vec<(f64, [f64; MAX_THETA], bool)> = (0..self.n)
            .into_par_iter()
            .map(|i| {
                match eval_bridge_block(
                    model,
                    aux,
                    theta,
                    x_check[i],
                    &increments[i * w..(i + 1) * w],
                    endpoint[i],
                    obs_block,
                    dt,
                ) {
                    Some(f) => (f.log_g, f.lambda, true),
                    None => (f64::NEG_INFINITY, [0.0; MAX_THETA], false),
                }
            })
            .collect();
        for (i, (lg, lam, ok)) in results.into_iter().enumerate() {
            self.alive[i] = ok;
            self.log_g[i] = lg;
            let dst = &mut self.lambda_self[i * d_th..(i + 1) * d_th];
            if let Some(c) = &self.lambda_override {
                dst.copy_from_slice(c);
            } else {
                dst.copy_from_slice(&lam[..d_th]);
            }
            self.cost.drift_evals += spu as u64;
            self.cost.density_evals += 2;
        }
    }

    /// Sets `f_vals` from the particles' own block functionals (the first
    /// unit time, where `F_0 = Lambda_0`).
    pub fn seed_f_from_lambda(&mut self) {
        self.f_vals.copy_from_slice(&self.lambda_self);
        for i in 0..self.n {
            if !self.alive[i] {
                self.f_vals[i * self.d_theta..(i + 1) * self.d_theta].fill(0.0);
            }
        }
    }

    /// The O(N^2) backward update: for every target i the block is
    /// re-reconstructed from each resampled source endpoint with particle
    /// i's increments and endpoint. Pair weights are
    /// `exp(Phi_pair) p_hat(source, endpoint_i)`; failed pairs get zero
    /// weight and are counted. Returns the mean backward-weight ESS.
    pub fn backward<M: Model, A: Aux>(
        &mut self,
        model: &M,
        aux: &A,
        theta: &[f64],
        obs_block: &[f64],
    ) -> f64 {
        let n = self.n;
        let w = self.spu - 1;
        let (dt, spu) = (self.dt, self.spu);
        let d_th = self.d_theta;
        let x_check = &self.x_check;
        let increments = &self.increments;
        let endpoint = &self.endpoint;
        let f_prev = &self.f_prev;
        let alive = &self.alive;
        let override_lambda = self.lambda_override.as_deref();

        let results: Vec<([f64; MAX_THETA], f64, u64, u64)> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![f64::NEG_INFINITY; n], vec![0.0; n * d_th]),
                |(logw, lams), i| {
                    if !alive[i] {
                        return ([0.0; MAX_THETA], 0.0, 0u64, 0u64);
                    }
                    let zi = &increments[i * w..(i + 1) * w];
                    let ei = endpoint[i];
                    let mut failures = 0u64;
                    let mut max_lw = f64::NEG_INFINITY;
                    let mut batch_out: [Option<crate::bridge::BlockFunctionals>; LANES] =
                        [None; LANES];
                    for chunk in 0..n.div_ceil(LANES) {
                        let base = chunk * LANES;
                        let width = LANES.min(n - base);
                        let mut starts = [x_check[base]; LANES];
                        for (lane, s) in starts.iter_mut().enumerate().take(width) {
                            *s = x_check[base + lane];
                        }
                        eval_bridge_block_batch(
                            model, aux, theta, &starts, zi, ei, obs_block, dt,
                            &mut batch_out,
                        );
                        for (lane, f) in batch_out.iter().enumerate().take(width) {
                            let j = base + lane;
                            match f {
                                Some(f) => {
                                    let lw =
                                        f.log_g + aux.endpoint_logpdf(theta, x_check[j], ei);
                                    logw[j] = lw;
                                    if let Some(c) = override_lambda {
                                        lams[j * d_th..(j + 1) * d_th].copy_from_slice(c);
                                    } else {
                                        lams[j * d_th..(j + 1) * d_th]
                                            .copy_from_slice(&f.lambda[..d_th]);
                                    }
                                    if lw > max_lw {
                                        max_lw = lw;
                                    }
                                }
                                None => {
                                    logw[j] = f64::NEG_INFINITY;
                                    failures += 1;
                                }
                            }
                        }
                    }
                    if !max_lw.is_finite() {
                        return ([0.0; MAX_THETA], 0.0, failures, (n * spu) as u64);
                    }
                    let mut num = [0.0; MAX_THETA];
                    let mut den = 0.0;
                    let mut sq = 0.0;
                    for j in 0..n {
                        let lw = logw[j];
                        if lw == f64::NEG_INFINITY {
                            continue;
                        }
                        let wgt = (lw - max_lw).exp();
                        den += wgt;
                        sq += wgt * wgt;
                        for c in 0..d_th {
                            num[c] += wgt * (f_prev[j * d_th + c] + lams[j * d_th + c]);
                        }
                    }
                    let mut f_new = [0.0; MAX_THETA];
                    for c in 0..d_th {
                        f_new[c] = num[c] / den;
                    }
                    (f_new, den * den / sq, failures, (n * spu) as u64)
                },
            )
            .collect();

        let mut ess_sum = 0.0;
        let mut ess_cnt = 0usize;
        for (i, (f_new, bess, failures, steps)) in results.iter().enumerate() {
            self.pair_failures += failures;
            self.cost.drift_evals += steps;
            self.cost.density_evals += 3 * self.n as u64;
            if !self.alive[i] {
                self.f_vals[i * d_th..(i + 1) * d_th].fill(0.0);
                continue;
            }
            self.f_vals[i * d_th..(i + 1) * d_th].copy_from_slice(&f_new[..d_th]);
            ess_sum += *bess;
            ess_cnt += 1;
        }
        if ess_cnt > 0 {
            ess_sum / ess_cnt as f64
        } else {
            0.0
        }
    }

    /// Self-normalized estimate over the current particles.
    pub fn estimate(&self) -> Option<(Vec<f64>, f64)> {
        let (values, w) =
            stats::self_normalized_estimate(&self.log_g, &self.f_vals, self.d_theta)?;
        Some((values, stats::ess(&w)))
    }
}

/// Algorithm state for the bridge online smoother.
pub struct BridgeSmoother<'m, M: Model, A: Aux> {
    model: &'m M,
    aux: &'m A,
    state: LevelState,
    x_star: f64,
    key: StreamKey,
    k: usize,
}

impl<'m, M: Model, A: Aux> BridgeSmoother<'m, M, A> {
    pub fn new(
        model: &'m M,
        aux: &'m A,
        level: u32,
        n: usize,
        x_star: f64,
        key: StreamKey,
    ) -> Self {
        let dims = model.dims();
        assert_eq!(dims.d_x, 1, "bridge smoother supports scalar state");
        assert!(n >= 1);
        BridgeSmoother {
            model,
            aux,
            state: LevelState::new(level, n, dims.d_theta),
            x_star,
            key,
            k: 0,
        }
    }

    pub fn set_lambda_override(&mut self, c: Option<Vec<f64>>) {
        self.state.lambda_override = c;
    }

    pub fn unit_time(&self) -> usize {
        self.k
    }

    pub fn cost(&self) -> Cost {
        self.state.cost
    }

    fn propose(&mut self, theta: &[f64]) {
        let n = self.state.n;
        let sdt = self.state.dt.sqrt();
        let (level, k) = (self.state.level, self.k);
        let key = self.key;
        let aux = self.aux;
        let x_check = self.state.x_check.clone();
        let w = self.state.spu - 1;
        let proposals: Vec<(Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = key
                    .child(role::PROPAGATE)
                    .child(level as u64)
                    .child(k as u64)
                    .child(i as u64)
                    .rng();
                let z: Vec<f64> = (0..w)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v * sdt
                    })
                    .collect();
                let e = aux.endpoint_sample(theta, x_check[i], &mut rng);
                (z, e)
            })
            .collect();
        for (i, (z, e)) in proposals.into_iter().enumerate() {
            self.state.increments_of_mut(i).copy_from_slice(&z);
            self.state.endpoint[i] = e;
            self.state.cost.normal_draws += (w + 1) as u64;
        }
    }

    pub fn advance(&mut self, theta: &[f64], obs: &ObsRecord) -> Result<ScoreEstimate, SmootherError> {
        self.advance_block(theta, obs, self.k)
    }

    /// Like `advance` but consuming the given observation block.
    pub fn advance_block(
        &mut self,
        theta: &[f64],
        obs: &ObsRecord,
        block: usize,
    ) -> Result<ScoreEstimate, SmootherError> {
        if obs.level != self.state.level {
            return Err(SmootherError::LevelMismatch {
                have: obs.level,
                want: self.state.level,
            });
        }
        if block >= obs.horizon {
            return Err(SmootherError::ObsExhausted { unit_time: block });
        }
        let obs_block = obs.block(block).to_vec();
        let failures_before = self.state.pair_failures;
        let mut backward_ess = 0.0;

        if self.k == 0 {
            self.state.x_check.fill(self.x_star);
            self.propose(theta);
            self.state.eval_self(self.model, self.aux, theta, &obs_block);
            self.state.seed_f_from_lambda();
        } else {
            let weights = self
                .state
                .forward_weights()
                .ok_or(SmootherError::WeightCollapse { unit_time: self.k })?;
            let mut rng = self
                .key
                .child(role::RESAMPLE)
                .child(self.state.level as u64)
                .child(self.k as u64)
                .rng();
            let idx = multinomial_indices(&weights, self.state.n, &mut rng);
            self.state.gather(&idx);
            self.propose(theta);
            self.state.eval_self(self.model, self.aux, theta, &obs_block);
            backward_ess = self.state.backward(self.model, self.aux, theta, &obs_block);
        }

        self.k += 1;
        let (values, ess) = self
            .state
            .estimate()
            .ok_or(SmootherError::WeightCollapse {
                unit_time: self.k - 1,
            })?;
        Ok(ScoreEstimate {
            unit_time: self.k,
            level: self.state.level,
            n_particles: self.state.n,
            values,
            ess,
            backward_ess,
            pair_failures: self.state.pair_failures - failures_before,
            cost: self.state.cost,
        })
    }
}

/// Runs the bridge smoother for `horizon` unit times at fixed theta.
pub fn run_alg3<M: Model, A: Aux>(
    model: &M,
    aux: &A,
    theta: &[f64],
    obs: &ObsRecord,
    level: u32,
    n_particles: usize,
    horizon: usize,
    x_star: f64,
    key: StreamKey,
) -> Result<Vec<ScoreEstimate>, SmootherError> {
    let obs = coarsen_obs(obs, level)?;
    if obs.horizon < horizon {
        return Err(SmootherError::ObsExhausted {
            unit_time: obs.horizon,
        });
    }
    let mut sm = BridgeSmoother::new(model, aux, level, n_particles, x_star, key);
    (0..horizon).map(|_| sm.advance(theta, &obs)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::ConstSigmaAux;
    use crate::discretization::{simulate_hidden, simulate_observations, Grid};
    use crate::model::{builtin_model, BuiltinModel, FixedParams};

    fn model1() -> (BuiltinModel, ConstSigmaAux) {
        let m = builtin_model(1, &FixedParams::new().with("kappa", 2.0).with("sigma", 0.3))
            .unwrap();
        (m, ConstSigmaAux::new(0.3))
    }

    fn obs_for(model: &BuiltinModel, theta: &[f64], level: u32, horizon: usize, seed: u64) -> ObsRecord {
        let key = StreamKey::root(seed);
        let grid = Grid::new(level, horizon);
        let hidden = simulate_hidden(model, theta, grid, &[0.2], key).unwrap();
        simulate_observations(model, theta, &hidden, &[0.0], key)
    }

    #[test]
    fn single_particle_estimate_is_lambda() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 3, 1, 31);
        let est = run_alg3(&m, &aux, &theta, &obs, 3, 1, 1, 0.2, StreamKey::root(32)).unwrap();
        // N=1: the self-normalized estimate equals the particle's Lambda.
        assert_eq!(est.len(), 1);
        assert!(est[0].values.iter().all(|v| v.is_finite()));
        assert!((est[0].ess - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_functional_recursion() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let horizon = 4;
        let obs = obs_for(&m, &theta, 2, horizon, 33);
        let mut sm = BridgeSmoother::new(&m, &aux, 2, 24, 0.2, StreamKey::root(34));
        sm.set_lambda_override(Some(vec![0.5, 2.0]));
        for k in 0..horizon {
            let est = sm.advance(&theta, &obs).unwrap();
            let expect = (k + 1) as f64;
            assert!(
                (est.values[0] - 0.5 * expect).abs() < 1e-9,
                "k={k}: {:?}",
                est.values
            );
            assert!((est.values[1] - 2.0 * expect).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 4, 3, 35);
        let a = run_alg3(&m, &aux, &theta, &obs, 4, 30, 3, 0.2, StreamKey::root(36)).unwrap();
        let b = run_alg3(&m, &aux, &theta, &obs, 4, 30, 3, 0.2, StreamKey::root(36)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn cost_counter_doubles_per_level() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 9, 2, 37);
        let c8 = run_alg3(&m, &aux, &theta, &obs, 8, 20, 2, 0.2, StreamKey::root(38))
            .unwrap()
            .last()
            .unwrap()
            .cost;
        let c9 = run_alg3(&m, &aux, &theta, &obs, 9, 20, 2, 0.2, StreamKey::root(38))
            .unwrap()
            .last()
            .unwrap()
            .cost;
        let ratio = c9.drift_evals as f64 / c8.drift_evals as f64;
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn t1_reduces_to_init() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 3, 1, 39);
        let est = run_alg3(&m, &aux, &theta, &obs, 3, 16, 1, 0.2, StreamKey::root(40)).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est[0].backward_ess, 0.0);
    }

    #[test]
    fn backward_kernel_sees_mid_block_observations() {
        // Perturbing an observation increment inside the block changes the
        // backward pair weight (no cancellation in the bridge kernel).
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let horizon = 2;
        let obs = obs_for(&m, &theta, 3, horizon, 41);
        let run = |obs: &ObsRecord| {
            run_alg3(&m, &aux, &theta, obs, 3, 8, 2, 0.2, StreamKey::root(42))
                .unwrap()
                .last()
                .unwrap()
                .clone()
        };
        let base = run(&obs);
        let mut perturbed = obs.clone();
        // middle of block 1 (affects only J/Lambda inside the second block)
        let mid = 8 + 4;
        perturbed.increments[mid] += 0.37;
        let alt = run(&perturbed);
        assert!(
            (base.values[0] - alt.values[0]).abs() > 1e-12
                || (base.values[1] - alt.values[1]).abs() > 1e-12,
            "mid-block observation perturbation must reach the kernel"
        );
    }
}
