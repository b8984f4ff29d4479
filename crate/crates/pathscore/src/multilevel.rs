//! Coupled fine/coarse score estimation and the multilevel combination.
//!
//! A coupled run at level l drives two bridge-parameterization particle
//! systems, at levels l and l-1, through shared randomness: the fine
//! Brownian increments are summed pairwise into the coarse ones, resampling
//! indices are drawn from a maximal coupling of the two weight vectors, and
//! endpoints from a maximal coupling of the two proposal densities. Each
//! marginal system is law-identical to a single-level run; the emitted
//! difference estimates have variance decaying with l, which the multilevel
//! combination converts into a cheaper cost/error frontier.

use crate::bridge::Aux;
use crate::discretization::{coarsen_obs, ObsRecord};
use crate::model::Model;
use crate::rng::{role, StreamKey};
use crate::smoother_bridge::{BridgeSmoother, LevelState};
use crate::smoother_direct::{Cost, ScoreEstimate, SmootherError};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlError {
    #[error("levels must satisfy l_star <= top, got l_star {l_star} top {top}")]
    BadLevels { l_star: u32, top: u32 },
    #[error("endpoint coupling rejection loop exceeded {0} iterations")]
    CouplingOverflow(u64),
    #[error("missing level {0} in multilevel combination")]
    MissingLevel(u32),
    #[error("length mismatch between level runs")]
    LengthMismatch,
    #[error(transparent)]
    Smoother(#[from] SmootherError),
}

const ENDPOINT_COUPLING_CAP: u64 = 1_000_000;

/// Draws a pair of indices from the maximal coupling of two categorical
/// distributions: marginals are exact and `P(i = j) = sum_k min(p_k, q_k)`.
pub fn maximal_coupling_indices<R: Rng>(p: &[f64], q: &[f64], rng: &mut R) -> (usize, usize) {
    IndexCoupler::new(p, q).sample(rng)
}

/// Precomputed tables for repeated draws from the maximal coupling of two
/// fixed weight vectors.
pub struct IndexCoupler {
    overlap_cdf: Vec<f64>,
    overlap_mass: f64,
    resid_p_cdf: Vec<f64>,
    resid_q_cdf: Vec<f64>,
}

impl IndexCoupler {
    pub fn new(p: &[f64], q: &[f64]) -> Self {
        assert_eq!(p.len(), q.len());
        let sp: f64 = p.iter().sum();
        let sq: f64 = q.iter().sum();
        let mut overlap_cdf = Vec::with_capacity(p.len());
        let mut resid_p_cdf = Vec::with_capacity(p.len());
        let mut resid_q_cdf = Vec::with_capacity(p.len());
        let (mut co, mut cp, mut cq) = (0.0, 0.0, 0.0);
        for (pi, qi) in p.iter().zip(q) {
            let (pi, qi) = (pi / sp, qi / sq);
            let m = pi.min(qi);
            co += m;
            cp += pi - m;
            cq += qi - m;
            overlap_cdf.push(co);
            resid_p_cdf.push(cp);
            resid_q_cdf.push(cq);
        }
        IndexCoupler {
            overlap_cdf,
            overlap_mass: co,
            resid_p_cdf,
            resid_q_cdf,
        }
    }

    /// Probability the two indices coincide.
    pub fn meet_probability(&self) -> f64 {
        self.overlap_mass
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.gen();
        if u < self.overlap_mass || self.overlap_mass >= 1.0 - 1e-12 {
            let i = draw_from_cdf(&self.overlap_cdf, rng);
            (i, i)
        } else {
            let i = draw_from_cdf(&self.resid_p_cdf, rng);
            let j = draw_from_cdf(&self.resid_q_cdf, rng);
            (i, j)
        }
    }
}

fn draw_from_cdf<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let total = *cdf.last().unwrap();
    let u: f64 = rng.gen::<f64>() * total;
    match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) | Err(i) => i.min(cdf.len() - 1),
    }
}

/// Samples the maximal coupling of the endpoint proposals from two source
/// points, by accept/reject on the density ratio: the components coincide
/// with probability `1 - TV`. Marginals are exact.
pub fn maximal_coupling_endpoints<A: Aux, R: Rng>(
    aux: &A,
    theta: &[f64],
    x_fine: f64,
    x_coarse: f64,
    rng: &mut R,
) -> Result<(f64, f64, bool), MlError> {
    let x = aux.endpoint_sample(theta, x_fine, rng);
    let u: f64 = rng.gen();
    let lp1 = aux.endpoint_logpdf(theta, x_fine, x);
    let lp2 = aux.endpoint_logpdf(theta, x_coarse, x);
    if u.ln() <= lp2 - lp1 {
        return Ok((x, x, true));
    }
    for _ in 0..ENDPOINT_COUPLING_CAP {
        let y = aux.endpoint_sample(theta, x_coarse, rng);
        let v: f64 = rng.gen();
        let l1 = aux.endpoint_logpdf(theta, x_fine, y);
        let l2 = aux.endpoint_logpdf(theta, x_coarse, y);
        if v.ln() > l1 - l2 {
            return Ok((x, y, false));
        }
    }
    Err(MlError::CouplingOverflow(ENDPOINT_COUPLING_CAP))
}

/// Level schedule and per-level particle counts for a multilevel run, for
/// levels `l_star - 1 ..= top`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlConfig {
    pub l_star: u32,
    pub top: u32,
    pub rho: f64,
    /// Variance decay regime: 1.0 for constant diffusion coefficient,
    /// 0.5 otherwise.
    pub beta: f64,
    /// Particle counts for l = l_star-1 ..= top.
    pub n_per_level: Vec<usize>,
}

impl MlConfig {
    pub fn n_at(&self, level: u32) -> usize {
        self.n_per_level[(level + 1 - self.l_star) as usize]
    }
}

/// The particle allocation `N_l = floor(scale 2^L (L - l_star + 2)
/// dt_l^(1/2+rho))`, with an extra `dt_L^(-rho)` factor in the
/// beta = 1/2 regime, floor-clamped at 2.
pub fn allocate_particles(
    l_star: u32,
    top: u32,
    rho: f64,
    beta: f64,
    scale: f64,
) -> Result<MlConfig, MlError> {
    if l_star > top || l_star == 0 {
        return Err(MlError::BadLevels { l_star, top });
    }
    assert!(rho > 0.0 && scale > 0.0);
    let lead = scale * (1u64 << top) as f64 * (top - l_star + 2) as f64;
    let tail = if beta < 1.0 {
        (0.5f64).powi(top as i32).powf(-rho)
    } else {
        1.0
    };
    let n_per_level = (l_star - 1..=top)
        .map(|l| {
            let dl = (0.5f64).powi(l as i32);
            ((lead * dl.powf(0.5 + rho) * tail).floor() as usize).max(2)
        })
        .collect();
    Ok(MlConfig {
        l_star,
        top,
        rho,
        beta,
        n_per_level,
    })
}

/// One step of a coupled run: the two marginal estimates and diagnostics.
#[derive(Debug, Clone)]
pub struct CoupledStep {
    pub unit_time: usize,
    pub fine: ScoreEstimate,
    pub coarse: ScoreEstimate,
    /// fine minus coarse estimate values
    pub diff: Vec<f64>,
    pub index_meet_rate: f64,
    pub endpoint_meet_rate: f64,
}

impl CoupledStep {
    pub fn cost(&self) -> Cost {
        let mut c = self.fine.cost;
        c.accumulate(&self.coarse.cost);
        c
    }
}

/// The coupled fine/coarse bridge filter at levels (l, l-1).
pub struct CoupledSmoother<'m, M: Model, A: Aux> {
    model: &'m M,
    aux: &'m A,
    fine: LevelState,
    coarse: LevelState,
    x_star: f64,
    key: StreamKey,
    k: usize,
}

impl<'m, M: Model, A: Aux> CoupledSmoother<'m, M, A> {
    pub fn new(
        model: &'m M,
        aux: &'m A,
        level: u32,
        n: usize,
        x_star: f64,
        key: StreamKey,
    ) -> Self {
        assert!(level >= 1, "coupled run needs level >= 1");
        assert_eq!(model.dims().d_x, 1);
        let d_th = model.dims().d_theta;
        CoupledSmoother {
            model,
            aux,
            fine: LevelState::new(level, n, d_th),
            coarse: LevelState::new(level - 1, n, d_th),
            x_star,
            key,
            k: 0,
        }
    }

    pub fn level(&self) -> u32 {
        self.fine.level
    }

    pub fn n(&self) -> usize {
        self.fine.n
    }

    /// Shared-noise proposal: fresh fine increments, coarse increments by
    /// pairwise summation, endpoints maximally coupled (identical at the
    /// initial block where both chains start at x_star).
    fn propose(&mut self, theta: &[f64]) -> Result<f64, MlError> {
        let n = self.fine.n;
        let wf = self.fine.spu - 1;
        let sdt = self.fine.dt.sqrt();
        let (level, k) = (self.fine.level, self.k);
        let key = self.key;
        let aux = self.aux;
        let init = k == 0;
        let xf = self.fine.x_check.clone();
        let xc = self.coarse.x_check.clone();

        struct Proposal {
            z_fine: Vec<f64>,
            e_fine: f64,
            e_coarse: f64,
            met: bool,
            draws: u64,
        }
        let proposals: Vec<Result<Proposal, MlError>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = key
                    .child(role::PROPAGATE)
                    .child(level as u64)
                    .child(k as u64)
                    .child(i as u64)
                    .rng();
                let z_fine: Vec<f64> = (0..wf)
                    .map(|_| {
                        let v: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        v * sdt
                    })
                    .collect();
                let (e_fine, e_coarse, met) = if init {
                    let e = aux.endpoint_sample(theta, xf[i], &mut rng);
                    (e, e, true)
                } else {
                    let mut erng = key
                        .child(role::ENDPOINT)
                        .child(level as u64)
                        .child(k as u64)
                        .child(i as u64)
                        .rng();
                    maximal_coupling_endpoints(aux, theta, xf[i], xc[i], &mut erng)?
                };
                Ok(Proposal {
                    z_fine,
                    e_fine,
                    e_coarse,
                    met,
                    draws: wf as u64 + 1,
                })
            })
            .collect();

        let mut meets = 0usize;
        for (i, prop) in proposals.into_iter().enumerate() {
            let p = prop?;
            // coarse increment p is the sum of fine increments 2p-1 and 2p
            // (1-based over the block's interior grid)
            let wc = self.coarse.spu - 1;
            for pc in 0..wc {
                let a = p.z_fine[2 * pc];
                let b = p.z_fine[2 * pc + 1];
                self.coarse.increments[i * wc + pc] = a + b;
            }
            self.fine.increments[i * wf..(i + 1) * wf].copy_from_slice(&p.z_fine);
            self.fine.endpoint[i] = p.e_fine;
            self.coarse.endpoint[i] = p.e_coarse;
            self.fine.cost.normal_draws += p.draws;
            if p.met {
                meets += 1;
            }
        }
        Ok(meets as f64 / n as f64)
    }

    /// Advances both levels one unit time; the observation records must be
    /// at the fine and coarse levels with the coarse one a coarsening of
    /// the fine.
    pub fn advance(
        &mut self,
        theta: &[f64],
        obs_fine: &ObsRecord,
        obs_coarse: &ObsRecord,
    ) -> Result<CoupledStep, MlError> {
        if obs_fine.level != self.fine.level || obs_coarse.level != self.coarse.level {
            return Err(SmootherError::LevelMismatch {
                have: obs_fine.level,
                want: self.fine.level,
            }
            .into());
        }
        if self.k >= obs_fine.horizon {
            return Err(SmootherError::ObsExhausted { unit_time: self.k }.into());
        }
        let block_f = obs_fine.block(self.k).to_vec();
        let block_c = obs_coarse.block(self.k).to_vec();
        let fails_f = self.fine.pair_failures;
        let fails_c = self.coarse.pair_failures;

        let mut index_meet_rate = 1.0;
        let endpoint_meet_rate;
        let mut bess = (0.0, 0.0);
        if self.k == 0 {
            self.fine.x_check.fill(self.x_star);
            self.coarse.x_check.fill(self.x_star);
            endpoint_meet_rate = self.propose(theta)?;
            self.fine.eval_self(self.model, self.aux, theta, &block_f);
            self.coarse.eval_self(self.model, self.aux, theta, &block_c);
            self.fine.seed_f_from_lambda();
            self.coarse.seed_f_from_lambda();
        } else {
            let wf = self
                .fine
                .forward_weights()
                .ok_or(SmootherError::WeightCollapse { unit_time: self.k })?;
            let wc = self
                .coarse
                .forward_weights()
                .ok_or(SmootherError::WeightCollapse { unit_time: self.k })?;
            let coupler = IndexCoupler::new(&wf, &wc);
            let mut rng = self
                .key
                .child(role::RESAMPLE)
                .child(self.fine.level as u64)
                .child(self.k as u64)
                .rng();
            let n = self.fine.n;
            let mut idx_f = Vec::with_capacity(n);
            let mut idx_c = Vec::with_capacity(n);
            let mut meets = 0usize;
            for _ in 0..n {
                let (a, b) = coupler.sample(&mut rng);
                if a == b {
                    meets += 1;
                }
                idx_f.push(a);
                idx_c.push(b);
            }
            index_meet_rate = meets as f64 / n as f64;
            self.fine.gather(&idx_f);
            self.coarse.gather(&idx_c);
            endpoint_meet_rate = self.propose(theta)?;
            self.fine.eval_self(self.model, self.aux, theta, &block_f);
            self.coarse.eval_self(self.model, self.aux, theta, &block_c);
            bess = (
                self.fine.backward(self.model, self.aux, theta, &block_f),
                self.coarse.backward(self.model, self.aux, theta, &block_c),
            );
        }

        self.k += 1;
        let (vf, ess_f) = self
            .fine
            .estimate()
            .ok_or(SmootherError::WeightCollapse {
                unit_time: self.k - 1,
            })?;
        let (vc, ess_c) = self
            .coarse
            .estimate()
            .ok_or(SmootherError::WeightCollapse {
                unit_time: self.k - 1,
            })?;
        let diff: Vec<f64> = vf.iter().zip(&vc).map(|(a, b)| a - b).collect();
        let mk = |state: &LevelState, values: Vec<f64>, ess: f64, bess: f64, fails: u64| {
            ScoreEstimate {
                unit_time: self.k,
                level: state.level,
                n_particles: state.n,
                values,
                ess,
                backward_ess: bess,
                pair_failures: state.pair_failures - fails,
                cost: state.cost,
            }
        };
        Ok(CoupledStep {
            unit_time: self.k,
            fine: mk(&self.fine, vf, ess_f, bess.0, fails_f),
            coarse: mk(&self.coarse, vc, ess_c, bess.1, fails_c),
            diff,
            index_meet_rate,
            endpoint_meet_rate,
        })
    }
}

/// Runs the coupled filter for `horizon` unit times at fixed theta.
pub fn run_alg4<M: Model, A: Aux>(
    model: &M,
    aux: &A,
    theta: &[f64],
    obs: &ObsRecord,
    level: u32,
    n_particles: usize,
    horizon: usize,
    x_star: f64,
    key: StreamKey,
) -> Result<Vec<CoupledStep>, MlError> {
    let obs_fine = coarsen_obs(obs, level).map_err(SmootherError::from)?;
    let obs_coarse = coarsen_obs(obs, level - 1).map_err(SmootherError::from)?;
    let mut sm = CoupledSmoother::new(model, aux, level, n_particles, x_star, key);
    (0..horizon)
        .map(|_| sm.advance(theta, &obs_fine, &obs_coarse))
        .collect()
}

/// Combines per-level difference sequences with the base-level sequence:
/// per unit time, the multilevel estimate is the base estimate plus the sum
/// of the fine-coarse differences.
pub fn ml_combine(
    diffs: &[Vec<CoupledStep>],
    base: &[ScoreEstimate],
) -> Result<Vec<ScoreEstimate>, MlError> {
    for d in diffs {
        if d.len() != base.len() {
            return Err(MlError::LengthMismatch);
        }
    }
    let top = diffs.iter().map(|d| d[0].fine.level).max().unwrap_or(0);
    Ok(base
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let mut values = b.values.clone();
            let mut cost = b.cost;
            let mut failures = b.pair_failures;
            for d in diffs {
                for (c, v) in values.iter_mut().zip(&d[k].diff) {
                    *c += v;
                }
                cost.accumulate(&d[k].cost());
                failures += d[k].fine.pair_failures + d[k].coarse.pair_failures;
            }
            ScoreEstimate {
                unit_time: b.unit_time,
                level: top.max(b.level),
                n_particles: b.n_particles,
                values,
                ess: b.ess,
                backward_ess: b.backward_ess,
                pair_failures: failures,
                cost,
            }
        })
        .collect())
}

/// A full multilevel score estimator: independent coupled runs for
/// l in l_star..=top plus a single-level run at l_star - 1, advanced in
/// lockstep and combined per unit time.
pub struct MlSmoother<'m, M: Model, A: Aux> {
    coupled: Vec<CoupledSmoother<'m, M, A>>,
    base: BridgeSmoother<'m, M, A>,
    obs_by_level: Vec<ObsRecord>,
    config: MlConfig,
}

impl<'m, M: Model, A: Aux> MlSmoother<'m, M, A> {
    /// `obs` must be at least as fine as `config.top`.
    pub fn new(
        model: &'m M,
        aux: &'m A,
        config: MlConfig,
        obs: &ObsRecord,
        x_star: f64,
        key: StreamKey,
    ) -> Result<Self, MlError> {
        let mut obs_by_level = Vec::new();
        for l in config.l_star - 1..=config.top {
            obs_by_level.push(coarsen_obs(obs, l).map_err(SmootherError::from)?);
        }
        let coupled = (config.l_star..=config.top)
            .map(|l| {
                CoupledSmoother::new(model, aux, l, config.n_at(l), x_star, key.child(l as u64))
            })
            .collect();
        let base = BridgeSmoother::new(
            model,
            aux,
            config.l_star - 1,
            config.n_at(config.l_star - 1),
            x_star,
            key.child((config.l_star - 1) as u64),
        );
        Ok(MlSmoother {
            coupled,
            base,
            obs_by_level,
            config,
        })
    }

    fn obs_at(&self, level: u32) -> &ObsRecord {
        &self.obs_by_level[(level + 1 - self.config.l_star) as usize]
    }

    /// Advances every level one unit time and returns the combined
    /// multilevel estimate.
    pub fn advance(&mut self, theta: &[f64]) -> Result<ScoreEstimate, MlError> {
        let base_obs = self.obs_at(self.config.l_star - 1).clone();
        let base_est = self.base.advance(theta, &base_obs)?;
        let mut values = base_est.values.clone();
        let mut cost = base_est.cost;
        let mut failures = base_est.pair_failures;
        let mut unit_time = base_est.unit_time;
        for c in &mut self.coupled {
            let lvl = c.level();
            let step = {
                let obs_f = self.obs_by_level[(lvl + 1 - self.config.l_star) as usize].clone();
                let obs_c = self.obs_by_level[(lvl - self.config.l_star) as usize].clone();
                c.advance(theta, &obs_f, &obs_c)?
            };
            for (v, d) in values.iter_mut().zip(&step.diff) {
                *v += d;
            }
            cost.accumulate(&step.cost());
            failures += step.fine.pair_failures + step.coarse.pair_failures;
            unit_time = step.unit_time;
        }
        Ok(ScoreEstimate {
            unit_time,
            level: self.config.top,
            n_particles: self.config.n_per_level.iter().sum(),
            values,
            ess: base_est.ess,
            backward_ess: base_est.backward_ess,
            pair_failures: failures,
            cost,
        })
    }
}

/// Runs the full multilevel estimator for `horizon` unit times.
pub fn run_ml<M: Model, A: Aux>(
    model: &M,
    aux: &A,
    theta: &[f64],
    obs: &ObsRecord,
    config: &MlConfig,
    horizon: usize,
    x_star: f64,
    key: StreamKey,
) -> Result<Vec<ScoreEstimate>, MlError> {
    let mut sm = MlSmoother::new(model, aux, config.clone(), obs, x_star, key)?;
    (0..horizon).map(|_| sm.advance(theta)).collect()
}

use rand_distr::Distribution;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::ConstSigmaAux;
    use crate::discretization::{simulate_hidden, simulate_observations, Grid};
    use crate::model::{builtin_model, BuiltinModel, FixedParams};
    use crate::stats;

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
    fn index_coupling_degenerate_cases() {
        let mut rng = StreamKey::root(50).rng();
        for _ in 0..200 {
            let (i, j) = maximal_coupling_indices(&[0.3, 0.7], &[0.3, 0.7], &mut rng);
            assert_eq!(i, j);
            let (i, j) = maximal_coupling_indices(&[1.0, 0.0], &[0.0, 1.0], &mut rng);
            assert_eq!((i, j), (0, 1));
        }
    }

    #[test]
    fn index_coupling_meet_probability() {
        // p=(0.7,0.3), q=(0.3,0.7): P(meet) = 0.6
        let mut rng = StreamKey::root(51).rng();
        let coupler = IndexCoupler::new(&[0.7, 0.3], &[0.3, 0.7]);
        assert!((coupler.meet_probability() - 0.6).abs() < 1e-12);
        let draws = 100_000;
        let mut meets = 0;
        for _ in 0..draws {
            let (i, j) = coupler.sample(&mut rng);
            if i == j {
                meets += 1;
            }
        }
        let rate = meets as f64 / draws as f64;
        let se = (0.6 * 0.4 / draws as f64).sqrt();
        assert!((rate - 0.6).abs() < 3.0 * se, "rate {rate}");
    }

    #[test]
    fn endpoint_coupling_same_source_always_meets() {
        let (_, aux) = model1();
        let mut rng = StreamKey::root(52).rng();
        for _ in 0..100 {
            let (a, b, met) =
                maximal_coupling_endpoints(&aux, &[0.0, 0.0], 1.3, 1.3, &mut rng).unwrap();
            assert!(met);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn allocation_formula() {
        // top=10, l_star=7, rho=0.14, scale=1: N_7 = floor(2^10 * 5 * 2^(-7*0.64)) = 229
        let cfg = allocate_particles(7, 10, 0.14, 1.0, 1.0).unwrap();
        assert_eq!(cfg.n_at(7), 229);
        // strictly decreasing in l
        for w in cfg.n_per_level.windows(2) {
            assert!(w[0] > w[1]);
        }
        // beta = 1/2 variant multiplies by dt_L^(-rho) > 1
        let cfg_half = allocate_particles(7, 10, 0.14, 0.5, 1.0).unwrap();
        for (a, b) in cfg_half.n_per_level.iter().zip(&cfg.n_per_level) {
            assert!(a >= b);
        }
        assert!(allocate_particles(8, 7, 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn coarse_increments_are_pair_sums() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 4, 2, 53);
        let mut sm = CoupledSmoother::new(&m, &aux, 4, 8, 0.2, StreamKey::root(54));
        let of = coarsen_obs(&obs, 4).unwrap();
        let oc = coarsen_obs(&obs, 3).unwrap();
        sm.advance(&theta, &of, &oc).unwrap();
        let wf = sm.fine.spu - 1;
        let wc = sm.coarse.spu - 1;
        for i in 0..8 {
            for p in 0..wc {
                let expect = sm.fine.increments[i * wf + 2 * p] + sm.fine.increments[i * wf + 2 * p + 1];
                let got = sm.coarse.increments[i * wc + p];
                assert!((got - expect).abs() < 1e-15);
            }
        }
        // initial endpoints shared
        for i in 0..8 {
            assert_eq!(sm.fine.endpoint[i], sm.coarse.endpoint[i]);
        }
    }

    #[test]
    fn combined_equals_base_when_diffs_zeroed() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 5, 3, 55);
        let base = crate::smoother_bridge::run_alg3(
            &m, &aux, &theta, &obs, 3, 16, 3, 0.2, StreamKey::root(56),
        )
        .unwrap();
        let mut diffs = run_alg4(&m, &aux, &theta, &obs, 5, 8, 3, 0.2, StreamKey::root(57))
            .unwrap();
        for step in &mut diffs {
            step.diff.iter_mut().for_each(|d| *d = 0.0);
        }
        let combined = ml_combine(&[diffs], &base).unwrap();
        for (c, b) in combined.iter().zip(&base) {
            assert_eq!(c.values, b.values);
        }
    }

    #[test]
    fn coarse_derived_increment_variance() {
        // derived coarse increments are N(0, dt_{l-1})
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 6, 1, 58);
        let of = coarsen_obs(&obs, 6).unwrap();
        let oc = coarsen_obs(&obs, 5).unwrap();
        let mut all = Vec::new();
        for rep in 0..40 {
            let mut sm =
                CoupledSmoother::new(&m, &aux, 6, 100, 0.2, StreamKey::root(59).child(rep));
            sm.advance(&theta, &of, &oc).unwrap();
            all.extend_from_slice(&sm.coarse.increments);
        }
        let v = stats::variance(&all);
        let expect = (0.5f64).powi(5);
        let se = expect * (2.0 / (all.len() as f64 - 1.0)).sqrt();
        assert!((v - expect).abs() < 3.0 * se, "var {v} vs {expect}");
    }

    #[test]
    fn ml_combine_requires_equal_lengths() {
        let (m, aux) = model1();
        let theta = [-0.7, -0.5];
        let obs = obs_for(&m, &theta, 5, 3, 60);
        let base = crate::smoother_bridge::run_alg3(
            &m, &aux, &theta, &obs, 3, 8, 3, 0.2, StreamKey::root(61),
        )
        .unwrap();
        let diffs = run_alg4(&m, &aux, &theta, &obs, 5, 8, 2, 0.2, StreamKey::root(62)).unwrap();
        assert!(matches!(
            ml_combine(&[diffs], &base),
            Err(MlError::LengthMismatch)
        ));
    }
}
