//! Property tests for the deterministic invariants: coarsening algebra,
//! self-normalization, transition-density values and estimate
//! exchangeability.

use pathscore::discretization::{coarsen_obs, euler_transition_logdensity, ObsRecord, LN_2PI};
use pathscore::model::{builtin_model, FixedParams};
use pathscore::stats;
use proptest::prelude::*;

fn obs_record(level: u32, horizon: usize, values: Vec<f64>) -> ObsRecord {
    ObsRecord {
        level,
        d_y: 1,
        horizon,
        y0: vec![0.0],
        increments: values,
    }
}

proptest! {
    #[test]
    fn coarsening_telescopes(
        raw in prop::collection::vec(-1.0f64..1.0, 16),
        l2 in 0u32..2,
    ) {
        // native level 2 over 4 unit times; coarsen directly vs through l1
        let obs = obs_record(2, 4, raw);
        for l1 in l2..=2 {
            let via = coarsen_obs(&coarsen_obs(&obs, l1).unwrap(), l2).unwrap();
            let direct = coarsen_obs(&obs, l2).unwrap();
            // identical sums up to fixed-order float associativity
            for (a, b) in via.increments.iter().zip(&direct.increments) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let total_direct: f64 = direct.increments.iter().sum();
            let total_native: f64 = obs.increments.iter().sum();
            prop_assert!((total_direct - total_native).abs() < 1e-12);
        }
    }

    #[test]
    fn log_weight_shift_invariance(
        lw in prop::collection::vec(-30.0f64..5.0, 2..40),
        vals in prop::collection::vec(-10.0f64..10.0, 2..40),
        shift in -100.0f64..100.0,
    ) {
        let n = lw.len().min(vals.len());
        let lw = &lw[..n];
        let vals = &vals[..n];
        let (est, _) = stats::self_normalized_estimate(lw, vals, 1).unwrap();
        let shifted: Vec<f64> = lw.iter().map(|w| w + shift).collect();
        let (est2, _) = stats::self_normalized_estimate(&shifted, vals, 1).unwrap();
        prop_assert!((est[0] - est2[0]).abs() < 1e-9 * (1.0 + est[0].abs()));
    }

    #[test]
    fn estimate_exchangeability(
        lw in prop::collection::vec(-10.0f64..2.0, 3..30),
        seed in 0u64..1000,
    ) {
        let n = lw.len();
        let vals: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let (est, _) = stats::self_normalized_estimate(&lw, &vals, 1).unwrap();
        // rotate by a pseudo-random offset: a permutation of particle indices
        let off = (seed as usize) % n;
        let plw: Vec<f64> = (0..n).map(|i| lw[(i + off) % n]).collect();
        let pvals: Vec<f64> = (0..n).map(|i| vals[(i + off) % n]).collect();
        let (est2, _) = stats::self_normalized_estimate(&plw, &pvals, 1).unwrap();
        prop_assert!((est[0] - est2[0]).abs() < 1e-10 * (1.0 + est[0].abs()));
    }

    #[test]
    fn euler_density_matches_direct_formula(
        x in -3.0f64..3.0,
        xn in -3.0f64..3.0,
        th1 in -2.0f64..2.0,
        level in 0u32..8,
    ) {
        let m = builtin_model(1, &FixedParams::new().with("kappa", 2.0).with("sigma", 0.3))
            .unwrap();
        let dt = (0.5f64).powi(level as i32);
        let ld = euler_transition_logdensity(&m, &[th1, -0.5], &[x], &[xn], dt).unwrap();
        let mean = x + th1 * x * dt;
        let var = 0.09 * dt;
        let expect = -0.5 * (LN_2PI + var.ln() + (xn - mean) * (xn - mean) / var);
        prop_assert!((ld - expect).abs() < 1e-10);
    }

    #[test]
    fn log_sum_exp_bounds(xs in prop::collection::vec(-50.0f64..50.0, 1..50)) {
        let lse = stats::log_sum_exp(&xs);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lse >= max - 1e-12);
        prop_assert!(lse <= max + (xs.len() as f64).ln() + 1e-12);
    }
}
