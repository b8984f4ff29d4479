//! Small statistics helpers shared by the experiment drivers and the test
//! suites: moments, standard errors, least-squares slopes, log-sum-exp and
//! effective sample sizes.

/// Mean of a slice. Empty input returns NaN.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Ordinary least-squares fit `y = intercept + slope * x`.
/// Returns `(intercept, slope, slope_std_error)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    assert!(n >= 2, "slope fit needs at least two points");
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(u, v)| {
                let r = v - intercept - slope * u;
                r * r
            })
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    (intercept, slope, se)
}

/// `log(sum_i exp(x_i))` with the usual max shift. All-`-inf` input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Normalizes log-weights in place into probabilities. Returns the
/// log-normalizer, or None if every weight is zero.
pub fn normalize_log_weights(lw: &mut [f64]) -> Option<f64> {
    let norm = log_sum_exp(lw);
    if !norm.is_finite() {
        return None;
    }
    for w in lw.iter_mut() {
        *w = (*w - norm).exp();
    }
    Some(norm)
}

/// Self-normalized weighted mean of row-major `values` (rows of width
/// `dim`, one per log-weight). Returns the estimate and the normalized
/// weights, or None if every weight is zero.
pub fn self_normalized_estimate(
    log_weights: &[f64],
    values: &[f64],
    dim: usize,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut w = log_weights.to_vec();
    normalize_log_weights(&mut w)?;
    let mut est = vec![0.0; dim];
    for (i, wi) in w.iter().enumerate() {
        for c in 0..dim {
            est[c] += wi * values[i * dim + c];
        }
    }
    Some((est, w))
}

/// Effective sample size `1 / sum_i w_i^2` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().map(|w| w * w).sum();
    if s > 0.0 {
        1.0 / s
    } else {
        0.0
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|u, v| u.total_cmp(v));
    xb.sort_by(|u, v| u.total_cmp(v));
    let (na, nb) = (xa.len(), xb.len());
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na && j < nb {
        // advance both pointers through the smallest value, ties together
        let v = xa[i].min(xb[j]);
        while i < na && xa[i] <= v {
            i += 1;
        }
        while j < nb && xb[j] <= v {
            j += 1;
        }
        let fa = i as f64 / na as f64;
        let fb = j as f64 / nb as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// KS critical value at level alpha for the two-sample test,
/// `c(alpha) * sqrt((n+m)/(n m))` with the asymptotic coefficient.
pub fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Pearson chi-square statistic for observed counts against expected
/// probabilities (expected given total draws).
pub fn chi_square_stat(counts: &[u64], probs: &[f64]) -> f64 {
    assert_eq!(counts.len(), probs.len());
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, p)| **p > 0.0)
        .map(|(c, p)| {
            let e = total as f64 * p;
            let d = *c as f64 - e;
            d * d / e
        })
        .sum()
}
