//! Resampling primitives.

use rand::Rng;

/// Draws `n_draws` i.i.d. categorical indices from normalized `weights`
/// (multinomial resampling) by inverse-CDF with binary search.
pub fn multinomial_indices<R: Rng>(weights: &[f64], n_draws: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(!weights.is_empty());
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    (0..n_draws)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * total;
            match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(i) | Err(i) => i.min(weights.len() - 1),
            }
        })
        .collect()
}
