//! Seeded randomness.
//!
//! Every random decision in the crate is driven by ChaCha8 seeded from a
//! `u64`. The stream is portable across platforms, so a run replays exactly
//! anywhere given the same seed. [`RNG_ALGORITHM`] is written into run
//! summaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Identifier recorded in output metadata.
pub const RNG_ALGORITHM: &str = "chacha8 (rand_chacha 0.9, seed_from_u64)";

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)`.
pub fn unit(rng: &mut SeededRng) -> f64 {
    rng.random::<f64>()
}

/// Fisher-Yates shuffle; every permutation equally likely.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Draws a full ordering of `0..probs.len()` by weighted sampling without
/// replacement.
///
/// Each step samples one of the remaining indices with probability
/// proportional to its weight among the remaining weights. Indices with zero
/// weight are never drawn; they are appended in ascending order once the
/// positive mass is exhausted. Weights must be finite and non-negative.
pub fn weighted_order(probs: &[f64], rng: &mut SeededRng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    let mut order = Vec::with_capacity(probs.len());

    while !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| probs[i]).sum();
        let target = unit(rng) * total;
        let mut acc = 0.0;
        // Falls back to the last remaining index if rounding leaves `target`
        // above the accumulated mass.
        let mut pick = remaining.len() - 1;
        for (slot, &i) in remaining.iter().enumerate() {
            acc += probs[i];
            if target < acc {
                pick = slot;
                break;
            }
        }
        order.push(remaining.remove(pick));
    }

    order.extend((0..probs.len()).filter(|&i| probs[i] <= 0.0));
    order
}
