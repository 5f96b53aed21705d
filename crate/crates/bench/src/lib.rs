//! Shared fixtures for the criterion benchmarks.

use fer_core::math::{LogitVector, ProbVector};
use fer_core::labels::NUM_CLASSES;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic batch of random logit vectors.
pub fn random_logits(n: usize, seed: u64) -> Vec<LogitVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut v = [0.0; NUM_CLASSES];
            for x in &mut v {
                *x = rng.gen_range(-5.0..5.0);
            }
            v
        })
        .collect()
}

/// Deterministic batch of valid probability vectors.
pub fn random_probs(n: usize, seed: u64) -> Vec<ProbVector> {
    random_logits(n, seed)
        .iter()
        .map(|l| fer_core::math::softmax(l).expect("finite logits"))
        .collect()
}

/// Deterministic label pairs for metric benchmarks.
pub fn random_label_pairs(n: usize, seed: u64) -> (Vec<i64>, Vec<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_true = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES as i64)).collect();
    let y_pred = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES as i64)).collect();
    (y_true, y_pred)
}
