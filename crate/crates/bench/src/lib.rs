//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scatterlm::{Batch, ContextWindow, ModelParams, ModelShape};

/// Default model shape over a vocabulary of `vocab` words.
pub fn shape(vocab: usize) -> ModelShape {
    ModelShape {
        vocab,
        dim: 64,
        window: 5,
        hidden: 32,
    }
}

/// Freshly initialised parameters and one random batch of `batch` pairs.
pub fn model_and_batch(shape: ModelShape, batch: usize, seed: u64) -> (ModelParams<f32>, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(shape, &mut rng);
    let pos: Vec<ContextWindow> = (0..batch)
        .map(|_| ContextWindow((0..shape.window).map(|_| rng.gen_range(0..shape.vocab)).collect()))
        .collect();
    let neg = pos
        .iter()
        .map(|w| w.corrupted((w.center() + rng.gen_range(1..shape.vocab)) % shape.vocab))
        .collect();
    (params, Batch::new(pos, neg).expect("pairs line up"))
}
