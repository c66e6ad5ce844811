//! Seeded inputs shared by the benches.

use difftap::backbone::{FeatureTensor, Provenance};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

pub fn feature(h: usize, w: usize, c: usize, seed: u64) -> FeatureTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array3::from_shape_simple_fn((h, w, c), || rng.gen_range(-1.0f32..1.0));
    let provenance = Provenance {
        image_id: format!("img{seed}"),
        block: "U-L1-R1-B0-Cross-Q".parse().unwrap(),
        timestep: 50,
        guidance_scale: 1.0,
        prompt_hash: difftap::hashing::prompt_hash("bench"),
        seed,
    };
    FeatureTensor::new(values, provenance).unwrap()
}

/// Short pseudo-captions over a small vocabulary.
pub fn captions(n: usize, seed: u64) -> Vec<String> {
    const WORDS: [&str; 16] = [
        "a", "the", "cat", "dog", "red", "blue", "on", "under", "table", "car", "street", "man", "woman", "sits",
        "runs", "near",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(6..14);
            (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}
