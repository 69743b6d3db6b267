//! Fixed-seed inputs shared by the benchmarks.

use ndarray::Array2;
use rand::Rng;
use sslforge::audio::{tone, SAMPLE_RATE};
use sslforge::seed::rng_from;

/// `seconds` of a two-partial tone at 16 kHz.
pub fn speech_like(seconds: f64) -> Vec<f64> {
    tone(&[220.0, 440.0], 0.3, (seconds * SAMPLE_RATE as f64) as usize, SAMPLE_RATE)
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = rng_from(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// A transcript-like string of `len` characters.
pub fn text(seed: u64, len: usize) -> String {
    let mut rng = rng_from(seed);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.15) {
                ' '
            } else {
                (b'a' + rng.random_range(0..26u8)) as char
            }
        })
        .collect()
}
