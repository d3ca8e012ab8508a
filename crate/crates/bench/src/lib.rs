//! Synthetic inputs shared by the benchmarks.

use multitoken_core::config::DataOptions;
use multitoken_core::{Dataset, Series};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `channels x len` noisy mixture of a daily and a weekly cycle.
pub fn hourly_like(channels: usize, len: usize, seed: u64) -> Series {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..channels)
        .map(|c| {
            let phase = c as f64 * 0.7;
            (0..len)
                .map(|t| {
                    let t = t as f64;
                    (std::f64::consts::TAU * t / 24.0 + phase).sin()
                        + 0.5 * (std::f64::consts::TAU * t / 168.0).sin()
                        + 0.1 * rng.gen_range(-1.0..1.0)
                })
                .collect()
        })
        .collect();
    Series::from_channels(&rows).expect("rectangular")
}

/// Seven-channel dataset long enough for a 1680-step context.
pub fn dataset(rows: usize) -> Dataset {
    let raw = hourly_like(7, rows, 1);
    let names = (0..7).map(|c| format!("c{c}")).collect();
    Dataset::from_raw("synthetic", names, None, &raw, &DataOptions::default())
        .expect("valid synthetic data")
}
