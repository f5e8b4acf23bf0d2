//! Noisy-sine corpora for smoke runs, demos and tests.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{normalize_sample, PriceSeries, SequenceSample, SequenceSet, SplitTag, WindowSpec};
use crate::error::Result;

/// Independent sines with random phase and 1 to 3 cycles per sample plus
/// Gaussian noise, each normalized by its observation window.
pub fn noisy_sine_set(n: usize, window: WindowSpec, noise: f64, seed: u64) -> Result<SequenceSet> {
    window.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let cycles = rng.gen_range(1.0..3.0);
        let values: Vec<f64> = (0..window.k)
            .map(|i| {
                let x = std::f64::consts::TAU * cycles * i as f64 / window.k as f64 + phase;
                2.0 + x.sin() + eps.sample(&mut rng)
            })
            .collect();
        samples.push(normalize_sample(&SequenceSample::real(values), &window)?);
    }
    SequenceSet::new(samples, window, SplitTag::Unsplit)
}

/// A positive daily price path: a sine of period `period` days around 100
/// with multiplicative noise.
pub fn noisy_sine_prices(len: usize, period: f64, noise: f64, seed: u64) -> Result<PriceSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let values = (0..len)
        .map(|i| {
            let x = std::f64::consts::TAU * i as f64 / period + phase;
            100.0 * (1.0 + 0.1 * x.sin()) * (1.0 + eps.sample(&mut rng))
        })
        .collect();
    PriceSeries::from_values(NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(), values)
}
