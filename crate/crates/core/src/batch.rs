//! Independent runs fanned out over worker threads.
//!
//! With the `parallel` feature (on by default) work is spread with rayon;
//! without it the same functions run sequentially. Results are identical
//! either way because every run and every trial owns its random stream.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::link;
use crate::rng::{self, tag};
use crate::sim::{self, RunOutput, Scenario, ValidationError};

pub type RunResult = Result<RunOutput, ValidationError>;

pub fn run_batch(scenarios: &[Scenario]) -> Vec<RunResult> {
    #[cfg(feature = "parallel")]
    {
        scenarios.par_iter().map(sim::run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_batch_sequential(scenarios)
    }
}

pub fn run_batch_sequential(scenarios: &[Scenario]) -> Vec<RunResult> {
    scenarios.iter().map(sim::run).collect()
}

/// Copies of `base` with seeds `base.seed, base.seed + 1, ...`.
pub fn seed_sweep(base: &Scenario, count: u64) -> Vec<Scenario> {
    (0..count)
        .map(|k| Scenario {
            seed: base.seed.wrapping_add(k),
            ..base.clone()
        })
        .collect()
}

/// Fraction of `trials` packets lost on a fixed link, each trial drawing
/// its own demodulation margin.
pub fn estimate_per(rssi_dbm: f64, true_snr_db: f64, sf: u8, trials: u64, seed: u64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let lost = |k: u64| {
        let mut r = rng::stream(seed, &[tag::MONTE_CARLO, u64::from(sf), k]);
        u64::from(!link::decide(rssi_dbm, true_snr_db, sf, link::draw_margin(&mut r)))
    };
    #[cfg(feature = "parallel")]
    let total: u64 = (0..trials).into_par_iter().map(lost).sum();
    #[cfg(not(feature = "parallel"))]
    let total: u64 = (0..trials).map(lost).sum();
    total as f64 / trials as f64
}
