//! Benchmark environments: gear-switching nonholonomic car and
//! quasi-static planar box pushing.

pub mod box_push;
pub mod car;

pub use box_push::{BoxContinuous, BoxParams, BoxProblem};
pub use car::{CarContinuous, CarParams, CarProblem};

/// Halton low-discrepancy point in base `b` (1-indexed).
fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Deterministic low-discrepancy coverage of the center-of-friction square
/// `[0.2, 0.8]^2` (box coordinates). A single sample sits at the center;
/// the seed offsets the start of the Halton sequence.
pub fn sample_cf_grid(count: usize, seed: u64) -> Vec<(f64, f64)> {
    if count == 1 {
        return vec![(0.5, 0.5)];
    }
    let offset = (seed % 1024) as usize;
    (0..count)
        .map(|i| {
            let idx = offset + i + 1;
            (
                0.2 + 0.6 * halton(idx, 2),
                0.2 + 0.6 * halton(idx, 3),
            )
        })
        .collect()
}
