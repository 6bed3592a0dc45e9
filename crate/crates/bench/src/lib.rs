//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strata_core::boosting::Dataset;
use strata_core::SENTINEL;

const MISSING: f64 = SENTINEL as f64;

/// Recency-style matrix with `missing` share of sentinel cells and a
/// label driven by the first few columns.
pub fn recency_fixture(n: usize, p: usize, missing: f64, seed: u64) -> (Dataset, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..p)
            .map(|_| {
                if rng.random_bool(missing) {
                    MISSING
                } else {
                    f64::from(rng.random_range(0..730u32))
                }
            })
            .collect();
        let z: f64 = row
            .iter()
            .take(5)
            .map(|&v| if v == MISSING { -0.3 } else { 0.8 - v / 500.0 })
            .sum();
        labels.push(rng.random_bool(1.0 / (1.0 + (-z).exp())));
        rows.push(row);
    }
    let names = (0..p).map(|j| format!("c{j}")).collect();
    let data = Dataset::from_dense(&rows, names, MISSING).expect("fixture is well formed");
    (data, labels)
}
