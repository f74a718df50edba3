//! Shared fixtures for the criterion benches.

use denergy::{FeatureMatrix, SimilarityRow, Xorshift64Star};

/// `n` rows of `k` similarities drawn uniformly from `[-1, 1]`.
pub fn random_rows(n: usize, k: usize, seed: u64) -> Vec<SimilarityRow> {
    let mut rng = Xorshift64Star::new(seed);
    (0..n)
        .map(|i| {
            let values = (0..k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            SimilarityRow::new(values, i).expect("finite similarities")
        })
        .collect()
}

/// `n` random unit vectors in `dim` dimensions.
pub fn random_features(n: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = Xorshift64Star::new(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gaussian()).collect()).collect();
    denergy::normalize_rows(&FeatureMatrix::from_rows(&rows).expect("finite rows")).expect("non-zero rows")
}
