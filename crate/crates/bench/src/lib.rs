//! Shared inputs for the benchmarks.

use nalgebra::DMatrix;
use tensor_ols::{GradedOrder, MeasureSpec, MultiplicitiesSet, SupportSize};

/// `n × d` uniform inputs on `[-1, 1]^d`.
pub fn uniform_inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    MeasureSpec::standard_uniform().sample_matrix(n, d, seed)
}

pub fn continuous_set(d: usize, m: usize) -> MultiplicitiesSet {
    MultiplicitiesSet::build(d, m, SupportSize::Infinite, GradedOrder::GradedDescending).expect("small set")
}

/// A 28×28 image with a smooth intensity ramp.
pub fn ramp_image() -> Vec<f64> {
    (0..28 * 28).map(|i| ((i % 28) + (i / 28)) as f64 / 54.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_expected_shapes() {
        assert_eq!(uniform_inputs(5, 3, 0).shape(), (5, 3));
        assert_eq!(continuous_set(3, 2).len(), 10);
        let img = ramp_image();
        assert_eq!(img.len(), 784);
        assert!(img.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
