//! Generated corpora for tests and demos.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::MtsDataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoToneSpec {
    pub n: usize,
    pub t: usize,
    /// Frequency bins of class 0 and class 1.
    pub bins: (usize, usize),
    pub noise: f64,
}

impl Default for TwoToneSpec {
    fn default() -> Self {
        Self {
            n: 20,
            t: 64,
            bins: (3, 11),
            noise: 0.1,
        }
    }
}

/// Single-channel sinusoids with random phase plus Gaussian noise; sample `i`
/// belongs to class `i % 2`.
pub fn two_tone(spec: &TwoToneSpec, seed: u64) -> MtsDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).expect("noise level must be non-negative");
    let labels: Vec<usize> = (0..spec.n).map(|i| i % 2).collect();
    let mut samples = Array3::zeros((spec.n, spec.t, 1));
    for i in 0..spec.n {
        let bin = if labels[i] == 0 { spec.bins.0 } else { spec.bins.1 };
        let phase = rng.random_range(0.0..2.0 * PI);
        for step in 0..spec.t {
            let angle = 2.0 * PI * bin as f64 * step as f64 / spec.t as f64 + phase;
            samples[[i, step, 0]] = angle.sin() + noise.sample(&mut rng);
        }
    }
    MtsDataset::new(
        "two_tone",
        samples,
        Some(labels),
        Some(vec!["low".into(), "high".into()]),
    )
    .expect("generated corpus is valid")
}

/// Unlabelled smooth random walks, `n x t x f`.
pub fn random_walks(n: usize, t: usize, f: usize, seed: u64) -> MtsDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.0, 0.3).expect("positive std");
    let mut samples = Array3::zeros((n, t, f));
    for i in 0..n {
        for c in 0..f {
            let mut level = 0.0;
            for s in 0..t {
                level += step.sample(&mut rng);
                samples[[i, s, c]] = level;
            }
        }
    }
    MtsDataset::new("random_walks", samples, None, None).expect("generated corpus is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::dft_forward;

    #[test]
    fn dominant_bins_match_classes() {
        let ds = two_tone(&TwoToneSpec::default(), 3);
        for i in 0..ds.n() {
            let x: Vec<f64> = ds.series(i).column(0).to_vec();
            let spec = dft_forward(&x).unwrap();
            let peak = (1..32)
                .max_by(|&a, &b| spec.bins[a].norm().total_cmp(&spec.bins[b].norm()))
                .unwrap();
            assert_eq!(peak, if i % 2 == 0 { 3 } else { 11 });
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        let a = two_tone(&TwoToneSpec::default(), 9);
        let b = two_tone(&TwoToneSpec::default(), 9);
        assert_eq!(a, b);
        assert_eq!(random_walks(3, 10, 2, 1), random_walks(3, 10, 2, 1));
    }
}
