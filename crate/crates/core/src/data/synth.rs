//! Class-conditional Gaussian images around fixed class prototypes.
//!
//! A prototype combines a per-channel brightness level, distinct for every
//! class, with a seeded sinusoidal texture. Samples add isotropic noise.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Noise standard deviation.
    pub noise: f32,
}

impl SynthSpec {
    /// Four classes of 8×8 RGB images whose prototypes are far apart
    /// relative to the noise.
    pub fn separable(per_class: usize) -> Self {
        SynthSpec {
            classes: 4,
            per_class,
            size: 8,
            channels: 3,
            noise: 0.5,
        }
    }
}

fn prototypes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let k = spec.classes;
    let s = spec.size;
    (0..k)
        .map(|c| {
            let fx = rng.random_range(1..=2) as f32;
            let fy = rng.random_range(0..=2) as f32;
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut p = Vec::with_capacity(spec.channels * s * s);
            for ch in 0..spec.channels {
                let level = 0.8 * (2.0 * ((c + ch) % k) as f32 / (k - 1) as f32 - 1.0);
                for y in 0..s {
                    for x in 0..s {
                        let arg = 2.0 * PI * (fx * x as f32 + fy * y as f32) / s as f32 + phase;
                        p.push(level + 0.5 * arg.sin());
                    }
                }
            }
            p
        })
        .collect()
}

/// `classes · per_class` samples; sample `i` has label `i mod classes`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", spec.classes)));
    }
    if spec.size == 0 || spec.channels == 0 || spec.per_class == 0 {
        return Err(Error::Config("synthetic data needs nonzero size, channels and per_class".into()));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be finite and nonnegative, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(spec, &mut rng);
    let normal = Normal::new(0.0f32, spec.noise).expect("validated");
    let n = spec.classes * spec.per_class;
    let mut images = Vec::with_capacity(n * protos[0].len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        images.extend(protos[c].iter().map(|&m| m + normal.sample(&mut rng)));
        labels.push(c);
    }
    Dataset::new(spec.channels, spec.size, spec.size, spec.classes, images, labels)
}

/// Accuracy on `test` of the classifier that assigns each sample to the
/// nearest class mean of `train`.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.sample_len();
    let mut sums = vec![vec![0.0f64; d]; train.classes];
    let mut counts = vec![0usize; train.classes];
    for i in 0..train.len() {
        let c = train.labels[i];
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(train.sample(i)) {
            *s += v as f64;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.sample(i);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..sums.len())
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b])))
                .expect("at least one class");
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = SynthSpec::separable(64);
        let a = synth_dataset(&spec, 3).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, synth_dataset(&spec, 3).unwrap());
        assert_ne!(a, synth_dataset(&spec, 4).unwrap());
    }
}
