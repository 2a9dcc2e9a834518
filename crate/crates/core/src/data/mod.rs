//! In-memory image classification datasets: IDX ingestion, the synthetic
//! generator, batching and the train/validation split.

mod idx;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};

pub use idx::{load_idx_dataset, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IDX_IMAGES, IDX_LABELS};
pub use synth::{nearest_centroid_accuracy, synth_dataset, SynthSpec};

/// Images in NCHW order with dense labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let d = Dataset {
            channels,
            height,
            width,
            classes,
            images,
            labels,
        };
        if d.images.len() != d.labels.len() * d.sample_len() {
            return Err(Error::Data(format!(
                "{} pixel values do not fill {} samples of {}x{}x{}",
                d.images.len(),
                d.labels.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(&l) = d.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside [0, {classes})")));
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let shape = Shape::new(indices.len(), self.channels, self.height, self.width);
        Batch {
            images: Tensor::from_vec(shape, data).expect("sized from the dataset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images: b.images.into_data(),
            labels: b.labels,
        }
    }

    /// Shuffled mini-batches of `batch_size`; a trailing remainder is kept
    /// when it has at least two samples (batch statistics need two).
    pub fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Seeded split into disjoint halves; the first half gets `⌊n/2⌋` samples.
pub fn split_train_val(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} samples into two halves")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n / 2);
    Ok((order, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (a, b) = split_train_val(50_000, 1).unwrap();
        assert_eq!((a.len(), b.len()), (25_000, 25_000));
        let (a, b) = split_train_val(2, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_eq!(split_train_val(9, 3).unwrap(), split_train_val(9, 3).unwrap());
        assert!(split_train_val(1, 0).is_err());
        assert!(split_train_val(0, 0).is_err());
    }

    #[test]
    fn halves_are_disjoint_and_cover() {
        let (mut a, b) = split_train_val(11, 4).unwrap();
        a.extend(b);
        a.sort();
        assert_eq!(a, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_labels_and_sizes() {
        assert!(Dataset::new(1, 1, 1, 2, vec![0.0, 0.0], vec![0, 2]).is_err());
        assert!(Dataset::new(1, 1, 1, 2, vec![0.0], vec![0, 1]).is_err());
    }
}
