use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SYNTH_SIDE: usize = 16;
pub const SYNTH_CHANNELS: usize = 3;

/// Labeled images in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.image_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&shape, data).expect("gathered batch"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// Seeded shuffle into `(1 − fraction, fraction)` parts.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset<T>, Dataset<T>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (rest, held_out) = idx.split_at(self.len() - held.min(self.len()));
        (self.subset(rest), self.subset(held_out))
    }

    /// Consecutive batches in index order.
    pub fn batches(&self, size: usize) -> Vec<(Tensor<T>, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.gather(c)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

/// Parameters of the synthetic image task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub samples: usize,
    pub classes: usize,
    pub seed: u64,
    pub noise: f64,
}

impl SynthDataset {
    pub fn new(samples: usize, classes: usize, seed: u64) -> Self {
        SynthDataset {
            samples,
            classes,
            seed,
            noise: 2.5,
        }
    }

    /// Each class has a color signature carried by a Gaussian blob at a
    /// random position and a grating at a class-specific orientation with
    /// random phase and frequency. Pixel noise is added on top.
    pub fn generate<T: Scalar>(&self) -> Result<Dataset<T>> {
        if self.classes == 0 || self.samples == 0 {
            return Err(Error::InvalidArgument(
                "synthetic data needs samples and classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let side = SYNTH_SIDE;
        let plane = side * side;
        let mut data = Vec::with_capacity(self.samples * SYNTH_CHANNELS * plane);
        let tau = std::f64::consts::TAU;
        for &k in &labels {
            let phase_k = k as f64 / self.classes as f64;
            let color: Vec<f64> = (0..SYNTH_CHANNELS)
                .map(|c| (tau * (phase_k + c as f64 / SYNTH_CHANNELS as f64)).cos())
                .collect();
            let theta = std::f64::consts::PI * phase_k;
            let (cy, cx) = (rng.random_range(3.0..13.0), rng.random_range(3.0..13.0));
            let sigma: f64 = rng.random_range(2.0..3.5);
            let freq: f64 = rng.random_range(0.12..0.22);
            let phi: f64 = rng.random_range(0.0..tau);
            let amp: f64 = rng.random_range(0.6..1.0);
            for c in 0..SYNTH_CHANNELS {
                for y in 0..side {
                    for x in 0..side {
                        let (fy, fx) = (y as f64, x as f64);
                        let blob = (-((fy - cy).powi(2) + (fx - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
                        let grating = (tau * freq * (fx * theta.cos() + fy * theta.sin()) + phi).sin();
                        let v = 1.5 * color[c] * blob + amp * grating + noise.sample(&mut rng);
                        data.push(T::from_f64(v));
                    }
                }
            }
        }
        let images = Tensor::new(&[self.samples, SYNTH_CHANNELS, side, side], data)?;
        Dataset::new(images, labels, self.classes)
    }
}
