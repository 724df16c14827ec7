use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Calibration,
}

/// Per-channel statistics of the training split, applied as
/// `(pixel / 255 - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of raw byte images laid out `[n, channels, plane]`.
    pub fn from_bytes(pixels: &[u8], channels: usize, plane: usize) -> Self {
        let n = pixels.len() / (channels * plane);
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let vals = (0..n).flat_map(|i| {
                let start = (i * channels + c) * plane;
                pixels[start..start + plane].iter().map(|&p| p as f64 / 255.0)
            });
            let (mut s, mut s2) = (0.0, 0.0);
            for v in vals {
                s += v;
                s2 += v * v;
            }
            let count = (n * plane).max(1) as f64;
            let m = s / count;
            mean[c] = m;
            let var = (s2 / count - m * m).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, pixels: &[u8], channels: usize, plane: usize) -> Result<Vec<f64>> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::invalid(
                "normalization",
                format!("has {} channels, data has {channels}", self.mean.len()),
            ));
        }
        Ok(pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i / plane) % channels;
                (p as f64 / 255.0 - self.mean[c]) / self.std[c]
            })
            .collect())
    }
}

/// Normalized NCHW images with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` records (or all, if fewer), relabelled with `split`.
    pub fn take(&self, n: usize, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, split)
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split,
            normalization: self.normalization.clone(),
        }
    }

    /// Record order for `epoch`: a seeded shuffle, so the same seed and
    /// epoch always give the same order.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::DataOrder, epoch));
        order
    }
}
