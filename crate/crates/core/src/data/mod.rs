//! In-memory image datasets and their on-disk formats (IDX, binary NetPBM).

mod idx;
mod netpbm;
pub mod synth;

pub use idx::{load_idx_dataset, save_idx_dataset};
pub use netpbm::{load_netpbm, save_netpbm};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected 0x{expected:08x}, found 0x{found:08x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported NetPBM variant {variant:?} (only binary P5/P6 are supported)")]
    UnsupportedVariant { variant: String },
    #[error("unsupported NetPBM maxval {maxval} (must be 255)")]
    BadMaxval { maxval: u32 },
    #[error("malformed NetPBM header: {reason}")]
    MalformedHeader { reason: String },
    #[error("invalid channel count {channels} (must be 1 or 3)")]
    InvalidChannels { channels: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dimension mismatch: {reason}")]
    DimensionMismatch { reason: String },
}

/// An H x W x C raster of 8-bit intensities, stored row-major with
/// interleaved channels: `pixels[(r * width + c) * channels + ch]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if channels != 1 && channels != 3 {
            return Err(DataError::InvalidChannels { channels });
        }
        if pixels.len() != height * width * channels {
            return Err(DataError::DimensionMismatch {
                reason: format!(
                    "pixel buffer has {} bytes, expected {}",
                    pixels.len(),
                    height * width * channels
                ),
            });
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: u8) {
        self.pixels[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// An ordered image + label collection. All images share one shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::DimensionMismatch {
                reason: format!("label {bad} out of range for {num_classes} classes"),
            });
        }
        if let Some(first) = images.first() {
            if let Some(odd) = images.iter().find(|img| !img.same_dims(first)) {
                return Err(DataError::DimensionMismatch {
                    reason: format!(
                        "mixed image shapes: {}x{}x{} vs {}x{}x{}",
                        first.height, first.width, first.channels, odd.height, odd.width, odd.channels
                    ),
                });
            }
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps only the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Per-channel intensity mean and standard deviation, in [0,255] units.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl NormStats {
    /// Identity normalization (mean 0, stddev 1) for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            stddev: vec![1.0; channels],
        }
    }
}

/// Constant channels would make the stddev zero; it is floored here so the
/// downstream (x - mean) / stddev never divides by zero.
pub const STDDEV_FLOOR: f64 = 1e-6;

/// Per-channel sample mean and population standard deviation over every
/// pixel of the dataset.
pub fn compute_norm_stats(dataset: &LabeledDataset) -> Result<NormStats, DataError> {
    let first = dataset.images.first().ok_or(DataError::EmptyDataset)?;
    let channels = first.channels;
    let mut sum = vec![0.0f64; channels];
    let mut sum_sq = vec![0.0f64; channels];
    let mut count = vec![0.0f64; channels];
    for img in &dataset.images {
        for (i, &p) in img.pixels.iter().enumerate() {
            let ch = i % channels;
            let v = p as f64;
            sum[ch] += v;
            sum_sq[ch] += v * v;
            count[ch] += 1.0;
        }
    }
    let mean: Vec<f64> = (0..channels).map(|ch| sum[ch] / count[ch]).collect();
    let stddev: Vec<f64> = (0..channels)
        .map(|ch| {
            let var = sum_sq[ch] / count[ch] - mean[ch] * mean[ch];
            var.max(0.0).sqrt().max(STDDEV_FLOOR)
        })
        .collect();
    Ok(NormStats { mean, stddev })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_px(v: u8) -> ImageTensor {
        ImageTensor::new(1, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn norm_stats_two_point() {
        let ds = LabeledDataset::new(vec![one_px(0), one_px(255)], vec![0, 1], 2).unwrap();
        let stats = compute_norm_stats(&ds).unwrap();
        assert_eq!(stats.mean, vec![127.5]);
        assert_eq!(stats.stddev, vec![127.5]);
    }

    #[test]
    fn norm_stats_constant_floored() {
        let ds = LabeledDataset::new(vec![one_px(0), one_px(0)], vec![0, 0], 1).unwrap();
        let stats = compute_norm_stats(&ds).unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.stddev, vec![STDDEV_FLOOR]);
    }

    #[test]
    fn norm_stats_empty_errors() {
        let ds = LabeledDataset::new(vec![], vec![], 2).unwrap();
        assert!(matches!(compute_norm_stats(&ds), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn norm_stats_permutation_invariant() {
        let imgs: Vec<ImageTensor> = [10u8, 200, 37, 99].iter().map(|&v| one_px(v)).collect();
        let ds_a = LabeledDataset::new(imgs.clone(), vec![0; 4], 1).unwrap();
        let mut rev = imgs;
        rev.reverse();
        let ds_b = LabeledDataset::new(rev, vec![0; 4], 1).unwrap();
        assert_eq!(compute_norm_stats(&ds_a).unwrap(), compute_norm_stats(&ds_b).unwrap());
    }

    #[test]
    fn dataset_rejects_label_out_of_range() {
        assert!(LabeledDataset::new(vec![one_px(1)], vec![3], 2).is_err());
    }

    #[test]
    fn image_rejects_two_channels() {
        assert!(matches!(
            ImageTensor::new(1, 1, 2, vec![0, 0]),
            Err(DataError::InvalidChannels { channels: 2 })
        ));
    }
}
