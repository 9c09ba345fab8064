//! Attack and perceptual metrics: attack success rate, functionality loss,
//! balanced accuracy, SSIM, and prediction entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageTensor;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty input")]
    EmptyInput,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("dimension mismatch between images")]
    DimensionMismatch,
    #[error("probability vector does not sum to 1 (sum = {0})")]
    InvalidDistribution(f64),
}

/// Aggregated evaluation numbers, serialized into CLI reports.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub functionality: f64,
    pub functionality_loss: f64,
    pub asr: f64,
    pub bacc: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub extras: Vec<(String, f64)>,
}

/// Fraction of predictions equal to the target class.
pub fn attack_success_rate(predictions: &[usize], target_class: usize) -> Result<f64, MetricError> {
    if predictions.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let hits = predictions.iter().filter(|&&p| p == target_class).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Benign accuracy minus backdoored accuracy.
pub fn functionality_loss(benign_acc: f64, backdoored_acc: f64) -> f64 {
    benign_acc - backdoored_acc
}

/// Arithmetic mean of the true positive and true negative rates.
pub fn balanced_accuracy(tpr: f64, tnr: f64) -> Result<f64, MetricError> {
    for v in [tpr, tnr] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricError::OutOfRange(v));
        }
    }
    Ok((tpr + tnr) / 2.0)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel(h: usize, w: usize) -> Vec<f64> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..h * w)
        .map(|i| {
            let y = (i / w) as f64 - cy;
            let x = (i % w) as f64 - cx;
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean structural similarity over sliding Gaussian-weighted windows
/// (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 255), channels averaged.
/// For images smaller than the window, the window shrinks to the image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MetricError> {
    if !a.same_dims(b) {
        return Err(MetricError::DimensionMismatch);
    }
    if a.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let wh = SSIM_WINDOW.min(a.height);
    let ww = SSIM_WINDOW.min(a.width);
    let kernel = gaussian_kernel(wh, ww);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        for y in 0..=(a.height - wh) {
            for x in 0..=(a.width - ww) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in 0..wh {
                    for dx in 0..ww {
                        let w = kernel[dy * ww + dx];
                        let va = a.get(y + dy, x + dx, ch) as f64;
                        let vb = b.get(y + dy, x + dx, ch) as f64;
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean Shannon entropy (bits) across a batch of class distributions, with
/// `0 * log 0 := 0`.
pub fn prediction_entropy(probability_vectors: &[Vec<f64>]) -> Result<f64, MetricError> {
    if probability_vectors.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut total = 0.0;
    for p in probability_vectors {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
            return Err(MetricError::InvalidDistribution(sum));
        }
        total += -p
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.log2())
            .sum::<f64>();
    }
    Ok(total / probability_vectors.len() as f64)
}
