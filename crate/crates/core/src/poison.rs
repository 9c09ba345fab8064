//! Dataset poisoning: trigger superposition with saturation, poison plans,
//! and the opaque-patch baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ImageTensor, LabeledDataset};
use crate::trigger::TriggerTensor;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("dimension mismatch: image is {ih}x{iw}x{ic}, trigger is {th}x{tw}x{tc}")]
    DimensionMismatch {
        ih: usize,
        iw: usize,
        ic: usize,
        th: usize,
        tw: usize,
        tc: usize,
    },
    #[error("poison rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("plan index {index} out of range for dataset of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("target class {target} out of range for {num_classes} classes")]
    BadTarget { target: usize, num_classes: usize },
    #[error("patch ({pw}x{ph} at {ax},{ay}) exceeds image bounds ({iw}x{ih})")]
    PatchOutOfBounds {
        pw: usize,
        ph: usize,
        ax: usize,
        ay: usize,
        iw: usize,
        ih: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which records get poisoned and relabeled, and how to reproduce the draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub target_class: usize,
    pub poison_rate: f64,
    /// Sorted, unique, in-range dataset indices.
    pub poisoned_indices: Vec<usize>,
    pub selection_seed: u64,
}

impl PoisonPlan {
    pub fn contains(&self, index: usize) -> bool {
        self.poisoned_indices.binary_search(&index).is_ok()
    }
}

/// An opaque rectangle overwrite (the classic visible-patch baseline).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub width: usize,
    pub height: usize,
    /// Per-channel fill intensity.
    pub color: Vec<u8>,
    /// Top-left corner of the patch, in pixels from the image's top-left.
    pub anchor_x: usize,
    pub anchor_y: usize,
}

#[inline]
fn round_half_away(v: f64) -> i64 {
    (v.abs() + 0.5).floor() as i64 * v.signum() as i64
}

/// Adds the trigger to the image, rounding each trigger value half away
/// from zero and clamping the sum to [0, 255].
pub fn poison_image(image: &ImageTensor, trigger: &TriggerTensor) -> Result<ImageTensor, PoisonError> {
    if image.height != trigger.height || image.width != trigger.width || image.channels != trigger.channels {
        return Err(PoisonError::DimensionMismatch {
            ih: image.height,
            iw: image.width,
            ic: image.channels,
            th: trigger.height,
            tw: trigger.width,
            tc: trigger.channels,
        });
    }
    let pixels = image
        .pixels
        .iter()
        .zip(&trigger.values)
        .map(|(&px, &tv)| (px as i64 + round_half_away(tv)).clamp(0, 255) as u8)
        .collect();
    Ok(ImageTensor {
        height: image.height,
        width: image.width,
        channels: image.channels,
        pixels,
    })
}

/// Draws `round(rate * size)` indices uniformly without replacement,
/// deterministic for a given seed.
pub fn make_plan(
    dataset_size: usize,
    poison_rate: f64,
    target_class: usize,
    selection_seed: u64,
) -> Result<PoisonPlan, PoisonError> {
    if !(0.0..=1.0).contains(&poison_rate) {
        return Err(PoisonError::BadRate(poison_rate));
    }
    let k = (poison_rate * dataset_size as f64).round() as usize;
    let mut indices: Vec<usize> = (0..dataset_size).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(selection_seed);
    // partial Fisher-Yates: the first k slots end up uniform without replacement
    for i in 0..k.min(dataset_size.saturating_sub(1)) {
        let j = rng.gen_range(i..dataset_size);
        indices.swap(i, j);
    }
    let mut poisoned: Vec<usize> = indices.into_iter().take(k).collect();
    poisoned.sort_unstable();
    Ok(PoisonPlan {
        target_class,
        poison_rate,
        poisoned_indices: poisoned,
        selection_seed,
    })
}

/// Replaces each planned record with its poisoned, relabeled version.
/// Everything else is untouched and order is preserved.
pub fn poison_dataset(
    dataset: &LabeledDataset,
    trigger: &TriggerTensor,
    plan: &PoisonPlan,
) -> Result<LabeledDataset, PoisonError> {
    if plan.target_class >= dataset.num_classes {
        return Err(PoisonError::BadTarget {
            target: plan.target_class,
            num_classes: dataset.num_classes,
        });
    }
    if let Some(&bad) = plan.poisoned_indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(PoisonError::IndexOutOfRange {
            index: bad,
            size: dataset.len(),
        });
    }
    let mut images = dataset.images.clone();
    let mut labels = dataset.labels.clone();
    for &i in &plan.poisoned_indices {
        images[i] = poison_image(&dataset.images[i], trigger)?;
        labels[i] = plan.target_class;
    }
    Ok(LabeledDataset {
        images,
        labels,
        num_classes: dataset.num_classes,
    })
}

/// Poisons every image and relabels everything to the target class; this is
/// the test set used to measure the attack success rate.
pub fn poison_all_test(
    dataset: &LabeledDataset,
    trigger: &TriggerTensor,
    target_class: usize,
) -> Result<LabeledDataset, PoisonError> {
    let images: Result<Vec<_>, _> = dataset.images.iter().map(|img| poison_image(img, trigger)).collect();
    Ok(LabeledDataset {
        images: images?,
        labels: vec![target_class; dataset.len()],
        num_classes: dataset.num_classes.max(target_class + 1),
    })
}

/// Overwrites the patch rectangle with the patch color.
pub fn apply_patch(image: &ImageTensor, patch: &PatchSpec) -> Result<ImageTensor, PoisonError> {
    if patch.anchor_x + patch.width > image.width || patch.anchor_y + patch.height > image.height {
        return Err(PoisonError::PatchOutOfBounds {
            pw: patch.width,
            ph: patch.height,
            ax: patch.anchor_x,
            ay: patch.anchor_y,
            iw: image.width,
            ih: image.height,
        });
    }
    let mut out = image.clone();
    for r in patch.anchor_y..patch.anchor_y + patch.height {
        for c in patch.anchor_x..patch.anchor_x + patch.width {
            for ch in 0..image.channels {
                out.set(r, c, ch, patch.color[ch % patch.color.len()]);
            }
        }
    }
    Ok(out)
}

/// Patch analogue of [`poison_dataset`].
pub fn patch_dataset(
    dataset: &LabeledDataset,
    patch: &PatchSpec,
    plan: &PoisonPlan,
) -> Result<LabeledDataset, PoisonError> {
    if let Some(&bad) = plan.poisoned_indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(PoisonError::IndexOutOfRange {
            index: bad,
            size: dataset.len(),
        });
    }
    let mut images = dataset.images.clone();
    let mut labels = dataset.labels.clone();
    for &i in &plan.poisoned_indices {
        images[i] = apply_patch(&dataset.images[i], patch)?;
        labels[i] = plan.target_class;
    }
    Ok(LabeledDataset {
        images,
        labels,
        num_classes: dataset.num_classes,
    })
}

/// Patch analogue of [`poison_all_test`].
pub fn patch_all_test(
    dataset: &LabeledDataset,
    patch: &PatchSpec,
    target_class: usize,
) -> Result<LabeledDataset, PoisonError> {
    let images: Result<Vec<_>, _> = dataset.images.iter().map(|img| apply_patch(img, patch)).collect();
    Ok(LabeledDataset {
        images: images?,
        labels: vec![target_class; dataset.len()],
        num_classes: dataset.num_classes.max(target_class + 1),
    })
}
