//! Deterministic image transformations used by the defenses and by training
//! augmentation: median smoothing, flipping, padded random cropping,
//! rotation, and superposition blending.

use rand::Rng;
use thiserror::Error;

use crate::data::ImageTensor;

#[derive(Debug, Error)]
pub enum ImageOpError {
    #[error("window {window} out of range for {h}x{w} image")]
    WindowOutOfRange { window: usize, h: usize, w: usize },
    #[error("dimension mismatch between operands")]
    DimensionMismatch,
    #[error("blend weight {0} outside [0, 1]")]
    BadWeight(f64),
}

#[inline]
fn round_half_away(v: f64) -> i64 {
    (v.abs() + 0.5).floor() as i64 * if v < 0.0 { -1 } else { 1 }
}

/// Median filter with clamped (edge-replicated) borders.
///
/// The window anchor puts the center cell at offset `ceil(w/2) - 1` in each
/// axis, and the lower median (`sorted[(w*w - 1) / 2]`) is used, so even
/// window sizes are well defined.
pub fn median_smooth(image: &ImageTensor, window: usize) -> Result<ImageTensor, ImageOpError> {
    if window == 0 || window > image.height.min(image.width) {
        return Err(ImageOpError::WindowOutOfRange {
            window,
            h: image.height,
            w: image.width,
        });
    }
    if window == 1 {
        return Ok(image.clone());
    }
    let center = window.div_ceil(2) - 1;
    let mut out = image.clone();
    let mut buf = Vec::with_capacity(window * window);
    for r in 0..image.height {
        for c in 0..image.width {
            for ch in 0..image.channels {
                buf.clear();
                for dr in 0..window {
                    for dc in 0..window {
                        let rr = (r + dr).saturating_sub(center).min(image.height - 1);
                        let cc = (c + dc).saturating_sub(center).min(image.width - 1);
                        buf.push(image.get(rr, cc, ch));
                    }
                }
                buf.sort_unstable();
                out.set(r, c, ch, buf[(buf.len() - 1) / 2]);
            }
        }
    }
    Ok(out)
}

/// Maps column `c` to `width - 1 - c`. Involution.
pub fn horizontal_flip(image: &ImageTensor) -> ImageTensor {
    let mut out = image.clone();
    for r in 0..image.height {
        for c in 0..image.width {
            for ch in 0..image.channels {
                out.set(r, c, ch, image.get(r, image.width - 1 - c, ch));
            }
        }
    }
    out
}

/// Zero-pads by `pad` on all sides, then cuts an original-size window at
/// offset `(dx, dy)` from the padded top-left. `dx`, `dy` must lie in
/// `[0, 2*pad]`.
pub fn crop_at(image: &ImageTensor, pad: usize, dx: usize, dy: usize) -> ImageTensor {
    debug_assert!(dx <= 2 * pad && dy <= 2 * pad);
    if pad == 0 {
        return image.clone();
    }
    let mut out = ImageTensor::zeros(image.height, image.width, image.channels);
    for r in 0..image.height {
        for c in 0..image.width {
            // position in the padded canvas
            let pr = r + dy;
            let pc = c + dx;
            if pr >= pad && pr < pad + image.height && pc >= pad && pc < pad + image.width {
                for ch in 0..image.channels {
                    out.set(r, c, ch, image.get(pr - pad, pc - pad, ch));
                }
            }
        }
    }
    out
}

/// Random crop with a seeded-uniform offset in `[0, 2*pad]^2`.
pub fn random_crop(image: &ImageTensor, pad: usize, rng: &mut impl Rng) -> ImageTensor {
    if pad == 0 {
        return image.clone();
    }
    let dx = rng.gen_range(0..=2 * pad);
    let dy = rng.gen_range(0..=2 * pad);
    crop_at(image, pad, dx, dy)
}

/// Rotation about the image center with bilinear interpolation and zero
/// fill; output dimensions equal input dimensions. `rotate(x, 0)` is the
/// identity bit-exactly.
pub fn rotate(image: &ImageTensor, degrees: f64) -> ImageTensor {
    if degrees == 0.0 {
        return image.clone();
    }
    let theta = degrees.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (image.height as f64 - 1.0) / 2.0;
    let cx = (image.width as f64 - 1.0) / 2.0;
    let mut out = ImageTensor::zeros(image.height, image.width, image.channels);
    for r in 0..image.height {
        for c in 0..image.width {
            // inverse map: rotate destination coords by -theta
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sx = cx + cos_t * dx + sin_t * dy;
            let sy = cy - sin_t * dx + cos_t * dy;
            let x0 = sx.floor() as i64;
            let y0 = sy.floor() as i64;
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..image.channels {
                let sample = |x: i64, y: i64| -> f64 {
                    if x < 0 || y < 0 || x >= image.width as i64 || y >= image.height as i64 {
                        0.0
                    } else {
                        image.get(y as usize, x as usize, ch) as f64
                    }
                };
                let v = sample(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + sample(x0 + 1, y0) * fx * (1.0 - fy)
                    + sample(x0, y0 + 1) * (1.0 - fx) * fy
                    + sample(x0 + 1, y0 + 1) * fx * fy;
                out.set(r, c, ch, round_half_away(v).clamp(0, 255) as u8);
            }
        }
    }
    out
}

/// Per-cell `round(weight * a + (1 - weight) * b)`, clamped.
pub fn blend(a: &ImageTensor, b: &ImageTensor, weight: f64) -> Result<ImageTensor, ImageOpError> {
    if !a.same_dims(b) {
        return Err(ImageOpError::DimensionMismatch);
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(ImageOpError::BadWeight(weight));
    }
    let pixels = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&pa, &pb)| {
            round_half_away(weight * pa as f64 + (1.0 - weight) * pb as f64).clamp(0, 255) as u8
        })
        .collect();
    Ok(ImageTensor {
        height: a.height,
        width: a.width,
        channels: a.channels,
        pixels,
    })
}
