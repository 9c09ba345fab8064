//! Dispersed-pixel trigger synthesis.
//!
//! A trigger is a full-image signed perturbation built in three steps: draw a
//! small base block of i.i.d. +-1 signs from a keyed ChaCha20 stream, repeat
//! each sign `reps_h` x `reps_v` times, then mirror per the configured
//! symmetry. The realized region sits centered inside the image with an
//! unperturbed margin of at least `margin` pixels on every side. Only the
//! generative recipe ([`TriggerSpec`]) is ever stored; the tensor is
//! regenerated from the seed on demand.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::data::NormStats;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("infeasible layout: {image_w}x{image_h} image cannot fit a {symmetry:?} trigger with margin {margin} and reps {reps_h}x{reps_v}")]
    InfeasibleLayout {
        image_w: usize,
        image_h: usize,
        margin: usize,
        reps_h: usize,
        reps_v: usize,
        symmetry: Symmetry,
    },
    #[error("magnitude {0} outside (0, 255]")]
    BadMagnitude(f64),
    #[error("repetition counts must be positive")]
    BadReps,
    #[error("channel mismatch: trigger has {trigger}, stats have {stats}")]
    ChannelMismatch { trigger: usize, stats: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trigger manifest: {0}")]
    MalformedManifest(String),
    #[error("unsupported manifest version {0}")]
    BadVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    None,
    Horizontal,
    Vertical,
    Both,
}

impl Symmetry {
    /// Mirror multiplicity: how many region cells each base element covers
    /// beyond repetition (1, 2, or 4).
    pub fn factor(self) -> usize {
        match self {
            Symmetry::None => 1,
            Symmetry::Horizontal | Symmetry::Vertical => 2,
            Symmetry::Both => 4,
        }
    }

    fn h_mirror(self) -> bool {
        matches!(self, Symmetry::Horizontal | Symmetry::Both)
    }

    fn v_mirror(self) -> bool {
        matches!(self, Symmetry::Vertical | Symmetry::Both)
    }
}

impl std::str::FromStr for Symmetry {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Symmetry::None),
            "horizontal" => Ok(Symmetry::Horizontal),
            "vertical" => Ok(Symmetry::Vertical),
            "both" => Ok(Symmetry::Both),
            other => Err(format!("unknown symmetry {other:?}")),
        }
    }
}

/// The generative recipe for a trigger. Serialized as the trigger manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    /// 256-bit CSPRNG key, hex-encoded in the manifest.
    #[serde(with = "seed_hex")]
    pub seed: [u8; 32],
    pub magnitude_m: f64,
    pub reps_h: usize,
    pub reps_v: usize,
    pub margin: usize,
    pub symmetry: Symmetry,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
}

mod seed_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(seed))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("seed must be 64 hex chars (256 bits)"))
    }
}

/// The realized geometry: base block dims, the region rectangle, and cell
/// counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub t_h: usize,
    pub t_v: usize,
    /// Leftmost column of the region.
    pub x0: usize,
    /// Topmost row of the region.
    pub y0: usize,
    pub region_w: usize,
    pub region_h: usize,
    /// Total perturbed cells: region area times channels.
    pub m_effective: usize,
    /// Independently drawn random signs: `m_effective / (s * reps_h * reps_v)`.
    pub base_count: usize,
}

/// The realized full-image perturbation. Values are exactly 0 outside the
/// region rectangle and +-magnitude inside; layout matches the image raster
/// (row-major, channel-interleaved).
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerTensor {
    pub values: Vec<f64>,
    pub layout: Layout,
    pub magnitude: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TriggerTensor {
    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + ch]
    }
}

fn validate(spec: &TriggerSpec) -> Result<(), TriggerError> {
    if !(spec.magnitude_m > 0.0 && spec.magnitude_m <= 255.0) {
        return Err(TriggerError::BadMagnitude(spec.magnitude_m));
    }
    if spec.reps_h == 0 || spec.reps_v == 0 {
        return Err(TriggerError::BadReps);
    }
    Ok(())
}

/// Solves for the largest base block that fits: `t_h`, `t_v` are maximal
/// subject to the repeated/mirrored region leaving a margin of at least
/// `spec.margin` on every side. The region is centered; when the leftover
/// slack is odd the extra pixel goes to the left/top margin.
pub fn compute_layout(spec: &TriggerSpec) -> Result<Layout, TriggerError> {
    validate(spec)?;
    let infeasible = || TriggerError::InfeasibleLayout {
        image_w: spec.image_w,
        image_h: spec.image_h,
        margin: spec.margin,
        reps_h: spec.reps_h,
        reps_v: spec.reps_v,
        symmetry: spec.symmetry,
    };
    let h_mul = if spec.symmetry.h_mirror() { 2 } else { 1 };
    let v_mul = if spec.symmetry.v_mirror() { 2 } else { 1 };
    let avail_w = spec.image_w.checked_sub(2 * spec.margin).ok_or_else(infeasible)?;
    let avail_h = spec.image_h.checked_sub(2 * spec.margin).ok_or_else(infeasible)?;
    let t_h = avail_w / (h_mul * spec.reps_h);
    let t_v = avail_h / (v_mul * spec.reps_v);
    if t_h == 0 || t_v == 0 {
        return Err(infeasible());
    }
    let region_w = h_mul * spec.reps_h * t_h;
    let region_h = v_mul * spec.reps_v * t_v;
    let x0 = (spec.image_w - region_w + 1) / 2;
    let y0 = (spec.image_h - region_h + 1) / 2;
    let m_effective = region_w * region_h * spec.channels;
    let base_count = t_h * t_v * spec.channels;
    debug_assert_eq!(base_count * spec.symmetry.factor() * spec.reps_h * spec.reps_v, m_effective);
    Ok(Layout {
        t_h,
        t_v,
        x0,
        y0,
        region_w,
        region_h,
        m_effective,
        base_count,
    })
}

/// Draws `n` i.i.d. +-1 signs from the keyed ChaCha20 stream, one bit per
/// sign, MSB first. The scan order over the base block is channel-major,
/// then row, then column: index `(ch * t_v + row) * t_h + col`.
pub fn base_signs(seed: &[u8; 32], n: usize) -> Vec<i8> {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    let mut bytes = vec![0u8; n.div_ceil(8)];
    rng.fill_bytes(&mut bytes);
    (0..n)
        .map(|i| {
            let bit = (bytes[i / 8] >> (7 - i % 8)) & 1;
            if bit == 1 {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// Realizes the full-image trigger tensor from its recipe. Deterministic:
/// the same spec always produces a bit-identical tensor.
pub fn generate_trigger(spec: &TriggerSpec) -> Result<TriggerTensor, TriggerError> {
    let layout = compute_layout(spec)?;
    let signs = base_signs(&spec.seed, layout.base_count);
    let mut values = vec![0.0f64; spec.image_h * spec.image_w * spec.channels];

    // width/height of the un-mirrored (repeated) block
    let block_w = spec.reps_h * layout.t_h;
    let block_h = spec.reps_v * layout.t_v;

    for ch in 0..spec.channels {
        for ry in 0..layout.region_h {
            for rx in 0..layout.region_w {
                // fold mirrored halves back onto the base quadrant
                let bx = if spec.symmetry.h_mirror() && rx >= block_w {
                    layout.region_w - 1 - rx
                } else {
                    rx
                };
                let by = if spec.symmetry.v_mirror() && ry >= block_h {
                    layout.region_h - 1 - ry
                } else {
                    ry
                };
                let base_col = bx / spec.reps_h;
                let base_row = by / spec.reps_v;
                let sign = signs[(ch * layout.t_v + base_row) * layout.t_h + base_col];
                let row = layout.y0 + ry;
                let col = layout.x0 + rx;
                values[(row * spec.image_w + col) * spec.channels + ch] =
                    sign as f64 * spec.magnitude_m;
            }
        }
    }
    Ok(TriggerTensor {
        values,
        layout,
        magnitude: spec.magnitude_m,
        height: spec.image_h,
        width: spec.image_w,
        channels: spec.channels,
    })
}

/// Maps every cell (margins included) through `value * stddev_ch + mean_ch`,
/// producing the perturbation in unnormalized pixel units.
pub fn unnormalize_trigger(trigger: &TriggerTensor, stats: &NormStats) -> Result<Vec<f64>, TriggerError> {
    if stats.mean.len() != trigger.channels || stats.stddev.len() != trigger.channels {
        return Err(TriggerError::ChannelMismatch {
            trigger: trigger.channels,
            stats: stats.mean.len(),
        });
    }
    Ok(trigger
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % trigger.channels;
            v * stats.stddev[ch] + stats.mean[ch]
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(flatten)]
    spec: TriggerSpec,
}

pub fn save_trigger(spec: &TriggerSpec, path: impl AsRef<Path>) -> Result<(), TriggerError> {
    let path = path.as_ref();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| TriggerError::MalformedManifest(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| TriggerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_trigger(path: impl AsRef<Path>) -> Result<TriggerSpec, TriggerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TriggerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| TriggerError::MalformedManifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(TriggerError::BadVersion(manifest.version));
    }
    validate(&manifest.spec)?;
    Ok(manifest.spec)
}
