//! IDX binary format (the MNIST container): big-endian magic, big-endian
//! u32 dimension fields, then raw u8 payload.

use std::fs;
use std::path::Path;

use super::{DataError, ImageTensor, LabeledDataset};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(buf: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
            expected: offset + 4,
            found: buf.len(),
        })?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an image/label IDX file pair into a dataset. Record order in the
/// file is preserved.
pub fn load_idx_dataset(
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<LabeledDataset, DataError> {
    let image_path = image_path.as_ref();
    let label_path = label_path.as_ref();

    let img_buf = read_file(image_path)?;
    let magic = read_u32(&img_buf, 0, image_path)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: image_path.display().to_string(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(&img_buf, 4, image_path)? as usize;
    let rows = read_u32(&img_buf, 8, image_path)? as usize;
    let cols = read_u32(&img_buf, 12, image_path)? as usize;
    let payload = &img_buf[16..];
    let expected = count * rows * cols;
    if payload.len() < expected {
        return Err(DataError::Truncated {
            path: image_path.display().to_string(),
            expected: 16 + expected,
            found: img_buf.len(),
        });
    }

    let lbl_buf = read_file(label_path)?;
    let magic = read_u32(&lbl_buf, 0, label_path)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: label_path.display().to_string(),
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let label_count = read_u32(&lbl_buf, 4, label_path)? as usize;
    if lbl_buf.len() < 8 + label_count {
        return Err(DataError::Truncated {
            path: label_path.display().to_string(),
            expected: 8 + label_count,
            found: lbl_buf.len(),
        });
    }
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let images: Vec<ImageTensor> = (0..count)
        .map(|i| {
            let start = i * rows * cols;
            ImageTensor {
                height: rows,
                width: cols,
                channels: 1,
                pixels: payload[start..start + rows * cols].to_vec(),
            }
        })
        .collect();
    let labels: Vec<usize> = lbl_buf[8..8 + count].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    LabeledDataset::new(images, labels, num_classes)
}

/// Writes a single-channel dataset back out as an IDX file pair.
pub fn save_idx_dataset(
    dataset: &LabeledDataset,
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let (rows, cols) = dataset
        .images
        .first()
        .map_or((0, 0), |img| (img.height, img.width));
    if dataset.images.iter().any(|img| img.channels != 1) {
        return Err(DataError::InvalidChannels { channels: 3 });
    }

    let mut img_buf = Vec::with_capacity(16 + dataset.len() * rows * cols);
    img_buf.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img_buf.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    img_buf.extend_from_slice(&(rows as u32).to_be_bytes());
    img_buf.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in &dataset.images {
        img_buf.extend_from_slice(&img.pixels);
    }

    let mut lbl_buf = Vec::with_capacity(8 + dataset.len());
    lbl_buf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl_buf.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lbl_buf.extend(dataset.labels.iter().map(|&l| l as u8));

    let write = |path: &Path, buf: &[u8]| {
        fs::write(path, buf).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(image_path.as_ref(), &img_buf)?;
    write(label_path.as_ref(), &lbl_buf)
}
