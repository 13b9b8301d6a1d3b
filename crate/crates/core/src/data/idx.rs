//! IDX container parsing (the MNIST distribution format): big-endian magic,
//! dimension sizes, then raw unsigned bytes.

use std::fs;
use std::path::Path;

use crate::grad::Tensor;

use super::{DataError, ImageSample};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn be_u32(buf: &[u8], pos: usize) -> Result<u32, DataError> {
    buf.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Format("truncated IDX header".into()))
}

fn parse_images(buf: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    if be_u32(buf, 0)? != IMAGE_MAGIC {
        return Err(DataError::Format(format!("bad image magic {:#x}", be_u32(buf, 0)?)));
    }
    let count = be_u32(buf, 4)? as usize;
    let rows = be_u32(buf, 8)? as usize;
    let cols = be_u32(buf, 12)? as usize;
    let payload = &buf[16..];
    if payload.len() != count * rows * cols {
        return Err(DataError::Format(format!(
            "image payload holds {} bytes, header promises {}",
            payload.len(),
            count * rows * cols
        )));
    }
    Ok((count, rows, cols, payload))
}

fn parse_labels(buf: &[u8]) -> Result<&[u8], DataError> {
    if be_u32(buf, 0)? != LABEL_MAGIC {
        return Err(DataError::Format(format!("bad label magic {:#x}", be_u32(buf, 0)?)));
    }
    let count = be_u32(buf, 4)? as usize;
    let payload = &buf[8..];
    if payload.len() != count {
        return Err(DataError::Format(format!(
            "label payload holds {} bytes, header promises {count}",
            payload.len()
        )));
    }
    Ok(payload)
}

/// Load an images/labels IDX file pair; pixels scale to [0,1].
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<ImageSample>, DataError> {
    let img_buf = fs::read(images_path)?;
    let lbl_buf = fs::read(labels_path)?;
    let (count, rows, cols, pixels) = parse_images(&img_buf)?;
    let labels = parse_labels(&lbl_buf)?;
    if labels.len() != count {
        return Err(DataError::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    Ok((0..count)
        .map(|i| {
            let data: Vec<f64> = pixels[i * rows * cols..(i + 1) * rows * cols]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            ImageSample {
                image: Tensor::new(vec![1, rows, cols], data),
                label: labels[i] as usize,
                seed: 0,
                scene: None,
                source: Some(format!("{}#{i}", images_path.display())),
            }
        })
        .collect())
}
