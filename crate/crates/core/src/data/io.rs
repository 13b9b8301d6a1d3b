//! On-disk dataset layout:
//!
//! ```text
//! <dir>/dataset.json        metadata (kind, seed, count, image size)
//! <dir>/manifest.csv        one `id,label,relative-path` line per image
//! <dir>/scenes.jsonl        one scene record per line (synthetic data)
//! <dir>/images/<id>.png     8-bit grayscale renders
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grad::Tensor;

use super::{DataError, DatasetKind, ImageSample, Scene};

/// Quantize [0,1] values to 8-bit and write a grayscale PNG.
pub fn write_png_gray(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let (h, w) = match *image.shape() {
        [1, h, w] => (h, w),
        [h, w] => (h, w),
        ref s => return Err(DataError::Format(format!("expected grayscale image, got {s:?}"))),
    };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Read a grayscale PNG back into a (1,h,w) tensor in [0,1].
pub fn read_png_gray(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![1, h as usize, w as usize], data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRow {
    id: String,
    label: usize,
    seed: u64,
    scene: Scene,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Write a generated dataset. Images are quantized to 8-bit PNG; scenes are
/// kept alongside so counterfactuals can be derived later.
pub fn write_dataset(dir: &Path, meta: &DatasetMeta, samples: &[ImageSample]) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;

    let mut manifest = String::new();
    let mut scenes = String::new();
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(i);
        let rel = format!("images/{id}.png");
        write_png_gray(&dir.join(&rel), &s.image)?;
        manifest.push_str(&format!("{id},{},{rel}\n", s.label));
        if let Some(scene) = &s.scene {
            let row = SceneRow { id: id.clone(), label: s.label, seed: s.seed, scene: scene.clone() };
            scenes.push_str(&serde_json::to_string(&row).expect("scene serializes"));
            scenes.push('\n');
        }
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    if !scenes.is_empty() {
        fs::write(dir.join("scenes.jsonl"), scenes)?;
    }
    let mut f = fs::File::create(dir.join("dataset.json"))?;
    f.write_all(serde_json::to_string_pretty(meta).expect("meta serializes").as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Load a dataset directory. Images come from the quantized PNGs (the
/// canonical pipeline inputs); scenes are reattached when present.
pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<ImageSample>), DataError> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)
        .map_err(|e| DataError::Format(format!("dataset.json: {e}")))?;

    let mut scenes: std::collections::BTreeMap<String, SceneRow> = std::collections::BTreeMap::new();
    let scenes_path = dir.join("scenes.jsonl");
    if scenes_path.exists() {
        for (ln, line) in BufReader::new(fs::File::open(&scenes_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SceneRow = serde_json::from_str(&line)
                .map_err(|e| DataError::Format(format!("scenes.jsonl line {}: {e}", ln + 1)))?;
            scenes.insert(row.id.clone(), row);
        }
    }

    let mut samples = Vec::new();
    for (ln, line) in BufReader::new(fs::File::open(dir.join("manifest.csv"))?)
        .lines()
        .enumerate()
    {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(DataError::Format(format!(
                "manifest.csv line {}: expected id,label,path",
                ln + 1
            )));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| DataError::Format(format!("manifest.csv line {}: bad label", ln + 1)))?;
        if label >= meta.num_classes {
            return Err(DataError::Format(format!(
                "manifest.csv line {}: label {label} out of range",
                ln + 1
            )));
        }
        let image = read_png_gray(&dir.join(fields[2]))?;
        let row = scenes.get(fields[0]);
        samples.push(ImageSample {
            image,
            label,
            seed: row.map(|r| r.seed).unwrap_or(0),
            scene: row.map(|r| r.scene.clone()),
            source: Some(fields[2].to_string()),
        });
    }
    Ok((meta, samples))
}
