//! Real/counterfactual pair records, their line-oriented manifest, and the
//! classifier-confidence acceptance filter.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::grad::Tensor;
use crate::model::{infer, Checkpoint};

use super::{io::read_png_gray, DataError};

/// One real/counterfactual pair. `confidence` and `accepted` are filled by
/// the filter; the on-disk manifest stores only the five identity fields.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    pub class_i: usize,
    pub class_j: usize,
    pub path_real: String,
    pub path_counterfactual: String,
    pub confidence: Option<f64>,
    pub accepted: bool,
}

impl PairRecord {
    pub fn new(
        pair_id: impl Into<String>,
        class_i: usize,
        class_j: usize,
        path_real: impl Into<String>,
        path_counterfactual: impl Into<String>,
    ) -> PairRecord {
        PairRecord {
            pair_id: pair_id.into(),
            class_i,
            class_j,
            path_real: path_real.into(),
            path_counterfactual: path_counterfactual.into(),
            confidence: None,
            accepted: false,
        }
    }

    /// Load both images, resolving relative paths against `base`.
    pub fn load_images(&self, base: &Path) -> Result<(Tensor, Tensor), DataError> {
        Ok((
            read_png_gray(&base.join(&self.path_real))?,
            read_png_gray(&base.join(&self.path_counterfactual))?,
        ))
    }
}

pub fn write_pair_manifest(path: &Path, records: &[PairRecord]) -> Result<(), DataError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pair_id, r.class_i, r.class_j, r.path_real, r.path_counterfactual
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_pair_manifest(path: &Path) -> Result<Vec<PairRecord>, DataError> {
    let mut records = Vec::new();
    for (ln, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(DataError::Format(format!(
                "pair manifest line {}: expected pair_id,class_i,class_j,path_real,path_counterfactual",
                ln + 1
            )));
        }
        let class_i: usize = fields[1]
            .parse()
            .map_err(|_| DataError::Format(format!("pair manifest line {}: bad class_i", ln + 1)))?;
        let class_j: usize = fields[2]
            .parse()
            .map_err(|_| DataError::Format(format!("pair manifest line {}: bad class_j", ln + 1)))?;
        if class_i == class_j {
            return Err(DataError::Format(format!(
                "pair manifest line {}: classes must differ",
                ln + 1
            )));
        }
        records.push(PairRecord::new(fields[0], class_i, class_j, fields[3], fields[4]));
    }
    Ok(records)
}

/// Batched counterfactual confidences f(x_c)_j for a slice of records.
pub fn counterfactual_confidences(
    ckpt: &Checkpoint,
    base: &Path,
    records: &[PairRecord],
) -> Result<Vec<f64>, DataError> {
    let s = ckpt.spec.input_size;
    let k = ckpt.spec.num_classes;
    let mut confidences = Vec::with_capacity(records.len());
    for chunk in records.chunks(32) {
        let mut batch = Tensor::zeros(&[chunk.len(), 1, s, s]);
        for (b, r) in chunk.iter().enumerate() {
            if r.class_j >= k {
                return Err(DataError::Format(format!(
                    "pair {}: class_j {} out of range for a {k}-class model",
                    r.pair_id, r.class_j
                )));
            }
            let img = read_png_gray(&base.join(&r.path_counterfactual))?;
            if img.shape() != [1, s, s] {
                return Err(DataError::Format(format!(
                    "pair {}: counterfactual is {:?}, model expects {s}×{s}",
                    r.pair_id,
                    img.shape()
                )));
            }
            batch.data_mut()[b * s * s..(b + 1) * s * s].copy_from_slice(img.data());
        }
        let (probs, _) = infer(ckpt, &batch)?;
        for (b, r) in chunk.iter().enumerate() {
            confidences.push(probs.data()[b * k + r.class_j]);
        }
    }
    Ok(confidences)
}

/// Keep exactly the pairs whose counterfactual reaches confidence θ for its
/// target class; every returned record carries its confidence.
pub fn filter_pairs(
    ckpt: &Checkpoint,
    base: &Path,
    records: &[PairRecord],
    theta: f64,
) -> Result<Vec<PairRecord>, DataError> {
    let confidences = counterfactual_confidences(ckpt, base, records)?;
    Ok(records
        .iter()
        .zip(confidences)
        .filter(|(_, c)| *c >= theta)
        .map(|(r, c)| PairRecord { confidence: Some(c), accepted: true, ..r.clone() })
        .collect())
}
