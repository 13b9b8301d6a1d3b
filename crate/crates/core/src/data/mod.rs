//! Synthetic shape datasets with analytic counterfactuals, MNIST ingestion,
//! and the pair acceptance filter.
//!
//! Disc-A: one to six triangles; the class is the parity of their count.
//! Disc-B: one shape each of two kinds out of {disk, square, triangle};
//! the class names the missing kind. Counterfactuals edit the underlying
//! scene (remove/add a triangle, or substitute a shape kind in place) and
//! re-render with the identical noise field, so pixel differences stay
//! local to the edit.

pub mod idx;
pub mod io;
pub mod pairs;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::Tensor;
use crate::seed;

pub use io::{load_dataset, read_png_gray, sample_id, write_dataset, write_png_gray, DatasetMeta};
pub use pairs::{filter_pairs, load_pair_manifest, write_pair_manifest, PairRecord};
pub use render::{clean_raster, coverage_ratio, render_scene, shape_area};

pub const THETA_DEFAULT: f64 = 0.8;
const MAX_ATTEMPTS: usize = 1000;
const COVERAGE_MIN: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("shape out of bounds: {0}")]
    OutOfBounds(String),
    #[error("generation failed: {0}")]
    Rejection(String),
    #[error("data format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    /// Stable id; doubles as the Disc-B class id of the *missing* kind.
    pub fn index(self) -> usize {
        match self {
            ShapeKind::Disk => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ShapeKind> {
        ShapeKind::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Diameter of the circumscribed circle, pixels.
    pub d: f64,
    pub rotation: f64,
    /// 0–255 scale.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub noise_seed: u64,
    /// Additive Gaussian pixel-noise std, 0–255 scale.
    pub noise_strength: f64,
    pub smoothing_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    /// (1, size, size) in [0,1].
    pub image: Tensor,
    pub label: usize,
    /// Per-sample generator seed (0 for ingested data).
    pub seed: u64,
    pub scene: Option<Scene>,
    /// Source path for ingested data.
    pub source: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    DiscA,
    DiscB,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::DiscA => 2,
            DatasetKind::DiscB => 3,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "disc-a" => Ok(DatasetKind::DiscA),
            "disc-b" => Ok(DatasetKind::DiscB),
            other => Err(format!("unknown dataset '{other}' (expected disc-a|disc-b)")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::DiscA => "disc-a",
            DatasetKind::DiscB => "disc-b",
        })
    }
}

fn draw_shape(kind: ShapeKind, image_size: usize, rng: &mut ChaCha8Rng) -> Shape {
    let s = image_size as f64;
    let d = rng.gen_range(0.2 * s..0.4 * s);
    let r = d / 2.0;
    Shape {
        kind,
        cx: rng.gen_range(r..s - r),
        cy: rng.gen_range(r..s - r),
        d,
        rotation: rng.gen_range(0.0..std::f64::consts::TAU),
        intensity: rng.gen_range(120.0..200.0),
    }
}

/// Draw shape geometry until the overlap rejection rule passes.
fn draw_accepted_shapes(
    kinds: &[ShapeKind],
    image_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Shape>, DataError> {
    for _ in 0..MAX_ATTEMPTS {
        let shapes: Vec<Shape> = kinds.iter().map(|&k| draw_shape(k, image_size, rng)).collect();
        let probe = Scene {
            image_size,
            shapes,
            noise_seed: 0,
            noise_strength: 0.0,
            smoothing_sigma: 0.0,
        };
        if coverage_ratio(&probe)? >= COVERAGE_MIN {
            return Ok(probe.shapes);
        }
    }
    Err(DataError::Rejection(format!(
        "no accepted placement for {kinds:?} in {MAX_ATTEMPTS} attempts (size {image_size})"
    )))
}

fn finish_scene(image_size: usize, shapes: Vec<Shape>, rng: &mut ChaCha8Rng) -> Scene {
    Scene {
        image_size,
        shapes,
        noise_strength: rng.gen_range(0.0..20.0),
        smoothing_sigma: rng.gen_range(1.0..2.0),
        noise_seed: rng.gen(),
    }
}

/// The label a scene implies, independent of any classifier.
pub fn derive_label(kind: DatasetKind, scene: &Scene) -> Result<usize, DataError> {
    match kind {
        DatasetKind::DiscA => {
            if scene.shapes.iter().any(|s| s.kind != ShapeKind::Triangle) {
                return Err(DataError::Format("disc-a scenes contain only triangles".into()));
            }
            Ok(scene.shapes.len() % 2) // even → 0, odd → 1
        }
        DatasetKind::DiscB => {
            if scene.shapes.len() != 2 || scene.shapes[0].kind == scene.shapes[1].kind {
                return Err(DataError::Format(
                    "disc-b scenes contain exactly one shape of each of two kinds".into(),
                ));
            }
            let present: Vec<usize> = scene.shapes.iter().map(|s| s.kind.index()).collect();
            Ok(ShapeKind::ALL
                .iter()
                .map(|k| k.index())
                .find(|i| !present.contains(i))
                .expect("two distinct kinds leave one missing"))
        }
    }
}

fn gen_one(kind: DatasetKind, sample_seed: u64, image_size: usize) -> Result<ImageSample, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let kinds: Vec<ShapeKind> = match kind {
        DatasetKind::DiscA => {
            let class = rng.gen_range(0..2usize);
            let count = if class == 0 {
                [2, 4, 6][rng.gen_range(0..3)]
            } else {
                [1, 3, 5][rng.gen_range(0..3)]
            };
            vec![ShapeKind::Triangle; count]
        }
        DatasetKind::DiscB => {
            let missing = ShapeKind::ALL[rng.gen_range(0..3)];
            ShapeKind::ALL.iter().copied().filter(|&k| k != missing).collect()
        }
    };
    let shapes = draw_accepted_shapes(&kinds, image_size, &mut rng)?;
    let scene = finish_scene(image_size, shapes, &mut rng);
    let label = derive_label(kind, &scene)?;
    Ok(ImageSample {
        image: render_scene(&scene)?,
        label,
        seed: sample_seed,
        scene: Some(scene),
        source: None,
    })
}

/// Deterministic dataset generation; each sample derives its own RNG from
/// (seed, index), so index ranges can be generated independently.
pub fn gen_dataset(
    kind: DatasetKind,
    base_seed: u64,
    count: usize,
    image_size: usize,
) -> Result<Vec<ImageSample>, DataError> {
    (0..count)
        .map(|i| gen_one(kind, seed::derive(base_seed, i as u64), image_size))
        .collect()
}

pub fn gen_disc_a(base_seed: u64, count: usize, image_size: usize) -> Result<Vec<ImageSample>, DataError> {
    gen_dataset(DatasetKind::DiscA, base_seed, count, image_size)
}

pub fn gen_disc_b(base_seed: u64, count: usize, image_size: usize) -> Result<Vec<ImageSample>, DataError> {
    gen_dataset(DatasetKind::DiscB, base_seed, count, image_size)
}

/// Parity-flip counterfactual: remove one uniformly chosen triangle, or add
/// a fresh one when only a single triangle is present. Noise field and
/// smoothing carry over unchanged.
pub fn make_counterfactual_disc_a(
    sample: &ImageSample,
    rng: &mut ChaCha8Rng,
) -> Result<ImageSample, DataError> {
    let scene = sample
        .scene
        .as_ref()
        .ok_or_else(|| DataError::Format("counterfactual needs the source scene".into()))?;
    let mut edited = scene.clone();
    if edited.shapes.len() > 1 {
        let victim = rng.gen_range(0..edited.shapes.len());
        edited.shapes.remove(victim);
    } else {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let candidate = draw_shape(ShapeKind::Triangle, edited.image_size, rng);
            let mut probe = edited.clone();
            probe.shapes.push(candidate);
            probe.noise_strength = 0.0;
            probe.smoothing_sigma = 0.0;
            if coverage_ratio(&probe)? >= COVERAGE_MIN {
                edited.shapes.push(probe.shapes.pop().unwrap());
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::Rejection(format!(
                "no valid triangle placement in {MAX_ATTEMPTS} attempts"
            )));
        }
    }
    let label = derive_label(DatasetKind::DiscA, &edited)?;
    debug_assert_ne!(label, sample.label);
    Ok(ImageSample {
        image: render_scene(&edited)?,
        label,
        seed: sample.seed,
        scene: Some(edited),
        source: None,
    })
}

/// Substitution counterfactual: the kind that must disappear for
/// `target_class` is replaced in place by the currently missing kind,
/// preserving center, size, intensity, and rotation.
pub fn make_counterfactual_disc_b(
    sample: &ImageSample,
    target_class: usize,
) -> Result<ImageSample, DataError> {
    let scene = sample
        .scene
        .as_ref()
        .ok_or_else(|| DataError::Format("counterfactual needs the source scene".into()))?;
    let current = derive_label(DatasetKind::DiscB, scene)?;
    let target_kind = ShapeKind::from_index(target_class)
        .ok_or_else(|| DataError::Format(format!("invalid target class {target_class}")))?;
    if target_class == current {
        return Err(DataError::Format(format!(
            "target class {target_class} equals the sample's class"
        )));
    }
    let missing_kind = ShapeKind::from_index(current).expect("class ids mirror shape ids");
    let mut edited = scene.clone();
    let pos = edited
        .shapes
        .iter()
        .position(|s| s.kind == target_kind)
        .expect("the kind to remove is present in a valid disc-b scene");
    edited.shapes[pos].kind = missing_kind;
    let label = derive_label(DatasetKind::DiscB, &edited)?;
    debug_assert_eq!(label, target_class);
    Ok(ImageSample {
        image: render_scene(&edited)?,
        label,
        seed: sample.seed,
        scene: Some(edited),
        source: None,
    })
}
