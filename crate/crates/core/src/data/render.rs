//! Scene rasterization: shapes drawn in list order at their intensity,
//! seeded Gaussian pixel noise, Gaussian smoothing, then rescale to [0,1].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grad::Tensor;
use crate::imgproc;

use super::{DataError, Scene, Shape, ShapeKind};

/// A pixel belongs to a shape when its center lies inside.
fn inside(shape: &Shape, px: f64, py: f64) -> bool {
    let dx = px - shape.cx;
    let dy = py - shape.cy;
    match shape.kind {
        ShapeKind::Disk => {
            let r = shape.d / 2.0;
            dx * dx + dy * dy <= r * r
        }
        ShapeKind::Square => {
            // side d/√2 (diagonal = circumscribed-circle diameter d)
            let half = shape.d / (2.0 * std::f64::consts::SQRT_2);
            let (s, c) = shape.rotation.sin_cos();
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            u.abs() <= half && v.abs() <= half
        }
        ShapeKind::Triangle => {
            // equilateral, circumradius d/2, one vertex at angle `rotation`
            let r = shape.d / 2.0;
            let mut vx = [0.0; 3];
            let mut vy = [0.0; 3];
            for k in 0..3 {
                let a = shape.rotation + k as f64 * std::f64::consts::TAU / 3.0;
                vx[k] = shape.cx + r * a.cos();
                vy[k] = shape.cy + r * a.sin();
            }
            let mut pos = false;
            let mut neg = false;
            for k in 0..3 {
                let j = (k + 1) % 3;
                let cross = (vx[j] - vx[k]) * (py - vy[k]) - (vy[j] - vy[k]) * (px - vx[k]);
                pos |= cross > 0.0;
                neg |= cross < 0.0;
            }
            !(pos && neg)
        }
    }
}

/// Analytic area implied by the circumscribed-circle diameter d.
pub fn shape_area(kind: ShapeKind, d: f64) -> f64 {
    match kind {
        ShapeKind::Disk => std::f64::consts::PI * (d / 2.0) * (d / 2.0),
        ShapeKind::Square => d * d / 2.0,
        ShapeKind::Triangle => 3.0 * 3.0f64.sqrt() / 16.0 * d * d,
    }
}

fn check_bounds(scene: &Scene) -> Result<(), DataError> {
    let s = scene.image_size as f64;
    for (i, shape) in scene.shapes.iter().enumerate() {
        let r = shape.d / 2.0;
        if shape.cx - r < 0.0 || shape.cx + r > s || shape.cy - r < 0.0 || shape.cy + r > s {
            return Err(DataError::OutOfBounds(format!(
                "shape {i} ({:?}) circumscribed circle leaves the {s}×{s} image",
                shape.kind
            )));
        }
    }
    Ok(())
}

/// Shape raster only (0–255 intensities, no noise/smoothing) — the basis of
/// the overlap rejection rule.
pub fn clean_raster(scene: &Scene) -> Result<Vec<f64>, DataError> {
    check_bounds(scene)?;
    let n = scene.image_size;
    let mut img = vec![0.0; n * n];
    for shape in &scene.shapes {
        // restrict the scan to the bounding box of the circumscribed circle
        let r = shape.d / 2.0;
        let x0 = (shape.cx - r).floor().max(0.0) as usize;
        let x1 = ((shape.cx + r).ceil() as usize).min(n);
        let y0 = (shape.cy - r).floor().max(0.0) as usize;
        let y1 = ((shape.cy + r).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(shape, x as f64 + 0.5, y as f64 + 0.5) {
                    img[y * n + x] = shape.intensity;
                }
            }
        }
    }
    Ok(img)
}

/// Foreground fraction relative to the summed analytic shape areas.
pub fn coverage_ratio(scene: &Scene) -> Result<f64, DataError> {
    let raster = clean_raster(scene)?;
    let fg = raster.iter().filter(|&&v| v > 0.0).count() as f64;
    let expected: f64 = scene.shapes.iter().map(|s| shape_area(s.kind, s.d)).sum();
    Ok(if expected > 0.0 { fg / expected } else { 1.0 })
}

/// Full deterministic render: raster → seeded noise → Gaussian smoothing →
/// scale to [0,1] and clamp.
pub fn render_scene(scene: &Scene) -> Result<Tensor, DataError> {
    let n = scene.image_size;
    let mut img = clean_raster(scene)?;

    if scene.noise_strength > 0.0 {
        // the noise field depends only on noise_seed, never on the shapes,
        // so scene edits leave it untouched
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for v in &mut img {
            *v += scene.noise_strength * normal.sample(&mut rng);
        }
    }

    if scene.smoothing_sigma > 0.0 {
        let radius = imgproc::gaussian_radius(scene.smoothing_sigma);
        img = imgproc::gaussian_blur(&img, n, n, scene.smoothing_sigma, radius);
    }

    for v in &mut img {
        *v = (*v / 255.0).clamp(0.0, 1.0);
    }
    Ok(Tensor::new(vec![1, n, n], img))
}
