//! Mask-based evaluation of attribution maps on real/counterfactual pairs:
//! threshold sweep → morphological closing → Gaussian soft mask → hybrid
//! image → change in the classifier's output, summarized as an AUC over
//! mask fraction and a minimal-mask point.

use std::collections::BTreeMap;

use crate::attrib::{AttributionMap, MethodId};
use crate::data::PairRecord;
use crate::grad::Tensor;
use crate::imgproc;
use crate::model::{infer, Checkpoint, ModelError};

/// Square structuring-element side for the closing step.
pub const CLOSE_WINDOW: usize = 10;
/// Standard deviation (pixels) of the soft-mask blur.
pub const BLUR_SIGMA: f64 = 11.0;
/// Default sweep resolution.
pub const N_THRESHOLDS: usize = 100;
/// Hybrid images evaluated per forward pass.
const EVAL_CHUNK: usize = 32;

#[derive(Debug)]
pub enum EvalError {
    NotAccepted(String),
    BadInput(String),
    EmptyCurve,
    Model(ModelError),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::NotAccepted(id) => write!(f, "pair '{id}' was not accepted by the filter"),
            EvalError::BadInput(m) => write!(f, "bad input: {m}"),
            EvalError::EmptyCurve => write!(f, "empty curve"),
            EvalError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

/// Boolean pixel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> BinaryMask {
        assert_eq!(bits.len(), h * w);
        BinaryMask { h, w, bits }
    }

    pub fn fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / (self.h * self.w) as f64
    }

    /// input ⊆ other, pixelwise.
    pub fn subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Real-valued mask in [0,1] after closing + blur.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// One point of the Δf-over-mask-size curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    /// Attribution threshold that produced the mask (+∞ for the empty mask;
    /// after merging equal fractions, the largest contributing threshold).
    pub threshold: f64,
    /// True-pixel fraction of the closed binary mask.
    pub fraction: f64,
    /// f(x_hybrid)_i − f(x_c)_i.
    pub delta_f: f64,
}

/// Full evaluation of one (pair, method) combination.
#[derive(Clone, Debug)]
pub struct DacResult {
    pub pair_id: String,
    pub method: MethodId,
    pub class_i: usize,
    pub class_j: usize,
    /// Sorted by fraction, anchored at fraction 0 and 1.
    pub points: Vec<CurvePoint>,
    /// Trapezoidal area under Δf over fraction ∈ [0,1].
    pub auc: f64,
    pub min_threshold: f64,
    pub min_fraction: f64,
    /// Objective value fraction − Δf at the minimal-mask point.
    pub min_score: f64,
}

/// Pixel true iff map ≥ t. The map must be nonnegative.
pub fn threshold_mask(map: &Tensor, t: f64) -> BinaryMask {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    debug_assert!(map.data().iter().all(|&v| v >= 0.0), "map must be nonnegative");
    BinaryMask::new(h, w, map.data().iter().map(|&v| v >= t).collect())
}

/// Row-then-column max filter. `lo..hi` are inclusive probe offsets;
/// out-of-image probes read as `false`.
fn max_filter(bits: &[bool], h: usize, w: usize, lo: isize, hi: isize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for r in 0..h {
        let src = &bits[r * w..(r + 1) * w];
        let dst = &mut rows[r * w..(r + 1) * w];
        for c in 0..w as isize {
            let mut any = false;
            let from = (c + lo).max(0);
            let to = (c + hi).min(w as isize - 1);
            for p in from..=to {
                any |= src[p as usize];
            }
            dst[c as usize] = any;
        }
    }
    let mut out = vec![false; h * w];
    for c in 0..w {
        for r in 0..h as isize {
            let mut any = false;
            let from = (r + lo).max(0);
            let to = (r + hi).min(h as isize - 1);
            for p in from..=to {
                any |= rows[p as usize * w + c];
            }
            out[r as usize * w + c] = any;
        }
    }
    out
}

/// Row-then-column min filter; out-of-image probes read as `true`.
fn min_filter(bits: &[bool], h: usize, w: usize, lo: isize, hi: isize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for r in 0..h {
        let src = &bits[r * w..(r + 1) * w];
        let dst = &mut rows[r * w..(r + 1) * w];
        for c in 0..w as isize {
            let mut all = true;
            let from = (c + lo).max(0);
            let to = (c + hi).min(w as isize - 1);
            for p in from..=to {
                all &= src[p as usize];
            }
            dst[c as usize] = all;
        }
    }
    let mut out = vec![false; h * w];
    for c in 0..w {
        for r in 0..h as isize {
            let mut all = true;
            let from = (r + lo).max(0);
            let to = (r + hi).min(h as isize - 1);
            for p in from..=to {
                all &= rows[p as usize * w + c];
            }
            out[r as usize * w + c] = all;
        }
    }
    out
}

/// Dilation then erosion with a window×window square structuring element
/// whose origin sits at index (window/2, window/2). Out-of-image pixels act
/// as false during dilation and true during erosion, so the closing never
/// artificially erodes at the borders.
pub fn morph_close(mask: &BinaryMask, window: usize) -> BinaryMask {
    assert!(window >= 1);
    let origin = (window / 2) as isize;
    // the element spans offsets −origin ..= window−1−origin around a pixel;
    // dilation places the element (probe offsets are negated), erosion
    // probes it directly
    let lo = origin - (window as isize - 1);
    let hi = origin;
    let dilated = max_filter(&mask.bits, mask.h, mask.w, lo, hi);
    let eroded = min_filter(&dilated, mask.h, mask.w, -origin, window as isize - 1 - origin);
    BinaryMask::new(mask.h, mask.w, eroded)
}

/// Blur the binary mask into a soft mask: normalized Gaussian, radius
/// ceil(2σ), mirror padding, clamped to [0,1].
pub fn soft_mask(mask: &BinaryMask, sigma: f64) -> SoftMask {
    assert!(sigma > 0.0);
    let img: Vec<f64> = mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let radius = imgproc::gaussian_radius(sigma);
    let mut data = imgproc::gaussian_blur(&img, mask.h, mask.w, sigma, radius);
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    SoftMask { h: mask.h, w: mask.w, data }
}

/// x_h = m ⊙ x_o + (1−m) ⊙ x_c, elementwise over every channel.
pub fn compose_hybrid(x_o: &Tensor, x_c: &Tensor, m: &SoftMask) -> Result<Tensor, EvalError> {
    if x_o.shape() != x_c.shape() {
        return Err(EvalError::BadInput(format!(
            "image shapes differ: {:?} vs {:?}",
            x_o.shape(),
            x_c.shape()
        )));
    }
    let hw = m.h * m.w;
    if x_o.numel() % hw != 0 || *x_o.shape().last().unwrap() != m.w {
        return Err(EvalError::BadInput(format!(
            "mask {}×{} does not tile image {:?}",
            m.h,
            m.w,
            x_o.shape()
        )));
    }
    let data: Vec<f64> = x_o
        .data()
        .iter()
        .zip(x_c.data())
        .enumerate()
        .map(|(i, (&o, &c))| {
            let mv = m.data[i % hw];
            mv * o + (1.0 - mv) * c
        })
        .collect();
    Ok(Tensor::new(x_o.shape().to_vec(), data))
}

/// One threshold's precomputed stage outputs, before the batched forward.
struct SweepRow {
    threshold: f64,
    weight: usize,
    closed_fraction: f64,
    hybrid: Tensor,
}

/// Sweep thresholds over the attribution map and measure
/// Δf = f(x_h)_i − f(x_c)_i per resulting mask.
///
/// Thresholds sit at `n_thresholds` evenly spaced quantiles of the map's
/// values, plus +∞ (empty mask) and 0 (full mask). Equal thresholds — and
/// distinct thresholds that select the identical pixel set — share one
/// pipeline run; points with equal closed-mask fraction are merged with a
/// threshold-multiplicity-weighted mean of Δf. The empty mask reproduces
/// x_c exactly and the full mask reproduces x_o exactly, so the returned
/// curve is anchored at (0, 0) and (1, f(x_o)_i − f(x_c)_i).
pub fn dac_curve(
    ckpt: &Checkpoint,
    x_o: &Tensor,
    x_c: &Tensor,
    class_i: usize,
    map: &Tensor,
    n_thresholds: usize,
) -> Result<Vec<CurvePoint>, EvalError> {
    assert!(n_thresholds >= 2, "need at least two quantile thresholds");
    let size = ckpt.spec.input_size;
    if map.shape() != [size, size] {
        return Err(EvalError::BadInput(format!(
            "map shape {:?} does not match the model input {size}×{size}",
            map.shape()
        )));
    }
    if map.data().iter().any(|&v| v < 0.0) {
        return Err(EvalError::BadInput("attribution map must be nonnegative".into()));
    }
    if class_i >= ckpt.spec.num_classes {
        return Err(EvalError::BadInput(format!("class {class_i} out of range")));
    }

    let mut sorted: Vec<f64> = map.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_px = sorted.len();

    let mut thresholds = Vec::with_capacity(n_thresholds + 2);
    thresholds.push(f64::INFINITY);
    for k in 0..n_thresholds {
        let q = k as f64 / (n_thresholds - 1) as f64;
        let idx = (q * (n_px - 1) as f64).round() as usize;
        // descending quantiles so the sweep runs small mask → large mask
        thresholds.push(sorted[n_px - 1 - idx]);
    }
    thresholds.push(0.0);

    // masks are nested in the threshold, so the selected pixel count
    // identifies the pixel set; collapse duplicates and keep multiplicity
    let mut by_count: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &t in &thresholds {
        let count = n_px - sorted.partition_point(|&v| v < t);
        let entry = by_count.entry(count).or_insert((t, 0));
        entry.0 = entry.0.max(t);
        entry.1 += 1;
    }

    let mut rows = Vec::with_capacity(by_count.len());
    for (_, (threshold, weight)) in by_count {
        let mask = threshold_mask(map, threshold);
        let closed = morph_close(&mask, CLOSE_WINDOW);
        let soft = soft_mask(&closed, BLUR_SIGMA);
        let hybrid = compose_hybrid(x_o, x_c, &soft)?;
        rows.push(SweepRow { threshold, weight, closed_fraction: closed.fraction(), hybrid });
    }

    // batched forward over all hybrids; the first row is always the empty
    // mask (threshold +∞), whose hybrid is bit-identical to x_c, giving the
    // in-batch reference probability
    let px = rows[0].hybrid.numel();
    let mut probs = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut batch = Tensor::zeros(&[chunk.len(), ckpt.spec.in_channels, size, size]);
        for (b, row) in chunk.iter().enumerate() {
            batch.data_mut()[b * px..(b + 1) * px].copy_from_slice(row.hybrid.data());
        }
        let (p, _) = infer(ckpt, &batch)?;
        let k = ckpt.spec.num_classes;
        for b in 0..chunk.len() {
            probs.push(p.data()[b * k + class_i]);
        }
    }
    let p_ref = probs[0];
    debug_assert_eq!(rows[0].closed_fraction, 0.0);

    // merge equal closed fractions (exact rationals k/(h·w)) with a
    // weighted mean of Δf; keep the largest contributing threshold — rows
    // arrive count-sorted, so equal fractions are adjacent
    let mut points: Vec<CurvePoint> = Vec::new();
    let mut weights: Vec<usize> = Vec::new();
    for (row, &p) in rows.iter().zip(&probs) {
        let df = p - p_ref;
        if let Some(last) = points.last_mut() {
            if last.fraction == row.closed_fraction {
                let w = *weights.last().unwrap();
                last.delta_f = (last.delta_f * w as f64 + df * row.weight as f64)
                    / (w + row.weight) as f64;
                last.threshold = last.threshold.max(row.threshold);
                *weights.last_mut().unwrap() += row.weight;
                continue;
            }
        }
        points.push(CurvePoint { threshold: row.threshold, fraction: row.closed_fraction, delta_f: df });
        weights.push(row.weight);
    }

    debug_assert!(points.windows(2).all(|w| w[0].fraction < w[1].fraction));
    debug_assert_eq!(points.first().map(|p| (p.fraction, p.delta_f)), Some((0.0, 0.0)));
    debug_assert_eq!(points.last().map(|p| p.fraction), Some(1.0));
    Ok(points)
}

/// Trapezoidal area under Δf over fraction ∈ [0,1]. The curve must be
/// sorted by fraction and anchored at 0 and 1.
pub fn dac_score(points: &[CurvePoint]) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    if points.first().unwrap().fraction != 0.0 || points.last().unwrap().fraction != 1.0 {
        return Err(EvalError::BadInput("curve must be anchored at fractions 0 and 1".into()));
    }
    if points.windows(2).any(|w| w[0].fraction > w[1].fraction) {
        return Err(EvalError::BadInput("curve must be sorted by fraction".into()));
    }
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fraction - w[0].fraction) * (w[0].delta_f + w[1].delta_f) * 0.5;
    }
    Ok(auc)
}

/// The curve point minimizing fraction − Δf; ties go to the smaller
/// fraction. Returns (threshold, fraction, objective value).
pub fn min_mask(points: &[CurvePoint]) -> Result<(f64, f64, f64), EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    let mut best = &points[0];
    let mut best_obj = best.fraction - best.delta_f;
    for p in &points[1..] {
        let obj = p.fraction - p.delta_f;
        if obj < best_obj || (obj == best_obj && p.fraction < best.fraction) {
            best = p;
            best_obj = obj;
        }
    }
    Ok((best.threshold, best.fraction, best_obj))
}

/// Evaluate one accepted pair under one attribution map.
pub fn evaluate_pair(
    ckpt: &Checkpoint,
    rec: &PairRecord,
    x_o: &Tensor,
    x_c: &Tensor,
    map: &AttributionMap,
    n_thresholds: usize,
) -> Result<DacResult, EvalError> {
    if !rec.accepted {
        return Err(EvalError::NotAccepted(rec.pair_id.clone()));
    }
    let magnitude = map.magnitude();
    let points = dac_curve(ckpt, x_o, x_c, rec.class_i, &magnitude, n_thresholds)?;
    let auc = dac_score(&points)?;
    let (min_threshold, min_fraction, min_score) = min_mask(&points)?;
    Ok(DacResult {
        pair_id: rec.pair_id.clone(),
        method: map.method,
        class_i: rec.class_i,
        class_j: rec.class_j,
        points,
        auc,
        min_threshold,
        min_fraction,
        min_score,
    })
}

/// Mean DAC score per method: pairs are first averaged within each ordered
/// class pair (i, j), then the class-pair means are averaged, so no class
/// pair dominates by count.
pub fn aggregate(results: &[DacResult]) -> Result<BTreeMap<MethodId, f64>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::BadInput("no results to aggregate".into()));
    }
    let mut groups: BTreeMap<(MethodId, usize, usize), (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = groups.entry((r.method, r.class_i, r.class_j)).or_insert((0.0, 0));
        e.0 += r.auc;
        e.1 += 1;
    }
    let mut per_method: BTreeMap<MethodId, (f64, usize)> = BTreeMap::new();
    for ((method, _, _), (sum, n)) in groups {
        let e = per_method.entry(method).or_insert((0.0, 0));
        e.0 += sum / n as f64;
        e.1 += 1;
    }
    Ok(per_method.into_iter().map(|(m, (sum, n))| (m, sum / n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::ReluMode;
    use crate::model::{build_vgg, forward, init_model, update_running_stats, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
        BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(density)).collect())
    }

    // ---- thresholding ----

    #[test]
    fn threshold_extremes_and_monotonicity() {
        let map = random_map(16, 16, 1);
        assert!(threshold_mask(&map, 0.0).bits.iter().all(|&b| b));
        let max = map.data().iter().cloned().fold(0.0, f64::max);
        assert!(threshold_mask(&map, max + 1e-9).bits.iter().all(|&b| !b));
        assert!(threshold_mask(&map, f64::INFINITY).bits.iter().all(|&b| !b));

        let mut prev = 2.0;
        for k in 0..=10 {
            let f = threshold_mask(&map, k as f64 / 10.0).fraction();
            assert!(f <= prev, "fraction grew as threshold rose");
            prev = f;
        }
    }

    // ---- closing ----

    /// Straight set-definition morphology: dilation places the element at
    /// every true pixel; erosion keeps p iff every in-image probe is true.
    fn close_oracle(mask: &BinaryMask, window: usize) -> BinaryMask {
        let (h, w) = (mask.h as isize, mask.w as isize);
        let origin = (window / 2) as isize;
        let offs: Vec<(isize, isize)> = (0..window as isize)
            .flat_map(|r| (0..window as isize).map(move |c| (r - origin, c - origin)))
            .collect();
        let mut dil = vec![false; mask.bits.len()];
        for r in 0..h {
            for c in 0..w {
                if mask.bits[(r * w + c) as usize] {
                    for &(dr, dc) in &offs {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && rr < h && cc >= 0 && cc < w {
                            dil[(rr * w + cc) as usize] = true;
                        }
                    }
                }
            }
        }
        let mut ero = vec![false; mask.bits.len()];
        for r in 0..h {
            for c in 0..w {
                let mut keep = true;
                for &(dr, dc) in &offs {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && rr < h && cc >= 0 && cc < w && !dil[(rr * w + cc) as usize] {
                        keep = false;
                        break;
                    }
                }
                ero[(r * w + c) as usize] = keep;
            }
        }
        BinaryMask::new(mask.h, mask.w, ero)
    }

    #[test]
    fn closing_matches_oracle_and_is_extensive_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..1000 {
            let (h, w) = if trial % 2 == 0 { (20, 20) } else { (28, 17) };
            let density = [0.02, 0.1, 0.3, 0.5, 0.8][trial % 5];
            let m = random_mask(h, w, density, &mut rng);
            let closed = morph_close(&m, CLOSE_WINDOW);
            assert_eq!(closed, close_oracle(&m, CLOSE_WINDOW), "trial {trial}");
            assert!(m.subset_of(&closed), "not extensive at trial {trial}");
            assert_eq!(morph_close(&closed, CLOSE_WINDOW), closed, "not idempotent at trial {trial}");
        }
    }

    #[test]
    fn closing_preserves_full_and_empty() {
        let full = BinaryMask::new(32, 32, vec![true; 1024]);
        let empty = BinaryMask::new(32, 32, vec![false; 1024]);
        assert_eq!(morph_close(&full, CLOSE_WINDOW), full);
        assert_eq!(morph_close(&empty, CLOSE_WINDOW), empty);
    }

    #[test]
    fn closing_bridges_a_four_pixel_gap() {
        // two 3×3 blocks, 4 empty columns between them
        let (h, w) = (16, 24);
        let mut bits = vec![false; h * w];
        for r in 5..8 {
            for c in 3..6 {
                bits[r * w + c] = true;
            }
            for c in 10..13 {
                bits[r * w + c] = true;
            }
        }
        let closed = morph_close(&BinaryMask::new(h, w, bits), CLOSE_WINDOW);

        // flood fill from one block must reach the other
        let mut seen = vec![false; h * w];
        let mut stack = vec![5 * w + 3];
        seen[5 * w + 3] = true;
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut push = |rr: isize, cc: isize| {
                if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                    let q = rr as usize * w + cc as usize;
                    if closed.bits[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            };
            push(r as isize - 1, c as isize);
            push(r as isize + 1, c as isize);
            push(r as isize, c as isize - 1);
            push(r as isize, c as isize + 1);
        }
        assert!(seen[5 * w + 12], "blocks remain disconnected after closing");
    }

    // ---- soft mask ----

    #[test]
    fn blur_keeps_constant_masks_exact() {
        let ones = soft_mask(&BinaryMask::new(24, 24, vec![true; 576]), BLUR_SIGMA);
        assert!(ones.data.iter().all(|&v| v == 1.0));
        let zeros = soft_mask(&BinaryMask::new(24, 24, vec![false; 576]), BLUR_SIGMA);
        assert!(zeros.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_impulse_reproduces_kernel_taps() {
        // small sigma so the kernel fits well inside the image
        let sigma = 1.5;
        let radius = imgproc::gaussian_radius(sigma);
        let n = 16;
        let mut bits = vec![false; n * n];
        bits[8 * n + 8] = true;
        let img: Vec<f64> = bits.iter().map(|&b| f64::from(b as u8)).collect();
        let blurred = imgproc::gaussian_blur(&img, n, n, sigma, radius);
        let k = imgproc::gaussian_kernel(sigma, radius);
        for dr in -(radius as isize)..=(radius as isize) {
            for dc in -(radius as isize)..=(radius as isize) {
                let expect = k[(dr + radius as isize) as usize] * k[(dc + radius as isize) as usize];
                let got = blurred[((8 + dr) as usize) * n + (8 + dc) as usize];
                assert!((got - expect).abs() < 1e-12, "offset ({dr},{dc}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn soft_mask_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mask(32, 32, 0.4, &mut rng);
        let s = soft_mask(&morph_close(&m, CLOSE_WINDOW), BLUR_SIGMA);
        assert!(s.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    // ---- hybrid ----

    #[test]
    fn hybrid_extremes_and_mean() {
        let xo = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let xc = Tensor::new(vec![1, 2, 2], vec![0.9, 0.8, 0.7, 0.6]);
        let ones = SoftMask { h: 2, w: 2, data: vec![1.0; 4] };
        let zeros = SoftMask { h: 2, w: 2, data: vec![0.0; 4] };
        let half = SoftMask { h: 2, w: 2, data: vec![0.5; 4] };
        assert_eq!(compose_hybrid(&xo, &xc, &ones).unwrap().data(), xo.data());
        assert_eq!(compose_hybrid(&xo, &xc, &zeros).unwrap().data(), xc.data());
        for (v, (&a, &b)) in compose_hybrid(&xo, &xc, &half)
            .unwrap()
            .data()
            .iter()
            .zip(xo.data().iter().zip(xc.data()))
        {
            assert!((v - 0.5 * (a + b)).abs() < 1e-15);
        }
        let bad = Tensor::zeros(&[1, 3, 3]);
        assert!(compose_hybrid(&xo, &bad, &ones).is_err());
    }

    // ---- curve / score / min-mask ----

    fn pt(fraction: f64, delta_f: f64) -> CurvePoint {
        CurvePoint { threshold: 0.5, fraction, delta_f }
    }

    #[test]
    fn score_of_simple_curves() {
        let c = [pt(0.0, 0.25), pt(1.0, 0.25)];
        assert!((dac_score(&c).unwrap() - 0.25).abs() < 1e-15);
        let c = [pt(0.0, 0.0), pt(0.5, 1.0), pt(1.0, 1.0)];
        assert!((dac_score(&c).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn score_rejects_bad_curves() {
        assert!(dac_score(&[]).is_err());
        assert!(dac_score(&[pt(0.1, 0.0), pt(1.0, 0.0)]).is_err());
        assert!(dac_score(&[pt(0.0, 0.0), pt(0.9, 0.0)]).is_err());
        assert!(dac_score(&[pt(0.0, 0.0), pt(0.7, 0.1), pt(0.3, 0.1), pt(1.0, 0.0)]).is_err());
    }

    #[test]
    fn min_mask_picks_jump_and_breaks_ties_small() {
        let c = [pt(0.0, 0.0), pt(0.1, 0.9), pt(0.5, 0.9), pt(1.0, 0.9)];
        let (_, f, s) = min_mask(&c).unwrap();
        assert_eq!(f, 0.1);
        assert!((s - (0.1 - 0.9)).abs() < 1e-15);

        let flat = [pt(0.0, 0.0), pt(0.4, 0.4), pt(1.0, 1.0)];
        // fraction − Δf = 0 everywhere → tie, smallest fraction wins
        let (_, f, s) = min_mask(&flat).unwrap();
        assert_eq!(f, 0.0);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn min_mask_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut points: Vec<CurvePoint> = (0..20)
                .map(|_| pt(rng.gen_range(0.0..1.0), rng.gen_range(-0.2..1.0)))
                .collect();
            points.sort_by(|a, b| a.fraction.partial_cmp(&b.fraction).unwrap());
            let got = min_mask(&points).unwrap();
            let mut best = (f64::INFINITY, f64::INFINITY);
            for p in &points {
                let obj = p.fraction - p.delta_f;
                if obj < best.0 || (obj == best.0 && p.fraction < best.1) {
                    best = (obj, p.fraction);
                }
            }
            assert_eq!((got.2, got.1), best);
        }
    }

    // ---- full pipeline on a small warm model ----

    fn warm_vgg(size: usize, k: usize, seed: u64) -> Checkpoint {
        let spec = build_vgg(size, k, 16);
        let mut ckpt = init_model(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let batch = Tensor::new(
            vec![2, 1, size, size],
            (0..2 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let fp = forward(&ckpt, &batch, Mode::Train, ReluMode::Standard, Some(&mut drop_rng)).unwrap();
        update_running_stats(&mut ckpt, &fp.bn_batches);
        ckpt
    }

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, size, size], (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn curve_is_anchored_sorted_and_bounded() {
        let ckpt = warm_vgg(28, 3, 21);
        let xo = image(28, 100);
        let xc = image(28, 101);
        let map = random_map(28, 28, 102);
        let points = dac_curve(&ckpt, &xo, &xc, 1, &map, 40).unwrap();

        assert_eq!(points[0].fraction, 0.0);
        assert_eq!(points[0].delta_f, 0.0);
        assert_eq!(points.last().unwrap().fraction, 1.0);
        assert!(points.windows(2).all(|w| w[0].fraction < w[1].fraction));
        assert!(points.iter().all(|p| (-1.0..=1.0).contains(&p.delta_f)));

        // the full-mask point equals f(x_o)_i − f(x_c)_i measured separately
        let (po, _) = infer(&ckpt, &xo.reshaped(vec![1, 1, 28, 28])).unwrap();
        let (pc, _) = infer(&ckpt, &xc.reshaped(vec![1, 1, 28, 28])).unwrap();
        let expect = po.data()[1] - pc.data()[1];
        assert!((points.last().unwrap().delta_f - expect).abs() < 1e-9);
    }

    #[test]
    fn identical_pair_gives_flat_curve_and_zero_auc() {
        let ckpt = warm_vgg(28, 3, 23);
        let x = image(28, 110);
        let map = random_map(28, 28, 111);
        let points = dac_curve(&ckpt, &x, &x, 0, &map, 30).unwrap();
        for p in &points {
            assert!(p.delta_f.abs() < 1e-9, "Δf = {} at fraction {}", p.delta_f, p.fraction);
        }
        let auc = dac_score(&points).unwrap();
        assert!(auc.abs() < 1e-9);
    }

    #[test]
    fn evaluate_pair_is_deterministic_and_respects_acceptance() {
        let ckpt = warm_vgg(28, 3, 25);
        let xo = image(28, 120);
        let xc = image(28, 121);
        let map = AttributionMap {
            method: MethodId::Residual,
            target_class: None,
            data: xc.sub(&xo).abs().reshaped(vec![28, 28]),
            signed: false,
        };
        let mut rec = PairRecord::new("p0", 0, 1, "a.png", "b.png");
        rec.accepted = true;
        let a = evaluate_pair(&ckpt, &rec, &xo, &xc, &map, 25).unwrap();
        let b = evaluate_pair(&ckpt, &rec, &xo, &xc, &map, 25).unwrap();
        assert_eq!(a.auc.to_bits(), b.auc.to_bits());
        assert_eq!(a.points.len(), b.points.len());
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.delta_f.to_bits(), y.delta_f.to_bits());
            assert_eq!(x.fraction.to_bits(), y.fraction.to_bits());
        }

        rec.accepted = false;
        assert!(matches!(
            evaluate_pair(&ckpt, &rec, &xo, &xc, &map, 25),
            Err(EvalError::NotAccepted(_))
        ));
    }

    #[test]
    fn coarse_and_fine_sweeps_agree_on_auc() {
        let ckpt = warm_vgg(28, 3, 27);
        let xo = image(28, 130);
        let xc = image(28, 131);
        let map = random_map(28, 28, 132);
        let coarse = dac_score(&dac_curve(&ckpt, &xo, &xc, 1, &map, 100).unwrap()).unwrap();
        let fine = dac_score(&dac_curve(&ckpt, &xo, &xc, 1, &map, 1000).unwrap()).unwrap();
        assert!((coarse - fine).abs() < 0.02, "coarse {coarse} vs fine {fine}");
    }

    // ---- aggregation ----

    fn result(method: MethodId, ci: usize, cj: usize, auc: f64) -> DacResult {
        DacResult {
            pair_id: "x".into(),
            method,
            class_i: ci,
            class_j: cj,
            points: vec![],
            auc,
            min_threshold: 0.0,
            min_fraction: 0.0,
            min_score: 0.0,
        }
    }

    #[test]
    fn aggregate_is_two_stage_and_order_free() {
        let single = [result(MethodId::Ig, 0, 1, 0.42)];
        assert!((aggregate(&single).unwrap()[&MethodId::Ig] - 0.42).abs() < 1e-15);

        // class pair (0,1) has three pairs at 0.2; (1,2) has one at 0.8
        let mut rows = vec![
            result(MethodId::Ig, 0, 1, 0.2),
            result(MethodId::Ig, 0, 1, 0.2),
            result(MethodId::Ig, 0, 1, 0.2),
            result(MethodId::Ig, 1, 2, 0.8),
        ];
        assert!((aggregate(&rows).unwrap()[&MethodId::Ig] - 0.5).abs() < 1e-15);
        rows.reverse();
        assert!((aggregate(&rows).unwrap()[&MethodId::Ig] - 0.5).abs() < 1e-15);

        assert!(aggregate(&[]).is_err());
    }
}
