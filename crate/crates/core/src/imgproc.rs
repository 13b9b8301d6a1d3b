//! Shared image-space primitives: Gaussian kernels, separable blur with
//! mirror padding, and bilinear upsampling.

/// Symmetric-reflection index for out-of-range taps (edge pixels repeat:
/// -1 → 0, n → n-1), folded periodically so any radius is safe.
pub fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let period = 2 * n as isize;
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - 1 - i;
    }
    i as usize
}

/// Normalized 1-D Gaussian taps over [-radius, radius]; the sum is 1 up to
/// rounding.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Default truncation radius for a Gaussian of width `sigma`.
pub fn gaussian_radius(sigma: f64) -> usize {
    (2.0 * sigma).ceil() as usize
}

// Both passes accumulate deviations from the center tap:
//   out = center + Σ w_t·(x_t − center)
// which equals the plain weighted sum up to rounding but maps constant
// inputs to themselves bit-for-bit (every deviation is exactly zero).

fn conv_1d_rows(src: &[f64], h: usize, w: usize, k: &[f64], radius: usize, dst: &mut [f64]) {
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let center = row[x];
            let mut acc = 0.0;
            for (t, &wt) in k.iter().enumerate() {
                let sx = reflect(x as isize + t as isize - radius as isize, w);
                acc += wt * (row[sx] - center);
            }
            dst[y * w + x] = center + acc;
        }
    }
}

fn conv_1d_cols(src: &[f64], h: usize, w: usize, k: &[f64], radius: usize, dst: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let center = src[y * w + x];
            let mut acc = 0.0;
            for (t, &wt) in k.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - radius as isize, h);
                acc += wt * (src[sy * w + x] - center);
            }
            dst[y * w + x] = center + acc;
        }
    }
}

/// Separable Gaussian blur with mirror padding. Exact on constant images.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64, radius: usize) -> Vec<f64> {
    assert_eq!(img.len(), h * w);
    let k = gaussian_kernel(sigma, radius);
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    conv_1d_rows(img, h, w, &k, radius, &mut tmp);
    conv_1d_cols(&tmp, h, w, &k, radius, &mut out);
    out
}

/// Bilinear upsampling with half-pixel (align-corners=false) coordinates,
/// clamping source samples at the border.
pub fn bilinear_upscale(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    assert_eq!(src.len(), sh * sw);
    let mut out = vec![0.0; dh * dw];
    let sy_scale = sh as f64 / dh as f64;
    let sx_scale = sw as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}
