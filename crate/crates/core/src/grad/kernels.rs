//! Raw numeric routines behind the tape ops.
//!
//! Convolutions and linear layers lower to row-major DGEMM
//! (`matrixmultiply`, single-threaded and bit-deterministic); everything
//! else is plain loops. Inputs are NCHW, conv weights are
//! (out_ch, in_ch, k, k), linear weights are (in_dim, out_dim).

/// Row-major C(m×n) = alpha·A(m×k)·B(k×n) + beta·C. Strides allow implicit
/// transposes without materializing them.
#[allow(clippy::too_many_arguments)]
pub fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial extent of a convolution/pool window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image (C×H×W) into a (C·k·k) × (out_h·out_w) patch matrix.
/// Out-of-bounds taps (padding) become zeros.
pub fn im2col(img: &[f64], d: &ConvDims, col: &mut [f64]) {
    let (h, w, k, s, p) = (d.in_h, d.in_w, d.kernel, d.stride, d.pad);
    debug_assert_eq!(img.len(), d.in_ch * h * w);
    debug_assert_eq!(col.len(), d.col_rows() * d.col_cols());
    let ow = d.out_w;
    for c in 0..d.in_ch {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * d.col_cols();
                let dst = &mut col[row..row + d.col_cols()];
                for oy in 0..d.out_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    // ix = ox·s + kx − p must land in [0, w)
                    for (ox, out) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the image (scatter-add inverse of im2col).
pub fn col2im(col: &[f64], d: &ConvDims, img: &mut [f64]) {
    let (h, w, k, s, p) = (d.in_h, d.in_w, d.kernel, d.stride, d.pad);
    debug_assert_eq!(img.len(), d.in_ch * h * w);
    for c in 0..d.in_ch {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * d.col_cols();
                let src = &col[row..row + d.col_cols()];
                for oy in 0..d.out_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = iy as usize * w;
                    for ox in 0..d.out_w {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[prow + ix as usize] += src[oy * d.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv forward: out[n] = W·col(x[n]) + b.
pub fn conv2d_fwd(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, out: &mut [f64]) {
    let (cr, cc) = (d.col_rows(), d.col_cols());
    let mut col = vec![0.0; cr * cc];
    let in_sz = d.in_ch * d.in_h * d.in_w;
    let out_sz = d.out_ch * cc;
    for n in 0..d.batch {
        im2col(&x[n * in_sz..(n + 1) * in_sz], d, &mut col);
        let o = &mut out[n * out_sz..(n + 1) * out_sz];
        dgemm(d.out_ch, cr, cc, 1.0, w, cr as isize, 1, &col, cc as isize, 1, 0.0, o);
        for (co, chunk) in o.chunks_mut(cc).enumerate() {
            let bias = b[co];
            for v in chunk {
                *v += bias;
            }
        }
    }
}

/// Gradients for conv: input, weight and bias. `dw`/`db` are accumulated into
/// (callers pass zeroed buffers); `dx` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    d: &ConvDims,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (cr, cc) = (d.col_rows(), d.col_cols());
    let mut col = vec![0.0; cr * cc];
    let mut dcol = vec![0.0; cr * cc];
    let in_sz = d.in_ch * d.in_h * d.in_w;
    let out_sz = d.out_ch * cc;
    dx.fill(0.0);
    for n in 0..d.batch {
        let go = &dout[n * out_sz..(n + 1) * out_sz];
        // dcol = Wᵀ·dout, then scatter back to the image
        dgemm(cr, d.out_ch, cc, 1.0, w, 1, cr as isize, go, cc as isize, 1, 0.0, &mut dcol);
        col2im(&dcol, d, &mut dx[n * in_sz..(n + 1) * in_sz]);
        // dW += dout·colᵀ
        im2col(&x[n * in_sz..(n + 1) * in_sz], d, &mut col);
        dgemm(d.out_ch, cc, cr, 1.0, go, cc as isize, 1, &col, 1, cc as isize, 1.0, dw);
        for co in 0..d.out_ch {
            db[co] += go[co * cc..(co + 1) * cc].iter().sum::<f64>();
        }
    }
}

/// Max-pool forward; `switches` records the flat input index of each winning
/// element. Ties keep the first maximum in row-major window order.
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_fwd(
    x: &[f64],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    out: &mut [f64],
    switches: &mut [usize],
) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    debug_assert_eq!(out.len(), batch * ch * oh * ow);
    for nc in 0..batch * ch {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        let base = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for ky in 0..window {
                    let iy = oy * stride + ky;
                    for kx in 0..window {
                        let ix = ox * stride + kx;
                        let v = plane[iy * w + ix];
                        // strict > keeps the first (row-major) max on ties
                        if v > best {
                            best = v;
                            arg = iy * w + ix;
                        }
                    }
                }
                out[base + oy * ow + ox] = best;
                switches[base + oy * ow + ox] = nc * h * w + arg;
            }
        }
    }
}

pub fn maxpool2d_bwd(dout: &[f64], switches: &[usize], dx: &mut [f64]) {
    dx.fill(0.0);
    for (g, &idx) in dout.iter().zip(switches) {
        dx[idx] += g;
    }
}

/// Per-channel batch statistics over (N, H, W).
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>, // biased (divides by m)
}

pub fn bn_batch_stats(x: &[f64], batch: usize, ch: usize, hw: usize) -> BnStats {
    let m = (batch * hw) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for n in 0..batch {
            let plane = &x[(n * ch + c) * hw..(n * ch + c + 1) * hw];
            s += plane.iter().sum::<f64>();
        }
        mean[c] = s / m;
    }
    for c in 0..ch {
        let mu = mean[c];
        let mut s = 0.0;
        for n in 0..batch {
            let plane = &x[(n * ch + c) * hw..(n * ch + c + 1) * hw];
            s += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
        }
        var[c] = s / m;
    }
    BnStats { mean, var }
}

/// Normalize with given per-channel mean/var: y = γ·x̂ + β, x̂ = (x−μ)/√(σ²+ε).
/// Returns x̂ for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn bn_normalize(
    x: &[f64],
    batch: usize,
    ch: usize,
    hw: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
) {
    for n in 0..batch {
        for c in 0..ch {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let (mu, g, b) = (mean[c], gamma[c], beta[c]);
            let o = (n * ch + c) * hw;
            for i in 0..hw {
                let xh = (x[o + i] - mu) * inv;
                xhat[o + i] = xh;
                out[o + i] = g * xh + b;
            }
        }
    }
}

/// Train-mode batchnorm input gradient (mean/var depend on x), plus dγ/dβ.
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd_train(
    dout: &[f64],
    xhat: &[f64],
    batch: usize,
    ch: usize,
    hw: usize,
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let m = (batch * hw) as f64;
    for c in 0..ch {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..batch {
            let o = (n * ch + c) * hw;
            for i in 0..hw {
                sum_dy += dout[o + i];
                sum_dy_xhat += dout[o + i] * xhat[o + i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        // dx = γ/√(σ²+ε) · (dy − mean(dy) − x̂·mean(dy·x̂))
        let g = gamma[c] * inv;
        for n in 0..batch {
            let o = (n * ch + c) * hw;
            for i in 0..hw {
                dx[o + i] = g * (dout[o + i] - sum_dy / m - xhat[o + i] * sum_dy_xhat / m);
            }
        }
    }
}

/// Eval-mode batchnorm is affine in x; gradient uses the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd_eval(
    dout: &[f64],
    xhat: &[f64],
    batch: usize,
    ch: usize,
    hw: usize,
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    for c in 0..ch {
        let g = gamma[c] / (var[c] + eps).sqrt();
        for n in 0..batch {
            let o = (n * ch + c) * hw;
            for i in 0..hw {
                dx[o + i] = g * dout[o + i];
                dgamma[c] += dout[o + i] * xhat[o + i];
                dbeta[c] += dout[o + i];
            }
        }
    }
}

/// out(N×M) = x(N×D)·w(D×M) + b.
pub fn linear_fwd(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize, m: usize, out: &mut [f64]) {
    dgemm(n, d, m, 1.0, x, d as isize, 1, w, m as isize, 1, 0.0, out);
    for row in out.chunks_mut(m) {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_bwd(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    n: usize,
    d: usize,
    m: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    // dx = dout·wᵀ
    dgemm(n, m, d, 1.0, dout, m as isize, 1, w, 1, m as isize, 0.0, dx);
    // dw += xᵀ·dout
    dgemm(d, n, m, 1.0, x, 1, d as isize, dout, m as isize, 1, 1.0, dw);
    for row in dout.chunks(m) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_fwd(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - m).exp();
            z += *dst;
        }
        for dst in o.iter_mut() {
            *dst /= z;
        }
    }
}

/// dx = y ⊙ (dy − ⟨dy, y⟩) per row, where y is the softmax output.
pub fn softmax_bwd(y: &[f64], dout: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let o = r * cols;
        let dot: f64 = (0..cols).map(|j| dout[o + j] * y[o + j]).sum();
        for j in 0..cols {
            dx[o + j] = y[o + j] * (dout[o + j] - dot);
        }
    }
}

/// Mean cross-entropy over the batch from raw logits; returns per-row softmax
/// for the backward pass.
pub fn cross_entropy_fwd(
    logits: &[f64],
    labels: &[usize],
    rows: usize,
    cols: usize,
    probs: &mut [f64],
) -> f64 {
    softmax_fwd(logits, rows, cols, probs);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        loss -= probs[r * cols + label].max(1e-300).ln();
    }
    loss / rows as f64
}

/// d(logits) = (softmax − onehot)/N, scaled by the upstream seed.
pub fn cross_entropy_bwd(
    probs: &[f64],
    labels: &[usize],
    rows: usize,
    cols: usize,
    seed: f64,
    dx: &mut [f64],
) {
    let inv_n = seed / rows as f64;
    for (r, &label) in labels.iter().enumerate() {
        for j in 0..cols {
            let onehot = if j == label { 1.0 } else { 0.0 };
            dx[r * cols + j] = (probs[r * cols + j] - onehot) * inv_n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal sliding-window convolution used as the oracle for the GEMM path.
    #[allow(clippy::too_many_arguments)]
    pub fn naive_conv2d(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.out_ch * d.out_h * d.out_w];
        for n in 0..d.batch {
            for co in 0..d.out_ch {
                for oy in 0..d.out_h {
                    for ox in 0..d.out_w {
                        let mut acc = b[co];
                        for ci in 0..d.in_ch {
                            for ky in 0..d.kernel {
                                for kx in 0..d.kernel {
                                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if iy < 0
                                        || iy >= d.in_h as isize
                                        || ix < 0
                                        || ix >= d.in_w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((n * d.in_ch + ci) * d.in_h + iy as usize) * d.in_w
                                        + ix as usize;
                                    let wi = ((co * d.in_ch + ci) * d.kernel + ky) * d.kernel + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * d.out_ch + co) * d.out_h + oy) * d.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn dims(
        batch: usize,
        in_ch: usize,
        hw: (usize, usize),
        out_ch: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> ConvDims {
        ConvDims {
            batch,
            in_ch,
            in_h: hw.0,
            in_w: hw.1,
            out_ch,
            kernel: k,
            stride: s,
            pad: p,
            out_h: conv_out_extent(hw.0, k, s, p),
            out_w: conv_out_extent(hw.1, k, s, p),
        }
    }

    fn pseudo(seq: &mut u64) -> f64 {
        // splitmix64, mapped to [-1, 1)
        *seq = seq.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = *seq;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    fn fill(len: usize, seq: &mut u64) -> Vec<f64> {
        (0..len).map(|_| pseudo(seq)).collect()
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        // 1×1 kernel with weight 1 and zero bias copies the image
        let d = dims(1, 1, (4, 4), 1, 1, 1, 0);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = vec![0.0; 16];
        conv2d_fwd(&x, &[1.0], &[0.0], &d, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_all_ones_counts_window_overlap() {
        // 3×3 ones kernel, pad 1 over a 4×4 ones image: each output counts
        // the in-bounds taps (9 inside, 6 on edges, 4 in corners)
        let d = dims(1, 1, (4, 4), 1, 3, 1, 1);
        let x = vec![1.0; 16];
        let w = vec![1.0; 9];
        let mut out = vec![0.0; 16];
        conv2d_fwd(&x, &w, &[0.0], &d, &mut out);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
        assert_eq!(out[5], 9.0);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut seq = 7u64;
        for &(s, p) in &[(1usize, 1usize), (1, 0), (2, 1), (2, 0)] {
            let d = dims(2, 3, (7, 6), 4, 3, s, p);
            let x = fill(d.batch * d.in_ch * d.in_h * d.in_w, &mut seq);
            let w = fill(d.out_ch * d.in_ch * 9, &mut seq);
            let b = fill(d.out_ch, &mut seq);
            let mut out = vec![0.0; d.batch * d.out_ch * d.out_h * d.out_w];
            conv2d_fwd(&x, &w, &b, &d, &mut out);
            let oracle = naive_conv2d(&x, &w, &b, &d);
            for (a, e) in out.iter().zip(&oracle) {
                assert!((a - e).abs() < 1e-12, "stride {s} pad {p}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // ⟨im2col(x), c⟩ == ⟨x, col2im(c)⟩ — the pair must be exact adjoints
        // for conv gradients to be exact.
        let d = dims(1, 2, (5, 5), 1, 3, 2, 1);
        let mut seq = 3u64;
        let x = fill(2 * 25, &mut seq);
        let c = fill(d.col_rows() * d.col_cols(), &mut seq);
        let mut col = vec![0.0; c.len()];
        im2col(&x, &d, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &d, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0];
        let mut sw = vec![0usize];
        maxpool2d_fwd(&x, 1, 1, 2, 2, 2, 2, &mut out, &mut sw);
        assert_eq!(out[0], 4.0);
        assert_eq!(sw[0], 3);
        let mut dx = vec![9.0; 4];
        maxpool2d_bwd(&[5.0], &sw, &mut dx);
        assert_eq!(dx, vec![0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_tie_break_keeps_first_index() {
        let x = vec![7.0, 7.0, 7.0, 7.0];
        let mut out = vec![0.0];
        let mut sw = vec![0usize];
        maxpool2d_fwd(&x, 1, 1, 2, 2, 2, 2, &mut out, &mut sw);
        assert_eq!(sw[0], 0);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut out = vec![0.0; 3];
        softmax_fwd(&[0.5, 0.5, 0.5], 1, 3, &mut out);
        for v in &out {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // Large logits must not overflow
        let mut out = vec![0.0; 2];
        softmax_fwd(&[1000.0, 0.0], 1, 2, &mut out);
        assert!(out[0] > 0.999 && out.iter().all(|v| v.is_finite()));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let logits = vec![0.0; 5];
        let mut probs = vec![0.0; 5];
        let loss = cross_entropy_fwd(&logits, &[2], 1, 5, &mut probs);
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_approaches_zero() {
        let logits = vec![50.0, 0.0, 0.0];
        let mut probs = vec![0.0; 3];
        let loss = cross_entropy_fwd(&logits, &[0], 1, 3, &mut probs);
        assert!(loss < 1e-12);
    }

    #[test]
    fn bn_normalizes_batch_statistics() {
        let mut seq = 11u64;
        let (b, c, hw) = (4, 3, 10);
        let x = fill(b * c * hw, &mut seq);
        let stats = bn_batch_stats(&x, b, c, hw);
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        bn_normalize(
            &x,
            b,
            c,
            hw,
            &stats.mean,
            &stats.var,
            &vec![1.0; c],
            &vec![0.0; c],
            1e-5,
            &mut out,
            &mut xhat,
        );
        let post = bn_batch_stats(&out, b, c, hw);
        for ch in 0..c {
            assert!(post.mean[ch].abs() < 1e-12);
            assert!((post.var[ch] - 1.0).abs() < 1e-4); // eps skews variance slightly
        }
    }

    #[test]
    fn linear_identity_passthrough() {
        // 2×2 identity weight, zero bias
        let x = vec![3.0, -1.0];
        let w = vec![1.0, 0.0, 0.0, 1.0];
        let mut out = vec![0.0; 2];
        linear_fwd(&x, &w, &[0.0, 0.0], 1, 2, 2, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn linear_input_gradient_is_weight_transpose() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let dout = vec![1.0, 0.0, 0.0];
        let mut dx = vec![0.0; 2];
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 3];
        linear_bwd(&[0.0, 0.0], &w, &dout, 1, 2, 3, &mut dx, &mut dw, &mut db);
        assert_eq!(dx, vec![1.0, 4.0]); // first column of w
    }
}
