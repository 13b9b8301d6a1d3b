//! Reverse-mode autodiff over a Wengert tape.
//!
//! Every op records its output tensor plus whatever context the backward
//! pass needs (pool switches, batchnorm statistics, dropout masks). The tape
//! is append-only and `backward` never mutates it, so repeated backward
//! calls from the same seed give identical gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::kernels::{self, ConvDims};
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

fn shape_err(op: &'static str, msg: impl Into<String>) -> GradError {
    GradError::Shape { op, msg: msg.into() }
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// ReLU backward behavior. `Guided` additionally zeroes positions whose
/// upstream gradient is negative (forward values are identical).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReluMode {
    Standard,
    Guided,
}

/// Per-channel batch statistics handed back to the trainer so it can update
/// running estimates.
pub struct BnBatch {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// N·H·W — the sample count behind each channel's statistics.
    pub elems_per_channel: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        dims: ConvDims,
    },
    MaxPool2d {
        x: usize,
        switches: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        ch: usize,
        hw: usize,
        train: bool,
    },
    Relu {
        x: usize,
        mode: ReluMode,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        n: usize,
        d: usize,
        m: usize,
    },
    /// `mask` holds 0 or 1/(1−p) per element; `None` is the eval identity.
    Dropout {
        x: usize,
        mask: Option<Vec<f64>>,
    },
    Softmax {
        x: usize,
        rows: usize,
        cols: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// Top-left spatial crop (used by strided residual projections).
    Crop2d {
        x: usize,
        ch: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Reshape {
        x: usize,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "linear",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Add { .. } => "add",
            Op::Crop2d { .. } => "crop2d",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    out: usize,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, op: Op, out: Tensor) -> Var {
        debug_assert!(out.is_finite(), "{} produced non-finite values", op.kind());
        let id = self.vals.len();
        self.vals.push(out);
        self.nodes.push(Node { out: id, op });
        Var(id)
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize), GradError> {
        match *self.value(v).shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(shape_err(op, format!("expected rank-4 input, got {s:?}"))),
        }
    }

    /// 2-D convolution, NCHW input, (out_ch, in_ch, k, k) weight.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, GradError> {
        let (batch, in_ch, in_h, in_w) = self.dims4(x, "conv2d")?;
        let (out_ch, wc, kh, kw) = self.dims4(w, "conv2d")?;
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}×{kw}")));
        }
        if wc != in_ch {
            return Err(shape_err(
                "conv2d",
                format!("weight expects {wc} input channels, input has {in_ch}"),
            ));
        }
        if self.value(b).shape() != [out_ch] {
            return Err(shape_err("conv2d", "bias length must equal output channels"));
        }
        if stride == 0 {
            return Err(GradError::Invalid { op: "conv2d", msg: "stride must be ≥ 1".into() });
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kh {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        let dims = ConvDims {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h: kernels::conv_out_extent(in_h, kh, stride, pad),
            out_w: kernels::conv_out_extent(in_w, kh, stride, pad),
        };
        let mut out = Tensor::zeros(&[batch, out_ch, dims.out_h, dims.out_w]);
        kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
            out.data_mut(),
        );
        Ok(self.push(Op::Conv2d { x: x.0, w: w.0, b: b.0, dims }, out))
    }

    /// Max pooling; the window must tile the input exactly.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var, GradError> {
        let (batch, ch, h, w) = self.dims4(x, "maxpool2d")?;
        if window == 0 || stride == 0 {
            return Err(GradError::Invalid {
                op: "maxpool2d",
                msg: "window and stride must be ≥ 1".into(),
            });
        }
        if h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(shape_err(
                "maxpool2d",
                format!("window {window}/stride {stride} does not tile {h}×{w}"),
            ));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = Tensor::zeros(&[batch, ch, oh, ow]);
        let mut switches = vec![0usize; batch * ch * oh * ow];
        kernels::maxpool2d_fwd(
            self.value(x).data(),
            batch,
            ch,
            h,
            w,
            window,
            stride,
            out.data_mut(),
            &mut switches,
        );
        Ok(self.push(Op::MaxPool2d { x: x.0, switches }, out))
    }

    /// Train-mode batchnorm: normalizes with batch statistics and returns
    /// them so the caller can update running estimates.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnBatch), GradError> {
        let (batch, ch, h, w) = self.dims4(x, "batchnorm2d")?;
        self.check_bn_params(gamma, beta, ch)?;
        let hw = h * w;
        let stats = kernels::bn_batch_stats(self.value(x).data(), batch, ch, hw);
        let var = self.normalize_bn(x, gamma, beta, batch, ch, hw, &stats.mean, &stats.var, eps, true);
        Ok((var, BnBatch { mean: stats.mean, var: stats.var, elems_per_channel: batch * hw }))
    }

    /// Eval-mode batchnorm with frozen running statistics (affine in x).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, GradError> {
        let (batch, ch, h, w) = self.dims4(x, "batchnorm2d")?;
        self.check_bn_params(gamma, beta, ch)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(shape_err("batchnorm2d", "running stats length must equal channels"));
        }
        Ok(self.normalize_bn(x, gamma, beta, batch, ch, h * w, running_mean, running_var, eps, false))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, ch: usize) -> Result<(), GradError> {
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(shape_err("batchnorm2d", "gamma/beta length must equal channels"));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_bn(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        ch: usize,
        hw: usize,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Var {
        let mut out = Tensor::zeros(self.value(x).shape());
        let mut xhat = vec![0.0; out.numel()];
        kernels::bn_normalize(
            self.value(x).data(),
            batch,
            ch,
            hw,
            mean,
            var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            out.data_mut(),
            &mut xhat,
        );
        self.push(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                var: var.to_vec(),
                eps,
                ch,
                hw,
                train,
            },
            out,
        )
    }

    pub fn relu(&mut self, x: Var, mode: ReluMode) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x: x.0, mode }, out)
    }

    /// Fully connected layer: x(N×D)·w(D×M) + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GradError> {
        let (n, d) = match *self.value(x).shape() {
            [n, d] => (n, d),
            ref s => return Err(shape_err("linear", format!("expected rank-2 input, got {s:?}"))),
        };
        let (wd, m) = match *self.value(w).shape() {
            [wd, m] => (wd, m),
            ref s => return Err(shape_err("linear", format!("expected rank-2 weight, got {s:?}"))),
        };
        if wd != d {
            return Err(shape_err("linear", format!("input dim {d} vs weight dim {wd}")));
        }
        if self.value(b).shape() != [m] {
            return Err(shape_err("linear", "bias length must equal output dim"));
        }
        let mut out = Tensor::zeros(&[n, m]);
        kernels::linear_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            d,
            m,
            out.data_mut(),
        );
        Ok(self.push(Op::Linear { x: x.0, w: w.0, b: b.0, n, d, m }, out))
    }

    /// Train-mode dropout: zero with probability p, rescale survivors by 1/(1−p).
    pub fn dropout_train(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, GradError> {
        if !(0.0..1.0).contains(&p) {
            return Err(GradError::Invalid {
                op: "dropout",
                msg: format!("p must be in [0, 1), got {p}"),
            });
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        Ok(self.push(Op::Dropout { x: x.0, mask: Some(mask) }, out))
    }

    /// Eval-mode dropout is the identity.
    pub fn dropout_eval(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(Op::Dropout { x: x.0, mask: None }, out)
    }

    /// Row-wise softmax over a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let (rows, cols) = match *self.value(x).shape() {
            [r, c] => (r, c),
            ref s => return Err(shape_err("softmax", format!("expected rank-2 input, got {s:?}"))),
        };
        let mut out = Tensor::zeros(&[rows, cols]);
        kernels::softmax_fwd(self.value(x).data(), rows, cols, out.data_mut());
        Ok(self.push(Op::Softmax { x: x.0, rows, cols }, out))
    }

    /// Mean cross-entropy over the batch, from raw logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, GradError> {
        let (rows, cols) = match *self.value(logits).shape() {
            [r, c] => (r, c),
            ref s => {
                return Err(shape_err("cross_entropy", format!("expected rank-2 logits, got {s:?}")))
            }
        };
        if labels.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(GradError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {cols} classes"),
            });
        }
        let mut probs = vec![0.0; rows * cols];
        let loss =
            kernels::cross_entropy_fwd(self.value(logits).data(), labels, rows, cols, &mut probs);
        Ok(self.push(
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs, rows, cols },
            Tensor::scalar(loss),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = self.value(a).add(self.value(b));
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out))
    }

    /// Keep the top-left out_h×out_w window of each spatial plane.
    pub fn crop2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, GradError> {
        let (batch, ch, h, w) = self.dims4(x, "crop2d")?;
        if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
            return Err(shape_err("crop2d", format!("cannot crop {h}×{w} to {out_h}×{out_w}")));
        }
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[batch, ch, out_h, out_w]);
        {
            let dst = out.data_mut();
            for nc in 0..batch * ch {
                for y in 0..out_h {
                    let s = nc * h * w + y * w;
                    let d = nc * out_h * out_w + y * out_w;
                    dst[d..d + out_w].copy_from_slice(&src[s..s + out_w]);
                }
            }
        }
        Ok(self.push(Op::Crop2d { x: x.0, ch, in_h: h, in_w: w, out_h, out_w }, out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} incompatible with {} elements", shape, self.value(x).numel()),
            ));
        }
        let out = self.value(x).reshaped(shape);
        Ok(self.push(Op::Reshape { x: x.0 }, out))
    }

    /// Reverse pass seeded with ∂L/∂(seed_at) = seed. Returns gradients for
    /// every tensor that influences it. Does not mutate the tape.
    pub fn backward(&self, seed_at: Var, seed: &Tensor) -> Result<GradStore, GradError> {
        self.backward_impl(seed_at, seed, None)
    }

    /// Backward pass with DeepLift's rescale rule at every ReLU: the local
    /// derivative is replaced by Δoutput/Δinput between this tape (the input)
    /// and `baseline` (same network, baseline input). All other ops use their
    /// exact gradients; max-pool keeps this tape's switches.
    pub fn backward_rescale(
        &self,
        seed_at: Var,
        seed: &Tensor,
        baseline: &Tape,
    ) -> Result<GradStore, GradError> {
        if baseline.nodes.len() != self.nodes.len() {
            return Err(GradError::Invalid {
                op: "backward_rescale",
                msg: "baseline tape has a different op sequence".into(),
            });
        }
        for (a, b) in self.nodes.iter().zip(&baseline.nodes) {
            if a.op.kind() != b.op.kind() {
                return Err(GradError::Invalid {
                    op: "backward_rescale",
                    msg: format!("op mismatch: {} vs {}", a.op.kind(), b.op.kind()),
                });
            }
        }
        self.backward_impl(seed_at, seed, Some(baseline))
    }

    fn backward_impl(
        &self,
        seed_at: Var,
        seed: &Tensor,
        rescale: Option<&Tape>,
    ) -> Result<GradStore, GradError> {
        if seed.shape() != self.value(seed_at).shape() {
            return Err(shape_err(
                "backward",
                format!(
                    "seed shape {:?} vs value shape {:?}",
                    seed.shape(),
                    self.value(seed_at).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.vals.len()).map(|_| None).collect();
        grads[seed_at.0] = Some(seed.clone());
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.out].clone() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, dims } => {
                    let mut dx = Tensor::zeros(self.vals[*x].shape());
                    let mut dw = Tensor::zeros(self.vals[*w].shape());
                    let mut db = Tensor::zeros(self.vals[*b].shape());
                    kernels::conv2d_bwd(
                        self.vals[*x].data(),
                        self.vals[*w].data(),
                        g.data(),
                        dims,
                        dx.data_mut(),
                        dw.data_mut(),
                        db.data_mut(),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::MaxPool2d { x, switches } => {
                    let mut dx = Tensor::zeros(self.vals[*x].shape());
                    kernels::maxpool2d_bwd(g.data(), switches, dx.data_mut());
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, var, eps, ch, hw, train } => {
                    let batch = self.vals[*x].numel() / (ch * hw);
                    let mut dx = Tensor::zeros(self.vals[*x].shape());
                    let mut dgamma = Tensor::zeros(&[*ch]);
                    let mut dbeta = Tensor::zeros(&[*ch]);
                    let bwd = if *train { kernels::bn_bwd_train } else { kernels::bn_bwd_eval };
                    bwd(
                        g.data(),
                        xhat,
                        batch,
                        *ch,
                        *hw,
                        var,
                        self.vals[*gamma].data(),
                        *eps,
                        dx.data_mut(),
                        dgamma.data_mut(),
                        dbeta.data_mut(),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu { x, mode } => {
                    let z = self.vals[*x].data();
                    let dx = match rescale {
                        // Rescale rule: multiplier = Δrelu/Δz across baseline
                        // and input, falling back to the exact derivative when
                        // the pre-activations nearly coincide.
                        Some(base) => {
                            let z0 = base.vals[*x].data();
                            Tensor::new(
                                self.vals[*x].shape().to_vec(),
                                g.data()
                                    .iter()
                                    .zip(z.iter().zip(z0))
                                    .map(|(&gv, (&zi, &z0i))| {
                                        let dz = zi - z0i;
                                        let mult = if dz.abs() > 1e-7 {
                                            (zi.max(0.0) - z0i.max(0.0)) / dz
                                        } else if zi > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        };
                                        gv * mult
                                    })
                                    .collect(),
                            )
                        }
                        None => Tensor::new(
                            self.vals[*x].shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(z)
                                .map(|(&gv, &zi)| {
                                    let open = zi > 0.0;
                                    let pass = match mode {
                                        ReluMode::Standard => open,
                                        ReluMode::Guided => open && gv > 0.0,
                                    };
                                    if pass {
                                        gv
                                    } else {
                                        0.0
                                    }
                                })
                                .collect(),
                        ),
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b, n, d, m } => {
                    let mut dx = Tensor::zeros(self.vals[*x].shape());
                    let mut dw = Tensor::zeros(self.vals[*w].shape());
                    let mut db = Tensor::zeros(self.vals[*b].shape());
                    kernels::linear_bwd(
                        self.vals[*x].data(),
                        self.vals[*w].data(),
                        g.data(),
                        *n,
                        *d,
                        *m,
                        dx.data_mut(),
                        dw.data_mut(),
                        db.data_mut(),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Dropout { x, mask } => {
                    let dx = match mask {
                        Some(m) => Tensor::new(
                            self.vals[*x].shape().to_vec(),
                            g.data().iter().zip(m).map(|(&gv, &mv)| gv * mv).collect(),
                        ),
                        None => g.clone(),
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x, rows, cols } => {
                    let mut dx = Tensor::zeros(self.vals[*x].shape());
                    kernels::softmax_bwd(
                        self.vals[node.out].data(),
                        g.data(),
                        *rows,
                        *cols,
                        dx.data_mut(),
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, labels, probs, rows, cols } => {
                    let mut dx = Tensor::zeros(self.vals[*logits].shape());
                    kernels::cross_entropy_bwd(probs, labels, *rows, *cols, g.data()[0], dx.data_mut());
                    accumulate(&mut grads, *logits, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Crop2d { x, ch, in_h, in_w, out_h, out_w } => {
                    let mut dx = Tensor::zeros(self.vals[*x].shape());
                    {
                        let dst = dx.data_mut();
                        let batch = self.vals[*x].numel() / (ch * in_h * in_w);
                        for nc in 0..batch * ch {
                            for y in 0..*out_h {
                                let d = nc * in_h * in_w + y * in_w;
                                let s = nc * out_h * out_w + y * out_w;
                                dst[d..d + out_w].copy_from_slice(&g.data()[s..s + out_w]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape { x } => {
                    let dx = g.reshaped(self.vals[*x].shape().to_vec());
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(GradStore { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
