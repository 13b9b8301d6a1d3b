//! Classifier architectures: declarative layer specs, parameter
//! initialization, and the forward passes (taped for gradients, tape-free
//! for fast inference).

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::kernels::{self, ConvDims};
use crate::grad::{BnBatch, GradError, ReluMode, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DROPOUT_P: f64 = 0.5;

/// Capture name that resolves to the network input instead of a layer.
pub const INPUT_CAPTURE: &str = "input";
/// Capture name given to the feature map feeding the classifier head.
pub const FEATURES_CAPTURE: &str = "features";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("model: {0}")]
    BadInput(String),
    #[error("batchnorm running statistics uninitialized (layer {0}); train first")]
    UninitializedBn(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vgg,
    Resnet,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vgg" => Ok(ModelKind::Vgg),
            "resnet" => Ok(ModelKind::Resnet),
            other => Err(format!("unknown model kind '{other}' (expected vgg|resnet)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Vgg => "vgg",
            ModelKind::Resnet => "resnet",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm2d { ch: usize },
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Dropout { p: f64 },
    Flatten,
    Linear { in_dim: usize, out_dim: usize },
    /// Two 3×3 conv+BN with identity skip; strided blocks project the skip
    /// through a 1×1 strided conv + BN and halve spatial extent with floor
    /// semantics (odd extents lose their last row/column).
    ResBlock { in_ch: usize, out_ch: usize, stride: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    /// Activations of layers with a capture name are exposed by `forward`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<String>,
}

impl Layer {
    fn plain(kind: LayerKind) -> Layer {
        Layer { kind, capture: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub head_width: usize,
    /// Capture name used by activation-space attribution (default: the
    /// feature map entering the classifier head).
    pub gradcam_layer: String,
    pub layers: Vec<Layer>,
}

/// Training provenance stored with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: u32,
    pub val_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta { epoch: 0, val_accuracy: 0.0, seed: 0 }
    }
}

/// A model: architecture, parameters, and batchnorm running state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Trainable tensors (conv/linear weights and biases, BN gamma/beta).
    pub params: BTreeMap<String, Tensor>,
    /// Non-trainable state: BN running_mean/running_var/batches_tracked.
    pub state: BTreeMap<String, Tensor>,
    pub meta: TrainMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a caller needs after a taped forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    pub logits: Var,
    pub probs: Var,
    /// Captured activations by name (always includes the gradcam layer and
    /// the pseudo-capture "input").
    pub captures: BTreeMap<String, Var>,
    /// Parameter tape handles by name (for optimizer gradient lookup).
    pub param_vars: BTreeMap<String, Var>,
    /// Batch statistics per BN layer, in layer order (train mode only).
    pub bn_batches: Vec<(String, BnBatch)>,
}

const STAGE_CHANNELS: [usize; 4] = [12, 24, 48, 96];

fn check_build_args(input_size: usize, num_classes: usize, head_width: usize, min_size: usize) {
    assert!(
        input_size >= min_size,
        "input size {input_size} below the architecture minimum {min_size}"
    );
    assert!(num_classes >= 2, "need at least two classes");
    assert!(head_width >= 1, "head width must be positive");
}

/// VGG-style spec: four double-conv stages at 12/24/48/96 channels, 2×2
/// max-pools while the spatial extent exceeds 8, then a three-layer head.
pub fn build_vgg(input_size: usize, num_classes: usize, head_width: usize) -> ModelSpec {
    check_build_args(input_size, num_classes, head_width, 8);
    let mut layers = Vec::new();
    let mut ch = 1;
    let mut spatial = input_size;
    for out_ch in STAGE_CHANNELS {
        for _ in 0..2 {
            layers.push(Layer::plain(LayerKind::Conv2d {
                in_ch: ch,
                out_ch,
                kernel: 3,
                stride: 1,
                pad: 1,
            }));
            layers.push(Layer::plain(LayerKind::BatchNorm2d { ch: out_ch }));
            layers.push(Layer::plain(LayerKind::Relu));
            ch = out_ch;
        }
        if spatial > 8 {
            layers.push(Layer::plain(LayerKind::MaxPool2d { window: 2, stride: 2 }));
            spatial /= 2;
        }
    }
    finish_with_head(layers, ch, spatial, num_classes, head_width, ModelKind::Vgg, input_size)
}

/// ResNet-style spec: a 12-channel stem, then four (strided block, plain
/// block) stages at 12/24/48/96 channels, and the same head as the VGG.
pub fn build_resnet(input_size: usize, num_classes: usize, head_width: usize) -> ModelSpec {
    // four stride-2 stages must keep the spatial extent positive
    check_build_args(input_size, num_classes, head_width, 16);
    let mut layers = vec![
        Layer::plain(LayerKind::Conv2d { in_ch: 1, out_ch: 12, kernel: 3, stride: 1, pad: 1 }),
        Layer::plain(LayerKind::BatchNorm2d { ch: 12 }),
        Layer::plain(LayerKind::Relu),
    ];
    let mut ch = 12;
    let mut spatial = input_size;
    for out_ch in STAGE_CHANNELS {
        layers.push(Layer::plain(LayerKind::ResBlock { in_ch: ch, out_ch, stride: 2 }));
        spatial /= 2; // strided blocks use floor semantics
        layers.push(Layer::plain(LayerKind::ResBlock { in_ch: out_ch, out_ch, stride: 1 }));
        ch = out_ch;
    }
    finish_with_head(layers, ch, spatial, num_classes, head_width, ModelKind::Resnet, input_size)
}

#[allow(clippy::too_many_arguments)]
fn finish_with_head(
    mut layers: Vec<Layer>,
    ch: usize,
    spatial: usize,
    num_classes: usize,
    head_width: usize,
    kind: ModelKind,
    input_size: usize,
) -> ModelSpec {
    // the feature map entering the head is the activation-attribution target
    layers.last_mut().unwrap().capture = Some(FEATURES_CAPTURE.to_string());
    layers.push(Layer::plain(LayerKind::Flatten));
    let feat = ch * spatial * spatial;
    layers.push(Layer::plain(LayerKind::Linear { in_dim: feat, out_dim: head_width }));
    layers.push(Layer::plain(LayerKind::Relu));
    layers.push(Layer::plain(LayerKind::Dropout { p: DROPOUT_P }));
    layers.push(Layer::plain(LayerKind::Linear { in_dim: head_width, out_dim: head_width }));
    layers.push(Layer::plain(LayerKind::Relu));
    layers.push(Layer::plain(LayerKind::Dropout { p: DROPOUT_P }));
    layers.push(Layer::plain(LayerKind::Linear { in_dim: head_width, out_dim: num_classes }));
    ModelSpec {
        kind,
        input_size,
        in_channels: 1,
        num_classes,
        head_width,
        gradcam_layer: FEATURES_CAPTURE.to_string(),
        layers,
    }
}

/// Spatial-extent arithmetic for a strided ResBlock conv: floor(h/2), realized
/// by pad 1 on even extents and pad 0 on odd ones.
fn resblock_pad(extent: usize) -> usize {
    if extent % 2 == 0 {
        1
    } else {
        0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
}

/// Output extent of each layer for a single image — the programmatic form of
/// the architecture tables.
pub fn layer_output_extents(spec: &ModelSpec) -> Vec<(String, Extent)> {
    let mut out = Vec::new();
    let mut e = Extent { ch: spec.in_channels, h: spec.input_size, w: spec.input_size };
    let mut flat = 0usize;
    for layer in &spec.layers {
        let label;
        match layer.kind {
            LayerKind::Conv2d { out_ch, kernel, stride, pad, .. } => {
                e = Extent {
                    ch: out_ch,
                    h: kernels::conv_out_extent(e.h, kernel, stride, pad),
                    w: kernels::conv_out_extent(e.w, kernel, stride, pad),
                };
                label = format!("conv{kernel}x{kernel}");
            }
            LayerKind::BatchNorm2d { .. } => label = "batchnorm".into(),
            LayerKind::Relu => label = "relu".into(),
            LayerKind::MaxPool2d { window, stride } => {
                e = Extent { ch: e.ch, h: (e.h - window) / stride + 1, w: (e.w - window) / stride + 1 };
                label = format!("maxpool{window}");
            }
            LayerKind::Dropout { .. } => label = "dropout".into(),
            LayerKind::Flatten => {
                flat = e.ch * e.h * e.w;
                label = "flatten".into();
            }
            LayerKind::Linear { out_dim, .. } => {
                flat = out_dim;
                label = "linear".into();
            }
            LayerKind::ResBlock { out_ch, stride, .. } => {
                if stride == 2 {
                    e = Extent { ch: out_ch, h: e.h / 2, w: e.w / 2 };
                } else {
                    e = Extent { ch: out_ch, ..e };
                }
                label = if stride == 2 { "resblock/2".into() } else { "resblock".into() };
            }
        }
        if flat > 0 {
            out.push((label, Extent { ch: flat, h: 1, w: 1 }));
        } else {
            out.push((label, e));
        }
    }
    out
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::new(
        shape.to_vec(),
        (0..shape.iter().product()).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn init_conv(
    params: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) {
    let fan_in = in_ch * kernel * kernel;
    params.insert(format!("{prefix}.weight"), kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
}

fn init_bn(params: &mut BTreeMap<String, Tensor>, state: &mut BTreeMap<String, Tensor>, prefix: &str, ch: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[ch], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[ch]));
    state.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[ch]));
    state.insert(format!("{prefix}.running_var"), Tensor::full(&[ch], 1.0));
    state.insert(format!("{prefix}.batches_tracked"), Tensor::zeros(&[1]));
}

/// Fresh checkpoint with Kaiming-uniform weights (seeded, deterministic).
pub fn init_model(spec: &ModelSpec, seed: u64) -> Checkpoint {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut state = BTreeMap::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let name = format!("layer{i}");
        match layer.kind {
            LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => {
                init_conv(&mut params, &name, in_ch, out_ch, kernel, &mut rng);
            }
            LayerKind::BatchNorm2d { ch } => init_bn(&mut params, &mut state, &name, ch),
            LayerKind::Linear { in_dim, out_dim } => {
                params.insert(format!("{name}.weight"), kaiming_uniform(&[in_dim, out_dim], in_dim, &mut rng));
                params.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
            }
            LayerKind::ResBlock { in_ch, out_ch, stride } => {
                init_conv(&mut params, &format!("{name}.conv1"), in_ch, out_ch, 3, &mut rng);
                init_bn(&mut params, &mut state, &format!("{name}.bn1"), out_ch);
                init_conv(&mut params, &format!("{name}.conv2"), out_ch, out_ch, 3, &mut rng);
                init_bn(&mut params, &mut state, &format!("{name}.bn2"), out_ch);
                if stride != 1 || in_ch != out_ch {
                    init_conv(&mut params, &format!("{name}.proj"), in_ch, out_ch, 1, &mut rng);
                    init_bn(&mut params, &mut state, &format!("{name}.bnp"), out_ch);
                }
            }
            LayerKind::Relu | LayerKind::MaxPool2d { .. } | LayerKind::Dropout { .. } | LayerKind::Flatten => {}
        }
    }
    Checkpoint { spec: spec.clone(), params, state, meta: TrainMeta::default() }
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    fn state_tensor(&self, name: &str) -> &Tensor {
        self.state
            .get(name)
            .unwrap_or_else(|| panic!("missing state tensor '{name}'"))
    }

    fn bn_ready(&self, prefix: &str) -> bool {
        self.state_tensor(&format!("{prefix}.batches_tracked")).data()[0] > 0.0
    }
}

/// Fold one train-mode forward's batch statistics into the running
/// statistics (exponential moving average, unbiased variance).
pub fn update_running_stats(ckpt: &mut Checkpoint, bn_batches: &[(String, BnBatch)]) {
    for (prefix, stats) in bn_batches {
        let m = stats.elems_per_channel as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        {
            let rm = ckpt.state.get_mut(&format!("{prefix}.running_mean")).unwrap();
            for (r, b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        {
            let rv = ckpt.state.get_mut(&format!("{prefix}.running_var")).unwrap();
            for (r, b) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (b * unbias);
            }
        }
        let tracked = ckpt.state.get_mut(&format!("{prefix}.batches_tracked")).unwrap();
        tracked.data_mut()[0] += 1.0;
    }
}

/// Taped forward pass. Train mode applies batch statistics and dropout (and
/// needs an RNG); eval mode uses running statistics and identity dropout.
/// `relu_mode` selects the backward behavior of every ReLU.
pub fn forward(
    ckpt: &Checkpoint,
    batch: &Tensor,
    mode: Mode,
    relu_mode: ReluMode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass, ModelError> {
    let spec = &ckpt.spec;
    let (n, c, h, w) = match *batch.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(ModelError::BadInput(format!("expected NCHW batch, got {s:?}"))),
    };
    if c != spec.in_channels || h != spec.input_size || w != spec.input_size {
        return Err(ModelError::BadInput(format!(
            "batch {c}×{h}×{w} does not match model {}×{s}×{s}",
            spec.in_channels,
            s = spec.input_size
        )));
    }
    if mode == Mode::Train && rng.is_none() {
        return Err(ModelError::BadInput("train-mode forward requires an RNG".into()));
    }

    let mut tape = Tape::new();
    let mut param_vars: BTreeMap<String, Var> = BTreeMap::new();
    let mut bn_batches: Vec<(String, BnBatch)> = Vec::new();
    let mut captures: BTreeMap<String, Var> = BTreeMap::new();

    let input = tape.leaf(batch.clone());
    captures.insert(INPUT_CAPTURE.to_string(), input);

    // parameter leaves are created on demand and remembered by name
    macro_rules! pvar {
        ($tape:expr, $name:expr) => {{
            let name: String = $name;
            match param_vars.get(&name) {
                Some(v) => *v,
                None => {
                    let v = $tape.leaf(ckpt.param(&name).clone());
                    param_vars.insert(name, v);
                    v
                }
            }
        }};
    }

    let bn = |tape: &mut Tape,
                  x: Var,
                  prefix: &str,
                  param_vars: &mut BTreeMap<String, Var>,
                  bn_batches: &mut Vec<(String, BnBatch)>|
     -> Result<Var, ModelError> {
        let gname = format!("{prefix}.gamma");
        let bname = format!("{prefix}.beta");
        let gamma = match param_vars.get(&gname) {
            Some(v) => *v,
            None => {
                let v = tape.leaf(ckpt.param(&gname).clone());
                param_vars.insert(gname, v);
                v
            }
        };
        let beta = match param_vars.get(&bname) {
            Some(v) => *v,
            None => {
                let v = tape.leaf(ckpt.param(&bname).clone());
                param_vars.insert(bname, v);
                v
            }
        };
        match mode {
            Mode::Train => {
                let (out, stats) = tape.batchnorm2d_train(x, gamma, beta, BN_EPS)?;
                bn_batches.push((prefix.to_string(), stats));
                Ok(out)
            }
            Mode::Eval => {
                if !ckpt.bn_ready(prefix) {
                    return Err(ModelError::UninitializedBn(prefix.to_string()));
                }
                let mean = ckpt.state_tensor(&format!("{prefix}.running_mean"));
                let var = ckpt.state_tensor(&format!("{prefix}.running_var"));
                Ok(tape.batchnorm2d_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)?)
            }
        }
    };

    let mut cur = input;
    let mut cur_hw = (h, w);
    for (i, layer) in spec.layers.iter().enumerate() {
        let name = format!("layer{i}");
        cur = match &layer.kind {
            LayerKind::Conv2d { stride, pad, kernel, .. } => {
                let w_ = pvar!(tape, format!("{name}.weight"));
                let b_ = pvar!(tape, format!("{name}.bias"));
                let out = tape.conv2d(cur, w_, b_, *stride, *pad)?;
                cur_hw = (
                    kernels::conv_out_extent(cur_hw.0, *kernel, *stride, *pad),
                    kernels::conv_out_extent(cur_hw.1, *kernel, *stride, *pad),
                );
                out
            }
            LayerKind::BatchNorm2d { .. } => bn(&mut tape, cur, &name, &mut param_vars, &mut bn_batches)?,
            LayerKind::Relu => tape.relu(cur, relu_mode),
            LayerKind::MaxPool2d { window, stride } => {
                let out = tape.maxpool2d(cur, *window, *stride)?;
                cur_hw = ((cur_hw.0 - window) / stride + 1, (cur_hw.1 - window) / stride + 1);
                out
            }
            LayerKind::Dropout { p } => match mode {
                Mode::Train => tape.dropout_train(cur, *p, rng.as_deref_mut().unwrap())?,
                Mode::Eval => tape.dropout_eval(cur),
            },
            LayerKind::Flatten => {
                let numel = tape.value(cur).numel();
                tape.reshape(cur, vec![n, numel / n])?
            }
            LayerKind::Linear { .. } => {
                let w_ = pvar!(tape, format!("{name}.weight"));
                let b_ = pvar!(tape, format!("{name}.bias"));
                tape.linear(cur, w_, b_)?
            }
            LayerKind::ResBlock { stride, .. } => {
                let (in_h, in_w) = cur_hw;
                let (p1, out_h, out_w) = if *stride == 2 {
                    (resblock_pad(in_h), in_h / 2, in_w / 2)
                } else {
                    (1, in_h, in_w)
                };
                let w1 = pvar!(tape, format!("{name}.conv1.weight"));
                let b1 = pvar!(tape, format!("{name}.conv1.bias"));
                let c1 = tape.conv2d(cur, w1, b1, *stride, p1)?;
                let n1 = bn(&mut tape, c1, &format!("{name}.bn1"), &mut param_vars, &mut bn_batches)?;
                let a1 = tape.relu(n1, relu_mode);
                let w2 = pvar!(tape, format!("{name}.conv2.weight"));
                let b2 = pvar!(tape, format!("{name}.conv2.bias"));
                let c2 = tape.conv2d(a1, w2, b2, 1, 1)?;
                let n2 = bn(&mut tape, c2, &format!("{name}.bn2"), &mut param_vars, &mut bn_batches)?;
                let shortcut = if ckpt.params.contains_key(&format!("{name}.proj.weight")) {
                    let wp = pvar!(tape, format!("{name}.proj.weight"));
                    let bp = pvar!(tape, format!("{name}.proj.bias"));
                    let mut s = tape.conv2d(cur, wp, bp, *stride, 0)?;
                    let sh = tape.value(s).shape().to_vec();
                    if sh[2] != out_h || sh[3] != out_w {
                        s = tape.crop2d(s, out_h, out_w)?;
                    }
                    bn(&mut tape, s, &format!("{name}.bnp"), &mut param_vars, &mut bn_batches)?
                } else {
                    cur
                };
                let sum = tape.add(n2, shortcut)?;
                cur_hw = (out_h, out_w);
                tape.relu(sum, relu_mode)
            }
        };
        if let Some(cap) = &layer.capture {
            captures.insert(cap.clone(), cur);
        }
    }

    let logits = cur;
    let probs = tape.softmax(logits)?;
    Ok(ForwardPass { tape, input, logits, probs, captures, param_vars, bn_batches })
}

/// Tape-free eval forward: probabilities and logits only. Matches
/// `forward(.., Mode::Eval, ..)` bit for bit (same kernels, same order).
pub fn infer(ckpt: &Checkpoint, batch: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
    let spec = &ckpt.spec;
    let (n, c, h, w) = match *batch.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(ModelError::BadInput(format!("expected NCHW batch, got {s:?}"))),
    };
    if c != spec.in_channels || h != spec.input_size || w != spec.input_size {
        return Err(ModelError::BadInput(format!(
            "batch {c}×{h}×{w} does not match model {}×{s}×{s}",
            spec.in_channels,
            s = spec.input_size
        )));
    }

    let bn_eval = |x: &mut Tensor, prefix: &str, ch: usize, hw: usize| -> Result<(), ModelError> {
        if !ckpt.bn_ready(prefix) {
            return Err(ModelError::UninitializedBn(prefix.to_string()));
        }
        let mean = ckpt.state_tensor(&format!("{prefix}.running_mean"));
        let var = ckpt.state_tensor(&format!("{prefix}.running_var"));
        let gamma = ckpt.param(&format!("{prefix}.gamma"));
        let beta = ckpt.param(&format!("{prefix}.beta"));
        let batch_n = x.numel() / (ch * hw);
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = vec![0.0; x.numel()];
        kernels::bn_normalize(
            x.data(),
            batch_n,
            ch,
            hw,
            mean.data(),
            var.data(),
            gamma.data(),
            beta.data(),
            BN_EPS,
            out.data_mut(),
            &mut xhat,
        );
        *x = out;
        Ok(())
    };

    let conv = |x: &Tensor, prefix: &str, stride: usize, pad: usize| -> Tensor {
        let wt = ckpt.param(&format!("{prefix}.weight"));
        let bt = ckpt.param(&format!("{prefix}.bias"));
        let (out_ch, in_ch, k, _) = match *wt.shape() {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => unreachable!(),
        };
        let (bn_, _, ih, iw) = match *x.shape() {
            [a, b, c2, d] => (a, b, c2, d),
            _ => unreachable!(),
        };
        let dims = ConvDims {
            batch: bn_,
            in_ch,
            in_h: ih,
            in_w: iw,
            out_ch,
            kernel: k,
            stride,
            pad,
            out_h: kernels::conv_out_extent(ih, k, stride, pad),
            out_w: kernels::conv_out_extent(iw, k, stride, pad),
        };
        let mut out = Tensor::zeros(&[bn_, out_ch, dims.out_h, dims.out_w]);
        kernels::conv2d_fwd(x.data(), wt.data(), bt.data(), &dims, out.data_mut());
        out
    };

    let relu = |x: &mut Tensor| {
        for v in x.data_mut() {
            *v = v.max(0.0);
        }
    };

    let mut cur = batch.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let name = format!("layer{i}");
        match &layer.kind {
            LayerKind::Conv2d { stride, pad, .. } => cur = conv(&cur, &name, *stride, *pad),
            LayerKind::BatchNorm2d { ch } => {
                let hw = cur.numel() / (n * ch);
                bn_eval(&mut cur, &name, *ch, hw)?;
            }
            LayerKind::Relu => relu(&mut cur),
            LayerKind::MaxPool2d { window, stride } => {
                let (bn_, ch, ih, iw) = match *cur.shape() {
                    [a, b, c2, d] => (a, b, c2, d),
                    _ => unreachable!(),
                };
                let oh = (ih - window) / stride + 1;
                let ow = (iw - window) / stride + 1;
                let mut out = Tensor::zeros(&[bn_, ch, oh, ow]);
                let mut sw = vec![0usize; out.numel()];
                kernels::maxpool2d_fwd(cur.data(), bn_, ch, ih, iw, *window, *stride, out.data_mut(), &mut sw);
                cur = out;
            }
            LayerKind::Dropout { .. } => {}
            LayerKind::Flatten => {
                let numel = cur.numel();
                cur = cur.reshaped(vec![n, numel / n]);
            }
            LayerKind::Linear { in_dim, out_dim } => {
                let wt = ckpt.param(&format!("{name}.weight"));
                let bt = ckpt.param(&format!("{name}.bias"));
                let mut out = Tensor::zeros(&[n, *out_dim]);
                kernels::linear_fwd(cur.data(), wt.data(), bt.data(), n, *in_dim, *out_dim, out.data_mut());
                cur = out;
            }
            LayerKind::ResBlock { stride, .. } => {
                let (_, _, ih, iw) = match *cur.shape() {
                    [a, b, c2, d] => (a, b, c2, d),
                    _ => unreachable!(),
                };
                let (p1, out_h, out_w) = if *stride == 2 {
                    (resblock_pad(ih), ih / 2, iw / 2)
                } else {
                    (1, ih, iw)
                };
                let mut main = conv(&cur, &format!("{name}.conv1"), *stride, p1);
                {
                    let ch = main.shape()[1];
                    let hw = main.numel() / (n * ch);
                    bn_eval(&mut main, &format!("{name}.bn1"), ch, hw)?;
                }
                relu(&mut main);
                let mut main = conv(&main, &format!("{name}.conv2"), 1, 1);
                {
                    let ch = main.shape()[1];
                    let hw = main.numel() / (n * ch);
                    bn_eval(&mut main, &format!("{name}.bn2"), ch, hw)?;
                }
                let shortcut = if ckpt.params.contains_key(&format!("{name}.proj.weight")) {
                    let mut s = conv(&cur, &format!("{name}.proj"), *stride, 0);
                    let sh = s.shape().to_vec();
                    if sh[2] != out_h || sh[3] != out_w {
                        // crop to the floor-halved extent
                        let mut cropped = Tensor::zeros(&[sh[0], sh[1], out_h, out_w]);
                        {
                            let dst = cropped.data_mut();
                            let src = s.data();
                            for nc in 0..sh[0] * sh[1] {
                                for y in 0..out_h {
                                    let so = nc * sh[2] * sh[3] + y * sh[3];
                                    let do_ = nc * out_h * out_w + y * out_w;
                                    dst[do_..do_ + out_w].copy_from_slice(&src[so..so + out_w]);
                                }
                            }
                        }
                        s = cropped;
                    }
                    let ch = s.shape()[1];
                    let hw = s.numel() / (n * ch);
                    bn_eval(&mut s, &format!("{name}.bnp"), ch, hw)?;
                    s
                } else {
                    cur.clone()
                };
                let mut sum = main.add(&shortcut);
                relu(&mut sum);
                cur = sum;
            }
        }
    }
    let logits = cur;
    let mut probs = Tensor::zeros(logits.shape());
    kernels::softmax_fwd(logits.data(), n, spec.num_classes, probs.data_mut());
    Ok((probs, logits))
}
