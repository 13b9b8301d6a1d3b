//! Attribution maps: five standard methods (input×gradient, integrated
//! gradients, a rescale-rule modified backward, gradient-weighted class
//! activations, and its guided product) plus discriminative variants that
//! use the counterfactual image as the baseline, and the residual/random
//! baselines.
//!
//! All gradients are of the softmax probability of the target class, taken
//! on an eval-mode forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{ReluMode, Tensor, Var};
use crate::imgproc;
use crate::model::{forward, Checkpoint, ForwardPass, Mode, ModelError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodId {
    Ingrads,
    DIngrads,
    Ig,
    DIg,
    Dl,
    DDl,
    Gc,
    DGc,
    Ggc,
    DGgc,
    Residual,
    Random,
}

impl MethodId {
    pub const ALL: [MethodId; 12] = [
        MethodId::Ingrads,
        MethodId::DIngrads,
        MethodId::Ig,
        MethodId::DIg,
        MethodId::Dl,
        MethodId::DDl,
        MethodId::Gc,
        MethodId::DGc,
        MethodId::Ggc,
        MethodId::DGgc,
        MethodId::Residual,
        MethodId::Random,
    ];

    /// The five standard/discriminative pairings, for D-vs-S comparisons.
    pub const PAIRINGS: [(MethodId, MethodId); 5] = [
        (MethodId::Ingrads, MethodId::DIngrads),
        (MethodId::Ig, MethodId::DIg),
        (MethodId::Dl, MethodId::DDl),
        (MethodId::Gc, MethodId::DGc),
        (MethodId::Ggc, MethodId::DGgc),
    ];

    pub fn is_discriminative(self) -> bool {
        matches!(
            self,
            MethodId::DIngrads | MethodId::DIg | MethodId::DDl | MethodId::DGc | MethodId::DGgc
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Ingrads => "ingrads",
            MethodId::DIngrads => "d-ingrads",
            MethodId::Ig => "ig",
            MethodId::DIg => "d-ig",
            MethodId::Dl => "dl",
            MethodId::DDl => "d-dl",
            MethodId::Gc => "gc",
            MethodId::DGc => "d-gc",
            MethodId::Ggc => "ggc",
            MethodId::DGgc => "d-ggc",
            MethodId::Residual => "residual",
            MethodId::Random => "random",
        }
    }
}

impl std::str::FromStr for MethodId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodId::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A per-pixel importance map at input resolution.
#[derive(Clone, Debug)]
pub struct AttributionMap {
    pub method: MethodId,
    pub target_class: Option<usize>,
    /// (h, w), finite everywhere.
    pub data: Tensor,
    /// Signed maps must be reduced (absolute value) before thresholding.
    pub signed: bool,
}

impl AttributionMap {
    fn new(method: MethodId, target_class: Option<usize>, data: Tensor, signed: bool) -> AttributionMap {
        debug_assert!(data.is_finite(), "{method}: non-finite attribution");
        AttributionMap { method, target_class, data, signed }
    }

    /// Magnitude map used for mask thresholding.
    pub fn magnitude(&self) -> Tensor {
        if self.signed {
            self.data.abs()
        } else {
            self.data.clone()
        }
    }
}

fn spatial(t: &Tensor) -> Tensor {
    // (1,h,w) or (n=1,1,h,w) → (h,w)
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    t.reshaped(vec![h, w])
}

fn as_batch(x: &Tensor) -> Tensor {
    match *x.shape() {
        [c, h, w] => x.reshaped(vec![1, c, h, w]),
        [_, _, _, _] => x.clone(),
        ref s => panic!("expected an image, got {s:?}"),
    }
}

fn check_class(ckpt: &Checkpoint, class: usize) -> Result<(), ModelError> {
    if class >= ckpt.spec.num_classes {
        return Err(ModelError::BadInput(format!(
            "class {class} out of range for a {}-class model",
            ckpt.spec.num_classes
        )));
    }
    Ok(())
}

/// One-hot probability seed for row `row` of an (n, k) output.
fn prob_seed(n: usize, k: usize, row: usize, class: usize) -> Tensor {
    let mut seed = Tensor::zeros(&[n, k]);
    seed.data_mut()[row * k + class] = 1.0;
    seed
}

fn eval_forward(ckpt: &Checkpoint, batch: &Tensor, relu: ReluMode) -> Result<ForwardPass, ModelError> {
    forward(ckpt, batch, Mode::Eval, relu, None)
}

/// ∂p_class/∂x for every image in the batch (eval mode).
fn input_gradient_batch(
    ckpt: &Checkpoint,
    batch: &Tensor,
    class: usize,
    relu: ReluMode,
) -> Result<Tensor, ModelError> {
    check_class(ckpt, class)?;
    let fp = eval_forward(ckpt, batch, relu)?;
    let n = batch.shape()[0];
    let k = ckpt.spec.num_classes;
    let mut seed = Tensor::zeros(&[n, k]);
    for row in 0..n {
        seed.data_mut()[row * k + class] = 1.0;
    }
    let store = fp.tape.backward(fp.probs, &seed)?;
    Ok(store.grad(fp.input).expect("input participates").clone())
}

/// ∂p_class/∂x for a single image.
pub fn input_gradient(
    ckpt: &Checkpoint,
    x: &Tensor,
    class: usize,
    relu: ReluMode,
) -> Result<Tensor, ModelError> {
    let g = input_gradient_batch(ckpt, &as_batch(x), class, relu)?;
    Ok(spatial(&g))
}

/// |∇p_i(x) ⊙ x|
pub fn ingrads(ckpt: &Checkpoint, x: &Tensor, class_i: usize) -> Result<AttributionMap, ModelError> {
    let g = input_gradient(ckpt, x, class_i, ReluMode::Standard)?;
    let map = g.mul(&spatial(x)).abs();
    Ok(AttributionMap::new(MethodId::Ingrads, Some(class_i), map, false))
}

/// |∇p_j(x_c) ⊙ (x_c − x_o)|
pub fn d_ingrads(
    ckpt: &Checkpoint,
    x_o: &Tensor,
    x_c: &Tensor,
    class_j: usize,
) -> Result<AttributionMap, ModelError> {
    let g = input_gradient(ckpt, x_c, class_j, ReluMode::Standard)?;
    let map = g.mul(&spatial(x_c).sub(&spatial(x_o))).abs();
    Ok(AttributionMap::new(MethodId::DIngrads, Some(class_j), map, false))
}

/// How many interpolation points share one taped forward pass.
const IG_CHUNK: usize = 64;

fn ig_core(
    ckpt: &Checkpoint,
    x: &Tensor,
    baseline: &Tensor,
    class: usize,
    steps: usize,
) -> Result<Tensor, ModelError> {
    assert!(steps >= 1, "integrated gradients needs at least one step");
    check_class(ckpt, class)?;
    let x = as_batch(x);
    let x0 = as_batch(baseline);
    if x.shape() != x0.shape() || x.shape()[0] != 1 {
        return Err(ModelError::BadInput("input/baseline must be single images of equal shape".into()));
    }
    let diff = x.sub(&x0);
    let px = x.numel();
    let mut mean_grad = vec![0.0; px];
    let mut t = 0usize;
    while t < steps {
        let chunk = (steps - t).min(IG_CHUNK);
        // midpoint quadrature: α = (t + 0.5) / steps
        let mut batch = Tensor::zeros(&[chunk, x.shape()[1], x.shape()[2], x.shape()[3]]);
        for (b, tt) in (t..t + chunk).enumerate() {
            let alpha = (tt as f64 + 0.5) / steps as f64;
            let dst = &mut batch.data_mut()[b * px..(b + 1) * px];
            for (d, (&xv, &dv)) in dst.iter_mut().zip(x0.data().iter().zip(diff.data())) {
                *d = xv + alpha * dv;
            }
        }
        let grads = input_gradient_batch(ckpt, &batch, class, ReluMode::Standard)?;
        for b in 0..chunk {
            for (m, &g) in mean_grad.iter_mut().zip(&grads.data()[b * px..(b + 1) * px]) {
                *m += g;
            }
        }
        t += chunk;
    }
    let inv = 1.0 / steps as f64;
    let map: Vec<f64> = diff
        .data()
        .iter()
        .zip(&mean_grad)
        .map(|(&d, &g)| d * g * inv)
        .collect();
    Ok(Tensor::new(vec![x.shape()[2], x.shape()[3]], map))
}

/// (x − x₀) ⊙ mean path gradient of p_i, midpoint rule. Zero baseline when
/// none is given. Signed.
pub fn integrated_gradients(
    ckpt: &Checkpoint,
    x: &Tensor,
    baseline: Option<&Tensor>,
    class_i: usize,
    steps: usize,
) -> Result<AttributionMap, ModelError> {
    let zero;
    let x0 = match baseline {
        Some(b) => b,
        None => {
            zero = Tensor::zeros(x.shape());
            &zero
        }
    };
    let map = ig_core(ckpt, x, x0, class_i, steps)?;
    Ok(AttributionMap::new(MethodId::Ig, Some(class_i), map, true))
}

/// Path from x_o to x_c, target class j. Signed.
pub fn d_integrated_gradients(
    ckpt: &Checkpoint,
    x_o: &Tensor,
    x_c: &Tensor,
    class_j: usize,
    steps: usize,
) -> Result<AttributionMap, ModelError> {
    let map = ig_core(ckpt, x_c, x_o, class_j, steps)?;
    Ok(AttributionMap::new(MethodId::DIg, Some(class_j), map, true))
}

/// Modified input gradient under the rescale rule (ReLU multipliers are
/// Δout/Δin between the input's tape and the baseline's tape). Seeding on
/// the logit instead of the probability makes the summation identity exact
/// for affine+ReLU networks, which the tests exploit.
pub(crate) fn rescale_gradient(
    ckpt: &Checkpoint,
    x: &Tensor,
    baseline: &Tensor,
    class: usize,
    seed_on_logit: bool,
) -> Result<Tensor, ModelError> {
    check_class(ckpt, class)?;
    let xb = as_batch(x);
    let bb = as_batch(baseline);
    if xb.shape() != bb.shape() || xb.shape()[0] != 1 {
        return Err(ModelError::BadInput("input/baseline must be single images of equal shape".into()));
    }
    let fp = eval_forward(ckpt, &xb, ReluMode::Standard)?;
    let fp0 = eval_forward(ckpt, &bb, ReluMode::Standard)?;
    let k = ckpt.spec.num_classes;
    let seed = prob_seed(1, k, 0, class);
    let store = if seed_on_logit {
        fp.tape.backward_rescale(fp.logits, &seed, &fp0.tape)?
    } else {
        fp.tape.backward_rescale(fp.probs, &seed, &fp0.tape)?
    };
    Ok(store.grad(fp.input).expect("input participates").clone())
}

/// (x − baseline) ⊙ rescale-rule gradient of p_i at x. Signed.
pub fn deeplift(
    ckpt: &Checkpoint,
    x: &Tensor,
    baseline: Option<&Tensor>,
    class_i: usize,
) -> Result<AttributionMap, ModelError> {
    let zero;
    let x0 = match baseline {
        Some(b) => b,
        None => {
            zero = Tensor::zeros(x.shape());
            &zero
        }
    };
    let g = rescale_gradient(ckpt, x, x0, class_i, false)?;
    let map = spatial(&g).mul(&spatial(x).sub(&spatial(x0)));
    Ok(AttributionMap::new(MethodId::Dl, Some(class_i), map, true))
}

/// Baseline x_o, input x_c, class j. Signed.
pub fn d_deeplift(
    ckpt: &Checkpoint,
    x_o: &Tensor,
    x_c: &Tensor,
    class_j: usize,
) -> Result<AttributionMap, ModelError> {
    let g = rescale_gradient(ckpt, x_c, x_o, class_j, false)?;
    let map = spatial(&g).mul(&spatial(x_c).sub(&spatial(x_o)));
    Ok(AttributionMap::new(MethodId::DDl, Some(class_j), map, true))
}

/// ∇p_class with guided ReLU backward (negative upstream contributions
/// dropped at every ReLU). An ingredient of the guided products, not a
/// standalone method.
pub fn guided_backprop(ckpt: &Checkpoint, x: &Tensor, class: usize) -> Result<Tensor, ModelError> {
    input_gradient(ckpt, x, class, ReluMode::Guided)
}

struct Capture {
    /// Activations (k, h, w) of the designated layer.
    acts: Tensor,
    /// ∂p_class/∂activations, same shape.
    grads: Tensor,
}

fn capture_with_grads(ckpt: &Checkpoint, x: &Tensor, class: usize) -> Result<Capture, ModelError> {
    check_class(ckpt, class)?;
    let fp = eval_forward(ckpt, &as_batch(x), ReluMode::Standard)?;
    let var = capture_var(ckpt, &fp)?;
    let seed = prob_seed(1, ckpt.spec.num_classes, 0, class);
    let store = fp.tape.backward(fp.probs, &seed)?;
    let acts = drop_batch(fp.tape.value(var));
    let grads = drop_batch(
        store
            .grad(var)
            .ok_or_else(|| ModelError::BadInput("capture layer does not feed the output".into()))?,
    );
    Ok(Capture { acts, grads })
}

fn capture_var(ckpt: &Checkpoint, fp: &ForwardPass) -> Result<Var, ModelError> {
    fp.captures
        .get(&ckpt.spec.gradcam_layer)
        .copied()
        .ok_or_else(|| ModelError::BadInput(format!("no capture layer named '{}'", ckpt.spec.gradcam_layer)))
}

fn drop_batch(t: &Tensor) -> Tensor {
    let s = t.shape();
    debug_assert_eq!(s[0], 1);
    t.reshaped(s[1..].to_vec())
}

fn project_to_input(map: &[f64], h: usize, w: usize, size: usize) -> Tensor {
    let up = if (h, w) == (size, size) {
        map.to_vec()
    } else {
        imgproc::bilinear_upscale(map, h, w, size, size)
    };
    Tensor::new(vec![size, size], up)
}

/// ReLU(Σ_k α_k C_k) with α_k the spatial mean of ∂p_i/∂C_k, projected to
/// input resolution. Nonnegative.
pub fn gradcam(ckpt: &Checkpoint, x: &Tensor, class_i: usize) -> Result<AttributionMap, ModelError> {
    let cap = capture_with_grads(ckpt, x, class_i)?;
    let (k, h, w) = dims3(&cap.acts);
    let hw = h * w;
    let mut pooled = vec![0.0; hw];
    for c in 0..k {
        let alpha: f64 = cap.grads.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (p, &a) in pooled.iter_mut().zip(&cap.acts.data()[c * hw..(c + 1) * hw]) {
            *p += alpha * a;
        }
    }
    for p in &mut pooled {
        *p = p.max(0.0);
    }
    let map = project_to_input(&pooled, h, w, ckpt.spec.input_size);
    Ok(AttributionMap::new(MethodId::Gc, Some(class_i), map, false))
}

/// |Σ_k ∂p_j/∂C_k|_{x_c} ⊙ (C_k(x_c) − C_k(x_o))|, projected to input
/// resolution. Nonnegative.
pub fn d_gradcam(
    ckpt: &Checkpoint,
    x_o: &Tensor,
    x_c: &Tensor,
    class_j: usize,
) -> Result<AttributionMap, ModelError> {
    let cap_c = capture_with_grads(ckpt, x_c, class_j)?;
    let fp_o = eval_forward(ckpt, &as_batch(x_o), ReluMode::Standard)?;
    let acts_o = drop_batch(fp_o.tape.value(capture_var(ckpt, &fp_o)?));
    let (k, h, w) = dims3(&cap_c.acts);
    let hw = h * w;
    let mut summed = vec![0.0; hw];
    for c in 0..k {
        let g = &cap_c.grads.data()[c * hw..(c + 1) * hw];
        let ac = &cap_c.acts.data()[c * hw..(c + 1) * hw];
        let ao = &acts_o.data()[c * hw..(c + 1) * hw];
        for i in 0..hw {
            summed[i] += g[i] * (ac[i] - ao[i]);
        }
    }
    for v in &mut summed {
        *v = v.abs();
    }
    let map = project_to_input(&summed, h, w, ckpt.spec.input_size);
    Ok(AttributionMap::new(MethodId::DGc, Some(class_j), map, false))
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [k, h, w] => (k, h, w),
        [h, w] => (1, h, w),
        ref s => panic!("expected activations, got {s:?}"),
    }
}

/// GC ⊙ GBP, both at x for class i. Signed (GBP carries sign).
pub fn guided_gradcam(ckpt: &Checkpoint, x: &Tensor, class_i: usize) -> Result<AttributionMap, ModelError> {
    let gc = gradcam(ckpt, x, class_i)?;
    let gbp = input_gradient(ckpt, x, class_i, ReluMode::Guided)?;
    let map = gc.data.mul(&gbp);
    Ok(AttributionMap::new(MethodId::Ggc, Some(class_i), map, true))
}

/// D-GC ⊙ GBP(x_o) — the guided gradient is taken at the real image.
pub fn d_guided_gradcam(
    ckpt: &Checkpoint,
    x_o: &Tensor,
    x_c: &Tensor,
    class_j: usize,
) -> Result<AttributionMap, ModelError> {
    let dgc = d_gradcam(ckpt, x_o, x_c, class_j)?;
    let gbp = input_gradient(ckpt, x_o, class_j, ReluMode::Guided)?;
    let map = dgc.data.mul(&gbp);
    Ok(AttributionMap::new(MethodId::DGgc, Some(class_j), map, true))
}

/// |x_c − x_o|
pub fn residual_map(x_o: &Tensor, x_c: &Tensor) -> AttributionMap {
    let map = spatial(x_c).sub(&spatial(x_o)).abs();
    AttributionMap::new(MethodId::Residual, None, map, false)
}

/// Seeded uniform [0,1) noise.
pub fn random_map(h: usize, w: usize, seed: u64) -> AttributionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    AttributionMap::new(MethodId::Random, None, Tensor::new(vec![h, w], data), false)
}

/// Everything `attribute` needs beyond the images.
#[derive(Clone, Copy, Debug)]
pub struct AttributionConfig {
    pub ig_steps: usize,
    /// Seed for the random baseline (derived per pair by the caller).
    pub random_seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig { ig_steps: 50, random_seed: 0 }
    }
}

/// Dispatch one method on a real/counterfactual pair. Standard methods see
/// the real image with its class; discriminative ones use the counterfactual
/// as baseline/expansion point with the counterfactual class.
pub fn attribute(
    ckpt: &Checkpoint,
    method: MethodId,
    x_o: &Tensor,
    x_c: &Tensor,
    class_i: usize,
    class_j: usize,
    cfg: &AttributionConfig,
) -> Result<AttributionMap, ModelError> {
    match method {
        MethodId::Ingrads => ingrads(ckpt, x_o, class_i),
        MethodId::DIngrads => d_ingrads(ckpt, x_o, x_c, class_j),
        MethodId::Ig => integrated_gradients(ckpt, x_o, None, class_i, cfg.ig_steps),
        MethodId::DIg => d_integrated_gradients(ckpt, x_o, x_c, class_j, cfg.ig_steps),
        MethodId::Dl => deeplift(ckpt, x_o, None, class_i),
        MethodId::DDl => d_deeplift(ckpt, x_o, x_c, class_j),
        MethodId::Gc => gradcam(ckpt, x_o, class_i),
        MethodId::DGc => d_gradcam(ckpt, x_o, x_c, class_j),
        MethodId::Ggc => guided_gradcam(ckpt, x_o, class_i),
        MethodId::DGgc => d_guided_gradcam(ckpt, x_o, x_c, class_j),
        MethodId::Residual => Ok(residual_map(x_o, x_c)),
        MethodId::Random => {
            let s = x_o.shape();
            Ok(random_map(s[s.len() - 2], s[s.len() - 1], cfg.random_seed))
        }
    }
}
