//! Adam with bias correction.

use std::collections::BTreeMap;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter name. One shared step counter — all
/// parameters are updated together each step.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam { cfg, step: 0, state: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared timestep; call once per batch before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// w ← w − lr·m̂/(√v̂ + ε) with bias-corrected moments.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert!(self.step > 0, "begin_step must run before update");
        assert_eq!(param.shape(), grad.shape(), "adam: param/grad shape mismatch");
        let ent = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
        });
        assert_eq!(ent.m.len(), param.numel(), "adam: state shape changed for {name}");
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((w, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(ent.m.iter_mut().zip(ent.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
