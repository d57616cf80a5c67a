use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation over a fixed list of parameter slots.
///
/// `step` descends. Ascent callers pass negated gradients.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { cfg, t: 0, m, v }
    }

    pub fn for_params(cfg: AdamConfig, params: &Params) -> Self {
        Self::new(cfg, params.iter().map(|(_, t)| t.len()))
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, values: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(values.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (slot, (x, g)) in values.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..x.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn step_params(&mut self, params: &mut Params, grads: &[Tensor<f32>]) {
        let gs: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
        let mut vs: Vec<&mut [f32]> = params.iter_mut().map(|(_, t)| t.data_mut()).collect();
        self.step(&mut vs, &gs);
    }
}
