use super::tensor::{Parameter, Tensor};

/// Anything that owns named parameters. Visitation order must be stable:
/// optimizer state and checkpoints are keyed by it.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn scale_grads(&mut self, s: f64) {
        self.visit_params_mut(&mut |_, p| p.grad.data_mut().iter_mut().for_each(|g| *g *= s));
    }

    fn named_values(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name, p.value.clone())));
        out
    }

    /// Flattened gradients in visitation order.
    fn flat_grads(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, p| out.push(p.grad.clone()));
        out
    }

    fn flat_values(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, p| out.push(p.value.clone()));
        out
    }

    fn set_values(&mut self, values: &[Tensor]) {
        let mut i = 0;
        self.visit_params_mut(&mut |_, p| {
            p.value = values[i].clone();
            i += 1;
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update<M: Module + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_params_mut(&mut |_, p| {
            if m_all.len() <= idx {
                m_all.push(vec![0.0; p.len()]);
                v_all.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            let g = p.grad.data();
            let val = p.value.data_mut();
            for i in 0..val.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                val[i] -= lr * mh / (vh.sqrt() + eps);
            }
            idx += 1;
        });
    }

    /// Moment buffers in visitation order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(cfg: AdamConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Adam { cfg, step, m, v }
    }
}
