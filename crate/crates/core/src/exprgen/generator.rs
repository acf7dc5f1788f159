//! Autoregressive recurrent generator: each step consumes the previous
//! output, the label embedding and a per-sequence noise vector.

use rand::Rng;

use super::sequence::{EmotionLabel, ExpressionVector, EXPRESSION_CLAMP};
use super::GanConfig;
use crate::numerics::{sigmoid, Embedding, Linear, Module, Parameter, Tensor};

/// Single-layer gated recurrent cell with gates ordered input, forget,
/// candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    /// `[4H × (I+H)]`
    pub weight: Parameter,
    pub bias: Parameter,
    input: usize,
    hidden: usize,
}

#[derive(Clone, Debug)]
struct LstmStep {
    xh: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let fan = input + hidden;
        let std = (1.0 / fan as f64).sqrt();
        let mut bias = vec![0.0; 4 * hidden];
        // forget gate starts open
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        LstmCell {
            weight: Parameter::new(Tensor::randn(&[4 * hidden, fan], std, rng)),
            bias: Parameter::new(Tensor::from_vec(bias)),
            input,
            hidden,
        }
    }

    fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, LstmStep) {
        let hd = self.hidden;
        let fan = self.input + hd;
        let mut xh = Vec::with_capacity(fan);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h_prev);
        let w = self.weight.value.data();
        let mut gates: Vec<f64> = self.bias.value.data().to_vec();
        for (r, g) in gates.iter_mut().enumerate() {
            let row = &w[r * fan..(r + 1) * fan];
            *g += row.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>();
        }
        for (r, g) in gates.iter_mut().enumerate() {
            *g = if (2 * hd..3 * hd).contains(&r) { g.tanh() } else { sigmoid(*g) };
        }
        let mut c = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for j in 0..hd {
            c[j] = gates[hd + j] * c_prev[j] + gates[j] * gates[2 * hd + j];
            tanh_c[j] = c[j].tanh();
            h[j] = gates[3 * hd + j] * tanh_c[j];
        }
        (
            h,
            LstmStep {
                xh,
                c_prev: c_prev.to_vec(),
                gates,
                c,
                tanh_c,
            },
        )
    }

    /// Returns `(dx, dh_prev, dc_prev)` and accumulates parameter gradients.
    fn step_backward(&mut self, st: &LstmStep, dh: &[f64], dc_in: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let fan = self.input + hd;
        let g = &st.gates;
        let mut dz = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, cand, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
            let dc = dc_in[j] + dh[j] * o * (1.0 - st.tanh_c[j] * st.tanh_c[j]);
            dz[3 * hd + j] = dh[j] * st.tanh_c[j] * o * (1.0 - o);
            dz[j] = dc * cand * i * (1.0 - i);
            dz[2 * hd + j] = dc * i * (1.0 - cand * cand);
            dz[hd + j] = dc * st.c_prev[j] * f * (1.0 - f);
            dc_prev[j] = dc * f;
        }
        let _ = &st.c;
        let w = self.weight.value.data();
        let mut dxh = vec![0.0; fan];
        {
            let wg = self.weight.grad.data_mut();
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[r * fan..(r + 1) * fan];
                let grow = &mut wg[r * fan..(r + 1) * fan];
                for k in 0..fan {
                    grow[k] += d * st.xh[k];
                    dxh[k] += d * row[k];
                }
            }
        }
        self.bias.accumulate(&dz);
        let dh_prev = dxh.split_off(self.input);
        (dxh, dh_prev, dc_prev)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub label_embed: Embedding,
    pub cell: LstmCell,
    pub out: Linear,
    expr_dim: usize,
    noise_dim: usize,
}

/// Intermediate values of one rollout, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct RolloutCache {
    label: EmotionLabel,
    steps: Vec<LstmStep>,
    hidden: Vec<Vec<f64>>,
    pre_clamp: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Self {
        let input = cfg.expr_dim + cfg.label_dim + cfg.noise_dim;
        Generator {
            label_embed: Embedding::new(EmotionLabel::COUNT, cfg.label_dim, rng),
            cell: LstmCell::new(input, cfg.hidden_dim, rng),
            out: Linear::new(cfg.hidden_dim, cfg.expr_dim, rng),
            expr_dim: cfg.expr_dim,
            noise_dim: cfg.noise_dim,
        }
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Rolls out `n` frames starting from a zero previous frame.
    pub fn rollout(&self, label: EmotionLabel, z: &[f64], n: usize) -> (Vec<ExpressionVector>, RolloutCache) {
        assert_eq!(z.len(), self.noise_dim, "noise vector length");
        let hd = self.cell.hidden;
        let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
        let mut prev = vec![0.0; self.expr_dim];
        let emb = self.label_embed.forward(label.index()).to_vec();
        let mut cache = RolloutCache {
            label,
            steps: Vec::with_capacity(n),
            hidden: Vec::with_capacity(n),
            pre_clamp: Vec::with_capacity(n),
        };
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = prev.clone();
            x.extend_from_slice(&emb);
            x.extend_from_slice(z);
            let (h_new, st) = self.cell.step(&x, &h, &c);
            c = st.c.clone();
            h = h_new;
            let y = self.out.forward(&h);
            let e: Vec<f64> = y.iter().map(|v| v.clamp(-EXPRESSION_CLAMP, EXPRESSION_CLAMP)).collect();
            cache.steps.push(st);
            cache.hidden.push(h.clone());
            cache.pre_clamp.push(y);
            prev = e.clone();
            frames.push(e);
        }
        (frames, cache)
    }

    pub fn generate(&self, label: EmotionLabel, z: &[f64], n: usize) -> Vec<ExpressionVector> {
        self.rollout(label, z, n).0
    }

    /// Backpropagation through time given `d_frames[i] = ∂L/∂ê^(i)`.
    pub fn backward(&mut self, cache: &RolloutCache, d_frames: &[Vec<f64>]) {
        let n = cache.steps.len();
        let hd = self.cell.hidden;
        let k = self.expr_dim;
        let emb_dim = self.label_embed.dim();
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut d_from_next = vec![0.0; k];
        let mut d_emb = vec![0.0; emb_dim];
        for i in (0..n).rev() {
            let mut dy: Vec<f64> = d_frames[i].iter().zip(&d_from_next).map(|(a, b)| a + b).collect();
            for (d, y) in dy.iter_mut().zip(&cache.pre_clamp[i]) {
                if y.abs() > EXPRESSION_CLAMP {
                    *d = 0.0;
                }
            }
            let mut dh = self.out.backward(&cache.hidden[i], &dy);
            dh.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);
            let (dx, dh_prev, dc_prev) = self.cell.step_backward(&cache.steps[i], &dh, &dc_next);
            d_from_next = dx[..k].to_vec();
            d_emb.iter_mut().zip(&dx[k..k + emb_dim]).for_each(|(a, b)| *a += b);
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        self.label_embed.backward(cache.label.index(), &d_emb);
    }
}

impl Module for Generator {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.label_embed.visit("gen.label", f);
        self.cell.visit("gen.cell", f);
        self.out.visit("gen.out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.label_embed.visit_mut("gen.label", f);
        self.cell.visit_mut("gen.cell", f);
        self.out.visit_mut("gen.out", f);
    }
}
