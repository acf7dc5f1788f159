//! Sequence-level and frame-level discriminators.

use rand::Rng;

use super::sequence::{EmotionLabel, ExpressionVector};
use super::GanConfig;
use crate::numerics::{
    leaky_relu_backward_slice, leaky_relu_slice, sigmoid, Conv1d, Embedding, Linear, Module, Parameter,
};

/// One temporal block: `leaky(conv(x)) + skip(x)`, where `skip` is a 1×1
/// convolution when the channel count changes and the identity otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalBlock {
    pub conv: Conv1d,
    pub skip: Option<Conv1d>,
    c_in: usize,
}

impl TemporalBlock {
    fn c_out(&self) -> usize {
        self.conv.weight.value.shape()[0]
    }
}

/// Dilated temporal convolution stack, mean pool, and two heads: a
/// label-conditioned real/fake score and an 8-way emotion classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDiscriminator {
    pub label_embed: Embedding,
    pub blocks: Vec<TemporalBlock>,
    pub score_head: Linear,
    pub class_head: Linear,
    expr_dim: usize,
}

#[derive(Clone, Debug)]
pub struct GlobalOutput {
    pub score: f64,
    pub class_logits: Vec<f64>,
    cache: GlobalCache,
}

#[derive(Clone, Debug)]
struct GlobalCache {
    label: EmotionLabel,
    len: usize,
    /// Input of every block followed by the final activation.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    head_in: Vec<f64>,
}

/// Channel-major `[K × N]` layout of a sequence.
fn to_channels(frames: &[ExpressionVector]) -> (Vec<f64>, usize) {
    let n = frames.len();
    let k = frames.first().map_or(0, Vec::len);
    let mut x = vec![0.0; k * n];
    for (i, f) in frames.iter().enumerate() {
        for (c, v) in f.iter().enumerate() {
            x[c * n + i] = *v;
        }
    }
    (x, k)
}

fn from_channels(x: &[f64], k: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..k).map(|c| x[c * n + i]).collect()).collect()
}

impl GlobalDiscriminator {
    pub fn new<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Self {
        let ch = cfg.disc_channels;
        let mut blocks = Vec::with_capacity(cfg.tcn_levels);
        let mut c_in = cfg.expr_dim;
        for level in 0..cfg.tcn_levels {
            let (dilation, causal) = if cfg.use_tcn { (1usize << level, true) } else { (1, false) };
            let conv = Conv1d::new(c_in, ch, cfg.tcn_kernel, dilation, causal, rng);
            let skip = (c_in != ch).then(|| Conv1d::new(c_in, ch, 1, 1, true, rng));
            blocks.push(TemporalBlock { conv, skip, c_in });
            c_in = ch;
        }
        GlobalDiscriminator {
            label_embed: Embedding::new(EmotionLabel::COUNT, cfg.label_dim, rng),
            blocks,
            score_head: Linear::new(c_in + cfg.label_dim, 1, rng),
            class_head: Linear::new(c_in, EmotionLabel::COUNT, rng),
            expr_dim: cfg.expr_dim,
        }
    }

    fn pooled_width(&self) -> usize {
        self.blocks.last().map_or(self.expr_dim, TemporalBlock::c_out)
    }

    pub fn forward(&self, frames: &[ExpressionVector], label: EmotionLabel) -> GlobalOutput {
        let n = frames.len();
        let (mut x, _) = to_channels(frames);
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let z = b.conv.forward(&x, b.c_in, n).expect("temporal block shape");
            let mut y = leaky_relu_slice(&z);
            let skip = match &b.skip {
                Some(s) => s.forward(&x, b.c_in, n).expect("skip shape"),
                None => x.clone(),
            };
            y.iter_mut().zip(&skip).for_each(|(a, s)| *a += s);
            acts.push(std::mem::replace(&mut x, y));
            pre.push(z);
        }
        let c = self.pooled_width();
        let pooled: Vec<f64> = (0..c).map(|ch| x[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
        acts.push(x);
        let mut head_in = pooled.clone();
        head_in.extend_from_slice(self.label_embed.forward(label.index()));
        let score = sigmoid(self.score_head.forward(&head_in)[0]);
        let class_logits = self.class_head.forward(&pooled);
        GlobalOutput {
            score,
            class_logits,
            cache: GlobalCache {
                label,
                len: n,
                acts,
                pre,
                head_in,
            },
        }
    }

    /// Accumulates parameter gradients for upstream `∂L/∂score` and
    /// `∂L/∂logits`; returns `∂L/∂E` per frame.
    pub fn backward(&mut self, out: &GlobalOutput, d_score: f64, d_logits: &[f64]) -> Vec<Vec<f64>> {
        let cache = &out.cache;
        let n = cache.len;
        let c = self.pooled_width();
        let d_logit = d_score * out.score * (1.0 - out.score);
        let d_head = self.score_head.backward(&cache.head_in, &[d_logit]);
        self.label_embed.backward(cache.label.index(), &d_head[c..]);
        let mut d_pool = d_head[..c].to_vec();
        let d_cls = self.class_head.backward(&cache.head_in[..c], d_logits);
        d_pool.iter_mut().zip(&d_cls).for_each(|(a, b)| *a += b);
        let mut dx: Vec<f64> = d_pool.iter().flat_map(|&g| std::iter::repeat_n(g / n as f64, n)).collect();
        for (bi, b) in self.blocks.iter_mut().enumerate().rev() {
            let x = &cache.acts[bi];
            let dz = leaky_relu_backward_slice(&cache.pre[bi], &dx);
            let mut d_in = b.conv.backward(x, b.c_in, n, &dz).expect("temporal block shape");
            match &mut b.skip {
                Some(s) => {
                    let ds = s.backward(x, b.c_in, n, &dx).expect("skip shape");
                    d_in.iter_mut().zip(&ds).for_each(|(a, s)| *a += s);
                }
                None => d_in.iter_mut().zip(&dx).for_each(|(a, s)| *a += s),
            }
            dx = d_in;
        }
        from_channels(&dx, self.expr_dim, n)
    }
}

impl Module for GlobalDiscriminator {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.label_embed.visit("dg.label", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit(&format!("dg.block{i}.conv"), f);
            if let Some(s) = &b.skip {
                s.visit(&format!("dg.block{i}.skip"), f);
            }
        }
        self.score_head.visit("dg.score", f);
        self.class_head.visit("dg.class", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.label_embed.visit_mut("dg.label", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_mut(&format!("dg.block{i}.conv"), f);
            if let Some(s) = &mut b.skip {
                s.visit_mut(&format!("dg.block{i}.skip"), f);
            }
        }
        self.score_head.visit_mut("dg.score", f);
        self.class_head.visit_mut("dg.class", f);
    }
}

/// Per-frame MLP discriminator. The output layer starts at zero, so every
/// score is exactly 0.5 before training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDiscriminator {
    pub label_embed: Embedding,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct LocalOutput {
    pub score: f64,
    label: EmotionLabel,
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl LocalDiscriminator {
    pub fn new<R: Rng + ?Sized>(cfg: &GanConfig, rng: &mut R) -> Self {
        LocalDiscriminator {
            label_embed: Embedding::new(EmotionLabel::COUNT, cfg.label_dim, rng),
            hidden: Linear::new(cfg.expr_dim + cfg.label_dim, cfg.hidden_dim, rng),
            out: Linear::zeroed(cfg.hidden_dim, 1),
        }
    }

    pub fn forward(&self, e: &[f64], label: EmotionLabel) -> LocalOutput {
        let mut input = e.to_vec();
        input.extend_from_slice(self.label_embed.forward(label.index()));
        let pre = self.hidden.forward(&input);
        let act = leaky_relu_slice(&pre);
        let score = sigmoid(self.out.forward(&act)[0]);
        LocalOutput {
            score,
            label,
            input,
            pre,
            act,
        }
    }

    pub fn score(&self, e: &[f64], label: EmotionLabel) -> f64 {
        self.forward(e, label).score
    }

    /// Returns `∂L/∂e`.
    pub fn backward(&mut self, out: &LocalOutput, d_score: f64) -> Vec<f64> {
        let d_logit = d_score * out.score * (1.0 - out.score);
        let d_act = self.out.backward(&out.act, &[d_logit]);
        let d_pre = leaky_relu_backward_slice(&out.pre, &d_act);
        let d_in = self.hidden.backward(&out.input, &d_pre);
        let k = out.input.len() - self.label_embed.dim();
        self.label_embed.backward(out.label.index(), &d_in[k..]);
        d_in[..k].to_vec()
    }
}

impl Module for LocalDiscriminator {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.label_embed.visit("dl.label", f);
        self.hidden.visit("dl.hidden", f);
        self.out.visit("dl.out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.label_embed.visit_mut("dl.label", f);
        self.hidden.visit_mut("dl.hidden", f);
        self.out.visit_mut("dl.out", f);
    }
}
