//! Conditioning inputs: time encoding, windowed audio/expression vectors,
//! and the channel-stacked frame input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{silu_backward_slice, silu_slice, Linear, Parameter, Tensor};
use crate::synthworld::Frame;

/// Sinusoidal encoding with interleaved `(sin, cos)` pairs, so step 0 maps
/// to `[0, 1, 0, 1, …]`.
pub fn sinusoidal_encoding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

/// `linear → SiLU → linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(n_in: usize, hidden: usize, n_out: usize, rng: &mut R) -> Self {
        Mlp {
            l1: Linear::new(n_in, hidden, rng),
            l2: Linear::new(hidden, n_out, rng),
        }
    }

    pub fn n_in(&self) -> usize {
        self.l1.n_in()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let pre = self.l1.forward(x);
        let act = silu_slice(&pre);
        let y = self.l2.forward(&act);
        (
            y,
            MlpCache {
                x: x.to_vec(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let d_act = self.l2.backward(&cache.act, dy);
        let d_pre = silu_backward_slice(&cache.pre, &d_act);
        self.l1.backward(&cache.x, &d_pre)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
    }
}

/// The four frames stacked along channels as `noisy‖identity‖prev2‖prev1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub noisy: Frame,
    pub identity: Frame,
    pub motion_prev2: Frame,
    pub motion_prev1: Frame,
}

pub fn assemble_input(f: &FrameInput) -> Result<Tensor> {
    let shape = f.noisy.shape();
    for other in [&f.identity, &f.motion_prev2, &f.motion_prev1] {
        if other.shape() != shape {
            return Err(Error::Dimension {
                op: "assemble_input",
                left: shape.to_vec(),
                right: other.shape().to_vec(),
            });
        }
    }
    Tensor::concat_channels(&[&f.noisy, &f.identity, &f.motion_prev2, &f.motion_prev1])
}

/// Step index plus windows of `2n+1` audio and expression vectors centred on
/// the current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub t: usize,
    pub audio: Vec<Vec<f64>>,
    pub expr: Vec<Vec<f64>>,
}

/// Vectors `seq[i−n ..= i+n]`, replicating the first and last entries past
/// the ends.
pub fn window(seq: &[Vec<f64>], i: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    if seq.is_empty() {
        return Err(Error::config("conditioning window over an empty sequence"));
    }
    let last = seq.len() as isize - 1;
    Ok((-(n as isize)..=n as isize)
        .map(|o| seq[(i as isize + o).clamp(0, last) as usize].clone())
        .collect())
}

impl ConditioningBundle {
    pub fn from_sequences(
        t: usize,
        audio: &[Vec<f64>],
        expr: &[Vec<f64>],
        i: usize,
        audio_window: usize,
        expr_window: usize,
    ) -> Result<Self> {
        Ok(ConditioningBundle {
            t,
            audio: window(audio, i, audio_window)?,
            expr: window(expr, i, expr_window)?,
        })
    }

    pub fn audio_flat(&self) -> Vec<f64> {
        self.audio.concat()
    }

    pub fn expr_flat(&self) -> Vec<f64> {
        self.expr.concat()
    }
}
