//! Autoregressive clip synthesis: one full ancestral reverse chain per frame,
//! with generated frames fed forward as motion frames.

use serde::{Deserialize, Serialize};

use super::config::ReferenceMode;
use super::data::motion_frames;
use crate::denoiser::{ConditioningBundle, Denoiser, FrameInput};
use crate::diffusion::{p_sample, v_from_raw, NoiseSchedule};
use crate::edit::{mean_expression, SignConvention};
use crate::error::{Error, Result};
use crate::exprgen::{EmotionLabel, ExpressionVector, GanModel};
use crate::numerics::Tensor;
use crate::seed::{derive_seed, rng_for};
use crate::synthworld::{CorpusManifest, FaceBasis, Frame, Prototypes};

/// The identity's neutral face with the mouth closed.
pub fn identity_frame(manifest: &CorpusManifest, identity: usize) -> Result<Frame> {
    let basis = manifest.basis(identity)?;
    basis.render(&vec![0.0; manifest.expr_dim], 0.0)
}

/// Generates one frame per entry of `expr`, conditioned on the audio features
/// and expression coefficients around it. The first two positions use the
/// identity frame as motion frames. Output pixels are clamped to `[0, 1]`.
pub fn sample_clip(
    model: &Denoiser,
    sched: &NoiseSchedule,
    identity: &Frame,
    audio: &[Vec<f64>],
    expr: &[ExpressionVector],
    seed: u64,
) -> Result<Vec<Frame>> {
    if audio.len() != expr.len() || expr.is_empty() {
        return Err(Error::Dimension {
            op: "sample_clip",
            left: vec![audio.len()],
            right: vec![expr.len()],
        });
    }
    let cfg = &model.cfg;
    let refs = model.reference_features(identity)?;
    let mut out: Vec<Frame> = Vec::with_capacity(expr.len());
    for i in 0..expr.len() {
        let mut rng = rng_for(seed, &[0x5a3e, i as u64]);
        let (motion_prev2, motion_prev1) = motion_frames(&out, identity, i);
        let mut input = FrameInput {
            noisy: Tensor::randn(identity.shape(), 1.0, &mut rng),
            identity: identity.clone(),
            motion_prev2,
            motion_prev1,
        };
        let mut cond = ConditioningBundle::from_sequences(sched.steps(), audio, expr, i, cfg.audio_window, cfg.expr_window)?;
        for t in (1..=sched.steps()).rev() {
            cond.t = t;
            let (eps, v_raw) = model.predict(&input, &cond, &refs)?;
            let noise = Tensor::randn(identity.shape(), 1.0, &mut rng);
            input.noisy = p_sample(&input.noisy, t, &eps, &v_from_raw(&v_raw), &noise, sched)?;
        }
        if let Some(bad) = input.noisy.first_non_finite() {
            return Err(Error::NonFinite {
                location: format!("sampled frame {i}, pixel {bad}"),
            });
        }
        out.push(input.noisy.map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Renders each expression with the face model, bypassing diffusion.
pub fn oracle_clip(basis: &FaceBasis, mouth_open: &[f64], expr: &[ExpressionVector]) -> Result<Vec<Frame>> {
    if mouth_open.len() != expr.len() {
        return Err(Error::Dimension {
            op: "oracle_clip",
            left: vec![mouth_open.len()],
            right: vec![expr.len()],
        });
    }
    expr.iter().zip(mouth_open).map(|(e, &m)| basis.render(e, m)).collect()
}

/// Neutral and target reference sequences for `label`.
pub fn reference_sequences(
    mode: ReferenceMode,
    gan: Option<&GanModel>,
    protos: &Prototypes,
    label: EmotionLabel,
    frames: usize,
    seed: u64,
) -> Result<(Vec<ExpressionVector>, Vec<ExpressionVector>)> {
    match mode {
        ReferenceMode::Oracle => Ok((
            vec![protos.get(EmotionLabel::Neutral).clone(); frames],
            vec![protos.get(label).clone(); frames],
        )),
        ReferenceMode::Generator => {
            let gan = gan.ok_or_else(|| Error::config("generator reference mode needs an exprgen checkpoint"))?;
            let neutral = gan.generate(EmotionLabel::Neutral, frames, derive_seed(seed, &[0x4e])).map(|s| s.frames)?;
            let target = gan.generate(label, frames, derive_seed(seed, &[0x7a, label.index() as u64]))?;
            Ok((neutral, target.frames))
        }
    }
}

/// Unit vector from the mean neutral to the mean target reference.
pub fn mean_direction(neutral: &[ExpressionVector], target: &[ExpressionVector], convention: SignConvention) -> Result<Vec<f64>> {
    let n = mean_expression(neutral)?;
    let t = mean_expression(target)?;
    let d: Vec<f64> = match convention {
        SignConvention::Corrected => t.iter().zip(&n).map(|(a, b)| a - b).collect(),
        SignConvention::Literal => n.iter().zip(&t).map(|(a, b)| a - b).collect(),
    };
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::config("neutral and target references coincide"));
    }
    Ok(d.into_iter().map(|v| v / norm).collect())
}

pub fn project(v: &[f64], dir: &[f64]) -> f64 {
    v.iter().zip(dir).map(|(a, b)| a * b).sum()
}

/// Everything needed to re-derive a sampled clip's metrics offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub label: EmotionLabel,
    pub intensity: f64,
    pub seed: u64,
    pub identity: usize,
    pub audio_seed: u64,
    pub reference: ReferenceMode,
    pub convention: SignConvention,
    pub diffusion_step: u64,
    pub exprgen_step: Option<u64>,
    /// The exact conditioning vector used at each frame.
    pub expressions: Vec<ExpressionVector>,
    pub mouth_open: Vec<f64>,
}
