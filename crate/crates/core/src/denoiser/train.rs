//! One optimisation step of the weighted denoising objective.

use super::cond::{ConditioningBundle, FrameInput};
use super::unet::Denoiser;
use crate::diffusion::{
    loss_simple, loss_simple_grad, loss_vlb_term_with_grad, q_sample, region_loss_with_grad, v_from_raw,
    v_from_raw_grad, LossParts, LossWeights, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Module, Tensor};
use crate::synthworld::{Frame, RegionMasks};

/// A noised training frame with its conditioning and the noise that produced it.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub input: FrameInput,
    pub cond: ConditioningBundle,
    pub x0: Frame,
    pub eps: Tensor,
}

/// Noises `x0` to step `cond.t` with `eps` and packs the frame input.
pub fn make_example(
    x0: Frame,
    identity: Frame,
    motion: (Frame, Frame),
    cond: ConditioningBundle,
    eps: Tensor,
    sched: &NoiseSchedule,
) -> Result<TrainExample> {
    let noisy = q_sample(&x0, cond.t, &eps, sched)?;
    Ok(TrainExample {
        input: FrameInput {
            noisy,
            identity,
            motion_prev2: motion.0,
            motion_prev1: motion.1,
        },
        cond,
        x0,
        eps,
    })
}

/// Computes every loss part on the batch, backpropagates the weighted total
/// and applies one optimizer update. Returns the batch-mean loss parts.
///
/// The variational term at `t = 1` is left out of the optimised total: with
/// the floored posterior variance it is a likelihood under a near-zero
/// variance, and its gradient swamps every other term.
pub fn train_step(
    model: &mut Denoiser,
    opt: &mut Adam,
    batch: &[TrainExample],
    sched: &NoiseSchedule,
    weights: &LossWeights,
    masks: &RegionMasks,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::config("train_step needs a non-empty batch"));
    }
    weights.validate()?;
    model.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut parts = LossParts::default();
    for (i, ex) in batch.iter().enumerate() {
        let refs = model.reference_features(&ex.input.identity)?;
        let out = model.forward(&ex.input, &ex.cond, &refs)?;
        let simple = loss_simple(&ex.eps, &out.eps)?;
        let mut d_eps = loss_simple_grad(&ex.eps, &out.eps);
        let (lip, d_lip) = region_loss_with_grad(&ex.eps, &out.eps, &masks.lip)?;
        let (eye, d_eye) = region_loss_with_grad(&ex.eps, &out.eps, &masks.eye)?;
        for ((d, a), b) in d_eps.data_mut().iter_mut().zip(d_lip.data()).zip(d_eye.data()) {
            *d = scale * (*d + weights.lambda_lip * a + weights.lambda_eye * b);
        }
        let t = ex.cond.t;
        let (vlb, d_v_raw) = if t >= 2 {
            let v = v_from_raw(&out.v_raw);
            let (vlb, dv) = loss_vlb_term_with_grad(&ex.x0, &ex.input.noisy, t, &out.eps, &v, sched)?;
            let dr = dv.zip_map(&v_from_raw_grad(&out.v_raw), |a, b| scale * weights.lambda_vlb * a * b)?;
            (vlb, dr)
        } else {
            (0.0, Tensor::zeros(out.v_raw.shape()))
        };
        let p = LossParts { simple, vlb, lip, eye };
        if !p.is_finite() {
            return Err(Error::NonFinite {
                location: format!("denoiser loss for batch item {i} at t={t}: {p:?}"),
            });
        }
        parts.simple += scale * p.simple;
        parts.vlb += scale * p.vlb;
        parts.lip += scale * p.lip;
        parts.eye += scale * p.eye;
        model.backward(&out, &refs, &d_eps, &d_v_raw);
    }
    opt.update(model);
    Ok(parts)
}
