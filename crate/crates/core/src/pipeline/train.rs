//! Diffusion training loop with checkpoint-exact resumption.

use std::path::Path;

use super::config::RunConfig;
use super::data::{sample_example, TrainClip};
use crate::denoiser::{train_step, Denoiser};
use crate::diffusion::{loss_final, LossParts};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig};
use crate::seed::rng_for;
use crate::synthworld::region_masks;

/// Model, optimizer and the number of optimizer steps taken so far.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub model: Denoiser,
    pub opt: Adam,
    pub step: u64,
}

impl DiffusionState {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        Ok(DiffusionState {
            model: Denoiser::new(&cfg.denoiser)?,
            opt: Adam::new(AdamConfig::with_lr(cfg.train.lr)),
            step: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionStepStats {
    pub step: u64,
    pub total: f64,
    pub parts: LossParts,
}

pub fn write_history_csv(path: &Path, history: &[DiffusionStepStats]) -> Result<()> {
    let mut out = String::from("step,loss_final,loss_simple,loss_vlb,loss_lip,loss_eye\n");
    for h in history {
        let p = h.parts;
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            h.step, h.total, p.simple, p.vlb, p.lip, p.eye
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs `steps` further optimizer steps. The batch for global step `s` is
/// drawn from a stream derived from `(seed, s)` alone, so a run resumed from
/// a checkpoint continues exactly as an uninterrupted one would.
pub fn train_diffusion(
    cfg: &RunConfig,
    clips: &[TrainClip],
    state: &mut DiffusionState,
    steps: usize,
) -> Result<Vec<DiffusionStepStats>> {
    let sched = cfg.schedule.build()?;
    let masks = region_masks(cfg.denoiser.image_size)?;
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = state.step;
        let mut rng = rng_for(cfg.seed, &[0xd1ff, s]);
        let batch = (0..cfg.train.batch)
            .map(|_| sample_example(clips, &cfg.denoiser, &sched, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let parts = train_step(&mut state.model, &mut state.opt, &batch, &sched, &cfg.loss, &masks)?;
        state.step += 1;
        let total = loss_final(&parts, &cfg.loss);
        if cfg.train.log_every > 0 && s % cfg.train.log_every as u64 == 0 {
            log::info!(
                "diffusion step {s}: loss {total:.5} (simple {:.5}, vlb {:.4}, lip {:.5}, eye {:.5})",
                parts.simple,
                parts.vlb,
                parts.lip,
                parts.eye
            );
        }
        history.push(DiffusionStepStats { step: s, total, parts });
    }
    Ok(history)
}
