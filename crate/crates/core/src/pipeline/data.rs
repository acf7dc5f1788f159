//! Training data for the denoiser: frames, audio and oracle-extracted
//! expression coefficients, and the per-step batch sampler.

use rand::Rng;

use super::config::Shards;
use crate::denoiser::{make_example, ConditioningBundle, DenoiserConfig, TrainExample};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::exprgen::ExpressionVector;
use crate::numerics::Tensor;
use crate::synthworld::{ClipData, Corpus, FaceBasis, Frame};

/// One clip prepared for diffusion training. No label is kept: conditioning
/// comes from coefficients extracted from the frames themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainClip {
    pub identity: usize,
    pub frames: Vec<Frame>,
    pub audio: Vec<Vec<f64>>,
    pub psi: Vec<ExpressionVector>,
}

/// Per-frame coefficients recovered from rendered frames.
pub fn extract_sequence(basis: &FaceBasis, frames: &[Frame]) -> Result<Vec<ExpressionVector>> {
    frames
        .iter()
        .map(|f| basis.extract_expression(f).map(|(psi, _)| psi))
        .collect()
}

pub fn prepare_clip(basis: &FaceBasis, clip: ClipData) -> Result<TrainClip> {
    let psi = extract_sequence(basis, &clip.frames)?;
    Ok(TrainClip {
        identity: clip.spec.identity,
        frames: clip.frames,
        audio: clip.audio.features,
        psi,
    })
}

/// Loads the selected shards in index order, keeping the first `max_clips`
/// (all when 0).
pub fn load_training_clips(corpus: &Corpus, shards: Shards, max_clips: usize) -> Result<Vec<TrainClip>> {
    let bases = (0..corpus.manifest.identities)
        .map(|i| corpus.manifest.basis(i))
        .collect::<Result<Vec<_>>>()?;
    let selected = corpus.entries.iter().filter(|e| match shards {
        Shards::All => true,
        Shards::Labeled => e.spec.is_labeled(),
        Shards::Unlabeled => !e.spec.is_labeled(),
    });
    let limit = if max_clips == 0 { usize::MAX } else { max_clips };
    let clips = selected
        .take(limit)
        .map(|e| {
            let basis = bases
                .get(e.spec.identity)
                .ok_or_else(|| Error::format(&corpus.root, format!("identity {} not in manifest", e.spec.identity)))?;
            prepare_clip(basis, corpus.load_clip(e)?)
        })
        .collect::<Result<Vec<_>>>()?;
    if clips.is_empty() {
        return Err(Error::config(format!("no {shards:?} clips available for diffusion training")));
    }
    Ok(clips)
}

/// Motion frames for position `i`; positions before the clip start use the
/// identity frame.
pub fn motion_frames(frames: &[Frame], identity: &Frame, i: usize) -> (Frame, Frame) {
    let at = |j: Option<usize>| j.map_or_else(|| identity.clone(), |j| frames[j].clone());
    (at(i.checked_sub(2)), at(i.checked_sub(1)))
}

/// Draws one training example: a random clip, target frame, identity frame
/// from the same clip, diffusion step and noise.
pub fn sample_example<R: Rng + ?Sized>(
    clips: &[TrainClip],
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainExample> {
    let clip = &clips[rng.random_range(0..clips.len())];
    let n = clip.frames.len();
    let i = rng.random_range(0..n);
    let identity = clip.frames[rng.random_range(0..n)].clone();
    let t = rng.random_range(1..=sched.steps());
    let motion = motion_frames(&clip.frames, &identity, i);
    let cond = ConditioningBundle::from_sequences(t, &clip.audio, &clip.psi, i, cfg.audio_window, cfg.expr_window)?;
    let eps = Tensor::randn(clip.frames[i].shape(), 1.0, rng);
    make_example(clip.frames[i].clone(), identity, motion, cond, eps, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use crate::synthworld::{synth_clip, ClipSpec, CorpusManifest};

    fn clip() -> (CorpusManifest, FaceBasis, ClipData) {
        let m = CorpusManifest {
            image_size: 16,
            expr_dim: 6,
            frames_per_clip: 5,
            ..CorpusManifest::default()
        };
        let basis = m.basis(0).unwrap();
        let spec = ClipSpec {
            identity: 0,
            label: None,
            level: None,
            clip: 0,
        };
        let c = synth_clip(&m, &basis, &m.prototypes().unwrap(), spec).unwrap();
        (m, basis, c)
    }

    #[test]
    fn extraction_recovers_unclamped_coefficients() {
        let (_, basis, c) = clip();
        let truth = c.psi.clone();
        let mouth = c.audio.mouth_open.clone();
        let t = prepare_clip(&basis, c).unwrap();
        let mut checked = 0;
        for ((a, b), m) in t.psi.iter().zip(&truth).zip(&mouth) {
            let raw = basis.render_linear(b, *m).unwrap();
            if raw.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                continue;
            }
            checked += 1;
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn motion_frames_fall_back_to_identity() {
        let (_, _, c) = clip();
        let id = Tensor::filled(c.frames[0].shape(), 9.0);
        assert_eq!(motion_frames(&c.frames, &id, 0), (id.clone(), id.clone()));
        assert_eq!(motion_frames(&c.frames, &id, 1), (id.clone(), c.frames[0].clone()));
        assert_eq!(motion_frames(&c.frames, &id, 4), (c.frames[2].clone(), c.frames[3].clone()));
    }

    #[test]
    fn sampled_examples_are_consistent_and_seeded() {
        let (m, basis, c) = clip();
        let clips = vec![prepare_clip(&basis, c).unwrap()];
        let cfg = DenoiserConfig {
            image_size: m.image_size,
            expr_dim: m.expr_dim,
            ..DenoiserConfig::default()
        };
        let sched = crate::diffusion::ScheduleConfig::default().build().unwrap();
        let a = sample_example(&clips, &cfg, &sched, &mut rng_for(3, &[])).unwrap();
        let b = sample_example(&clips, &cfg, &sched, &mut rng_for(3, &[])).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.cond, b.cond);
        assert!((1..=sched.steps()).contains(&a.cond.t));
        assert_eq!(a.cond.audio.len(), 3);
        assert_eq!(a.cond.expr[1].len(), 6);
    }
}
