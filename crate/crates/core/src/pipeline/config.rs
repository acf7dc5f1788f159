//! Run configuration: every module config plus seeds, serialised as TOML
//! next to each artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{LossWeights, ScheduleConfig};
use crate::edit::SignConvention;
use crate::error::{Error, Result};
use crate::exprgen::{EmotionLabel, GanConfig};
use crate::metrics::ClassifierConfig;
use crate::synthworld::CorpusManifest;

/// Which corpus shards feed diffusion training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shards {
    #[default]
    All,
    Labeled,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub shards: Shards,
    /// Train on the first `max_clips` clips only; 0 means all of them.
    pub max_clips: usize,
    pub log_every: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 20_000,
            batch: 16,
            lr: 1e-3,
            shards: Shards::All,
            max_clips: 0,
            log_every: 100,
        }
    }
}

/// Source of the neutral and target reference expressions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// Means of sequences drawn from the trained expression generator.
    #[default]
    Generator,
    /// The synthetic world's emotion prototypes.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub label: EmotionLabel,
    pub intensity: f64,
    pub frames: usize,
    /// Identity whose neutral face seeds generation.
    pub identity: usize,
    /// Seed of the driving audio track.
    pub audio_seed: u64,
    pub reference: ReferenceMode,
    pub convention: SignConvention,
    /// Length of the generated reference sequences.
    pub reference_frames: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            label: EmotionLabel::Happy,
            intensity: 1.0,
            frames: 24,
            identity: 0,
            audio_seed: 1,
            reference: ReferenceMode::Generator,
            convention: SignConvention::Corrected,
            reference_frames: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Intensity-level counts for the linearity trajectories.
    pub level_sets: Vec<usize>,
    /// Emotions swept along each trajectory.
    pub labels: Vec<EmotionLabel>,
    /// Frames per generated clip.
    pub frames: usize,
    /// Held-out clips synthesised for the reconstruction metrics.
    pub held_out_clips: usize,
    /// Shuffles averaged for the lip-sync baseline.
    pub shuffles: usize,
    /// Skip the diffusion model and render expressions with the face model.
    pub oracle_render: bool,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            level_sets: vec![3, 6, 15],
            labels: vec![EmotionLabel::Happy, EmotionLabel::Sad, EmotionLabel::Angry],
            frames: 8,
            held_out_clips: 2,
            shuffles: 20,
            oracle_render: false,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusManifest,
    pub exprgen: GanConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub train: DiffusionTrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// A configuration small enough to run every command end to end in a
    /// few seconds. Useful for smoke tests, useless for quality.
    pub fn smoke() -> Self {
        let k = 8;
        let size = 16;
        RunConfig {
            seed: 0,
            corpus: CorpusManifest {
                identities: 2,
                levels: 3,
                frames_per_clip: 6,
                image_size: size,
                expr_dim: k,
                unlabeled_clips: 2,
                unlabeled_frames: 6,
                write_pgm: false,
                ..CorpusManifest::default()
            },
            exprgen: GanConfig {
                expr_dim: k,
                noise_dim: 4,
                hidden_dim: 8,
                label_dim: 4,
                disc_channels: 4,
                tcn_levels: 2,
                steps: 3,
                batch: 4,
                ..GanConfig::default()
            },
            denoiser: DenoiserConfig {
                image_size: size,
                base_channels: 4,
                channel_mults: vec![1, 2],
                cond_embed_dim: 8,
                expr_dim: k,
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig {
                steps: 4,
                beta_start: 0.02,
                beta_end: 0.5,
            },
            loss: LossWeights::default(),
            train: DiffusionTrainConfig {
                steps: 3,
                batch: 2,
                log_every: 1,
                ..DiffusionTrainConfig::default()
            },
            sample: SampleConfig {
                frames: 3,
                reference_frames: 4,
                ..SampleConfig::default()
            },
            eval: EvalConfig {
                frames: 3,
                held_out_clips: 1,
                shuffles: 2,
                classifier: ClassifierConfig {
                    hidden: 8,
                    steps: 50,
                    ..ClassifierConfig::default()
                },
                ..EvalConfig::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str::<RunConfig>(&text)
            .map_err(|e| Error::format(path, e.to_string()))
            .and_then(|c| c.validate().map(|_| c))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise run config: {e}")))
    }

    /// Writes `config.toml` into `dir`.
    pub fn save_alongside(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))
    }

    /// Applies a `--seed` override to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.exprgen.seed = seed;
        self.denoiser.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.exprgen.validate()?;
        self.denoiser.validate()?;
        self.loss.validate()?;
        self.schedule.build()?;
        let k = self.corpus.expr_dim;
        if self.exprgen.expr_dim != k || self.denoiser.expr_dim != k {
            return Err(Error::config(format!(
                "expression dimensions disagree: corpus {k}, exprgen {}, denoiser {}",
                self.exprgen.expr_dim, self.denoiser.expr_dim
            )));
        }
        if self.denoiser.image_size != self.corpus.image_size {
            return Err(Error::config(format!(
                "denoiser.image_size {} differs from corpus.image_size {}",
                self.denoiser.image_size, self.corpus.image_size
            )));
        }
        if self.denoiser.frame_channels != 1 || self.denoiser.audio_dim != crate::synthworld::AUDIO_DIM {
            return Err(Error::config("denoiser must take single-channel frames and the corpus audio features"));
        }
        if self.train.batch == 0 || !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::config("train.batch must be positive and train.lr finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.sample.intensity) {
            return Err(Error::Range {
                what: "sample.intensity",
                value: self.sample.intensity,
                range: "[0, 1]",
            });
        }
        if self.sample.frames == 0 || self.sample.reference_frames == 0 || self.eval.frames == 0 {
            return Err(Error::config("frame counts must be positive"));
        }
        if self.eval.frames < 3 {
            return Err(Error::config("eval.frames must be at least 3 for the lip-sync correlation"));
        }
        if self.eval.level_sets.iter().any(|&l| l < 3) {
            return Err(Error::config("eval.level_sets entries must be at least 3"));
        }
        if self.sample.identity >= self.corpus.identities {
            return Err(Error::config(format!(
                "sample.identity {} not in the corpus ({} identities)",
                self.sample.identity, self.corpus.identities
            )));
        }
        Ok(())
    }
}
