//! The CLI commands, as library functions over an artifact directory.

use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::{ReferenceMode, RunConfig};
use super::data::{extract_sequence, load_training_clips};
use super::sample::{identity_frame, reference_sequences, sample_clip, Provenance};
use super::train::{train_diffusion, write_history_csv, DiffusionState};
use crate::denoiser::Denoiser;
use crate::edit::build_trajectory;
use crate::error::{Error, Result};
use crate::exprgen::{train_gan, write_embedding_csv, ExpressionSequence, GanHistory, GanModel};
use crate::numerics::{AdamConfig, Module, Tensor};
use crate::seed::derive_seed;
use crate::synthworld::{gen_corpus, pgm::write_pgm, AudioTrack, Corpus, CorpusSummary, Frame};

pub const EXPRGEN_KIND: &str = "exprgen";
pub const DIFFUSION_KIND: &str = "diffusion";

/// Where each command reads and writes under one output root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn exprgen(&self) -> PathBuf {
        self.root.join("exprgen")
    }

    pub fn exprgen_checkpoint(&self) -> PathBuf {
        self.exprgen().join("checkpoint.bin")
    }

    pub fn ablation(&self, name: &str) -> PathBuf {
        self.exprgen().join("ablations").join(name.replace('+', "_"))
    }

    pub fn diffusion(&self) -> PathBuf {
        self.root.join("diffusion")
    }

    pub fn diffusion_checkpoint(&self) -> PathBuf {
        self.diffusion().join("checkpoint.bin")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.eval().join("metrics.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, layout: &Layout, threads: usize) -> Result<CorpusSummary> {
    gen_corpus(&cfg.corpus, &layout.corpus(), threads)
}

/// Highest-intensity labeled clips as expression sequences, with
/// coefficients extracted from the frames.
pub fn gan_corpus(corpus: &Corpus) -> Result<Vec<ExpressionSequence>> {
    let top = corpus.manifest.levels;
    let mut out = Vec::new();
    for e in corpus.labeled().filter(|e| e.spec.level == Some(top)) {
        let label = e.spec.label.expect("labeled entries carry a label");
        let clip = corpus.load_clip(e)?;
        let psi = extract_sequence(&corpus.manifest.basis(e.spec.identity)?, &clip.frames)?;
        out.push(ExpressionSequence::new(psi, label)?);
    }
    Ok(out)
}

fn save_exprgen(cfg: &RunConfig, dir: &Path, model: &GanModel, history: &GanHistory) -> Result<()> {
    cfg.save_alongside(dir)?;
    let ck = Checkpoint::capture(EXPRGEN_KIND, history.steps.len() as u64, &cfg.to_toml()?, model, None);
    ck.save(&dir.join("checkpoint.bin"))?;
    history.write_csv(&dir.join("history.csv"))?;
    write_embedding_csv(model, cfg.sample.reference_frames, 8, derive_seed(cfg.seed, &[0xe3b]), &dir.join("embedding.csv"))
}

/// Trains the expression generator, or all four discriminator ablations when
/// `ablations` is set (the configured one is also written as the main
/// checkpoint). Returns `(ablation name, history)` per run.
pub fn cmd_train_exprgen(cfg: &RunConfig, layout: &Layout, ablations: bool) -> Result<Vec<(String, GanHistory)>> {
    let corpus = Corpus::open(&layout.corpus())?;
    let data = gan_corpus(&corpus)?;
    log::info!("exprgen corpus: {} highest-intensity sequences", data.len());
    let runs = if ablations {
        cfg.exprgen.ablations().to_vec()
    } else {
        vec![cfg.exprgen.clone()]
    };
    let mut out = Vec::new();
    for gc in runs {
        let (model, history) = train_gan(&data, &gc)?;
        let run_cfg = RunConfig {
            exprgen: gc.clone(),
            ..cfg.clone()
        };
        let name = gc.ablation_name().to_string();
        if ablations {
            save_exprgen(&run_cfg, &layout.ablation(&name), &model, &history)?;
        }
        if gc == cfg.exprgen {
            save_exprgen(&run_cfg, &layout.exprgen(), &model, &history)?;
        }
        out.push((name, history));
    }
    Ok(out)
}

pub fn load_exprgen(path: &Path) -> Result<(GanModel, RunConfig, u64)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(EXPRGEN_KIND)?;
    let cfg = RunConfig::from_toml(&ck.config)?;
    let mut model = GanModel::new(&cfg.exprgen)?;
    ck.restore(&mut model)?;
    Ok((model, cfg, ck.step))
}

/// Restores model, optimizer state and step counter. The optimizer uses the
/// learning rate of `cfg`, so a resumed run may change it.
pub fn load_diffusion(path: &Path, cfg: &RunConfig) -> Result<DiffusionState> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(DIFFUSION_KIND)?;
    let saved = RunConfig::from_toml(&ck.config)?;
    if saved.denoiser != cfg.denoiser {
        return Err(Error::config("denoiser config differs from the one stored in the checkpoint"));
    }
    let mut model = Denoiser::new(&saved.denoiser)?;
    ck.restore(&mut model)?;
    Ok(DiffusionState {
        model,
        opt: ck.restore_adam(AdamConfig::with_lr(cfg.train.lr)),
        step: ck.step,
    })
}

pub fn save_diffusion(cfg: &RunConfig, path: &Path, state: &DiffusionState) -> Result<()> {
    Checkpoint::capture(DIFFUSION_KIND, state.step, &cfg.to_toml()?, &state.model, Some(&state.opt)).save(path)
}

/// Trains until `cfg.train.steps` optimizer steps have been taken in total,
/// resuming from the existing checkpoint when `resume` is set.
pub fn cmd_train_diffusion(cfg: &RunConfig, layout: &Layout, resume: bool) -> Result<DiffusionState> {
    let corpus = Corpus::open(&layout.corpus())?;
    let clips = load_training_clips(&corpus, cfg.train.shards, cfg.train.max_clips)?;
    let ckpt = layout.diffusion_checkpoint();
    let mut state = if resume && ckpt.exists() {
        load_diffusion(&ckpt, cfg)?
    } else {
        DiffusionState::fresh(cfg)?
    };
    let start = state.step;
    let remaining = (cfg.train.steps as u64).saturating_sub(start) as usize;
    log::info!(
        "diffusion training on {} clips: steps {start}..{}, {} parameters",
        clips.len(),
        start + remaining as u64,
        state.model.param_count()
    );
    let history = train_diffusion(cfg, &clips, &mut state, remaining)?;
    let dir = layout.diffusion();
    cfg.save_alongside(&dir)?;
    save_diffusion(cfg, &ckpt, &state)?;
    let hpath = dir.join("history.csv");
    if start > 0 && hpath.exists() {
        let tmp = dir.join("history.part.csv");
        write_history_csv(&tmp, &history)?;
        let old = std::fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let new = std::fs::read_to_string(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let body: String = new.lines().skip(1).map(|l| format!("{l}\n")).collect();
        std::fs::write(&hpath, old + &body).map_err(|e| Error::io(&hpath, e))?;
        std::fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
    } else {
        write_history_csv(&hpath, &history)?;
    }
    Ok(state)
}

/// Writes frames as `frames.bin` plus one PGM per frame.
pub fn write_clip_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    let fdir = dir.join("frames");
    std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let (_, h, w) = frames
        .first()
        .ok_or_else(|| Error::config("cannot write an empty clip"))?
        .dims3()?;
    let stack = Tensor::new(
        vec![frames.len(), 1, h, w],
        frames.iter().flat_map(|f| f.data().iter().copied()).collect(),
    )?;
    let bin = dir.join("frames.bin");
    let mut buf = Vec::new();
    stack.write_to(&mut buf).map_err(|e| Error::io(&bin, e))?;
    std::fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_pgm(&fdir.join(format!("{i:04}.pgm")), f.data(), w, h)?;
    }
    Ok(())
}

/// Optional replacements for the configured identity frame and audio track.
#[derive(Clone, Debug, Default)]
pub struct SampleInputs {
    pub identity: Option<Frame>,
    pub audio: Option<AudioTrack>,
}

/// Synthesises one clip for `cfg.sample` and writes it with its provenance.
/// Returns the clip directory.
pub fn cmd_sample(cfg: &RunConfig, layout: &Layout, inputs: &SampleInputs) -> Result<PathBuf> {
    let s = &cfg.sample;
    let diffusion = load_diffusion(&layout.diffusion_checkpoint(), cfg)?;
    let gan = match s.reference {
        ReferenceMode::Generator => Some(load_exprgen(&layout.exprgen_checkpoint())?),
        ReferenceMode::Oracle => None,
    };
    let audio = match &inputs.audio {
        Some(a) => a.clone(),
        None => crate::synthworld::synth_audio(s.frames, s.audio_seed)?,
    };
    let identity = match &inputs.identity {
        Some(f) => f.clone(),
        None => identity_frame(&cfg.corpus, s.identity)?,
    };
    let frames = audio.len();
    let protos = cfg.corpus.prototypes()?;
    let (neutral, target) = reference_sequences(
        s.reference,
        gan.as_ref().map(|g| &g.0),
        &protos,
        s.label,
        s.reference_frames,
        derive_seed(cfg.seed, &[0x2ef]),
    )?;
    let expressions = build_trajectory(&neutral, &target, &[s.intensity], frames, s.label, s.convention)?.remove(0);
    let sched = cfg.schedule.build()?;
    let seed = derive_seed(cfg.seed, &[0x5a, s.label.index() as u64, s.intensity.to_bits()]);
    let clip = sample_clip(&diffusion.model, &sched, &identity, &audio.features, &expressions, seed)?;
    let dir = layout.samples().join(format!("{}_k{:.3}", s.label, s.intensity));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_clip_frames(&dir, &clip)?;
    audio.write_csv(&dir.join("audio.csv"))?;
    let prov = Provenance {
        label: s.label,
        intensity: s.intensity,
        seed,
        identity: s.identity,
        audio_seed: s.audio_seed,
        reference: s.reference,
        convention: s.convention,
        diffusion_step: diffusion.step,
        exprgen_step: gan.as_ref().map(|g| g.2),
        expressions,
        mouth_open: audio.mouth_open.clone(),
    };
    let p = dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&prov).map_err(|e| Error::format(&p, e.to_string()))?;
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    cfg.save_alongside(&dir)?;
    Ok(dir)
}
