//! Evaluation: intensity trajectories (FLIE, LIE, projection ordering),
//! emotion accuracy, lip sync against a shuffled baseline, and
//! reconstruction quality on held-out clips.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::commands::{load_diffusion, load_exprgen, Layout};
use super::config::{ReferenceMode, RunConfig};
use super::data::extract_sequence;
use super::sample::{identity_frame, mean_direction, oracle_clip, project, reference_sequences, sample_clip};
use super::train::DiffusionState;
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::edit::{build_trajectory, mean_expression, uniform_intensities};
use crate::error::{Error, Result};
use crate::exprgen::{EmotionLabel, ExpressionVector, GanModel};
use crate::metrics::{
    emo_acc_sequences, flie, lie, lip_sync_proxy, majority_vote, psnr, spearman, ssim,
    train_emo_classifier, write_jsonl, write_metrics_csv, EmotionClassifier, MetricRow,
};
use crate::parallel::map_indexed;
use crate::seed::{derive_seed, rng_for};
use crate::synthworld::{synth_audio, synth_clip, ClipSpec, Corpus, CorpusManifest, FaceBasis, Frame};

/// Produces frames from conditioning, either through the denoiser or by
/// rendering the expressions directly with the face model.
pub enum Renderer<'a> {
    Diffusion { model: &'a Denoiser, sched: NoiseSchedule },
    Oracle,
}

impl Renderer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Renderer::Diffusion { .. } => "diffusion",
            Renderer::Oracle => "oracle",
        }
    }

    pub fn render(
        &self,
        basis: &FaceBasis,
        identity: &Frame,
        audio: &[Vec<f64>],
        mouth_open: &[f64],
        expr: &[ExpressionVector],
        seed: u64,
    ) -> Result<Vec<Frame>> {
        match self {
            Renderer::Diffusion { model, sched } => sample_clip(model, sched, identity, audio, expr, seed),
            Renderer::Oracle => oracle_clip(basis, mouth_open, expr),
        }
    }
}

/// Per-emotion result of one intensity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDetail {
    pub label: EmotionLabel,
    pub levels: usize,
    pub intensities: Vec<f64>,
    /// Unit direction from the mean neutral to the mean target reference.
    pub direction: Vec<f64>,
    /// Mean extracted coefficients projected onto `direction`, per level.
    pub projections: Vec<f64>,
    /// The same for frames rendered directly from the conditioning vectors.
    pub oracle_projections: Vec<f64>,
    pub spearman: f64,
    pub flie: f64,
    pub flie_oracle: f64,
    pub lie: f64,
    pub lip_sync: Vec<f64>,
    pub level_means: Vec<ExpressionVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub rows: Vec<MetricRow>,
    pub trajectories: Vec<TrajectoryDetail>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn labeled_coefficients(corpus: &Corpus) -> Result<Vec<(ExpressionVector, EmotionLabel)>> {
    let mut out = Vec::new();
    for e in corpus.labeled() {
        let clip = corpus.load_clip(e)?;
        let basis = corpus.manifest.basis(e.spec.identity)?;
        let label = e.spec.label.expect("labeled entries carry a label");
        out.extend(extract_sequence(&basis, &clip.frames)?.into_iter().map(|p| (p, label)));
    }
    Ok(out)
}

/// First clip index past everything stored in the corpus, offset per use so
/// held-out sets never coincide.
fn held_out_index(m: &CorpusManifest, offset: usize) -> usize {
    m.clips_per_cell.max(m.unlabeled_clips) + offset
}

/// Freshly synthesised labeled clips that are not in the corpus.
fn held_out_coefficients(m: &CorpusManifest) -> Result<Vec<(ExpressionVector, EmotionLabel)>> {
    let protos = m.prototypes()?;
    let mut out = Vec::new();
    for identity in 0..m.identities {
        let basis = m.basis(identity)?;
        for &label in &m.labels {
            for level in 1..=m.levels {
                let spec = ClipSpec {
                    identity,
                    label: Some(label),
                    level: Some(level),
                    clip: held_out_index(m, 1000),
                };
                let clip = synth_clip(m, &basis, &protos, spec)?;
                out.extend(extract_sequence(&basis, &clip.frames)?.into_iter().map(|p| (p, label)));
            }
        }
    }
    Ok(out)
}

/// Mean `|corr|` between lip intensity and randomly permuted mouth signals.
fn shuffled_lip_sync(frames: &[Frame], mouth: &[f64], lip: &crate::numerics::Tensor, shuffles: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, &[0x5b1f]);
    let mut acc = 0.0;
    for _ in 0..shuffles {
        let mut m = mouth.to_vec();
        m.shuffle(&mut rng);
        acc += lip_sync_proxy(frames, &m, lip)?.abs();
    }
    Ok(acc / shuffles.max(1) as f64)
}

struct Job {
    label_idx: usize,
    set_idx: usize,
    level: usize,
}

/// Runs the full evaluation. `diffusion` may be `None` only when
/// `cfg.eval.oracle_render` is set; `gan` only with oracle references.
pub fn evaluate(
    cfg: &RunConfig,
    corpus: &Corpus,
    diffusion: Option<&DiffusionState>,
    gan: Option<&GanModel>,
    threads: usize,
) -> Result<EvalOutput> {
    let ev = &cfg.eval;
    let m = &corpus.manifest;
    let renderer = match (ev.oracle_render, diffusion) {
        (true, _) => Renderer::Oracle,
        (false, Some(d)) => Renderer::Diffusion {
            model: &d.model,
            sched: cfg.schedule.build()?,
        },
        (false, None) => return Err(Error::config("evaluation needs a diffusion checkpoint unless eval.oracle_render is set")),
    };
    let tag = format!(
        "renderer={};reference={:?};diffusion_step={}",
        renderer.name(),
        cfg.sample.reference,
        diffusion.map_or(0, |d| d.step)
    );
    let protos = m.prototypes()?;
    let identity = cfg.sample.identity;
    let basis = m.basis(identity)?;
    let id_frame = identity_frame(m, identity)?;
    let lip = basis.masks().lip.clone();

    let (clf, clf_acc) = train_emo_classifier(&labeled_coefficients(corpus)?, &held_out_coefficients(m)?, &ev.classifier)?;

    // per-emotion references, audio and trajectories for every level set
    let mut refs = Vec::new();
    for &label in &ev.labels {
        let (neutral, target) = reference_sequences(
            cfg.sample.reference,
            gan,
            &protos,
            label,
            cfg.sample.reference_frames,
            derive_seed(cfg.seed, &[0xe7a1, label.index() as u64]),
        )?;
        let direction = mean_direction(&neutral, &target, cfg.sample.convention)?;
        let audio = synth_audio(ev.frames, derive_seed(cfg.seed, &[0xa7d, label.index() as u64]))?;
        let sets = ev
            .level_sets
            .iter()
            .map(|&n| build_trajectory(&neutral, &target, &uniform_intensities(n), ev.frames, label, cfg.sample.convention))
            .collect::<Result<Vec<_>>>()?;
        refs.push((label, direction, audio, sets));
    }
    let jobs: Vec<Job> = (0..refs.len())
        .flat_map(|label_idx| {
            ev.level_sets.iter().enumerate().flat_map(move |(set_idx, &n)| {
                (0..n).map(move |level| Job {
                    label_idx,
                    set_idx,
                    level,
                })
            })
        })
        .collect();
    let clips = map_indexed(jobs.len(), threads, |j| {
        let job = &jobs[j];
        let (label, _, audio, sets) = &refs[job.label_idx];
        let expr = &sets[job.set_idx][job.level];
        // one seed per emotion, so intensities differ only in their conditioning
        let seed = derive_seed(cfg.seed, &[0xc1f, label.index() as u64]);
        renderer.render(&basis, &id_frame, &audio.features, &audio.mouth_open, expr, seed)
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut trajectories = Vec::new();
    let mut lip_all = Vec::new();
    let mut lip_shuffled = Vec::new();
    let mut emo_clips = Vec::new();
    let mut cursor = 0;
    for (label, direction, audio, sets) in &refs {
        for (set_idx, &n) in ev.level_sets.iter().enumerate() {
            let generated = &clips[cursor..cursor + n];
            cursor += n;
            let mut level_means = Vec::with_capacity(n);
            let mut oracle_means = Vec::with_capacity(n);
            let mut lip_sync = Vec::with_capacity(n);
            for (level, frames) in generated.iter().enumerate() {
                level_means.push(mean_expression(&extract_sequence(&basis, frames)?)?);
                let oracle = oracle_clip(&basis, &audio.mouth_open, &sets[set_idx][level])?;
                oracle_means.push(mean_expression(&extract_sequence(&basis, &oracle)?)?);
                let seed = derive_seed(cfg.seed, &[label.index() as u64, n as u64, level as u64]);
                let ls = lip_sync_proxy(frames, &audio.mouth_open, &lip)?;
                lip_sync.push(ls);
                lip_all.push(ls);
                lip_shuffled.push(shuffled_lip_sync(frames, &audio.mouth_open, &lip, ev.shuffles, seed)?);
            }
            if set_idx + 1 == ev.level_sets.len() {
                if let Some(top) = generated.last() {
                    emo_clips.push((extract_sequence(&basis, top)?, *label));
                }
            }
            let intensities = uniform_intensities(n);
            let projections: Vec<f64> = level_means.iter().map(|v| project(v, direction)).collect();
            let oracle_projections: Vec<f64> = oracle_means.iter().map(|v| project(v, direction)).collect();
            trajectories.push(TrajectoryDetail {
                label: *label,
                levels: n,
                spearman: spearman(&intensities, &projections).unwrap_or(0.0),
                intensities,
                direction: direction.clone(),
                projections,
                oracle_projections,
                flie: flie(&level_means)?,
                flie_oracle: flie(&oracle_means)?,
                lie: lie(generated)?,
                lip_sync,
                level_means,
            });
        }
    }

    let mut rows = Vec::new();
    for &n in &ev.level_sets {
        let of_set: Vec<&TrajectoryDetail> = trajectories.iter().filter(|t| t.levels == n).collect();
        let avg = |f: fn(&TrajectoryDetail) -> f64| mean(&of_set.iter().map(|t| f(t)).collect::<Vec<_>>());
        rows.push(MetricRow::new("flie", avg(|t| t.flie), Some(n), &tag));
        rows.push(MetricRow::new("flie_oracle", avg(|t| t.flie_oracle), Some(n), &tag));
        rows.push(MetricRow::new("lie", avg(|t| t.lie), Some(n), &tag));
        let worst = of_set.iter().map(|t| t.spearman).fold(f64::INFINITY, f64::min);
        rows.push(MetricRow::new("projection_spearman_min", worst, Some(n), &tag));
    }
    let hits = emo_clips.iter().filter(|(seq, y)| majority_vote(&clf, seq) == Some(*y)).count();
    rows.push(MetricRow::new("emoacc", hits as f64 / emo_clips.len().max(1) as f64, None, &tag));
    if let Some(g) = gan {
        rows.push(MetricRow::new("emoacc_exprgen", exprgen_emo_acc(g, &clf, cfg)?, None, &tag));
    }
    rows.push(MetricRow::new("classifier_accuracy", clf_acc, None, &tag));
    rows.push(MetricRow::new("lip_sync", mean(&lip_all), None, &tag));
    rows.push(MetricRow::new("lip_sync_shuffled", mean(&lip_shuffled), None, &tag));
    let (p, s) = reconstruction(cfg, m, &renderer, threads)?;
    rows.push(MetricRow::new("psnr", p, None, &tag));
    rows.push(MetricRow::new("ssim", s, None, &tag));
    if let Some(bad) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("metric {}", bad.metric),
        });
    }
    Ok(EvalOutput { rows, trajectories })
}

/// EmoAcc of raw generator output over every non-neutral label.
pub fn exprgen_emo_acc(gan: &GanModel, clf: &EmotionClassifier, cfg: &RunConfig) -> Result<f64> {
    let mut seqs = Vec::new();
    for &label in EmotionLabel::ALL.iter().filter(|l| !l.is_neutral()) {
        for s in 0..5u64 {
            let seq = gan.generate(label, cfg.sample.reference_frames, derive_seed(cfg.seed, &[0xacc, label.index() as u64, s]))?;
            seqs.push((seq.frames, label));
        }
    }
    Ok(emo_acc_sequences(clf, &seqs))
}

/// Mean PSNR and SSIM of clips regenerated from held-out ground truth,
/// conditioned on its first frame, audio and extracted coefficients.
fn reconstruction(cfg: &RunConfig, m: &CorpusManifest, renderer: &Renderer, threads: usize) -> Result<(f64, f64)> {
    let ev = &cfg.eval;
    if ev.held_out_clips == 0 || ev.labels.is_empty() {
        return Ok((0.0, 0.0));
    }
    let protos = m.prototypes()?;
    let scores = map_indexed(ev.held_out_clips, threads, |c| -> Result<(f64, f64)> {
        let spec = ClipSpec {
            identity: c % m.identities,
            label: Some(ev.labels[c % ev.labels.len()]),
            level: Some(m.levels),
            clip: held_out_index(m, 2000 + c),
        };
        let basis = m.basis(spec.identity)?;
        let gt = synth_clip(m, &basis, &protos, spec)?;
        let n = ev.frames.min(gt.len());
        let truth = &gt.frames[..n];
        let expr = extract_sequence(&basis, truth)?;
        let seed = derive_seed(cfg.seed, &[0x4ec0, c as u64]);
        let out = renderer.render(&basis, &truth[0], &gt.audio.features[..n], &gt.audio.mouth_open[..n], &expr, seed)?;
        let mut ps = 0.0;
        let mut ss = 0.0;
        for (a, b) in out.iter().zip(truth) {
            ps += psnr(a, b)?;
            ss += ssim(a, b)?;
        }
        Ok((ps / n as f64, ss / n as f64))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok((scores.iter().map(|s| s.0).sum::<f64>() / n, scores.iter().map(|s| s.1).sum::<f64>() / n))
}

/// Loads the checkpoints the config calls for, evaluates, and writes
/// `metrics.csv` and `trajectories.jsonl` under `eval/`.
pub fn cmd_eval(cfg: &RunConfig, layout: &Layout, threads: usize) -> Result<EvalOutput> {
    let corpus = Corpus::open(&layout.corpus())?;
    let diffusion = if cfg.eval.oracle_render {
        None
    } else {
        Some(load_diffusion(&layout.diffusion_checkpoint(), cfg)?)
    };
    let gan = match cfg.sample.reference {
        ReferenceMode::Generator => Some(load_exprgen(&layout.exprgen_checkpoint())?.0),
        ReferenceMode::Oracle => None,
    };
    let out = evaluate(cfg, &corpus, diffusion.as_ref(), gan.as_ref(), threads)?;
    let dir = layout.eval();
    cfg.save_alongside(&dir)?;
    write_metrics_csv(&layout.metrics_csv(), &out.rows)?;
    write_jsonl(&dir.join("trajectories.jsonl"), &out.trajectories)?;
    Ok(out)
}
