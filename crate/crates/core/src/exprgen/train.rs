//! Alternating adversarial training.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::discriminator::{GlobalDiscriminator, LocalDiscriminator};
use super::generator::Generator;
use super::loss::{loss_disc_global, loss_disc_local, loss_generator};
use super::sequence::{EmotionLabel, ExpressionSequence};
use super::GanConfig;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Module, Parameter};
use crate::seed::rng_for;

/// Generator loss above this multiple of its first value counts as divergent.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive divergent steps tolerated before aborting.
pub const DIVERGENCE_PATIENCE: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminators {
    pub global: GlobalDiscriminator,
    pub local: LocalDiscriminator,
}

impl Module for Discriminators {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.global.visit_params(f);
        self.local.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.global.visit_params_mut(f);
        self.local.visit_params_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub cfg: GanConfig,
    pub generator: Generator,
    pub disc: Discriminators,
}

impl GanModel {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, &[0x6a4, 0]);
        let generator = Generator::new(cfg, &mut rng);
        let global = GlobalDiscriminator::new(cfg, &mut rng);
        let local = LocalDiscriminator::new(cfg, &mut rng);
        Ok(GanModel {
            cfg: cfg.clone(),
            generator,
            disc: Discriminators { global, local },
        })
    }

    pub fn generate(&self, label: EmotionLabel, n: usize, seed: u64) -> Result<ExpressionSequence> {
        let z = sample_noise(self.cfg.noise_dim, seed);
        generate_sequence(&self.generator, label, &z, n)
    }
}

impl Module for GanModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.generator.visit_params(f);
        self.disc.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.generator.visit_params_mut(f);
        self.disc.visit_params_mut(f);
    }
}

/// Standard normal noise vector derived from `seed`.
pub fn sample_noise(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[0x2015e]);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn generate_sequence(gen: &Generator, label: EmotionLabel, z: &[f64], n: usize) -> Result<ExpressionSequence> {
    if n == 0 {
        return Err(Error::config("generated sequences need at least one frame"));
    }
    if z.len() != gen.noise_dim() {
        return Err(Error::Dimension {
            op: "generate_sequence noise",
            left: vec![gen.noise_dim()],
            right: vec![z.len()],
        });
    }
    ExpressionSequence::new(gen.generate(label, z, n), label)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanStepStats {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub mse: f64,
    pub real_score: f64,
    pub fake_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanHistory {
    pub steps: Vec<GanStepStats>,
}

impl GanHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss_d,loss_g,mse,real_score,fake_score\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e}\n",
                s.step, s.loss_d, s.loss_g, s.mse, s.real_score, s.fake_score
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_corpus(corpus: &[ExpressionSequence], cfg: &GanConfig) -> Result<()> {
    for label in EmotionLabel::ALL.iter().filter(|l| !l.is_neutral()) {
        if !corpus.iter().any(|s| s.label == *label) {
            return Err(Error::config(format!("expression corpus has no sequence labelled {label}")));
        }
    }
    if let Some(s) = corpus.iter().find(|s| s.dim() != cfg.expr_dim) {
        return Err(Error::Dimension {
            op: "expression corpus",
            left: vec![cfg.expr_dim],
            right: vec![s.dim()],
        });
    }
    Ok(())
}

/// Trains with one discriminator update per generator update. Each real
/// sequence in a batch is paired with a fake of the same label and length,
/// which also anchors the regression term.
pub fn train_gan(corpus: &[ExpressionSequence], cfg: &GanConfig) -> Result<(GanModel, GanHistory)> {
    check_corpus(corpus, cfg)?;
    let mut model = GanModel::new(cfg)?;
    let mut history = GanHistory::default();
    let adam = AdamConfig {
        beta1: 0.5,
        ..AdamConfig::with_lr(cfg.lr)
    };
    let mut opt_g = Adam::new(adam);
    let mut opt_d = Adam::new(adam);
    let mut rng = rng_for(cfg.seed, &[0x6a4, 1]);
    let mut initial_g: Option<f64> = None;
    let mut divergent = 0usize;
    let scale = 1.0 / cfg.batch as f64;

    for step in 0..cfg.steps {
        let batch: Vec<&ExpressionSequence> = (0..cfg.batch)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();
        let fakes: Vec<_> = batch
            .iter()
            .map(|real| {
                let z: Vec<f64> = (0..cfg.noise_dim).map(|_| rng.sample(StandardNormal)).collect();
                model.generator.rollout(real.label, &z, real.len())
            })
            .collect();

        // discriminator update
        model.disc.zero_grad();
        let (mut loss_d, mut real_score, mut fake_score) = (0.0, 0.0, 0.0);
        for (real, (fake, _)) in batch.iter().zip(&fakes) {
            let y = real.label;
            let g = &mut model.disc.global;
            let out_r = g.forward(&real.frames, y);
            let out_f = g.forward(fake, y);
            let l = loss_disc_global(out_r.score, out_f.score, &out_r.class_logits, y, cfg.lambda_cls);
            g.backward(&out_r, l.d_real * scale, &scale_vec(&l.d_real_logits, scale));
            g.backward(&out_f, l.d_fake * scale, &[0.0; EmotionLabel::COUNT]);
            loss_d += l.value;
            real_score += out_r.score;
            fake_score += out_f.score;
            if cfg.use_local_disc {
                let d = &mut model.disc.local;
                let lr: Vec<_> = real.frames.iter().map(|e| d.forward(e, y)).collect();
                let lf: Vec<_> = fake.iter().map(|e| d.forward(e, y)).collect();
                let sr: Vec<f64> = lr.iter().map(|o| o.score).collect();
                let sf: Vec<f64> = lf.iter().map(|o| o.score).collect();
                let ll = loss_disc_local(&sr, &sf);
                for (o, g) in lr.iter().zip(&ll.d_real) {
                    d.backward(o, g * scale);
                }
                for (o, g) in lf.iter().zip(&ll.d_fake) {
                    d.backward(o, g * scale);
                }
                loss_d += ll.value;
            }
        }
        opt_d.update(&mut model.disc);

        // generator update against the refreshed discriminators
        model.generator.zero_grad();
        let (mut loss_g, mut mse) = (0.0, 0.0);
        for (real, (fake, cache)) in batch.iter().zip(&fakes) {
            let y = real.label;
            let out_f = model.disc.global.forward(fake, y);
            let local: Option<Vec<_>> = cfg
                .use_local_disc
                .then(|| fake.iter().map(|e| model.disc.local.forward(e, y)).collect());
            let local_scores: Option<Vec<f64>> = local.as_ref().map(|v| v.iter().map(|o| o.score).collect());
            let l = loss_generator(Some(out_f.score), local_scores.as_deref(), fake, &real.frames, cfg.lambda_mse);
            let mut d_frames = model
                .disc
                .global
                .backward(&out_f, l.d_global, &[0.0; EmotionLabel::COUNT]);
            if let Some(outs) = &local {
                for ((df, o), g) in d_frames.iter_mut().zip(outs).zip(&l.d_local) {
                    let de = model.disc.local.backward(o, *g);
                    df.iter_mut().zip(&de).for_each(|(a, b)| *a += b);
                }
            }
            for (df, dm) in d_frames.iter_mut().zip(&l.d_frames) {
                df.iter_mut().zip(dm).for_each(|(a, b)| *a = (*a + b) * scale);
            }
            model.generator.backward(cache, &d_frames);
            loss_g += l.value;
            mse += l.mse;
        }
        opt_g.update(&mut model.generator);
        // the discriminator gradients produced above are by-products
        model.disc.zero_grad();

        let stats = GanStepStats {
            step,
            loss_d: loss_d * scale,
            loss_g: loss_g * scale,
            mse: mse * scale,
            real_score: real_score * scale,
            fake_score: fake_score * scale,
        };
        if !(stats.loss_g.is_finite() && stats.loss_d.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("gan losses at step {step}"),
            });
        }
        let init = *initial_g.get_or_insert(stats.loss_g);
        if stats.loss_g > DIVERGENCE_FACTOR * init {
            divergent += 1;
            if divergent >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence(format!(
                    "generator loss above {DIVERGENCE_FACTOR}x its initial value {init:.4} for {DIVERGENCE_PATIENCE} steps (step {step})"
                )));
            }
        } else {
            divergent = 0;
        }
        if step % 100 == 0 {
            log::debug!(
                "gan step {step}: loss_d {:.4} loss_g {:.4} mse {:.4}",
                stats.loss_d,
                stats.loss_g,
                stats.mse
            );
        }
        history.steps.push(stats);
    }
    Ok((model, history))
}

fn scale_vec(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Mean expression of `per_label` generated sequences for every label,
/// projected onto its two leading principal axes. Columns:
/// `label,sample,pc1,pc2`.
pub fn write_embedding_csv(model: &GanModel, frames: usize, per_label: usize, seed: u64, path: &Path) -> Result<()> {
    let mut rows: Vec<(EmotionLabel, usize, Vec<f64>)> = Vec::new();
    for label in EmotionLabel::ALL {
        for s in 0..per_label {
            let seq = model.generate(label, frames, crate::seed::derive_seed(seed, &[label.index() as u64, s as u64]))?;
            rows.push((label, s, crate::edit::mean_expression(&seq.frames)?));
        }
    }
    let k = model.cfg.expr_dim;
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; k];
    for (_, _, v) in &rows {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n);
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, _, v)| v.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let axes = principal_axes(&centered, k, 2);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        writeln!(w, "label,sample,pc1,pc2")?;
        for ((label, s, _), c) in rows.iter().zip(&centered) {
            let p: Vec<f64> = axes.iter().map(|a| a.iter().zip(c).map(|(x, y)| x * y).sum()).collect();
            writeln!(w, "{label},{s},{:e},{:e}", p[0], p[1])?;
        }
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

/// Leading eigenvectors of the sample covariance by power iteration with
/// deflation.
fn principal_axes(rows: &[Vec<f64>], k: usize, count: usize) -> Vec<Vec<f64>> {
    let mut cov = vec![0.0; k * k];
    for r in rows {
        for i in 0..k {
            for j in 0..k {
                cov[i * k + j] += r[i] * r[j];
            }
        }
    }
    let mut axes = Vec::with_capacity(count);
    for a in 0..count {
        let mut v: Vec<f64> = (0..k).map(|i| if i == a { 1.0 } else { 0.1 / (1 + i) as f64 }).collect();
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut w: Vec<f64> = (0..k).map(|i| (0..k).map(|j| cov[i * k + j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            lambda = norm;
            v = w;
        }
        for i in 0..k {
            for j in 0..k {
                cov[i * k + j] -= lambda * v[i] * v[j];
            }
        }
        axes.push(v);
    }
    axes
}
