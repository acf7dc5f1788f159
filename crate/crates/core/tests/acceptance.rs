//! Acceptance harness: one PASS/FAIL/SKIP line per criterion.
//!
//! The two end-to-end training criteria (6 and 7) take tens of minutes on a
//! single core and only run with `EMODIFF_ACCEPTANCE_FULL=1`; the remaining
//! criteria always run. The process exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use emodiff::diffusion::{build_schedule, kl_gaussians, predict_mu, predict_sigma, q_sample, ScheduleConfig};
use emodiff::edit::{apply_intensity, build_trajectory, edit_direction, uniform_intensities, SignConvention};
use emodiff::exprgen::{train_gan, EmotionLabel, ExpressionVector, GanConfig};
use emodiff::metrics::{flie, train_emo_classifier, ClassifierConfig, CLASSIFIER_MIN_ACCURACY};
use emodiff::numerics::Tensor;
use emodiff::pipeline::{
    cmd_eval, cmd_gen_data, cmd_sample, cmd_train_diffusion, cmd_train_exprgen, evaluate, exprgen_emo_acc,
    extract_sequence, gan_corpus, load_training_clips, train_diffusion, DiffusionState, Layout, ReferenceMode,
    RunConfig, SampleInputs, Shards,
};
use emodiff::seed::rng_for;
use emodiff::synthworld::{gen_corpus, make_face_basis, snapshot_dir, synth_clip, ClipSpec, Corpus, CorpusManifest};

const FULL_ENV: &str = "EMODIFF_ACCEPTANCE_FULL";
const ONLY_ENV: &str = "EMODIFF_ACCEPTANCE_ONLY";

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Outcome {
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            detail,
        }
    }
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

// 1 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let t = Instant::now();
    let cases = common::grads::gradient_suite();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    let probes: usize = cases.iter().map(|c| c.probes).sum();
    let min_probes = cases.iter().map(|c| c.probes).min().unwrap_or(0);
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let el = t.elapsed();
    Outcome::check(
        failed.is_empty() && within(el, 120.0),
        format!(
            "{} cases, {probes} probes (min {min_probes} per case), max rel err {worst:.2e}, failed {failed:?}, {:.1}s",
            cases.len(),
            el.as_secs_f64()
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn diffusion_math() -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    let sched = ScheduleConfig::default().build().unwrap();
    let n = sched.steps();
    let decreasing = (2..=n).all(|t| sched.alpha_bar(t) < sched.alpha_bar(t - 1));
    let ab_t = sched.alpha_bar(n);
    ok &= decreasing && ab_t < 0.05;
    notes.push(format!("alpha_bar decreasing {decreasing}, alpha_bar_T {ab_t:.4}"));

    // moments of q_sample at one step over 1e5 draws
    let draws = 100_000;
    let step = 30;
    let x0v = 0.7;
    let x0 = Tensor::filled(&[draws], x0v);
    let eps = Tensor::randn(&[draws], 1.0, &mut rng_for(2, &[]));
    let xt = q_sample(&x0, step, &eps, &sched).unwrap();
    let ab = sched.alpha_bar(step);
    let (m_true, v_true) = (ab.sqrt() * x0v, 1.0 - ab);
    let m = xt.mean();
    let v = xt.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se_m = (v_true / draws as f64).sqrt();
    let se_v = v_true * (2.0 / (draws - 1) as f64).sqrt();
    let (zm, zv) = ((m - m_true).abs() / se_m, (v - v_true).abs() / se_v);
    ok &= zm <= 3.0 && zv <= 3.0;
    notes.push(format!("q_sample |z| mean {zm:.2} var {zv:.2}"));

    let one = build_schedule(1, 0.3, 0.3).unwrap();
    let x0 = Tensor::randn(&[64], 1.0, &mut rng_for(3, &[]));
    let e = Tensor::randn(&[64], 1.0, &mut rng_for(4, &[]));
    let back = predict_mu(&q_sample(&x0, 1, &e, &one).unwrap(), 1, &e, &one).unwrap();
    let inv = max_abs_diff(back.data(), x0.data());
    ok &= inv < 1e-12;
    notes.push(format!("T=1 inversion err {inv:.1e}"));

    let s = |v: f64| Tensor::from_vec(vec![v]);
    let kls = [
        (kl_gaussians(&s(0.0), &s(1.0), &s(0.0), &s(1.0)).unwrap(), 0.0),
        (kl_gaussians(&s(0.0), &s(1.0), &s(1.0), &s(1.0)).unwrap(), 0.5),
        (kl_gaussians(&s(0.0), &s(2.0), &s(0.0), &s(1.0)).unwrap(), 0.153_426_4),
    ];
    let kl_err = kls.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // the reference value 0.1534264 is itself rounded to 7 decimals
    let kl_ok = kls[0].0 == 0.0 && (kls[1].0 - 0.5).abs() < 1e-9 && (kls[2].0 - 0.153_426_409_720_027_35).abs() < 1e-9;
    ok &= kl_ok;
    notes.push(format!("KL cases max |err| vs 7-digit refs {kl_err:.1e}"));

    // v=0 gives the posterior variance, v=1 the forward variance; t=1 has a
    // zero posterior variance and hits the log floor instead
    let mut sigma_err: f64 = 0.0;
    for t in 1..=n {
        let lo = predict_sigma(&s(0.0), t, &sched).unwrap().data()[0];
        let hi = predict_sigma(&s(1.0), t, &sched).unwrap().data()[0];
        let lo_ref = if t == 1 { sched.log_posterior_beta(1).exp() } else { sched.posterior_beta(t) };
        sigma_err = sigma_err.max((lo - lo_ref).abs() / lo_ref).max((hi - sched.beta(t)).abs() / sched.beta(t));
    }
    let endpoints = sigma_err < 1e-12;
    ok &= endpoints;
    notes.push(format!("predict_sigma endpoint rel err {sigma_err:.1e}"));

    let el = t.elapsed();
    Outcome::check(ok && within(el, 60.0), format!("{}, {:.1}s", notes.join("; "), el.as_secs_f64()))
}

// 3 -------------------------------------------------------------------------

fn oracle() -> Outcome {
    let t = Instant::now();
    let m = CorpusManifest::default();
    let mut worst_rt: f64 = 0.0;
    let mut worst_mouth: f64 = 0.0;
    let mut cases = 0;
    let mut rng = rng_for(5, &[]);
    for identity in 0..m.identities as u64 {
        let basis = make_face_basis(m.seed, identity, m.expr_dim, m.image_size).unwrap();
        for _ in 0..25 {
            let psi = Tensor::randn(&[m.expr_dim], 0.05, &mut rng).into_data();
            let mouth = rand_unit(&mut rng);
            let lin = basis.render_linear(&psi, mouth).unwrap();
            if lin.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                continue;
            }
            cases += 1;
            let (got, _) = basis.extract_expression(&basis.render(&psi, mouth).unwrap()).unwrap();
            worst_rt = worst_rt.max(max_abs_diff(&got, &psi));
            let (shut, _) = basis.extract_expression(&basis.render(&psi, 0.0).unwrap()).unwrap();
            worst_mouth = worst_mouth.max(max_abs_diff(&got, &shut));
        }
    }
    let smoke = RunConfig::smoke().corpus;
    let (a, b) = (tempdir(), tempdir());
    gen_corpus(&smoke, a.path(), 0).unwrap();
    gen_corpus(&smoke, b.path(), 2).unwrap();
    let same = snapshot_dir(a.path()).unwrap() == snapshot_dir(b.path()).unwrap();
    let el = t.elapsed();
    Outcome::check(
        cases > 0 && worst_rt <= 1e-9 && worst_mouth <= 1e-9 && same && within(el, 60.0),
        format!(
            "round trip {worst_rt:.1e} over {cases} unclamped frames, mouth invariance {worst_mouth:.1e}, corpus byte-identical {same}, {:.1}s",
            el.as_secs_f64()
        ),
    )
}

fn rand_unit(rng: &mut impl rand::Rng) -> f64 {
    rng.random::<f64>()
}

// 4 -------------------------------------------------------------------------

fn flie_suite() -> Outcome {
    let t = Instant::now();
    let affine: Vec<ExpressionVector> = (0..6).map(|i| vec![0.5 + 0.3 * i as f64, -1.0 * i as f64, 0.25 * i as f64]).collect();
    let f_aff = flie(&affine).unwrap();
    let hand = flie(&[vec![0.0], vec![1.0], vec![2.0], vec![4.0]]).unwrap();

    let mut rng = rng_for(6, &[]);
    let mut scale_err: f64 = 0.0;
    for _ in 0..50 {
        let means: Vec<ExpressionVector> = (0..5).map(|_| Tensor::randn(&[4], 1.0, &mut rng).into_data()).collect();
        let c = 0.01 + 50.0 * rand_unit(&mut rng);
        let scaled: Vec<ExpressionVector> = means.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
        let (a, b) = (flie(&means).unwrap(), flie(&scaled).unwrap());
        scale_err = scale_err.max((a - b).abs() / a.abs().max(1.0));
    }

    let sigmas = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0];
    let medians: Vec<f64> = sigmas
        .iter()
        .map(|&sigma| {
            let mut v: Vec<f64> = (0..50u64)
                .map(|seed| {
                    let mut r = rng_for(seed, &[0xf11e]);
                    let noisy: Vec<ExpressionVector> = affine
                        .iter()
                        .map(|m| m.iter().map(|x| x + sigma * Tensor::randn(&[1], 1.0, &mut r).data()[0]).collect())
                        .collect();
                    flie(&noisy).unwrap()
                })
                .collect();
            v.sort_by(f64::total_cmp);
            0.5 * (v[24] + v[25])
        })
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] >= w[0]);
    let el = t.elapsed();
    Outcome::check(
        f_aff < 1e-9 && (hand - 0.353_553_4).abs() <= 1e-6 && scale_err <= 1e-12 && monotone && within(el, 60.0),
        format!(
            "affine {f_aff:.1e}, hand case {hand:.7}, scale err {scale_err:.1e}, noise medians {:?} monotone {monotone}, {:.1}s",
            medians.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>(),
            el.as_secs_f64()
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn edit_suite() -> Outcome {
    let mut rng = rng_for(7, &[]);
    let mut bitwise = true;
    let mut affinity: f64 = 0.0;
    for _ in 0..200 {
        let e_n = Tensor::randn(&[16], 1.0, &mut rng).into_data();
        let e_y = Tensor::randn(&[16], 1.0, &mut rng).into_data();
        let d = edit_direction(&e_n, &e_y, EmotionLabel::Angry, SignConvention::Corrected).unwrap();
        bitwise &= apply_intensity(&e_n, &d, 0.0).unwrap() == e_n;
        bitwise &= apply_intensity(&e_n, &d, 1.0).unwrap() == e_y;
        let (k1, k2) = (rand_unit(&mut rng), rand_unit(&mut rng));
        let a = apply_intensity(&e_n, &d, k1).unwrap();
        let b = apply_intensity(&e_n, &d, k2).unwrap();
        let mid = apply_intensity(&e_n, &d, 0.5 * (k1 + k2)).unwrap();
        for j in 0..16 {
            affinity = affinity.max((a[j] + b[j] - 2.0 * mid[j]).abs());
        }
    }
    // the two sign conventions: corrected reaches the target, literal moves away
    let (n, y) = ([1.0, 0.0], [0.0, 1.0]);
    let corrected = edit_direction(&n, &y, EmotionLabel::Happy, SignConvention::Corrected).unwrap();
    let literal = edit_direction(&n, &y, EmotionLabel::Happy, SignConvention::Literal).unwrap();
    let conv_ok = apply_intensity(&n, &corrected, 1.0).unwrap() == y.to_vec()
        && apply_intensity(&n, &literal, 1.0).unwrap() == vec![2.0, -1.0]
        && literal.d.iter().zip(&corrected.d).all(|(a, b)| *a == -b);
    let traj_ok = [SignConvention::Corrected, SignConvention::Literal].iter().all(|&c| {
        let tr = build_trajectory(&[n.to_vec()], &[y.to_vec()], &uniform_intensities(3), 1, EmotionLabel::Happy, c).unwrap();
        tr[0][0] == n.to_vec() && flie(&tr.iter().map(|s| s[0].clone()).collect::<Vec<_>>()).unwrap() < 1e-12
    });
    Outcome::check(
        bitwise && affinity < 1e-12 && conv_ok && traj_ok,
        format!("endpoints bitwise {bitwise}, affinity dev {affinity:.1e}, conventions {conv_ok}, trajectories on both {traj_ok}"),
    )
}

// 6 -------------------------------------------------------------------------

fn gan_acceptance_cfg(seed: u64) -> GanConfig {
    GanConfig {
        lr: 1e-3,
        steps: 600,
        seed,
        ..GanConfig::default()
    }
}

fn coefficients(m: &CorpusManifest, clip_offset: usize) -> Vec<(ExpressionVector, EmotionLabel)> {
    let protos = m.prototypes().unwrap();
    let mut out = Vec::new();
    for identity in 0..m.identities {
        let basis = m.basis(identity).unwrap();
        for &label in &m.labels {
            for level in 1..=m.levels {
                for clip in 0..m.clips_per_cell {
                    let spec = ClipSpec {
                        identity,
                        label: Some(label),
                        level: Some(level),
                        clip: clip + clip_offset,
                    };
                    let c = synth_clip(m, &basis, &protos, spec).unwrap();
                    out.extend(extract_sequence(&basis, &c.frames).unwrap().into_iter().map(|p| (p, label)));
                }
            }
        }
    }
    out
}

fn gan_end_to_end() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let dir = tempdir();
    gen_corpus(&cfg.corpus, dir.path(), 0).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let data = gan_corpus(&corpus).unwrap();
    let (clf, clf_acc) = train_emo_classifier(
        &coefficients(&cfg.corpus, 0),
        &coefficients(&cfg.corpus, 1000),
        &ClassifierConfig::default(),
    )
    .unwrap();
    let names: Vec<&str> = gan_acceptance_cfg(0).ablations().iter().map(|c| c.ablation_name()).collect();
    let mut scores = vec![Vec::new(); names.len()];
    let mut diverged = Vec::new();
    for seed in 0..3 {
        for (i, gc) in gan_acceptance_cfg(seed).ablations().into_iter().enumerate() {
            match train_gan(&data, &gc) {
                Ok((model, _)) => {
                    let rc = RunConfig { seed, ..cfg.clone() };
                    scores[i].push(exprgen_emo_acc(&model, &clf, &rc).unwrap());
                }
                Err(e) => {
                    diverged.push(format!("{} seed {seed}: {e}", names[i]));
                    scores[i].push(0.0);
                }
            }
        }
    }
    let means: Vec<f64> = scores.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let full = means[0];
    let best = means.iter().copied().fold(f64::MIN, f64::max);
    const TIE: f64 = 0.05;
    let el = t.elapsed();
    let table: Vec<String> = names.iter().zip(&means).map(|(n, m)| format!("{n} {m:.3}")).collect();
    Outcome::check(
        clf_acc >= CLASSIFIER_MIN_ACCURACY && full >= 0.8 && diverged.is_empty() && full + TIE >= best && within(el, 600.0),
        format!(
            "classifier held-out {clf_acc:.3}; EmoAcc mean over 3 seeds: {}; diverged {diverged:?}; {:.0}s",
            table.join(", "),
            el.as_secs_f64()
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn diffusion_acceptance_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.image_size = 16;
    cfg.corpus.unlabeled_clips = 32;
    cfg.corpus.write_pgm = false;
    cfg.denoiser.image_size = 16;
    cfg.denoiser.base_channels = 8;
    cfg.denoiser.cond_embed_dim = 32;
    cfg.train.steps = 3000;
    cfg.train.batch = 16;
    cfg.train.lr = 1e-3;
    cfg.train.log_every = 500;
    cfg.sample.reference = ReferenceMode::Oracle;
    cfg.eval.level_sets = vec![3, 5];
    cfg.eval.held_out_clips = 0;
    // a random permutation of n samples has E|corr| ~ sqrt(2/pi)/sqrt(n-1),
    // about 0.30 at 8 frames; 24 frames puts the shuffled baseline near 0.17
    cfg.eval.frames = 24;
    cfg
}

fn overfit_one_clip(cfg: &RunConfig, corpus: &Corpus) -> (bool, String) {
    let one = load_training_clips(corpus, Shards::Labeled, 1).unwrap();
    let mut small = cfg.clone();
    small.train.batch = 4;
    let mut state = DiffusionState::fresh(&small).unwrap();
    let h = train_diffusion(&small, &one, &mut state, 200).unwrap();
    let avg = |s: &[emodiff::pipeline::DiffusionStepStats]| s.iter().map(|x| x.parts.simple).sum::<f64>() / s.len() as f64;
    let (first, last) = (avg(&h[..10]), avg(&h[h.len() - 20..]));
    let ok = last <= 0.5 * first;
    (ok, format!("(a) {} one clip, 200 steps, loss_simple {first:.3} -> {last:.3}", verdict_word(ok)))
}

fn diffusion_end_to_end(full: bool) -> Outcome {
    let t = Instant::now();
    let cfg = diffusion_acceptance_cfg();
    let dir = tempdir();
    gen_corpus(&cfg.corpus, dir.path(), 0).unwrap();
    let corpus = Corpus::open(dir.path()).unwrap();
    let (ok_a, line_a) = overfit_one_clip(&cfg, &corpus);
    if !full {
        return Outcome {
            verdict: if ok_a { Verdict::Skip } else { Verdict::Fail },
            detail: format!("{line_a} | (b)-(d) need 3000 denoiser steps, ~25 min; set {FULL_ENV}=1 to run"),
        };
    }

    // (b)-(d) full training on every shard, then oracle-reference sweeps
    let clips = load_training_clips(&corpus, Shards::All, 0).unwrap();
    let mut state = DiffusionState::fresh(&cfg).unwrap();
    let trained = Instant::now();
    let hist = train_diffusion(&cfg, &clips, &mut state, cfg.train.steps).unwrap();
    let train_s = trained.elapsed().as_secs_f64();
    let out = evaluate(&cfg, &corpus, Some(&state), None, 0).unwrap();

    let five: Vec<_> = out.trajectories.iter().filter(|t| t.levels == 5).collect();
    let rho: Vec<String> = five.iter().map(|t| format!("{} {:.2}", t.label, t.spearman)).collect();
    let projections: Vec<String> = five
        .iter()
        .map(|t| format!("{} {:?}", t.label, t.projections.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>()))
        .collect();
    let ok_b = five.iter().all(|t| t.spearman >= 0.9);

    let row = |name: &str| out.rows.iter().find(|r| r.metric == name).map_or(f64::NAN, |r| r.value);
    let (lip, shuffled) = (row("lip_sync"), row("lip_sync_shuffled"));
    let ok_c = lip >= 0.6 && shuffled < 0.3;

    let three: Vec<_> = out.trajectories.iter().filter(|t| t.levels == 3).collect();
    let ok_d = three.iter().all(|t| t.flie <= 5.0 * t.flie_oracle);
    let flies: Vec<String> = three
        .iter()
        .map(|t| format!("{} {:.3} vs oracle {:.1e}", t.label, t.flie, t.flie_oracle))
        .collect();

    let el = t.elapsed();
    let tail = hist.iter().rev().take(50).map(|s| s.parts.simple).sum::<f64>() / 50.0;
    let parts = [
        line_a,
        format!("(b) {} spearman {}; projections {}", verdict_word(ok_b), rho.join(", "), projections.join("; ")),
        format!("(c) {} lip_sync {lip:.3}, shuffled {shuffled:.3}", verdict_word(ok_c)),
        format!("(d) {} FLIE/3 {}", verdict_word(ok_d), flies.join(", ")),
        format!("training {} steps in {train_s:.0}s, final loss_simple {tail:.4}; total {:.0}s", cfg.train.steps, el.as_secs_f64()),
    ];
    Outcome::check(ok_a && ok_b && ok_c && ok_d && within(el, 1800.0), parts.join(" | "))
}

fn verdict_word(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

// 8 -------------------------------------------------------------------------

fn reproducibility() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::smoke();
    let run = || {
        let dir = tempdir();
        let layout = Layout::new(dir.path());
        cmd_gen_data(&cfg, &layout, 0).unwrap();
        cmd_train_exprgen(&cfg, &layout, false).unwrap();
        cmd_train_diffusion(&cfg, &layout, false).unwrap();
        cmd_sample(&cfg, &layout, &SampleInputs::default()).unwrap();
        let out = cmd_eval(&cfg, &layout, 0).unwrap();
        (std::fs::read(layout.metrics_csv()).unwrap(), out.rows.len())
    };
    let (a, rows) = run();
    let (b, _) = run();
    Outcome::check(
        a == b && rows > 0,
        format!("metrics.csv bit-identical across two runs ({rows} rows, {} bytes), {:.1}s", a.len(), t.elapsed().as_secs_f64()),
    )
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. from `cargo test -- --nocapture`) are ignored
    let full = std::env::var(FULL_ENV).is_ok_and(|v| v == "1");
    let skip = |what: &str| Outcome {
        verdict: Verdict::Skip,
        detail: format!("{what}; set {FULL_ENV}=1 to run"),
    };
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "gradient suite", Box::new(gradients)),
        (2, "diffusion math", Box::new(diffusion_math)),
        (3, "oracle face model", Box::new(oracle)),
        (4, "FLIE metric", Box::new(flie_suite)),
        (5, "emotion editing", Box::new(edit_suite)),
        (
            6,
            "expression GAN end to end",
            Box::new(move || if full { gan_end_to_end() } else { skip("12 GAN trainings, ~6 min") }),
        ),
        (
            7,
            "diffusion end to end",
            Box::new(move || diffusion_end_to_end(full)),
        ),
        (8, "pipeline reproducibility", Box::new(reproducibility)),
    ];
    // comma-separated criterion numbers, e.g. EMODIFF_ACCEPTANCE_ONLY=6,7
    let only: Option<Vec<u32>> = std::env::var(ONLY_ENV)
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let o = run();
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("criterion {id} [{tag}] {name}: {}", o.detail);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
