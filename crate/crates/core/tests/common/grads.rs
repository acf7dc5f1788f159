//! Finite-difference checks of every differentiable layer and both models.
//!
//! Each case perturbs the layer's parameters off their initial values,
//! contracts the output with a fixed random tensor, and compares the
//! analytic gradient of that scalar against central differences at a random
//! subset of coordinates (at least [`MIN_PROBES`] per case).

use emodiff::denoiser::{CondFeatures, ConditioningBundle, Denoiser, DenoiserConfig, FrameInput, Mlp, ResBlock};
use emodiff::diffusion::{build_schedule, loss_vlb_term_with_grad, region_loss_with_grad};
use emodiff::exprgen::{EmotionLabel, GanConfig, Generator, GlobalDiscriminator, LocalDiscriminator};
use emodiff::numerics::layers::{Conv1d, Embedding, GroupNorm, Linear};
use emodiff::numerics::{
    grad_check, silu, silu_backward, upsample_nearest2, upsample_nearest2_backward, Conv2d, CrossAttention,
    GradCheckConfig, Module, Parameter, SpatialAttention, Tensor,
};
use emodiff::seed::rng_for;
use emodiff::synthworld::region_masks;
use rand_chacha::ChaCha8Rng;

pub const MIN_PROBES: usize = 100;
pub const LAYER_REL_TOL: f64 = 1e-4;
pub const MODEL_REL_TOL: f64 = 1e-3;
const ABS_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Adapts a layer's `visit`/`visit_mut` pair to [`Module`].
macro_rules! as_module {
    ($wrap:ident, $ty:ty) => {
        #[derive(Clone)]
        struct $wrap($ty);
        impl Module for $wrap {
            fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
                self.0.visit("layer", f);
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
                self.0.visit_mut("layer", f);
            }
        }
    };
}

as_module!(LinearM, Linear);
as_module!(Conv2dM, Conv2d);
as_module!(Conv1dM, Conv1d);
as_module!(GroupNormM, GroupNorm);
as_module!(EmbeddingM, Embedding);
as_module!(CrossAttentionM, CrossAttention);
as_module!(SpatialAttentionM, SpatialAttention);
as_module!(ResBlockM, ResBlock);
as_module!(MlpM, Mlp);

#[derive(Clone)]
struct Stateless;

impl Module for Stateless {
    fn visit_params<'a>(&'a self, _: &mut dyn FnMut(String, &'a Parameter)) {}
    fn visit_params_mut(&mut self, _: &mut dyn FnMut(String, &mut Parameter)) {}
}

fn rng(seed: u64) -> ChaCha8Rng {
    rng_for(seed, &[0x67ad])
}

fn jitter<M: Module>(m: &mut M, seed: u64) {
    let mut r = rng(seed);
    m.visit_params_mut(&mut |_, p| {
        let noise = Tensor::randn(p.value.shape(), 0.2, &mut r);
        p.value.add_assign(&noise).unwrap();
    });
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks parameters followed by `inputs`. `value` evaluates the scalar;
/// `backward` runs forward and backward on `m` (gradients already zeroed)
/// and returns the input gradients.
fn check<M, V, B>(name: &'static str, mut m: M, inputs: Vec<Tensor>, rel_tol: f64, seed: u64, value: V, backward: B) -> GradCase
where
    M: Module + Clone,
    V: Fn(&M, &[Tensor]) -> f64,
    B: FnOnce(&mut M, &[Tensor]) -> Vec<Tensor>,
{
    m.zero_grad();
    let d_inputs = backward(&mut m, &inputs);
    let mut values = m.flat_values();
    let mut analytic = m.flat_grads();
    let np = values.len();
    values.extend(inputs);
    analytic.extend(d_inputs);
    let total: usize = values.iter().map(Tensor::len).sum();
    // smallest per-tensor sample that still reaches the probe budget
    let covered = |per: usize| values.iter().map(|v| v.len().min(per)).sum::<usize>();
    let mut per = 8;
    while covered(per) < MIN_PROBES.min(total) {
        per += 1;
    }
    let probe = m.clone();
    let report = grad_check(
        |vals| {
            let mut mm = probe.clone();
            mm.set_values(&vals[..np]);
            value(&mm, &vals[np..])
        },
        &values,
        &analytic,
        GradCheckConfig::new(rel_tol, ABS_TOL).sampled(per, seed),
    )
    .unwrap();
    let probes: usize = report.inputs.iter().map(|r| r.checked).sum();
    GradCase {
        name,
        probes: probes.min(total),
        max_rel_error: report.max_rel_error(),
        passed: report.passed() && probes >= MIN_PROBES.min(total),
    }
}

fn linear() -> GradCase {
    let mut r = rng(1);
    let mut l = LinearM(Linear::new(7, 5, &mut r));
    jitter(&mut l, 2);
    let x = Tensor::randn(&[7], 1.0, &mut r);
    let w = Tensor::randn(&[5], 1.0, &mut r).into_data();
    let w2 = w.clone();
    check(
        "linear",
        l,
        vec![x],
        LAYER_REL_TOL,
        3,
        move |m, xs| dot(&m.0.forward(xs[0].data()), &w),
        move |m, xs| vec![Tensor::from_vec(m.0.backward(xs[0].data(), &w2))],
    )
}

fn conv2d(name: &'static str, kernel: usize, stride: usize, pad: usize, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let mut c = Conv2dM(Conv2d::new(3, 4, kernel, stride, pad, &mut r));
    jitter(&mut c, seed + 1);
    let x = Tensor::randn(&[3, 6, 6], 1.0, &mut r);
    let out_shape = c.0.forward(&x).unwrap().shape().to_vec();
    let w = Tensor::randn(&out_shape, 1.0, &mut r);
    let w2 = w.clone();
    check(
        name,
        c,
        vec![x],
        LAYER_REL_TOL,
        seed + 2,
        move |m, xs| m.0.forward(&xs[0]).unwrap().dot(&w).unwrap(),
        move |m, xs| vec![m.0.backward(&xs[0], &w2).unwrap()],
    )
}

fn conv1d(name: &'static str, dilation: usize, causal: bool, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let (c_in, len) = (3, 7);
    let mut c = Conv1dM(Conv1d::new(c_in, 4, 3, dilation, causal, &mut r));
    jitter(&mut c, seed + 1);
    let x = Tensor::randn(&[c_in * len], 1.0, &mut r);
    let n_out = c.0.forward(x.data(), c_in, len).unwrap().len();
    let w = Tensor::randn(&[n_out], 1.0, &mut r).into_data();
    let w2 = w.clone();
    check(
        name,
        c,
        vec![x],
        LAYER_REL_TOL,
        seed + 2,
        move |m, xs| dot(&m.0.forward(xs[0].data(), c_in, len).unwrap(), &w),
        move |m, xs| vec![Tensor::from_vec(m.0.backward(xs[0].data(), c_in, len, &w2).unwrap())],
    )
}

fn group_norm() -> GradCase {
    let mut r = rng(20);
    let mut g = GroupNormM(GroupNorm::new(8));
    jitter(&mut g, 21);
    let x = Tensor::randn(&[8, 3, 3], 1.0, &mut r);
    let w = Tensor::randn(&[8, 3, 3], 1.0, &mut r);
    let w2 = w.clone();
    check(
        "group_norm",
        g,
        vec![x],
        LAYER_REL_TOL,
        22,
        move |m, xs| m.0.forward(&xs[0]).unwrap().0.dot(&w).unwrap(),
        move |m, xs| {
            let (_, cache) = m.0.forward(&xs[0]).unwrap();
            vec![m.0.backward(&cache, &w2)]
        },
    )
}

fn embedding() -> GradCase {
    let mut r = rng(30);
    let e = EmbeddingM(Embedding::new(8, 6, &mut r));
    let w = Tensor::randn(&[6], 1.0, &mut r).into_data();
    let w2 = w.clone();
    check(
        "embedding",
        e,
        Vec::new(),
        LAYER_REL_TOL,
        31,
        move |m, _| dot(m.0.forward(3), &w) + 0.5 * dot(m.0.forward(5), &w),
        move |m, _| {
            m.0.backward(3, &w2);
            m.0.backward(5, &w2.iter().map(|v| 0.5 * v).collect::<Vec<_>>());
            Vec::new()
        },
    )
}

fn silu_case() -> GradCase {
    let mut r = rng(40);
    let x = Tensor::randn(&[4, 5, 5], 2.0, &mut r);
    let w = Tensor::randn(&[4, 5, 5], 1.0, &mut r);
    let w2 = w.clone();
    check(
        "silu",
        Stateless,
        vec![x],
        LAYER_REL_TOL,
        41,
        move |_, xs| silu(&xs[0]).dot(&w).unwrap(),
        move |_, xs| vec![silu_backward(&xs[0], &w2)],
    )
}

fn upsample_case() -> GradCase {
    let mut r = rng(50);
    let x = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
    let w = Tensor::randn(&[3, 8, 8], 1.0, &mut r);
    let w2 = w.clone();
    check(
        "upsample_nearest2",
        Stateless,
        vec![x],
        LAYER_REL_TOL,
        51,
        move |_, xs| upsample_nearest2(&xs[0]).dot(&w).unwrap(),
        move |_, _| vec![upsample_nearest2_backward(&w2)],
    )
}

fn cross_attention() -> GradCase {
    let mut r = rng(60);
    let mut a = CrossAttentionM(CrossAttention::new(4, 3, &mut r));
    jitter(&mut a, 61);
    let target = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
    let reference = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
    let w2 = w.clone();
    check(
        "cross_attention",
        a,
        vec![target, reference],
        LAYER_REL_TOL,
        62,
        move |m, xs| m.0.forward(&xs[0], &xs[1]).unwrap().0.dot(&w).unwrap(),
        move |m, xs| {
            let (_, cache) = m.0.forward(&xs[0], &xs[1]).unwrap();
            let (dt, dr) = m.0.backward(&xs[0], &xs[1], &cache, &w2);
            vec![dt, dr]
        },
    )
}

fn spatial_attention() -> GradCase {
    let mut r = rng(70);
    let mut a = SpatialAttentionM(SpatialAttention::new(3));
    jitter(&mut a, 71);
    let x = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
    let w = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
    let w2 = w.clone();
    check(
        "spatial_attention",
        a,
        vec![x],
        LAYER_REL_TOL,
        72,
        move |m, xs| m.0.forward(&xs[0]).unwrap().0.dot(&w).unwrap(),
        move |m, xs| {
            let (_, cache) = m.0.forward(&xs[0]).unwrap();
            vec![m.0.backward(&xs[0], &cache, &w2)]
        },
    )
}

fn cond_from(xs: &[Tensor]) -> CondFeatures {
    CondFeatures {
        time: xs[1].data().to_vec(),
        audio: xs[2].data().to_vec(),
        expr: xs[3].data().to_vec(),
    }
}

fn res_block(film: bool, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let (td, ad, ed) = (5, 3, 4);
    let mut b = ResBlockM(ResBlock::new(4, 8, film.then_some((td, ad, ed)), &mut r));
    jitter(&mut b, seed + 1);
    let mut inputs = vec![Tensor::randn(&[4, 4, 4], 1.0, &mut r)];
    if film {
        for d in [td, ad, ed] {
            inputs.push(Tensor::randn(&[d], 1.0, &mut r));
        }
    }
    let w = Tensor::randn(&[8, 4, 4], 1.0, &mut r);
    let w2 = w.clone();
    check(
        if film { "res_block_film" } else { "res_block" },
        b,
        inputs,
        LAYER_REL_TOL,
        seed + 2,
        move |m, xs| {
            let cond = (xs.len() > 1).then(|| cond_from(xs));
            m.0.forward(&xs[0], cond.as_ref()).0.dot(&w).unwrap()
        },
        move |m, xs| {
            let cond = (xs.len() > 1).then(|| cond_from(xs));
            let (_, cache) = m.0.forward(&xs[0], cond.as_ref());
            let mut d_cond = cond.as_ref().map(CondFeatures::zeros_like);
            let dx = m.0.backward(&cache, &w2, cond.as_ref(), d_cond.as_mut());
            let mut out = vec![dx];
            if let Some(d) = d_cond {
                out.extend([d.time, d.audio, d.expr].map(Tensor::from_vec));
            }
            out
        },
    )
}

fn mlp() -> GradCase {
    let mut r = rng(90);
    let mut l = MlpM(Mlp::new(6, 10, 4, &mut r));
    jitter(&mut l, 91);
    let x = Tensor::randn(&[6], 1.0, &mut r);
    let w = Tensor::randn(&[4], 1.0, &mut r).into_data();
    let w2 = w.clone();
    check(
        "mlp",
        l,
        vec![x],
        LAYER_REL_TOL,
        92,
        move |m, xs| dot(&m.0.forward(xs[0].data()).0, &w),
        move |m, xs| {
            let (_, cache) = m.0.forward(xs[0].data());
            vec![Tensor::from_vec(m.0.backward(&cache, &w2))]
        },
    )
}

fn vlb_term() -> GradCase {
    let sched = build_schedule(100, 1e-3, 0.2).unwrap();
    let mut r = rng(100);
    let x0 = Tensor::randn(&[1, 4, 4], 0.5, &mut r);
    let xt = Tensor::randn(&[1, 4, 4], 1.0, &mut r);
    let eps = Tensor::randn(&[1, 4, 4], 1.0, &mut r);
    let v = Tensor::randn(&[1, 4, 4], 1.0, &mut r).map(|x| 0.5 * (x.tanh() + 1.0));
    let (x0b, xtb, epsb, s2) = (x0.clone(), xt.clone(), eps.clone(), sched.clone());
    check(
        "vlb_term",
        Stateless,
        vec![v],
        LAYER_REL_TOL,
        101,
        move |_, xs| loss_vlb_term_with_grad(&x0, &xt, 40, &eps, &xs[0], &sched).unwrap().0,
        move |_, xs| vec![loss_vlb_term_with_grad(&x0b, &xtb, 40, &epsb, &xs[0], &s2).unwrap().1],
    )
}

fn region_loss() -> GradCase {
    let masks = region_masks(16).unwrap();
    let mut r = rng(110);
    let eps = Tensor::randn(&[1, 16, 16], 1.0, &mut r);
    let pred = Tensor::randn(&[1, 16, 16], 1.0, &mut r);
    let (e2, m2) = (eps.clone(), masks.lip.clone());
    check(
        "region_loss",
        Stateless,
        vec![pred],
        LAYER_REL_TOL,
        111,
        move |_, xs| region_loss_with_grad(&eps, &xs[0], &masks.lip).unwrap().0,
        move |_, xs| vec![region_loss_with_grad(&e2, &xs[0], &m2).unwrap().1],
    )
}

fn gan_cfg(use_tcn: bool) -> GanConfig {
    GanConfig {
        expr_dim: 4,
        noise_dim: 3,
        hidden_dim: 6,
        label_dim: 3,
        disc_channels: 5,
        use_tcn,
        ..GanConfig::default()
    }
}

fn frames_of(t: &Tensor, k: usize) -> Vec<Vec<f64>> {
    t.data().chunks(k).map(<[f64]>::to_vec).collect()
}

fn generator() -> GradCase {
    let mut g = Generator::new(&gan_cfg(true), &mut rng(120));
    jitter(&mut g, 121);
    let z = [0.4, -0.2, 0.9];
    let n = 4;
    let w = Tensor::randn(&[n, 4], 1.0, &mut rng(122));
    let w2 = frames_of(&w, 4);
    check(
        "expression_generator",
        g,
        Vec::new(),
        MODEL_REL_TOL,
        123,
        move |m, _| {
            let seq = m.generate(EmotionLabel::Angry, &z, n);
            dot(&seq.concat(), w.data())
        },
        move |m, _| {
            let (_, cache) = m.rollout(EmotionLabel::Angry, &z, n);
            m.backward(&cache, &w2);
            Vec::new()
        },
    )
}

fn global_disc(use_tcn: bool) -> GradCase {
    let mut d = GlobalDiscriminator::new(&gan_cfg(use_tcn), &mut rng(130));
    jitter(&mut d, 131);
    let frames = Tensor::randn(&[6, 4], 1.0, &mut rng(132));
    let cw: Vec<f64> = Tensor::randn(&[8], 1.0, &mut rng(133)).into_data();
    let cw2 = cw.clone();
    let y = EmotionLabel::Surprised;
    check(
        if use_tcn { "global_discriminator_tcn" } else { "global_discriminator_plain" },
        d,
        vec![frames],
        MODEL_REL_TOL,
        134,
        move |m, xs| {
            let o = m.forward(&frames_of(&xs[0], 4), y);
            1.7 * o.score + dot(&o.class_logits, &cw)
        },
        move |m, xs| {
            let out = m.forward(&frames_of(&xs[0], 4), y);
            let de = m.backward(&out, 1.7, &cw2);
            vec![Tensor::new(vec![6, 4], de.concat()).unwrap()]
        },
    )
}

fn local_disc() -> GradCase {
    let mut d = LocalDiscriminator::new(&gan_cfg(true), &mut rng(140));
    jitter(&mut d, 141);
    let e = Tensor::randn(&[4], 1.0, &mut rng(142));
    let y = EmotionLabel::Happy;
    check(
        "local_discriminator",
        d,
        vec![e],
        MODEL_REL_TOL,
        143,
        move |m, xs| m.score(xs[0].data(), y),
        move |m, xs| {
            let out = m.forward(xs[0].data(), y);
            vec![Tensor::from_vec(m.backward(&out, 1.0))]
        },
    )
}

fn denoiser() -> GradCase {
    let cfg = DenoiserConfig {
        image_size: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        cond_embed_dim: 8,
        audio_dim: 2,
        expr_dim: 3,
        ..DenoiserConfig::default()
    };
    let mut m = Denoiser::new(&cfg).unwrap();
    jitter(&mut m, 150);
    let mut r = rng(151);
    let mut frame = || Tensor::randn(&[1, 8, 8], 1.0, &mut r);
    let x = FrameInput {
        noisy: frame(),
        identity: frame(),
        motion_prev2: frame(),
        motion_prev1: frame(),
    };
    let (w_eps, w_v) = (frame(), frame());
    let mut r = rng(152);
    let c = ConditioningBundle {
        t: 7,
        audio: (0..3).map(|_| Tensor::randn(&[2], 1.0, &mut r).into_data()).collect(),
        expr: (0..3).map(|_| Tensor::randn(&[3], 1.0, &mut r).into_data()).collect(),
    };
    let (x2, c2, we2, wv2) = (x.clone(), c.clone(), w_eps.clone(), w_v.clone());
    check(
        "denoiser_end_to_end",
        m,
        Vec::new(),
        MODEL_REL_TOL,
        153,
        move |m, _| {
            let refs = m.reference_features(&x.identity).unwrap();
            let (e, v) = m.predict(&x, &c, &refs).unwrap();
            e.dot(&w_eps).unwrap() + v.dot(&w_v).unwrap()
        },
        move |m, _| {
            let refs = m.reference_features(&x2.identity).unwrap();
            let out = m.forward(&x2, &c2, &refs).unwrap();
            m.backward(&out, &refs, &we2, &wv2);
            Vec::new()
        },
    )
}

/// Every case of the suite, in a fixed order.
pub fn gradient_suite() -> Vec<GradCase> {
    vec![
        linear(),
        conv2d("conv2d_k3_s1", 3, 1, 1, 10),
        conv2d("conv2d_k4_s2", 4, 2, 1, 13),
        conv2d("conv2d_k1", 1, 1, 0, 16),
        conv1d("conv1d_causal_dilated", 2, true, 80),
        conv1d("conv1d_symmetric", 1, false, 83),
        group_norm(),
        embedding(),
        silu_case(),
        upsample_case(),
        cross_attention(),
        spatial_attention(),
        res_block(false, 86),
        res_block(true, 87),
        mlp(),
        vlb_term(),
        region_loss(),
        generator(),
        global_disc(true),
        global_disc(false),
        local_disc(),
        denoiser(),
    ]
}
