//! UNet backbone, reference encoder and feature fusion.

use rand::Rng;

use super::block::{CondFeatures, ResBlock, ResBlockCache};
use super::cond::{assemble_input, sinusoidal_encoding, ConditioningBundle, FrameInput, Mlp, MlpCache};
use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::numerics::attention::{CrossAttentionCache, SpatialAttentionCache};
use crate::numerics::layers::GroupNormCache;
use crate::numerics::{
    silu, silu_backward, silu_backward_slice, silu_slice, upsample_nearest2, upsample_nearest2_backward, Conv2d,
    CrossAttention, GroupNorm, Module, Parameter, SpatialAttention, Tensor,
};
use crate::seed::rng_for;
use crate::synthworld::Frame;

/// Standard deviation of the learned positional bias added before attention.
const POS_BIAS_STD: f64 = 0.5;

/// Cross-attention from backbone to reference features followed by a
/// spatial gate. A learned positional bias is added to both maps so that
/// attention can align locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub pos: Parameter,
    pub cross: CrossAttention,
    pub spatial: SpatialAttention,
}

#[derive(Clone, Debug)]
struct FusionCache {
    target: Tensor,
    reference: Tensor,
    cross: CrossAttentionCache,
    mid: Tensor,
    spatial: SpatialAttentionCache,
}

impl Fusion {
    fn new<R: Rng + ?Sized>(channels: usize, size: usize, kernel: usize, rng: &mut R) -> Self {
        Fusion {
            pos: Parameter::new(Tensor::randn(&[channels, size, size], POS_BIAS_STD, rng)),
            cross: CrossAttention::new(channels, channels, rng),
            spatial: SpatialAttention::new(kernel),
        }
    }

    fn forward(&self, h: &Tensor, r: &Tensor) -> Result<(Tensor, FusionCache)> {
        let p = &self.pos.value;
        let target = h.zip_map(p, |a, b| a + b)?;
        let reference = r.zip_map(p, |a, b| a + b)?;
        let (mid, cross) = self.cross.forward(&target, &reference)?;
        let (out, spatial) = self.spatial.forward(&mid)?;
        Ok((
            out,
            FusionCache {
                target,
                reference,
                cross,
                mid,
                spatial,
            },
        ))
    }

    fn backward(&mut self, c: &FusionCache, dy: &Tensor) -> (Tensor, Tensor) {
        let d_mid = self.spatial.backward(&c.mid, &c.spatial, dy);
        let (dt, dr) = self.cross.backward(&c.target, &c.reference, &c.cross, &d_mid);
        self.pos.accumulate(dt.data());
        self.pos.accumulate(dr.data());
        (dt, dr)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.pos"), &self.pos);
        self.cross.visit(&format!("{prefix}.cross"), f);
        self.spatial.visit(&format!("{prefix}.spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.pos"), &mut self.pos);
        self.cross.visit_mut(&format!("{prefix}.cross"), f);
        self.spatial.visit_mut(&format!("{prefix}.spatial"), f);
    }
}

/// Conditioning-free mirror of the backbone encoder applied to the identity
/// frame (replicated across the four input slots).
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceNet {
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub down: Vec<Conv2d>,
}

/// Reference maps indexed by encoder level; `None` where no fusion runs.
#[derive(Clone, Debug)]
pub struct ReferenceFeatures {
    pub maps: Vec<Option<Tensor>>,
    input: Tensor,
    blocks: Vec<ResBlockCache>,
    down_in: Vec<Tensor>,
}

impl ReferenceNet {
    fn new<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let (stem, blocks, down) = encoder_layers(cfg, None, rng);
        ReferenceNet { stem, blocks, down }
    }

    fn forward(&self, identity: &Frame, fusion: &[usize], frame_channels: usize) -> Result<ReferenceFeatures> {
        let slots: Vec<&Tensor> = vec![identity; 4];
        let input = Tensor::concat_channels(&slots)?;
        if input.dims3()?.0 != 4 * frame_channels {
            return Err(Error::Dimension {
                op: "reference_features",
                left: vec![frame_channels],
                right: identity.shape().to_vec(),
            });
        }
        let mut h = self.stem.forward(&input)?;
        let n = self.blocks.len();
        let mut maps = vec![None; n];
        let mut caches = Vec::with_capacity(n);
        let mut down_in = Vec::with_capacity(n);
        for (l, b) in self.blocks.iter().enumerate() {
            let (y, c) = b.forward(&h, None);
            caches.push(c);
            if fusion.contains(&l) {
                maps[l] = Some(y.clone());
            }
            h = y;
            if l + 1 < n {
                down_in.push(h.clone());
                h = self.down[l].forward(&h)?;
            }
        }
        Ok(ReferenceFeatures {
            maps,
            input,
            blocks: caches,
            down_in,
        })
    }

    fn backward(&mut self, feats: &ReferenceFeatures, d_maps: &[Option<Tensor>]) {
        let n = self.blocks.len();
        let mut carry: Option<Tensor> = None;
        for l in (0..n).rev() {
            let mut dy = carry.take();
            if let Some(dm) = &d_maps[l] {
                dy = Some(match dy {
                    Some(mut t) => {
                        t.add_assign(dm).expect("shape");
                        t
                    }
                    None => dm.clone(),
                });
            }
            let Some(dy) = dy else { continue };
            let dx = self.blocks[l].backward(&feats.blocks[l], &dy, None, None);
            carry = Some(if l > 0 {
                self.down[l - 1].backward(&feats.down_in[l - 1], &dx).expect("shape")
            } else {
                dx
            });
        }
        if let Some(d) = carry {
            self.stem.backward(&feats.input, &d).expect("shape");
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("ref", &mut |_, p| n += p.len());
        n
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.enc{l}"), f);
        }
        for (l, d) in self.down.iter().enumerate() {
            d.visit(&format!("{prefix}.down{l}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.enc{l}"), f);
        }
        for (l, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}.down{l}"), f);
        }
    }
}

type EncoderLayers = (Conv2d, Vec<ResBlock>, Vec<Conv2d>);

/// Stem, one residual block per level and strided downsampling between
/// levels (kernel 4, stride 2, padding 1).
fn encoder_layers<R: Rng + ?Sized>(
    cfg: &DenoiserConfig,
    film: Option<(usize, usize, usize)>,
    rng: &mut R,
) -> EncoderLayers {
    let c0 = cfg.level_channels(0);
    let stem = Conv2d::new(cfg.channels_in(), c0, 3, 1, 1, rng);
    let mut blocks = Vec::new();
    let mut down = Vec::new();
    let mut c_prev = c0;
    for l in 0..cfg.levels() {
        let c = cfg.level_channels(l);
        blocks.push(ResBlock::new(c_prev, c, film, rng));
        if l + 1 < cfg.levels() {
            down.push(Conv2d::new(c, c, 4, 2, 1, rng));
        }
        c_prev = c;
    }
    (stem, blocks, down)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub time_mlp: Mlp,
    pub audio_mlp: Mlp,
    pub expr_mlp: Mlp,
    pub stem: Conv2d,
    pub enc: Vec<ResBlock>,
    pub fusion: Vec<Option<Fusion>>,
    pub down: Vec<Conv2d>,
    pub mid: ResBlock,
    pub dec: Vec<ResBlock>,
    /// `up[l]` lifts level `l + 1` to level `l`.
    pub up: Vec<Conv2d>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv2d,
    pub reference: ReferenceNet,
}

#[derive(Clone, Debug)]
struct CondCache {
    time: (Vec<f64>, MlpCache),
    audio: (Vec<f64>, MlpCache),
    expr: (Vec<f64>, MlpCache),
    feats: CondFeatures,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    cond: CondCache,
    input: Tensor,
    enc: Vec<ResBlockCache>,
    fusion: Vec<Option<FusionCache>>,
    skip_channels: Vec<usize>,
    down_in: Vec<Tensor>,
    mid: ResBlockCache,
    dec: Vec<Option<ResBlockCache>>,
    up_in: Vec<Option<Tensor>>,
    out_norm: GroupNormCache,
    out_pre: Tensor,
    out_act: Tensor,
}

/// Predicted noise and the raw variance-interpolation channel.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub eps: Tensor,
    pub v_raw: Tensor,
    cache: ForwardCache,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, &[0xde05]);
        let d = cfg.cond_embed_dim;
        let time_mlp = Mlp::new(d, d, d, &mut rng);
        let audio_mlp = Mlp::new((2 * cfg.audio_window + 1) * cfg.audio_dim, d, d, &mut rng);
        let expr_mlp = Mlp::new((2 * cfg.expr_window + 1) * cfg.expr_dim, d, d, &mut rng);
        let film = Some((d, d, d));
        let (stem, enc, down) = encoder_layers(cfg, film, &mut rng);
        let fusion_levels = cfg.fusion_levels();
        let fusion = (0..cfg.levels())
            .map(|l| {
                fusion_levels
                    .contains(&l)
                    .then(|| Fusion::new(cfg.level_channels(l), cfg.level_size(l), cfg.spatial_kernel, &mut rng))
            })
            .collect();
        let top = cfg.level_channels(cfg.levels() - 1);
        let mid = ResBlock::new(top, top, film, &mut rng);
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for l in 0..cfg.levels() {
            let c = cfg.level_channels(l);
            let below = if l + 1 < cfg.levels() { cfg.level_channels(l + 1) } else { top };
            dec.push(ResBlock::new(below + c, c, film, &mut rng));
            if l + 1 < cfg.levels() {
                up.push(Conv2d::new(below, below, 3, 1, 1, &mut rng));
            }
        }
        let c0 = cfg.level_channels(0);
        let reference = ReferenceNet::new(cfg, &mut rng);
        Ok(Denoiser {
            cfg: cfg.clone(),
            time_mlp,
            audio_mlp,
            expr_mlp,
            stem,
            enc,
            fusion,
            down,
            mid,
            dec,
            up,
            out_norm: GroupNorm::new(c0),
            out_conv: Conv2d::zeroed(c0, 2 * cfg.frame_channels, 3, 1, 1),
            reference,
        })
    }

    pub fn reference_features(&self, identity: &Frame) -> Result<ReferenceFeatures> {
        let s = self.cfg.image_size;
        if identity.shape() != [self.cfg.frame_channels, s, s] {
            return Err(Error::Dimension {
                op: "reference_features",
                left: vec![self.cfg.frame_channels, s, s],
                right: identity.shape().to_vec(),
            });
        }
        self.reference
            .forward(identity, &self.cfg.fusion_levels(), self.cfg.frame_channels)
    }

    fn embed(&self, cond: &ConditioningBundle) -> Result<CondCache> {
        let audio = cond.audio_flat();
        let expr = cond.expr_flat();
        if audio.len() != self.audio_mlp.n_in() || expr.len() != self.expr_mlp.n_in() {
            return Err(Error::Dimension {
                op: "conditioning bundle",
                left: vec![self.audio_mlp.n_in(), self.expr_mlp.n_in()],
                right: vec![audio.len(), expr.len()],
            });
        }
        let (t_pre, tc) = self.time_mlp.forward(&sinusoidal_encoding(cond.t as f64, self.cfg.cond_embed_dim));
        let (a_pre, ac) = self.audio_mlp.forward(&audio);
        let (e_pre, ec) = self.expr_mlp.forward(&expr);
        let feats = CondFeatures {
            time: silu_slice(&t_pre),
            audio: silu_slice(&a_pre),
            expr: silu_slice(&e_pre),
        };
        Ok(CondCache {
            time: (t_pre, tc),
            audio: (a_pre, ac),
            expr: (e_pre, ec),
            feats,
        })
    }

    /// Time embedding `MLP(sinusoid(t))` before the per-block projections.
    pub fn embed_time(&self, t: usize) -> Vec<f64> {
        self.time_mlp
            .forward(&sinusoidal_encoding(t as f64, self.cfg.cond_embed_dim))
            .0
    }

    pub fn forward(
        &self,
        input: &FrameInput,
        cond: &ConditioningBundle,
        refs: &ReferenceFeatures,
    ) -> Result<DenoiserOutput> {
        let s = self.cfg.image_size;
        if input.noisy.shape() != [self.cfg.frame_channels, s, s] {
            return Err(Error::Dimension {
                op: "denoise_forward",
                left: vec![self.cfg.frame_channels, s, s],
                right: input.noisy.shape().to_vec(),
            });
        }
        let x = assemble_input(input)?;
        let cc = self.embed(cond)?;
        let feats = &cc.feats;
        let n = self.cfg.levels();
        let mut h = self.stem.forward(&x)?;
        let mut enc = Vec::with_capacity(n);
        let mut fusion = Vec::with_capacity(n);
        let mut skips = Vec::with_capacity(n);
        let mut down_in = Vec::with_capacity(n);
        for l in 0..n {
            let (y, c) = self.enc[l].forward(&h, Some(feats));
            enc.push(c);
            h = y;
            match (&self.fusion[l], refs.maps.get(l).and_then(Option::as_ref)) {
                (Some(f), Some(r)) => {
                    let (y, c) = f.forward(&h, r)?;
                    fusion.push(Some(c));
                    h = y;
                }
                (Some(_), None) => {
                    return Err(Error::config(format!("reference features missing for level {l}")));
                }
                _ => fusion.push(None),
            }
            skips.push(h.clone());
            if l + 1 < n {
                down_in.push(h.clone());
                h = self.down[l].forward(&h)?;
            }
        }
        let (y, mid) = self.mid.forward(&h, Some(feats));
        h = y;
        let mut dec = vec![None; n];
        let mut up_in = vec![None; n];
        let mut skip_channels = vec![0; n];
        for l in (0..n).rev() {
            skip_channels[l] = h.dims3()?.0;
            let cat = Tensor::concat_channels(&[&h, &skips[l]])?;
            let (y, c) = self.dec[l].forward(&cat, Some(feats));
            dec[l] = Some(c);
            h = y;
            if l > 0 {
                let u = upsample_nearest2(&h);
                h = self.up[l - 1].forward(&u)?;
                up_in[l] = Some(u);
            }
        }
        let (out_pre, out_norm) = self.out_norm.forward(&h)?;
        let out_act = silu(&out_pre);
        let y = self.out_conv.forward(&out_act)?;
        let fc = self.cfg.frame_channels;
        let parts = y.split_channels(&[fc, fc])?;
        let [eps, v_raw]: [Tensor; 2] = parts.try_into().expect("two output groups");
        Ok(DenoiserOutput {
            eps,
            v_raw,
            cache: ForwardCache {
                cond: cc,
                input: x,
                enc,
                fusion,
                skip_channels,
                down_in,
                mid,
                dec,
                up_in,
                out_norm,
                out_pre,
                out_act,
            },
        })
    }

    /// Inference helper returning `(eps, v_raw)`.
    pub fn predict(
        &self,
        input: &FrameInput,
        cond: &ConditioningBundle,
        refs: &ReferenceFeatures,
    ) -> Result<(Tensor, Tensor)> {
        let out = self.forward(input, cond, refs)?;
        Ok((out.eps, out.v_raw))
    }

    /// Backpropagates output gradients through the backbone, the
    /// conditioning MLPs and the reference encoder.
    pub fn backward(&mut self, out: &DenoiserOutput, refs: &ReferenceFeatures, d_eps: &Tensor, d_v_raw: &Tensor) {
        let c = &out.cache;
        let feats = &c.cond.feats;
        let mut d_feats = feats.zeros_like();
        let n = self.cfg.levels();
        let dy = Tensor::concat_channels(&[d_eps, d_v_raw]).expect("output shapes");
        let d_act = self.out_conv.backward(&c.out_act, &dy).expect("shape");
        let d_pre = silu_backward(&c.out_pre, &d_act);
        let mut dh = self.out_norm.backward(&c.out_norm, &d_pre);
        let mut d_skips: Vec<Option<Tensor>> = vec![None; n];
        for l in 0..n {
            if l > 0 {
                let u = c.up_in[l].as_ref().expect("upsample cache");
                let du = self.up[l - 1].backward(u, &dh).expect("shape");
                dh = upsample_nearest2_backward(&du);
            }
            let dc = self.dec[l].backward(c.dec[l].as_ref().expect("decoder cache"), &dh, Some(feats), Some(&mut d_feats));
            let cs = c.skip_channels[l];
            let total = dc.dims3().expect("rank-3").0;
            let mut parts = dc.split_channels(&[cs, total - cs]).expect("split");
            d_skips[l] = parts.pop();
            dh = parts.pop().expect("two parts");
        }
        dh = self.mid.backward(&c.mid, &dh, Some(feats), Some(&mut d_feats));
        let mut d_refs: Vec<Option<Tensor>> = vec![None; n];
        for l in (0..n).rev() {
            if l + 1 < n {
                dh = self.down[l].backward(&c.down_in[l], &dh).expect("shape");
            }
            dh.add_assign(d_skips[l].as_ref().expect("skip grad")).expect("shape");
            if let (Some(f), Some(fc)) = (&mut self.fusion[l], &c.fusion[l]) {
                let (dt, dr) = f.backward(fc, &dh);
                dh = dt;
                d_refs[l] = Some(dr);
            }
            dh = self.enc[l].backward(&c.enc[l], &dh, Some(feats), Some(&mut d_feats));
        }
        self.stem.backward(&c.input, &dh).expect("shape");
        self.reference.backward(refs, &d_refs);

        let (t_pre, tc) = &c.cond.time;
        let (a_pre, ac) = &c.cond.audio;
        let (e_pre, ec) = &c.cond.expr;
        self.time_mlp.backward(tc, &silu_backward_slice(t_pre, &d_feats.time));
        self.audio_mlp.backward(ac, &silu_backward_slice(a_pre, &d_feats.audio));
        self.expr_mlp.backward(ec, &silu_backward_slice(e_pre, &d_feats.expr));
    }

    /// Parameters of the stem, encoder blocks and downsampling layers.
    pub fn encoder_param_count(&self) -> usize {
        let mut n = self.stem.weight.len() + self.stem.bias.len();
        for b in &self.enc {
            b.visit("", &mut |_, p| n += p.len());
        }
        for d in &self.down {
            n += d.weight.len() + d.bias.len();
        }
        n
    }

    /// FiLM projection parameters inside the encoder blocks.
    pub fn encoder_film_param_count(&self) -> usize {
        self.enc.iter().map(ResBlock::film_param_count).sum()
    }
}

impl Module for Denoiser {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.time_mlp.visit("cond.time", f);
        self.audio_mlp.visit("cond.audio", f);
        self.expr_mlp.visit("cond.expr", f);
        self.stem.visit("stem", f);
        for (l, b) in self.enc.iter().enumerate() {
            b.visit(&format!("enc{l}"), f);
            if let Some(fu) = &self.fusion[l] {
                fu.visit(&format!("fuse{l}"), f);
            }
        }
        for (l, d) in self.down.iter().enumerate() {
            d.visit(&format!("down{l}"), f);
        }
        self.mid.visit("mid", f);
        for (l, b) in self.dec.iter().enumerate() {
            b.visit(&format!("dec{l}"), f);
        }
        for (l, u) in self.up.iter().enumerate() {
            u.visit(&format!("up{l}"), f);
        }
        self.out_norm.visit("out.norm", f);
        self.out_conv.visit("out.conv", f);
        self.reference.visit("ref", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.time_mlp.visit_mut("cond.time", f);
        self.audio_mlp.visit_mut("cond.audio", f);
        self.expr_mlp.visit_mut("cond.expr", f);
        self.stem.visit_mut("stem", f);
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&format!("enc{l}"), f);
            if let Some(fu) = &mut self.fusion[l] {
                fu.visit_mut(&format!("fuse{l}"), f);
            }
        }
        for (l, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&format!("down{l}"), f);
        }
        self.mid.visit_mut("mid", f);
        for (l, b) in self.dec.iter_mut().enumerate() {
            b.visit_mut(&format!("dec{l}"), f);
        }
        for (l, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&format!("up{l}"), f);
        }
        self.out_norm.visit_mut("out.norm", f);
        self.out_conv.visit_mut("out.conv", f);
        self.reference.visit_mut("ref", f);
    }
}
