//! FiLM-conditioned residual blocks.

use rand::Rng;

use crate::numerics::{silu, silu_backward, Conv2d, GroupNorm, Linear, Parameter, Tensor};
use crate::numerics::layers::GroupNormCache;

/// Per-forward conditioning features, each already passed through SiLU.
#[derive(Clone, Debug)]
pub struct CondFeatures {
    pub time: Vec<f64>,
    pub audio: Vec<f64>,
    pub expr: Vec<f64>,
}

impl CondFeatures {
    pub fn zeros_like(&self) -> CondFeatures {
        CondFeatures {
            time: vec![0.0; self.time.len()],
            audio: vec![0.0; self.audio.len()],
            expr: vec![0.0; self.expr.len()],
        }
    }
}

/// Scale and shift for one channel, as `(scale, shift)` pairs for time,
/// audio and expression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilmCoefs {
    pub time: (f64, f64),
    pub audio: (f64, f64),
    pub expr: (f64, f64),
}

impl FilmCoefs {
    pub const IDENTITY: FilmCoefs = FilmCoefs {
        time: (1.0, 0.0),
        audio: (1.0, 0.0),
        expr: (1.0, 0.0),
    };

    /// `e_s·(a_s·(t_s·h + t_b) + a_b) + e_b`.
    pub fn apply(&self, h: f64) -> f64 {
        let inner = self.time.0 * h + self.time.1;
        let mid = self.audio.0 * inner + self.audio.1;
        self.expr.0 * mid + self.expr.1
    }
}

/// Zero-initialised projections from conditioning features to per-channel
/// `(Δscale, shift)`; the applied scale is `1 + Δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmProjections {
    pub time: Linear,
    pub audio: Linear,
    pub expr: Linear,
}

impl FilmProjections {
    pub fn new(channels: usize, time_dim: usize, audio_dim: usize, expr_dim: usize) -> Self {
        FilmProjections {
            time: Linear::zeroed(time_dim, 2 * channels),
            audio: Linear::zeroed(audio_dim, 2 * channels),
            expr: Linear::zeroed(expr_dim, 2 * channels),
        }
    }

    pub fn coefs(&self, cond: &CondFeatures) -> Vec<FilmCoefs> {
        let t = self.time.forward(&cond.time);
        let a = self.audio.forward(&cond.audio);
        let e = self.expr.forward(&cond.expr);
        let c = t.len() / 2;
        (0..c)
            .map(|ch| FilmCoefs {
                time: (1.0 + t[ch], t[c + ch]),
                audio: (1.0 + a[ch], a[c + ch]),
                expr: (1.0 + e[ch], e[c + ch]),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        [&self.time, &self.audio, &self.expr]
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.time.visit(&format!("{prefix}.time"), f);
        self.audio.visit(&format!("{prefix}.audio"), f);
        self.expr.visit(&format!("{prefix}.expr"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.time.visit_mut(&format!("{prefix}.time"), f);
        self.audio.visit_mut(&format!("{prefix}.audio"), f);
        self.expr.visit_mut(&format!("{prefix}.expr"), f);
    }
}

/// Applies per-channel coefficients to a normalised map.
pub fn film_apply(n: &Tensor, coefs: &[FilmCoefs]) -> Tensor {
    let plane = n.len() / coefs.len();
    let mut out = n.data().to_vec();
    for (ch, c) in coefs.iter().enumerate() {
        out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = c.apply(*v));
    }
    Tensor::new(n.shape().to_vec(), out).expect("shape preserved")
}

/// Returns `dn` and the time, audio and expression projection gradients,
/// each laid out `[Δscale…, shift…]`.
fn film_backward(n: &Tensor, coefs: &[FilmCoefs], dy: &Tensor) -> (Tensor, [Vec<f64>; 3]) {
    let c = coefs.len();
    let plane = n.len() / c;
    let mut dn = vec![0.0; n.len()];
    let mut dt = vec![0.0; 2 * c];
    let mut da = vec![0.0; 2 * c];
    let mut de = vec![0.0; 2 * c];
    for (ch, k) in coefs.iter().enumerate() {
        let (ts, tb) = k.time;
        let (as_, ab) = k.audio;
        let (es, _) = k.expr;
        for p in ch * plane..(ch + 1) * plane {
            let g = dy.data()[p];
            let x = n.data()[p];
            let inner = ts * x + tb;
            let mid = as_ * inner + ab;
            de[ch] += g * mid;
            de[c + ch] += g;
            let g_mid = es * g;
            da[ch] += g_mid * inner;
            da[c + ch] += g_mid;
            let g_inner = as_ * g_mid;
            dt[ch] += g_inner * x;
            dt[c + ch] += g_inner;
            dn[p] = ts * g_inner;
        }
    }
    (Tensor::new(n.shape().to_vec(), dn).expect("shape"), [dt, da, de])
}

/// `x → GN → SiLU → conv → GN → [FiLM] → SiLU → conv`, plus a residual path
/// that is a 1×1 convolution when the channel count changes. Without FiLM
/// projections the block is the unconditioned variant used by the reference
/// encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub film: Option<FilmProjections>,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct ResBlockCache {
    x: Tensor,
    n1: GroupNormCache,
    n1_out: Tensor,
    a1: Tensor,
    n2: GroupNormCache,
    n2_out: Tensor,
    coefs: Option<Vec<FilmCoefs>>,
    f_out: Tensor,
    a2: Tensor,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, film: Option<(usize, usize, usize)>, rng: &mut R) -> Self {
        ResBlock {
            norm1: GroupNorm::new(c_in),
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            norm2: GroupNorm::new(c_out),
            film: film.map(|(t, a, e)| FilmProjections::new(c_out, t, a, e)),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(c_in, c_out, 1, 1, 0, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&CondFeatures>) -> (Tensor, ResBlockCache) {
        let (n1_out, n1) = self.norm1.forward(x).expect("group norm shape");
        let a1 = silu(&n1_out);
        let h1 = self.conv1.forward(&a1).expect("conv shape");
        let (n2_out, n2) = self.norm2.forward(&h1).expect("group norm shape");
        let coefs = match (&self.film, cond) {
            (Some(p), Some(c)) => Some(p.coefs(c)),
            _ => None,
        };
        let f_out = match &coefs {
            Some(k) => film_apply(&n2_out, k),
            None => n2_out.clone(),
        };
        let a2 = silu(&f_out);
        let mut y = self.conv2.forward(&a2).expect("conv shape");
        let res = match &self.skip {
            Some(s) => s.forward(x).expect("skip shape"),
            None => x.clone(),
        };
        y.add_assign(&res).expect("residual shape");
        (
            y,
            ResBlockCache {
                x: x.clone(),
                n1,
                n1_out,
                a1,
                n2,
                n2_out,
                coefs,
                f_out,
                a2,
            },
        )
    }

    /// Accumulates parameter gradients, adds conditioning-feature gradients
    /// into `d_cond`, and returns `dx`.
    pub fn backward(
        &mut self,
        cache: &ResBlockCache,
        dy: &Tensor,
        cond: Option<&CondFeatures>,
        d_cond: Option<&mut CondFeatures>,
    ) -> Tensor {
        let mut dx = match &mut self.skip {
            Some(s) => s.backward(&cache.x, dy).expect("skip shape"),
            None => dy.clone(),
        };
        let d_a2 = self.conv2.backward(&cache.a2, dy).expect("conv shape");
        let d_f = silu_backward(&cache.f_out, &d_a2);
        let d_n2 = match (&cache.coefs, &mut self.film) {
            (Some(k), Some(p)) => {
                let (dn, [dt, da, de]) = film_backward(&cache.n2_out, k, &d_f);
                let c = cond.expect("conditioning features for a FiLM block");
                let g_t = p.time.backward(&c.time, &dt);
                let g_a = p.audio.backward(&c.audio, &da);
                let g_e = p.expr.backward(&c.expr, &de);
                if let Some(d) = d_cond {
                    add_into(&mut d.time, &g_t);
                    add_into(&mut d.audio, &g_a);
                    add_into(&mut d.expr, &g_e);
                }
                dn
            }
            _ => d_f,
        };
        let d_h1 = self.norm2.backward(&cache.n2, &d_n2);
        let d_a1 = self.conv1.backward(&cache.a1, &d_h1).expect("conv shape");
        let d_n1 = silu_backward(&cache.n1_out, &d_a1);
        let d_x = self.norm1.backward(&cache.n1, &d_n1);
        dx.add_assign(&d_x).expect("shape");
        dx
    }

    pub fn film_param_count(&self) -> usize {
        self.film.as_ref().map_or(0, FilmProjections::param_count)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        if let Some(p) = &self.film {
            p.visit(&format!("{prefix}.film"), f);
        }
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&format!("{prefix}.skip"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        if let Some(p) = &mut self.film {
            p.visit_mut(&format!("{prefix}.film"), f);
        }
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&format!("{prefix}.skip"), f);
        }
    }
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}
