//! Reference-feature fusion: single-head cross-attention with a residual
//! path, and a spatial gate computed from channel-pooled statistics.

use rand::Rng;

use super::layers::{conv2d_backward_raw, conv2d_raw, sigmoid, ConvGeometry};
use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Projections for single-head cross-attention. Queries come from the target
/// map, keys and values from the reference map.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
}

#[derive(Clone, Debug)]
pub struct CrossAttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    o: Vec<f64>,
    n_target: usize,
    n_ref: usize,
}

impl CrossAttentionCache {
    /// Attention weights, row-major `[target pixel × reference pixel]`.
    pub fn weights(&self) -> &[f64] {
        &self.attn
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref
    }
}

impl CrossAttention {
    /// Query/key/output projections get fan-in scaling; the value projection
    /// starts at zero so the block is an exact identity at initialisation.
    pub fn new<R: Rng + ?Sized>(channels: usize, dim: usize, rng: &mut R) -> Self {
        CrossAttention {
            wq: Parameter::he(&[dim, channels], channels, rng),
            wk: Parameter::he(&[dim, channels], channels, rng),
            wv: Parameter::zeros(&[dim, channels]),
            wo: Parameter::he(&[channels, dim], dim, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.value.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.wq.value.shape()[0]
    }

    pub fn forward(&self, target: &Tensor, reference: &Tensor) -> Result<(Tensor, CrossAttentionCache)> {
        let (c, h, w) = target.dims3()?;
        let (rc, rh, rw) = reference.dims3()?;
        if c != self.channels() || rc != c {
            return Err(Error::Dimension {
                op: "cross_attention",
                left: target.shape().to_vec(),
                right: reference.shape().to_vec(),
            });
        }
        let d = self.dim();
        let np = h * w;
        let nr = rh * rw;
        let scale = 1.0 / (d as f64).sqrt();
        let t = target.data();
        let r = reference.data();
        // token-major projections: q[p*d + i]
        let q = project(self.wq.value.data(), t, d, c, np);
        let k = project(self.wk.value.data(), r, d, c, nr);
        let v = project(self.wv.value.data(), r, d, c, nr);
        let mut attn = vec![0.0; np * nr];
        for p in 0..np {
            let qp = &q[p * d..(p + 1) * d];
            let row = &mut attn[p * nr..(p + 1) * nr];
            for (j, a) in row.iter_mut().enumerate() {
                let kj = &k[j * d..(j + 1) * d];
                *a = scale * qp.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
            }
            softmax_in_place(row);
        }
        let mut o = vec![0.0; np * d];
        for p in 0..np {
            let op = &mut o[p * d..(p + 1) * d];
            for j in 0..nr {
                let a = attn[p * nr + j];
                for (x, y) in op.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *x += a * y;
                }
            }
        }
        let wo = self.wo.value.data();
        let mut out = t.to_vec();
        for ch in 0..c {
            let wrow = &wo[ch * d..(ch + 1) * d];
            for p in 0..np {
                out[ch * np + p] += wrow
                    .iter()
                    .zip(&o[p * d..(p + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        Ok((
            Tensor::new(target.shape().to_vec(), out)?,
            CrossAttentionCache {
                q,
                k,
                v,
                attn,
                o,
                n_target: np,
                n_ref: nr,
            },
        ))
    }

    /// Returns `(d_target, d_reference)` and accumulates projection gradients.
    pub fn backward(
        &mut self,
        target: &Tensor,
        reference: &Tensor,
        cache: &CrossAttentionCache,
        dy: &Tensor,
    ) -> (Tensor, Tensor) {
        let c = self.channels();
        let d = self.dim();
        let (np, nr) = (cache.n_target, cache.n_ref);
        let scale = 1.0 / (d as f64).sqrt();
        let g = dy.data();
        let wo = self.wo.value.data().to_vec();

        // dWo[ch, i] = sum_p dy[ch, p] o[p, i];  do[p, i] = sum_ch wo[ch, i] dy[ch, p]
        let mut dwo = vec![0.0; c * d];
        let mut d_o = vec![0.0; np * d];
        for ch in 0..c {
            for p in 0..np {
                let gy = g[ch * np + p];
                if gy == 0.0 {
                    continue;
                }
                for i in 0..d {
                    dwo[ch * d + i] += gy * cache.o[p * d + i];
                    d_o[p * d + i] += wo[ch * d + i] * gy;
                }
            }
        }
        self.wo.accumulate(&dwo);

        let mut dv = vec![0.0; nr * d];
        let mut ds = vec![0.0; np * nr];
        for p in 0..np {
            let dop = &d_o[p * d..(p + 1) * d];
            let arow = &cache.attn[p * nr..(p + 1) * nr];
            let mut da = vec![0.0; nr];
            for j in 0..nr {
                let vj = &cache.v[j * d..(j + 1) * d];
                da[j] = dop.iter().zip(vj).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    dv[j * d + i] += arow[j] * dop[i];
                }
            }
            let dot: f64 = arow.iter().zip(&da).map(|(a, b)| a * b).sum();
            for j in 0..nr {
                ds[p * nr + j] = arow[j] * (da[j] - dot);
            }
        }
        let mut dq = vec![0.0; np * d];
        let mut dk = vec![0.0; nr * d];
        for p in 0..np {
            for j in 0..nr {
                let s = ds[p * nr + j] * scale;
                if s == 0.0 {
                    continue;
                }
                for i in 0..d {
                    dq[p * d + i] += s * cache.k[j * d + i];
                    dk[j * d + i] += s * cache.q[p * d + i];
                }
            }
        }
        let t = target.data();
        let r = reference.data();
        self.wq.accumulate(&project_weight_grad(&dq, t, d, c, np));
        self.wk.accumulate(&project_weight_grad(&dk, r, d, c, nr));
        self.wv.accumulate(&project_weight_grad(&dv, r, d, c, nr));

        let mut dt = g.to_vec();
        project_input_grad_into(self.wq.value.data(), &dq, d, c, np, &mut dt);
        let mut dr = vec![0.0; c * nr];
        project_input_grad_into(self.wk.value.data(), &dk, d, c, nr, &mut dr);
        project_input_grad_into(self.wv.value.data(), &dv, d, c, nr, &mut dr);
        (
            Tensor::new(target.shape().to_vec(), dt).expect("shape"),
            Tensor::new(reference.shape().to_vec(), dr).expect("shape"),
        )
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

/// `x` is channel-major `[c × n]`; returns token-major `[n × d]` of `W·x_p`.
fn project(w: &[f64], x: &[f64], d: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..d {
        for ch in 0..c {
            let wv = w[i * c + ch];
            if wv == 0.0 {
                continue;
            }
            let xr = &x[ch * n..(ch + 1) * n];
            for p in 0..n {
                out[p * d + i] += wv * xr[p];
            }
        }
    }
    out
}

fn project_weight_grad(dz: &[f64], x: &[f64], d: usize, c: usize, n: usize) -> Vec<f64> {
    let mut dw = vec![0.0; d * c];
    for i in 0..d {
        for ch in 0..c {
            let xr = &x[ch * n..(ch + 1) * n];
            dw[i * c + ch] = (0..n).map(|p| dz[p * d + i] * xr[p]).sum();
        }
    }
    dw
}

fn project_input_grad_into(w: &[f64], dz: &[f64], d: usize, c: usize, n: usize, dx: &mut [f64]) {
    for i in 0..d {
        for ch in 0..c {
            let wv = w[i * c + ch];
            if wv == 0.0 {
                continue;
            }
            for p in 0..n {
                dx[ch * n + p] += wv * dz[p * d + i];
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Spatial gate: `sigmoid(conv([mean_c(x); max_c(x)]))` multiplied into `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention {
    pub weight: Parameter,
    pub bias: Parameter,
}

#[derive(Clone, Debug)]
pub struct SpatialAttentionCache {
    pooled: Tensor,
    argmax: Vec<usize>,
    gate: Vec<f64>,
}

impl SpatialAttentionCache {
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }
}

impl SpatialAttention {
    /// Zero-initialised gate convolution: every gate starts at 0.5.
    pub fn new(kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "spatial attention kernel must be odd");
        SpatialAttention {
            weight: Parameter::zeros(&[1, 2, kernel, kernel]),
            bias: Parameter::zeros(&[1]),
        }
    }

    fn pad(&self) -> usize {
        self.weight.value.shape()[2] / 2
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, SpatialAttentionCache)> {
        let (c, h, w) = x.dims3()?;
        let np = h * w;
        let xs = x.data();
        let mut pooled = vec![0.0; 2 * np];
        let mut argmax = vec![0usize; np];
        for p in 0..np {
            let mut sum = 0.0;
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = xs[ch * np + p];
                sum += v;
                if v > best {
                    best = v;
                    argmax[p] = ch;
                }
            }
            pooled[p] = sum / c as f64;
            pooled[np + p] = best;
        }
        let pooled = Tensor::new(vec![2, h, w], pooled)?;
        let g = ConvGeometry::new(pooled.shape(), self.weight.value.shape(), 1, self.pad())?;
        let logits = conv2d_raw(&g, pooled.data(), self.weight.value.data(), Some(self.bias.value.data()));
        let gate: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let mut out = xs.to_vec();
        for ch in 0..c {
            for p in 0..np {
                out[ch * np + p] *= gate[p];
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), out)?,
            SpatialAttentionCache {
                pooled,
                argmax,
                gate,
            },
        ))
    }

    pub fn backward(&mut self, x: &Tensor, cache: &SpatialAttentionCache, dy: &Tensor) -> Tensor {
        let (c, h, w) = x.dims3().expect("rank-3");
        let np = h * w;
        let xs = x.data();
        let g = dy.data();
        let mut dx = vec![0.0; xs.len()];
        let mut dlogit = vec![0.0; np];
        for p in 0..np {
            let gate = cache.gate[p];
            let mut dgate = 0.0;
            for ch in 0..c {
                let i = ch * np + p;
                dx[i] = g[i] * gate;
                dgate += g[i] * xs[i];
            }
            dlogit[p] = dgate * gate * (1.0 - gate);
        }
        let geo = ConvGeometry::new(cache.pooled.shape(), self.weight.value.shape(), 1, self.pad())
            .expect("geometry checked in forward");
        let (dpooled, dw, db) =
            conv2d_backward_raw(&geo, cache.pooled.data(), self.weight.value.data(), &dlogit);
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        for p in 0..np {
            let dm = dpooled[p] / c as f64;
            for ch in 0..c {
                dx[ch * np + p] += dm;
            }
            dx[cache.argmax[p] * np + p] += dpooled[np + p];
        }
        Tensor::new(x.shape().to_vec(), dx).expect("shape")
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Parameter)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_reference_and_zero_values_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = CrossAttention::new(4, 4, &mut rng);
        let target = Tensor::randn(&[4, 3, 3], 1.0, &mut rng);
        let reference = Tensor::zeros(&[4, 3, 3]);
        let (y, _) = attn.forward(&target, &reference).unwrap();
        assert_eq!(y, target);
    }

    #[test]
    fn single_reference_pixel_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = CrossAttention::new(3, 2, &mut rng);
        let target = Tensor::randn(&[3, 2, 2], 5.0, &mut rng);
        let reference = Tensor::randn(&[3, 1, 1], 5.0, &mut rng);
        let (_, cache) = attn.forward(&target, &reference).unwrap();
        assert!(cache.weights().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn equal_keys_average_the_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut attn = CrossAttention::new(2, 2, &mut rng);
        // keys read channel 0 only; values read channel 1; output copies value dim 0 into channel 0
        attn.wk.value = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        attn.wv.value = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        attn.wo.value = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let reference = Tensor::new(vec![2, 1, 2], vec![0.7, 0.7, 2.0, 6.0]).unwrap();
        let target = Tensor::zeros(&[2, 1, 1]);
        let (y, cache) = attn.forward(&target, &reference).unwrap();
        assert!((cache.weights()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = CrossAttention::new(4, 3, &mut rng);
        let target = Tensor::randn(&[4, 3, 3], 3.0, &mut rng);
        let reference = Tensor::randn(&[4, 2, 3], 3.0, &mut rng);
        let (_, cache) = attn.forward(&target, &reference).unwrap();
        for row in cache.weights().chunks(cache.n_ref()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sa = SpatialAttention::new(3);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let (y, _) = sa.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        let (y0, _) = sa.forward(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));

        // 1×1 gate: logit = bias = ln(9) → gate 0.9
        let mut sa1 = SpatialAttention::new(1);
        sa1.bias.value = Tensor::from_vec(vec![2.1972245773362196]);
        let (_, cache) = sa1.forward(&x).unwrap();
        assert!(cache.gate().iter().all(|&g| (g - 0.9).abs() < 1e-12));
    }
}
