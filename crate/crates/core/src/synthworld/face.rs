//! Linear procedural face model: `frame = base + Σ ψ_j·B_j + mouth_open·m`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exprgen::{EmotionLabel, ExpressionVector};
use crate::numerics::Tensor;
use crate::seed::rng_for;

/// Single-channel image `[1×S×S]` with values nominally in `[0,1]`.
pub type Frame = Tensor;

pub const MIN_IMAGE_SIZE: usize = 8;

/// Binary lip and eye masks as `[S×S]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub lip: Tensor,
    pub eye: Tensor,
}

impl RegionMasks {
    pub fn image_size(&self) -> usize {
        self.lip.shape()[0]
    }
}

/// Geometry is laid out on a 32-pixel reference grid and scaled to `size`.
pub fn region_masks(size: usize) -> Result<RegionMasks> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::config(format!(
            "image size {size} too small for region masks (minimum {MIN_IMAGE_SIZE})"
        )));
    }
    let sc = |v: usize| v * size / 32;
    let mut lip = Tensor::zeros(&[size, size]);
    let mut eye = Tensor::zeros(&[size, size]);
    let fill = |t: &mut Tensor, rows: (usize, usize), cols: (usize, usize)| {
        for y in sc(rows.0)..sc(rows.1) {
            for x in sc(cols.0)..sc(cols.1) {
                t.data_mut()[y * size + x] = 1.0;
            }
        }
    };
    fill(&mut lip, (22, 28), (11, 21));
    fill(&mut eye, (8, 12), (6, 12));
    fill(&mut eye, (8, 12), (20, 26));
    Ok(RegionMasks { lip, eye })
}

/// Sum of random low-frequency plane waves, scaled to unit maximum magnitude.
fn smooth_field<R: Rng + ?Sized>(rng: &mut R, size: usize, waves: usize, max_freq: f64) -> Vec<f64> {
    let mut field = vec![0.0; size * size];
    for _ in 0..waves {
        let fx = rng.random_range(-max_freq..=max_freq);
        let fy = rng.random_range(-max_freq..=max_freq);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 + (fx * fx + fy * fy).sqrt());
        for y in 0..size {
            for x in 0..size {
                let arg = 2.0 * PI * (fx * x as f64 + fy * y as f64) / size as f64 + phase;
                field[y * size + x] += amp * arg.cos();
            }
        }
    }
    let m = field.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        field.iter_mut().for_each(|v| *v /= m);
    }
    field
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Amplitude of the identity-specific deviation of the base image around 0.5.
const BASE_AMPLITUDE: f64 = 0.1;
/// Lips are drawn darker than the surrounding face so an open mouth stays in range.
const LIP_DARKENING: f64 = 0.15;

/// The synthetic face model of one identity. The expression basis is shared
/// by all identities of a world so that coefficients mean the same thing for
/// every face; only the base image is identity specific.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceBasis {
    size: usize,
    world_seed: u64,
    identity: u64,
    base: Frame,
    /// `[K×S×S]`, orthonormal, zero inside the lip mask.
    expr: Tensor,
    /// Unit-norm mouth pattern supported inside the lip mask.
    mouth: Frame,
    /// Mouth pattern with its projection onto the expression basis removed.
    mouth_perp: Vec<f64>,
    mouth_perp_sq: f64,
    masks: RegionMasks,
}

pub fn make_face_basis(world_seed: u64, identity: u64, k: usize, size: usize) -> Result<FaceBasis> {
    if k == 0 {
        return Err(Error::config("expression dimension must be at least 1"));
    }
    let masks = region_masks(size)?;
    let p = size * size;
    let free = masks.lip.data().iter().filter(|&&m| m == 0.0).count();
    if k > free {
        return Err(Error::config(format!(
            "expression dimension {k} exceeds the {free} pixels available outside the lip mask"
        )));
    }

    let mut rng = rng_for(world_seed, &[0xba5e, k as u64, size as u64]);
    let lip = masks.lip.data();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while basis.len() < k {
        attempts += 1;
        if attempts > 20 * k + 100 {
            return Err(Error::config("could not construct an orthonormal expression basis"));
        }
        let mut v = smooth_field(&mut rng, size, 10, 5.0);
        for (x, &m) in v.iter_mut().zip(lip) {
            if m != 0.0 {
                *x = 0.0;
            }
        }
        let norm0 = dot(&v, &v).sqrt();
        // two passes of modified Gram-Schmidt keep orthogonality at round-off level
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-3 * norm0 || n == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }

    let mut id_rng = rng_for(world_seed, &[0x1d, identity]);
    let wobble = smooth_field(&mut id_rng, size, 6, 2.0);
    let base: Vec<f64> = wobble
        .iter()
        .zip(masks.lip.data())
        .map(|(w, &m)| 0.5 + BASE_AMPLITUDE * w - LIP_DARKENING * m)
        .collect();

    // bright Gaussian blob centred on the lip region
    let (mut cy, mut cx, mut cnt) = (0.0, 0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            if lip[y * size + x] != 0.0 {
                cy += y as f64;
                cx += x as f64;
                cnt += 1.0;
            }
        }
    }
    let (cy, cx) = (cy / cnt, cx / cnt);
    let (sy, sx) = (size as f64 / 16.0, size as f64 / 8.0);
    let mut mouth: Vec<f64> = (0..p)
        .map(|i| {
            if lip[i] == 0.0 {
                return 0.0;
            }
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            (-0.5 * (((y - cy) / sy).powi(2) + ((x - cx) / sx).powi(2))).exp()
        })
        .collect();
    let mn = dot(&mouth, &mouth).sqrt();
    mouth.iter_mut().for_each(|v| *v /= mn);

    let mut mouth_perp = mouth.clone();
    for b in &basis {
        let c = dot(&mouth_perp, b);
        mouth_perp.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
    let mouth_perp_sq = dot(&mouth_perp, &mouth_perp);

    Ok(FaceBasis {
        size,
        world_seed,
        identity,
        base: Tensor::new(vec![1, size, size], base)?,
        expr: Tensor::new(vec![k, size, size], basis.concat())?,
        mouth: Tensor::new(vec![1, size, size], mouth)?,
        mouth_perp,
        mouth_perp_sq,
        masks,
    })
}

impl FaceBasis {
    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn expr_dim(&self) -> usize {
        self.expr.shape()[0]
    }

    pub fn identity(&self) -> u64 {
        self.identity
    }

    pub fn world_seed(&self) -> u64 {
        self.world_seed
    }

    pub fn base(&self) -> &Frame {
        &self.base
    }

    pub fn mouth(&self) -> &Frame {
        &self.mouth
    }

    pub fn masks(&self) -> &RegionMasks {
        &self.masks
    }

    /// The `j`-th expression basis frame as a flat pixel slice.
    pub fn expr_component(&self, j: usize) -> &[f64] {
        let p = self.size * self.size;
        &self.expr.data()[j * p..(j + 1) * p]
    }

    /// Image-space pattern `Σ ψ_j·B_j`.
    pub fn expression_pattern(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.check_psi(psi)?;
        let p = self.size * self.size;
        let mut out = vec![0.0; p];
        for (j, &c) in psi.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.expr_component(j)) {
                *o += c * b;
            }
        }
        Ok(out)
    }

    fn check_psi(&self, psi: &[f64]) -> Result<()> {
        if psi.len() != self.expr_dim() {
            return Err(Error::Dimension {
                op: "face model expression",
                left: vec![self.expr_dim()],
                right: vec![psi.len()],
            });
        }
        Ok(())
    }

    /// Render without clamping; exactly linear in `(ψ, mouth_open)`.
    pub fn render_linear(&self, psi: &[f64], mouth_open: f64) -> Result<Frame> {
        let pattern = self.expression_pattern(psi)?;
        let data = self
            .base
            .data()
            .iter()
            .zip(&pattern)
            .zip(self.mouth.data())
            .map(|((b, e), m)| b + e + mouth_open * m)
            .collect();
        Tensor::new(vec![1, self.size, self.size], data)
    }

    /// Render clamped to `[0,1]`. Extraction is exact only when no pixel clamps.
    pub fn render(&self, psi: &[f64], mouth_open: f64) -> Result<Frame> {
        if !(0.0..=1.0).contains(&mouth_open) {
            return Err(Error::Range {
                what: "mouth_open",
                value: mouth_open,
                range: "[0, 1]",
            });
        }
        let mut frame = self.render_linear(psi, mouth_open)?;
        let mut clamped = 0usize;
        for v in frame.data_mut() {
            if *v < 0.0 || *v > 1.0 {
                clamped += 1;
                *v = v.clamp(0.0, 1.0);
            }
        }
        if clamped > 0 {
            log::debug!("render clamped {clamped} pixels (identity {})", self.identity);
        }
        Ok(frame)
    }

    /// Least-squares coefficients of `frame − base` on `[B; m]`.
    pub fn extract_expression(&self, frame: &Frame) -> Result<(ExpressionVector, f64)> {
        if frame.shape() != self.base.shape() {
            return Err(Error::Dimension {
                op: "extract_expression",
                left: self.base.shape().to_vec(),
                right: frame.shape().to_vec(),
            });
        }
        let resid: Vec<f64> = frame
            .data()
            .iter()
            .zip(self.base.data())
            .map(|(f, b)| f - b)
            .collect();
        let mouth_open = if self.mouth_perp_sq > 0.0 {
            dot(&resid, &self.mouth_perp) / self.mouth_perp_sq
        } else {
            0.0
        };
        let psi = (0..self.expr_dim())
            .map(|j| {
                let b = self.expr_component(j);
                dot(&resid, b) - mouth_open * dot(self.mouth.data(), b)
            })
            .collect();
        Ok((psi, mouth_open))
    }
}

pub const PROTOTYPE_NORM: f64 = 2.0;
pub const PROTOTYPE_MIN_DISTANCE: f64 = 1.0;

/// Ground-truth expression geometry: neutral is the origin and every other
/// label is a fixed vector of norm 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    vectors: Vec<ExpressionVector>,
}

impl Prototypes {
    pub fn get(&self, label: EmotionLabel) -> &ExpressionVector {
        &self.vectors[label.index()]
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EmotionLabel, &ExpressionVector)> {
        EmotionLabel::ALL.iter().copied().zip(&self.vectors)
    }
}

pub fn emotion_prototypes(k: usize, seed: u64) -> Result<Prototypes> {
    if k < 2 {
        return Err(Error::config("emotion prototypes need an expression dimension of at least 2"));
    }
    let mut rng = rng_for(seed, &[0x9707, k as u64]);
    let mut vectors = vec![vec![0.0; k]];
    let mut attempts = 0;
    while vectors.len() < EmotionLabel::COUNT {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::config(format!(
                "cannot place separated emotion prototypes in {k} dimensions"
            )));
        }
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x *= PROTOTYPE_NORM / n);
        let far = vectors[1..].iter().all(|u| {
            let d2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= PROTOTYPE_MIN_DISTANCE
        });
        if far {
            vectors.push(v);
        }
    }
    Ok(Prototypes { vectors })
}
