//! Frame-level quality and synchronisation measures.

use crate::error::{Error, Result};
use crate::synthworld::Frame;
use crate::numerics::Tensor;

pub const PSNR_CAP: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for dynamic range 1, capped at 100.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean structural similarity over 8×8 windows at stride 4, per channel.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (c, h, w) = a.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!("ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..c {
        let off = ch * h * w;
        for y0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        sa += a.data()[off + y * w + x];
                        sb += b.data()[off + y * w + x];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let da = a.data()[off + y * w + x] - ma;
                        let db = b.data()[off + y * w + x] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, with tied values sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Correlation between mean lip-region intensity and the mouth-opening signal.
/// A zero-variance series yields the sentinel 0.
pub fn lip_sync_proxy(frames: &[Frame], mouth_open: &[f64], lip_mask: &Tensor) -> Result<f64> {
    if frames.len() != mouth_open.len() {
        return Err(Error::Dimension {
            op: "lip_sync_proxy",
            left: vec![frames.len()],
            right: vec![mouth_open.len()],
        });
    }
    if frames.len() < 3 {
        return Err(Error::config("lip_sync_proxy needs at least 3 frames"));
    }
    let plane = lip_mask.len();
    let area = lip_mask.data().iter().filter(|&&m| m != 0.0).count();
    if area == 0 {
        return Err(Error::config("lip mask is empty"));
    }
    let lip: Vec<f64> = frames
        .iter()
        .map(|f| {
            if f.len() != plane {
                return Err(Error::Dimension {
                    op: "lip_sync_proxy",
                    left: lip_mask.shape().to_vec(),
                    right: f.shape().to_vec(),
                });
            }
            Ok(f.data()
                .iter()
                .zip(lip_mask.data())
                .filter(|(_, &m)| m != 0.0)
                .map(|(v, _)| v)
                .sum::<f64>()
                / area as f64)
        })
        .collect::<Result<_>>()?;
    match pearson(&lip, mouth_open) {
        Some(r) => Ok(r),
        None => {
            log::warn!("lip_sync_proxy: zero-variance series, reporting 0");
            Ok(0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 25.0, 100.0, 101.0]), Some(1.0));
        assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        // one adjacent swap among five ranks: 1 − 6·2/(5·24) = 0.9
        let r = spearman(&x, &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(spearman(&x, &[1.0; 5]), None);
    }

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker(size: usize) -> Frame {
        let d = (0..size * size)
            .map(|i| if ((i / size) / 2 + (i % size) / 2) % 2 == 0 { 0.9 } else { 0.1 })
            .collect();
        Tensor::new(vec![1, size, size], d).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::filled(&[1, 8, 8], 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Tensor::filled(&[1, 8, 8], 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = Tensor::zeros(&[1, 8, 8]);
        let o = Tensor::filled(&[1, 8, 8], 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
    }

    #[test]
    fn ssim_examples() {
        let a = checker(16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        let c = Tensor::filled(&[1, 16, 16], 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quality_measures_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[1, 16, 16], 0.2, &mut rng);
        let b = Tensor::randn(&[1, 16, 16], 0.2, &mut rng);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn lip_sync_examples() {
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.data_mut()[5] = 1.0;
        let mouth = [0.0, 0.5, 1.0, 0.2, 0.7];
        let frames: Vec<Frame> = mouth
            .iter()
            .map(|m| {
                let mut f = Tensor::filled(&[1, 4, 4], 0.5);
                f.data_mut()[5] = 0.2 + 0.3 * m;
                f
            })
            .collect();
        assert!((lip_sync_proxy(&frames, &mouth, &mask).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(lip_sync_proxy(&frames, &[0.3; 5], &mask).unwrap(), 0.0);
        assert!(lip_sync_proxy(&frames[..2], &mouth[..2], &mask).is_err());
    }
}
