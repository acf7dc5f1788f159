//! Adversarial, auxiliary classification and regression losses, each
//! returned with gradients with respect to its inputs.

use super::sequence::{EmotionLabel, ExpressionVector};
use crate::numerics::softmax_in_place;

pub const PROB_MIN: f64 = 1e-7;
pub const PROB_MAX: f64 = 1.0 - 1e-7;

/// `−ln p` with `p` clamped; the derivative is zero where the clamp is active.
pub fn neg_log(p: f64) -> (f64, f64) {
    if p < PROB_MIN {
        (-PROB_MIN.ln(), 0.0)
    } else if p > PROB_MAX {
        (-PROB_MAX.ln(), 0.0)
    } else {
        (-p.ln(), -1.0 / p)
    }
}

/// `−ln(1 − p)` with the same clamp.
pub fn neg_log_complement(p: f64) -> (f64, f64) {
    let (v, d) = neg_log(1.0 - p);
    (v, -d)
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: EmotionLabel) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let y = label.index();
    let loss = -p[y].max(f64::MIN_POSITIVE).ln();
    p[y] -= 1.0;
    (loss, p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDiscLoss {
    pub value: f64,
    pub adversarial: f64,
    pub classification: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_real_logits: Vec<f64>,
}

/// `−[ln D(real) + ln(1 − D(fake))] + λ_cls·CE(real logits, y)`.
pub fn loss_disc_global(
    real_score: f64,
    fake_score: f64,
    real_logits: &[f64],
    label: EmotionLabel,
    lambda_cls: f64,
) -> GlobalDiscLoss {
    let (lr, d_real) = neg_log(real_score);
    let (lf, d_fake) = neg_log_complement(fake_score);
    let (ce, mut d_logits) = cross_entropy(real_logits, label);
    d_logits.iter_mut().for_each(|g| *g *= lambda_cls);
    GlobalDiscLoss {
        value: lr + lf + lambda_cls * ce,
        adversarial: lr + lf,
        classification: ce,
        d_real,
        d_fake,
        d_real_logits: d_logits,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalDiscLoss {
    pub value: f64,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
}

/// Per-frame binary loss averaged over frames.
pub fn loss_disc_local(real_scores: &[f64], fake_scores: &[f64]) -> LocalDiscLoss {
    assert_eq!(real_scores.len(), fake_scores.len(), "local loss needs equal lengths");
    let n = real_scores.len().max(1) as f64;
    let mut value = 0.0;
    let mut d_real = Vec::with_capacity(real_scores.len());
    let mut d_fake = Vec::with_capacity(fake_scores.len());
    for (&r, &f) in real_scores.iter().zip(fake_scores) {
        let (lr, dr) = neg_log(r);
        let (lf, df) = neg_log_complement(f);
        value += lr + lf;
        d_real.push(dr / n);
        d_fake.push(df / n);
    }
    LocalDiscLoss {
        value: value / n,
        d_real,
        d_fake,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorLoss {
    pub value: f64,
    pub adversarial: f64,
    pub mse: f64,
    pub d_global: f64,
    pub d_local: Vec<f64>,
    /// Gradient of the regression term with respect to each generated frame.
    pub d_frames: Vec<Vec<f64>>,
}

/// `−ln D_g(fake) − mean_i ln D_l(ê_i) + λ·‖Ê − E‖²/(N·K)`. Passing `None`
/// for a discriminator score drops that term.
pub fn loss_generator(
    global_fake: Option<f64>,
    local_fake: Option<&[f64]>,
    fake: &[ExpressionVector],
    real: &[ExpressionVector],
    lambda_mse: f64,
) -> GeneratorLoss {
    assert_eq!(fake.len(), real.len(), "regression term needs matched lengths");
    let (mut adversarial, mut d_global) = (0.0, 0.0);
    if let Some(p) = global_fake {
        let (v, d) = neg_log(p);
        adversarial += v;
        d_global = d;
    }
    let mut d_local = Vec::new();
    if let Some(scores) = local_fake {
        let n = scores.len().max(1) as f64;
        for &p in scores {
            let (v, d) = neg_log(p);
            adversarial += v / n;
            d_local.push(d / n);
        }
    }
    let n = fake.len();
    let k = fake.first().map_or(0, Vec::len);
    let denom = (n * k).max(1) as f64;
    let mut sq = 0.0;
    let d_frames = fake
        .iter()
        .zip(real)
        .map(|(f, r)| {
            f.iter()
                .zip(r)
                .map(|(a, b)| {
                    sq += (a - b) * (a - b);
                    2.0 * lambda_mse * (a - b) / denom
                })
                .collect()
        })
        .collect();
    let mse = sq / denom;
    GeneratorLoss {
        value: adversarial + lambda_mse * mse,
        adversarial,
        mse,
        d_global,
        d_local,
        d_frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN4: f64 = 1.386_294_361_119_890_6;

    #[test]
    fn global_loss_at_chance() {
        let l = loss_disc_global(0.5, 0.5, &[0.0; 8], EmotionLabel::Sad, 0.0);
        assert!((l.value - 1.3862944).abs() < 1e-7);
        assert!((l.adversarial - LN4).abs() < 1e-12);
    }

    #[test]
    fn perfect_discrimination_is_near_zero() {
        let l = loss_disc_global(1.0, 0.0, &[0.0; 8], EmotionLabel::Sad, 0.0);
        assert!(l.value < 1e-6 && l.value >= 0.0);
        assert_eq!((l.d_real, l.d_fake), (0.0, 0.0));
        let ll = loss_disc_local(&[1.0, 1.0], &[0.0, 0.0]);
        assert!(ll.value < 1e-6);
    }

    #[test]
    fn saturated_scores_stay_finite() {
        for (r, f) in [(0.0, 1.0), (1.0, 1.0), (0.0, 0.0)] {
            let l = loss_disc_global(r, f, &[1e3, -1e3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], EmotionLabel::Fear, 1.0);
            assert!(l.value.is_finite());
        }
    }

    #[test]
    fn local_loss_normalises_by_length() {
        let l = loss_disc_local(&[0.5; 6], &[0.5; 6]);
        assert!((l.value - 1.3862944).abs() < 1e-7);
        let one = loss_disc_local(&[0.8], &[0.3]);
        let expect = -(0.8f64.ln()) - (0.7f64.ln());
        assert!((one.value - expect).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_examples() {
        let e = vec![vec![0.0; 4]; 3];
        let g = loss_generator(Some(0.5), Some(&[0.5; 3]), &e, &e, 0.0);
        assert!((g.value - 1.3862944).abs() < 1e-7);
        let g0 = loss_generator(Some(0.5), None, &e, &e, 10.0);
        assert_eq!(g0.mse, 0.0);
        let shifted: Vec<Vec<f64>> = e.iter().map(|f| f.iter().map(|v| v + 1.0).collect()).collect();
        let g10 = loss_generator(None, None, &shifted, &e, 10.0);
        assert!((g10.value - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (l, g) = cross_entropy(&[0.3, -1.0, 2.0, 0.0, 0.1, 0.4, -0.2, 0.9], EmotionLabel::Angry);
        assert!(l > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_finite(
            r in 0.0f64..=1.0,
            f in 0.0f64..=1.0,
            logits in proptest::collection::vec(-50.0f64..50.0, 8),
            gap in -5.0f64..5.0,
        ) {
            let g = loss_disc_global(r, f, &logits, EmotionLabel::Happy, 1.0);
            prop_assert!(g.value.is_finite() && g.value >= 0.0);
            let l = loss_disc_local(&[r, f], &[f, r]);
            prop_assert!(l.value.is_finite() && l.value >= 0.0);
            let fake = vec![vec![gap; 3]; 2];
            let real = vec![vec![0.0; 3]; 2];
            let gl = loss_generator(Some(f), Some(&[r, f]), &fake, &real, 10.0);
            prop_assert!(gl.value.is_finite() && gl.value >= 0.0);
        }
    }
}
