//! Per-frame emotion classifier over extracted expression coefficients, and
//! clip-level emotion accuracy by majority vote.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exprgen::{EmotionLabel, ExpressionVector};
use crate::numerics::{silu_backward_slice, silu_slice, Adam, AdamConfig, Linear, Module, Parameter};
use crate::seed::rng_for;
use crate::synthworld::{FaceBasis, Frame};

/// Minimum held-out accuracy a trained classifier must reach.
pub const CLASSIFIER_MIN_ACCURACY: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 64,
            steps: 400,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Two-layer perceptron `K → hidden → 8`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionClassifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl Module for EmotionClassifier {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Parameter)) {
        self.hidden.visit("hidden", f);
        self.out.visit("out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Parameter)) {
        self.hidden.visit_mut("hidden", f);
        self.out.visit_mut("out", f);
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl EmotionClassifier {
    pub fn new(input: usize, cfg: &ClassifierConfig) -> Self {
        let mut rng = rng_for(cfg.seed, &[0xc1a55]);
        EmotionClassifier {
            hidden: Linear::new(input, cfg.hidden, &mut rng),
            out: Linear::new(cfg.hidden, EmotionLabel::COUNT, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.n_in()
    }

    pub fn logits(&self, psi: &[f64]) -> Vec<f64> {
        let h = silu_slice(&self.hidden.forward(psi));
        self.out.forward(&h)
    }

    pub fn classify(&self, psi: &[f64]) -> EmotionLabel {
        EmotionLabel::ALL[argmax(&self.logits(psi))]
    }

    /// Mean cross-entropy over `data`, accumulating gradients.
    fn accumulate(&mut self, data: &[(ExpressionVector, EmotionLabel)]) -> f64 {
        let n = data.len() as f64;
        let mut loss = 0.0;
        for (x, y) in data {
            let pre = self.hidden.forward(x);
            let h = silu_slice(&pre);
            let logits = self.out.forward(&h);
            let p = softmax(&logits);
            loss -= p[y.index()].max(1e-300).ln() / n;
            let mut dl = p;
            dl[y.index()] -= 1.0;
            dl.iter_mut().for_each(|v| *v /= n);
            let dh = self.out.backward(&h, &dl);
            let dpre = silu_backward_slice(&pre, &dh);
            self.hidden.backward(x, &dpre);
        }
        loss
    }

    pub fn accuracy(&self, data: &[(ExpressionVector, EmotionLabel)]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data.iter().filter(|(x, y)| self.classify(x) == *y).count();
        hits as f64 / data.len() as f64
    }
}

/// Trains on `train` with full-batch Adam and checks accuracy on `held_out`.
/// Returns the classifier and its held-out accuracy; falling short of
/// [`CLASSIFIER_MIN_ACCURACY`] is a training error.
pub fn train_emo_classifier(
    train: &[(ExpressionVector, EmotionLabel)],
    held_out: &[(ExpressionVector, EmotionLabel)],
    cfg: &ClassifierConfig,
) -> Result<(EmotionClassifier, f64)> {
    let k = train
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::config("classifier training set is empty"))?;
    if held_out.is_empty() {
        return Err(Error::config("classifier held-out set is empty"));
    }
    let mut clf = EmotionClassifier::new(k, cfg);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    for step in 0..cfg.steps {
        clf.zero_grad();
        let loss = clf.accumulate(train);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                location: format!("classifier loss at step {step}"),
            });
        }
        opt.update(&mut clf);
    }
    let acc = clf.accuracy(held_out);
    if acc < CLASSIFIER_MIN_ACCURACY {
        return Err(Error::Training(format!(
            "emotion classifier reached {acc:.3} held-out accuracy, below {CLASSIFIER_MIN_ACCURACY}"
        )));
    }
    Ok((clf, acc))
}

/// Majority label among per-frame predictions; ties go to the lower label index.
pub fn majority_vote(clf: &EmotionClassifier, frames: &[ExpressionVector]) -> Option<EmotionLabel> {
    if frames.is_empty() {
        return None;
    }
    let mut counts = [0usize; EmotionLabel::COUNT];
    for f in frames {
        counts[clf.classify(f).index()] += 1;
    }
    let best = (0..EmotionLabel::COUNT).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
    Some(EmotionLabel::ALL[best])
}

/// Fraction of sequences whose majority-vote label matches the intended one.
pub fn emo_acc_sequences(clf: &EmotionClassifier, clips: &[(Vec<ExpressionVector>, EmotionLabel)]) -> f64 {
    if clips.is_empty() {
        return 0.0;
    }
    let hits = clips
        .iter()
        .filter(|(seq, y)| majority_vote(clf, seq) == Some(*y))
        .count();
    hits as f64 / clips.len() as f64
}

/// As [`emo_acc_sequences`], extracting coefficients from rendered frames.
pub fn emo_acc(
    clf: &EmotionClassifier,
    basis: &FaceBasis,
    clips: &[(Vec<Frame>, EmotionLabel)],
) -> Result<f64> {
    let seqs = clips
        .iter()
        .map(|(frames, y)| {
            let psi = frames
                .iter()
                .map(|f| basis.extract_expression(f).map(|(p, _)| p))
                .collect::<Result<Vec<_>>>()?;
            Ok((psi, *y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(emo_acc_sequences(clf, &seqs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::emotion_prototypes;
    use rand::Rng;

    fn dataset(seed: u64, n: usize) -> Vec<(ExpressionVector, EmotionLabel)> {
        let protos = emotion_prototypes(10, 1).unwrap();
        let mut rng = rng_for(seed, &[]);
        let mut out = Vec::new();
        for (label, p) in protos.iter() {
            for _ in 0..n {
                out.push((p.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect(), label));
            }
        }
        out
    }

    #[test]
    fn classifier_learns_prototype_clusters() {
        let cfg = ClassifierConfig::default();
        let (clf, acc) = train_emo_classifier(&dataset(1, 20), &dataset(2, 10), &cfg).unwrap();
        assert!(acc >= 0.95);
        let protos = emotion_prototypes(10, 1).unwrap();
        for (label, p) in protos.iter() {
            assert_eq!(clf.classify(p), label);
        }
        let (again, _) = train_emo_classifier(&dataset(1, 20), &dataset(2, 10), &cfg).unwrap();
        assert_eq!(clf, again);
    }

    #[test]
    fn untrainable_classifier_is_a_training_error() {
        let cfg = ClassifierConfig {
            steps: 0,
            ..ClassifierConfig::default()
        };
        let r = train_emo_classifier(&dataset(1, 5), &dataset(2, 5), &cfg);
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn emo_acc_uses_clip_majority_and_ignores_order() {
        let cfg = ClassifierConfig::default();
        let (clf, _) = train_emo_classifier(&dataset(1, 20), &dataset(2, 10), &cfg).unwrap();
        let protos = emotion_prototypes(10, 1).unwrap();
        let happy = protos.get(EmotionLabel::Happy).clone();
        let sad = protos.get(EmotionLabel::Sad).clone();
        let clip = vec![happy.clone(), sad.clone(), happy.clone()];
        let mut rev = clip.clone();
        rev.reverse();
        let a = emo_acc_sequences(&clf, &[(clip, EmotionLabel::Happy)]);
        let b = emo_acc_sequences(&clf, &[(rev, EmotionLabel::Happy)]);
        assert_eq!((a, b), (1.0, 1.0));
        let wrong = emo_acc_sequences(&clf, &[(vec![sad], EmotionLabel::Happy)]);
        assert_eq!(wrong, 0.0);
    }
}
