//! Noise schedule, forward noising, reverse-step parameterisation with
//! learned variance interpolation, and the training losses.
//!
//! Step indices are 1-based throughout: `t ∈ 1..=T`, with `ᾱ_0 := 1`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Floor applied to `log β̃_t`; `β̃_1 = 0` would otherwise give `log 0`.
pub const LOG_VARIANCE_FLOOR: f64 = -46.051_701_859_880_914; // ln(1e-20)

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_betas: Vec<f64>,
    log_betas: Vec<f64>,
    log_posterior_betas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// 100 steps with the 1000-step linear schedule rescaled by `1000/T`.
    fn default() -> Self {
        let steps = 100;
        let scale = 1000.0 / steps as f64;
        ScheduleConfig {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linearly interpolated β from `beta_start` to `beta_end` over `steps`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "schedule requires 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_betas: Vec<f64> = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        let log_betas = betas.iter().map(|b| b.ln()).collect();
        let log_posterior_betas = posterior_betas
            .iter()
            .map(|&b| if b > 0.0 { b.ln().max(LOG_VARIANCE_FLOOR) } else { LOG_VARIANCE_FLOOR })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            posterior_betas,
            log_betas,
            log_posterior_betas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range {
                what: "diffusion step",
                value: t as f64,
                range: "1..=T",
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_betas[t - 1]
    }

    pub fn log_beta(&self, t: usize) -> f64 {
        self.log_betas[t - 1]
    }

    pub fn log_posterior_beta(&self, t: usize) -> f64 {
        self.log_posterior_betas[t - 1]
    }

    /// Columns `t, beta, alpha_bar, posterior_beta`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,beta,alpha_bar,posterior_beta")?;
        for t in 1..=self.steps() {
            writeln!(
                w,
                "{},{},{},{}",
                t,
                self.beta(t),
                self.alpha_bar(t),
                self.posterior_beta(t)
            )?;
        }
        Ok(())
    }

    /// Coefficients `(c0, ct)` of the true posterior mean
    /// `μ̃_t = c0·x0 + ct·x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }
}

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    a.check_same_shape(b, op)
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    check_pair(x0, eps, "q_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Reverse-step mean `(x_t − β_t/sqrt(1−ᾱ_t)·eps_pred) / sqrt(α_t)`.
pub fn predict_mu(x_t: &Tensor, t: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    check_pair(x_t, eps_pred, "predict_mu")?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    x_t.zip_map(eps_pred, |x, e| inv * (x - coef * e))
}

/// Reverse-step variance `exp(v·log β_t + (1−v)·log β̃_t)`; `v` is clamped to [0,1].
pub fn predict_sigma(v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let (lb, lp) = (sched.log_beta(t), sched.log_posterior_beta(t));
    Ok(v.map(|x| {
        let x = x.clamp(0.0, 1.0);
        (x * lb + (1.0 - x) * lp).exp()
    }))
}

/// Maps a raw network channel to `v ∈ [0,1]` via `(tanh + 1)/2`.
pub fn v_from_raw(raw: &Tensor) -> Tensor {
    raw.map(|r| 0.5 * (r.tanh() + 1.0))
}

/// `dv/draw` for [`v_from_raw`].
pub fn v_from_raw_grad(raw: &Tensor) -> Tensor {
    raw.map(|r| {
        let th = r.tanh();
        0.5 * (1.0 - th * th)
    })
}

/// One ancestral step. At `t = 1` the noise term is dropped and the mean is returned.
pub fn p_sample(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    v_pred: &Tensor,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mu = predict_mu(x_t, t, eps_pred, sched)?;
    if t == 1 {
        return Ok(mu);
    }
    check_pair(x_t, noise, "p_sample")?;
    let var = predict_sigma(v_pred, t, sched)?;
    check_pair(x_t, &var, "p_sample")?;
    let mut out = mu;
    for ((o, s), n) in out.data_mut().iter_mut().zip(var.data()).zip(noise.data()) {
        *o += s.sqrt() * n;
    }
    Ok(out)
}

/// Mean squared error over all elements.
pub fn loss_simple(eps: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    check_pair(eps, eps_pred, "loss_simple")?;
    let n = eps.len() as f64;
    Ok(eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn loss_simple_grad(eps: &Tensor, eps_pred: &Tensor) -> Tensor {
    let n = eps.len() as f64;
    eps_pred
        .zip_map(eps, |p, e| 2.0 * (p - e) / n)
        .expect("shapes checked by caller")
}

/// Mean over elements of `KL(N(mu1, var1) ‖ N(mu2, var2))`.
pub fn kl_gaussians(mu1: &Tensor, var1: &Tensor, mu2: &Tensor, var2: &Tensor) -> Result<f64> {
    check_pair(mu1, var1, "kl_gaussians")?;
    check_pair(mu1, mu2, "kl_gaussians")?;
    check_pair(mu1, var2, "kl_gaussians")?;
    let mut total = 0.0;
    for i in 0..mu1.len() {
        let (m1, v1, m2, v2) = (mu1.data()[i], var1.data()[i], mu2.data()[i], var2.data()[i]);
        if !(v1 > 0.0 && v2 > 0.0) {
            return Err(Error::Domain(format!(
                "kl_gaussians: variances must be positive, got {v1} and {v2} at element {i}"
            )));
        }
        total += 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0);
    }
    Ok(total / mu1.len() as f64)
}

/// Variational bound term at step `t` together with its gradient with
/// respect to `v_pred`. The model mean is treated as a constant (gradient
/// stopped), so only the variance head receives signal from this term.
///
/// * `t ≥ 2`: `KL(q(x_{t−1}|x_t, x0) ‖ p(x_{t−1}|x_t))`
/// * `t = 1`: Gaussian negative log-likelihood `−log p(x0|x1)`
pub fn loss_vlb_term_with_grad(
    x0: &Tensor,
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    v_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<(f64, Tensor)> {
    sched.check_step(t)?;
    check_pair(x0, x_t, "loss_vlb_term")?;
    check_pair(x0, v_pred, "loss_vlb_term")?;
    let mu = predict_mu(x_t, t, eps_pred, sched)?;
    let (lb, lp) = (sched.log_beta(t), sched.log_posterior_beta(t));
    let dlog_dv = lb - lp;
    let n = x0.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; x0.len()];
    if t == 1 {
        for i in 0..x0.len() {
            let v = v_pred.data()[i].clamp(0.0, 1.0);
            let log_var = v * lb + (1.0 - v) * lp;
            let var = log_var.exp();
            let d2 = (x0.data()[i] - mu.data()[i]).powi(2);
            total += 0.5 * (LN_2PI + log_var + d2 / var);
            grad[i] = 0.5 * (1.0 - d2 / var) * dlog_dv / n;
        }
    } else {
        let (c0, ct) = sched.posterior_mean_coefs(t);
        let post_var = sched.posterior_beta(t);
        for i in 0..x0.len() {
            let true_mu = c0 * x0.data()[i] + ct * x_t.data()[i];
            let v = v_pred.data()[i].clamp(0.0, 1.0);
            let log_var = v * lb + (1.0 - v) * lp;
            let var = log_var.exp();
            let d2 = (true_mu - mu.data()[i]).powi(2);
            total += 0.5 * (log_var - lp + (post_var + d2) / var - 1.0);
            grad[i] = 0.5 * (1.0 - (post_var + d2) / var) * dlog_dv / n;
        }
    }
    for (g, &v) in grad.iter_mut().zip(v_pred.data()) {
        if !(0.0..=1.0).contains(&v) {
            *g = 0.0;
        }
    }
    Ok((total / n, Tensor::new(x0.shape().to_vec(), grad)?))
}

pub fn loss_vlb_term(
    x0: &Tensor,
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    v_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    loss_vlb_term_with_grad(x0, x_t, t, eps_pred, v_pred, sched).map(|(l, _)| l)
}

/// Squared eps error restricted to a binary mask, normalised by mask area.
/// `mask` covers the spatial extents and is broadcast over channels.
pub fn region_loss(eps: &Tensor, eps_pred: &Tensor, mask: &Tensor) -> Result<f64> {
    region_loss_with_grad(eps, eps_pred, mask).map(|(l, _)| l)
}

pub fn region_loss_with_grad(eps: &Tensor, eps_pred: &Tensor, mask: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(eps, eps_pred, "region_loss")?;
    let plane = mask.len();
    if eps.len() % plane != 0 || mask.shape() != &eps.shape()[eps.rank() - mask.rank()..] {
        return Err(Error::Dimension {
            op: "region_loss",
            left: eps.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let channels = eps.len() / plane;
    let area = mask.data().iter().filter(|&&m| m != 0.0).count();
    if area == 0 {
        return Err(Error::config("region_loss: empty mask"));
    }
    let denom = (area * channels) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; eps.len()];
    for i in 0..eps.len() {
        if mask.data()[i % plane] != 0.0 {
            let d = eps_pred.data()[i] - eps.data()[i];
            total += d * d;
            grad[i] = 2.0 * d / denom;
        }
    }
    Ok((total / denom, Tensor::new(eps.shape().to_vec(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_vlb: f64,
    pub lambda_lip: f64,
    pub lambda_eye: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_vlb: 0.001,
            lambda_lip: 1.0,
            lambda_eye: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_vlb", self.lambda_vlb),
            ("lambda_lip", self.lambda_lip),
            ("lambda_eye", self.lambda_eye),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub simple: f64,
    pub vlb: f64,
    pub lip: f64,
    pub eye: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.simple.is_finite() && self.vlb.is_finite() && self.lip.is_finite() && self.eye.is_finite()
    }
}

/// `L_simple + λ_vlb·L_vlb + λ_lip·L_lip + λ_eye·L_eye`.
pub fn loss_final(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.simple + w.lambda_vlb * parts.vlb + w.lambda_lip * parts.lip + w.lambda_eye * parts.eye
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn s(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn single_step_schedule() {
        let sch = NoiseSchedule::from_betas(vec![0.1]).unwrap();
        assert!((sch.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(sch.posterior_beta(1), 0.0);
        assert_eq!(sch.log_posterior_beta(1), LOG_VARIANCE_FLOOR);
    }

    #[test]
    fn three_step_schedule_tables() {
        let sch = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let ab: Vec<f64> = (1..=3).map(|t| sch.alpha_bar(t)).collect();
        for (a, e) in ab.iter().zip([0.9, 0.72, 0.504]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((sch.posterior_beta(2) - 0.071_428_571_428_571_4).abs() < 1e-12);
        let lin = build_schedule(3, 0.1, 0.3).unwrap();
        assert!((lin.beta(2) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_perturbs_adequately() {
        let sch = ScheduleConfig::default().build().unwrap();
        assert_eq!(sch.steps(), 100);
        for t in 2..=100 {
            assert!(sch.alpha_bar(t) < sch.alpha_bar(t - 1));
        }
        assert!(sch.alpha_bar(100) < 0.05);
    }

    #[test]
    fn q_sample_examples() {
        let sch = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x = q_sample(&s(2.0), 1, &s(1.0), &sch).unwrap();
        assert!((x.data()[0] - 1.866_025_403_784_438_6).abs() < 1e-12);
        let x = q_sample(&s(2.0), 1, &s(0.0), &sch).unwrap();
        assert_eq!(x.data()[0], 0.5 * 2.0);
        assert!(q_sample(&s(2.0), 2, &s(0.0), &sch).is_err());
        let tiny = NoiseSchedule::from_betas(vec![1e-300]).unwrap();
        assert_eq!(q_sample(&s(0.37), 1, &s(5.0), &tiny).unwrap().data()[0], 0.37);
    }

    #[test]
    fn predict_mu_inverts_single_step() {
        let sch = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let mu = predict_mu(&s(1.866_025_403_784_438_6), 1, &s(1.0), &sch).unwrap();
        assert!((mu.data()[0] - 2.0).abs() < 1e-12);
        let mu0 = predict_mu(&s(1.5), 1, &s(0.0), &sch).unwrap();
        assert_eq!(mu0.data()[0], 1.5 / 0.5);
    }

    #[test]
    fn predict_sigma_examples() {
        let sch = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let v1 = predict_sigma(&s(1.0), 2, &sch).unwrap().data()[0];
        let v0 = predict_sigma(&s(0.0), 2, &sch).unwrap().data()[0];
        assert!((v1 - sch.beta(2)).abs() < 1e-15);
        assert!((v0 - sch.posterior_beta(2)).abs() < 1e-15);
        // geometric mean case: β=0.2, β̃=0.05 → 0.1
        let geo = (0.5 * 0.2f64.ln() + 0.5 * 0.05f64.ln()).exp();
        assert!((geo - 0.1).abs() < 1e-15);
    }

    #[test]
    fn p_sample_examples() {
        let sch = NoiseSchedule::from_betas(vec![0.04, 0.04]).unwrap();
        let x = s(0.3);
        let e = s(0.2);
        let mu = predict_mu(&x, 2, &e, &sch).unwrap();
        assert_eq!(p_sample(&x, 2, &e, &s(1.0), &s(0.0), &sch).unwrap(), mu);
        let mu1 = predict_mu(&x, 1, &e, &sch).unwrap();
        assert_eq!(p_sample(&x, 1, &e, &s(1.0), &s(3.0), &sch).unwrap(), mu1);
        // v = 1 → σ² = β_2 = 0.04, noise 2 → +0.4
        let y = p_sample(&x, 2, &e, &s(1.0), &s(2.0), &sch).unwrap();
        assert!((y.data()[0] - (mu.data()[0] + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn simple_loss_examples() {
        let a = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(loss_simple(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_simple(&a, &Tensor::from_vec(vec![1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(loss_simple(&a, &Tensor::from_vec(vec![1.0, 3.0])).unwrap(), 5.0);
    }

    #[test]
    fn kl_examples() {
        let z = s(0.0);
        let one = s(1.0);
        assert_eq!(kl_gaussians(&z, &one, &z, &one).unwrap(), 0.0);
        assert!((kl_gaussians(&z, &one, &one, &one).unwrap() - 0.5).abs() < 1e-15);
        let kl = kl_gaussians(&z, &s(2.0), &z, &one).unwrap();
        assert!((kl - 0.153_426_409_720_027_35).abs() < 1e-12);
        assert!(matches!(kl_gaussians(&z, &z, &z, &one), Err(Error::Domain(_))));
    }

    #[test]
    fn vlb_variance_gradient_matches_finite_differences() {
        use crate::numerics::{grad_check, GradCheckConfig};
        let sch = build_schedule(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[6], 1.0, &mut rng);
        let eps = Tensor::randn(&[6], 1.0, &mut rng);
        let eps_pred = Tensor::randn(&[6], 1.0, &mut rng);
        let v = Tensor::new(vec![6], vec![0.1, 0.3, 0.5, 0.6, 0.8, 0.9]).unwrap();
        // at t = 1 the floored posterior variance makes small v extremely stiff
        let v_near_one = v.map(|x| 0.9 + 0.1 * x);
        for t in [1, 2, 4, 10] {
            let v = if t == 1 { v_near_one.clone() } else { v.clone() };
            let xt = q_sample(&x0, t, &eps, &sch).unwrap();
            let (_, g) = loss_vlb_term_with_grad(&x0, &xt, t, &eps_pred, &v, &sch).unwrap();
            let rep = grad_check(
                |p| loss_vlb_term(&x0, &xt, t, &eps_pred, &p[0], &sch).unwrap(),
                &[v.clone()],
                &[g],
                GradCheckConfig::new(1e-4, 1e-9),
            )
            .unwrap();
            assert!(rep.passed(), "t={t} {rep:?}");
        }
    }

    #[test]
    fn vlb_term_examples() {
        let sch = build_schedule(10, 0.01, 0.2).unwrap();
        let t = 5;
        let (c0, ct) = sch.posterior_mean_coefs(t);
        let x0 = s(0.4);
        let eps = s(-0.7);
        let xt = q_sample(&x0, t, &eps, &sch).unwrap();
        // the true eps makes the model mean equal the posterior mean
        let mu = predict_mu(&xt, t, &eps, &sch).unwrap();
        let true_mu = c0 * 0.4 + ct * xt.data()[0];
        assert!((mu.data()[0] - true_mu).abs() < 1e-12);
        let v0 = s(0.0);
        assert!(loss_vlb_term(&x0, &xt, t, &eps, &v0, &sch).unwrap().abs() < 1e-12);

        // shift the model mean by sqrt(β̃): KL = Δ²/(2β̃) = 0.5
        let post = sch.posterior_beta(t);
        let shift = post.sqrt();
        let coef = sch.beta(t) / (1.0 - sch.alpha_bar(t)).sqrt() / sch.alpha(t).sqrt();
        let eps_shift = s(eps.data()[0] - shift / coef);
        let kl = loss_vlb_term(&x0, &xt, t, &eps_shift, &v0, &sch).unwrap();
        assert!((kl - 0.5).abs() < 1e-9, "{kl}");
    }

    #[test]
    fn vlb_nll_at_mode() {
        // with v = 1 the variance is β_1, so the NLL at the mode is 0.5·(ln 2π + ln β_1)
        let sch = NoiseSchedule::from_betas(vec![0.9, 0.95]).unwrap();
        let x0 = Tensor::from_vec(vec![0.1, -0.3]);
        let xt = q_sample(&x0, 1, &Tensor::from_vec(vec![0.5, 0.5]), &sch).unwrap();
        let coef = sch.beta(1) / (1.0 - sch.alpha_bar(1)).sqrt();
        let eps_pred = xt
            .zip_map(&x0, |x, z| (x - sch.alpha(1).sqrt() * z) / coef)
            .unwrap();
        let v = Tensor::filled(&[2], 1.0);
        let nll = loss_vlb_term(&x0, &xt, 1, &eps_pred, &v, &sch).unwrap();
        assert!((nll - 0.5 * (LN_2PI + 0.9f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn region_loss_examples() {
        let eps = Tensor::zeros(&[1, 8, 8]);
        let mut pred = Tensor::zeros(&[1, 8, 8]);
        let mut mask = Tensor::zeros(&[8, 8]);
        for &i in &[9usize, 10, 17, 18] {
            mask.data_mut()[i] = 1.0;
            pred.data_mut()[i] = 1.0;
        }
        assert!((region_loss(&eps, &pred, &mask).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(region_loss(&eps, &eps, &mask).unwrap(), 0.0);
        let ones = Tensor::filled(&[8, 8], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        assert!((region_loss(&eps, &p, &ones).unwrap() - loss_simple(&eps, &p).unwrap()).abs() < 1e-14);
        assert!(matches!(
            region_loss(&eps, &p, &Tensor::zeros(&[8, 8])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn final_loss_examples() {
        let parts = LossParts {
            simple: 1.0,
            vlb: 2.0,
            lip: 3.0,
            eye: 4.0,
        };
        let zero = LossWeights {
            lambda_vlb: 0.0,
            lambda_lip: 0.0,
            lambda_eye: 0.0,
        };
        assert_eq!(loss_final(&parts, &zero), 1.0);
        assert!((loss_final(&parts, &LossWeights::default()) - 8.002).abs() < 1e-12);
        assert_eq!(loss_final(&LossParts::default(), &LossWeights::default()), 0.0);
    }

    #[test]
    fn q_sample_moments() {
        let sch = ScheduleConfig::default().build().unwrap();
        let t = 40;
        let x0 = s(0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                q_sample(&x0, t, &s(e), &sch).unwrap().data()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = sch.alpha_bar(t);
        let se = ((1.0 - ab) / n as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.8).abs() < 3.0 * se);
        assert!((var - (1.0 - ab)).abs() < 3.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
    }
}
