//! Conditional expression-sequence GAN.

mod discriminator;
mod generator;
mod loss;
mod sequence;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discriminator::{GlobalDiscriminator, GlobalOutput, LocalDiscriminator, LocalOutput, TemporalBlock};
pub use generator::{Generator, LstmCell, RolloutCache};
pub use loss::{
    cross_entropy, loss_disc_global, loss_disc_local, loss_generator, neg_log, neg_log_complement,
    GeneratorLoss, GlobalDiscLoss, LocalDiscLoss, PROB_MAX, PROB_MIN,
};
pub use sequence::{
    read_expression_csv, write_expression_csv, EmotionLabel, ExpressionSequence, ExpressionVector,
    EXPRESSION_CLAMP,
};
pub use train::{
    generate_sequence, sample_noise, train_gan, write_embedding_csv, Discriminators, GanHistory, GanModel,
    GanStepStats, DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub expr_dim: usize,
    pub noise_dim: usize,
    pub hidden_dim: usize,
    pub label_dim: usize,
    pub disc_channels: usize,
    pub tcn_levels: usize,
    pub tcn_kernel: usize,
    pub lambda_mse: f64,
    pub lambda_cls: f64,
    pub use_tcn: bool,
    pub use_local_disc: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            expr_dim: 50,
            noise_dim: 16,
            hidden_dim: 64,
            label_dim: 16,
            disc_channels: 32,
            tcn_levels: 3,
            tcn_kernel: 3,
            lambda_mse: 10.0,
            lambda_cls: 1.0,
            use_tcn: true,
            use_local_disc: true,
            lr: 2e-4,
            steps: 1500,
            batch: 8,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("expr_dim", self.expr_dim),
            ("noise_dim", self.noise_dim),
            ("hidden_dim", self.hidden_dim),
            ("label_dim", self.label_dim),
            ("disc_channels", self.disc_channels),
            ("tcn_levels", self.tcn_levels),
            ("tcn_kernel", self.tcn_kernel),
            ("batch", self.batch),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("gan.{name} must be positive")));
        }
        if !(self.lambda_mse >= 0.0 && self.lambda_cls >= 0.0) {
            return Err(Error::config("gan loss weights must be non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("gan.lr must be positive"));
        }
        Ok(())
    }

    /// The four discriminator ablations: `{tcn, plain conv} × {with, without local}`.
    pub fn ablations(&self) -> [GanConfig; 4] {
        let mk = |use_tcn, use_local_disc| GanConfig {
            use_tcn,
            use_local_disc,
            ..self.clone()
        };
        [mk(true, true), mk(true, false), mk(false, true), mk(false, false)]
    }

    pub fn ablation_name(&self) -> &'static str {
        match (self.use_tcn, self.use_local_disc) {
            (true, true) => "tcn+local",
            (true, false) => "tcn",
            (false, true) => "conv+local",
            (false, false) => "conv",
        }
    }
}
