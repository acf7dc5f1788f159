//! Evaluation measures: editing linearity (FLIE, LIE proxy), emotion
//! accuracy through a stand-in classifier, PSNR, SSIM and a lip-sync proxy.

mod classifier;
mod image;
mod linearity;
mod rows;

pub use classifier::{
    emo_acc, emo_acc_sequences, majority_vote, train_emo_classifier, ClassifierConfig,
    EmotionClassifier, CLASSIFIER_MIN_ACCURACY,
};
pub use image::{lip_sync_proxy, pearson, psnr, spearman, ssim, PSNR_CAP, SSIM_STRIDE, SSIM_WINDOW};
pub use linearity::{
    clip_distance, coefficient_of_variation, flie, flie_report, lie, lie_from_distances,
    TrajectoryReport, CV_EPS,
};
pub use rows::{read_metrics_csv, write_jsonl, write_metrics_csv, MetricRow, METRICS_HEADER};
