//! Orchestration: corpus generation, both training loops, autoregressive
//! sampling, evaluation and reporting, with their on-disk artifacts.

mod checkpoint;
mod commands;
mod config;
mod data;
mod eval;
mod report;
mod sample;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use commands::{
    cmd_gen_data, cmd_sample, cmd_train_diffusion, cmd_train_exprgen, gan_corpus, load_diffusion, load_exprgen,
    save_diffusion, write_clip_frames, Layout, SampleInputs, DIFFUSION_KIND, EXPRGEN_KIND,
};
pub use config::{DiffusionTrainConfig, EvalConfig, ReferenceMode, RunConfig, SampleConfig, Shards};
pub use data::{extract_sequence, load_training_clips, motion_frames, prepare_clip, sample_example, TrainClip};
pub use eval::{cmd_eval, evaluate, exprgen_emo_acc, EvalOutput, Renderer, TrajectoryDetail};
pub use report::{cmd_report, line_plot, ReportSummary, PLOT_HEIGHT, PLOT_WIDTH};
pub use sample::{
    identity_frame, mean_direction, oracle_clip, project, reference_sequences, sample_clip, Provenance,
};
pub use train::{train_diffusion, write_history_csv, DiffusionState, DiffusionStepStats};
