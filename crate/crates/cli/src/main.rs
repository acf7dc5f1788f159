use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emodiff::exprgen::EmotionLabel;
use emodiff::parallel::threads_from_env;
use emodiff::pipeline::{
    cmd_eval, cmd_gen_data, cmd_report, cmd_sample, cmd_train_diffusion, cmd_train_exprgen, Layout, ReferenceMode,
    RunConfig, SampleInputs,
};
use emodiff::synthworld::{pgm::read_pgm, AudioTrack};
use emodiff::Result;

/// Emotion-controllable talking-head generation on a synthetic face world.
///
/// Set EMODIFF_THREADS to a positive number to parallelise corpus generation
/// and evaluation; 0 or unset runs single-threaded and bit-reproducibly.
#[derive(Parser, Debug)]
#[command(name = "emodiff", version)]
struct Cli {
    /// Run configuration (TOML, one table per section); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root directory.
    #[arg(long, global = true, default_value = "emodiff-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus under <out>/corpus.
    GenData,
    /// Train the expression-sequence GAN on the highest-intensity clips.
    TrainExprgen {
        /// Also train the four discriminator ablations.
        #[arg(long)]
        ablations: bool,
    },
    /// Train the conditional denoiser.
    TrainDiffusion {
        /// Continue from <out>/diffusion/checkpoint.bin.
        #[arg(long)]
        resume: bool,
        /// Total optimizer steps (overrides train.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Synthesise one clip at a given emotion and intensity.
    Sample(SampleArgs),
    /// Evaluate the trained models and write <out>/eval/metrics.csv.
    Eval {
        /// Render expressions with the face model instead of the denoiser.
        #[arg(long)]
        oracle_render: bool,
    },
    /// Regenerate <out>/report from the evaluation artifacts.
    Report,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    label: Option<EmotionLabel>,
    /// Emotion intensity k in [0, 1].
    #[arg(long)]
    intensity: Option<f64>,
    /// Frames to generate when no audio file is given.
    #[arg(long)]
    frames: Option<usize>,
    /// Identity image (binary PGM) instead of the configured identity.
    #[arg(long)]
    identity_pgm: Option<PathBuf>,
    /// Audio track CSV (as written into corpus clips) instead of synthetic audio.
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Use the synthetic world's emotion prototypes as references.
    #[arg(long)]
    oracle_references: bool,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let threads = threads_from_env()?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::GenData => {
            let s = cmd_gen_data(&cfg, &layout, threads)?;
            println!(
                "corpus {}: {} labeled clips, {} unlabeled clips, {} frames",
                layout.corpus().display(),
                s.labeled_clips,
                s.unlabeled_clips,
                s.frames
            );
        }
        Command::TrainExprgen { ablations } => {
            for (name, h) in cmd_train_exprgen(&cfg, &layout, ablations)? {
                match h.steps.last() {
                    Some(last) => println!(
                        "exprgen {name}: {} steps, loss_d {:.4}, loss_g {:.4}, mse {:.4}",
                        h.steps.len(),
                        last.loss_d,
                        last.loss_g,
                        last.mse
                    ),
                    None => println!("exprgen {name}: 0 steps (initial parameters saved)"),
                }
            }
        }
        Command::TrainDiffusion { resume, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let state = cmd_train_diffusion(&cfg, &layout, resume)?;
            println!("diffusion checkpoint at step {}: {}", state.step, layout.diffusion_checkpoint().display());
        }
        Command::Sample(a) => {
            if let Some(l) = a.label {
                cfg.sample.label = l;
            }
            if let Some(k) = a.intensity {
                cfg.sample.intensity = k;
            }
            if let Some(n) = a.frames {
                cfg.sample.frames = n;
            }
            if a.oracle_references {
                cfg.sample.reference = ReferenceMode::Oracle;
            }
            cfg.validate()?;
            let inputs = SampleInputs {
                identity: a.identity_pgm.as_deref().map(read_pgm).transpose()?,
                audio: a.audio.as_deref().map(AudioTrack::read_csv).transpose()?,
            };
            let dir = cmd_sample(&cfg, &layout, &inputs)?;
            println!("clip written to {}", dir.display());
        }
        Command::Eval { oracle_render } => {
            cfg.eval.oracle_render |= oracle_render;
            let out = cmd_eval(&cfg, &layout, threads)?;
            for r in &out.rows {
                println!("{:<24} {}", r.metric, r.display());
            }
        }
        Command::Report => {
            let s = cmd_report(&layout)?;
            println!("report with {} metric rows at {}", s.rows, layout.report().display());
        }
        Command::PrintConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let user_facing = e.use_stderr();
            let _ = e.print();
            return if user_facing { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
