use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mars_core::cli::{
    cmd_ablate, cmd_detect, cmd_eval, cmd_synth, cmd_train, DetectArgs, EvalArgs, RunConfig, SynthArgs,
};
use mars_core::error::MarsError;
use mars_core::evaluation::{ApMode, EvalConfig};

/// Underwater object detector with attention blocks and a domain classifier.
///
/// Exit codes: 0 success, 1 validation error, 2 runtime failure.
/// MARS_SEED overrides the seed of train and ablate configs.
#[derive(Parser)]
#[command(name = "mars", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        config: Option<PathBuf>,
        /// Print a config with every default filled in and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Evaluate a checkpoint on a dataset (JSON manifest or VOC directory).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
        /// Score the ground truth itself; no checkpoint needed.
        #[arg(long)]
        oracle: bool,
        /// Letterbox size used in oracle mode.
        #[arg(long, default_value_t = 416)]
        input_size: usize,
        #[arg(long, default_value_t = 0.05)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        nms_iou: f64,
        /// Use 11-point interpolation instead of all-point.
        #[arg(long)]
        eleven_point: bool,
    },
    /// Run a checkpoint on one image and draw the boxes.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        nms_iou: f64,
    },
    /// Train and evaluate the variants of an ablation spec.
    Ablate { spec: PathBuf },
    /// Write a synthetic shape dataset.
    Synth {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 416)]
        size: u32,
        /// Also write the seven-domain augmented manifest.
        #[arg(long)]
        augment: bool,
    },
}

fn run(cmd: Command) -> Result<(), MarsError> {
    match cmd {
        Command::Train {
            config,
            print_defaults,
        } => {
            if print_defaults {
                let cfg = RunConfig {
                    seed: 0,
                    output_dir: "runs".into(),
                    model: Default::default(),
                    train: Default::default(),
                    data: Default::default(),
                    eval: Default::default(),
                };
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let config = config.ok_or_else(|| MarsError::config("train needs a config path"))?;
            let out = cmd_train(&config)?;
            if let Some(last) = out.history.records.last() {
                println!(
                    "trained {} epochs ({} steps), final loss {:.6}",
                    last.epoch, out.history.steps, last.loss.total
                );
            }
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            oracle,
            input_size,
            conf,
            nms_iou,
            eleven_point,
        } => {
            let eval = EvalConfig {
                conf_threshold: conf,
                nms_iou_threshold: nms_iou,
                ap_mode: if eleven_point {
                    ApMode::ElevenPoint
                } else {
                    ApMode::AllPoint
                },
                ..Default::default()
            };
            let res = cmd_eval(&EvalArgs {
                checkpoint,
                dataset,
                out_dir: out.clone(),
                oracle,
                input_size,
                eval,
            })?;
            for (c, ap) in res.result.classes.iter().zip(&res.result.per_class_ap) {
                println!("{c:<12} {:>6.2}", ap * 100.0);
            }
            println!("{:<12} {:>6.2}", "mAP", res.result.map * 100.0);
            println!("reports: {}", out.display());
        }
        Command::Detect {
            checkpoint,
            image,
            out,
            conf,
            nms_iou,
        } => {
            let res = cmd_detect(&DetectArgs {
                checkpoint,
                image,
                out_dir: out,
                conf_threshold: conf,
                nms_iou_threshold: nms_iou,
            })?;
            for d in &res.detections {
                println!(
                    "{} {:.3} {:.1} {:.1} {:.1} {:.1}",
                    d.class, d.confidence, d.x_min, d.y_min, d.x_max, d.y_max
                );
            }
            println!(
                "{} detections, drawn to {}",
                res.detections.len(),
                res.rendered.display()
            );
        }
        Command::Ablate { spec } => {
            for t in cmd_ablate(&spec)? {
                println!("{}", t.to_markdown());
            }
        }
        Command::Synth {
            n,
            seed,
            out,
            size,
            augment,
        } => {
            let m = cmd_synth(&SynthArgs {
                n,
                seed,
                out_dir: out.clone(),
                image_size: size,
                augment,
            })?;
            println!("wrote {} images to {}", m.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
